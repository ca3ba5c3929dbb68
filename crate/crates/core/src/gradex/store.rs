use crate::net::ByteReader;
use crate::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const STORE_MAGIC: &[u8; 4] = b"GXS1";

/// One projected transition: sketch features, advantage sign and magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub task_id: usize,
    pub features: Vec<f32>,
    pub label: i8,
    pub weight: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub p: usize,
    pub d: usize,
    pub n_tasks: usize,
    pub projection_seed: u64,
    pub theta_checksum: [u8; 8],
}

/// Write-once collection of feature records for every task, taken at one
/// meta-policy.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStore {
    pub header: StoreHeader,
    pub records: Vec<FeatureRecord>,
}

impl GradientStore {
    /// Checks labels, weights, feature widths and task coverage.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        let mut seen = vec![false; h.n_tasks];
        for (i, r) in self.records.iter().enumerate() {
            if r.features.len() != h.d {
                return Err(Error::Format(format!(
                    "record {i} has {} features, header says {}",
                    r.features.len(),
                    h.d
                )));
            }
            if r.task_id >= h.n_tasks {
                return Err(Error::Format(format!("record {i} names task {} of {}", r.task_id, h.n_tasks)));
            }
            if r.label != 1 && r.label != -1 {
                return Err(Error::Format(format!("record {i} has label {}", r.label)));
            }
            if !(r.weight.is_finite() && r.weight >= 0.0) {
                return Err(Error::Format(format!("record {i} has weight {}", r.weight)));
            }
            if r.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("record {i} has non-finite features")));
            }
            seen[r.task_id] = true;
        }
        if let Some(t) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("task {t} has no records")));
        }
        Ok(())
    }

    pub fn checksum_hex(&self) -> String {
        hex::encode(self.header.theta_checksum)
    }

    pub fn task_records(&self, task: usize) -> impl Iterator<Item = &FeatureRecord> {
        self.records.iter().filter(move |r| r.task_id == task)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let h = &self.header;
        w.write_all(STORE_MAGIC)?;
        w.write_all(&(h.p as u32).to_le_bytes())?;
        w.write_all(&(h.d as u32).to_le_bytes())?;
        w.write_all(&(h.n_tasks as u32).to_le_bytes())?;
        w.write_all(&h.projection_seed.to_le_bytes())?;
        w.write_all(&h.theta_checksum)?;
        let mut buf = Vec::with_capacity(9 + 4 * h.d);
        for r in &self.records {
            buf.clear();
            buf.extend_from_slice(&(r.task_id as u32).to_le_bytes());
            buf.push(r.label as u8);
            buf.extend_from_slice(&r.weight.to_le_bytes());
            for x in &r.features {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != STORE_MAGIC {
            return Err(Error::Format("not a gradient store (bad magic)".into()));
        }
        let p = r.u32()? as usize;
        let d = r.u32()? as usize;
        let n_tasks = r.u32()? as usize;
        let projection_seed = r.u64()?;
        let mut theta_checksum = [0u8; 8];
        theta_checksum.copy_from_slice(r.take(8)?);
        let header = StoreHeader {
            p,
            d,
            n_tasks,
            projection_seed,
            theta_checksum,
        };
        let rec_len = 9 + 4 * d;
        if r.remaining() % rec_len != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes do not form whole {rec_len}-byte records",
                r.remaining()
            )));
        }
        let mut records = Vec::with_capacity(r.remaining() / rec_len);
        while !r.is_empty() {
            let task_id = r.u32()? as usize;
            let label = r.take(1)?[0] as i8;
            let weight = r.f32()?;
            let features = (0..d).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            records.push(FeatureRecord {
                task_id,
                features,
                label,
                weight,
            });
        }
        let store = GradientStore { header, records };
        store.validate()?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        crate::io::write_bytes(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses a store taken at a different meta-policy.
    pub fn ensure_checksum(&self, expected: [u8; 8], path: &Path) -> Result<()> {
        if self.header.theta_checksum != expected {
            return Err(Error::Stale {
                path: path.to_path_buf(),
                expected: hex::encode(expected),
                found: self.checksum_hex(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GradientStore {
        GradientStore {
            header: StoreHeader {
                p: 10,
                d: 3,
                n_tasks: 2,
                projection_seed: 77,
                theta_checksum: [1, 2, 3, 4, 5, 6, 7, 8],
            },
            records: vec![
                FeatureRecord {
                    task_id: 0,
                    features: vec![0.5, -1.25, 3.0e-7],
                    label: 1,
                    weight: 0.75,
                },
                FeatureRecord {
                    task_id: 1,
                    features: vec![f32::MIN_POSITIVE, 2.0, -0.0],
                    label: -1,
                    weight: 0.0,
                },
            ],
        }
    }

    #[test]
    fn binary_round_trip_is_lossless() {
        let s = sample();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GXS1");
        assert_eq!(buf.len(), 4 + 12 + 8 + 8 + 2 * (9 + 12));
        assert_eq!(GradientStore::from_bytes(&buf).unwrap(), s);
    }

    #[test]
    fn truncated_and_uncovered_stores_are_rejected() {
        let s = sample();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert!(GradientStore::from_bytes(&buf[..buf.len() - 1]).is_err());
        let mut one = s.clone();
        one.records.pop();
        assert!(matches!(one.validate(), Err(Error::Format(m)) if m.contains("task 1")));
    }

    #[test]
    fn stale_checksum_is_detected() {
        let s = sample();
        let err = s.ensure_checksum([0; 8], Path::new("x.gxs")).unwrap_err();
        assert!(matches!(err, Error::Stale { .. }));
        s.ensure_checksum([1, 2, 3, 4, 5, 6, 7, 8], Path::new("x.gxs")).unwrap();
    }
}
