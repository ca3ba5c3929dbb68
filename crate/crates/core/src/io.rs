//! Artifact formats shared by the pipeline stages and the CLI.
//!
//! Matrices are CSV with a `# theta_checksum=<hex>` line, a header row of
//! task ids, and values printed with 17 significant digits. JSON artifacts
//! carry the checksum as a `theta_checksum` field.

use crate::{Error, Result};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub fn checksum_hex(sum: [u8; 8]) -> String {
    hex::encode(sum)
}

pub fn parse_checksum(s: &str) -> Result<[u8; 8]> {
    let bytes = hex::decode(s.trim()).map_err(|e| Error::Format(format!("bad checksum {s:?}: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| Error::Format(format!("checksum {s:?} is not 8 bytes")))
}

/// Fails with a stale-artifact error when `found` differs from `expected`.
pub fn ensure_checksum(path: &Path, expected: [u8; 8], found: [u8; 8]) -> Result<()> {
    if expected != found {
        return Err(Error::Stale {
            path: path.to_path_buf(),
            expected: checksum_hex(expected),
            found: checksum_hex(found),
        });
    }
    Ok(())
}

/// Writes a file, creating missing parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn matrix_csv(m: &DMatrix<f64>, checksum: Option<[u8; 8]>) -> String {
    let mut out = String::new();
    if let Some(sum) = checksum {
        out.push_str(&format!("# theta_checksum={}\n", checksum_hex(sum)));
    }
    let header: Vec<String> = (0..m.ncols()).map(|j| j.to_string()).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>, checksum: Option<[u8; 8]>) -> Result<()> {
    write_text(path, &matrix_csv(m, checksum))
}

/// Parses a square matrix written by [`matrix_csv`].
pub fn parse_matrix_csv(text: &str) -> Result<(DMatrix<f64>, Option<[u8; 8]>)> {
    let mut checksum = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut header_seen = false;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("theta_checksum=") {
                checksum = Some(parse_checksum(v)?);
            }
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let row = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad matrix entry {c:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Format(format!("matrix with {n} rows is not square")));
    }
    Ok((DMatrix::from_fn(n, n, |i, j| rows[i][j]), checksum))
}

pub fn read_matrix_csv(path: &Path) -> Result<(DMatrix<f64>, Option<[u8; 8]>)> {
    parse_matrix_csv(&read_text(path)?)
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// A JSON payload tagged with the checksum of the meta-policy it derives from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub theta_checksum: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Stamped<T> {
    pub fn new(checksum: [u8; 8], body: T) -> Self {
        Stamped {
            theta_checksum: checksum_hex(checksum),
            body,
        }
    }

    pub fn checked(self, path: &Path, expected: [u8; 8]) -> Result<T> {
        ensure_checksum(path, expected, parse_checksum(&self.theta_checksum)?)?;
        Ok(self.body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trips_bit_exactly() {
        let m = DMatrix::from_fn(3, 3, |i, j| (i as f64 + 1.0) / (j as f64 + 3.0) - 0.1);
        let text = matrix_csv(&m, Some([1, 2, 3, 4, 5, 6, 7, 8]));
        assert!(text.starts_with("# theta_checksum=0102030405060708\n0,1,2\n"));
        let (back, sum) = parse_matrix_csv(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(sum, Some([1, 2, 3, 4, 5, 6, 7, 8]));
    }

    #[test]
    fn ragged_matrix_is_rejected() {
        assert!(parse_matrix_csv("0,1\n1.0,2.0\n3.0\n").is_err());
    }

    #[test]
    fn stamped_checksum_mismatch_is_stale() {
        #[derive(Serialize, Deserialize, Debug, PartialEq)]
        struct Body {
            x: f64,
        }
        let s = Stamped::new([9; 8], Body { x: 0.1 });
        let text = to_json(&s).unwrap();
        let back: Stamped<Body> = serde_json::from_str(&text).unwrap();
        assert_eq!(back.body.x, 0.1);
        let err = back.checked(Path::new("a.json"), [8; 8]).unwrap_err();
        assert!(matches!(err, Error::Stale { .. }));
    }
}
