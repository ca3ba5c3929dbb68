//! Small feed-forward networks over a flat parameter vector.
//!
//! Hidden layers use `tanh`; the output layer is linear. A policy reads its
//! output as categorical logits, a value network reads a single output unit.
//! Layer `l` stores its weights row-major as `fan_out x fan_in`, immediately
//! followed by its `fan_out` biases, so `theta` is the concatenation of all
//! layers in order.

use crate::linalg::{first_non_finite, gemm, norm2, norm_inf};
use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::ops::{Deref, DerefMut};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GXP1";

/// Flat parameters of a dense tanh network.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    layer_sizes: Vec<usize>,
    theta: Vec<f64>,
}

/// A gradient (or any direction) in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(pub Vec<f64>);

impl Deref for GradVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for GradVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for GradVector {
    fn from(v: Vec<f64>) -> Self {
        GradVector(v)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    offset: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Layer {
    fn weights(self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }
    fn bias(self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

/// Per-layer outputs of a batched forward pass, kept for backpropagation.
///
/// `layers[0]` is the input, `layers[1..L]` are post-`tanh` hidden
/// activations and `layers[L]` is the linear output.
#[derive(Debug, Clone)]
pub struct Activations {
    batch: usize,
    layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("at least one layer")
    }
}

impl PolicyParams {
    /// Number of parameters of a network with the given widths.
    pub fn count(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn new(layer_sizes: Vec<usize>, theta: Vec<f64>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::config(
                "layer_sizes",
                "need at least input and output widths, all positive",
            ));
        }
        let p = Self::count(&layer_sizes);
        if theta.len() != p {
            return Err(Error::Shape {
                expected: p,
                got: theta.len(),
            });
        }
        if let Some(i) = first_non_finite(&theta) {
            return Err(Error::numeric("parameters", i));
        }
        Ok(PolicyParams { layer_sizes, theta })
    }

    pub fn zeros(layer_sizes: Vec<usize>) -> Result<Self> {
        let p = Self::count(&layer_sizes);
        Self::new(layer_sizes, vec![0.0; p])
    }

    /// Uniform Glorot initialization with zero biases.
    pub fn init(layer_sizes: Vec<usize>, rng: &mut impl rand::Rng) -> Result<Self> {
        let mut params = Self::zeros(layer_sizes)?;
        for layer in params.layers() {
            let a = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut params.theta[layer.weights()] {
                *w = rng.random_range(-a..=a);
            }
        }
        Ok(params)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    /// Same architecture, different parameters.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.layer_sizes.clone(), theta)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    offset,
                    fan_in: w[0],
                    fan_out: w[1],
                };
                offset += (w[0] + 1) * w[1];
                layer
            })
            .collect()
    }

    /// Batched forward pass over `batch` row-major inputs.
    pub fn forward(&self, inputs: &[f64], batch: usize) -> Result<Activations> {
        let expected = batch * self.input_dim();
        if inputs.len() != expected {
            return Err(Error::Shape {
                expected,
                got: inputs.len(),
            });
        }
        let layers = self.layers();
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(inputs.to_vec());
        for (l, layer) in layers.iter().enumerate() {
            let prev = &acts[l];
            let bias = &self.theta[layer.bias()];
            let mut out = Vec::with_capacity(batch * layer.fan_out);
            for _ in 0..batch {
                out.extend_from_slice(bias);
            }
            gemm(
                batch,
                layer.fan_in,
                layer.fan_out,
                1.0,
                prev,
                (layer.fan_in, 1),
                &self.theta[layer.weights()],
                (1, layer.fan_in),
                1.0,
                &mut out,
                (layer.fan_out, 1),
            );
            if l + 1 < layers.len() {
                out.iter_mut().for_each(|x| *x = x.tanh());
            }
            acts.push(out);
        }
        Ok(Activations { batch, layers: acts })
    }

    /// Propagates output sensitivities back to the hidden layers, calling
    /// `visit(layer, delta, prev)` for every layer from last to first.
    fn backprop(
        &self,
        acts: &Activations,
        d_out: &[f64],
        mut visit: impl FnMut(Layer, &[f64], &[f64]),
    ) -> Result<()> {
        let batch = acts.batch;
        let expected = batch * self.output_dim();
        if d_out.len() != expected {
            return Err(Error::Shape {
                expected,
                got: d_out.len(),
            });
        }
        let layers = self.layers();
        let mut delta = d_out.to_vec();
        for l in (0..layers.len()).rev() {
            let layer = layers[l];
            let prev = &acts.layers[l];
            visit(layer, &delta, prev);
            if l > 0 {
                let mut d_prev = vec![0.0; batch * layer.fan_in];
                gemm(
                    batch,
                    layer.fan_out,
                    layer.fan_in,
                    1.0,
                    &delta,
                    (layer.fan_out, 1),
                    &self.theta[layer.weights()],
                    (layer.fan_in, 1),
                    0.0,
                    &mut d_prev,
                    (layer.fan_in, 1),
                );
                for (d, a) in d_prev.iter_mut().zip(prev) {
                    *d *= 1.0 - a * a;
                }
                delta = d_prev;
            }
        }
        Ok(())
    }

    /// Gradient of `sum_b <d_out[b], output[b]>` with respect to `theta`.
    pub fn backward(&self, acts: &Activations, d_out: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.dim()];
        let batch = acts.batch;
        self.backprop(acts, d_out, |layer, delta, prev| {
            gemm(
                layer.fan_out,
                batch,
                layer.fan_in,
                1.0,
                delta,
                (1, layer.fan_out),
                prev,
                (layer.fan_in, 1),
                1.0,
                &mut grad[layer.weights()],
                (layer.fan_in, 1),
            );
            let db = &mut grad[layer.bias()];
            for row in delta.chunks_exact(layer.fan_out) {
                for (g, d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
        })?;
        Ok(grad)
    }

    /// Per-sample gradients, row-major `batch x p`.
    pub fn backward_per_sample(&self, acts: &Activations, d_out: &[f64]) -> Result<Vec<f64>> {
        let p = self.dim();
        let mut grads = vec![0.0; acts.batch * p];
        self.backprop(acts, d_out, |layer, delta, prev| {
            for (b, row) in grads.chunks_exact_mut(p).enumerate() {
                let d = &delta[b * layer.fan_out..(b + 1) * layer.fan_out];
                let x = &prev[b * layer.fan_in..(b + 1) * layer.fan_in];
                let w = &mut row[layer.weights()];
                for (o, &dv) in d.iter().enumerate() {
                    for (slot, &xv) in w[o * layer.fan_in..(o + 1) * layer.fan_in].iter_mut().zip(x) {
                        *slot = dv * xv;
                    }
                }
                row[layer.bias()].copy_from_slice(d);
            }
        })?;
        Ok(grads)
    }

    /// Scalar outputs of a single-output network, one per input row.
    pub fn values(&self, states: &[f64], batch: usize) -> Result<Vec<f64>> {
        if self.output_dim() != 1 {
            return Err(Error::Shape {
                expected: 1,
                got: self.output_dim(),
            });
        }
        let acts = self.forward(states, batch)?;
        let out = acts.output().to_vec();
        if let Some(i) = first_non_finite(&out) {
            return Err(Error::numeric("value prediction", i));
        }
        Ok(out)
    }

    /// Row-wise log-softmax of the policy head.
    pub fn log_probs(&self, states: &[f64], batch: usize) -> Result<(Activations, Vec<f64>)> {
        let acts = self.forward(states, batch)?;
        let logp = log_softmax_rows(acts.output(), self.output_dim());
        Ok((acts, logp))
    }

    pub fn log_prob(&self, state: &[f64], action: usize) -> Result<f64> {
        self.check_action(action)?;
        let (_, logp) = self.log_probs(state, 1)?;
        Ok(logp[action])
    }

    fn check_action(&self, action: usize) -> Result<()> {
        if action >= self.output_dim() {
            return Err(Error::Precondition(format!(
                "action {action} out of range for {} actions",
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Draws an action from the categorical policy at `state`.
    pub fn sample_action(&self, state: &[f64], rng: &mut impl rand::Rng) -> Result<(usize, f64)> {
        let (_, logp) = self.log_probs(state, 1)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = logp.len() - 1;
        for (a, lp) in logp.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                chosen = a;
                break;
            }
        }
        Ok((chosen, logp[chosen]))
    }

    /// `grad_theta log pi(action | state)`.
    pub fn grad_log_prob(&self, state: &[f64], action: usize) -> Result<GradVector> {
        self.check_action(action)?;
        let (logp, grads) = self.grad_log_prob_batch(state, &[action])?;
        debug_assert_eq!(logp.len(), 1);
        Ok(GradVector(grads))
    }

    /// Log-probabilities and per-sample score gradients for a batch of
    /// state/action pairs. Gradients are row-major `batch x p`.
    pub fn grad_log_prob_batch(&self, states: &[f64], actions: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let batch = actions.len();
        let n_act = self.output_dim();
        for &a in actions {
            self.check_action(a)?;
        }
        let (acts, logp) = self.log_probs(states, batch)?;
        let mut d_out = vec![0.0; batch * n_act];
        let mut chosen = Vec::with_capacity(batch);
        for (b, &a) in actions.iter().enumerate() {
            let row = &logp[b * n_act..(b + 1) * n_act];
            for (j, lp) in row.iter().enumerate() {
                d_out[b * n_act + j] = -lp.exp();
            }
            d_out[b * n_act + a] += 1.0;
            chosen.push(row[a]);
        }
        let grads = self.backward_per_sample(&acts, &d_out)?;
        if let Some(i) = first_non_finite(&grads) {
            return Err(Error::numeric("score gradient", i % self.dim()));
        }
        Ok((chosen, grads))
    }

    /// First 8 bytes of SHA-256 over the checkpoint encoding.
    pub fn checksum(&self) -> [u8; 8] {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("in-memory write");
        let digest = Sha256::digest(&buf);
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }

    /// Little-endian: magic, u32 width count, u32 widths, f64 parameters.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.layer_sizes.len() as u32).to_le_bytes())?;
        for &s in &self.layer_sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for &t in &self.theta {
            w.write_all(&t.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("checkpoint read failed: {e}")))?;
        let mut reader = ByteReader::new(&bytes);
        if reader.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let n_layers = reader.u32()? as usize;
        if n_layers > 4096 {
            return Err(Error::Format(format!("implausible width count {n_layers}")));
        }
        let sizes = (0..n_layers)
            .map(|_| reader.u32().map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let p = Self::count(&sizes);
        let theta = (0..p).map(|_| reader.f64()).collect::<Result<Vec<_>>>()?;
        if !reader.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        PolicyParams::new(sizes, theta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("in-memory write");
        crate::io::write_bytes(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut f)
    }
}

/// Little-endian cursor over an in-memory artifact.
pub(crate) struct ByteReader<'a> {
    rest: &'a [u8],
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { rest: bytes }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.rest.is_empty()
    }

    pub(crate) fn remaining(&self) -> usize {
        self.rest.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.rest.len() < n {
            return Err(Error::Format("truncated artifact".into()));
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Numerically stable log-softmax applied to each row of width `n`.
pub fn log_softmax_rows(logits: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|z| z - lse));
    }
    out
}

/// A differentiable scalar loss over a parameter vector.
pub trait BatchLoss: Sync {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &[f64]) -> Result<f64>;
    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// Default finite-difference step for [`hvp`]: `1e-3 (1 + |theta|_inf) / |v|_2`.
pub fn hvp_step(theta: &[f64], v: &[f64]) -> f64 {
    1e-3 * (1.0 + norm_inf(theta)) / norm2(v).max(1e-12)
}

/// Symmetric-difference Hessian-vector product
/// `(grad L(theta + h v) - grad L(theta - h v)) / (2h)`.
pub fn hvp<L: BatchLoss + ?Sized>(loss: &L, theta: &[f64], v: &[f64], step: f64) -> Result<GradVector> {
    let p = loss.dim();
    if theta.len() != p || v.len() != p {
        return Err(Error::Shape {
            expected: p,
            got: if theta.len() != p { theta.len() } else { v.len() },
        });
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Precondition(format!("hvp step must be positive, got {step}")));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Ok(GradVector(vec![0.0; p]));
    }
    let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, d)| t + sign * step * d).collect() };
    let plus = loss.grad(&shifted(1.0))?;
    let minus = loss.grad(&shifted(-1.0))?;
    let out: Vec<f64> = plus
        .iter()
        .zip(&minus)
        .map(|(a, b)| (a - b) / (2.0 * step))
        .collect();
    if let Some(i) = first_non_finite(&out) {
        return Err(Error::numeric("hessian-vector product", i));
    }
    Ok(GradVector(out))
}
