//! Minimal trainable network: dense layers, batch normalization, ReLU, and
//! softmax cross-entropy with exact manual gradients.
//!
//! All parameters live in one flat `f64` vector in a canonical layer order
//! (per dense layer: weights then bias; per batch-norm layer: gamma then
//! beta). Batch-norm running buffers are kept separately and appended after
//! the trainables by [`ModelState::flatten_all`], which is the wire format
//! client updates travel in.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Epsilon inside the batch-norm square root.
pub const BN_EPS: f64 = 1e-5;
/// Default momentum for the running-buffer update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense { in_dim: usize, out_dim: usize },
    BatchNorm { channels: usize },
    Relu,
}

/// Architecture descriptor. Dimensions are validated once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub classes: usize,
    pub layers: Vec<Layer>,
    /// Momentum for the running-buffer update in train-mode forward.
    pub bn_momentum: f64,
}

impl ModelSpec {
    pub fn new(input_dim: usize, classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let spec = ModelSpec {
            input_dim,
            classes,
            layers,
            bn_momentum: BN_MOMENTUM,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The desk-scale MLP: `dense(d,64) -> bn -> relu -> dense(64,64) -> bn -> relu -> dense(64,K)`.
    pub fn mlp(input_dim: usize, classes: usize) -> Self {
        ModelSpec::new(
            input_dim,
            classes,
            vec![
                Layer::Dense { in_dim: input_dim, out_dim: 64 },
                Layer::BatchNorm { channels: 64 },
                Layer::Relu,
                Layer::Dense { in_dim: 64, out_dim: 64 },
                Layer::BatchNorm { channels: 64 },
                Layer::Relu,
                Layer::Dense { in_dim: 64, out_dim: classes },
            ],
        )
        .expect("built-in MLP spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        let mut width = self.input_dim;
        let mut bn_count = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { in_dim, out_dim } => {
                    if *in_dim != width {
                        return Err(Error::DimensionMismatch(format!(
                            "layer {i}: dense expects input {in_dim}, preceding width is {width}"
                        )));
                    }
                    if *out_dim == 0 {
                        return Err(Error::InvalidConfig(format!("layer {i}: zero out_dim")));
                    }
                    width = *out_dim;
                }
                Layer::BatchNorm { channels } => {
                    if *channels != width {
                        return Err(Error::DimensionMismatch(format!(
                            "layer {i}: batchnorm has {channels} channels, preceding width is {width}"
                        )));
                    }
                    bn_count += 1;
                }
                Layer::Relu => {}
            }
        }
        if width != self.classes {
            return Err(Error::DimensionMismatch(format!(
                "final width {width} != class count {}",
                self.classes
            )));
        }
        if bn_count == 0 {
            return Err(Error::InvalidConfig(
                "spec must contain at least one batchnorm layer".into(),
            ));
        }
        Ok(())
    }

    /// Number of trainable parameters implied by the layer list.
    pub fn trainable_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { in_dim, out_dim } => in_dim * out_dim + out_dim,
                Layer::BatchNorm { channels } => 2 * channels,
                Layer::Relu => 0,
            })
            .sum()
    }

    /// Channel counts of batch-norm layers, in layer order.
    pub fn bn_channels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm { channels } => Some(*channels),
                _ => None,
            })
            .collect()
    }

    /// Total buffer length (`2C` per batch-norm layer).
    pub fn buffer_len(&self) -> usize {
        self.bn_channels().iter().map(|c| 2 * c).sum()
    }

    /// Length of the canonical flat vector: trainables followed by buffers.
    pub fn flat_len(&self) -> usize {
        self.trainable_len() + self.buffer_len()
    }

    /// Offset of each layer's parameter block within the trainable vector.
    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0usize;
        for layer in &self.layers {
            offsets.push(off);
            off += match layer {
                Layer::Dense { in_dim, out_dim } => in_dim * out_dim + out_dim,
                Layer::BatchNorm { channels } => 2 * channels,
                Layer::Relu => 0,
            };
        }
        offsets
    }
}

/// Per-batch-norm-layer running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffers {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Trainable parameters plus batch-norm running buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub trainable: Vec<f64>,
    pub buffers: Vec<BnBuffers>,
}

/// Mini-batch of labeled samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows == 0 {
            return Err(Error::InvalidData("empty batch".into()));
        }
        if features.rows != labels.len() {
            return Err(Error::LengthMismatch {
                expected: features.rows,
                got: labels.len(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("batch features".into()));
        }
        Ok(Batch { features, labels })
    }

    pub fn size(&self) -> usize {
        self.features.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum LayerCache {
    Dense { input: Matrix },
    BatchNorm { x_hat: Matrix, inv_std: Vec<f64> },
    Relu { input: Matrix },
}

/// Opaque activation record produced by [`ModelState::forward`].
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

/// Centered, column-orthonormal random matrix scaled by `gain`, row-major
/// `out_dim x in_dim`. Columns are Gaussian draws, centered to zero mean,
/// then Gram-Schmidt orthonormalized (two passes for numerical robustness).
/// Requires `in_dim < out_dim` so the columns can be mutually orthogonal and
/// mean-free at the same time.
fn orthogonal_columns(in_dim: usize, out_dim: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(in_dim);
    while cols.len() < in_dim {
        let mut c: Vec<f64> = (0..out_dim).map(|_| StandardNormal.sample(rng)).collect();
        let m = c.iter().sum::<f64>() / out_dim as f64;
        for x in c.iter_mut() {
            *x -= m;
        }
        for _ in 0..2 {
            for p in &cols {
                let dot: f64 = c.iter().zip(p).map(|(a, b)| a * b).sum();
                for (x, &pv) in c.iter_mut().zip(p) {
                    *x -= dot * pv;
                }
            }
        }
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            for x in c.iter_mut() {
                *x /= n;
            }
            cols.push(c);
        }
    }
    let mut w = vec![0.0; in_dim * out_dim];
    for (i, col) in cols.iter().enumerate() {
        for (o, &v) in col.iter().enumerate() {
            w[o * in_dim + i] = gain * v;
        }
    }
    w
}

impl ModelState {
    /// Seeded initialization: dense weights uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`,
    /// biases 0, gamma 1, beta 0, running mean 0, running var 1.
    ///
    /// Exception: an input projection that feeds straight into a BatchNorm
    /// uses orthogonal initialization (centered Gaussian columns, Gram-Schmidt
    /// orthonormalized, scaled by a large gain). The BatchNorm absorbs the
    /// gain, so the network function is unaffected, while the init makes that
    /// projection an approximately fixed isotropic feature bank: gradient
    /// updates (which BN shrinks in proportion to the larger per-channel
    /// scale) stay negligible relative to the weights, column orthonormality
    /// makes the second moment of the pre-activations direction-independent,
    /// and column centering zeroes their cross-channel mean, so first-layer
    /// statistics track input statistics faithfully throughout training.
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trainable = Vec::with_capacity(spec.trainable_len());
        let mut buffers = Vec::new();
        let mut last_dense: Option<(usize, usize, usize)> = None;
        for (li, layer) in spec.layers.iter().enumerate() {
            match layer {
                Layer::Dense { in_dim, out_dim } => {
                    let feeds_bn =
                        matches!(spec.layers.get(li + 1), Some(Layer::BatchNorm { .. }));
                    if li == 0 && feeds_bn && in_dim < out_dim {
                        trainable.extend(orthogonal_columns(*in_dim, *out_dim, 4.0, &mut rng));
                    } else {
                        let bound = 1.0 / (*in_dim as f64).sqrt();
                        for _ in 0..in_dim * out_dim {
                            trainable.push(rng.random_range(-bound..=bound));
                        }
                    }
                    trainable.extend(std::iter::repeat_n(0.0, *out_dim));
                    last_dense = Some((trainable.len() - in_dim * out_dim - out_dim, *in_dim, *out_dim));
                }
                Layer::BatchNorm { channels } => {
                    trainable.extend(std::iter::repeat_n(1.0, *channels)); // gamma
                    trainable.extend(std::iter::repeat_n(0.0, *channels)); // beta
                    // Running variance starts at the variance a unit-variance
                    // input would produce through the preceding weights
                    // (|w_row|^2), rather than the conventional 1.0: the
                    // buffers then begin on the right scale and the first few
                    // EMA steps refine rather than rescale them.
                    let var: Vec<f64> = match last_dense {
                        Some((off, in_dim, out_dim)) if out_dim == *channels => (0..out_dim)
                            .map(|o| {
                                trainable[off + o * in_dim..off + (o + 1) * in_dim]
                                    .iter()
                                    .map(|w| w * w)
                                    .sum()
                            })
                            .collect(),
                        _ => vec![1.0; *channels],
                    };
                    buffers.push(BnBuffers {
                        mean: vec![0.0; *channels],
                        var,
                    });
                }
                Layer::Relu => {}
            }
        }
        ModelState { spec, trainable, buffers }
    }

    /// Forward pass. Train mode normalizes with current batch statistics and
    /// updates the running buffers; eval mode normalizes with the buffers and
    /// leaves them untouched.
    pub fn forward(&mut self, batch: &Batch, mode: Mode) -> Result<(Matrix, ForwardCache)> {
        if batch.features.cols != self.spec.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "batch width {} != input_dim {}",
                batch.features.cols, self.spec.input_dim
            )));
        }
        if mode == Mode::Train && batch.size() < 2 {
            return Err(Error::BatchTooSmall(batch.size()));
        }
        for &y in &batch.labels {
            if y >= self.spec.classes {
                return Err(Error::InvalidData(format!(
                    "label {y} out of range [0, {})",
                    self.spec.classes
                )));
            }
        }

        let b = batch.size();
        let offsets = self.spec.param_offsets();
        let momentum = self.spec.bn_momentum;
        let mut x = batch.features.clone();
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        let mut bn_idx = 0usize;

        for (li, layer) in self.spec.layers.iter().enumerate() {
            let off = offsets[li];
            match layer {
                Layer::Dense { in_dim, out_dim } => {
                    let w = &self.trainable[off..off + in_dim * out_dim];
                    let bias = &self.trainable[off + in_dim * out_dim..off + in_dim * out_dim + out_dim];
                    let mut y = Matrix::zeros(b, *out_dim);
                    for r in 0..b {
                        let xin = x.row(r);
                        let yout = y.row_mut(r);
                        for (o, yo) in yout.iter_mut().enumerate() {
                            let wrow = &w[o * in_dim..(o + 1) * in_dim];
                            let mut acc = bias[o];
                            for (wi, xi) in wrow.iter().zip(xin) {
                                acc += wi * xi;
                            }
                            *yo = acc;
                        }
                    }
                    caches.push(LayerCache::Dense { input: x });
                    x = y;
                }
                Layer::BatchNorm { channels } => {
                    let c = *channels;
                    let gamma = &self.trainable[off..off + c];
                    let beta = &self.trainable[off + c..off + 2 * c];
                    let mut x_hat = Matrix::zeros(b, c);
                    let mut inv_std = vec![0.0; c];
                    match mode {
                        Mode::Train => {
                            let bf = b as f64;
                            let mut mu = vec![0.0; c];
                            let mut var = vec![0.0; c];
                            for r in 0..b {
                                for (j, v) in x.row(r).iter().enumerate() {
                                    mu[j] += v;
                                }
                            }
                            for m in mu.iter_mut() {
                                *m /= bf;
                            }
                            for r in 0..b {
                                for (j, v) in x.row(r).iter().enumerate() {
                                    let d = v - mu[j];
                                    var[j] += d * d;
                                }
                            }
                            for v in var.iter_mut() {
                                *v /= bf; // biased, divisor B
                            }
                            for j in 0..c {
                                inv_std[j] = 1.0 / (var[j] + BN_EPS).sqrt();
                            }
                            for r in 0..b {
                                for j in 0..c {
                                    let xh = (x.get(r, j) - mu[j]) * inv_std[j];
                                    x_hat.set(r, j, xh);
                                }
                            }
                            // Running update: unbiased variance (divisor B-1) goes
                            // into the buffer, matching mainstream framework defaults.
                            let buf = &mut self.buffers[bn_idx];
                            let unbias = bf / (bf - 1.0);
                            for j in 0..c {
                                buf.mean[j] = (1.0 - momentum) * buf.mean[j] + momentum * mu[j];
                                buf.var[j] =
                                    (1.0 - momentum) * buf.var[j] + momentum * var[j] * unbias;
                            }
                        }
                        Mode::Eval => {
                            let buf = &self.buffers[bn_idx];
                            for j in 0..c {
                                inv_std[j] = 1.0 / (buf.var[j] + BN_EPS).sqrt();
                            }
                            for r in 0..b {
                                for j in 0..c {
                                    let xh = (x.get(r, j) - buf.mean[j]) * inv_std[j];
                                    x_hat.set(r, j, xh);
                                }
                            }
                        }
                    }
                    let mut y = Matrix::zeros(b, c);
                    for r in 0..b {
                        for j in 0..c {
                            y.set(r, j, gamma[j] * x_hat.get(r, j) + beta[j]);
                        }
                    }
                    caches.push(LayerCache::BatchNorm { x_hat, inv_std });
                    bn_idx += 1;
                    x = y;
                }
                Layer::Relu => {
                    let mut y = x.clone();
                    for v in y.data.iter_mut() {
                        if *v <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    caches.push(LayerCache::Relu { input: x });
                    x = y;
                }
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("forward logits".into()));
        }
        Ok((x, ForwardCache { layers: caches }))
    }

    /// Mean softmax cross-entropy and the exact analytic gradient over every
    /// trainable parameter. Running buffers receive their train-mode update as
    /// a side effect of the forward pass.
    pub fn loss_and_grad(&mut self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let (logits, cache) = self.forward(batch, Mode::Train)?;
        let b = batch.size();
        let k = self.spec.classes;
        let bf = b as f64;

        let mut loss = 0.0;
        let mut d_logits = Matrix::zeros(b, k);
        for r in 0..b {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - max).exp();
            }
            let log_denom = denom.ln() + max;
            loss += log_denom - row[batch.labels[r]];
            for j in 0..k {
                let p = (row[j] - log_denom).exp();
                let t = if j == batch.labels[r] { 1.0 } else { 0.0 };
                d_logits.set(r, j, (p - t) / bf);
            }
        }
        loss /= bf;

        let grad = self.backward(batch, &cache, d_logits)?;
        Ok((loss, grad))
    }

    fn backward(&self, batch: &Batch, cache: &ForwardCache, mut d_y: Matrix) -> Result<Vec<f64>> {
        let offsets = self.spec.param_offsets();
        let mut grad = vec![0.0; self.spec.trainable_len()];
        let b = batch.size();
        let bf = b as f64;

        for (li, layer) in self.spec.layers.iter().enumerate().rev() {
            let off = offsets[li];
            match (layer, &cache.layers[li]) {
                (Layer::Dense { in_dim, out_dim }, LayerCache::Dense { input }) => {
                    let w = &self.trainable[off..off + in_dim * out_dim];
                    let (dw, rest) = grad[off..off + in_dim * out_dim + out_dim]
                        .split_at_mut(in_dim * out_dim);
                    let db = rest;
                    let mut d_x = Matrix::zeros(b, *in_dim);
                    for r in 0..b {
                        let dyr = d_y.row(r);
                        let xr = input.row(r);
                        for (o, &dyo) in dyr.iter().enumerate() {
                            db[o] += dyo;
                            let dwrow = &mut dw[o * in_dim..(o + 1) * in_dim];
                            for (dwi, xi) in dwrow.iter_mut().zip(xr) {
                                *dwi += dyo * xi;
                            }
                            let wrow = &w[o * in_dim..(o + 1) * in_dim];
                            let dxr = d_x.row_mut(r);
                            for (dxi, wi) in dxr.iter_mut().zip(wrow) {
                                *dxi += dyo * wi;
                            }
                        }
                    }
                    d_y = d_x;
                }
                (Layer::BatchNorm { channels }, LayerCache::BatchNorm { x_hat, inv_std }) => {
                    let c = *channels;
                    let gamma = &self.trainable[off..off + c];
                    let (dgamma, dbeta) = grad[off..off + 2 * c].split_at_mut(c);
                    let mut sum_dxhat = vec![0.0; c];
                    let mut sum_dxhat_xhat = vec![0.0; c];
                    let mut d_xhat = Matrix::zeros(b, c);
                    for r in 0..b {
                        for j in 0..c {
                            let dy = d_y.get(r, j);
                            let xh = x_hat.get(r, j);
                            dgamma[j] += dy * xh;
                            dbeta[j] += dy;
                            let dxh = dy * gamma[j];
                            d_xhat.set(r, j, dxh);
                            sum_dxhat[j] += dxh;
                            sum_dxhat_xhat[j] += dxh * xh;
                        }
                    }
                    let mut d_x = Matrix::zeros(b, c);
                    for r in 0..b {
                        for j in 0..c {
                            let v = inv_std[j] / bf
                                * (bf * d_xhat.get(r, j)
                                    - sum_dxhat[j]
                                    - x_hat.get(r, j) * sum_dxhat_xhat[j]);
                            d_x.set(r, j, v);
                        }
                    }
                    d_y = d_x;
                }
                (Layer::Relu, LayerCache::Relu { input }) => {
                    for (dv, &x) in d_y.data.iter_mut().zip(&input.data) {
                        if x <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                }
                _ => unreachable!("cache misaligned with layer list"),
            }
        }
        Ok(grad)
    }

    /// `trainable <- trainable - lr * grad`; buffers are untouched.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.trainable.len() {
            return Err(Error::LengthMismatch {
                expected: self.trainable.len(),
                got: grad.len(),
            });
        }
        for (p, g) in self.trainable.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        Ok(())
    }

    /// Canonical flat vector: trainables followed by, per batch-norm layer,
    /// running mean then running variance.
    pub fn flatten_all(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.spec.flat_len());
        out.extend_from_slice(&self.trainable);
        for buf in &self.buffers {
            out.extend_from_slice(&buf.mean);
            out.extend_from_slice(&buf.var);
        }
        out
    }

    /// Inverse of [`flatten_all`](Self::flatten_all).
    pub fn unflatten_all(spec: ModelSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.flat_len() {
            return Err(Error::LengthMismatch {
                expected: spec.flat_len(),
                got: flat.len(),
            });
        }
        let t_len = spec.trainable_len();
        let trainable = flat[..t_len].to_vec();
        let mut buffers = Vec::new();
        let mut off = t_len;
        for c in spec.bn_channels() {
            let mean = flat[off..off + c].to_vec();
            let var = flat[off + c..off + 2 * c].to_vec();
            off += 2 * c;
            buffers.push(BnBuffers { mean, var });
        }
        Ok(ModelState { spec, trainable, buffers })
    }

    /// Rebuild a local model from the global model and a flat update.
    pub fn apply_delta(&self, delta: &[f64]) -> Result<Self> {
        let flat = self.flatten_all();
        if delta.len() != flat.len() {
            return Err(Error::LengthMismatch {
                expected: flat.len(),
                got: delta.len(),
            });
        }
        let new: Vec<f64> = flat.iter().zip(delta).map(|(a, b)| a + b).collect();
        ModelState::unflatten_all(self.spec.clone(), &new)
    }

    /// Argmax prediction per row, eval mode.
    pub fn predict(&mut self, features: &Matrix) -> Result<Vec<usize>> {
        let labels = vec![0usize; features.rows];
        let batch = Batch::new(features.clone(), labels)?;
        let (logits, _) = self.forward(&batch, Mode::Eval)?;
        Ok((0..logits.rows)
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec::new(
            3,
            2,
            vec![
                Layer::Dense { in_dim: 3, out_dim: 4 },
                Layer::BatchNorm { channels: 4 },
                Layer::Relu,
                Layer::Dense { in_dim: 4, out_dim: 2 },
            ],
        )
        .unwrap()
    }

    fn random_batch(spec: &ModelSpec, b: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(b, spec.input_dim);
        for v in m.data.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let labels = (0..b).map(|_| rng.random_range(0..spec.classes)).collect();
        Batch::new(m, labels).unwrap()
    }

    #[test]
    fn spec_rejects_bad_dims() {
        assert!(ModelSpec::new(
            3,
            2,
            vec![
                Layer::Dense { in_dim: 3, out_dim: 4 },
                Layer::BatchNorm { channels: 5 },
                Layer::Dense { in_dim: 4, out_dim: 2 },
            ],
        )
        .is_err());
        // no BN layer
        assert!(ModelSpec::new(3, 2, vec![Layer::Dense { in_dim: 3, out_dim: 2 }]).is_err());
    }

    #[test]
    fn bn_identity_in_eval_mode() {
        // gamma=1, beta=0, running mean 0, running var 1: near-identity.
        let spec = ModelSpec::new(
            2,
            2,
            vec![Layer::BatchNorm { channels: 2 }, Layer::Dense { in_dim: 2, out_dim: 2 }],
        )
        .unwrap();
        let mut model = ModelState::init(spec, 0);
        // Make the final dense the identity so logits mirror the BN output.
        let off = 2 * 2; // after gamma/beta
        model.trainable[off] = 1.0;
        model.trainable[off + 1] = 0.0;
        model.trainable[off + 2] = 0.0;
        model.trainable[off + 3] = 1.0;
        let batch = Batch::new(
            Matrix::from_rows(vec![vec![0.5, -1.5], vec![2.0, 0.25]]).unwrap(),
            vec![0, 1],
        )
        .unwrap();
        let (logits, _) = model.forward(&batch, Mode::Eval).unwrap();
        for r in 0..2 {
            for j in 0..2 {
                let expect = batch.features.get(r, j) / (1.0 + BN_EPS).sqrt();
                assert!((logits.get(r, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn momentum_one_replaces_buffer() {
        let mut spec = tiny_spec();
        spec.bn_momentum = 1.0;
        let mut model = ModelState::init(spec.clone(), 3);
        let batch = random_batch(&spec, 8, 11);
        model.forward(&batch, Mode::Train).unwrap();
        // Recompute the batch mean of the first dense layer's output by hand.
        let off = 0;
        let w = &model.trainable[off..12];
        let bias = &model.trainable[12..16];
        let mut mu = vec![0.0; 4];
        for r in 0..8 {
            for o in 0..4 {
                let mut acc = bias[o];
                for i in 0..3 {
                    acc += w[o * 3 + i] * batch.features.get(r, i);
                }
                mu[o] += acc;
            }
        }
        for m in mu.iter_mut() {
            *m /= 8.0;
        }
        for j in 0..4 {
            assert!((model.buffers[0].mean[j] - mu[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn buffer_update_hand_computed() {
        // Batch [0,0] and [2,2]: mean [1,1], biased var [1,1].
        // With momentum 0.1 from mean buffer [0,0]: new mean [0.1, 0.1].
        let spec = ModelSpec::new(
            2,
            2,
            vec![Layer::BatchNorm { channels: 2 }, Layer::Dense { in_dim: 2, out_dim: 2 }],
        )
        .unwrap();
        let mut model = ModelState::init(spec, 0);
        let batch = Batch::new(
            Matrix::from_rows(vec![vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap(),
            vec![0, 1],
        )
        .unwrap();
        model.forward(&batch, Mode::Train).unwrap();
        for j in 0..2 {
            assert!((model.buffers[0].mean[j] - 0.1).abs() < 1e-15);
            // unbiased var = biased * B/(B-1) = 1*2 = 2; buffer = 0.9*1 + 0.1*2 = 1.1
            assert!((model.buffers[0].var[j] - 1.1).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_mode_is_pure() {
        let spec = tiny_spec();
        let mut model = ModelState::init(spec.clone(), 5);
        let before = model.clone();
        let batch = random_batch(&spec, 6, 9);
        model.forward(&batch, Mode::Eval).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn train_mode_rejects_singleton_batch() {
        let spec = tiny_spec();
        let mut model = ModelState::init(spec.clone(), 5);
        let batch = random_batch(&spec, 1, 9);
        assert!(matches!(
            model.forward(&batch, Mode::Train),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn zero_final_layer_gives_ln_k_loss() {
        let spec = tiny_spec();
        let mut model = ModelState::init(spec.clone(), 1);
        // Zero out the final dense layer (weights and bias).
        let len = spec.trainable_len();
        for v in model.trainable[len - (4 * 2 + 2)..].iter_mut() {
            *v = 0.0;
        }
        let batch = random_batch(&spec, 8, 2);
        let (loss, _) = model.loss_and_grad(&batch).unwrap();
        assert!((loss - (2.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_loss_nonneg() {
        let spec = tiny_spec();
        let mut model = ModelState::init(spec.clone(), 17);
        let batch = random_batch(&spec, 5, 23);
        let (logits, _) = model.forward(&batch, Mode::Train).unwrap();
        for r in 0..5 {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / denom).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let mut model2 = ModelState::init(spec, 17);
        let (loss, _) = model2.loss_and_grad(&batch).unwrap();
        assert!(loss >= 0.0);
    }

    /// Central finite-difference oracle over the full trainable vector.
    fn finite_diff_grad(model: &ModelState, batch: &Batch, step: f64) -> Vec<f64> {
        let mut grad = vec![0.0; model.trainable.len()];
        for i in 0..model.trainable.len() {
            let mut plus = model.clone();
            plus.trainable[i] += step;
            let (lp, _) = plus.loss_and_grad(batch).unwrap();
            let mut minus = model.clone();
            minus.trainable[i] -= step;
            let (lm, _) = minus.loss_and_grad(batch).unwrap();
            grad[i] = (lp - lm) / (2.0 * step);
        }
        grad
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..4u64 {
            let spec = tiny_spec();
            let model = ModelState::init(spec.clone(), seed);
            let batch = random_batch(&spec, 6, seed + 100);
            let (_, analytic) = model.clone().loss_and_grad(&batch).unwrap();
            let numeric = finite_diff_grad(&model, &batch, 1e-5);
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                let scale = a.abs().max(n.abs()).max(1e-6);
                assert!(
                    (a - n).abs() / scale < 1e-4,
                    "coord {i}: analytic {a}, numeric {n}"
                );
            }
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let spec = tiny_spec();
        let mut model = ModelState::init(spec.clone(), 0);
        model.trainable[0] = 1.0;
        model.trainable[1] = 2.0;
        let mut grad = vec![0.0; model.trainable.len()];
        grad[0] = 1.0;
        grad[1] = -1.0;
        model.sgd_step(&grad, 0.5).unwrap();
        assert_eq!(model.trainable[0], 0.5);
        assert_eq!(model.trainable[1], 2.5);
    }

    #[test]
    fn sgd_zero_grad_is_identity() {
        let spec = tiny_spec();
        let mut model = ModelState::init(spec, 0);
        let before = model.clone();
        let grad = vec![0.0; model.trainable.len()];
        model.sgd_step(&grad, 0.1).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(w) = (w - 3)^2 has its minimum at 3.
        let mut w = 0.0_f64;
        for _ in 0..200 {
            let g = 2.0 * (w - 3.0);
            w -= 0.1 * g;
        }
        assert!((w - 3.0).abs() < 1e-6);
    }

    #[test]
    fn flatten_roundtrip_bitwise() {
        let spec = tiny_spec();
        let mut model = ModelState::init(spec.clone(), 7);
        // Perturb buffers so they are not at init values.
        model.buffers[0].mean[1] = 0.25;
        model.buffers[0].var[2] = 3.5;
        let flat = model.flatten_all();
        assert_eq!(flat.len(), spec.trainable_len() + spec.buffer_len());
        let back = ModelState::unflatten_all(spec, &flat).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn flatten_coordinate_sweep_is_bijective() {
        let spec = tiny_spec();
        let model = ModelState::init(spec.clone(), 7);
        let flat = model.flatten_all();
        for i in 0..flat.len() {
            let mut perturbed = flat.clone();
            perturbed[i] += 1.0;
            let back = ModelState::unflatten_all(spec.clone(), &perturbed).unwrap();
            let re = back.flatten_all();
            let mut diffs = 0;
            for (j, (a, b)) in re.iter().zip(&flat).enumerate() {
                if a != b {
                    assert_eq!(j, i);
                    diffs += 1;
                }
            }
            assert_eq!(diffs, 1);
        }
    }

    #[test]
    fn unflatten_length_mismatch() {
        let spec = tiny_spec();
        assert!(ModelState::unflatten_all(spec, &[0.0; 3]).is_err());
    }
}
