//! Next-location prediction model and its local trainer.
//!
//! The model has three logical layers, which are also the units the
//! federation layer aggregates:
//!
//! 1. an embedding table (`|L| x E`) mapping location ids to vectors,
//! 2. a single tanh recurrent encoder (`W_xh`, `W_hh`, `b_h`) consuming the
//!    embedded window,
//! 3. a softmax readout (`W_out`, `b_out`) scoring every location as the
//!    next destination.
//!
//! Gradients are exact analytic backpropagation through time, computed in
//! batched matrix form; the optimizer is plain SGD with momentum and L2
//! weight decay, optionally augmented with a proximal pull toward an anchor
//! model (used by one of the federated baselines).

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::geogrid::LocationId;
use crate::mobility::Sample;
use crate::seed;

/// Number of aggregation layers the weights decompose into.
pub const NUM_LAYERS: usize = 3;

/// On-disk checkpoint format version.
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("location id {id} outside model vocabulary of {n_locations}")]
    InvalidLocationId { id: u32, n_locations: usize },
    #[error("batch of samples is empty")]
    EmptyBatch,
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("samples in a batch must share one window length ({0} vs {1})")]
    MixedWindowLengths(usize, usize),
    #[error("layer index {0} out of range 1..={NUM_LAYERS}")]
    InvalidLayer(usize),
    #[error("layer {layer} expects {expected} values, got {got}")]
    LayerSizeMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimizer and architecture knobs for local training.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 32,
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 32,
            local_epochs: 10,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.embed_dim < 1 || self.hidden_dim < 1 {
            return Err("embed_dim and hidden_dim must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0) {
            return Err("learning_rate must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err("momentum must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) {
            return Err("weight_decay must be non-negative".into());
        }
        if self.batch_size < 1 {
            return Err("batch_size must be at least 1".into());
        }
        if self.local_epochs < 1 {
            return Err("local_epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// Layer 1: location embedding table, `|L| x E`.
    pub embedding: Array2<f64>,
    /// Layer 2: recurrent encoder.
    pub w_xh: Array2<f64>, // E x H
    pub w_hh: Array2<f64>, // H x H
    pub b_h: Array1<f64>,  // H
    /// Layer 3: output head.
    pub w_out: Array2<f64>, // H x |L|
    pub b_out: Array1<f64>, // |L|
}

impl ModelWeights {
    pub fn zeros(n_locations: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        Self {
            embedding: Array2::zeros((n_locations, embed_dim)),
            w_xh: Array2::zeros((embed_dim, hidden_dim)),
            w_hh: Array2::zeros((hidden_dim, hidden_dim)),
            b_h: Array1::zeros(hidden_dim),
            w_out: Array2::zeros((hidden_dim, n_locations)),
            b_out: Array1::zeros(n_locations),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n_locations(), self.embed_dim(), self.hidden_dim())
    }

    pub fn n_locations(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.nrows()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.embedding.dim() == other.embedding.dim()
            && self.w_xh.dim() == other.w_xh.dim()
            && self.w_hh.dim() == other.w_hh.dim()
            && self.b_h.dim() == other.b_h.dim()
            && self.w_out.dim() == other.w_out.dim()
            && self.b_out.dim() == other.b_out.dim()
    }

    /// Flat element views in a fixed order (all owned arrays are standard
    /// layout, so slicing never fails).
    pub(crate) fn param_slices(&self) -> [&[f64]; 6] {
        [
            self.embedding.as_slice().unwrap(),
            self.w_xh.as_slice().unwrap(),
            self.w_hh.as_slice().unwrap(),
            self.b_h.as_slice().unwrap(),
            self.w_out.as_slice().unwrap(),
            self.b_out.as_slice().unwrap(),
        ]
    }

    pub(crate) fn param_slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.embedding.as_slice_mut().unwrap(),
            self.w_xh.as_slice_mut().unwrap(),
            self.w_hh.as_slice_mut().unwrap(),
            self.b_h.as_slice_mut().unwrap(),
            self.w_out.as_slice_mut().unwrap(),
            self.b_out.as_slice_mut().unwrap(),
        ]
    }

    /// Total number of parameters.
    pub fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// `self *= a` elementwise.
    pub fn scale(&mut self, a: f64) {
        for s in self.param_slices_mut() {
            for v in s {
                *v *= a;
            }
        }
    }

    /// `self += a * other` elementwise.
    pub fn scaled_add_assign(&mut self, a: f64, other: &Self) {
        debug_assert!(self.same_shape(other));
        let other_slices = other.param_slices();
        for (dst, src) in self.param_slices_mut().into_iter().zip(other_slices) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
        }
    }

    /// Euclidean distance between two parameter vectors.
    pub fn l2_distance(&self, other: &Self) -> f64 {
        debug_assert!(self.same_shape(other));
        let mut acc = 0.0;
        for (a, b) in self.param_slices().into_iter().zip(other.param_slices()) {
            for (x, y) in a.iter().zip(b) {
                let d = x - y;
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    /// Flattened element count of an aggregation layer (1-based).
    pub fn layer_len(&self, layer: usize) -> Result<usize, ModelError> {
        let (l, e, h) = (self.n_locations(), self.embed_dim(), self.hidden_dim());
        match layer {
            1 => Ok(l * e),
            2 => Ok(e * h + h * h + h),
            3 => Ok(h * l + l),
            _ => Err(ModelError::InvalidLayer(layer)),
        }
    }

    /// Flattens one aggregation layer (1-based) into a vector. Layer 1 is
    /// the embedding table row-major; layer 2 concatenates `W_xh` row-major,
    /// `W_hh` row-major, then `b_h`; layer 3 concatenates `W_out` row-major
    /// then `b_out`.
    pub fn flatten_layer(&self, layer: usize) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(self.layer_len(layer)?);
        match layer {
            1 => out.extend(self.embedding.iter()),
            2 => {
                out.extend(self.w_xh.iter());
                out.extend(self.w_hh.iter());
                out.extend(self.b_h.iter());
            }
            3 => {
                out.extend(self.w_out.iter());
                out.extend(self.b_out.iter());
            }
            _ => return Err(ModelError::InvalidLayer(layer)),
        }
        Ok(out)
    }

    /// Inverse of [`flatten_layer`](Self::flatten_layer).
    pub fn set_layer(&mut self, layer: usize, flat: &[f64]) -> Result<(), ModelError> {
        let expected = self.layer_len(layer)?;
        if flat.len() != expected {
            return Err(ModelError::LayerSizeMismatch {
                layer,
                expected,
                got: flat.len(),
            });
        }
        match layer {
            1 => {
                for (d, s) in self.embedding.iter_mut().zip(flat) {
                    *d = *s;
                }
            }
            2 => {
                let (e, h) = (self.embed_dim(), self.hidden_dim());
                let (xh, rest) = flat.split_at(e * h);
                let (hh, bh) = rest.split_at(h * h);
                for (d, s) in self.w_xh.iter_mut().zip(xh) {
                    *d = *s;
                }
                for (d, s) in self.w_hh.iter_mut().zip(hh) {
                    *d = *s;
                }
                for (d, s) in self.b_h.iter_mut().zip(bh) {
                    *d = *s;
                }
            }
            3 => {
                let (l, h) = (self.n_locations(), self.hidden_dim());
                let (out, bout) = flat.split_at(h * l);
                for (d, s) in self.w_out.iter_mut().zip(out) {
                    *d = *s;
                }
                for (d, s) in self.b_out.iter_mut().zip(bout) {
                    *d = *s;
                }
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    /// All layers flattened in order.
    pub fn flatten_all(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in 1..=NUM_LAYERS {
            out.extend(self.flatten_layer(layer).unwrap());
        }
        out
    }
}

/// Fresh weights: every matrix uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// (the embedding counts its vector width `E` as fan-in), biases zero.
/// Deterministic in `seed`; draw order is embedding, `W_xh`, `W_hh`, `W_out`.
pub fn init_weights(n_locations: usize, hp: &HyperParams, seed: u64) -> ModelWeights {
    let (e, h) = (hp.embed_dim, hp.hidden_dim);
    let mut rng = seed::stream(&[seed]);
    let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
        let a = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
    };
    let embedding = uniform(n_locations, e, e);
    let w_xh = uniform(e, h, e);
    let w_hh = uniform(h, h, h);
    let w_out = uniform(h, n_locations, h);
    ModelWeights {
        embedding,
        w_xh,
        w_hh,
        b_h: Array1::zeros(h),
        w_out,
        b_out: Array1::zeros(n_locations),
    }
}

/// Proximal regularizer: pulls trained weights toward `anchor` with
/// strength `mu` (adds `mu/2 * ||w - anchor||^2` to every batch loss).
#[derive(Debug, Clone)]
pub struct Prox<'a> {
    pub mu: f64,
    pub anchor: &'a ModelWeights,
}

/// Batched forward pass internals: per-step embedded inputs, hidden states
/// (`hs[0]` is the zero initial state), and final logits.
struct BatchStates {
    xs: Vec<Array2<f64>>,
    hs: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

fn batch_states(w: &ModelWeights, windows: &[&[LocationId]]) -> Result<BatchStates, ModelError> {
    let b = windows.len();
    if b == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let t_len = windows[0].len();
    if t_len == 0 {
        return Err(ModelError::MixedWindowLengths(0, 0));
    }
    for win in windows {
        if win.len() != t_len {
            return Err(ModelError::MixedWindowLengths(t_len, win.len()));
        }
    }
    let (n_loc, e, h) = (w.n_locations(), w.embed_dim(), w.hidden_dim());
    let mut xs = Vec::with_capacity(t_len);
    let mut hs = Vec::with_capacity(t_len + 1);
    hs.push(Array2::zeros((b, h)));
    for t in 0..t_len {
        let mut x_t = Array2::zeros((b, e));
        for (bi, win) in windows.iter().enumerate() {
            let id = win[t];
            if id.index() >= n_loc {
                return Err(ModelError::InvalidLocationId {
                    id: id.0,
                    n_locations: n_loc,
                });
            }
            x_t.row_mut(bi).assign(&w.embedding.row(id.index()));
        }
        let mut a_t = x_t.dot(&w.w_xh) + hs[t].dot(&w.w_hh);
        a_t += &w.b_h;
        hs.push(a_t.mapv(f64::tanh));
        xs.push(x_t);
    }
    let mut logits = hs[t_len].dot(&w.w_out);
    logits += &w.b_out;
    Ok(BatchStates { xs, hs, logits })
}

/// Logits for a batch of windows, one row per window.
pub fn forward_batch(
    w: &ModelWeights,
    windows: &[&[LocationId]],
) -> Result<Array2<f64>, ModelError> {
    Ok(batch_states(w, windows)?.logits)
}

/// Logits for a single window.
pub fn forward(w: &ModelWeights, window: &[LocationId]) -> Result<Array1<f64>, ModelError> {
    let logits = forward_batch(w, &[window])?;
    Ok(logits.row(0).to_owned())
}

/// Mean cross-entropy loss over a batch together with exact gradients for
/// every parameter. With a proximal term, both loss and gradients include it.
pub fn loss_and_grad(
    w: &ModelWeights,
    batch: &[Sample],
    prox: Option<Prox<'_>>,
) -> Result<(f64, ModelWeights), ModelError> {
    let refs: Vec<&Sample> = batch.iter().collect();
    loss_and_grad_refs(w, &refs, prox.as_ref())
}

fn loss_and_grad_refs(
    w: &ModelWeights,
    batch: &[&Sample],
    prox: Option<&Prox<'_>>,
) -> Result<(f64, ModelWeights), ModelError> {
    let b = batch.len();
    if b == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let n_loc = w.n_locations();
    for s in batch {
        if s.target.index() >= n_loc {
            return Err(ModelError::InvalidLocationId {
                id: s.target.0,
                n_locations: n_loc,
            });
        }
    }
    let windows: Vec<&[LocationId]> = batch.iter().map(|s| s.window.as_slice()).collect();
    let BatchStates { xs, hs, logits } = batch_states(w, &windows)?;
    let t_len = xs.len();

    // Loss via the log-sum-exp trick; d_logits = (softmax - onehot) / B.
    let mut loss = 0.0;
    let mut d_logits = Array2::zeros(logits.raw_dim());
    for (bi, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let target = batch[bi].target.index();
        loss += lse - row[target];
        let mut d_row = d_logits.row_mut(bi);
        for (j, &v) in row.iter().enumerate() {
            d_row[j] = (v - lse).exp();
        }
        d_row[target] -= 1.0;
    }
    loss /= b as f64;
    d_logits.mapv_inplace(|v| v / b as f64);

    // Backward pass.
    let mut grads = w.zeros_like();
    grads.w_out = hs[t_len].t().dot(&d_logits);
    grads.b_out = d_logits.sum_axis(Axis(0));
    let mut d_h = d_logits.dot(&w.w_out.t());
    for t in (0..t_len).rev() {
        let h_t = &hs[t + 1];
        let d_a = &d_h * &h_t.mapv(|v| 1.0 - v * v);
        grads.b_h += &d_a.sum_axis(Axis(0));
        grads.w_xh += &xs[t].t().dot(&d_a);
        grads.w_hh += &hs[t].t().dot(&d_a);
        let d_x = d_a.dot(&w.w_xh.t());
        for (bi, win) in windows.iter().enumerate() {
            grads
                .embedding
                .row_mut(win[t].index())
                .scaled_add(1.0, &d_x.row(bi));
        }
        d_h = d_a.dot(&w.w_hh.t());
    }

    if let Some(p) = prox {
        debug_assert!(w.same_shape(p.anchor));
        let mut penalty = 0.0;
        let (w_s, a_s) = (w.param_slices(), p.anchor.param_slices());
        for ((g, wv), av) in grads.param_slices_mut().into_iter().zip(w_s).zip(a_s) {
            for ((g, &x), &a) in g.iter_mut().zip(wv).zip(av) {
                let d = x - a;
                penalty += d * d;
                *g += p.mu * d;
            }
        }
        loss += 0.5 * p.mu * penalty;
    }

    Ok((loss, grads))
}

/// One SGD step with momentum and L2 weight decay:
/// `v <- momentum * v + (g + weight_decay * w)`, then `w <- w - lr * v`.
/// Weight decay applies to every parameter, biases included.
fn sgd_step(
    weights: &mut ModelWeights,
    grads: &ModelWeights,
    velocity: &mut ModelWeights,
    hp: &HyperParams,
) {
    let g_s = grads.param_slices();
    let mut w_s = weights.param_slices_mut();
    let mut v_s = velocity.param_slices_mut();
    for i in 0..w_s.len() {
        let (ws, gs, vs) = (&mut w_s[i], g_s[i], &mut v_s[i]);
        for j in 0..ws.len() {
            let g_total = gs[j] + hp.weight_decay * ws[j];
            vs[j] = hp.momentum * vs[j] + g_total;
            ws[j] -= hp.learning_rate * vs[j];
        }
    }
}

/// Result of a local training pass.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub weights: ModelWeights,
    /// Mean training loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
}

impl LocalFit {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().expect("at least one epoch")
    }
}

/// Shared epoch engine: shuffled mini-batch SGD from `init`, carrying
/// momentum across epochs within this one call (a fresh call always starts
/// from zero velocity). `after_epoch` observes the weights after each epoch.
pub(crate) fn fit<F>(
    init: &ModelWeights,
    samples: &[Sample],
    hp: &HyperParams,
    seed: u64,
    prox: Option<Prox<'_>>,
    mut after_epoch: F,
) -> Result<LocalFit, ModelError>
where
    F: FnMut(usize, &ModelWeights),
{
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    debug_assert!(hp.validate().is_ok(), "invalid hyperparameters");
    let mut weights = init.clone();
    let mut velocity = init.zeros_like();
    let mut rng = seed::stream(&[seed]);
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hp.local_epochs);
    for epoch in 0..hp.local_epochs {
        use rand::seq::SliceRandom;
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in indices.chunks(hp.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) = loss_and_grad_refs(&weights, &batch, prox.as_ref())?;
            sgd_step(&mut weights, &grads, &mut velocity, hp);
            loss_sum += loss * chunk.len() as f64;
        }
        epoch_losses.push(loss_sum / samples.len() as f64);
        after_epoch(epoch, &weights);
    }
    Ok(LocalFit {
        weights,
        epoch_losses,
    })
}

/// Local training as performed by one client in a round: `local_epochs`
/// passes of shuffled mini-batch SGD starting from the broadcast weights.
/// With `prox_mu`, every batch additionally pulls toward the broadcast
/// weights (which double as the proximal anchor).
pub fn train_local(
    global: &ModelWeights,
    samples: &[Sample],
    hp: &HyperParams,
    seed: u64,
    prox_mu: Option<f64>,
) -> Result<LocalFit, ModelError> {
    let prox = prox_mu.map(|mu| Prox { mu, anchor: global });
    fit(global, samples, hp, seed, prox, |_, _| {})
}

/// Top-k next locations by logit, ties broken toward the smaller id.
pub fn predict_topk(
    w: &ModelWeights,
    window: &[LocationId],
    k: usize,
) -> Result<Vec<LocationId>, ModelError> {
    assert!(
        k >= 1 && k <= w.n_locations(),
        "k must lie in 1..=n_locations"
    );
    let logits = forward(w, window)?;
    let mut ids: Vec<usize> = (0..w.n_locations()).collect();
    ids.sort_by(|&i, &j| logits[j].total_cmp(&logits[i]).then(i.cmp(&j)));
    Ok(ids.into_iter().take(k).map(|i| LocationId(i as u32)).collect())
}

/// Saves weights: a 5-field little-endian `u32` header
/// `(|L|, E, H, layers, version)` followed by each aggregation layer
/// flattened as little-endian `f64`.
pub fn save_checkpoint(w: &ModelWeights, path: &Path) -> Result<(), ModelError> {
    let mut bytes = Vec::with_capacity(20 + 8 * w.n_params());
    for v in [
        w.n_locations() as u32,
        w.embed_dim() as u32,
        w.hidden_dim() as u32,
        NUM_LAYERS as u32,
        CHECKPOINT_VERSION,
    ] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for layer in 1..=NUM_LAYERS {
        for v in w.flatten_layer(layer)? {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::fsio::write_atomic_bytes(path, &bytes)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`], validating the header
/// and total length.
pub fn load_checkpoint(path: &Path) -> Result<ModelWeights, ModelError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 {
        return Err(ModelError::Checkpoint(format!(
            "{}: too short for a header",
            path.display()
        )));
    }
    let mut header = [0u32; 5];
    for (i, h) in header.iter_mut().enumerate() {
        *h = u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    }
    let [n_loc, e, h, layers, version] = header;
    if layers as usize != NUM_LAYERS {
        return Err(ModelError::Checkpoint(format!(
            "expected {NUM_LAYERS} layers, found {layers}"
        )));
    }
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut w = ModelWeights::zeros(n_loc as usize, e as usize, h as usize);
    let expected_len = 20 + 8 * w.n_params();
    if bytes.len() != expected_len {
        return Err(ModelError::Checkpoint(format!(
            "expected {expected_len} bytes for ({n_loc}, {e}, {h}), found {}",
            bytes.len()
        )));
    }
    let mut offset = 20;
    for layer in 1..=NUM_LAYERS {
        let n = w.layer_len(layer)?;
        let mut flat = Vec::with_capacity(n);
        for _ in 0..n {
            flat.push(f64::from_le_bytes(
                bytes[offset..offset + 8].try_into().unwrap(),
            ));
            offset += 8;
        }
        w.set_layer(layer, &flat)?;
    }
    Ok(w)
}
