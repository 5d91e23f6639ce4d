//! From-scratch multilayer perceptron with mini-batch SGD.
//!
//! The four compute-heavy kernels route through the noisy matrix backends:
//! forward propagation `Y_{l+1} = W_l' X_l + B_l`, error back-propagation
//! `zeta_l = W_l delta_{l+1}`, the element-wise product
//! `delta_l = zeta_l . g'(Y_l)`, and the weight update `dW_l = X_l
//! delta_{l+1}'`. Everything else (bias adds, activations, softmax, loss,
//! parameter updates) is exact. Batches travel as columns.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::noise::{gemm, hadamard, GemmBackend};
use crate::rng::RngState;

/// Training hyperparameters. Defaults follow the reference protocol:
/// 784-400-400-10 network, batch 100, momentum 0.5, learning rate 2.0
/// scaled by 0.99 each epoch, weight decay 0.001, weights drawn from a
/// zero-mean Gaussian with standard deviation 0.1, biases zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub layer_sizes: Vec<usize>,
    pub batch_size: usize,
    pub momentum: f64,
    pub lr_initial: f64,
    pub lr_epoch_decay: f64,
    pub weight_decay: f64,
    pub epochs: u32,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_sigma: f64,
    pub backend: GemmBackend,
    pub seed: u64,
    /// Route test-set evaluation through the noisy backend too (ablation;
    /// off by default so test error isolates training-time noise).
    pub noisy_eval: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            layer_sizes: vec![784, 400, 400, 10],
            batch_size: 100,
            momentum: 0.5,
            lr_initial: 2.0,
            lr_epoch_decay: 0.99,
            weight_decay: 0.001,
            epochs: 100,
            init_sigma: 0.1,
            backend: GemmBackend::exact(),
            seed: 0,
            noisy_eval: false,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config("need at least an input and an output layer"));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.lr_initial > 0.0) {
            return Err(Error::config("initial learning rate must be positive"));
        }
        if !(self.lr_epoch_decay > 0.0 && self.lr_epoch_decay <= 1.0) {
            return Err(Error::config("learning-rate decay must lie in (0, 1]"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be nonnegative"));
        }
        if self.init_sigma < 0.0 {
            return Err(Error::config("init sigma must be nonnegative"));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch index.
    pub fn epoch_lr(&self, epoch: u32) -> f64 {
        self.lr_initial * self.lr_epoch_decay.powi(epoch as i32 - 1)
    }
}

/// Layer weights, biases, and momentum velocities, plus the kernel-call
/// counter that keys noise draws.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    w_velocity: Vec<Matrix>,
    b_velocity: Vec<Vec<f64>>,
    kernel_calls: u64,
    epochs_done: u32,
}

impl MlpModel {
    /// Initialize from the config: `W_l ~ N(0, init_sigma^2)` keyed by
    /// `(seed, layer, entry)`, biases and velocities zero.
    pub fn init(cfg: &MlpConfig) -> Result<Self> {
        cfg.validate()?;
        let sizes = &cfg.layer_sizes;
        let init_rng = RngState::new(cfg.seed).substream(0);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut w_velocity = Vec::new();
        let mut b_velocity = Vec::new();
        for (l, pair) in sizes.windows(2).enumerate() {
            let (rows, cols) = (pair[0], pair[1]);
            let layer_rng = init_rng.substream(l as u64);
            let mut idx = 0u64;
            weights.push(Matrix::from_fn(rows, cols, |_, _| {
                let v = cfg.init_sigma * layer_rng.normal_at(idx);
                idx += 1;
                v
            }));
            biases.push(vec![0.0; cols]);
            w_velocity.push(Matrix::zeros(rows, cols));
            b_velocity.push(vec![0.0; cols]);
        }
        Ok(MlpModel {
            layer_sizes: sizes.clone(),
            weights,
            biases,
            w_velocity,
            b_velocity,
            kernel_calls: 0,
            epochs_done: 0,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn n_weight_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn kernel_calls(&self) -> u64 {
        self.kernel_calls
    }

    pub fn epochs_done(&self) -> u32 {
        self.epochs_done
    }

    fn next_call_rng(&mut self, backend: &GemmBackend) -> RngState {
        let rng = backend.call_rng(self.kernel_calls);
        self.kernel_calls += 1;
        rng
    }
}

/// Per-batch forward state: the input and hidden activations `X_l` and each
/// layer's pre-activations `Y_l`. The last pre-activation holds the class
/// scores.
#[derive(Clone, Debug)]
pub struct BatchCache {
    activations: Vec<Matrix>,
    preactivations: Vec<Matrix>,
}

impl BatchCache {
    pub fn scores(&self) -> &Matrix {
        self.preactivations.last().expect("at least one layer")
    }

    pub fn activations(&self) -> &[Matrix] {
        &self.activations
    }

    pub fn preactivations(&self) -> &[Matrix] {
        &self.preactivations
    }
}

/// Parameter gradients accumulated over one batch (sums, not means; the
/// update divides by the batch size).
#[derive(Clone, Debug)]
pub struct Gradients {
    pub d_weights: Vec<Matrix>,
    pub d_biases: Vec<Vec<f64>>,
    pub batch_len: usize,
}

#[inline]
fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

fn forward_with_counter(
    model: &MlpModel,
    input: &Matrix,
    backend: &GemmBackend,
    mut call_rng: impl FnMut() -> RngState,
) -> Result<BatchCache> {
    if input.rows() != model.layer_sizes[0] {
        return Err(Error::shape(format!(
            "input has {} rows, the network expects {}",
            input.rows(),
            model.layer_sizes[0]
        )));
    }
    let n_layers = model.weights.len();
    let mut activations = vec![input.clone()];
    let mut preactivations = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let x = activations.last().unwrap();
        let wt = model.weights[l].transpose();
        let mut y = gemm(&wt, x, backend, &call_rng())?;
        // bias add is exact
        let cols = y.cols();
        for (i, &b) in model.biases[l].iter().enumerate() {
            let row = &mut y.data_mut()[i * cols..(i + 1) * cols];
            for v in row.iter_mut() {
                *v += b;
            }
        }
        if l + 1 < n_layers {
            let mut x_next = y.clone();
            for v in x_next.data_mut().iter_mut() {
                *v = sigmoid(*v);
            }
            activations.push(x_next);
        }
        preactivations.push(y);
    }
    Ok(BatchCache {
        activations,
        preactivations,
    })
}

/// Forward pass for training: routes each layer's product through the
/// backend and advances the model's kernel-call counter.
pub fn forward(model: &mut MlpModel, input: &Matrix, backend: &GemmBackend) -> Result<BatchCache> {
    // borrow dance: collect the rng states this pass will consume up front
    let n_layers = model.weights.len();
    let base = model.kernel_calls;
    model.kernel_calls += n_layers as u64;
    let backend_copy = *backend;
    let mut next = base;
    forward_with_counter(model, input, backend, move || {
        let rng = backend_copy.call_rng(next);
        next += 1;
        rng
    })
}

/// Stable softmax + multiclass cross-entropy.
///
/// Returns the batch-mean loss and the output error `softmax(scores) -
/// targets`. Probabilities are clipped to `[1e-12, 1 - 1e-12]` before the
/// log so the loss stays finite.
pub fn softmax_cross_entropy(scores: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if scores.rows() != targets.rows() || scores.cols() != targets.cols() {
        return Err(Error::shape(format!(
            "scores {}x{} vs targets {}x{}",
            scores.rows(),
            scores.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    let (classes, batch) = (scores.rows(), scores.cols());
    let mut delta = Matrix::zeros(classes, batch);
    let mut loss = 0.0;
    for col in 0..batch {
        let mut max = f64::NEG_INFINITY;
        for row in 0..classes {
            max = max.max(scores.at(row, col));
        }
        let mut z = 0.0;
        for row in 0..classes {
            z += (scores.at(row, col) - max).exp();
        }
        for row in 0..classes {
            let p = ((scores.at(row, col) - max).exp() / z).clamp(1e-12, 1.0 - 1e-12);
            let t = targets.at(row, col);
            delta.set(row, col, p - t);
            if t > 0.0 {
                loss -= t * p.ln();
            }
        }
    }
    Ok((loss / batch as f64, delta))
}

/// Backward pass from the output error. Hidden errors and weight gradients
/// route through the backend; bias gradients are exact column sums.
pub fn backward(
    model: &mut MlpModel,
    cache: &BatchCache,
    output_delta: Matrix,
    backend: &GemmBackend,
) -> Result<Gradients> {
    let n_layers = model.weights.len();
    let batch_len = output_delta.cols();
    let mut d_weights = vec![Matrix::zeros(0, 0); n_layers];
    let mut d_biases = vec![Vec::new(); n_layers];
    let mut delta = output_delta;
    for l in (0..n_layers).rev() {
        // bias gradient: sum of the error rows over the batch
        d_biases[l] = (0..delta.rows())
            .map(|i| delta.row(i).iter().sum())
            .collect();
        let rng = model.next_call_rng(backend);
        d_weights[l] = gemm(&cache.activations[l], &delta.transpose(), backend, &rng)?;
        if l > 0 {
            let rng = model.next_call_rng(backend);
            let zeta = gemm(&model.weights[l], &delta, backend, &rng)?;
            // sigmoid derivative from the activation: x (1 - x)
            let x = &cache.activations[l];
            let gprime = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                let v = x.at(i, j);
                v * (1.0 - v)
            });
            let rng = model.next_call_rng(backend);
            delta = hadamard(&zeta, &gprime, backend, &rng)?;
        }
    }
    Ok(Gradients {
        d_weights,
        d_biases,
        batch_len,
    })
}

/// Momentum SGD update with weight decay:
/// `v <- p v - lr (dW / batch + lambda W)`, `W <- W + v`. Biases skip the
/// decay term. The learning rate comes from the 1-based `epoch`.
pub fn sgd_update(
    model: &mut MlpModel,
    grads: &Gradients,
    epoch: u32,
    cfg: &MlpConfig,
) -> Result<()> {
    if grads.d_weights.len() != model.weights.len() {
        return Err(Error::shape("gradient layer count mismatch"));
    }
    let lr = cfg.epoch_lr(epoch);
    let inv_batch = 1.0 / grads.batch_len as f64;
    for l in 0..model.weights.len() {
        if grads.d_weights[l].rows() != model.weights[l].rows()
            || grads.d_weights[l].cols() != model.weights[l].cols()
        {
            return Err(Error::shape(format!("gradient shape mismatch at layer {l}")));
        }
        let w = model.weights[l].data_mut();
        let v = model.w_velocity[l].data_mut();
        let g = grads.d_weights[l].data();
        for i in 0..w.len() {
            v[i] = cfg.momentum * v[i] - lr * (g[i] * inv_batch + cfg.weight_decay * w[i]);
            w[i] += v[i];
        }
        let b = &mut model.biases[l];
        let vb = &mut model.b_velocity[l];
        let gb = &grads.d_biases[l];
        for i in 0..b.len() {
            vb[i] = cfg.momentum * vb[i] - lr * gb[i] * inv_batch;
            b[i] += vb[i];
        }
    }
    Ok(())
}

/// Batch-mean cross-entropy of the model on the given inputs under an exact
/// forward pass (used by gradient checking).
pub fn exact_loss(model: &MlpModel, input: &Matrix, targets: &Matrix) -> Result<f64> {
    let exact = GemmBackend::exact();
    let cache = forward_with_counter(model, input, &exact, || RngState::new(0))?;
    Ok(softmax_cross_entropy(cache.scores(), targets)?.0)
}

const EVAL_CHUNK: usize = 500;

/// Classify the full set by argmax of the scores under an exact forward
/// pass. Returns the misclassified count and the error rate.
pub fn evaluate(model: &MlpModel, set: &Dataset) -> Result<(usize, f64)> {
    evaluate_inner(model, set, &GemmBackend::exact(), None)
}

/// Evaluation routed through a noisy backend (ablation path). `stream_tag`
/// keys the draws so repeated calls can be made independent or identical.
pub fn evaluate_noisy(
    model: &MlpModel,
    set: &Dataset,
    backend: &GemmBackend,
    stream_tag: u64,
) -> Result<(usize, f64)> {
    evaluate_inner(model, set, backend, Some(stream_tag))
}

fn evaluate_inner(
    model: &MlpModel,
    set: &Dataset,
    backend: &GemmBackend,
    stream_tag: Option<u64>,
) -> Result<(usize, f64)> {
    if set.is_empty() {
        return Err(Error::config("cannot evaluate on an empty set"));
    }
    let n = set.len();
    let mut miss = 0usize;
    let mut chunk_start = 0usize;
    let mut call = 0u64;
    while chunk_start < n {
        let chunk: Vec<usize> = (chunk_start..n.min(chunk_start + EVAL_CHUNK)).collect();
        let x = set.batch_inputs(&chunk);
        let tag = stream_tag.unwrap_or(0);
        let cache = forward_with_counter(model, &x, backend, || {
            let rng = RngState::stream(backend.seed, u64::MAX - tag).substream(call);
            call += 1;
            rng
        })?;
        let scores = cache.scores();
        for (c, &idx) in chunk.iter().enumerate() {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for row in 0..scores.rows() {
                let v = scores.at(row, c);
                if v > best_v {
                    best_v = v;
                    best = row;
                }
            }
            if best != set.labels[idx] as usize {
                miss += 1;
            }
        }
        chunk_start += EVAL_CHUNK;
    }
    Ok((miss, miss as f64 / n as f64))
}

/// One epoch's summary row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    /// Mean training cross-entropy over the epoch's batches.
    pub train_xent: f64,
    pub test_miscount: usize,
    pub test_error: f64,
    /// Wall-clock seconds the epoch took (diagnostic only; not part of the
    /// deterministic CSV output).
    pub wall_secs: f64,
    /// Bit-budget label of the backend ("inf" for exact/control).
    pub n_bits: String,
}

/// Per-epoch training history.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

/// Train a fresh model under the config. Returns the model and its trace.
pub fn train(cfg: &MlpConfig, train_set: &Dataset, test_set: &Dataset) -> Result<(MlpModel, TrainTrace)> {
    let mut model = MlpModel::init(cfg)?;
    let mut trace = TrainTrace::default();
    train_from(cfg, &mut model, &mut trace, train_set, test_set)?;
    Ok((model, trace))
}

/// Continue training a model (fresh or loaded from a checkpoint) up to
/// `cfg.epochs`. Shuffles and noise are keyed by epoch and kernel-call
/// counter, so resuming from a checkpoint reproduces a straight run
/// bit-for-bit.
pub fn train_from(
    cfg: &MlpConfig,
    model: &mut MlpModel,
    trace: &mut TrainTrace,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<()> {
    cfg.validate()?;
    if model.layer_sizes != cfg.layer_sizes {
        return Err(Error::config("model shape does not match the config"));
    }
    if cfg.layer_sizes[0] != 784 || *cfg.layer_sizes.last().unwrap() != 10 {
        return Err(Error::data(
            "this trainer expects 784-dimensional inputs and 10 classes",
        ));
    }
    if train_set.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let n = train_set.len();
    let shuffle_root = RngState::new(cfg.seed).substream(1);
    for epoch in (model.epochs_done + 1)..=cfg.epochs {
        let started = Instant::now();
        let order = permutation(n, &shuffle_root.substream(epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = train_set.batch_inputs(batch);
            let t = train_set.batch_targets(batch);
            let cache = forward(model, &x, &cfg.backend)?;
            let (loss, delta) = softmax_cross_entropy(cache.scores(), &t)?;
            if !loss.is_finite() {
                return Err(Error::domain(format!(
                    "non-finite training loss in epoch {epoch}"
                )));
            }
            let grads = backward(model, &cache, delta, &cfg.backend)?;
            sgd_update(model, &grads, epoch, cfg)?;
            loss_sum += loss * batch.len() as f64;
        }
        let (miss, rate) = if cfg.noisy_eval {
            evaluate_noisy(model, test_set, &cfg.backend, epoch as u64)?
        } else {
            evaluate(model, test_set)?
        };
        model.epochs_done = epoch;
        trace.epochs.push(EpochRecord {
            epoch,
            train_xent: loss_sum / n as f64,
            test_miscount: miss,
            test_error: rate,
            wall_secs: started.elapsed().as_secs_f64(),
            n_bits: cfg.backend.n_bits.to_string(),
        });
    }
    Ok(())
}

/// Fisher-Yates permutation of `0..n` driven by the counter rng.
fn permutation(n: usize, rng: &RngState) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.bits_at(i as u64) % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

// ---------------------------------------------------------------------------
// Checkpointing: versioned little-endian binary dump of shapes, parameters,
// velocities, and RNG counters; enough to resume bit-exactly.

const CKPT_MAGIC: &[u8; 8] = b"SCNNCKP1";

/// Serialize the model to a checkpoint file.
pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(model.layer_sizes.len() as u32).to_le_bytes());
    for &s in &model.layer_sizes {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    out.extend_from_slice(&model.epochs_done.to_le_bytes());
    out.extend_from_slice(&model.kernel_calls.to_le_bytes());
    for l in 0..model.weights.len() {
        for &v in model.weights[l].data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &model.biases[l] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in model.w_velocity[l].data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &model.b_velocity[l] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Load a model from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::Parse {
                offset: *cur,
                msg: "truncated checkpoint".into(),
            });
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 8)? != CKPT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "not a checkpoint file".into(),
        });
    }
    let n_sizes = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    if n_sizes < 2 || n_sizes > 1024 {
        return Err(Error::Parse {
            offset: 8,
            msg: format!("implausible layer count {n_sizes}"),
        });
    }
    let mut layer_sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        layer_sizes.push(u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize);
    }
    let epochs_done = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    let kernel_calls = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
    let read_f64s = |cur: &mut usize, n: usize| -> Result<Vec<f64>> {
        let raw = take(cur, 8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut w_velocity = Vec::new();
    let mut b_velocity = Vec::new();
    for pair in layer_sizes.clone().windows(2) {
        let (rows, cols) = (pair[0], pair[1]);
        weights.push(Matrix::from_vec(rows, cols, read_f64s(&mut cur, rows * cols)?)?);
        biases.push(read_f64s(&mut cur, cols)?);
        w_velocity.push(Matrix::from_vec(rows, cols, read_f64s(&mut cur, rows * cols)?)?);
        b_velocity.push(read_f64s(&mut cur, cols)?);
    }
    if cur != bytes.len() {
        return Err(Error::Parse {
            offset: cur,
            msg: "trailing bytes after checkpoint payload".into(),
        });
    }
    Ok(MlpModel {
        layer_sizes,
        weights,
        biases,
        w_velocity,
        b_velocity,
        kernel_calls,
        epochs_done,
    })
}
