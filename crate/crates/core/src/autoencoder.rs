//! Self-supervised training of the trajectory autoencoder with
//! backpropagation through time.
//!
//! The decoder is teacher-forced during training: step `k` receives the
//! true displacement of step `k-1` (zero at the first step). Inference in
//! [`LstmWeights::decode`] feeds back its own outputs instead.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::Trajectory;
use crate::linalg::{global_norm, AdamState};
use crate::lstm::{step_cached, LstmCell, LstmError, LstmWeights, StepCache, DEFAULT_HIDDEN_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    Adam,
}

/// What the decoder receives as input while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderFeed {
    /// The true previous displacement.
    TeacherForcing,
    /// Its own previous output, differentiated through, exactly as at
    /// inference time.
    FreeRunning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub clip_norm: f64,
    pub optimizer: Optimizer,
    pub feed: DecoderFeed,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: DEFAULT_HIDDEN_DIM,
            learning_rate: 0.01,
            epochs: 1000,
            seed: 0,
            batch_size: Some(16),
            clip_norm: 5.0,
            optimizer: Optimizer::Adam,
            feed: DecoderFeed::FreeRunning,
            cosine_decay: true,
        }
    }
}

impl LstmCell {
    fn param_slices(&self) -> [&[f64]; 3] {
        [&self.w_input.data, &self.w_hidden.data, &self.bias]
    }

    fn param_slices_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.w_input.data, &mut self.w_hidden.data, &mut self.bias]
    }
}

impl LstmWeights {
    /// Every trainable parameter as flat slices (σ excluded).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(8);
        v.extend(self.encoder.param_slices());
        v.extend(self.decoder.param_slices());
        v.push(&self.head_w.data);
        v.push(&self.head_b);
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(8);
        v.extend(self.encoder.param_slices_mut());
        v.extend(self.decoder.param_slices_mut());
        v.push(&mut self.head_w.data);
        v.push(&mut self.head_b);
        v
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        for s in self.param_slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn zeros_like(&self) -> LstmWeights {
        let mut g = LstmWeights::zeros(self.hidden_dim);
        g.sigma = self.sigma;
        g
    }
}

/// Backward through one cached step; accumulates parameter gradients into
/// `grad` and returns `(dx, dh_prev, dc_prev)`.
fn cell_backward(
    cell: &LstmCell,
    cache: &StepCache,
    dh: &[f64],
    dc_next: &[f64],
    grad: &mut LstmCell,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = cell.hidden_dim;
    let mut dz = vec![0.0; 4 * hd];
    let mut dc_prev = vec![0.0; hd];
    for k in 0..hd {
        let (i, f, g, o, tc) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k], cache.tanh_c[k]);
        let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
        dz[k] = dc * g * i * (1.0 - i);
        dz[hd + k] = dc * cache.c_prev[k] * f * (1.0 - f);
        dz[2 * hd + k] = dc * i * (1.0 - g * g);
        dz[3 * hd + k] = dh[k] * tc * o * (1.0 - o);
        dc_prev[k] = dc * f;
    }
    grad.w_input.add_outer(&dz, &cache.x);
    grad.w_hidden.add_outer(&dz, &cache.h_prev);
    for (b, d) in grad.bias.iter_mut().zip(&dz) {
        *b += d;
    }
    let mut dx = vec![0.0; cell.input_dim];
    cell.w_input.matvec_t_acc(&dz, &mut dx);
    let mut dh_prev = vec![0.0; hd];
    cell.w_hidden.matvec_t_acc(&dz, &mut dh_prev);
    (dx, dh_prev, dc_prev)
}

/// Summed squared reconstruction error of one normalized sequence; adds
/// `scale ×` its gradient into `grad`.
fn sequence_loss_grad(
    w: &LstmWeights,
    seq: &[[f64; 2]],
    feed: DecoderFeed,
    scale: f64,
    grad: &mut LstmWeights,
) -> f64 {
    let hd = w.hidden_dim;
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let mut enc_caches = Vec::with_capacity(seq.len());
    for x in seq {
        let (h2, c2, cache) = step_cached(&w.encoder, x, &h, &c);
        enc_caches.push(cache);
        h = h2;
        c = c2;
    }

    let mut c = vec![0.0; hd];
    let mut dec_caches = Vec::with_capacity(seq.len());
    let mut hiddens = Vec::with_capacity(seq.len());
    let mut dys = Vec::with_capacity(seq.len());
    let mut loss = 0.0;
    let mut x = [0.0; 2];
    for target in seq {
        let (h2, c2, cache) = step_cached(&w.decoder, &x, &h, &c);
        dec_caches.push(cache);
        h = h2;
        c = c2;
        let mut y = w.head_b.clone();
        w.head_w.matvec_acc(&h, &mut y);
        let e = [y[0] - target[0], y[1] - target[1]];
        loss += e[0] * e[0] + e[1] * e[1];
        dys.push([2.0 * e[0] * scale, 2.0 * e[1] * scale]);
        hiddens.push(h.clone());
        x = match feed {
            DecoderFeed::TeacherForcing => *target,
            DecoderFeed::FreeRunning => [y[0], y[1]],
        };
    }

    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    // gradient reaching output k through the input of step k+1
    let mut dx_carry = [0.0; 2];
    for k in (0..seq.len()).rev() {
        let dy = [dys[k][0] + dx_carry[0], dys[k][1] + dx_carry[1]];
        grad.head_w.add_outer(&dy, &hiddens[k]);
        grad.head_b[0] += dy[0];
        grad.head_b[1] += dy[1];
        let mut dh = dh_next;
        w.head_w.matvec_t_acc(&dy, &mut dh);
        let (dx, dhp, dcp) = cell_backward(&w.decoder, &dec_caches[k], &dh, &dc_next, &mut grad.decoder);
        dh_next = dhp;
        dc_next = dcp;
        if feed == DecoderFeed::FreeRunning {
            dx_carry = [dx[0], dx[1]];
        }
    }

    // The code is the decoder's initial hidden state; the encoder's final
    // cell state is discarded.
    let mut dh = dh_next;
    let mut dc = vec![0.0; hd];
    for k in (0..seq.len()).rev() {
        let (_, dhp, dcp) = cell_backward(&w.encoder, &enc_caches[k], &dh, &dc, &mut grad.encoder);
        dh = dhp;
        dc = dcp;
    }
    loss
}

/// Mean per-step squared reconstruction error over `batch` (normalized
/// displacement sequences) and its gradient.
pub fn loss_and_grad(w: &LstmWeights, batch: &[Vec<[f64; 2]>], feed: DecoderFeed) -> (f64, LstmWeights) {
    let steps: usize = batch.iter().map(|s| s.len()).sum();
    let scale = 1.0 / steps.max(1) as f64;
    let mut grad = w.zeros_like();
    let total: f64 = batch
        .iter()
        .map(|seq| sequence_loss_grad(w, seq, feed, scale, &mut grad))
        .sum();
    (total * scale, grad)
}

/// Loss only; used for finite-difference checks and evaluation.
pub fn loss(w: &LstmWeights, batch: &[Vec<[f64; 2]>], feed: DecoderFeed) -> f64 {
    loss_and_grad(w, batch, feed).0
}

/// Pooled standard deviation of displacement components.
pub fn displacement_sigma(dataset: &[Trajectory]) -> f64 {
    let comps: Vec<f64> = dataset
        .iter()
        .flat_map(|t| t.displacements())
        .flat_map(|d| [d.x, d.y])
        .collect();
    if comps.len() < 2 {
        return 1.0;
    }
    let n = comps.len() as f64;
    let mean = comps.iter().sum::<f64>() / n;
    let var = comps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 1e-9 {
        sd
    } else {
        1.0
    }
}

/// Clips the gradient to `max_norm` in global L2 norm.
fn clip(grad: &mut LstmWeights, max_norm: f64) {
    let norm = global_norm(grad.param_slices());
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in grad.param_slices_mut() {
            p.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Trains the autoencoder; returns the weights and per-epoch mean loss.
pub fn train_autoencoder(
    dataset: &[Trajectory],
    cfg: &AutoencoderConfig,
) -> Result<(LstmWeights, Vec<f64>), LstmError> {
    if dataset.is_empty() {
        return Err(LstmError::EmptyDataset);
    }
    let sigma = displacement_sigma(dataset);
    let mut w = LstmWeights::init(cfg.hidden_dim, sigma, cfg.seed);
    let seqs = dataset
        .iter()
        .map(|t| w.normalized_inputs(t))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0ae0);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let batch_size = cfg.batch_size.unwrap_or(seqs.len()).clamp(1, seqs.len());
    let n_params = w.flat_params().len();
    let mut adam = AdamState::new(n_params);
    let mut t = 0u32;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = scheduled_lr(cfg.learning_rate, epoch, cfg.epochs, cfg.cosine_decay);
        if batch_size < seqs.len() {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Vec<[f64; 2]>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let steps: usize = batch.iter().map(|s| s.len()).sum();
            let (l, mut grad) = loss_and_grad(&w, &batch, cfg.feed);
            epoch_loss += l * steps as f64;
            epoch_steps += steps;
            clip(&mut grad, cfg.clip_norm);
            t += 1;
            match cfg.optimizer {
                Optimizer::GradientDescent => {
                    for (p, g) in w.param_slices_mut().into_iter().zip(grad.param_slices()) {
                        for (pv, gv) in p.iter_mut().zip(g) {
                            *pv -= lr * gv;
                        }
                    }
                }
                Optimizer::Adam => {
                    let mut flat = w.flat_params();
                    adam.update(&mut flat, &grad.flat_params(), lr, t);
                    w.set_flat_params(&flat);
                }
            }
        }
        history.push(epoch_loss / epoch_steps.max(1) as f64);
    }
    Ok((w, history))
}

/// Learning rate for `epoch` out of `epochs`.
pub fn scheduled_lr(base: f64, epoch: usize, epochs: usize, cosine: bool) -> f64 {
    if !cosine || epochs <= 1 {
        return base;
    }
    let progress = epoch as f64 / epochs as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Autoregressive reconstruction ADE in units of `sigma`, over the decoded
/// (non-anchor) positions.
pub fn reconstruction_ade(w: &LstmWeights, traj: &Trajectory) -> Result<f64, LstmError> {
    let rec = w.reconstruct(traj)?;
    let n = traj.len() - 1;
    let total: f64 = rec
        .iter()
        .zip(traj.positions())
        .skip(1)
        .map(|(a, b)| a.distance(&b))
        .sum();
    Ok(total / n as f64 / w.sigma)
}
