//! Single-layer LSTM encoder/decoder for trajectory embeddings.
//!
//! The encoder consumes per-step displacements scaled by the dataset
//! displacement spread `sigma`; its final hidden state is the latent code.
//! The decoder starts from the code and emits one displacement per step
//! through a linear output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Point2, Trajectory};
use crate::linalg::{sigmoid, Matrix};

pub const DEFAULT_HIDDEN_DIM: usize = 32;
/// Displacements are two-dimensional.
pub const INPUT_DIM: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LstmError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("trajectory {ped_id} has {len} samples, at least 2 are needed")]
    InsufficientHistory { ped_id: u64, len: usize },
    #[error("decode requested zero steps")]
    EmptyRequest,
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("weights contain non-finite values")]
    NonFinite,
}

/// Gate parameters of one LSTM cell, gate blocks ordered `[i, f, g, o]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `4H × I`
    pub w_input: Matrix,
    /// `4H × H`
    pub w_hidden: Matrix,
    /// `4H`
    pub bias: Vec<f64>,
}

impl LstmCell {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w_input: Matrix::zeros(4 * hidden_dim, input_dim),
            w_hidden: Matrix::zeros(4 * hidden_dim, hidden_dim),
            bias: vec![0.0; 4 * hidden_dim],
        }
    }

    pub fn xavier<R: rand::Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut bias = vec![0.0; 4 * hidden_dim];
        // forget gate starts open
        bias[hidden_dim..2 * hidden_dim].iter_mut().for_each(|b| *b = 1.0);
        Self {
            input_dim,
            hidden_dim,
            w_input: Matrix::xavier(4 * hidden_dim, input_dim, rng),
            w_hidden: Matrix::xavier(4 * hidden_dim, hidden_dim, rng),
            bias,
        }
    }

    fn validate(&self) -> Result<(), LstmError> {
        let h4 = 4 * self.hidden_dim;
        let checks = [
            ("w_input rows", h4, self.w_input.rows),
            ("w_input cols", self.input_dim, self.w_input.cols),
            ("w_hidden rows", h4, self.w_hidden.rows),
            ("w_hidden cols", self.hidden_dim, self.w_hidden.cols),
            ("bias", h4, self.bias.len()),
            ("w_input data", h4 * self.input_dim, self.w_input.data.len()),
            ("w_hidden data", h4 * self.hidden_dim, self.w_hidden.data.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(LstmError::Shape { what, expected, got });
            }
        }
        if !(self.w_input.is_finite()
            && self.w_hidden.is_finite()
            && self.bias.iter().all(|b| b.is_finite()))
        {
            return Err(LstmError::NonFinite);
        }
        Ok(())
    }
}

/// Intermediate activations of one step, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

pub(crate) fn step_cached(cell: &LstmCell, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>, StepCache) {
    let hd = cell.hidden_dim;
    let mut z = cell.bias.clone();
    cell.w_input.matvec_acc(x, &mut z);
    cell.w_hidden.matvec_acc(h, &mut z);
    let i: Vec<f64> = z[..hd].iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<f64> = z[hd..2 * hd].iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<f64> = z[2 * hd..3 * hd].iter().map(|v| v.tanh()).collect();
    let o: Vec<f64> = z[3 * hd..].iter().map(|&v| sigmoid(v)).collect();
    let c_new: Vec<f64> = (0..hd).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
    let h_new: Vec<f64> = (0..hd).map(|k| o[k] * tanh_c[k]).collect();
    let cache = StepCache {
        x: x.to_vec(),
        h_prev: h.to_vec(),
        c_prev: c.to_vec(),
        i,
        f,
        g,
        o,
        tanh_c,
    };
    (h_new, c_new, cache)
}

/// One LSTM update: `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_step(
    cell: &LstmCell,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), LstmError> {
    let shape = |what, expected: usize, got: usize| {
        if expected == got {
            Ok(())
        } else {
            Err(LstmError::Shape { what, expected, got })
        }
    };
    shape("input", cell.input_dim, x.len())?;
    shape("hidden state", cell.hidden_dim, h.len())?;
    shape("cell state", cell.hidden_dim, c.len())?;
    let (h, c, _) = step_cached(cell, x, h, c);
    Ok((h, c))
}

/// Encoder, decoder and output head of the trajectory autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmWeights {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub encoder: LstmCell,
    pub decoder: LstmCell,
    /// `2 × H` output projection.
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    /// Displacement normalization scale in meters.
    pub sigma: f64,
}

/// Fixed-length embedding of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub values: Vec<f64>,
}

impl LatentCode {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl LstmWeights {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            input_dim: INPUT_DIM,
            hidden_dim,
            encoder: LstmCell::zeros(INPUT_DIM, hidden_dim),
            decoder: LstmCell::zeros(INPUT_DIM, hidden_dim),
            head_w: Matrix::zeros(INPUT_DIM, hidden_dim),
            head_b: vec![0.0; INPUT_DIM],
            sigma: 1.0,
        }
    }

    /// Seeded Xavier-uniform initialization.
    pub fn init(hidden_dim: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            input_dim: INPUT_DIM,
            hidden_dim,
            encoder: LstmCell::xavier(INPUT_DIM, hidden_dim, &mut rng),
            decoder: LstmCell::xavier(INPUT_DIM, hidden_dim, &mut rng),
            head_w: Matrix::xavier(INPUT_DIM, hidden_dim, &mut rng),
            head_b: vec![0.0; INPUT_DIM],
            sigma,
        }
    }

    pub fn validate(&self) -> Result<(), LstmError> {
        if self.input_dim != INPUT_DIM {
            return Err(LstmError::Shape {
                what: "input_dim",
                expected: INPUT_DIM,
                got: self.input_dim,
            });
        }
        for cell in [&self.encoder, &self.decoder] {
            cell.validate()?;
            if cell.hidden_dim != self.hidden_dim || cell.input_dim != self.input_dim {
                return Err(LstmError::Shape {
                    what: "cell hidden_dim",
                    expected: self.hidden_dim,
                    got: cell.hidden_dim,
                });
            }
        }
        if self.head_w.rows != INPUT_DIM
            || self.head_w.cols != self.hidden_dim
            || self.head_w.data.len() != INPUT_DIM * self.hidden_dim
        {
            return Err(LstmError::Shape {
                what: "head_w",
                expected: INPUT_DIM * self.hidden_dim,
                got: self.head_w.data.len(),
            });
        }
        if self.head_b.len() != INPUT_DIM {
            return Err(LstmError::Shape {
                what: "head_b",
                expected: INPUT_DIM,
                got: self.head_b.len(),
            });
        }
        if !(self.head_w.is_finite()
            && self.head_b.iter().all(|v| v.is_finite())
            && self.sigma.is_finite()
            && self.sigma > 0.0)
        {
            return Err(LstmError::NonFinite);
        }
        Ok(())
    }

    /// Normalized displacement inputs for a trajectory.
    pub fn normalized_inputs(&self, traj: &Trajectory) -> Result<Vec<[f64; 2]>, LstmError> {
        if traj.len() < 2 {
            return Err(LstmError::InsufficientHistory {
                ped_id: traj.ped_id(),
                len: traj.len(),
            });
        }
        Ok(traj
            .displacements()
            .into_iter()
            .map(|d| [d.x / self.sigma, d.y / self.sigma])
            .collect())
    }

    /// Runs the encoder over already-normalized displacements.
    pub fn encode_normalized(&self, inputs: &[[f64; 2]]) -> LatentCode {
        let mut h = vec![0.0; self.hidden_dim];
        let mut c = vec![0.0; self.hidden_dim];
        for x in inputs {
            let (h2, c2, _) = step_cached(&self.encoder, x, &h, &c);
            h = h2;
            c = c2;
        }
        LatentCode { values: h }
    }

    /// Encodes a trajectory into its latent code.
    pub fn encode(&self, traj: &Trajectory) -> Result<LatentCode, LstmError> {
        let inputs = self.normalized_inputs(traj)?;
        Ok(self.encode_normalized(&inputs))
    }

    /// Autoregressive decoding in normalized units.
    pub fn decode_normalized(&self, code: &LatentCode, steps: usize) -> Result<Vec<[f64; 2]>, LstmError> {
        if steps == 0 {
            return Err(LstmError::EmptyRequest);
        }
        if code.len() != self.hidden_dim {
            return Err(LstmError::Shape {
                what: "latent code",
                expected: self.hidden_dim,
                got: code.len(),
            });
        }
        let mut h = code.values.clone();
        let mut c = vec![0.0; self.hidden_dim];
        let mut x = [0.0; 2];
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (h2, c2, _) = step_cached(&self.decoder, &x, &h, &c);
            h = h2;
            c = c2;
            let mut y = self.head_b.clone();
            self.head_w.matvec_acc(&h, &mut y);
            x = [y[0], y[1]];
            out.push(x);
        }
        Ok(out)
    }

    /// Decodes `steps` displacements in meters.
    pub fn decode(&self, code: &LatentCode, steps: usize) -> Result<Vec<Point2>, LstmError> {
        Ok(self
            .decode_normalized(code, steps)?
            .into_iter()
            .map(|[x, y]| Point2::new(x * self.sigma, y * self.sigma))
            .collect())
    }

    /// Encodes then decodes, returning absolute positions anchored at the
    /// trajectory's first sample.
    pub fn reconstruct(&self, traj: &Trajectory) -> Result<Vec<Point2>, LstmError> {
        let code = self.encode(traj)?;
        let disps = self.decode(&code, traj.len() - 1)?;
        let mut p = traj.first().p;
        let mut out = Vec::with_capacity(traj.len());
        out.push(p);
        for d in disps {
            p = p + d;
            out.push(p);
        }
        Ok(out)
    }
}
