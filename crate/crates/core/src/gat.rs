//! Dense-graph attention predictor of each person's next position.
//!
//! Every tracked person is a node; the graph is complete with self-loops.
//! Node features are the person's latent code, their position relative to
//! the robot and a 5×5 static-occupancy patch around them. Two attention
//! layers mix information across people, and a small output MLP reads the
//! node's own features together with the attended features to produce the
//! next displacement.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{GeomError, Point2, Trajectory};
use crate::grid::OccupancyGrid;
use crate::linalg::{elu, elu_grad, global_norm, leaky_relu, AdamState, Matrix};
use crate::lstm::{LatentCode, LstmError, LstmWeights};

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_LAYERS: usize = 2;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const PATCH_SIZE: usize = 5;
/// Samples of history fed to the encoder.
pub const DEFAULT_WINDOW: usize = 9;
/// Radius stamped around each predicted point, meters.
pub const DEFAULT_PREDICTED_RADIUS: f64 = 0.4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatError {
    #[error("graph needs at least one node")]
    EmptyGraph,
    #[error("codes and positions are not aligned: {0}")]
    Alignment(String),
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Complete graph over the people in a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SocialGraph {
    pub ped_ids: Vec<u64>,
    pub features: Vec<Vec<f64>>,
}

impl SocialGraph {
    pub fn new(ped_ids: Vec<u64>, features: Vec<Vec<f64>>) -> Result<Self, GatError> {
        if ped_ids.is_empty() {
            return Err(GatError::EmptyGraph);
        }
        if ped_ids.len() != features.len() {
            return Err(GatError::Alignment(format!("{} ids, {} feature rows", ped_ids.len(), features.len())));
        }
        let d = features[0].len();
        if let Some(f) = features.iter().find(|f| f.len() != d) {
            return Err(GatError::Shape { what: "node feature", expected: d, got: f.len() });
        }
        Ok(Self { ped_ids, features })
    }

    pub fn node_count(&self) -> usize {
        self.ped_ids.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    /// All ordered pairs, self-loops included.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> {
        let n = self.node_count();
        (0..n).flat_map(move |i| (0..n).map(move |j| (i, j)))
    }
}

/// Node feature length for a given code size.
pub fn feature_dim(code_dim: usize) -> usize {
    code_dim + 2 + PATCH_SIZE * PATCH_SIZE
}

pub fn node_features(code: &LatentCode, p: Point2, robot: Point2, grid: &OccupancyGrid) -> Vec<f64> {
    let mut f = Vec::with_capacity(feature_dim(code.len()));
    f.extend_from_slice(&code.values);
    f.push(p.x - robot.x);
    f.push(p.y - robot.y);
    f.extend(grid.static_patch(p, PATCH_SIZE));
    f
}

pub fn build_graph(
    codes: &[(u64, LatentCode)],
    positions: &[(u64, Point2)],
    robot: Point2,
    grid: &OccupancyGrid,
) -> Result<SocialGraph, GatError> {
    if codes.len() != positions.len() {
        return Err(GatError::Alignment(format!("{} codes, {} positions", codes.len(), positions.len())));
    }
    let mut seen = BTreeSet::new();
    let mut ids = Vec::with_capacity(codes.len());
    let mut feats = Vec::with_capacity(codes.len());
    for ((id, code), (pid, p)) in codes.iter().zip(positions) {
        if id != pid {
            return Err(GatError::Alignment(format!("code for {id} paired with position for {pid}")));
        }
        if !seen.insert(*id) {
            return Err(GatError::Alignment(format!("duplicate person {id}")));
        }
        ids.push(*id);
        feats.push(node_features(code, *p, robot, grid));
    }
    SocialGraph::new(ids, feats)
}

/// One attention layer: `e_ij = LeakyReLU(a_srcᵀ W h_i + a_dstᵀ W h_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    pub w: Matrix,
    pub a_src: Vec<f64>,
    pub a_dst: Vec<f64>,
}

impl GatLayer {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Self {
            w: Matrix::zeros(output_dim, input_dim),
            a_src: vec![0.0; output_dim],
            a_dst: vec![0.0; output_dim],
        }
    }

    fn init<R: Rng>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let lim = (6.0 / (output_dim + 1) as f64).sqrt();
        Self {
            w: Matrix::xavier(output_dim, input_dim, rng),
            a_src: (0..output_dim).map(|_| rng.random_range(-lim..=lim)).collect(),
            a_dst: (0..output_dim).map(|_| rng.random_range(-lim..=lim)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatWeights {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub slope: f64,
    pub layers: Vec<GatLayer>,
    /// Output MLP over `[input features ⧺ last layer output]`.
    pub head_w1: Matrix,
    pub head_b1: Vec<f64>,
    pub head_w2: Matrix,
    pub head_b2: Vec<f64>,
    /// Meters per output unit.
    pub scale: f64,
    /// History samples encoded per person.
    pub window: usize,
}

/// Attention coefficients and updated features of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub features: Vec<Vec<f64>>,
    /// Row-major `n × n` attention.
    pub attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    raw: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    agg: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    layers: Vec<LayerCache>,
    head_in: Vec<Vec<f64>>,
    head_pre: Vec<Vec<f64>>,
    head_hidden: Vec<Vec<f64>>,
    out: Vec<[f64; 2]>,
}

fn layer_forward(layer: &GatLayer, slope: f64, input: &[Vec<f64>]) -> (Vec<Vec<f64>>, LayerCache) {
    let n = input.len();
    let z: Vec<Vec<f64>> = input.iter().map(|h| layer.w.matvec(h)).collect();
    let s: Vec<f64> = z.iter().map(|zi| crate::linalg::dot(&layer.a_src, zi)).collect();
    let t: Vec<f64> = z.iter().map(|zj| crate::linalg::dot(&layer.a_dst, zj)).collect();
    let mut raw = vec![vec![0.0; n]; n];
    let mut alpha = vec![vec![0.0; n]; n];
    let dout = layer.w.rows;
    let mut agg = vec![vec![0.0; dout]; n];
    for i in 0..n {
        for j in 0..n {
            raw[i][j] = s[i] + t[j];
        }
        let e: Vec<f64> = raw[i].iter().map(|&r| leaky_relu(r, slope)).collect();
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = ex.iter().sum();
        for j in 0..n {
            alpha[i][j] = ex[j] / sum;
            for k in 0..dout {
                agg[i][k] += alpha[i][j] * z[j][k];
            }
        }
    }
    let out = agg.iter().map(|a| a.iter().map(|&v| elu(v)).collect()).collect();
    (
        out,
        LayerCache {
            input: input.to_vec(),
            z,
            raw,
            alpha,
            agg,
        },
    )
}

/// Applies one attention layer to a set of node features.
pub fn gat_layer(layer: &GatLayer, slope: f64, features: &[Vec<f64>]) -> Result<LayerOutput, GatError> {
    if features.is_empty() {
        return Err(GatError::EmptyGraph);
    }
    for f in features {
        if f.len() != layer.w.cols {
            return Err(GatError::Shape { what: "layer input", expected: layer.w.cols, got: f.len() });
        }
    }
    let (features, cache) = layer_forward(layer, slope, features);
    Ok(LayerOutput { features, attention: cache.alpha })
}

impl GatWeights {
    pub fn zeros(input_dim: usize, hidden_dim: usize, layers: usize, head_hidden: usize) -> Self {
        let mut ls = Vec::with_capacity(layers);
        for l in 0..layers {
            ls.push(GatLayer::zeros(if l == 0 { input_dim } else { hidden_dim }, hidden_dim));
        }
        let last = if layers == 0 { 0 } else { hidden_dim };
        Self {
            input_dim,
            hidden_dim,
            slope: LEAKY_SLOPE,
            layers: ls,
            head_w1: Matrix::zeros(head_hidden, input_dim + last),
            head_b1: vec![0.0; head_hidden],
            head_w2: Matrix::zeros(2, head_hidden),
            head_b2: vec![0.0; 2],
            scale: 1.0,
            window: DEFAULT_WINDOW,
        }
    }

    pub fn init(input_dim: usize, hidden_dim: usize, layers: usize, head_hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(input_dim, hidden_dim, layers, head_hidden);
        for l in 0..layers {
            w.layers[l] = GatLayer::init(if l == 0 { input_dim } else { hidden_dim }, hidden_dim, &mut rng);
        }
        w.head_w1 = Matrix::xavier(w.head_w1.rows, w.head_w1.cols, &mut rng);
        w.head_w2 = Matrix::xavier(2, head_hidden, &mut rng);
        w
    }

    pub fn head_hidden(&self) -> usize {
        self.head_b1.len()
    }

    pub fn validate(&self) -> Result<(), GatError> {
        let shape = |what, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(GatError::Shape { what, expected, got })
            }
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let din = if l == 0 { self.input_dim } else { self.hidden_dim };
            shape("layer input", din, layer.w.cols)?;
            shape("layer output", self.hidden_dim, layer.w.rows)?;
            shape("layer data", din * self.hidden_dim, layer.w.data.len())?;
            shape("attention vector", self.hidden_dim, layer.a_src.len())?;
            shape("attention vector", self.hidden_dim, layer.a_dst.len())?;
        }
        let last = if self.layers.is_empty() { 0 } else { self.hidden_dim };
        let hh = self.head_b1.len();
        shape("head input", self.input_dim + last, self.head_w1.cols)?;
        shape("head hidden", hh, self.head_w1.rows)?;
        shape("head data", hh * self.head_w1.cols, self.head_w1.data.len())?;
        shape("head output", 2, self.head_w2.rows)?;
        shape("head output input", hh, self.head_w2.cols)?;
        shape("head output data", 2 * hh, self.head_w2.data.len())?;
        shape("head bias", 2, self.head_b2.len())?;
        shape("window", self.window.max(2), self.window)?;
        let finite = self.param_slices().iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.scale.is_finite()
            && self.scale > 0.0
            && self.slope.is_finite();
        if !finite {
            return Err(GatError::Shape { what: "finite parameters", expected: 1, got: 0 });
        }
        Ok(())
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            v.push(&l.w.data);
            v.push(&l.a_src);
            v.push(&l.a_dst);
        }
        v.extend([&self.head_w1.data[..], &self.head_b1, &self.head_w2.data, &self.head_b2]);
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            v.push(&mut l.w.data);
            v.push(&mut l.a_src);
            v.push(&mut l.a_dst);
        }
        v.push(&mut self.head_w1.data);
        v.push(&mut self.head_b1);
        v.push(&mut self.head_w2.data);
        v.push(&mut self.head_b2);
        v
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in self.param_slices_mut() {
            let n = p.len();
            p.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for p in g.param_slices_mut() {
            p.fill(0.0);
        }
        g
    }

    fn forward(&self, features: &[Vec<f64>]) -> ForwardCache {
        let mut h = features.to_vec();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer_forward(layer, self.slope, &h);
            layers.push(cache);
            h = out;
        }
        let n = features.len();
        let mut head_in = Vec::with_capacity(n);
        let mut head_pre = Vec::with_capacity(n);
        let mut head_hidden = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut u = features[i].clone();
            if !self.layers.is_empty() {
                u.extend_from_slice(&h[i]);
            }
            let mut q = self.head_b1.clone();
            self.head_w1.matvec_acc(&u, &mut q);
            let r: Vec<f64> = q.iter().map(|&v| elu(v)).collect();
            let mut y = self.head_b2.clone();
            self.head_w2.matvec_acc(&r, &mut y);
            out.push([y[0], y[1]]);
            head_in.push(u);
            head_pre.push(q);
            head_hidden.push(r);
        }
        ForwardCache { layers, head_in, head_pre, head_hidden, out }
    }

    /// Accumulates parameter gradients for upstream gradient `dy` on the
    /// normalized outputs.
    fn backward(&self, cache: &ForwardCache, dy: &[[f64; 2]], grad: &mut GatWeights) {
        let n = dy.len();
        let d0 = self.input_dim;
        let mut dh_last = vec![vec![0.0; self.hidden_dim]; n];
        for i in 0..n {
            grad.head_w2.add_outer(&dy[i], &cache.head_hidden[i]);
            grad.head_b2[0] += dy[i][0];
            grad.head_b2[1] += dy[i][1];
            let mut dr = vec![0.0; self.head_b1.len()];
            self.head_w2.matvec_t_acc(&dy[i], &mut dr);
            let dq: Vec<f64> = dr.iter().zip(&cache.head_pre[i]).map(|(d, &q)| d * elu_grad(q)).collect();
            grad.head_w1.add_outer(&dq, &cache.head_in[i]);
            for (b, d) in grad.head_b1.iter_mut().zip(&dq) {
                *b += d;
            }
            if !self.layers.is_empty() {
                let mut du = vec![0.0; self.head_w1.cols];
                self.head_w1.matvec_t_acc(&dq, &mut du);
                dh_last[i].copy_from_slice(&du[d0..]);
            }
        }
        let mut d_out = dh_last;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let c = &cache.layers[l];
            let g = &mut grad.layers[l];
            let dout = layer.w.rows;
            let d_agg: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..dout).map(|k| d_out[i][k] * elu_grad(c.agg[i][k])).collect())
                .collect();
            let mut dz = vec![vec![0.0; dout]; n];
            let mut ds = vec![0.0; n];
            let mut dt = vec![0.0; n];
            for i in 0..n {
                let dalpha: Vec<f64> = (0..n).map(|j| crate::linalg::dot(&d_agg[i], &c.z[j])).collect();
                let inner: f64 = (0..n).map(|k| c.alpha[i][k] * dalpha[k]).sum();
                for j in 0..n {
                    for k in 0..dout {
                        dz[j][k] += c.alpha[i][j] * d_agg[i][k];
                    }
                    let de = c.alpha[i][j] * (dalpha[j] - inner);
                    let draw = de * if c.raw[i][j] > 0.0 { 1.0 } else { self.slope };
                    ds[i] += draw;
                    dt[j] += draw;
                }
            }
            for i in 0..n {
                for k in 0..dout {
                    g.a_src[k] += ds[i] * c.z[i][k];
                    g.a_dst[k] += dt[i] * c.z[i][k];
                    dz[i][k] += ds[i] * layer.a_src[k] + dt[i] * layer.a_dst[k];
                }
                g.w.add_outer(&dz[i], &c.input[i]);
            }
            if l > 0 {
                d_out = (0..n)
                    .map(|i| {
                        let mut dh = vec![0.0; layer.w.cols];
                        layer.w.matvec_t_acc(&dz[i], &mut dh);
                        dh
                    })
                    .collect();
            }
        }
    }

    /// Normalized per-node displacement outputs.
    pub fn forward_outputs(&self, g: &SocialGraph) -> Result<Vec<[f64; 2]>, GatError> {
        if g.feature_dim() != self.input_dim {
            return Err(GatError::Shape { what: "node feature", expected: self.input_dim, got: g.feature_dim() });
        }
        Ok(self.forward(&g.features).out)
    }

    /// Attention matrices of every layer.
    pub fn attention(&self, g: &SocialGraph) -> Result<Vec<Vec<Vec<f64>>>, GatError> {
        if g.feature_dim() != self.input_dim {
            return Err(GatError::Shape { what: "node feature", expected: self.input_dim, got: g.feature_dim() });
        }
        Ok(self.forward(&g.features).layers.into_iter().map(|c| c.alpha).collect())
    }
}

/// Next position of every node in one forward pass.
pub fn predict_next(w: &GatWeights, g: &SocialGraph, positions: &[Point2]) -> Result<Vec<(u64, Point2)>, GatError> {
    if positions.len() != g.node_count() {
        return Err(GatError::Alignment(format!("{} positions for {} nodes", positions.len(), g.node_count())));
    }
    let out = w.forward_outputs(g)?;
    Ok(g.ped_ids
        .iter()
        .zip(positions)
        .zip(out)
        .map(|((id, p), [dx, dy])| (*id, Point2::new(p.x + w.scale * dx, p.y + w.scale * dy)))
        .collect())
}

/// Iterated forecast: encode, build the graph, predict, append, repeat.
///
/// Returns one trajectory per input holding only the `horizon` future
/// samples.
pub fn rollout(
    w: &GatWeights,
    lstm: &LstmWeights,
    trajs: &[Trajectory],
    robot: Point2,
    grid: &OccupancyGrid,
    horizon: usize,
) -> Result<Vec<Trajectory>, GatError> {
    if horizon == 0 {
        return Err(GatError::ZeroHorizon);
    }
    if trajs.is_empty() {
        return Ok(Vec::new());
    }
    let mut hist: Vec<Trajectory> = trajs.iter().map(|t| t.tail(w.window)).collect();
    let mut future: Vec<Option<Trajectory>> = vec![None; trajs.len()];
    for _ in 0..horizon {
        let mut codes = Vec::with_capacity(hist.len());
        let mut positions = Vec::with_capacity(hist.len());
        for t in &hist {
            codes.push((t.ped_id(), lstm.encode(t)?));
            positions.push((t.ped_id(), t.last().p));
        }
        let g = build_graph(&codes, &positions, robot, grid)?;
        let pos: Vec<Point2> = positions.iter().map(|(_, p)| *p).collect();
        let next = predict_next(w, &g, &pos)?;
        for (k, (_, p)) in next.into_iter().enumerate() {
            let dt = hist[k].period().expect("history has at least two samples");
            let t_next = hist[k].last().t + dt;
            hist[k].push(crate::geom::Sample::new(t_next, p))?;
            hist[k] = hist[k].tail(w.window);
            match &mut future[k] {
                Some(f) => f.push(crate::geom::Sample::new(t_next, p))?,
                slot => *slot = Some(Trajectory::new(hist[k].ped_id(), vec![crate::geom::Sample::new(t_next, p)])?),
            }
        }
    }
    Ok(future.into_iter().map(|f| f.expect("horizon ≥ 1")).collect())
}

/// Training hyperparameters for the predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct GatConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub head_hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub window: usize,
    /// Half-width of the square around the scene centre where the robot is
    /// placed for each training graph.
    pub robot_spread: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            hidden_dim: DEFAULT_HIDDEN,
            layers: DEFAULT_LAYERS,
            head_hidden: DEFAULT_HIDDEN,
            learning_rate: 0.006,
            epochs: 300,
            batch_size: 32,
            seed: 0,
            clip_norm: 5.0,
            window: DEFAULT_WINDOW,
            robot_spread: 4.0,
        }
    }
}

/// One training graph with per-node normalized targets; nodes without a
/// next observation carry no loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingGraph {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<Option<[f64; 2]>>,
}

/// Mean squared error over supervised nodes and its gradient.
pub fn loss_and_grad(w: &GatWeights, batch: &[TrainingGraph]) -> (f64, GatWeights) {
    let mut grad = w.zeros_like();
    let count: usize = batch.iter().map(|g| g.targets.iter().flatten().count()).sum();
    if count == 0 {
        return (0.0, grad);
    }
    let norm = 1.0 / count as f64;
    let mut loss = 0.0;
    for g in batch {
        let cache = w.forward(&g.features);
        let dy: Vec<[f64; 2]> = cache
            .out
            .iter()
            .zip(&g.targets)
            .map(|(y, t)| match t {
                Some(t) => {
                    let e = [y[0] - t[0], y[1] - t[1]];
                    loss += (e[0] * e[0] + e[1] * e[1]) * norm;
                    [2.0 * e[0] * norm, 2.0 * e[1] * norm]
                }
                None => [0.0, 0.0],
            })
            .collect();
        w.backward(&cache, &dy, &mut grad);
    }
    (loss, grad)
}

pub fn loss(w: &GatWeights, batch: &[TrainingGraph]) -> f64 {
    loss_and_grad(w, batch).0
}

/// Frame index of a timestamp on the scene's sampling lattice.
fn frame_of(t: f64, t0: f64, dt: f64) -> i64 {
    ((t - t0) / dt).round() as i64
}

/// Builds training graphs from scenes: one graph per scene frame, with a
/// node for every person having at least two samples up to that frame.
pub fn training_graphs(
    scenes: &[Vec<Trajectory>],
    lstm: &LstmWeights,
    window: usize,
    scale: f64,
    robot_spread: f64,
    seed: u64,
) -> Result<Vec<TrainingGraph>, GatError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a7_0bb07);
    let mut out = Vec::new();
    for scene in scenes {
        let Some(dt) = scene.iter().find_map(|t| t.period()) else { continue };
        let t0 = scene.iter().map(|t| t.first().t).fold(f64::INFINITY, f64::min);
        // frame -> (trajectory, sample index)
        let mut frames: BTreeMap<i64, Vec<(usize, usize)>> = BTreeMap::new();
        for (ti, t) in scene.iter().enumerate() {
            for (si, s) in t.samples().iter().enumerate() {
                frames.entry(frame_of(s.t, t0, dt)).or_default().push((ti, si));
            }
        }
        let (lo, hi) = bounds(scene);
        let centre = lo.lerp(&hi, 0.5);
        let grid = training_grid(lo, hi);
        for members in frames.values() {
            let mut codes = Vec::new();
            let mut positions = Vec::new();
            let mut targets = Vec::new();
            for &(ti, si) in members {
                if si == 0 {
                    continue;
                }
                let t = &scene[ti];
                let start = (si + 1).saturating_sub(window);
                let hist = Trajectory::new(t.ped_id(), t.samples()[start..=si].to_vec())?;
                codes.push((t.ped_id(), lstm.encode(&hist)?));
                let p = t.samples()[si].p;
                positions.push((t.ped_id(), p));
                targets.push(t.samples().get(si + 1).map(|n| [(n.p.x - p.x) / scale, (n.p.y - p.y) / scale]));
            }
            if targets.iter().flatten().next().is_none() {
                continue;
            }
            let robot = Point2::new(
                centre.x + rng.random_range(-robot_spread..=robot_spread),
                centre.y + rng.random_range(-robot_spread..=robot_spread),
            );
            let g = build_graph(&codes, &positions, robot, &grid)?;
            out.push(TrainingGraph { features: g.features, targets });
        }
    }
    Ok(out)
}

pub(crate) fn bounds(scene: &[Trajectory]) -> (Point2, Point2) {
    let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in scene.iter().flat_map(|t| t.positions()) {
        lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    (lo, hi)
}

/// Obstacle-free grid covering a scene with a margin.
pub(crate) fn training_grid(lo: Point2, hi: Point2) -> OccupancyGrid {
    const RES: f64 = 0.1;
    const MARGIN: f64 = 1.0;
    let origin = Point2::new(lo.x - MARGIN, lo.y - MARGIN);
    let w = ((hi.x - lo.x + 2.0 * MARGIN) / RES).ceil() as usize + 1;
    let h = ((hi.y - lo.y + 2.0 * MARGIN) / RES).ceil() as usize + 1;
    OccupancyGrid::new(origin, RES, w, h).expect("positive size")
}

/// Trains the predictor on scenes with a frozen encoder.
pub fn train_predictor(
    scenes: &[Vec<Trajectory>],
    lstm: &LstmWeights,
    cfg: &GatConfig,
) -> Result<(GatWeights, Vec<f64>), GatError> {
    if scenes.iter().all(|s| s.is_empty()) {
        return Err(GatError::EmptyDataset);
    }
    let scale = lstm.sigma;
    let graphs = training_graphs(scenes, lstm, cfg.window, scale, cfg.robot_spread, cfg.seed)?;
    if graphs.is_empty() {
        return Err(GatError::EmptyDataset);
    }
    let mut w = GatWeights::init(feature_dim(lstm.hidden_dim), cfg.hidden_dim, cfg.layers, cfg.head_hidden, cfg.seed);
    w.scale = scale;
    w.window = cfg.window;
    let history = fit(&mut w, &graphs, cfg);
    Ok((w, history))
}

/// Adam with cosine learning-rate decay and global-norm clipping.
pub fn fit(w: &mut GatWeights, graphs: &[TrainingGraph], cfg: &GatConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_6a7);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let bs = cfg.batch_size.clamp(1, graphs.len().max(1));
    let mut adam = AdamState::new(w.flat_params().len());
    let mut step = 0u32;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = crate::autoencoder::scheduled_lr(cfg.learning_rate, epoch, cfg.epochs, true);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(bs) {
            let batch: Vec<TrainingGraph> = chunk.iter().map(|&i| graphs[i].clone()).collect();
            let (l, mut grad) = loss_and_grad(w, &batch);
            total += l;
            batches += 1;
            let norm = global_norm(grad.param_slices());
            if norm > cfg.clip_norm && norm.is_finite() {
                let s = cfg.clip_norm / norm;
                for p in grad.param_slices_mut() {
                    p.iter_mut().for_each(|v| *v *= s);
                }
            }
            step += 1;
            let mut flat = w.flat_params();
            adam.update(&mut flat, &grad.flat_params(), lr, step);
            w.set_flat_params(&flat);
        }
        history.push(total / batches.max(1) as f64);
    }
    history
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Sample;
    use proptest::prelude::*;

    fn empty_grid() -> OccupancyGrid {
        OccupancyGrid::new(Point2::new(-10.0, -10.0), 0.1, 200, 200).unwrap()
    }

    fn rand_features(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).collect()
    }

    #[test]
    fn graph_shapes() {
        let g = SocialGraph::new(vec![4], vec![vec![1.0, 2.0]]).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 0)]);
        let g = SocialGraph::new(vec![1, 2, 3], vec![vec![0.0]; 3]).unwrap();
        assert_eq!(g.edges().count(), 9);
        assert!(SocialGraph::new(vec![], vec![]).is_err());
        assert!(SocialGraph::new(vec![1, 2], vec![vec![0.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn build_graph_checks_alignment() {
        let grid = empty_grid();
        let code = LatentCode { values: vec![0.5; 3] };
        let codes = vec![(1, code.clone()), (2, code.clone())];
        let bad = vec![(1, Point2::ORIGIN), (3, Point2::ORIGIN)];
        assert!(matches!(build_graph(&codes, &bad, Point2::ORIGIN, &grid), Err(GatError::Alignment(_))));
        assert!(matches!(build_graph(&codes[..1], &bad, Point2::ORIGIN, &grid), Err(GatError::Alignment(_))));
        let ok = vec![(1, Point2::new(1.0, 2.0)), (2, Point2::ORIGIN)];
        let g = build_graph(&codes, &ok, Point2::new(0.5, 0.5), &grid).unwrap();
        assert_eq!(g.feature_dim(), feature_dim(3));
        assert_eq!(&g.features[0][..5], &[0.5, 0.5, 0.5, 0.5, 1.5]);
        assert!(g.features[0][5..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_sees_wall() {
        let mut grid = empty_grid();
        let p = Point2::new(0.05, 0.05);
        let wall = grid.cell_at(Point2::new(0.15, 0.05)).unwrap();
        grid.set_static(wall, true);
        let f = node_features(&LatentCode { values: vec![] }, p, Point2::ORIGIN, &grid);
        let patch = &f[2..];
        let ones: Vec<usize> = (0..25).filter(|&k| patch[k] == 1.0).collect();
        assert_eq!(ones, vec![2 * 5 + 3]);
    }

    #[test]
    fn single_node_attends_to_itself() {
        let layer = GatLayer::init(3, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let x = vec![vec![0.3, -0.2, 0.9]];
        let out = gat_layer(&layer, LEAKY_SLOPE, &x).unwrap();
        assert_eq!(out.attention, vec![vec![1.0]]);
        let want: Vec<f64> = layer.w.matvec(&x[0]).into_iter().map(elu).collect();
        assert_eq!(out.features[0], want);
    }

    #[test]
    fn identical_nodes_split_attention() {
        let layer = GatLayer::init(3, 4, &mut ChaCha8Rng::seed_from_u64(2));
        let x = vec![vec![0.3, -0.2, 0.9]; 2];
        let out = gat_layer(&layer, LEAKY_SLOPE, &x).unwrap();
        for row in &out.attention {
            assert_eq!(row, &vec![0.5, 0.5]);
        }
    }

    #[test]
    fn layer_shape_error() {
        let layer = GatLayer::zeros(3, 2);
        assert!(matches!(gat_layer(&layer, 0.2, &[vec![0.0; 2]]), Err(GatError::Shape { .. })));
    }

    /// Two nodes, 2×2 weights, everything written out by hand.
    #[test]
    fn two_node_hand_computation() {
        let layer = GatLayer {
            w: Matrix::from_rows(&[&[1.0, 0.5], &[-0.5, 2.0]]),
            a_src: vec![0.3, -0.2],
            a_dst: vec![0.1, 0.4],
        };
        let h = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        // z1 = W h1 = (1, -0.5); z2 = W h2 = (0.5, 2)
        let (z1, z2) = ([1.0, -0.5], [0.5, 2.0]);
        let s1 = 0.3 * 1.0 + -0.2 * -0.5; // 0.4
        let s2 = 0.3 * 0.5 + -0.2 * 2.0; // -0.25
        let t1 = 0.1 * 1.0 + 0.4 * -0.5; // -0.1
        let t2 = 0.1 * 0.5 + 0.4 * 2.0; // 0.85
        let lr = |x: f64| if x > 0.0 { x } else { 0.2 * x };
        let e = [[lr(s1 + t1), lr(s1 + t2)], [lr(s2 + t1), lr(s2 + t2)]];
        let mut alpha = [[0.0; 2]; 2];
        for i in 0..2 {
            let d = e[i][0].exp() + e[i][1].exp();
            alpha[i] = [e[i][0].exp() / d, e[i][1].exp() / d];
        }
        let out = gat_layer(&layer, 0.2, &h).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                let agg = alpha[i][0] * z1[k] + alpha[i][1] * z2[k];
                let want = if agg > 0.0 { agg } else { agg.exp() - 1.0 };
                assert!((out.features[i][k] - want).abs() < 1e-9);
                assert!((out.attention[i][k] - alpha[i][k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_head_is_stationary() {
        let mut w = GatWeights::init(feature_dim(4), 5, 2, 6, 3);
        w.head_w2.fill(0.0);
        w.head_b2 = vec![0.0, 0.0];
        let g = SocialGraph::new(vec![1, 2], rand_features(2, feature_dim(4), 1)).unwrap();
        let pos = [Point2::new(1.0, 2.0), Point2::new(-3.0, 0.5)];
        let next = predict_next(&w, &g, &pos).unwrap();
        assert_eq!(next, vec![(1, pos[0]), (2, pos[1])]);
    }

    fn traj(id: u64, pts: &[(f64, f64)]) -> Trajectory {
        let p: Vec<Point2> = pts.iter().map(|&(x, y)| Point2::new(x, y)).collect();
        Trajectory::from_positions(id, 0.0, 0.4, &p).unwrap()
    }

    #[test]
    fn rollout_zero_head_keeps_everyone_still() {
        let lstm = LstmWeights::init(4, 0.3, 1);
        let mut w = GatWeights::init(feature_dim(4), 5, 2, 6, 3);
        w.head_w2.fill(0.0);
        w.head_b2 = vec![0.0, 0.0];
        let trajs = vec![traj(1, &[(0.0, 0.0), (0.3, 0.1)]), traj(2, &[(2.0, 2.0), (1.8, 1.7), (1.6, 1.4)])];
        let out = rollout(&w, &lstm, &trajs, Point2::ORIGIN, &empty_grid(), 4).unwrap();
        for (o, t) in out.iter().zip(&trajs) {
            assert_eq!(o.len(), 4);
            assert_eq!(o.ped_id(), t.ped_id());
            assert!(o.positions().all(|p| p == t.last().p));
            for (k, s) in o.samples().iter().enumerate() {
                assert!((s.t - (t.last().t + 0.4 * (k + 1) as f64)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rollout_rejects_short_history_and_zero_horizon() {
        let lstm = LstmWeights::init(4, 0.3, 1);
        let w = GatWeights::init(feature_dim(4), 5, 2, 6, 3);
        let grid = empty_grid();
        let short = vec![traj(1, &[(0.0, 0.0)])];
        assert!(matches!(rollout(&w, &lstm, &short, Point2::ORIGIN, &grid, 1), Err(GatError::Lstm(_))));
        let ok = vec![traj(1, &[(0.0, 0.0), (0.1, 0.0)])];
        assert_eq!(rollout(&w, &lstm, &ok, Point2::ORIGIN, &grid, 0), Err(GatError::ZeroHorizon));
    }

    /// Loop-unrolled oracle: encode, build, predict by hand three times.
    #[test]
    fn rollout_matches_manual_iteration() {
        let lstm = LstmWeights::init(4, 0.3, 5);
        let w = GatWeights::init(feature_dim(4), 5, 2, 6, 9);
        let grid = empty_grid();
        let robot = Point2::new(0.5, -1.0);
        let t = traj(7, &[(0.0, 0.0), (0.3, 0.1), (0.6, 0.1)]);
        let out = rollout(&w, &lstm, std::slice::from_ref(&t), robot, &grid, 3).unwrap();
        let mut pts: Vec<Point2> = t.positions().collect();
        for k in 0..3 {
            let hist = Trajectory::from_positions(7, 0.0, 0.4, &pts[pts.len().saturating_sub(w.window)..]).unwrap();
            let code = lstm.encode(&hist).unwrap();
            let p = *pts.last().unwrap();
            let f = node_features(&code, p, robot, &grid);
            let y = w.forward_outputs(&SocialGraph::new(vec![7], vec![f]).unwrap()).unwrap()[0];
            let next = Point2::new(p.x + w.scale * y[0], p.y + w.scale * y[1]);
            assert_eq!(out[0].samples()[k].p, next);
            pts.push(next);
        }
    }

    #[test]
    fn horizon_one_is_predict_next() {
        let lstm = LstmWeights::init(4, 0.3, 5);
        let w = GatWeights::init(feature_dim(4), 5, 2, 6, 9);
        let grid = empty_grid();
        let trajs = vec![traj(1, &[(0.0, 0.0), (0.3, 0.1)]), traj(2, &[(1.0, 1.0), (0.9, 0.7)])];
        let out = rollout(&w, &lstm, &trajs, Point2::ORIGIN, &grid, 1).unwrap();
        let codes: Vec<_> = trajs.iter().map(|t| (t.ped_id(), lstm.encode(t).unwrap())).collect();
        let pos: Vec<_> = trajs.iter().map(|t| (t.ped_id(), t.last().p)).collect();
        let g = build_graph(&codes, &pos, Point2::ORIGIN, &grid).unwrap();
        let next = predict_next(&w, &g, &pos.iter().map(|p| p.1).collect::<Vec<_>>()).unwrap();
        for (o, (_, p)) in out.iter().zip(next) {
            assert_eq!(o.samples(), &[Sample::new(0.8, p)]);
        }
    }

    #[test]
    fn rollout_splits_exactly() {
        let lstm = LstmWeights::init(4, 0.3, 5);
        let w = GatWeights::init(feature_dim(4), 5, 2, 6, 11);
        let grid = empty_grid();
        let trajs = vec![
            traj(1, &[(0.0, 0.0), (0.3, 0.1), (0.5, 0.3)]),
            traj(2, &[(2.0, 1.0), (1.7, 1.0), (1.4, 0.9)]),
        ];
        let whole = rollout(&w, &lstm, &trajs, Point2::ORIGIN, &grid, 5).unwrap();
        let first = rollout(&w, &lstm, &trajs, Point2::ORIGIN, &grid, 2).unwrap();
        let joined: Vec<Trajectory> = trajs
            .iter()
            .zip(&first)
            .map(|(t, f)| {
                let mut j = t.clone();
                for s in f.samples() {
                    j.push(*s).unwrap();
                }
                j
            })
            .collect();
        let second = rollout(&w, &lstm, &joined, Point2::ORIGIN, &grid, 3).unwrap();
        for k in 0..2 {
            let mut cat = first[k].samples().to_vec();
            cat.extend_from_slice(second[k].samples());
            assert_eq!(whole[k].samples(), &cat[..]);
        }
    }

    fn numeric_grad_check(w: &GatWeights, batch: &[TrainingGraph]) -> f64 {
        let (_, grad) = loss_and_grad(w, batch);
        let analytic = grad.flat_params();
        let base = w.flat_params();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            let mut wp = w.clone();
            wp.set_flat_params(&p);
            p[i] -= 2.0 * eps;
            let mut wm = w.clone();
            wm.set_flat_params(&p);
            let num = (loss(&wp, batch) - loss(&wm, batch)) / (2.0 * eps);
            let denom = num.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max((num - analytic[i]).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w = GatWeights::init(4, 3, 2, 5, 21);
        let batch = vec![
            TrainingGraph { features: rand_features(2, 4, 1), targets: vec![Some([0.3, -0.1]), Some([-0.2, 0.4])] },
            TrainingGraph { features: rand_features(3, 4, 2), targets: vec![Some([0.1, 0.1]), None, Some([0.5, -0.5])] },
        ];
        let err = numeric_grad_check(&w, &batch);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let lstm = LstmWeights::init(4, 0.3, 1);
        assert_eq!(train_predictor(&[], &lstm, &GatConfig::default()).unwrap_err(), GatError::EmptyDataset);
    }

    #[test]
    fn overfitting_one_scene_reduces_loss() {
        let lstm = LstmWeights::init(8, 0.3, 1);
        let scene = vec![
            traj(1, &[(0.0, 0.0), (0.3, 0.0), (0.6, 0.05), (0.9, 0.15), (1.2, 0.3), (1.5, 0.5)]),
            traj(2, &[(2.0, 0.0), (1.7, 0.0), (1.4, -0.05), (1.1, -0.15), (0.8, -0.3), (0.5, -0.5)]),
        ];
        let cfg = GatConfig { hidden_dim: 8, head_hidden: 8, epochs: 60, batch_size: 4, ..Default::default() };
        let (w, hist) = train_predictor(&[scene.clone()], &lstm, &cfg).unwrap();
        assert!(hist.last().unwrap() < &(hist[0] * 0.5), "{hist:?}");
        let (w2, hist2) = train_predictor(&[scene], &lstm, &cfg).unwrap();
        assert_eq!(w, w2);
        assert_eq!(hist, hist2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn attention_rows_sum_to_one(n in 1usize..9, seed in 0u64..1000) {
            let w = GatWeights::init(6, 5, 2, 4, seed);
            let g = SocialGraph::new((0..n as u64).collect(), rand_features(n, 6, seed + 1)).unwrap();
            for layer in w.attention(&g).unwrap() {
                for row in layer {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    prop_assert!(row.iter().all(|&a| a > 0.0));
                }
            }
        }

        #[test]
        fn permutation_equivariance(n in 2usize..9, seed in 0u64..1000, perm_seed in 0u64..1000) {
            let w = GatWeights::init(6, 5, 2, 4, seed);
            let feats = rand_features(n, 6, seed + 1);
            let pos: Vec<Point2> = (0..n).map(|i| Point2::new(i as f64, -(i as f64))).collect();
            let ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
            let g = SocialGraph::new(ids.clone(), feats.clone()).unwrap();
            let base: BTreeMap<u64, Point2> = predict_next(&w, &g, &pos).unwrap().into_iter().collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let g2 = SocialGraph::new(perm.iter().map(|&i| ids[i]).collect(), perm.iter().map(|&i| feats[i].clone()).collect()).unwrap();
            let pos2: Vec<Point2> = perm.iter().map(|&i| pos[i]).collect();
            for (id, p) in predict_next(&w, &g2, &pos2).unwrap() {
                prop_assert!(p.distance(&base[&id]) < 1e-9);
            }
        }
    }
}
