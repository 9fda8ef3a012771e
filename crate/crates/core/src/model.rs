//! Surrogate predictors: an edge-conditioned graph network and a dense MLP
//! baseline, plus the standardizing scalers around them.
//!
//! A batch of `B` samples on one topology is laid out node-major: row
//! `node * B + b` of a `[N*B, F]` matrix holds node `node` of sample `b`, so
//! every node's block of rows is contiguous.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BatchStats, Mode, Tape, Tensor, Var};
use crate::data::Sample;
use crate::network::{BusKind, Network, NetworkFingerprint, EDGE_FEATURES, NODE_FEATURES};
use crate::solver::VoltageState;

pub const TARGETS: usize = 3;
pub const GNN_HIDDEN: usize = 128;
pub const EDGE_HIDDEN: usize = 12;
pub const MLP_HIDDEN: usize = 256;
pub const DROPOUT: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;
/// Below this `(cos, sin)` norm the angle is undefined.
pub const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("degenerate angle encoding at bus {bus}")]
    DegenerateAngle { bus: usize },
    #[error("checkpoint was trained for a different topology: {0}")]
    Topology(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("cannot fit scalers on empty input")]
    EmptyInput,
}

type Result<T> = std::result::Result<T, ModelError>;

/// Per-feature standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics over rows; zero-variance columns get `std = 1`.
    pub fn fit<'a, I: IntoIterator<Item = &'a [f64]>>(rows: I, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut all: Vec<&[f64]> = Vec::new();
        for r in rows {
            if r.len() != dim {
                return Err(ModelError::Dimension(format!("row of width {} for scaler of {dim}", r.len())));
            }
            for (s, v) in sum.iter_mut().zip(r) {
                *s += v;
            }
            all.push(r);
            n += 1;
        }
        if n == 0 {
            return Err(ModelError::EmptyInput);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut ss = vec![0.0; dim];
        for r in &all {
            for j in 0..dim {
                let d = r[j] - mean[j];
                ss[j] += d * d;
            }
        }
        let std = ss
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalers {
    pub node: Scaler,
    pub edge: Scaler,
    pub target: Scaler,
}

/// Fits node, edge and target scalers on training samples, pooling every
/// bus (or edge) of every sample per feature.
pub fn fit_scalers(samples: &[&Sample]) -> Result<Scalers> {
    if samples.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let node = Scaler::fit(samples.iter().flat_map(|s| s.nodes.iter().map(|r| &r[..])), NODE_FEATURES)?;
    let edge = Scaler::fit(samples.iter().flat_map(|s| s.edge_attr.iter().map(|r| &r[..])), EDGE_FEATURES)
        .or_else(|e| match e {
            ModelError::EmptyInput => Ok(Scaler::identity(EDGE_FEATURES)),
            other => Err(other),
        })?;
    let targets: Vec<[f64; 3]> = samples.iter().flat_map(|s| s.target()).collect();
    let target = Scaler::fit(targets.iter().map(|r| &r[..]), TARGETS)?;
    Ok(Scalers { node, edge, target })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gnn,
    Mlp,
}

/// Scaled inputs for `batch` samples sharing one topology.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub n_nodes: usize,
    pub batch: usize,
    /// `[N*B, 5]`, node-major.
    pub x: Tensor,
    pub edges: Arc<[(usize, usize)]>,
    /// `[E, 3]`.
    pub edge_attr: Tensor,
}

impl BatchInput {
    /// Scales and stacks samples. All samples must share the edge list.
    pub fn from_samples(samples: &[&Sample], edges: Arc<[(usize, usize)]>, scalers: &Scalers) -> Result<Self> {
        let first = samples.first().ok_or(ModelError::EmptyInput)?;
        let n = first.n_buses();
        let b = samples.len();
        let mut x = vec![0.0; n * b * NODE_FEATURES];
        for (j, s) in samples.iter().enumerate() {
            if s.nodes.len() != n {
                return Err(ModelError::Dimension("samples with different bus counts in one batch".into()));
            }
            for (i, row) in s.nodes.iter().enumerate() {
                let z = scalers.node.transform(row);
                x[(i * b + j) * NODE_FEATURES..(i * b + j + 1) * NODE_FEATURES].copy_from_slice(&z);
            }
        }
        Self::assemble(n, b, x, edges, &first.edge_attr, scalers)
    }

    /// Single network, unscaled features taken from its buses and branches.
    pub fn from_features(
        nodes: &[[f64; NODE_FEATURES]],
        edges: Arc<[(usize, usize)]>,
        edge_attr: &[[f64; EDGE_FEATURES]],
        scalers: &Scalers,
    ) -> Result<Self> {
        let x = nodes.iter().flat_map(|r| scalers.node.transform(r)).collect();
        Self::assemble(nodes.len(), 1, x, edges, edge_attr, scalers)
    }

    fn assemble(
        n: usize,
        b: usize,
        x: Vec<f64>,
        edges: Arc<[(usize, usize)]>,
        edge_attr: &[[f64; EDGE_FEATURES]],
        scalers: &Scalers,
    ) -> Result<Self> {
        if edge_attr.len() != edges.len() {
            return Err(ModelError::Dimension(format!(
                "{} edges but {} edge feature rows",
                edges.len(),
                edge_attr.len()
            )));
        }
        if let Some(&(s, t)) = edges.iter().find(|&&(s, t)| s >= n || t >= n) {
            return Err(ModelError::Dimension(format!("edge ({s}, {t}) outside {n} nodes")));
        }
        let ea = edge_attr.iter().flat_map(|r| scalers.edge.transform(r)).collect();
        Ok(Self {
            n_nodes: n,
            batch: b,
            x: Tensor::matrix(n * b, NODE_FEATURES, x)?,
            edges,
            edge_attr: Tensor::matrix(edge_attr.len(), EDGE_FEATURES, ea)?,
        })
    }

    /// Row indices `src * B + b` for every edge, edge-major.
    fn source_rows(&self) -> Arc<[usize]> {
        let b = self.batch;
        self.edges.iter().flat_map(|&(s, _)| (0..b).map(move |j| s * b + j)).collect()
    }

    fn target_rows(&self) -> Arc<[usize]> {
        let b = self.batch;
        self.edges.iter().flat_map(|&(_, t)| (0..b).map(move |j| t * b + j)).collect()
    }

    /// Permutation from sample-major rows `b * N + i` to node-major rows.
    fn sample_major_rows(&self) -> Arc<[usize]> {
        let (n, b) = (self.n_nodes, self.batch);
        (0..b).flat_map(|j| (0..n).map(move |i| i * b + j)).collect()
    }

    fn node_major_rows(&self) -> Arc<[usize]> {
        let (n, b) = (self.n_nodes, self.batch);
        (0..n).flat_map(|i| (0..b).map(move |j| j * n + i)).collect()
    }
}

/// Running batch-norm estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Learnable tensors and buffers of either architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateParams {
    pub arch: Arch,
    /// GNN: layer widths `[5, 128, 128, 3]`. MLP: `[5N, 256, 256, 256, 3N]`.
    pub dims: Vec<usize>,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub running: Vec<RunningStats>,
    pub scalers: Scalers,
    pub network: NetworkFingerprint,
    pub seed: u64,
    pub epoch: usize,
}

/// Output of a forward pass.
pub struct Forward {
    /// Scaled `[N*B, 3]` predictions, node-major.
    pub output: Var,
    /// Tape handles of `SurrogateParams::tensors`, same order.
    pub params: Vec<Var>,
    pub batch_stats: Vec<BatchStats>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape")
}

impl SurrogateParams {
    /// Graph network with uniform `±1/sqrt(fan_in)` initialization.
    pub fn new_gnn(net: &Network, scalers: Scalers, seed: u64) -> Self {
        Self::gnn_for(net.fingerprint(), scalers, seed)
    }

    fn gnn_for(network: NetworkFingerprint, scalers: Scalers, seed: u64) -> Self {
        let dims = vec![NODE_FEATURES, GNN_HIDDEN, GNN_HIDDEN, TARGETS];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for l in 0..3 {
            let (i, o) = (dims[l], dims[l + 1]);
            let eb = 1.0 / (EDGE_FEATURES as f64).sqrt();
            let hb = 1.0 / (EDGE_HIDDEN as f64).sqrt();
            let rb = 1.0 / (i as f64).sqrt();
            for (name, t) in [
                ("edge_w1", uniform(&mut rng, &[EDGE_FEATURES, EDGE_HIDDEN], eb)),
                ("edge_b1", uniform(&mut rng, &[EDGE_HIDDEN], eb)),
                ("edge_w2", uniform(&mut rng, &[EDGE_HIDDEN, i * o], hb)),
                ("edge_b2", uniform(&mut rng, &[i * o], hb)),
                ("root", uniform(&mut rng, &[i, o], rb)),
                ("bias", uniform(&mut rng, &[o], rb)),
            ] {
                names.push(format!("conv{l}.{name}"));
                tensors.push(t);
            }
        }
        for l in 0..2 {
            names.push(format!("bn{l}.gamma"));
            tensors.push(Tensor::full(&[GNN_HIDDEN], 1.0));
            names.push(format!("bn{l}.beta"));
            tensors.push(Tensor::zeros(&[GNN_HIDDEN]));
        }
        Self {
            arch: Arch::Gnn,
            dims,
            names,
            tensors,
            running: vec![RunningStats::new(GNN_HIDDEN); 2],
            scalers,
            network,
            seed,
            epoch: 0,
        }
    }

    pub fn new_mlp(net: &Network, scalers: Scalers, seed: u64) -> Self {
        Self::mlp_for(net.fingerprint(), scalers, seed)
    }

    fn mlp_for(network: NetworkFingerprint, scalers: Scalers, seed: u64) -> Self {
        let n = network.n_buses;
        let dims = vec![n * NODE_FEATURES, MLP_HIDDEN, MLP_HIDDEN, MLP_HIDDEN, n * TARGETS];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for l in 0..dims.len() - 1 {
            let bound = 1.0 / (dims[l] as f64).sqrt();
            names.push(format!("fc{l}.weight"));
            tensors.push(uniform(&mut rng, &[dims[l], dims[l + 1]], bound));
            names.push(format!("fc{l}.bias"));
            tensors.push(uniform(&mut rng, &[dims[l + 1]], bound));
        }
        Self {
            arch: Arch::Mlp,
            dims,
            names,
            tensors,
            running: Vec::new(),
            scalers,
            network,
            seed,
            epoch: 0,
        }
    }

    pub fn n_learnable(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Fails unless `net` has the topology this model was built for.
    pub fn check_network(&self, net: &Network) -> Result<()> {
        let fp = net.fingerprint();
        if fp != self.network {
            return Err(ModelError::Topology(format!(
                "model expects {} buses / {} branches, case has {} / {}{}",
                self.network.n_buses,
                self.network.n_branches,
                fp.n_buses,
                fp.n_branches,
                if fp.n_buses == self.network.n_buses { " or different bus kinds" } else { "" }
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, input: &BatchInput, mode: Mode, seed: u64) -> Result<Forward> {
        let params: Vec<Var> = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        let (output, batch_stats) = match self.arch {
            Arch::Gnn => self.gnn_forward(tape, &params, input, mode, seed)?,
            Arch::Mlp => (self.mlp_forward(tape, &params, input)?, Vec::new()),
        };
        Ok(Forward {
            output,
            params,
            batch_stats,
        })
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    fn gnn_forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        input: &BatchInput,
        mode: Mode,
        seed: u64,
    ) -> Result<(Var, Vec<BatchStats>)> {
        if input.x.shape() != [input.n_nodes * input.batch, self.dims[0]] {
            return Err(ModelError::Dimension(format!(
                "node input {:?}, expected [{}, {}]",
                input.x.shape(),
                input.n_nodes * input.batch,
                self.dims[0]
            )));
        }
        let nb = input.n_nodes * input.batch;
        let e = input.edges.len();
        let src = input.source_rows();
        let dst = input.target_rows();
        let ea = tape.constant(input.edge_attr.clone());
        let mut h = tape.constant(input.x.clone());
        let mut stats = Vec::new();
        for l in 0..3 {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let w = &p[l * 6..l * 6 + 6];
            let hidden = tape.matmul(ea, w[0])?;
            let hidden = tape.add_row(hidden, w[1])?;
            let hidden = tape.relu(hidden);
            let we = tape.matmul(hidden, w[2])?;
            let we = tape.add_row(we, w[3])?;
            let we = tape.reshape(we, &[e, din, dout])?;
            let gathered = tape.index_select(h, src.clone())?;
            let gathered = tape.reshape(gathered, &[e, input.batch, din])?;
            let msg = tape.bmm(gathered, we)?;
            let msg = tape.reshape(msg, &[e * input.batch, dout])?;
            let agg = tape.scatter_add(msg, dst.clone(), nb)?;
            let root = tape.matmul(h, w[4])?;
            let sum = tape.add(agg, root)?;
            h = tape.add_row(sum, w[5])?;
            if l < 2 {
                let (g, b) = (p[18 + 2 * l], p[19 + 2 * l]);
                let run = &self.running[l];
                let (y, st) = tape.batch_norm(h, g, b, mode, (&run.mean, &run.var))?;
                stats.extend(st);
                let y = tape.relu(y);
                h = tape.dropout(y, DROPOUT, mode, crate::data::mix(seed, l as u64, 0xD0))?;
            }
        }
        Ok((h, stats))
    }

    fn mlp_forward(&self, tape: &mut Tape, p: &[Var], input: &BatchInput) -> Result<Var> {
        let (n, b) = (input.n_nodes, input.batch);
        if n * NODE_FEATURES != self.dims[0] {
            return Err(ModelError::Dimension(format!(
                "MLP built for {} inputs, batch has {n} buses",
                self.dims[0]
            )));
        }
        let x = tape.constant(input.x.clone());
        let x = tape.index_select(x, input.sample_major_rows())?;
        let mut h = tape.reshape(x, &[b, n * NODE_FEATURES])?;
        let layers = self.dims.len() - 1;
        for l in 0..layers {
            h = tape.matmul(h, p[2 * l])?;
            h = tape.add_row(h, p[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h);
            }
        }
        let h = tape.reshape(h, &[b * n, TARGETS])?;
        Ok(tape.index_select(h, input.node_major_rows())?)
    }

    /// Eval-mode predictions, one per sample in the batch.
    pub fn predict(&self, input: &BatchInput) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, input, Mode::Eval, 0)?;
        let out = tape.value(fwd.output).values();
        let (n, b) = (input.n_nodes, input.batch);
        Ok((0..b)
            .map(|j| Prediction {
                scaled: (0..n)
                    .map(|i| {
                        let r = (i * b + j) * TARGETS;
                        [out[r], out[r + 1], out[r + 2]]
                    })
                    .collect(),
            })
            .collect())
    }
}

/// Scaled `(|V|, cos δ, sin δ)` per bus for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scaled: Vec<[f64; 3]>,
}

/// Un-scales a prediction, projects `(cos, sin)` onto the unit circle and
/// pins the slack bus to its setpoint at angle 0.
pub fn prediction_to_voltage(pred: &Prediction, target: &Scaler, net: &Network) -> Result<VoltageState> {
    let n = net.n_buses();
    if pred.scaled.len() != n {
        return Err(ModelError::Dimension(format!(
            "prediction for {} buses, network has {n}",
            pred.scaled.len()
        )));
    }
    let mut vm = Vec::with_capacity(n);
    let mut va = Vec::with_capacity(n);
    for (i, (row, bus)) in pred.scaled.iter().zip(net.buses()).enumerate() {
        if bus.kind == BusKind::Slack {
            vm.push(bus.v_setpoint);
            va.push(0.0);
            continue;
        }
        let u = target.inverse(row);
        if u[1].hypot(u[2]) < DEGENERATE_NORM {
            return Err(ModelError::DegenerateAngle { bus: i });
        }
        vm.push(u[0]);
        va.push(u[2].atan2(u[1]));
    }
    Ok(VoltageState::new(vm, va))
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    arch: Arch,
    dims: Vec<usize>,
    tensors: BTreeMap<String, Tensor>,
    scalers: Scalers,
    seed: u64,
    epoch: usize,
    network: NetworkFingerprint,
}

impl SurrogateParams {
    pub fn to_checkpoint_json(&self) -> String {
        let mut tensors: BTreeMap<String, Tensor> =
            self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect();
        for (l, r) in self.running.iter().enumerate() {
            tensors.insert(format!("bn{l}.running_mean"), Tensor::vector(r.mean.clone()));
            tensors.insert(format!("bn{l}.running_var"), Tensor::vector(r.var.clone()));
        }
        let ck = Checkpoint {
            arch: self.arch,
            dims: self.dims.clone(),
            tensors,
            scalers: self.scalers.clone(),
            seed: self.seed,
            epoch: self.epoch,
            network: self.network.clone(),
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let mut ck: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let n = ck.network.n_buses;
        let skeleton = match ck.arch {
            Arch::Gnn => Self::gnn_for(ck.network.clone(), ck.scalers.clone(), 0),
            Arch::Mlp => Self::mlp_for(ck.network.clone(), ck.scalers.clone(), 0),
        };
        if skeleton.dims != ck.dims {
            return Err(ModelError::Checkpoint(format!(
                "dims {:?} do not match a {n}-bus {:?} model",
                ck.dims, ck.arch
            )));
        }
        let mut tensors = Vec::with_capacity(skeleton.names.len());
        for (name, like) in skeleton.names.iter().zip(&skeleton.tensors) {
            let t = ck
                .tensors
                .remove(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != like.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            tensors.push(t);
        }
        let mut running = Vec::new();
        for l in 0..skeleton.running.len() {
            let mut take = |what: &str| {
                ck.tensors
                    .remove(&format!("bn{l}.{what}"))
                    .map(|t| t.into_values())
                    .ok_or_else(|| ModelError::Checkpoint(format!("missing bn{l}.{what}")))
            };
            running.push(RunningStats {
                mean: take("running_mean")?,
                var: take("running_var")?,
            });
        }
        if let Some(extra) = ck.tensors.keys().next() {
            return Err(ModelError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            arch: ck.arch,
            dims: ck.dims,
            names: skeleton.names,
            tensors,
            running,
            scalers: ck.scalers,
            network: ck.network,
            seed: ck.seed,
            epoch: ck.epoch,
        })
    }
}
