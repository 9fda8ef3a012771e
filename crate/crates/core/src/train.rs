//! AdamW, a one-cycle cosine schedule and the epoch loop with per-epoch
//! weight rebalancing and early stopping.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Mode, Tape, Tensor};
use crate::data::{mix, Sample};
use crate::loss::{
    update_weights, CurveRow, CurveSplit, DynamicWeights, LossBatch, LossBreakdown, ScaleFactors, ScaleMode,
    HUBER_DELTA,
};
use crate::model::{BatchInput, ModelError, SurrogateParams};
use crate::network::{build_ybus, to_graph, AdmittanceMatrix, Network};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {breakdown:?}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        breakdown: LossBreakdown,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Cosine one-cycle learning-rate policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub div_start: f64,
    pub div_final: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            peak_lr: 8e-4,
            warmup_frac: 0.3,
            div_start: 25.0,
            div_final: 1e4,
        }
    }
}

fn cosine(from: f64, to: f64, t: f64) -> f64 {
    to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Learning rate at `step` of `total_steps`.
pub fn lr_at(s: &OneCycle, step: usize, total_steps: usize) -> f64 {
    let start = s.peak_lr / s.div_start;
    let end = s.peak_lr / s.div_final;
    if total_steps == 0 {
        return s.peak_lr;
    }
    let pct = step.min(total_steps) as f64 / total_steps as f64;
    if pct <= s.warmup_frac {
        if s.warmup_frac <= 0.0 {
            return s.peak_lr;
        }
        cosine(start, s.peak_lr, pct / s.warmup_frac)
    } else {
        cosine(s.peak_lr, end, (pct - s.warmup_frac) / (1.0 - s.warmup_frac))
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;
    pub const WEIGHT_DECAY: f64 = 0.01;

    pub fn new(params: &[Tensor], weight_decay: f64) -> Self {
        Self {
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One update. A missing gradient counts as zero.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].map(|g| g.values());
            if let Some(g) = g {
                assert_eq!(g.len(), p.numel(), "gradient shape mismatch");
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.values_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x = *x * decay - lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Tracks epochs since the last improvement of a monitored loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    since: usize,
}

impl EarlyStopper {
    pub const MIN_DELTA: f64 = 1e-6;

    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            min_delta: Self::MIN_DELTA,
            best: f64::INFINITY,
            since: 0,
        }
    }

    /// Records a value; true when it is a new best.
    pub fn observe(&mut self, value: f64) -> bool {
        if value < self.best - self.min_delta || (self.best.is_infinite() && value.is_finite()) {
            self.best = value;
            self.since = 0;
            true
        } else {
            self.since += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub schedule: OneCycle,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            patience: 40,
            batch_size: 128,
            schedule: OneCycle::default(),
            weight_decay: AdamW::WEIGHT_DECAY,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return Err(TrainError::Config(format!(
                "need 0 < patience ({}) < max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        let s = &self.schedule;
        if !(s.peak_lr > 0.0 && s.div_start > 0.0 && s.div_final > 0.0 && (0.0..1.0).contains(&s.warmup_frac)) {
            return Err(TrainError::Config(format!("bad schedule {s:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub delta: f64,
    pub scale: ScaleMode,
    pub weights: DynamicWeights,
}

impl LossConfig {
    pub fn for_case(name: Option<&str>) -> Self {
        Self {
            delta: HUBER_DELTA,
            scale: ScaleMode::for_case(name),
            weights: DynamicWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    /// Weights in effect during this epoch.
    pub weights: DynamicWeights,
    /// Weights after the end-of-epoch update.
    pub next_weights: DynamicWeights,
    pub lr: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: SurrogateParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub scale: ScaleFactors,
}

impl TrainOutcome {
    pub fn curve_rows(&self) -> Vec<CurveRow> {
        self.history
            .iter()
            .flat_map(|r| {
                [
                    CurveRow::new(r.epoch, CurveSplit::Train, &r.train, &r.weights),
                    CurveRow::new(r.epoch, CurveSplit::Val, &r.val, &r.weights),
                ]
            })
            .collect()
    }
}

struct Context<'a> {
    net: &'a Network,
    y: AdmittanceMatrix,
    edges: Arc<[(usize, usize)]>,
    delta: f64,
}

impl Context<'_> {
    fn build(&self, model: &SurrogateParams, samples: &[&Sample]) -> Result<(BatchInput, LossBatch), TrainError> {
        let input = BatchInput::from_samples(samples, self.edges.clone(), &model.scalers)?;
        let lb = LossBatch::new(samples, self.net, &self.y, &model.scalers.target, self.delta);
        Ok((input, lb))
    }

    /// Eval-mode losses over `samples` in fixed batches.
    fn evaluate(
        &self,
        model: &SurrogateParams,
        samples: &[&Sample],
        batch: usize,
        w: &DynamicWeights,
        s: &ScaleFactors,
    ) -> Result<LossBreakdown, TrainError> {
        let mut parts = Vec::new();
        for chunk in samples.chunks(batch) {
            let (input, lb) = self.build(model, chunk)?;
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &input, Mode::Eval, 0)?;
            let l = lb.losses(&mut tape, fwd.output)?.breakdown(&tape).with_total(w, s);
            parts.push((l, chunk.len()));
        }
        Ok(LossBreakdown::weighted_mean(&parts))
    }
}

/// Trains `model` and returns the parameters with the lowest validation
/// total loss.
pub fn train_loop(
    mut model: SurrogateParams,
    net: &Network,
    train: &[&Sample],
    val: &[&Sample],
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    loss.weights.validate().map_err(TrainError::Config)?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("training and validation sets must be non-empty".into()));
    }
    model.check_network(net)?;
    let ctx = Context {
        net,
        y: build_ybus(net),
        edges: to_graph(net).edges.into(),
        delta: loss.delta,
    };
    let mut sorted: Vec<&Sample> = train.to_vec();
    sorted.sort_by_key(|s| s.index);
    let mut val_sorted: Vec<&Sample> = val.to_vec();
    val_sorted.sort_by_key(|s| s.index);

    let batches_per_epoch = sorted.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.max_epochs;
    let mut opt = AdamW::new(&model.tensors, cfg.weight_decay);
    let mut weights = loss.weights;
    let mut scale = match loss.scale {
        ScaleMode::Fixed(s) => {
            s.validate().map_err(TrainError::Config)?;
            Some(s)
        }
        ScaleMode::Auto => None,
    };
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order = sorted.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0x5407)));
        let mut parts = Vec::with_capacity(batches_per_epoch);
        let mut lr = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (input, lb) = ctx.build(&model, chunk)?;
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &input, Mode::Train, mix(cfg.seed, epoch as u64, bi as u64))?;
            let lv = lb.losses(&mut tape, fwd.output)?;
            let raw = lv.breakdown(&tape);
            let s = *scale.get_or_insert_with(|| ScaleFactors::from_initial(&raw));
            let total = lv.total(&mut tape, &weights, &s);
            let l = raw.with_total(&weights, &s);
            if !l.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    breakdown: l,
                });
            }
            tape.backward(total)?;
            let grads: Vec<Option<&Tensor>> = fwd.params.iter().map(|&p| tape.grad(p)).collect();
            lr = lr_at(&cfg.schedule, step, total_steps);
            opt.update(&mut model.tensors, &grads, lr);
            model.update_running(&fwd.batch_stats);
            step += 1;
            parts.push((l, chunk.len()));
        }
        let s = scale.expect("set by the first batch");
        let train_l = LossBreakdown::weighted_mean(&parts);
        let val_l = ctx.evaluate(&model, &val_sorted, cfg.batch_size, &weights, &s)?;
        if !val_l.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: usize::MAX,
                breakdown: val_l,
            });
        }
        let next = update_weights(&weights, &val_l);
        let improved = stopper.observe(val_l.l_total);
        model.epoch = epoch;
        if improved {
            best = model.clone();
            best_epoch = epoch;
        }
        log::info!(
            "epoch {epoch}: train {:.4e} val {:.4e} (data {:.4e}){}",
            train_l.l_total,
            val_l.l_total,
            val_l.l_data,
            if improved { " *" } else { "" }
        );
        history.push(EpochRecord {
            epoch,
            train: train_l,
            val: val_l,
            weights,
            next_weights: next,
            lr,
            improved,
        });
        weights = next;
        if stopper.should_stop() {
            log::info!("early stop after epoch {epoch}; best epoch {best_epoch}");
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        scale: scale.expect("at least one batch ran"),
    })
}
