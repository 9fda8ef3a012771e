//! Composite training loss: supervised error on the scaled targets plus
//! Huber-penalized power-balance, voltage-setpoint and slack-injection
//! residuals, rebalanced once per epoch by dynamic weights.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{huber_value, AutodiffError, Tape, Tensor, Var};
use crate::data::Sample;
use crate::model::{Scaler, TARGETS};
use crate::network::{AdmittanceMatrix, BusKind, Network};
use crate::solver::{power_injections, VoltageState};

pub const HUBER_DELTA: f64 = 1.0;
pub const WEIGHT_BETA: f64 = 0.9;
pub const WEIGHT_EPSILON: f64 = 1e-8;
/// Lower bound for automatically measured scale factors.
pub const SCALE_FLOOR: f64 = 1e-8;
/// Keeps the angle-encoding norm differentiable at the origin.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactors {
    pub s_data: f64,
    pub s_p: f64,
    pub s_q: f64,
    pub s_v: f64,
    pub s_s: f64,
}

impl ScaleFactors {
    pub const UNIT: Self = Self {
        s_data: 1.0,
        s_p: 1.0,
        s_q: 1.0,
        s_v: 1.0,
        s_s: 1.0,
    };

    /// Fixed factors for the bundled cases.
    pub fn for_case(name: &str) -> Option<Self> {
        let (s_data, s_p, s_q, s_v, s_s) = match name {
            "ieee33" => (7.06, 1.57, 0.06, 1e-8, 0.12),
            "ieee69" => (10.64, 3.52e6, 43.63, 1e-8, 7.35e7),
            "ieee118" => (7.03, 2.12e5, 9.81e4, 0.42, 16.1),
            _ => return None,
        };
        Some(Self {
            s_data,
            s_p,
            s_q,
            s_v,
            s_s,
        })
    }

    /// Each factor is the magnitude of its loss term on the first batch, so
    /// that every normalized term starts near one.
    pub fn from_initial(l: &LossBreakdown) -> Self {
        let f = |x: f64| if x.is_finite() { x.max(SCALE_FLOOR) } else { 1.0 };
        Self {
            s_data: f(l.l_data),
            s_p: f(l.l_p),
            s_q: f(l.l_q),
            s_v: f(l.l_v),
            s_s: f(l.l_s),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [self.s_data, self.s_p, self.s_q, self.s_v, self.s_s];
        if all.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(format!("scale factors must be positive and finite: {all:?}"))
        }
    }
}

/// Where scale factors come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    Fixed(ScaleFactors),
    /// Measured on the first training batch.
    Auto,
}

impl ScaleMode {
    /// Fixed factors when the case is known, otherwise measured.
    pub fn for_case(name: Option<&str>) -> Self {
        match name.and_then(ScaleFactors::for_case) {
            Some(s) => ScaleMode::Fixed(s),
            None => ScaleMode::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicWeights {
    pub w_data: f64,
    pub w_pq: f64,
    pub w_v: f64,
    pub w_s: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for DynamicWeights {
    fn default() -> Self {
        Self {
            w_data: 1.0,
            w_pq: 1.0,
            w_v: 1.0,
            w_s: 1.0,
            beta: WEIGHT_BETA,
            epsilon: WEIGHT_EPSILON,
        }
    }
}

impl DynamicWeights {
    pub fn validate(&self) -> Result<(), String> {
        let ws = [self.w_data, self.w_pq, self.w_v, self.w_s];
        if !ws.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(format!("weights must be non-negative: {ws:?}"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.epsilon > 0.0) {
            return Err(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Moves each physics weight toward the ratio of validation data loss to
/// its validation physics loss. `w_data` stays fixed.
pub fn update_weights(w: &DynamicWeights, val: &LossBreakdown) -> DynamicWeights {
    let ema = |old: f64, denom: f64| w.beta * old + (1.0 - w.beta) * (val.l_data / (denom + w.epsilon));
    DynamicWeights {
        w_pq: ema(w.w_pq, val.l_p + val.l_q),
        w_v: ema(w.w_v, val.l_v),
        w_s: ema(w.w_s, val.l_s),
        ..*w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_data: f64,
    pub l_p: f64,
    pub l_q: f64,
    pub l_v: f64,
    pub l_s: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Fills `l_total` from the parts.
    pub fn with_total(mut self, w: &DynamicWeights, s: &ScaleFactors) -> Self {
        self.l_total = total_loss(&self, w, s);
        self
    }

    /// Mean of breakdowns weighted by `counts`.
    pub fn weighted_mean(parts: &[(LossBreakdown, usize)]) -> Self {
        let n: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Self::default();
        if n == 0 {
            return out;
        }
        for (b, c) in parts {
            let k = *c as f64 / n as f64;
            out.l_data += k * b.l_data;
            out.l_p += k * b.l_p;
            out.l_q += k * b.l_q;
            out.l_v += k * b.l_v;
            out.l_s += k * b.l_s;
            out.l_total += k * b.l_total;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        [self.l_data, self.l_p, self.l_q, self.l_v, self.l_s, self.l_total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Weighted sum of the normalized parts; ignores `parts.l_total`.
pub fn total_loss(parts: &LossBreakdown, w: &DynamicWeights, s: &ScaleFactors) -> f64 {
    w.w_data * parts.l_data / s.s_data
        + w.w_pq * (parts.l_p / s.s_p + parts.l_q / s.s_q)
        + w.w_v * parts.l_v / s.s_v
        + w.w_s * parts.l_s / s.s_s
}

/// Squared error summed over the three scaled components, averaged over
/// all non-slack (sample, bus) pairs.
pub fn data_loss(pred: &[Vec<[f64; 3]>], truth: &[Vec<[f64; 3]>], kinds: &[BusKind]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction and truth sample counts differ");
    let mut sum = 0.0;
    let mut rows = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        assert!(p.len() == kinds.len() && t.len() == kinds.len(), "bus count mismatch");
        for ((a, b), k) in p.iter().zip(t).zip(kinds) {
            if *k == BusKind::Slack {
                continue;
            }
            sum += (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
            rows += 1;
        }
    }
    if rows == 0 {
        0.0
    } else {
        sum / rows as f64
    }
}

/// Physics residuals of un-scaled voltages on `net`: `(l_p, l_q, l_v, l_s)`.
pub fn physics_residual_losses(v: &VoltageState, net: &Network, slack_p_truth: f64, delta: f64) -> (f64, f64, f64, f64) {
    let y = crate::network::build_ybus(net);
    physics_residual_losses_with(v, net, &y, slack_p_truth, delta)
}

pub fn physics_residual_losses_with(
    v: &VoltageState,
    net: &Network,
    y: &AdmittanceMatrix,
    slack_p_truth: f64,
    delta: f64,
) -> (f64, f64, f64, f64) {
    let (p, q) = power_injections(v, y);
    let mut acc = [(0.0, 0usize); 4];
    let mut push = |k: usize, r: f64| {
        acc[k].0 += huber_value(r, delta);
        acc[k].1 += 1;
    };
    for (i, bus) in net.buses().iter().enumerate() {
        let spec = bus.s_spec();
        match bus.kind {
            BusKind::Pq => {
                push(0, spec.re - p[i]);
                push(1, spec.im - q[i]);
            }
            BusKind::Pv => {
                push(0, spec.re - p[i]);
                push(2, v.vm[i] - bus.v_setpoint);
            }
            BusKind::Slack => push(3, slack_p_truth - p[i]),
        }
    }
    let m = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    (m(acc[0]), m(acc[1]), m(acc[2]), m(acc[3]))
}

/// Loss terms as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_data: Var,
    pub l_p: Var,
    pub l_q: Var,
    pub l_v: Var,
    pub l_s: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        LossBreakdown {
            l_data: v(self.l_data),
            l_p: v(self.l_p),
            l_q: v(self.l_q),
            l_v: v(self.l_v),
            l_s: v(self.l_s),
            l_total: 0.0,
        }
    }

    pub fn total(&self, tape: &mut Tape, w: &DynamicWeights, s: &ScaleFactors) -> Var {
        let terms = [
            tape.mul_const(self.l_data, w.w_data / s.s_data),
            tape.mul_const(self.l_p, w.w_pq / s.s_p),
            tape.mul_const(self.l_q, w.w_pq / s.s_q),
            tape.mul_const(self.l_v, w.w_v / s.s_v),
            tape.mul_const(self.l_s, w.w_s / s.s_s),
        ];
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = tape.add(acc, *t).expect("scalar terms");
        }
        acc
    }
}

/// Per-batch constants for evaluating the loss on a node-major `[N*B, 3]`
/// model output.
#[derive(Debug, Clone)]
pub struct LossBatch {
    n: usize,
    b: usize,
    delta: f64,
    target: Scaler,
    truth: Tensor,
    non_slack: Arc<[usize]>,
    pq: Arc<[usize]>,
    pv: Arc<[usize]>,
    slack: Arc<[usize]>,
    p_spec_ns: Tensor,
    q_spec_pq: Tensor,
    vset_pv: Tensor,
    slack_p: Tensor,
    keep: Tensor,
    pin_e: Tensor,
    y_rows: Arc<[usize]>,
    y_cols: Arc<[usize]>,
    y_g: Tensor,
    y_b: Tensor,
}

impl LossBatch {
    /// `y` must be the admittance matrix shared by every sample (loads do not
    /// enter it).
    pub fn new(samples: &[&Sample], net: &Network, y: &AdmittanceMatrix, target: &Scaler, delta: f64) -> Self {
        let n = net.n_buses();
        let b = samples.len();
        let rows_of = |kind: Option<BusKind>, neg: bool| -> Arc<[usize]> {
            net.buses()
                .iter()
                .enumerate()
                .filter(|(_, bus)| match kind {
                    Some(k) => (bus.kind == k) != neg,
                    None => true,
                })
                .flat_map(|(i, _)| (0..b).map(move |j| i * b + j))
                .collect()
        };
        let non_slack = rows_of(Some(BusKind::Slack), true);
        let pq = rows_of(Some(BusKind::Pq), false);
        let pv = rows_of(Some(BusKind::Pv), false);
        let slack = rows_of(Some(BusKind::Slack), false);
        // Node features: [p_demand, q_demand, p_gen, v_setpoint, kind].
        let feat = |r: usize, f: fn(&[f64; 5]) -> f64| f(&samples[r % b].nodes[r / b]);
        let col = |rows: &[usize], f: fn(&[f64; 5]) -> f64| {
            Tensor::vector(rows.iter().map(|&r| feat(r, f)).collect())
        };
        let p_spec_ns = col(&non_slack, |x| x[2] - x[0]);
        let q_spec_pq = col(&pq, |x| -x[1]);
        let vset_pv = col(&pv, |x| x[3]);
        let slack_p = Tensor::vector(
            slack.iter().map(|&r| samples[r % b].slack_p_truth).collect(),
        );
        let mut keep = vec![1.0; n * b];
        let mut pin_e = vec![0.0; n * b];
        for &r in slack.iter() {
            keep[r] = 0.0;
            pin_e[r] = feat(r, |x| x[3]);
        }
        let mut truth = vec![0.0; n * b * TARGETS];
        for (j, s) in samples.iter().enumerate() {
            for (i, t) in s.target().iter().enumerate() {
                let z = target.transform(t);
                truth[(i * b + j) * TARGETS..(i * b + j + 1) * TARGETS].copy_from_slice(&z);
            }
        }
        let (mut y_rows, mut y_cols, mut y_g, mut y_b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            for (k, yik) in y.row(i) {
                for j in 0..b {
                    y_rows.push(i * b + j);
                    y_cols.push(k * b + j);
                    y_g.push(yik.re);
                    y_b.push(yik.im);
                }
            }
        }
        Self {
            n,
            b,
            delta,
            target: target.clone(),
            truth: Tensor::matrix(n * b, TARGETS, truth).expect("shape"),
            non_slack,
            pq,
            pv,
            slack,
            p_spec_ns,
            q_spec_pq,
            vset_pv,
            slack_p,
            keep: Tensor::vector(keep),
            pin_e: Tensor::vector(pin_e),
            y_rows: y_rows.into(),
            y_cols: y_cols.into(),
            y_g: Tensor::vector(y_g),
            y_b: Tensor::vector(y_b),
        }
    }

    pub fn batch(&self) -> usize {
        self.b
    }

    /// All five terms for a scaled `[N*B, 3]` output.
    pub fn losses(&self, tape: &mut Tape, out: Var) -> Result<LossVars, AutodiffError> {
        let nb = self.n * self.b;
        if tape.shape(out) != [nb, TARGETS] {
            return Err(AutodiffError::Shape {
                op: "loss",
                lhs: tape.shape(out).to_vec(),
                rhs: vec![nb, TARGETS],
            });
        }
        // Data term.
        let truth = tape.constant(self.truth.clone());
        let d = tape.sub(out, truth)?;
        let d = tape.index_select(d, self.non_slack.clone())?;
        let d = tape.square(d);
        let l_data = if self.non_slack.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let s = tape.sum(d);
            tape.mul_const(s, 1.0 / self.non_slack.len() as f64)
        };

        // Un-scale and decode to rectangular voltages.
        let flat = tape.reshape(out, &[nb * TARGETS])?;
        let column = |tape: &mut Tape, c: usize| -> Result<Var, AutodiffError> {
            let idx: Arc<[usize]> = (0..nb).map(|r| r * TARGETS + c).collect();
            let x = tape.index_select(flat, idx)?;
            let x = tape.mul_const(x, self.target.std[c]);
            Ok(tape.add_const(x, self.target.mean[c]))
        };
        let vm = column(tape, 0)?;
        let c = column(tape, 1)?;
        let s = column(tape, 2)?;
        let c2 = tape.square(c);
        let s2 = tape.square(s);
        let norm = tape.add(c2, s2)?;
        let norm = tape.add_const(norm, NORM_EPS);
        let norm = tape.sqrt(norm)?;
        let cn = tape.div(c, norm)?;
        let sn = tape.div(s, norm)?;
        let keep = tape.constant(self.keep.clone());
        let pin = tape.constant(self.pin_e.clone());
        let e = tape.mul(vm, cn)?;
        let e = tape.mul(e, keep)?;
        let e = tape.add(e, pin)?;
        let f = tape.mul(vm, sn)?;
        let f = tape.mul(f, keep)?;

        // Currents I = Y V over the stored nonzeros, then S = V conj(I).
        let g = tape.constant(self.y_g.clone());
        let bb = tape.constant(self.y_b.clone());
        let ek = tape.index_select(e, self.y_cols.clone())?;
        let fk = tape.index_select(f, self.y_cols.clone())?;
        let ge = tape.mul(g, ek)?;
        let bf = tape.mul(bb, fk)?;
        let gf = tape.mul(g, fk)?;
        let be = tape.mul(bb, ek)?;
        let ire = tape.sub(ge, bf)?;
        let iim = tape.add(gf, be)?;
        let ire = tape.scatter_add(ire, self.y_rows.clone(), nb)?;
        let iim = tape.scatter_add(iim, self.y_rows.clone(), nb)?;
        let eire = tape.mul(e, ire)?;
        let fiim = tape.mul(f, iim)?;
        let p = tape.add(eire, fiim)?;
        let fire = tape.mul(f, ire)?;
        let eiim = tape.mul(e, iim)?;
        let q = tape.sub(fire, eiim)?;

        let residual = |tape: &mut Tape, x: Var, rows: &Arc<[usize]>, spec: &Tensor| -> Result<Var, AutodiffError> {
            if rows.is_empty() {
                return Ok(tape.constant(Tensor::scalar(0.0)));
            }
            let x = tape.index_select(x, rows.clone())?;
            let spec = tape.constant(spec.clone());
            let r = tape.sub(spec, x)?;
            let h = tape.huber(r, self.delta);
            Ok(tape.mean(h))
        };
        let l_p = residual(tape, p, &self.non_slack, &self.p_spec_ns)?;
        let l_q = residual(tape, q, &self.pq, &self.q_spec_pq)?;
        let l_v = residual(tape, vm, &self.pv, &self.vset_pv)?;
        let l_s = residual(tape, p, &self.slack, &self.slack_p)?;
        Ok(LossVars {
            l_data,
            l_p,
            l_q,
            l_v,
            l_s,
        })
    }
}

/// One row per epoch and split of the loss-curve file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: CurveSplit,
    pub l_data: f64,
    pub l_p: f64,
    pub l_q: f64,
    pub l_v: f64,
    pub l_s: f64,
    pub l_total: f64,
    pub w_pq: f64,
    pub w_v: f64,
    pub w_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveSplit {
    Train,
    Val,
}

impl CurveRow {
    pub fn new(epoch: usize, split: CurveSplit, l: &LossBreakdown, w: &DynamicWeights) -> Self {
        Self {
            epoch,
            split,
            l_data: l.l_data,
            l_p: l.l_p,
            l_q: l.l_q,
            l_v: l.l_v,
            l_s: l.l_s,
            l_total: l.l_total,
            w_pq: w.w_pq,
            w_v: w.w_v,
            w_s: w.w_s,
        }
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_data: self.l_data,
            l_p: self.l_p,
            l_q: self.l_q,
            l_v: self.l_v,
            l_s: self.l_s,
            l_total: self.l_total,
        }
    }
}

pub fn write_curves<W: Write>(rows: &[CurveRow], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_curves<R: std::io::Read>(r: R) -> csv::Result<Vec<CurveRow>> {
    csv::Reader::from_reader(r).deserialize().collect()
}
