//! Partitioned linear refinement of a voltage estimate.
//!
//! PQ loads are turned into pseudo-currents evaluated at the previous
//! iterate, PV magnitudes are pinned to their setpoints and the slack is held
//! fixed, leaving the linear system `Y_pp V_pq = I_pq - Y_pv V_pv - Y_ps V_s`.
//! `Y_pp` does not depend on the iterate, so it is factorized once.

use std::io::Write;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{build_ybus, partition_ybus, AdmittanceMatrix, BusKind, Network, YbusPartition};
use crate::solver::{mismatch_with, VoltageState};
use crate::sparse::{DenseLu, LinalgError, SparseLu};

/// Magnitudes below this are treated as collapsed during iteration.
pub const COLLAPSE_GUARD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("invalid refinement config: {0}")]
    Config(String),
    #[error("Y_pp factorization failed: {0}")]
    Singular(#[from] LinalgError),
    #[error("state has {actual} buses, network has {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("partition does not match the network: {0}")]
    Partition(String),
}

/// Linear-solver backend for `Y_pp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Sparse,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub k_max: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Record the mismatch after every iteration.
    pub trace: bool,
    pub backend: Backend,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            k_max: 3,
            clip_lo: 0.8,
            clip_hi: 1.2,
            trace: true,
            backend: Backend::Sparse,
        }
    }
}

impl RefineConfig {
    pub fn with_k(k_max: usize) -> Self {
        Self {
            k_max,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        if self.k_max < 1 {
            return Err(RefineError::Config("k_max must be at least 1".into()));
        }
        if !(self.clip_lo > 0.0 && self.clip_lo < self.clip_hi) || !self.clip_hi.is_finite() {
            return Err(RefineError::Config(format!(
                "clip bounds must satisfy 0 < lo < hi, got [{}, {}]",
                self.clip_lo, self.clip_hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub max_dp: f64,
    pub max_dq: f64,
    pub max_mismatch: f64,
}

/// Mismatch after each iteration; row 0 is the unrefined input.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RefineTrace {
    pub rows: Vec<TraceRow>,
}

impl RefineTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn max_mismatch(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.max_mismatch).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

enum Factor {
    Sparse(SparseLu<Complex64>),
    Dense(DenseLu<Complex64>),
}

impl Factor {
    fn solve_into(&self, b: &[Complex64], work: &mut [Complex64], out: &mut [Complex64]) -> Result<(), LinalgError> {
        match self {
            Factor::Sparse(lu) => lu.solve_into(b, work, out),
            Factor::Dense(lu) => {
                let x = lu.solve(b)?;
                out.copy_from_slice(&x);
                Ok(())
            }
        }
    }
}

/// A network with its `Y_pp` factorized, ready to refine any number of
/// states. Immutable after construction, so it can be shared across threads.
pub struct Refiner {
    net: Network,
    y: AdmittanceMatrix,
    part: YbusPartition,
    factor: Factor,
    s_pq: Vec<Complex64>,
    v_set_pv: Vec<f64>,
    v_slack: Complex64,
}

impl Refiner {
    pub fn new(net: &Network, backend: Backend) -> Result<Self, RefineError> {
        let y = build_ybus(net);
        let part = partition_ybus(&y, &net.kinds()).map_err(|e| RefineError::Partition(e.to_string()))?;
        Self::with_partition(net, y, part, backend)
    }

    pub fn with_partition(
        net: &Network,
        y: AdmittanceMatrix,
        part: YbusPartition,
        backend: Backend,
    ) -> Result<Self, RefineError> {
        let kinds = net.kinds();
        let consistent = part.slack == net.slack()
            && part.pq.iter().all(|&i| kinds.get(i) == Some(&BusKind::Pq))
            && part.pv.iter().all(|&i| kinds.get(i) == Some(&BusKind::Pv))
            && part.pq.len() + part.pv.len() + 1 == net.n_buses()
            && part.y_pp.nrows() == part.pq.len();
        if !consistent {
            return Err(RefineError::Partition("bus kinds or block sizes differ".into()));
        }
        let factor = match backend {
            Backend::Sparse => Factor::Sparse(SparseLu::factor(&part.y_pp)?),
            Backend::Dense => Factor::Dense(DenseLu::factor(&part.y_pp)?),
        };
        let buses = net.buses();
        Ok(Self {
            s_pq: part.pq.iter().map(|&i| buses[i].s_spec()).collect(),
            v_set_pv: part.pv.iter().map(|&i| buses[i].v_setpoint).collect(),
            v_slack: Complex64::new(buses[net.slack()].v_setpoint, 0.0),
            net: net.clone(),
            y,
            part,
            factor,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn partition(&self) -> &YbusPartition {
        &self.part
    }

    fn trace_row(&self, iteration: usize, v: &[Complex64]) -> TraceRow {
        let m = mismatch_with(&self.net, &self.y, &VoltageState::from_complex(v));
        TraceRow {
            iteration,
            max_dp: m.max_dp(),
            max_dq: m.max_dq(),
            max_mismatch: m.max_abs(),
        }
    }

    pub fn refine(&self, init: &VoltageState, cfg: &RefineConfig) -> Result<(VoltageState, RefineTrace), RefineError> {
        let mut trace = RefineTrace::default();
        let state = self.run(init, cfg, |k, v| {
            if cfg.trace {
                trace.rows.push(self.trace_row(k, v));
            }
        })?;
        Ok((state, trace))
    }

    /// Refines `init`, returning the wall time of each iteration in seconds.
    pub fn refine_timed(&self, init: &VoltageState, cfg: &RefineConfig) -> Result<(VoltageState, Vec<f64>), RefineError> {
        let cfg = RefineConfig { trace: false, ..*cfg };
        let mut times = Vec::with_capacity(cfg.k_max);
        let mut last = None;
        let state = self.run(init, &cfg, |k, _| {
            let now = Instant::now();
            if k > 0 {
                times.push(now.duration_since(last.expect("set at iteration 0")).as_secs_f64());
            }
            last = Some(now);
        })?;
        Ok((state, times))
    }

    /// Core iteration. `observe(k, v)` is called with the raw, unclipped
    /// input at `k = 0` and with the full voltage vector after each
    /// iteration; time spent inside `observe` falls between iterations.
    fn run<F: FnMut(usize, &[Complex64])>(
        &self,
        init: &VoltageState,
        cfg: &RefineConfig,
        mut observe: F,
    ) -> Result<VoltageState, RefineError> {
        cfg.validate()?;
        let n = self.net.n_buses();
        if init.len() != n {
            return Err(RefineError::Dimension {
                expected: n,
                actual: init.len(),
            });
        }
        let mut v = init.to_complex();
        observe(0, &v);
        for z in v.iter_mut() {
            let m = z.norm();
            let c = m.clamp(cfg.clip_lo, cfg.clip_hi);
            *z = if m > 0.0 {
                *z * (c / m)
            } else {
                Complex64::new(c, 0.0)
            };
        }
        v[self.part.slack] = self.v_slack;

        let npq = self.part.pq.len();
        let mut v_pv: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); self.part.pv.len()];
        let v_s = [self.v_slack];
        let mut rhs = vec![Complex64::new(0.0, 0.0); npq];
        let mut work = vec![Complex64::new(0.0, 0.0); npq];
        let mut sol = vec![Complex64::new(0.0, 0.0); npq];
        for k in 1..=cfg.k_max {
            for (j, &i) in self.part.pv.iter().enumerate() {
                v_pv[j] = Complex64::from_polar(self.v_set_pv[j], v[i].arg());
                v[i] = v_pv[j];
            }
            for (r, &i) in self.part.pq.iter().enumerate() {
                let mut vi = v[i];
                let m = vi.norm();
                if !(m >= COLLAPSE_GUARD) {
                    vi = if m > 0.0 {
                        vi * (cfg.clip_lo / m)
                    } else {
                        Complex64::new(cfg.clip_lo, 0.0)
                    };
                }
                rhs[r] = (self.s_pq[r] / vi).conj();
            }
            for (r, acc) in rhs.iter_mut().enumerate() {
                for (c, y) in self.part.y_pv.row(r) {
                    *acc -= y * v_pv[c];
                }
                for (c, y) in self.part.y_ps.row(r) {
                    *acc -= y * v_s[c];
                }
            }
            self.factor.solve_into(&rhs, &mut work, &mut sol)?;
            for (r, &i) in self.part.pq.iter().enumerate() {
                v[i] = sol[r];
            }
            observe(k, &v);
        }
        Ok(VoltageState::from_complex(&v))
    }
}

/// One-shot refinement against a caller-supplied partition.
pub fn lse_refine(
    net: &Network,
    init: &VoltageState,
    part: &YbusPartition,
    cfg: &RefineConfig,
) -> Result<(VoltageState, RefineTrace), RefineError> {
    let refiner = Refiner::with_partition(net, build_ybus(net), part.clone(), cfg.backend)?;
    refiner.refine(init, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTiming {
    /// Mean seconds per iteration index `1..=k_max`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Largest absolute difference between any two iteration means.
    pub max_delta: f64,
    pub repeats: usize,
}

pub fn per_iteration_timing(
    net: &Network,
    init: &VoltageState,
    cfg: &RefineConfig,
    repeats: usize,
) -> Result<IterationTiming, RefineError> {
    if repeats < 1 {
        return Err(RefineError::Config("repeats must be at least 1".into()));
    }
    let refiner = Refiner::new(net, cfg.backend)?;
    let mut samples = vec![Vec::with_capacity(repeats); cfg.k_max];
    for _ in 0..repeats {
        let (_, times) = refiner.refine_timed(init, cfg)?;
        for (k, t) in times.into_iter().enumerate() {
            samples[k].push(t);
        }
    }
    let (mean, std): (Vec<f64>, Vec<f64>) = samples.iter().map(|s| crate::metrics::mean_std(s)).unzip();
    let hi = mean.iter().copied().fold(f64::MIN, f64::max);
    let lo = mean.iter().copied().fold(f64::MAX, f64::min);
    Ok(IterationTiming {
        max_delta: hi - lo,
        mean,
        std,
        repeats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{bundled_case, parse_case, BUNDLED_CASES};
    use crate::solver::{mismatch, mismatch_noise_floor, newton_raphson};

    fn nr_solution(net: &Network) -> VoltageState {
        let rep = newton_raphson(net, &VoltageState::flat_start(net), 1e-11, 20).unwrap();
        assert!(rep.converged);
        rep.state
    }

    #[test]
    fn config_validation() {
        assert!(RefineConfig::default().validate().is_ok());
        assert!(RefineConfig::with_k(0).validate().is_err());
        let bad = RefineConfig {
            clip_lo: 1.3,
            ..RefineConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fixed_point_at_solution() {
        for case in BUNDLED_CASES {
            let net = bundled_case(case).unwrap();
            let sol = nr_solution(&net);
            let part = partition_ybus(&build_ybus(&net), &net.kinds()).unwrap();
            let (out, trace) = lse_refine(&net, &sol, &part, &RefineConfig::default()).unwrap();
            assert_eq!(trace.len(), 4);
            let (dm, da) = out.max_abs_diff(&sol);
            assert!(dm < 1e-9 && da < 1e-9, "{case}: {dm} {da}");
        }
    }

    #[test]
    fn two_bus_single_step_matches_hand_solution() {
        let net = parse_case(
            r#"{"base_mva": 100,
                "buses": [{"id": 0, "kind": "slack"}, {"id": 1, "kind": "pq", "pd": 0.5}],
                "branches": [{"from": 0, "to": 1, "r": 0.0, "x": 0.1}]}"#,
        )
        .unwrap();
        // From V1 = 1: I = conj(-0.5 / 1) = -0.5, so -10j V1 = -0.5 - 10j.
        let want = (Complex64::new(-0.5, 0.0) - Complex64::new(0.0, 10.0)) / Complex64::new(0.0, -10.0);
        let refiner = Refiner::new(&net, Backend::Sparse).unwrap();
        let (out, _) = refiner.refine(&VoltageState::flat_start(&net), &RefineConfig::with_k(1)).unwrap();
        assert!((out.phasor(1) - want).norm() < 1e-14);
    }

    #[test]
    fn radial_flat_start_converges_to_nr() {
        for case in ["ieee33", "ieee69"] {
            let net = bundled_case(case).unwrap();
            let sol = nr_solution(&net);
            let refiner = Refiner::new(&net, Backend::Sparse).unwrap();
            let (out, trace) = refiner
                .refine(&VoltageState::flat_start(&net), &RefineConfig::with_k(20))
                .unwrap();
            let m = trace.max_mismatch();
            assert_eq!(m.len(), 21);
            assert!(m[20] <= 1e-6, "{case}: {m:?}");
            let floor = mismatch_noise_floor(&build_ybus(&net));
            for w in m[1..].windows(2) {
                assert!(w[1] <= w[0].max(floor), "{case}: {m:?}");
            }
            let (dm, _) = out.max_abs_diff(&sol);
            assert!(dm < 1e-5, "{case}: {dm}");
        }
    }

    #[test]
    fn clipping_recovers_corrupted_bus() {
        let net = bundled_case("ieee69").unwrap();
        let mut bad = nr_solution(&net);
        bad.vm[30] = 5.0;
        let refiner = Refiner::new(&net, Backend::Sparse).unwrap();
        let cfg = RefineConfig::with_k(6);
        let mut seen = None;
        refiner
            .run(&bad, &cfg, |k, v| {
                if k == 0 {
                    assert_eq!(v[30].norm(), 5.0);
                } else if k == 1 {
                    seen = Some(v[30].norm());
                }
            })
            .unwrap();
        assert!(seen.unwrap() < 1.2);
        let (_, trace) = refiner.refine(&bad, &cfg).unwrap();
        let m = trace.max_mismatch();
        assert!(m[0] > 100.0, "{m:?}");
        let floor = mismatch_noise_floor(&build_ybus(&net));
        for w in m.windows(2) {
            assert!(w[1] < w[0] || w[0].max(w[1]) <= floor, "{m:?}");
        }
    }

    #[test]
    fn pv_and_slack_pinned() {
        let net = bundled_case("ieee118").unwrap();
        let mut start = nr_solution(&net);
        for (i, vm) in start.vm.iter_mut().enumerate() {
            *vm *= 1.0 + 0.03 * ((i * 7 % 11) as f64 / 5.0 - 1.0);
        }
        start.va[net.slack()] = 0.2;
        let refiner = Refiner::new(&net, Backend::Sparse).unwrap();
        refiner
            .run(&start, &RefineConfig::with_k(4), |k, v| {
                if k == 0 {
                    return;
                }
                for bus in net.buses() {
                    match bus.kind {
                        BusKind::Pv => assert!((v[bus.id].norm() - bus.v_setpoint).abs() < 1e-15),
                        BusKind::Slack => assert_eq!(v[bus.id], Complex64::new(bus.v_setpoint, 0.0)),
                        BusKind::Pq => {}
                    }
                }
            })
            .unwrap();
    }

    #[test]
    fn asymmetric_residual_on_meshed_case() {
        let net = bundled_case("ieee118").unwrap();
        let sol = nr_solution(&net);
        let mut start = sol.clone();
        for (i, vm) in start.vm.iter_mut().enumerate() {
            *vm *= 1.0 + 0.05 * if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        for (i, va) in start.va.iter_mut().enumerate() {
            *va += 0.02 * ((i % 5) as f64 - 2.0);
        }
        let refiner = Refiner::new(&net, Backend::Sparse).unwrap();
        let (out, _) = refiner.refine(&start, &RefineConfig::with_k(20)).unwrap();
        let m = mismatch(&net, &out);
        let pq_dq = net.ids_of(BusKind::Pq).iter().map(|&i| m.dq[i].abs()).fold(0.0, f64::max);
        let pv_dp = net.ids_of(BusKind::Pv).iter().map(|&i| m.dp[i].abs()).fold(0.0, f64::max);
        assert!(pq_dq <= 1e-6, "{pq_dq}");
        assert!(pv_dp > 1e-3, "{pv_dp}");
    }

    #[test]
    fn dense_backend_matches_sparse() {
        let net = bundled_case("ieee118").unwrap();
        let flat = VoltageState::flat_start(&net);
        let cfg = RefineConfig::with_k(5);
        let a = Refiner::new(&net, Backend::Sparse).unwrap().refine(&flat, &cfg).unwrap().0;
        let b = Refiner::new(&net, Backend::Dense).unwrap().refine(&flat, &cfg).unwrap().0;
        let (dm, da) = a.max_abs_diff(&b);
        assert!(dm < 1e-12 && da < 1e-12);
    }

    #[test]
    fn collapsed_voltage_is_guarded() {
        let net = bundled_case("ieee33").unwrap();
        let mut start = VoltageState::flat_start(&net);
        start.vm[5] = 0.0;
        let (out, trace) = Refiner::new(&net, Backend::Sparse)
            .unwrap()
            .refine(&start, &RefineConfig::with_k(3))
            .unwrap();
        assert!(out.vm.iter().all(|v| v.is_finite() && *v > 0.0));
        assert!(trace.rows.iter().skip(1).all(|r| r.max_mismatch.is_finite()));
    }

    #[test]
    fn trace_csv_layout() {
        let net = bundled_case("ieee33").unwrap();
        let (_, trace) = Refiner::new(&net, Backend::Sparse)
            .unwrap()
            .refine(&VoltageState::flat_start(&net), &RefineConfig::with_k(2))
            .unwrap();
        let text = trace.to_csv_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,max_dp,max_dq,max_mismatch");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn timing_shapes() {
        let net = bundled_case("ieee33").unwrap();
        let flat = VoltageState::flat_start(&net);
        let t = per_iteration_timing(&net, &flat, &RefineConfig::default(), 1).unwrap();
        assert_eq!(t.mean.len(), 3);
        assert!(t.std.iter().all(|&s| s == 0.0));
        assert!(per_iteration_timing(&net, &flat, &RefineConfig::default(), 0).is_err());
    }
}
