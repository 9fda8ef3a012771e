//! Reference AC power flow: nodal injections, mismatches, full
//! Newton-Raphson in polar coordinates and XB fast decoupled iteration.

use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{build_ybus, AdmittanceMatrix, BusKind, Network};
use crate::sparse::{CsrMatrix, SparseLu};

pub const NR_DEFAULT_MAX_ITER: usize = 20;
pub const FDPF_DEFAULT_MAX_ITER: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("initial state has {actual} buses, network has {expected}")]
    Dimension { expected: usize, actual: usize },
}

/// Per-bus voltage phasors in polar form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageState {
    pub vm: Vec<f64>,
    /// Angles in radians.
    pub va: Vec<f64>,
}

impl VoltageState {
    pub fn new(vm: Vec<f64>, va: Vec<f64>) -> Self {
        assert_eq!(vm.len(), va.len(), "vm and va lengths differ");
        Self { vm, va }
    }

    /// `vm = 1` at PQ buses, `vm = v_setpoint` at PV/slack, `va = 0`.
    pub fn flat_start(net: &Network) -> Self {
        let vm = net
            .buses()
            .iter()
            .map(|b| if b.kind == BusKind::Pq { 1.0 } else { b.v_setpoint })
            .collect();
        Self {
            vm,
            va: vec![0.0; net.n_buses()],
        }
    }

    pub fn from_complex(v: &[Complex64]) -> Self {
        Self {
            vm: v.iter().map(|z| z.norm()).collect(),
            va: v.iter().map(|z| z.arg()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.vm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vm.is_empty()
    }

    pub fn phasor(&self, i: usize) -> Complex64 {
        Complex64::from_polar(self.vm[i], self.va[i])
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        (0..self.len()).map(|i| self.phasor(i)).collect()
    }

    /// Largest per-component difference in magnitude and angle.
    pub fn max_abs_diff(&self, other: &Self) -> (f64, f64) {
        let dm = self
            .vm
            .iter()
            .zip(&other.vm)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let da = self
            .va
            .iter()
            .zip(&other.va)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        (dm, da)
    }
}

/// Net injections `P_i`, `Q_i` from `S = V ⊙ conj(Y V)`.
pub fn power_injections(state: &VoltageState, y: &AdmittanceMatrix) -> (Vec<f64>, Vec<f64>) {
    let v = state.to_complex();
    let s = complex_injections(&v, y);
    (s.iter().map(|z| z.re).collect(), s.iter().map(|z| z.im).collect())
}

pub(crate) fn complex_injections(v: &[Complex64], y: &AdmittanceMatrix) -> Vec<Complex64> {
    let current = y.mul_vec(v);
    v.iter().zip(current).map(|(&vi, ii)| vi * ii.conj()).collect()
}

/// `ΔP` over non-slack buses and `ΔQ` over PQ buses; zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchVector {
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
}

impl MismatchVector {
    pub fn max_dp(&self) -> f64 {
        self.dp.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_dq(&self) -> f64 {
        self.dq.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max_i(|ΔP_i|, |ΔQ_i|)`; NaN entries propagate as infinity.
    pub fn max_abs(&self) -> f64 {
        let m = self.max_dp().max(self.max_dq());
        if self.dp.iter().chain(&self.dq).any(|v| v.is_nan()) {
            f64::INFINITY
        } else {
            m
        }
    }
}

pub fn mismatch(net: &Network, state: &VoltageState) -> MismatchVector {
    mismatch_with(net, &build_ybus(net), state)
}

/// Mismatch against a pre-built admittance matrix for `net`.
pub fn mismatch_with(net: &Network, y: &AdmittanceMatrix, state: &VoltageState) -> MismatchVector {
    let s = complex_injections(&state.to_complex(), y);
    mismatch_from_injections(net, &s)
}

fn mismatch_from_injections(net: &Network, s: &[Complex64]) -> MismatchVector {
    let n = net.n_buses();
    let mut dp = vec![0.0; n];
    let mut dq = vec![0.0; n];
    for bus in net.buses() {
        let spec = bus.s_spec();
        let i = bus.id;
        match bus.kind {
            BusKind::Slack => {}
            BusKind::Pv => dp[i] = spec.re - s[i].re,
            BusKind::Pq => {
                dp[i] = spec.re - s[i].re;
                dq[i] = spec.im - s[i].im;
            }
        }
    }
    MismatchVector { dp, dq }
}

/// Level below which a computed mismatch is dominated by rounding in `Y·V`
/// at voltages near 1 p.u.: `64 ε max_i Σ_k |Y_ik|`.
pub fn mismatch_noise_floor(y: &AdmittanceMatrix) -> f64 {
    let row_norm = (0..y.dim())
        .map(|i| y.row(i).map(|(_, z)| z.norm()).sum::<f64>())
        .fold(0.0, f64::max);
    64.0 * f64::EPSILON * row_norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub state: VoltageState,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
    /// Seconds.
    pub wall_time: f64,
    /// Largest mismatch after each iteration, starting with the initial state.
    pub mismatch_history: Vec<f64>,
    pub diagnostic: Option<String>,
}

#[derive(Serialize, Deserialize)]
pub struct SolveReportJson {
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
    pub wall_time_ms: f64,
    pub vm: Vec<f64>,
    pub va_deg: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostic: Option<String>,
}

impl SolveReport {
    pub fn to_json(&self) -> SolveReportJson {
        SolveReportJson {
            converged: self.converged,
            iterations: self.iterations,
            max_mismatch: self.max_mismatch,
            wall_time_ms: self.wall_time * 1e3,
            vm: self.state.vm.clone(),
            va_deg: self.state.va.iter().map(|a| a.to_degrees()).collect(),
            diagnostic: self.diagnostic.clone(),
        }
    }
}

fn check_inputs(net: &Network, init: &VoltageState, tol: f64) -> Result<(), SolverError> {
    if !(tol > 0.0) {
        return Err(SolverError::Tolerance(tol));
    }
    if init.len() != net.n_buses() {
        return Err(SolverError::Dimension {
            expected: net.n_buses(),
            actual: init.len(),
        });
    }
    Ok(())
}

/// Index sets for the unknowns: angles at PV+PQ, magnitudes at PQ.
struct Unknowns {
    pvpq: Vec<usize>,
    pq: Vec<usize>,
}

impl Unknowns {
    fn new(net: &Network) -> Self {
        let pvpq = net
            .buses()
            .iter()
            .filter(|b| b.kind != BusKind::Slack)
            .map(|b| b.id)
            .collect();
        Self {
            pvpq,
            pq: net.ids_of(BusKind::Pq),
        }
    }
}

/// Assembles the polar Jacobian `[[dP/dθ, dP/d|V|], [dQ/dθ, dQ/d|V|]]` over
/// the unknowns.
fn jacobian(
    y: &AdmittanceMatrix,
    vm: &[f64],
    va: &[f64],
    s: &[Complex64],
    unk: &Unknowns,
) -> CsrMatrix<f64> {
    let n = vm.len();
    let npvpq = unk.pvpq.len();
    let mut ang_col = vec![usize::MAX; n];
    let mut mag_col = vec![usize::MAX; n];
    for (c, &i) in unk.pvpq.iter().enumerate() {
        ang_col[i] = c;
    }
    for (c, &i) in unk.pq.iter().enumerate() {
        mag_col[i] = npvpq + c;
    }
    let dim = npvpq + unk.pq.len();
    let mut trip = Vec::new();
    let mut push_row = |row_p: Option<usize>, row_q: Option<usize>, i: usize| {
        for (k, yik) in y.row(i) {
            let (g, b) = (yik.re, yik.im);
            let (dp_dth, dp_dv, dq_dth, dq_dv) = if k == i {
                let (p, q) = (s[i].re, s[i].im);
                (
                    -q - b * vm[i] * vm[i],
                    p / vm[i] + g * vm[i],
                    p - g * vm[i] * vm[i],
                    q / vm[i] - b * vm[i],
                )
            } else {
                let th = va[i] - va[k];
                let (sin, cos) = th.sin_cos();
                let vv = vm[i] * vm[k];
                (
                    vv * (g * sin - b * cos),
                    vm[i] * (g * cos + b * sin),
                    -vv * (g * cos + b * sin),
                    vm[i] * (g * sin - b * cos),
                )
            };
            for (row, d_th, d_v) in [(row_p, dp_dth, dp_dv), (row_q, dq_dth, dq_dv)] {
                let Some(r) = row else { continue };
                if ang_col[k] != usize::MAX {
                    trip.push((r, ang_col[k], d_th));
                }
                if mag_col[k] != usize::MAX {
                    trip.push((r, mag_col[k], d_v));
                }
            }
        }
    };
    for (r, &i) in unk.pvpq.iter().enumerate() {
        let rq = if mag_col[i] != usize::MAX {
            Some(mag_col[i])
        } else {
            None
        };
        push_row(Some(r), rq, i);
    }
    CsrMatrix::from_triplets(dim, dim, &trip)
}

fn finite_state(vm: &[f64], va: &[f64]) -> bool {
    vm.iter().chain(va).all(|v| v.is_finite())
}

/// Full Newton-Raphson from `init`. Never panics on numerical failure;
/// singular Jacobians and divergence come back as `converged = false`.
pub fn newton_raphson(
    net: &Network,
    init: &VoltageState,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport, SolverError> {
    newton_raphson_with(net, &build_ybus(net), init, tol, max_iter)
}

pub fn newton_raphson_with(
    net: &Network,
    y: &AdmittanceMatrix,
    init: &VoltageState,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport, SolverError> {
    check_inputs(net, init, tol)?;
    let start = Instant::now();
    let unk = Unknowns::new(net);
    let mut vm = init.vm.clone();
    let mut va = init.va.clone();
    let mut history = Vec::new();
    let mut diagnostic = None;
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let v: Vec<Complex64> = (0..vm.len()).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let s = complex_injections(&v, y);
        let mis = mismatch_from_injections(net, &s);
        let norm = mis.max_abs();
        history.push(norm);
        if norm <= tol {
            converged = true;
            break;
        }
        if !norm.is_finite() {
            diagnostic = Some(format!("non-finite mismatch at iteration {iterations}"));
            break;
        }
        if iterations >= max_iter {
            diagnostic = Some(format!("no convergence within {max_iter} iterations"));
            break;
        }
        let rhs: Vec<f64> = unk
            .pvpq
            .iter()
            .map(|&i| mis.dp[i])
            .chain(unk.pq.iter().map(|&i| mis.dq[i]))
            .collect();
        let jac = jacobian(y, &vm, &va, &s, &unk);
        let dx = match SparseLu::factor(&jac).and_then(|lu| lu.solve(&rhs)) {
            Ok(dx) => dx,
            Err(e) => {
                diagnostic = Some(format!("Jacobian factorization failed: {e}"));
                break;
            }
        };
        for (c, &i) in unk.pvpq.iter().enumerate() {
            va[i] += dx[c];
        }
        for (c, &i) in unk.pq.iter().enumerate() {
            vm[i] += dx[unk.pvpq.len() + c];
        }
        iterations += 1;
        if !finite_state(&vm, &va) {
            diagnostic = Some(format!("state became non-finite at iteration {iterations}"));
            history.push(f64::INFINITY);
            break;
        }
    }
    let max_mismatch = *history.last().expect("at least one evaluation");
    Ok(SolveReport {
        state: VoltageState { vm, va },
        converged,
        iterations,
        max_mismatch,
        wall_time: start.elapsed().as_secs_f64(),
        mismatch_history: history,
        diagnostic,
    })
}

/// Fixed `B'` and `B''` matrices of the XB scheme, restricted to the
/// PV+PQ and PQ unknowns.
fn fdpf_matrices(net: &Network) -> Result<(CsrMatrix<f64>, CsrMatrix<f64>), String> {
    let unk = Unknowns::new(net);
    let b_prime_net = net
        .map(
            |b| {
                b.shunt_b = 0.0;
                b.shunt_g = 0.0;
            },
            |br| {
                br.b_charging = 0.0;
                br.tap = 1.0;
                br.r = 0.0;
            },
        )
        .map_err(|e| e.to_string())?;
    let b_dprime_net = net.map(|_| {}, |br| br.shift = 0.0).map_err(|e| e.to_string())?;
    let bp = build_ybus(&b_prime_net).csr().map(|z| -z.im);
    let bpp = build_ybus(&b_dprime_net).csr().map(|z| -z.im);
    Ok((
        bp.submatrix(&unk.pvpq, &unk.pvpq),
        bpp.submatrix(&unk.pq, &unk.pq),
    ))
}

/// XB fast decoupled power flow. One iteration is a P half-step followed by
/// a Q half-step; convergence is checked after each half.
pub fn fast_decoupled(
    net: &Network,
    init: &VoltageState,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport, SolverError> {
    check_inputs(net, init, tol)?;
    let start = Instant::now();
    let y = build_ybus(net);
    let unk = Unknowns::new(net);
    let mut vm = init.vm.clone();
    let mut va = init.va.clone();
    let mut history = Vec::new();
    let mut diagnostic = None;
    let mut iterations = 0;
    let mut converged = false;

    let evaluate = |vm: &[f64], va: &[f64]| {
        let v: Vec<Complex64> = (0..vm.len()).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        mismatch_from_injections(net, &complex_injections(&v, &y))
    };
    let finish = |vm: Vec<f64>, va: Vec<f64>, converged, iterations, history: Vec<f64>, diagnostic| SolveReport {
        state: VoltageState { vm, va },
        converged,
        iterations,
        max_mismatch: *history.last().unwrap_or(&f64::INFINITY),
        wall_time: start.elapsed().as_secs_f64(),
        mismatch_history: history,
        diagnostic,
    };

    let mut mis = evaluate(&vm, &va);
    history.push(mis.max_abs());
    if history[0] <= tol {
        return Ok(finish(vm, va, true, 0, history, None));
    }
    let factors = fdpf_matrices(net).and_then(|(bp, bpp)| {
        let lp = SparseLu::factor(&bp).map_err(|e| format!("B' factorization failed: {e}"))?;
        let lpp = SparseLu::factor(&bpp).map_err(|e| format!("B'' factorization failed: {e}"))?;
        Ok((lp, lpp))
    });
    let (lu_p, lu_pp) = match factors {
        Ok(f) => f,
        Err(msg) => return Ok(finish(vm, va, false, 0, history, Some(msg))),
    };

    while iterations < max_iter {
        iterations += 1;
        let rhs_p: Vec<f64> = unk.pvpq.iter().map(|&i| mis.dp[i] / vm[i]).collect();
        let dva = lu_p.solve(&rhs_p).expect("dimension fixed");
        for (c, &i) in unk.pvpq.iter().enumerate() {
            va[i] += dva[c];
        }
        mis = evaluate(&vm, &va);
        let norm = mis.max_abs();
        if norm <= tol {
            history.push(norm);
            converged = true;
            break;
        }
        let rhs_q: Vec<f64> = unk.pq.iter().map(|&i| mis.dq[i] / vm[i]).collect();
        let dvm = lu_pp.solve(&rhs_q).expect("dimension fixed");
        for (c, &i) in unk.pq.iter().enumerate() {
            vm[i] += dvm[c];
        }
        mis = evaluate(&vm, &va);
        let norm = mis.max_abs();
        history.push(norm);
        if norm <= tol {
            converged = true;
            break;
        }
        if !norm.is_finite() || !finite_state(&vm, &va) {
            diagnostic = Some(format!("diverged at iteration {iterations}"));
            break;
        }
    }
    if !converged && diagnostic.is_none() {
        diagnostic = Some(format!("no convergence within {max_iter} iterations"));
    }
    Ok(finish(vm, va, converged, iterations, history, diagnostic))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nr,
    Fdpf,
}

pub fn solve(
    net: &Network,
    method: Method,
    init: &VoltageState,
    tol: f64,
    max_iter: Option<usize>,
) -> Result<SolveReport, SolverError> {
    match method {
        Method::Nr => newton_raphson(net, init, tol, max_iter.unwrap_or(NR_DEFAULT_MAX_ITER)),
        Method::Fdpf => fast_decoupled(net, init, tol, max_iter.unwrap_or(FDPF_DEFAULT_MAX_ITER)),
    }
}
