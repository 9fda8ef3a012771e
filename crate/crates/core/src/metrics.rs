//! Accuracy, consistency and timing metrics, and the report that collects
//! them per method.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::Network;
use crate::solver::{mismatch, VoltageState};

/// Timer resolution used when reporting short durations.
pub const TIMER_RESOLUTION_MS: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cubic fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("cubic fit is degenerate: all sizes are equal")]
    Degenerate,
    #[error("sizes and times differ in length ({0} vs {1})")]
    Length(usize, usize),
}

/// Mean and population standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Median; NaN for an empty slice.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Wraps degrees into `(-180, 180]`.
pub fn wrap_degrees(d: f64) -> f64 {
    let w = (d + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

/// Absolute angle errors in degrees at non-slack buses after aligning the
/// candidate's slack angle to the truth's.
pub fn angle_errors(candidate: &VoltageState, truth: &VoltageState, slack: usize) -> Vec<f64> {
    assert_eq!(candidate.len(), truth.len(), "state dimensions differ");
    let shift = truth.va[slack] - candidate.va[slack];
    (0..truth.len())
        .filter(|&i| i != slack)
        .map(|i| wrap_degrees((candidate.va[i] + shift - truth.va[i]).to_degrees()).abs())
        .collect()
}

/// Slack-aligned angle MAE in degrees over non-slack buses.
pub fn angle_mae(candidate: &VoltageState, truth: &VoltageState, slack: usize) -> f64 {
    mean_std(&angle_errors(candidate, truth, slack)).0
}

/// Magnitude MAE in p.u. over non-slack buses.
pub fn vm_mae(candidate: &VoltageState, truth: &VoltageState, slack: usize) -> f64 {
    assert_eq!(candidate.len(), truth.len(), "state dimensions differ");
    let e: Vec<f64> = (0..truth.len())
        .filter(|&i| i != slack)
        .map(|i| (candidate.vm[i] - truth.vm[i]).abs())
        .collect();
    mean_std(&e).0
}

/// `(max |dP|, max |dQ|)` over the buses where each is defined.
pub fn max_mismatch(net: &Network, state: &VoltageState) -> (f64, f64) {
    let m = mismatch(net, state);
    (m.max_dp(), m.max_dq())
}

/// Wall-clock statistics of repeated runs, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub repeats: usize,
    pub resolution_ms: f64,
}

impl Timing {
    pub fn from_seconds(samples: &[f64]) -> Self {
        let ms: Vec<f64> = samples.iter().map(|s| s * 1e3).collect();
        let (mean_ms, std_ms) = mean_std(&ms);
        Self {
            mean_ms,
            std_ms,
            repeats: samples.len(),
            resolution_ms: TIMER_RESOLUTION_MS,
        }
    }

    pub fn below_resolution(&self) -> bool {
        self.mean_ms < self.resolution_ms
    }

    /// `"1.23 ± 0.04"`, or `"< 0.01"` below resolution.
    pub fn display_ms(&self) -> String {
        if self.below_resolution() {
            format!("< {}", self.resolution_ms)
        } else {
            format!("{:.2} ± {:.2}", self.mean_ms, self.std_ms)
        }
    }
}

/// Times `f` over `repeats` runs (at least one).
pub fn timing<F: FnMut()>(mut f: F, repeats: usize) -> Timing {
    let repeats = repeats.max(1);
    let samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    Timing::from_seconds(&samples)
}

/// Least-squares fit of `t = c n³ + d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicFit {
    pub c: f64,
    pub d: f64,
    pub r2: f64,
}

pub fn cubic_fit(sizes: &[f64], times: &[f64]) -> Result<CubicFit, MetricsError> {
    if sizes.len() != times.len() {
        return Err(MetricsError::Length(sizes.len(), times.len()));
    }
    if sizes.len() < 3 {
        return Err(MetricsError::TooFewPoints(sizes.len()));
    }
    let x: Vec<f64> = sizes.iter().map(|n| n.powi(3)).collect();
    let (mx, _) = mean_std(&x);
    let (my, _) = mean_std(times);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * mx * mx {
        return Err(MetricsError::Degenerate);
    }
    let sxy: f64 = x.iter().zip(times).map(|(a, b)| (a - mx) * (b - my)).sum();
    let c = sxy / sxx;
    let d = my - c * mx;
    let ss_res: f64 = x.iter().zip(times).map(|(a, b)| (b - (c * a + d)).powi(2)).sum();
    let ss_tot: f64 = times.iter().map(|b| (b - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(CubicFit { c, d, r2 })
}

/// Mean and standard deviation over cases.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Self { mean, std }
    }
}

/// One method's metrics on one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_index: usize,
    pub method: String,
    pub mae_vm: f64,
    pub mae_va: f64,
    pub max_dp: f64,
    pub max_dq: f64,
    pub max_mismatch: f64,
    pub time_ms: f64,
    pub converged: bool,
}

impl CaseMetrics {
    pub fn measure(
        case_index: usize,
        method: &str,
        net: &Network,
        candidate: &VoltageState,
        truth: &VoltageState,
        seconds: f64,
        converged: bool,
    ) -> Self {
        let slack = net.slack();
        let (max_dp, max_dq) = max_mismatch(net, candidate);
        Self {
            case_index,
            method: method.to_string(),
            mae_vm: vm_mae(candidate, truth, slack),
            mae_va: angle_mae(candidate, truth, slack),
            max_dp,
            max_dq,
            max_mismatch: max_dp.max(max_dq),
            time_ms: seconds * 1e3,
            converged,
        }
    }
}

/// Aggregate row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub n_cases: usize,
    /// Pooled over all non-slack (case, bus) pairs; std is across cases.
    pub mae_vm: Stat,
    pub mae_va: Stat,
    pub max_dp: Stat,
    pub max_dq: Stat,
    pub median_max_mismatch: f64,
    pub time: Timing,
    /// Baseline mean time over this method's mean time.
    pub speedup: Option<f64>,
    pub n_converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub case: String,
    pub set: String,
    pub baseline: Option<String>,
    pub rows: Vec<MethodRow>,
    pub per_case: Vec<CaseMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EvalReport {
    /// Aggregates per-case metrics in the order methods first appear.
    pub fn from_cases(case: &str, set: &str, baseline: Option<&str>, per_case: Vec<CaseMetrics>) -> Self {
        let mut methods: Vec<String> = Vec::new();
        for c in &per_case {
            if !methods.contains(&c.method) {
                methods.push(c.method.clone());
            }
        }
        let mut rows: Vec<MethodRow> = methods
            .iter()
            .map(|m| {
                let cs: Vec<&CaseMetrics> = per_case.iter().filter(|c| &c.method == m).collect();
                let col = |f: fn(&CaseMetrics) -> f64| cs.iter().map(|c| f(c)).collect::<Vec<f64>>();
                let times: Vec<f64> = col(|c| c.time_ms / 1e3);
                MethodRow {
                    method: m.clone(),
                    n_cases: cs.len(),
                    mae_vm: Stat::of(&col(|c| c.mae_vm)),
                    mae_va: Stat::of(&col(|c| c.mae_va)),
                    max_dp: Stat::of(&col(|c| c.max_dp)),
                    max_dq: Stat::of(&col(|c| c.max_dq)),
                    median_max_mismatch: median(&col(|c| c.max_mismatch)),
                    time: Timing::from_seconds(&times),
                    speedup: None,
                    n_converged: cs.iter().filter(|c| c.converged).count(),
                }
            })
            .collect();
        if let Some(base) = baseline {
            if let Some(t0) = rows.iter().find(|r| r.method == base).map(|r| r.time.mean_ms) {
                for r in &mut rows {
                    r.speedup = (r.time.mean_ms > 0.0).then(|| t0 / r.time.mean_ms);
                }
            }
        }
        Self {
            case: case.to_string(),
            set: set.to_string(),
            baseline: baseline.map(str::to_string),
            rows,
            per_case,
            notes: Vec::new(),
        }
    }

    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Copy with wall-clock fields zeroed, for comparing runs.
    pub fn strip_timing(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.rows {
            r.time = Timing::from_seconds(&vec![0.0; r.time.repeats]);
            r.speedup = None;
        }
        for c in &mut out.per_case {
            c.time_ms = 0.0;
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Column-aligned comparison table.
    pub fn to_table(&self) -> String {
        let header = [
            "Method",
            "MAE |V| (p.u.)",
            "MAE angle (deg)",
            "max dP (p.u.)",
            "max dQ (p.u.)",
            "Time (ms)",
            "Speedup",
        ];
        let pm = |s: &Stat, prec: usize| format!("{:.prec$} ± {:.prec$}", s.mean, s.std);
        let body: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    pm(&r.mae_vm, 4),
                    pm(&r.mae_va, 3),
                    format!("{:.2e} ± {:.1e}", r.max_dp.mean, r.max_dp.std),
                    format!("{:.2e} ± {:.1e}", r.max_dq.mean, r.max_dq.std),
                    r.time.display_ms(),
                    r.speedup.map_or("-".into(), |s| if s < 0.95 { format!("{s:.2}x") } else { format!("{s:.1}x") }),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = String::new();
        let _ = writeln!(out, "{} / {} ({} cases)", self.case, self.set, self.rows.first().map_or(0, |r| r.n_cases));
        let _ = writeln!(out, "{}", line(&header.map(String::from)));
        let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        for row in &body {
            let _ = writeln!(out, "{}", line(row));
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }

    /// One row per (case, method).
    pub fn write_case_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for c in &self.per_case {
            wr.serialize(c)?;
        }
        wr.flush()?;
        Ok(())
    }
}
