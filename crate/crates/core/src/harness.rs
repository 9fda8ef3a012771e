//! End-to-end evaluation workflows: surrogate prediction with optional
//! refinement compared against the reference solvers, N-1 screening and
//! timing benchmarks.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::metrics::{cubic_fit, timing, CaseMetrics, CubicFit, EvalReport, Timing};
use crate::model::{prediction_to_voltage, Arch, BatchInput, ModelError, SurrogateParams};
use crate::network::{to_graph, BusKind, Network, EDGE_FEATURES, NODE_FEATURES};
use crate::refine::{per_iteration_timing, Backend, IterationTiming, RefineConfig, RefineError, Refiner};
use crate::solver::{fast_decoupled, newton_raphson, SolverError, VoltageState, FDPF_DEFAULT_MAX_ITER, NR_DEFAULT_MAX_ITER};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Refinement iterations; 0 leaves the prediction untouched.
    pub k: usize,
    pub backend: Backend,
    /// Tolerance of the reference solves.
    pub tol: f64,
    pub run_reference: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 3,
            backend: Backend::Sparse,
            tol: 1e-8,
            run_reference: true,
        }
    }
}

/// One evaluation case: a network, its true solution and its features.
pub struct EvalCase {
    pub index: usize,
    pub net: Network,
    pub truth: VoltageState,
    pub nodes: Vec<[f64; NODE_FEATURES]>,
    pub edges: Arc<[(usize, usize)]>,
    pub edge_attr: Vec<[f64; EDGE_FEATURES]>,
}

impl EvalCase {
    pub fn from_sample(base: &Network, s: &Sample) -> Self {
        let net = s.network(base);
        let g = to_graph(&net);
        Self {
            index: s.index,
            truth: s.state(),
            nodes: s.nodes.clone(),
            edges: g.edges.into(),
            edge_attr: s.edge_attr.clone(),
            net,
        }
    }

    /// Features rebuilt from `net`; `truth` from a caller-side solve.
    pub fn from_network(index: usize, net: Network, truth: VoltageState) -> Self {
        let g = to_graph(&net);
        Self {
            index,
            truth,
            nodes: g.nodes,
            edges: g.edges.into(),
            edge_attr: g.edge_attr,
            net,
        }
    }
}

/// Per-case refinement trace, iteration 0 being the raw prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTrace {
    pub case_index: usize,
    pub max_mismatch: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: EvalReport,
    pub traces: Vec<CaseTrace>,
}

pub fn method_names(arch: Arch) -> (&'static str, &'static str) {
    match arch {
        Arch::Gnn => ("GNN", "GNN+LSE"),
        Arch::Mlp => ("MLP", "MLP+LSE"),
    }
}

/// Runs the surrogate (and optionally the reference solvers) on each case.
pub fn evaluate(
    model: &SurrogateParams,
    cases: &[EvalCase],
    case_name: &str,
    set: &str,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, HarnessError> {
    let (raw_name, lse_name) = method_names(model.arch);
    let mut per_case = Vec::new();
    let mut traces = Vec::new();
    let mut notes = Vec::new();
    for case in cases {
        model.check_network(&case.net)?;
        let t0 = Instant::now();
        let input = BatchInput::from_features(&case.nodes, case.edges.clone(), &case.edge_attr, &model.scalers)?;
        let pred = model.predict(&input)?.remove(0);
        let raw = prediction_to_voltage(&pred, &model.scalers.target, &case.net)?;
        let t_model = t0.elapsed().as_secs_f64();
        per_case.push(CaseMetrics::measure(case.index, raw_name, &case.net, &raw, &case.truth, t_model, true));

        if cfg.k == 0 {
            let mut same = per_case.last().expect("just pushed").clone();
            same.method = lse_name.to_string();
            per_case.push(same);
        } else {
            let rcfg = RefineConfig {
                backend: cfg.backend,
                trace: false,
                ..RefineConfig::with_k(cfg.k)
            };
            let t1 = Instant::now();
            let refiner = Refiner::new(&case.net, cfg.backend)?;
            let (refined, _) = refiner.refine(&raw, &rcfg)?;
            let t_lse = t1.elapsed().as_secs_f64();
            per_case.push(CaseMetrics::measure(
                case.index,
                lse_name,
                &case.net,
                &refined,
                &case.truth,
                t_model + t_lse,
                true,
            ));
            let (_, trace) = refiner.refine(&raw, &RefineConfig { trace: true, ..rcfg })?;
            traces.push(CaseTrace {
                case_index: case.index,
                max_mismatch: trace.max_mismatch(),
            });
        }

        if cfg.run_reference {
            let flat = VoltageState::flat_start(&case.net);
            let t2 = Instant::now();
            let nr = newton_raphson(&case.net, &flat, cfg.tol, NR_DEFAULT_MAX_ITER)?;
            let t_nr = t2.elapsed().as_secs_f64();
            per_case.push(CaseMetrics::measure(case.index, "NR", &case.net, &nr.state, &case.truth, t_nr, nr.converged));
            let t3 = Instant::now();
            let fd = fast_decoupled(&case.net, &flat, cfg.tol, FDPF_DEFAULT_MAX_ITER)?;
            let t_fd = t3.elapsed().as_secs_f64();
            if !fd.converged {
                notes.push(format!("FDPF did not converge on case {}", case.index));
            }
            per_case.push(CaseMetrics::measure(case.index, "FDPF", &case.net, &fd.state, &case.truth, t_fd, fd.converged));
        }
    }
    let baseline = cfg.run_reference.then_some("NR");
    let mut report = EvalReport::from_cases(case_name, set, baseline, per_case);
    report.notes = notes;
    if let (Some(raw), Some(lse)) = (report.row(raw_name), report.row(lse_name)) {
        if lse.mae_va.mean > raw.mae_va.mean {
            report.notes.push(format!(
                "refinement raised the angle MAE ({:.3} -> {:.3} deg) while the median mismatch went {:.2e} -> {:.2e}",
                raw.mae_va.mean, lse.mae_va.mean, raw.median_max_mismatch, lse.median_max_mismatch
            ));
        }
    }
    Ok(PipelineOutput { report, traces })
}

/// Evaluates stored samples of `base`.
pub fn pipeline(
    base: &Network,
    model: &SurrogateParams,
    samples: &[&Sample],
    case_name: &str,
    set: &str,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, HarnessError> {
    model.check_network(base)?;
    let cases: Vec<EvalCase> = samples.iter().map(|s| EvalCase::from_sample(base, s)).collect();
    evaluate(model, &cases, case_name, set, cfg)
}

/// Evaluates post-outage networks. Each network's truth comes from a
/// Newton-Raphson solve; networks where it fails are skipped and noted.
pub fn contingency(
    model: &SurrogateParams,
    outages: &[(Network, usize)],
    case_name: &str,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, HarnessError> {
    let mut cases = Vec::new();
    let mut skipped = Vec::new();
    for (i, (net, branch)) in outages.iter().enumerate() {
        let nr = newton_raphson(net, &VoltageState::flat_start(net), cfg.tol, NR_DEFAULT_MAX_ITER)?;
        if nr.converged {
            cases.push(EvalCase::from_network(i, net.clone(), nr.state));
        } else {
            skipped.push(*branch);
        }
    }
    let mut out = evaluate(model, &cases, case_name, "n-1", cfg)?;
    if !skipped.is_empty() {
        out.report
            .notes
            .push(format!("skipped outages of branches {skipped:?}: no reference solution"));
    }
    Ok(out)
}

pub fn write_traces<W: Write>(traces: &[CaseTrace], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["case_index", "iteration", "max_mismatch"])?;
    for t in traces {
        for (k, m) in t.max_mismatch.iter().enumerate() {
            wr.write_record([t.case_index.to_string(), k.to_string(), m.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Timing of one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub case: String,
    pub n_buses: usize,
    pub n_pq: usize,
    pub nr: Timing,
    pub fdpf: Timing,
    pub model: Option<Timing>,
    /// Dense factorization plus `k` iterations.
    pub lse: Timing,
    pub lse_per_iteration: IterationTiming,
    /// NR mean time over each method's mean time, measured in this run.
    pub speedup_fdpf: f64,
    pub speedup_model: Option<f64>,
    pub speedup_lse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub k: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
    /// LSE time against PQ-bus count; absent with fewer than 3 systems.
    pub cubic: Option<CubicFit>,
}

/// Times the LSE step alone: dense factorization of `Y_pp` and `k`
/// iterations from flat start.
pub fn lse_timing(net: &Network, k: usize, repeats: usize) -> Result<Timing, HarnessError> {
    let flat = VoltageState::flat_start(net);
    let cfg = RefineConfig {
        backend: Backend::Dense,
        trace: false,
        ..RefineConfig::with_k(k)
    };
    cfg.validate()?;
    let y = crate::network::build_ybus(net);
    let part = crate::network::partition_ybus(&y, &net.kinds()).map_err(|e| RefineError::Partition(e.to_string()))?;
    let mut err = None;
    let t = timing(
        || {
            let r = Refiner::with_partition(net, y.clone(), part.clone(), Backend::Dense)
                .and_then(|r| r.refine(&flat, &cfg));
            if let Err(e) = r {
                err.get_or_insert(e);
            }
        },
        repeats,
    );
    match err {
        Some(e) => Err(e.into()),
        None => Ok(t),
    }
}

pub fn bench_case(
    name: &str,
    net: &Network,
    model: Option<&SurrogateParams>,
    k: usize,
    repeats: usize,
) -> Result<BenchRow, HarnessError> {
    let flat = VoltageState::flat_start(net);
    let mut failure = None;
    let nr = timing(
        || match newton_raphson(net, &flat, 1e-8, NR_DEFAULT_MAX_ITER) {
            Ok(r) if r.converged => {}
            Ok(_) => {
                failure.get_or_insert_with(|| "NR did not converge".to_string());
            }
            Err(e) => {
                failure.get_or_insert_with(|| e.to_string());
            }
        },
        repeats,
    );
    if let Some(f) = failure {
        return Err(HarnessError::Config(format!("{name}: {f}")));
    }
    let fdpf = timing(
        || {
            let _ = fast_decoupled(net, &flat, 1e-8, FDPF_DEFAULT_MAX_ITER);
        },
        repeats,
    );
    let model_t = match model {
        Some(m) => {
            m.check_network(net)?;
            let g = to_graph(net);
            let edges: Arc<[(usize, usize)]> = g.edges.into();
            let mut err = None;
            let t = timing(
                || {
                    let r = BatchInput::from_features(&g.nodes, edges.clone(), &g.edge_attr, &m.scalers)
                        .and_then(|input| m.predict(&input))
                        .and_then(|p| prediction_to_voltage(&p[0], &m.scalers.target, net));
                    if let Err(e) = r {
                        err.get_or_insert(e);
                    }
                },
                repeats,
            );
            if let Some(e) = err {
                return Err(e.into());
            }
            Some(t)
        }
        None => None,
    };
    let lse = lse_timing(net, k, repeats)?;
    let per_iter = per_iteration_timing(
        net,
        &flat,
        &RefineConfig {
            backend: Backend::Dense,
            ..RefineConfig::with_k(k)
        },
        repeats,
    )?;
    let ratio = |t: &Timing| nr.mean_ms / t.mean_ms.max(f64::MIN_POSITIVE);
    Ok(BenchRow {
        case: name.to_string(),
        n_buses: net.n_buses(),
        n_pq: net.kinds().iter().filter(|k| **k == BusKind::Pq).count(),
        speedup_fdpf: ratio(&fdpf),
        speedup_model: model_t.as_ref().map(ratio),
        speedup_lse: ratio(&lse),
        nr,
        fdpf,
        model: model_t,
        lse,
        lse_per_iteration: per_iter,
    })
}

pub fn bench(
    systems: &[(String, Network, Option<SurrogateParams>)],
    k: usize,
    repeats: usize,
) -> Result<BenchReport, HarnessError> {
    let rows = systems
        .iter()
        .map(|(name, net, model)| bench_case(name, net, model.as_ref(), k, repeats))
        .collect::<Result<Vec<_>, _>>()?;
    let cubic = if rows.len() >= 3 {
        let sizes: Vec<f64> = rows.iter().map(|r| r.n_pq as f64).collect();
        let times: Vec<f64> = rows.iter().map(|r| r.lse.mean_ms / 1e3).collect();
        cubic_fit(&sizes, &times).ok()
    } else {
        None
    };
    Ok(BenchReport { k, repeats, rows, cubic })
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let t = |x: &Timing| x.display_ms();
        out.push_str(&format!(
            "{:<10} {:>5} {:>5}  {:>16} {:>16} {:>16} {:>16}  {:>9} {:>9} {:>9}\n",
            "System", "buses", "PQ", "NR (ms)", "FDPF (ms)", "model (ms)", "LSE (ms)", "x FDPF", "x model", "x LSE"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>5} {:>5}  {:>16} {:>16} {:>16} {:>16}  {:>9.1} {:>9} {:>9.1}\n",
                r.case,
                r.n_buses,
                r.n_pq,
                t(&r.nr),
                t(&r.fdpf),
                r.model.as_ref().map_or("-".into(), t),
                t(&r.lse),
                r.speedup_fdpf,
                r.speedup_model.map_or("-".into(), |s| format!("{s:.2}")),
                r.speedup_lse,
            ));
        }
        out.push_str(&format!("\nLSE per-iteration time (ms, k = {}, {} repeats)\n", self.k, self.repeats));
        for r in &self.rows {
            let it = &r.lse_per_iteration;
            let cells: Vec<String> = it
                .mean
                .iter()
                .zip(&it.std)
                .map(|(m, s)| format!("{:.4} ± {:.4}", m * 1e3, s * 1e3))
                .collect();
            out.push_str(&format!(
                "{:<10} {}  delta {:.4}\n",
                r.case,
                cells.join("  "),
                it.max_delta * 1e3
            ));
        }
        if let Some(c) = &self.cubic {
            out.push_str(&format!(
                "\ncubic fit t = c n^3 + d: c = {:.3e} s, d = {:.3e} s, R^2 = {:.4}\n",
                c.c, c.d, c.r2
            ));
        }
        out
    }
}
