use std::fmt::Display;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use gridflow::data::{generate, n1_contingencies, Dataset, SplitKind};
use gridflow::harness::{self, method_names, write_traces, PipelineConfig, PipelineOutput};
use gridflow::loss::{write_curves, ScaleMode};
use gridflow::metrics::EvalReport;
use gridflow::model::{fit_scalers, prediction_to_voltage, BatchInput, SurrogateParams};
use gridflow::network::{bundled_case, parse_case, to_graph, Network, BUNDLED_CASES};
use gridflow::refine::{Backend, RefineConfig, Refiner};
use gridflow::solver::{solve, Method, SolveReportJson, VoltageState};
use gridflow::train::{train_loop, LossConfig, OneCycle, TrainConfig, TrainError};

/// Failure carrying its process exit code.
struct Exit {
    code: u8,
    msg: String,
}

fn usage(e: impl Display) -> Exit {
    Exit { code: 1, msg: e.to_string() }
}

fn numerical(e: impl Display) -> Exit {
    Exit { code: 2, msg: e.to_string() }
}

type Res<T = ()> = Result<T, Exit>;

#[derive(Parser)]
#[command(name = "gridflow", version, about = "AC power flow with graph surrogates and linear refinement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve a case with Newton-Raphson or fast decoupled power flow.
    Solve(SolveArgs),
    /// Generate a dataset of solved operating points.
    GenData(GenArgs),
    /// Train a surrogate on a dataset.
    Train(TrainArgs),
    /// Surrogate accuracy on a dataset split, without refinement.
    Eval(EvalArgs),
    /// Refine a voltage state with the partitioned linear iteration.
    Refine(RefineArgs),
    /// Surrogate, refinement and reference solvers on a dataset split.
    Pipeline(PipelineArgs),
    /// Pipeline over random single-branch outages.
    Contingency(ContingencyArgs),
    /// Timing of solvers, surrogate and refinement.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Nr,
    Fdpf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Gnn,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitKind::Train,
            SplitArg::Val => SplitKind::Val,
            SplitArg::Test => SplitKind::Test,
            SplitArg::All => SplitKind::All,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Sparse,
    Dense,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Sparse => Backend::Sparse,
            BackendArg::Dense => Backend::Dense,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    /// Fixed per-case factors for bundled cases, measured otherwise.
    Case,
    /// Measured on the first training batch.
    Auto,
}

#[derive(clap::Args)]
struct SolveArgs {
    /// Bundled case name or path to a case file.
    #[arg(long)]
    case: String,
    #[arg(long, value_enum, default_value = "nr")]
    method: MethodArg,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    max_iter: Option<usize>,
    /// `flat` or a state file (solve report JSON).
    #[arg(long, default_value = "flat")]
    init: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long)]
    case: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0.0)]
    lo: f64,
    #[arg(long, default_value_t = 2.0)]
    hi: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    case: String,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "gnn")]
    arch: ArchArg,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 40)]
    patience: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Peak learning rate of the one-cycle schedule.
    #[arg(long, default_value_t = 8e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "case")]
    scale: ScaleArg,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss curves CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    case: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long = "dataset-split", value_enum, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    out: ReportOut,
}

#[derive(clap::Args)]
struct RefineArgs {
    #[arg(long)]
    case: String,
    /// `flat` or a state file (solve report JSON).
    #[arg(long, default_value = "flat")]
    init: String,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, value_enum, default_value = "sparse")]
    backend: BackendArg,
    #[arg(long, default_value_t = 0.8)]
    clip_lo: f64,
    #[arg(long, default_value_t = 1.2)]
    clip_hi: f64,
    /// Refined state as solve report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-iteration mismatch CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReportOut {
    /// Report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Per-case metrics CSV.
    #[arg(long)]
    cases_csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct PipelineArgs {
    #[arg(long)]
    case: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long = "dataset-split", value_enum, default_value = "test")]
    split: SplitArg,
    /// Refinement iterations; 0 disables refinement.
    #[arg(long = "refine", default_value_t = 3)]
    k: usize,
    #[arg(long, value_enum, default_value = "sparse")]
    backend: BackendArg,
    #[command(flatten)]
    out: ReportOut,
    /// Per-case refinement traces CSV.
    #[arg(long)]
    trace_csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ContingencyArgs {
    #[arg(long)]
    case: String,
    /// Number of outages.
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "refine", default_value_t = 3)]
    refine_k: usize,
    #[command(flatten)]
    out: ReportOut,
    #[arg(long)]
    trace_csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Systems to time; defaults to all bundled cases.
    #[arg(long)]
    case: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    repeats: usize,
    #[arg(long = "refine", default_value_t = 3)]
    k: usize,
    /// Checkpoints to time, each matched to the case it fits.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Bundled case name or case-file path, plus the name used for defaults.
fn load_case(spec: &str) -> Res<(Network, Option<String>)> {
    if BUNDLED_CASES.contains(&spec) {
        return Ok((bundled_case(spec).map_err(usage)?, Some(spec.to_string())));
    }
    let text = std::fs::read_to_string(spec).map_err(|e| usage(format!("cannot read case {spec}: {e}")))?;
    let net = parse_case(&text).map_err(|e| usage(format!("{spec}: {e}")))?;
    let stem = Path::new(spec).file_stem().and_then(|s| s.to_str()).map(str::to_string);
    Ok((net, stem))
}

fn load_state(spec: &str, net: &Network) -> Res<VoltageState> {
    if spec == "flat" {
        return Ok(VoltageState::flat_start(net));
    }
    let text = std::fs::read_to_string(spec).map_err(|e| usage(format!("cannot read state {spec}: {e}")))?;
    let s: SolveReportJson = serde_json::from_str(&text).map_err(|e| usage(format!("{spec}: {e}")))?;
    if s.vm.len() != net.n_buses() || s.va_deg.len() != net.n_buses() {
        return Err(usage(format!(
            "{spec}: state has {} buses, network has {}",
            s.vm.len(),
            net.n_buses()
        )));
    }
    Ok(VoltageState::new(s.vm, s.va_deg.iter().map(|d| d.to_radians()).collect()))
}

fn load_dataset(path: &Path, net: &Network) -> Res<Dataset> {
    let f = File::open(path).map_err(|e| usage(format!("cannot open dataset {}: {e}", path.display())))?;
    let ds = Dataset::read_jsonl(BufReader::new(f)).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if ds.fingerprint != net.fingerprint() {
        return Err(usage(format!("dataset {} was generated for a different network", path.display())));
    }
    Ok(ds)
}

fn load_checkpoint(path: &Path) -> Res<SurrogateParams> {
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    SurrogateParams::from_checkpoint_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| usage(format!("cannot create {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Res {
    std::fs::write(path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

/// Writes to stdout; a closed pipe is not an error for a report printer.
fn stdout(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn emit_json(out: Option<&Path>, text: &str) -> Res {
    match out {
        Some(p) => write_text(p, text),
        None => {
            stdout(&format!("{text}\n"));
            Ok(())
        }
    }
}

fn emit_report(report: &EvalReport, out: &ReportOut) -> Res {
    stdout(&report.to_table());
    if let Some(p) = &out.json {
        write_text(p, &report.to_json())?;
    }
    if let Some(p) = &out.cases_csv {
        report.write_case_csv(create(p)?).map_err(usage)?;
    }
    Ok(())
}

fn emit_traces(out: &PipelineOutput, path: Option<&Path>) -> Res {
    if let Some(p) = path {
        write_traces(&out.traces, create(p)?).map_err(usage)?;
    }
    Ok(())
}

fn cmd_solve(a: SolveArgs) -> Res {
    let (net, _) = load_case(&a.case)?;
    let init = load_state(&a.init, &net)?;
    let method = match a.method {
        MethodArg::Nr => Method::Nr,
        MethodArg::Fdpf => Method::Fdpf,
    };
    let report = solve(&net, method, &init, a.tol, a.max_iter).map_err(usage)?;
    let json = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    emit_json(a.out.as_deref(), &json)?;
    if report.converged {
        Ok(())
    } else {
        Err(numerical(format!(
            "did not converge after {} iterations (max mismatch {:.3e})",
            report.iterations, report.max_mismatch
        )))
    }
}

fn cmd_gen(a: GenArgs) -> Res {
    let (net, name) = load_case(&a.case)?;
    let mut ds = generate(&net, a.n, a.lo, a.hi, a.seed).map_err(|e| match e {
        gridflow::data::DataError::Budget { .. } => numerical(e),
        _ => usage(e),
    })?;
    ds.config.case = name;
    if ds.discarded > 0 {
        log::warn!("{} draws did not converge and were redrawn", ds.discarded);
    }
    let mut w = create(&a.out)?;
    ds.write_jsonl(&mut w).map_err(usage)?;
    w.flush().map_err(usage)?;
    eprintln!(
        "wrote {} samples ({} redrawn) to {}",
        ds.samples.len(),
        ds.discarded,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Res {
    let (net, name) = load_case(&a.case)?;
    let ds = load_dataset(&a.dataset, &net)?;
    let train = ds.split(SplitKind::Train);
    let val = ds.split(SplitKind::Val);
    if train.is_empty() || val.is_empty() {
        return Err(usage("dataset too small for a train/validation split"));
    }
    let scalers = fit_scalers(&train).map_err(usage)?;
    let model = match a.arch {
        ArchArg::Gnn => SurrogateParams::new_gnn(&net, scalers, a.seed),
        ArchArg::Mlp => SurrogateParams::new_mlp(&net, scalers, a.seed),
    };
    let mut loss = LossConfig::for_case(name.as_deref());
    if let ScaleArg::Auto = a.scale {
        loss.scale = ScaleMode::Auto;
    }
    let cfg = TrainConfig {
        max_epochs: a.epochs,
        patience: a.patience,
        batch_size: a.batch_size,
        schedule: OneCycle {
            peak_lr: a.lr,
            ..OneCycle::default()
        },
        seed: a.seed,
        ..TrainConfig::default()
    };
    eprintln!("training {} parameters on {} samples", model.n_learnable(), train.len());
    let out = train_loop(model, &net, &train, &val, &loss, &cfg).map_err(|e| match e {
        TrainError::NonFinite { .. } => numerical(e),
        _ => usage(e),
    })?;
    write_text(&a.out, &out.best.to_checkpoint_json())?;
    if let Some(p) = &a.curves {
        write_curves(&out.curve_rows(), create(p)?).map_err(usage)?;
    }
    let best = out
        .history
        .iter()
        .find(|r| r.epoch == out.best_epoch)
        .expect("best epoch is in the history");
    stdout(&format!(
        "epochs {}  best epoch {}  val l_total {:.6e}  val l_data {:.6e}\n",
        out.history.len(),
        out.best_epoch,
        best.val.l_total,
        best.val.l_data
    ));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Res {
    let (net, name) = load_case(&a.case)?;
    let model = load_checkpoint(&a.checkpoint)?;
    model.check_network(&net).map_err(usage)?;
    let ds = load_dataset(&a.dataset, &net)?;
    let samples = ds.split(a.split.into());
    let edges: Arc<[(usize, usize)]> = to_graph(&net).edges.into();
    let (raw_name, _) = method_names(model.arch);
    let start = std::time::Instant::now();
    let input = BatchInput::from_samples(&samples, edges, &model.scalers).map_err(usage)?;
    let preds = model.predict(&input).map_err(usage)?;
    let per_sample = start.elapsed().as_secs_f64() / samples.len().max(1) as f64;
    let mut per_case = Vec::with_capacity(samples.len());
    for (p, s) in preds.iter().zip(&samples) {
        let snet = s.network(&net);
        let v = prediction_to_voltage(p, &model.scalers.target, &snet).map_err(usage)?;
        per_case.push(gridflow::metrics::CaseMetrics::measure(
            s.index,
            raw_name,
            &snet,
            &v,
            &s.state(),
            per_sample,
            true,
        ));
    }
    let report = EvalReport::from_cases(
        name.as_deref().unwrap_or("case"),
        split_name(a.split),
        None,
        per_case,
    );
    emit_report(&report, &a.out)
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

fn cmd_refine(a: RefineArgs) -> Res {
    let (net, _) = load_case(&a.case)?;
    let init = load_state(&a.init, &net)?;
    let cfg = RefineConfig {
        k_max: a.k,
        clip_lo: a.clip_lo,
        clip_hi: a.clip_hi,
        trace: true,
        backend: a.backend.into(),
    };
    cfg.validate().map_err(usage)?;
    let start = std::time::Instant::now();
    let refiner = Refiner::new(&net, cfg.backend).map_err(numerical)?;
    let (state, trace) = refiner.refine(&init, &cfg).map_err(numerical)?;
    let elapsed = start.elapsed().as_secs_f64();
    let mm = trace.max_mismatch();
    let json = SolveReportJson {
        converged: true,
        iterations: a.k,
        max_mismatch: *mm.last().expect("trace holds the input row"),
        wall_time_ms: elapsed * 1e3,
        vm: state.vm.clone(),
        va_deg: state.va.iter().map(|r| r.to_degrees()).collect(),
        diagnostic: None,
    };
    if let Some(p) = &a.trace {
        trace.write_csv(create(p)?).map_err(usage)?;
    }
    match &a.out {
        Some(p) => write_text(p, &serde_json::to_string_pretty(&json).expect("state serializes"))?,
        None => stdout(&trace.to_csv_string()),
    }
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Res {
    let (net, name) = load_case(&a.case)?;
    let model = load_checkpoint(&a.checkpoint)?;
    model.check_network(&net).map_err(usage)?;
    let ds = load_dataset(&a.dataset, &net)?;
    let samples = ds.split(a.split.into());
    let cfg = PipelineConfig {
        k: a.k,
        backend: a.backend.into(),
        ..PipelineConfig::default()
    };
    let out = harness::pipeline(
        &net,
        &model,
        &samples,
        name.as_deref().unwrap_or("case"),
        split_name(a.split),
        &cfg,
    )
    .map_err(usage)?;
    emit_report(&out.report, &a.out)?;
    emit_traces(&out, a.trace_csv.as_deref())
}

fn cmd_contingency(a: ContingencyArgs) -> Res {
    let (net, name) = load_case(&a.case)?;
    let model = load_checkpoint(&a.checkpoint)?;
    model.check_network(&net).map_err(usage)?;
    let outages = n1_contingencies(&net, a.k, a.seed).map_err(usage)?;
    let cfg = PipelineConfig {
        k: a.refine_k,
        ..PipelineConfig::default()
    };
    let out = harness::contingency(&model, &outages, name.as_deref().unwrap_or("case"), &cfg).map_err(usage)?;
    emit_report(&out.report, &a.out)?;
    emit_traces(&out, a.trace_csv.as_deref())
}

fn cmd_bench(a: BenchArgs) -> Res {
    let specs: Vec<String> = if a.case.is_empty() {
        BUNDLED_CASES.iter().map(|s| s.to_string()).collect()
    } else {
        a.case.clone()
    };
    let mut models: Vec<SurrogateParams> = a
        .checkpoint
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Res<_>>()?;
    let mut systems = Vec::new();
    for spec in &specs {
        let (net, name) = load_case(spec)?;
        let model = models
            .iter()
            .position(|m| m.check_network(&net).is_ok())
            .map(|i| models.swap_remove(i));
        systems.push((name.unwrap_or_else(|| spec.clone()), net, model));
    }
    if !models.is_empty() {
        return Err(usage(format!("{} checkpoint(s) match none of the cases", models.len())));
    }
    let report = harness::bench(&systems, a.k, a.repeats).map_err(usage)?;
    stdout(&report.to_table());
    if let Some(p) = &a.json {
        write_text(p, &report.to_json())?;
    }
    Ok(())
}

fn configure_threads() -> Res {
    let Ok(v) = std::env::var("GRIDFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| usage(format!("GRIDFLOW_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(usage)
}

fn run(cli: Cli) -> Res {
    configure_threads()?;
    match cli.cmd {
        Cmd::Solve(a) => cmd_solve(a),
        Cmd::GenData(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Refine(a) => cmd_refine(a),
        Cmd::Pipeline(a) => cmd_pipeline(a),
        Cmd::Contingency(a) => cmd_contingency(a),
        Cmd::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
