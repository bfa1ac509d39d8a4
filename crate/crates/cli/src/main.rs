//! Command-line surface for the decentralized LQR toolkit.
//!
//! Subcommands cover the full pipeline: generating random systems on a
//! delay graph, printing the information graph, simulating any of the
//! controller runtimes, running the identify-synthesize-evaluate pipeline,
//! sweeping it over a sample-count grid, and evaluating the bound
//! calculators.
//!
//! Exit codes: 0 on success, 2 on validation failures, 3 on numerical
//! failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dlqr::controllers::{run_closed_loop, ControllerKind, RunManifest};
use dlqr::experiments::{
    bounds_report_at_eps, records_to_csv, run_pipeline, run_sweep, ExperimentConfig, Instance,
};
use dlqr::lti::{generate_random_system, validate_assumptions, Partition, SystemJson};
use dlqr::sysid::EstimateJson;
use dlqr::topology::{DirectedDelayGraph, GraphSpec};

#[derive(Parser)]
#[command(name = "dlqr", version, about = "Decentralized LQR learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random system honoring a delay graph's sparsity pattern.
    Gen(GenArgs),
    /// Print the information graph of a delay graph as JSON.
    Infograph(InfographArgs),
    /// Run one closed-loop simulation and export trajectory and manifest.
    Simulate(SimulateArgs),
    /// Identify, synthesize and evaluate once; print the record as JSON.
    Pipeline(PipelineArgs),
    /// Sweep the pipeline over a sample-count grid; write CSV and summary.
    Sweep(SweepArgs),
    /// Evaluate the bound right-hand sides over an error grid.
    Bounds(BoundsArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Graph JSON: {"p": int, "edges": [{"from","to","delay"}]} (1-based).
    #[arg(long)]
    graph: PathBuf,
    /// Per-subsystem state dimensions, comma separated (default all 1).
    #[arg(long)]
    state_dims: Option<String>,
    /// Per-subsystem input dimensions, comma separated (default all 1).
    #[arg(long)]
    input_dims: Option<String>,
    #[arg(long, default_value_t = 0.8)]
    rho_target: f64,
    #[arg(long, default_value_t = 2.0)]
    q_scale: f64,
    #[arg(long, default_value_t = 5.0)]
    r_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_w: f64,
    #[arg(long)]
    seed: u64,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InfographArgs {
    #[arg(long)]
    graph: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    system: PathBuf,
    /// optimal | ce-centralized | ce-decentralized | tilde | external-inputs
    #[arg(long)]
    controller: String,
    #[arg(long, default_value_t = 1000)]
    t: usize,
    #[arg(long)]
    seed: u64,
    /// Estimate JSON for the certainty-equivalent controllers; the true
    /// model is used when omitted.
    #[arg(long)]
    estimate: Option<PathBuf>,
    /// Exploration input std for external-inputs runs.
    #[arg(long, default_value_t = 1.0)]
    sigma_u: f64,
    /// Trajectory CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run manifest JSON output path.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    system: PathBuf,
    /// Identification trajectory length.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma_u: f64,
    /// Ridge regularizer; smallest admissible value when omitted.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    t_eval: usize,
    #[arg(long)]
    seed: u64,
    /// Bypass the estimates with the true model.
    #[arg(long, default_value_t = false)]
    use_true_model: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    system: PathBuf,
    /// Grid as start:end:step (inclusive) or comma-separated values.
    #[arg(long, default_value = "20:280:20")]
    n_grid: String,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 2000)]
    t_eval: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma_u: f64,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = false)]
    use_true_model: bool,
    /// Redraw the plant dynamics per trial instead of holding one fixed
    /// draw across all trials.
    #[arg(long, default_value_t = false)]
    per_trial_systems: bool,
    /// Directory for records.csv and summary.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    system: PathBuf,
    /// Comma-separated error levels, or "auto" for a grid scaled by the
    /// admissible threshold.
    #[arg(long, default_value = "auto")]
    eps_grid: String,
    #[arg(long, default_value_t = 1e-9)]
    phi: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

type CmdResult = Result<(), Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::validation(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::validation(format!("cannot parse {what} {}: {e}", path.display())))
}

fn write_output(path: Option<&Path>, content: &str) -> CmdResult {
    match path {
        Some(p) => fs::write(p, content)
            .map_err(|e| Failure::validation(format!("cannot write {}: {e}", p.display()))),
        None => {
            println!("{content}");
            Ok(())
        }
    }
}

fn parse_dims(arg: &Option<String>, p: usize, what: &str) -> Result<Vec<usize>, Failure> {
    match arg {
        None => Ok(vec![1; p]),
        Some(s) => {
            let dims: Result<Vec<usize>, _> = s.split(',').map(|x| x.trim().parse()).collect();
            let dims = dims
                .map_err(|e| Failure::validation(format!("bad {what} list {s:?}: {e}")))?;
            if dims.len() != p {
                return Err(Failure::validation(format!(
                    "{what} has {} entries, expected {p}",
                    dims.len()
                )));
            }
            Ok(dims)
        }
    }
}

fn parse_grid(s: &str) -> Result<Vec<usize>, Failure> {
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Failure::validation(format!("bad grid spec {s:?}")));
        }
        let start: usize = parts[0].trim().parse().map_err(|e| Failure::validation(format!("{e}")))?;
        let end: usize = parts[1].trim().parse().map_err(|e| Failure::validation(format!("{e}")))?;
        let step: usize = parts[2].trim().parse().map_err(|e| Failure::validation(format!("{e}")))?;
        if step == 0 || end < start {
            return Err(Failure::validation(format!("bad grid spec {s:?}")));
        }
        Ok((start..=end).step_by(step).collect())
    } else {
        s.split(',')
            .map(|x| x.trim().parse().map_err(|e| Failure::validation(format!("{e}"))))
            .collect()
    }
}

fn load_graph(path: &Path) -> Result<DirectedDelayGraph, Failure> {
    let spec: GraphSpec = read_json(path, "graph")?;
    let graph = DirectedDelayGraph::from_spec(&spec)
        .map_err(|e| Failure::validation(format!("invalid graph: {e}")))?;
    graph
        .reject_zero_delay_cycles()
        .map_err(|e| Failure::validation(format!("invalid graph: {e}")))?;
    Ok(graph)
}

fn load_instance(path: &Path) -> Result<Instance, Failure> {
    let json: SystemJson = read_json(path, "system")?;
    let (graph, model) = json
        .unpack()
        .map_err(|e| Failure::validation(format!("invalid system: {e}")))?;
    graph
        .reject_zero_delay_cycles()
        .map_err(|e| Failure::validation(format!("invalid graph: {e}")))?;
    let delay = dlqr::topology::compute_delay_matrix(&graph);
    let ig = dlqr::topology::build_information_graph(&delay);
    let report = validate_assumptions(&model, &delay, &ig);
    if !report.all_ok() {
        return Err(Failure::validation(format!(
            "system fails standing assumptions: a1={} a2={} a3={} a4={}",
            report.a1_ok, report.a2_ok, report.a3.ok, report.a4_ok
        )));
    }
    Instance::prepare(graph, model)
        .map_err(|e| Failure::numerical(format!("gain synthesis failed: {e}")))
}

fn cmd_gen(args: &GenArgs) -> CmdResult {
    let graph = load_graph(&args.graph)?;
    let state_dims = parse_dims(&args.state_dims, graph.p(), "state-dims")?;
    let input_dims = parse_dims(&args.input_dims, graph.p(), "input-dims")?;
    let partition = Partition::new(state_dims, input_dims)
        .map_err(|e| Failure::validation(format!("invalid partition: {e}")))?;
    let model = generate_random_system(
        &graph,
        partition,
        args.rho_target,
        args.q_scale,
        args.r_scale,
        args.sigma_w,
        args.seed,
    )
    .map_err(|e| Failure::validation(format!("generation failed: {e}")))?;
    let json = SystemJson::pack(&graph, &model);
    let text = serde_json::to_string_pretty(&json).unwrap();
    write_output(args.out.as_deref(), &text)
}

fn cmd_infograph(args: &InfographArgs) -> CmdResult {
    let graph = load_graph(&args.graph)?;
    let delay = dlqr::topology::compute_delay_matrix(&graph);
    let ig = dlqr::topology::build_information_graph(&delay);
    let text = serde_json::to_string_pretty(&ig.to_json()).unwrap();
    println!("{text}");
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> CmdResult {
    let inst = load_instance(&args.system)?;
    let kind = match args.controller.as_str() {
        "optimal" => ControllerKind::Optimal,
        "ce-centralized" => ControllerKind::CeCentralized,
        "ce-decentralized" => ControllerKind::CeDecentralized,
        "tilde" => ControllerKind::Tilde,
        "external-inputs" => ControllerKind::ExternalInputs { sigma_u: args.sigma_u },
        other => return Err(Failure::validation(format!("unknown controller {other:?}"))),
    };
    let estimate = args
        .estimate
        .as_deref()
        .map(|p| read_json::<EstimateJson>(p, "estimate"))
        .transpose()?;
    let (a_hat, b_hat) = match &estimate {
        Some(e) => (
            dlqr::lti::matrix_from_rows(&e.a_hat),
            dlqr::lti::matrix_from_rows(&e.b_hat),
        ),
        None => (inst.model.a.clone(), inst.model.b.clone()),
    };
    let gains_hat = dlqr::riccati::synthesize_gains(
        &a_hat,
        &b_hat,
        &inst.model.q,
        &inst.model.r,
        &inst.ig,
        &inst.model.partition,
        dlqr::riccati::DEFAULT_TOL,
        dlqr::riccati::Provenance::Estimate,
    )
    .map_err(|e| Failure::numerical(format!("gain synthesis failed: {e}")))?;
    let ctx = dlqr::controllers::LoopContext {
        model: &inst.model,
        delay: &inst.delay,
        ig: &inst.ig,
        views: &inst.views,
        true_gains: Some(&inst.true_gains),
        a_hat: Some(&a_hat),
        b_hat: Some(&b_hat),
        gains_hat: Some(&gains_hat),
    };
    let run = run_closed_loop(&ctx, kind, args.t, args.seed)
        .map_err(|e| Failure::numerical(format!("run failed: {e}")))?;
    let csv = run.trajectory.to_csv(&inst.model.partition);
    write_output(args.out.as_deref(), &csv)?;
    if let Some(path) = &args.manifest {
        let manifest = RunManifest {
            controller: kind,
            horizon: args.t,
            seed: args.seed,
            cost: run.cost,
        };
        let text = serde_json::to_string_pretty(&manifest).unwrap();
        fs::write(path, text)
            .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))?;
    }
    eprintln!("cost {}", run.cost);
    Ok(())
}

fn cmd_pipeline(args: &PipelineArgs) -> CmdResult {
    let inst = load_instance(&args.system)?;
    let record = run_pipeline(
        &inst,
        args.n,
        args.sigma_u,
        args.lambda,
        args.t_eval,
        args.seed,
        args.use_true_model,
    );
    println!("{}", serde_json::to_string_pretty(&record).unwrap());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> CmdResult {
    let inst = load_instance(&args.system)?;
    let config = ExperimentConfig {
        n_grid: parse_grid(&args.n_grid)?,
        trials: args.trials.max(1),
        t_eval: args.t_eval,
        sigma_u: args.sigma_u,
        lambda: args.lambda,
        delta: args.delta,
        base_seed: args.seed,
        use_true_model: args.use_true_model,
        per_trial_systems: args.per_trial_systems,
        rho_target: 0.8,
    };
    let result = run_sweep(&inst, &config);
    fs::create_dir_all(&args.out_dir)
        .map_err(|e| Failure::validation(format!("cannot create {}: {e}", args.out_dir.display())))?;
    let records_path = args.out_dir.join("records.csv");
    fs::write(&records_path, records_to_csv(&result.records))
        .map_err(|e| Failure::validation(format!("cannot write records: {e}")))?;
    let summary_path = args.out_dir.join("summary.json");
    let summary_text = serde_json::to_string_pretty(&result.summary).unwrap();
    fs::write(&summary_path, &summary_text)
        .map_err(|e| Failure::validation(format!("cannot write summary: {e}")))?;
    println!("{summary_text}");
    Ok(())
}

#[derive(Serialize)]
struct BoundsOutput {
    eps: f64,
    report: dlqr::bounds::BoundReport,
}

fn cmd_bounds(args: &BoundsArgs) -> CmdResult {
    let inst = load_instance(&args.system)?;
    let (_, analysis) = inst
        .constants()
        .map_err(|e| Failure::numerical(format!("constants failed: {e}")))?;
    let grid: Vec<f64> = if args.eps_grid == "auto" {
        vec![0.0, analysis.eps_bar / 100.0, analysis.eps_bar / 10.0, analysis.eps_bar]
    } else {
        args.eps_grid
            .split(',')
            .map(|x| {
                x.trim()
                    .parse()
                    .map_err(|e| Failure::validation(format!("bad eps value {x:?}: {e}")))
            })
            .collect::<Result<Vec<f64>, _>>()?
    };
    let mut outputs = Vec::new();
    for eps in grid {
        let report = bounds_report_at_eps(&inst, eps, args.phi)
            .map_err(|e| Failure::numerical(format!("bound evaluation failed: {e}")))?;
        outputs.push(BoundsOutput { eps, report });
    }
    let text = serde_json::to_string_pretty(&outputs).unwrap();
    write_output(args.out.as_deref(), &text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Infograph(args) => cmd_infograph(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Pipeline(args) => cmd_pipeline(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Bounds(args) => cmd_bounds(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
