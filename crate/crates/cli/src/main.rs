//! `hypertile` command-line driver.
//!
//! Every subcommand reads JSON documents, writes one JSON (or header/CSV)
//! result and exits with 0 on success, 2 on configuration or schema errors,
//! 3 when the problem is infeasible and 1 otherwise. Failures print an error
//! document to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hypertile::artifacts::{dump_csv, dump_header, load_csv, load_json, to_json, Validate};
use hypertile::exec::{run_reference, run_tiled, ExecutionDesign, TileStats};
use hypertile::explorer::{
    best_design, evolve, BestDesign, DesignCaps, EvolveParams, RewardParams, SearchResult,
    SearchSetup, SearchSpace, SurrogateAccuracy,
};
use hypertile::intermittent::{
    make_fault_trace, simulate_with, CostParams, FaultTrace, PowerParams, SimOptions, SimResult,
};
use hypertile::model::{NetworkSpec, QTensor};
use hypertile::perfmodel::predict;
use hypertile::rng::SplitMix64;
use hypertile::scheduler::{
    schedulable_edf, simulate_schedule, SchedVerdict, ScheduleTrace, TaskSet,
};
use hypertile::synth::{random_input, worked_example, worked_input};
use hypertile::{Error, Infeasibility};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Relative config paths resolve against this directory when it is set.
const CONFIG_DIR_ENV: &str = "HYPERTILE_CONFIG_DIR";

#[derive(Parser)]
#[command(
    name = "hypertile",
    version,
    about = "Tiled inference, intermittent execution and NAS workbench"
)]
struct Cli {
    /// Write the result here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every random draw (inputs, fault traces, search).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run reference and tiled inference and compare them.
    Infer(InferArgs),
    /// Run inference under intermittent power, optionally with faults.
    Simulate(SimulateArgs),
    /// Predict per-cycle energy and latency without running the network.
    Predict(PlatformArgs),
    /// Find the lowest-latency execution design for a network.
    Explore(ExploreArgs),
    /// Evolutionary architecture and design search.
    Nas(NasArgs),
    /// EDF schedulability verdict, optionally with a processor simulation.
    Sched(SchedArgs),
    /// Export a network as a C header, CSV weights or JSON documents.
    Dump(DumpArgs),
    /// Write the worked-example configs to a directory.
    Example(ExampleArgs),
}

#[derive(Args)]
struct NetArgs {
    /// Network JSON.
    #[arg(long)]
    net: PathBuf,
    /// Replace the network's weights with a CSV set from this directory.
    #[arg(long)]
    weights_csv: Option<PathBuf>,
    /// Input tensor JSON; a seeded random input when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Execution design JSON.
    #[arg(long)]
    design: PathBuf,
}

#[derive(Args)]
struct PlatformArgs {
    /// Network JSON.
    #[arg(long)]
    net: PathBuf,
    /// Execution design JSON.
    #[arg(long)]
    design: PathBuf,
    /// Power parameters JSON.
    #[arg(long)]
    power: PathBuf,
    /// Cost coefficients JSON.
    #[arg(long)]
    costs: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Execution design JSON.
    #[arg(long)]
    design: PathBuf,
    /// Power parameters JSON.
    #[arg(long)]
    power: PathBuf,
    /// Cost coefficients JSON.
    #[arg(long)]
    costs: PathBuf,
    /// Fault trace JSON (`{"ticks": [...]}`).
    #[arg(long, conflicts_with = "fault_seed")]
    faults: Option<PathBuf>,
    /// Generate a fault trace from this seed.
    #[arg(long)]
    fault_seed: Option<u64>,
    /// Mean ticks between generated faults.
    #[arg(long, default_value_t = 200)]
    fault_mean: u64,
    /// Generate faults up to this tick.
    #[arg(long, default_value_t = 100_000)]
    fault_horizon: u64,
    /// Include the event log in the result.
    #[arg(long)]
    events: bool,
}

#[derive(Args)]
struct ExploreArgs {
    /// Network JSON.
    #[arg(long)]
    net: PathBuf,
    /// Power parameters JSON.
    #[arg(long)]
    power: PathBuf,
    /// Cost coefficients JSON.
    #[arg(long)]
    costs: PathBuf,
    /// Design caps JSON; tiles 1..=8 and S 1..=16 by default.
    #[arg(long)]
    caps: Option<PathBuf>,
    /// Latency requirement in ticks.
    #[arg(long, default_value_t = u64::MAX)]
    l_req: u64,
}

#[derive(Args)]
struct NasArgs {
    /// Search space JSON; the built-in default space when omitted.
    #[arg(long)]
    space: Option<PathBuf>,
    /// Power parameters JSON.
    #[arg(long)]
    power: PathBuf,
    /// Cost coefficients JSON.
    #[arg(long)]
    costs: PathBuf,
    /// Design caps JSON; the shared-template NAS caps by default.
    #[arg(long)]
    caps: Option<PathBuf>,
    /// Latency requirement in ticks.
    #[arg(long)]
    l_req: u64,
    #[arg(long, default_value_t = 16)]
    population: usize,
    #[arg(long, default_value_t = 8)]
    generations: usize,
    #[arg(long, default_value_t = 0.1)]
    mutation_rate: f64,
    /// +1 adds latency / L_req to the reward instead of subtracting it.
    #[arg(long, default_value_t = -1, allow_hyphen_values = true)]
    latency_sign: i8,
    /// Leave only the best solution, dropping per-generation history.
    #[arg(long)]
    brief: bool,
}

#[derive(Args)]
struct SchedArgs {
    /// Task set JSON.
    #[arg(long)]
    taskset: PathBuf,
    /// Power parameters JSON.
    #[arg(long)]
    power: PathBuf,
    /// Cost coefficients JSON.
    #[arg(long)]
    costs: PathBuf,
    /// Also run the task set on the simulated processor.
    #[arg(long)]
    simulate: bool,
    /// Simulation horizon; hyperperiod plus offsets and deadlines by default.
    #[arg(long)]
    horizon: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DumpFormat {
    Header,
    Csv,
    Json,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long, value_enum)]
    format: DumpFormat,
    /// Search result JSON whose best solution is exported.
    #[arg(long, conflicts_with_all = ["net", "design"])]
    solution: Option<PathBuf>,
    /// Network JSON (with --design).
    #[arg(long, requires = "design")]
    net: Option<PathBuf>,
    /// Execution design JSON (with --net).
    #[arg(long, requires = "net")]
    design: Option<PathBuf>,
}

#[derive(Args)]
struct ExampleArgs {
    /// Directory to write net, design, power, costs and input JSON into.
    #[arg(long)]
    out_dir: PathBuf,
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    detail: Option<serde_json::Value>,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "config",
            message: message.into(),
            detail: None,
        }
    }

    fn infeasible(inf: Infeasibility) -> Self {
        Self {
            code: 3,
            kind: "infeasible",
            message: inf.to_string(),
            detail: serde_json::to_value(&inf).ok(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Infeasible(_) | Error::Supply(_) => 3,
            Error::Unrecoverable(_) | Error::Io(_) => 1,
            _ => 2,
        };
        let detail = match &e {
            Error::Infeasible(inf) => serde_json::to_value(inf).ok(),
            Error::Json { path, .. } => Some(serde_json::json!({ "path": path })),
            Error::Parse { file, line, .. } => {
                Some(serde_json::json!({ "file": file, "line": line }))
            }
            Error::Network(v) => serde_json::to_value(v).ok(),
            _ => None,
        };
        Self {
            code,
            kind: e.kind(),
            message: e.to_string(),
            detail,
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(CONFIG_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn load<T: DeserializeOwned + Validate>(path: &Path) -> CliResult<T> {
    let path = resolve(path);
    if !path.is_file() {
        return Err(Failure::config(format!("{}: no such file", path.display())));
    }
    load_json(&path).map_err(|e| match e {
        Error::Io(io) => Failure::config(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn emit_text(out: Option<&Path>, text: &str) -> CliResult<()> {
    let res = match out {
        Some(p) => std::fs::write(p, text),
        None => std::io::stdout().lock().write_all(text.as_bytes()),
    };
    res.map_err(|e| Failure::from(Error::Io(e)))
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> CliResult<()> {
    emit_text(out, &to_json(value)?)
}

struct LoadedNet {
    net: NetworkSpec,
    input: QTensor,
}

fn load_net(args: &NetArgs, seed: u64) -> CliResult<LoadedNet> {
    let mut net: NetworkSpec = load(&args.net)?;
    if let Some(dir) = &args.weights_csv {
        let dir = resolve(dir);
        if !dir.is_dir() {
            return Err(Failure::config(format!(
                "{}: not a directory",
                dir.display()
            )));
        }
        net = load_csv(&dir)?.apply(&net)?;
    }
    let input = match &args.input {
        Some(p) => load(p)?,
        None => random_input(&mut SplitMix64::new(seed), &net),
    };
    Ok(LoadedNet { net, input })
}

#[derive(Serialize)]
struct InferReport {
    #[serde(rename = "match")]
    matches: bool,
    reference: QTensor,
    tiled: QTensor,
    argmax: usize,
    stats: TileStats,
}

fn cmd_infer(cli: &Cli, args: &InferArgs) -> CliResult<()> {
    let LoadedNet { net, input } = load_net(&args.net, cli.seed)?;
    let design: ExecutionDesign = load(&args.design)?;
    let reference = run_reference(&net, &input)?;
    let (tiled, stats) = run_tiled(&net, &input, &design)?;
    let report = InferReport {
        matches: reference == tiled,
        argmax: reference.argmax(),
        reference,
        tiled,
        stats,
    };
    emit(cli.out.as_deref(), &report)?;
    if !report.matches {
        return Err(Failure {
            code: 1,
            kind: "mismatch",
            message: "tiled output differs from the reference".into(),
            detail: None,
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulateReport {
    #[serde(flatten)]
    result: SimResult,
    reference_match: bool,
    faults: FaultTrace,
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> CliResult<()> {
    let LoadedNet { net, input } = load_net(&args.net, cli.seed)?;
    let design: ExecutionDesign = load(&args.design)?;
    let power: PowerParams = load(&args.power)?;
    let costs: CostParams = load(&args.costs)?;
    let faults = match (&args.faults, args.fault_seed) {
        (Some(p), _) => load(p)?,
        (None, Some(s)) => make_fault_trace(s, args.fault_mean, args.fault_horizon)?,
        (None, None) => FaultTrace::none(),
    };
    let options = SimOptions {
        record_events: args.events,
        keep_image: false,
    };
    let result = simulate_with(&net, &input, &design, &power, &costs, &faults, options)?;
    let reference = run_reference(&net, &input)?;
    let report = SimulateReport {
        reference_match: result.output == reference,
        result,
        faults,
    };
    emit(cli.out.as_deref(), &report)
}

fn cmd_predict(cli: &Cli, args: &PlatformArgs) -> CliResult<()> {
    let net: NetworkSpec = load(&args.net)?;
    let design: ExecutionDesign = load(&args.design)?;
    let power: PowerParams = load(&args.power)?;
    let costs: CostParams = load(&args.costs)?;
    emit(cli.out.as_deref(), &predict(&net, &design, &power, &costs)?)
}

fn cmd_explore(cli: &Cli, args: &ExploreArgs) -> CliResult<()> {
    let net: NetworkSpec = load(&args.net)?;
    let power: PowerParams = load(&args.power)?;
    let costs: CostParams = load(&args.costs)?;
    let caps: DesignCaps = match &args.caps {
        Some(p) => load(p)?,
        None => DesignCaps::default(),
    };
    match best_design(&net, &power, &costs, args.l_req, &caps)? {
        Some(best) => emit(cli.out.as_deref(), &best),
        None => {
            // say how far off the requirement the best design is
            let unconstrained: Option<BestDesign> = if args.l_req == u64::MAX {
                None
            } else {
                best_design(&net, &power, &costs, u64::MAX, &caps)?
            };
            Err(Failure::infeasible(Infeasibility::Latency {
                best: unconstrained.map(|b| b.estimate.latency_ticks),
                required: args.l_req,
            }))
        }
    }
}

#[derive(Serialize)]
struct BriefResult {
    best: Option<hypertile::explorer::Solution>,
    final_ema: Option<f64>,
    evaluated: u64,
}

fn cmd_nas(cli: &Cli, args: &NasArgs) -> CliResult<()> {
    let space: SearchSpace = match &args.space {
        Some(p) => load(p)?,
        None => SearchSpace::default(),
    };
    let power: PowerParams = load(&args.power)?;
    let costs: CostParams = load(&args.costs)?;
    let caps: DesignCaps = match &args.caps {
        Some(p) => load(p)?,
        None => DesignCaps::nas_default(),
    };
    let reward = RewardParams {
        latency_sign: args.latency_sign,
        ..RewardParams::new(args.l_req)
    };
    let params = EvolveParams {
        seed: cli.seed,
        population: args.population,
        generations: args.generations,
        mutation_rate: args.mutation_rate,
        ..EvolveParams::default()
    };
    let setup = SearchSetup {
        space: &space,
        power: &power,
        costs: &costs,
        reward: &reward,
        caps: &caps,
        evaluator: &SurrogateAccuracy::default(),
    };
    let result: SearchResult = evolve(&setup, &params)?;
    let found = result.best.is_some();
    if args.brief {
        emit(
            cli.out.as_deref(),
            &BriefResult {
                best: result.best,
                final_ema: result.final_ema,
                evaluated: result.evaluated,
            },
        )?;
    } else {
        emit(cli.out.as_deref(), &result)?;
    }
    if !found {
        return Err(Failure::infeasible(Infeasibility::Latency {
            best: None,
            required: args.l_req,
        }));
    }
    Ok(())
}

#[derive(Serialize)]
struct SchedReport {
    verdict: SchedVerdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<ScheduleTrace>,
}

fn cmd_sched(cli: &Cli, args: &SchedArgs) -> CliResult<()> {
    let taskset: TaskSet = load(&args.taskset)?;
    let power: PowerParams = load(&args.power)?;
    let costs: CostParams = load(&args.costs)?;
    let verdict = schedulable_edf(&taskset, &power, &costs)?;
    let trace = if args.simulate {
        Some(simulate_schedule(&taskset, &power, &costs, args.horizon)?)
    } else {
        None
    };
    emit(cli.out.as_deref(), &SchedReport { verdict, trace })
}

/// Only the fields `dump` needs from a search result.
#[derive(serde::Deserialize)]
struct SolutionDoc {
    best: Option<SolutionParts>,
}

#[derive(serde::Deserialize)]
struct SolutionParts {
    network: NetworkSpec,
    design: ExecutionDesign,
}

impl Validate for SolutionDoc {
    fn validate_doc(&self) -> hypertile::Result<()> {
        if let Some(s) = &self.best {
            s.network.validate()?;
            s.design.check(&s.network)?;
        }
        Ok(())
    }
}

fn cmd_dump(cli: &Cli, args: &DumpArgs) -> CliResult<()> {
    let (net, design) = match (&args.solution, &args.net, &args.design) {
        (Some(p), _, _) => {
            let doc: SolutionDoc = load(p)?;
            let s = doc.best.ok_or_else(|| {
                Failure::infeasible(Infeasibility::Latency {
                    best: None,
                    required: 0,
                })
            })?;
            (s.network, s.design)
        }
        (None, Some(n), Some(d)) => {
            let net: NetworkSpec = load(n)?;
            let design: ExecutionDesign = load(d)?;
            design.check(&net)?;
            (net, design)
        }
        _ => return Err(Failure::config("pass --solution, or --net with --design")),
    };
    let out_dir = || {
        cli.out
            .clone()
            .ok_or_else(|| Failure::config("--out <DIR> is required for this format"))
    };
    match args.format {
        DumpFormat::Header => emit_text(cli.out.as_deref(), &dump_header(&net, &design)?),
        DumpFormat::Csv => {
            let dir = out_dir()?;
            std::fs::create_dir_all(&dir).map_err(|e| Failure::from(Error::Io(e)))?;
            dump_csv(&net, &dir)?;
            Ok(())
        }
        DumpFormat::Json => {
            let dir = out_dir()?;
            std::fs::create_dir_all(&dir).map_err(|e| Failure::from(Error::Io(e)))?;
            emit(Some(&dir.join("net.json")), &net)?;
            emit(Some(&dir.join("design.json")), &design)
        }
    }
}

fn cmd_example(args: &ExampleArgs) -> CliResult<()> {
    let (net, design, power, costs) = worked_example();
    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io(e)))?;
    emit(Some(&dir.join("net.json")), &net)?;
    emit(Some(&dir.join("design.json")), &design)?;
    emit(Some(&dir.join("power.json")), &power)?;
    emit(Some(&dir.join("costs.json")), &costs)?;
    emit(Some(&dir.join("input.json")), &worked_input())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.cmd {
        Command::Infer(a) => cmd_infer(cli, a),
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Predict(a) => cmd_predict(cli, a),
        Command::Explore(a) => cmd_explore(cli, a),
        Command::Nas(a) => cmd_nas(cli, a),
        Command::Sched(a) => cmd_sched(cli, a),
        Command::Dump(a) => cmd_dump(cli, a),
        Command::Example(a) => cmd_example(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let doc = serde_json::json!({
                "error": {
                    "kind": f.kind,
                    "message": f.message,
                    "exit_code": f.code,
                    "detail": f.detail,
                }
            });
            eprintln!("{doc}");
            ExitCode::from(f.code)
        }
    }
}
