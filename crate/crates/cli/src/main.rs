use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rollcar::data::{load_dataset, write_dataset, ColumnSchema};
use rollcar::diagnostics::{
    compare_fits, summarize, summarize_quantity, write_comparison, write_quantities_csv, FitSummary,
};
use rollcar::graph::ClusterUnit;
use rollcar::models::{Closeness, Hyperparameters, ModelSpec};
use rollcar::sampler::{graph_for, read_chain_csv, run_chains, McmcConfig};
use rollcar::simstudy::{desk_scale_mcmc, run_scenario, simulate_replicate, SimScenario, PRESET_NAMES};
use rollcar::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "rollcar", version, about = "Bayesian growth models with CAR session effects for rolling-admission groups")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic dataset from a scenario.
    Simulate(SimulateArgs),
    /// Fit a model to a dataset.
    Fit(FitArgs),
    /// Recompute convergence diagnostics from saved draws.
    Diagnose(DiagnoseArgs),
    /// Tabulate fit summaries sorted by posterior mean deviance.
    Compare(CompareArgs),
    /// Run the replicated model-comparison study for a scenario.
    Replicate(ReplicateArgs),
}

#[derive(Args, Clone, Default)]
struct McmcArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
}

impl McmcArgs {
    fn apply(&self, mut cfg: McmcConfig) -> McmcConfig {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.chains {
            cfg.n_chains = v;
        }
        if let Some(v) = self.iters {
            cfg.n_iter = v;
        }
        if let Some(v) = self.burnin {
            cfg.burn_in = v;
        }
        if let Some(v) = self.thin {
            cfg.thin = v;
        }
        cfg
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario preset a-f.
    #[arg(long)]
    preset: Option<String>,
    /// Scenario JSON file (instead of a preset).
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Replicate index within the scenario's seed family.
    #[arg(long, default_value_t = 0)]
    replicate: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// lgm | hlm | car | pmm | hlm+pmm | car+pmm
    #[arg(long)]
    model: Option<String>,
    /// Closeness type for CAR: 1 (adjacency) or 2 (shared attendees).
    #[arg(long)]
    closeness: Option<u8>,
    /// session | module
    #[arg(long)]
    unit: Option<String>,
    /// choice7 | choice8
    #[arg(long)]
    hyper: Option<String>,
    #[command(flatten)]
    mcmc: McmcArgs,
    /// JSON run configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Directory holding chain_<k>.csv files.
    #[arg(long)]
    draws: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Fit summary JSON files.
    #[arg(required = true)]
    summaries: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplicateArgs {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Override the scenario's replicate count.
    #[arg(long)]
    replicates: Option<usize>,
    #[command(flatten)]
    mcmc: McmcArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// JSON run configuration. Every field is optional.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    spec: Option<ModelSpec>,
    #[serde(default)]
    mcmc: Option<McmcConfig>,
    #[serde(default)]
    scenario: Option<SimScenario>,
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a T,
    outputs: Vec<String>,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Csv(_) => EXIT_IO,
        Error::ChainAbort { .. } | Error::Initialization(_) | Error::Diagnostic(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn hash_of<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn write_manifest<T: Serialize>(dir: &Path, command: &str, seed: u64, config: &T, outputs: Vec<String>) -> CmdResult {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_hash: hash_of(config),
        config,
        outputs,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure::Lib(Error::Io { path: path.to_path_buf(), source: e })
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn make_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn read_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).or_else(|e| usage(format!("{}: {e}", path.display())))
}

fn load_scenario(preset: Option<&str>, file: Option<&Path>) -> Result<SimScenario, Failure> {
    match (preset, file) {
        (Some(_), Some(_)) => usage("give either --preset or --scenario, not both"),
        (Some(p), None) => SimScenario::preset(p).map_or_else(
            || usage(format!("unknown preset `{p}`; available presets: {}", PRESET_NAMES.join(", "))),
            Ok,
        ),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let s: SimScenario = serde_json::from_str(&text).or_else(|e| usage(format!("{}: {e}", path.display())))?;
            Ok(s)
        }
        (None, None) => usage(format!("a scenario is required: --preset {{{}}} or --scenario FILE", PRESET_NAMES.join("|"))),
    }
}

fn cmd_simulate(args: &SimulateArgs) -> CmdResult {
    let scenario = load_scenario(args.preset.as_deref(), args.scenario.as_deref())?;
    scenario.validate()?;
    let (dataset, report) = simulate_replicate(&scenario, args.seed, args.replicate)?;
    make_dir(&args.out)?;
    write_dataset(&dataset, args.out.join("data.csv"))?;
    let (b0s, b1s) = scenario.truth.starred();
    let truth = serde_json::json!({
        "scenario": scenario.name,
        "generator": scenario.generator,
        "rho": scenario.rho,
        "seed": args.seed,
        "replicate": args.replicate,
        "beta0": scenario.truth.beta0,
        "beta1": scenario.truth.beta1,
        "beta0_star": b0s,
        "beta1_star": b1s,
        "truth": scenario.truth,
        "attendance": scenario.attendance,
        "mask_every_other": scenario.mask_every_other,
        "realized": report,
        "data_hash": dataset.content_hash(),
    });
    let path = args.out.join("truth.json");
    fs::write(&path, serde_json::to_string_pretty(&truth).map_err(Error::from)?).map_err(|e| io_error(&path, e))?;
    let config = serde_json::json!({ "scenario": scenario, "seed": args.seed, "replicate": args.replicate });
    write_manifest(&args.out, "simulate", args.seed, &config, vec!["data.csv".into(), "truth.json".into()])
}

fn resolve_spec(args: &FitArgs, base: Option<ModelSpec>) -> Result<ModelSpec, Failure> {
    let mut spec = match (&args.model, base) {
        (Some(m), base) => {
            let mut s: ModelSpec = m.parse()?;
            if let Some(b) = base {
                s.hyper = b.hyper;
                s.restrict = b.restrict;
                if s.has_session_effects() {
                    s.closeness = b.closeness;
                    s.unit = b.unit;
                }
            }
            s
        }
        (None, Some(b)) => b,
        (None, None) => return usage("a model is required: --model or a config file with `spec`"),
    };
    if let Some(c) = args.closeness {
        spec.closeness = Some(match c {
            1 => Closeness::Type1,
            2 => Closeness::Type2,
            _ => return usage(format!("--closeness must be 1 or 2, got {c}")),
        });
    }
    if let Some(u) = &args.unit {
        spec.unit = Some(match u.as_str() {
            "session" => ClusterUnit::Session,
            "module" => ClusterUnit::Module,
            _ => return usage(format!("--unit must be session or module, got `{u}`")),
        });
    }
    if let Some(h) = &args.hyper {
        spec.hyper = Hyperparameters::preset(h).map_or_else(|| usage(format!("unknown hyperparameter preset `{h}`")), Ok)?;
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_fit(args: &FitArgs) -> CmdResult {
    let config = read_config(args.config.as_deref())?;
    let spec = resolve_spec(args, config.spec)?;
    let mcmc = args.mcmc.apply(config.mcmc.unwrap_or_default());
    mcmc.validate()?;
    if !(args.level > 0.0 && args.level < 1.0) {
        return usage("--level must lie in (0, 1)");
    }
    let dataset = load_dataset(&args.data, &ColumnSchema::default())?;
    let dataset = if spec.pattern_mixture && !dataset.has_patterns() {
        dataset.derive_pattern_indicators(rollcar::simstudy::SHORT_STAY_THRESHOLD)
    } else {
        dataset
    };
    let graph = graph_for(&dataset, &spec)?;

    let samples = run_chains(&dataset, graph.as_ref(), &spec, &mcmc)?;
    let summary = summarize(&samples, &dataset, args.level)?;
    make_dir(&args.out)?;
    samples.write_draws(&args.out.join("draws"))?;
    summary.write_json(&args.out.join("summary.json"))?;
    summary.write_csv(create(&args.out.join("summary.csv"))?)?;
    let mut outputs = vec!["draws".to_string(), "summary.json".into(), "summary.csv".into()];
    if let Some(g) = &graph {
        g.write_triplets(create(&args.out.join("graph.csv"))?)?;
        outputs.push("graph.csv".into());
    }
    let run = serde_json::json!({ "data": args.data, "data_hash": samples.data_hash, "spec": spec, "mcmc": mcmc, "level": args.level });
    write_manifest(&args.out, "fit", mcmc.seed, &run, outputs)?;
    if !summary.converged {
        eprintln!("warning: not converged (max PSRF {:?}, threshold 1.1)", summary.max_psrf);
    }
    Ok(())
}

fn cmd_diagnose(args: &DiagnoseArgs) -> CmdResult {
    if !(args.level > 0.0 && args.level < 1.0) {
        return usage("--level must lie in (0, 1)");
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&args.draws)
        .map_err(|e| io_error(&args.draws, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("chain_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return usage(format!("no chain_<k>.csv files in {}", args.draws.display()));
    }
    let chains = files.iter().map(|f| read_chain_csv(f)).collect::<Result<Vec<_>, _>>()?;
    let names = chains[0].0.clone();
    if chains.iter().any(|(n, _)| n != &names) {
        return usage("chain files record different quantities");
    }
    let mut rows = Vec::with_capacity(names.len());
    for (q, name) in names.iter().enumerate() {
        let per_chain: Vec<&[f64]> = chains.iter().map(|(_, c)| c[q].as_slice()).collect();
        rows.push(summarize_quantity(name, &per_chain, args.level)?);
    }
    make_dir(&args.out)?;
    write_quantities_csv(&rows, create(&args.out.join("diagnostics.csv"))?)?;
    let max_psrf = rows
        .iter()
        .filter(|r| r.quantity != "deviance")
        .filter_map(|r| r.psrf)
        .reduce(f64::max);
    let config = serde_json::json!({ "draws": args.draws, "level": args.level, "chains": files.len(), "max_psrf": max_psrf });
    write_manifest(&args.out, "diagnose", 0, &config, vec!["diagnostics.csv".into()])
}

fn cmd_compare(args: &CompareArgs) -> CmdResult {
    if args.summaries.len() < 2 {
        return usage("compare needs at least 2 summary files");
    }
    let mut fits = Vec::new();
    for path in &args.summaries {
        let f = FitSummary::read_json(path)?;
        fits.push((path.display().to_string(), f));
    }
    let rows = compare_fits(&fits)?;
    make_dir(&args.out)?;
    write_comparison(&rows, create(&args.out.join("comparison.csv"))?)?;
    let config = serde_json::json!({ "summaries": args.summaries });
    write_manifest(&args.out, "compare", 0, &config, vec!["comparison.csv".into()])
}

fn cmd_replicate(args: &ReplicateArgs) -> CmdResult {
    let config = read_config(args.config.as_deref())?;
    let mut scenario = match (&args.preset, &args.scenario, config.scenario) {
        (None, None, Some(s)) => s,
        (p, f, _) => load_scenario(p.as_deref(), f.as_deref())?,
    };
    if let Some(r) = args.replicates {
        scenario.replicates = r;
    }
    if scenario.replicates < 2 {
        return usage("at least 2 replicates are required");
    }
    scenario.validate()?;
    let base = config.mcmc.unwrap_or_else(|| desk_scale_mcmc(1));
    let mcmc = args.mcmc.apply(base);
    mcmc.validate()?;

    let table = run_scenario(&scenario, &mcmc)?;
    make_dir(&args.out)?;
    table.write_csv(create(&args.out.join("table.csv"))?)?;
    table.write_replicates_csv(create(&args.out.join("replicates.csv"))?)?;
    let path = args.out.join("generation.json");
    let gen = serde_json::json!({ "reports": table.reports, "excluded": table.excluded });
    fs::write(&path, serde_json::to_string_pretty(&gen).map_err(Error::from)?).map_err(|e| io_error(&path, e))?;
    if !table.excluded.is_empty() {
        eprintln!("warning: {} replicates excluded after chain aborts", table.excluded.len());
    }
    let run = serde_json::json!({ "scenario": scenario, "mcmc": mcmc });
    write_manifest(
        &args.out,
        "replicate",
        mcmc.seed,
        &run,
        vec!["table.csv".into(), "replicates.csv".into(), "generation.json".into()],
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Replicate(a) => cmd_replicate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
