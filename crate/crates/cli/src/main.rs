mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use graphac::arena::{train_pair, MatchResult};
use graphac::graph::{generate_synthetic_dataset, write_graph_file, SyntheticConfig};
use graphac::tournament::{default_workers, emit_report, run_tournament, schedule_double_round_robin};
use graphac::verify::{run_suite, Suite};

use config::{Overrides, RunConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Ranks graph neural networks by pairing them in adversarial-collaboration
/// matches.
#[derive(Parser)]
#[command(name = "graphac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic molecular-style dataset as JSONL.
    GenData(GenDataArgs),
    /// Train the two models of a config against each other.
    Match(RunArgs),
    /// Play a double round-robin over the config's pool.
    Tournament(RunArgs),
    /// Run the built-in correctness suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 10)]
    min_nodes: usize,
    #[arg(long, default_value_t = 30)]
    max_nodes: usize,
    #[arg(long, default_value_t = 8)]
    node_categories: usize,
    #[arg(long, default_value_t = 2)]
    node_continuous: usize,
    #[arg(long, default_value_t = 4)]
    edge_categories: usize,
    #[arg(long, default_value_t = 1)]
    edge_continuous: usize,
    #[arg(long, default_value_t = 0.5)]
    motif_complexity: f64,
    /// Output JSONL path; the effective config lands next to it.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Match workers [default: GRAPHAC_WORKERS or 1].
    #[arg(long)]
    workers: Option<usize>,
    /// Large-scale defaults: batch 512, lr 5e-5, 50 epochs, output dim 256.
    #[arg(long, alias = "paper-profile")]
    full_profile: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Weight of the opponent's triangle in the competitive loss.
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suites to run [default: all].
    #[arg(long = "suite", value_parser = parse_suite)]
    suites: Vec<Suite>,
    /// Random instances per property.
    #[arg(long, default_value_t = 10)]
    instances: usize,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: graphac::Error| e.to_string())
}

/// Marks an error as a usage or configuration problem (exit code 2).
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: anyhow::Error) -> anyhow::Error {
    UsageError(e).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Match(a) => run_match(a),
        Command::Tournament(a) => tournament(a),
        Command::Verify(a) => verify(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let cfg = SyntheticConfig {
        seed: a.seed,
        count: a.count,
        min_nodes: a.min_nodes,
        max_nodes: a.max_nodes,
        node_categories: a.node_categories,
        node_continuous: a.node_continuous,
        edge_categories: a.edge_categories,
        edge_continuous: a.edge_continuous,
        motif_complexity: a.motif_complexity,
    };
    cfg.validate().map_err(|e| usage(e.into()))?;
    let graphs = generate_synthetic_dataset(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_graph_file(&a.out, &graphs)?;
    let mut dump = a.out.clone().into_os_string();
    dump.push(".config.json");
    write_json(Path::new(&dump), &cfg)?;
    println!("wrote {} graphs to {}", graphs.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_config(a: &RunArgs) -> Result<RunConfig> {
    let flags = Overrides {
        full_profile: a.full_profile,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seeds: a.seeds.clone(),
        mu: a.mu,
        lambda: a.lambda,
        workers: a.workers,
        out_dir: a.out_dir.clone(),
    };
    RunConfig::load(&a.config, &flags).map_err(usage)
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("effective_config.json"), cfg)?;
    Ok(dir)
}

fn run_match(a: RunArgs) -> Result<ExitCode> {
    let cfg = load_config(&a)?;
    let [ca, cb] = cfg.pool.as_slice() else {
        return Err(usage(anyhow::anyhow!(
            "pool: a match needs exactly two entries, found {}",
            cfg.pool.len()
        )));
    };
    let dir = prepare_out_dir(&cfg)?;
    let data = cfg.dataset.load()?;
    let spec_b = cb
        .spec
        .clone()
        .with_seed(cb.spec.init_seed ^ graphac::tournament::B_SLOT_SALT);
    let result = train_pair(&ca.spec, &spec_b, &data, &cfg.train)?;
    for run in &result.runs {
        let path = dir.join(format!("trajectory_seed{}.csv", run.seed));
        fs::write(&path, MatchResult::trajectory_csv(run))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    write_json(&dir.join("match.json"), &result)?;
    let (m, s) = (result.diff_mean, result.diff_std);
    let verdict = if m.abs() <= s {
        "tie".to_string()
    } else if m < 0.0 {
        format!("{} wins", ca.name)
    } else {
        format!("{} wins", cb.name)
    };
    println!(
        "{} vs {}: diff = {m:.4} ± {s:.4} (negative ⇒ A wins); {verdict}",
        ca.name, cb.name
    );
    Ok(ExitCode::SUCCESS)
}

fn tournament(a: RunArgs) -> Result<ExitCode> {
    let cfg = load_config(&a)?;
    let plan =
        schedule_double_round_robin(cfg.pool.clone(), cfg.train.clone()).map_err(|e| usage(e.into()))?;
    let dir = prepare_out_dir(&cfg)?;
    let data = cfg.dataset.load()?;
    let workers = cfg.workers.unwrap_or_else(default_workers);
    let report = run_tournament(&plan, &data, workers)?;
    emit_report(&report, &dir)?;
    for e in &report.ranking {
        println!("{}. {} ({:+.4})", e.rank, e.name, e.score);
    }
    println!("report written to {}", dir.display());
    let aborted = report.aborted().count();
    if aborted > 0 {
        eprintln!("{aborted} match(es) aborted; see consistency.txt");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> Result<ExitCode> {
    if a.instances == 0 {
        bail!(UsageError(anyhow::anyhow!("--instances must be >= 1")));
    }
    let suites = if a.suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        a.suites
    };
    let mut all_pass = true;
    for suite in suites {
        for check in run_suite(suite, a.instances)? {
            all_pass &= check.passed();
            println!("{check}");
        }
    }
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
