use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;
use swarmproto::model::AgentState;
use swarmproto::runtime::{run_mission, ExitStatus};
use swarmproto::safety::{assemble_local_block, pairwise_barriers};
use swarmproto::scenario::{
    apply_overrides, audit_trajectory, benchmark_position_swap, load_config, timing_summary, write_plot_data,
    write_run_artifacts, ConfigError, ScenarioConfig, TimingLog, TimingSummary, TrajectoryLog, CONFIG_KEYS,
};

/// Median step time allowed by the real-time budget, in seconds.
const BUDGET_S: f64 = 0.2;

#[derive(Parser)]
#[command(name = "swarmproto", version, about = "Distributed receding-horizon control of a robot fleet, emulated on one machine")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Run a mission and write its logs
    Run(MissionArgs),
    /// Run the four-agent position swap and report timing against the budget
    Bench(MissionArgs),
    /// Summarise a timing.csv
    Stats {
        timing: PathBuf,
        /// Directory for summary.json (defaults to the input's directory)
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write per-agent polylines and an SVG from a trajectory.csv
    Plot {
        trajectory: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long, default_value = "plot")]
        out: PathBuf,
    },
    /// Check a configuration and print its derived quantities
    Validate(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (`section.key = value` lines)
    #[arg(short, long, conflicts_with = "benchmark")]
    config: Option<PathBuf>,
    /// Use the built-in position-swap benchmark
    #[arg(long)]
    benchmark: bool,
    /// Override one key, e.g. `--set links.drop_prob=0.3` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for emulated link randomness (same as `--set links.seed=N`)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MissionArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Config(ConfigError),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

fn key_listing() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys:\n");
    for (key, desc) in CONFIG_KEYS {
        out.push_str(&format!("  {key:<width$}  {desc}\n"));
    }
    out
}

impl ConfigArgs {
    /// Loads the file or benchmark, then applies `--set` and `--seed` in that
    /// order. Returns the config and the overrides as applied.
    fn resolve(&self) -> Result<(ScenarioConfig, Vec<String>), CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                load_config(&text)?
            }
            None => benchmark_position_swap(),
        };
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("links.seed={seed}"));
        }
        apply_overrides(&mut cfg, &overrides)?;
        Ok((cfg, overrides))
    }
}

fn run(args: &MissionArgs) -> Result<ExitStatus, CliError> {
    let (cfg, overrides) = args.config.resolve()?;
    let report = run_mission(&cfg);
    let files = write_run_artifacts(&args.out, &cfg, &report, &overrides).map_err(anyhow::Error::from)?;
    println!("status: {} (exit {})", report.status.name(), report.status.code());
    if let Some(why) = &report.failure {
        println!("failure: {why}");
    }
    println!("steps: {}, all arrived: {}", report.steps_run, report.all_arrived);
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(report.status)
}

fn bench(args: &MissionArgs) -> Result<ExitStatus, CliError> {
    let status = run(args)?;
    let (cfg, _) = args.config.resolve()?;
    let trajectory = read_trajectory(&args.out.join("trajectory.csv"))?;
    let audit = audit_trajectory(&trajectory, &cfg.cbf);
    println!(
        "safety: min barrier {:.4}, {} violations, {} decrement failures",
        audit.min_barrier,
        audit.violations.len(),
        audit.decrement_failures.len()
    );
    stats(&args.out.join("timing.csv"), None)?;
    Ok(status)
}

#[derive(Serialize)]
struct StatsReport {
    source: String,
    budget_s: f64,
    budget_pass: bool,
    pooled: TimingSummary,
    agents: Vec<AgentSummary>,
}

#[derive(Serialize)]
struct AgentSummary {
    agent: usize,
    summary: TimingSummary,
    within_budget: bool,
}

fn csv_error(path: &Path, e: &dyn std::fmt::Display, line: Option<u64>) -> anyhow::Error {
    match line {
        Some(line) => anyhow!("{}: malformed CSV at line {line}: {e}", path.display()),
        None => anyhow!("{}: {e}", path.display()),
    }
}

fn read_trajectory(path: &Path) -> anyhow::Result<TrajectoryLog> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    TrajectoryLog::read_csv(file).map_err(|e| csv_error(path, &e, e.position().map(|p| p.line())))
}

fn print_summary(label: &str, s: &TimingSummary) {
    println!(
        "{label:<8} n={:<5} kept={:<5} median={:.3} ms  q1={:.3} ms  q3={:.3} ms  max={:.3} ms  removed={}",
        s.count,
        s.kept,
        s.median * 1e3,
        s.q1 * 1e3,
        s.q3 * 1e3,
        s.max * 1e3,
        s.removed.len()
    );
}

fn stats(path: &Path, out: Option<&Path>) -> Result<ExitStatus, CliError> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let log = TimingLog::read_csv(file).map_err(|e| csv_error(path, &e, e.position().map(|p| p.line())))?;
    let pooled = timing_summary(&log.seconds()).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    let n = log.records.iter().map(|r| r.agent).max().unwrap_or(0);
    let mut agents = Vec::new();
    for agent in 1..=n {
        let samples: Vec<f64> = log.records.iter().filter(|r| r.agent == agent).map(|r| r.seconds).collect();
        if samples.is_empty() {
            continue;
        }
        let summary = timing_summary(&samples).map_err(|e| anyhow!("agent {agent}: {e}"))?;
        agents.push(AgentSummary { agent, within_budget: summary.median < BUDGET_S, summary });
    }
    for a in &agents {
        print_summary(&format!("agent {}", a.agent), &a.summary);
        if !a.within_budget {
            println!("agent {} median exceeds the {:.0} ms budget", a.agent, BUDGET_S * 1e3);
        }
    }
    print_summary("pooled", &pooled);
    if !pooled.removed.is_empty() {
        println!("removed outliers (s): {:?}", pooled.removed);
    }
    let pass = pooled.median < BUDGET_S;
    println!("budget: {}", if pass { "PASS" } else { "FAIL" });

    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(if dir.as_os_str().is_empty() { Path::new(".") } else { &dir })
        .with_context(|| format!("creating {}", dir.display()))?;
    let summary_path = dir.join("summary.json");
    let report = StatsReport {
        source: path.display().to_string(),
        budget_s: BUDGET_S,
        budget_pass: pass,
        pooled,
        agents,
    };
    let text = serde_json::to_string_pretty(&report).context("encoding summary")?;
    std::fs::write(&summary_path, text + "\n").with_context(|| format!("writing {}", summary_path.display()))?;
    println!("wrote {}", summary_path.display());
    Ok(ExitStatus::Success)
}

fn plot(trajectory: &Path, config: &ConfigArgs, out: &Path) -> Result<ExitStatus, CliError> {
    let (cfg, _) = config.resolve()?;
    let log = read_trajectory(trajectory)?;
    if log.records.is_empty() {
        return Err(anyhow!("{}: no trajectory rows", trajectory.display()).into());
    }
    let files = write_plot_data(out, &log, &cfg.cbf).map_err(anyhow::Error::from)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(ExitStatus::Success)
}

fn validate(args: &ConfigArgs) -> Result<ExitStatus, CliError> {
    let (cfg, _) = args.resolve()?;
    let model = cfg.model()?;
    let p = cfg.terminal_weight()?;
    println!("agents: {}, horizon: {}, ts: {} s, a_max: {} m/s^2", cfg.n_agents, cfg.horizon, cfg.ts, cfg.a_max);
    println!("topology: {}", cfg.topology.kind);
    println!("terminal weight P (Riccati solution):");
    for row in p.row_iter() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:12.6}")).collect();
        println!("  {}", cells.join(" "));
    }
    let states: Vec<AgentState> = cfg.initial_states();
    let targets = cfg.targets();
    let prediction = model.prediction(cfg.horizon);
    for me in 0..cfg.n_agents {
        let block = assemble_local_block(me, &states, &targets, &prediction, &cfg.cbf)
            .map_err(|e| anyhow!("agent {}: {e}", me + 1))?;
        println!("agent {}: {} coupled constraint rows, {} decision variables", me + 1, block.rows(), block.a.ncols());
    }
    let positions: Vec<_> = states.iter().map(|s| s.p).collect();
    println!("initial barrier values:");
    for check in pairwise_barriers(&positions, &cfg.cbf, 0) {
        println!("  h({},{}) = {:.6}", check.pair.0 + 1, check.pair.1 + 1, check.value);
    }
    println!("configuration is valid");
    Ok(ExitStatus::Success)
}

fn dispatch(cli: &Cli) -> Result<ExitStatus, CliError> {
    match &cli.verb {
        Verb::Run(args) => run(args),
        Verb::Bench(args) => bench(args),
        Verb::Stats { timing, out } => stats(timing, out.as_deref()),
        Verb::Plot { trajectory, config, out } => plot(trajectory, config, out),
        Verb::Validate(args) => validate(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let keys = key_listing();
    let mut command = Cli::command().after_help(keys.clone());
    for verb in ["run", "bench", "plot", "validate"] {
        command = command.mut_subcommand(verb, |c| c.after_help(keys.clone()));
    }
    let matches = command.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(&cli) {
        Ok(status) => ExitCode::from(status.code() as u8),
        Err(CliError::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(ExitStatus::ConfigError.code() as u8)
        }
        Err(CliError::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(ExitStatus::Failure.code() as u8)
        }
    }
}
