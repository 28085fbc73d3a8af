//! Command-line entry point.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use popvec_core::envs::EnvKind;
use popvec_core::plan::plan_actor_cores_with_overhead;

use crate::bench::{audit_modes, bench_update, BenchMode, BenchSpec};
use crate::config::{Algorithm, RunConfig, Strategy};
use crate::cost::{cost_estimate, PriceTable};
use crate::error::Result;
use crate::pipeline::{run_training, RunSummary};
use crate::plotdata::{self, BenchRow};

/// Overhead multiplier applied by `plan --overhead` without a value.
pub const DEFAULT_PLAN_OVERHEAD: f64 = 1.3;

#[derive(Debug, Parser)]
#[command(
    name = "popvec",
    version,
    about = "Vectorized population-based reinforcement learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a single agent or a population with the configured strategy.
    Train(TrainArgs),
    /// Train with population-based training.
    Pbt(TrainArgs),
    /// Train with the cross-entropy method over policy parameters.
    Cemrl(TrainArgs),
    /// Train with the diversity regulariser.
    Dvd(TrainArgs),
    /// Time update steps for each execution mode.
    Bench(BenchArgs),
    /// Number of actor cores needed to keep up with the learner.
    Plan(PlanArgs),
    /// Dollar cost of a run on priced hardware.
    Cost(CostArgs),
    /// Turn metrics logs and bench results into plot-ready tables.
    EmitPlotData(PlotArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub total_update_steps: Option<u64>,
    /// Update steps per burst.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated modes: sequential, vectorized, parallel_threads.
    #[arg(long, value_delimiter = ',', default_value = "vectorized")]
    pub mode: Vec<BenchMode>,
    /// Comma-separated population sizes.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value = "td3", value_parser = parse_algorithm)]
    pub algo: Algorithm,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "32,32")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value = "point_mass")]
    pub env: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4096)]
    pub memory_budget_mb: usize,
    /// Also run the 64-bit cross-mode parameter audit.
    #[arg(long)]
    pub audit: bool,
    /// Append result rows to this comma-separated file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    match s {
        "td3" => Ok(Algorithm::Td3),
        "sac" => Ok(Algorithm::Sac),
        _ => Err(format!("unknown algorithm `{s}` (expected td3 or sac)")),
    }
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub t_env_ms: f64,
    #[arg(long)]
    pub t_update_ms: f64,
    /// Environment steps per member per update step.
    #[arg(long, default_value_t = 1.0)]
    pub ratio: f64,
    /// Inflate interaction time for scheduling overhead.
    #[arg(long, num_args = 0..=1, default_missing_value = "1.3")]
    pub overhead: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub runtime_s: f64,
    #[arg(long)]
    pub hardware: String,
    /// Price table file with `name price` lines.
    #[arg(long)]
    pub prices: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub bench: Option<PathBuf>,
    #[arg(long)]
    pub prices: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn load_train(args: &TrainArgs, strategy: Option<Strategy>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = strategy {
        cfg.strategy = s;
    }
    if let Some(v) = args.population {
        cfg.population = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.total_update_steps {
        cfg.total_update_steps = v;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.workers {
        cfg.actor_workers = v;
    }
    if let Some(v) = &args.metrics {
        cfg.metrics_path = Some(v.clone());
    }
    if let Some(v) = &args.checkpoint {
        cfg.checkpoint.path = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(out: &mut dyn Write, s: &RunSummary) -> std::io::Result<()> {
    writeln!(
        out,
        "update_steps={} env_steps={} env_steps_per_member={:.1} ratio={:.4} dropped={} episodes={} evolutions={} cem_generations={} wall_clock_s={:.2}",
        s.update_steps,
        s.env_steps,
        s.env_steps_per_member,
        s.ratio,
        s.dropped,
        s.episodes.len(),
        s.evolutions,
        s.cem_generations,
        s.wall_clock_s
    )?;
    for (m, r) in s.final_mean_returns.iter().enumerate() {
        match r {
            Some(r) => writeln!(out, "member {m}: mean return {r:.3}")?,
            None => writeln!(out, "member {m}: no finished episode")?,
        }
    }
    Ok(())
}

fn run_bench(args: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let env = EnvKind::parse(&args.env)?;
    let mut rows = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    for &n in &args.n {
        for &mode in &args.mode {
            let spec = BenchSpec {
                mode,
                algorithm: args.algo,
                n,
                k: args.k,
                reps: args.reps,
                batch_size: args.batch_size,
                hidden: args.hidden.clone(),
                env,
                seed: args.seed,
                memory_budget: args.memory_budget_mb << 20,
            };
            let row = BenchRow::from(&bench_update(&spec)?);
            w.serialize(&row)?;
            rows.push(row);
        }
        if args.audit {
            let spec = BenchSpec {
                algorithm: args.algo,
                n,
                k: args.k,
                reps: 3,
                batch_size: args.batch_size,
                hidden: args.hidden.clone(),
                env,
                seed: args.seed,
                memory_budget: args.memory_budget_mb << 20,
                ..BenchSpec::default()
            };
            eprintln!(
                "audit n={n}: max |param difference| across modes = {:e}",
                audit_modes(&spec)?
            );
        }
    }
    let text = w
        .into_inner()
        .map_err(|e| crate::error::Error::Format(e.to_string()))?;
    out.write_all(&text)
        .map_err(|e| crate::error::Error::io("writing output", e))?;
    if let Some(path) = &args.out {
        let mut all: Vec<BenchRow> = if path.exists() {
            plotdata::read_csv(path)?
        } else {
            Vec::new()
        };
        all.extend(rows);
        plotdata::write_csv(path, &all)?;
    }
    Ok(())
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let io = |e| crate::error::Error::io("writing output", e);
    match cli.command {
        Command::Train(a) => print_summary(out, &run_training(&load_train(&a, None)?)?).map_err(io),
        Command::Pbt(a) => {
            print_summary(out, &run_training(&load_train(&a, Some(Strategy::Pbt))?)?).map_err(io)
        }
        Command::Cemrl(a) => {
            print_summary(out, &run_training(&load_train(&a, Some(Strategy::Cem))?)?).map_err(io)
        }
        Command::Dvd(a) => {
            print_summary(out, &run_training(&load_train(&a, Some(Strategy::Dvd))?)?).map_err(io)
        }
        Command::Bench(a) => run_bench(&a, out),
        Command::Plan(a) => {
            let cores = plan_actor_cores_with_overhead(
                a.n,
                a.t_env_ms,
                a.t_update_ms,
                a.ratio,
                a.overhead.unwrap_or(1.0),
            )?;
            writeln!(out, "{cores}").map_err(io)
        }
        Command::Cost(a) => {
            let table = match &a.prices {
                Some(p) => PriceTable::load(p)?,
                None => PriceTable::default(),
            };
            writeln!(out, "{}", cost_estimate(a.runtime_s, &a.hardware, &table)?).map_err(io)
        }
        Command::EmitPlotData(a) => {
            let table = match &a.prices {
                Some(p) => PriceTable::load(p)?,
                None => PriceTable::default(),
            };
            for p in plotdata::emit(&a.out, a.metrics.as_deref(), a.bench.as_deref(), &table)? {
                writeln!(out, "{}", p.display()).map_err(io)?;
            }
            Ok(())
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Results go to `out`, diagnostics to stderr.
pub fn run_cli_to<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_cli_to(argv, &mut std::io::stdout().lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String) {
        let mut out = Vec::new();
        let code = run_cli_to(
            std::iter::once("popvec").chain(args.iter().copied()),
            &mut out,
        );
        (code, String::from_utf8(out).unwrap())
    }

    #[test]
    fn plan_prints_core_count() {
        assert_eq!(
            run(&[
                "plan",
                "--n",
                "80",
                "--t-env-ms",
                "0.94",
                "--t-update-ms",
                "3.0"
            ]),
            (0, "26\n".into())
        );
        let (code, text) = run(&[
            "plan",
            "--n",
            "80",
            "--t-env-ms",
            "0.94",
            "--t-update-ms",
            "3.0",
            "--overhead",
        ]);
        assert_eq!((code, text.trim()), (0, "33"));
        assert_eq!(
            run(&["plan", "--n", "0", "--t-env-ms", "1", "--t-update-ms", "1"]).0,
            1
        );
    }

    #[test]
    fn missing_config_fails() {
        assert_ne!(run(&["train"]).0, 0);
        assert_eq!(run(&["train", "--config", "/nonexistent/run.toml"]).0, 1);
    }

    #[test]
    fn cost_command() {
        assert_eq!(
            run(&["cost", "--runtime-s", "3600", "--hardware", "T4"]),
            (0, "0.34\n".into())
        );
        assert_eq!(
            run(&["cost", "--runtime-s", "3600", "--hardware", "TPU"]).0,
            1
        );
    }
}
