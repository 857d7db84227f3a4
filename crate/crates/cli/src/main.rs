//! `xlayer`: generate rate traces, train bitrate policies, evaluate the
//! solver × policy schemes and write the report tables.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use xlayer::config::{RunConfig, ScenarioKind, Scheme};
use xlayer::experiment::{self, ExperimentError, Paths};

#[derive(Debug, Parser)]
#[command(name = "xlayer", version, about = "Cross-layer multiuser video streaming experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesise the videos and a train/test split of rate traces per solver.
    GenTraces,
    /// Train the learned bitrate policy on each solver's training traces.
    Train,
    /// Play every test trace with each scheme and write per-session results.
    Evaluate,
    /// Summarise the evaluation into QoE, fairness, CDF and rate tables.
    Report,
    /// Print the effective configuration.
    Config,
}

/// Flags override values from the config file.
#[derive(Debug, Args)]
struct Overrides {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// single_cell_siso or multicell_mimo.
    #[arg(long, global = true)]
    scenario: Option<ScenarioKind>,
    /// Restrict to one scheme, e.g. qddra_drl or wmmse_bb.
    #[arg(long, global = true)]
    scheme: Option<Scheme>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Trace length in seconds.
    #[arg(long, global = true)]
    duration: Option<usize>,
    #[arg(long, global = true)]
    n_train: Option<usize>,
    #[arg(long, global = true)]
    n_test: Option<usize>,
    /// Training workers.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Training episodes.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Interleave training workers on one thread (reproducible).
    #[arg(long, global = true)]
    serial: bool,
}

impl Overrides {
    fn apply(&self, mut cfg: RunConfig) -> RunConfig {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.scenario {
            cfg.scenario = s;
        }
        if self.scheme.is_some() {
            cfg.scheme = self.scheme;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(d) = self.duration {
            cfg.traces.duration_s = d;
        }
        if let Some(n) = self.n_train {
            cfg.traces.n_train = n;
        }
        if let Some(n) = self.n_test {
            cfg.traces.n_test = n;
        }
        if let Some(w) = self.workers {
            cfg.train.workers = w;
        }
        if let Some(e) = self.episodes {
            cfg.train.episodes = e;
        }
        if self.serial {
            cfg.train.serial = true;
        }
        cfg
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(e) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn load_config(o: &Overrides) -> Result<RunConfig, Failure> {
    let base = match &o.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    let cfg = o.apply(base);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.overrides)?;
    let started = Instant::now();
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml().map_err(|e| Failure::Runtime(e.to_string()))?);
            return Ok(());
        }
        Command::GenTraces => {
            experiment::write_effective_config(&cfg, "gen-traces")?;
            for (mode, split) in experiment::gen_traces(&cfg)? {
                println!(
                    "{mode}: {} train + {} test traces of {} s for {} users -> {}",
                    split.train.len(),
                    split.test.len(),
                    cfg.traces.duration_s,
                    cfg.n_users(),
                    split.manifest.display()
                );
            }
        }
        Command::Train => {
            experiment::write_effective_config(&cfg, "train")?;
            let paths = Paths::new(&cfg.out);
            for mode in cfg.modes() {
                let trained = experiment::train_policy(&cfg, mode)?;
                let tail = &trained.curve[trained.curve.len().saturating_sub(100)..];
                let recent = tail.iter().map(|p| p.mean_qoe).sum::<f64>() / tail.len().max(1) as f64;
                println!(
                    "{mode}: {} episodes, mean QoE of the last {} = {recent:.3} -> {}",
                    trained.curve.len(),
                    tail.len(),
                    paths.checkpoint(mode).display()
                );
            }
        }
        Command::Evaluate => {
            experiment::write_effective_config(&cfg, "evaluate")?;
            for e in experiment::evaluate(&cfg)? {
                println!("{:<12} sessions {:>5}  mean QoE {:>8.3}", e.scheme.to_string(), e.rows.len(), e.mean_qoe());
            }
        }
        Command::Report => {
            experiment::write_effective_config(&cfg, "report")?;
            println!("{:<12} {:>9} {:>9} {:>9} {:>10} {:>11}", "scheme", "QoE", "PSNR", "|dq|", "rebuf s", "unfairness");
            let offset = cfg.report.psnr_display_offset_db;
            for r in experiment::report(&cfg)? {
                println!(
                    "{:<12} {:>9.3} {:>9.3} {:>9.3} {:>10.3} {:>11.4}",
                    r.scheme.to_string(),
                    r.mean_qoe,
                    r.mean_quality - offset,
                    r.mean_switch,
                    r.mean_rebuffer_s,
                    r.total_unfairness()
                );
            }
            println!("tables written to {}", Paths::new(&cfg.out).report("").display());
        }
    }
    eprintln!("done in {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
