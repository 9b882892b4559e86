use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use loda_core::runner::{self, ExperimentConfig, IsolationMethod, MergeMethod, PRESETS};
use loda_core::stream;
use loda_core::trainer::{OptimizerKind, Schedule};
use loda_core::{LodaError, Result};

#[derive(Parser)]
#[command(name = "loda", version, about = "Continual learning with decomposed low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run {
        #[command(flatten)]
        opts: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
    },
    /// Generate a synthetic stream and export it as CSV.
    GenerateStream {
        #[command(flatten)]
        opts: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run every ablation preset; one report directory per preset.
    Ablate {
        #[command(flatten)]
        opts: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
    },
    /// Energy diagnostics only; prints the diagnostics CSV.
    Diagnose {
        #[command(flatten)]
        opts: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Ingest a stream CSV instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    classes_per_task: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    out_dim: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    general_weight: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    jitter_scale: Option<f64>,
    #[arg(long, value_parser = parse_isolation)]
    isolation: Option<IsolationMethod>,
    #[arg(long, value_parser = parse_merge)]
    merge: Option<MergeMethod>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<Schedule>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    rho_max: Option<f64>,
    #[arg(long)]
    interp_steps: Option<usize>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_isolation(s: &str) -> std::result::Result<IsolationMethod, String> {
    parse_enum(s)
}

fn parse_merge(s: &str) -> std::result::Result<MergeMethod, String> {
    parse_enum(s)
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    parse_enum(s)
}

fn parse_schedule(s: &str) -> std::result::Result<Schedule, String> {
    parse_enum(s)
}

impl ConfigArgs {
    fn resolve(&self, seed: u64) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = self.preset.clone().or_else(|| cfg.preset.clone()) {
            runner::apply_preset(&mut cfg, &p)?;
        }
        cfg.seed = seed;
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$($target)+ = v;
                }
            };
        }
        set!(tasks => stream.tasks);
        set!(classes_per_task => stream.classes_per_task);
        set!(kappa => stream.kappa);
        set!(noise_sigma => stream.noise_sigma);
        set!(feature_dim => feature_dim);
        set!(out_dim => out_dim);
        set!(rank => rank);
        set!(general_weight => general_weight);
        set!(lambda => lambda);
        set!(temperature => temperature);
        set!(jitter_scale => jitter_scale);
        set!(isolation => isolation);
        set!(merge => merge);
        set!(optimizer => train.optimizer);
        set!(schedule => train.schedule);
        set!(eta => train.eta);
        set!(epochs => train.epochs);
        set!(batch_size => train.batch_size);
        set!(rho_max => train.rho_max);
        set!(interp_steps => interp_steps);
        if self.data.is_some() {
            cfg.data_path = self.data.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_one(cfg: &ExperimentConfig, dir: &std::path::Path) -> Result<()> {
    let report = runner::run_experiment(cfg)?;
    runner::emit_report(&report, dir)?;
    println!("{}  A_last {:.2}  A_avg {:.2}", dir.display(), report.a_last, report.a_avg);
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { opts, seed, output_dir } => {
            let mut cfg = opts.resolve(seed)?;
            cfg.output_dir = Some(output_dir.clone());
            run_one(&cfg, &output_dir)
        }
        Command::GenerateStream { opts, seed, output } => {
            let cfg = opts.resolve(seed)?;
            let tasks = stream::generate(&stream::StreamConfig {
                seed,
                ..cfg.stream
            })?;
            stream::export_csv(&tasks, &output)
        }
        Command::Ablate { opts, seed, output_dir } => {
            if opts.preset.is_some() {
                return Err(LodaError::Config("ablate runs every preset; drop --preset".into()));
            }
            let base = opts.resolve(seed)?;
            for name in PRESETS {
                let cfg = base.clone().with_preset(name)?;
                run_one(&cfg, &output_dir.join(name))?;
            }
            Ok(())
        }
        Command::Diagnose { opts, seed, output } => {
            let cfg = opts.resolve(seed)?;
            let tasks = runner::load_tasks(&cfg)?;
            let csv = runner::diagnostics_csv(&runner::diagnose(&cfg, &tasks)?);
            match output {
                Some(path) => std::fs::write(&path, csv).map_err(|e| LodaError::Io { path, source: e }),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
