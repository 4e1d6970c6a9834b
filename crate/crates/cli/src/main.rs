//! `genview`: offline view analysis, generator requests, pair scoring and
//! toy training runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use genview::io::{self, RunConfig};
use genview::pipeline::{self, PipelineError, ReportFormat};

#[derive(Parser)]
#[command(name = "genview", version, about = "Controllable positive-view construction toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the global projector and foreground threshold on feature maps.
    Calibrate {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Foreground proportion and noise level per sample (TSV).
    Analyze {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Noise embeddings at their analyzed levels; writes `<out>.tsv` too.
    Perturb {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        analysis: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pair quality for matching ids of two feature containers (TSV).
    Score {
        #[arg(long)]
        view_a: PathBuf,
        #[arg(long)]
        view_b: PathBuf,
        /// Needed when `quality.projector = global`.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Softmax weights of a score table, per batch (TSV).
    Weights {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Toy contrastive training run; writes a JSON report.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Comparison table over report files.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// `markdown` or `csv`.
        #[arg(long, default_value = "markdown")]
        format: String,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration with key descriptions.
    Config,
}

fn load_config(global: &Global) -> Result<RunConfig, PipelineError> {
    let text = match &global.config {
        Some(path) if !path.exists() => return Err(PipelineError::MissingInput(path.display().to_string())),
        Some(path) => io::read_text(path)?,
        None => String::new(),
    };
    let mut overrides = global.overrides.clone();
    if let Some(seed) = global.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(RunConfig::parse_with_overrides(&text, &overrides)?)
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    Ok(io::write_text(path, text)?)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let config = load_config(&cli.global)?;
    match cli.command {
        Command::Calibrate { features, out } => {
            let tensors = pipeline::cmd_calibrate(&features, &config)?;
            io::write_container(&out, &tensors)?;
            let cal = pipeline::Calibration::from_tensors(&tensors)?;
            eprintln!(
                "threshold {:.6}, realized fraction {:.4}{}",
                cal.threshold,
                cal.realized_fraction,
                if cal.flipped { ", component flipped" } else { "" }
            );
        }
        Command::Analyze {
            features,
            calibration,
            out,
        } => write(&out, &pipeline::cmd_analyze(&features, &calibration, &config)?.to_tsv())?,
        Command::Perturb {
            embeddings,
            analysis,
            out,
        } => {
            let (tensors, sidecar) = pipeline::cmd_perturb(&embeddings, &analysis, &config)?;
            io::write_container(&out, &tensors)?;
            write(&pipeline::sidecar_path(&out), &sidecar.to_tsv())?;
        }
        Command::Score {
            view_a,
            view_b,
            calibration,
            out,
        } => write(
            &out,
            &pipeline::cmd_score(&view_a, &view_b, calibration.as_deref(), &config)?.to_tsv(),
        )?,
        Command::Weights { scores, out } => write(&out, &pipeline::cmd_weights(&scores)?.to_tsv())?,
        Command::Train { out } => {
            let report = pipeline::cmd_train(&config)?;
            write(&out, &pipeline::report_json(&report))?;
            print!("{}", pipeline::report_summary(&report).to_tsv());
            eprintln!("wall clock {:.2}s", report.wall_clock.as_secs_f64());
        }
        Command::Report { reports, format, out } => {
            let format: ReportFormat = format.parse()?;
            let table = pipeline::cmd_report(&reports, format)?;
            match out {
                Some(path) => write(&path, &table)?,
                None => print!("{table}"),
            }
        }
        Command::Config => print!("{}", config.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Messages already carry their underlying causes.
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
