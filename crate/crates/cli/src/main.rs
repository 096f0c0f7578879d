use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use diaruq_cli::commands::{self, ExtractArgs, ScoreArgs};
use diaruq_cli::config::RunConfig;
use diaruq_cli::pipeline::run_pipeline;
use diaruq_cli::{CliError, CliResult};

/// Uncertainty-aware diarization toolkit: features, sample aggregation,
/// resegmentation and scoring.
#[derive(Parser)]
#[command(name = "diaruq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureKind {
    Modspec,
    Mfcc,
}

#[derive(Subcommand)]
enum Command {
    /// Extract modulation-spectrum or cepstral features from a WAV file.
    Extract {
        #[arg(value_enum)]
        kind: FeatureKind,
        input: PathBuf,
        output: PathBuf,
        /// Frame spec TOML; defaults to 1 s / 250 ms modulation frames.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Add white Gaussian noise at this SNR first.
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        dither: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip per-frame normalisation of modulation spectra.
        #[arg(long)]
        raw: bool,
        /// Delta order appended to cepstra.
        #[arg(long, default_value_t = 2)]
        deltas: usize,
    },
    /// Summarise Monte Carlo samples per frame and speaker.
    Aggregate {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        /// Predict by majority vote of the draws instead of the mean.
        #[arg(long)]
        modal: bool,
    },
    /// Bridge short gaps and remove single-frame spikes in predictions.
    Smooth {
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        g: usize,
        #[arg(long)]
        out: PathBuf,
        /// Frame spec TOML for the RTTM timing.
        #[arg(long)]
        frame_config: Option<PathBuf>,
        #[arg(long, default_value = "file")]
        file_id: String,
    },
    /// Kalman-smooth one model's samples.
    Kalman {
        input: PathBuf,
        /// Smoother TOML.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        forward_only: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "file")]
        file_id: String,
    },
    /// Fuse several models' samples with the Kalman smoother.
    Fuse {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        forward_only: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "file")]
        file_id: String,
    },
    /// Fit smoother hyperparameters on validation data.
    FitKalman {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Validation reference utterances.
        #[arg(long)]
        val_labels: PathBuf,
        /// Search grid TOML.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions (RTTM or frame CSV) against reference utterances.
    Score {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Speech regions to intersect the predictions with.
        #[arg(long)]
        sad: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        collar: f64,
        /// Map predicted speakers to reference speakers by overlap.
        #[arg(long)]
        permute: bool,
        #[arg(long)]
        frame_config: Option<PathBuf>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Meeting statistics from utterance CSVs or per-speaker words.xml files.
    Stats {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        duration: Option<f64>,
        /// Largest pause merged into one utterance when reading words.xml.
        #[arg(long, default_value_t = commands::default_merge_gap())]
        merge_gap: f64,
    },
    /// Generate synthetic truth and sample tensors.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Entropy histograms and calibration curve for one model.
    Report {
        input: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        /// Also render entropy.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Run the pipeline described by a TOML file.
    Run { config: PathBuf },
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("DIARUQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("DIARUQ_THREADS={v:?} is not a positive integer")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn emit(text: &str) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Runtime(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Extract { kind, input, output, config, snr_db, dither, seed, raw, deltas } => {
            let kind = match kind {
                FeatureKind::Modspec => "modspec",
                FeatureKind::Mfcc => "mfcc",
            };
            commands::extract(&ExtractArgs {
                kind,
                input: &input,
                output: &output,
                config: config.as_deref(),
                snr_db,
                dither,
                seed,
                raw,
                deltas,
            })
        }
        Command::Aggregate { input, out, lambda, modal } => commands::aggregate_cmd(&input, &out, lambda, modal),
        Command::Smooth { input, g, out, frame_config, file_id } => {
            commands::smooth_cmd(&input, g, &out, frame_config.as_deref(), &file_id)
        }
        Command::Kalman { input, config, forward_only, out, file_id } => {
            commands::kalman_cmd(&[input], config.as_deref(), forward_only, &out, &file_id)
        }
        Command::Fuse { inputs, config, forward_only, out, file_id } => {
            commands::kalman_cmd(&inputs, config.as_deref(), forward_only, &out, &file_id)
        }
        Command::FitKalman { inputs, val_labels, grid, out } => {
            commands::fit_kalman_cmd(&inputs, &val_labels, grid.as_deref(), &out)
        }
        Command::Score { truth, pred, sad, collar, permute, frame_config, out } => {
            let report = commands::score_cmd(&ScoreArgs {
                truth: &truth,
                pred: &pred,
                sad: sad.as_deref(),
                collar_s: collar,
                permute,
                config: frame_config.as_deref(),
                out: out.as_deref(),
            })?;
            emit(&commands::score_json(&report))
        }
        Command::Stats { inputs, duration, merge_gap } => {
            emit(&commands::stats_json(&commands::stats_cmd(&inputs, duration, merge_gap)?))
        }
        Command::Synth { spec, out } => commands::synth_cmd(&spec, &out),
        Command::Report { input, truth, out, bins, lambda, svg } => {
            commands::report_cmd(&input, &truth, &out, bins, svg, lambda)
        }
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let report = run_pipeline(&cfg)?;
            emit(&commands::score_json(&report))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match configure_threads().and_then(|_| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
