use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use seld_cli::bench::BenchOptions;
use seld_cli::commands;
use seld_cli::config::{parse_overrides, ExperimentConfig, Preset, DESK_CLIPS};
use seld_cli::error::{exit_code, CliError};
use seld_cli::grid::{self, SCORE_HEADER};
use seld_cli::io::Split;
use seld_core::synth::SceneSpec;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "seld",
    version,
    about = "Synthetic SELD experiments: attention vs recurrent temporal modules"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Experiment configuration shared by `train` and `ablate`.
#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; fields missing from it take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Epoch/seed/batch bundle applied on top of the config file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Further `--key value` overrides of config fields (`--epochs 3`,
    /// `--model.n_heads 4`).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = self.preset {
            p.apply(&mut cfg);
        }
        cfg.with_overrides(&parse_overrides(&self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic FOA dataset with labels and a split manifest.
    Synth {
        #[arg(long, default_value_t = DESK_CLIPS)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Clip length in seconds.
        #[arg(long)]
        clip_len: Option<f64>,
        #[arg(long)]
        polyphony: Option<usize>,
        /// Event-to-noise ratio in dB.
        #[arg(long)]
        snr_db: Option<f64>,
    },
    /// Cache unstandardized features of every clip in a dataset.
    Extract {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one configuration over its seed list.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 20.0)]
        theta: f64,
        /// Write per-clip prediction CSVs here.
        #[arg(long)]
        pred_out: Option<PathBuf>,
        /// Write the one-row score CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train every row of a configuration grid and tabulate the scores.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Results CSV (default: `<out_dir>/results.csv`).
        #[arg(long)]
        results: Option<PathBuf>,
        /// Only fill in parameter counts.
        #[arg(long)]
        params_only: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Inference throughput of an attention checkpoint against the baseline.
    Bench {
        /// Attention checkpoint (default: fresh N=2, M=8 model).
        #[arg(long)]
        mhsa: Option<PathBuf>,
        /// Baseline checkpoint (default: fresh recurrent model).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        batches: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Split each batch across all available cores.
        #[arg(long)]
        parallel: bool,
        /// Skip the sequence-length scaling measurement.
        #[arg(long)]
        no_scaling: bool,
    },
    /// Score prediction CSVs against reference CSVs.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Label frames per clip (default: last labelled frame, rounded up to
        /// whole segments).
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 20.0)]
        theta: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            clips,
            seed,
            out,
            clip_len,
            polyphony,
            snr_db,
        } => {
            let mut spec = SceneSpec {
                seed,
                n_clips: clips,
                ..SceneSpec::default()
            };
            if let Some(v) = clip_len {
                spec.clip_len_s = v;
            }
            if let Some(v) = polyphony {
                spec.max_polyphony = v;
            }
            if let Some(v) = snr_db {
                spec.snr_db = v;
            }
            let m = commands::synth(&spec, &out)?;
            eprintln!("wrote {} clips to {}", m.clips.len(), out.display());
        }
        Command::Extract { data } => {
            let n = commands::extract(&data)?;
            eprintln!("cached features of {n} clips");
        }
        Command::Train { cfg } => {
            let cfg = cfg.resolve()?;
            let records = commands::train(&cfg, |seed, e| {
                eprintln!(
                    "seed {seed} epoch {:>3}: train {:.5} val {:.5} F20 {:.1}",
                    e.epoch, e.train_loss, e.val_loss, e.val_scores.f20
                )
            })?;
            print!("{}", commands::to_json(&records));
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            threshold,
            theta,
            pred_out,
            csv,
        } => {
            let r = commands::eval(
                &checkpoint,
                &data,
                split,
                threshold,
                theta,
                pred_out.as_deref(),
            )
            .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            if let Some(path) = csv {
                grid::write_csv(
                    &path,
                    &SCORE_HEADER,
                    &[grid::score_row(&r.config_id, r.params, &r.scores)],
                )?;
            }
            print!("{}", commands::to_json(&r));
        }
        Command::Ablate {
            grid: grid_path,
            results,
            params_only,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let rows = grid::load_grid(&grid_path)?;
            let results = results.unwrap_or_else(|| commands::default_results_path(&cfg));
            commands::ablate(&cfg, &rows, &results, params_only, |m, seed, e| {
                eprintln!(
                    "{} seed {seed} epoch {:>3}: val {:.5}",
                    m.id(),
                    e.epoch,
                    e.val_loss
                )
            })?;
            eprintln!("wrote {}", results.display());
        }
        Command::Bench {
            mhsa,
            baseline,
            batch,
            batches,
            warmup,
            parallel,
            no_scaling,
        } => {
            let threads = if parallel {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            } else {
                1
            };
            let opts = BenchOptions {
                batch,
                batches,
                warmup,
                threads,
                scaling: !no_scaling,
            };
            let r = commands::bench(mhsa.as_deref(), baseline.as_deref(), &opts)?;
            print!("{}", commands::to_json(&r));
        }
        Command::Score {
            reference,
            pred,
            frames,
            theta,
            csv,
        } => {
            let s = commands::score(&reference, &pred, frames, theta)?;
            if let Some(path) = csv {
                grid::write_csv(&path, &SCORE_HEADER, &[grid::score_row("score", 0, &s)])?;
            }
            print!("{}", commands::to_json(&s));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
