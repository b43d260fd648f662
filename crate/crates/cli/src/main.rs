//! Command-line entry point wiring the synth, ingest, train, eval, and
//! pitch-control workflows into reproducible runs. Every command reads one
//! TOML config (flags override it), writes its outputs plus a manifest with
//! the effective config hash, and exits non-zero with a single-line JSON
//! error on failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pitchflow::config::RunConfig;
use pitchflow::models::Arch;
use pitchflow::pipeline::{self, GridSource};
use pitchflow::Error;

#[derive(Parser)]
#[command(
    name = "pitchflow",
    version,
    about = "Velocity completion for event-time soccer snapshots, with PPCF/OBSO evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the synth and training seeds.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of tracking and event CSVs.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for the corpus.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse a corpus directory into frame/window datasets with splits.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory holding match_*_tracking.csv / match_*_events.csv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one architecture on an ingested dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Architecture name (see --help for the list).
        #[arg(long)]
        arch: String,
        /// Ingested dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a velocity source on the test split (RMSE + histogram).
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        arch: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained checkpoint; not needed for rule_based.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pitch-control grid for one test event.
    Ppcf {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Index into the aligned test set.
        #[arg(long)]
        event: usize,
        /// Velocity source: true, rule, or model.
        #[arg(long, default_value = "true")]
        source: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Off-ball scoring opportunity grid for one test event.
    Obso {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        event: usize,
        #[arg(long, default_value = "true")]
        source: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare rule-based vs model completions through PPCF/OBSO errors.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        arch: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render a grid CSV as a PPM heatmap.
    Heatmap {
        /// Grid CSV produced by the ppcf/obso commands.
        #[arg(long)]
        grid: PathBuf,
        /// Output image path (.ppm).
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { cfg, out } => {
            let cfg = cfg.load()?;
            let manifest = pipeline::run_synth(&cfg, &out)?;
            println!(
                "synth: {} matches, {} frames each, events per match {:?}",
                manifest.n_matches, manifest.frames_per_match, manifest.events_per_match
            );
        }
        Command::Ingest { cfg, data, out } => {
            let cfg = cfg.load()?;
            let (_, manifest) = pipeline::run_ingest(&cfg, &data, &out)?;
            println!(
                "ingest: {} matches, counts {:?}, dropped {}",
                manifest.n_matches,
                manifest.counts,
                manifest.drops.total()
            );
        }
        Command::Train {
            cfg,
            arch,
            data,
            out,
        } => {
            let cfg = cfg.load()?;
            let arch = Arch::parse(&arch)?;
            let (state, log) = pipeline::run_train(&cfg, arch, &data, &out)?;
            println!(
                "train {}: {} parameters, {} epochs, best val loss {:.6} at epoch {}",
                arch.name(),
                state.total_params(),
                log.epochs.len(),
                log.best_val_loss,
                log.best_epoch
            );
        }
        Command::Eval {
            cfg,
            arch,
            data,
            out,
            checkpoint,
        } => {
            let cfg = cfg.load()?;
            let arch = Arch::parse(&arch)?;
            let report = pipeline::run_eval(&cfg, arch, checkpoint.as_deref(), &data, &out)?;
            println!(
                "eval {}: rmse {:.4} m/s over {} events ({} inferences)",
                report.source, report.rmse, report.n_events, report.n_inferences
            );
        }
        Command::Ppcf {
            cfg,
            data,
            out,
            event,
            source,
            checkpoint,
        } => {
            let cfg = cfg.load()?;
            let source = GridSource::parse(&source)?;
            let summary = pipeline::run_ppcf(&cfg, &data, event, source, checkpoint.as_deref(), &out)?;
            println!(
                "ppcf event {}: {} un-converged cells",
                summary.event_index, summary.unconverged_cells
            );
        }
        Command::Obso {
            cfg,
            data,
            out,
            event,
            source,
            checkpoint,
        } => {
            let cfg = cfg.load()?;
            let source = GridSource::parse(&source)?;
            let summary = pipeline::run_obso(&cfg, &data, event, source, checkpoint.as_deref(), &out)?;
            println!(
                "obso event {}: total scoring probability {:.6}",
                summary.event_index,
                summary.total.unwrap_or(0.0)
            );
        }
        Command::Compare {
            cfg,
            arch,
            data,
            out,
            checkpoint,
        } => {
            let cfg = cfg.load()?;
            let arch = Arch::parse(&arch)?;
            let report = pipeline::run_compare(&cfg, arch, checkpoint.as_deref(), &data, &out)?;
            println!(
                "compare over {} events: ppcf mean rule {:.4} model {:.4} (wins r/m/t {}/{}/{}), obso mean rule {:.6} model {:.6} (wins r/m/t {}/{}/{})",
                report.rows.len(),
                report.ppcf_rule.mean,
                report.ppcf_model.mean,
                report.ppcf_wins.rule,
                report.ppcf_wins.model,
                report.ppcf_wins.ties,
                report.obso_rule.mean,
                report.obso_model.mean,
                report.obso_wins.rule,
                report.obso_wins.model,
                report.obso_wins.ties,
            );
        }
        Command::Heatmap { grid, out } => {
            pipeline::run_heatmap(&grid, &out)?;
            println!("heatmap written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({ "error": err.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
