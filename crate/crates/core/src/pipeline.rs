//! End-to-end workflows shared by the CLI and the acceptance suite: each
//! step writes its outputs plus a manifest carrying the config hash and
//! seed, so identical configurations reproduce identical artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ingest::{self, Corpus};
use crate::models::{Arch, ModelSpec, ModelState};
use crate::pitch_control::{
    self, write_grid_csv, write_heatmap_ppm, ComparisonReport, GameStateSnapshot,
};
use crate::synth;
use crate::training::{self, EvalReport, TrainingLog, VelocitySource};
use crate::types::{Split, Vec2};

/// Written as `manifest.json` into every command's output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

impl RunManifest {
    fn new(command: &str, cfg: &RunConfig, seed: u64) -> RunManifest {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }
}

/// Generates the synthetic corpus CSVs.
pub fn run_synth(cfg: &RunConfig, out_dir: &Path) -> Result<synth::SynthManifest> {
    cfg.validate()?;
    let manifest = synth::write_corpus(&cfg.synth, &cfg.pitch, out_dir)?;
    RunManifest::new("synth", cfg, cfg.synth.seed).write(out_dir)?;
    Ok(manifest)
}

/// Parses a corpus directory into datasets and writes them with a manifest.
pub fn run_ingest(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<(Corpus, ingest::IngestManifest)> {
    cfg.validate()?;
    let (corpus, mut manifest) = ingest::ingest_dir(data_dir, &cfg.ingest, &cfg.pitch)?;
    manifest.config_hash = cfg.hash();
    ingest::write_corpus(out_dir, &corpus, &manifest)?;
    RunManifest::new("ingest", cfg, cfg.synth.seed).write(out_dir)?;
    Ok((corpus, manifest))
}

/// Trains one architecture on an ingested dataset directory and writes the
/// best checkpoint plus the per-epoch log.
pub fn run_train(
    cfg: &RunConfig,
    arch: Arch,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<(ModelState, TrainingLog)> {
    cfg.validate()?;
    let (corpus, _) = ingest::read_corpus(dataset_dir)?;
    let spec = ModelSpec { arch, ..cfg.model };
    let (state, log) = training::train(&spec, &corpus, &cfg.train, &cfg.pitch)?;
    std::fs::create_dir_all(out_dir)?;
    state.save(&out_dir.join("checkpoint.json"), &cfg.hash())?;
    log.write_csv(&out_dir.join("training_log.csv"))?;
    RunManifest::new("train", cfg, cfg.train.seed).write(out_dir)?;
    Ok((state, log))
}

/// Loads a checkpoint and checks it matches the requested architecture.
pub fn load_checkpoint(path: &Path, arch: Arch) -> Result<ModelState> {
    let (state, _) = ModelState::load(path)?;
    if state.spec.arch != arch {
        return Err(Error::Model(format!(
            "checkpoint {} holds arch {}, requested {}",
            path.display(),
            state.spec.arch.name(),
            arch.name()
        )));
    }
    Ok(state)
}

/// Evaluates one velocity source on the test split and writes the report.
pub fn run_eval(
    cfg: &RunConfig,
    arch: Arch,
    checkpoint: Option<&Path>,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<EvalReport> {
    cfg.validate()?;
    let (corpus, _) = ingest::read_corpus(dataset_dir)?;
    let state;
    let source = match arch {
        Arch::RuleBased => VelocitySource::Rule(&cfg.rule),
        _ => {
            let path = checkpoint.ok_or_else(|| {
                Error::Config(format!("arch {} needs --checkpoint", arch.name()))
            })?;
            state = load_checkpoint(path, arch)?;
            VelocitySource::Model(&state)
        }
    };
    let report = training::evaluate_rmse(
        &source,
        &corpus,
        &cfg.pitch,
        cfg.eval.n_inferences,
        cfg.train.seed,
    )?;
    std::fs::create_dir_all(out_dir)?;
    report.write(out_dir)?;
    RunManifest::new("eval", cfg, cfg.train.seed).write(out_dir)?;
    Ok(report)
}

/// Which velocities feed a grid computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridSource {
    Truth,
    Rule,
    Model,
}

impl GridSource {
    pub fn parse(name: &str) -> Result<GridSource> {
        match name {
            "true" | "truth" => Ok(GridSource::Truth),
            "rule" => Ok(GridSource::Rule),
            "model" => Ok(GridSource::Model),
            other => Err(Error::Config(format!(
                "unknown velocity source {other:?}; valid: true, rule, model"
            ))),
        }
    }
}

fn snapshot_for_event(
    cfg: &RunConfig,
    dataset_dir: &Path,
    event: usize,
    source: GridSource,
    checkpoint: Option<&Path>,
) -> Result<(GameStateSnapshot, u32)> {
    let (corpus, _) = ingest::read_corpus(dataset_dir)?;
    let windows = corpus.windows_of(Split::Test);
    let window = windows.get(event).ok_or_else(|| {
        Error::Config(format!(
            "event {event} out of range; test set has {} events",
            windows.len()
        ))
    })?;
    let target = window.target();
    let velocities: Vec<Vec2> = match source {
        GridSource::Truth => target.player_velocities(),
        GridSource::Rule => crate::models::rule_based_velocity(target, &cfg.rule),
        GridSource::Model => {
            let path = checkpoint
                .ok_or_else(|| Error::Config("model source needs --checkpoint".into()))?;
            let (state, _) = ModelState::load(path)?;
            let vs = VelocitySource::Model(&state);
            let mut rng = crate::types::substream(cfg.train.seed, 0x917d);
            vs.complete(window, &cfg.pitch, Some(&mut rng))?
        }
    };
    let snapshot = GameStateSnapshot::from_frame(target, Some(&velocities))?;
    Ok((snapshot, target.event_index))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSummary {
    pub event_index: u32,
    pub kind: String,
    /// OBSO only: total scoring probability.
    pub total: Option<f64>,
    pub unconverged_cells: usize,
}

/// Computes a PPCF grid for one test event and writes CSV + PPM + manifest.
pub fn run_ppcf(
    cfg: &RunConfig,
    dataset_dir: &Path,
    event: usize,
    source: GridSource,
    checkpoint: Option<&Path>,
    out_dir: &Path,
) -> Result<GridSummary> {
    cfg.validate()?;
    let (snapshot, event_index) = snapshot_for_event(cfg, dataset_dir, event, source, checkpoint)?;
    let (grid, unconverged) = pitch_control::ppcf_grid(&snapshot, &cfg.pitch, &cfg.ppcf)?;
    std::fs::create_dir_all(out_dir)?;
    write_grid_csv(&grid, &out_dir.join("ppcf.csv"))?;
    write_heatmap_ppm(&grid, &out_dir.join("ppcf.ppm"))?;
    let summary = GridSummary {
        event_index,
        kind: "ppcf".into(),
        total: None,
        unconverged_cells: unconverged,
    };
    let f = std::fs::File::create(out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &summary)?;
    RunManifest::new("ppcf", cfg, cfg.train.seed).write(out_dir)?;
    Ok(summary)
}

/// Computes an OBSO grid for one test event and writes CSV + PPM + manifest.
pub fn run_obso(
    cfg: &RunConfig,
    dataset_dir: &Path,
    event: usize,
    source: GridSource,
    checkpoint: Option<&Path>,
    out_dir: &Path,
) -> Result<GridSummary> {
    cfg.validate()?;
    let (snapshot, event_index) = snapshot_for_event(cfg, dataset_dir, event, source, checkpoint)?;
    let result = pitch_control::obso_grid(
        &snapshot,
        &cfg.pitch,
        &cfg.ppcf,
        cfg.space.transition_sigma,
        cfg.space.scoring_alpha,
    )?;
    std::fs::create_dir_all(out_dir)?;
    write_grid_csv(&result.grid, &out_dir.join("obso.csv"))?;
    write_heatmap_ppm(&result.grid, &out_dir.join("obso.ppm"))?;
    let summary = GridSummary {
        event_index,
        kind: "obso".into(),
        total: Some(result.total),
        unconverged_cells: result.unconverged_cells,
    };
    let f = std::fs::File::create(out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &summary)?;
    RunManifest::new("obso", cfg, cfg.train.seed).write(out_dir)?;
    Ok(summary)
}

/// Runs the full completion comparison over the test set and writes the
/// per-event CSV and the summary.
pub fn run_compare(
    cfg: &RunConfig,
    arch: Arch,
    checkpoint: Option<&Path>,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<ComparisonReport> {
    cfg.validate()?;
    let (corpus, _) = ingest::read_corpus(dataset_dir)?;
    let windows = corpus.windows_of(Split::Test);
    let state;
    let source = match arch {
        Arch::RuleBased => {
            return Err(Error::Config(
                "compare pits a model against the rule baseline; pass a model arch".into(),
            ))
        }
        _ => {
            let path = checkpoint.ok_or_else(|| {
                Error::Config(format!("arch {} needs --checkpoint", arch.name()))
            })?;
            state = load_checkpoint(path, arch)?;
            VelocitySource::Model(&state)
        }
    };
    let report = pitch_control::compare_completions(
        windows,
        &source,
        &cfg.rule,
        &cfg.pitch,
        &cfg.ppcf,
        cfg.space.transition_sigma,
        cfg.space.scoring_alpha,
        cfg.train.seed,
    )?;
    std::fs::create_dir_all(out_dir)?;
    report.write_csv(&out_dir.join("comparison.csv"))?;
    let f = std::fs::File::create(out_dir.join("comparison_summary.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &report)?;
    RunManifest::new("compare", cfg, cfg.train.seed).write(out_dir)?;
    Ok(report)
}

/// Renders a previously written grid CSV as a PPM heatmap.
pub fn run_heatmap(grid_csv: &Path, out_path: &Path) -> Result<()> {
    let grid = pitch_control::read_grid_csv(grid_csv)?;
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_heatmap_ppm(&grid, out_path)
}
