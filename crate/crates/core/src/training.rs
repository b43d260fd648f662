//! Loss computation, the training loop (Adam, teacher forcing, early
//! stopping), RMSE evaluation with repeated inference, and the speed
//! histogram export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{OptimState, Tape, Tensor, Value};
use crate::error::{Error, Result};
use crate::ingest::Corpus;
use crate::models::{
    self, featurize, model_forward, rule_based_velocity, Arch, BatchFeatures, BnMode,
    FrameFeatures, LatentMode, ModelSpec, ModelState, NoiseStream, RuleConfig, Sample,
};
use crate::types::{substream, EventFrame, PitchSpec, Split, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_epochs: 200,
            patience: 20,
            lr: 1e-4,
            seed: 0,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.lr <= 0.0 || self.grad_clip <= 0.0
        {
            return Err(Error::Config("train config values must be positive".into()));
        }
        Ok(())
    }
}

/// Loss over a frame batch: mean over samples of the per-player mean
/// squared velocity error plus the KL term (zero when absent).
/// With predictions [B, 44], the per-sample term (1/22) sum_j |dv_j|^2
/// equals twice the entrywise MSE.
pub fn loss_frames(tape: &mut Tape, pred: Value, target: Value, kl: Option<Value>) -> Result<Value> {
    let mse = tape.mse(pred, target)?;
    let recon = tape.scale(mse, 2.0);
    match kl {
        Some(kl) => tape.add(recon, kl),
        None => Ok(recon),
    }
}

/// Loss over a window batch: the frame loss additionally averaged over the
/// k window steps.
pub fn loss_windows(
    tape: &mut Tape,
    preds: &[Value],
    targets: &[Value],
    kls: &[Value],
) -> Result<Value> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "loss_windows: {} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if !kls.is_empty() && kls.len() != preds.len() {
        return Err(Error::Shape(format!(
            "loss_windows: {} kl terms for {} steps",
            kls.len(),
            preds.len()
        )));
    }
    let mut acc: Option<Value> = None;
    for (t, (&p, &y)) in preds.iter().zip(targets).enumerate() {
        let kl = kls.get(t).copied();
        let step = loss_frames(tape, p, y, kl)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, step)?,
            None => step,
        });
    }
    Ok(tape.scale(acc.expect("non-empty"), 1.0 / preds.len() as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainingLog {
    /// CSV with header `epoch,train_loss,val_loss`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,train_loss,val_loss")?;
        for e in &self.epochs {
            writeln!(f, "{},{:.12},{:.12}", e.epoch, e.train_loss, e.val_loss)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Featurized training data for one dataset kind.
enum Prepared {
    Frames(Vec<FrameFeatures>),
    Windows(Vec<Vec<FrameFeatures>>),
}

impl Prepared {
    fn len(&self) -> usize {
        match self {
            Prepared::Frames(v) => v.len(),
            Prepared::Windows(v) => v.len(),
        }
    }
}

fn prepare(
    corpus: &Corpus,
    split: Split,
    spec: &ModelSpec,
    pitch: &PitchSpec,
) -> Result<Prepared> {
    let bv = spec.use_ball_velocity_input;
    if spec.arch.is_recurrent() {
        let windows = corpus.windows_of(split);
        let feats = windows
            .iter()
            .map(|w| {
                w.frames
                    .iter()
                    .map(|f| featurize(f, pitch, bv))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared::Windows(feats))
    } else {
        let frames = corpus.frames_of(split);
        let feats = frames
            .iter()
            .map(|f| featurize(f, pitch, bv))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared::Frames(feats))
    }
}

/// Samples per forward pass: graph windows carry ~500-row edge tensors per
/// step, so they run sample-at-a-time with gradient accumulation.
fn chunk_size(arch: Arch) -> usize {
    match (arch.is_graph(), arch.is_recurrent()) {
        (true, true) => 1,
        (true, false) => 32,
        _ => usize::MAX,
    }
}

struct ChunkResult {
    loss: f64,
    n: usize,
    grads: BTreeMap<String, Tensor>,
}

/// Forward + backward over one chunk of sample indices.
fn run_chunk(
    state: &mut ModelState,
    prepared: &Prepared,
    idx: &[usize],
    phase_train: bool,
    latent: LatentMode,
    noise: &mut NoiseStream,
    want_grads: bool,
) -> Result<ChunkResult> {
    let spec = state.spec;
    let mut tape = Tape::new();
    let bn = if phase_train {
        BnMode::Train(&mut state.bn)
    } else {
        BnMode::Eval(&state.bn)
    };
    let (out, loss) = match prepared {
        Prepared::Frames(all) => {
            let feats: Vec<&FrameFeatures> = idx.iter().map(|&i| &all[i]).collect();
            let targets: Vec<&Tensor> = feats.iter().map(|f| &f.target_vel).collect();
            let target = stack_targets(&mut tape, &targets)?;
            let out = model_forward(
                &spec,
                &state.params,
                bn,
                &mut tape,
                &BatchFeatures::Frames(&feats),
                latent,
                noise,
                true,
            )?;
            let kl = out.kls.first().copied();
            let loss = loss_frames(&mut tape, out.preds[0], target, kl)?;
            (out, loss)
        }
        Prepared::Windows(all) => {
            let feats: Vec<Vec<&FrameFeatures>> = idx
                .iter()
                .map(|&i| all[i].iter().collect())
                .collect();
            let k = feats[0].len();
            let mut targets = Vec::with_capacity(k);
            for t in 0..k {
                let step_targets: Vec<&Tensor> =
                    feats.iter().map(|w| &w[t].target_vel).collect();
                targets.push(stack_targets(&mut tape, &step_targets)?);
            }
            let out = model_forward(
                &spec,
                &state.params,
                bn,
                &mut tape,
                &BatchFeatures::Windows(&feats),
                latent,
                noise,
                true,
            )?;
            let loss = loss_windows(&mut tape, &out.preds, &targets, &out.kls)?;
            (out, loss)
        }
    };
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = if want_grads {
        let g = tape.backward(loss)?;
        out.bound.grads(&tape, &g)
    } else {
        BTreeMap::new()
    };
    Ok(ChunkResult {
        loss: loss_value,
        n: idx.len(),
        grads,
    })
}

fn stack_targets(tape: &mut Tape, rows: &[&Tensor]) -> Result<Value> {
    let cols = rows[0].cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Ok(tape.leaf(Tensor::from_vec(rows.len(), cols, data)?))
}

/// Mean loss over a whole split without gradients (used for validation).
fn split_loss(
    state: &mut ModelState,
    prepared: &Prepared,
    chunk: usize,
    latent: LatentMode,
) -> Result<f64> {
    let n = prepared.len();
    let mut total = 0.0;
    let mut seen = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        // Validation uses distribution means; no sampling noise.
        let r = run_chunk(state, prepared, &idx, false, latent, &mut NoiseStream::Mean, false)?;
        total += r.loss * r.n as f64;
        seen += r.n;
        start = end;
    }
    Ok(total / seen.max(1) as f64)
}

/// Trains one architecture on the matching dataset kind. Deterministic for
/// a fixed `(spec, corpus, cfg)`: identical runs produce identical logs and
/// parameters. Returns the best-validation checkpoint.
pub fn train(
    spec: &ModelSpec,
    corpus: &Corpus,
    cfg: &TrainConfig,
    pitch: &PitchSpec,
) -> Result<(ModelState, TrainingLog)> {
    cfg.validate()?;
    spec.validate()?;
    if spec.arch == Arch::RuleBased {
        return Err(Error::Model("rule_based has nothing to train".into()));
    }
    let train_data = prepare(corpus, Split::Train, spec, pitch)?;
    let val_data = prepare(corpus, Split::Val, spec, pitch)?;
    if train_data.len() == 0 || val_data.len() == 0 {
        return Err(Error::Data(format!(
            "empty split: train {} / val {}",
            train_data.len(),
            val_data.len()
        )));
    }

    let mut state = ModelState::init(spec, &mut substream(cfg.seed, 0x11))?;
    let mut optim = OptimState::new(cfg.lr);
    let latent = if spec.arch.is_variational() {
        LatentMode::Posterior
    } else {
        LatentMode::Prior
    };
    let chunk = chunk_size(spec.arch).min(cfg.batch_size);

    let mut log = TrainingLog::default();
    let mut best_state = state.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut noise_counter = 0u64;

    for epoch in 0..cfg.max_epochs {
        // Seeded shuffle per epoch.
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        let mut shuffle_rng = substream(cfg.seed, 0x1000 + epoch as u64);
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: BTreeMap<String, Tensor> = state
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.rows(), v.cols())))
                .collect();
            let mut batch_loss = 0.0;
            for piece in batch.chunks(chunk) {
                noise_counter += 1;
                let mut noise =
                    NoiseStream::Sample(substream(cfg.seed ^ 0x6e6f6973, noise_counter));
                let r = run_chunk(&mut state, &train_data, piece, true, latent, &mut noise, true)?;
                let weight = r.n as f64 / batch.len() as f64;
                for (name, g) in &r.grads {
                    acc.get_mut(name).expect("same layout").scaled_add_assign(weight, g);
                }
                batch_loss += r.loss * r.n as f64;
            }
            batch_loss /= batch.len() as f64;
            epoch_loss += batch_loss * batch.len() as f64;
            epoch_n += batch.len();

            // Global gradient-norm clip.
            let norm_sq: f64 = acc.values().map(Tensor::frobenius_sq).sum();
            let norm = norm_sq.sqrt();
            if norm > cfg.grad_clip {
                let scale = cfg.grad_clip / norm;
                for g in acc.values_mut() {
                    g.scale_in_place(scale);
                }
            }
            optim.step_map(&mut state.params, &acc)?;
        }

        let train_loss = epoch_loss / epoch_n.max(1) as f64;
        let val_loss = split_loss(&mut state, &val_data, chunk.max(32), latent)?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_state = state.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    log.best_epoch = best_epoch;
    log.best_val_loss = best_val;
    Ok((best_state, log))
}

/// Where completed velocities come from during evaluation.
pub enum VelocitySource<'a> {
    Rule(&'a RuleConfig),
    Model(&'a ModelState),
    /// Ground truth pass-through (comparison harness upper bound).
    Truth,
}

impl VelocitySource<'_> {
    pub fn name(&self) -> String {
        match self {
            VelocitySource::Rule(_) => "rule_based".into(),
            VelocitySource::Model(m) => m.spec.arch.name().into(),
            VelocitySource::Truth => "truth".into(),
        }
    }

    /// Completes velocities for one aligned test event. Window sources see
    /// the full window; frame sources only its target.
    pub fn complete(
        &self,
        window: &crate::types::EventWindow,
        pitch: &PitchSpec,
        rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<Vec<Vec2>> {
        let target = window.target();
        match self {
            VelocitySource::Truth => Ok(target.player_velocities()),
            VelocitySource::Rule(cfg) => Ok(rule_based_velocity(target, cfg)),
            VelocitySource::Model(state) => {
                let sample = if state.spec.arch.is_recurrent() {
                    Sample::Window(window)
                } else {
                    Sample::Frame(target)
                };
                models::predict_velocities(state, pitch, &sample, rng)
            }
        }
    }
}

pub const HISTOGRAM_MAX_SPEED: f64 = 12.0;
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.5;
pub const HISTOGRAM_BINS: usize = 24;

/// Player-speed histogram over fixed edges [0.0, 0.5, ..., 12.0] m/s;
/// speeds beyond the last edge land in the final bin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeedHistogram {
    pub true_counts: Vec<u64>,
    pub predicted_counts: Vec<u64>,
}

impl Default for SpeedHistogram {
    fn default() -> Self {
        SpeedHistogram {
            true_counts: vec![0; HISTOGRAM_BINS],
            predicted_counts: vec![0; HISTOGRAM_BINS],
        }
    }
}

impl SpeedHistogram {
    fn bin_of(speed: f64) -> usize {
        ((speed / HISTOGRAM_BIN_WIDTH) as usize).min(HISTOGRAM_BINS - 1)
    }

    pub fn add_true(&mut self, speed: f64) {
        self.true_counts[Self::bin_of(speed)] += 1;
    }

    pub fn add_predicted(&mut self, speed: f64) {
        self.predicted_counts[Self::bin_of(speed)] += 1;
    }

    /// CSV with header `bin_lo,bin_hi,true_count,predicted_count`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "bin_lo,bin_hi,true_count,predicted_count")?;
        for b in 0..HISTOGRAM_BINS {
            writeln!(
                f,
                "{:.1},{:.1},{},{}",
                b as f64 * HISTOGRAM_BIN_WIDTH,
                (b + 1) as f64 * HISTOGRAM_BIN_WIDTH,
                self.true_counts[b],
                self.predicted_counts[b]
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    /// Mean over `n_inferences` of the per-inference RMSE (m/s).
    pub rmse: f64,
    pub rmse_per_inference: Vec<f64>,
    /// Per test event, averaged across inferences.
    pub per_event_rmse: Vec<f64>,
    pub n_inferences: usize,
    pub n_events: usize,
    /// Speeds from the first inference vs the true speeds.
    pub histogram: SpeedHistogram,
}

impl EvalReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("report.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        self.histogram.write_csv(&dir.join("histogram.csv"))?;
        Ok(())
    }
}

/// Root mean squared velocity error for one event: the per-player mean of
/// squared vector errors, under a square root.
pub fn event_rmse(predicted: &[Vec2], truth: &[Vec2]) -> f64 {
    debug_assert_eq!(predicted.len(), truth.len());
    let sum: f64 = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let d = *p - *t;
            d.x * d.x + d.y * d.y
        })
        .sum();
    (sum / predicted.len() as f64).sqrt()
}

/// Evaluates a velocity source on the aligned test windows: per event RMSE,
/// averaged over events, repeated `n_inferences` times (stochastic models
/// draw fresh prior samples per run; deterministic ones have zero spread).
pub fn evaluate_rmse(
    source: &VelocitySource,
    corpus: &Corpus,
    pitch: &PitchSpec,
    n_inferences: usize,
    seed: u64,
) -> Result<EvalReport> {
    let windows = corpus.windows_of(Split::Test);
    if windows.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    if n_inferences == 0 {
        return Err(Error::Config("n_inferences must be at least 1".into()));
    }
    let stochastic = matches!(source, VelocitySource::Model(m) if m.spec.arch.is_stochastic());
    let mut rmse_per_inference = Vec::with_capacity(n_inferences);
    let mut per_event_acc = vec![0.0; windows.len()];
    let mut histogram = SpeedHistogram::default();

    for run in 0..n_inferences {
        let mut rng = substream(seed, 0xe7a1 + run as u64);
        let mut total = 0.0;
        for (i, window) in windows.iter().enumerate() {
            let truth = window.target().player_velocities();
            let pred = source.complete(
                window,
                pitch,
                if stochastic { Some(&mut rng) } else { None },
            )?;
            let e = event_rmse(&pred, &truth);
            total += e;
            per_event_acc[i] += e;
            if run == 0 {
                for (p, t) in pred.iter().zip(&truth) {
                    histogram.add_predicted(p.norm());
                    histogram.add_true(t.norm());
                }
            }
        }
        rmse_per_inference.push(total / windows.len() as f64);
    }
    let rmse = rmse_per_inference.iter().sum::<f64>() / n_inferences as f64;
    let per_event_rmse = per_event_acc
        .into_iter()
        .map(|s| s / n_inferences as f64)
        .collect();
    Ok(EvalReport {
        source: source.name(),
        rmse,
        rmse_per_inference,
        per_event_rmse,
        n_inferences,
        n_events: windows.len(),
        histogram,
    })
}

/// Evaluates a non-recurrent source on the frame test set directly (used
/// when no window data exists; test sets are aligned so results match
/// [`evaluate_rmse`] for frame sources).
pub fn evaluate_rmse_frames(
    source: &VelocitySource,
    frames: &[EventFrame],
    pitch: &PitchSpec,
    n_inferences: usize,
    seed: u64,
) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let stochastic = matches!(source, VelocitySource::Model(m) if m.spec.arch.is_stochastic());
    let mut rmse_per_inference = Vec::with_capacity(n_inferences);
    let mut per_event_acc = vec![0.0; frames.len()];
    let mut histogram = SpeedHistogram::default();
    for run in 0..n_inferences {
        let mut rng = substream(seed, 0xe7a1 + run as u64);
        let mut total = 0.0;
        for (i, frame) in frames.iter().enumerate() {
            let truth = frame.player_velocities();
            let pred = match source {
                VelocitySource::Truth => truth.clone(),
                VelocitySource::Rule(cfg) => rule_based_velocity(frame, cfg),
                VelocitySource::Model(state) => models::predict_velocities(
                    state,
                    pitch,
                    &Sample::Frame(frame),
                    if stochastic { Some(&mut rng) } else { None },
                )?,
            };
            let e = event_rmse(&pred, &truth);
            total += e;
            per_event_acc[i] += e;
            if run == 0 {
                for (p, t) in pred.iter().zip(&truth) {
                    histogram.add_predicted(p.norm());
                    histogram.add_true(t.norm());
                }
            }
        }
        rmse_per_inference.push(total / frames.len() as f64);
    }
    let rmse = rmse_per_inference.iter().sum::<f64>() / n_inferences as f64;
    Ok(EvalReport {
        source: source.name(),
        rmse,
        rmse_per_inference,
        per_event_rmse: per_event_acc
            .into_iter()
            .map(|s| s / n_inferences as f64)
            .collect(),
        n_inferences,
        n_events: frames.len(),
        histogram,
    })
}
