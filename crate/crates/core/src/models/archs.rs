//! Forward passes for every architecture behind one dispatch, plus the
//! Gaussian-head utilities shared by the variational variants.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Value};
use crate::error::{Error, Result};
use crate::models::blocks::{BnMode, Ctx};
use crate::models::features::{
    featurize, velocity_to_physical, FrameFeatures, GraphLayout, NUM_NODES, TARGET_WIDTH,
};
use crate::models::params::{BoundParams, ModelState};
use crate::models::{Arch, ModelSpec};
use crate::types::{EventFrame, EventWindow, PitchSpec, Vec2, NUM_PLAYERS};

/// Keeps softplus outputs strictly positive even when the pre-activation
/// underflows.
const STD_FLOOR: f64 = 1e-8;

/// One sample of either dataset kind.
pub enum Sample<'a> {
    Frame(&'a EventFrame),
    Window(&'a EventWindow),
}

/// Featurized inputs for one forward pass.
pub enum BatchFeatures<'a> {
    /// Non-recurrent architectures; one prediction per frame.
    Frames(&'a [&'a FrameFeatures]),
    /// Recurrent architectures; all windows must share the same length.
    Windows(&'a [Vec<&'a FrameFeatures>]),
}

/// Where the latent z comes from for variational architectures.
/// `Posterior` (training) samples the encoder and pays the KL term;
/// `Prior` (inference) samples the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    Posterior,
    Prior,
}

/// Source of reparameterization noise. `Record` keeps the drawn tensors so
/// a later `Replay` pass (e.g. a finite-difference probe) sees identical
/// noise; `Mean` suppresses sampling and uses the distribution mean.
pub enum NoiseStream {
    Sample(ChaCha8Rng),
    Record(ChaCha8Rng, Vec<Tensor>),
    Replay(Vec<Tensor>, usize),
    Mean,
}

impl NoiseStream {
    fn draw(&mut self, rows: usize, cols: usize) -> Option<Tensor> {
        match self {
            NoiseStream::Sample(rng) => Some(standard_normal(rows, cols, rng)),
            NoiseStream::Record(rng, drawn) => {
                let t = standard_normal(rows, cols, rng);
                drawn.push(t.clone());
                Some(t)
            }
            NoiseStream::Replay(drawn, next) => {
                let t = drawn
                    .get(*next)
                    .expect("replay noise stream exhausted")
                    .clone();
                *next += 1;
                assert_eq!(t.shape(), (rows, cols), "replayed noise shape changed");
                Some(t)
            }
            NoiseStream::Mean => None,
        }
    }

    pub fn into_recorded(self) -> Vec<Tensor> {
        match self {
            NoiseStream::Record(_, drawn) => drawn,
            _ => Vec::new(),
        }
    }
}

fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Per-step predictions (and per-step KL terms for variational models).
#[derive(Debug)]
pub struct ForwardOut {
    /// One `[batch, 44]` tensor per step; frame architectures have one step.
    pub preds: Vec<Value>,
    /// One scalar per step: KL averaged over the batch. Empty for
    /// deterministic architectures and for prior-mode inference.
    pub kls: Vec<Value>,
    pub bound: BoundParams,
}

/// Closed-form KL divergence between diagonal Gaussians q and p, summed
/// over columns and averaged over rows.
pub fn kl_diag_gaussian(
    mean_q: &Tensor,
    std_q: &Tensor,
    mean_p: &Tensor,
    std_p: &Tensor,
) -> Result<f64> {
    if mean_q.shape() != std_q.shape()
        || mean_q.shape() != mean_p.shape()
        || mean_q.shape() != std_p.shape()
    {
        return Err(Error::Shape(format!(
            "kl_diag_gaussian: shapes {:?} {:?} {:?} {:?}",
            mean_q.shape(),
            std_q.shape(),
            mean_p.shape(),
            std_p.shape()
        )));
    }
    if std_q.data().iter().chain(std_p.data()).any(|&s| s <= 0.0) {
        return Err(Error::Model(
            "kl_diag_gaussian: standard deviations must be positive".into(),
        ));
    }
    let (rows, _cols) = mean_q.shape();
    let mut total = 0.0;
    for i in 0..mean_q.len() {
        let (mq, sq) = (mean_q.data()[i], std_q.data()[i]);
        let (mp, sp) = (mean_p.data()[i], std_p.data()[i]);
        total += (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
    }
    Ok(total / rows as f64)
}

/// Tape-side twin of [`kl_diag_gaussian`]; same convention.
fn kl_on_tape(tape: &mut Tape, mq: Value, sq: Value, mp: Value, sp: Value) -> Result<Value> {
    let cols = tape.value(mq).cols() as f64;
    let ln_sp = tape.ln(sp);
    let ln_sq = tape.ln(sq);
    let t1 = tape.sub(ln_sp, ln_sq)?;
    let sq2 = tape.mul(sq, sq)?;
    let d = tape.sub(mq, mp)?;
    let d2 = tape.mul(d, d)?;
    let num = tape.add(sq2, d2)?;
    let sp2 = tape.mul(sp, sp)?;
    let den = tape.scale(sp2, 2.0);
    let t2 = tape.div(num, den)?;
    let s = tape.add(t1, t2)?;
    let s = tape.add_scalar(s, -0.5);
    let m = tape.mean_all(s);
    Ok(tape.scale(m, cols))
}

struct GaussHead {
    mean: Value,
    std: Value,
}

fn gauss_head(ctx: &mut Ctx, prefix: &str, x: Value) -> Result<GaussHead> {
    let mean = ctx.linear(&format!("{prefix}.mean"), x)?;
    let pre = ctx.linear(&format!("{prefix}.std"), x)?;
    let sp = ctx.tape.softplus(pre);
    let std = ctx.tape.add_scalar(sp, STD_FLOOR);
    Ok(GaussHead { mean, std })
}

fn sample_z(ctx: &mut Ctx, head: &GaussHead, noise: &mut NoiseStream) -> Result<Value> {
    let (rows, cols) = ctx.tape.value(head.mean).shape();
    match noise.draw(rows, cols) {
        Some(eps) => {
            let e = ctx.tape.leaf(eps);
            let se = ctx.tape.mul(head.std, e)?;
            ctx.tape.add(head.mean, se)
        }
        None => Ok(head.mean),
    }
}

/// Stacks borrowed single-row tensors into one `[n, cols]` leaf.
fn stack_leaf(tape: &mut Tape, rows: &[&Tensor]) -> Result<Value> {
    let cols = rows[0].cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.shape() != (1, cols) {
            return Err(Error::Shape(format!(
                "stack_leaf: expected [1, {cols}], got {:?}",
                r.shape()
            )));
        }
        data.extend_from_slice(r.data());
    }
    Ok(tape.leaf(Tensor::from_vec(rows.len(), cols, data)?))
}

/// Per-node velocity columns for the variational encoders: row 0 (ball)
/// zero, player rows carry the normalized true velocity.
fn velocity_node_columns(target_vel: &Tensor) -> Tensor {
    let mut v = Tensor::zeros(NUM_NODES, 2);
    for j in 0..NUM_PLAYERS {
        v.set(1 + j, 0, target_vel.get(0, 2 * j));
        v.set(1 + j, 1, target_vel.get(0, 2 * j + 1));
    }
    v
}

fn player_rows() -> Rc<Vec<usize>> {
    Rc::new((1..NUM_NODES).collect())
}

/// Runs one architecture forward over a featurized batch.
///
/// `teacher` controls the recurrence feedback: ground-truth velocities when
/// true (training), the model's own predictions when false (inference).
pub fn model_forward(
    spec: &ModelSpec,
    params: &BTreeMap<String, Tensor>,
    mut bn: BnMode,
    tape: &mut Tape,
    batch: &BatchFeatures,
    latent: LatentMode,
    noise: &mut NoiseStream,
    teacher: bool,
) -> Result<ForwardOut> {
    let bound = BoundParams::bind(tape, params);
    match (spec.arch.is_recurrent(), batch) {
        (false, BatchFeatures::Frames(feats)) => {
            if feats.is_empty() {
                return Err(Error::Model("empty batch".into()));
            }
            let mut ctx = Ctx {
                tape,
                bound: &bound,
                bn: &mut bn,
            };
            let (pred, kl) = forward_frames(spec, &mut ctx, feats, latent, noise)?;
            Ok(ForwardOut {
                preds: vec![pred],
                kls: kl.into_iter().collect(),
                bound,
            })
        }
        (true, BatchFeatures::Windows(windows)) => {
            if windows.is_empty() {
                return Err(Error::Model("empty batch".into()));
            }
            let k = windows[0].len();
            if k == 0 || windows.iter().any(|w| w.len() != k) {
                return Err(Error::Model(
                    "windows in a batch must share one positive length".into(),
                ));
            }
            let mut ctx = Ctx {
                tape,
                bound: &bound,
                bn: &mut bn,
            };
            let (preds, kls) = if spec.arch.is_graph() {
                forward_graph_windows(spec, &mut ctx, windows, latent, noise, teacher)?
            } else {
                forward_flat_windows(spec, &mut ctx, windows, latent, noise, teacher)?
            };
            Ok(ForwardOut {
                preds,
                kls,
                bound,
            })
        }
        (false, BatchFeatures::Windows(_)) => Err(Error::Model(format!(
            "arch {} consumes single frames, got windows",
            spec.arch.name()
        ))),
        (true, BatchFeatures::Frames(_)) => Err(Error::Model(format!(
            "arch {} consumes event windows, got frames",
            spec.arch.name()
        ))),
    }
}

fn forward_frames(
    spec: &ModelSpec,
    ctx: &mut Ctx,
    feats: &[&FrameFeatures],
    latent: LatentMode,
    noise: &mut NoiseStream,
) -> Result<(Value, Option<Value>)> {
    match spec.arch {
        Arch::Mlp => {
            let xs: Vec<&Tensor> = feats.iter().map(|f| &f.flat).collect();
            let x = stack_leaf(ctx.tape, &xs)?;
            let pred = ctx.mlp_block("mlp", x)?;
            Ok((pred, None))
        }
        Arch::Vae => {
            let xs: Vec<&Tensor> = feats.iter().map(|f| &f.flat).collect();
            let x = stack_leaf(ctx.tape, &xs)?;
            let pri_bb = ctx.mlp_block("pri", x)?;
            let pri = gauss_head(ctx, "pri", pri_bb)?;
            let (z, kl) = match latent {
                LatentMode::Posterior => {
                    let vs: Vec<&Tensor> = feats.iter().map(|f| &f.target_vel).collect();
                    let v = stack_leaf(ctx.tape, &vs)?;
                    let xv = ctx.tape.concat_cols(&[x, v])?;
                    let enc_bb = ctx.mlp_block("enc", xv)?;
                    let enc = gauss_head(ctx, "enc", enc_bb)?;
                    let z = sample_z(ctx, &enc, noise)?;
                    let kl = kl_on_tape(ctx.tape, enc.mean, enc.std, pri.mean, pri.std)?;
                    (z, Some(kl))
                }
                LatentMode::Prior => (sample_z(ctx, &pri, noise)?, None),
            };
            let xz = ctx.tape.concat_cols(&[x, z])?;
            let dec_bb = ctx.mlp_block("dec", xz)?;
            let dec = gauss_head(ctx, "dec", dec_bb)?;
            Ok((dec.mean, kl))
        }
        Arch::Gnn | Arch::GnnAdd | Arch::Vgnn | Arch::VgnnDecAdd => {
            let layout = GraphLayout::new();
            let mut sample_preds = Vec::with_capacity(feats.len());
            let mut sample_kls = Vec::with_capacity(feats.len());
            for f in feats {
                let (pred, kl) = forward_graph_frame(spec, ctx, f, &layout, latent, noise)?;
                let flat = ctx.tape.reshape(pred, 1, TARGET_WIDTH)?;
                sample_preds.push(flat);
                if let Some(kl) = kl {
                    sample_kls.push(kl);
                }
            }
            let pred = ctx.tape.concat_rows(&sample_preds)?;
            let kl = if sample_kls.is_empty() {
                None
            } else {
                Some(mean_of_scalars(ctx.tape, &sample_kls)?)
            };
            Ok((pred, kl))
        }
        other => Err(Error::Model(format!(
            "forward_frames does not handle {}",
            other.name()
        ))),
    }
}

/// One graph pass over a single frame for the non-recurrent graph
/// architectures. Returns per-player predictions [22, 2] and the optional
/// KL scalar.
fn forward_graph_frame(
    spec: &ModelSpec,
    ctx: &mut Ctx,
    f: &FrameFeatures,
    layout: &GraphLayout,
    latent: LatentMode,
    noise: &mut NoiseStream,
) -> Result<(Value, Option<Value>)> {
    let nodes = ctx.tape.leaf(f.nodes.clone());
    let node_flags = ctx.tape.leaf(f.node_flags.clone());
    let edge_flags = ctx.tape.leaf(f.edge_flags.clone());
    let add_feats = if spec.arch.has_add_features() {
        let onehot = ctx.tape.leaf(f.event_onehot.clone());
        let ball_end = ctx.tape.leaf(f.ball_end.clone());
        let fa = ctx.linear("fa", onehot)?;
        let fxe = ctx.linear("fxe", ball_end)?;
        Some((fa, fxe))
    } else {
        None
    };

    match spec.arch {
        Arch::Gnn | Arch::GnnAdd => {
            let o_prime = ctx.gnn_pass(
                "gnn",
                nodes,
                node_flags,
                edge_flags,
                layout.edge_src.clone(),
                layout.edge_dst.clone(),
            )?;
            let players = ctx.tape.gather_rows(o_prime, player_rows())?;
            let readout_in = if spec.arch == Arch::GnnAdd {
                let (fa, fxe) = add_feats.expect("gnn_add has side features");
                let fa_b = ctx.tape.broadcast_rows(fa, NUM_PLAYERS)?;
                let fxe_b = ctx.tape.broadcast_rows(fxe, NUM_PLAYERS)?;
                ctx.tape.concat_cols(&[players, fa_b, fxe_b])?
            } else {
                players
            };
            let pred = ctx.linear("readout", readout_in)?;
            Ok((pred, None))
        }
        Arch::Vgnn | Arch::VgnnDecAdd => {
            let pri_o = ctx.gnn_pass(
                "pri",
                nodes,
                node_flags,
                edge_flags,
                layout.edge_src.clone(),
                layout.edge_dst.clone(),
            )?;
            let pri = gauss_head(ctx, "pri", pri_o)?;
            let (z, kl) = match latent {
                LatentMode::Posterior => {
                    let v_nodes = ctx.tape.leaf(velocity_node_columns(&f.target_vel));
                    let enc_in = ctx.tape.concat_cols(&[nodes, v_nodes])?;
                    let enc_o = ctx.gnn_pass(
                        "enc",
                        enc_in,
                        node_flags,
                        edge_flags,
                        layout.edge_src.clone(),
                        layout.edge_dst.clone(),
                    )?;
                    let enc = gauss_head(ctx, "enc", enc_o)?;
                    let z = sample_z(ctx, &enc, noise)?;
                    let kl = kl_on_tape(ctx.tape, enc.mean, enc.std, pri.mean, pri.std)?;
                    (z, Some(kl))
                }
                LatentMode::Prior => (sample_z(ctx, &pri, noise)?, None),
            };
            // The frame-level variational decoder sees the node inputs too.
            let mut dec_parts = vec![nodes, z];
            if let Some((fa, fxe)) = add_feats {
                let fa_b = ctx.tape.broadcast_rows(fa, NUM_NODES)?;
                let fxe_b = ctx.tape.broadcast_rows(fxe, NUM_NODES)?;
                dec_parts.push(fa_b);
                dec_parts.push(fxe_b);
            }
            let dec_in = ctx.tape.concat_cols(&dec_parts)?;
            let dec_o = ctx.gnn_pass(
                "dec",
                dec_in,
                node_flags,
                edge_flags,
                layout.edge_src.clone(),
                layout.edge_dst.clone(),
            )?;
            let dec_players = ctx.tape.gather_rows(dec_o, player_rows())?;
            let dec = gauss_head(ctx, "dec", dec_players)?;
            Ok((dec.mean, kl))
        }
        other => Err(Error::Model(format!(
            "forward_graph_frame does not handle {}",
            other.name()
        ))),
    }
}

fn mean_of_scalars(tape: &mut Tape, scalars: &[Value]) -> Result<Value> {
    let mut acc = scalars[0];
    for &s in &scalars[1..] {
        acc = tape.add(acc, s)?;
    }
    Ok(tape.scale(acc, 1.0 / scalars.len() as f64))
}

fn forward_flat_windows(
    spec: &ModelSpec,
    ctx: &mut Ctx,
    windows: &[Vec<&FrameFeatures>],
    latent: LatentMode,
    noise: &mut NoiseStream,
    teacher: bool,
) -> Result<(Vec<Value>, Vec<Value>)> {
    let b = windows.len();
    let k = windows[0].len();
    let r = spec.rnn_dim;
    let mut hs: Vec<Value> = (0..spec.num_layer)
        .map(|_| ctx.tape.leaf(Tensor::zeros(b, r)))
        .collect();
    let mut preds = Vec::with_capacity(k);
    let mut kls = Vec::with_capacity(k);
    for t in 0..k {
        let xs: Vec<&Tensor> = windows.iter().map(|w| &w[t].flat).collect();
        let x = stack_leaf(ctx.tape, &xs)?;
        let vs: Vec<&Tensor> = windows.iter().map(|w| &w[t].target_vel).collect();
        let v_true = stack_leaf(ctx.tape, &vs)?;
        let h_last = *hs.last().expect("gru layers");

        let (z, pred, kl) = match spec.arch {
            Arch::Rnn => {
                let enc_in = ctx.tape.concat_cols(&[x, h_last])?;
                let z = ctx.mlp_block("enc", enc_in)?;
                let dec_in = ctx.tape.concat_cols(&[z, h_last])?;
                let pred = ctx.mlp_block("dec", dec_in)?;
                (z, pred, None)
            }
            Arch::Vrnn => {
                let pri_in = ctx.tape.concat_cols(&[x, h_last])?;
                let pri_bb = ctx.mlp_block("pri", pri_in)?;
                let pri = gauss_head(ctx, "pri", pri_bb)?;
                let (z, kl) = match latent {
                    LatentMode::Posterior => {
                        let enc_in = ctx.tape.concat_cols(&[x, v_true, h_last])?;
                        let enc_bb = ctx.mlp_block("enc", enc_in)?;
                        let enc = gauss_head(ctx, "enc", enc_bb)?;
                        let z = sample_z(ctx, &enc, noise)?;
                        let kl = kl_on_tape(ctx.tape, enc.mean, enc.std, pri.mean, pri.std)?;
                        (z, Some(kl))
                    }
                    LatentMode::Prior => (sample_z(ctx, &pri, noise)?, None),
                };
                let dec_in = ctx.tape.concat_cols(&[x, z, h_last])?;
                let dec_bb = ctx.mlp_block("dec", dec_in)?;
                let dec = gauss_head(ctx, "dec", dec_bb)?;
                (z, dec.mean, kl)
            }
            other => {
                return Err(Error::Model(format!(
                    "forward_flat_windows does not handle {}",
                    other.name()
                )))
            }
        };

        let v_fb = if teacher { v_true } else { pred };
        let gru_in = ctx.tape.concat_cols(&[x, z, v_fb])?;
        ctx.gru_step("gru", gru_in, &mut hs)?;
        preds.push(pred);
        if let Some(kl) = kl {
            kls.push(kl);
        }
    }
    Ok((preds, kls))
}

fn forward_graph_windows(
    spec: &ModelSpec,
    ctx: &mut Ctx,
    windows: &[Vec<&FrameFeatures>],
    latent: LatentMode,
    noise: &mut NoiseStream,
    teacher: bool,
) -> Result<(Vec<Value>, Vec<Value>)> {
    let k = windows[0].len();
    let layout = GraphLayout::new();
    // per step, per sample
    let mut step_preds: Vec<Vec<Value>> = vec![Vec::with_capacity(windows.len()); k];
    let mut step_kls: Vec<Vec<Value>> = vec![Vec::with_capacity(windows.len()); k];

    for window in windows {
        let mut hs: Vec<Value> = (0..spec.num_layer)
            .map(|_| ctx.tape.leaf(Tensor::zeros(1, spec.rnn_dim)))
            .collect();
        for (t, f) in window.iter().enumerate() {
            let h_last = *hs.last().expect("gru layers");
            let (pred, z, kl) =
                graph_step(spec, ctx, f, &layout, h_last, latent, noise)?;
            let pred_flat = ctx.tape.reshape(pred, 1, TARGET_WIDTH)?;

            let nodes = ctx.tape.leaf(f.nodes.clone());
            let pooled_x = ctx.tape.mean_rows(nodes);
            let pooled_z = ctx.tape.mean_rows(z);
            let v_fb = if teacher {
                ctx.tape.leaf(f.target_vel.clone())
            } else {
                pred_flat
            };
            let gru_in = ctx.tape.concat_cols(&[pooled_x, pooled_z, v_fb])?;
            ctx.gru_step("gru", gru_in, &mut hs)?;

            step_preds[t].push(pred_flat);
            if let Some(kl) = kl {
                step_kls[t].push(kl);
            }
        }
    }

    let mut preds = Vec::with_capacity(k);
    let mut kls = Vec::with_capacity(k);
    for t in 0..k {
        preds.push(ctx.tape.concat_rows(&step_preds[t])?);
        if !step_kls[t].is_empty() {
            kls.push(mean_of_scalars(ctx.tape, &step_kls[t])?);
        }
    }
    Ok((preds, kls))
}

/// One recurrent graph step: returns ([22,2] prediction, per-node z for the
/// recurrence pooling, optional KL).
fn graph_step(
    spec: &ModelSpec,
    ctx: &mut Ctx,
    f: &FrameFeatures,
    layout: &GraphLayout,
    hidden: Value,
    latent: LatentMode,
    noise: &mut NoiseStream,
) -> Result<(Value, Value, Option<Value>)> {
    let nodes = ctx.tape.leaf(f.nodes.clone());
    let node_flags = ctx.tape.leaf(f.node_flags.clone());
    let edge_flags = ctx.tape.leaf(f.edge_flags.clone());
    let h_b = ctx.tape.broadcast_rows(hidden, NUM_NODES)?;
    let add_feats = if spec.arch.has_add_features() {
        let onehot = ctx.tape.leaf(f.event_onehot.clone());
        let ball_end = ctx.tape.leaf(f.ball_end.clone());
        let fa = ctx.linear("fa", onehot)?;
        let fxe = ctx.linear("fxe", ball_end)?;
        Some((fa, fxe))
    } else {
        None
    };

    match spec.arch {
        Arch::Grnn | Arch::GrnnDecAdd => {
            let enc_in = ctx.tape.concat_cols(&[nodes, h_b])?;
            let z = ctx.gnn_pass(
                "enc",
                enc_in,
                node_flags,
                edge_flags,
                layout.edge_src.clone(),
                layout.edge_dst.clone(),
            )?;
            let mut dec_parts = vec![z, h_b];
            if let Some((fa, fxe)) = add_feats {
                let fa_b = ctx.tape.broadcast_rows(fa, NUM_NODES)?;
                let fxe_b = ctx.tape.broadcast_rows(fxe, NUM_NODES)?;
                dec_parts.push(fa_b);
                dec_parts.push(fxe_b);
            }
            let dec_in = ctx.tape.concat_cols(&dec_parts)?;
            let o = ctx.gnn_pass(
                "dec",
                dec_in,
                node_flags,
                edge_flags,
                layout.edge_src.clone(),
                layout.edge_dst.clone(),
            )?;
            let players = ctx.tape.gather_rows(o, player_rows())?;
            let pred = ctx.linear("readout", players)?;
            Ok((pred, z, None))
        }
        Arch::Gvrnn | Arch::GvrnnDecAdd => {
            let pri_in = ctx.tape.concat_cols(&[nodes, h_b])?;
            let pri_o = ctx.gnn_pass(
                "pri",
                pri_in,
                node_flags,
                edge_flags,
                layout.edge_src.clone(),
                layout.edge_dst.clone(),
            )?;
            let pri = gauss_head(ctx, "pri", pri_o)?;
            let (z, kl) = match latent {
                LatentMode::Posterior => {
                    let v_nodes = ctx.tape.leaf(velocity_node_columns(&f.target_vel));
                    let enc_in = ctx.tape.concat_cols(&[nodes, v_nodes, h_b])?;
                    let enc_o = ctx.gnn_pass(
                        "enc",
                        enc_in,
                        node_flags,
                        edge_flags,
                        layout.edge_src.clone(),
                        layout.edge_dst.clone(),
                    )?;
                    let enc = gauss_head(ctx, "enc", enc_o)?;
                    let z = sample_z(ctx, &enc, noise)?;
                    let kl = kl_on_tape(ctx.tape, enc.mean, enc.std, pri.mean, pri.std)?;
                    (z, Some(kl))
                }
                LatentMode::Prior => (sample_z(ctx, &pri, noise)?, None),
            };
            let mut dec_parts = vec![z, h_b];
            if let Some((fa, fxe)) = add_feats {
                let fa_b = ctx.tape.broadcast_rows(fa, NUM_NODES)?;
                let fxe_b = ctx.tape.broadcast_rows(fxe, NUM_NODES)?;
                dec_parts.push(fa_b);
                dec_parts.push(fxe_b);
            }
            let dec_in = ctx.tape.concat_cols(&dec_parts)?;
            let dec_o = ctx.gnn_pass(
                "dec",
                dec_in,
                node_flags,
                edge_flags,
                layout.edge_src.clone(),
                layout.edge_dst.clone(),
            )?;
            let dec_players = ctx.tape.gather_rows(dec_o, player_rows())?;
            let dec = gauss_head(ctx, "dec", dec_players)?;
            Ok((dec.mean, z, kl))
        }
        other => Err(Error::Model(format!(
            "graph_step does not handle {}",
            other.name()
        ))),
    }
}

/// Inference entry point: completes the 22 player velocities (m/s) for one
/// sample. Window architectures return the final step's prediction.
/// Variational models sample the prior when `rng` is given and use the
/// prior mean otherwise; deterministic models ignore `rng`.
pub fn predict_velocities(
    state: &ModelState,
    pitch: &PitchSpec,
    sample: &Sample,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Vec2>> {
    let spec = state.spec;
    if spec.arch == Arch::RuleBased {
        return Err(Error::Model(
            "rule_based predictions come from rule_based_velocity".into(),
        ));
    }
    let mut noise = match &rng {
        Some(r) => NoiseStream::Sample((**r).clone()),
        None => NoiseStream::Mean,
    };
    let mut tape = Tape::new();
    let out = match sample {
        Sample::Frame(frame) => {
            let owned = featurize(frame, pitch, spec.use_ball_velocity_input)?;
            let feats = vec![&owned];
            model_forward(
                &spec,
                &state.params,
                BnMode::Eval(&state.bn),
                &mut tape,
                &BatchFeatures::Frames(&feats),
                LatentMode::Prior,
                &mut noise,
                false,
            )?
        }
        Sample::Window(window) => {
            let owned: Vec<FrameFeatures> = window
                .frames
                .iter()
                .map(|f| featurize(f, pitch, spec.use_ball_velocity_input))
                .collect::<Result<_>>()?;
            let feats = vec![owned.iter().collect::<Vec<_>>()];
            model_forward(
                &spec,
                &state.params,
                BnMode::Eval(&state.bn),
                &mut tape,
                &BatchFeatures::Windows(&feats),
                LatentMode::Prior,
                &mut noise,
                false,
            )?
        }
    };
    // Hand the advanced rng state back so successive inferences differ.
    if let (Some(r), NoiseStream::Sample(inner)) = (rng, noise) {
        *r = inner;
    }
    let original_dir = match sample {
        Sample::Frame(frame) => frame.attack_dir,
        Sample::Window(window) => window.target().attack_dir,
    };
    let pred = tape.value(*out.preds.last().expect("at least one step"));
    let mut velocities = Vec::with_capacity(NUM_PLAYERS);
    for j in 0..NUM_PLAYERS {
        let v = Vec2::new(pred.get(0, 2 * j), pred.get(0, 2 * j + 1));
        velocities.push(velocity_to_physical(v, original_dir));
    }
    Ok(velocities)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{
        seeded_rng, AttackDirection, CoordSpace, EventType, PlayerFlags, PlayerState,
    };

    fn tiny_spec(arch: Arch) -> ModelSpec {
        ModelSpec {
            arch,
            num_hid: 4,
            rnn_dim: 6,
            num_layer: 1,
            use_ball_velocity_input: true,
        }
    }

    fn random_frame(rng: &mut ChaCha8Rng, holder: usize) -> EventFrame {
        let players = (0..NUM_PLAYERS)
            .map(|i| PlayerState {
                pos: Vec2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-32.0..32.0)),
                vel: Vec2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
                flags: PlayerFlags {
                    teammate: i < 11,
                    ball_holder: i == holder,
                    goalkeeper: i == 0 || i == 11,
                },
            })
            .collect();
        EventFrame {
            match_id: 0,
            half: 1,
            event_index: 0,
            event_type: EventType::Pass,
            t_s: 0.0,
            ball_pos: Vec2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-30.0..30.0)),
            ball_vel: Vec2::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)),
            ball_end: Vec2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-30.0..30.0)),
            players,
            attack_dir: AttackDirection::LeftToRight,
            coords: CoordSpace::Pitch,
        }
    }

    fn frame_feats(n: usize, seed: u64) -> Vec<FrameFeatures> {
        let pitch = PitchSpec::default();
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| featurize(&random_frame(&mut rng, 3), &pitch, true).unwrap())
            .collect()
    }

    fn window_feats(n: usize, k: usize, seed: u64) -> Vec<Vec<FrameFeatures>> {
        (0..n).map(|i| frame_feats(k, seed + i as u64)).collect()
    }

    fn refs(owned: &[FrameFeatures]) -> Vec<&FrameFeatures> {
        owned.iter().collect()
    }

    fn window_refs(owned: &[Vec<FrameFeatures>]) -> Vec<Vec<&FrameFeatures>> {
        owned.iter().map(|w| w.iter().collect()).collect()
    }

    #[test]
    fn every_arch_produces_finite_predictions_and_grads() {
        for arch in Arch::ALL {
            if arch == Arch::RuleBased {
                continue;
            }
            let spec = tiny_spec(arch);
            let mut state = ModelState::init(&spec, &mut seeded_rng(0)).unwrap();
            let mut tape = Tape::new();
            let mut noise = NoiseStream::Sample(seeded_rng(9));
            let frames;
            let windows;
            let frame_r;
            let window_r;
            let batch = if arch.is_recurrent() {
                windows = window_feats(2, 3, 5);
                window_r = window_refs(&windows);
                BatchFeatures::Windows(&window_r)
            } else {
                frames = frame_feats(2, 5);
                frame_r = refs(&frames);
                BatchFeatures::Frames(&frame_r)
            };
            let out = model_forward(
                &spec,
                &state.params,
                BnMode::Train(&mut state.bn),
                &mut tape,
                &batch,
                LatentMode::Posterior,
                &mut noise,
                true,
            )
            .unwrap();
            let steps = if arch.is_recurrent() { 3 } else { 1 };
            assert_eq!(out.preds.len(), steps, "{arch:?}");
            for &p in &out.preds {
                assert_eq!(tape.value(p).shape(), (2, TARGET_WIDTH));
                assert!(tape.value(p).all_finite(), "{arch:?}");
            }
            if arch.is_variational() {
                assert_eq!(out.kls.len(), steps, "{arch:?}");
                for &kl in &out.kls {
                    assert!(tape.value(kl).item() >= -1e-12, "{arch:?} kl negative");
                }
            } else {
                assert!(out.kls.is_empty());
            }
            // A scalar loss reaches every step; check backward runs and
            // produces finite gradients.
            let mut loss = tape.mse(out.preds[0], out.preds[0]).unwrap();
            for &p in &out.preds {
                let sq = tape.mul(p, p).unwrap();
                let m = tape.mean_all(sq);
                loss = tape.add(loss, m).unwrap();
            }
            for &kl in &out.kls {
                loss = tape.add(loss, kl).unwrap();
            }
            let grads = tape.backward(loss).unwrap();
            let by_name = out.bound.grads(&tape, &grads);
            assert!(by_name.values().all(|g| g.all_finite()), "{arch:?}");
        }
    }

    #[test]
    fn batch_kind_mismatch_is_rejected() {
        let spec = tiny_spec(Arch::Mlp);
        let mut state = ModelState::init(&spec, &mut seeded_rng(0)).unwrap();
        let windows = window_feats(1, 2, 3);
        let window_r = window_refs(&windows);
        let mut tape = Tape::new();
        let err = model_forward(
            &spec,
            &state.params,
            BnMode::Train(&mut state.bn),
            &mut tape,
            &BatchFeatures::Windows(&window_r),
            LatentMode::Posterior,
            &mut NoiseStream::Mean,
            true,
        )
        .unwrap_err();
        assert!(err.to_string().contains("single frames"), "{err}");

        let spec = tiny_spec(Arch::Grnn);
        let mut state = ModelState::init(&spec, &mut seeded_rng(0)).unwrap();
        let frames = frame_feats(1, 3);
        let frame_r = refs(&frames);
        let mut tape = Tape::new();
        let err = model_forward(
            &spec,
            &state.params,
            BnMode::Train(&mut state.bn),
            &mut tape,
            &BatchFeatures::Frames(&frame_r),
            LatentMode::Posterior,
            &mut NoiseStream::Mean,
            true,
        )
        .unwrap_err();
        assert!(err.to_string().contains("windows"), "{err}");
    }

    #[test]
    fn deterministic_inference_is_repeatable_and_stochastic_differs() {
        let pitch = PitchSpec::default();
        let mut rng = seeded_rng(4);
        let frame = random_frame(&mut rng, 2);

        let spec = tiny_spec(Arch::Gnn);
        let state = ModelState::init(&spec, &mut seeded_rng(0)).unwrap();
        let a = predict_velocities(&state, &pitch, &Sample::Frame(&frame), None).unwrap();
        let b = predict_velocities(&state, &pitch, &Sample::Frame(&frame), None).unwrap();
        assert_eq!(a, b);

        let spec = tiny_spec(Arch::Vae);
        let state = ModelState::init(&spec, &mut seeded_rng(0)).unwrap();
        let mut r1 = seeded_rng(7);
        let x = predict_velocities(&state, &pitch, &Sample::Frame(&frame), Some(&mut r1)).unwrap();
        let y = predict_velocities(&state, &pitch, &Sample::Frame(&frame), Some(&mut r1)).unwrap();
        assert_ne!(x, y, "prior sampling with an advancing rng must differ");
        let mut r2 = seeded_rng(7);
        let x2 = predict_velocities(&state, &pitch, &Sample::Frame(&frame), Some(&mut r2)).unwrap();
        assert_eq!(x, x2, "same rng state must reproduce the draw");
    }

    #[test]
    fn gnn_is_player_permutation_equivariant() {
        let pitch = PitchSpec::default();
        let spec = tiny_spec(Arch::Gnn);
        let state = ModelState::init(&spec, &mut seeded_rng(0)).unwrap();
        let mut rng = seeded_rng(11);
        let frame = random_frame(&mut rng, 5);
        let base = predict_velocities(&state, &pitch, &Sample::Frame(&frame), None).unwrap();

        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..NUM_PLAYERS).collect();
        perm.shuffle(&mut rng);
        let mut permuted = frame.clone();
        permuted.players = perm.iter().map(|&j| frame.players[j]).collect();
        let out = predict_velocities(&state, &pitch, &Sample::Frame(&permuted), None).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            assert!(
                out[i].dist(base[j]) < 1e-10,
                "player {j} -> slot {i}: {:?} vs {:?}",
                out[i],
                base[j]
            );
        }
    }

    #[test]
    fn kl_closed_form_examples() {
        let one = |v: f64| Tensor::scalar(v);
        // q = p
        assert!(kl_diag_gaussian(&one(0.3), &one(1.2), &one(0.3), &one(1.2)).unwrap() < 1e-15);
        // q = N(1,1), p = N(0,1): KL = 0.5
        let kl = kl_diag_gaussian(&one(1.0), &one(1.0), &one(0.0), &one(1.0)).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
        // invalid sigma
        assert!(kl_diag_gaussian(&one(0.0), &one(0.0), &one(0.0), &one(1.0)).is_err());
    }

    #[test]
    fn kl_tape_matches_plain_function() {
        let mut rng = seeded_rng(3);
        let t = |rng: &mut ChaCha8Rng| {
            Tensor::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0))
        };
        let s = |rng: &mut ChaCha8Rng| {
            Tensor::from_fn(3, 4, |_, _| rng.gen_range(0.4..2.0))
        };
        let (mq, sq, mp, sp) = (t(&mut rng), s(&mut rng), t(&mut rng), s(&mut rng));
        let plain = kl_diag_gaussian(&mq, &sq, &mp, &sp).unwrap();
        let mut tape = Tape::new();
        let (a, b, c, d) = (
            tape.leaf(mq),
            tape.leaf(sq),
            tape.leaf(mp),
            tape.leaf(sp),
        );
        let v = kl_on_tape(&mut tape, a, b, c, d).unwrap();
        assert!((tape.value(v).item() - plain).abs() < 1e-12);
    }

    #[test]
    fn reparameterized_sample_mean_approaches_mu() {
        // Empirical mean of mu + sigma * eps over 10^4 draws is within
        // 3 sigma / 100 of mu.
        let mut rng = seeded_rng(5);
        let mu = 0.7;
        let sigma = 1.3;
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| mu + sigma * rng.sample::<f64, _>(StandardNormal))
            .sum::<f64>()
            / n as f64;
        assert!((mean - mu).abs() < 3.0 * sigma / 100.0, "mean {mean}");
    }
}
