//! Scratch calibration for the learning-signal sizing (run with --ignored).

use std::time::Instant;

use pitchflow::config::RunConfig;
use pitchflow::ingest::SplitSpec;
use pitchflow::models::{Arch, ModelSpec};
use pitchflow::pipeline;
use pitchflow::training::{evaluate_rmse, train, TrainConfig, VelocitySource};
use pitchflow::types::Split;

#[test]
#[ignore]
fn calibrate_learning_signal() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let data = dir.path().join("data");

    let mut cfg = RunConfig::default();
    cfg.synth.n_matches = 24;
    cfg.synth.match_seconds = 240.0;
    cfg.synth.event_rate = 0.5;
    cfg.synth.seed = 0;
    cfg.ingest.split = SplitSpec {
        train: 18,
        val: 3,
        test: 3,
    };
    cfg.ingest.k = 10;

    let t0 = Instant::now();
    pipeline::run_synth(&cfg, &raw).unwrap();
    let (corpus, manifest) = pipeline::run_ingest(&cfg, &raw, &data).unwrap();
    println!("data: {:?} counts {:?}", t0.elapsed(), manifest.counts);

    let rule = evaluate_rmse(&VelocitySource::Rule(&cfg.rule), &corpus, &cfg.pitch, 1, 0).unwrap();
    println!("rule rmse {:.3}", rule.rmse);

    // Mean-velocity floor for reference.
    let n: f64 = corpus
        .windows_of(Split::Test)
        .iter()
        .flat_map(|w| w.target().player_velocities())
        .map(|v| v.norm() * v.norm())
        .sum::<f64>()
        / (corpus.windows_of(Split::Test).len() * 22) as f64;
    println!("zero-predictor rmse ~ {:.3}", n.sqrt());

    let t0 = Instant::now();
    let mlp_cfg = TrainConfig {
        batch_size: 64,
        max_epochs: 150,
        patience: 30,
        lr: 1e-3,
        seed: 0,
        grad_clip: 10.0,
    };
    let (mlp, log) = train(&ModelSpec::new(Arch::Mlp), &corpus, &mlp_cfg, &cfg.pitch).unwrap();
    let mlp_eval = evaluate_rmse(&VelocitySource::Model(&mlp), &corpus, &cfg.pitch, 1, 0).unwrap();
    println!(
        "mlp: {:?} epochs {} best_val {:.4} rmse {:.3}",
        t0.elapsed(),
        log.epochs.len(),
        log.best_val_loss,
        mlp_eval.rmse
    );

    let t0 = Instant::now();
    let grnn_cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 24,
        patience: 24,
        lr: 1e-3,
        seed: 0,
        grad_clip: 10.0,
    };
    let (grnn, log) = train(&ModelSpec::new(Arch::Grnn), &corpus, &grnn_cfg, &cfg.pitch).unwrap();
    let grnn_eval = evaluate_rmse(&VelocitySource::Model(&grnn), &corpus, &cfg.pitch, 1, 0).unwrap();
    println!(
        "grnn: {:?} epochs {} best_val {:.4} rmse {:.3}",
        t0.elapsed(),
        log.epochs.len(),
        log.best_val_loss,
        grnn_eval.rmse
    );
    for e in log.epochs.iter() {
        println!("  epoch {:2} train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_loss);
    }
    println!(
        "ordering: grnn {:.3} < mlp {:.3} < rule {:.3}; grnn/rule {:.3}",
        grnn_eval.rmse,
        mlp_eval.rmse,
        rule.rmse,
        grnn_eval.rmse / rule.rmse
    );
}
