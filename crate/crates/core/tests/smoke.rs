//! End-to-end smoke: synth -> ingest -> short training -> eval, at a size
//! that finishes quickly, plus a timing probe for the recurrent graph
//! models used to budget the acceptance runs.

use std::time::Instant;

use pitchflow::config::RunConfig;
use pitchflow::ingest::SplitSpec;
use pitchflow::models::{Arch, ModelSpec};
use pitchflow::pipeline;
use pitchflow::training::{evaluate_rmse, VelocitySource};
use pitchflow::types::Split;

#[test]
fn pipeline_end_to_end_small() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let data = dir.path().join("data");

    let mut cfg = RunConfig::default();
    cfg.synth.n_matches = 5;
    cfg.synth.match_seconds = 150.0;
    cfg.synth.event_rate = 0.5;
    cfg.ingest.split = SplitSpec {
        train: 3,
        val: 1,
        test: 1,
    };
    cfg.ingest.k = 5;
    cfg.train.batch_size = 64;
    cfg.train.max_epochs = 3;
    cfg.train.patience = 5;
    cfg.train.lr = 1e-3;
    cfg.validate().unwrap();

    let t0 = Instant::now();
    pipeline::run_synth(&cfg, &raw).unwrap();
    println!("synth: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let (corpus, manifest) = pipeline::run_ingest(&cfg, &raw, &data).unwrap();
    println!("ingest: {:?} counts {:?} drops {:?}", t0.elapsed(), manifest.counts, manifest.drops);

    for split in Split::ALL {
        println!(
            "{}: d {} dstar {}",
            split.name(),
            corpus.frames_of(split).len(),
            corpus.windows_of(split).len()
        );
        assert!(
            corpus.windows_of(split).len() <= corpus.frames_of(split).len(),
            "windows exceed frames in {split:?}"
        );
    }
    assert!(!corpus.frames_of(Split::Train).is_empty());
    assert!(!corpus.windows_of(Split::Test).is_empty());

    // Rule baseline RMSE for scale.
    let rule_cfg = cfg.rule;
    let report = evaluate_rmse(
        &VelocitySource::Rule(&rule_cfg),
        &corpus,
        &cfg.pitch,
        1,
        0,
    )
    .unwrap();
    println!("rule rmse: {:.3}", report.rmse);
    assert!(report.rmse > 1.0 && report.rmse < 6.0);

    // Short MLP training must run and improve on the initial parameters.
    let t0 = Instant::now();
    let (state, log) = pipeline::run_train(&cfg, Arch::Mlp, &data, &dir.path().join("mlp")).unwrap();
    println!("mlp train: {:?} epochs {}", t0.elapsed(), log.epochs.len());
    let eval = evaluate_rmse(&VelocitySource::Model(&state), &corpus, &cfg.pitch, 1, 0).unwrap();
    println!("mlp rmse after {} epochs: {:.3}", log.epochs.len(), eval.rmse);
    assert!(eval.rmse.is_finite());

    // Timing probe: one GRNN epoch-equivalent over a few windows.
    let spec = ModelSpec::new(Arch::Grnn);
    let t0 = Instant::now();
    let mut small = cfg.clone();
    small.train.max_epochs = 1;
    small.train.batch_size = 16;
    let (grnn_state, _) = pitchflow::training::train(&spec, &corpus, &small.train, &cfg.pitch).unwrap();
    let n_train = corpus.windows_of(Split::Train).len();
    println!(
        "grnn 1 epoch over {} windows: {:?} ({:.1} ms/window)",
        n_train,
        t0.elapsed(),
        t0.elapsed().as_secs_f64() * 1000.0 / n_train.max(1) as f64
    );
    let eval = evaluate_rmse(&VelocitySource::Model(&grnn_state), &corpus, &cfg.pitch, 1, 0).unwrap();
    println!("grnn rmse after 1 epoch: {:.3}", eval.rmse);
}
