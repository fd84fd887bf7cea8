//! Manual timing probe for sizing training profiles. Run with
//! `cargo test --test perf_probe -- --ignored --nocapture`.

use std::time::Instant;

use mmreid::models::encoder::VisualEncoderConfig;
use mmreid::models::lm::CausalLmConfig;
use mmreid::synthdata::dataset::{build_dataset, DataConfig};
use mmreid::trainer::{pretrain, train_stage2, Recipe, Stage, TrainConfig};

#[test]
#[ignore]
fn time_default_profile_steps() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let ds = build_dataset(&DataConfig::default(), dir.path(), None).unwrap();
    println!("dataset build: {:.2?}", t0.elapsed());

    let enc = VisualEncoderConfig::default();
    let lm = CausalLmConfig::default();

    let cfg = TrainConfig {
        p: 4,
        k: 4,
        epochs: 1,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = tempfile::tempdir().unwrap();
    let t1 = Instant::now();
    let outcome = pretrain(&ds, &enc, &lm, &cfg, Recipe::Full, out.path()).unwrap();
    let steps = outcome.history.len();
    println!(
        "stage1 P=4 K=4: {} steps in {:.2?} ({:.3?}/step)",
        steps,
        t1.elapsed(),
        t1.elapsed() / steps as u32
    );

    let cfg2 = TrainConfig {
        stage: Stage::Reid,
        p: 4,
        k: 4,
        reid_epochs: 1,
        seed: 1,
        ..TrainConfig::default()
    };
    let out2 = tempfile::tempdir().unwrap();
    let t2 = Instant::now();
    let outcome2 = train_stage2(&ds, &enc, &cfg2, None, out2.path()).unwrap();
    let steps2 = outcome2.history.len();
    println!(
        "stage2 P=4 K=4: {} steps in {:.2?} ({:.3?}/step)",
        steps2,
        t2.elapsed(),
        t2.elapsed() / steps2 as u32
    );
}
