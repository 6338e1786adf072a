// Scratch probe: does toy contrastive pretraining clear the floor, and
// how fast? Not part of the deliverable surface; run with
// `cargo run --release -p disa --example probe_pretrain`.

use disa::config::ExperimentConfig;
use disa::harness::pretrain_backbone;
use std::time::Instant;

fn main() {
    let mut cfg = ExperimentConfig::default();
    if let Some(steps) = std::env::args().nth(1) {
        cfg.pretrain.steps = steps.parse().unwrap();
    }
    if let Some(lr) = std::env::args().nth(2) {
        cfg.pretrain.lr = lr.parse().unwrap();
    }
    cfg.pretrain.floor = 2.0; // unreachable: always use the full budget
    for seed in [1u64, 2, 3] {
        let t = Instant::now();
        match pretrain_backbone(&cfg, seed) {
            Ok(pre) => println!(
                "seed {seed}: holdout accuracy {:.4} in {:.1}s",
                pre.holdout_accuracy,
                t.elapsed().as_secs_f64()
            ),
            Err(e) => println!("seed {seed}: FAILED: {e}"),
        }
    }
}
