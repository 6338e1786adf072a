// Scratch probe: frozen-teacher zero-shot accuracy on the downstream
// corpus splits, as a function of pretraining strength.

use disa::config::ExperimentConfig;
use disa::data::split_base_novel;
use disa::harness::{evaluate, pretrain_backbone};
use disa::rng;

fn main() {
    let mut cfg = ExperimentConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        cfg.set(k, v).unwrap();
    }
    for seed in [1u64, 2, 3] {
        let pre = match pretrain_backbone(&cfg, seed) {
            Ok(p) => p,
            Err(e) => {
                println!("seed {seed}: pretrain FAILED: {e}");
                continue;
            }
        };
        let corpus = disa::harness::source_corpus(&cfg, seed).unwrap();
        let vocab = corpus.render.vocab();
        let enc = pre.weights.frozen_encoder(&vocab).unwrap();
        let split = split_base_novel(
            &corpus,
            cfg.data.base_fraction,
            cfg.data.k_shot,
            cfg.data.test_per_class,
            rng::derive(seed, "split"),
        )
        .unwrap();
        let base_set = corpus.subset_class_set(&vocab, &split.base_classes).unwrap();
        let novel_set = corpus.subset_class_set(&vocab, &split.novel_classes).unwrap();
        let base_idx = corpus.test_indices(&split.base_classes, cfg.data.test_per_class);
        let novel_idx = corpus.test_indices(&split.novel_classes, cfg.data.test_per_class);
        let base = evaluate(&enc, None, &corpus, &base_idx, &base_set).unwrap() * 100.0;
        let novel = evaluate(&enc, None, &corpus, &novel_idx, &novel_set).unwrap() * 100.0;
        println!(
            "seed {seed}: pretrain holdout {:.1}%  downstream zero-shot base {base:.1}% novel {novel:.1}%",
            pre.holdout_accuracy * 100.0
        );
    }
}
