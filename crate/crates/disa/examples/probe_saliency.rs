// Scratch probe: does the saliency score rank patches by how much the
// frozen model needs them? Compare teacher accuracy when masking the
// lowest-scored, highest-scored, or random patches.

use disa::config::ExperimentConfig;
use disa::data::split_base_novel;
use disa::harness::{argmax_class, pretrain_backbone, source_corpus};
use disa::rng;
use disa::saliency::score_tokens;
use rand::seq::index::sample;

fn main() {
    let cfg = ExperimentConfig::default();
    let seed = 1u64;
    let pre = pretrain_backbone(&cfg, seed).unwrap();
    let corpus = source_corpus(&cfg, seed).unwrap();
    let vocab = corpus.render.vocab();
    let enc = pre.weights.frozen_encoder(&vocab).unwrap();
    let split = split_base_novel(&corpus, cfg.data.base_fraction, cfg.data.k_shot, cfg.data.test_per_class, rng::derive(seed, "split")).unwrap();
    let base_set = corpus.subset_class_set(&vocab, &split.base_classes).unwrap();
    let g_o = enc.frozen_class_matrix(&base_set).unwrap();
    let rows: Vec<Vec<f64>> = g_o.rows.iter().map(|r| r.vec.values().to_vec()).collect();

    let mut rng = rng::stream(7, "probe");
    let idx = corpus.test_indices(&split.base_classes, 8);
    let v = enc.cfg.num_patches();
    let mut correct = [0usize; 4]; // full, mask-low, mask-high, mask-random
    let mut n = 0usize;
    for &i in &idx {
        let s = &corpus.samples[i];
        let Some(label_pos) = g_o.class_ids.iter().position(|&c| c == s.label) else { continue };
        let (f_full, trace) = enc.encode_image(&s.patches, None, None, true).unwrap();
        let trace = trace.unwrap();
        let scores = score_tokens(&trace, &g_o.rows[label_pos], s.label).unwrap();
        let mut order: Vec<usize> = (0..v).collect();
        order.sort_by(|&a, &b| scores.alpha[a].partial_cmp(&scores.alpha[b]).unwrap());
        let low: Vec<usize> = order[..4].to_vec();
        let high: Vec<usize> = order[v - 4..].to_vec();
        let rnd: Vec<usize> = sample(&mut rng, v, 4).into_vec();

        let masks = [None, Some(low), Some(high), Some(rnd)];
        for (m, masked) in masks.into_iter().enumerate() {
            let keep: Vec<bool> = match &masked {
                None => vec![true; v],
                Some(set) => (0..v).map(|p| !set.contains(&p)).collect(),
            };
            let (f, _) = enc.encode_image(&s.patches, None, Some(&keep), false).unwrap();
            let pred = g_o.class_ids[argmax_class(f.vec.values(), &rows)];
            if pred == s.label {
                correct[m] += 1;
            }
            let _ = &f_full;
        }
        n += 1;
    }
    println!("teacher accuracy on {} base-test images:", n);
    for (name, c) in ["full", "mask 4 lowest-alpha", "mask 4 highest-alpha", "mask 4 random"]
        .iter()
        .zip(correct)
    {
        println!("  {name:<22} {:.1}%", 100.0 * c as f64 / n as f64);
    }
}
