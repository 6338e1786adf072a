// Scratch probe: similarity spread and contrastive gradient magnitude
// at init.

use disa::config::ExperimentConfig;
use disa::data::generate_corpus;
use disa::encoder::DualEncoder;
use disa::tensor::cosine_similarity;

fn main() {
    let cfg = ExperimentConfig::default();
    let render = cfg.render_config(cfg.data.classes);
    let corpus = generate_corpus(8, 4, &render, 1).unwrap();
    let vocab = render.vocab();
    let enc = DualEncoder::init(cfg.encoder.clone(), vocab.clone(), 42).unwrap();
    let classes = corpus.class_set(&vocab).unwrap();

    let texts = enc.class_matrix(&classes, None).unwrap();
    println!("text feature norms:");
    for (i, row) in texts.rows.iter().enumerate() {
        let n: f64 = row.vec.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("  class {i}: norm {n:.4} first3 {:?}", &row.vec.values()[..3]);
    }
    // text-text cosine spread
    let mut tt = Vec::new();
    for i in 0..texts.rows.len() {
        for j in (i + 1)..texts.rows.len() {
            tt.push(
                cosine_similarity(&texts.rows[i].vec, &texts.rows[j].vec)
                    .unwrap()
                    .item(),
            );
        }
    }
    println!(
        "text-text cos: min {:.4} max {:.4}",
        tt.iter().cloned().fold(f64::INFINITY, f64::min),
        tt.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );

    let mut sims = Vec::new();
    for k in 0..8 {
        let idx = corpus.indices_of_class(k)[0];
        let (img, _) = enc
            .encode_image(&corpus.samples[idx].patches, None, None, false)
            .unwrap();
        let row: Vec<f64> = texts
            .rows
            .iter()
            .map(|t| cosine_similarity(&img.vec, &t.vec).unwrap().item())
            .collect();
        println!(
            "img {k}: sims {:?}",
            row.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
        sims.push(row);
    }
    let flat: Vec<f64> = sims.iter().flatten().cloned().collect();
    let mean = flat.iter().sum::<f64>() / flat.len() as f64;
    let spread = flat.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    println!("sims mean {mean:.4} max-dev {spread:.4} (tau {})", cfg.loss.tau);

    // per-row softmax deviation from uniform
    let tau = cfg.loss.tau;
    for (k, row) in sims.iter().enumerate().take(3) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| ((v - mx) / tau).exp()).collect();
        let s: f64 = exps.iter().sum();
        let p: Vec<f64> = exps.iter().map(|e| e / s).collect();
        println!(
            "row {k} softmax: {:?}",
            p.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
}
