// Scratch probe: finite-difference check through the assembled encoder,
// and a look at gradient magnitudes reaching the backbone parameters.

use disa::config::ExperimentConfig;
use disa::data::generate_corpus;
use disa::encoder::DualEncoder;
use disa::tensor::cosine_similarity;

fn main() {
    let cfg = ExperimentConfig::default();
    let render = cfg.render_config(0);
    let corpus = generate_corpus(8, 2, &render, 1).unwrap();
    let vocab = render.vocab();
    let enc = DualEncoder::init(cfg.encoder.clone(), vocab.clone(), 42).unwrap();
    let classes = corpus.class_set(&vocab).unwrap();
    let sample = &corpus.samples[0];

    // analytic gradient of cos(f_img, g_txt) wrt one backbone weight
    let (img, _) = enc.encode_image(&sample.patches, None, None, false).unwrap();
    let txt = enc.encode_text(sample.label, &classes, None).unwrap();
    let loss = cosine_similarity(&img.vec, &txt.vec).unwrap();
    let base = loss.item();
    loss.backward().unwrap();

    println!("loss value: {base:.6}");
    let named = enc.named_weights();
    for name in [
        "image.embed",
        "image.layers.0.wq",
        "image.layers.3.ff2",
        "image.proj",
        "text.embed",
        "text.layers.0.wv",
        "text.proj",
        "image.pos",
        "image.cls",
    ] {
        let t = &named[name];
        match t.grad() {
            Some(g) => {
                let l2: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                let linf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                println!("{name}: grad l2 {l2:.3e} linf {linf:.3e}");
            }
            None => println!("{name}: NO GRAD"),
        }
    }

    // finite differences on a few entries of image.layers.0.wq
    let blocks: std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)> = named
        .iter()
        .map(|(k, t)| (k.clone(), (t.shape().to_vec(), t.values().to_vec())))
        .collect();
    let eval = |blocks: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)>| -> f64 {
        let e = DualEncoder::from_named(cfg.encoder.clone(), vocab.clone(), blocks, false).unwrap();
        let (i, _) = e.encode_image(&sample.patches, None, None, false).unwrap();
        let t = e.encode_text(sample.label, &classes, None).unwrap();
        cosine_similarity(&i.vec, &t.vec).unwrap().item()
    };
    let h = 1e-5;
    let analytic = named["image.layers.0.wq"].grad().unwrap();
    let mut max_err = 0.0f64;
    for e in [0usize, 7, 100, 500, 1023] {
        let mut plus = blocks.clone();
        plus.get_mut("image.layers.0.wq").unwrap().1[e] += h;
        let mut minus = blocks.clone();
        minus.get_mut("image.layers.0.wq").unwrap().1[e] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let err = (analytic[e] - fd).abs() / 1f64.max(analytic[e].abs()).max(fd.abs());
        max_err = max_err.max(err);
        println!("wq[{e}]: analytic {:+.6e} fd {fd:+.6e} rel {err:.2e}", analytic[e]);
    }
    println!("max rel err: {max_err:.3e}");
}
