//! Training and evaluation machinery: SGD over prompt parameters, toy
//! backbone pretraining, the step loop assembling the full objective,
//! and zero-shot/prompted evaluation.

mod protocol;
pub mod report;

pub use protocol::{base_to_novel_run, run_protocol, source_corpus, RunOutcome};
pub use report::{AggregateRow, EvalReport, LossTrace, ReportRow};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{DirTarget, ExperimentConfig, LossConfig};
use crate::data::{Dataset, Sample};
use crate::encoder::{
    ClassSet, ClassTextMatrix, Coverage, DualEncoder, EncoderConfig, ImageFeature, PromptBank,
    TextFeature, View, Vocab,
};
use crate::error::{Error, Result};
use crate::loss::{
    self, ce_loss, cir_loss, compute_prototypes, dir_loss, score_vector, sr_loss, total_loss,
    AlignmentVariant, LossReport, PrototypeTable, ScoreVector,
};
use crate::rng;
use crate::saliency;
use crate::tensor::Tensor;

// ── optimizer ───────────────────────────────────────────────────────────

/// SGD with classical momentum, constant learning rate, no weight decay.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Sgd {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// One update. Parameters are replaced by fresh trainable leaves;
    /// missing gradients count as zero. Accumulated gradients are
    /// consumed.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::invalid("sgd", "parameter count changed between steps"));
        }
        for (param, vel) in params.iter_mut().zip(&mut self.velocity) {
            let grad = param.take_grad().unwrap_or_else(|| vec![0.0; param.len()]);
            let mut new_vals = param.values().to_vec();
            for ((v, g), x) in vel.iter_mut().zip(&grad).zip(&mut new_vals) {
                *v = self.momentum * *v + g;
                *x -= self.lr * *v;
            }
            **param = Tensor::leaf(param.shape().to_vec(), new_vals, true)?;
        }
        Ok(())
    }
}

// ── backbone pretraining ────────────────────────────────────────────────

/// Plain-data form of the backbone, safe to share across run threads.
#[derive(Debug, Clone)]
pub struct BackboneWeights {
    pub cfg: EncoderConfig,
    pub blocks: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl BackboneWeights {
    pub fn frozen_encoder(&self, vocab: &Vocab) -> Result<DualEncoder> {
        DualEncoder::from_named(self.cfg.clone(), vocab.clone(), &self.blocks, false)
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub weights: BackboneWeights,
    /// Held-out zero-shot accuracy reached on the pretrain classes.
    pub holdout_accuracy: f64,
}

/// Progress lines on stderr when `DISA_LOG` is set.
pub fn log_enabled() -> bool {
    std::env::var_os("DISA_LOG").is_some_and(|v| v != "0")
}

/// Raw cosine argmax over class rows; the evaluation decision rule.
pub fn argmax_class(feature: &[f64], rows: &[Vec<f64>]) -> usize {
    let norm_f: f64 = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best = (0, f64::NEG_INFINITY);
    for (i, row) in rows.iter().enumerate() {
        let dot: f64 = feature.iter().zip(row).map(|(a, b)| a * b).sum();
        let norm_r: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = dot / (norm_f * norm_r);
        if cos > best.1 {
            best = (i, cos);
        }
    }
    best.0
}

fn zero_shot_accuracy(
    enc: &DualEncoder,
    prompts: Option<&PromptBank>,
    dataset: &Dataset,
    indices: &[usize],
    classes: &ClassSet,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("evaluate", "empty evaluation set"));
    }
    let matrix = enc.class_matrix(classes, prompts)?;
    let rows: Vec<Vec<f64>> = matrix.rows.iter().map(|r| r.vec.values().to_vec()).collect();
    let ids = &matrix.class_ids;
    let mut correct = 0usize;
    for &i in indices {
        let s = &dataset.samples[i];
        let (f, _) = enc.encode_image(&s.patches, prompts, None, false)?;
        let pred = ids[argmax_class(f.vec.values(), &rows)];
        if pred == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Prompted (or zero-shot when `prompts` is None) classification
/// accuracy on full images. Prompts are detached first: evaluation never
/// builds a gradient graph.
pub fn evaluate(
    enc: &DualEncoder,
    prompts: Option<&PromptBank>,
    dataset: &Dataset,
    indices: &[usize],
    classes: &ClassSet,
) -> Result<f64> {
    let detached = prompts.map(|bank| PromptBank {
        visual: bank.visual.iter().map(|t| t.detach()).collect(),
        textual: bank.textual.iter().map(|t| t.detach()).collect(),
    });
    zero_shot_accuracy(enc, detached.as_ref(), dataset, indices, classes)
}

/// Contrastive pretraining of the whole backbone on a class set disjoint
/// from every downstream corpus, until held-out zero-shot accuracy
/// clears the configured floor. The result is frozen for good.
pub fn pretrain_backbone(cfg: &ExperimentConfig, seed: u64) -> Result<Pretrained> {
    let pc = &cfg.pretrain;
    let render = cfg.render_config(cfg.data.classes);
    let corpus = crate::data::generate_corpus(
        pc.classes,
        pc.samples_per_class,
        &render,
        rng::derive(seed, "pretrain-data"),
    )?;
    let vocab = render.vocab();
    let classes = corpus.class_set(&vocab)?;
    let class_ids = classes.ids();

    let mut enc = DualEncoder::init(
        cfg.encoder.clone(),
        vocab.clone(),
        rng::derive(seed, "backbone-init"),
    )?;
    let mut opt = Sgd::new(pc.lr, pc.momentum);
    let mut r = rng::stream(seed, "pretrain-train");

    let holdout: Vec<usize> = corpus
        .classes
        .iter()
        .flat_map(|c| {
            let idx = corpus.indices_of_class(c.id);
            idx[idx.len() - pc.holdout_per_class..].to_vec()
        })
        .collect();
    let train_pools: BTreeMap<usize, Vec<usize>> = corpus
        .classes
        .iter()
        .map(|c| {
            let idx = corpus.indices_of_class(c.id);
            (c.id, idx[..idx.len() - pc.holdout_per_class].to_vec())
        })
        .collect();

    let eval_every = 50usize;
    let mut achieved = 0.0;
    for step in 0..pc.steps {
        // batch of distinct classes, one image each
        let batch: Vec<usize> = {
            let mut ids = class_ids.clone();
            ids.shuffle(&mut r);
            ids.truncate(pc.batch.min(class_ids.len()));
            ids
        };
        let samples: Vec<usize> = batch
            .iter()
            .map(|c| {
                let pool = &train_pools[c];
                pool[r.gen_range(0..pool.len())]
            })
            .collect();

        let batch_set = corpus.subset_class_set(&vocab, &batch)?;
        let text = enc.class_matrix(&batch_set, None)?;
        // the matrix rows follow class-set order, not batch order
        let mut per_sample = Vec::with_capacity(batch.len());
        for (&s_idx, &class) in samples.iter().zip(&batch) {
            let (img, _) = enc.encode_image(&corpus.samples[s_idx].patches, None, None, false)?;
            let sims = raw_scores(&img.vec, &text)?;
            let pos = text
                .class_ids
                .iter()
                .position(|&c| c == class)
                .expect("batch classes are in the subset");
            per_sample.push((sims, pos));
        }
        // symmetric InfoNCE over the in-batch class square
        let n = per_sample.len();
        let mut terms = Vec::with_capacity(2 * n);
        for (sims, pos) in &per_sample {
            terms.push(loss::nll(sims, *pos, cfg.loss.tau)?);
        }
        for j in 0..n {
            let col: Vec<Tensor> = per_sample
                .iter()
                .map(|(sims, _)| sims.slice(0, j, j + 1))
                .collect::<Result<_>>()?;
            let col = crate::tensor::concat(&col, 0)?;
            let target = per_sample
                .iter()
                .position(|(_, p)| *p == j)
                .expect("batch classes are distinct");
            terms.push(loss::nll(&col, target, cfg.loss.tau)?);
        }
        let total = terms
            .into_iter()
            .try_fold(Tensor::scalar(0.0), |acc, t| acc.add(&t))?
            .scale(1.0 / (2.0 * n as f64));
        if !total.item().is_finite() {
            return Err(Error::Aborted(format!("pretraining diverged at step {step}")));
        }
        total.backward()?;
        opt.step(&mut enc.trainable_params_mut())?;

        if (step + 1) % eval_every == 0 || step + 1 == pc.steps {
            achieved = zero_shot_accuracy(&enc, None, &corpus, &holdout, &classes)?;
            if log_enabled() {
                eprintln!(
                    "pretrain seed {seed} step {}: loss {:.4} holdout acc {achieved:.4}",
                    step + 1,
                    total.item()
                );
            }
            if achieved >= pc.floor {
                break;
            }
        }
    }
    if achieved < pc.floor {
        return Err(Error::Aborted(format!(
            "pretraining reached held-out accuracy {achieved:.4}, floor is {:.4}",
            pc.floor
        )));
    }
    let blocks = enc
        .named_weights()
        .into_iter()
        .map(|(k, t)| (k, (t.shape().to_vec(), t.values().to_vec())))
        .collect();
    Ok(Pretrained {
        weights: BackboneWeights {
            cfg: cfg.encoder.clone(),
            blocks,
        },
        holdout_accuracy: achieved,
    })
}

/// Differentiable per-class cosine scores without provenance tags; used
/// by pretraining where both sides train.
fn raw_scores(feature: &Tensor, texts: &ClassTextMatrix) -> Result<Tensor> {
    let sims: Vec<Tensor> = texts
        .rows
        .iter()
        .map(|row| crate::tensor::cosine_similarity(feature, &row.vec)?.reshape(vec![1]))
        .collect::<Result<_>>()?;
    crate::tensor::concat(&sims, 0)
}

// ── prompt training ─────────────────────────────────────────────────────

/// Frozen per-sample quantities, computed once and reused every epoch.
struct FrozenSampleCache {
    feature: Vec<f64>,
    q_oo: Vec<f64>,
    alpha: Option<saliency::SaliencyScores>,
}

pub struct TrainOutput {
    pub bank: PromptBank,
    pub prototypes: PrototypeTable,
    /// Mean loss components per epoch.
    pub epoch_traces: Vec<LossReport>,
    /// step,sample,alpha...,masked indices rows when dumping saliency.
    pub saliency_dump: Vec<String>,
}

pub struct TrainSetup<'a> {
    pub enc: &'a DualEncoder,
    pub dataset: &'a Dataset,
    pub train_indices: &'a [usize],
    pub classes: &'a ClassSet,
    pub loss_cfg: &'a LossConfig,
    pub depth: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dump_saliency: bool,
}

/// The step loop: frozen full pass, saliency mask, masked and full
/// prompted passes, prompted and frozen text passes, loss assembly per
/// the pairing rules, SGD on the prompt bank only.
pub fn train_prompts(cfg: &ExperimentConfig, setup: &TrainSetup) -> Result<TrainOutput> {
    let enc = setup.enc;
    let lc = setup.loss_cfg;
    if setup.train_indices.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }

    // prototypes from frozen full-image features of the training set
    let frozen_feats: Vec<(ImageFeature, usize)> = setup
        .train_indices
        .iter()
        .map(|&i| {
            let s = &setup.dataset.samples[i];
            let (f, _) = enc.encode_image(&s.patches, None, None, false)?;
            Ok((f, s.label))
        })
        .collect::<Result<_>>()?;
    let class_ids = setup.classes.ids();
    let prototypes = compute_prototypes(&frozen_feats, &class_ids)?;

    let g_o = enc.frozen_class_matrix(setup.classes)?;

    let mut bank = PromptBank::init(
        &enc.cfg,
        &enc.vocab,
        enc,
        cfg.prompt.visual,
        cfg.prompt.textual,
        setup.depth,
        rng::derive(setup.seed, "prompt-init"),
    )?;
    let mut opt = Sgd::new(cfg.optim.lr, cfg.optim.momentum);
    let mut shuffle_rng = rng::stream(setup.seed, "train-shuffle");
    let mut mask_rng = rng::stream(setup.seed, "train-mask");

    // frozen quantities per training sample, filled lazily
    let mut cache: BTreeMap<usize, FrozenSampleCache> = BTreeMap::new();
    let need_mask = lc.enable_cir && lc.enable_masking && lc.gamma > 0.0;

    let mut epoch_traces = Vec::with_capacity(setup.epochs);
    let mut saliency_dump = Vec::new();
    let mut step = 0usize;

    for _epoch in 0..setup.epochs {
        let mut order = setup.train_indices.to_vec();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sums = [0.0f64; 5]; // ce, sr, cir, dir, total
        let mut epoch_steps = 0usize;

        for chunk in order.chunks(cfg.optim.batch) {
            let g_p = enc.class_matrix(setup.classes, Some(&bank))?;
            let mut batch_terms: Vec<Tensor> = Vec::with_capacity(chunk.len());
            let mut batch_report = [0.0f64; 5];

            for &s_idx in chunk {
                let sample = &setup.dataset.samples[s_idx];
                if !cache.contains_key(&s_idx) {
                    cache.insert(s_idx, frozen_pass(enc, sample, &g_o, need_mask)?);
                }
                let frozen = &cache[&s_idx];
                let f_o = ImageFeature {
                    vec: Tensor::vector(frozen.feature.clone()),
                    view: View::Frozen,
                    coverage: Coverage::Full,
                };
                let q_oo = ScoreVector {
                    sims: Tensor::vector(frozen.q_oo.clone()),
                    class_ids: g_o.class_ids.clone(),
                    tag: loss::PairTag::FrozenFrozen,
                    image_coverage: Coverage::Full,
                };

                // masked prompted pass feeds the cross-interactive term
                let cir_term = if lc.enable_cir {
                    let keep_mask = if need_mask {
                        let scores = frozen.alpha.as_ref().expect("cached with need_mask");
                        let plan = saliency::select_mask(
                            scores,
                            lc.gamma,
                            lc.mask_fraction,
                            &mut mask_rng,
                        )?;
                        if setup.dump_saliency {
                            saliency_dump.push(dump_row(step, s_idx, scores, &plan));
                        }
                        Some(saliency::to_keep_mask(&plan, enc.cfg.num_patches())?)
                    } else {
                        None
                    };
                    let (f_p_cir, _) =
                        enc.encode_image(&sample.patches, Some(&bank), keep_mask.as_deref(), false)?;
                    if need_mask {
                        debug_assert_eq!(f_p_cir.coverage, Coverage::Masked);
                    }
                    let q_po = score_vector(&f_p_cir, &g_o)?;
                    let q_op = score_vector(&f_o, &g_p)?;
                    cir_loss(&q_po, &q_op, lc.tau)?
                } else {
                    Tensor::scalar(0.0)
                };

                let (f_p, _) = enc.encode_image(&sample.patches, Some(&bank), None, false)?;
                let q_pp = score_vector(&f_p, &g_p)?;
                let ce = ce_loss(&q_pp, sample.label, lc.tau)?;
                let sr = if lc.enable_sr {
                    sr_loss(&q_pp, &q_oo, lc.tau)?
                } else {
                    Tensor::scalar(0.0)
                };
                let dir = if lc.enable_dir {
                    let target: Vec<f64> = match lc.dir_target {
                        DirTarget::Prototype => prototypes
                            .get(sample.label)
                            .ok_or_else(|| {
                                Error::invalid("train", format!("no prototype for class {}", sample.label))
                            })?
                            .to_vec(),
                        DirTarget::Sample => frozen.feature.clone(),
                    };
                    match lc.dir_variant {
                        AlignmentVariant::Direction => dir_loss(&f_p, &target)?,
                        other => loss::alignment_variant_loss(&f_p, &target, other)?,
                    }
                } else {
                    Tensor::scalar(0.0)
                };

                let lambda = if lc.enable_dir { lc.lambda } else { 0.0 };
                let (total, report) = total_loss(&ce, &sr, &cir_term, &dir, lambda)?;
                batch_report[0] += report.ce;
                batch_report[1] += report.sr;
                batch_report[2] += report.cir;
                batch_report[3] += report.dir;
                batch_report[4] += report.total;
                batch_terms.push(total);
            }

            let n = batch_terms.len() as f64;
            let batch_loss = batch_terms
                .into_iter()
                .try_fold(Tensor::scalar(0.0), |acc, t| acc.add(&t))?
                .scale(1.0 / n);
            if !batch_loss.item().is_finite() {
                return Err(Error::Aborted(format!("non-finite loss at step {step}")));
            }
            batch_loss.backward()?;
            opt.step(&mut bank.params_mut())?;

            for (s, b) in epoch_sums.iter_mut().zip(&batch_report) {
                *s += b / n;
            }
            epoch_steps += 1;
            step += 1;
        }

        let d = epoch_steps as f64;
        epoch_traces.push(LossReport {
            ce: epoch_sums[0] / d,
            sr: epoch_sums[1] / d,
            cir: epoch_sums[2] / d,
            dir: epoch_sums[3] / d,
            lambda: lc.lambda,
            total: epoch_sums[4] / d,
        });
    }

    Ok(TrainOutput {
        bank,
        prototypes,
        epoch_traces,
        saliency_dump,
    })
}

fn frozen_pass(
    enc: &DualEncoder,
    sample: &Sample,
    g_o: &ClassTextMatrix,
    need_mask: bool,
) -> Result<FrozenSampleCache> {
    let (f_o, trace) = enc.encode_image(&sample.patches, None, None, need_mask)?;
    let q_oo = score_vector(&f_o, g_o)?;
    let alpha = if need_mask {
        let trace = trace.expect("trace requested");
        let pos = g_o
            .class_ids
            .iter()
            .position(|&c| c == sample.label)
            .ok_or_else(|| Error::invalid("train", format!("label {} not in class set", sample.label)))?;
        let text_cls: &TextFeature = &g_o.rows[pos];
        Some(saliency::score_tokens(&trace, text_cls, sample.label)?)
    } else {
        None
    };
    Ok(FrozenSampleCache {
        feature: f_o.vec.values().to_vec(),
        q_oo: q_oo.sims.values().to_vec(),
        alpha,
    })
}

fn dump_row(
    step: usize,
    sample: usize,
    scores: &saliency::SaliencyScores,
    plan: &saliency::MaskPlan,
) -> String {
    let alphas = scores
        .alpha
        .iter()
        .map(|a| format!("{a:.6}"))
        .collect::<Vec<_>>()
        .join(",");
    let masked = plan
        .masked_set
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    format!("{step},{sample},{alphas},{masked}")
}

/// Harmonic mean of two accuracies in percent; zero when either is zero.
pub fn harmonic_mean(base_acc: f64, novel_acc: f64) -> Result<f64> {
    for v in [base_acc, novel_acc] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::invalid("harmonic-mean", format!("accuracy {v} not in [0, 100]")));
        }
    }
    if base_acc == 0.0 || novel_acc == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * base_acc * novel_acc / (base_acc + novel_acc))
}

/// Human-readable encoding of the active loss switches.
pub fn switches_string(lc: &LossConfig) -> String {
    let mut parts = vec!["ce".to_string()];
    if lc.enable_cir {
        parts.push("cir".into());
    }
    if lc.enable_cir && lc.enable_masking {
        parts.push("mask".into());
    }
    if lc.enable_sr {
        parts.push("sr".into());
    }
    if lc.enable_dir {
        let head = match lc.dir_variant {
            AlignmentVariant::Direction => "dir".to_string(),
            other => format!("align-{other}"),
        };
        parts.push(format!("{head}({})", lc.dir_target));
    }
    parts.join("+")
}

/// Table-row switch settings for the component ablation, in order:
/// baseline, +CIR, +masking, +SR, +DiR(sample), +DiR(prototype).
pub fn ablation_rows(base: &LossConfig) -> Vec<LossConfig> {
    let mut rows = Vec::with_capacity(6);
    let off = LossConfig {
        enable_cir: false,
        enable_masking: false,
        enable_sr: false,
        enable_dir: false,
        ..base.clone()
    };
    rows.push(off.clone());
    rows.push(LossConfig {
        enable_cir: true,
        ..off.clone()
    });
    rows.push(LossConfig {
        enable_cir: true,
        enable_masking: true,
        ..off.clone()
    });
    rows.push(LossConfig {
        enable_cir: true,
        enable_masking: true,
        enable_sr: true,
        ..off.clone()
    });
    rows.push(LossConfig {
        enable_cir: true,
        enable_masking: true,
        enable_sr: true,
        enable_dir: true,
        dir_target: DirTarget::Sample,
        dir_variant: AlignmentVariant::Direction,
        ..off.clone()
    });
    rows.push(LossConfig {
        enable_cir: true,
        enable_masking: true,
        enable_sr: true,
        enable_dir: true,
        dir_target: DirTarget::Prototype,
        dir_variant: AlignmentVariant::Direction,
        ..off
    });
    rows
}

pub(crate) fn checkpoint_from(
    weights: &BackboneWeights,
    bank: Option<&PromptBank>,
    prototypes: Option<&PrototypeTable>,
) -> crate::checkpoint::Checkpoint {
    let mut ck = crate::checkpoint::Checkpoint::new();
    ck.insert_blocks(weights.blocks.clone());
    if let Some(bank) = bank {
        ck.insert_tensors(bank.named_weights());
    }
    if let Some(p) = prototypes {
        ck.insert_blocks(p.named_blocks());
    }
    ck
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = Tensor::leaf(vec![2], vec![1.0, -1.0], true).unwrap();
        let mut opt = Sgd::new(0.1, 0.0);
        // loss = sum(p * p): grad = 2p
        p.mul(&p).unwrap().sum_all().backward().unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.values(), &[0.8, -0.8]);
        // momentum keeps moving even with zero fresh gradient
        let mut opt = Sgd::new(0.1, 0.9);
        let mut q = Tensor::leaf(vec![1], vec![1.0], true).unwrap();
        q.mul(&q).unwrap().sum_all().backward().unwrap();
        opt.step(&mut [&mut q]).unwrap();
        let after_first = q.values()[0];
        opt.step(&mut [&mut q]).unwrap();
        assert!(q.values()[0] < after_first);
    }

    #[test]
    fn harmonic_mean_paper_rows() {
        assert!((harmonic_mean(82.69, 80.53).unwrap() - 81.60).abs() <= 0.01);
        assert!((harmonic_mean(94.10, 82.69).unwrap() - 88.03).abs() <= 0.01);
        assert_eq!(harmonic_mean(70.0, 70.0).unwrap(), 70.0);
        assert_eq!(harmonic_mean(0.0, 50.0).unwrap(), 0.0);
        assert!(harmonic_mean(-1.0, 50.0).is_err());
        assert!(harmonic_mean(101.0, 50.0).is_err());
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let f = vec![0.3, 0.9, -0.2];
        let rows = vec![
            vec![0.1, 0.8, 0.0],
            vec![-0.5, 0.2, 0.9],
            vec![0.9, -0.1, 0.1],
        ];
        let base = argmax_class(&f, &rows);
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v * 3.0).collect())
            .collect();
        assert_eq!(argmax_class(&f, &scaled), base);
    }

    #[test]
    fn switch_strings() {
        let cfg = ExperimentConfig::default();
        let rows = ablation_rows(&cfg.loss);
        let strings: Vec<String> = rows.iter().map(switches_string).collect();
        assert_eq!(
            strings,
            vec![
                "ce",
                "ce+cir",
                "ce+cir+mask",
                "ce+cir+mask+sr",
                "ce+cir+mask+sr+dir(sample)",
                "ce+cir+mask+sr+dir(prototype)",
            ]
        );
    }
}
