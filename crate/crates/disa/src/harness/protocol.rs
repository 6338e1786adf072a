//! Protocol orchestration: data generation, prototype computation,
//! training and evaluation per protocol, repeated over seeds, with
//! deterministic aggregation. Independent runs execute in parallel;
//! each run owns its encoder, graphs and RNG streams.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use super::report::{EvalReport, LossTrace, ReportRow};
use super::{
    ablation_rows, evaluate, harmonic_mean, pretrain_backbone, switches_string, train_prompts,
    Pretrained, TrainSetup,
};
use crate::config::{ExperimentConfig, LossConfig, Protocol};
use crate::data::{self, Dataset, ShiftKind, SplitSpec};
use crate::encoder::{DualEncoder, PromptBank};
use crate::error::{Error, Result};
use crate::loss::{LossReport, PrototypeTable};
use crate::rng;

/// One finished training run in thread-safe form.
pub struct RunOutcome {
    pub rows: Vec<ReportRow>,
    pub trace: LossTrace,
    pub saliency: Vec<String>,
    pub bank_blocks: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub prototypes: PrototypeTable,
}

fn bank_blocks(bank: &PromptBank) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
    bank.named_weights()
        .into_iter()
        .map(|(k, t)| (k, (t.shape().to_vec(), t.values().to_vec())))
        .collect()
}

/// Source corpus of a run. Offset 0 of the attribute grid; pretraining
/// and transfer targets take later grid slots, so classes never overlap.
pub fn source_corpus(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    data::generate_corpus(
        cfg.data.classes,
        cfg.data.samples_per_class,
        &cfg.render_config(0),
        rng::derive(seed, "corpus-a"),
    )
}

fn target_corpus(cfg: &ExperimentConfig, seed: u64, index: usize) -> Result<Dataset> {
    let offset = cfg.data.classes + cfg.pretrain.classes + index * cfg.data.classes;
    data::generate_corpus(
        cfg.data.classes,
        cfg.data.test_per_class,
        &cfg.render_config(offset),
        rng::derive(seed, "corpus-target") ^ index as u64,
    )
}

/// All-classes split for the transfer and few-shot protocols.
fn full_split(cfg: &ExperimentConfig, corpus: &Dataset, k_shot: usize, seed: u64) -> SplitSpec {
    SplitSpec {
        base_classes: corpus.classes.iter().map(|c| c.id).collect(),
        novel_classes: Vec::new(),
        k_shot,
        test_per_class: cfg.data.test_per_class,
        seed,
    }
}

/// Base-to-novel pipeline for one seed and one switch setting.
pub fn base_to_novel_run(
    cfg: &ExperimentConfig,
    pre: &Pretrained,
    seed: u64,
    lc: &LossConfig,
    depth: usize,
    dump_saliency: bool,
) -> Result<RunOutcome> {
    let corpus = source_corpus(cfg, seed)?;
    let vocab = corpus.render.vocab();
    let enc = pre.weights.frozen_encoder(&vocab)?;
    let split = data::split_base_novel(
        &corpus,
        cfg.data.base_fraction,
        cfg.data.k_shot,
        cfg.data.test_per_class,
        rng::derive(seed, "split"),
    )?;
    let train_idx = data::sample_k_shot(&corpus, &split, cfg.data.k_shot, rng::derive(seed, "k-shot"))?;
    let base_set = corpus.subset_class_set(&vocab, &split.base_classes)?;
    let novel_set = corpus.subset_class_set(&vocab, &split.novel_classes)?;

    let out = train_prompts(
        cfg,
        &TrainSetup {
            enc: &enc,
            dataset: &corpus,
            train_indices: &train_idx,
            classes: &base_set,
            loss_cfg: lc,
            depth,
            epochs: cfg.optim.epochs,
            seed,
            dump_saliency,
        },
    )?;

    let base_idx = corpus.test_indices(&split.base_classes, cfg.data.test_per_class);
    let novel_idx = corpus.test_indices(&split.novel_classes, cfg.data.test_per_class);
    let base_acc = evaluate(&enc, Some(&out.bank), &corpus, &base_idx, &base_set)? * 100.0;
    let novel_acc = evaluate(&enc, Some(&out.bank), &corpus, &novel_idx, &novel_set)? * 100.0;
    let hm = harmonic_mean(base_acc, novel_acc)?;

    let last = out.epoch_traces.last().copied().unwrap_or(LossReport {
        ce: 0.0,
        sr: 0.0,
        cir: 0.0,
        dir: 0.0,
        lambda: lc.lambda,
        total: 0.0,
    });
    let switches = switches_string(lc);
    let lambda = if lc.enable_dir { lc.lambda } else { 0.0 };
    let rows = vec![ReportRow {
        protocol: cfg.protocol.to_string(),
        seed,
        dataset: "toy-a".into(),
        k_shot: cfg.data.k_shot,
        lambda,
        depth,
        switches: switches.clone(),
        base_acc: Some(base_acc),
        novel_acc: Some(novel_acc),
        hm: Some(hm),
        ce: last.ce,
        sr: last.sr,
        cir: last.cir,
        dir: last.dir,
    }];
    Ok(RunOutcome {
        rows,
        trace: LossTrace {
            seed,
            condition: switches,
            epochs: out.epoch_traces,
        },
        saliency: out.saliency_dump,
        bank_blocks: bank_blocks(&out.bank),
        prototypes: out.prototypes,
    })
}

/// Trains on every class of the source corpus; used by the few-shot and
/// transfer protocols.
fn train_on_all_classes(
    cfg: &ExperimentConfig,
    enc: &DualEncoder,
    corpus: &Dataset,
    k_shot: usize,
    epochs: usize,
    depth: usize,
    seed: u64,
) -> Result<(super::TrainOutput, crate::encoder::ClassSet, Vec<usize>)> {
    let vocab = corpus.render.vocab();
    let split = full_split(cfg, corpus, k_shot, seed);
    let train_idx = data::sample_k_shot(corpus, &split, k_shot, rng::derive(seed, "k-shot"))?;
    let class_set = corpus.class_set(&vocab)?;
    let out = train_prompts(
        cfg,
        &TrainSetup {
            enc,
            dataset: corpus,
            train_indices: &train_idx,
            classes: &class_set,
            loss_cfg: &cfg.loss,
            depth,
            epochs,
            seed,
            dump_saliency: false,
        },
    )?;
    Ok((out, class_set, train_idx))
}

fn transfer_run(cfg: &ExperimentConfig, pre: &Pretrained, seed: u64) -> Result<RunOutcome> {
    let corpus = source_corpus(cfg, seed)?;
    let vocab = corpus.render.vocab();
    let enc = pre.weights.frozen_encoder(&vocab)?;
    let depth = cfg.resolved_depth(cfg.protocol);
    let (out, class_set, _) = train_on_all_classes(
        cfg,
        &enc,
        &corpus,
        cfg.data.k_shot,
        cfg.optim.epochs,
        depth,
        seed,
    )?;

    let switches = switches_string(&cfg.loss);
    let last = out.epoch_traces.last().copied().unwrap();
    let all_ids: Vec<usize> = corpus.classes.iter().map(|c| c.id).collect();
    let source_test = corpus.test_indices(&all_ids, cfg.data.test_per_class);

    let mut evals: Vec<(String, f64)> = Vec::new();
    let source_acc = evaluate(&enc, Some(&out.bank), &corpus, &source_test, &class_set)? * 100.0;
    evals.push(("source".into(), source_acc));

    match cfg.protocol {
        Protocol::CrossDataset => {
            // every learnable parameter stays frozen on the targets
            for (i, name) in ["target-b", "target-c"].iter().enumerate() {
                let target = target_corpus(cfg, seed, i)?;
                let target_set = target.class_set(&vocab)?;
                let idx: Vec<usize> = (0..target.samples.len()).collect();
                let acc = evaluate(&enc, Some(&out.bank), &target, &idx, &target_set)? * 100.0;
                evals.push((name.to_string(), acc));
            }
        }
        Protocol::DomainGeneralization => {
            for kind in [
                ShiftKind::HueRotation,
                ShiftKind::NoiseBoost,
                ShiftKind::TextureSwap,
                ShiftKind::Blur,
            ] {
                let shifted = data::domain_shift(
                    &corpus,
                    kind,
                    cfg.data.shift_magnitude,
                    rng::derive(seed, "domain-shift"),
                )?;
                let acc =
                    evaluate(&enc, Some(&out.bank), &shifted, &source_test, &class_set)? * 100.0;
                evals.push((kind.to_string(), acc));
            }
        }
        other => {
            return Err(Error::invalid(
                "transfer-run",
                format!("protocol {other} is not a transfer protocol"),
            ))
        }
    }

    let rows = evals
        .into_iter()
        .map(|(dataset, acc)| ReportRow {
            protocol: cfg.protocol.to_string(),
            seed,
            dataset,
            k_shot: cfg.data.k_shot,
            lambda: cfg.loss.lambda,
            depth,
            switches: switches.clone(),
            base_acc: Some(acc),
            novel_acc: None,
            hm: None,
            ce: last.ce,
            sr: last.sr,
            cir: last.cir,
            dir: last.dir,
        })
        .collect();
    Ok(RunOutcome {
        rows,
        trace: LossTrace {
            seed,
            condition: switches,
            epochs: out.epoch_traces,
        },
        saliency: out.saliency_dump,
        bank_blocks: bank_blocks(&out.bank),
        prototypes: out.prototypes,
    })
}

fn few_shot_run(cfg: &ExperimentConfig, pre: &Pretrained, seed: u64, k: usize) -> Result<RunOutcome> {
    let corpus = source_corpus(cfg, seed)?;
    let vocab = corpus.render.vocab();
    let enc = pre.weights.frozen_encoder(&vocab)?;
    let depth = cfg.resolved_depth(Protocol::FewShot);
    let (out, class_set, _) = train_on_all_classes(
        cfg,
        &enc,
        &corpus,
        k,
        cfg.optim.few_shot_epochs,
        depth,
        seed,
    )?;
    let all_ids: Vec<usize> = corpus.classes.iter().map(|c| c.id).collect();
    let test_idx = corpus.test_indices(&all_ids, cfg.data.test_per_class);
    let acc = evaluate(&enc, Some(&out.bank), &corpus, &test_idx, &class_set)? * 100.0;
    let last = out.epoch_traces.last().copied().unwrap();
    let switches = switches_string(&cfg.loss);
    let rows = vec![ReportRow {
        protocol: cfg.protocol.to_string(),
        seed,
        dataset: "toy-a".into(),
        k_shot: k,
        lambda: cfg.loss.lambda,
        depth,
        switches: switches.clone(),
        base_acc: Some(acc),
        novel_acc: None,
        hm: None,
        ce: last.ce,
        sr: last.sr,
        cir: last.cir,
        dir: last.dir,
    }];
    Ok(RunOutcome {
        rows,
        trace: LossTrace {
            seed,
            condition: format!("k={k}"),
            epochs: out.epoch_traces,
        },
        saliency: out.saliency_dump,
        bank_blocks: bank_blocks(&out.bank),
        prototypes: out.prototypes,
    })
}

/// Pretrains one backbone per seed, in parallel.
pub fn pretrain_per_seed(cfg: &ExperimentConfig) -> Result<BTreeMap<u64, Arc<Pretrained>>> {
    let results: Result<Vec<(u64, Arc<Pretrained>)>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| Ok((seed, Arc::new(pretrain_backbone(cfg, seed)?))))
        .collect();
    Ok(results?.into_iter().collect())
}

/// Executes the configured protocol over all its seeds and conditions.
pub fn run_protocol(cfg: &ExperimentConfig, parallel: Option<usize>) -> Result<EvalReport> {
    cfg.validate()?;
    match parallel {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Aborted(format!("thread pool: {e}")))?;
            pool.install(|| run_protocol_inner(cfg))
        }
        None => run_protocol_inner(cfg),
    }
}

fn run_protocol_inner(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let started = Instant::now();
    let pres = pretrain_per_seed(cfg)?;
    let pretrain_accuracy: Vec<(u64, f64)> = cfg
        .seeds
        .iter()
        .map(|s| (*s, pres[s].holdout_accuracy))
        .collect();

    // (loss config, depth, k) per run, ordered condition-major so the
    // report groups conditions together
    let depth_default = cfg.resolved_depth(cfg.protocol);
    let mut specs: Vec<(u64, LossConfig, usize, usize)> = Vec::new();
    match cfg.protocol {
        Protocol::BaseToNovel => {
            for &seed in &cfg.seeds {
                specs.push((seed, cfg.loss.clone(), depth_default, cfg.data.k_shot));
            }
        }
        Protocol::Ablation => {
            for lc in ablation_rows(&cfg.loss) {
                for &seed in &cfg.seeds {
                    specs.push((seed, lc.clone(), depth_default, cfg.data.k_shot));
                }
            }
        }
        Protocol::LambdaSweep => {
            for &lambda in &cfg.sweep_lambdas {
                let lc = LossConfig {
                    lambda,
                    ..cfg.loss.clone()
                };
                for &seed in &cfg.seeds {
                    specs.push((seed, lc.clone(), depth_default, cfg.data.k_shot));
                }
            }
        }
        Protocol::DepthSweep => {
            for &nominal in &cfg.sweep_depths {
                let depth = cfg.scale_depth(nominal);
                for &seed in &cfg.seeds {
                    specs.push((seed, cfg.loss.clone(), depth, cfg.data.k_shot));
                }
            }
        }
        Protocol::FewShot => {
            for &k in &cfg.fewshot_k {
                for &seed in &cfg.seeds {
                    specs.push((seed, cfg.loss.clone(), depth_default, k));
                }
            }
        }
        Protocol::CrossDataset | Protocol::DomainGeneralization => {
            for &seed in &cfg.seeds {
                specs.push((seed, cfg.loss.clone(), depth_default, cfg.data.k_shot));
            }
        }
    }

    let outcomes: Result<Vec<RunOutcome>> = specs
        .par_iter()
        .map(|(seed, lc, depth, k)| {
            let pre = &pres[seed];
            match cfg.protocol {
                Protocol::CrossDataset | Protocol::DomainGeneralization => {
                    transfer_run(cfg, pre, *seed)
                }
                Protocol::FewShot => few_shot_run(cfg, pre, *seed, *k),
                _ => base_to_novel_run(cfg, pre, *seed, lc, *depth, false),
            }
        })
        .collect();
    let outcomes = outcomes?;

    let mut rows = Vec::new();
    let mut loss_traces = Vec::new();
    for o in outcomes {
        rows.extend(o.rows);
        loss_traces.push(o.trace);
    }
    let aggregates = EvalReport::compute_aggregates(&rows);
    Ok(EvalReport {
        protocol: cfg.protocol.to_string(),
        config_digest: cfg.digest(),
        seeds: cfg.seeds.clone(),
        rows,
        aggregates,
        loss_traces,
        pretrain_accuracy,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
