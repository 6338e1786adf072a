//! Saliency-guided patch masking.
//!
//! Patch importance comes from cross-modal attention under the frozen
//! model: the frozen text feature of the sample's class is projected by
//! the frozen image encoder's final-layer query weights, patch tokens by
//! the key weights, and the head-averaged softmax over patch positions
//! gives the scores. The lowest-scored gamma fraction forms a candidate
//! set from which a random half is masked, resampled every step.
//!
//! Everything here works on plain values from the frozen pass, so no
//! gradient can reach the mask selection.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{TextFeature, TokenTrace, View};
use crate::error::{Error, Result};

/// Non-negative per-patch importance, summing to 1.
#[derive(Debug, Clone)]
pub struct SaliencyScores {
    pub alpha: Vec<f64>,
    /// Class whose frozen text feature formed the attention query.
    pub source_class: usize,
}

/// Outcome of the two-stage masking policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// The floor(gamma * V) lowest-scored patch indices, ascending.
    pub candidate_set: Vec<usize>,
    /// Random subset of the candidates actually masked, ascending.
    pub masked_set: Vec<usize>,
}

/// Head-averaged attention of the class text feature over patch tokens.
pub fn score_tokens(
    trace: &TokenTrace,
    text_cls: &TextFeature,
    source_class: usize,
) -> Result<SaliencyScores> {
    if trace.prompted || trace.masked {
        return Err(Error::invalid(
            "score-tokens",
            "scores must come from the frozen, full-image pass",
        ));
    }
    if text_cls.view != View::Frozen {
        return Err(Error::invalid(
            "score-tokens",
            "query text feature must come from the frozen encoder",
        ));
    }
    let w = trace.width;
    if text_cls.vec.len() != w {
        return Err(Error::invalid(
            "score-tokens",
            format!("text feature width {} vs token width {w}", text_cls.vec.len()),
        ));
    }
    let heads = trace.heads;
    let c = w / heads;
    let scale = 1.0 / (c as f64).sqrt();
    let n_patches = trace.patch_end - trace.patch_start;

    // q = text feature through the frozen final-layer Q projection
    let tv = text_cls.vec.values();
    let mut q = vec![0.0; w];
    for (i, &t) in tv.iter().enumerate() {
        let row = &trace.wq[i * w..(i + 1) * w];
        for j in 0..w {
            q[j] += t * row[j];
        }
    }
    // keys for patch tokens only: CLS and prompt positions are excluded
    // from the softmax support
    let mut keys = vec![0.0; n_patches * w];
    for p in 0..n_patches {
        let tok = &trace.tokens[(trace.patch_start + p) * w..(trace.patch_start + p + 1) * w];
        let out = &mut keys[p * w..(p + 1) * w];
        for (i, &t) in tok.iter().enumerate() {
            let row = &trace.wk[i * w..(i + 1) * w];
            for j in 0..w {
                out[j] += t * row[j];
            }
        }
    }

    let mut alpha = vec![0.0; n_patches];
    for h in 0..heads {
        let qh = &q[h * c..(h + 1) * c];
        let logits: Vec<f64> = (0..n_patches)
            .map(|p| {
                let kh = &keys[p * w + h * c..p * w + (h + 1) * c];
                qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for p in 0..n_patches {
            alpha[p] += exps[p] / sum / heads as f64;
        }
    }
    Ok(SaliencyScores {
        alpha,
        source_class,
    })
}

/// Picks the candidate set (lowest-scored floor(gamma * V) patches, ties
/// broken by ascending index) and masks a uniform random subset of
/// round-half-up(fraction * candidates), drawn without replacement.
pub fn select_mask(
    scores: &SaliencyScores,
    gamma: f64,
    mask_fraction_within: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid("select-mask", format!("gamma {gamma} not in [0, 1]")));
    }
    if !(0.0..=1.0).contains(&mask_fraction_within) {
        return Err(Error::invalid(
            "select-mask",
            format!("mask fraction {mask_fraction_within} not in [0, 1]"),
        ));
    }
    let v = scores.alpha.len();
    let n_candidates = (gamma * v as f64).floor() as usize;
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| {
        scores.alpha[a]
            .partial_cmp(&scores.alpha[b])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut candidate_set: Vec<usize> = order[..n_candidates].to_vec();
    candidate_set.sort_unstable();

    let n_masked = (mask_fraction_within * n_candidates as f64 + 0.5).floor() as usize;
    let mut masked_set: Vec<usize> = sample(rng, n_candidates, n_masked)
        .into_iter()
        .map(|i| candidate_set[i])
        .collect();
    masked_set.sort_unstable();
    Ok(MaskPlan {
        candidate_set,
        masked_set,
    })
}

/// Per-patch keep flags: false exactly at the masked indices.
pub fn to_keep_mask(plan: &MaskPlan, v: usize) -> Result<Vec<bool>> {
    let mut keep = vec![true; v];
    for &i in &plan.masked_set {
        if i >= v {
            return Err(Error::invalid(
                "keep-mask",
                format!("masked index {i} out of range for {v} patches"),
            ));
        }
        keep[i] = false;
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::TokenTrace;
    use crate::tensor::Tensor;

    fn trace_from_tokens(tokens: Vec<Vec<f64>>, w: usize, heads: usize) -> TokenTrace {
        let seq_len = tokens.len();
        let mut eye = vec![0.0; w * w];
        for i in 0..w {
            eye[i * w + i] = 1.0;
        }
        TokenTrace {
            tokens: tokens.into_iter().flatten().collect(),
            seq_len,
            width: w,
            heads,
            patch_start: 1,
            patch_end: seq_len,
            wq: eye.clone(),
            wk: eye,
            prompted: false,
            masked: false,
            seq_lens: vec![seq_len],
        }
    }

    fn frozen_text(vals: Vec<f64>) -> TextFeature {
        TextFeature {
            vec: Tensor::vector(vals),
            view: View::Frozen,
        }
    }

    #[test]
    fn identical_keys_give_uniform_scores() {
        let tok = vec![0.3, -0.8];
        let trace = trace_from_tokens(
            vec![vec![9.0, 9.0], tok.clone(), tok.clone(), tok.clone(), tok],
            2,
            2,
        );
        let scores = score_tokens(&trace, &frozen_text(vec![1.0, -2.0]), 0).unwrap();
        for a in &scores.alpha {
            assert!((a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_logit_gap_matches_binary_softmax() {
        // H = 1, C = 1: query 1.0, keys 0 and 1 give logits (0, 1)
        let trace = trace_from_tokens(vec![vec![5.0], vec![0.0], vec![1.0]], 1, 1);
        let scores = score_tokens(&trace, &frozen_text(vec![1.0]), 3).unwrap();
        assert!((scores.alpha[0] - 0.2689).abs() < 1e-4);
        assert!((scores.alpha[1] - 0.7311).abs() < 1e-4);
        assert_eq!(scores.source_class, 3);
    }

    #[test]
    fn alpha_sums_to_one() {
        let rows: Vec<Vec<f64>> = (0..9)
            .map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.7).sin()).collect())
            .collect();
        let trace = trace_from_tokens(rows, 4, 2);
        let scores = score_tokens(&trace, &frozen_text(vec![0.1, 0.2, -0.4, 1.0]), 0).unwrap();
        let sum: f64 = scores.alpha.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(scores.alpha.iter().all(|a| *a >= 0.0));
    }

    #[test]
    fn prompted_or_masked_traces_rejected() {
        let mut trace = trace_from_tokens(vec![vec![0.0], vec![1.0]], 1, 1);
        trace.prompted = true;
        assert!(score_tokens(&trace, &frozen_text(vec![1.0]), 0).is_err());
        trace.prompted = false;
        trace.masked = true;
        assert!(score_tokens(&trace, &frozen_text(vec![1.0]), 0).is_err());
        trace.masked = false;
        let prompted_text = TextFeature {
            vec: Tensor::vector(vec![1.0]),
            view: View::Prompted,
        };
        assert!(score_tokens(&trace, &prompted_text, 0).is_err());
    }

    fn fixed_scores(v: usize) -> SaliencyScores {
        SaliencyScores {
            alpha: (0..v).map(|i| (i + 1) as f64 / (v * (v + 1) / 2) as f64).collect(),
            source_class: 0,
        }
    }

    #[test]
    fn mask_sizes_match_policy() {
        let scores = fixed_scores(16);
        let mut rng = crate::rng::stream(1, "mask");
        let plan = select_mask(&scores, 0.5, 0.5, &mut rng).unwrap();
        assert_eq!(plan.candidate_set.len(), 8);
        assert_eq!(plan.masked_set.len(), 4);
        assert!(plan.masked_set.iter().all(|i| plan.candidate_set.contains(i)));
        // scores ascend with index here, so candidates are the first 8
        assert_eq!(plan.candidate_set, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn gamma_zero_yields_empty_mask() {
        let scores = fixed_scores(16);
        let mut rng = crate::rng::stream(2, "mask");
        let plan = select_mask(&scores, 0.0, 0.5, &mut rng).unwrap();
        assert!(plan.candidate_set.is_empty());
        assert!(plan.masked_set.is_empty());
        assert_eq!(to_keep_mask(&plan, 16).unwrap(), vec![true; 16]);
    }

    #[test]
    fn ties_break_by_ascending_index() {
        let scores = SaliencyScores {
            alpha: vec![0.25; 4],
            source_class: 0,
        };
        let mut rng = crate::rng::stream(3, "mask");
        let plan = select_mask(&scores, 0.5, 1.0, &mut rng).unwrap();
        assert_eq!(plan.candidate_set, vec![0, 1]);
        assert_eq!(plan.masked_set, vec![0, 1]);
    }

    #[test]
    fn masked_alpha_never_exceeds_unmasked_non_candidate() {
        let mut rng = crate::rng::stream(4, "mask");
        let mut alpha: Vec<f64> = (0..16).map(|i| ((i * 31 + 7) % 16) as f64 / 120.0).collect();
        let total: f64 = alpha.iter().sum();
        for a in &mut alpha {
            *a /= total;
        }
        let scores = SaliencyScores {
            alpha: alpha.clone(),
            source_class: 0,
        };
        for _ in 0..50 {
            let plan = select_mask(&scores, 0.5, 0.5, &mut rng).unwrap();
            let max_masked = plan
                .masked_set
                .iter()
                .map(|&i| alpha[i])
                .fold(f64::NEG_INFINITY, f64::max);
            for i in 0..16 {
                if !plan.candidate_set.contains(&i) {
                    assert!(alpha[i] >= max_masked);
                }
            }
        }
    }

    #[test]
    fn masking_is_deterministic_per_seed() {
        let scores = fixed_scores(16);
        let draw = || {
            let mut rng = crate::rng::stream(7, "mask");
            (0..20)
                .map(|_| select_mask(&scores, 0.5, 0.5, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn keep_mask_layout() {
        let plan = MaskPlan {
            candidate_set: vec![0, 1],
            masked_set: vec![0],
        };
        assert_eq!(to_keep_mask(&plan, 4).unwrap(), vec![false, true, true, true]);
        let bad = MaskPlan {
            candidate_set: vec![9],
            masked_set: vec![9],
        };
        assert!(to_keep_mask(&bad, 4).is_err());
        let count = to_keep_mask(&plan, 4)
            .unwrap()
            .iter()
            .filter(|k| !**k)
            .count();
        assert_eq!(count, plan.masked_set.len());
    }
}
