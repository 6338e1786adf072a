//! The full training objective: cross-entropy over prompted scores,
//! cross-interactive and self-regularization KL terms, directional
//! prototype alignment, and the weighted total.
//!
//! Score vectors carry provenance tags (which view produced the image
//! and text features, and whether the image was masked) so the pairing
//! rules are enforced at the call site instead of by convention.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{hex, ClassTextMatrix, Coverage, ImageFeature, View};
use crate::error::{Error, Result};
use crate::tensor::{concat, cosine_similarity, kl_divergence, Tensor};

/// Which encoder views produced the image and text sides of a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairTag {
    /// prompted image x prompted text
    PromptedPrompted,
    /// prompted image x frozen text
    PromptedFrozen,
    /// frozen image x prompted text
    FrozenPrompted,
    /// frozen image x frozen text
    FrozenFrozen,
}

/// Per-class cosine similarities of one image feature.
#[derive(Debug, Clone)]
pub struct ScoreVector {
    pub sims: Tensor,
    pub class_ids: Vec<usize>,
    pub tag: PairTag,
    pub image_coverage: Coverage,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Cosine similarity of `image` against every class text feature.
pub fn score_vector(image: &ImageFeature, texts: &ClassTextMatrix) -> Result<ScoreVector> {
    if texts.is_empty() {
        return Err(Error::invalid("score-vector", "empty class matrix"));
    }
    let text_view = texts.rows[0].view;
    if texts.rows.iter().any(|r| r.view != text_view) {
        return Err(Error::invalid("score-vector", "mixed text views in class matrix"));
    }
    let sims: Vec<Tensor> = texts
        .rows
        .iter()
        .map(|row| {
            cosine_similarity(&image.vec, &row.vec).and_then(|c| c.reshape(vec![1]))
        })
        .collect::<Result<_>>()?;
    let sims = concat(&sims, 0)?;
    let tag = match (image.view, text_view) {
        (View::Prompted, View::Prompted) => PairTag::PromptedPrompted,
        (View::Prompted, View::Frozen) => PairTag::PromptedFrozen,
        (View::Frozen, View::Prompted) => PairTag::FrozenPrompted,
        (View::Frozen, View::Frozen) => PairTag::FrozenFrozen,
    };
    Ok(ScoreVector {
        sims,
        class_ids: texts.class_ids.clone(),
        tag,
        image_coverage: image.coverage,
    })
}

/// Temperature NLL over raw similarity logits.
pub(crate) fn nll(sims: &Tensor, position: usize, tau: f64) -> Result<Tensor> {
    let p = sims.softmax(tau)?;
    Ok(p.slice(0, position, position + 1)?.log()?.sum_axis(0)?.scale(-1.0))
}

/// Cross-entropy of the prompted-prompted scores against the label.
pub fn ce_loss(q_pp: &ScoreVector, label: usize, tau: f64) -> Result<Tensor> {
    if q_pp.tag != PairTag::PromptedPrompted {
        return Err(Error::invalid("ce-loss", "expects prompted image x prompted text scores"));
    }
    if q_pp.image_coverage != Coverage::Full {
        return Err(Error::invalid("ce-loss", "expects full-image scores"));
    }
    let position = q_pp
        .class_ids
        .iter()
        .position(|&c| c == label)
        .ok_or_else(|| Error::invalid("ce-loss", format!("label {label} not in class set")))?;
    nll(&q_pp.sims, position, tau)
}

/// KL between temperature-softmaxed similarity vectors; the common core
/// of the cross-interactive and self-regularization terms.
pub(crate) fn kl_of_scores(p_sims: &Tensor, q_sims: &Tensor, tau: f64) -> Result<Tensor> {
    kl_divergence(&p_sims.softmax(tau)?, &q_sims.softmax(tau)?)
}

/// Cross-interactive regularization: aligns (prompted image x frozen
/// text) scores with (frozen image x prompted text) scores. Gradients
/// flow through both sides; there is no stop-gradient.
pub fn cir_loss(q_po: &ScoreVector, q_op: &ScoreVector, tau: f64) -> Result<Tensor> {
    if q_po.tag != PairTag::PromptedFrozen {
        return Err(Error::invalid("cir-loss", "first argument must be prompted image x frozen text"));
    }
    if q_op.tag != PairTag::FrozenPrompted {
        return Err(Error::invalid("cir-loss", "second argument must be frozen image x prompted text"));
    }
    if q_op.image_coverage != Coverage::Full {
        return Err(Error::invalid("cir-loss", "frozen reference scores must come from the full image"));
    }
    if q_po.class_ids != q_op.class_ids {
        return Err(Error::invalid("cir-loss", "class sets differ between arguments"));
    }
    kl_of_scores(&q_po.sims, &q_op.sims, tau)
}

/// Self-regularization: aligns the prompted model's full-image scores
/// with the frozen model's. The target carries no parameters.
pub fn sr_loss(q_pp: &ScoreVector, q_oo: &ScoreVector, tau: f64) -> Result<Tensor> {
    if q_pp.tag != PairTag::PromptedPrompted || q_pp.image_coverage != Coverage::Full {
        return Err(Error::invalid("sr-loss", "first argument must be full-image prompted x prompted scores"));
    }
    if q_oo.tag != PairTag::FrozenFrozen || q_oo.image_coverage != Coverage::Full {
        return Err(Error::invalid("sr-loss", "second argument must be full-image frozen x frozen scores"));
    }
    if q_pp.class_ids != q_oo.class_ids {
        return Err(Error::invalid("sr-loss", "class sets differ between arguments"));
    }
    kl_of_scores(&q_pp.sims, &q_oo.sims, tau)
}

// ── prototypes ──────────────────────────────────────────────────────────

/// Class-mean frozen image embeddings, computed once before prompt
/// training and fixed thereafter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    /// (class id, mean embedding, support count), sorted by class id.
    entries: Vec<(usize, Vec<f64>, usize)>,
}

impl PrototypeTable {
    pub fn get(&self, class_id: usize) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(id, _, _)| *id == class_id)
            .map(|(_, m, _)| m.as_slice())
    }

    pub fn support(&self, class_id: usize) -> Option<usize> {
        self.entries
            .iter()
            .find(|(id, _, _)| *id == class_id)
            .map(|(_, _, n)| *n)
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|(id, _, _)| *id).collect()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |(_, m, _)| m.len())
    }

    /// Checkpoint blocks: a [N_c, d] matrix plus the class-id index table.
    pub fn named_blocks(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        let n = self.entries.len();
        let d = self.dim();
        let mut values = Vec::with_capacity(n * d);
        let mut ids = Vec::with_capacity(n);
        let mut counts = Vec::with_capacity(n);
        for (id, m, c) in &self.entries {
            values.extend_from_slice(m);
            ids.push(*id as f64);
            counts.push(*c as f64);
        }
        let mut map = BTreeMap::new();
        map.insert("prototypes".to_string(), (vec![n, d], values));
        map.insert("prototypes.classes".to_string(), (vec![n], ids));
        map.insert("prototypes.counts".to_string(), (vec![n], counts));
        map
    }

    pub fn from_named_blocks(map: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<PrototypeTable> {
        let (shape, values) = map
            .get("prototypes")
            .ok_or_else(|| Error::Checkpoint("missing prototypes block".into()))?;
        let (_, ids) = map
            .get("prototypes.classes")
            .ok_or_else(|| Error::Checkpoint("missing prototypes.classes block".into()))?;
        let (_, counts) = map
            .get("prototypes.counts")
            .ok_or_else(|| Error::Checkpoint("missing prototypes.counts block".into()))?;
        if shape.len() != 2 || ids.len() != shape[0] || counts.len() != shape[0] {
            return Err(Error::Checkpoint("inconsistent prototype blocks".into()));
        }
        let d = shape[1];
        let entries = ids
            .iter()
            .zip(counts)
            .enumerate()
            .map(|(i, (id, c))| (*id as usize, values[i * d..(i + 1) * d].to_vec(), *c as usize))
            .collect();
        Ok(PrototypeTable { entries })
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (id, m, c) in &self.entries {
            h.update((*id as u64).to_le_bytes());
            h.update((*c as u64).to_le_bytes());
            for v in m {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

/// Arithmetic mean of frozen full-image features per class. Every class
/// in `required` must be represented.
pub fn compute_prototypes(
    features: &[(ImageFeature, usize)],
    required: &[usize],
) -> Result<PrototypeTable> {
    for (f, _) in features {
        if f.view != View::Frozen || f.coverage != Coverage::Full {
            return Err(Error::invalid(
                "prototypes",
                "inputs must be frozen full-image features",
            ));
        }
    }
    let mut by_class: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (f, class) in features {
        let vals = f.vec.values();
        let slot = by_class
            .entry(*class)
            .or_insert_with(|| (vec![0.0; vals.len()], 0));
        for (a, b) in slot.0.iter_mut().zip(vals) {
            *a += b;
        }
        slot.1 += 1;
    }
    let mut entries = Vec::new();
    for &class in required {
        let (sum, count) = by_class
            .get(&class)
            .ok_or_else(|| Error::invalid("prototypes", format!("class {class} has zero samples")))?;
        let mean: Vec<f64> = sum.iter().map(|v| v / *count as f64).collect();
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("prototypes", format!("class {class} mean is not finite")));
        }
        entries.push((class, mean, *count));
    }
    entries.sort_by_key(|(id, _, _)| *id);
    Ok(PrototypeTable { entries })
}

// ── directional alignment ───────────────────────────────────────────────

pub(crate) fn dir_raw(f: &Tensor, target: &[f64]) -> Result<Tensor> {
    let norm: f64 = target.iter().map(|v| v * v).sum();
    if norm == 0.0 {
        return Err(Error::invalid("dir-loss", "zero-norm prototype (degenerate class geometry)"));
    }
    let m = Tensor::vector(target.to_vec());
    let cos = cosine_similarity(f, &m)?;
    Ok(Tensor::scalar(1.0).sub(&cos)?.abs())
}

/// Directional regularization `|1 - cos(f_p, m)|` of a prompted
/// full-image feature against its class prototype (or, for the
/// sample-target ablation, the sample's own frozen feature).
pub fn dir_loss(f_p: &ImageFeature, target: &[f64]) -> Result<Tensor> {
    if f_p.view != View::Prompted || f_p.coverage != Coverage::Full {
        return Err(Error::invalid("dir-loss", "expects the full-image prompted feature"));
    }
    dir_raw(&f_p.vec, target)
}

/// Feature-alignment flavors compared in the analysis harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignmentVariant {
    /// | ||f|| - ||m|| |
    Norm,
    /// (1/d) ||f - m||^2
    Mse,
    /// |1 - cos(f, m)|
    Direction,
}

impl FromStr for AlignmentVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(AlignmentVariant::Norm),
            "mse" => Ok(AlignmentVariant::Mse),
            "direction" => Ok(AlignmentVariant::Direction),
            other => Err(Error::Config(format!(
                "unknown alignment variant {other:?} (expected norm, mse or direction)"
            ))),
        }
    }
}

impl fmt::Display for AlignmentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignmentVariant::Norm => "norm",
            AlignmentVariant::Mse => "mse",
            AlignmentVariant::Direction => "direction",
        })
    }
}

pub(crate) fn alignment_raw(f: &Tensor, target: &[f64], variant: AlignmentVariant) -> Result<Tensor> {
    let norm: f64 = target.iter().map(|v| v * v).sum();
    if norm == 0.0 {
        return Err(Error::invalid("alignment-loss", "zero-norm prototype"));
    }
    let m = Tensor::vector(target.to_vec());
    match variant {
        AlignmentVariant::Direction => dir_raw(f, target),
        AlignmentVariant::Norm => {
            let nf = crate::tensor::dot(f, f)?.sqrt()?;
            let nm = crate::tensor::dot(&m, &m)?.sqrt()?;
            Ok(nf.sub(&nm)?.abs())
        }
        AlignmentVariant::Mse => {
            let diff = f.sub(&m)?;
            diff.mul(&diff)?.mean_axis(0)
        }
    }
}

pub fn alignment_variant_loss(
    f_p: &ImageFeature,
    target: &[f64],
    variant: AlignmentVariant,
) -> Result<Tensor> {
    if f_p.view != View::Prompted || f_p.coverage != Coverage::Full {
        return Err(Error::invalid("alignment-loss", "expects the full-image prompted feature"));
    }
    alignment_raw(&f_p.vec, target, variant)
}

// ── total ───────────────────────────────────────────────────────────────

/// Scalar loss components of one step, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub sr: f64,
    pub cir: f64,
    pub dir: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `total = ce + sr + cir + lambda * dir`, keeping each component for
/// reporting.
pub fn total_loss(
    ce: &Tensor,
    sr: &Tensor,
    cir: &Tensor,
    dir: &Tensor,
    lambda: f64,
) -> Result<(Tensor, LossReport)> {
    if lambda < 0.0 {
        return Err(Error::invalid("total-loss", format!("lambda {lambda} < 0")));
    }
    for t in [ce, sr, cir, dir] {
        if t.len() != 1 {
            return Err(Error::invalid("total-loss", "components must be scalars"));
        }
    }
    let total = ce.add(sr)?.add(cir)?.add(&dir.scale(lambda))?;
    let report = LossReport {
        ce: ce.item(),
        sr: sr.item(),
        cir: cir.item(),
        dir: dir.item(),
        lambda,
        total: total.item(),
    };
    Ok((total, report))
}

// ── gradient checks for the composite losses ────────────────────────────

/// Finite-difference checks through the full loss pipeline: cosine score
/// vectors, temperature softmax, KL terms, directional alignment and the
/// weighted total.
pub fn gradcheck_losses(
    cases: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<crate::tensor::check::CheckReport>> {
    use crate::tensor::check::{check_gradients, InputSpec};

    let tau = 0.07;
    let d = 6;
    let n_classes = 4;
    let mut reports = Vec::new();

    reports.push(check_gradients(
        "ce-loss",
        &[InputSpec::real(&[8])],
        &|t| nll(&t[0], 3, tau),
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "sr-loss",
        &[InputSpec::real(&[8]), InputSpec::real(&[8])],
        &|t| kl_of_scores(&t[0], &t[1], tau),
        cases,
        rng,
    )?);

    // CIR through the cosine score vectors: gradients reach both the
    // prompted image feature and every prompted text row.
    let frozen_text: Vec<Vec<f64>> = (0..n_classes)
        .map(|i| (0..d).map(|j| ((i * d + j) as f64 * 0.83).sin() + 0.1).collect())
        .collect();
    let frozen_img: Vec<f64> = (0..d).map(|j| (j as f64 * 1.7).cos() + 0.2).collect();
    let score_rows = move |img: &Tensor, rows: &Tensor| -> crate::error::Result<Tensor> {
        let sims: Vec<Tensor> = (0..rows.shape()[0])
            .map(|i| cosine_similarity(img, &rows.row(i)?)?.reshape(vec![1]))
            .collect::<Result<_>>()?;
        concat(&sims, 0)
    };
    {
        let frozen_text = frozen_text.clone();
        let frozen_img = frozen_img.clone();
        reports.push(check_gradients(
            "cir-loss",
            &[InputSpec::real(&[d]), InputSpec::real(&[n_classes, d])],
            &move |t| {
                let g_o: Vec<Tensor> = frozen_text
                    .iter()
                    .map(|r| Tensor::vector(r.clone()))
                    .collect();
                let sims_po: Vec<Tensor> = g_o
                    .iter()
                    .map(|g| cosine_similarity(&t[0], g)?.reshape(vec![1]))
                    .collect::<Result<_>>()?;
                let q_po = concat(&sims_po, 0)?;
                let f_o = Tensor::vector(frozen_img.clone());
                let q_op = score_rows(&f_o, &t[1])?;
                kl_of_scores(&q_po, &q_op, tau)
            },
            cases,
            rng,
        )?);
    }

    let proto: Vec<f64> = (0..d).map(|j| (j as f64 * 0.9).sin() + 0.3).collect();
    {
        let proto = proto.clone();
        reports.push(check_gradients(
            "dir-loss",
            &[InputSpec::nonzero(&[d])],
            &move |t| dir_raw(&t[0], &proto),
            cases,
            rng,
        )?);
    }
    {
        let proto = proto.clone();
        reports.push(check_gradients(
            "alignment-norm",
            &[InputSpec::nonzero(&[d])],
            &move |t| alignment_raw(&t[0], &proto, AlignmentVariant::Norm),
            cases,
            rng,
        )?);
    }
    {
        let proto = proto.clone();
        reports.push(check_gradients(
            "alignment-mse",
            &[InputSpec::real(&[d])],
            &move |t| alignment_raw(&t[0], &proto, AlignmentVariant::Mse),
            cases,
            rng,
        )?);
    }

    // Eq in full: CE + SR + CIR + lambda * DiR with shared inputs.
    {
        let frozen_text = frozen_text.clone();
        let frozen_img = frozen_img.clone();
        let proto = proto.clone();
        reports.push(check_gradients(
            "total-loss",
            &[
                InputSpec::real(&[d]),            // f_p (full image)
                InputSpec::real(&[d]),            // f_p (masked image)
                InputSpec::real(&[n_classes, d]), // prompted text rows
            ],
            &move |t| {
                let g_o: Vec<Tensor> = frozen_text
                    .iter()
                    .map(|r| Tensor::vector(r.clone()))
                    .collect();
                let f_o = Tensor::vector(frozen_img.clone());
                let q_pp = score_rows(&t[0], &t[2])?;
                let q_oo = {
                    let sims: Vec<Tensor> = g_o
                        .iter()
                        .map(|g| cosine_similarity(&f_o, g)?.reshape(vec![1]))
                        .collect::<Result<_>>()?;
                    concat(&sims, 0)?
                };
                let q_po = {
                    let sims: Vec<Tensor> = g_o
                        .iter()
                        .map(|g| cosine_similarity(&t[1], g)?.reshape(vec![1]))
                        .collect::<Result<_>>()?;
                    concat(&sims, 0)?
                };
                let q_op = score_rows(&f_o, &t[2])?;
                let ce = nll(&q_pp, 1, tau)?;
                let sr = kl_of_scores(&q_pp, &q_oo, tau)?;
                let cir = kl_of_scores(&q_po, &q_op, tau)?;
                let dir = dir_raw(&t[0], &proto)?;
                ce.add(&sr)?.add(&cir)?.add(&dir.scale(12.0))
            },
            cases,
            rng,
        )?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::TextFeature;

    fn img(vals: Vec<f64>, view: View, coverage: Coverage) -> ImageFeature {
        ImageFeature {
            vec: Tensor::vector(vals),
            view,
            coverage,
        }
    }

    fn texts(rows: Vec<Vec<f64>>, view: View) -> ClassTextMatrix {
        ClassTextMatrix {
            class_ids: (0..rows.len()).collect(),
            rows: rows
                .into_iter()
                .map(|vals| TextFeature {
                    vec: Tensor::vector(vals),
                    view,
                })
                .collect(),
        }
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn score_vector_orthonormal_rows() {
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let f = img(vec![0.0, 1.0, 0.0], View::Prompted, Coverage::Full);
        let q = score_vector(&f, &texts(rows, View::Frozen)).unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(q.tag, PairTag::PromptedFrozen);
        assert!(close(q.sims.values()[1], 1.0, 1e-12));
        assert!(close(q.sims.values()[0], 0.0, 1e-12));
        assert!(close(q.sims.values()[2], 0.0, 1e-12));
    }

    #[test]
    fn score_vector_matches_cosine_oracle() {
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..4).map(|j| ((i * 4 + j) as f64).sin() + 0.2).collect())
            .collect();
        let fv: Vec<f64> = (0..4).map(|j| (j as f64 * 0.31).cos()).collect();
        let f = img(fv.clone(), View::Frozen, Coverage::Full);
        let q = score_vector(&f, &texts(rows.clone(), View::Frozen)).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let dot: f64 = fv.iter().zip(row).map(|(a, b)| a * b).sum();
            let na: f64 = fv.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(close(q.sims.values()[i], dot / (na * nb), 1e-12));
            assert!(q.sims.values()[i].abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn ce_uniform_scores_is_log_n() {
        let sims = Tensor::vector(vec![0.37; 4]);
        let loss = nll(&sims, 2, 0.07).unwrap();
        assert!(close(loss.item(), (4f64).ln(), 1e-6));
        assert!(close(loss.item(), 1.3863, 1e-4));
    }

    #[test]
    fn ce_confident_scores_vanish() {
        let mut sims = vec![-1.0; 8];
        sims[5] = 1.0;
        let loss = nll(&Tensor::vector(sims), 5, 0.01).unwrap();
        assert!(loss.item() < 0.01, "{}", loss.item());
    }

    #[test]
    fn ce_gradient_pushes_label_upward() {
        let sims = Tensor::leaf(vec![4], vec![0.1; 4], true).unwrap();
        nll(&sims, 1, 0.07).unwrap().backward().unwrap();
        let g = sims.grad().unwrap();
        // descent moves sims[label] up and the rest down
        assert!(g[1] < 0.0);
        for (i, gi) in g.iter().enumerate() {
            if i != 1 {
                assert!(*gi > 0.0);
            }
        }
    }

    #[test]
    fn ce_rejects_unknown_label_and_wrong_tag() {
        let f = img(vec![1.0, 0.2], View::Prompted, Coverage::Full);
        let q = score_vector(&f, &texts(vec![vec![1.0, 0.0], vec![0.0, 1.0]], View::Prompted))
            .unwrap();
        assert!(ce_loss(&q, 9, 0.07).is_err());
        let q_frozen_text =
            score_vector(&f, &texts(vec![vec![1.0, 0.0], vec![0.0, 1.0]], View::Frozen)).unwrap();
        assert!(ce_loss(&q_frozen_text, 0, 0.07).is_err());
    }

    #[test]
    fn kl_losses_vanish_when_views_agree() {
        // prompted view identical to frozen view with an empty mask:
        // both score vectors coincide, so both regularizers are zero
        let vals = vec![0.4, -0.3, 0.9];
        let rows = vec![vec![0.2, 0.5, -0.1], vec![-0.7, 0.3, 0.4]];
        let f_p = img(vals.clone(), View::Prompted, Coverage::Full);
        let f_o = img(vals, View::Frozen, Coverage::Full);
        let q_pp = score_vector(&f_p, &texts(rows.clone(), View::Prompted)).unwrap();
        let q_oo = score_vector(&f_o, &texts(rows.clone(), View::Frozen)).unwrap();
        let q_po = score_vector(&f_p, &texts(rows.clone(), View::Frozen)).unwrap();
        let q_op = score_vector(&f_o, &texts(rows, View::Prompted)).unwrap();
        assert_eq!(sr_loss(&q_pp, &q_oo, 0.07).unwrap().item(), 0.0);
        assert_eq!(cir_loss(&q_po, &q_op, 0.07).unwrap().item(), 0.0);
    }

    #[test]
    fn kl_losses_are_non_negative_and_match_composition_oracle() {
        let mut rng = crate::rng::stream(5, "loss-oracle");
        for _ in 0..30 {
            let a: Vec<f64> = (0..8).map(|_| crate::rng::gaussian(&mut rng)).collect();
            let b: Vec<f64> = (0..8).map(|_| crate::rng::gaussian(&mut rng)).collect();
            let ta = Tensor::vector(a);
            let tb = Tensor::vector(b);
            let got = kl_of_scores(&ta, &tb, 0.07).unwrap().item();
            assert!(got >= 0.0);
            let oracle = kl_divergence(&ta.softmax(0.07).unwrap(), &tb.softmax(0.07).unwrap())
                .unwrap()
                .item();
            assert!(close(got, oracle, 1e-10));
        }
    }

    #[test]
    fn cir_enforces_pairing() {
        let f_p = img(vec![1.0, 0.1], View::Prompted, Coverage::Masked);
        let f_o = img(vec![0.9, 0.2], View::Frozen, Coverage::Full);
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let q_po = score_vector(&f_p, &texts(rows.clone(), View::Frozen)).unwrap();
        let q_op = score_vector(&f_o, &texts(rows.clone(), View::Prompted)).unwrap();
        assert!(cir_loss(&q_po, &q_op, 0.07).is_ok());
        // swapped arguments violate the tags
        assert!(cir_loss(&q_op, &q_po, 0.07).is_err());
        // masked frozen reference is rejected
        let f_o_masked = img(vec![0.9, 0.2], View::Frozen, Coverage::Masked);
        let q_op_masked = score_vector(&f_o_masked, &texts(rows, View::Prompted)).unwrap();
        assert!(cir_loss(&q_po, &q_op_masked, 0.07).is_err());
    }

    #[test]
    fn prototype_means() {
        let feats = vec![
            (img(vec![1.0, 0.0], View::Frozen, Coverage::Full), 0),
            (img(vec![0.0, 1.0], View::Frozen, Coverage::Full), 0),
            (img(vec![0.5, -0.5], View::Frozen, Coverage::Full), 1),
        ];
        let table = compute_prototypes(&feats, &[0, 1]).unwrap();
        assert_eq!(table.get(0).unwrap(), &[0.5, 0.5]);
        assert_eq!(table.get(1).unwrap(), &[0.5, -0.5]);
        assert_eq!(table.support(0), Some(2));
        assert_eq!(table.support(1), Some(1));
    }

    #[test]
    fn prototype_missing_class_named_in_error() {
        let feats = vec![(img(vec![1.0, 0.0], View::Frozen, Coverage::Full), 0)];
        let err = compute_prototypes(&feats, &[0, 7]).unwrap_err().to_string();
        assert!(err.contains("class 7"), "{err}");
    }

    #[test]
    fn prototype_rejects_prompted_inputs() {
        let feats = vec![(img(vec![1.0, 0.0], View::Prompted, Coverage::Full), 0)];
        assert!(compute_prototypes(&feats, &[0]).is_err());
    }

    #[test]
    fn degenerate_prototype_rejected_downstream() {
        let feats = vec![
            (img(vec![1.0, -1.0], View::Frozen, Coverage::Full), 0),
            (img(vec![-1.0, 1.0], View::Frozen, Coverage::Full), 0),
        ];
        let table = compute_prototypes(&feats, &[0]).unwrap();
        assert_eq!(table.get(0).unwrap(), &[0.0, 0.0]);
        let f = img(vec![1.0, 0.0], View::Prompted, Coverage::Full);
        assert!(dir_loss(&f, table.get(0).unwrap()).is_err());
    }

    #[test]
    fn dir_loss_geometry() {
        let m = vec![0.6, -0.8, 0.2];
        let aligned = img(m.clone(), View::Prompted, Coverage::Full);
        assert!(close(dir_loss(&aligned, &m).unwrap().item(), 0.0, 1e-12));
        for c in [0.5, 2.0, 10.0] {
            let scaled = img(m.iter().map(|v| v * c).collect(), View::Prompted, Coverage::Full);
            assert!(close(dir_loss(&scaled, &m).unwrap().item(), 0.0, 1e-9));
        }
        let anti = img(m.iter().map(|v| -v).collect(), View::Prompted, Coverage::Full);
        assert!(close(dir_loss(&anti, &m).unwrap().item(), 2.0, 1e-12));
        // rotated prototype has positive loss
        let rotated = img(vec![-0.8, 0.6, 0.2], View::Prompted, Coverage::Full);
        assert!(dir_loss(&rotated, &m).unwrap().item() > 1e-6);
    }

    #[test]
    fn alignment_variants_closed_forms() {
        let m = vec![1.0, 0.0];
        let same = img(m.clone(), View::Prompted, Coverage::Full);
        for v in [AlignmentVariant::Norm, AlignmentVariant::Mse, AlignmentVariant::Direction] {
            assert!(close(alignment_variant_loss(&same, &m, v).unwrap().item(), 0.0, 1e-12));
        }
        let doubled = img(vec![2.0, 0.0], View::Prompted, Coverage::Full);
        assert!(close(
            alignment_variant_loss(&doubled, &m, AlignmentVariant::Norm).unwrap().item(),
            1.0,
            1e-12
        ));
        assert!(close(
            alignment_variant_loss(&doubled, &m, AlignmentVariant::Direction).unwrap().item(),
            0.0,
            1e-12
        ));
        let orthogonal = img(vec![0.0, 1.0], View::Prompted, Coverage::Full);
        assert!(close(
            alignment_variant_loss(&orthogonal, &m, AlignmentVariant::Mse).unwrap().item(),
            1.0,
            1e-12
        ));
        assert!("nope".parse::<AlignmentVariant>().is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let t = |v: f64| Tensor::scalar(v);
        let (_, r) = total_loss(&t(1.0), &t(0.5), &t(0.25), &t(0.1), 12.0).unwrap();
        assert!(close(r.total, 2.95, 1e-12));
        let (_, r0) = total_loss(&t(1.0), &t(0.5), &t(0.25), &t(0.1), 0.0).unwrap();
        assert!(close(r0.total, 1.75, 1e-12));
        assert!(total_loss(&t(1.0), &t(0.5), &t(0.25), &t(0.1), -1.0).is_err());
    }

    #[test]
    fn loss_report_identity_on_random_components() {
        let mut rng = crate::rng::stream(9, "report");
        for _ in 0..50 {
            let vals: Vec<f64> = (0..4).map(|_| crate::rng::gaussian(&mut rng).abs()).collect();
            let lambda = crate::rng::gaussian(&mut rng).abs() * 10.0;
            let (_, r) = total_loss(
                &Tensor::scalar(vals[0]),
                &Tensor::scalar(vals[1]),
                &Tensor::scalar(vals[2]),
                &Tensor::scalar(vals[3]),
                lambda,
            )
            .unwrap();
            assert!(close(r.total, r.ce + r.sr + r.cir + lambda * r.dir, 1e-9));
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(13, "loss-gradcheck");
        for report in gradcheck_losses(4, &mut rng).unwrap() {
            assert!(
                report.passed(),
                "{}: max rel err {}",
                report.name,
                report.max_rel_err
            );
        }
    }
}
