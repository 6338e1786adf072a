//! Miniature contrastive dual encoder with deep vision-language prompts.
//!
//! Both towers share one token width equal to the joint embedding
//! dimension, so the saliency module can form cross-modal attention
//! scores without extra adapters. The backbone view with no prompts is
//! the frozen teacher; the prompted view runs the same weights with
//! per-layer learnable prompt tokens spliced into the sequence.

pub mod tokenizer;

pub use tokenizer::{ClassSet, Vocab, TEMPLATE};

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{concat, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Joint embedding width; also the token width of both towers.
    pub dim: usize,
    /// Transformer layers per tower.
    pub layers: usize,
    /// Attention heads.
    pub heads: usize,
    /// Image patches per side; total patches = side squared.
    pub patches_per_side: usize,
    /// Pixels per patch side; each patch vector is side^2 * 3 channels.
    pub patch_pixels: usize,
    /// Feed-forward expansion factor.
    pub ff_mult: usize,
    /// Maximum text sequence length including prompts and specials.
    pub text_ctx: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 32,
            layers: 4,
            heads: 4,
            patches_per_side: 4,
            patch_pixels: 4,
            ff_mult: 2,
            text_ctx: 24,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.layers < 1 {
            return Err(Error::Config("need at least one layer".into()));
        }
        if self.num_patches() < 4 {
            return Err(Error::Config("need at least 4 image patches".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side * self.patches_per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_pixels * self.patch_pixels * 3
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Which parameter set produced a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Frozen,
    Prompted,
}

/// Whether the image feature saw the full patch grid or a masked one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    Full,
    Masked,
}

/// Image feature with provenance, enforced by the loss pairing rules.
#[derive(Debug, Clone)]
pub struct ImageFeature {
    pub vec: Tensor,
    pub view: View,
    pub coverage: Coverage,
}

#[derive(Debug, Clone)]
pub struct TextFeature {
    pub vec: Tensor,
    pub view: View,
}

/// Final-layer token record from an image forward pass.
///
/// Holds the normalized output tokens plus the last layer's Q/K weights
/// as plain values, so saliency scoring never touches the graph.
#[derive(Debug, Clone)]
pub struct TokenTrace {
    pub tokens: Vec<f64>,
    pub seq_len: usize,
    pub width: usize,
    pub heads: usize,
    /// Row range of the patch tokens inside the sequence.
    pub patch_start: usize,
    pub patch_end: usize,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub prompted: bool,
    pub masked: bool,
    /// Sequence length entering each transformer layer.
    pub seq_lens: Vec<usize>,
}

struct LayerWeights {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ff1: Tensor,
    ff2: Tensor,
}

struct Tower {
    /// Patch projection [patch_dim, w] or token embeddings [vocab, w].
    embed: Tensor,
    pos: Tensor,
    cls: Option<Tensor>,
    layers: Vec<LayerWeights>,
    proj: Tensor,
}

/// Learnable prompt tokens, one set per prompted layer. The only
/// trainable parameters during prompt learning.
#[derive(Clone)]
pub struct PromptBank {
    pub visual: Vec<Tensor>,
    pub textual: Vec<Tensor>,
}

impl PromptBank {
    /// Fresh bank: Gaussian visual prompts, first-layer textual prompts
    /// copied from the template word embeddings, deeper textual prompts
    /// Gaussian.
    pub fn init(
        cfg: &EncoderConfig,
        vocab: &Vocab,
        encoder: &DualEncoder,
        visual_count: usize,
        textual_count: usize,
        depth: usize,
        seed: u64,
    ) -> Result<PromptBank> {
        if depth > cfg.layers {
            return Err(Error::Config(format!(
                "prompted depth {depth} exceeds {} layers",
                cfg.layers
            )));
        }
        if depth == 0 || visual_count == 0 || textual_count == 0 {
            return Err(Error::Config("prompt counts and depth must be positive".into()));
        }
        let mut r = rng::stream(seed, "prompt-init");
        let w = cfg.dim;
        let gauss = |n: usize, r: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng::gaussian(r) * INIT_STD).collect()
        };
        let mut visual = Vec::with_capacity(depth);
        let mut textual = Vec::with_capacity(depth);
        for layer in 0..depth {
            visual.push(Tensor::leaf(
                vec![visual_count, w],
                gauss(visual_count * w, &mut r),
                true,
            )?);
            if layer == 0 {
                let template = vocab.template_ids();
                let table = encoder.text.embed.values();
                let mut vals = Vec::with_capacity(textual_count * w);
                for i in 0..textual_count {
                    let id = template[i % template.len()];
                    vals.extend_from_slice(&table[id * w..(id + 1) * w]);
                }
                textual.push(Tensor::leaf(vec![textual_count, w], vals, true)?);
            } else {
                textual.push(Tensor::leaf(
                    vec![textual_count, w],
                    gauss(textual_count * w, &mut r),
                    true,
                )?);
            }
        }
        Ok(PromptBank { visual, textual })
    }

    pub fn depth(&self) -> usize {
        self.visual.len()
    }

    pub fn visual_count(&self) -> usize {
        self.visual[0].shape()[0]
    }

    pub fn textual_count(&self) -> usize {
        self.textual[0].shape()[0]
    }

    /// All trainable tensors, in a stable order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.visual.iter_mut().chain(self.textual.iter_mut()).collect()
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.visual.iter().chain(self.textual.iter()).cloned().collect()
    }

    pub fn named_weights(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        for (i, t) in self.visual.iter().enumerate() {
            map.insert(format!("prompts.visual.{i}"), t.clone());
        }
        for (i, t) in self.textual.iter().enumerate() {
            map.insert(format!("prompts.textual.{i}"), t.clone());
        }
        map
    }

    pub fn from_named(map: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<PromptBank> {
        let take = |prefix: &str| -> Result<Vec<Tensor>> {
            let mut out = Vec::new();
            for i in 0.. {
                let key = format!("{prefix}.{i}");
                match map.get(&key) {
                    Some((shape, vals)) => {
                        out.push(Tensor::leaf(shape.clone(), vals.clone(), true)?)
                    }
                    None => break,
                }
            }
            if out.is_empty() {
                return Err(Error::Checkpoint(format!("missing {prefix}.0 block")));
            }
            Ok(out)
        };
        let visual = take("prompts.visual")?;
        let textual = take("prompts.textual")?;
        if visual.len() != textual.len() {
            return Err(Error::Checkpoint(
                "visual/textual prompt depths differ".into(),
            ));
        }
        Ok(PromptBank { visual, textual })
    }
}

/// Paired image/text towers over one parameter set.
pub struct DualEncoder {
    pub cfg: EncoderConfig,
    pub vocab: Vocab,
    image: Tower,
    text: Tower,
    frozen: bool,
    text_matrix_cache: RefCell<BTreeMap<Vec<usize>, Rc<ClassTextMatrix>>>,
}

/// Per-class frozen or prompted text features, one row per class.
#[derive(Debug, Clone)]
pub struct ClassTextMatrix {
    pub class_ids: Vec<usize>,
    pub rows: Vec<TextFeature>,
}

impl ClassTextMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl DualEncoder {
    /// Fresh trainable backbone. Weight matrices use fan-in-scaled
    /// Gaussian init; embeddings and positions use 1/sqrt(width). At
    /// this width anything much smaller starves the residual stream of
    /// input-dependent signal and contrastive training cannot leave its
    /// symmetric plateau.
    pub fn init(cfg: EncoderConfig, vocab: Vocab, seed: u64) -> Result<DualEncoder> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "backbone-init");
        let w = cfg.dim;
        let ff = cfg.ff_mult * w;
        let tensor = |shape: Vec<usize>, std: f64, r: &mut ChaCha8Rng| -> Result<Tensor> {
            let n = shape.iter().product();
            let vals = (0..n).map(|_| rng::gaussian(r) * std).collect();
            Tensor::leaf(shape, vals, true)
        };
        let embed_std = 1.0 / (w as f64).sqrt();
        let layers = |r: &mut ChaCha8Rng| -> Result<Vec<LayerWeights>> {
            let fan = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
            (0..cfg.layers)
                .map(|_| {
                    Ok(LayerWeights {
                        wq: tensor(vec![w, w], fan(w), r)?,
                        wk: tensor(vec![w, w], fan(w), r)?,
                        wv: tensor(vec![w, w], fan(w), r)?,
                        wo: tensor(vec![w, w], fan(w), r)?,
                        ff1: tensor(vec![w, ff], fan(w), r)?,
                        ff2: tensor(vec![ff, w], fan(ff), r)?,
                    })
                })
                .collect()
        };
        let image = Tower {
            embed: tensor(vec![cfg.patch_dim(), w], 1.0 / (cfg.patch_dim() as f64).sqrt(), &mut r)?,
            pos: tensor(vec![cfg.num_patches() + 1, w], embed_std, &mut r)?,
            cls: Some(tensor(vec![1, w], embed_std, &mut r)?),
            layers: layers(&mut r)?,
            proj: tensor(vec![w, w], 1.0 / (w as f64).sqrt(), &mut r)?,
        };
        let text = Tower {
            embed: tensor(vec![vocab.size(), w], embed_std, &mut r)?,
            pos: tensor(vec![cfg.text_ctx, w], embed_std, &mut r)?,
            cls: None,
            layers: layers(&mut r)?,
            proj: tensor(vec![w, w], 1.0 / (w as f64).sqrt(), &mut r)?,
        };
        Ok(DualEncoder {
            cfg,
            vocab,
            image,
            text,
            frozen: false,
            text_matrix_cache: RefCell::new(BTreeMap::new()),
        })
    }

    /// Same weights as non-trainable leaves. The frozen teacher view.
    pub fn freeze(&self) -> DualEncoder {
        DualEncoder::from_named(
            self.cfg.clone(),
            self.vocab.clone(),
            &self
                .named_weights()
                .into_iter()
                .map(|(k, t)| (k, (t.shape().to_vec(), t.values().to_vec())))
                .collect(),
            false,
        )
        .expect("freezing cannot change shapes")
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for tower in [&mut self.image, &mut self.text] {
            out.push(&mut tower.embed);
            out.push(&mut tower.pos);
            if let Some(cls) = tower.cls.as_mut() {
                out.push(cls);
            }
            for l in &mut tower.layers {
                out.extend([&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.ff1, &mut l.ff2]);
            }
            out.push(&mut tower.proj);
        }
        out
    }

    pub fn named_weights(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        for (name, tower) in [("image", &self.image), ("text", &self.text)] {
            map.insert(format!("{name}.embed"), tower.embed.clone());
            map.insert(format!("{name}.pos"), tower.pos.clone());
            if let Some(cls) = &tower.cls {
                map.insert(format!("{name}.cls"), cls.clone());
            }
            for (i, l) in tower.layers.iter().enumerate() {
                map.insert(format!("{name}.layers.{i}.wq"), l.wq.clone());
                map.insert(format!("{name}.layers.{i}.wk"), l.wk.clone());
                map.insert(format!("{name}.layers.{i}.wv"), l.wv.clone());
                map.insert(format!("{name}.layers.{i}.wo"), l.wo.clone());
                map.insert(format!("{name}.layers.{i}.ff1"), l.ff1.clone());
                map.insert(format!("{name}.layers.{i}.ff2"), l.ff2.clone());
            }
            map.insert(format!("{name}.proj"), tower.proj.clone());
        }
        map
    }

    pub fn from_named(
        cfg: EncoderConfig,
        vocab: Vocab,
        map: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
        trainable: bool,
    ) -> Result<DualEncoder> {
        cfg.validate()?;
        let get = |key: String| -> Result<Tensor> {
            let (shape, vals) = map
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing block {key:?}")))?;
            Tensor::leaf(shape.clone(), vals.clone(), trainable)
        };
        let tower = |name: &str, has_cls: bool| -> Result<Tower> {
            Ok(Tower {
                embed: get(format!("{name}.embed"))?,
                pos: get(format!("{name}.pos"))?,
                cls: if has_cls {
                    Some(get(format!("{name}.cls"))?)
                } else {
                    None
                },
                layers: (0..cfg.layers)
                    .map(|i| {
                        Ok(LayerWeights {
                            wq: get(format!("{name}.layers.{i}.wq"))?,
                            wk: get(format!("{name}.layers.{i}.wk"))?,
                            wv: get(format!("{name}.layers.{i}.wv"))?,
                            wo: get(format!("{name}.layers.{i}.wo"))?,
                            ff1: get(format!("{name}.layers.{i}.ff1"))?,
                            ff2: get(format!("{name}.layers.{i}.ff2"))?,
                        })
                    })
                    .collect::<Result<_>>()?,
                proj: get(format!("{name}.proj"))?,
            })
        };
        Ok(DualEncoder {
            image: tower("image", true)?,
            text: tower("text", false)?,
            frozen: !trainable,
            cfg,
            vocab,
            text_matrix_cache: RefCell::new(BTreeMap::new()),
        })
    }

    /// SHA-256 over every named block (name, shape, raw values).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_weights() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    fn layer_forward(&self, seq: Tensor, lw: &LayerWeights) -> Result<Tensor> {
        let n = seq.shape()[0];
        let normed = seq.layer_norm()?;
        let q = normed.matmul(&lw.wq)?;
        let k = normed.matmul(&lw.wk)?;
        let v = normed.matmul(&lw.wv)?;
        let merged = q
            .multi_head_attention(&k, &v, self.cfg.heads)?
            .matmul(&lw.wo)?;
        let seq = seq.add(&merged)?;
        let ff = seq
            .layer_norm()?
            .matmul(&lw.ff1)?
            .gelu()
            .matmul(&lw.ff2)?;
        debug_assert_eq!(ff.shape()[0], n);
        seq.add(&ff)
    }

    /// Image tower forward.
    ///
    /// Prompt tokens lead the sequence; each prompted layer replaces the
    /// previous layer's prompt slots with its own tokens. Masked patches
    /// are removed from the sequence before layer 1.
    pub fn encode_image(
        &self,
        patches: &[f64],
        prompts: Option<&PromptBank>,
        keep_mask: Option<&[bool]>,
        want_trace: bool,
    ) -> Result<(ImageFeature, Option<TokenTrace>)> {
        let v = self.cfg.num_patches();
        let pd = self.cfg.patch_dim();
        if patches.len() != v * pd {
            return Err(Error::invalid(
                "encode-image",
                format!("expected {v} patches of {pd} values, got {}", patches.len()),
            ));
        }
        let mut masked = false;
        let kept: Vec<usize> = match keep_mask {
            Some(mask) => {
                if mask.len() != v {
                    return Err(Error::invalid(
                        "encode-image",
                        format!("keep mask has {} entries for {v} patches", mask.len()),
                    ));
                }
                let kept: Vec<usize> =
                    mask.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect();
                if kept.is_empty() {
                    return Err(Error::invalid("encode-image", "keep mask drops every patch"));
                }
                masked = kept.len() < v;
                kept
            }
            None => (0..v).collect(),
        };

        let input = Tensor::constant(vec![v, pd], patches.to_vec())?;
        let mut patch_tokens = input
            .matmul(&self.image.embed)?
            .add(&self.image.pos.slice(0, 1, v + 1)?)?;
        if masked {
            patch_tokens = patch_tokens.select_rows(&kept)?;
        }
        let cls = self
            .image
            .cls
            .as_ref()
            .expect("image tower always has a CLS token")
            .add(&self.image.pos.slice(0, 0, 1)?)?;
        let block = concat(&[cls, patch_tokens], 0)?;

        let prompt_count = prompts.map_or(0, |p| p.visual_count());
        let mut seq = match prompts {
            Some(bank) => concat(&[bank.visual[0].clone(), block], 0)?,
            None => block,
        };
        let mut seq_lens = Vec::with_capacity(self.cfg.layers);
        // token embeddings the final layer's attention consumes; the
        // saliency scores project these with that layer's Q/K weights
        let mut final_layer_tokens: Option<Tensor> = None;
        for (i, lw) in self.image.layers.iter().enumerate() {
            if let Some(bank) = prompts {
                if i > 0 && i < bank.depth() {
                    let n = seq.shape()[0];
                    seq = concat(&[bank.visual[i].clone(), seq.slice(0, prompt_count, n)?], 0)?;
                }
            }
            seq_lens.push(seq.shape()[0]);
            if want_trace && i == self.cfg.layers - 1 {
                final_layer_tokens = Some(seq.layer_norm()?);
            }
            seq = self.layer_forward(seq, lw)?;
        }
        let normed = seq.layer_norm()?;
        let cls_pos = prompt_count;
        let feature = normed
            .row(cls_pos)?
            .reshape(vec![1, self.cfg.dim])?
            .matmul(&self.image.proj)?
            .reshape(vec![self.cfg.dim])?;

        let trace = want_trace.then(|| {
            let last = &self.image.layers[self.cfg.layers - 1];
            let tokens = final_layer_tokens.expect("captured when tracing");
            TokenTrace {
                seq_len: tokens.shape()[0],
                patch_start: prompt_count + 1,
                patch_end: tokens.shape()[0],
                tokens: tokens.values().to_vec(),
                width: self.cfg.dim,
                heads: self.cfg.heads,
                wq: last.wq.values().to_vec(),
                wk: last.wk.values().to_vec(),
                prompted: prompts.is_some(),
                masked,
                seq_lens,
            }
        });
        Ok((
            ImageFeature {
                vec: feature,
                view: if prompts.is_some() {
                    View::Prompted
                } else {
                    View::Frozen
                },
                coverage: if masked { Coverage::Masked } else { Coverage::Full },
            },
            trace,
        ))
    }

    /// Text tower forward. The sequence is SOS, prompts (when present),
    /// template tokens, class-name tokens, EOS; the feature is read at
    /// the EOS position.
    pub fn encode_text(
        &self,
        class_id: usize,
        classes: &ClassSet,
        prompts: Option<&PromptBank>,
    ) -> Result<TextFeature> {
        let name_ids = classes.tokens(class_id)?;
        let mut tail_ids = self.vocab.template_ids();
        tail_ids.extend_from_slice(name_ids);
        tail_ids.push(self.vocab.eos());
        let prompt_count = prompts.map_or(0, |p| p.textual_count());
        let total = 1 + prompt_count + tail_ids.len();
        if total > self.cfg.text_ctx {
            return Err(Error::invalid(
                "encode-text",
                format!("sequence length {total} exceeds context {}", self.cfg.text_ctx),
            ));
        }

        let sos = self.text.embed.select_rows(&[self.vocab.sos()])?;
        let tail = self.text.embed.select_rows(&tail_ids)?;
        let mut seq = match prompts {
            Some(bank) => concat(&[sos, bank.textual[0].clone(), tail], 0)?,
            None => concat(&[sos, tail], 0)?,
        };
        seq = seq.add(&self.text.pos.slice(0, 0, total)?)?;

        for (i, lw) in self.text.layers.iter().enumerate() {
            if let Some(bank) = prompts {
                if i > 0 && i < bank.depth() {
                    let n = seq.shape()[0];
                    seq = concat(
                        &[
                            seq.slice(0, 0, 1)?,
                            bank.textual[i].clone(),
                            seq.slice(0, 1 + prompt_count, n)?,
                        ],
                        0,
                    )?;
                }
            }
            seq = self.layer_forward(seq, lw)?;
        }
        let normed = seq.layer_norm()?;
        let eos_pos = total - 1;
        let feature = normed
            .row(eos_pos)?
            .reshape(vec![1, self.cfg.dim])?
            .matmul(&self.text.proj)?
            .reshape(vec![self.cfg.dim])?;
        Ok(TextFeature {
            vec: feature,
            view: if prompts.is_some() {
                View::Prompted
            } else {
                View::Frozen
            },
        })
    }

    /// Text features for every class in the set, in set order.
    pub fn class_matrix(
        &self,
        classes: &ClassSet,
        prompts: Option<&PromptBank>,
    ) -> Result<ClassTextMatrix> {
        if classes.is_empty() {
            return Err(Error::invalid("class-matrix", "empty class list"));
        }
        let class_ids = classes.ids();
        let rows = class_ids
            .iter()
            .map(|&id| self.encode_text(id, classes, prompts))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassTextMatrix { class_ids, rows })
    }

    /// Frozen per-class text features, cached per class list: the frozen
    /// parameters never change within a run.
    pub fn frozen_class_matrix(&self, classes: &ClassSet) -> Result<Rc<ClassTextMatrix>> {
        let key = classes.ids();
        if let Some(hit) = self.text_matrix_cache.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let computed = Rc::new(self.class_matrix(classes, None)?);
        self.text_matrix_cache
            .borrow_mut()
            .insert(key, computed.clone());
        Ok(computed)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_setup() -> (DualEncoder, ClassSet, Vec<f64>) {
        let cfg = EncoderConfig {
            dim: 8,
            layers: 3,
            heads: 2,
            patches_per_side: 2,
            patch_pixels: 2,
            ff_mult: 2,
            text_ctx: 16,
        };
        let vocab = Vocab::build(["red", "square", "blue", "circle"]);
        let enc = DualEncoder::init(cfg.clone(), vocab.clone(), 42).unwrap().freeze();
        let classes = ClassSet::register(
            &vocab,
            &[(0, "red square".into()), (1, "blue circle".into())],
        )
        .unwrap();
        let patches: Vec<f64> = (0..cfg.num_patches() * cfg.patch_dim())
            .map(|i| (i as f64 * 0.37).sin().abs())
            .collect();
        (enc, classes, patches)
    }

    fn bank(enc: &DualEncoder, depth: usize, seed: u64) -> PromptBank {
        PromptBank::init(&enc.cfg, &enc.vocab, enc, 2, 2, depth, seed).unwrap()
    }

    #[test]
    fn promptless_forward_matches_frozen_view() {
        let (enc, _, patches) = toy_setup();
        let (a, _) = enc.encode_image(&patches, None, None, false).unwrap();
        let (b, _) = enc.encode_image(&patches, None, None, false).unwrap();
        assert_eq!(a.vec.values(), b.vec.values());
        assert_eq!(a.view, View::Frozen);
        assert_eq!(a.vec.len(), enc.cfg.dim);
        assert!(a.vec.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn all_true_mask_is_identity() {
        let (enc, _, patches) = toy_setup();
        let mask = vec![true; enc.cfg.num_patches()];
        let (a, _) = enc.encode_image(&patches, None, Some(&mask), false).unwrap();
        let (b, _) = enc.encode_image(&patches, None, None, false).unwrap();
        assert_eq!(a.vec.values(), b.vec.values());
        assert_eq!(a.coverage, Coverage::Full);
    }

    #[test]
    fn bad_masks_rejected() {
        let (enc, _, patches) = toy_setup();
        let short = vec![true; 3];
        assert!(enc.encode_image(&patches, None, Some(&short), false).is_err());
        let none = vec![false; enc.cfg.num_patches()];
        assert!(enc.encode_image(&patches, None, Some(&none), false).is_err());
    }

    #[test]
    fn masking_shrinks_sequence() {
        let (enc, _, patches) = toy_setup();
        let mut mask = vec![true; enc.cfg.num_patches()];
        mask[0] = false;
        mask[3] = false;
        let (f, trace) = enc.encode_image(&patches, None, Some(&mask), true).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.seq_len, 1 + enc.cfg.num_patches() - 2);
        assert!(trace.masked);
        assert_eq!(f.coverage, Coverage::Masked);
    }

    #[test]
    fn text_encoding_is_deterministic_and_distinct() {
        let (enc, classes, _) = toy_setup();
        let a = enc.encode_text(0, &classes, None).unwrap();
        let b = enc.encode_text(0, &classes, None).unwrap();
        assert_eq!(a.vec.values(), b.vec.values());
        assert_eq!(a.vec.len(), enc.cfg.dim);
        let other = enc.encode_text(1, &classes, None).unwrap();
        let max_diff = a
            .vec
            .values()
            .iter()
            .zip(other.vec.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn unknown_class_rejected() {
        let (enc, classes, _) = toy_setup();
        assert!(enc.encode_text(9, &classes, None).is_err());
    }

    #[test]
    fn frozen_class_matrix_cache_is_bit_identical() {
        let (enc, classes, _) = toy_setup();
        let first = enc.frozen_class_matrix(&classes).unwrap();
        let second = enc.frozen_class_matrix(&classes).unwrap();
        assert!(Rc::ptr_eq(&first, &second));
        let fresh = enc.class_matrix(&classes, None).unwrap();
        for (a, b) in first.rows.iter().zip(&fresh.rows) {
            assert_eq!(a.vec.values(), b.vec.values());
        }
        assert_eq!(first.len(), 2);
    }

    #[test]
    fn prompt_slots_conserve_sequence_length() {
        let (enc, _, patches) = toy_setup();
        let bank = bank(&enc, 2, 9);
        let (_, trace) = enc
            .encode_image(&patches, Some(&bank), None, true)
            .unwrap();
        let trace = trace.unwrap();
        let expect = 2 + 1 + enc.cfg.num_patches();
        // prompts replace their slots at every prompted layer and are
        // carried through unchanged in count beyond the prompted depth
        assert_eq!(trace.seq_lens, vec![expect; enc.cfg.layers]);
        assert!(trace.prompted);
    }

    #[test]
    fn gradients_reach_prompts_only() {
        let (enc, classes, patches) = toy_setup();
        let mut bank = bank(&enc, 2, 9);
        let (img, _) = enc.encode_image(&patches, Some(&bank), None, false).unwrap();
        let txt = enc.encode_text(0, &classes, Some(&bank)).unwrap();
        let loss = crate::tensor::cosine_similarity(&img.vec, &txt.vec).unwrap();
        loss.backward().unwrap();
        for p in bank.params_mut() {
            assert!(p.grad().is_some(), "prompt without gradient");
        }
        for (_, t) in enc.named_weights() {
            assert!(t.grad().is_none(), "backbone tensor accumulated gradient");
        }
    }

    #[test]
    fn checksum_stable_under_forward_and_backward() {
        let (enc, classes, patches) = toy_setup();
        let before = enc.checksum();
        let mut bank = bank(&enc, 3, 5);
        let (img, _) = enc.encode_image(&patches, Some(&bank), None, false).unwrap();
        let txt = enc.encode_text(1, &classes, Some(&bank)).unwrap();
        crate::tensor::cosine_similarity(&img.vec, &txt.vec)
            .unwrap()
            .backward()
            .unwrap();
        for p in bank.params_mut() {
            p.take_grad();
        }
        assert_eq!(before, enc.checksum());
    }

    #[test]
    fn named_weights_roundtrip() {
        let (enc, _, patches) = toy_setup();
        let named = enc
            .named_weights()
            .into_iter()
            .map(|(k, t)| (k, (t.shape().to_vec(), t.values().to_vec())))
            .collect();
        let rebuilt =
            DualEncoder::from_named(enc.cfg.clone(), enc.vocab.clone(), &named, false).unwrap();
        let (a, _) = enc.encode_image(&patches, None, None, false).unwrap();
        let (b, _) = rebuilt.encode_image(&patches, None, None, false).unwrap();
        assert_eq!(a.vec.values(), b.vec.values());
        assert_eq!(enc.checksum(), rebuilt.checksum());
    }

    #[test]
    fn prompt_depth_validation() {
        let (enc, _, _) = toy_setup();
        assert!(PromptBank::init(&enc.cfg, &enc.vocab, &enc, 2, 2, 99, 1).is_err());
        assert!(PromptBank::init(&enc.cfg, &enc.vocab, &enc, 0, 2, 1, 1).is_err());
    }

    #[test]
    fn first_layer_textual_prompts_come_from_template() {
        let (enc, _, _) = toy_setup();
        let bank = bank(&enc, 2, 1);
        let template = enc.vocab.template_ids();
        let w = enc.cfg.dim;
        let table = enc.named_weights()["text.embed"].values().to_vec();
        let got = bank.textual[0].values().to_vec();
        for i in 0..bank.textual_count() {
            let id = template[i % template.len()];
            assert_eq!(&got[i * w..(i + 1) * w], &table[id * w..(id + 1) * w]);
        }
    }
}
