//! Procedural synthetic image-text corpus.
//!
//! Classes are attribute combinations (color x texture x shape) drawn
//! from a fixed grid, so held-out combinations form genuinely novel
//! classes that still share words with the base classes. Images are
//! rendered straight into patch space: a small RGB pixel grid cut into
//! per-patch vectors, values in [0, 1].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{ClassSet, Vocab};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureKind {
    Plain,
    Striped,
    Dotted,
    Checkered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
}

/// Rendering regime and attribute grid shared by every corpus of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub patches_per_side: usize,
    pub patch_pixels: usize,
    /// Std of the per-pixel Gaussian jitter added to every sample.
    pub noise_std: f64,
    /// Relative per-channel color jitter per sample.
    pub color_jitter: f64,
    /// Max shape-center offset in pixels per sample.
    pub center_jitter: f64,
    /// Seed of the attribute-grid shuffle; corpora that must stay
    /// class-disjoint share this value and use different offsets.
    pub grid_seed: u64,
    /// How many shuffled attribute combinations to skip before taking
    /// this corpus's classes.
    pub combo_offset: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            patches_per_side: 4,
            patch_pixels: 4,
            noise_std: 0.15,
            color_jitter: 0.22,
            center_jitter: 1.5,
            grid_seed: 1,
            combo_offset: 0,
        }
    }
}

const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.80, 0.20]),
    ("blue", [0.20, 0.25, 0.90]),
    ("yellow", [0.90, 0.85, 0.20]),
    ("purple", [0.60, 0.20, 0.80]),
    ("orange", [0.95, 0.55, 0.10]),
    ("pink", [0.95, 0.50, 0.70]),
    ("teal", [0.10, 0.70, 0.70]),
];

// texture periods stay below the patch size so every patch carries the
// texture identity on its own
const TEXTURES: [(&str, TextureKind, f64); 4] = [
    ("plain", TextureKind::Plain, 0.0),
    ("striped", TextureKind::Striped, 4.0),
    ("dotted", TextureKind::Dotted, 5.0),
    ("checkered", TextureKind::Checkered, 3.5),
];

const SHAPES: [(&str, ShapeKind); 4] = [
    ("square", ShapeKind::Square),
    ("circle", ShapeKind::Circle),
    ("triangle", ShapeKind::Triangle),
    ("cross", ShapeKind::Cross),
];

impl RenderConfig {
    pub fn image_pixels(&self) -> usize {
        self.patches_per_side * self.patch_pixels
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side * self.patches_per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_pixels * self.patch_pixels * 3
    }

    pub fn grid_size(&self) -> usize {
        COLORS.len() * TEXTURES.len() * SHAPES.len()
    }

    /// Vocabulary over the whole attribute grid, independent of which
    /// classes a corpus picked.
    pub fn vocab(&self) -> Vocab {
        let mut words: Vec<String> = Vec::new();
        words.extend(COLORS.iter().map(|(n, _)| n.to_string()));
        words.extend(TEXTURES.iter().map(|(n, _, _)| n.to_string()));
        words.extend(SHAPES.iter().map(|(n, _)| n.to_string()));
        Vocab::build(words)
    }

    /// The shuffled attribute-combination order all corpora with this
    /// grid seed agree on.
    fn combo_order(&self) -> Vec<(usize, usize, usize)> {
        let mut combos = Vec::with_capacity(self.grid_size());
        for c in 0..COLORS.len() {
            for t in 0..TEXTURES.len() {
                for s in 0..SHAPES.len() {
                    combos.push((c, t, s));
                }
            }
        }
        let mut r = rng::stream(self.grid_seed, "attribute-grid");
        combos.shuffle(&mut r);
        combos
    }
}

/// One synthetic class: an attribute phrase plus its generator knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClass {
    pub id: usize,
    pub name: String,
    pub color: [f64; 3],
    pub texture: TextureKind,
    pub texture_freq: f64,
    pub shape: ShapeKind,
}

/// One rendered sample, already cut into patch vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Flat [num_patches * patch_dim], row-major patch order.
    pub patches: Vec<f64>,
    pub label: usize,
    pub domain_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub classes: Vec<ToyClass>,
    pub samples: Vec<Sample>,
    pub render: RenderConfig,
    pub seed: u64,
}

// ── rendering ───────────────────────────────────────────────────────────

fn shape_mask(shape: ShapeKind, x: f64, y: f64, cx: f64, cy: f64, half: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
        ShapeKind::Circle => dx * dx + dy * dy <= half * half,
        ShapeKind::Triangle => dy >= -half && dy <= half && dx.abs() <= (dy + half) / 2.0,
        ShapeKind::Cross => dx.abs() <= half / 2.2 || dy.abs() <= half / 2.2,
    }
}

fn texture_factor(kind: TextureKind, freq: f64, x: f64, y: f64, n: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    match kind {
        TextureKind::Plain => 1.0,
        TextureKind::Striped => 0.55 + 0.45 * (tau * freq * x / n).sin(),
        TextureKind::Dotted => {
            0.55 + 0.45 * (tau * freq * x / n).sin() * (tau * freq * y / n).sin()
        }
        TextureKind::Checkered => {
            if ((tau * freq * x / n).sin() * (tau * freq * y / n).sin()) >= 0.0 {
                1.0
            } else {
                0.35
            }
        }
    }
}

/// Renders one image as flat RGB pixels in [0, 1], no jitter. Color and
/// texture modulate the whole canvas so class identity is spread
/// redundantly across patches; the shape is a bright region on top.
fn render_clean(class: &ToyClass, cfg: &RenderConfig, cx: f64, cy: f64) -> Vec<f64> {
    let n = cfg.image_pixels();
    let half = n as f64 * 0.38;
    let mut img = vec![0.0; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let inside = shape_mask(class.shape, x as f64, y as f64, cx, cy, half);
            let t = texture_factor(class.texture, class.texture_freq, x as f64, y as f64, n as f64);
            let brightness = if inside { 0.95 } else { 0.40 };
            for ch in 0..3 {
                img[(y * n + x) * 3 + ch] = clamp01(0.05 + class.color[ch] * brightness * t);
            }
        }
    }
    img
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Cuts a flat RGB pixel image into per-patch vectors.
pub fn patches_from_pixels(img: &[f64], cfg: &RenderConfig) -> Vec<f64> {
    let n = cfg.image_pixels();
    let pp = cfg.patch_pixels;
    let side = cfg.patches_per_side;
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for pr in 0..side {
        for pc in 0..side {
            for y in 0..pp {
                for x in 0..pp {
                    let (gy, gx) = (pr * pp + y, pc * pp + x);
                    for ch in 0..3 {
                        out.push(img[(gy * n + gx) * 3 + ch]);
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patches_from_pixels`].
pub fn pixels_from_patches(patches: &[f64], cfg: &RenderConfig) -> Vec<f64> {
    let n = cfg.image_pixels();
    let pp = cfg.patch_pixels;
    let side = cfg.patches_per_side;
    let mut img = vec![0.0; n * n * 3];
    let mut it = patches.iter();
    for pr in 0..side {
        for pc in 0..side {
            for y in 0..pp {
                for x in 0..pp {
                    let (gy, gx) = (pr * pp + y, pc * pp + x);
                    for ch in 0..3 {
                        img[(gy * n + gx) * 3 + ch] = *it.next().expect("patch length checked");
                    }
                }
            }
        }
    }
    img
}

fn render_sample(class: &ToyClass, cfg: &RenderConfig, r: &mut ChaCha8Rng, tag: &str) -> Sample {
    let n = cfg.image_pixels() as f64;
    let cx = n / 2.0 - 0.5 + r.gen_range(-cfg.center_jitter..=cfg.center_jitter);
    let cy = n / 2.0 - 0.5 + r.gen_range(-cfg.center_jitter..=cfg.center_jitter);
    let mut img = render_clean(class, cfg, cx, cy);
    let jitter: [f64; 3] = [
        1.0 + cfg.color_jitter * rng::gaussian(r),
        1.0 + cfg.color_jitter * rng::gaussian(r),
        1.0 + cfg.color_jitter * rng::gaussian(r),
    ];
    for (i, v) in img.iter_mut().enumerate() {
        *v = clamp01(*v * jitter[i % 3] + cfg.noise_std * rng::gaussian(r));
    }
    Sample {
        patches: patches_from_pixels(&img, cfg),
        label: class.id,
        domain_tag: tag.to_string(),
    }
}

/// Deterministic corpus for `(seed, config)`: `n_classes` attribute
/// combinations starting at the config's grid offset, `samples_per_class`
/// jittered renderings each.
pub fn generate_corpus(
    n_classes: usize,
    samples_per_class: usize,
    render: &RenderConfig,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 4 {
        return Err(Error::Dataset(format!("need at least 4 classes, got {n_classes}")));
    }
    let order = render.combo_order();
    if render.combo_offset + n_classes > order.len() {
        return Err(Error::Dataset(format!(
            "attribute grid too small: offset {} + {n_classes} classes > {} combinations",
            render.combo_offset,
            order.len()
        )));
    }
    let classes: Vec<ToyClass> = order[render.combo_offset..render.combo_offset + n_classes]
        .iter()
        .enumerate()
        .map(|(i, &(c, t, s))| ToyClass {
            id: i,
            name: format!("{} {} {}", COLORS[c].0, TEXTURES[t].0, SHAPES[s].0),
            color: COLORS[c].1,
            texture: TEXTURES[t].1,
            texture_freq: TEXTURES[t].2,
            shape: SHAPES[s].1,
        })
        .collect();

    let mut r = rng::stream(seed, "corpus");
    let mut samples = Vec::with_capacity(n_classes * samples_per_class);
    for class in &classes {
        for _ in 0..samples_per_class {
            samples.push(render_sample(class, render, &mut r, "source"));
        }
    }
    Ok(Dataset {
        classes,
        samples,
        render: render.clone(),
        seed,
    })
}

impl Dataset {
    pub fn class_pairs(&self) -> Vec<(usize, String)> {
        self.classes.iter().map(|c| (c.id, c.name.clone())).collect()
    }

    pub fn class_set(&self, vocab: &Vocab) -> Result<ClassSet> {
        ClassSet::register(vocab, &self.class_pairs())
    }

    pub fn subset_class_set(&self, vocab: &Vocab, ids: &[usize]) -> Result<ClassSet> {
        let pairs: Vec<(usize, String)> = self
            .classes
            .iter()
            .filter(|c| ids.contains(&c.id))
            .map(|c| (c.id, c.name.clone()))
            .collect();
        ClassSet::register(vocab, &pairs)
    }

    /// Indices of the samples of one class, in generation order.
    pub fn indices_of_class(&self, class_id: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class_id)
            .map(|(i, _)| i)
            .collect()
    }

    /// Per class, the last `test_per_class` samples form the test pool;
    /// the remainder is the training pool.
    pub fn test_indices(&self, class_ids: &[usize], test_per_class: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &c in class_ids {
            let idx = self.indices_of_class(c);
            let start = idx.len().saturating_sub(test_per_class);
            out.extend_from_slice(&idx[start..]);
        }
        out
    }

    pub fn train_pool(&self, class_id: usize, test_per_class: usize) -> Vec<usize> {
        let idx = self.indices_of_class(class_id);
        let end = idx.len().saturating_sub(test_per_class);
        idx[..end].to_vec()
    }
}

// ── splits ──────────────────────────────────────────────────────────────

/// Base/novel class partition plus the sampling parameters of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub k_shot: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

/// Shuffles class ids by seed and partitions them; novel classes never
/// contribute training samples anywhere downstream.
pub fn split_base_novel(
    dataset: &Dataset,
    base_fraction: f64,
    k_shot: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<SplitSpec> {
    if !(0.0..1.0).contains(&base_fraction) || base_fraction == 0.0 {
        return Err(Error::Dataset(format!("base fraction {base_fraction} not in (0, 1)")));
    }
    if k_shot == 0 {
        return Err(Error::Dataset("k_shot must be at least 1".into()));
    }
    let mut ids: Vec<usize> = dataset.classes.iter().map(|c| c.id).collect();
    let mut r = rng::stream(seed, "split");
    ids.shuffle(&mut r);
    let n_base = (ids.len() as f64 * base_fraction).floor() as usize;
    if n_base == 0 || n_base == ids.len() {
        return Err(Error::Dataset(format!(
            "fraction {base_fraction} of {} classes leaves an empty split",
            ids.len()
        )));
    }
    let mut base_classes = ids[..n_base].to_vec();
    let mut novel_classes = ids[n_base..].to_vec();
    base_classes.sort_unstable();
    novel_classes.sort_unstable();
    Ok(SplitSpec {
        base_classes,
        novel_classes,
        k_shot,
        test_per_class,
        seed,
    })
}

/// Exactly K training samples per base class, drawn uniformly without
/// replacement from the class's training pool.
pub fn sample_k_shot(
    dataset: &Dataset,
    split: &SplitSpec,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut r = rng::stream(seed, "k-shot");
    let mut out = Vec::with_capacity(split.base_classes.len() * k);
    for &class in &split.base_classes {
        let pool = dataset.train_pool(class, split.test_per_class);
        if pool.len() < k {
            return Err(Error::Dataset(format!(
                "class {class} has {} training samples, need {k}",
                pool.len()
            )));
        }
        let picked = rand::seq::index::sample(&mut r, pool.len(), k);
        let mut chosen: Vec<usize> = picked.into_iter().map(|i| pool[i]).collect();
        chosen.sort_unstable();
        out.extend(chosen);
    }
    Ok(out)
}

// ── domain shifts ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftKind {
    HueRotation,
    NoiseBoost,
    TextureSwap,
    Blur,
}

impl FromStr for ShiftKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hue-rotation" => Ok(ShiftKind::HueRotation),
            "noise-boost" => Ok(ShiftKind::NoiseBoost),
            "texture-swap" => Ok(ShiftKind::TextureSwap),
            "blur" => Ok(ShiftKind::Blur),
            other => Err(Error::Dataset(format!("unknown shift kind {other:?}"))),
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::HueRotation => "hue-rotation",
            ShiftKind::NoiseBoost => "noise-boost",
            ShiftKind::TextureSwap => "texture-swap",
            ShiftKind::Blur => "blur",
        })
    }
}

/// Rotation of RGB about the gray axis by `angle` radians.
fn hue_rotate(rgb: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let one_third = 1.0 / 3.0;
    let sqrt3 = 3f64.sqrt();
    let mut out = [0.0; 3];
    // Rodrigues rotation matrix for axis (1,1,1)/sqrt(3)
    let m = |same: bool, sign: f64| {
        if same {
            c + (1.0 - c) * one_third
        } else {
            (1.0 - c) * one_third + sign * s / sqrt3
        }
    };
    let mat = [
        [m(true, 0.0), m(false, -1.0), m(false, 1.0)],
        [m(false, 1.0), m(true, 0.0), m(false, -1.0)],
        [m(false, -1.0), m(false, 1.0), m(true, 0.0)],
    ];
    for i in 0..3 {
        out[i] = mat[i][0] * rgb[0] + mat[i][1] * rgb[1] + mat[i][2] * rgb[2];
    }
    out
}

fn box_blur(img: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..n {
        for x in 0..n {
            for ch in 0..3 {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && yy < n as i64 && xx >= 0 && xx < n as i64 {
                            acc += img[((yy as usize) * n + xx as usize) * 3 + ch];
                            cnt += 1.0;
                        }
                    }
                }
                out[(y * n + x) * 3 + ch] = acc / cnt;
            }
        }
    }
    out
}

/// Same classes and labels under a perturbed rendering regime.
pub fn domain_shift(
    dataset: &Dataset,
    kind: ShiftKind,
    magnitude: f64,
    seed: u64,
) -> Result<Dataset> {
    if magnitude < 0.0 {
        return Err(Error::Dataset(format!("shift magnitude {magnitude} < 0")));
    }
    let cfg = &dataset.render;
    let n = cfg.image_pixels();
    let tag = format!("{kind}:{magnitude}");
    let mut r = rng::stream(seed, "shift");

    // texture-swap target: each class re-rendered with the next texture
    // in the grid, centered, no jitter
    let swap_targets: BTreeMap<usize, Vec<f64>> = if kind == ShiftKind::TextureSwap {
        dataset
            .classes
            .iter()
            .map(|class| {
                let pos = TEXTURES
                    .iter()
                    .position(|(_, k, _)| *k == class.texture)
                    .expect("texture kinds come from the grid");
                let (_, nk, nf) = TEXTURES[(pos + 1) % TEXTURES.len()];
                let swapped = ToyClass {
                    texture: nk,
                    texture_freq: nf,
                    ..class.clone()
                };
                let c = n as f64 / 2.0 - 0.5;
                (class.id, render_clean(&swapped, cfg, c, c))
            })
            .collect()
    } else {
        BTreeMap::new()
    };

    let samples = dataset
        .samples
        .iter()
        .map(|s| {
            let mut img = pixels_from_patches(&s.patches, cfg);
            match kind {
                ShiftKind::HueRotation => {
                    for px in img.chunks_mut(3) {
                        let rot = hue_rotate([px[0], px[1], px[2]], magnitude);
                        for ch in 0..3 {
                            px[ch] = clamp01(rot[ch]);
                        }
                    }
                }
                ShiftKind::NoiseBoost => {
                    if magnitude > 0.0 {
                        for v in img.iter_mut() {
                            *v = clamp01(*v + magnitude * rng::gaussian(&mut r));
                        }
                    }
                }
                ShiftKind::TextureSwap => {
                    let target = &swap_targets[&s.label];
                    for (v, t) in img.iter_mut().zip(target) {
                        *v = clamp01(*v * (1.0 - magnitude) + t * magnitude);
                    }
                }
                ShiftKind::Blur => {
                    if magnitude > 0.0 {
                        let blurred = box_blur(&img, n);
                        for (v, b) in img.iter_mut().zip(&blurred) {
                            *v = clamp01(*v * (1.0 - magnitude) + b * magnitude);
                        }
                    }
                }
            }
            Sample {
                patches: patches_from_pixels(&img, cfg),
                label: s.label,
                domain_tag: tag.clone(),
            }
        })
        .collect();
    Ok(Dataset {
        classes: dataset.classes.clone(),
        samples,
        render: dataset.render.clone(),
        seed: dataset.seed,
    })
}

// ── class list file ─────────────────────────────────────────────────────

/// One `id<TAB>name` line per class.
pub fn format_class_list(classes: &[ToyClass]) -> String {
    let mut out = String::new();
    for c in classes {
        out.push_str(&format!("{}\t{}\n", c.id, c.name));
    }
    out
}

/// Parses a class list file back into (id, name) pairs.
pub fn parse_class_list(text: &str) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| Error::Dataset(format!("line {}: missing tab separator", lineno + 1)))?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| Error::Dataset(format!("line {}: bad class id {id:?}", lineno + 1)))?;
        let name = name.trim();
        if name.is_empty() {
            return Err(Error::Dataset(format!("line {}: empty class name", lineno + 1)));
        }
        out.push((id, name.to_string()));
    }
    Ok(out)
}

// ── dataset cache file ──────────────────────────────────────────────────

const CACHE_MAGIC: &[u8; 4] = b"DSAC";
const CACHE_VERSION: u32 = 1;

/// Digest of everything that determines a corpus's bytes.
pub fn corpus_digest(n_classes: usize, samples_per_class: usize, render: &RenderConfig, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update((n_classes as u64).to_le_bytes());
    h.update((samples_per_class as u64).to_le_bytes());
    h.update(serde_json::to_vec(render).expect("render config serializes"));
    h.update(seed.to_le_bytes());
    crate::encoder::hex(&h.finalize())
}

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        ByteReader { data, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Dataset("cache file truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.remaining() < n.saturating_mul(8) {
            return Err(Error::Dataset("cache file truncated".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Dataset("cache string not utf-8".into()))
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Dataset {
    /// Cache encoding: magic, version, seed, digest, classes, samples.
    pub fn to_cache_bytes(&self, digest: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        push_string(&mut out, digest);
        push_string(
            &mut out,
            &serde_json::to_string(&self.render).expect("render config serializes"),
        );
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&(c.id as u32).to_le_bytes());
            push_string(&mut out, &c.name);
            for ch in c.color {
                out.extend_from_slice(&ch.to_le_bytes());
            }
            out.push(match c.texture {
                TextureKind::Plain => 0,
                TextureKind::Striped => 1,
                TextureKind::Dotted => 2,
                TextureKind::Checkered => 3,
            });
            out.extend_from_slice(&c.texture_freq.to_le_bytes());
            out.push(match c.shape {
                ShapeKind::Square => 0,
                ShapeKind::Circle => 1,
                ShapeKind::Triangle => 2,
                ShapeKind::Cross => 3,
            });
        }
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&(s.label as u32).to_le_bytes());
            push_string(&mut out, &s.domain_tag);
            out.extend_from_slice(&(s.patches.len() as u32).to_le_bytes());
            for v in &s.patches {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a cache file. Returns the stored digest alongside the
    /// dataset so callers can compare against the current config and
    /// regenerate on mismatch.
    pub fn from_cache_bytes(data: &[u8]) -> Result<(Dataset, String)> {
        let mut r = ByteReader::new(data);
        if r.take(4)? != CACHE_MAGIC {
            return Err(Error::Dataset("not a dataset cache file".into()));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::Dataset(format!("unsupported cache version {version}")));
        }
        let seed = r.u64()?;
        let digest = r.string()?;
        let render: RenderConfig = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Dataset(format!("bad render config in cache: {e}")))?;
        let n_classes = r.u32()? as usize;
        if n_classes > r.remaining() {
            return Err(Error::Dataset("cache file truncated".into()));
        }
        let mut classes = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let id = r.u32()? as usize;
            let name = r.string()?;
            let color = [r.f64()?, r.f64()?, r.f64()?];
            let texture = match r.take(1)?[0] {
                0 => TextureKind::Plain,
                1 => TextureKind::Striped,
                2 => TextureKind::Dotted,
                3 => TextureKind::Checkered,
                other => return Err(Error::Dataset(format!("bad texture tag {other}"))),
            };
            let texture_freq = r.f64()?;
            let shape = match r.take(1)?[0] {
                0 => ShapeKind::Square,
                1 => ShapeKind::Circle,
                2 => ShapeKind::Triangle,
                3 => ShapeKind::Cross,
                other => return Err(Error::Dataset(format!("bad shape tag {other}"))),
            };
            classes.push(ToyClass {
                id,
                name,
                color,
                texture,
                texture_freq,
                shape,
            });
        }
        let n_samples = r.u32()? as usize;
        if n_samples > r.remaining() {
            return Err(Error::Dataset("cache file truncated".into()));
        }
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let label = r.u32()? as usize;
            let domain_tag = r.string()?;
            let n_vals = r.u32()? as usize;
            let patches = r.f64_vec(n_vals)?;
            samples.push(Sample {
                patches,
                label,
                domain_tag,
            });
        }
        Ok((
            Dataset {
                classes,
                samples,
                render,
                seed,
            },
            digest,
        ))
    }
}

/// Loads the cache when its digest matches, otherwise regenerates the
/// corpus and rewrites the cache.
pub fn load_or_generate(
    path: &std::path::Path,
    n_classes: usize,
    samples_per_class: usize,
    render: &RenderConfig,
    seed: u64,
) -> Result<Dataset> {
    let digest = corpus_digest(n_classes, samples_per_class, render, seed);
    if let Ok(bytes) = std::fs::read(path) {
        if let Ok((ds, stored)) = Dataset::from_cache_bytes(&bytes) {
            if stored == digest {
                return Ok(ds);
            }
        }
    }
    let ds = generate_corpus(n_classes, samples_per_class, render, seed)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, ds.to_cache_bytes(&digest))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_corpus(seed: u64) -> Dataset {
        generate_corpus(8, 6, &RenderConfig::default(), seed).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small_corpus(3), small_corpus(3));
        assert_ne!(small_corpus(3), small_corpus(4));
    }

    #[test]
    fn corpus_counts() {
        let ds = generate_corpus(20, 40, &RenderConfig::default(), 1).unwrap();
        assert_eq!(ds.samples.len(), 800);
        assert_eq!(ds.classes.len(), 20);
        let mut names: Vec<&str> = ds.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 20, "class names must be unique");
    }

    #[test]
    fn values_stay_in_unit_interval() {
        let ds = small_corpus(5);
        for s in &ds.samples {
            assert!(s.patches.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.patches.len(), ds.render.num_patches() * ds.render.patch_dim());
        }
    }

    #[test]
    fn class_means_are_separated() {
        let ds = generate_corpus(6, 10, &RenderConfig::default(), 0).unwrap();
        let mut means: Vec<Vec<f64>> = Vec::new();
        for c in &ds.classes {
            let idx = ds.indices_of_class(c.id);
            let dim = ds.samples[idx[0]].patches.len();
            let mut mean = vec![0.0; dim];
            for &i in &idx {
                for (m, v) in mean.iter_mut().zip(&ds.samples[i].patches) {
                    *m += v / idx.len() as f64;
                }
            }
            means.push(mean);
        }
        for i in 0..means.len() {
            for j in (i + 1)..means.len() {
                let l2: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(l2 > 0.01, "classes {i} and {j} are too close ({l2})");
            }
        }
    }

    #[test]
    fn grid_too_small_rejected() {
        let render = RenderConfig {
            combo_offset: 125,
            ..RenderConfig::default()
        };
        assert!(generate_corpus(10, 2, &render, 0).is_err());
        assert!(generate_corpus(3, 2, &RenderConfig::default(), 0).is_err());
    }

    #[test]
    fn offset_corpora_are_class_disjoint() {
        let a = generate_corpus(8, 2, &RenderConfig::default(), 1).unwrap();
        let render_b = RenderConfig {
            combo_offset: 8,
            ..RenderConfig::default()
        };
        let b = generate_corpus(8, 2, &render_b, 1).unwrap();
        for ca in &a.classes {
            assert!(b.classes.iter().all(|cb| cb.name != ca.name));
        }
    }

    #[test]
    fn split_counts_and_quarantine() {
        let ds = generate_corpus(20, 10, &RenderConfig::default(), 2).unwrap();
        let split = split_base_novel(&ds, 0.6, 4, 3, 7).unwrap();
        assert_eq!(split.base_classes.len(), 12);
        assert_eq!(split.novel_classes.len(), 8);
        for c in &split.base_classes {
            assert!(!split.novel_classes.contains(c));
        }
        assert_eq!(split, split_base_novel(&ds, 0.6, 4, 3, 7).unwrap());
        let train = sample_k_shot(&ds, &split, 4, 7).unwrap();
        for &i in &train {
            assert!(split.base_classes.contains(&ds.samples[i].label));
        }
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let ds = small_corpus(1);
        assert!(split_base_novel(&ds, 0.0, 1, 1, 0).is_err());
        assert!(split_base_novel(&ds, 0.999, 1, 1, 0).is_ok());
        assert!(split_base_novel(&ds, 0.01, 1, 1, 0).is_err());
    }

    #[test]
    fn k_shot_counts_per_class() {
        let ds = generate_corpus(12, 20, &RenderConfig::default(), 3).unwrap();
        let split = split_base_novel(&ds, 0.5, 16, 4, 1).unwrap();
        let train = sample_k_shot(&ds, &split, 16, 1).unwrap();
        assert_eq!(train.len(), 16 * split.base_classes.len());
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &train {
            *counts.entry(ds.samples[i].label).or_default() += 1;
        }
        for &c in &split.base_classes {
            assert_eq!(counts[&c], 16);
        }
        // no train index reaches into the test pool
        let test: Vec<usize> = ds.test_indices(&split.base_classes, 4);
        for i in &train {
            assert!(!test.contains(i));
        }
        // insufficient samples name the class
        let err = sample_k_shot(&ds, &split, 17, 1).unwrap_err().to_string();
        assert!(err.contains("class"), "{err}");
    }

    #[test]
    fn zero_magnitude_shift_is_identity() {
        let ds = small_corpus(4);
        for kind in [
            ShiftKind::HueRotation,
            ShiftKind::NoiseBoost,
            ShiftKind::TextureSwap,
            ShiftKind::Blur,
        ] {
            let shifted = domain_shift(&ds, kind, 0.0, 9).unwrap();
            for (a, b) in ds.samples.iter().zip(&shifted.samples) {
                for (x, y) in a.patches.iter().zip(&b.patches) {
                    assert!((x - y).abs() < 1e-12);
                }
                assert_eq!(a.label, b.label);
            }
        }
    }

    #[test]
    fn noise_boost_variance_is_monotone() {
        let ds = small_corpus(6);
        let mut last = -1.0;
        for &mag in &[0.0, 0.1, 0.2] {
            let shifted = domain_shift(&ds, ShiftKind::NoiseBoost, mag, 11).unwrap();
            let mut var = 0.0;
            let mut n = 0.0;
            for (a, b) in ds.samples.iter().zip(&shifted.samples) {
                for (x, y) in a.patches.iter().zip(&b.patches) {
                    var += (x - y) * (x - y);
                    n += 1.0;
                }
            }
            let var = var / n;
            assert!(var > last, "variance {var} not above {last} at magnitude {mag}");
            last = var;
        }
    }

    #[test]
    fn shifts_preserve_labels() {
        let ds = small_corpus(8);
        let shifted = domain_shift(&ds, ShiftKind::Blur, 0.7, 1).unwrap();
        assert_eq!(shifted.classes, ds.classes);
        let labels_a: Vec<usize> = ds.samples.iter().map(|s| s.label).collect();
        let labels_b: Vec<usize> = shifted.samples.iter().map(|s| s.label).collect();
        assert_eq!(labels_a, labels_b);
        assert!(shifted.samples.iter().all(|s| s.domain_tag == "blur:0.7"));
        assert!("melt".parse::<ShiftKind>().is_err());
    }

    #[test]
    fn patch_pixel_roundtrip() {
        let cfg = RenderConfig::default();
        let ds = small_corpus(2);
        let patches = &ds.samples[0].patches;
        let img = pixels_from_patches(patches, &cfg);
        assert_eq!(&patches_from_pixels(&img, &cfg), patches);
    }

    #[test]
    fn class_list_roundtrip_and_errors() {
        let ds = small_corpus(1);
        let text = format_class_list(&ds.classes);
        let parsed = parse_class_list(&text).unwrap();
        assert_eq!(parsed, ds.class_pairs());
        assert!(parse_class_list("1 no tab here").is_err());
        assert!(parse_class_list("x\tname").is_err());
        assert!(parse_class_list("3\t \n").is_err());
    }

    #[test]
    fn cache_roundtrip_and_digest_guard() {
        let ds = small_corpus(7);
        let digest = corpus_digest(8, 6, &ds.render, 7);
        let bytes = ds.to_cache_bytes(&digest);
        let (back, stored) = Dataset::from_cache_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(stored, digest);
        // truncation is an error, not a panic
        assert!(Dataset::from_cache_bytes(&bytes[..bytes.len() / 2]).is_err());
        assert!(Dataset::from_cache_bytes(b"nope").is_err());
    }

    #[test]
    fn load_or_generate_uses_and_refreshes_cache() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        let render = RenderConfig::default();
        let a = load_or_generate(&path, 8, 6, &render, 7).unwrap();
        let b = load_or_generate(&path, 8, 6, &render, 7).unwrap();
        assert_eq!(a, b);
        // different seed: digest mismatch forces regeneration
        let c = load_or_generate(&path, 8, 6, &render, 8).unwrap();
        assert_ne!(a, c);
        assert_eq!(c.seed, 8);
    }

    #[test]
    fn vocab_covers_every_class_name() {
        let render = RenderConfig::default();
        let vocab = render.vocab();
        let ds = generate_corpus(20, 1, &render, 1).unwrap();
        for c in &ds.classes {
            assert!(vocab.encode(&c.name).is_ok(), "word of {:?} missing", c.name);
        }
    }
}
