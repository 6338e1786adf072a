//! Experiment configuration: a flat-sectioned `key = value` text format
//! with typed parsing, dotted overrides, and a fully materialized
//! snapshot so a run is reproducible from its resolved config alone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::AlignmentVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    BaseToNovel,
    CrossDataset,
    DomainGeneralization,
    FewShot,
    Ablation,
    LambdaSweep,
    DepthSweep,
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base-to-novel" => Ok(Protocol::BaseToNovel),
            "cross-dataset" => Ok(Protocol::CrossDataset),
            "domain-generalization" => Ok(Protocol::DomainGeneralization),
            "few-shot" => Ok(Protocol::FewShot),
            "ablation" => Ok(Protocol::Ablation),
            "lambda-sweep" => Ok(Protocol::LambdaSweep),
            "depth-sweep" => Ok(Protocol::DepthSweep),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::BaseToNovel => "base-to-novel",
            Protocol::CrossDataset => "cross-dataset",
            Protocol::DomainGeneralization => "domain-generalization",
            Protocol::FewShot => "few-shot",
            Protocol::Ablation => "ablation",
            Protocol::LambdaSweep => "lambda-sweep",
            Protocol::DepthSweep => "depth-sweep",
        })
    }
}

/// What the directional loss aligns against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirTarget {
    /// Class-mean frozen embedding.
    Prototype,
    /// The same image's frozen feature.
    Sample,
}

impl FromStr for DirTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prototype" => Ok(DirTarget::Prototype),
            "sample" => Ok(DirTarget::Sample),
            other => Err(Error::Config(format!("unknown dir target {other:?}"))),
        }
    }
}

impl fmt::Display for DirTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DirTarget::Prototype => "prototype",
            DirTarget::Sample => "sample",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub visual: usize,
    pub textual: usize,
    /// None means auto: scaled 9-of-12 for base-to-novel style runs,
    /// 3-of-12 for transfer runs.
    pub depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub few_shot_epochs: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub mask_fraction: f64,
    pub tau: f64,
    pub enable_cir: bool,
    pub enable_masking: bool,
    pub enable_sr: bool,
    pub enable_dir: bool,
    pub dir_variant: AlignmentVariant,
    pub dir_target: DirTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub base_fraction: f64,
    pub k_shot: usize,
    pub test_per_class: usize,
    pub noise_std: f64,
    pub color_jitter: f64,
    pub center_jitter: f64,
    pub grid_seed: u64,
    /// Magnitude of the four rendering shifts in the domain
    /// generalization protocol.
    pub shift_magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub holdout_per_class: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Required held-out zero-shot accuracy before the backbone counts
    /// as a usable teacher.
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub fewshot_k: Vec<usize>,
    pub sweep_lambdas: Vec<f64>,
    pub sweep_depths: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: Protocol::BaseToNovel,
            seeds: vec![1, 2, 3],
            encoder: EncoderConfig::default(),
            prompt: PromptConfig {
                visual: 4,
                textual: 4,
                depth: None,
            },
            optim: OptimConfig {
                lr: 0.0025,
                momentum: 0.9,
                epochs: 20,
                few_shot_epochs: 50,
                batch: 4,
            },
            loss: LossConfig {
                lambda: 12.0,
                gamma: 0.5,
                mask_fraction: 0.5,
                tau: 0.07,
                enable_cir: true,
                enable_masking: true,
                enable_sr: true,
                enable_dir: true,
                dir_variant: AlignmentVariant::Direction,
                dir_target: DirTarget::Prototype,
            },
            data: DataConfig {
                classes: 20,
                samples_per_class: 40,
                base_fraction: 0.6,
                k_shot: 16,
                test_per_class: 20,
                noise_std: 0.15,
                color_jitter: 0.22,
                center_jitter: 1.5,
                grid_seed: 1,
                shift_magnitude: 0.2,
            },
            pretrain: PretrainConfig {
                classes: 56,
                samples_per_class: 30,
                holdout_per_class: 6,
                steps: 8000,
                batch: 12,
                lr: 0.002,
                momentum: 0.9,
                floor: 0.92,
            },
            fewshot_k: vec![1, 2, 4, 8, 16],
            sweep_lambdas: vec![0.0, 1.0, 4.0, 8.0, 12.0, 16.0],
            sweep_depths: vec![1, 3, 6, 9, 12],
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(|v| parse_num(key, v))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty list for {key}")));
    }
    Ok(items)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("bad value {other:?} for {key} (expected true/false)"))),
    }
}

impl ExperimentConfig {
    /// Applies one `section.key = value` assignment.
    pub fn set(&mut self, dotted_key: &str, value: &str) -> Result<()> {
        let key = dotted_key;
        match dotted_key {
            "protocol.kind" => self.protocol = value.trim().parse()?,
            "protocol.seeds" => self.seeds = parse_list(key, value)?,
            "encoder.dim" => self.encoder.dim = parse_num(key, value)?,
            "encoder.layers" => self.encoder.layers = parse_num(key, value)?,
            "encoder.heads" => self.encoder.heads = parse_num(key, value)?,
            "encoder.patches_per_side" => self.encoder.patches_per_side = parse_num(key, value)?,
            "encoder.patch_pixels" => self.encoder.patch_pixels = parse_num(key, value)?,
            "encoder.ff_mult" => self.encoder.ff_mult = parse_num(key, value)?,
            "encoder.text_ctx" => self.encoder.text_ctx = parse_num(key, value)?,
            "prompt.visual" => self.prompt.visual = parse_num(key, value)?,
            "prompt.textual" => self.prompt.textual = parse_num(key, value)?,
            "prompt.depth" => {
                self.prompt.depth = if value.trim() == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "optimizer.lr" => self.optim.lr = parse_num(key, value)?,
            "optimizer.momentum" => self.optim.momentum = parse_num(key, value)?,
            "optimizer.epochs" => self.optim.epochs = parse_num(key, value)?,
            "optimizer.few_shot_epochs" => self.optim.few_shot_epochs = parse_num(key, value)?,
            "optimizer.batch" => self.optim.batch = parse_num(key, value)?,
            "loss.lambda" => self.loss.lambda = parse_num(key, value)?,
            "loss.gamma" => self.loss.gamma = parse_num(key, value)?,
            "loss.mask_fraction" => self.loss.mask_fraction = parse_num(key, value)?,
            "loss.tau" => self.loss.tau = parse_num(key, value)?,
            "loss.enable_cir" => self.loss.enable_cir = parse_bool(key, value)?,
            "loss.enable_masking" => self.loss.enable_masking = parse_bool(key, value)?,
            "loss.enable_sr" => self.loss.enable_sr = parse_bool(key, value)?,
            "loss.enable_dir" => self.loss.enable_dir = parse_bool(key, value)?,
            "loss.dir_variant" => self.loss.dir_variant = value.trim().parse()?,
            "loss.dir_target" => self.loss.dir_target = value.trim().parse()?,
            "data.classes" => self.data.classes = parse_num(key, value)?,
            "data.samples_per_class" => self.data.samples_per_class = parse_num(key, value)?,
            "data.base_fraction" => self.data.base_fraction = parse_num(key, value)?,
            "data.k_shot" => self.data.k_shot = parse_num(key, value)?,
            "data.test_per_class" => self.data.test_per_class = parse_num(key, value)?,
            "data.noise_std" => self.data.noise_std = parse_num(key, value)?,
            "data.color_jitter" => self.data.color_jitter = parse_num(key, value)?,
            "data.center_jitter" => self.data.center_jitter = parse_num(key, value)?,
            "data.grid_seed" => self.data.grid_seed = parse_num(key, value)?,
            "data.shift_magnitude" => self.data.shift_magnitude = parse_num(key, value)?,
            "pretrain.classes" => self.pretrain.classes = parse_num(key, value)?,
            "pretrain.samples_per_class" => self.pretrain.samples_per_class = parse_num(key, value)?,
            "pretrain.holdout_per_class" => self.pretrain.holdout_per_class = parse_num(key, value)?,
            "pretrain.steps" => self.pretrain.steps = parse_num(key, value)?,
            "pretrain.batch" => self.pretrain.batch = parse_num(key, value)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(key, value)?,
            "pretrain.momentum" => self.pretrain.momentum = parse_num(key, value)?,
            "pretrain.floor" => self.pretrain.floor = parse_num(key, value)?,
            "fewshot.k_values" => self.fewshot_k = parse_list(key, value)?,
            "sweep.lambdas" => self.sweep_lambdas = parse_list(key, value)?,
            "sweep.depths" => self.sweep_depths = parse_list(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses the sectioned text format over the defaults.
    pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section", lineno + 1)))?;
                section = name.trim().to_string();
                if section.is_empty() {
                    return Err(Error::Config(format!("line {}: empty section name", lineno + 1)));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if section.is_empty() {
                return Err(Error::Config(format!("line {}: key outside any section", lineno + 1)));
            }
            cfg.set(&format!("{section}.{key}"), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentConfig::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        if self.optim.lr <= 0.0 || self.pretrain.lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.optim.batch == 0 || self.optim.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if self.loss.tau <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.loss.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.loss.gamma) || !(0.0..=1.0).contains(&self.loss.mask_fraction) {
            return Err(Error::Config("gamma and mask_fraction must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.data.base_fraction) || self.data.base_fraction == 0.0 {
            return Err(Error::Config("base_fraction must be in (0, 1)".into()));
        }
        if self.data.k_shot == 0 {
            return Err(Error::Config("k_shot must be at least 1".into()));
        }
        if let Some(d) = self.prompt.depth {
            if d == 0 || d > self.encoder.layers {
                return Err(Error::Config(format!(
                    "prompt depth {d} not in 1..={}",
                    self.encoder.layers
                )));
            }
        }
        if self.data.samples_per_class < self.data.k_shot + self.data.test_per_class {
            return Err(Error::Config(format!(
                "samples_per_class {} cannot cover k_shot {} plus test_per_class {}",
                self.data.samples_per_class, self.data.k_shot, self.data.test_per_class
            )));
        }
        if self.pretrain.samples_per_class <= self.pretrain.holdout_per_class {
            return Err(Error::Config("pretrain holdout leaves no training samples".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain.floor) {
            return Err(Error::Config("pretrain floor must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Prompt depth for a protocol when the config says auto: the deep
    /// settings use 9-of-12 scaled to L, the transfer settings 3-of-12.
    pub fn resolved_depth(&self, protocol: Protocol) -> usize {
        if let Some(d) = self.prompt.depth {
            return d;
        }
        let l = self.encoder.layers;
        match protocol {
            Protocol::CrossDataset | Protocol::DomainGeneralization => l.min(3),
            _ => l.min(9),
        }
    }

    /// Scales a nominal 12-layer depth onto this encoder.
    pub fn scale_depth(&self, nominal: usize) -> usize {
        let l = self.encoder.layers;
        (((nominal * l) as f64 / 12.0).round() as usize).clamp(1, l)
    }

    pub fn render_config(&self, combo_offset: usize) -> crate::data::RenderConfig {
        crate::data::RenderConfig {
            patches_per_side: self.encoder.patches_per_side,
            patch_pixels: self.encoder.patch_pixels,
            noise_std: self.data.noise_std,
            color_jitter: self.data.color_jitter,
            center_jitter: self.data.center_jitter,
            grid_seed: self.data.grid_seed,
            combo_offset,
        }
    }

    /// The fully materialized text form; parsing it back yields an
    /// identical config.
    pub fn to_ini(&self) -> String {
        let fmt_f = |v: f64| {
            if v == v.trunc() && v.abs() < 1e15 {
                format!("{v:.1}")
            } else {
                format!("{v}")
            }
        };
        let list_u = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        s.push_str("[protocol]\n");
        s.push_str(&format!("kind = {}\n", self.protocol));
        s.push_str(&format!(
            "seeds = {}\n",
            self.seeds.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        ));
        s.push_str("\n[encoder]\n");
        s.push_str(&format!("dim = {}\n", self.encoder.dim));
        s.push_str(&format!("layers = {}\n", self.encoder.layers));
        s.push_str(&format!("heads = {}\n", self.encoder.heads));
        s.push_str(&format!("patches_per_side = {}\n", self.encoder.patches_per_side));
        s.push_str(&format!("patch_pixels = {}\n", self.encoder.patch_pixels));
        s.push_str(&format!("ff_mult = {}\n", self.encoder.ff_mult));
        s.push_str(&format!("text_ctx = {}\n", self.encoder.text_ctx));
        s.push_str("\n[prompt]\n");
        s.push_str(&format!("visual = {}\n", self.prompt.visual));
        s.push_str(&format!("textual = {}\n", self.prompt.textual));
        match self.prompt.depth {
            Some(d) => s.push_str(&format!("depth = {d}\n")),
            None => s.push_str("depth = auto\n"),
        }
        s.push_str("\n[optimizer]\n");
        s.push_str(&format!("lr = {}\n", fmt_f(self.optim.lr)));
        s.push_str(&format!("momentum = {}\n", fmt_f(self.optim.momentum)));
        s.push_str(&format!("epochs = {}\n", self.optim.epochs));
        s.push_str(&format!("few_shot_epochs = {}\n", self.optim.few_shot_epochs));
        s.push_str(&format!("batch = {}\n", self.optim.batch));
        s.push_str("\n[loss]\n");
        s.push_str(&format!("lambda = {}\n", fmt_f(self.loss.lambda)));
        s.push_str(&format!("gamma = {}\n", fmt_f(self.loss.gamma)));
        s.push_str(&format!("mask_fraction = {}\n", fmt_f(self.loss.mask_fraction)));
        s.push_str(&format!("tau = {}\n", fmt_f(self.loss.tau)));
        s.push_str(&format!("enable_cir = {}\n", self.loss.enable_cir));
        s.push_str(&format!("enable_masking = {}\n", self.loss.enable_masking));
        s.push_str(&format!("enable_sr = {}\n", self.loss.enable_sr));
        s.push_str(&format!("enable_dir = {}\n", self.loss.enable_dir));
        s.push_str(&format!("dir_variant = {}\n", self.loss.dir_variant));
        s.push_str(&format!("dir_target = {}\n", self.loss.dir_target));
        s.push_str("\n[data]\n");
        s.push_str(&format!("classes = {}\n", self.data.classes));
        s.push_str(&format!("samples_per_class = {}\n", self.data.samples_per_class));
        s.push_str(&format!("base_fraction = {}\n", fmt_f(self.data.base_fraction)));
        s.push_str(&format!("k_shot = {}\n", self.data.k_shot));
        s.push_str(&format!("test_per_class = {}\n", self.data.test_per_class));
        s.push_str(&format!("noise_std = {}\n", fmt_f(self.data.noise_std)));
        s.push_str(&format!("color_jitter = {}\n", fmt_f(self.data.color_jitter)));
        s.push_str(&format!("center_jitter = {}\n", fmt_f(self.data.center_jitter)));
        s.push_str(&format!("grid_seed = {}\n", self.data.grid_seed));
        s.push_str(&format!("shift_magnitude = {}\n", fmt_f(self.data.shift_magnitude)));
        s.push_str("\n[pretrain]\n");
        s.push_str(&format!("classes = {}\n", self.pretrain.classes));
        s.push_str(&format!("samples_per_class = {}\n", self.pretrain.samples_per_class));
        s.push_str(&format!("holdout_per_class = {}\n", self.pretrain.holdout_per_class));
        s.push_str(&format!("steps = {}\n", self.pretrain.steps));
        s.push_str(&format!("batch = {}\n", self.pretrain.batch));
        s.push_str(&format!("lr = {}\n", fmt_f(self.pretrain.lr)));
        s.push_str(&format!("momentum = {}\n", fmt_f(self.pretrain.momentum)));
        s.push_str(&format!("floor = {}\n", fmt_f(self.pretrain.floor)));
        s.push_str("\n[fewshot]\n");
        s.push_str(&format!("k_values = {}\n", list_u(&self.fewshot_k)));
        s.push_str("\n[sweep]\n");
        s.push_str(&format!(
            "lambdas = {}\n",
            self.sweep_lambdas.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(",")
        ));
        s.push_str(&format!("depths = {}\n", list_u(&self.sweep_depths)));
        s
    }

    /// SHA-256 of the materialized config text.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_ini().as_bytes());
        crate::encoder::hex(&h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_ini();
        let back = ExperimentConfig::parse_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn parse_with_comments_and_overrides() {
        let text = "\
[protocol]
kind = few-shot   # protocol choice
seeds = 5,6

[loss]
lambda = 0
enable_dir = false
";
        let cfg = ExperimentConfig::parse_str(text).unwrap();
        assert_eq!(cfg.protocol, Protocol::FewShot);
        assert_eq!(cfg.seeds, vec![5, 6]);
        assert_eq!(cfg.loss.lambda, 0.0);
        assert!(!cfg.loss.enable_dir);
        // untouched defaults remain
        assert_eq!(cfg.optim.batch, 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::parse_str("[loss]\nlambada = 3\n").is_err());
        assert!(ExperimentConfig::parse_str("[dance]\nlambda = 3\n").is_err());
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.set("loss.lambda", "7").is_ok());
        assert!(cfg.set("loss.nope", "7").is_err());
        assert_eq!(cfg.loss.lambda, 7.0);
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(ExperimentConfig::parse_str("[loss\nlambda = 1").is_err());
        assert!(ExperimentConfig::parse_str("lambda = 1").is_err());
        assert!(ExperimentConfig::parse_str("[loss]\nlambda\n").is_err());
        assert!(ExperimentConfig::parse_str("[loss]\nlambda = banana\n").is_err());
    }

    #[test]
    fn depth_resolution() {
        let cfg = ExperimentConfig::default();
        // L = 4: deep settings take min(L, 9), transfer settings min(L, 3)
        assert_eq!(cfg.resolved_depth(Protocol::BaseToNovel), 4);
        assert_eq!(cfg.resolved_depth(Protocol::FewShot), 4);
        assert_eq!(cfg.resolved_depth(Protocol::CrossDataset), 3);
        assert_eq!(cfg.resolved_depth(Protocol::DomainGeneralization), 3);
        let mut fixed = cfg.clone();
        fixed.prompt.depth = Some(2);
        assert_eq!(fixed.resolved_depth(Protocol::BaseToNovel), 2);
        // nominal 12-layer grid scaled to L = 4
        assert_eq!(cfg.scale_depth(1), 1);
        assert_eq!(cfg.scale_depth(3), 1);
        assert_eq!(cfg.scale_depth(6), 2);
        assert_eq!(cfg.scale_depth(9), 3);
        assert_eq!(cfg.scale_depth(12), 4);
    }

    #[test]
    fn validation_catches_bad_ranges() {
        let mut cfg = ExperimentConfig::default();
        cfg.loss.gamma = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.data.samples_per_class = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.prompt.depth = Some(9);
        assert!(cfg.validate().is_err());
    }
}
