//! Experiment configuration as flat `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; missing
//! keys keep their defaults. Unknown keys are rejected so typos surface.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::augment::AugMode;
use crate::error::{Error, Result};
use crate::mae::{LossNorm, MaeConfig};
use crate::optim::AdamWConfig;
use crate::vit::{NormLayout, Preset, VitConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub image_size: usize,
    pub patch_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: usize,
    pub norm_layout: NormLayout,
    /// `None` uses the preset's batch size.
    pub batch_size: Option<usize>,
    pub seed: u64,

    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
    pub loss_norm: LossNorm,
    pub norm_pix: bool,
    pub pretrain_epochs: usize,
    pub pretrain_warmup: usize,
    pub pretrain_lr: f64,
    pub pretrain_wd: f64,
    pub pretrain_aug: AugMode,

    pub epochs: usize,
    pub warmup: usize,
    pub lr: f64,
    pub wd: f64,
    pub min_lr: f64,
    pub layer_decay: f64,
    pub finetune_aug: AugMode,
    pub mix: bool,
    pub mix_alpha: f64,
    pub label_fraction: f64,
    pub freeze_epochs: usize,

    /// Fraction of total epochs between periodic checkpoints.
    pub checkpoint_every: f64,
    pub eval_batch: usize,
    pub analysis_images: usize,

    pub data_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub init: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: Preset::Tiny,
            image_size: 224,
            patch_size: None,
            embed_dim: None,
            depth: None,
            heads: None,
            mlp_ratio: 4,
            norm_layout: NormLayout::Pre,
            batch_size: None,
            seed: 0,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            mask_ratio: 0.60,
            loss_norm: LossNorm::PerHiddenToken,
            norm_pix: false,
            pretrain_epochs: 3000,
            pretrain_warmup: 10,
            pretrain_lr: 1e-3,
            pretrain_wd: 0.5,
            pretrain_aug: AugMode::CropOnly,
            epochs: 100,
            warmup: 10,
            lr: 1e-3,
            wd: 0.05,
            min_lr: 0.0,
            layer_decay: 0.65,
            finetune_aug: AugMode::SimclrStrong,
            mix: true,
            mix_alpha: 0.8,
            label_fraction: 1.0,
            freeze_epochs: 0,
            checkpoint_every: 0.1,
            eval_batch: 32,
            analysis_images: 300,
            data_dir: None,
            manifest: None,
            init: None,
        }
    }
}

/// Batch size used by the paper for each preset.
pub fn preset_batch(preset: Preset) -> usize {
    match preset {
        Preset::Tiny => 160,
        Preset::Small => 128,
        Preset::Base => 80,
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn opt_usize(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn loss_norm_name(n: LossNorm) -> &'static str {
    match n {
        LossNorm::PerHiddenToken => "per_hidden",
        LossNorm::RawSum => "raw_sum",
    }
}

impl ExperimentConfig {
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not `key=value`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => self.preset = value.parse()?,
            "image_size" => self.image_size = parse(key, value)?,
            "patch_size" => self.patch_size = opt_usize(key, value)?,
            "embed_dim" => self.embed_dim = opt_usize(key, value)?,
            "depth" => self.depth = opt_usize(key, value)?,
            "heads" => self.heads = opt_usize(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "norm_layout" => self.norm_layout = value.parse()?,
            "batch_size" => self.batch_size = opt_usize(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "decoder_dim" => self.decoder_dim = parse(key, value)?,
            "decoder_depth" => self.decoder_depth = parse(key, value)?,
            "decoder_heads" => self.decoder_heads = parse(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "loss_norm" => {
                self.loss_norm = match value {
                    "per_hidden" => LossNorm::PerHiddenToken,
                    "raw_sum" => LossNorm::RawSum,
                    _ => return Err(Error::Config(format!("invalid loss_norm `{value}` (per_hidden or raw_sum)"))),
                }
            }
            "norm_pix" => self.norm_pix = parse_bool(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "pretrain_warmup" => self.pretrain_warmup = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "pretrain_wd" => self.pretrain_wd = parse(key, value)?,
            "pretrain_aug" => self.pretrain_aug = value.parse()?,
            "epochs" => self.epochs = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "wd" => self.wd = parse(key, value)?,
            "min_lr" => self.min_lr = parse(key, value)?,
            "layer_decay" => self.layer_decay = parse(key, value)?,
            "finetune_aug" => self.finetune_aug = value.parse()?,
            "mix" => self.mix = parse_bool(key, value)?,
            "mix_alpha" => self.mix_alpha = parse(key, value)?,
            "label_fraction" => self.label_fraction = parse(key, value)?,
            "freeze_epochs" => self.freeze_epochs = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "eval_batch" => self.eval_batch = parse(key, value)?,
            "analysis_images" => self.analysis_images = parse(key, value)?,
            "data_dir" => self.data_dir = opt_path(value),
            "manifest" => self.manifest = opt_path(value),
            "init" => self.init = opt_path(value),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let auto = |v: Option<usize>| v.map_or_else(|| "auto".to_string(), |v| v.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.to_string());
        kv("image_size", self.image_size.to_string());
        kv("patch_size", auto(self.patch_size));
        kv("embed_dim", auto(self.embed_dim));
        kv("depth", auto(self.depth));
        kv("heads", auto(self.heads));
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("norm_layout", self.norm_layout.to_string());
        kv("batch_size", auto(self.batch_size));
        kv("seed", self.seed.to_string());
        kv("decoder_dim", self.decoder_dim.to_string());
        kv("decoder_depth", self.decoder_depth.to_string());
        kv("decoder_heads", self.decoder_heads.to_string());
        kv("mask_ratio", format!("{:?}", self.mask_ratio));
        kv("loss_norm", loss_norm_name(self.loss_norm).to_string());
        kv("norm_pix", self.norm_pix.to_string());
        kv("pretrain_epochs", self.pretrain_epochs.to_string());
        kv("pretrain_warmup", self.pretrain_warmup.to_string());
        kv("pretrain_lr", format!("{:?}", self.pretrain_lr));
        kv("pretrain_wd", format!("{:?}", self.pretrain_wd));
        kv("pretrain_aug", self.pretrain_aug.to_string());
        kv("epochs", self.epochs.to_string());
        kv("warmup", self.warmup.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("wd", format!("{:?}", self.wd));
        kv("min_lr", format!("{:?}", self.min_lr));
        kv("layer_decay", format!("{:?}", self.layer_decay));
        kv("finetune_aug", self.finetune_aug.to_string());
        kv("mix", self.mix.to_string());
        kv("mix_alpha", format!("{:?}", self.mix_alpha));
        kv("label_fraction", format!("{:?}", self.label_fraction));
        kv("freeze_epochs", self.freeze_epochs.to_string());
        kv("checkpoint_every", format!("{:?}", self.checkpoint_every));
        kv("eval_batch", self.eval_batch.to_string());
        kv("analysis_images", self.analysis_images.to_string());
        kv("data_dir", path(&self.data_dir));
        kv("manifest", path(&self.manifest));
        kv("init", path(&self.init));
        s
    }

    pub fn batch(&self) -> usize {
        self.batch_size.unwrap_or_else(|| preset_batch(self.preset))
    }

    /// Encoder architecture for `num_classes` outputs (0 for headless).
    pub fn vit(&self, num_classes: usize) -> Result<VitConfig> {
        let (embed_dim, heads, blocks) = self.preset.dims();
        let v = VitConfig {
            patch_size: self.patch_size.unwrap_or(16),
            embed_dim: self.embed_dim.unwrap_or(embed_dim),
            heads: self.heads.unwrap_or(heads),
            blocks: self.depth.unwrap_or(blocks),
            mlp_ratio: self.mlp_ratio,
            num_classes,
            image_size: self.image_size,
            norm_layout: self.norm_layout,
            ln_eps: 1e-6,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn mae(&self) -> MaeConfig {
        MaeConfig {
            decoder_dim: self.decoder_dim,
            decoder_depth: self.decoder_depth,
            decoder_heads: self.decoder_heads,
            mask_ratio: self.mask_ratio,
            loss_norm: self.loss_norm,
            norm_pix_targets: self.norm_pix,
        }
    }

    pub fn pretext_optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.pretrain_wd,
            ..AdamWConfig::pretext()
        }
    }

    pub fn finetune_optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.wd,
            ..AdamWConfig::finetune()
        }
    }

    /// Checks settings shared by every command.
    pub fn validate(&self) -> Result<()> {
        self.vit(0)?;
        self.mae().validate()?;
        if self.batch() == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!("label_fraction must be in (0, 1], got {}", self.label_fraction)));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::Config(format!("layer_decay must be in (0, 1], got {}", self.layer_decay)));
        }
        if !(self.checkpoint_every > 0.0 && self.checkpoint_every <= 1.0) {
            return Err(Error::Config(format!(
                "checkpoint_every must be in (0, 1], got {}",
                self.checkpoint_every
            )));
        }
        if self.mix && self.mix_alpha <= 0.0 {
            return Err(Error::Config("mix_alpha must be positive".into()));
        }
        for (name, v) in [("pretrain_lr", self.pretrain_lr), ("lr", self.lr), ("min_lr", self.min_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}
