//! End-to-end commands: MAE pre-training, fine-tuning, evaluation, ablation
//! sweeps and representation analysis. Each command reads its inputs, writes
//! files under an output directory and is a pure function of its config,
//! inputs and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;

use crate::augment::{mix_batch, one_hot, AugMode, AugPolicy};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{list_images, read_manifest, subset_fraction, LabeledDataset, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{
    attention_maps, cka_csv, cka_heatmap, confusion_matrix, export_attention, export_confusion, metrics,
    MetricsReport, LOW_ACCURACY,
};
use crate::image::{load_image, stack_images, Image};
use crate::mae::{pretrain_step, MaeModel};
use crate::optim::{cosine_warmup_lr, layerwise_lr_groups, AdamW, ParamGroups, ScheduleSpec};
use crate::rng::{rng_from, seed_path};
use crate::tensor::Graph;
use crate::vit::VitModel;

// stream ids for seed_path
const S_ORDER: u64 = 1;
const S_AUG: u64 = 2;
const S_MASK: u64 = 3;
const S_MIX: u64 = 4;
const S_SUBSET: u64 = 5;
const S_INIT: u64 = 6;
const S_SAMPLE: u64 = 7;

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn checkpoint_interval(epochs: usize, fraction: f64) -> usize {
    ((epochs as f64 * fraction).round() as usize).max(1)
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed));
    order
}

/// Per-epoch record of MAE pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub history: Vec<PretrainEpoch>,
    /// Final checkpoint (encoder and decoder).
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

pub fn pretrain_curve_csv(history: &[PretrainEpoch]) -> String {
    let mut s = String::from("epoch,loss,lr\n");
    for h in history {
        let _ = writeln!(s, "{},{},{}", h.epoch, h.loss, h.lr);
    }
    s
}

/// MAE pre-training on every image under `cfg.data_dir`.
///
/// Writes `pretrain_loss.csv`, periodic `pretrain_eNNNN.ckpt` files and the
/// final `pretrain.ckpt`. With `resume`, parameters, optimizer state and
/// the epoch counter are restored and training continues with the next
/// epoch; the CSV then holds only the new epochs.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let dir = cfg
        .data_dir
        .as_deref()
        .ok_or_else(|| Error::Config("pretraining needs `data_dir`".into()))?;
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Input(format!("no images under {}", dir.display())));
    }
    let images = paths.iter().map(load_image).collect::<Result<Vec<_>>>()?;
    pretrain_on_images(cfg, &images, out, resume)
}

/// [`cmd_pretrain`] on images already in memory.
pub fn pretrain_on_images(
    cfg: &ExperimentConfig,
    images: &[Image],
    out: &Path,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let vit = cfg.vit(0)?;
    let mut mae = MaeModel::new(&vit, &cfg.mae(), seed_path(cfg.seed, &[S_INIT]))?;
    let mut opt = AdamW::new(&mae.params, cfg.pretext_optimizer());
    let mut seed = cfg.seed;
    let mut start = 0;
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        ck.restore_into(&mut mae.params, true, |_| false)?;
        if let Some(state) = ck.optimizer {
            opt.state = state;
        }
        seed = ck.rng_state;
        start = ck.epoch as usize;
        info!("resuming pre-training after epoch {start}");
    }
    let groups = ParamGroups::uniform(&mae.params);
    let batch = cfg.batch().min(images.len());
    let steps = images.len().div_ceil(batch);
    let schedule = ScheduleSpec {
        base_lr: cfg.pretrain_lr,
        warmup_epochs: cfg.pretrain_warmup,
        total_epochs: cfg.pretrain_epochs,
        steps_per_epoch: steps,
        min_lr: cfg.min_lr,
    };
    schedule.validate()?;
    let policy = AugPolicy {
        mode: cfg.pretrain_aug,
        mix: false,
        ..AugPolicy::pretext()
    };
    let every = checkpoint_interval(cfg.pretrain_epochs, cfg.checkpoint_every);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_text = cfg.to_text();
    let mut history = Vec::new();
    for epoch in start + 1..=cfg.pretrain_epochs {
        let e = epoch as u64;
        let order = shuffled(images.len(), seed_path(seed, &[S_ORDER, e]));
        let (mut total, mut lr) = (0.0, 0.0);
        for (step, idx) in order.chunks(batch).enumerate() {
            let batch_imgs = idx
                .iter()
                .map(|&i| policy.apply(&images[i], cfg.image_size, seed_path(seed, &[S_AUG, e, i as u64])))
                .collect::<Result<Vec<_>>>()?;
            lr = cosine_warmup_lr(&schedule, (epoch - 1) * steps + step);
            let plan_seed = seed_path(seed, &[S_MASK, e, step as u64]);
            let loss = pretrain_step(&mut mae, &stack_images(&batch_imgs)?, plan_seed, &mut opt, &groups, lr)?;
            total += loss * idx.len() as f64;
        }
        let loss = total / images.len() as f64;
        info!("pretrain epoch {epoch}/{}: loss {loss:.6} lr {lr:.3e}", cfg.pretrain_epochs);
        history.push(PretrainEpoch { epoch, loss, lr });
        if epoch % every == 0 || epoch == cfg.pretrain_epochs {
            let ck = Checkpoint::from_store(&mae.params, config_text.clone(), e, seed, Some(&opt.state));
            ck.save(out.join(format!("pretrain_e{epoch:04}.ckpt")))?;
        }
    }
    let final_ck = Checkpoint::from_store(&mae.params, config_text, cfg.pretrain_epochs as u64, seed, Some(&opt.state));
    let checkpoint = out.join("pretrain.ckpt");
    final_ck.save(&checkpoint)?;
    let loss_csv = out.join("pretrain_loss.csv");
    write_text(&loss_csv, &pretrain_curve_csv(&history))?;
    Ok(PretrainOutcome {
        history,
        checkpoint,
        loss_csv,
    })
}

/// Labeled images held in memory.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Train, validation and test data of one labeled dataset.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub class_names: Vec<String>,
    pub train: LabeledImages,
    pub val: LabeledImages,
    pub test: LabeledImages,
}

impl SplitData {
    pub fn get(&self, split: Split) -> &LabeledImages {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Loads every split of a manifest into memory.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let (ds, split) = read_manifest(path)?;
        Self::from_dataset(&ds, &split)
    }

    pub fn from_dataset(ds: &LabeledDataset, split: &SplitSpec) -> Result<Self> {
        let load = |s: Split| -> Result<LabeledImages> {
            let idx = split.indices(s);
            Ok(LabeledImages {
                images: idx.iter().map(|&i| load_image(&ds.items[i].path)).collect::<Result<_>>()?,
                labels: idx.iter().map(|&i| ds.items[i].class_id).collect(),
            })
        };
        Ok(SplitData {
            class_names: ds.class_names.clone(),
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Stratified `ceil(fraction·n_c)` subset of labeled images.
pub fn subset_images(data: &LabeledImages, fraction: f64, seed: u64) -> Result<LabeledImages> {
    let items: Vec<crate::data::Item> = data
        .labels
        .iter()
        .enumerate()
        .map(|(i, &c)| crate::data::Item {
            path: PathBuf::from(i.to_string()),
            class_id: c,
            group: None,
        })
        .collect();
    let keep = subset_fraction(&items, fraction, seed)?;
    let idx: Vec<usize> = keep.iter().map(|it| it.path.to_string_lossy().parse().expect("index path")).collect();
    Ok(LabeledImages {
        images: idx.iter().map(|&i| data.images[i].clone()).collect(),
        labels: idx.iter().map(|&i| data.labels[i]).collect(),
    })
}

/// Class predictions with deterministic centre-square preprocessing.
pub fn predict(model: &VitModel, images: &[Image], batch: usize) -> Result<Vec<usize>> {
    let size = model.config().image_size;
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let prepared: Vec<Image> = chunk.iter().map(|im| im.center_square(size)).collect();
        let mut g = Graph::inference();
        let logits = model.classify(&mut g, &stack_images(&prepared)?)?;
        let c = g.shape(logits)[1];
        preds.extend(g.data(logits).chunks(c).map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        }));
    }
    Ok(preds)
}

pub fn evaluate(model: &VitModel, data: &LabeledImages, classes: usize, batch: usize) -> Result<(MetricsReport, crate::eval::ConfusionMatrix)> {
    let preds = predict(model, &data.images, batch)?;
    let cm = confusion_matrix(&preds, &data.labels, classes)?;
    Ok((metrics(&cm)?, cm))
}

/// Per-epoch record of fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    /// Metrics of the selected model on its training data, computed by the
    /// same code path as [`cmd_eval`].
    pub train_report: MetricsReport,
    pub best_checkpoint: PathBuf,
    pub model: VitModel,
}

fn finetune_curve_csv(history: &[FinetuneEpoch]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_accuracy,val_macro_f1\n");
    for h in history {
        let _ = writeln!(s, "{},{},{},{},{}", h.epoch, h.lr, h.train_loss, h.val_accuracy, h.val_macro_f1);
    }
    s
}

/// Parameter names that belong to the MAE decoder.
pub fn is_decoder_tensor(name: &str) -> bool {
    name.starts_with("decoder.")
}

/// Fine-tunes a classifier on the splits of `cfg.manifest`. With `cfg.init`
/// the encoder starts from a pre-training checkpoint whose decoder tensors
/// are discarded.
pub fn cmd_finetune(cfg: &ExperimentConfig, out: &Path) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let manifest = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("fine-tuning needs `manifest`".into()))?;
    let data = SplitData::from_manifest(manifest)?;
    finetune_on(cfg, &data, out)
}

/// Builds the classifier and, if `cfg.init` is set, loads its encoder.
pub fn init_classifier(cfg: &ExperimentConfig, classes: usize) -> Result<VitModel> {
    let mut model = VitModel::new(&cfg.vit(classes)?, seed_path(cfg.seed, &[S_INIT]))?;
    if let Some(path) = &cfg.init {
        let ck = Checkpoint::load(path)?;
        let missing: Vec<&str> = model
            .params
            .iter()
            .map(|(_, n, _)| n)
            .filter(|n| n.starts_with("encoder.") && ck.find(n).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Load(format!("checkpoint lacks encoder tensors: {}", missing.join(", "))));
        }
        let loaded = ck.restore_into(&mut model.params, false, |n| is_decoder_tensor(n) || n.starts_with("head."))?;
        info!("initialized {} encoder tensors from {}", loaded.len(), path.display());
    }
    Ok(model)
}

/// [`cmd_finetune`] on data already in memory.
pub fn finetune_on(cfg: &ExperimentConfig, data: &SplitData, out: &Path) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let classes = data.num_classes();
    let train = subset_images(&data.train, cfg.label_fraction, seed_path(cfg.seed, &[S_SUBSET]))?;
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let mut model = init_classifier(cfg, classes)?;
    let decayed = layerwise_lr_groups(&model, cfg.layer_decay)?;
    let mut frozen = decayed.clone();
    frozen.set_mult_where(&model.params, 0.0, |n| !n.starts_with("head."));
    let mut opt = AdamW::new(&model.params, cfg.finetune_optimizer());
    let batch = cfg.batch().min(train.len());
    let steps = train.len().div_ceil(batch);
    let schedule = ScheduleSpec {
        base_lr: cfg.lr,
        warmup_epochs: cfg.warmup,
        total_epochs: cfg.epochs,
        steps_per_epoch: steps,
        min_lr: cfg.min_lr,
    };
    schedule.validate()?;
    let policy = AugPolicy {
        mode: cfg.finetune_aug,
        mix: cfg.mix,
        cutmix_alpha: cfg.mix_alpha,
        mixup_alpha: cfg.mix_alpha,
        ..AugPolicy::downstream()
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_text = cfg.to_text();
    let every = checkpoint_interval(cfg.epochs, cfg.checkpoint_every);
    let best_path = out.join("best.ckpt");
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, VitModel)> = None;
    for epoch in 1..=cfg.epochs {
        let e = epoch as u64;
        let groups = if epoch <= cfg.freeze_epochs { &frozen } else { &decayed };
        let order = shuffled(train.len(), seed_path(cfg.seed, &[S_ORDER, e]));
        let (mut total, mut lr) = (0.0, 0.0);
        for (step, idx) in order.chunks(batch).enumerate() {
            let imgs = idx
                .iter()
                .map(|&i| policy.apply(&train.images[i], cfg.image_size, seed_path(cfg.seed, &[S_AUG, e, i as u64])))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mixed = mix_batch(
                &policy,
                &stack_images(&imgs)?,
                &one_hot(&labels, classes)?,
                seed_path(cfg.seed, &[S_MIX, e, step as u64]),
            )?;
            lr = cosine_warmup_lr(&schedule, (epoch - 1) * steps + step);
            let mut g = Graph::new();
            let logits = model.classify(&mut g, &mixed.images)?;
            let loss = g.cross_entropy(logits, &mixed.labels)?;
            total += g.scalar_value(loss)? * idx.len() as f64;
            let grads = g.backward(loss)?;
            model.params.zero_grad();
            grads.accumulate_into(&mut model.params);
            opt.step(&mut model.params, groups, lr)?;
        }
        let (val_accuracy, val_macro_f1) = if data.val.is_empty() {
            (0.0, 0.0)
        } else {
            let (report, _) = evaluate(&model, &data.val, classes, cfg.eval_batch)?;
            (report.accuracy, report.f1)
        };
        let train_loss = total / train.len() as f64;
        info!("finetune epoch {epoch}/{}: loss {train_loss:.5} val f1 {val_macro_f1:.4}", cfg.epochs);
        history.push(FinetuneEpoch {
            epoch,
            lr,
            train_loss,
            val_accuracy,
            val_macro_f1,
        });
        // strict improvement keeps the earliest epoch on ties
        let improved = best.as_ref().is_none_or(|(_, f1, _)| val_macro_f1 > *f1);
        if improved {
            Checkpoint::from_store(&model.params, config_text.clone(), e, cfg.seed, None).save(&best_path)?;
            best = Some((epoch, val_macro_f1, model.clone()));
        }
        if epoch % every == 0 || epoch == cfg.epochs {
            Checkpoint::from_store(&model.params, config_text.clone(), e, cfg.seed, Some(&opt.state))
                .save(out.join(format!("finetune_e{epoch:04}.ckpt")))?;
        }
    }
    let (best_epoch, best_val_f1, best_model) = best.expect("at least one epoch");
    write_text(&out.join("finetune_metrics.csv"), &finetune_curve_csv(&history))?;
    let (train_report, _) = evaluate(&best_model, &train, classes, cfg.eval_batch)?;
    write_text(&out.join("train_metrics.csv"), &train_report.to_csv(&data.class_names))?;
    Ok(FinetuneOutcome {
        history,
        best_epoch,
        best_val_f1,
        train_report,
        best_checkpoint: best_path,
        model: best_model,
    })
}

/// Rebuilds a model from a checkpoint. Classifier checkpoints get their
/// head back; pre-training checkpoints load as a headless encoder.
pub fn load_model(path: &Path) -> Result<(ExperimentConfig, VitModel)> {
    let ck = Checkpoint::load(path)?;
    let cfg = ExperimentConfig::parse_text(&ck.config)?;
    let classes = match ck.find("head.weight") {
        Some(r) => *r.tensor.shape().last().unwrap_or(&0),
        None => 0,
    };
    let mut model = VitModel::new(&cfg.vit(classes)?, 0)?;
    ck.restore_into(&mut model.params, true, is_decoder_tensor)?;
    Ok((cfg, model))
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub below_threshold: Vec<(usize, f64)>,
    pub absent: Vec<usize>,
}

/// Evaluates a classifier checkpoint on one split of a manifest and writes
/// `eval_<split>_metrics.csv`, `eval_<split>_confusion.{csv,pgm}` and
/// `eval_<split>_low_accuracy.csv`.
pub fn cmd_eval(checkpoint: &Path, manifest: &Path, split: Split, out: &Path, batch: usize) -> Result<EvalOutcome> {
    let (cfg, model) = load_model(checkpoint)?;
    if !model.has_head() {
        return Err(Error::Usage(format!("{} has no classification head", checkpoint.display())));
    }
    let data = SplitData::from_manifest(manifest)?;
    let classes = model.config().num_classes;
    if classes != data.num_classes() {
        return Err(Error::Input(format!(
            "checkpoint predicts {classes} classes, manifest has {}",
            data.num_classes()
        )));
    }
    let subset = data.get(split);
    if subset.is_empty() {
        return Err(Error::Input(format!("split `{split}` is empty")));
    }
    let subset = if split == Split::Train {
        // training metrics are reported on the subset the model was fitted on
        subset_images(subset, cfg.label_fraction, seed_path(cfg.seed, &[S_SUBSET]))?
    } else {
        subset.clone()
    };
    let (report, cm) = evaluate(&model, &subset, classes, batch)?;
    let below = report.below(LOW_ACCURACY);
    let absent = report.absent();
    for &c in &absent {
        warn!("class `{}` has no samples in split `{split}`", data.class_names[c]);
    }
    write_text(&out.join(format!("eval_{split}_metrics.csv")), &report.to_csv(&data.class_names))?;
    export_confusion(&cm, &data.class_names, out, &format!("eval_{split}_confusion"))?;
    let mut low = String::from("class,accuracy,status\n");
    for &(c, acc) in &below {
        let _ = writeln!(low, "{},{acc:.6},below", data.class_names[c]);
    }
    for &c in &absent {
        let _ = writeln!(low, "{},,absent", data.class_names[c]);
    }
    write_text(&out.join(format!("eval_{split}_low_accuracy.csv")), &low)?;
    Ok(EvalOutcome {
        report,
        below_threshold: below,
        absent,
    })
}

/// Ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    MaskRatio,
    /// Augmentation of the pre-text phase.
    AugStrength,
    /// Augmentation of the fine-tuning phase.
    FinetuneAug,
    LabelFraction,
    PretrainEpochs,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mask_ratio" => SweepAxis::MaskRatio,
            "aug_strength" => SweepAxis::AugStrength,
            "finetune_aug" => SweepAxis::FinetuneAug,
            "label_fraction" => SweepAxis::LabelFraction,
            "pretrain_epochs" => SweepAxis::PretrainEpochs,
            other => {
                return Err(Error::Config(format!(
                    "unknown sweep axis `{other}` (mask_ratio, aug_strength, finetune_aug, label_fraction, pretrain_epochs)"
                )))
            }
        })
    }
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::MaskRatio => "mask_ratio",
            SweepAxis::AugStrength => "pretrain_aug",
            SweepAxis::FinetuneAug => "finetune_aug",
            SweepAxis::LabelFraction => "label_fraction",
            SweepAxis::PretrainEpochs => "pretrain_epochs",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::MaskRatio => "mask_ratio",
            SweepAxis::AugStrength => "aug_strength",
            SweepAxis::FinetuneAug => "finetune_aug",
            SweepAxis::LabelFraction => "label_fraction",
            SweepAxis::PretrainEpochs => "pretrain_epochs",
        }
    }

    /// Accepts `weak`/`strong` as aliases for the two augmentation modes.
    fn normalize(self, value: &str) -> String {
        match (self, value) {
            (SweepAxis::AugStrength | SweepAxis::FinetuneAug, "weak") => AugMode::CropOnly.to_string(),
            (SweepAxis::AugStrength | SweepAxis::FinetuneAug, "strong") => AugMode::SimclrStrong.to_string(),
            _ => value.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub macro_f1: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// Number of pre-training runs actually executed.
    pub pretrain_runs: usize,
    pub csv: PathBuf,
}

/// Fields that determine a pre-training run; fine-tuning settings are
/// blanked so runs differing only downstream share a checkpoint.
fn pretext_key(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    let d = ExperimentConfig::default();
    c.epochs = d.epochs;
    c.warmup = d.warmup;
    c.lr = d.lr;
    c.wd = d.wd;
    c.layer_decay = d.layer_decay;
    c.finetune_aug = d.finetune_aug;
    c.mix = d.mix;
    c.mix_alpha = d.mix_alpha;
    c.label_fraction = d.label_fraction;
    c.freeze_epochs = d.freeze_epochs;
    c.manifest = None;
    c.init = None;
    c.to_text()
}

/// Runs pretext → fine-tune → test evaluation for every value and seed.
/// Unlabeled data comes from `cfg.data_dir` when set, otherwise from the
/// training split. Failed runs are recorded and the sweep continues.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String], seeds: &[u64], out: &Path) -> Result<SweepOutcome> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one value and one seed".into()));
    }
    let manifest = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("a sweep needs `manifest`".into()))?;
    let data = SplitData::from_manifest(manifest)?;
    let unlabeled = match &cfg.data_dir {
        Some(dir) => list_images(dir)?.iter().map(load_image).collect::<Result<Vec<_>>>()?,
        None => data.train.images.clone(),
    };
    sweep_on(cfg, axis, values, seeds, &data, &unlabeled, out)
}

pub fn sweep_on(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    data: &SplitData,
    unlabeled: &[Image],
    out: &Path,
) -> Result<SweepOutcome> {
    let mut cache: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut rows = Vec::new();
    for value in values {
        let value = axis.normalize(value);
        for &seed in seeds {
            let run = || -> Result<f64> {
                let mut c = cfg.clone();
                c.seed = seed;
                c.set(axis.key(), &value)?;
                c.validate()?;
                let key = pretext_key(&c);
                let ck = match cache.get(&key) {
                    Some(path) => path.clone(),
                    None => {
                        let dir = out.join(format!("pretrain_{:03}", cache.len()));
                        let res = pretrain_on_images(&c, unlabeled, &dir, None)?;
                        cache.insert(key, res.checkpoint.clone());
                        res.checkpoint
                    }
                };
                c.init = Some(ck);
                let dir = out.join(format!("{}_{}_seed{seed}", axis.name(), value));
                let ft = finetune_on(&c, data, &dir)?;
                let (report, _) = evaluate(&ft.model, &data.test, data.num_classes(), c.eval_batch)?;
                Ok(report.f1)
            };
            let mut run = run;
            let row = match run() {
                Ok(f1) => SweepRow {
                    value: value.clone(),
                    seed,
                    macro_f1: Some(f1),
                    status: "ok".into(),
                },
                Err(e) => {
                    warn!("sweep run {value}/{seed} failed: {e}");
                    SweepRow {
                        value: value.clone(),
                        seed,
                        macro_f1: None,
                        status: format!("error: {}", e.to_string().replace([',', '\n'], ";")),
                    }
                }
            };
            rows.push(row);
        }
    }
    let mut csv = String::from("axis,value,seed,macro_f1,status\n");
    for r in &rows {
        let f1 = r.macro_f1.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(csv, "{},{},{},{f1},{}", axis.name(), r.value, r.seed, r.status);
    }
    let path = out.join("sweep.csv");
    write_text(&path, &csv)?;
    Ok(SweepOutcome {
        rows,
        pretrain_runs: cache.len(),
        csv: path,
    })
}

/// Up to `limit` images drawn without replacement with a fixed seed, in
/// sorted path order.
pub fn sample_images(paths: &[PathBuf], limit: usize, seed: u64) -> Vec<PathBuf> {
    let mut idx = shuffled(paths.len(), seed_path(seed, &[S_SAMPLE]));
    idx.truncate(limit);
    idx.sort_unstable();
    idx.into_iter().map(|i| paths[i].clone()).collect()
}

fn analysis_paths(source: &Path) -> Result<Vec<PathBuf>> {
    if source.is_dir() {
        list_images(source)
    } else {
        let (ds, split) = read_manifest(source)?;
        let test = split.indices(Split::Test);
        let pick = if test.is_empty() { (0..ds.items.len()).collect() } else { test };
        Ok(pick.into_iter().map(|i| ds.items[i].path.clone()).collect())
    }
}

/// Linear-CKA heatmap between the blocks of two checkpoints over up to
/// `limit` images from a directory or a manifest's test split. Writes
/// `cka.csv` whose first line records how many images were used.
pub fn cmd_cka(a: &Path, b: &Path, source: &Path, limit: usize, seed: u64, out: &Path) -> Result<Vec<Vec<f64>>> {
    let (_, ma) = load_model(a)?;
    let (_, mb) = load_model(b)?;
    if ma.config().image_size != mb.config().image_size {
        return Err(Error::Input("checkpoints use different image sizes".into()));
    }
    let all = analysis_paths(source)?;
    let paths = sample_images(&all, limit, seed);
    if paths.len() < limit {
        warn!("only {} images available, fewer than the requested {limit}", paths.len());
    }
    let size = ma.config().image_size;
    let images = paths
        .iter()
        .map(|p| Ok(load_image(p)?.center_square(size)))
        .collect::<Result<Vec<_>>>()?;
    let matrix = cka_heatmap(&ma, &mb, &images, 32)?;
    let note = format!("images={} requested={limit}", images.len());
    write_text(&out.join("cka.csv"), &cka_csv(&matrix, &note))?;
    Ok(matrix)
}

/// Per-head attention maps of the last block for up to `limit` images.
/// Writes PGM maps, overlays and `attention.csv` (image, head, row, col,
/// value). Returns the maps per image.
pub fn cmd_attn(checkpoint: &Path, source: &Path, limit: usize, seed: u64, out: &Path) -> Result<Vec<Vec<Vec<f64>>>> {
    let (_, model) = load_model(checkpoint)?;
    let all = analysis_paths(source)?;
    let paths = sample_images(&all, limit, seed);
    let size = model.config().image_size;
    let grid = model.config().grid();
    let mut csv = format!("# images={} requested={limit}\nimage,head,row,col,value\n", paths.len());
    let mut result = Vec::new();
    for (k, p) in paths.iter().enumerate() {
        let img = load_image(p)?.center_square(size);
        let maps = attention_maps(&model, &img)?;
        let stem = format!("img{k:03}_{}", p.file_stem().unwrap_or_default().to_string_lossy());
        export_attention(&maps, &img, grid, out, &stem)?;
        for (h, map) in maps.iter().enumerate() {
            for (i, v) in map.iter().enumerate() {
                let _ = writeln!(csv, "{stem},{h},{},{},{v}", i / grid, i % grid);
            }
        }
        result.push(maps);
    }
    write_text(&out.join("attention.csv"), &csv)?;
    Ok(result)
}
