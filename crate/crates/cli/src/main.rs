//! `maevit`: pre-train, fine-tune, evaluate and analyse ViT classifiers.
//!
//! Exit status is 0 on success, 1 for data, configuration or numeric
//! failures and 2 for invalid invocations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use maevit_core::config::ExperimentConfig;
use maevit_core::data::{slice_tree, split_capped, synth_dataset, write_manifest, LabeledDataset, SliceSpec, Split};
use maevit_core::experiment::{cmd_attn, cmd_cka, cmd_eval, cmd_finetune, cmd_pretrain, cmd_sweep, SweepAxis};

#[derive(Parser)]
#[command(name = "maevit", version, about = "Masked-autoencoder pre-training and ViT fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// MAE pre-training on the images under `data_dir`.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from a pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised fine-tuning on the splits of `manifest`.
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Metrics, confusion matrix and low-accuracy report for one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Pre-train, fine-tune and test over the values of one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// mask_ratio, aug_strength, finetune_aug, label_fraction or pretrain_epochs.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Number of seeds, counting up from the configured seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Linear-CKA heatmap between the blocks of two checkpoints.
    Cka {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Image directory or manifest (its test split is used).
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 300)]
        limit: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Last-block attention maps per head.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 8)]
        limit: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Capped stratified split of a class-per-directory dataset.
    Split {
        #[arg(long)]
        data: PathBuf,
        /// Manifest to write.
        #[arg(long)]
        manifest: PathBuf,
        /// Training size cap as a multiple of the smallest class.
        #[arg(long, default_value_t = 4)]
        cap: usize,
        /// Keep slices of the same source image (`<stem>_sNN`) in one split.
        #[arg(long)]
        groups: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cut large images into square slices with bounded overlap.
    Slice {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long, default_value_t = 224)]
        side: usize,
        #[arg(long, default_value_t = 0.10)]
        overlap: f64,
    },
    /// Write a synthetic class-per-directory dataset.
    Synth {
        #[arg(long)]
        dst: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut cfg = ExperimentConfig::parse_text(&text)?;
            resolve_paths(&mut cfg, path.parent().unwrap_or(Path::new("")));
            cfg
        }
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Relative paths in a config file are taken relative to that file.
fn resolve_paths(cfg: &mut ExperimentConfig, base: &Path) {
    for p in [&mut cfg.data_dir, &mut cfg.manifest, &mut cfg.init].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

/// Bad command-line values are invocation errors, not data errors.
fn as_usage(err: maevit_core::Error) -> maevit_core::Error {
    maevit_core::Error::Usage(err.to_string())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { common, resume } => {
            let cfg = load_config(&common)?;
            let res = cmd_pretrain(&cfg, &common.out, resume.as_deref())?;
            if let Some(last) = res.history.last() {
                println!("epoch {} loss {:.6}", last.epoch, last.loss);
            }
            println!("checkpoint {}", res.checkpoint.display());
        }
        Command::Finetune { common } => {
            let cfg = load_config(&common)?;
            let res = cmd_finetune(&cfg, &common.out)?;
            println!(
                "best epoch {} val macro-F1 {:.4} train accuracy {:.4}",
                res.best_epoch, res.best_val_f1, res.train_report.accuracy
            );
            println!("checkpoint {}", res.best_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            batch,
            out,
        } => {
            let split: Split = split.parse().map_err(as_usage)?;
            let res = cmd_eval(&checkpoint, &manifest, split, &out, batch)?;
            let r = &res.report;
            println!(
                "accuracy {:.4} macro precision {:.4} recall {:.4} f1 {:.4}",
                r.accuracy, r.precision, r.recall, r.f1
            );
            for (c, acc) in &res.below_threshold {
                println!("low accuracy: class {c} {acc:.4}");
            }
            for c in &res.absent {
                println!("absent: class {c}");
            }
        }
        Command::Sweep {
            common,
            axis,
            values,
            seeds,
        } => {
            let cfg = load_config(&common)?;
            let axis: SweepAxis = axis.parse().map_err(as_usage)?;
            let seeds: Vec<u64> = (0..seeds.max(1)).map(|k| cfg.seed + k).collect();
            let res = cmd_sweep(&cfg, axis, &values, &seeds, &common.out)?;
            for row in &res.rows {
                let f1 = row.macro_f1.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!("{}={} seed {} macro-F1 {f1} {}", axis.name(), row.value, row.seed, row.status);
            }
            println!("results {}", res.csv.display());
        }
        Command::Cka {
            a,
            b,
            images,
            limit,
            seed,
            out,
        } => {
            let m = cmd_cka(&a, &b, &images, limit, seed, &out)?;
            println!("{}x{} CKA matrix written to {}", m.len(), m.first().map_or(0, Vec::len), out.display());
        }
        Command::Attn {
            checkpoint,
            images,
            limit,
            seed,
            out,
        } => {
            let maps = cmd_attn(&checkpoint, &images, limit, seed, &out)?;
            println!("attention maps for {} images written to {}", maps.len(), out.display());
        }
        Command::Split {
            data,
            manifest,
            cap,
            groups,
            seed,
        } => {
            let mut ds = LabeledDataset::from_dir(&data)?;
            if groups {
                ds.group_by_stem_prefix('_');
            }
            let split = split_capped(&ds, cap, groups, seed)?;
            write_manifest(&manifest, &ds, &split)?;
            for (name, [tr, va, te]) in ds.class_names.iter().zip(split.class_counts(&ds.items, ds.num_classes())) {
                println!("{name}: train {tr} val {va} test {te}");
            }
        }
        Command::Slice { src, dst, side, overlap } => {
            let spec = SliceSpec::new(side, overlap)?;
            let (count, warnings) = slice_tree(&src, &dst, &spec)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            println!("{count} slices written to {}", dst.display());
        }
        Command::Synth {
            dst,
            classes,
            per_class,
            size,
            seed,
        } => {
            let ds = synth_dataset(&dst, classes, per_class, size, seed)?;
            println!("{} images in {} classes written to {}", ds.items.len(), ds.num_classes(), dst.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err.downcast_ref::<maevit_core::Error>().is_some_and(maevit_core::Error::is_usage);
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
