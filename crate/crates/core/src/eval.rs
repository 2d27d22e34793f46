//! Classification metrics, confusion matrices, linear CKA and attention maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{save_pgm, save_ppm, stack_images, Image};
use crate::tensor::{Graph, Tensor};
use crate::vit::VitModel;

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }
}

pub fn confusion_matrix(preds: &[usize], truths: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} ground-truth labels",
            preds.len(),
            truths.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in preds.iter().zip(truths) {
        if p >= classes || t >= classes {
            return Err(Error::Input(format!("class id ({t}, {p}) out of range 0..{classes}")));
        }
        cm.counts[t * classes + p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Whether the averages are support-weighted instead of macro.
    pub weighted: bool,
}

/// Per-class accuracy threshold used when flagging weak classes.
pub const LOW_ACCURACY: f64 = 0.70;

impl MetricsReport {
    /// Classes present in the data whose accuracy (recall) is below
    /// `threshold`, as `(class, accuracy)`.
    pub fn below(&self, threshold: f64) -> Vec<(usize, f64)> {
        self.per_class
            .iter()
            .enumerate()
            .filter(|(_, m)| m.support > 0 && m.recall < threshold)
            .map(|(c, m)| (c, m.recall))
            .collect()
    }

    /// Classes with no samples in the evaluated data.
    pub fn absent(&self) -> Vec<usize> {
        (0..self.per_class.len()).filter(|&c| self.per_class[c].support == 0).collect()
    }

    /// CSV with columns `class,precision,recall,f1,support`.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for (c, m) in self.per_class.iter().enumerate() {
            let name = class_names.get(c).map_or_else(|| c.to_string(), Clone::clone);
            let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{}", m.precision, m.recall, m.f1, m.support);
        }
        let label = if self.weighted { "weighted" } else { "macro" };
        let total: u64 = self.per_class.iter().map(|m| m.support).sum();
        let _ = writeln!(out, "{label},{:.6},{:.6},{:.6},{total}", self.precision, self.recall, self.f1);
        let _ = writeln!(out, "accuracy,,,{:.6},{total}", self.accuracy);
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// One-vs-rest precision, recall and F1 per class with unweighted means.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    report(cm, false)
}

/// Same as [`metrics`] but averaging with class support as weights.
pub fn metrics_weighted(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    report(cm, true)
}

fn report(cm: &ConfusionMatrix, weighted: bool) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Input("confusion matrix is empty".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..cm.classes)
        .map(|c| {
            let tp = cm.get(c, c);
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            ClassMetrics {
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: cm.row_sum(c),
            }
        })
        .collect();
    let avg = |f: fn(&ClassMetrics) -> f64| -> f64 {
        if weighted {
            per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
        } else {
            per_class.iter().map(f).sum::<f64>() / cm.classes as f64
        }
    };
    Ok(MetricsReport {
        precision: avg(|m| m.precision),
        recall: avg(|m| m.recall),
        f1: avg(|m| m.f1),
        accuracy: cm.trace() as f64 / total as f64,
        per_class,
        weighted,
    })
}

/// CSV of raw counts: a header of predicted-class names, then one row per
/// true class.
pub fn confusion_csv(cm: &ConfusionMatrix, class_names: &[String]) -> String {
    let name = |c: usize| class_names.get(c).map_or_else(|| c.to_string(), Clone::clone);
    let mut out = String::from("true\\pred");
    (0..cm.classes).for_each(|c| {
        let _ = write!(out, ",{}", name(c));
    });
    out.push('\n');
    for t in 0..cm.classes {
        out.push_str(&name(t));
        (0..cm.classes).for_each(|p| {
            let _ = write!(out, ",{}", cm.get(t, p));
        });
        out.push('\n');
    }
    out
}

pub fn parse_confusion_csv(text: &str) -> Result<ConfusionMatrix> {
    let rows = text.lines().skip(1).filter(|l| !l.is_empty());
    let mut counts = Vec::new();
    let mut classes = 0;
    for line in rows {
        let fields: Vec<&str> = line.split(',').skip(1).collect();
        classes = fields.len();
        for f in fields {
            counts.push(f.trim().parse::<u64>().map_err(|_| Error::Input(format!("bad count `{f}`")))?);
        }
    }
    ConfusionMatrix::from_counts(classes, counts)
}

/// `log1p(count)` min-max scaled to [0, 1]. A matrix with a single distinct
/// count maps to 0 when that count is zero and to 1 otherwise.
pub fn log_scaled(cm: &ConfusionMatrix) -> Vec<f64> {
    let logs: Vec<f64> = cm.counts.iter().map(|&c| (c as f64).ln_1p()).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(0.0, f64::max);
    if hi == lo {
        return vec![if hi == 0.0 { 0.0 } else { 1.0 }; logs.len()];
    }
    logs.into_iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Writes `<stem>.csv` with raw counts and `<stem>.pgm` with the log-scaled
/// grayscale image.
pub fn export_confusion(cm: &ConfusionMatrix, class_names: &[String], dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, confusion_csv(cm, class_names)).map_err(|e| Error::io(&csv, e))?;
    save_pgm(&log_scaled(cm), cm.classes, cm.classes, dir.join(format!("{stem}.pgm")))
}

fn center_columns(x: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (n, p) = match x.shape() {
        &[n, p] => (n, p),
        s => return Err(Error::Shape(format!("CKA features must be n×p, got {s:?}"))),
    };
    if n < 3 {
        return Err(Error::Input(format!("CKA needs at least 3 samples, got {n}")));
    }
    let mut data = x.data().to_vec();
    for j in 0..p {
        let mean = (0..n).map(|i| data[i * p + j]).sum::<f64>() / n as f64;
        (0..n).for_each(|i| data[i * p + j] -= mean);
    }
    Ok((n, p, data))
}

/// `AᵀB` for row-major `n×p` and `n×q` matrices.
fn cross(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    crate::tensor::kernels::gemm_tn(a, b, &mut out, p, n, q);
    out
}

fn frob_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA, `‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)` on column-centred features.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, p, xc) = center_columns(x)?;
    let (ny, q, yc) = center_columns(y)?;
    if n != ny {
        return Err(Error::Shape(format!("CKA inputs have {n} and {ny} samples")));
    }
    let xx = frob_sq(&cross(&xc, &xc, n, p, p)).sqrt();
    let yy = frob_sq(&cross(&yc, &yc, n, q, q)).sqrt();
    let scale = |m: &[f64]| m.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if xx <= 1e-12 * scale(x.data()).powi(2).max(f64::MIN_POSITIVE) || yy <= 1e-12 * scale(y.data()).powi(2).max(f64::MIN_POSITIVE) {
        return Err(Error::Numeric("CKA is undefined for features without variance".into()));
    }
    let yx = frob_sq(&cross(&yc, &xc, n, q, p));
    Ok((yx / (xx * yy)).clamp(0.0, 1.0))
}

/// Per-block features for CKA: every block's output averaged over tokens,
/// one `n×D` tensor per block.
pub fn block_features(model: &VitModel, images: &[Image], batch: usize) -> Result<Vec<Tensor>> {
    let blocks = model.config().blocks;
    let d = model.config().embed_dim;
    let mut per_block: Vec<Vec<f64>> = vec![Vec::with_capacity(images.len() * d); blocks];
    for chunk in images.chunks(batch.max(1)) {
        let mut g = Graph::inference();
        let feats = model.forward_features(&mut g, &stack_images(chunk)?, true)?;
        for (b, v) in feats.per_block.into_iter().enumerate() {
            let pooled = g.mean_axis(v, 1)?;
            per_block[b].extend_from_slice(g.data(pooled));
        }
    }
    per_block
        .into_iter()
        .map(|data| Tensor::new(&[images.len(), d], data))
        .collect()
}

/// `cka[i][j]` between block `i` of `a` and block `j` of `b`.
pub fn cka_matrix(a: &[Tensor], b: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    a.iter().map(|x| b.iter().map(|y| linear_cka(x, y)).collect()).collect()
}

pub fn cka_heatmap(model_a: &VitModel, model_b: &VitModel, images: &[Image], batch: usize) -> Result<Vec<Vec<f64>>> {
    let fa = block_features(model_a, images, batch)?;
    let fb = block_features(model_b, images, batch)?;
    cka_matrix(&fa, &fb)
}

/// CSV with columns `block_i,block_j,value`, preceded by a comment line.
pub fn cka_csv(matrix: &[Vec<f64>], note: &str) -> String {
    let mut out = format!("# {note}\nblock_i,block_j,value\n");
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(out, "{i},{j},{v:.10}");
        }
    }
    out
}

/// Min-max normalization to [0, 1]; a constant input maps to 0.5.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Attention received by each patch in the last block, per head, averaged
/// over queries and min-max normalized. Returns `heads` maps of
/// `grid×grid` values in row-major order.
pub fn attention_maps(model: &VitModel, image: &Image) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::inference();
    let feats = model.forward_features(&mut g, &stack_images(std::slice::from_ref(image))?, false)?;
    let attn = feats
        .last_attention
        .ok_or_else(|| Error::Usage("model has no attention blocks".into()))?;
    let shape = g.shape(attn).to_vec();
    let (heads, n) = (shape[1], shape[2]);
    let data = g.data(attn);
    Ok((0..heads)
        .map(|h| {
            let m = &data[h * n * n..(h + 1) * n * n];
            let received: Vec<f64> = (0..n).map(|k| (0..n).map(|q| m[q * n + k]).sum::<f64>() / n as f64).collect();
            min_max(&received)
        })
        .collect())
}

/// Writes one PGM per head and an overlay PPM that dims the image where the
/// head pays little attention.
pub fn export_attention(maps: &[Vec<f64>], image: &Image, grid: usize, dir: &Path, stem: &str) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    for (k, map) in maps.iter().enumerate() {
        save_pgm(map, grid, grid, dir.join(format!("{stem}_head{k:02}.pgm")))?;
        let overlay = Image::from_fn(h, w, |y, x| {
            let a = map[(y * grid / h) * grid + x * grid / w];
            image.pixel(y, x).map(|v| v * (0.25 + 0.75 * a))
        });
        save_ppm(&overlay, dir.join(format!("{stem}_head{k:02}_overlay.ppm")))?;
    }
    Ok(())
}
