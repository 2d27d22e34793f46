//! Seeded image and label augmentations: random resized crops for the
//! pre-text phase, SimCLR-style photometric transforms, and MixUp/CutMix for
//! fine-tuning. Every transform is a pure function of its inputs and seed.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{derive_seed, rng_from, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugMode {
    CropOnly,
    SimclrStrong,
}

impl FromStr for AugMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crop_only" => Ok(AugMode::CropOnly),
            "simclr_strong" => Ok(AugMode::SimclrStrong),
            other => Err(Error::Config(format!(
                "unknown augmentation `{other}` (expected crop_only or simclr_strong)"
            ))),
        }
    }
}

impl fmt::Display for AugMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugMode::CropOnly => "crop_only",
            AugMode::SimclrStrong => "simclr_strong",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    /// Range of the crop area as a fraction of the source area.
    pub scale: (f64, f64),
    /// Range of the crop aspect ratio (width / height).
    pub ratio: (f64, f64),
}

impl CropParams {
    pub fn with_scale(lo: f64, hi: f64) -> Self {
        CropParams {
            scale: (lo, hi),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterParams {
    pub fn simclr() -> Self {
        JitterParams {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }

    pub fn none() -> Self {
        JitterParams {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }
}

/// Full augmentation setup for one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct AugPolicy {
    pub mode: AugMode,
    pub crop: CropParams,
    pub jitter: JitterParams,
    pub jitter_p: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    /// Batch-level CutMix/MixUp, one of the two per batch.
    pub mix: bool,
    pub cutmix_alpha: f64,
    pub mixup_alpha: f64,
}

impl AugPolicy {
    /// Random resized crops only.
    pub fn pretext() -> Self {
        AugPolicy {
            mode: AugMode::CropOnly,
            crop: CropParams::with_scale(0.2, 1.0),
            mix: false,
            ..Self::downstream()
        }
    }

    /// SimCLR photometric transforms plus CutMix/MixUp.
    pub fn downstream() -> Self {
        AugPolicy {
            mode: AugMode::SimclrStrong,
            crop: CropParams::with_scale(0.08, 1.0),
            jitter: JitterParams::simclr(),
            jitter_p: 0.8,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            mix: true,
            cutmix_alpha: 0.8,
            mixup_alpha: 0.8,
        }
    }

    /// Per-image transform to an `out_size` square.
    pub fn apply(&self, img: &Image, out_size: usize, seed: u64) -> Result<Image> {
        let mut out = random_resized_crop(img, out_size, self.crop, derive_seed(seed, 0))?;
        if self.mode == AugMode::CropOnly {
            return Ok(out);
        }
        let mut rng = rng_from(derive_seed(seed, 1));
        if rng.gen::<f64>() < self.jitter_p {
            out = color_jitter(&out, self.jitter, derive_seed(seed, 2));
        }
        if rng.gen::<f64>() < self.grayscale_p {
            out = to_grayscale(&out);
        }
        if rng.gen::<f64>() < self.blur_p {
            out = gaussian_blur(&out, rng.gen_range(self.blur_sigma.0..=self.blur_sigma.1))?;
        }
        Ok(out)
    }
}

/// Integer crop window in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Samples a crop window the usual way: up to ten draws of area and log
/// aspect ratio, falling back to the largest centered window within the
/// aspect range.
pub fn sample_crop_rect(height: usize, width: usize, params: CropParams, rng: &mut Rng) -> CropRect {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (params.ratio.0.ln(), params.ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, params.scale.0, params.scale.1);
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if (1..=width).contains(&w) && (1..=height).contains(&h) {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return CropRect { top, left, height: h, width: w };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < params.ratio.0 {
        ((width as f64 / params.ratio.0).round() as usize, width)
    } else if in_ratio > params.ratio.1 {
        (height, (height as f64 * params.ratio.1).round() as usize)
    } else {
        (height, width)
    };
    CropRect {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Random crop of random area and aspect, bilinearly resized to a square.
pub fn random_resized_crop(img: &Image, out_size: usize, params: CropParams, seed: u64) -> Result<Image> {
    if img.height() < 8 || img.width() < 8 {
        return Err(Error::Input(format!(
            "image {}×{} is smaller than the 8×8 minimum for cropping",
            img.height(),
            img.width()
        )));
    }
    let (lo, hi) = params.scale;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!("crop scale range [{lo}, {hi}] must lie in (0, 1]")));
    }
    let r = sample_crop_rect(img.height(), img.width(), params, &mut rng_from(seed));
    Ok(img.resize_region(
        r.top as f64,
        r.left as f64,
        r.height as f64,
        r.width as f64,
        out_size,
        out_size,
    ))
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn luma(p: &[f64]) -> f64 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

pub fn to_grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for p in out.data_mut().chunks_mut(3) {
        let y = luma(p).clamp(0.0, 1.0);
        p.fill(y);
    }
    out
}

/// Brightness, contrast, saturation and hue jitter with factors drawn from
/// `[1−s, 1+s]` (hue shift from `[−h, h]` turns), applied in that order.
pub fn color_jitter(img: &Image, params: JitterParams, seed: u64) -> Image {
    let mut rng = rng_from(seed);
    let mut factor = |s: f64| if s > 0.0 { rng.gen_range((1.0 - s).max(0.0)..=1.0 + s) } else { 1.0 };
    let b = factor(params.brightness);
    let c = factor(params.contrast);
    let s = factor(params.saturation);
    let hue = if params.hue > 0.0 { rng.gen_range(-params.hue..=params.hue) } else { 0.0 };

    let mut out = img.clone();
    if b != 1.0 {
        out.data_mut().iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    }
    if c != 1.0 {
        let n = (out.height() * out.width()) as f64;
        let mean = out.data().chunks(3).map(luma).sum::<f64>() / n;
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = (mean + (*v - mean) * c).clamp(0.0, 1.0));
    }
    if s != 1.0 {
        for p in out.data_mut().chunks_mut(3) {
            let y = luma(p);
            p.iter_mut().for_each(|v| *v = (y + (*v - y) * s).clamp(0.0, 1.0));
        }
    }
    if hue != 0.0 {
        for p in out.data_mut().chunks_mut(3) {
            let (h, sat, val) = rgb_to_hsv([p[0], p[1], p[2]]);
            let rgb = hsv_to_rgb((h + hue).rem_euclid(1.0), sat, val);
            p.copy_from_slice(&rgb.map(|v| v.clamp(0.0, 1.0)));
        }
    }
    out
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Normalized Gaussian kernel of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (h, w) = (img.height() as i64, img.width() as i64);
    let pass = |src: &Image, horizontal: bool| {
        Image::from_fn(h as usize, w as usize, |y, x| {
            let mut acc = [0.0; 3];
            for (k, wt) in kernel.iter().enumerate() {
                let off = k as i64 - r;
                let (sy, sx) = if horizontal {
                    (y as i64, (x as i64 + off).clamp(0, w - 1))
                } else {
                    ((y as i64 + off).clamp(0, h - 1), x as i64)
                };
                let p = src.pixel(sy as usize, sx as usize);
                (0..3).for_each(|c| acc[c] += wt * p[c]);
            }
            acc.map(|v| v.clamp(0.0, 1.0))
        })
    };
    Ok(pass(&pass(img, true), false))
}

/// Symmetric Beta(α, α) draw.
pub fn sample_beta(alpha: f64, rng: &mut Rng) -> Result<f64> {
    let dist = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("beta({alpha}, {alpha}): {e}")))?;
    Ok(dist.sample(rng))
}

/// Result of a batch mixing transform.
#[derive(Debug, Clone)]
pub struct Mixed {
    pub images: Tensor,
    pub labels: Tensor,
    /// Weight of each sample's own label.
    pub lambda: f64,
    pub partner: Vec<usize>,
    /// Set when the transform was skipped.
    pub warning: Option<String>,
}

fn check_batch(images: &Tensor, labels: &Tensor) -> Result<(usize, usize, usize)> {
    match (images.shape(), labels.shape()) {
        (&[b, h, w, 3], &[lb, _]) if b == lb => Ok((b, h, w)),
        (i, l) => Err(Error::Shape(format!("images {i:?} and labels {l:?} do not form a batch"))),
    }
}

fn skipped(images: &Tensor, labels: &Tensor, b: usize) -> Mixed {
    Mixed {
        images: images.clone(),
        labels: labels.clone(),
        lambda: 1.0,
        partner: (0..b).collect(),
        warning: Some(format!("batch of {b} cannot be mixed; left unchanged")),
    }
}

fn mix_labels(labels: &Tensor, partner: &[usize], lambda: f64) -> Result<Tensor> {
    let c = labels.shape()[1];
    let src = labels.data();
    let mut out = Vec::with_capacity(src.len());
    for (i, &j) in partner.iter().enumerate() {
        for k in 0..c {
            out.push(lambda * src[i * c + k] + (1.0 - lambda) * src[j * c + k]);
        }
    }
    Tensor::new(labels.shape(), out)
}

fn random_partner(b: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..b).collect();
    p.shuffle(rng);
    p
}

/// MixUp with a given `lambda` and partner assignment.
pub fn mixup_with(images: &Tensor, labels: &Tensor, lambda: f64, partner: &[usize]) -> Result<Mixed> {
    let (b, h, w) = check_batch(images, labels)?;
    if partner.len() != b || partner.iter().any(|&j| j >= b) {
        return Err(Error::Shape(format!("partner list {partner:?} for batch of {b}")));
    }
    let n = h * w * 3;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for (i, &j) in partner.iter().enumerate() {
        let (a, p) = (&src[i * n..(i + 1) * n], &src[j * n..(j + 1) * n]);
        out.extend(a.iter().zip(p).map(|(x, y)| lambda * x + (1.0 - lambda) * y));
    }
    Ok(Mixed {
        images: Tensor::new(images.shape(), out)?,
        labels: mix_labels(labels, partner, lambda)?,
        lambda,
        partner: partner.to_vec(),
        warning: None,
    })
}

/// MixUp: `x ← λx + (1−λ)x̃` with `λ ~ Beta(α, α)` and a random partner.
pub fn mixup(images: &Tensor, labels: &Tensor, alpha: f64, seed: u64) -> Result<Mixed> {
    let (b, ..) = check_batch(images, labels)?;
    if b < 2 {
        return Ok(skipped(images, labels, b));
    }
    let mut rng = rng_from(seed);
    let lambda = sample_beta(alpha, &mut rng)?;
    let partner = random_partner(b, &mut rng);
    mixup_with(images, labels, lambda, &partner)
}

/// CutMix with an explicit pasted box; the label weight is recomputed from
/// the box after clipping it to the image.
pub fn cutmix_with(images: &Tensor, labels: &Tensor, rect: CropRect, partner: &[usize]) -> Result<Mixed> {
    let (b, h, w) = check_batch(images, labels)?;
    if partner.len() != b || partner.iter().any(|&j| j >= b) {
        return Err(Error::Shape(format!("partner list {partner:?} for batch of {b}")));
    }
    let top = rect.top.min(h);
    let left = rect.left.min(w);
    let bottom = (rect.top + rect.height).min(h);
    let right = (rect.left + rect.width).min(w);
    let area = (bottom - top) * (right - left);
    let lambda = 1.0 - area as f64 / (h * w) as f64;
    let n = h * w * 3;
    let src = images.data();
    let mut out = src.to_vec();
    for (i, &j) in partner.iter().enumerate() {
        for y in top..bottom {
            let row = (y * w + left) * 3;
            let len = (right - left) * 3;
            out[i * n + row..i * n + row + len].copy_from_slice(&src[j * n + row..j * n + row + len]);
        }
    }
    Ok(Mixed {
        images: Tensor::new(images.shape(), out)?,
        labels: mix_labels(labels, partner, lambda)?,
        lambda,
        partner: partner.to_vec(),
        warning: None,
    })
}

/// CutMix: a box of area `(1−λ)·HW` centred at a uniform point, clipped.
pub fn cutmix(images: &Tensor, labels: &Tensor, alpha: f64, seed: u64) -> Result<Mixed> {
    let (b, h, w) = check_batch(images, labels)?;
    if b < 2 {
        return Ok(skipped(images, labels, b));
    }
    let mut rng = rng_from(seed);
    let lambda = sample_beta(alpha, &mut rng)?;
    let cut = (1.0 - lambda).sqrt();
    let (ch, cw) = ((h as f64 * cut) as i64, (w as f64 * cut) as i64);
    let cy = rng.gen_range(0..h as i64);
    let cx = rng.gen_range(0..w as i64);
    let y0 = (cy - ch / 2).clamp(0, h as i64);
    let y1 = (cy + ch / 2).clamp(0, h as i64);
    let x0 = (cx - cw / 2).clamp(0, w as i64);
    let x1 = (cx + cw / 2).clamp(0, w as i64);
    let rect = CropRect {
        top: y0 as usize,
        left: x0 as usize,
        height: (y1 - y0) as usize,
        width: (x1 - x0) as usize,
    };
    let partner = random_partner(b, &mut rng);
    cutmix_with(images, labels, rect, &partner)
}

/// Applies either CutMix or MixUp to the batch, chosen by a fair coin.
pub fn mix_batch(policy: &AugPolicy, images: &Tensor, labels: &Tensor, seed: u64) -> Result<Mixed> {
    let (b, ..) = check_batch(images, labels)?;
    if !policy.mix {
        return Ok(Mixed {
            images: images.clone(),
            labels: labels.clone(),
            lambda: 1.0,
            partner: (0..b).collect(),
            warning: None,
        });
    }
    if rng_from(seed).gen_bool(0.5) {
        cutmix(images, labels, policy.cutmix_alpha, derive_seed(seed, 1))
    } else {
        mixup(images, labels, policy.mixup_alpha, derive_seed(seed, 2))
    }
}

/// One-hot rows for class ids.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut out = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Label(format!("class id {l} out of range 0..{classes}")));
        }
        out[i * classes + l] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], out)
}
