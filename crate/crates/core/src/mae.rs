//! Masked-autoencoder pre-training: random patch masking, an encoder that
//! only sees visible patches, a learned mask token re-inserted at hidden
//! positions, a lightweight decoder, and a reconstruction loss restricted to
//! the hidden patches.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::optim::{AdamW, ParamGroups};
use crate::params::{trunc_normal, ParamId, ParamKind, ParamStore};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{patchify_batch, Linear, Stack, VitConfig, VitEncoder};

/// Per-sample split of the patch grid into visible and hidden positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingPlan {
    total: usize,
    ratio: f64,
    shuffle: Vec<usize>,
    num_visible: usize,
}

/// Number of patches kept visible: `floor(N·(1−r))`, at least one.
pub fn visible_count(n: usize, ratio: f64) -> usize {
    // the epsilon absorbs representation error such as 100·(1−0.7) = 30.000000000000004
    (((n as f64) * (1.0 - ratio) + 1e-9).floor() as usize).max(1)
}

impl MaskingPlan {
    /// Plan from an explicit permutation; the first entries are visible.
    pub fn from_shuffle(shuffle: Vec<usize>, ratio: f64) -> Result<Self> {
        let n = shuffle.len();
        validate_ratio(ratio)?;
        let mut seen = vec![false; n];
        for &i in &shuffle {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("shuffle is not a permutation of 0..{n}")));
            }
        }
        Ok(MaskingPlan {
            total: n,
            ratio,
            num_visible: visible_count(n, ratio),
            shuffle,
        })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn shuffle(&self) -> &[usize] {
        &self.shuffle
    }

    pub fn num_visible(&self) -> usize {
        self.num_visible
    }

    pub fn visible_idx(&self) -> &[usize] {
        &self.shuffle[..self.num_visible]
    }

    /// The hidden set T.
    pub fn hidden_idx(&self) -> &[usize] {
        &self.shuffle[self.num_visible..]
    }

    /// 1 at hidden positions, 0 at visible ones.
    pub fn hidden_mask(&self) -> Vec<f64> {
        let mut m = vec![1.0; self.total];
        self.visible_idx().iter().for_each(|&i| m[i] = 0.0);
        m
    }
}

fn validate_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio must be in [0, 1), got {ratio}")));
    }
    Ok(())
}

/// Uniformly random masking plan over `n` patches.
pub fn sample_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskingPlan> {
    validate_ratio(ratio)?;
    if n < 2 {
        return Err(Error::Config(format!("masking needs at least 2 patches, got {n}")));
    }
    let mut shuffle: Vec<usize> = (0..n).collect();
    shuffle.shuffle(&mut rng_from(seed));
    MaskingPlan::from_shuffle(shuffle, ratio)
}

/// One independent plan per image of a batch.
pub fn sample_batch_masks(batch: usize, n: usize, ratio: f64, seed: u64) -> Result<Vec<MaskingPlan>> {
    (0..batch)
        .map(|b| sample_mask(n, ratio, derive_seed(seed, b as u64)))
        .collect()
}

/// How the masked reconstruction error is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNorm {
    /// Mean over hidden tokens and over the batch.
    PerHiddenToken,
    /// Sum over hidden tokens, mean over the batch.
    RawSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeConfig {
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
    pub loss_norm: LossNorm,
    /// Normalize each target patch to zero mean and unit variance.
    pub norm_pix_targets: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            mask_ratio: 0.60,
            loss_norm: LossNorm::PerHiddenToken,
            norm_pix_targets: false,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        validate_ratio(self.mask_ratio)?;
        if self.decoder_dim == 0 || self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return Err(Error::Config(format!(
                "decoder width {} must be a positive multiple of {} heads",
                self.decoder_dim, self.decoder_heads
            )));
        }
        Ok(())
    }
}

/// Encoder plus MAE decoder. Decoder tensors live under the `decoder.`
/// prefix so fine-tuning can drop them by name.
#[derive(Debug, Clone)]
pub struct MaeModel {
    pub params: ParamStore,
    vit: VitConfig,
    config: MaeConfig,
    encoder: VitEncoder,
    enc_to_dec: Linear,
    mask_token: ParamId,
    decoder_pos: ParamId,
    decoder: Stack,
    pred: Linear,
}

impl MaeModel {
    pub fn new(vit: &VitConfig, config: &MaeConfig, seed: u64) -> Result<Self> {
        vit.validate()?;
        config.validate()?;
        let vit = VitConfig { num_classes: 0, ..vit.clone() };
        let mut rng = rng_from(seed);
        let mut params = ParamStore::new();
        let encoder = VitEncoder::new(&mut params, &vit, &mut rng);
        let dd = config.decoder_dim;
        let enc_to_dec = Linear::new(&mut params, "decoder.embed", vit.embed_dim, dd, &mut rng);
        let mask_token = params.add("decoder.mask_token", ParamKind::MaskToken, trunc_normal(&[dd], 0.02, &mut rng));
        let decoder_pos = params.add(
            "decoder.pos_embed",
            ParamKind::PosEmbed,
            trunc_normal(&[vit.num_patches(), dd], 0.02, &mut rng),
        );
        let decoder = Stack::new(
            &mut params,
            "decoder",
            dd,
            config.decoder_depth,
            config.decoder_heads,
            vit.mlp_ratio,
            vit.norm_layout,
            vit.ln_eps,
            &mut rng,
        );
        let pred = Linear::new(&mut params, "decoder.pred", dd, vit.patch_dim(), &mut rng);
        Ok(MaeModel {
            params,
            vit,
            config: config.clone(),
            encoder,
            enc_to_dec,
            mask_token,
            decoder_pos,
            decoder,
            pred,
        })
    }

    pub fn vit_config(&self) -> &VitConfig {
        &self.vit
    }

    pub fn config(&self) -> &MaeConfig {
        &self.config
    }

    pub fn encoder(&self) -> &VitEncoder {
        &self.encoder
    }

    pub fn mask_token(&self) -> ParamId {
        self.mask_token
    }

    fn check_plans(&self, patches: &[usize], plans: &[MaskingPlan]) -> Result<()> {
        let n = self.vit.num_patches();
        if patches.len() != 3 || patches[1] != n || patches[0] != plans.len() {
            return Err(Error::Shape(format!(
                "{} plans for patches {patches:?}; expected [B, {n}, P] with one plan per image",
                plans.len()
            )));
        }
        if let Some(p) = plans.iter().find(|p| p.total() != n) {
            return Err(Error::Shape(format!("plan over {} patches, model has {n}", p.total())));
        }
        let v = plans[0].num_visible();
        if plans.iter().any(|p| p.num_visible() != v) {
            return Err(Error::Shape("plans in a batch must keep the same number of patches".into()));
        }
        Ok(())
    }

    /// Latent `[B, V, D]` of the visible patches of `[B, N, P]` patches.
    pub fn encode_visible(&self, g: &mut Graph, patches: &Tensor, plans: &[MaskingPlan]) -> Result<Var> {
        self.check_plans(patches.shape(), plans)?;
        let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible_idx().to_vec()).collect();
        let subset = gather_patches(patches, &visible)?;
        let x = self.encoder.embed_subset(g, &self.params, &subset, &visible)?;
        Ok(self.encoder.run_blocks(g, &self.params, x, false)?.tokens)
    }

    /// Decoder input before positional codes: projected latent tokens at
    /// their original positions and the mask token everywhere else.
    pub fn decoder_tokens(&self, g: &mut Graph, latent: Var, plans: &[MaskingPlan]) -> Result<Var> {
        let s = g.shape(latent).to_vec();
        if s.len() != 3 || s[0] != plans.len() || plans.iter().any(|p| p.num_visible() != s[1]) {
            return Err(Error::Shape(format!("latent {s:?} does not match {} plans", plans.len())));
        }
        let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible_idx().to_vec()).collect();
        let x = self.enc_to_dec.forward(g, &self.params, latent)?;
        let token = g.param(&self.params, self.mask_token)?;
        g.scatter_rows(x, token, &visible, self.vit.num_patches())
    }

    /// Per-patch pixel predictions `[B, N, P]` for every position.
    pub fn decode_full(&self, g: &mut Graph, latent: Var, plans: &[MaskingPlan]) -> Result<Var> {
        let x = self.decoder_tokens(g, latent, plans)?;
        let pos = g.param(&self.params, self.decoder_pos)?;
        let x = g.add(x, pos)?;
        let h = self.decoder.forward(g, &self.params, x, false)?.tokens;
        self.pred.forward(g, &self.params, h)
    }

    /// Targets for the reconstruction loss.
    pub fn targets(&self, patches: &Tensor) -> Result<Tensor> {
        if !self.config.norm_pix_targets {
            return Ok(patches.clone());
        }
        let d = *patches.shape().last().unwrap_or(&1);
        let mut out = patches.data().to_vec();
        for chunk in out.chunks_mut(d) {
            let mean = chunk.iter().sum::<f64>() / d as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-6).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        Tensor::new(patches.shape(), out)
    }

    /// Full forward: mask → encode → decode → loss. Returns the loss var.
    pub fn forward_loss(&self, g: &mut Graph, images: &Tensor, plans: &[MaskingPlan]) -> Result<Var> {
        let patches = patchify_batch(images, self.vit.patch_size)?;
        let latent = self.encode_visible(g, &patches, plans)?;
        let recon = self.decode_full(g, latent, plans)?;
        mae_loss(g, &self.targets(&patches)?, recon, plans, self.config.loss_norm)
    }
}

fn gather_patches(patches: &Tensor, visible: &[Vec<usize>]) -> Result<Tensor> {
    let (n, p) = (patches.shape()[1], patches.shape()[2]);
    let v = visible.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(visible.len() * v * p);
    for (b, rows) in visible.iter().enumerate() {
        for &i in rows {
            let start = (b * n + i) * p;
            out.extend_from_slice(&patches.data()[start..start + p]);
        }
    }
    Tensor::new(&[visible.len(), v, p], out)
}

/// Mean-squared reconstruction error over hidden patches only.
///
/// Each hidden token contributes the mean of its squared pixel errors;
/// visible tokens are multiplied by an exact zero and contribute nothing.
pub fn mae_loss(g: &mut Graph, target: &Tensor, recon: Var, plans: &[MaskingPlan], norm: LossNorm) -> Result<Var> {
    if target.shape() != g.shape(recon) {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            g.shape(recon),
            target.shape()
        )));
    }
    let (b, n) = (target.shape()[0], target.shape()[1]);
    if plans.len() != b || plans.iter().any(|p| p.total() != n) {
        return Err(Error::Shape(format!("{} plans for a [{b}, {n}, _] target", plans.len())));
    }
    let mut weights = Vec::with_capacity(b * n);
    for plan in plans {
        let hidden = plan.hidden_idx().len();
        if hidden == 0 {
            return Err(Error::Loss("no hidden patches to reconstruct".into()));
        }
        let scale = match norm {
            LossNorm::PerHiddenToken => 1.0 / (hidden * b) as f64,
            LossNorm::RawSum => 1.0 / b as f64,
        };
        weights.extend(plan.hidden_mask().into_iter().map(|m| m * scale));
    }
    let t = g.constant(target)?;
    let diff = g.sub(recon, t)?;
    let sq = g.square(diff)?;
    let per_token = g.mean_axis(sq, 2)?;
    let w = g.constant(&Tensor::new(&[b, n], weights)?)?;
    let weighted = g.mul(per_token, w)?;
    g.sum(weighted)
}

/// One optimization step on a batch of `[B, H, W, 3]` images with fresh
/// masks drawn from `plan_seed`. Returns the loss before the update.
pub fn pretrain_step(
    mae: &mut MaeModel,
    images: &Tensor,
    plan_seed: u64,
    optimizer: &mut AdamW,
    groups: &ParamGroups,
    lr: f64,
) -> Result<f64> {
    let b = images.shape().first().copied().unwrap_or(0);
    let plans = sample_batch_masks(b, mae.vit.num_patches(), mae.config.mask_ratio, plan_seed)?;
    let loss_value = {
        let mut g = Graph::new();
        let loss = mae.forward_loss(&mut g, images, &plans)?;
        let value = g.scalar_value(loss)?;
        let grads = g.backward(loss)?;
        mae.params.zero_grad();
        grads.accumulate_into(&mut mae.params);
        value
    };
    optimizer.step(&mut mae.params, groups, lr)?;
    Ok(loss_value)
}
