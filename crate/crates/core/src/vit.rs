//! Vision Transformer encoders (ViT-T/16, ViT-S/16, ViT-B/16) with learned
//! positional encodings, no class token, and a global-average-pooled
//! classification head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamId, ParamKind, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Small,
    Base,
}

impl Preset {
    /// `(embed_dim, heads, blocks)` for the preset; patch size is 16 for all.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Preset::Tiny => (192, 3, 12),
            Preset::Small => (384, 6, 12),
            Preset::Base => (768, 12, 12),
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            Preset::Tiny => "T",
            Preset::Small => "S",
            Preset::Base => "B",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t" | "tiny" | "vit-t" | "vit-t/16" => Ok(Preset::Tiny),
            "s" | "small" | "vit-s" | "vit-s/16" => Ok(Preset::Small),
            "b" | "base" | "vit-b" | "vit-b/16" => Ok(Preset::Base),
            other => Err(Error::Config(format!("unknown ViT preset `{other}` (expected T, S or B)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

/// Where layer normalization sits inside a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormLayout {
    /// norm → sublayer → residual
    Pre,
    /// sublayer → residual → norm
    Post,
}

impl FromStr for NormLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(NormLayout::Pre),
            "post" => Ok(NormLayout::Post),
            other => Err(Error::Config(format!("unknown norm layout `{other}`"))),
        }
    }
}

impl fmt::Display for NormLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormLayout::Pre => "pre",
            NormLayout::Post => "post",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// Zero means headless.
    pub num_classes: usize,
    pub image_size: usize,
    pub norm_layout: NormLayout,
    pub ln_eps: f64,
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.embed_dim == 0 || self.heads == 0 {
            return fail(format!("zero-sized ViT configuration: {self:?}"));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened length of one patch, `patch_size² · 3`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Preset configuration with 16-pixel patches.
pub fn build_vit_config(preset: Preset, image_size: usize, num_classes: usize) -> Result<VitConfig> {
    let (embed_dim, heads, blocks) = preset.dims();
    let cfg = VitConfig {
        patch_size: 16,
        embed_dim,
        heads,
        blocks,
        mlp_ratio: 4,
        num_classes,
        image_size,
        norm_layout: NormLayout::Pre,
        ln_eps: 1e-6,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Splits an `[H, W, 3]` image into `N = (H/p)(W/p)` patches in row-major
/// grid order. Each patch is flattened in (row, column, channel) order.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        &[h, w, 3] => (h, w),
        s => return Err(Error::Shape(format!("patchify expects [H, W, 3], got {s:?}"))),
    };
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!("{h}×{w} image is not divisible into {patch_size}px patches")));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let x = image.data();
    let mut out = Vec::with_capacity(x.len());
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch_size {
                let row = pr * patch_size + r;
                let start = (row * w + pc * patch_size) * 3;
                out.extend_from_slice(&x[start..start + patch_size * 3]);
            }
        }
    }
    Tensor::new(&[gh * gw, patch_size * patch_size * 3], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, patch_size: usize) -> Result<Tensor> {
    let p = patch_size;
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) || patches.shape() != [(height / p) * (width / p), p * p * 3] {
        return Err(Error::Shape(format!(
            "unpatchify of {:?} into {height}×{width} with {p}px patches",
            patches.shape()
        )));
    }
    let gw = width / p;
    let src = patches.data();
    let mut out = vec![0.0; height * width * 3];
    for (n, patch) in src.chunks(p * p * 3).enumerate() {
        let (pr, pc) = (n / gw, n % gw);
        for r in 0..p {
            let row = pr * p + r;
            let start = (row * width + pc * p) * 3;
            out[start..start + p * 3].copy_from_slice(&patch[r * p * 3..(r + 1) * p * 3]);
        }
    }
    Tensor::new(&[height, width, 3], out)
}

/// Patchifies a `[B, H, W, 3]` batch into `[B, N, P]`.
pub fn patchify_batch(images: &Tensor, patch_size: usize) -> Result<Tensor> {
    let (b, h, w) = match images.shape() {
        &[b, h, w, 3] => (b, h, w),
        s => return Err(Error::Shape(format!("expected [B, H, W, 3] images, got {s:?}"))),
    };
    let per = h * w * 3;
    let mut out = Vec::with_capacity(images.numel());
    let mut n = 0;
    for i in 0..b {
        let img = Tensor::new(&[h, w, 3], images.data()[i * per..(i + 1) * per].to_vec())?;
        let p = patchify(&img, patch_size)?;
        n = p.shape()[0];
        out.extend(p.into_vec());
    }
    let pd = patch_size * patch_size * 3;
    Tensor::new(&[b, n, pd], out)
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub(crate) fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), ParamKind::Weight, trunc_normal(&[input, output], INIT_STD, rng)),
            bias: store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[output])),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub(crate) fn weight(&self) -> ParamId {
        self.weight
    }

    pub(crate) fn bias(&self) -> ParamId {
        self.bias
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.weight"), ParamKind::NormScale, Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.bias"), ParamKind::NormShift, Tensor::zeros(&[dim])),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, eps: f64) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layer_norm(x, gamma, beta, eps)
    }
}

/// Projections of one multi-head self-attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub(crate) q: Linear,
    pub(crate) k: Linear,
    pub(crate) v: Linear,
    pub(crate) proj: Linear,
}

impl AttentionParams {
    pub(crate) fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
        }
    }

    pub fn q_weight(&self) -> ParamId {
        self.q.weight()
    }

    pub fn k_weight(&self) -> ParamId {
        self.k.weight()
    }

    pub fn q_bias(&self) -> ParamId {
        self.q.bias()
    }

    pub fn k_bias(&self) -> ParamId {
        self.k.bias()
    }
}

/// Scaled dot-product attention over `[B, N, D]` tokens.
///
/// Returns the projected output `[B, N, D]` and the attention weights
/// `[B, heads, N, N]`, where each row is a distribution over keys.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    params: &AttentionParams,
    heads: usize,
) -> Result<(Var, Var)> {
    let (b, n, d) = match g.shape(x) {
        &[b, n, d] => (b, n, d),
        s => return Err(Error::Shape(format!("attention expects [B, N, D], got {s:?}"))),
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |lin: &Linear, g: &mut Graph| -> Result<Var> {
        let y = lin.forward(g, store, x)?;
        let y = g.reshape(y, &[b, n, heads, dh])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = split(&params.q, g)?;
    let k = split(&params.k, g)?;
    let v = split(&params.v, g)?;
    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores, 3)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, n, d])?;
    let out = params.proj.forward(g, store, ctx)?;
    Ok((out, attn))
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    norm1: Norm,
    pub(crate) attn: AttentionParams,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub(crate) fn new(store: &mut ParamStore, name: &str, dim: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        Block {
            norm1: Norm::new(store, &format!("{name}.norm1"), dim),
            attn: AttentionParams::new(store, &format!("{name}.attn"), dim, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, dim * mlp_ratio, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), dim * mlp_ratio, dim, rng),
        }
    }

    fn mlp(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, h)
    }

    /// Returns the block output and its attention weights.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        heads: usize,
        layout: NormLayout,
        eps: f64,
    ) -> Result<(Var, Var)> {
        match layout {
            NormLayout::Pre => {
                let h = self.norm1.forward(g, store, x, eps)?;
                let (a, attn) = multi_head_attention(g, store, h, &self.attn, heads)?;
                let x = g.add(x, a)?;
                let h = self.norm2.forward(g, store, x, eps)?;
                let m = self.mlp(g, store, h)?;
                Ok((g.add(x, m)?, attn))
            }
            NormLayout::Post => {
                let (a, attn) = multi_head_attention(g, store, x, &self.attn, heads)?;
                let x = g.add(x, a)?;
                let x = self.norm1.forward(g, store, x, eps)?;
                let m = self.mlp(g, store, x)?;
                let x = g.add(x, m)?;
                Ok((self.norm2.forward(g, store, x, eps)?, attn))
            }
        }
    }
}

/// Output of a transformer stack.
#[derive(Debug, Clone)]
pub struct Features {
    /// Final tokens after the closing layer norm, `[B, N, D]`.
    pub tokens: Var,
    /// Output of every block, before the closing norm. Empty unless requested.
    pub per_block: Vec<Var>,
    /// Attention weights of the last block, `[B, heads, N, N]`.
    pub last_attention: Option<Var>,
}

/// Stack of transformer blocks with a closing layer norm.
#[derive(Debug, Clone)]
pub(crate) struct Stack {
    pub(crate) blocks: Vec<Block>,
    norm: Norm,
    heads: usize,
    layout: NormLayout,
    eps: f64,
}

impl Stack {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        layout: NormLayout,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{prefix}.blocks.{i}"), dim, mlp_ratio, rng))
            .collect();
        Stack {
            blocks,
            norm: Norm::new(store, &format!("{prefix}.norm"), dim),
            heads,
            layout,
            eps,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var, capture: bool) -> Result<Features> {
        let mut per_block = Vec::new();
        let mut last_attention = None;
        for block in &self.blocks {
            let (y, attn) = block.forward(g, store, x, self.heads, self.layout, self.eps)?;
            x = y;
            last_attention = Some(attn);
            if capture {
                per_block.push(x);
            }
        }
        Ok(Features {
            tokens: self.norm.forward(g, store, x, self.eps)?,
            per_block,
            last_attention,
        })
    }
}

/// Patch embedding, positional encoding and transformer stack of a ViT,
/// registered under the `encoder.` prefix of a parameter store.
#[derive(Debug, Clone)]
pub struct VitEncoder {
    config: VitConfig,
    patch_embed: Linear,
    pos_embed: ParamId,
    stack: Stack,
}

impl VitEncoder {
    pub(crate) fn new(store: &mut ParamStore, config: &VitConfig, rng: &mut ChaCha8Rng) -> Self {
        let patch_embed = Linear::new(store, "encoder.patch_embed", config.patch_dim(), config.embed_dim, rng);
        let pos_embed = store.add(
            "encoder.pos_embed",
            ParamKind::PosEmbed,
            trunc_normal(&[config.num_patches(), config.embed_dim], INIT_STD, rng),
        );
        let stack = Stack::new(
            store,
            "encoder",
            config.embed_dim,
            config.blocks,
            config.heads,
            config.mlp_ratio,
            config.norm_layout,
            config.ln_eps,
            rng,
        );
        VitEncoder {
            config: config.clone(),
            patch_embed,
            pos_embed,
            stack,
        }
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn pos_embed(&self) -> ParamId {
        self.pos_embed
    }

    pub fn patch_embed_weight(&self) -> ParamId {
        self.patch_embed.weight()
    }

    pub fn attention(&self, block: usize) -> &AttentionParams {
        &self.stack.blocks[block].attn
    }

    /// Embeds every patch of `[B, N, P]` patches and adds positional codes.
    pub fn embed_all(&self, g: &mut Graph, store: &ParamStore, patches: &Tensor) -> Result<Var> {
        let n = self.config.num_patches();
        if patches.rank() != 3 || patches.shape()[1] != n || patches.shape()[2] != self.config.patch_dim() {
            return Err(Error::Shape(format!(
                "expected [B, {n}, {}] patches, got {:?}",
                self.config.patch_dim(),
                patches.shape()
            )));
        }
        let x = g.constant(patches)?;
        let x = self.patch_embed.forward(g, store, x)?;
        let pos = g.param(store, self.pos_embed)?;
        g.add(x, pos)
    }

    /// Embeds a subset of patches. `visible[b]` lists the original grid
    /// positions of the rows of `patches[b]`; positional codes are gathered by
    /// those positions, so a patch keeps its code regardless of where it sits
    /// in the subset.
    pub fn embed_subset(&self, g: &mut Graph, store: &ParamStore, patches: &Tensor, visible: &[Vec<usize>]) -> Result<Var> {
        let x = g.constant(patches)?;
        let x = self.patch_embed.forward(g, store, x)?;
        let pos = g.param(store, self.pos_embed)?;
        let pos = g.gather_rows(pos, visible)?;
        if g.shape(pos) != g.shape(x) {
            return Err(Error::Shape(format!(
                "visible index {:?} does not match patches {:?}",
                g.shape(pos),
                g.shape(x)
            )));
        }
        g.add(x, pos)
    }

    pub fn run_blocks(&self, g: &mut Graph, store: &ParamStore, x: Var, capture: bool) -> Result<Features> {
        self.stack.forward(g, store, x, capture)
    }
}

/// A ViT encoder with an optional linear classification head.
#[derive(Debug, Clone)]
pub struct VitModel {
    pub params: ParamStore,
    encoder: VitEncoder,
    head: Option<Linear>,
}

impl VitModel {
    pub fn new(config: &VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = VitEncoder::new(&mut params, config, &mut rng);
        let head = (config.num_classes > 0)
            .then(|| Linear::new(&mut params, "head", config.embed_dim, config.num_classes, &mut rng));
        Ok(VitModel { params, encoder, head })
    }

    pub fn config(&self) -> &VitConfig {
        self.encoder.config()
    }

    pub fn encoder(&self) -> &VitEncoder {
        &self.encoder
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    pub fn head_params(&self) -> Option<(ParamId, ParamId)> {
        self.head.as_ref().map(|h| (h.weight(), h.bias()))
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = self.config().image_size;
        match images.shape() {
            &[_, h, w, 3] if h == s && w == s => Ok(()),
            other => Err(Error::Shape(format!("model expects [B, {s}, {s}, 3] images, got {other:?}"))),
        }
    }

    /// Runs the encoder over `[B, H, W, 3]` images. With `capture`, each
    /// block's output is retained in [`Features::per_block`].
    pub fn forward_features(&self, g: &mut Graph, images: &Tensor, capture: bool) -> Result<Features> {
        self.check_images(images)?;
        let patches = patchify_batch(images, self.config().patch_size)?;
        let x = self.encoder.embed_all(g, &self.params, &patches)?;
        self.encoder.run_blocks(g, &self.params, x, capture)
    }

    /// Class logits `[B, num_classes]` from the token mean of the final tokens.
    pub fn classify(&self, g: &mut Graph, images: &Tensor) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Usage("classify called on a headless model".into()))?;
        let features = self.forward_features(g, images, false)?;
        let pooled = g.mean_axis(features.tokens, 1)?;
        head.forward(g, &self.params, pooled)
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }
}
