//! AdamW with decoupled weight decay, a cosine schedule with linear warmup,
//! and layer-wise learning-rate decay for fine-tuning.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::vit::VitModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    /// Pre-text defaults: betas (0.9, 0.95), weight decay 0.5.
    pub fn pretext() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.5,
        }
    }

    /// Fine-tuning defaults: betas (0.9, 0.999), weight decay 0.05.
    pub fn finetune() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Learning-rate multiplier and decay flag for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEntry {
    pub label: String,
    pub lr_mult: f64,
    pub weight_decay: bool,
}

/// Per-parameter optimizer settings, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroups {
    entries: Vec<GroupEntry>,
}

impl ParamGroups {
    /// Multiplier 1 everywhere; decay on weight matrices only.
    pub fn uniform(store: &ParamStore) -> Self {
        ParamGroups {
            entries: store
                .ids()
                .map(|id| GroupEntry {
                    label: "all".into(),
                    lr_mult: 1.0,
                    weight_decay: store.kind(id).decays(),
                })
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &GroupEntry {
        &self.entries[id.0]
    }

    pub fn lr_mult(&self, id: ParamId) -> f64 {
        self.entries[id.0].lr_mult
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sets the multiplier of every parameter whose name satisfies `pred`.
    pub fn set_mult_where(&mut self, store: &ParamStore, mult: f64, pred: impl Fn(&str) -> bool) {
        for id in store.ids() {
            if pred(store.name(id)) {
                self.entries[id.0].lr_mult = mult;
            }
        }
    }
}

/// Layer index used for layer-wise decay: 0 for the patch embedding and
/// positional encoding, `i + 1` for encoder block `i`, `depth + 1` for
/// everything above the blocks (final norm, head).
pub fn layer_id(name: &str, depth: usize) -> usize {
    if name.starts_with("encoder.patch_embed") || name == "encoder.pos_embed" {
        return 0;
    }
    if let Some(rest) = name.strip_prefix("encoder.blocks.") {
        if let Some(i) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
            return i + 1;
        }
    }
    depth + 1
}

/// Multipliers `decay^(L−i)` for block `i`, `decay^(L+1)` for the input
/// embedding and 1 for the head.
pub fn layerwise_lr_groups(model: &VitModel, decay: f64) -> Result<ParamGroups> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::Config(format!("layer decay must be in (0, 1], got {decay}")));
    }
    let depth = model.config().blocks;
    let store = &model.params;
    let entries = store
        .ids()
        .map(|id| {
            let layer = layer_id(store.name(id), depth);
            GroupEntry {
                label: format!("layer {layer}"),
                lr_mult: decay.powi((depth + 1 - layer) as i32),
                weight_decay: store.kind(id).decays(),
            }
        })
        .collect();
    Ok(ParamGroups { entries })
}

/// One AdamW update of a single parameter tensor in place.
///
/// `step` is the 1-based step count used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let shrink = if decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] = param[i] * shrink - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |id| vec![0.0; store.tensor(id).numel()];
        OptimState {
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimState,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: OptimState::new(store),
        }
    }

    /// Applies one update using the gradients stored on `store`, then clears
    /// them. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, groups: &ParamGroups, lr: f64) -> Result<()> {
        if groups.len() != store.len() || self.state.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, groups {}, store {}",
                self.state.m.len(),
                groups.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            if let Some(g) = store.tensor(id).grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Optimizer(format!("{} ({})", groups.get(id).label, store.name(id))));
                }
            }
        }
        self.state.step += 1;
        let step = self.state.step;
        for id in store.ids() {
            let entry = groups.get(id);
            let t = store.tensor_mut(id);
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.state.m[id.0], &mut self.state.v[id.0]);
            adamw_update(t.data_mut(), &grad, m, v, step, lr * entry.lr_mult, &self.config, entry.weight_decay);
            t.zero_grad();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub min_lr: f64,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("schedule needs at least one epoch and one step per epoch".into()));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup ({} epochs) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr`.
/// Steps past the end of the schedule stay at `min_lr`.
pub fn cosine_warmup_lr(spec: &ScheduleSpec, global_step: usize) -> f64 {
    let warmup = spec.warmup_steps();
    let total = spec.total_steps();
    if global_step < warmup {
        return spec.base_lr * global_step as f64 / warmup as f64;
    }
    if global_step >= total {
        return spec.min_lr;
    }
    let progress = (global_step - warmup) as f64 / (total - warmup) as f64;
    spec.min_lr + (spec.base_lr - spec.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;
    use crate::vit::{build_vit_config, Preset};

    fn cfg(wd: f64, beta2: f64) -> AdamWConfig {
        AdamWConfig {
            beta1: 0.9,
            beta2,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // m = 0.1, v = 0.001; bias corrections give m̂ = v̂ = 1,
        // so p = 0 − 0.1 · 1 / (1 + eps)
        let (mut p, mut m, mut v) = ([0.0], [0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, &cfg(0.0, 0.999), true);
        assert!((p[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-12);

        let mut no_eps = cfg(0.0, 0.999);
        no_eps.eps = 0.0;
        let (mut p, mut m, mut v) = ([0.0], [0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, &no_eps, true);
        assert!((p[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn decay_only_path_shrinks_by_exact_factor() {
        let (mut p, mut m, mut v) = ([2.0, -3.0], [0.0; 2], [0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.01, &cfg(0.5, 0.999), true);
        assert_eq!(p, [2.0 * (1.0 - 0.005), -3.0 * (1.0 - 0.005)]);
    }

    #[test]
    fn zero_multiplier_group_is_frozen() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamKind::Weight, Tensor::ones(&[2]));
        let b = store.add("b", ParamKind::Weight, Tensor::ones(&[2]));
        let mut groups = ParamGroups::uniform(&store);
        groups.set_mult_where(&store, 0.0, |n| n == "b");
        for id in [a, b] {
            store.tensor_mut(id).accumulate_grad(&[1.0, 1.0]);
        }
        let mut opt = AdamW::new(&store, cfg(0.1, 0.999));
        opt.step(&mut store, &groups, 0.1).unwrap();
        assert_ne!(store.tensor(a).data(), &[1.0, 1.0]);
        assert_eq!(store.tensor(b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_gradient_names_the_group() {
        let mut store = ParamStore::new();
        let a = store.add("blk", ParamKind::Weight, Tensor::ones(&[1]));
        store.tensor_mut(a).accumulate_grad(&[f64::INFINITY]);
        let groups = ParamGroups::uniform(&store);
        let err = AdamW::new(&store, cfg(0.0, 0.999)).step(&mut store, &groups, 0.1).unwrap_err();
        assert!(matches!(err, Error::Optimizer(_)));
        assert!(err.to_string().contains("blk"));
        assert_eq!(store.tensor(a).data(), &[1.0]);
    }

    #[test]
    fn zero_gradient_without_decay_is_bit_identical() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamKind::Weight, Tensor::new(&[3], vec![0.1, -7.3, 1e-9]).unwrap());
        let before = store.tensor(a).data().to_vec();
        let groups = ParamGroups::uniform(&store);
        let mut opt = AdamW::new(&store, cfg(0.0, 0.95));
        for _ in 0..50 {
            store.tensor_mut(a).accumulate_grad(&[0.0; 3]);
            opt.step(&mut store, &groups, 0.3).unwrap();
        }
        assert_eq!(store.tensor(a).data(), before.as_slice());
        assert_eq!(opt.state.step, 50);
    }

    #[test]
    fn steps_downhill_on_a_quadratic() {
        // L = (p - 3)², start at p = 0 and p = 6
        for start in [0.0, 6.0] {
            let (mut p, mut m, mut v) = ([start], [0.0], [0.0]);
            for step in 1..=5 {
                let before = p[0];
                let g = 2.0 * (p[0] - 3.0);
                adamw_update(&mut p, &[g], &mut m, &mut v, step, 0.05, &cfg(0.0, 0.999), false);
                if step > 1 {
                    assert_eq!((p[0] - before).signum(), -g.signum());
                }
            }
        }
    }

    #[test]
    fn schedule_endpoints() {
        let spec = ScheduleSpec {
            base_lr: 1e-3,
            warmup_epochs: 10,
            total_epochs: 100,
            steps_per_epoch: 7,
            min_lr: 0.0,
        };
        assert_eq!(cosine_warmup_lr(&spec, 0), 0.0);
        assert_eq!(cosine_warmup_lr(&spec, 70), 1e-3);
        assert_eq!(cosine_warmup_lr(&spec, 700), 0.0);
        assert_eq!(cosine_warmup_lr(&spec, 10_000), 0.0);
        let mid = 70 + (700 - 70) / 2;
        assert!((cosine_warmup_lr(&spec, mid) - 0.5e-3).abs() < 1e-12);
        // the ramp approaches the junction value from below
        assert!(cosine_warmup_lr(&spec, 69) < 1e-3);
        assert!(cosine_warmup_lr(&spec, 71) < 1e-3);

        let bad = ScheduleSpec { warmup_epochs: 100, ..spec };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn layer_decay_multipliers() {
        let model = VitModel::new(&build_vit_config(Preset::Tiny, 32, 4).unwrap(), 0).unwrap();
        let groups = layerwise_lr_groups(&model, 0.65).unwrap();
        let mult = |name: &str| groups.lr_mult(model.params.find(name).unwrap());
        assert_eq!(mult("head.weight"), 1.0);
        assert_eq!(mult("encoder.norm.weight"), 1.0);
        assert_eq!(mult("encoder.blocks.11.attn.q.weight"), 0.65);
        assert!((mult("encoder.blocks.0.mlp.fc1.bias") - 0.65f64.powi(12)).abs() < 1e-15);
        assert!((1e-3 * mult("encoder.blocks.0.mlp.fc1.bias") - 5.688e-6).abs() < 1e-9);
        assert!((mult("encoder.pos_embed") - 0.65f64.powi(13)).abs() < 1e-15);
        assert_eq!(mult("encoder.patch_embed.weight"), mult("encoder.pos_embed"));

        let flat = layerwise_lr_groups(&model, 1.0).unwrap();
        assert!(model.params.ids().all(|id| flat.lr_mult(id) == 1.0));
        assert!(layerwise_lr_groups(&model, 0.0).is_err());
    }

    #[test]
    fn weight_decay_skips_biases_norms_and_embeddings() {
        let model = VitModel::new(&build_vit_config(Preset::Tiny, 32, 4).unwrap(), 0).unwrap();
        let groups = ParamGroups::uniform(&model.params);
        for (id, name, _) in model.params.iter() {
            let expect = name.ends_with(".weight") && !name.contains("norm");
            assert_eq!(groups.get(id).weight_decay, expect, "{name}");
        }
    }
}
