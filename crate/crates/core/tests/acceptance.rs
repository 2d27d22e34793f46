//! Acceptance suite. Each criterion prints one `PASS` or `FAIL` line with
//! the measured values and pinned tolerances. The process exits non-zero
//! when a criterion fails that is not listed in [`DOCUMENTED_GAPS`], or when
//! a documented gap unexpectedly passes.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use maevit_core::config::ExperimentConfig;
use maevit_core::data::{split_capped, synth_dataset, synth_images, write_manifest, Item, LabeledDataset, Split};
use maevit_core::eval::{confusion_matrix, f1_score, linear_cka, metrics};
use maevit_core::experiment::{
    cmd_attn, cmd_cka, cmd_eval, cmd_finetune, cmd_pretrain, cmd_sweep, evaluate, finetune_on, pretrain_on_images,
    SplitData, SweepAxis,
};
use maevit_core::mae::{mae_loss, sample_batch_masks, sample_mask, visible_count, LossNorm};
use maevit_core::optim::{cosine_warmup_lr, layerwise_lr_groups, AdamW, AdamWConfig, ParamGroups, ScheduleSpec};
use maevit_core::tensor::{check_param_gradient, grad_check, GradCheckReport};
use maevit_core::vit::{build_vit_config, Preset, VitConfig, VitModel};
use maevit_core::{Graph, ParamKind, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_BUDGET_SECS: f64 = 120.0;
const MASK_FREQ_TOL: f64 = 0.02;
const PARAM_COUNT_TOL: f64 = 0.03;
const ATTN_ROW_TOL: f64 = 1e-10;
const CKA_TOL: f64 = 1e-8;
const ADAMW_TOL: f64 = 1e-12;
const PRETRAIN_BUDGET_SECS: f64 = 600.0;

/// Criteria known not to hold, with the reason. They still print `FAIL`.
const DOCUMENTED_GAPS: &[(&str, &str)] = &[(
    "architecture fidelity",
    "headless ViT-T has 5.52M parameters; the reference 5.80M is only reachable by counting a classification head",
)];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ y ⊙ w` with fixed random weights so every output coordinate matters.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = random(g.shape(y), &mut rng(seed));
    let w = g.constant(&w)?;
    let m = g.mul(y, w)?;
    g.sum(m)
}

type Primitive = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn primitives() -> Vec<(&'static str, Vec<usize>, Primitive)> {
    let other = |shape: &[usize], seed| random(shape, &mut rng(seed));
    let b34 = other(&[3, 4], 11);
    let b45 = other(&[4, 5], 12);
    let a23 = other(&[2, 3, 4], 13);
    let bb = other(&[2, 4, 5], 14);
    let gamma = other(&[4], 15);
    let beta = other(&[4], 16);
    let xln = other(&[2, 3, 4], 17);
    let fill = other(&[3], 18);
    let xs = other(&[2, 2, 3], 19);
    let mut soft = random(&[3, 5], &mut rng(20)).map(f64::exp).into_vec();
    for row in soft.chunks_mut(5) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let soft = Tensor::new(&[3, 5], soft).unwrap();
    let gather_idx = vec![vec![4, 0, 2], vec![1, 1, 3]];
    let scatter_idx = vec![vec![3, 0], vec![1, 4]];
    macro_rules! p {
        ($name:expr, $shape:expr, |$g:ident, $x:ident| $body:expr) => {
            ($name, $shape.to_vec(), Box::new(move |$g: &mut Graph, $x: Var| -> Result<Var> { $body }) as Primitive)
        };
    }
    let (b34a, b34b, b34c, b34d) = (b34.clone(), b34.clone(), b34.clone(), b34);
    let (b45a, a23a, bba, a23b) = (b45.clone(), a23.clone(), bb.clone(), a23);
    let (ga, ba, xa, gb, bb2, xb) = (gamma.clone(), beta.clone(), xln.clone(), gamma.clone(), beta.clone(), xln);
    let (fa, xsa) = (fill.clone(), xs);
    let (gi, si, si2) = (gather_idx, scatter_idx.clone(), scatter_idx);
    vec![
        p!("add (lhs)", [3, 4], |g, x| { let c = g.constant(&b34a)?; let y = g.add(x, c)?; probe(g, y, 1) }),
        p!("add (rhs)", [3, 4], |g, x| { let c = g.constant(&b34b)?; let y = g.add(c, x)?; probe(g, y, 1) }),
        p!("sub (lhs)", [3, 4], |g, x| { let c = g.constant(&b34c)?; let y = g.sub(x, c)?; probe(g, y, 2) }),
        p!("sub (rhs)", [3, 4], |g, x| { let c = g.constant(&b34d)?; let y = g.sub(c, x)?; probe(g, y, 2) }),
        p!("mul", [3, 4], |g, x| { let y = g.mul(x, x)?; probe(g, y, 3) }),
        p!("square", [3, 4], |g, x| { let y = g.square(x)?; probe(g, y, 4) }),
        p!("scale", [3, 4], |g, x| { let y = g.scale(x, -1.7)?; probe(g, y, 5) }),
        p!("matmul (lhs)", [3, 4], |g, x| { let c = g.constant(&b45a)?; let y = g.matmul(x, c)?; probe(g, y, 6) }),
        p!("matmul (rhs)", [4, 5], |g, x| { let c = g.constant(&a23a)?; let y = g.matmul(c, x)?; probe(g, y, 6) }),
        p!("batched matmul", [2, 3, 4], |g, x| { let c = g.constant(&bba)?; let y = g.matmul(x, c)?; probe(g, y, 7) }),
        p!("batched matmul (rhs)", [2, 4, 5], |g, x| { let c = g.constant(&a23b)?; let y = g.matmul(c, x)?; probe(g, y, 7) }),
        p!("transpose", [2, 3, 4], |g, x| { let y = g.transpose_last2(x)?; probe(g, y, 8) }),
        p!("reshape", [2, 3, 4], |g, x| { let y = g.reshape(x, &[6, 4])?; probe(g, y, 9) }),
        p!("permute", [2, 3, 4], |g, x| { let y = g.permute(x, &[2, 0, 1])?; probe(g, y, 10) }),
        p!("softmax (last)", [2, 3, 4], |g, x| { let y = g.softmax(x, 2)?; probe(g, y, 11) }),
        p!("softmax (middle)", [2, 3, 4], |g, x| { let y = g.softmax(x, 1)?; probe(g, y, 12) }),
        p!("layer_norm (x)", [2, 3, 4], |g, x| {
            let (gm, bt) = (g.constant(&ga)?, g.constant(&ba)?);
            let y = g.layer_norm(x, gm, bt, 1e-6)?;
            probe(g, y, 13)
        }),
        p!("layer_norm (gamma)", [4], |g, x| {
            let (xx, bt) = (g.constant(&xa)?, g.constant(&bb2)?);
            let y = g.layer_norm(xx, x, bt, 1e-6)?;
            probe(g, y, 13)
        }),
        p!("layer_norm (beta)", [4], |g, x| {
            let (xx, gm) = (g.constant(&xb)?, g.constant(&gb)?);
            let y = g.layer_norm(xx, gm, x, 1e-6)?;
            probe(g, y, 13)
        }),
        p!("gelu", [3, 4], |g, x| { let y = g.gelu(x)?; probe(g, y, 14) }),
        p!("cross_entropy", [3, 5], |g, x| g.cross_entropy(x, &soft)),
        p!("sum", [3, 4], |g, x| { let y = g.square(x)?; g.sum(y) }),
        p!("mean", [3, 4], |g, x| { let y = g.square(x)?; g.mean(y) }),
        p!("mean_axis", [2, 3, 4], |g, x| { let y = g.mean_axis(x, 1)?; probe(g, y, 15) }),
        p!("gather_rows", [2, 5, 3], |g, x| { let y = g.gather_rows(x, &gi)?; probe(g, y, 16) }),
        p!("scatter_rows (tokens)", [2, 2, 3], |g, x| {
            let f = g.constant(&fa)?;
            let y = g.scatter_rows(x, f, &si, 5)?;
            probe(g, y, 17)
        }),
        p!("scatter_rows (fill)", [3], |g, x| {
            let t = g.constant(&xsa)?;
            let y = g.scatter_rows(t, x, &si2, 5)?;
            probe(g, y, 17)
        }),
    ]
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut results: Vec<(String, Result<GradCheckReport>)> = Vec::new();
    let prims = primitives();
    for (k, (name, shape, f)) in prims.iter().enumerate() {
        let x = random(shape, &mut rng(100 + k as u64));
        results.push((name.to_string(), grad_check(f, &x, GRAD_STEP, GRAD_TOL)));
    }

    // two ViT-T blocks (width 192, 3 heads) on 64×64 inputs, through the head
    let cfg = VitConfig {
        blocks: 2,
        image_size: 64,
        num_classes: 5,
        ..build_vit_config(Preset::Tiny, 64, 5).unwrap()
    };
    let model = VitModel::new(&cfg, 3).unwrap();
    let images = random(&[2, 64, 64, 3], &mut rng(7)).map(|v| 0.5 + 0.5 * v);
    let targets = Tensor::new(&[2, 5], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.3, 0.7, 0.0]).unwrap();
    let forward = |g: &mut Graph, store: &ParamStore| -> Result<Var> {
        let mut m = model.clone();
        m.params = store.clone();
        let logits = m.classify(g, &images)?;
        g.cross_entropy(logits, &targets)
    };
    let mut coords_checked = 0;
    for id in model.params.ids() {
        let n = model.params.tensor(id).numel();
        let mut r = rng(1000 + id.index() as u64);
        let coords: Vec<usize> = (0..4.min(n)).map(|_| r.gen_range(0..n)).collect();
        coords_checked += coords.len();
        let name = model.params.name(id).to_string();
        let rep = check_param_gradient(&model.params, id, forward, GRAD_STEP, GRAD_TOL, Some(&coords));
        results.push((format!("vit:{name}"), rep));
    }
    let mut worst: (f64, String) = (0.0, String::new());
    let mut failures = Vec::new();
    for (name, rep) in results {
        match rep {
            Ok(rep) => {
                if rep.max_rel_error > worst.0 || rep.max_rel_error.is_nan() {
                    worst = (rep.max_rel_error, name.clone());
                }
                if !rep.passed {
                    failures.push(name);
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < GRAD_BUDGET_SECS;
    Outcome {
        name: "gradient correctness",
        pass,
        detail: format!(
            "{} primitive checks + {} ViT-T tensors ({coords_checked} coords); max rel err {:.2e} at {} (tol {GRAD_TOL:e}); {secs:.1}s (budget {GRAD_BUDGET_SECS}s){}",
            prims.len(),
            model.params.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failed: {failures:?}") }
        ),
    }
}

fn masked_loss_contract() -> Outcome {
    let mut r = rng(21);
    let mut bad_visible = 0;
    let mut dead_hidden = 0;
    let mut instances = 0;
    for t in 0..50 {
        let b = r.gen_range(1..4);
        let n = r.gen_range(4..40);
        let p = r.gen_range(2..8);
        let ratio = r.gen_range(0.1..0.9);
        let plans = sample_batch_masks(b, n, ratio, t).unwrap();
        let target = random(&[b, n, p], &mut r);
        let recon = random(&[b, n, p], &mut r);
        for norm in [LossNorm::PerHiddenToken, LossNorm::RawSum] {
            let mut g = Graph::new();
            let v = g.variable(&recon).unwrap();
            let loss = mae_loss(&mut g, &target, v, &plans, norm).unwrap();
            let grads = g.backward(loss).unwrap();
            let grad = grads.get(v).unwrap();
            for (bi, plan) in plans.iter().enumerate() {
                let row = |i: usize| &grad[(bi * n + i) * p..(bi * n + i + 1) * p];
                bad_visible += plan.visible_idx().iter().filter(|&&i| row(i).iter().any(|&x| x != 0.0)).count();
                dead_hidden += plan.hidden_idx().iter().filter(|&&i| row(i).iter().all(|&x| x == 0.0)).count();
            }
            instances += 1;
        }
    }

    let visible: BTreeSet<usize> = (0..20).map(|s| sample_mask(196, 0.6, s).unwrap().num_visible()).collect();
    let counted = visible_count(196, 0.6);

    let samples = 10_000;
    let mut hidden = vec![0usize; 196];
    for s in 0..samples {
        for &i in sample_mask(196, 0.6, 10_000 + s).unwrap().hidden_idx() {
            hidden[i] += 1;
        }
    }
    let freq_dev = hidden
        .iter()
        .map(|&c| (c as f64 / samples as f64 - 0.6).abs())
        .fold(0.0, f64::max);

    let pass = bad_visible == 0 && dead_hidden == 0 && visible == BTreeSet::from([78]) && counted == 78 && freq_dev <= MASK_FREQ_TOL;
    Outcome {
        name: "masked loss contract",
        pass,
        detail: format!(
            "{instances} instances: {bad_visible} visible rows with nonzero grad, {dead_hidden} hidden rows with zero grad; N=196 r=0.6 visible {visible:?}; max per-index hidden-frequency deviation {freq_dev:.4} over {samples} masks (tol {MASK_FREQ_TOL})"
        ),
    }
}

fn architecture_fidelity() -> Outcome {
    let reference = [(Preset::Tiny, 5.80e6), (Preset::Small, 22.20e6), (Preset::Base, 86.00e6)];
    let mut parts = Vec::new();
    let mut pass = true;
    for (preset, want) in reference {
        let model = VitModel::new(&build_vit_config(preset, 224, 0).unwrap(), 0).unwrap();
        let count = model.count_params() as f64;
        let rel = (count - want) / want;
        let blocks: BTreeSet<String> = model
            .params
            .iter()
            .filter_map(|(_, name, _)| name.strip_prefix("encoder.blocks.").and_then(|r| r.split('.').next()).map(String::from))
            .collect();
        let ok = rel.abs() <= PARAM_COUNT_TOL && blocks.len() == 12 && model.config().blocks == 12;
        pass &= ok;
        parts.push(format!(
            "ViT-{preset} {:.3}M vs {:.2}M ({:+.2}%) {} blocks{}",
            count / 1e6,
            want / 1e6,
            rel * 100.0,
            blocks.len(),
            if ok { "" } else { " [out of tolerance]" }
        ));
    }

    let model = VitModel::new(&build_vit_config(Preset::Tiny, 224, 0).unwrap(), 9).unwrap();
    let img = random(&[1, 224, 224, 3], &mut rng(8)).map(|v| 0.5 + 0.5 * v);
    let mut g = Graph::inference();
    let feats = model.forward_features(&mut g, &img, true).unwrap();
    let attn = g.data(feats.last_attention.unwrap());
    let row_err = attn.chunks(196).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    pass &= row_err <= ATTN_ROW_TOL;
    Outcome {
        name: "architecture fidelity",
        pass,
        detail: format!(
            "headless counts: {} (tol ±{:.0}%); attention row-sum error {row_err:.1e} (tol {ATTN_ROW_TOL:e})",
            parts.join(", "),
            PARAM_COUNT_TOL * 100.0
        ),
    }
}

fn metrics_oracle() -> Outcome {
    let mut r = rng(31);
    let mut mismatches = 0;
    for _ in 0..100 {
        let c = r.gen_range(2..7);
        let n = r.gen_range(1..40);
        let truths: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let preds: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let rep = metrics(&confusion_matrix(&preds, &truths, c).unwrap()).unwrap();
        let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
        let mut correct = 0;
        for k in 0..c {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&p, &t) in preds.iter().zip(&truths) {
                match (p == k, t == k) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let prec = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let rec = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
            let m = &rep.per_class[k];
            if m.precision != prec || m.recall != rec || m.f1 != f1 || m.support != tp + fn_ {
                mismatches += 1;
            }
            sp += prec;
            sr += rec;
            sf += f1;
        }
        correct += preds.iter().zip(&truths).filter(|(p, t)| p == t).count();
        let cf = c as f64;
        if rep.precision != sp / cf || rep.recall != sr / cf || rep.f1 != sf / cf || rep.accuracy != correct as f64 / n as f64 {
            mismatches += 1;
        }
    }

    // Reported row: P 0.7597, R 0.8056, F1 0.7776. The harmonic mean of the
    // macro averages does not reproduce the reported F1, so F1 is averaged
    // per class.
    let harmonic = f1_score(0.7597, 0.8056);
    let table_consistent = (harmonic - 0.7820).abs() < 5e-5 && (harmonic - 0.7776).abs() > 1e-3;
    // and the implementation follows the per-class reading
    let cm = confusion_matrix(&[0, 0, 0, 1, 1, 2], &[0, 1, 2, 1, 1, 2], 3).unwrap();
    let rep = metrics(&cm).unwrap();
    let per_class_mean = rep.per_class.iter().map(|m| m.f1).sum::<f64>() / 3.0;
    let convention = rep.f1 == per_class_mean && (rep.f1 - f1_score(rep.precision, rep.recall)).abs() > 1e-3;

    Outcome {
        name: "metrics oracle",
        pass: mismatches == 0 && table_consistent && convention,
        detail: format!(
            "100 random instances, {mismatches} mismatches vs brute-force recount (exact); harmonic mean of P 0.7597 / R 0.8056 = {harmonic:.4} vs reported 0.7776; macro-F1 is the per-class mean: {convention}"
        ),
    }
}

/// Centered-Gram HSIC estimate `tr(K H L H)` with `K = XXᵀ`.
fn hsic(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.shape()[0];
    let gram = |t: &Tensor| -> Vec<f64> {
        let d = t.shape()[1];
        let v = t.data();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = (0..d).map(|c| v[i * d + c] * v[j * d + c]).sum();
            }
        }
        k
    };
    let center = |k: Vec<f64>| -> Vec<f64> {
        let row: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k[i * n + j]).sum::<f64>() / n as f64).collect();
        let all = row.iter().sum::<f64>() / n as f64;
        (0..n * n).map(|ij| k[ij] - row[ij / n] - col[ij % n] + all).collect()
    };
    let (kc, lc) = (center(gram(x)), center(gram(y)));
    kc.iter().zip(&lc).map(|(a, b)| a * b).sum::<f64>() / ((n - 1) * (n - 1)) as f64
}

fn cka_oracle(x: &Tensor, y: &Tensor) -> f64 {
    hsic(x, y) / (hsic(x, x) * hsic(y, y)).sqrt()
}

fn random_orthogonal(d: usize, r: &mut ChaCha8Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Tensor::new(&[d, d], (0..d * d).map(|ij| cols[ij % d][ij / d]).collect()).unwrap()
}

fn cka_checks() -> Outcome {
    let mut r = rng(41);
    let (mut oracle_err, mut orth_err, mut scale_err, mut self_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = r.gen_range(5..30);
        let p = r.gen_range(1..8);
        let q = r.gen_range(1..8);
        let x = random(&[n, p], &mut r);
        let y = random(&[n, q], &mut r);
        let c = linear_cka(&x, &y).unwrap();
        oracle_err = oracle_err.max((c - cka_oracle(&x, &y)).abs());
        let rotated = x.matmul(&random_orthogonal(p, &mut r)).unwrap();
        orth_err = orth_err.max((linear_cka(&rotated, &y).unwrap() - c).abs());
        scale_err = scale_err.max((linear_cka(&x.map(|v| v * 3.7), &y).unwrap() - c).abs());
        self_err = self_err.max((linear_cka(&x, &x).unwrap() - 1.0).abs());
    }
    Outcome {
        name: "CKA oracle",
        pass: oracle_err <= CKA_TOL && orth_err <= CKA_TOL && scale_err <= CKA_TOL && self_err <= CKA_TOL,
        detail: format!(
            "50 instances: |CKA − HSIC oracle| {oracle_err:.1e}, orthogonal {orth_err:.1e}, scaling {scale_err:.1e}, |CKA(X,X) − 1| {self_err:.1e} (tol {CKA_TOL:e})"
        ),
    }
}

fn learning_rate_rules() -> Outcome {
    let depth = 12;
    let decay = 0.65;
    let model = VitModel::new(&build_vit_config(Preset::Tiny, 32, 4).unwrap(), 0).unwrap();
    let groups = layerwise_lr_groups(&model, decay).unwrap();
    let mut layer_mismatch = 0;
    for id in model.params.ids() {
        let name = model.params.name(id);
        // block i (0-based) sits at depth i+1; the input embedding below all
        // blocks gets one extra factor and everything above none
        let exponent = if let Some(rest) = name.strip_prefix("encoder.blocks.") {
            depth - rest.split('.').next().unwrap().parse::<usize>().unwrap()
        } else if name.starts_with("encoder.patch_embed") || name == "encoder.pos_embed" {
            depth + 1
        } else {
            0
        };
        if groups.lr_mult(id) != decay.powi(exponent as i32) {
            layer_mismatch += 1;
        }
    }

    let spec = ScheduleSpec {
        base_lr: 1e-3,
        warmup_epochs: 10,
        total_epochs: 100,
        steps_per_epoch: 7,
        min_lr: 0.0,
    };
    let w = spec.warmup_steps();
    let at = cosine_warmup_lr(&spec, w);
    let ramp_limit = spec.base_lr * w as f64 / w as f64;
    let step = spec.base_lr / w as f64;
    let left_jump = at - cosine_warmup_lr(&spec, w - 1);
    let right_jump = (cosine_warmup_lr(&spec, w + 1) - at).abs();
    let schedule_ok = at == spec.base_lr
        && ramp_limit == at
        && (left_jump - step).abs() < 1e-15
        && right_jump < step
        && cosine_warmup_lr(&spec, 0) == 0.0
        && cosine_warmup_lr(&spec, spec.total_steps()) == spec.min_lr;

    // one AdamW step against the closed form
    let mut store = ParamStore::new();
    let wid = store.add("w", ParamKind::Weight, random(&[6], &mut rng(51)));
    let bid = store.add("b", ParamKind::Bias, random(&[3], &mut rng(52)));
    let gw = random(&[6], &mut rng(53));
    let gb = random(&[3], &mut rng(54));
    let before = store.clone();
    let mut g = Graph::new();
    let (pw, pb) = (g.param(&store, wid).unwrap(), g.param(&store, bid).unwrap());
    let lw = probe_with(&mut g, pw, &gw);
    let lb = probe_with(&mut g, pb, &gb);
    let loss = g.add(lw, lb).unwrap();
    g.backward(loss).unwrap().accumulate_into(&mut store);
    let cfg = AdamWConfig::finetune();
    let lr = 3e-3;
    let mut opt = AdamW::new(&store, cfg);
    let groups = ParamGroups::uniform(&store);
    opt.step(&mut store, &groups, lr).unwrap();
    let mut adam_err = 0.0f64;
    for (id, grad, decays) in [(wid, &gw, true), (bid, &gb, false)] {
        for ((p0, gi), p1) in before.tensor(id).data().iter().zip(grad.data()).zip(store.tensor(id).data()) {
            let m = (1.0 - cfg.beta1) * gi;
            let v = (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m / (1.0 - cfg.beta1);
            let v_hat = v / (1.0 - cfg.beta2);
            let shrunk = if decays { p0 - lr * cfg.weight_decay * p0 } else { *p0 };
            let expect = shrunk - lr * m_hat / (v_hat.sqrt() + cfg.eps);
            adam_err = adam_err.max((expect - p1).abs());
        }
    }

    Outcome {
        name: "learning-rate rules",
        pass: layer_mismatch == 0 && schedule_ok && adam_err <= ADAMW_TOL,
        detail: format!(
            "{layer_mismatch} of {} tensors off 0.65^(L−i); warmup/cosine junction lr {at:e} = base, jumps {left_jump:.2e}/{right_jump:.2e} ≤ ramp step {step:.2e}: {schedule_ok}; AdamW one-step error {adam_err:.1e} (tol {ADAMW_TOL:e})",
            model.params.len()
        ),
    }
}

fn probe_with(g: &mut Graph, v: Var, w: &Tensor) -> Var {
    let c = g.constant(w).unwrap();
    let m = g.mul(v, c).unwrap();
    g.sum(m).unwrap()
}

fn split_rule() -> Outcome {
    let mut r = rng(61);
    let (mut cap_violations, mut partition_violations, mut group_violations, mut errors) = (0, 0, 0, 0);
    let trials = 200;
    for t in 0..trials {
        let classes = r.gen_range(2..9);
        let grouped = t % 2 == 1;
        let mut items = Vec::new();
        for c in 0..classes {
            let n = r.gen_range(3..200);
            // groups stay small enough that every class can fill all splits
            let max_group = (n / 6).max(1);
            let (mut group, mut in_group) = (0, 0);
            for i in 0..n {
                if grouped && (in_group == max_group || r.gen_bool(0.4)) {
                    group += 1;
                    in_group = 0;
                }
                in_group += 1;
                items.push(Item {
                    path: PathBuf::from(format!("c{c}/img{i}.ppm")),
                    class_id: c,
                    group: grouped.then(|| format!("c{c}_g{group}")),
                });
            }
        }
        let ds = LabeledDataset {
            class_names: (0..classes).map(|c| format!("c{c}")).collect(),
            items,
        };
        let Ok(split) = split_capped(&ds, 4, grouped, t) else {
            errors += 1;
            continue;
        };
        let mut all: Vec<usize> = [Split::Train, Split::Val, Split::Test].iter().flat_map(|&s| split.indices(s)).collect();
        all.sort_unstable();
        if split.assignments.len() != ds.items.len() || all != (0..ds.items.len()).collect::<Vec<_>>() {
            partition_violations += 1;
        }
        let counts = split.class_counts(&ds.items, classes);
        let tv: Vec<usize> = counts.iter().map(|c| c[0] + c[1]).collect();
        let min = *tv.iter().min().unwrap();
        if tv.iter().any(|&v| v > 4 * min) {
            cap_violations += 1;
        }
        if grouped {
            let mut seen = std::collections::BTreeMap::new();
            for (item, s) in ds.items.iter().zip(&split.assignments) {
                if *seen.entry(item.group.clone()).or_insert(*s) != *s {
                    group_violations += 1;
                    break;
                }
            }
        }
    }
    Outcome {
        name: "split rule",
        pass: cap_violations == 0 && partition_violations == 0 && group_violations == 0 && errors == 0,
        detail: format!(
            "{trials} random class-size vectors (half grouped): {cap_violations} cap violations, {partition_violations} non-partitions, {group_violations} split groups, {errors} errors"
        ),
    }
}

fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse_text(include_str!("../../../configs/desk.cfg")).unwrap();
    cfg.data_dir = None;
    cfg.manifest = None;
    cfg
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn learning_signal(root: &Path) -> Outcome {
    // labeled corpus plus a larger, disjoint unlabeled pool for the pretext task
    let ds = synth_dataset(&root.join("data"), 8, 20, 32, 2024).unwrap();
    let split = split_capped(&ds, 4, false, 0).unwrap();
    let data = SplitData::from_dataset(&ds, &split).unwrap();
    let unlabeled: Vec<_> = synth_images(8, 60, 32, 99).unwrap().into_iter().map(|(img, _)| img).collect();
    let base = desk_config();

    let mut ratios = Vec::new();
    let mut slowest = 0.0f64;
    let (mut pre_f1, mut rand_f1) = (Vec::new(), Vec::new());
    let mut first_ckpt = None;
    for seed in 0..3u64 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let t = Instant::now();
        let pre = pretrain_on_images(&cfg, &unlabeled, &root.join(format!("pre{seed}")), None).unwrap();
        slowest = slowest.max(t.elapsed().as_secs_f64());
        ratios.push(pre.history.last().unwrap().loss / pre.history[0].loss);
        first_ckpt.get_or_insert(pre.checkpoint.clone());

        cfg.label_fraction = 0.1;
        for (init, out) in [(Some(pre.checkpoint), &mut pre_f1), (None, &mut rand_f1)] {
            let tag = if init.is_some() { "mae" } else { "scratch" };
            cfg.init = init;
            let ft = finetune_on(&cfg, &data, &root.join(format!("ft_{tag}{seed}"))).unwrap();
            let (report, _) = evaluate(&ft.model, &data.test, 8, cfg.eval_batch).unwrap();
            out.push(report.f1);
        }
    }

    let mut cfg = base;
    cfg.init = first_ckpt;
    cfg.finetune_aug = maevit_core::augment::AugMode::CropOnly;
    cfg.mix = false;
    let full = finetune_on(&cfg, &data, &root.join("ft_full")).unwrap();

    let worst_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    let (mp, mr) = (median(pre_f1.clone()), median(rand_f1.clone()));
    let pass = worst_ratio <= 0.5 && slowest < PRETRAIN_BUDGET_SECS && mp >= mr && full.train_report.accuracy == 1.0;
    Outcome {
        name: "desk-scale learning signal",
        pass,
        detail: format!(
            "final/first pre-text loss {:?} (need ≤ 0.5, {} epochs, slowest {slowest:.0}s); 10% labels test macro-F1 pre-trained {pre_f1:.3?} median {mp:.3} vs scratch {rand_f1:.3?} median {mr:.3}; full-label train accuracy {:.4}",
            ratios.iter().map(|r| format!("{r:.5}")).collect::<Vec<_>>(),
            base_epochs(),
            full.train_report.accuracy
        ),
    }
}

fn base_epochs() -> usize {
    desk_config().pretrain_epochs
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn run_everything(root: &Path, run: &Path, manifest: &Path) {
    let mut cfg = desk_config();
    cfg.pretrain_epochs = 4;
    cfg.pretrain_warmup = 1;
    cfg.epochs = 4;
    cfg.warmup = 1;
    cfg.seed = 17;
    cfg.data_dir = Some(root.join("data"));
    cfg.manifest = Some(manifest.to_path_buf());
    let pre = cmd_pretrain(&cfg, &run.join("pre"), None).unwrap();
    cmd_pretrain(&cfg, &run.join("resumed"), Some(&run.join("pre/pretrain_e0002.ckpt"))).unwrap();
    let mut ft_cfg = cfg.clone();
    ft_cfg.init = Some(pre.checkpoint.clone());
    let ft = cmd_finetune(&ft_cfg, &run.join("ft")).unwrap();
    cmd_eval(&ft.best_checkpoint, manifest, Split::Test, &run.join("eval"), 16).unwrap();
    cmd_cka(&pre.checkpoint, &ft.best_checkpoint, manifest, 300, 0, &run.join("cka")).unwrap();
    cmd_attn(&ft.best_checkpoint, manifest, 2, 0, &run.join("attn")).unwrap();
    cfg.pretrain_epochs = 2;
    cfg.epochs = 2;
    let values = ["0.4", "0.6"].map(String::from);
    cmd_sweep(&cfg, SweepAxis::MaskRatio, &values, &[0, 1], &run.join("sweep")).unwrap();
}

fn determinism(root: &Path) -> Outcome {
    let ds = synth_dataset(&root.join("data"), 4, 10, 32, 5).unwrap();
    let split = split_capped(&ds, 4, false, 0).unwrap();
    let manifest = root.join("manifest.csv");
    write_manifest(&manifest, &ds, &split).unwrap();
    let work = root.join("run");
    for name in ["a", "b"] {
        run_everything(root, &work, &manifest);
        fs::rename(&work, root.join(name)).unwrap();
    }
    let (fa, fb) = (files_under(&root.join("a")), files_under(&root.join("b")));
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| fs::read(root.join("a").join(f)).ok() != fs::read(root.join("b").join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let csvs = fa.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")).count();
    let ckpts = fa.iter().filter(|f| f.extension().is_some_and(|e| e == "ckpt")).count();
    Outcome {
        name: "determinism",
        pass: fa == fb && differing.is_empty() && csvs > 0 && ckpts > 0,
        detail: format!(
            "pretrain, resume, finetune, eval, cka, attn and sweep run twice: {} files ({csvs} CSV, {ckpts} checkpoints), {} differ{}",
            fa.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {differing:?}") }
        ),
    }
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let criteria: Vec<Box<dyn Fn() -> Outcome>> = vec![
        Box::new(gradient_correctness),
        Box::new(masked_loss_contract),
        Box::new(architecture_fidelity),
        Box::new(metrics_oracle),
        Box::new(cka_checks),
        Box::new(learning_rate_rules),
        Box::new(split_rule),
        Box::new(|| learning_signal(&tmp.path().join("learning"))),
        Box::new(|| determinism(&tmp.path().join("determinism"))),
    ];
    println!("\nacceptance: {} criteria", criteria.len());
    let mut unexpected = Vec::new();
    let mut passed = 0;
    for run in &criteria {
        let t = Instant::now();
        let o = run();
        let gap = DOCUMENTED_GAPS.iter().find(|(n, _)| *n == o.name);
        println!(
            "{} {}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail,
            t.elapsed().as_secs_f64()
        );
        match (o.pass, gap) {
            (true, None) => passed += 1,
            (false, Some((_, why))) => println!("     documented gap: {why}"),
            (true, Some(_)) => {
                passed += 1;
                unexpected.push(format!("{} passes but is listed as a documented gap", o.name));
            }
            (false, None) => unexpected.push(o.name.to_string()),
        }
    }
    println!("summary: {passed}/{} criteria pass", criteria.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected: {unexpected:?}");
        ExitCode::FAILURE
    }
}
