//! Shared fixtures and oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slicekit::baselines::{HpsModel, MoeModel, VanillaModel};
use slicekit::datasets::{gen_perturbed_boundary, stratified_split, SynthSpec};
use slicekit::nn::Batch;
use slicekit::numcore::{Tape, Tensor2};
use slicekit::slicing::{apply_sfs, SlicingFunction};
use slicekit::sram::{Reweighting, SramConfig, SramModel};
use slicekit::training::Prepared;
use slicekit::{BackboneConfig, Method, Model};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Skip a case when any relu/abs input lies this close to its kink.
pub const KINK_EXCLUSION: f64 = 1e-4;

pub fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        input_dim: 2,
        hidden: vec![8],
        d: 5,
        ..Default::default()
    }
}

/// Random inputs in [-1, 1]², random labels, random memberships with the
/// base column (last) always set.
pub fn random_batch(n: usize, k: usize, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor2::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
    let y = Tensor2::from_fn(n, 1, |_, _| f64::from(rng.gen_bool(0.5) as u8));
    let lambda = Tensor2::from_fn(n, k + 1, |_, c| {
        if c == k {
            1.0
        } else {
            f64::from(rng.gen_bool(0.4) as u8)
        }
    });
    Batch {
        x,
        y,
        lambda: Some(lambda),
    }
}

pub fn sram(k: usize, mode: Reweighting, seed: u64) -> SramModel<f64> {
    SramModel::new(
        small_backbone(),
        SramConfig::new(k, 4).with_reweighting(mode),
        seed,
    )
    .unwrap()
}

/// Every model family whose gradients the tests check, keyed by a label.
pub fn families(k: usize, seed: u64) -> Vec<(String, Box<dyn Model<f64>>)> {
    let mut out: Vec<(String, Box<dyn Model<f64>>)> = Vec::new();
    for mode in Reweighting::ALL {
        out.push((format!("sbl-{}", mode.as_str()), Box::new(sram(k, mode, seed))));
    }
    out.push((
        "vanilla".into(),
        Box::new(VanillaModel::new(small_backbone(), seed).unwrap()),
    ));
    out.push((
        "hps".into(),
        Box::new(HpsModel::new(small_backbone(), k, seed).unwrap()),
    ));
    let mut manual = HpsModel::new(small_backbone(), k, seed).unwrap();
    let mut alphas = vec![1.0; k + 1];
    alphas[0] = 20.0;
    manual.set_alphas(alphas).unwrap();
    out.push(("manual".into(), Box::new(manual)));
    let mut moe = MoeModel::new(small_backbone(), k, seed).unwrap();
    moe.set_freeze_experts(false);
    out.push(("moe".into(), Box::new(moe)));
    out
}

fn loss_value(model: &dyn Model<f64>, batch: &Batch<f64>) -> f64 {
    let mut tape = Tape::new();
    let bound = model.params().bind_constants(&mut tape);
    let loss = model.loss(&mut tape, &bound, batch).unwrap();
    tape.scalar_value(loss)
}

/// Max relative error between backprop and central differences over every
/// trainable parameter entry; `None` when the batch sits near a kink.
pub fn max_grad_error(model: &mut dyn Model<f64>, batch: &Batch<f64>) -> Option<f64> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, |name| model.trainable(name));
    let loss = model.loss(&mut tape, &bound, batch).unwrap();
    // The step moves inputs to relu/abs by far less than this margin.
    if tape.kink_margin().is_some_and(|m| m < KINK_EXCLUSION) {
        return None;
    }
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<(String, Tensor2<f64>)> = model
        .params()
        .iter()
        .zip(bound.vars())
        .map(|(p, &v)| (p.name.clone(), grads.get(v)))
        .collect();
    let mut worst: f64 = 0.0;
    for (name, g) in analytic {
        if !model.trainable(&name) {
            continue;
        }
        let id = model.params().find(&name).unwrap();
        for j in 0..g.len() {
            let orig = model.params().get(id).value.data()[j];
            model.params_mut().value_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = loss_value(model, batch);
            model.params_mut().value_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = loss_value(model, batch);
            model.params_mut().value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = g.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Some(worst)
}

/// Gradient check for every family over several random batches. Returns the
/// worst error per family and how many batches were skipped near kinks.
pub fn grad_check_all(k: usize, cases: u64) -> Vec<(String, f64, usize)> {
    let mut out = Vec::new();
    for (i, (label, mut model)) in families(k, 7).into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut skipped = 0;
        for case in 0..cases {
            let batch = random_batch(20, k, 1000 * i as u64 + case);
            match max_grad_error(model.as_mut(), &batch) {
                Some(e) => worst = worst.max(e),
                None => skipped += 1,
            }
        }
        out.push((label, worst, skipped));
    }
    out
}

/// A small perturbed-boundary dataset with exact SFs.
pub fn tiny_prepared(n: usize, seed: u64) -> Prepared {
    let ds = gen_perturbed_boundary(&SynthSpec::perturbed_boundary(n, 0.2, seed)).unwrap();
    let ds = stratified_split(&ds, [0.7, 0.15, 0.15], seed).unwrap();
    let sfs: Vec<_> = (0..ds.num_slices())
        .map(|i| {
            SlicingFunction::precomputed(
                format!("s_{}", i + 1),
                ds.slice(i).iter().map(|&b| u8::from(b)).collect(),
            )
        })
        .collect();
    let lambda = apply_sfs(&sfs, ds.features()).unwrap();
    Prepared::new(ds, lambda).unwrap()
}

pub fn all_methods() -> [Method; 6] {
    [
        Method::Vanilla,
        Method::Hps,
        Method::Manual,
        Method::Moe,
        Method::Dp,
        Method::Sbl,
    ]
}

// ---- invariant oracles, each returning a short detail string on success ----

pub type Check = Result<String, String>;

fn random_x(n: usize, seed: u64) -> Tensor2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor2::from_fn(n, 2, |_, _| rng.gen_range(-1.5..1.5))
}

pub fn attention_simplex() -> Check {
    let x = random_x(500, 11);
    let mut worst: f64 = 0.0;
    for mode in Reweighting::ALL {
        for k in [1, 3, 6] {
            let a = sram(k, mode, 3 + k as u64).attention(&x).unwrap();
            for r in 0..a.rows() {
                let row = a.row_slice(r);
                if row.iter().any(|&v| v < 0.0) {
                    return Err(format!("negative weight in mode {}", mode.as_str()));
                }
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    if worst <= 1e-9 {
        Ok(format!("max |Σa − 1| = {worst:.1e}"))
    } else {
        Err(format!("max |Σa − 1| = {worst:.1e}"))
    }
}

pub fn base_only_attention() -> Check {
    let x = random_x(200, 12);
    for mode in Reweighting::ALL {
        let a = sram(0, mode, 5).attention(&x).unwrap();
        if a.cols() != 1 || a.data().iter().any(|&v| v != 1.0) {
            return Err(format!("mode {} gives a ≠ [1.0]", mode.as_str()));
        }
    }
    Ok("a = [1.0] exactly in every mode".into())
}

/// Adding the same constant to every indicator logit leaves `a` unchanged.
pub fn q_shift_invariance() -> Check {
    let x = random_x(300, 13);
    let mut worst: f64 = 0.0;
    for mode in [Reweighting::Full, Reweighting::IndicatorOnly] {
        for shift in [-4.0, 0.37, 25.0] {
            let model = sram(3, mode, 9);
            let mut shifted = model.clone();
            for i in 0..=3 {
                let name = format!("{}bias", model.indicator_prefix(i));
                let id = shifted.params().find(&name).unwrap();
                for v in shifted.params_mut().value_mut(id).data_mut() {
                    *v += shift;
                }
            }
            let a0 = model.attention(&x).unwrap();
            let a1 = shifted.attention(&x).unwrap();
            for (p, q) in a0.data().iter().zip(a1.data()) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    if worst <= 1e-9 {
        Ok(format!("max |Δa| = {worst:.1e}"))
    } else {
        Err(format!("max |Δa| = {worst:.1e}"))
    }
}

/// With λ_j ≡ 0 the prediction term sends exactly zero gradient to slice
/// j's expert map.
pub fn masked_slice_zero_gradient() -> Check {
    let k = 3;
    let j = 1;
    for mode in [Reweighting::Uniform, Reweighting::Full] {
        let model = sram(k, mode, 21);
        let mut batch = random_batch(40, k, 22);
        let lambda = batch.lambda.as_mut().unwrap();
        for r in 0..lambda.rows() {
            lambda.set(r, j, 0.0);
        }
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, |_| true);
        let x = tape.constant(batch.x.clone());
        let trace = model.batch_forward(&mut tape, &bound, x).unwrap();
        let terms = model.loss_terms(&mut tape, &trace, &batch).unwrap();
        let grads = tape.backward(terms.pred).unwrap();
        let prefix = model.expert_prefix(j);
        let mut seen = 0;
        let mut other_nonzero = false;
        for (p, &v) in model.params().iter().zip(bound.vars()) {
            let g = grads.get(v);
            if p.name.starts_with(&prefix) {
                seen += 1;
                if g.data().iter().any(|&e| e != 0.0) {
                    return Err(format!(
                        "{} has nonzero gradient in mode {}",
                        p.name,
                        mode.as_str()
                    ));
                }
            } else if p.name.starts_with("expert.") && g.data().iter().any(|&e| e != 0.0) {
                other_nonzero = true;
            }
        }
        if seen == 0 || !other_nonzero {
            return Err("oracle is vacuous: no masked or unmasked expert gradients found".into());
        }
    }
    Ok("∂ℓ_pred/∂W_r,j = 0 exactly".into())
}

fn any_model(method: Method, k: usize, seed: u64) -> slicekit::AnyModel {
    use slicekit::models::AnyModel;
    let cfg = small_backbone();
    match method {
        Method::Vanilla => AnyModel::Vanilla(VanillaModel::new(cfg, seed).unwrap()),
        Method::Dp => AnyModel::Vanilla(VanillaModel::new(cfg, seed).unwrap().relabel(Method::Dp)),
        Method::Hps => AnyModel::Hps(HpsModel::new(cfg, k, seed).unwrap()),
        Method::Manual => {
            let mut m = HpsModel::new(cfg, k, seed).unwrap();
            let mut alphas = vec![1.0; k + 1];
            alphas[0] = 50.0;
            m.set_alphas(alphas).unwrap();
            AnyModel::Hps(m)
        }
        Method::Moe => AnyModel::Moe(MoeModel::new(cfg, k, seed).unwrap()),
        Method::Sbl => AnyModel::Sbl(SramModel::new(cfg, SramConfig::new(k, 4), seed).unwrap()),
    }
}

pub fn serialization_round_trip() -> Check {
    let x = random_x(300, 31);
    for method in all_methods() {
        let model = any_model(method, 2, 32);
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = slicekit::AnyModel::load(buf.as_slice()).map_err(|e| e.to_string())?;
        if back.method() != method {
            return Err(format!("{method} reloaded as {}", back.method()));
        }
        let p0 = model.predict_proba(&x).unwrap();
        let p1 = back.predict_proba(&x).unwrap();
        if p0.iter().zip(&p1).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("{method}: predictions differ after reload"));
        }
    }
    Ok("bitwise-identical predictions for every method".into())
}

/// Pretrain + SBL fine-tune twice from the same (config, seed).
pub fn determinism() -> Check {
    use slicekit::training::{finetune, pretrain_backbone, HpGrid, Hyperparams, MethodOptions};
    let run = || {
        let data = tiny_prepared(800, 4);
        let hp = Hyperparams {
            pretrain_epochs: 8,
            finetune_epochs: 8,
            seed: 4,
            ..Default::default()
        };
        let grid = HpGrid {
            lr: vec![3e-3, 1e-2],
            l2: vec![0.0, 1e-4],
        };
        let pre = pretrain_backbone::<f64>(&data, &small_backbone(), &grid, &hp).unwrap();
        let t = finetune(Method::Sbl, &data, &pre, &MethodOptions::default(), None).unwrap();
        (pre.record.best_valid_f1, t.record.best_valid_f1)
    };
    let (a0, a1) = run();
    let (b0, b1) = run();
    let diff = (a0 - b0).abs().max((a1 - b1).abs());
    if diff <= 1e-12 {
        Ok(format!("valid F1 {a1:.4} twice (|Δ| = {diff:.1e})"))
    } else {
        Err(format!("valid F1 {a1} vs {b1}, pretrain {a0} vs {b0}"))
    }
}

/// Enumerated counts against closed forms, plus the k = 4 efficiency bound
/// on the default backbone.
pub fn parameter_counts() -> Check {
    use slicekit::metrics::{closed_form as cf, count_params};
    for cfg in [
        small_backbone(),
        BackboneConfig::default(),
        BackboneConfig::default().with_d(32),
    ] {
        for k in [0, 1, 4, 7] {
            let d_prime = cfg.d;
            let cases: [(Method, usize, Box<dyn Model<f64>>); 4] = [
                (
                    Method::Vanilla,
                    cf::vanilla(&cfg),
                    Box::new(VanillaModel::new(cfg.clone(), 1).unwrap()),
                ),
                (
                    Method::Hps,
                    cf::hps(&cfg, k),
                    Box::new(HpsModel::new(cfg.clone(), k, 1).unwrap()),
                ),
                (
                    Method::Moe,
                    cf::moe(&cfg, k),
                    Box::new(MoeModel::new(cfg.clone(), k, 1).unwrap()),
                ),
                (
                    Method::Sbl,
                    cf::sbl(&cfg, k, d_prime),
                    Box::new(SramModel::new(cfg.clone(), SramConfig::new(k, d_prime), 1).unwrap()),
                ),
            ];
            for (m, expect, model) in cases {
                let got = count_params(model.as_ref());
                if got.total != expect {
                    return Err(format!(
                        "{m} k={k} d={}: {} enumerated vs {expect} closed form",
                        cfg.d, got.total
                    ));
                }
                let bb = if m == Method::Moe {
                    (k + 1) * cf::backbone(&cfg)
                } else {
                    cf::backbone(&cfg)
                };
                if got.backbone != bb {
                    return Err(format!("{m}: backbone {} vs {bb}", got.backbone));
                }
            }
            let inc = count_params(
                &SramModel::<f64>::new(cfg.clone(), SramConfig::new(k + 1, d_prime), 1).unwrap(),
            )
            .total
                - cf::sbl(&cfg, k, d_prime);
            if inc != (cfg.d + 1) * (d_prime + 1) {
                return Err(format!("per-slice increment {inc} ≠ (d+1)(d'+1)"));
            }
        }
    }
    let cfg = BackboneConfig::default();
    let sbl = count_params(&SramModel::<f64>::new(cfg.clone(), SramConfig::new(4, cfg.d), 1).unwrap()).total;
    let moe = count_params(&MoeModel::<f64>::new(cfg.clone(), 4, 1).unwrap()).total;
    let ratio = sbl as f64 / moe as f64;
    if ratio < 0.3 {
        Ok(format!(
            "default k=4: SBL {sbl} / MoE {moe} = {ratio:.3} (< 0.3); counts match closed forms"
        ))
    } else {
        Err(format!(
            "default k=4: SBL {sbl} / MoE {moe} = {ratio:.3}, need < 0.3"
        ))
    }
}
