//! Comparison methods: Vanilla, hard parameter sharing (HPS), Manual loss
//! reweighting, mixture of experts (MoE), and a data-programming (DP) label
//! model feeding a Vanilla model.

mod hps;
pub mod label_model;
mod moe;
mod vanilla;

pub use hps::HpsModel;
pub use label_model::{
    fit_label_model, synthetic_slice_lfs, AggregationRule, LabelModelConfig, LabelModelParams, LfVotes, Vote,
};
pub use moe::MoeModel;
pub use vanilla::VanillaModel;

use rayon::prelude::*;

use crate::datasets::Split;
use crate::error::{Error, Result};
use crate::metrics::{self, ParamCount};
use crate::models::AnyModel;
use crate::nn::{Method, Model};
use crate::scalar::Scalar;
use crate::training::{self, fit, MethodOptions, Prepared, Pretrained, Trained};

pub fn train_vanilla<S: Scalar>(data: &Prepared, pretrained: &Pretrained<S>) -> Result<Trained<S>> {
    training::finetune(Method::Vanilla, data, pretrained, &MethodOptions::default(), None)
}

pub fn train_hps<S: Scalar>(data: &Prepared, pretrained: &Pretrained<S>) -> Result<Trained<S>> {
    training::finetune(Method::Hps, data, pretrained, &MethodOptions::default(), None)
}

/// Slices (Λ columns, base excluded) where `vanilla` trails its own overall
/// validation F1 by at least `gap`.
pub fn underperforming_slices<S: Scalar>(
    data: &Prepared,
    vanilla: &VanillaModel<S>,
    gap: f64,
) -> Result<Vec<usize>> {
    let valid = data.eval_set::<S>(Split::Valid);
    let preds = vanilla.predict(&valid.x)?;
    let overall = metrics::f1(&preds, &valid.y)?;
    let mut out = Vec::new();
    for j in 0..data.k() {
        let m = data.members(Split::Valid, j);
        let p: Vec<u8> = m.iter().map(|&i| preds[i]).collect();
        let l: Vec<u8> = m.iter().map(|&i| valid.y[i]).collect();
        if overall - metrics::f1(&p, &l)? >= gap {
            out.push(j);
        }
    }
    Ok(out)
}

/// HPS with per-slice loss multipliers. Each underperforming slice in turn
/// tries every α of the grid with the others held at their current best;
/// candidates are compared on validation overall F1, earliest on ties.
pub fn train_manual<S: Scalar>(
    data: &Prepared,
    pretrained: &Pretrained<S>,
    vanilla: &VanillaModel<S>,
    opts: &MethodOptions,
) -> Result<Trained<S>> {
    if opts.alpha_grid.is_empty() {
        return Err(Error::Config("manual α grid is empty".into()));
    }
    let under = underperforming_slices(data, vanilla, opts.manual_gap)?;
    let hps = train_hps(data, pretrained)?;
    if under.is_empty() {
        let mut t = hps;
        t.notes
            .push("no slice trails overall F1 by the trigger gap; returning plain HPS".into());
        return Ok(t);
    }
    let k = data.k();
    let hp = &pretrained.hp;
    let train = data.batch::<S>(Split::Train, None);
    let valid = data.eval_set::<S>(Split::Valid);
    let mut alphas = vec![1.0; k + 1];
    let mut best: Option<(HpsModel<S>, training::RunRecord)> = None;
    let mut stages = Vec::new();
    let mut init = 0;
    for &j in &under {
        let candidates = opts
            .alpha_grid
            .par_iter()
            .map(|&a| {
                let mut al = alphas.clone();
                al[j] = a;
                let mut m = HpsModel::new(
                    pretrained.model.backbone_config().clone(),
                    k,
                    hp.seed.wrapping_add(2),
                )?;
                m.set_alphas(al)?;
                m.params_mut()
                    .copy_from(pretrained.model.params(), "backbone.", "backbone.")?;
                let c = m.params().checksum("backbone.");
                let label = format!("manual.{}.alpha{a}", data.lambda.names()[j]);
                let r = fit(&mut m, &train, &valid, hp, hp.finetune_epochs, &label)?;
                Ok((m, r, c))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut pick = 0;
        for (i, (_, r, _)) in candidates.iter().enumerate() {
            if r.best_valid_f1 > candidates[pick].1.best_valid_f1 {
                pick = i;
            }
        }
        alphas[j] = opts.alpha_grid[pick];
        for (i, (m, r, c)) in candidates.into_iter().enumerate() {
            stages.push(r.clone());
            if i == pick {
                init = c;
                best = Some((m, r));
            }
        }
    }
    let (model, mut record) = best.expect("at least one underperforming slice");
    record.label = Method::Manual.as_str().to_string();
    let names = &data.lambda.names();
    Ok(Trained {
        model: AnyModel::Hps(model),
        record,
        init_backbone_checksum: init,
        stages,
        notes: vec![format!(
            "underperforming: {}; α = {:?}",
            under
                .iter()
                .map(|&j| names[j].as_str())
                .collect::<Vec<_>>()
                .join(", "),
            alphas
        )],
    })
}

/// Stage 1 trains one Vanilla expert per Λ column on its members (the base
/// expert sees everything); stage 2 freezes them and trains the gate.
pub fn train_moe<S: Scalar>(data: &Prepared, pretrained: &Pretrained<S>) -> Result<Trained<S>> {
    let k = data.k();
    let hp = &pretrained.hp;
    let cfg = pretrained.model.backbone_config().clone();
    let train = data.batch::<S>(Split::Train, None);
    let valid = data.eval_set::<S>(Split::Valid);
    let names = data.lambda.names();
    for (i, name) in names.iter().enumerate() {
        if data.members(Split::Train, i).is_empty() {
            return Err(Error::Training(format!(
                "MoE expert for slice `{name}` has no training examples"
            )));
        }
    }
    let experts = (0..=k)
        .into_par_iter()
        .map(|i| {
            let mut e = VanillaModel::<S>::new(cfg.clone(), hp.seed.wrapping_add(10 + i as u64))?;
            e.params_mut()
                .copy_from(pretrained.model.params(), "backbone.", "backbone.")?;
            let c = e.params().checksum("backbone.");
            let tr = train.select(&data.members(Split::Train, i));
            let va = valid.select(&data.members(Split::Valid, i));
            let r = fit(
                &mut e,
                &tr,
                &va,
                hp,
                hp.finetune_epochs,
                &format!("moe.expert.{}", names[i]),
            )?;
            Ok((e, r, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let init = experts[0].2;
    if experts.iter().any(|(_, _, c)| *c != init) {
        return Err(Error::Training(
            "MoE experts started from different backbones".into(),
        ));
    }
    let models: Vec<_> = experts.iter().map(|(e, _, _)| e.clone()).collect();
    let mut moe = MoeModel::from_experts(&models, hp.seed.wrapping_add(3))?;
    moe.set_freeze_experts(true);
    let record = fit(
        &mut moe,
        &train,
        &valid,
        hp,
        hp.finetune_epochs,
        Method::Moe.as_str(),
    )?;
    Ok(Trained {
        model: AnyModel::Moe(moe),
        record,
        init_backbone_checksum: init,
        stages: experts.into_iter().map(|(_, r, _)| r).collect(),
        notes: vec![],
    })
}

/// Label model over SF-derived LFs on the training split, then a Vanilla
/// model fit to the resulting probabilistic labels.
pub fn train_dp_baseline<S: Scalar>(
    data: &Prepared,
    pretrained: &Pretrained<S>,
    cfg: &LabelModelConfig,
) -> Result<Trained<S>> {
    let hp = &pretrained.hp;
    let idx = data.dataset.indices(Split::Train);
    let votes = synthetic_slice_lfs(
        &data.dataset.features().select_rows(&idx),
        &data.lambda.select_rows(&idx),
    )?;
    let lm = fit_label_model(&votes, cfg)?;
    let soft = lm.posteriors(&votes);
    let train = data.batch::<S>(Split::Train, Some(&soft));
    let valid = data.eval_set::<S>(Split::Valid);
    let mut m = VanillaModel::new(
        pretrained.model.backbone_config().clone(),
        hp.seed.wrapping_add(4),
    )?
    .relabel(Method::Dp);
    m.params_mut()
        .copy_from(pretrained.model.params(), "backbone.", "backbone.")?;
    let init = m.params().checksum("backbone.");
    let record = fit(
        &mut m,
        &train,
        &valid,
        hp,
        hp.finetune_epochs,
        Method::Dp.as_str(),
    )?;
    Ok(Trained {
        model: AnyModel::Vanilla(m),
        record,
        init_backbone_checksum: init,
        stages: vec![],
        notes: vec![format!(
            "label model accuracies: {}",
            lm.names
                .iter()
                .zip(&lm.accuracies)
                .map(|(n, a)| format!("{n}={a:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        )],
    })
}

pub fn count_all_params<S: Scalar, M: Model<S> + ?Sized>(model: &M) -> ParamCount {
    metrics::count_params(model)
}
