//! Minibatch optimization, checkpoint selection, the backbone grid search,
//! and per-method fine-tuning from a shared pretrained backbone.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, LabelModelConfig, VanillaModel};
use crate::datasets::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics;
use crate::models::AnyModel;
use crate::nn::{BackboneConfig, Batch, Method, Model, ParamSet};
use crate::numcore::{Tape, Tensor2};
use crate::scalar::Scalar;
use crate::slicing::SliceMatrix;
use crate::sram::{Reweighting, SramConfig, SramModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// β = 0.9 / 0.999, ε = 1e-8.
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            l2: 0.0,
            batch_size: 64,
            pretrain_epochs: 200,
            finetune_epochs: 100,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if self.pretrain_epochs == 0 || self.finetune_epochs == 0 {
            return Err(Error::Config("epoch budgets must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Learning-rate × ℓ2 search space for backbone pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpGrid {
    pub lr: Vec<f64>,
    pub l2: Vec<f64>,
}

impl Default for HpGrid {
    fn default() -> Self {
        Self {
            lr: vec![1e-3, 3e-3, 1e-2],
            l2: vec![0.0, 1e-4, 1e-3],
        }
    }
}

impl HpGrid {
    /// Cells in row-major (lr outer, l2 inner) order.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.lr
            .iter()
            .flat_map(|&lr| self.l2.iter().map(move |&l2| (lr, l2)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept: highest validation F1, earliest on ties.
    pub selected_epoch: usize,
    pub best_valid_f1: f64,
    pub wall_time_secs: f64,
}

impl RunRecord {
    /// One `{"type":"epoch",..}` line per epoch, then one `{"type":"summary",..}` line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.epochs {
            let mut v = serde_json::to_value(e)?;
            v["type"] = "epoch".into();
            v["label"] = self.label.clone().into();
            writeln!(w, "{}", serde_json::to_string(&v)?)?;
        }
        let summary = serde_json::json!({
            "type": "summary",
            "label": self.label,
            "lr": self.lr,
            "l2": self.l2,
            "seed": self.seed,
            "selected_epoch": self.selected_epoch,
            "best_valid_f1": self.best_valid_f1,
            "wall_time_secs": self.wall_time_secs,
        });
        writeln!(w, "{}", serde_json::to_string(&summary)?)?;
        Ok(())
    }

    pub fn selected(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.selected_epoch)
    }
}

/// Features and hard labels for checkpoint selection.
#[derive(Debug, Clone)]
pub struct EvalSet<S> {
    pub x: Tensor2<S>,
    pub y: Vec<u8>,
}

impl<S: Scalar> EvalSet<S> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

pub fn evaluate_f1<S: Scalar, M: Model<S> + ?Sized>(model: &M, eval: &EvalSet<S>) -> Result<f64> {
    metrics::f1(&model.predict(&eval.x)?, &eval.y)
}

/// Batch loss (plus ℓ2 on trainable weights) and gradients for every
/// parameter; `None` for frozen ones.
pub fn loss_and_grads<S: Scalar, M: Model<S> + ?Sized>(
    model: &M,
    batch: &Batch<S>,
    l2: f64,
) -> Result<(f64, Vec<Option<Tensor2<S>>>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, |name| model.trainable(name));
    let loss = model.loss(&mut tape, &bound, batch)?;
    let grads = tape.backward(loss)?;
    let mut value = tape.scalar_value(loss).as_f64();
    let l2s = S::lit(l2);
    let mut out = Vec::with_capacity(model.params().len());
    for (p, &v) in model.params().iter().zip(bound.vars()) {
        if !model.trainable(&p.name) {
            out.push(None);
            continue;
        }
        let mut g = grads.get(v);
        if l2 > 0.0 && p.is_weight {
            value += l2 * p.value.data().iter().map(|w| w.as_f64().powi(2)).sum::<f64>();
            let two = S::lit(2.0);
            for (gi, &wi) in g.data_mut().iter_mut().zip(p.value.data()) {
                *gi = *gi + two * l2s * wi;
            }
        }
        out.push(Some(g));
    }
    Ok((value, out))
}

struct OptState<S> {
    m: Vec<Tensor2<S>>,
    v: Vec<Tensor2<S>>,
    t: i32,
}

impl<S: Scalar> OptState<S> {
    fn new(params: &ParamSet<S>) -> Self {
        let zeros: Vec<_> = params
            .iter()
            .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamSet<S>, grads: &[Option<Tensor2<S>>], hp: &Hyperparams) {
        self.t += 1;
        let lr = S::lit(hp.lr);
        let (b1, b2, eps) = (S::lit(0.9), S::lit(0.999), S::lit(1e-8));
        let c1 = S::one() - b1.powi(self.t);
        let c2 = S::one() - b2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            match hp.optimizer {
                Optimizer::Sgd => {
                    for (w, &gi) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - lr * gi;
                    }
                }
                Optimizer::Adam => {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (j, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = b1 * m[j] + (S::one() - b1) * gi;
                        v[j] = b2 * v[j] + (S::one() - b2) * gi * gi;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *w = *w - lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch as u64)
        .rotate_left(17)
}

/// Trains `model` for `epochs` passes and restores the checkpoint with the
/// best validation F1. With an empty validation set the last epoch is kept.
pub fn fit<S: Scalar, M: Model<S> + ?Sized>(
    model: &mut M,
    train: &Batch<S>,
    valid: &EvalSet<S>,
    hp: &Hyperparams,
    epochs: usize,
    label: &str,
) -> Result<RunRecord> {
    hp.validate()?;
    if epochs == 0 {
        return Err(Error::Config("epoch budget must be >= 1".into()));
    }
    if train.is_empty() {
        return Err(Error::Training(format!("`{label}`: empty training set")));
    }
    let start = Instant::now();
    let n = train.len();
    let mut opt = OptState::new(model.params());
    let mut best: Option<(f64, usize, ParamSet<S>)> = None;
    let mut records = Vec::with_capacity(epochs);
    let mut last_finite: Option<f64> = None;
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(hp.seed, epoch)));
        let mut total = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let batch = train.select(chunk);
            let (loss, grads) = loss_and_grads(&*model, &batch, hp.l2)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = Some(loss);
            total += loss * chunk.len() as f64;
            opt.step(model.params_mut(), &grads, hp);
        }
        if !model.params().all_finite() {
            return Err(Error::Diverged {
                epoch,
                last_finite_loss: last_finite,
            });
        }
        let valid_f1 = if valid.is_empty() {
            0.0
        } else {
            evaluate_f1(&*model, valid)?
        };
        records.push(EpochRecord {
            epoch,
            train_loss: total / n as f64,
            valid_f1,
        });
        let improves = match &best {
            None => true,
            Some((f, _, _)) => valid_f1 > *f || valid.is_empty(),
        };
        if improves {
            best = Some((valid_f1, epoch, model.params().clone()));
        }
    }
    let (best_valid_f1, selected_epoch, params) = best.expect("at least one epoch");
    *model.params_mut() = params;
    Ok(RunRecord {
        label: label.to_string(),
        lr: hp.lr,
        l2: hp.l2,
        seed: hp.seed,
        epochs: records,
        selected_epoch,
        best_valid_f1,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// A split dataset together with the SF outputs used for training.
///
/// Λ steers training only; evaluation uses the ground-truth slices.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub lambda: SliceMatrix,
}

impl Prepared {
    pub fn new(dataset: Dataset, lambda: SliceMatrix) -> Result<Self> {
        if lambda.rows() != dataset.len() {
            return Err(Error::shape(format!(
                "slice matrix has {} rows, dataset {}",
                lambda.rows(),
                dataset.len()
            )));
        }
        Ok(Self { dataset, lambda })
    }

    pub fn k(&self) -> usize {
        self.lambda.k()
    }

    /// Batch over `split` with Λ attached; `soft_y` (indexed like the split)
    /// replaces the hard labels.
    pub fn batch<S: Scalar>(&self, split: Split, soft_y: Option<&[f64]>) -> Batch<S> {
        let idx = self.dataset.indices(split);
        let x = self.dataset.features().select_rows(&idx).cast();
        let y = match soft_y {
            Some(s) => Tensor2::column(s.iter().map(|&v| S::lit(v)).collect()),
            None => Tensor2::column(
                idx.iter()
                    .map(|&i| S::lit(self.dataset.labels()[i] as f64))
                    .collect(),
            ),
        };
        Batch {
            x,
            y,
            lambda: Some(self.lambda.select_rows(&idx).to_tensor()),
        }
    }

    pub fn eval_set<S: Scalar>(&self, split: Split) -> EvalSet<S> {
        let idx = self.dataset.indices(split);
        EvalSet {
            x: self.dataset.features().select_rows(&idx).cast(),
            y: idx.iter().map(|&i| self.dataset.labels()[i]).collect(),
        }
    }

    /// Positions within `split` where Λ column `col` is 1.
    pub fn members(&self, split: Split, col: usize) -> Vec<usize> {
        self.dataset
            .indices(split)
            .iter()
            .enumerate()
            .filter(|(_, &i)| self.lambda.get(i, col) == 1)
            .map(|(pos, _)| pos)
            .collect()
    }

    /// Per-slice report of `model` on `split` against ground-truth slices.
    pub fn report<S: Scalar, M: Model<S> + ?Sized>(
        &self,
        model: &M,
        split: Split,
    ) -> Result<metrics::SliceReport> {
        let sub = self.dataset.subset(split);
        let preds = model.predict(&sub.features().cast())?;
        metrics::slice_f1(&preds, sub.labels(), sub.slices(), &sub.slice_names())
    }
}

/// Best backbone of the grid search, shared by every method of a run.
#[derive(Debug, Clone)]
pub struct Pretrained<S> {
    pub model: VanillaModel<S>,
    pub hp: Hyperparams,
    pub record: RunRecord,
    /// (lr, l2, best validation F1) for every cell, in grid order.
    pub grid: Vec<(f64, f64, f64)>,
}

impl<S: Scalar> Pretrained<S> {
    pub fn backbone_checksum(&self) -> u64 {
        self.model.params().checksum("backbone.")
    }
}

/// Grid search over (lr, ℓ2) for a Vanilla model; cells run in parallel and
/// ties go to the earlier cell.
pub fn pretrain_backbone<S: Scalar>(
    data: &Prepared,
    backbone: &BackboneConfig,
    grid: &HpGrid,
    base: &Hyperparams,
) -> Result<Pretrained<S>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let train = data.batch::<S>(Split::Train, None);
    let valid = data.eval_set::<S>(Split::Valid);
    let results = cells
        .par_iter()
        .map(|&(lr, l2)| {
            let hp = Hyperparams {
                lr,
                l2,
                ..base.clone()
            };
            let mut m = VanillaModel::<S>::new(backbone.clone(), base.seed)?;
            let rec = fit(&mut m, &train, &valid, &hp, hp.pretrain_epochs, "pretrain")?;
            Ok((m, hp, rec))
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = results
        .iter()
        .map(|(_, hp, r)| (hp.lr, hp.l2, r.best_valid_f1))
        .collect();
    let mut best = 0;
    for (i, (_, _, r)) in results.iter().enumerate() {
        if r.best_valid_f1 > results[best].2.best_valid_f1 {
            best = i;
        }
    }
    let (model, hp, record) = results.into_iter().nth(best).expect("nonempty grid");
    Ok(Pretrained {
        model,
        hp,
        record,
        grid: summary,
    })
}

/// Method-specific knobs for fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodOptions {
    /// `None` means `d' = d`.
    pub d_prime: Option<usize>,
    pub reweighting: Reweighting,
    pub per_slice_normalization: bool,
    pub alpha_grid: Vec<f64>,
    /// F1 gap below overall that marks a slice as underperforming.
    pub manual_gap: f64,
    pub label_model: LabelModelConfig,
}

impl Default for MethodOptions {
    fn default() -> Self {
        Self {
            d_prime: None,
            reweighting: Reweighting::Full,
            per_slice_normalization: false,
            alpha_grid: vec![2.0, 20.0, 50.0, 100.0],
            manual_gap: 5.0,
            label_model: LabelModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained<S> {
    pub model: AnyModel<S>,
    pub record: RunRecord,
    /// Checksum of the backbone weights the model started from.
    pub init_backbone_checksum: u64,
    /// Records of auxiliary stages (MoE experts, Manual search, ...).
    pub stages: Vec<RunRecord>,
    pub notes: Vec<String>,
}

/// Fine-tunes `method` from the pretrained backbone with the pretrained
/// run's hyperparameters and `hp.finetune_epochs`. Heads start fresh.
///
/// Manual needs the fine-tuned Vanilla model; pass it as `vanilla` or it is
/// trained here.
pub fn finetune<S: Scalar>(
    method: Method,
    data: &Prepared,
    pretrained: &Pretrained<S>,
    opts: &MethodOptions,
    vanilla: Option<&VanillaModel<S>>,
) -> Result<Trained<S>> {
    let hp = &pretrained.hp;
    let cfg = pretrained.model.backbone_config().clone();
    let k = data.k();
    let checksum = pretrained.backbone_checksum();
    let train = data.batch::<S>(Split::Train, None);
    let valid = data.eval_set::<S>(Split::Valid);
    let label = method.as_str();
    match method {
        Method::Vanilla => {
            let mut m = VanillaModel::new(cfg, hp.seed.wrapping_add(1))?;
            m.params_mut()
                .copy_from(pretrained.model.params(), "backbone.", "backbone.")?;
            let init = m.params().checksum("backbone.");
            let record = fit(&mut m, &train, &valid, hp, hp.finetune_epochs, label)?;
            Ok(Trained {
                model: AnyModel::Vanilla(m),
                record,
                init_backbone_checksum: init,
                stages: vec![],
                notes: vec![],
            })
        }
        Method::Hps => {
            let mut m = baselines::HpsModel::new(cfg, k, hp.seed.wrapping_add(2))?;
            m.params_mut()
                .copy_from(pretrained.model.params(), "backbone.", "backbone.")?;
            let init = m.params().checksum("backbone.");
            let record = fit(&mut m, &train, &valid, hp, hp.finetune_epochs, label)?;
            Ok(Trained {
                model: AnyModel::Hps(m),
                record,
                init_backbone_checksum: init,
                stages: vec![],
                notes: vec![],
            })
        }
        Method::Manual => {
            let owned;
            let vanilla = match vanilla {
                Some(v) => v,
                None => {
                    let t = finetune(Method::Vanilla, data, pretrained, opts, None)?;
                    owned = match t.model {
                        AnyModel::Vanilla(v) => v,
                        _ => unreachable!("vanilla fine-tune returns a vanilla model"),
                    };
                    &owned
                }
            };
            baselines::train_manual(data, pretrained, vanilla, opts)
        }
        Method::Moe => baselines::train_moe(data, pretrained),
        Method::Dp => baselines::train_dp_baseline(data, pretrained, &opts.label_model),
        Method::Sbl => {
            let d_prime = opts.d_prime.unwrap_or(cfg.d);
            let sc = SramConfig {
                k,
                d_prime,
                reweighting: opts.reweighting,
                per_slice_normalization: opts.per_slice_normalization,
            };
            let mut m = SramModel::new(cfg, sc, hp.seed.wrapping_add(5))?;
            m.params_mut()
                .copy_from(pretrained.model.params(), "backbone.", "backbone.")?;
            let init = m.params().checksum("backbone.");
            let record = fit(&mut m, &train, &valid, hp, hp.finetune_epochs, label)?;
            debug_assert_eq!(init, checksum);
            Ok(Trained {
                model: AnyModel::Sbl(m),
                record,
                init_backbone_checksum: init,
                stages: vec![],
                notes: vec![],
            })
        }
    }
}

/// Runs `job` once per seed in parallel, results in seed order.
pub fn run_seeds<T: Send>(seeds: &[u64], job: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed required".into()));
    }
    seeds.par_iter().map(|&s| job(s)).collect()
}
