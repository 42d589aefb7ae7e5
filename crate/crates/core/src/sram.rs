//! Slice-residual attention model.
//!
//! A shared backbone maps `x` to `z`. For each of the `k` slices plus the
//! trailing base slice there is an indicator head `q_i = W_q,i·z`, an expert
//! map `r_i = W_r,i·z`, and a prediction `p_i = g(r_i)` through one shared
//! head `g`. Attention weights `a = softmax(Q + |P|)` mix the experts into
//! `z' = R·a`, and the final head `h(z')` makes the prediction. SFs are
//! used only as training targets for the indicator heads and as masks on
//! the expert losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{proba_from_logit, BackboneConfig, Batch, Bound, Linear, Method, Mlp, Model, ParamSet};
use crate::numcore::{bce_with_logits, Tape, Tensor2, Var};
use crate::scalar::Scalar;

/// Output dimension of every head; only binary tasks are supported.
pub const OUTPUT_DIM: usize = 1;

/// How the attention scores are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reweighting {
    /// `softmax(Q + |P|)`
    #[default]
    Full,
    /// `1 / (k + 1)` for every slice.
    Uniform,
    /// `softmax(Q)`
    IndicatorOnly,
    /// `softmax(|P|)`
    ConfidenceOnly,
}

impl Reweighting {
    pub const ALL: [Reweighting; 4] = [
        Reweighting::Uniform,
        Reweighting::IndicatorOnly,
        Reweighting::ConfidenceOnly,
        Reweighting::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Reweighting::Full => "full",
            Reweighting::Uniform => "uniform",
            Reweighting::IndicatorOnly => "indicator_only",
            Reweighting::ConfidenceOnly => "confidence_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SramConfig {
    /// Slice count, excluding the base slice.
    pub k: usize,
    /// Expert representation size `d'`.
    pub d_prime: usize,
    #[serde(default)]
    pub reweighting: Reweighting,
    /// Divide each slice's prediction loss by its member count in the batch
    /// instead of the batch size.
    #[serde(default)]
    pub per_slice_normalization: bool,
}

impl SramConfig {
    pub fn new(k: usize, d_prime: usize) -> Self {
        Self {
            k,
            d_prime,
            reweighting: Reweighting::Full,
            per_slice_normalization: false,
        }
    }

    pub fn with_reweighting(mut self, mode: Reweighting) -> Self {
        self.reweighting = mode;
        self
    }
}

/// Per-example intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<S> {
    pub z: Vec<S>,
    /// Indicator logits, base slice last.
    pub q: Vec<S>,
    /// Slice prediction logits, base slice last.
    pub p: Vec<S>,
    /// `d' × (k+1)` expert representations, one column per slice.
    pub r: Tensor2<S>,
    pub a: Vec<S>,
    pub z_prime: Vec<S>,
    pub base_logit: S,
}

/// Tape nodes of a batched forward pass; each is `n × ·`.
#[derive(Debug, Clone, Copy)]
pub struct TraceVars {
    pub z: Var,
    pub q: Var,
    pub p: Var,
    /// `n × (k+1)·d'`, slice blocks side by side.
    pub r: Var,
    pub a: Var,
    pub z_prime: Var,
    pub base_logit: Var,
}

/// Batch-averaged loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub base: Var,
    pub ind: Var,
    pub pred: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SramModel<S> {
    backbone_cfg: BackboneConfig,
    cfg: SramConfig,
    params: ParamSet<S>,
    backbone: Mlp,
    indicators: Vec<Linear>,
    experts: Vec<Linear>,
    shared_pred: Linear,
    head: Linear,
}

impl<S: Scalar> SramModel<S> {
    pub fn new(backbone_cfg: BackboneConfig, cfg: SramConfig, seed: u64) -> Result<Self> {
        backbone_cfg.validate()?;
        if cfg.d_prime == 0 {
            return Err(Error::Config("d' must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Mlp::init(&mut params, "backbone", &backbone_cfg, &mut rng);
        let d = backbone_cfg.d;
        let mut indicators = Vec::with_capacity(cfg.k + 1);
        let mut experts = Vec::with_capacity(cfg.k + 1);
        for i in 0..=cfg.k {
            let tag = slice_tag(i, cfg.k);
            indicators.push(Linear::init(
                &mut params,
                &format!("indicator.{tag}"),
                d,
                OUTPUT_DIM,
                &mut rng,
            ));
            experts.push(Linear::init(
                &mut params,
                &format!("expert.{tag}"),
                d,
                cfg.d_prime,
                &mut rng,
            ));
        }
        let shared_pred = Linear::init(&mut params, "slice_pred", cfg.d_prime, OUTPUT_DIM, &mut rng);
        let head = Linear::init(&mut params, "head", cfg.d_prime, OUTPUT_DIM, &mut rng);
        Ok(Self {
            backbone_cfg,
            cfg,
            params,
            backbone,
            indicators,
            experts,
            shared_pred,
            head,
        })
    }

    pub fn from_config_json(v: &serde_json::Value) -> Result<Self> {
        let backbone_cfg = serde_json::from_value(v["backbone"].clone())?;
        let cfg = serde_json::from_value(v["sram"].clone())?;
        Self::new(backbone_cfg, cfg, 0)
    }

    pub fn config(&self) -> &SramConfig {
        &self.cfg
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        &self.backbone_cfg
    }

    pub fn k(&self) -> usize {
        self.cfg.k
    }

    pub fn set_reweighting(&mut self, mode: Reweighting) {
        self.cfg.reweighting = mode;
    }

    /// Parameter name prefix of slice `i`'s expert map (`k` is the base slice).
    pub fn expert_prefix(&self, i: usize) -> String {
        format!("expert.{}.", slice_tag(i, self.cfg.k))
    }

    pub fn indicator_prefix(&self, i: usize) -> String {
        format!("indicator.{}.", slice_tag(i, self.cfg.k))
    }

    pub fn batch_forward(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<TraceVars> {
        let n = tape.value(x).rows();
        if tape.value(x).cols() != self.backbone_cfg.input_dim {
            return Err(Error::shape(format!(
                "input has {} features, model expects {}",
                tape.value(x).cols(),
                self.backbone_cfg.input_dim
            )));
        }
        let z = self.backbone.forward(tape, bound, x)?;
        let mut qs = Vec::with_capacity(self.cfg.k + 1);
        let mut ps = Vec::with_capacity(self.cfg.k + 1);
        let mut rs = Vec::with_capacity(self.cfg.k + 1);
        for (ind, exp) in self.indicators.iter().zip(&self.experts) {
            qs.push(ind.forward(tape, bound, z)?);
            let r = exp.forward(tape, bound, z)?;
            ps.push(self.shared_pred.forward(tape, bound, r)?);
            rs.push(r);
        }
        let q = tape.concat(&qs)?;
        let p = tape.concat(&ps)?;
        let r = tape.concat(&rs)?;
        let scores = match self.cfg.reweighting {
            Reweighting::Full => {
                let conf = tape.abs(p);
                tape.add(q, conf)?
            }
            Reweighting::IndicatorOnly => q,
            Reweighting::ConfidenceOnly => tape.abs(p),
            Reweighting::Uniform => tape.constant(Tensor2::zeros(n, self.cfg.k + 1)),
        };
        let a = tape.softmax_rows(scores)?;
        let z_prime = tape.attend(a, r)?;
        let base_logit = self.head.forward(tape, bound, z_prime)?;
        Ok(TraceVars {
            z,
            q,
            p,
            r,
            a,
            z_prime,
            base_logit,
        })
    }

    /// The three loss terms, each averaged over the batch.
    pub fn loss_terms(&self, tape: &mut Tape<S>, trace: &TraceVars, batch: &Batch<S>) -> Result<LossTerms> {
        let n = batch.len();
        let width = self.cfg.k + 1;
        let lambda = batch.lambda()?;
        if lambda.shape() != (n, width) {
            return Err(Error::shape(format!(
                "slice matrix is {}x{}, model expects {n}x{width}",
                lambda.rows(),
                lambda.cols()
            )));
        }
        let inv_n = S::one() / S::lit(n as f64);
        let base = tape.bce_with_logits(trace.base_logit, batch.y.clone(), Tensor2::full(n, 1, inv_n))?;
        let ind = tape.bce_with_logits(trace.q, lambda.clone(), Tensor2::full(n, width, inv_n))?;

        let y_wide = Tensor2::from_fn(n, width, |r, _| batch.y.get(r, 0));
        let pred_weights = if self.cfg.per_slice_normalization {
            let counts = lambda.sum_rows();
            Tensor2::from_fn(n, width, |r, c| {
                let m = counts.get(0, c);
                if m > S::zero() {
                    lambda.get(r, c) / m
                } else {
                    S::zero()
                }
            })
        } else {
            lambda.scale(inv_n)
        };
        let pred = tape.bce_with_logits(trace.p, y_wide, pred_weights)?;
        Ok(LossTerms { base, ind, pred })
    }

    /// Single-example forward pass.
    pub fn forward(&self, x: &[S]) -> Result<ForwardTrace<S>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constants(&mut tape);
        let xv = tape.constant(Tensor2::row(x.to_vec()));
        let t = self.batch_forward(&mut tape, &bound, xv)?;
        let d_prime = self.cfg.d_prime;
        let r_flat = tape.value(t.r);
        let r = Tensor2::from_fn(d_prime, self.cfg.k + 1, |row, col| {
            r_flat.get(0, col * d_prime + row)
        });
        Ok(ForwardTrace {
            z: tape.value(t.z).data().to_vec(),
            q: tape.value(t.q).data().to_vec(),
            p: tape.value(t.p).data().to_vec(),
            r,
            a: tape.value(t.a).data().to_vec(),
            z_prime: tape.value(t.z_prime).data().to_vec(),
            base_logit: tape.scalar_value(t.base_logit),
        })
    }

    /// `n × (k+1)` matrix of `sigmoid(q_i)`.
    pub fn indicator_probs(&self, x: &Tensor2<S>) -> Result<Tensor2<S>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constants(&mut tape);
        let xv = tape.constant(x.clone());
        let t = self.batch_forward(&mut tape, &bound, xv)?;
        let probs = tape.sigmoid(t.q);
        Ok(tape.value(probs).clone())
    }

    /// Attention weights for every row of `x`.
    pub fn attention(&self, x: &Tensor2<S>) -> Result<Tensor2<S>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constants(&mut tape);
        let xv = tape.constant(x.clone());
        let t = self.batch_forward(&mut tape, &bound, xv)?;
        Ok(tape.value(t.a).clone())
    }
}

fn slice_tag(i: usize, k: usize) -> String {
    if i == k {
        "base".to_string()
    } else {
        format!("s{}", i + 1)
    }
}

impl<S: Scalar> Model<S> for SramModel<S> {
    fn method(&self) -> Method {
        Method::Sbl
    }

    fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    fn loss(&self, tape: &mut Tape<S>, bound: &Bound, batch: &Batch<S>) -> Result<Var> {
        let x = tape.constant(batch.x.clone());
        let trace = self.batch_forward(tape, bound, x)?;
        let terms = self.loss_terms(tape, &trace, batch)?;
        let partial = tape.add(terms.base, terms.ind)?;
        tape.add(partial, terms.pred)
    }

    fn proba_var(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let trace = self.batch_forward(tape, bound, x)?;
        Ok(proba_from_logit(tape, trace.base_logit))
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "backbone": self.backbone_cfg, "sram": self.cfg })
    }
}

fn check_lambda_row<S: Scalar>(trace: &ForwardTrace<S>, lambda_row: &[S]) -> Result<()> {
    if lambda_row.len() != trace.q.len() {
        return Err(Error::shape(format!(
            "slice row has {} entries, model has {} slices including base",
            lambda_row.len(),
            trace.q.len()
        )));
    }
    Ok(())
}

/// `Σ_i bce(q_i, λ_i)` over all heads, base included.
pub fn loss_ind<S: Scalar>(trace: &ForwardTrace<S>, lambda_row: &[S]) -> Result<S> {
    check_lambda_row(trace, lambda_row)?;
    trace
        .q
        .iter()
        .zip(lambda_row)
        .map(|(&q, &l)| bce_with_logits(q, l))
        .sum()
}

/// `Σ_i λ_i · bce(p_i, y)`; masked heads contribute nothing.
pub fn loss_pred<S: Scalar>(trace: &ForwardTrace<S>, lambda_row: &[S], y: S) -> Result<S> {
    check_lambda_row(trace, lambda_row)?;
    let mut total = S::zero();
    for (&p, &l) in trace.p.iter().zip(lambda_row) {
        if l != S::zero() {
            total = total + l * bce_with_logits(p, y)?;
        }
    }
    Ok(total)
}

/// `bce(h(z'), y)`.
pub fn loss_base<S: Scalar>(trace: &ForwardTrace<S>, y: S) -> Result<S> {
    bce_with_logits(trace.base_logit, y)
}

/// Unweighted sum of the three terms.
pub fn loss_train<S: Scalar>(trace: &ForwardTrace<S>, lambda_row: &[S], y: S) -> Result<S> {
    Ok(loss_base(trace, y)? + loss_ind(trace, lambda_row)? + loss_pred(trace, lambda_row, y)?)
}
