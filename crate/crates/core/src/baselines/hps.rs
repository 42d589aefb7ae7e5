use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{proba_from_logit, BackboneConfig, Batch, Bound, Linear, Method, Mlp, Model, ParamSet};
use crate::numcore::{Tape, Tensor2, Var};
use crate::scalar::Scalar;

/// Hard parameter sharing: one backbone, one linear head per slice plus the
/// base head. Only the base head predicts.
///
/// Slice `i`'s loss is multiplied by `alphas[i]`; plain HPS uses all ones
/// and the manual baseline raises it for underperforming slices.
#[derive(Debug, Clone, PartialEq)]
pub struct HpsModel<S> {
    backbone_cfg: BackboneConfig,
    k: usize,
    alphas: Vec<f64>,
    params: ParamSet<S>,
    backbone: Mlp,
    heads: Vec<Linear>,
}

impl<S: Scalar> HpsModel<S> {
    pub fn new(backbone_cfg: BackboneConfig, k: usize, seed: u64) -> Result<Self> {
        backbone_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Mlp::init(&mut params, "backbone", &backbone_cfg, &mut rng);
        let heads = (0..=k)
            .map(|i| {
                let tag = if i == k {
                    "base".to_string()
                } else {
                    format!("s{}", i + 1)
                };
                Linear::init(&mut params, &format!("head.{tag}"), backbone_cfg.d, 1, &mut rng)
            })
            .collect();
        Ok(Self {
            backbone_cfg,
            k,
            alphas: vec![1.0; k + 1],
            params,
            backbone,
            heads,
        })
    }

    pub fn from_config_json(v: &serde_json::Value) -> Result<Self> {
        let k = v["k"]
            .as_u64()
            .ok_or_else(|| Error::Parse("HPS config needs `k`".into()))? as usize;
        let mut m = Self::new(serde_json::from_value(v["backbone"].clone())?, k, 0)?;
        if let Some(a) = v.get("alphas") {
            m.set_alphas(serde_json::from_value(a.clone())?)?;
        }
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Loss multipliers for the `k` slice heads plus base (base entry is kept at 1 by callers).
    pub fn set_alphas(&mut self, alphas: Vec<f64>) -> Result<()> {
        if alphas.len() != self.k + 1 || alphas.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!(
                "need {} positive loss multipliers, got {alphas:?}",
                self.k + 1
            )));
        }
        self.alphas = alphas;
        Ok(())
    }

    /// Manual tuning is in effect when any multiplier differs from 1.
    pub fn is_manual(&self) -> bool {
        self.alphas.iter().any(|&a| a != 1.0)
    }

    /// `n × (k+1)` head logits, base last.
    pub fn head_logits(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let z = self.backbone.forward(tape, bound, x)?;
        let outs = self
            .heads
            .iter()
            .map(|h| h.forward(tape, bound, z))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&outs)
    }
}

impl<S: Scalar> Model<S> for HpsModel<S> {
    fn method(&self) -> Method {
        if self.is_manual() {
            Method::Manual
        } else {
            Method::Hps
        }
    }

    fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    fn loss(&self, tape: &mut Tape<S>, bound: &Bound, batch: &Batch<S>) -> Result<Var> {
        let n = batch.len();
        let width = self.k + 1;
        let lambda = batch.lambda()?;
        if lambda.shape() != (n, width) {
            return Err(Error::shape(format!(
                "slice matrix is {}x{}, HPS expects {n}x{width}",
                lambda.rows(),
                lambda.cols()
            )));
        }
        let x = tape.constant(batch.x.clone());
        let logits = self.head_logits(tape, bound, x)?;
        let inv_n = S::one() / S::lit(n as f64);
        let weights = Tensor2::from_fn(n, width, |r, c| lambda.get(r, c) * S::lit(self.alphas[c]) * inv_n);
        let y_wide = Tensor2::from_fn(n, width, |r, _| batch.y.get(r, 0));
        tape.bce_with_logits(logits, y_wide, weights)
    }

    fn proba_var(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let z = self.backbone.forward(tape, bound, x)?;
        let logit = self.heads[self.k].forward(tape, bound, z)?;
        Ok(proba_from_logit(tape, logit))
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "backbone": self.backbone_cfg, "k": self.k, "alphas": self.alphas })
    }
}
