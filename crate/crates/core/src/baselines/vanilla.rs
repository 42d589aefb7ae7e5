use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{proba_from_logit, BackboneConfig, Batch, Bound, Linear, Method, Mlp, Model, ParamSet};
use crate::numcore::{Tape, Tensor2, Var};
use crate::scalar::Scalar;

/// Backbone plus one linear prediction head; slice-unaware.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaModel<S> {
    backbone_cfg: BackboneConfig,
    params: ParamSet<S>,
    backbone: Mlp,
    head: Linear,
    method: Method,
}

impl<S: Scalar> VanillaModel<S> {
    pub fn new(backbone_cfg: BackboneConfig, seed: u64) -> Result<Self> {
        backbone_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Mlp::init(&mut params, "backbone", &backbone_cfg, &mut rng);
        let head = Linear::init(&mut params, "head", backbone_cfg.d, 1, &mut rng);
        Ok(Self {
            backbone_cfg,
            params,
            backbone,
            head,
            method: Method::Vanilla,
        })
    }

    pub fn from_config_json(v: &serde_json::Value) -> Result<Self> {
        let mut m = Self::new(serde_json::from_value(v["backbone"].clone())?, 0)?;
        if let Some(method) = v.get("method").and_then(|m| m.as_str()) {
            m.method = Method::parse(method)?;
        }
        Ok(m)
    }

    /// Same architecture reported under another method name (the DP
    /// baseline trains this model on probabilistic labels).
    pub fn relabel(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        &self.backbone_cfg
    }

    pub fn logit(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let z = self.backbone.forward(tape, bound, x)?;
        self.head.forward(tape, bound, z)
    }
}

impl<S: Scalar> Model<S> for VanillaModel<S> {
    fn method(&self) -> Method {
        self.method
    }

    fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    fn loss(&self, tape: &mut Tape<S>, bound: &Bound, batch: &Batch<S>) -> Result<Var> {
        let n = batch.len();
        let x = tape.constant(batch.x.clone());
        let logit = self.logit(tape, bound, x)?;
        let w = Tensor2::full(n, 1, S::one() / S::lit(n as f64));
        tape.bce_with_logits(logit, batch.y.clone(), w)
    }

    fn proba_var(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let logit = self.logit(tape, bound, x)?;
        Ok(proba_from_logit(tape, logit))
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "backbone": self.backbone_cfg, "method": self.method })
    }
}
