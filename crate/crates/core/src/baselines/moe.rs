use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::VanillaModel;
use crate::error::{Error, Result};
use crate::nn::{BackboneConfig, Batch, Bound, Linear, Method, Mlp, Model, ParamSet};
use crate::numcore::{Tape, Tensor2, Var};
use crate::scalar::Scalar;

/// One full Vanilla model per slice (plus the base slice) combined by a
/// softmax gating network over the raw input.
///
/// The final probability is the gate-weighted sum of expert probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel<S> {
    backbone_cfg: BackboneConfig,
    k: usize,
    params: ParamSet<S>,
    experts: Vec<(Mlp, Linear)>,
    gate: Vec<Linear>,
    freeze_experts: bool,
}

pub(crate) fn expert_tag(i: usize, k: usize) -> String {
    if i == k {
        "base".to_string()
    } else {
        format!("s{}", i + 1)
    }
}

impl<S: Scalar> MoeModel<S> {
    /// Gate hidden widths follow the backbone's hidden layers.
    pub fn new(backbone_cfg: BackboneConfig, k: usize, seed: u64) -> Result<Self> {
        backbone_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let experts = (0..=k)
            .map(|i| {
                let tag = expert_tag(i, k);
                let mlp = Mlp::init(
                    &mut params,
                    &format!("expert.{tag}.backbone"),
                    &backbone_cfg,
                    &mut rng,
                );
                let head = Linear::init(
                    &mut params,
                    &format!("expert.{tag}.head"),
                    backbone_cfg.d,
                    1,
                    &mut rng,
                );
                (mlp, head)
            })
            .collect();
        let mut widths = vec![backbone_cfg.input_dim];
        widths.extend(&backbone_cfg.hidden);
        widths.push(k + 1);
        let gate = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(&mut params, &format!("gate.{i}"), w[0], w[1], &mut rng))
            .collect();
        Ok(Self {
            backbone_cfg,
            k,
            params,
            experts,
            gate,
            freeze_experts: true,
        })
    }

    /// Assembles a mixture from separately trained experts, base expert last.
    pub fn from_experts(experts: &[VanillaModel<S>], seed: u64) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::Training("mixture needs at least the base expert".into()))?;
        let mut moe = Self::new(first.backbone_config().clone(), experts.len() - 1, seed)?;
        for (i, e) in experts.iter().enumerate() {
            let tag = expert_tag(i, moe.k);
            moe.params.copy_from(e.params(), "", &format!("expert.{tag}."))?;
        }
        Ok(moe)
    }

    pub fn from_config_json(v: &serde_json::Value) -> Result<Self> {
        let k = v["k"]
            .as_u64()
            .ok_or_else(|| Error::Parse("MoE config needs `k`".into()))? as usize;
        Self::new(serde_json::from_value(v["backbone"].clone())?, k, 0)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// When false, the optimizer also updates the experts.
    pub fn set_freeze_experts(&mut self, freeze: bool) {
        self.freeze_experts = freeze;
    }

    /// `n × (k+1)` softmax gate weights.
    pub fn gate_weights(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.gate.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i + 1 < self.gate.len() {
                h = tape.relu(h);
            }
        }
        tape.softmax_rows(h)
    }

    /// `n × (k+1)` expert probabilities.
    pub fn expert_probs(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let probs = self
            .experts
            .iter()
            .map(|(mlp, head)| {
                let z = mlp.forward(tape, bound, x)?;
                let logit = head.forward(tape, bound, z)?;
                Ok(tape.sigmoid(logit))
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&probs)
    }
}

impl<S: Scalar> Model<S> for MoeModel<S> {
    fn method(&self) -> Method {
        Method::Moe
    }

    fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    fn trainable(&self, name: &str) -> bool {
        !self.freeze_experts || name.starts_with("gate.")
    }

    fn loss(&self, tape: &mut Tape<S>, bound: &Bound, batch: &Batch<S>) -> Result<Var> {
        let n = batch.len();
        let x = tape.constant(batch.x.clone());
        let p = self.proba_var(tape, bound, x)?;
        tape.bce_probs(
            p,
            batch.y.clone(),
            Tensor2::full(n, 1, S::one() / S::lit(n as f64)),
        )
    }

    fn proba_var(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let g = self.gate_weights(tape, bound, x)?;
        let probs = self.expert_probs(tape, bound, x)?;
        tape.attend(g, probs)
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "backbone": self.backbone_cfg, "k": self.k })
    }
}
