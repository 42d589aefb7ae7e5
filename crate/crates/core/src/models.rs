//! Enum dispatch over every trained model type, with save/load.

use std::io::{BufRead, Write};

use crate::baselines::{HpsModel, MoeModel, VanillaModel};
use crate::error::{Error, Result};
use crate::nn::{read_params, write_params, Batch, Bound, Method, Model, ParamSet};
use crate::numcore::{Tape, Var};
use crate::scalar::Scalar;
use crate::sram::SramModel;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel<S> {
    /// Also carries DP, which is a Vanilla model trained on soft labels.
    Vanilla(VanillaModel<S>),
    /// Also carries Manual (non-unit loss multipliers).
    Hps(HpsModel<S>),
    Moe(MoeModel<S>),
    Sbl(SramModel<S>),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Vanilla($m) => $e,
            AnyModel::Hps($m) => $e,
            AnyModel::Moe($m) => $e,
            AnyModel::Sbl($m) => $e,
        }
    };
}

impl<S: Scalar> AnyModel<S> {
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        write_params(self.method(), &self.config_json(), self.params(), w)
    }

    /// Rebuilds the architecture from the stored config, then loads every tensor.
    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let file = read_params(r)?;
        let mut model = match file.method {
            Method::Vanilla | Method::Dp => AnyModel::Vanilla(VanillaModel::from_config_json(&file.config)?),
            Method::Hps | Method::Manual => AnyModel::Hps(HpsModel::from_config_json(&file.config)?),
            Method::Moe => AnyModel::Moe(MoeModel::from_config_json(&file.config)?),
            Method::Sbl => AnyModel::Sbl(SramModel::from_config_json(&file.config)?),
        };
        if model.method() != file.method {
            return Err(Error::Parse(format!(
                "stored method `{}` does not match its config",
                file.method
            )));
        }
        file.load_into(model.params_mut())?;
        Ok(model)
    }

    pub fn as_sram(&self) -> Option<&SramModel<S>> {
        match self {
            AnyModel::Sbl(m) => Some(m),
            _ => None,
        }
    }
}

impl<S: Scalar> Model<S> for AnyModel<S> {
    fn method(&self) -> Method {
        dispatch!(self, m => m.method())
    }

    fn params(&self) -> &ParamSet<S> {
        dispatch!(self, m => m.params())
    }

    fn params_mut(&mut self) -> &mut ParamSet<S> {
        dispatch!(self, m => m.params_mut())
    }

    fn trainable(&self, name: &str) -> bool {
        dispatch!(self, m => m.trainable(name))
    }

    fn loss(&self, tape: &mut Tape<S>, bound: &Bound, batch: &Batch<S>) -> Result<Var> {
        dispatch!(self, m => m.loss(tape, bound, batch))
    }

    fn proba_var(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        dispatch!(self, m => m.proba_var(tape, bound, x))
    }

    fn config_json(&self) -> serde_json::Value {
        dispatch!(self, m => m.config_json())
    }
}
