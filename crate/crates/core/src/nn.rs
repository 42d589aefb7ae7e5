//! Parameter storage, linear layers, the MLP backbone, and the common
//! [`Model`] interface shared by every method.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{sigmoid, Tape, Tensor2, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor2<S>,
    /// Weights take ℓ2 regularization; biases do not.
    pub is_weight: bool,
}

/// Ordered, named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor2<S>, is_weight: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            is_weight,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2<S> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_prefixed(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Puts every parameter on `tape`; those rejected by `trainable` become constants.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: impl Fn(&str) -> bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| {
                    if trainable(&p.name) {
                        tape.leaf(p.value.clone())
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect(),
        }
    }

    pub fn bind_constants(&self, tape: &mut Tape<S>) -> Bound {
        self.bind(tape, |_| false)
    }

    /// FNV-1a over names, shapes, and the bit patterns of every value whose
    /// name starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            let local = p.name.strip_prefix(prefix).unwrap_or(&p.name);
            eat(local.as_bytes());
            eat(&(p.value.rows() as u64).to_le_bytes());
            eat(&(p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copies every parameter under `src_prefix` in `src` onto the matching
    /// name under `dst_prefix` here.
    pub fn copy_from(&mut self, src: &ParamSet<S>, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for p in src.params.iter().filter(|p| p.name.starts_with(src_prefix)) {
            let name = format!("{dst_prefix}{}", &p.name[src_prefix.len()..]);
            let id = self
                .find(&name)
                .ok_or_else(|| Error::shape(format!("no parameter `{name}` to copy into")))?;
            let dst = &mut self.params[id.0].value;
            if dst.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "`{name}`: shape {:?} vs {:?}",
                    dst.shape(),
                    p.value.shape()
                )));
            }
            *dst = p.value.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

/// Tape variables for a [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor2<S> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor2::from_fn(rows, cols, |_, _| S::lit(rng.gen_range(-limit..=limit)))
}

/// `x·W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<S>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.push(format!("{name}.weight"), glorot(inputs, outputs, rng), true);
        let bias = params.push(format!("{name}.bias"), Tensor2::zeros(1, outputs), false);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, bound.var(self.weight), bound.var(self.bias))
    }

    pub fn param_count(&self) -> usize {
        (self.inputs + 1) * self.outputs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Shape of the shared feature extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Output representation size `d`.
    pub d: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for BackboneConfig {
    /// Two layers ending in a 13-wide ReLU representation.
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: vec![DEFAULT_HIDDEN],
            d: 13,
            activation: Activation::Relu,
        }
    }
}

/// Default width of the backbone's hidden layer.
pub const DEFAULT_HIDDEN: usize = 128;

impl BackboneConfig {
    pub fn with_d(mut self, d: usize) -> Self {
        self.d = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid backbone shape {self:?}")));
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.d);
        w
    }
}

/// MLP with an activation after every layer, including the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<S>,
        prefix: &str,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Self {
        let widths = cfg.widths();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(params, &format!("{prefix}.{i}"), w[0], w[1], rng))
            .collect();
        Self {
            layers,
            activation: cfg.activation,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, bound, h)?;
            h = match self.activation {
                Activation::Relu => tape.relu(h),
            };
        }
        Ok(h)
    }
}

/// Method family, used for serialization headers and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Hps,
    Manual,
    Moe,
    Dp,
    Sbl,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Hps => "hps",
            Method::Manual => "manual",
            Method::Moe => "moe",
            Method::Dp => "dp",
            Method::Sbl => "sbl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One training batch. `lambda` carries the slice matrix rows when the
/// method needs them.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub x: Tensor2<S>,
    /// `n×1` targets in [0, 1].
    pub y: Tensor2<S>,
    pub lambda: Option<Tensor2<S>>,
}

impl<S: Scalar> Batch<S> {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch<S> {
        Batch {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            lambda: self.lambda.as_ref().map(|l| l.select_rows(idx)),
        }
    }

    pub(crate) fn lambda(&self) -> Result<&Tensor2<S>> {
        self.lambda
            .as_ref()
            .ok_or_else(|| Error::Training("this method needs slice memberships in the batch".into()))
    }
}

/// Interface every trainable method implements.
pub trait Model<S: Scalar>: Send + Sync {
    fn method(&self) -> Method;

    fn params(&self) -> &ParamSet<S>;

    fn params_mut(&mut self) -> &mut ParamSet<S>;

    /// Whether the optimizer may update this parameter.
    fn trainable(&self, _name: &str) -> bool {
        true
    }

    /// Scalar training loss for `batch`, already averaged over the batch.
    fn loss(&self, tape: &mut Tape<S>, bound: &Bound, batch: &Batch<S>) -> Result<Var>;

    /// `n×1` probability of class 1 for every row of `x`.
    fn proba_var(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var>;

    /// JSON describing the architecture, enough to rebuild an empty model.
    fn config_json(&self) -> serde_json::Value;

    fn predict_proba(&self, x: &Tensor2<S>) -> Result<Vec<S>> {
        let mut tape = Tape::new();
        let bound = self.params().bind_constants(&mut tape);
        let xv = tape.constant(x.clone());
        let p = self.proba_var(&mut tape, &bound, xv)?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Class 1 iff probability > 0.5.
    fn predict(&self, x: &Tensor2<S>) -> Result<Vec<u8>> {
        let half = S::lit(0.5);
        Ok(self
            .predict_proba(x)?
            .into_iter()
            .map(|p| u8::from(p > half))
            .collect())
    }
}

/// Probability head on top of a logit node.
pub(crate) fn proba_from_logit<S: Scalar>(tape: &mut Tape<S>, logit: Var) -> Var {
    tape.sigmoid(logit)
}

/// Convenience for single values outside the tape.
pub fn probability<S: Scalar>(logit: S) -> S {
    sigmoid(logit)
}

pub const PARAMS_MAGIC: &str = "slicekit-params";
pub const PARAMS_VERSION: u32 = 1;

/// Text serialization: a magic/version line, `method <name>`,
/// `config <json>`, then for every tensor a `param <name> <rows> <cols>`
/// line followed by one line of row-major values at 17 significant digits.
pub fn write_params<S: Scalar, W: Write>(
    method: Method,
    config: &serde_json::Value,
    params: &ParamSet<S>,
    mut w: W,
) -> Result<()> {
    writeln!(w, "{PARAMS_MAGIC} {PARAMS_VERSION}")?;
    writeln!(w, "method {}", method.as_str())?;
    writeln!(w, "config {}", serde_json::to_string(config)?)?;
    for p in params.iter() {
        writeln!(w, "param {} {} {}", p.name, p.value.rows(), p.value.cols())?;
        let line: Vec<String> = p
            .value
            .data()
            .iter()
            .map(|v| format!("{:.16e}", v.as_f64()))
            .collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Parsed contents of a parameter file.
#[derive(Debug, Clone)]
pub struct ParamFile {
    pub method: Method,
    pub config: serde_json::Value,
    pub tensors: HashMap<String, Tensor2<f64>>,
    pub order: Vec<String>,
}

pub fn read_params<R: BufRead>(r: R) -> Result<ParamFile> {
    let mut lines = r.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Parse(format!("unexpected end of file, expected {what}")))
    };
    let magic = next("header")?;
    if magic != format!("{PARAMS_MAGIC} {PARAMS_VERSION}") {
        return Err(Error::Parse(format!("bad header `{magic}`")));
    }
    let method_line = next("method line")?;
    let method = Method::parse(
        method_line
            .strip_prefix("method ")
            .ok_or_else(|| Error::Parse("missing method line".into()))?,
    )?;
    let cfg_line = next("config line")?;
    let config = serde_json::from_str(
        cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| Error::Parse("missing config line".into()))?,
    )?;
    let mut tensors = HashMap::new();
    let mut order = Vec::new();
    loop {
        let header = match next("param") {
            Ok(h) if h.trim().is_empty() => continue,
            Ok(h) => h,
            Err(_) => break,
        };
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "param" {
            return Err(Error::Parse(format!("bad param line `{header}`")));
        }
        let rows: usize = parts[2].parse().map_err(|e| Error::Parse(format!("{e}")))?;
        let cols: usize = parts[3].parse().map_err(|e| Error::Parse(format!("{e}")))?;
        let values = next("values")?
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("`{v}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        tensors.insert(parts[1].to_string(), Tensor2::new(rows, cols, values)?);
        order.push(parts[1].to_string());
    }
    Ok(ParamFile {
        method,
        config,
        tensors,
        order,
    })
}

impl ParamFile {
    /// Overwrites every parameter of `params` with the stored tensor of the same name.
    pub fn load_into<S: Scalar>(&self, params: &mut ParamSet<S>) -> Result<()> {
        if params.len() != self.tensors.len() {
            return Err(Error::Parse(format!(
                "file holds {} tensors, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let t = self
                .tensors
                .get(&p.name)
                .ok_or_else(|| Error::Parse(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Parse(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }
}
