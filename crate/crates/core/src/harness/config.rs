use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{
    gen_perturbed_boundary, gen_random_slices, stratified_split, Dataset, SynthSpec, DEFAULT_N,
    DEFAULT_SLICE_RADIUS,
};
use crate::error::{Error, Result};
use crate::nn::{BackboneConfig, Method};
use crate::slicing::SfSpec;
use crate::sram::Reweighting;
use crate::training::{HpGrid, Hyperparams, MethodOptions};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Overview,
    Ablate,
    Scale,
    Noise,
    Compare,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [
        ExperimentId::Overview,
        ExperimentId::Ablate,
        ExperimentId::Scale,
        ExperimentId::Noise,
        ExperimentId::Compare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Overview => "overview",
            ExperimentId::Ablate => "ablate",
            ExperimentId::Scale => "scale",
            ExperimentId::Noise => "noise",
            ExperimentId::Compare => "compare",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    PerturbedBoundary,
    RandomSlices,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n: usize,
    /// Disc radius for the perturbed-boundary data.
    pub radius: f64,
    /// Added to the run seed to seed generation and splitting.
    pub seed: u64,
    /// Train / valid / test.
    pub split: [f64; 3],
}

impl DatasetConfig {
    pub fn new(kind: DatasetKind) -> Self {
        Self {
            kind,
            n: DEFAULT_N,
            radius: DEFAULT_SLICE_RADIUS,
            seed: 0,
            split: [0.7, 0.15, 0.15],
        }
    }

    pub fn synth_spec(&self, run_seed: u64) -> SynthSpec {
        let seed = self.seed.wrapping_add(run_seed);
        match self.kind {
            DatasetKind::PerturbedBoundary => SynthSpec::perturbed_boundary(self.n, self.radius, seed),
            DatasetKind::RandomSlices => SynthSpec::random_slices(self.n, 4, seed),
        }
    }

    /// Generates and splits the dataset for one run seed.
    pub fn build(&self, run_seed: u64) -> Result<Dataset> {
        let spec = self.synth_spec(run_seed);
        let ds = match self.kind {
            DatasetKind::PerturbedBoundary => gen_perturbed_boundary(&spec)?,
            DatasetKind::RandomSlices => gen_random_slices(&spec)?,
        };
        stratified_split(&ds, self.split, spec.seed)
    }
}

/// One experiment, fully specified. Every field has a per-experiment
/// default, so a config file only needs `experiment` plus what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentId,
    pub dataset: DatasetConfig,
    /// Explicit SFs; when empty, one noisy copy of every ground-truth slice
    /// is used with `sf_flip_rate`.
    pub sfs: Vec<SfSpec>,
    pub sf_flip_rate: f64,
    pub methods: Vec<Method>,
    pub backbone: BackboneConfig,
    pub hp: Hyperparams,
    pub grid: HpGrid,
    pub options: MethodOptions,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// `scale`: values of d = d'.
    pub sizes: Vec<usize>,
    /// `ablate`: attention modes to compare.
    pub modes: Vec<Reweighting>,
    /// `noise`: SF flip rates.
    pub flip_rates: Vec<f64>,
    /// `noise`: ground-truth slice (1-based) whose SF is noised.
    pub noisy_slice: usize,
    /// Cells per side of the input grid used for figures and dispersion.
    pub grid_resolution: usize,
    /// Write decision-boundary and heatmap SVGs.
    pub figures: bool,
}

impl ExperimentConfig {
    pub fn defaults(experiment: ExperimentId) -> Self {
        let mut c = Self {
            schema_version: SCHEMA_VERSION,
            experiment,
            dataset: DatasetConfig::new(DatasetKind::PerturbedBoundary),
            sfs: Vec::new(),
            sf_flip_rate: 0.0,
            methods: vec![Method::Vanilla, Method::Sbl],
            backbone: BackboneConfig::default(),
            hp: Hyperparams::default(),
            grid: HpGrid::default(),
            options: MethodOptions::default(),
            seeds: (0..5).collect(),
            out: PathBuf::from("out"),
            sizes: vec![2, 4, 8, 13, 16, 32],
            modes: Reweighting::ALL.to_vec(),
            flip_rates: vec![0.0, 0.4, 0.8],
            noisy_slice: 1,
            grid_resolution: 200,
            figures: true,
        };
        match experiment {
            ExperimentId::Overview | ExperimentId::Noise => {}
            ExperimentId::Ablate => {
                c.dataset = DatasetConfig::new(DatasetKind::RandomSlices);
                c.sf_flip_rate = 0.05;
                c.methods = vec![Method::Sbl];
                c.seeds = (0..10).collect();
            }
            ExperimentId::Scale | ExperimentId::Compare => {
                c.methods = vec![Method::Vanilla, Method::Dp, Method::Hps, Method::Moe, Method::Sbl];
            }
        }
        c
    }

    /// Defaults for the file's `experiment`, deep-merged with the file, then
    /// with `key.path=value` overrides (values parsed as JSON, else as strings).
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let file: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let exp: ExperimentId = file
            .get("experiment")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Config("config needs an `experiment` field".into()))?
            .parse()?;
        let mut v = serde_json::to_value(Self::defaults(exp))?;
        merge(&mut v, file);
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must be nonempty".into()));
        }
        if !(0.0..=1.0).contains(&self.sf_flip_rate) {
            return Err(Error::Config(format!(
                "sf_flip_rate {} outside [0, 1]",
                self.sf_flip_rate
            )));
        }
        if let Some(r) = self.flip_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("flip rate {r} outside [0, 1]")));
        }
        if self.grid_resolution < 2 {
            return Err(Error::Config("grid_resolution must be >= 2".into()));
        }
        if self.sizes.contains(&0) {
            return Err(Error::Config("sizes must be >= 1".into()));
        }
        self.backbone.validate()?;
        self.hp.validate()?;
        let probe = self.dataset.build(self.seeds[0])?;
        if self.noisy_slice == 0 || self.noisy_slice > probe.num_slices() {
            return Err(Error::Config(format!(
                "noisy_slice {} out of range 1..={}",
                self.noisy_slice,
                probe.num_slices()
            )));
        }
        for sf in &self.sfs {
            sf.build(&probe)?;
        }
        Ok(())
    }

    /// SFs for one run: the configured list, or noisy copies of the truth.
    pub fn sf_specs(&self, dataset: &Dataset, run_seed: u64) -> Vec<SfSpec> {
        if self.sfs.is_empty() {
            (1..=dataset.num_slices())
                .map(|i| {
                    SfSpec::noisy_truth(
                        format!("s_{i}"),
                        i,
                        self.sf_flip_rate,
                        run_seed.wrapping_mul(1000).wrapping_add(i as u64),
                    )
                })
                .collect()
        } else {
            self.sfs
                .iter()
                .cloned()
                .map(|mut s| {
                    s.seed = s.seed.wrapping_add(run_seed);
                    s
                })
                .collect()
        }
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// `a.b.c=value`; creates intermediate objects as needed.
pub fn apply_override(v: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    if path.is_empty() {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cur = v;
    for key in path.split('.') {
        if !cur.is_object() {
            return Err(Error::Config(format!(
                "override `{path}`: `{key}` is under a non-object"
            )));
        }
        cur = cur
            .as_object_mut()
            .expect("checked above")
            .entry(key.to_string())
            .or_insert(serde_json::Value::Null);
    }
    *cur = value;
    Ok(())
}
