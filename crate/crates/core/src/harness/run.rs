use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentId, SCHEMA_VERSION};
use super::svg;
use crate::datasets::{Dataset, Region};
use crate::error::{Error, Result};
use crate::metrics::{self, mean_std, MeanStd, ParamCount, SliceReport};
use crate::models::AnyModel;
use crate::nn::{BackboneConfig, Method, Model};
use crate::numcore::Tensor2;
use crate::slicing::{apply_sfs, SfSpec, SliceMatrix};
use crate::training::{
    finetune, pretrain_backbone, run_seeds, MethodOptions, Prepared, Pretrained, RunRecord, Trained,
};

/// One trained model evaluated on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    /// Sweep coordinate (attention mode, size, flip rate); empty if none.
    pub variant: String,
    pub method: String,
    pub seed: u64,
    pub report: SliceReport,
    pub params: ParamCount,
    pub selected_epoch: usize,
    pub lr: f64,
    pub l2: f64,
    pub init_backbone_checksum: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub variant: String,
    pub method: String,
    pub seeds: usize,
    pub overall: MeanStd,
    pub mean_slice: MeanStd,
    pub slices: Vec<(String, MeanStd)>,
    /// Mean slice F1 minus Vanilla's in the same variant.
    pub lift: Vec<(String, f64)>,
    pub params: ParamCount,
    pub extra: BTreeMap<String, MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub experiment: ExperimentId,
    pub config: ExperimentConfig,
    pub groups: Vec<GroupSummary>,
    pub cells: Vec<CellResult>,
}

impl Summary {
    pub fn group(&self, variant: &str, method: &str) -> Option<&GroupSummary> {
        self.groups
            .iter()
            .find(|g| g.variant == variant && g.method == method)
    }
}

fn cell_label(method: &str, variant: &str) -> String {
    if variant.is_empty() {
        method.to_string()
    } else {
        format!("{method}-{variant}")
    }
}

fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join(cfg.experiment.as_str())
}

/// Dataset and Λ for one seed; `sfs` replaces the configured SFs.
pub fn prepare(cfg: &ExperimentConfig, seed: u64, sfs: Option<&[SfSpec]>) -> Result<Prepared> {
    let ds = cfg.dataset.build(seed)?;
    prepare_with(
        &ds,
        &sfs.map_or_else(|| cfg.sf_specs(&ds, seed), <[SfSpec]>::to_vec),
    )
}

fn prepare_with(ds: &Dataset, specs: &[SfSpec]) -> Result<Prepared> {
    let sfs = specs.iter().map(|s| s.build(ds)).collect::<Result<Vec<_>>>()?;
    let lambda = apply_sfs(&sfs, ds.features())?;
    Prepared::new(ds.clone(), lambda)
}

fn pretrain(
    cfg: &ExperimentConfig,
    data: &Prepared,
    backbone: &BackboneConfig,
    seed: u64,
) -> Result<Pretrained<f64>> {
    let hp = cfg.hp.clone().with_seed(cfg.hp.seed.wrapping_add(seed));
    pretrain_backbone(data, backbone, &cfg.grid, &hp)
}

fn write_cell(cfg: &ExperimentConfig, label: &str, seed: u64, trained: &Trained<f64>) -> Result<()> {
    let dir = experiment_dir(cfg).join(label).join(seed.to_string());
    fs::create_dir_all(&dir)?;
    let mut f = BufWriter::new(fs::File::create(dir.join("record.jsonl"))?);
    for r in trained.stages.iter().chain(std::iter::once(&trained.record)) {
        r.write_jsonl(&mut f)?;
    }
    trained
        .model
        .save(BufWriter::new(fs::File::create(dir.join("model.params"))?))?;
    Ok(())
}

fn write_pretrain(cfg: &ExperimentConfig, label: &str, seed: u64, record: &RunRecord) -> Result<()> {
    let dir = experiment_dir(cfg).join(label).join(seed.to_string());
    fs::create_dir_all(&dir)?;
    record.write_jsonl(BufWriter::new(fs::File::create(dir.join("record.jsonl"))?))
}

fn cell(
    cfg: &ExperimentConfig,
    data: &Prepared,
    pre: &Pretrained<f64>,
    method_label: &str,
    variant: &str,
    seed: u64,
    trained: &Trained<f64>,
) -> Result<CellResult> {
    if trained.init_backbone_checksum != pre.backbone_checksum() {
        return Err(Error::Training(format!(
            "{method_label}: fine-tuning did not start from the pretrained backbone"
        )));
    }
    write_cell(cfg, &cell_label(method_label, variant), seed, trained)?;
    Ok(CellResult {
        variant: variant.to_string(),
        method: method_label.to_string(),
        seed,
        report: data.report(&trained.model, crate::datasets::Split::Test)?,
        params: metrics::count_params(&trained.model),
        selected_epoch: trained.record.selected_epoch,
        lr: trained.record.lr,
        l2: trained.record.l2,
        init_backbone_checksum: trained.init_backbone_checksum,
        extra: BTreeMap::new(),
        notes: trained.notes.clone(),
    })
}

/// Trains `methods` from one pretrained backbone. Manual reuses the Vanilla
/// model when Vanilla is in the list.
fn train_methods(
    cfg: &ExperimentConfig,
    data: &Prepared,
    pre: &Pretrained<f64>,
    methods: &[Method],
    opts: &MethodOptions,
    variant: &str,
    seed: u64,
) -> Result<Vec<(CellResult, Trained<f64>)>> {
    let first: Vec<Method> = methods.iter().copied().filter(|&m| m != Method::Manual).collect();
    let mut done = first
        .par_iter()
        .map(|&m| {
            let t = finetune(m, data, pre, opts, None)?;
            Ok((m, t))
        })
        .collect::<Result<Vec<_>>>()?;
    if methods.contains(&Method::Manual) {
        let vanilla = done.iter().find_map(|(m, t)| match (m, &t.model) {
            (Method::Vanilla, AnyModel::Vanilla(v)) => Some(v.clone()),
            _ => None,
        });
        let t = finetune(Method::Manual, data, pre, opts, vanilla.as_ref())?;
        done.push((Method::Manual, t));
    }
    let mut out = Vec::new();
    for &m in methods {
        let (_, t) = done
            .iter()
            .find(|(dm, _)| *dm == m)
            .expect("every requested method was trained");
        out.push((cell(cfg, data, pre, m.as_str(), variant, seed, t)?, t.clone()));
    }
    Ok(out)
}

fn grid_tensor(res: usize) -> Tensor2<f64> {
    let pts = svg::grid_points(res);
    Tensor2::from_fn(pts.len(), 2, |r, c| pts[r][c])
}

fn write_figure(cfg: &ExperimentConfig, name: &str, body: &str) -> Result<()> {
    let dir = experiment_dir(cfg).join("figures");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(name), body)?;
    Ok(())
}

fn regions(cfg: &ExperimentConfig, seed: u64) -> Vec<Region> {
    cfg.dataset.synth_spec(seed).slices
}

fn run_overview_like(cfg: &ExperimentConfig) -> Result<Vec<CellResult>> {
    let per_seed = run_seeds(&cfg.seeds, |seed| {
        let data = prepare(cfg, seed, None)?;
        let pre = pretrain(cfg, &data, &cfg.backbone, seed)?;
        write_pretrain(cfg, "pretrain", seed, &pre.record)?;
        let cells = train_methods(cfg, &data, &pre, &cfg.methods, &cfg.options, "", seed)?;
        if cfg.figures && cfg.experiment == ExperimentId::Overview && seed == cfg.seeds[0] {
            let grid = grid_tensor(cfg.grid_resolution);
            for (c, t) in &cells {
                let classes = t.model.predict(&grid)?;
                let title = format!("{} decision regions (seed {seed})", c.method);
                let svg = svg::decision_map(&title, cfg.grid_resolution, &classes, &regions(cfg, seed));
                write_figure(cfg, &format!("decision_{}.svg", c.method), &svg)?;
            }
        }
        Ok(cells.into_iter().map(|(c, _)| c).collect::<Vec<_>>())
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

fn run_ablate(cfg: &ExperimentConfig) -> Result<Vec<CellResult>> {
    let per_seed = run_seeds(&cfg.seeds, |seed| {
        let data = prepare(cfg, seed, None)?;
        let pre = pretrain(cfg, &data, &cfg.backbone, seed)?;
        write_pretrain(cfg, "pretrain", seed, &pre.record)?;
        let others: Vec<Method> = cfg
            .methods
            .iter()
            .copied()
            .filter(|&m| m != Method::Sbl)
            .collect();
        let mut cells: Vec<CellResult> = train_methods(cfg, &data, &pre, &others, &cfg.options, "", seed)?
            .into_iter()
            .map(|(c, _)| c)
            .collect();
        if cfg.methods.contains(&Method::Sbl) {
            let sbl = cfg
                .modes
                .par_iter()
                .map(|&mode| {
                    let opts = MethodOptions {
                        reweighting: mode,
                        ..cfg.options.clone()
                    };
                    let t = finetune(Method::Sbl, &data, &pre, &opts, None)?;
                    cell(cfg, &data, &pre, "sbl", mode.as_str(), seed, &t)
                })
                .collect::<Result<Vec<_>>>()?;
            cells.extend(sbl);
        }
        Ok(cells)
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

fn run_scale(cfg: &ExperimentConfig) -> Result<Vec<CellResult>> {
    let per_seed = run_seeds(&cfg.seeds, |seed| {
        let data = prepare(cfg, seed, None)?;
        let mut cells = Vec::new();
        for &size in &cfg.sizes {
            let backbone = cfg.backbone.clone().with_d(size);
            let opts = MethodOptions {
                d_prime: Some(size),
                ..cfg.options.clone()
            };
            let pre = pretrain(cfg, &data, &backbone, seed)?;
            let variant = size.to_string();
            write_pretrain(cfg, &cell_label("pretrain", &variant), seed, &pre.record)?;
            cells.extend(
                train_methods(cfg, &data, &pre, &cfg.methods, &opts, &variant, seed)?
                    .into_iter()
                    .map(|(c, _)| c),
            );
        }
        Ok(cells)
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Population std of one column of `m`.
fn column_std(m: &Tensor2<f64>, col: usize) -> f64 {
    let v = m.col_vec(col);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

pub const BASE_ONLY_VARIANT: &str = "k0";
pub const INDICATOR_STD: &str = "indicator_std";

/// Noise variants are named by flip rate, e.g. `0.4`.
pub fn noise_variant(rate: f64) -> String {
    format!("{rate}")
}

fn run_noise(cfg: &ExperimentConfig) -> Result<Vec<CellResult>> {
    let slice = cfg.noisy_slice;
    let per_seed = run_seeds(&cfg.seeds, |seed| {
        let ds = cfg.dataset.build(seed)?;
        // Pretraining never reads Λ, so one backbone serves every rate.
        let base_only = Prepared::new(ds.clone(), SliceMatrix::from_columns(vec![], vec![], ds.len())?)?;
        let pre = pretrain(cfg, &base_only, &cfg.backbone, seed)?;
        write_pretrain(cfg, "pretrain", seed, &pre.record)?;
        let grid = grid_tensor(cfg.grid_resolution);

        let k0 = finetune(Method::Sbl, &base_only, &pre, &cfg.options, None)?;
        let mut cells = vec![cell(cfg, &base_only, &pre, "sbl", BASE_ONLY_VARIANT, seed, &k0)?];
        let rated = cfg
            .flip_rates
            .par_iter()
            .map(|&rate| {
                let spec = SfSpec::noisy_truth(
                    format!("s_{slice}"),
                    slice,
                    rate,
                    seed.wrapping_mul(1000).wrapping_add(slice as u64),
                );
                let data = prepare_with(&ds, &[spec])?;
                let t = finetune(Method::Sbl, &data, &pre, &cfg.options, None)?;
                let variant = noise_variant(rate);
                let mut c = cell(cfg, &data, &pre, "sbl", &variant, seed, &t)?;
                let sram = t.model.as_sram().expect("SBL model");
                let probs = sram.indicator_probs(&grid)?;
                c.extra.insert(INDICATOR_STD.into(), column_std(&probs, 0));
                if cfg.figures && seed == cfg.seeds[0] {
                    let title = format!("sigmoid(q) for s_{slice}, flip rate {rate} (seed {seed})");
                    let svg = svg::heatmap(
                        &title,
                        cfg.grid_resolution,
                        &probs.col_vec(0),
                        &regions(cfg, seed),
                    );
                    write_figure(cfg, &format!("indicator_rate{rate}.svg"), &svg)?;
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        cells.extend(rated);
        Ok(cells)
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Groups cells by (variant, method) in first-seen order.
pub fn summarize(cfg: &ExperimentConfig, cells: Vec<CellResult>) -> Result<Summary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for c in &cells {
        let k = (c.variant.clone(), c.method.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut groups = Vec::new();
    for (variant, method) in &keys {
        let members: Vec<&CellResult> = cells
            .iter()
            .filter(|c| &c.variant == variant && &c.method == method)
            .collect();
        let reports: Vec<SliceReport> = members.iter().map(|c| c.report.clone()).collect();
        let agg = metrics::aggregate(&reports)?;
        let mut extra_keys: Vec<&String> = members.iter().flat_map(|c| c.extra.keys()).collect();
        extra_keys.sort();
        extra_keys.dedup();
        let extra = extra_keys
            .into_iter()
            .map(|k| {
                let vals: Vec<f64> = members.iter().filter_map(|c| c.extra.get(k).copied()).collect();
                (k.clone(), mean_std(&vals))
            })
            .collect();
        groups.push(GroupSummary {
            variant: variant.clone(),
            method: method.clone(),
            seeds: members.len(),
            overall: agg.overall,
            mean_slice: agg.mean_slice,
            slices: agg.slices,
            lift: Vec::new(),
            params: members[0].params.clone(),
            extra,
        });
    }
    let snapshot = groups.clone();
    for g in &mut groups {
        if let Some(v) = snapshot
            .iter()
            .find(|r| r.variant == g.variant && r.method == Method::Vanilla.as_str())
        {
            g.lift = g
                .slices
                .iter()
                .filter_map(|(name, ms)| {
                    v.slices
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, vm)| (name.clone(), ms.mean - vm.mean))
                })
                .collect();
        }
    }
    Ok(Summary {
        schema_version: SCHEMA_VERSION,
        experiment: cfg.experiment,
        config: cfg.clone(),
        groups,
        cells,
    })
}

/// Columns: experiment, variant, method, seed, overall_f1, mean_slice_f1,
/// one F1 column per ground-truth slice, params_total, params_backbone,
/// params_heads, selected_epoch, lr, l2.
pub fn write_summary_csv<W: std::io::Write>(summary: &Summary, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let slice_names: Vec<String> = summary
        .cells
        .first()
        .map(|c| c.report.slices.iter().map(|s| s.name.clone()).collect())
        .unwrap_or_default();
    let mut header = vec![
        "experiment",
        "variant",
        "method",
        "seed",
        "overall_f1",
        "mean_slice_f1",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    header.extend(slice_names.iter().map(|n| format!("{n}_f1")));
    header.extend(
        [
            "params_total",
            "params_backbone",
            "params_heads",
            "selected_epoch",
            "lr",
            "l2",
        ]
        .into_iter()
        .map(String::from),
    );
    wtr.write_record(&header)?;
    for c in &summary.cells {
        let mut row = vec![
            summary.experiment.to_string(),
            c.variant.clone(),
            c.method.clone(),
            c.seed.to_string(),
            c.report.overall_f1.to_string(),
            c.report.mean_slice_f1().to_string(),
        ];
        for n in &slice_names {
            row.push(
                c.report
                    .slices
                    .iter()
                    .find(|s| &s.name == n)
                    .map_or(String::new(), |s| s.f1.to_string()),
            );
        }
        row.extend([
            c.params.total.to_string(),
            c.params.backbone.to_string(),
            c.params.heads.to_string(),
            c.selected_epoch.to_string(),
            c.lr.to_string(),
            c.l2.to_string(),
        ]);
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_summary(cfg: &ExperimentConfig, summary: &Summary) -> Result<()> {
    let dir = experiment_dir(cfg);
    fs::create_dir_all(&dir)?;
    write_summary_csv(summary, fs::File::create(dir.join("summary.csv"))?)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(summary)? + "\n",
    )?;
    Ok(())
}

/// Runs the experiment named in `cfg` and writes every artifact.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let cells = match cfg.experiment {
        ExperimentId::Overview | ExperimentId::Compare => run_overview_like(cfg)?,
        ExperimentId::Ablate => run_ablate(cfg)?,
        ExperimentId::Scale => run_scale(cfg)?,
        ExperimentId::Noise => run_noise(cfg)?,
    };
    let summary = summarize(cfg, cells)?;
    write_summary(cfg, &summary)?;
    Ok(summary)
}

pub fn load_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path)?;
    let s: Summary = serde_json::from_str(&text)?;
    if s.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "{}: schema_version {} unsupported",
            path.display(),
            s.schema_version
        )));
    }
    Ok(s)
}
