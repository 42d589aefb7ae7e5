//! Overall and per-slice F1, parameter counting, and seed aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BackboneConfig, Method, Model};
use crate::scalar::Scalar;

/// Positive-class F1 × 100. A zero denominator scores 0.
pub fn f1(preds: &[u8], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        0.0
    } else {
        100.0 * (2 * tp) as f64 / denom as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub name: String,
    pub f1: f64,
    pub support: usize,
    /// F1 minus the reference model's F1 on the same slice.
    pub lift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub overall_f1: f64,
    pub slices: Vec<SliceScore>,
}

impl SliceReport {
    pub fn mean_slice_f1(&self) -> f64 {
        if self.slices.is_empty() {
            return 0.0;
        }
        self.slices.iter().map(|s| s.f1).sum::<f64>() / self.slices.len() as f64
    }

    /// Fills `lift` relative to `reference`, matching slices by name.
    pub fn with_lift(mut self, reference: &SliceReport) -> Self {
        for s in &mut self.slices {
            s.lift = reference
                .slices
                .iter()
                .find(|r| r.name == s.name)
                .map(|r| s.f1 - r.f1);
        }
        self
    }
}

/// Overall F1 on every row, and F1 restricted to each slice's members.
pub fn slice_f1(preds: &[u8], labels: &[u8], slices: &[Vec<bool>], names: &[String]) -> Result<SliceReport> {
    if names.len() != slices.len() {
        return Err(Error::shape("one name per slice required"));
    }
    let overall_f1 = f1(preds, labels)?;
    let mut out = Vec::with_capacity(slices.len());
    for (members, name) in slices.iter().zip(names) {
        if members.len() != preds.len() {
            return Err(Error::shape(format!("slice `{name}` has wrong length")));
        }
        let (p, l): (Vec<u8>, Vec<u8>) = members
            .iter()
            .zip(preds.iter().zip(labels))
            .filter(|(&m, _)| m)
            .map(|(_, (&p, &l))| (p, l))
            .unzip();
        out.push(SliceScore {
            name: name.clone(),
            f1: f1(&p, &l)?,
            support: p.len(),
            lift: None,
        });
    }
    Ok(SliceReport {
        overall_f1,
        slices: out,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Parameters inside any backbone (MoE has one per expert).
    pub backbone: usize,
    pub heads: usize,
    pub total: usize,
    pub asymptotic: String,
}

pub fn asymptotic_class(method: Method) -> &'static str {
    match method {
        Method::Vanilla | Method::Dp => "O(M+r)",
        Method::Hps | Method::Manual => "O(M+kr)",
        Method::Moe => "O(kM+kr)",
        Method::Sbl => "O(M+krd')",
    }
}

/// Exact counts by enumerating the model's tensors.
pub fn count_params<S: Scalar, M: Model<S> + ?Sized>(model: &M) -> ParamCount {
    let params = model.params();
    let total = params.count();
    let backbone: usize = params
        .iter()
        .filter(|p| p.name.starts_with("backbone.") || p.name.contains(".backbone."))
        .map(|p| p.value.len())
        .sum();
    ParamCount {
        backbone,
        heads: total - backbone,
        total,
        asymptotic: asymptotic_class(model.method()).to_string(),
    }
}

/// Closed-form parameter counts from layer shapes.
pub mod closed_form {
    use super::BackboneConfig;

    fn mlp(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Backbone size `M`.
    pub fn backbone(cfg: &BackboneConfig) -> usize {
        mlp(&cfg.widths())
    }

    pub fn vanilla(cfg: &BackboneConfig) -> usize {
        backbone(cfg) + (cfg.d + 1)
    }

    pub fn hps(cfg: &BackboneConfig, k: usize) -> usize {
        backbone(cfg) + (k + 1) * (cfg.d + 1)
    }

    /// Indicator head `(d+1)` plus expert map `(d+1)·d'`.
    pub fn sbl_per_slice(d: usize, d_prime: usize) -> usize {
        (d + 1) * (d_prime + 1)
    }

    pub fn sbl(cfg: &BackboneConfig, k: usize, d_prime: usize) -> usize {
        backbone(cfg) + (k + 1) * sbl_per_slice(cfg.d, d_prime) + 2 * (d_prime + 1)
    }

    pub fn moe_gate(cfg: &BackboneConfig, k: usize) -> usize {
        let mut widths = vec![cfg.input_dim];
        widths.extend(&cfg.hidden);
        widths.push(k + 1);
        mlp(&widths)
    }

    pub fn moe(cfg: &BackboneConfig, k: usize) -> usize {
        (k + 1) * vanilla(cfg) + moe_gate(cfg, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two values.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MeanStd { mean, std, n }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub overall: MeanStd,
    pub mean_slice: MeanStd,
    pub slices: Vec<(String, MeanStd)>,
}

/// Mean and std of every metric across seeds. Slices are matched by name
/// in the order of the first report.
pub fn aggregate(reports: &[SliceReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Domain("nothing to aggregate".into()))?;
    let overall = mean_std(&reports.iter().map(|r| r.overall_f1).collect::<Vec<_>>());
    let mean_slice = mean_std(&reports.iter().map(|r| r.mean_slice_f1()).collect::<Vec<_>>());
    let mut slices = Vec::new();
    for s in &first.slices {
        let vals = reports
            .iter()
            .map(|r| {
                r.slices
                    .iter()
                    .find(|x| x.name == s.name)
                    .map(|x| x.f1)
                    .ok_or_else(|| Error::Domain(format!("slice `{}` missing from a report", s.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        slices.push((s.name.clone(), mean_std(&vals)));
    }
    Ok(AggregateReport {
        overall,
        mean_slice,
        slices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_cases() {
        assert_eq!(f1(&[1, 0, 1], &[1, 0, 1]).unwrap(), 100.0);
        assert_eq!(f1(&[0, 0, 0], &[1, 0, 0]).unwrap(), 0.0);
        assert_eq!(f1(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 50.0);
        assert_eq!(f1(&[0, 0], &[0, 0]).unwrap(), 0.0);
        assert!(f1(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn full_slice_equals_overall() {
        let preds = [1, 0, 1, 1, 0, 0, 1];
        let labels = [1, 1, 0, 1, 0, 1, 1];
        let r = slice_f1(&preds, &labels, &[vec![true; 7]], &["all".into()]).unwrap();
        assert_eq!(r.slices[0].f1, r.overall_f1);
        assert_eq!(r.slices[0].support, 7);
    }

    #[test]
    fn slice_restriction() {
        let preds = [1, 0, 1, 0];
        let labels = [1, 1, 0, 0];
        let r = slice_f1(&preds, &labels, &[vec![true, true, false, false]], &["s".into()]).unwrap();
        // tp=1, fn=1 → 2/3
        assert!((r.slices[0].f1 - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lift_against_reference() {
        let a = SliceReport {
            overall_f1: 90.0,
            slices: vec![SliceScore {
                name: "s_1".into(),
                f1: 80.0,
                support: 3,
                lift: None,
            }],
        };
        let b = SliceReport {
            overall_f1: 88.0,
            slices: vec![SliceScore {
                name: "s_1".into(),
                f1: 50.0,
                support: 3,
                lift: None,
            }],
        };
        assert_eq!(a.with_lift(&b).slices[0].lift, Some(30.0));
    }

    #[test]
    fn single_report_has_zero_std() {
        let r = SliceReport {
            overall_f1: 91.0,
            slices: vec![SliceScore {
                name: "s".into(),
                f1: 40.0,
                support: 9,
                lift: None,
            }],
        };
        let agg = aggregate(std::slice::from_ref(&r)).unwrap();
        assert_eq!(agg.overall.std, 0.0);
        assert_eq!(agg.overall.mean, 91.0);
        assert_eq!(agg.slices[0].1.std, 0.0);
    }

    #[test]
    fn vanilla_count_by_hand() {
        let cfg = BackboneConfig {
            input_dim: 2,
            hidden: vec![13],
            d: 13,
            ..Default::default()
        };
        assert_eq!(
            closed_form::vanilla(&cfg),
            (2 * 13 + 13) + (13 * 13 + 13) + (13 + 1)
        );
        assert_eq!(closed_form::vanilla(&cfg), 235);
    }
}
