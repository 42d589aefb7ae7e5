//! Acceptance thresholds evaluated on experiment summaries.

use serde::{Deserialize, Serialize};

use super::config::ExperimentId;
use super::run::{noise_variant, Summary, BASE_ONLY_VARIANT, INDICATOR_STD};
use crate::sram::Reweighting;

/// SBL − Vanilla overall F1 on the perturbed-boundary data.
pub const OVERVIEW_OVERALL_GAIN: f64 = 0.5;
/// SBL − Vanilla mean slice F1 on the perturbed-boundary data.
pub const OVERVIEW_SLICE_GAIN: f64 = 20.0;
/// Full attention may trail a single-mechanism variant by at most this.
pub const ABLATION_SLACK: f64 = 0.5;
pub const ABLATION_MIN_SEEDS: usize = 10;
/// SBL − HPS mean slice F1 at d = d' = 13.
pub const SCALE_HPS_GAIN: f64 = 5.0;
/// SBL may trail MoE mean slice F1 by at most this.
pub const SCALE_MOE_WINDOW: f64 = 10.0;
pub const SCALE_SIZE: &str = "13";
/// Indicator std at flip rate 0.8 over its std at 0.0.
pub const NOISE_STD_RATIO: f64 = 0.5;
/// |F1(rate 0.8) − F1(k = 0)|.
pub const NOISE_F1_WINDOW: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(criterion: u8, name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        criterion,
        name: name.to_string(),
        passed,
        detail,
    }
}

fn missing(criterion: u8, name: &str, what: &str) -> CheckOutcome {
    outcome(criterion, name, false, format!("missing result: {what}"))
}

/// SBL vs Vanilla overall and slice gains.
pub fn overview_gain(s: &Summary, variant: &str) -> CheckOutcome {
    let name = "overview: SBL beats Vanilla overall and on slices";
    let (Some(v), Some(b)) = (s.group(variant, "vanilla"), s.group(variant, "sbl")) else {
        return missing(2, name, "vanilla and sbl");
    };
    let d_all = b.overall.mean - v.overall.mean;
    let d_slice = b.mean_slice.mean - v.mean_slice.mean;
    outcome(
        2,
        name,
        d_all >= OVERVIEW_OVERALL_GAIN && d_slice >= OVERVIEW_SLICE_GAIN,
        format!(
            "overall {:.2} vs {:.2} (Δ {d_all:+.2}, need ≥ +{OVERVIEW_OVERALL_GAIN}); mean slice {:.2} vs {:.2} (Δ {d_slice:+.2}, need ≥ +{OVERVIEW_SLICE_GAIN}); {} seeds",
            b.overall.mean, v.overall.mean, b.mean_slice.mean, v.mean_slice.mean, b.seeds
        ),
    )
}

pub fn ablation_order(s: &Summary) -> CheckOutcome {
    let name = "ablation: full attention ≥ each single mechanism − slack";
    let Some(full) = s.group(Reweighting::Full.as_str(), "sbl") else {
        return missing(3, name, "sbl full mode");
    };
    let mut ok = full.seeds >= ABLATION_MIN_SEEDS;
    let mut parts = vec![format!(
        "full {:.2} ({} seeds, need ≥ {ABLATION_MIN_SEEDS})",
        full.overall.mean, full.seeds
    )];
    for mode in [
        Reweighting::Uniform,
        Reweighting::IndicatorOnly,
        Reweighting::ConfidenceOnly,
    ] {
        match s.group(mode.as_str(), "sbl") {
            Some(g) => {
                ok &= full.overall.mean >= g.overall.mean - ABLATION_SLACK;
                parts.push(format!("{} {:.2}", mode.as_str(), g.overall.mean));
            }
            None => return missing(3, name, mode.as_str()),
        }
    }
    outcome(3, name, ok, parts.join("; "))
}

pub fn scale_vs_hps_moe(s: &Summary, variant: &str) -> CheckOutcome {
    let name = "scale: SBL slices ≥ HPS + 5 and within 10 of MoE at d = 13";
    let (Some(b), Some(h), Some(m)) = (
        s.group(variant, "sbl"),
        s.group(variant, "hps"),
        s.group(variant, "moe"),
    ) else {
        return missing(4, name, "sbl, hps and moe");
    };
    let vs_h = b.mean_slice.mean - h.mean_slice.mean;
    let vs_m = b.mean_slice.mean - m.mean_slice.mean;
    outcome(
        4,
        name,
        vs_h >= SCALE_HPS_GAIN && vs_m >= -SCALE_MOE_WINDOW,
        format!(
            "mean slice SBL {:.2}, HPS {:.2} (Δ {vs_h:+.2}, need ≥ +{SCALE_HPS_GAIN}), MoE {:.2} (Δ {vs_m:+.2}, need ≥ -{SCALE_MOE_WINDOW})",
            b.mean_slice.mean, h.mean_slice.mean, m.mean_slice.mean
        ),
    )
}

pub fn sbl_vs_dp(s: &Summary, variant: &str) -> CheckOutcome {
    let name = "compare: SBL overall ≥ DP overall";
    let (Some(b), Some(d)) = (s.group(variant, "sbl"), s.group(variant, "dp")) else {
        return missing(5, name, "sbl and dp");
    };
    outcome(
        5,
        name,
        b.overall.mean >= d.overall.mean,
        format!("overall SBL {:.2}, DP {:.2}", b.overall.mean, d.overall.mean),
    )
}

pub fn noise_robustness(s: &Summary) -> CheckOutcome {
    let name = "noise: indicator std shrinks at 0.8 and F1 stays near k = 0";
    let (clean, noisy) = (noise_variant(0.0), noise_variant(0.8));
    let (Some(c), Some(n), Some(k0)) = (
        s.group(&clean, "sbl"),
        s.group(&noisy, "sbl"),
        s.group(BASE_ONLY_VARIANT, "sbl"),
    ) else {
        return missing(6, name, "flip rates 0.0 and 0.8 plus the k = 0 model");
    };
    let (Some(sc), Some(sn)) = (c.extra.get(INDICATOR_STD), n.extra.get(INDICATOR_STD)) else {
        return missing(6, name, INDICATOR_STD);
    };
    let ratio = sn.mean / sc.mean;
    let gap = n.overall.mean - k0.overall.mean;
    outcome(
        6,
        name,
        ratio <= NOISE_STD_RATIO && gap.abs() <= NOISE_F1_WINDOW,
        format!(
            "std {:.4} at 0.8 vs {:.4} at 0.0 (ratio {ratio:.3}, need ≤ {NOISE_STD_RATIO}); overall {:.2} vs k=0 {:.2} (|Δ| {:.2}, need ≤ {NOISE_F1_WINDOW})",
            sn.mean, sc.mean, n.overall.mean, k0.overall.mean, gap.abs()
        ),
    )
}

/// Every check that applies to this experiment's summary.
pub fn checks_for(s: &Summary) -> Vec<CheckOutcome> {
    match s.experiment {
        ExperimentId::Overview => vec![overview_gain(s, "")],
        ExperimentId::Ablate => vec![ablation_order(s)],
        ExperimentId::Scale => vec![scale_vs_hps_moe(s, SCALE_SIZE), sbl_vs_dp(s, SCALE_SIZE)],
        ExperimentId::Noise => vec![noise_robustness(s)],
        ExperimentId::Compare => vec![overview_gain(s, ""), scale_vs_hps_moe(s, ""), sbl_vs_dp(s, "")],
    }
}
