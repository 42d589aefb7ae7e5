//! Config-driven experiment runner behind the `slicekit` CLI.
//!
//! Output layout under `out`:
//! `{experiment}/{method}[-{variant}]/{seed}/record.jsonl` (+ `model.params`),
//! `{experiment}/summary.{csv,json}` and `{experiment}/figures/*.svg`.

pub mod checks;
pub mod config;
mod run;
pub mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use checks::{checks_for, CheckOutcome};
pub use config::{DatasetConfig, DatasetKind, ExperimentConfig, ExperimentId, SCHEMA_VERSION};
pub use run::{
    load_summary, noise_variant, prepare, run_experiment, summarize, write_summary_csv, CellResult,
    GroupSummary, Summary, BASE_ONLY_VARIANT, INDICATOR_STD,
};

use crate::error::{Error, Result};

/// Human-readable table of every group in `s`.
pub fn format_summary(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "== {} ==", s.experiment);
    let slice_names: Vec<String> = s
        .groups
        .first()
        .map(|g| g.slices.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    let _ = write!(out, "{:<16} {:<8} {:>16}", "variant", "method", "overall");
    for n in &slice_names {
        let _ = write!(out, " {n:>16}");
    }
    let _ = writeln!(out, " {:>10}", "params");
    for g in &s.groups {
        let _ = write!(
            out,
            "{:<16} {:<8} {:>16}",
            if g.variant.is_empty() { "-" } else { &g.variant },
            g.method,
            format!("{:.2} ({:.2})", g.overall.mean, g.overall.std)
        );
        for (_, ms) in &g.slices {
            let _ = write!(out, " {:>16}", format!("{:.2} ({:.2})", ms.mean, ms.std));
        }
        let _ = write!(out, " {:>10}", g.params.total);
        for (k, v) in &g.extra {
            let _ = write!(out, "  {k}={:.4}", v.mean);
        }
        if !g.lift.is_empty() && g.method != "vanilla" {
            let best = g.lift.iter().map(|(_, l)| *l).fold(f64::MIN, f64::max);
            let _ = write!(out, "  lift={best:+.2}");
        }
        let _ = writeln!(out);
    }
    out
}

/// Collects every `{dir}/*/summary.json` into `report.json` and
/// `report.txt`; returns the text.
pub fn report(dir: &Path) -> Result<String> {
    let mut summaries = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path().join("summary.json");
        if p.is_file() {
            summaries.push(load_summary(&p)?);
        }
    }
    if summaries.is_empty() {
        return Err(Error::Config(format!(
            "no */summary.json under {}",
            dir.display()
        )));
    }
    let mut text = String::new();
    let mut checks = Vec::new();
    for s in &summaries {
        text.push_str(&format_summary(s));
        for c in checks_for(s) {
            let _ = writeln!(
                text,
                "  [{}] criterion {}: {} - {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.criterion,
                c.name,
                c.detail
            );
            checks.push(c);
        }
        text.push('\n');
    }
    let consolidated = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "experiments": summaries.iter().map(|s| serde_json::json!({
            "experiment": s.experiment,
            "groups": s.groups,
        })).collect::<Vec<_>>(),
        "checks": checks,
    });
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&consolidated)? + "\n",
    )?;
    fs::write(dir.join("report.txt"), &text)?;
    Ok(text)
}
