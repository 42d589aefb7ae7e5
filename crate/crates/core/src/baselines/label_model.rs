//! Feature-blind label model for the data-programming baseline.
//!
//! Labeling functions (LFs) vote a class or abstain. Their accuracies are
//! estimated from pairwise agreement rates alone, assuming the LFs are
//! conditionally independent given the true label, and combined into a
//! probabilistic label by an accuracy-weighted vote.

use serde::{Deserialize, Serialize};

use crate::datasets::global_rule;
use crate::error::{Error, Result};
use crate::numcore::{sigmoid, Tensor2};
use crate::slicing::SliceMatrix;

/// `None` abstains; `Some(c)` votes class `c ∈ {0, 1}`.
pub type Vote = Option<u8>;

/// Votes of `m` LFs over `n` examples, stored per LF.
#[derive(Debug, Clone, PartialEq)]
pub struct LfVotes {
    pub names: Vec<String>,
    pub columns: Vec<Vec<Vote>>,
}

impl LfVotes {
    pub fn new(names: Vec<String>, columns: Vec<Vec<Vote>>) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        if names.len() != columns.len() || columns.iter().any(|c| c.len() != n) {
            return Err(Error::shape(
                "LF vote columns must match names and share a length",
            ));
        }
        if columns.iter().flatten().flatten().any(|&v| v > 1) {
            return Err(Error::Domain("LF votes must be 0 or 1".into()));
        }
        Ok(Self { names, columns })
    }

    pub fn num_lfs(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sign(&self, lf: usize, row: usize) -> Option<f64> {
        self.columns[lf][row].map(|v| if v == 1 { 1.0 } else { -1.0 })
    }
}

/// Turns slice indicators into labeling sources for the synthetic data.
///
/// Each slice LF votes its slice's designed class (the flipped global rule)
/// on SF members and abstains elsewhere; a final base LF votes the global
/// rule on every example.
pub fn synthetic_slice_lfs(x: &Tensor2<f64>, lambda: &SliceMatrix) -> Result<LfVotes> {
    if x.rows() != lambda.rows() {
        return Err(Error::shape("features and slice matrix differ in rows"));
    }
    let rule = |r: usize| global_rule([x.get(r, 0), x.get(r, 1)]);
    let mut names = Vec::new();
    let mut columns = Vec::new();
    for i in 0..lambda.k() {
        names.push(format!("lf_{}", lambda.names()[i]));
        columns.push(
            (0..x.rows())
                .map(|r| (lambda.get(r, i) == 1).then(|| 1 - rule(r)))
                .collect(),
        );
    }
    names.push("lf_base".into());
    columns.push((0..x.rows()).map(|r| Some(rule(r))).collect());
    LfVotes::new(names, columns)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// Naive-Bayes posterior with a uniform prior over voted examples.
    #[default]
    WeightedVoteIndependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelModelConfig {
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    /// Minimum number of co-voting examples before a pair's agreement is used.
    pub min_overlap: usize,
    /// EM refinement passes after the moment estimate; 0 disables.
    pub em_iterations: usize,
}

impl Default for LabelModelConfig {
    fn default() -> Self {
        Self {
            min_accuracy: 0.55,
            max_accuracy: 0.99,
            min_overlap: 10,
            em_iterations: 0,
        }
    }
}

/// Estimated per-LF accuracies and the rule used to combine votes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelModelParams {
    pub names: Vec<String>,
    pub accuracies: Vec<f64>,
    pub rule: AggregationRule,
    /// Used only when every LF abstains.
    pub class_prior: f64,
}

impl LabelModelParams {
    /// Log-odds weight of LF `i`'s vote.
    pub fn weight(&self, i: usize) -> f64 {
        let a = self.accuracies[i];
        (a / (1.0 - a)).ln()
    }

    /// P(y = 1 | votes) for one example.
    pub fn posterior_row(&self, votes: &LfVotes, row: usize) -> f64 {
        let mut any = false;
        let mut log_odds = 0.0;
        for i in 0..votes.num_lfs() {
            if let Some(s) = votes.sign(i, row) {
                any = true;
                log_odds += s * self.weight(i);
            }
        }
        if any {
            sigmoid(log_odds)
        } else {
            self.class_prior
        }
    }

    pub fn posteriors(&self, votes: &LfVotes) -> Vec<f64> {
        (0..votes.len()).map(|r| self.posterior_row(votes, r)).collect()
    }
}

/// Pairwise mean of `s_i · s_j` over co-voting rows.
fn agreement(votes: &LfVotes, i: usize, j: usize, min_overlap: usize) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for r in 0..votes.len() {
        if let (Some(a), Some(b)) = (votes.sign(i, r), votes.sign(j, r)) {
            sum += a * b;
            count += 1;
        }
    }
    (count >= min_overlap && count > 0).then(|| sum / count as f64)
}

/// Agreement of LF `i` with the unweighted majority of the other LFs.
fn loo_agreement(votes: &LfVotes, i: usize) -> Option<f64> {
    let (mut agree, mut count) = (0usize, 0usize);
    for r in 0..votes.len() {
        let Some(s) = votes.sign(i, r) else { continue };
        let others: f64 = (0..votes.num_lfs())
            .filter(|&j| j != i)
            .filter_map(|j| votes.sign(j, r))
            .sum();
        if others != 0.0 {
            count += 1;
            agree += usize::from(others.signum() == s);
        }
    }
    (count > 0).then(|| agree as f64 / count as f64)
}

/// Method-of-moments accuracy estimate.
///
/// With ±1 votes and conditional independence, `E[s_i s_j] = μ_i μ_j` where
/// `μ_i = 2·acc_i − 1`, so any triplet gives `μ_i² = M_ij M_ik / M_jk`. LFs
/// without a usable triplet fall back to leave-one-out majority agreement.
pub fn fit_label_model(votes: &LfVotes, cfg: &LabelModelConfig) -> Result<LabelModelParams> {
    if !(0.5 < cfg.min_accuracy && cfg.min_accuracy <= cfg.max_accuracy && cfg.max_accuracy <= 1.0) {
        return Err(Error::Config(format!(
            "accuracy clamp [{}, {}] must lie in (0.5, 1]",
            cfg.min_accuracy, cfg.max_accuracy
        )));
    }
    let m = votes.num_lfs();
    let pair: Vec<Vec<Option<f64>>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    if i == j {
                        None
                    } else {
                        agreement(votes, i, j, cfg.min_overlap)
                    }
                })
                .collect()
        })
        .collect();

    let clamp = |a: f64| a.clamp(cfg.min_accuracy, cfg.max_accuracy.min(1.0 - 1e-9));
    let mut accuracies = Vec::with_capacity(m);
    for i in 0..m {
        let mut estimates = Vec::new();
        for j in 0..m {
            for k in (j + 1)..m {
                if j == i || k == i {
                    continue;
                }
                if let (Some(mij), Some(mik), Some(mjk)) = (pair[i][j], pair[i][k], pair[j][k]) {
                    if mjk.abs() > 1e-3 {
                        let sq = mij * mik / mjk;
                        if sq > 0.0 {
                            estimates.push(sq.min(1.0));
                        }
                    }
                }
            }
        }
        let acc = if estimates.is_empty() {
            loo_agreement(votes, i).unwrap_or(cfg.min_accuracy)
        } else {
            let mu = (estimates.iter().sum::<f64>() / estimates.len() as f64).sqrt();
            (1.0 + mu) / 2.0
        };
        accuracies.push(clamp(acc));
    }

    let mut params = LabelModelParams {
        names: votes.names.clone(),
        accuracies,
        rule: AggregationRule::WeightedVoteIndependent,
        class_prior: 0.5,
    };
    for _ in 0..cfg.em_iterations {
        let post = params.posteriors(votes);
        for i in 0..m {
            let (mut hit, mut count) = (0.0, 0usize);
            for (r, &p) in post.iter().enumerate() {
                if let Some(v) = votes.columns[i][r] {
                    hit += if v == 1 { p } else { 1.0 - p };
                    count += 1;
                }
            }
            if count > 0 {
                params.accuracies[i] = clamp(hit / count as f64);
            }
        }
    }
    params.class_prior = {
        let voted: Vec<f64> = (0..votes.len())
            .filter(|&r| (0..m).any(|i| votes.columns[i][r].is_some()))
            .map(|r| params.posterior_row(votes, r))
            .collect();
        if voted.is_empty() {
            0.5
        } else {
            voted.iter().sum::<f64>() / voted.len() as f64
        }
    };
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn votes(cols: &[&[i8]]) -> LfVotes {
        let columns = cols
            .iter()
            .map(|c| {
                c.iter()
                    .map(|&v| match v {
                        1 => Some(1),
                        -1 => Some(0),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        LfVotes::new((0..cols.len()).map(|i| format!("lf{i}")).collect(), columns).unwrap()
    }

    #[test]
    fn agreeing_lfs_give_confident_posterior() {
        let v = votes(&[&[1, -1, 1], &[1, -1, 1]]);
        let p = fit_label_model(
            &v,
            &LabelModelConfig {
                min_overlap: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let post = p.posteriors(&v);
        assert!(post[0] > 0.5 && post[2] > 0.5);
        assert!(post[1] < 0.5);
    }

    #[test]
    fn silent_lf_has_no_effect() {
        let base = votes(&[&[1, -1, 1, 1, -1], &[1, 1, -1, 1, -1]]);
        let with_silent = votes(&[&[1, -1, 1, 1, -1], &[1, 1, -1, 1, -1], &[0, 0, 0, 0, 0]]);
        let cfg = LabelModelConfig {
            min_overlap: 1,
            ..Default::default()
        };
        let a = fit_label_model(&base, &cfg).unwrap();
        let b = fit_label_model(&with_silent, &cfg).unwrap();
        assert!(b.accuracies[2] > 0.0 && b.accuracies[2] <= 1.0);
        for r in 0..5 {
            assert!((a.posterior_row(&base, r) - b.posterior_row(&with_silent, r)).abs() < 1e-15);
        }
    }

    #[test]
    fn all_abstain_uses_prior() {
        let v = votes(&[&[1, 1, 1, 0], &[1, 1, -1, 0]]);
        let p = fit_label_model(
            &v,
            &LabelModelConfig {
                min_overlap: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(p.posterior_row(&v, 3), p.class_prior);
        assert!(p.class_prior > 0.5);
    }

    #[test]
    fn triplet_estimate_recovers_accuracies() {
        // Three LFs with accuracies 0.9, 0.8, 0.7 on a balanced, noise-free
        // enumeration of every vote pattern weighted by its probability.
        let acc = [0.9f64, 0.8, 0.7];
        let mut cols = vec![Vec::new(); 3];
        for y in [0u8, 1] {
            for pattern in 0..8u32 {
                let mut prob: f64 = 0.5;
                for (i, &a) in acc.iter().enumerate() {
                    let correct = pattern >> i & 1 == 1;
                    prob *= if correct { a } else { 1.0 - a };
                }
                let copies = (prob * 10_000.0).round() as usize;
                for _ in 0..copies {
                    for (i, col) in cols.iter_mut().enumerate() {
                        let correct = pattern >> i & 1 == 1;
                        col.push(Some(if correct { y } else { 1 - y }));
                    }
                }
            }
        }
        let v = LfVotes::new(vec!["a".into(), "b".into(), "c".into()], cols).unwrap();
        let p = fit_label_model(&v, &LabelModelConfig::default()).unwrap();
        for (est, truth) in p.accuracies.iter().zip(acc) {
            assert!((est - truth).abs() < 0.01, "{est} vs {truth}");
        }
    }

    #[test]
    fn bad_clamp_rejected() {
        let v = votes(&[&[1]]);
        let cfg = LabelModelConfig {
            min_accuracy: 0.4,
            ..Default::default()
        };
        assert!(fit_label_model(&v, &cfg).is_err());
    }

    #[test]
    fn synthetic_lfs_follow_rules() {
        let x = Tensor2::from_rows(&[vec![0.5, 0.5], vec![-0.5, -0.2], vec![0.1, 0.0]]).unwrap();
        let lambda = SliceMatrix::from_columns(vec!["s_1".into()], vec![vec![1, 0, 1]], 3).unwrap();
        let v = synthetic_slice_lfs(&x, &lambda).unwrap();
        assert_eq!(v.columns[0], vec![Some(0), None, Some(0)]);
        assert_eq!(v.columns[1], vec![Some(1), Some(0), Some(1)]);
    }
}
