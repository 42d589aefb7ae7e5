//! Slicing functions and the slice matrix they produce.
//!
//! SFs run once, offline, when a dataset is prepared. Models only ever see
//! the resulting [`SliceMatrix`], and never call SFs at inference.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datasets::{noisy_sf_from_truth, Dataset, Region};
use crate::error::{Error, Result};
use crate::numcore::Tensor2;
use crate::scalar::Scalar;

/// Name of the all-ones column appended to every slice matrix.
pub const BASE_SLICE: &str = "BASE";

type Predicate = dyn Fn(&[f64]) -> std::result::Result<bool, String> + Send + Sync;

#[derive(Clone)]
enum SfEval {
    Predicate(Arc<Predicate>),
    /// Outputs fixed per row, e.g. a noisy detector run ahead of time.
    Precomputed(Arc<Vec<u8>>),
}

/// A named heuristic mapping one example to slice membership.
#[derive(Clone)]
pub struct SlicingFunction {
    name: String,
    eval: SfEval,
}

impl fmt::Debug for SlicingFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.eval {
            SfEval::Predicate(_) => "predicate",
            SfEval::Precomputed(_) => "precomputed",
        };
        f.debug_struct("SlicingFunction")
            .field("name", &self.name)
            .field("kind", &kind)
            .finish()
    }
}

impl SlicingFunction {
    /// Total predicate over a feature row.
    pub fn new(name: impl Into<String>, predicate: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            eval: SfEval::Predicate(Arc::new(move |x| Ok(predicate(x)))),
        }
    }

    /// Predicate that may fail on some inputs; failures surface from
    /// [`apply_sfs`] as evaluation errors.
    pub fn fallible(
        name: impl Into<String>,
        predicate: impl Fn(&[f64]) -> std::result::Result<bool, String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            eval: SfEval::Predicate(Arc::new(predicate)),
        }
    }

    /// Outputs recorded ahead of time, one per dataset row.
    pub fn precomputed(name: impl Into<String>, outputs: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            eval: SfEval::Precomputed(Arc::new(outputs)),
        }
    }

    pub fn region(name: impl Into<String>, region: Region) -> Self {
        Self::new(name, move |x| region.contains([x[0], x[1]]))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(&self, row: usize, x: &[f64]) -> Result<bool> {
        let fail = |reason: String| Error::SfEvaluation {
            name: self.name.clone(),
            row,
            reason,
        };
        match &self.eval {
            SfEval::Predicate(p) => p(x).map_err(fail),
            SfEval::Precomputed(out) => match out.get(row) {
                Some(0) => Ok(false),
                Some(1) => Ok(true),
                Some(v) => Err(fail(format!("stored output {v} is not 0/1"))),
                None => Err(fail(format!("no stored output ({} rows recorded)", out.len()))),
            },
        }
    }
}

/// Per-example SF outputs plus the trailing all-ones base column.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMatrix {
    rows: usize,
    /// Row-major `rows × (k + 1)` bits.
    bits: Vec<u8>,
    names: Vec<String>,
}

impl SliceMatrix {
    /// Builds from SF columns, appending the base column.
    pub fn from_columns(names: Vec<String>, columns: Vec<Vec<u8>>, rows: usize) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::shape("one name per slice column required"));
        }
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::shape("slice column length differs from row count"));
        }
        if columns.iter().flatten().any(|&b| b > 1) {
            return Err(Error::Domain("slice entries must be 0 or 1".into()));
        }
        let width = columns.len() + 1;
        let mut bits = Vec::with_capacity(rows * width);
        for r in 0..rows {
            bits.extend(columns.iter().map(|c| c[r]));
            bits.push(1);
        }
        let mut names = names;
        names.push(BASE_SLICE.to_string());
        Ok(Self { rows, bits, names })
    }

    /// Number of SF columns, excluding the base slice.
    pub fn k(&self) -> usize {
        self.names.len() - 1
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.bits[row * self.width() + col]
    }

    pub fn row(&self, row: usize) -> &[u8] {
        let w = self.width();
        &self.bits[row * w..(row + 1) * w]
    }

    pub fn column(&self, col: usize) -> Vec<u8> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> SliceMatrix {
        let mut bits = Vec::with_capacity(idx.len() * self.width());
        for &r in idx {
            bits.extend_from_slice(self.row(r));
        }
        SliceMatrix {
            rows: idx.len(),
            bits,
            names: self.names.clone(),
        }
    }

    /// Keeps only the base column.
    pub fn base_only(&self) -> SliceMatrix {
        SliceMatrix {
            rows: self.rows,
            bits: vec![1; self.rows],
            names: vec![BASE_SLICE.to_string()],
        }
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor2<S> {
        Tensor2::from_fn(self.rows, self.width(), |r, c| {
            if self.get(r, c) == 1 {
                S::one()
            } else {
                S::zero()
            }
        })
    }
}

/// Evaluates every SF on every row of `x` and appends the base column.
pub fn apply_sfs(sfs: &[SlicingFunction], x: &Tensor2<f64>) -> Result<SliceMatrix> {
    let mut columns = Vec::with_capacity(sfs.len());
    for sf in sfs {
        let col = (0..x.rows())
            .map(|r| sf.evaluate(r, x.row_slice(r)).map(u8::from))
            .collect::<Result<Vec<u8>>>()?;
        columns.push(col);
    }
    SliceMatrix::from_columns(sfs.iter().map(|s| s.name.clone()).collect(), columns, x.rows())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    pub names: Vec<String>,
    /// Mean of each column, base included.
    pub coverage: Vec<f64>,
    /// Pairwise Jaccard overlap between SF columns (base excluded).
    pub jaccard: Vec<Vec<f64>>,
    /// Hamming distance to the ground-truth column over n, when available.
    pub noise: Option<Vec<f64>>,
}

pub fn slice_stats(lambda: &SliceMatrix, truth: Option<&[Vec<bool>]>) -> SliceStats {
    let n = lambda.rows().max(1) as f64;
    let cols: Vec<Vec<u8>> = (0..lambda.width()).map(|c| lambda.column(c)).collect();
    let coverage = cols
        .iter()
        .map(|c| c.iter().map(|&b| b as f64).sum::<f64>() / n)
        .collect();
    let k = lambda.k();
    let jaccard = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    let (mut inter, mut union) = (0usize, 0usize);
                    for (a, b) in cols[i].iter().zip(&cols[j]) {
                        inter += usize::from(*a == 1 && *b == 1);
                        union += usize::from(*a == 1 || *b == 1);
                    }
                    if union == 0 {
                        0.0
                    } else {
                        inter as f64 / union as f64
                    }
                })
                .collect()
        })
        .collect();
    let noise = truth.map(|t| {
        t.iter()
            .zip(&cols)
            .map(|(truth_col, sf_col)| {
                truth_col
                    .iter()
                    .zip(sf_col)
                    .filter(|(&t, &s)| u8::from(t) != s)
                    .count() as f64
                    / n
            })
            .collect()
    });
    SliceStats {
        names: lambda.names().to_vec(),
        coverage,
        jaccard,
        noise,
    }
}

/// Declarative SF as written in experiment config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: SfKind,
    #[serde(default)]
    pub flip_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum SfKind {
    Disc {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    /// Member iff `w1·x1 + w2·x2 + b > 0`.
    Halfplane {
        w1: f64,
        w2: f64,
        b: f64,
    },
    /// Ground-truth slice `slice` (1-based), noised by `flip_rate`.
    NoisyTruth {
        slice: usize,
    },
}

impl SfSpec {
    pub fn noisy_truth(name: impl Into<String>, slice: usize, flip_rate: f64, seed: u64) -> Self {
        Self {
            name: name.into(),
            kind: SfKind::NoisyTruth { slice },
            flip_rate,
            seed,
        }
    }

    /// Resolves this spec against the rows of `dataset`.
    pub fn build(&self, dataset: &Dataset) -> Result<SlicingFunction> {
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return Err(Error::Config(format!(
                "SF `{}`: flip_rate {} outside [0, 1]",
                self.name, self.flip_rate
            )));
        }
        let clean = match self.kind {
            SfKind::Disc { cx, cy, r } => SlicingFunction::region(&self.name, Region::Disc { cx, cy, r }),
            SfKind::Rect { x0, y0, x1, y1 } => {
                SlicingFunction::region(&self.name, Region::Rect { x0, y0, x1, y1 })
            }
            SfKind::Halfplane { w1, w2, b } => {
                SlicingFunction::new(&self.name, move |x| w1 * x[0] + w2 * x[1] + b > 0.0)
            }
            SfKind::NoisyTruth { slice } => {
                if slice == 0 || slice > dataset.num_slices() {
                    return Err(Error::Config(format!(
                        "SF `{}` refers to slice {slice}, dataset has {}",
                        self.name,
                        dataset.num_slices()
                    )));
                }
                let out = noisy_sf_from_truth(dataset, slice - 1, self.flip_rate, self.seed)?;
                return Ok(SlicingFunction::precomputed(&self.name, out));
            }
        };
        if self.flip_rate == 0.0 {
            return Ok(clean);
        }
        let lambda = apply_sfs(std::slice::from_ref(&clean), dataset.features())?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(self.seed);
        let out = lambda
            .column(0)
            .into_iter()
            .map(|b| b ^ u8::from(rand::Rng::gen_bool(&mut rng, self.flip_rate)))
            .collect();
        Ok(SlicingFunction::precomputed(&self.name, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[[f64; 2]]) -> Tensor2<f64> {
        Tensor2::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn no_sfs_gives_base_only() {
        let x = pts(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]);
        let l = apply_sfs(&[], &x).unwrap();
        assert_eq!(l.width(), 1);
        assert_eq!(l.column(0), vec![1, 1, 1]);
        assert_eq!(l.names(), &["BASE".to_string()]);
    }

    #[test]
    fn threshold_sf() {
        let x = pts(&[[1.0, 0.0], [-1.0, 0.0]]);
        let sf = SlicingFunction::new("x1_pos", |x| x[0] > 0.0);
        let l = apply_sfs(&[sf], &x).unwrap();
        assert_eq!(l.column(0), vec![1, 0]);
        assert_eq!(l.column(1), vec![1, 1]);
    }

    #[test]
    fn disjoint_regions_are_orthogonal() {
        let x = Tensor2::from_fn(400, 2, |r, c| {
            let v = if c == 0 { r % 20 } else { r / 20 };
            v as f64 / 10.0 - 1.0
        });
        let a = SlicingFunction::region(
            "a",
            Region::Disc {
                cx: -0.5,
                cy: -0.5,
                r: 0.3,
            },
        );
        let b = SlicingFunction::region(
            "b",
            Region::Rect {
                x0: 0.1,
                y0: 0.1,
                x1: 0.6,
                y1: 0.9,
            },
        );
        let l = apply_sfs(&[a, b], &x).unwrap();
        let (ca, cb) = (l.column(0), l.column(1));
        assert!(ca.contains(&1) && cb.contains(&1));
        let dot: u32 = ca.iter().zip(&cb).map(|(&p, &q)| (p * q) as u32).sum();
        assert_eq!(dot, 0);
    }

    #[test]
    fn failing_predicate_names_sf_and_row() {
        let x = pts(&[[0.0, 0.0], [5.0, 0.0]]);
        let sf = SlicingFunction::fallible("picky", |x| {
            if x[0] > 1.0 {
                Err("out of domain".into())
            } else {
                Ok(true)
            }
        });
        match apply_sfs(&[sf], &x) {
            Err(Error::SfEvaluation { name, row, .. }) => {
                assert_eq!(name, "picky");
                assert_eq!(row, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn permuting_sfs_permutes_columns() {
        let x = Tensor2::from_fn(50, 2, |r, c| ((r * 7 + c * 3) % 11) as f64 / 5.0 - 1.0);
        let a = SlicingFunction::new("a", |x| x[0] > 0.2);
        let b = SlicingFunction::new("b", |x| x[1] < -0.1);
        let ab = apply_sfs(&[a.clone(), b.clone()], &x).unwrap();
        let ba = apply_sfs(&[b, a], &x).unwrap();
        assert_eq!(ab.column(0), ba.column(1));
        assert_eq!(ab.column(1), ba.column(0));
        assert_eq!(ab.column(2), ba.column(2));
        assert_eq!(
            ab,
            apply_sfs(
                &[
                    SlicingFunction::new("a", |x| x[0] > 0.2),
                    SlicingFunction::new("b", |x| x[1] < -0.1)
                ],
                &x
            )
            .unwrap()
        );
    }

    #[test]
    fn stats_report_noise() {
        let truth = vec![vec![true, true, false, false]];
        let l = SliceMatrix::from_columns(vec!["s".into()], vec![vec![1, 0, 0, 1]], 4).unwrap();
        let st = slice_stats(&l, Some(&truth));
        assert_eq!(st.coverage, vec![0.5, 1.0]);
        assert_eq!(st.noise.unwrap(), vec![0.5]);
        assert_eq!(st.jaccard, vec![vec![1.0]]);
    }

    #[test]
    fn precomputed_length_mismatch() {
        let x = pts(&[[0.0, 0.0], [1.0, 0.0]]);
        let sf = SlicingFunction::precomputed("short", vec![1]);
        assert!(matches!(
            apply_sfs(&[sf], &x),
            Err(Error::SfEvaluation { row: 1, .. })
        ));
    }

    #[test]
    fn sf_spec_json_schema() {
        let json = r#"[
            {"name": "d", "kind": "disc", "params": {"cx": 0.0, "cy": 0.0, "r": 0.5}},
            {"name": "h", "kind": "halfplane", "params": {"w1": 1.0, "w2": 0.0, "b": 0.0}, "flip_rate": 0.1, "seed": 4},
            {"name": "t", "kind": "noisy_truth", "params": {"slice": 1}, "flip_rate": 0.4, "seed": 2}
        ]"#;
        let specs: Vec<SfSpec> = serde_json::from_str(json).unwrap();
        assert_eq!(
            specs[0].kind,
            SfKind::Disc {
                cx: 0.0,
                cy: 0.0,
                r: 0.5
            }
        );
        assert_eq!(specs[2].kind, SfKind::NoisyTruth { slice: 1 });
        assert_eq!(specs[1].flip_rate, 0.1);
    }
}
