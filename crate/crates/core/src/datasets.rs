//! Synthetic 2-D datasets with ground-truth slices, SF noise, and
//! slice-stratified splits.
//!
//! Every generator uses the same global rule, `y = 1` iff `x1 + x2 > 0`, on
//! the square `[-1, 1]²`. Inside any slice region the label is flipped.
//! Outside the slices, points closer than `margin` to the boundary line are
//! rejected so the base task is separable with a gap.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor2;

/// Half-width of the input square.
pub const EXTENT: f64 = 1.0;

/// Axis-aligned slice geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Region {
    pub fn contains(&self, x: [f64; 2]) -> bool {
        match *self {
            Region::Disc { cx, cy, r } => {
                let (dx, dy) = (x[0] - cx, x[1] - cy);
                dx * dx + dy * dy <= r * r
            }
            Region::Rect { x0, y0, x1, y1 } => x[0] >= x0 && x[0] <= x1 && x[1] >= y0 && x[1] <= y1,
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Region::Disc { r, .. } => std::f64::consts::PI * r * r,
            Region::Rect { x0, y0, x1, y1 } => (x1 - x0) * (y1 - y0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Region::Disc { cx, cy, r } => r > 0.0 && [cx, cy, r].iter().all(|v| v.is_finite()),
            Region::Rect { x0, y0, x1, y1 } => {
                x1 > x0 && y1 > y0 && [x0, y0, x1, y1].iter().all(|v| v.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Spec(format!("degenerate slice region {self:?}")))
        }
    }
}

/// The global linear rule.
pub fn global_rule(x: [f64; 2]) -> u8 {
    u8::from(x[0] + x[1] > 0.0)
}

/// Parameters fully determining a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub slices: Vec<Region>,
    /// Label-free band half-width around the global boundary, outside slices.
    pub margin: f64,
    pub seed: u64,
}

/// Default slice disc radius for the perturbed-boundary dataset.
pub const DEFAULT_SLICE_RADIUS: f64 = 0.2;
pub const DEFAULT_MARGIN: f64 = 0.02;
pub const DEFAULT_N: usize = 5_000;

impl SynthSpec {
    /// Two discs centred on the boundary line.
    pub fn perturbed_boundary(n: usize, radius: f64, seed: u64) -> Self {
        Self {
            n,
            slices: vec![
                Region::Disc {
                    cx: -0.5,
                    cy: 0.5,
                    r: radius,
                },
                Region::Disc {
                    cx: 0.45,
                    cy: -0.45,
                    r: radius,
                },
            ],
            margin: DEFAULT_MARGIN,
            seed,
        }
    }

    /// `count` regions of random shape, size, and location drawn from `seed`.
    ///
    /// Each region covers between 2% and 4% of the input square.
    pub fn random_slices(n: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_51ce);
        let square = (2.0 * EXTENT) * (2.0 * EXTENT);
        let slices = (0..count)
            .map(|_| {
                let area = square * rng.gen_range(0.02..0.04);
                let cx = rng.gen_range(-0.7..0.7);
                let cy = rng.gen_range(-0.7..0.7);
                if rng.gen_bool(0.5) {
                    Region::Disc {
                        cx,
                        cy,
                        r: (area / std::f64::consts::PI).sqrt(),
                    }
                } else {
                    let aspect: f64 = rng.gen_range(0.5..2.0);
                    let w = (area * aspect).sqrt();
                    let h = area / w;
                    Region::Rect {
                        x0: cx - w / 2.0,
                        y0: cy - h / 2.0,
                        x1: cx + w / 2.0,
                        y1: cy + h / 2.0,
                    }
                }
            })
            .collect();
        Self {
            n,
            slices,
            margin: DEFAULT_MARGIN,
            seed,
        }
    }

    pub fn membership(&self, x: [f64; 2]) -> Vec<bool> {
        self.slices.iter().map(|r| r.contains(x)).collect()
    }

    /// Label under this spec's rule: the global rule, flipped inside any slice.
    pub fn label(&self, x: [f64; 2]) -> u8 {
        let base = global_rule(x);
        if self.slices.iter().any(|r| r.contains(x)) {
            1 - base
        } else {
            base
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Spec("n must be positive".into()));
        }
        if !(self.margin >= 0.0 && self.margin < EXTENT) {
            return Err(Error::Spec(format!("margin {} out of range", self.margin)));
        }
        for r in &self.slices {
            r.validate()?;
            if r.area() >= 0.1 * (2.0 * EXTENT).powi(2) {
                return Err(Error::Spec(format!(
                    "slice region {r:?} covers 10% or more of the input square"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

/// Features, labels, ground-truth slice memberships, and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Tensor2<f64>,
    y: Vec<u8>,
    /// One membership column per ground-truth slice.
    slices: Vec<Vec<bool>>,
    split: Vec<Split>,
}

impl Dataset {
    pub fn new(x: Tensor2<f64>, y: Vec<u8>, slices: Vec<Vec<bool>>, split: Vec<Split>) -> Result<Self> {
        let n = x.rows();
        if y.len() != n || split.len() != n || slices.iter().any(|s| s.len() != n) {
            return Err(Error::shape("dataset columns have different lengths"));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::Domain("labels must be 0 or 1".into()));
        }
        Ok(Self { x, y, slices, split })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> &Tensor2<f64> {
        &self.x
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.x.get(i, 0), self.x.get(i, 1)]
    }

    pub fn labels(&self) -> &[u8] {
        &self.y
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn slice(&self, i: usize) -> &[bool] {
        &self.slices[i]
    }

    pub fn slices(&self) -> &[Vec<bool>] {
        &self.slices
    }

    pub fn slice_names(&self) -> Vec<String> {
        (1..=self.slices.len()).map(|i| format!("s_{i}")).collect()
    }

    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            slices: self
                .slices
                .iter()
                .map(|s| idx.iter().map(|&i| s[i]).collect())
                .collect(),
            split: idx.iter().map(|&i| self.split[i]).collect(),
        }
    }

    pub fn subset(&self, split: Split) -> Dataset {
        self.select(&self.indices(split))
    }

    /// Mean membership of each slice.
    pub fn slice_proportions(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        self.slices
            .iter()
            .map(|s| s.iter().filter(|&&b| b).count() as f64 / n)
            .collect()
    }

    pub fn positive_rate(&self) -> f64 {
        self.y.iter().map(|&v| v as f64).sum::<f64>() / self.len().max(1) as f64
    }

    /// Writes the documented CSV layout: `x1,x2,y,s_1..s_k,split`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["x1".to_string(), "x2".to_string(), "y".to_string()];
        header.extend(self.slice_names());
        header.push("split".into());
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![
                format!("{:.16e}", self.x.get(i, 0)),
                format!("{:.16e}", self.x.get(i, 1)),
                self.y[i].to_string(),
            ];
            rec.extend(self.slices.iter().map(|s| u8::from(s[i]).to_string()));
            rec.push(self.split[i].to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let k = cols
            .len()
            .checked_sub(4)
            .ok_or_else(|| Error::Parse("dataset CSV needs at least x1,x2,y,split".into()))?;
        if cols[..3] != ["x1", "x2", "y"] || cols[cols.len() - 1] != "split" {
            return Err(Error::Parse(format!("unexpected CSV header {cols:?}")));
        }
        let mut xs = Vec::new();
        let mut y = Vec::new();
        let mut slices = vec![Vec::new(); k];
        let mut split = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let field = |j: usize| rec.get(j).unwrap_or("");
            let parse_f = |j: usize| {
                field(j)
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("column {}: {e}", cols[j])))
            };
            let parse_bit = |j: usize| match field(j) {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::Parse(format!(
                    "column {}: expected 0/1, got `{other}`",
                    cols[j]
                ))),
            };
            xs.push(parse_f(0)?);
            xs.push(parse_f(1)?);
            y.push(parse_bit(2)?);
            for (s, col) in slices.iter_mut().enumerate() {
                col.push(parse_bit(3 + s)? == 1);
            }
            split.push(field(3 + k).parse()?);
        }
        let n = y.len();
        Dataset::new(Tensor2::new(n, 2, xs)?, y, slices, split)
    }
}

fn sample(spec: &SynthSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut xs = Vec::with_capacity(spec.n * 2);
    let mut y = Vec::with_capacity(spec.n);
    let mut slices = vec![Vec::with_capacity(spec.n); spec.slices.len()];
    let inv_norm = 1.0 / std::f64::consts::SQRT_2;
    while y.len() < spec.n {
        let p = [rng.gen_range(-EXTENT..EXTENT), rng.gen_range(-EXTENT..EXTENT)];
        let member = spec.membership(p);
        let inside = member.iter().any(|&b| b);
        if !inside && ((p[0] + p[1]) * inv_norm).abs() < spec.margin {
            continue;
        }
        xs.extend_from_slice(&p);
        y.push(spec.label(p));
        for (col, m) in slices.iter_mut().zip(member) {
            col.push(m);
        }
    }
    let n = y.len();
    Dataset {
        x: Tensor2::new(n, 2, xs).expect("sized by construction"),
        y,
        slices,
        split: vec![Split::Train; n],
    }
}

fn check_nonempty(ds: &Dataset) -> Result<()> {
    for (i, s) in ds.slices.iter().enumerate() {
        if !s.iter().any(|&b| b) {
            return Err(Error::Spec(format!(
                "slice s_{} contains no examples; enlarge it or raise n",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Two flipped discs straddling the linear boundary.
pub fn gen_perturbed_boundary(spec: &SynthSpec) -> Result<Dataset> {
    if spec.slices.len() != 2 {
        return Err(Error::Spec(format!(
            "perturbed-boundary data needs exactly 2 slices, got {}",
            spec.slices.len()
        )));
    }
    spec.validate()?;
    let ds = sample(spec);
    check_nonempty(&ds)?;
    Ok(ds)
}

/// Base task with four (possibly overlapping) flipped regions.
pub fn gen_random_slices(spec: &SynthSpec) -> Result<Dataset> {
    if spec.slices.len() != 4 {
        return Err(Error::Spec(format!(
            "random-slice data needs exactly 4 slices, got {}",
            spec.slices.len()
        )));
    }
    spec.validate()?;
    let ds = sample(spec);
    check_nonempty(&ds)?;
    Ok(ds)
}

/// Ground-truth membership of one slice with each bit flipped independently
/// with probability `flip_rate`.
pub fn noisy_sf_from_truth(
    dataset: &Dataset,
    slice_index: usize,
    flip_rate: f64,
    seed: u64,
) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(Error::Domain(format!("flip rate {flip_rate} outside [0, 1]")));
    }
    let truth = dataset.slices.get(slice_index).ok_or_else(|| {
        Error::Domain(format!(
            "slice index {slice_index} out of range for {} slices",
            dataset.num_slices()
        ))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(truth
        .iter()
        .map(|&b| {
            let flip = rng.gen_bool(flip_rate);
            u8::from(b != flip)
        })
        .collect())
}

/// Maximum relative deviation of a split's slice proportion from the global one.
pub const SPLIT_PROPORTION_TOLERANCE: f64 = 0.2;

/// Assigns split tags so that every slice-membership pattern and class is
/// spread across splits in proportion to `fractions` (train, valid, test).
pub fn stratified_split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Dataset> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Domain(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dataset.len();

    let key = |i: usize| -> (Vec<bool>, u8) { (dataset.slices.iter().map(|s| s[i]).collect(), dataset.y[i]) };
    let mut strata: std::collections::BTreeMap<(Vec<bool>, u8), Vec<usize>> = Default::default();
    for i in 0..n {
        strata.entry(key(i)).or_default().push(i);
    }

    // Per-stratum largest-remainder quotas, so every stratum (and hence
    // every slice and class) is split as close to `fractions` as integers allow.
    let mut split = vec![Split::Train; n];
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let m = members.len();
        let exact: Vec<f64> = fractions.iter().map(|f| f * m as f64).collect();
        let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.partial_cmp(&ra)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut left = m - quota.iter().sum::<usize>();
        for &j in order.iter().cycle() {
            if left == 0 {
                break;
            }
            quota[j] += 1;
            left -= 1;
        }
        let mut pos = 0;
        for (j, part) in Split::ALL.into_iter().enumerate() {
            for &i in &members[pos..pos + quota[j]] {
                split[i] = part;
            }
            pos += quota[j];
        }
    }

    let out = Dataset {
        split,
        ..dataset.clone()
    };
    let global = dataset.slice_proportions();
    for part in Split::ALL
        .into_iter()
        .zip(fractions)
        .filter(|(_, f)| *f > 0.0)
        .map(|(s, _)| s)
    {
        let sub = out.subset(part);
        for (i, (&p, &g)) in sub.slice_proportions().iter().zip(&global).enumerate() {
            let name = format!("s_{}", i + 1);
            let count = sub.slices[i].iter().filter(|&&b| b).count();
            if count == 0 {
                return Err(Error::Split {
                    slice: name,
                    reason: format!("has no examples in the {part} split"),
                });
            }
            if (p - g).abs() > SPLIT_PROPORTION_TOLERANCE * g {
                return Err(Error::Split {
                    slice: name,
                    reason: format!(
                        "proportion {p:.4} in the {part} split deviates more than 20% from {g:.4}"
                    ),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec::perturbed_boundary(2_000, DEFAULT_SLICE_RADIUS, 7)
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = gen_perturbed_boundary(&small()).unwrap();
        let b = gen_perturbed_boundary(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 8;
        assert_ne!(a, gen_perturbed_boundary(&other).unwrap());
    }

    #[test]
    fn zero_radius_is_rejected() {
        let spec = SynthSpec::perturbed_boundary(100, 0.0, 1);
        assert!(matches!(gen_perturbed_boundary(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn slice_count_is_enforced() {
        let spec = SynthSpec::random_slices(500, 3, 1);
        assert!(matches!(gen_random_slices(&spec), Err(Error::Spec(_))));
        assert!(gen_perturbed_boundary(&spec).is_err());
    }

    #[test]
    fn stored_membership_matches_geometry() {
        for spec in [small(), SynthSpec::random_slices(2_000, 4, 3)] {
            let ds = if spec.slices.len() == 2 {
                gen_perturbed_boundary(&spec).unwrap()
            } else {
                gen_random_slices(&spec).unwrap()
            };
            for i in 0..ds.len() {
                let m = spec.membership(ds.point(i));
                for (s, &b) in m.iter().enumerate() {
                    assert_eq!(ds.slice(s)[i], b);
                }
            }
        }
    }

    #[test]
    fn labels_follow_global_rule_outside_slices() {
        let spec = SynthSpec::random_slices(3_000, 4, 11);
        let ds = gen_random_slices(&spec).unwrap();
        let mut flipped = 0;
        for i in 0..ds.len() {
            let p = ds.point(i);
            let inside = (0..4).any(|s| ds.slice(s)[i]);
            if inside {
                assert_eq!(ds.labels()[i], 1 - global_rule(p));
                flipped += 1;
            } else {
                assert_eq!(ds.labels()[i], global_rule(p));
                assert!((p[0] + p[1]).abs() / 2f64.sqrt() >= spec.margin);
            }
        }
        assert!(flipped > 0);
    }

    #[test]
    fn slices_are_small() {
        let ds = gen_perturbed_boundary(&SynthSpec::perturbed_boundary(DEFAULT_N, DEFAULT_SLICE_RADIUS, 0))
            .unwrap();
        for p in ds.slice_proportions() {
            assert!(p > 0.0 && p < 0.1, "{p}");
        }
    }

    #[test]
    fn noise_extremes() {
        let ds = gen_perturbed_boundary(&small()).unwrap();
        let truth: Vec<u8> = ds.slice(0).iter().map(|&b| u8::from(b)).collect();
        assert_eq!(noisy_sf_from_truth(&ds, 0, 0.0, 3).unwrap(), truth);
        let comp: Vec<u8> = truth.iter().map(|b| 1 - b).collect();
        assert_eq!(noisy_sf_from_truth(&ds, 0, 1.0, 3).unwrap(), comp);
        assert!(matches!(
            noisy_sf_from_truth(&ds, 0, 1.2, 3),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            noisy_sf_from_truth(&ds, 0, -0.1, 3),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn split_tags_and_balance() {
        let ds = gen_perturbed_boundary(&SynthSpec::perturbed_boundary(DEFAULT_N, DEFAULT_SLICE_RADIUS, 4))
            .unwrap();
        let sp = stratified_split(&ds, [0.7, 0.15, 0.15], 9).unwrap();
        let overall = ds.positive_rate();
        for s in Split::ALL {
            let sub = sp.subset(s);
            assert!((sub.positive_rate() - overall).abs() <= 0.05);
        }
        let n_train = sp.indices(Split::Train).len() as f64;
        assert!((n_train / ds.len() as f64 - 0.7).abs() < 0.01);
    }

    #[test]
    fn split_fractions_validated() {
        let ds = gen_perturbed_boundary(&small()).unwrap();
        assert!(matches!(
            stratified_split(&ds, [0.5, 0.2, 0.2], 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn tiny_slice_cannot_be_split() {
        let mut spec = SynthSpec::perturbed_boundary(400, 0.05, 2);
        spec.slices[1] = Region::Disc {
            cx: 0.45,
            cy: -0.45,
            r: 0.03,
        };
        let ds = gen_perturbed_boundary(&spec);
        let err = match ds {
            Ok(ds) => stratified_split(&ds, [0.7, 0.15, 0.15], 0).unwrap_err(),
            Err(e) => e,
        };
        let msg = err.to_string();
        assert!(msg.contains("s_"), "{msg}");
    }

    #[test]
    fn csv_header_layout() {
        let ds = gen_perturbed_boundary(&SynthSpec::perturbed_boundary(10, 0.3, 1))
            .unwrap_or_else(|_| gen_perturbed_boundary(&SynthSpec::perturbed_boundary(200, 0.3, 1)).unwrap());
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x1,x2,y,s_1,s_2,split\n"));
    }
}
