//! Reverse-mode differentiation over a fixed vocabulary of matrix ops.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] replays it once in reverse.
//! Relu and abs use a zero subgradient at 0.

use crate::error::{Error, Result};
use crate::numcore::tensor::{bce_logit_unchecked, sigmoid, softmax_into, Tensor2};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxRows(Var),
    Scale(Var, S),
    Sum(Var),
    ColSlice {
        src: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Attend {
        weights: Var,
        reps: Var,
    },
    BceLogits {
        logits: Var,
        targets: Tensor2<S>,
        weights: Tensor2<S>,
    },
    BceProbs {
        probs: Var,
        targets: Tensor2<S>,
        weights: Tensor2<S>,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor2<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records a forward computation for a single backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    kink_margin: Option<f64>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor2<S>>>,
    shapes: Vec<(usize, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor2<S> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor2::zeros(r, c)
            }
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

/// Probabilities are clamped to this distance from 0 and 1 inside
/// [`Tape::bce_probs`].
pub const PROB_EPS: f64 = 1e-12;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_margin: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input: receives a gradient.
    pub fn leaf(&mut self, value: Tensor2<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor2<S>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].value.get(0, 0)
    }

    /// Smallest |input| seen by relu or abs so far; finite differences with a
    /// step below this margin never cross a kink.
    pub fn kink_margin(&self) -> Option<f64> {
        self.kink_margin
    }

    fn push(&mut self, value: Tensor2<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn note_kinks(&mut self, v: Var) {
        let m = self.nodes[v.0]
            .value
            .data()
            .iter()
            .map(|x| x.abs().as_f64())
            .fold(f64::INFINITY, f64::min);
        self.kink_margin = Some(self.kink_margin.map_or(m, |k| k.min(m)));
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Adds a `1×m` row to every row of an `n×m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape(format!(
                "add_row: {}x{} plus {}x{}",
                av.rows(),
                av.cols(),
                rv.rows(),
                rv.cols()
            )));
        }
        let value = Tensor2::from_fn(av.rows(), av.cols(), |r, c| av.get(r, c) + rv.get(0, c));
        let ng = self.needs(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    /// `x·W + b` for `W: in×out`, `b: 1×out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.note_kinks(a);
        let value = self.value(a).map(|v| v.max(S::zero()));
        let ng = self.needs(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.needs(&[a]);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.note_kinks(a);
        let value = self.value(a).map(S::abs);
        let ng = self.needs(&[a]);
        self.push(value, Op::Abs(a), ng)
    }

    /// Shift-stable softmax applied independently to each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.cols() == 0 {
            return Err(Error::shape("softmax over zero columns"));
        }
        let mut value = Tensor2::zeros(av.rows(), av.cols());
        let cols = av.cols();
        for r in 0..av.rows() {
            softmax_into(av.row_slice(r), &mut value.data_mut()[r * cols..(r + 1) * cols]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), ng))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).scale(c);
        let ng = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor2::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn col_slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let sv = self.value(src);
        if start + len > sv.cols() {
            return Err(Error::shape(format!(
                "col_slice {start}..{} of {} columns",
                start + len,
                sv.cols()
            )));
        }
        let value = Tensor2::from_fn(sv.rows(), len, |r, c| sv.get(r, start + c));
        let ng = self.needs(&[src]);
        Ok(self.push(value, Op::ColSlice { src, start }, ng))
    }

    /// Concatenates along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let rows = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape("concat: row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let value = Tensor2::new(rows, cols, data)?;
        let ng = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    /// Attention-weighted combination of column blocks.
    ///
    /// `weights` is `n×K` and `reps` is `n×(K·w)` holding K blocks of width w
    /// side by side; row r of the output is `Σ_j weights[r, j] · block_j[r]`.
    pub fn attend(&mut self, weights: Var, reps: Var) -> Result<Var> {
        let (wv, rv) = (self.value(weights), self.value(reps));
        let k = wv.cols();
        if k == 0 || wv.rows() != rv.rows() || rv.cols() % k != 0 {
            return Err(Error::shape(format!(
                "attend: weights {}x{} with reps {}x{}",
                wv.rows(),
                k,
                rv.rows(),
                rv.cols()
            )));
        }
        let width = rv.cols() / k;
        let mut value = Tensor2::zeros(wv.rows(), width);
        for r in 0..wv.rows() {
            let rep_row = rv.row_slice(r);
            for j in 0..k {
                let a = wv.get(r, j);
                for c in 0..width {
                    let cur = value.get(r, c);
                    value.set(r, c, cur + a * rep_row[j * width + c]);
                }
            }
        }
        let ng = self.needs(&[weights, reps]);
        Ok(self.push(value, Op::Attend { weights, reps }, ng))
    }

    /// `Σ weights ⊙ bce(logits, targets)` as a `1×1` node.
    ///
    /// Targets and weights are constants with the same shape as `logits`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor2<S>, weights: Tensor2<S>) -> Result<Var> {
        let lv = self.value(logits);
        check_loss_inputs(lv, &targets, &weights)?;
        let total = lv
            .data()
            .iter()
            .zip(targets.data())
            .zip(weights.data())
            .filter(|(_, &w)| w != S::zero())
            .map(|((&l, &t), &w)| w * bce_logit_unchecked(l, t))
            .sum();
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor2::scalar(total),
            Op::BceLogits {
                logits,
                targets,
                weights,
            },
            ng,
        ))
    }

    /// Weighted cross entropy on probabilities, clamped to `[ε, 1-ε]`.
    pub fn bce_probs(&mut self, probs: Var, targets: Tensor2<S>, weights: Tensor2<S>) -> Result<Var> {
        let pv = self.value(probs);
        check_loss_inputs(pv, &targets, &weights)?;
        let total = pv
            .data()
            .iter()
            .zip(targets.data())
            .zip(weights.data())
            .filter(|(_, &w)| w != S::zero())
            .map(|((&p, &t), &w)| {
                let p = clamp_prob(p);
                -w * (t * p.ln() + (S::one() - t) * (S::one() - p).ln())
            })
            .sum();
        let ng = self.needs(&[probs]);
        Ok(self.push(
            Tensor2::scalar(total),
            Op::BceProbs {
                probs,
                targets,
                weights,
            },
            ng,
        ))
    }

    /// Backpropagates from a `1×1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::shape(format!(
                "backward from non-scalar {}x{} node",
                rv.rows(),
                rv.cols()
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor2<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor2::scalar(S::one()));

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(
        &self,
        op: &Op<S>,
        out: &Tensor2<S>,
        g: &Tensor2<S>,
        grads: &mut [Option<Tensor2<S>>],
    ) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor2<S>| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.matmul_t(bv)?)?;
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, av.t_matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone())?;
                if self.nodes[row.0].needs_grad {
                    acc(*row, g.sum_rows())?;
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(
                    *a,
                    g.zip_map(av, |gi, x| if x > S::zero() { gi } else { S::zero() })?,
                )?;
            }
            Op::Sigmoid(a) => {
                acc(*a, g.zip_map(out, |gi, s| gi * s * (S::one() - s))?)?;
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                acc(
                    *a,
                    g.zip_map(av, |gi, x| {
                        if x > S::zero() {
                            gi
                        } else if x < S::zero() {
                            -gi
                        } else {
                            S::zero()
                        }
                    })?,
                )?;
            }
            Op::SoftmaxRows(a) => {
                // dx_j = s_j (g_j - Σ_i g_i s_i)
                let mut d = Tensor2::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let s = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: S = s.iter().zip(gr).map(|(&si, &gi)| si * gi).sum();
                    for c in 0..out.cols() {
                        d.set(r, c, s[c] * (gr[c] - dot));
                    }
                }
                acc(*a, d)?;
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Tensor2::full(r, c, g.get(0, 0)))?;
            }
            Op::ColSlice { src, start } => {
                let (r, c) = self.value(*src).shape();
                let mut d = Tensor2::zeros(r, c);
                for i in 0..r {
                    for j in 0..g.cols() {
                        d.set(i, start + j, g.get(i, j));
                    }
                }
                acc(*src, d)?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.value(*p).shape();
                    if self.nodes[p.0].needs_grad {
                        acc(*p, Tensor2::from_fn(r, c, |i, j| g.get(i, offset + j)))?;
                    }
                    offset += c;
                }
            }
            Op::Attend { weights, reps } => {
                let (wv, rv) = (self.value(*weights), self.value(*reps));
                let k = wv.cols();
                let width = out.cols();
                if self.nodes[weights.0].needs_grad {
                    let d = Tensor2::from_fn(wv.rows(), k, |r, j| {
                        let rep_row = rv.row_slice(r);
                        (0..width).map(|c| g.get(r, c) * rep_row[j * width + c]).sum()
                    });
                    acc(*weights, d)?;
                }
                if self.nodes[reps.0].needs_grad {
                    let d = Tensor2::from_fn(rv.rows(), rv.cols(), |r, col| {
                        wv.get(r, col / width) * g.get(r, col % width)
                    });
                    acc(*reps, d)?;
                }
            }
            Op::BceLogits {
                logits,
                targets,
                weights,
            } => {
                let gs = g.get(0, 0);
                let lv = self.value(*logits);
                let d = Tensor2::from_fn(lv.rows(), lv.cols(), |r, c| {
                    let w = weights.get(r, c);
                    if w == S::zero() {
                        S::zero()
                    } else {
                        gs * w * (sigmoid(lv.get(r, c)) - targets.get(r, c))
                    }
                });
                acc(*logits, d)?;
            }
            Op::BceProbs {
                probs,
                targets,
                weights,
            } => {
                let gs = g.get(0, 0);
                let pv = self.value(*probs);
                let eps = S::lit(PROB_EPS);
                let d = Tensor2::from_fn(pv.rows(), pv.cols(), |r, c| {
                    let w = weights.get(r, c);
                    let raw = pv.get(r, c);
                    if w == S::zero() || raw < eps || raw > S::one() - eps {
                        S::zero()
                    } else {
                        let t = targets.get(r, c);
                        gs * w * (-t / raw + (S::one() - t) / (S::one() - raw))
                    }
                });
                acc(*probs, d)?;
            }
        }
        Ok(())
    }
}

fn clamp_prob<S: Scalar>(p: S) -> S {
    let eps = S::lit(PROB_EPS);
    p.max(eps).min(S::one() - eps)
}

fn check_loss_inputs<S: Scalar>(pred: &Tensor2<S>, targets: &Tensor2<S>, weights: &Tensor2<S>) -> Result<()> {
    if pred.shape() != targets.shape() || pred.shape() != weights.shape() {
        return Err(Error::shape(format!(
            "loss inputs {:?}, targets {:?}, weights {:?}",
            pred.shape(),
            targets.shape(),
            weights.shape()
        )));
    }
    if let Some(t) = targets
        .data()
        .iter()
        .find(|t| !(**t >= S::zero() && **t <= S::one()))
    {
        return Err(Error::Domain(format!("BCE target {t} outside [0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor2::zeros(2, 2));
        assert!(matches!(tape.backward(a), Err(Error::Shape(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor2::full(1, 3, 2.0));
        let unused = tape.leaf(Tensor2::full(2, 2, 7.0));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).data(), &[1.0, 1.0, 1.0]);
        assert!(!g.reached(unused));
        assert_eq!(g.get(unused), Tensor2::zeros(2, 2));
    }

    #[test]
    fn relu_and_abs_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor2::row(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let b = tape.constant(Tensor2::row(vec![-2.0, 3.0]));
        let ab = tape.abs(b);
        assert_eq!(tape.value(ab).data(), &[2.0, 3.0]);
        let abab = tape.abs(ab);
        assert_eq!(tape.value(abab), tape.value(ab));
        let neg = tape.constant(Tensor2::row(vec![-3.0, -0.5]));
        let rn = tape.relu(neg);
        assert_eq!(tape.value(rn).data(), &[0.0, 0.0]);
    }

    #[test]
    fn kink_subgradient_is_zero() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor2::row(vec![0.0, 0.0]));
        let r = tape.relu(a);
        let b = tape.abs(a);
        let s1 = tape.sum(r);
        let s2 = tape.sum(b);
        let t = tape.add(s1, s2).unwrap();
        assert_eq!(tape.backward(t).unwrap().get(a).data(), &[0.0, 0.0]);
        assert_eq!(tape.kink_margin(), Some(0.0));
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_target() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor2::column(vec![0.3, -2.0]));
        let loss = tape
            .bce_with_logits(
                l,
                Tensor2::column(vec![1.0, 0.25]),
                Tensor2::column(vec![1.0, 1.0]),
            )
            .unwrap();
        let g = tape.backward(loss).unwrap().get(l);
        assert!((g.get(0, 0) - (sigmoid(0.3) - 1.0)).abs() < 1e-15);
        assert!((g.get(1, 0) - (sigmoid(-2.0) - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn bce_rejects_bad_target() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor2::column(vec![0.0]));
        let r = tape.bce_with_logits(l, Tensor2::column(vec![2.0]), Tensor2::column(vec![1.0]));
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn attend_matches_explicit_sum() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor2::from_rows(&[vec![0.25, 0.75]]).unwrap());
        let reps = tape.constant(Tensor2::row(vec![1.0, 2.0, 10.0, 20.0]));
        let out = tape.attend(w, reps).unwrap();
        assert_eq!(tape.value(out).data(), &[7.75, 15.5]);
    }
}
