//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; vectors are `1 × n` rows. A [`Tape`] records
//! each operation as it is evaluated, and [`Tape::backward`] walks the record
//! in reverse to accumulate gradients. Nodes that do not depend on any
//! gradient-carrying leaf are skipped during the backward pass.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// A sparse linear recombination of rows: `out[i] = Σ w · src[j]`.
///
/// Gathers, per-group means and normalized neighbourhood sums are all
/// instances of this.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowMix {
    rows: Vec<Vec<(usize, f64)>>,
    src_rows: usize,
}

impl RowMix {
    pub fn new(rows: Vec<Vec<(usize, f64)>>, src_rows: usize) -> Self {
        debug_assert!(rows.iter().flatten().all(|&(j, _)| j < src_rows));
        RowMix { rows, src_rows }
    }

    pub fn gather(indices: &[usize], src_rows: usize) -> Self {
        let rows = indices.iter().map(|&j| vec![(j, 1.0)]).collect();
        RowMix::new(rows, src_rows)
    }

    /// One output row per group, holding the mean of the group's rows.
    /// An empty group yields a zero row.
    pub fn mean_groups<G: AsRef<[usize]>>(groups: &[G], src_rows: usize) -> Self {
        let rows = groups
            .iter()
            .map(|g| {
                let g = g.as_ref();
                let w = 1.0 / g.len().max(1) as f64;
                g.iter().map(|&j| (j, w)).collect()
            })
            .collect();
        RowMix::new(rows, src_rows)
    }

    pub fn out_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn src_rows(&self) -> usize {
        self.src_rows
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn apply(&self, src: &Matrix) -> Matrix {
        let mut out = Matrix::zeros((self.rows.len(), src.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            let mut dst = out.row_mut(i);
            for &(j, w) in row {
                dst.scaled_add(w, &src.row(j));
            }
        }
        out
    }

    fn apply_transpose(&self, grad: &Matrix) -> Matrix {
        let mut out = Matrix::zeros((self.src_rows, grad.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out.row_mut(j).scaled_add(w, &grad.row(i));
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Mix(Var, RowMix),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
        bias: Var,
    },
    Mask(Var, Matrix),
    Bce {
        probs: Var,
        labels: Matrix,
        clamp: f64,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Matrix>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A value that receives a gradient.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter, reusing the same node on repeated lookups.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .clone();
        let trainable = !store.is_frozen(name);
        let v = self.push(value, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMulT(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), t)
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::AddRow(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let t = self.tracked(a);
        self.push(value, Op::Scale(a, c), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let t = self.tracked(a);
        self.push(value, Op::Relu(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let t = self.tracked(a);
        self.push(value, Op::Sigmoid(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let t = self.tracked(a);
        self.push(value, Op::SoftmaxRows(a), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let t = self.tracked(a);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn mix(&mut self, src: Var, mix: RowMix) -> Var {
        debug_assert_eq!(mix.src_rows(), self.value(src).nrows());
        let value = mix.apply(self.value(src));
        let t = self.tracked(src);
        self.push(value, Op::Mix(src, mix), t)
    }

    pub fn gather(&mut self, src: Var, indices: &[usize]) -> Var {
        let n = self.value(src).nrows();
        self.mix(src, RowMix::gather(indices, n))
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let t = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            },
            t,
        )
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, a: Var, mask: Matrix) -> Var {
        let value = self.value(a) * &mask;
        let t = self.tracked(a);
        self.push(value, Op::Mask(a, mask), t)
    }

    /// Summed binary cross-entropy of probabilities against 0/1 labels,
    /// with probabilities clamped to `[clamp, 1 - clamp]`.
    pub fn bce(&mut self, probs: Var, labels: Matrix, clamp: f64) -> Var {
        let p = self.value(probs);
        debug_assert_eq!(p.dim(), labels.dim());
        let loss: f64 = p
            .iter()
            .zip(labels.iter())
            .map(|(&p, &y)| {
                let p = p.clamp(clamp, 1.0 - clamp);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let t = self.tracked(probs);
        self.push(
            Matrix::from_elem((1, 1), loss),
            Op::Bce {
                probs,
                labels,
                clamp,
            },
            t,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        let t = self.tracked(a);
        self.push(value, Op::Sum(a), t)
    }

    /// Backpropagates from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::ones(self.value(output).dim()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, d: Matrix| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.dot(self.value(*b)));
                    acc(*b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, b) => {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let mut d = Matrix::zeros(s.dim());
                    for ((mut drow, grow), srow) in
                        d.rows_mut().into_iter().zip(g.rows()).zip(s.rows())
                    {
                        let dot = grow.dot(&srow);
                        for ((dv, &gv), &sv) in drow.iter_mut().zip(grow.iter()).zip(srow.iter()) {
                            *dv = sv * (gv - dot);
                        }
                    }
                    acc(*a, d);
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::Mix(src, mix) => acc(*src, mix.apply_transpose(&g)),
                Op::LayerNorm {
                    x,
                    gain,
                    xhat,
                    inv_std,
                    bias,
                } => {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * self.value(*gain);
                    let n = xhat.ncols() as f64;
                    let mut dx = Matrix::zeros(xhat.dim());
                    for (r, is) in inv_std.iter().enumerate() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let mean_dh = dh.sum() / n;
                        let mean_dh_h = dh.dot(&h) / n;
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = is * (dh[c] - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Mask(a, mask) => acc(*a, g * mask),
                Op::Bce {
                    probs,
                    labels,
                    clamp,
                } => {
                    let up = g[[0, 0]];
                    let mut d = self.value(*probs).clone();
                    d.zip_mut_with(labels, |p, &y| {
                        *p = if *p < *clamp || *p > 1.0 - *clamp {
                            0.0
                        } else {
                            up * (-y / *p + (1.0 - y) / (1.0 - *p))
                        };
                    });
                    acc(*probs, d);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).dim();
                    acc(*a, Matrix::from_elem(shape, g[[0, 0]]));
                }
            }
        }
        Gradients(grads)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
