//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in creation order; [`Tape::backward`]
//! walks it in reverse. Nodes are addressed by [`Var`] handles.

use std::cell::{Ref, RefCell};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNorm { input: Var, normalized: Matrix, inv_std: Array1<f64> },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ShiftRows(Var, isize),
    PairMeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Records a leaf: a parameter or a constant input.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    fn unary(&self, a: Var, f: impl FnOnce(ArrayView2<f64>) -> Matrix, op: Op) -> Var {
        let value = f(self.value(a).view());
        self.push(value, op)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&*self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, |x| x.t().to_owned(), Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) + &*self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// `a + b` with the `1 x n` row `b` broadcast over the rows of `a`.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, r) = (self.value(a), self.value(b));
            assert_eq!(r.nrows(), 1, "add_row expects a single row");
            &*x + &r.row(0)
        };
        self.push(value, Op::AddRow(a, b))
    }

    /// `a * b` elementwise with the `1 x n` row `b` broadcast.
    pub fn mul_row(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, r) = (self.value(a), self.value(b));
            assert_eq!(r.nrows(), 1, "mul_row expects a single row");
            &*x * &r.row(0)
        };
        self.push(value, Op::MulRow(a, b))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| &x * factor, Op::Scale(a, factor))
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(gelu), Op::Gelu(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(softplus), Op::Softplus(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = {
            let mut x = self.value(a).clone();
            for mut row in x.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row /= sum;
            }
            x
        };
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&self, a: Var) -> Var {
        let (normalized, inv_std) = {
            let x = self.value(a);
            let n = x.ncols() as f64;
            let mut out = x.clone();
            let mut inv = Array1::zeros(x.nrows());
            for (mut row, inv_s) in out.rows_mut().into_iter().zip(inv.iter_mut()) {
                let mean = row.sum() / n;
                row.mapv_inplace(|v| v - mean);
                let var = row.iter().map(|v| v * v).sum::<f64>() / n;
                *inv_s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                row *= *inv_s;
            }
            (out, inv)
        };
        self.push(
            normalized.clone(),
            Op::LayerNorm {
                input: a,
                normalized,
                inv_std,
            },
        )
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        self.unary(a, |x| x.slice(s![start..end, ..]).to_owned(), Op::SliceRows(a, start))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        self.unary(a, |x| x.slice(s![.., start..end]).to_owned(), Op::SliceCols(a, start))
    }

    fn concat(&self, parts: &[Var], axis: Axis) -> Matrix {
        let nodes = self.nodes.borrow();
        let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
        concatenate(axis, &views).expect("concatenated parts must agree on the other axis")
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = self.concat(parts, Axis(0));
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = self.concat(parts, Axis(1));
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Column means as a `1 x n` row.
    pub fn mean_rows(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0)),
            Op::MeanRows(a),
        )
    }

    /// Column maxima as a `1 x n` row; the first maximal row receives the gradient.
    pub fn max_rows(&self, a: Var) -> Var {
        let (value, argmax) = {
            let x = self.value(a);
            let mut arg = vec![0; x.ncols()];
            let mut out = Matrix::zeros((1, x.ncols()));
            for (j, col) in x.columns().into_iter().enumerate() {
                let mut best = 0;
                for (i, &v) in col.iter().enumerate() {
                    if v > col[best] {
                        best = i;
                    }
                }
                arg[j] = best;
                out[[0, j]] = col[best];
            }
            (out, arg)
        };
        self.push(value, Op::MaxRows(a, argmax))
    }

    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Var {
        let value = {
            let t = self.value(table);
            let mut out = Matrix::zeros((indices.len(), t.ncols()));
            for (mut row, &i) in out.rows_mut().into_iter().zip(indices) {
                row.assign(&t.row(i));
            }
            out
        };
        self.push(value, Op::GatherRows(table, indices.to_vec()))
    }

    /// `out[t] = a[t - offset]`, zero where the source row does not exist.
    pub fn shift_rows(&self, a: Var, offset: isize) -> Var {
        let value = {
            let x = self.value(a);
            let n = x.nrows() as isize;
            let mut out = Matrix::zeros(x.dim());
            for t in 0..n {
                let src = t - offset;
                if (0..n).contains(&src) {
                    out.row_mut(t as usize).assign(&x.row(src as usize));
                }
            }
            out
        };
        self.push(value, Op::ShiftRows(a, offset))
    }

    /// Stride-2 average of consecutive row pairs; an odd trailing row is kept
    /// as is, giving `ceil(n / 2)` rows.
    pub fn pair_mean_rows(&self, a: Var) -> Var {
        let value = {
            let x = self.value(a);
            let rows = x.nrows().div_ceil(2);
            let mut out = Matrix::zeros((rows, x.ncols()));
            for i in 0..rows {
                let lo = 2 * i;
                let hi = (lo + 2).min(x.nrows());
                let mean = x.slice(s![lo..hi, ..]).mean_axis(Axis(0)).unwrap();
                out.row_mut(i).assign(&mean);
            }
            out
        };
        self.push(value, Op::PairMeanRows(a))
    }

    /// Propagates `seeds` (output gradients) back to every node.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        for (v, g) in seeds {
            assert_eq!(nodes[v.0].value.dim(), g.dim(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
        }
        let top = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);

        for id in (0..=top.min(nodes.len().saturating_sub(1))).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&val(*b).t()));
                    accumulate(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, b) => {
                    let gb = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, &g * &val(*b).row(0));
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g * *f),
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| *g *= gelu_grad(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| *g *= sigmoid(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |r, &yv| *r -= yv * dot);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    input,
                    normalized,
                    inv_std,
                } => {
                    let n = normalized.ncols() as f64;
                    let mut ga = Matrix::zeros(g.dim());
                    for i in 0..g.nrows() {
                        let gr = g.row(i);
                        let xr = normalized.row(i);
                        let sum_g = gr.sum();
                        let sum_gx = gr.dot(&xr);
                        let scale = inv_std[i] / n;
                        for j in 0..g.ncols() {
                            ga[[i, j]] = scale * (n * gr[j] - sum_g - xr[j] * sum_gx);
                        }
                    }
                    accumulate(&mut grads, *input, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Matrix::zeros(val(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Matrix::zeros(val(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = val(*p).nrows();
                        accumulate(&mut grads, *p, g.slice(s![offset..offset + rows, ..]).to_owned());
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = val(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., offset..offset + cols]).to_owned());
                        offset += cols;
                    }
                }
                Op::MeanRows(a) => {
                    let rows = val(*a).nrows();
                    let ga = Matrix::from_shape_fn((rows, g.ncols()), |(_, j)| g[[0, j]] / rows as f64);
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaxRows(a, argmax) => {
                    let mut ga = Matrix::zeros(val(*a).dim());
                    for (j, &i) in argmax.iter().enumerate() {
                        ga[[i, j]] = g[[0, j]];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(table, indices) => {
                    let mut ga = Matrix::zeros(val(*table).dim());
                    for (row, &i) in g.rows().into_iter().zip(indices) {
                        let mut dst = ga.row_mut(i);
                        dst += &row;
                    }
                    accumulate(&mut grads, *table, ga);
                }
                Op::ShiftRows(a, offset) => {
                    let n = g.nrows() as isize;
                    let mut ga = Matrix::zeros(g.dim());
                    for src in 0..n {
                        let t = src + offset;
                        if (0..n).contains(&t) {
                            ga.row_mut(src as usize).assign(&g.row(t as usize));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::PairMeanRows(a) => {
                    let rows = val(*a).nrows();
                    let mut ga = Matrix::zeros(val(*a).dim());
                    for i in 0..g.nrows() {
                        let lo = 2 * i;
                        let hi = (lo + 2).min(rows);
                        let w = 1.0 / (hi - lo) as f64;
                        for r in lo..hi {
                            ga.row_mut(r).scaled_add(w, &g.row(i));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` if the output does not depend on it.
    /// Interior nodes release their gradients during the sweep.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0)?.as_ref()
    }
}
