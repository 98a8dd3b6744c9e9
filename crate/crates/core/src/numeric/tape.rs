//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar (`1 x 1`) node walks the tape in reverse
//! and returns one adjoint per bound parameter, shaped like the parameter.

use std::rc::Rc;

use super::ops::{sigmoid_scalar, softmax_row_into, softplus_scalar};
use super::params::ParamStore;
use super::tensor::{matmul_into, Tensor2};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Row mask for softmax: `true` marks an entry as excluded.
pub type Mask = Rc<[bool]>;

#[derive(Debug)]
enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var, Option<Mask>),
    Sum(Var),
    Gather(Var, Vec<(usize, usize)>),
    SelectRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Place(Var, usize, usize),
}

struct Node {
    value: Tensor2,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape is single-threaded and single-use: build the forward pass, call
/// [`Tape::backward`] once, then drop it.
pub struct Tape {
    nodes: Vec<Node>,
    param_count: usize,
}

/// Adjoints produced by [`Tape::backward`], aligned with the bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    pub params: Vec<Tensor2>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            params: store
                .tensors()
                .iter()
                .map(|t| Tensor2::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .map(Tensor2::frobenius_norm_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.params {
            g.scale_in_place(factor);
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            param_count: 0,
        }
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Const)
    }

    /// Binds every tensor of `store` as a trainable leaf, in store order.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let vars = store
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| self.push(t.clone(), Op::Param(i)))
            .collect();
        self.param_count = self.param_count.max(store.len());
        Bound { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.cols(),
            bv.rows(),
            "matmul {:?} @ {:?}",
            av.shape(),
            bv.shape()
        );
        let mut out = Tensor2::zeros(av.rows(), bv.cols());
        matmul_into(
            av.data(),
            bv.data(),
            out.data_mut(),
            av.rows(),
            av.cols(),
            bv.cols(),
        );
        self.push(out, Op::MatMul(a, b))
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .matmul_nt(self.value(b))
            .expect("matmul_nt shape");
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .expect("add shape");
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .expect("sub shape");
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .expect("mul shape");
        self.push(out, Op::Mul(a, b))
    }

    /// `x + b` with the `1 x c` row `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.rows(), 1);
        assert_eq!(xv.cols(), bv.cols(), "add_row width");
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, v) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += v;
            }
        }
        self.push(out, Op::AddRow(x, b))
    }

    /// `x ⊙ r` with the `1 x c` row `r` broadcast over the rows of `x`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(r));
        assert_eq!(rv.rows(), 1);
        assert_eq!(xv.cols(), rv.cols(), "mul_row width");
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, v) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o *= v;
            }
        }
        self.push(out, Op::MulRow(x, r))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    /// `x * s` where `s` is a `1 x 1` node.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        self.push(out, Op::MulScalarVar(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_scalar);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus_scalar);
        self.push(out, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    /// Row-wise softmax. Masked entries get probability 0; a fully masked
    /// row panics, so callers validate masks up front. NaN inputs yield a
    /// NaN row, left for the loss check to report.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Mask>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor2::zeros(xv.rows(), xv.cols());
        let masked = apply_mask(xv, mask.as_deref());
        for i in 0..xv.rows() {
            if masked.row(i).iter().any(|v| v.is_nan()) {
                out.row_mut(i).fill(f64::NAN);
                continue;
            }
            softmax_row_into(masked.row(i), out.row_mut(i)).expect("fully masked softmax row");
        }
        self.push(out, Op::Softmax(x))
    }

    /// Row-wise log-softmax. Masked entries are reported as `-inf` and
    /// must not be consumed downstream.
    pub fn log_softmax_rows(&mut self, x: Var, mask: Option<Mask>) -> Var {
        let xv = self.value(x);
        let masked = apply_mask(xv, mask.as_deref());
        let mut out = masked.clone();
        for i in 0..out.rows() {
            let lse = if masked.row(i).iter().any(|v| v.is_nan()) {
                f64::NAN
            } else {
                super::ops::log_sum_exp(masked.row(i)).expect("fully masked log-softmax row")
            };
            for v in out.row_mut(i) {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(x, mask))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor2::scalar(s), Op::Sum(x))
    }

    /// Picks `(row, col)` entries into a `k x 1` column.
    pub fn gather(&mut self, x: Var, idx: Vec<(usize, usize)>) -> Var {
        let xv = self.value(x);
        let vals: Vec<f64> = idx.iter().map(|&(i, j)| xv.get(i, j)).collect();
        let out = Tensor2::from_vec(vals.len(), 1, vals).expect("gather");
        self.push(out, Op::Gather(x, idx))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor2::zeros(rows.len(), xv.cols());
        for (o, &r) in rows.iter().enumerate() {
            out.row_mut(o).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::SelectRows(x, rows))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor2::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row count");
            for i in 0..rows {
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column count");
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor2::from_vec(rows, cols, data).expect("concat_rows");
        self.push(out, Op::ConcatRows(parts))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start <= end && end <= xv.cols());
        let mut out = Tensor2::zeros(xv.rows(), end - start);
        for i in 0..xv.rows() {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..end]);
        }
        self.push(out, Op::SliceCols(x, start))
    }

    /// Embeds `src` into a zero `rows x cols` tensor at `(row_off, col_off)`.
    pub fn place(&mut self, src: Var, rows: usize, cols: usize, row_off: usize, col_off: usize) -> Var {
        let sv = self.value(src);
        assert!(row_off + sv.rows() <= rows && col_off + sv.cols() <= cols);
        let mut out = Tensor2::zeros(rows, cols);
        for i in 0..sv.rows() {
            out.row_mut(row_off + i)[col_off..col_off + sv.cols()].copy_from_slice(sv.row(i));
        }
        self.push(out, Op::Place(src, row_off, col_off))
    }

    /// Scaled dot-product attention with an optional learned additive bias
    /// and an optional boolean mask (`true` = key hidden from that query).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mask: Option<Mask>,
    ) -> Var {
        let d = self.value(q).cols() as f64;
        let s = self.matmul_nt(q, k);
        let mut s = self.scale(s, 1.0 / d.sqrt());
        if let Some(b) = bias {
            s = self.add(s, b);
        }
        let p = self.softmax_rows(s, mask);
        self.matmul(p, v)
    }

    /// Runs the reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Grads {
        let out_val = self.value(output);
        assert_eq!(out_val.shape(), (1, 1), "backward needs a scalar output");
        let mut adj: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Tensor2::scalar(1.0));
        let mut params: Vec<Option<Tensor2>> = vec![None; self.param_count];

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(p) => accumulate(&mut params[*p], g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.matmul_nt(bv).expect("matmul backward");
                    let db = av.matmul_tn(&g).expect("matmul backward");
                    accumulate(&mut adj[a.0], da);
                    accumulate(&mut adj[b.0], db);
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.matmul(bv).expect("matmul_nt backward");
                    let db = g.matmul_tn(av).expect("matmul_nt backward");
                    accumulate(&mut adj[a.0], da);
                    accumulate(&mut adj[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[b.0], g.clone());
                    accumulate(&mut adj[a.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[b.0], g.map(|v| -v));
                    accumulate(&mut adj[a.0], g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y).unwrap();
                    let db = g.zip_map(self.value(*a), |x, y| x * y).unwrap();
                    accumulate(&mut adj[a.0], da);
                    accumulate(&mut adj[b.0], db);
                }
                Op::AddRow(x, b) => {
                    let mut db = Tensor2::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj[b.0], db);
                    accumulate(&mut adj[x.0], g);
                }
                Op::MulRow(x, r) => {
                    let (xv, rv) = (self.value(*x), self.value(*r));
                    let mut dx = g.clone();
                    let mut dr = Tensor2::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        let gi = g.row(i);
                        let xi = xv.row(i);
                        for j in 0..g.cols() {
                            dr.data_mut()[j] += gi[j] * xi[j];
                        }
                        for (d, rvj) in dx.row_mut(i).iter_mut().zip(rv.data()) {
                            *d *= rvj;
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                    accumulate(&mut adj[r.0], dr);
                }
                Op::Scale(x, f) => accumulate(&mut adj[x.0], g.map(|v| v * f)),
                Op::AddScalar(x) => accumulate(&mut adj[x.0], g),
                Op::MulScalarVar(x, s) => {
                    let sv = self.value(*s).item();
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(a, b)| a * b)
                        .sum();
                    accumulate(&mut adj[s.0], Tensor2::scalar(ds));
                    accumulate(&mut adj[x.0], g.map(|v| v * sv));
                }
                Op::Sigmoid(x) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)).unwrap();
                    accumulate(&mut adj[x.0], d);
                }
                Op::Tanh(x) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y)).unwrap();
                    accumulate(&mut adj[x.0], d);
                }
                Op::Softplus(x) => {
                    let d = g
                        .zip_map(self.value(*x), |gv, xv| gv * sigmoid_scalar(xv))
                        .unwrap();
                    accumulate(&mut adj[x.0], d);
                }
                Op::Square(x) => {
                    let d = g.zip_map(self.value(*x), |gv, xv| 2.0 * gv * xv).unwrap();
                    accumulate(&mut adj[x.0], d);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Tensor2::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yi, gi) = (y.row(i), g.row(i));
                        let inner: f64 = yi.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = yi[j] * (gi[j] - inner);
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                }
                Op::LogSoftmax(x, mask) => {
                    let y = &node.value;
                    let mut dx = Tensor2::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let gi = g.row(i);
                        let row_mask = |j: usize| {
                            mask.as_ref()
                                .is_some_and(|m| m[i * y.cols() + j])
                        };
                        let gsum: f64 = (0..y.cols())
                            .filter(|&j| !row_mask(j))
                            .map(|j| gi[j])
                            .sum();
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            if row_mask(j) || y.get(i, j) == f64::NEG_INFINITY {
                                continue;
                            }
                            *d = gi[j] - y.get(i, j).exp() * gsum;
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut adj[x.0], Tensor2::filled(xv.rows(), xv.cols(), g.item()));
                }
                Op::Gather(x, idx) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (k, &(i, j)) in idx.iter().enumerate() {
                        let cur = dx.get(i, j);
                        dx.set(i, j, cur + g.data()[k]);
                    }
                    accumulate(&mut adj[x.0], dx);
                }
                Op::SelectRows(x, rows) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (o, &r) in rows.iter().enumerate() {
                        for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(o)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut dp = Tensor2::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut adj[p.0], dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.value(*p).shape();
                        let dp = Tensor2::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec())
                            .unwrap();
                        off += r;
                        accumulate(&mut adj[p.0], dp);
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for i in 0..g.rows() {
                        dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Place(src, row_off, col_off) => {
                    let (r, c) = self.value(*src).shape();
                    let mut ds = Tensor2::zeros(r, c);
                    for i in 0..r {
                        ds.row_mut(i)
                            .copy_from_slice(&g.row(row_off + i)[*col_off..col_off + c]);
                    }
                    accumulate(&mut adj[src.0], ds);
                }
            }
        }

        let params = params
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.unwrap_or_else(|| {
                    let shape = self
                        .nodes
                        .iter()
                        .find_map(|n| match n.op {
                            Op::Param(p) if p == i => Some(n.value.shape()),
                            _ => None,
                        })
                        .unwrap_or((0, 0));
                    Tensor2::zeros(shape.0, shape.1)
                })
            })
            .collect();
        Grads { params }
    }
}

fn apply_mask(x: &Tensor2, mask: Option<&[bool]>) -> Tensor2 {
    match mask {
        None => x.clone(),
        Some(m) => {
            assert_eq!(m.len(), x.len(), "mask size");
            let mut out = x.clone();
            for (v, &hide) in out.data_mut().iter_mut().zip(m) {
                if hide {
                    *v = f64::NEG_INFINITY;
                }
            }
            out
        }
    }
}

fn accumulate(slot: &mut Option<Tensor2>, g: Tensor2) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Parameter handles bound on a tape, in [`ParamStore`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::ops;

    #[test]
    fn nan_scores_propagate_instead_of_panicking() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::row_vector(&[f64::NAN, 0.0]));
        let s = tape.softmax_rows(x, None);
        let l = tape.log_softmax_rows(x, None);
        assert!(tape.value(s).data().iter().all(|v| v.is_nan()));
        assert!(tape.value(l).data().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn quadratic_adjoint() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor2::scalar(3.0));
        let mut tape = Tape::new();
        let b = tape.bind(&store);
        let y = tape.square(b.get(0));
        let grads = tape.backward(y);
        assert_eq!(grads.params[0].item(), 6.0);
    }

    #[test]
    fn unused_params_get_zero_adjoints_of_matching_shape() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor2::filled(2, 3, 1.0));
        store.insert("unused", Tensor2::filled(4, 5, 1.0));
        let mut tape = Tape::new();
        let b = tape.bind(&store);
        let s = tape.sum(b.get(0));
        let grads = tape.backward(s);
        assert_eq!(grads.params[0], Tensor2::filled(2, 3, 1.0));
        assert_eq!(grads.params[1], Tensor2::zeros(4, 5));
    }

    #[test]
    fn tape_attention_matches_reference() {
        let q = Tensor2::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4], vec![0.5, 0.1]]).unwrap();
        let k = Tensor2::from_rows(&[vec![0.7, -0.2], vec![0.3, 0.9], vec![-0.4, 0.2]]).unwrap();
        let v = Tensor2::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let bias = ops::causal_decay_bias(3, 0.2, None);
        let reference = ops::masked_attention(&q, &k, &v, &bias).unwrap();

        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let mask: Mask = bias.data().iter().map(|b| b.is_infinite()).collect();
        let finite = bias.map(|b| if b.is_infinite() { 0.0 } else { b });
        let bv = tape.constant(finite);
        let out = tape.attention(qv, kv, vv, Some(bv), Some(mask));
        assert!(tape.value(out).max_abs_diff(&reference) < 1e-15);
    }
}
