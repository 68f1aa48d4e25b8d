//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every value on the tape is a 2-D `f64` matrix. Sequences are stored
//! time-major: row `t * batch + b` holds sample `b` at position `t`. The
//! attention kernels below rely on that layout.

use ndarray::{s, Array2, Axis};
use std::rc::Rc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Array2<f64>>),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    AttnScores {
        q: Var,
        k: Var,
        batch: usize,
        scale: f64,
    },
    MaskedSoftmax(Var),
    AttnApply {
        a: Var,
        v: Var,
        batch: usize,
    },
    /// Scalar whose gradient with respect to `input` was computed alongside
    /// the forward value (piecewise-linear losses).
    Linearized {
        input: Var,
        grad: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients keyed by the parameter index passed to [`Tape::param`].
    pub fn params(&self) -> impl Iterator<Item = (usize, Option<&Array2<f64>>)> + '_ {
        self.params.iter().map(|&(idx, v)| (idx, self.grads[v.0].as_ref()))
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Learnable parameter identified by `index` in the caller's store.
    pub fn param(&mut self, index: usize, value: Array2<f64>) -> Var {
        self.push(value, Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `x + bias` with `bias` a single row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let out = self.value(x) + self.value(bias);
        self.push(out, Op::AddRow(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// Scales each row of `x` by the matching entry of the column `w`.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Var {
        let out = self.value(x) * self.value(w);
        self.push(out, Op::MulCol(x, w))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        self.push(out, Op::Scale(x, c))
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Rc<Array2<f64>>) -> Var {
        let out = self.value(x) * &*c;
        self.push(out, Op::MulConst(x, c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(elu);
        self.push(out, Op::Elu(x))
    }

    /// Row-wise layer normalisation with learned `gamma` and `beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mut xhat = Array2::<f64>::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (row, mut out) in xv.outer_iter().zip(xhat.outer_iter_mut()) {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for (o, v) in out.iter_mut().zip(row.iter()) {
                *o = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.outer_iter_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows(x, start))
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, x: Var, index: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let mut out = Array2::<f64>::zeros((index.len(), xv.ncols()));
        for (mut row, &i) in out.outer_iter_mut().zip(index.iter()) {
            row.assign(&xv.row(i));
        }
        self.push(out, Op::GatherRows(x, index))
    }

    /// Scaled dot products between time-major queries and keys of the same
    /// sample. `q` holds `nq` positions, `k` holds `seq` positions, both for
    /// `batch` samples; the result has `nq * batch` rows and `seq` columns.
    pub fn attn_scores(&mut self, q: Var, k: Var, batch: usize, scale: f64) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let d = qv.ncols();
        assert_eq!(kv.ncols(), d, "attn_scores: key width");
        let nq = qv.nrows() / batch;
        let seq = kv.nrows() / batch;
        let qs = qv.as_slice().expect("standard layout");
        let ks = kv.as_slice().expect("standard layout");
        let mut out = vec![0.0; nq * batch * seq];
        for i in 0..nq {
            for b in 0..batch {
                let r = i * batch + b;
                let qrow = &qs[r * d..(r + 1) * d];
                let orow = &mut out[r * seq..(r + 1) * seq];
                for (j, o) in orow.iter_mut().enumerate() {
                    let kr = j * batch + b;
                    let krow = &ks[kr * d..(kr + 1) * d];
                    *o = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        let out = Array2::from_shape_vec((nq * batch, seq), out).unwrap();
        self.push(out, Op::AttnScores { q, k, batch, scale })
    }

    /// Row-wise softmax restricted to permitted columns. Query row `r`
    /// belongs to position `q_start + r / batch`; `allowed[i * seq + j]`
    /// says whether position `i` may attend to position `j`. Forbidden
    /// entries are exactly zero.
    pub fn masked_softmax(
        &mut self,
        x: Var,
        allowed: &[bool],
        batch: usize,
        q_start: usize,
    ) -> Var {
        let xv = self.value(x);
        let seq = xv.ncols();
        let mut out = Array2::<f64>::zeros(xv.dim());
        for (r, (row, mut orow)) in xv.outer_iter().zip(out.outer_iter_mut()).enumerate() {
            let i = q_start + r / batch;
            let mask = &allowed[i * seq..(i + 1) * seq];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .fold(f64::NEG_INFINITY, |a, (&b, _)| a.max(b));
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for ((o, &v), &m) in orow.iter_mut().zip(row.iter()).zip(mask) {
                if m {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            orow.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::MaskedSoftmax(x))
    }

    /// Attention-weighted sum of time-major values of the same sample.
    pub fn attn_apply(&mut self, a: Var, v: Var, batch: usize) -> Var {
        let av = self.value(a);
        let vv = self.value(v);
        let seq = av.ncols();
        let nq = av.nrows() / batch;
        let dv = vv.ncols();
        let as_ = av.as_slice().expect("standard layout");
        let vs = vv.as_slice().expect("standard layout");
        let mut out = vec![0.0; nq * batch * dv];
        for i in 0..nq {
            for b in 0..batch {
                let r = i * batch + b;
                let orow = &mut out[r * dv..(r + 1) * dv];
                for j in 0..seq {
                    let w = as_[r * seq + j];
                    if w == 0.0 {
                        continue;
                    }
                    let vr = j * batch + b;
                    for (o, x) in orow.iter_mut().zip(&vs[vr * dv..(vr + 1) * dv]) {
                        *o += w * x;
                    }
                }
            }
        }
        let out = Array2::from_shape_vec((nq * batch, dv), out).unwrap();
        self.push(out, Op::AttnApply { a, v, batch })
    }

    /// Records a scalar `value` whose gradient with respect to `input` is
    /// `grad`, both computed by the caller.
    pub fn linearized(&mut self, input: Var, value: f64, grad: Array2<f64>) -> Var {
        assert_eq!(grad.dim(), self.shape(input), "linearized: gradient shape");
        self.push(Array2::from_elem((1, 1), value), Op::Linearized { input, grad })
    }

    /// Back-propagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.dim()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(x, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[bias.0], gb);
                    accumulate(&mut grads[x.0], g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], -&g);
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MulCol(x, w) => {
                    let gx = &g * self.value(*w);
                    let gw = (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                }
                Op::Scale(x, c) => accumulate(&mut grads[x.0], &g * *c),
                Op::MulConst(x, c) => accumulate(&mut grads[x.0], &g * &**c),
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let gx = &g * &y.mapv(|s| s * (1.0 - s));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let gx = &g * &y.mapv(|t| 1.0 - t * t);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Elu(x) => {
                    let xv = self.value(*x);
                    let gx = &g * &xv.mapv(|v| if v > 0.0 { 1.0 } else { v.exp() });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gam;
                    let m = xhat.ncols() as f64;
                    let mut gx = Array2::<f64>::zeros(xhat.dim());
                    for (r, mut out) in gx.outer_iter_mut().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
                        let is = inv_std[r];
                        for ((o, &d), &h) in out.iter_mut().zip(dh.iter()).zip(xh.iter()) {
                            *o = is / m * (m * d - sum_dh - h * sum_dh_xh);
                        }
                    }
                    accumulate(&mut grads[gamma.0], ggamma);
                    accumulate(&mut grads[beta.0], gbeta);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = &g * y;
                    for (mut row, yrow) in gx.outer_iter_mut().zip(y.outer_iter()) {
                        let dot = row.sum();
                        for (o, &yv) in row.iter_mut().zip(yrow.iter()) {
                            *o -= yv * dot;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        accumulate(&mut grads[p.0], gp);
                        start += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let mut gx = Array2::<f64>::zeros(self.shape(*x));
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        let gp = g.slice(s![start..start + h, ..]).to_owned();
                        accumulate(&mut grads[p.0], gp);
                        start += h;
                    }
                }
                Op::SliceRows(x, start) => {
                    let mut gx = Array2::<f64>::zeros(self.shape(*x));
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::GatherRows(x, index) => {
                    let mut gx = Array2::<f64>::zeros(self.shape(*x));
                    for (row, &i) in g.outer_iter().zip(index.iter()) {
                        let mut dst = gx.row_mut(i);
                        dst += &row;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::AttnScores { q, k, batch, scale } => {
                    let (gq, gk) = attn_scores_backward(
                        &g,
                        self.value(*q),
                        self.value(*k),
                        *batch,
                        *scale,
                    );
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                }
                Op::AttnApply { a, v, batch } => {
                    let (ga, gv) = attn_apply_backward(&g, self.value(*a), self.value(*v), *batch);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[v.0], gv);
                }
                Op::Linearized { input, grad } => {
                    accumulate(&mut grads[input.0], grad * g[[0, 0]]);
                }
            }
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, Var(i))),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }
}

fn attn_scores_backward(
    g: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    batch: usize,
    scale: f64,
) -> (Array2<f64>, Array2<f64>) {
    let d = q.ncols();
    let nq = q.nrows() / batch;
    let seq = k.nrows() / batch;
    let gs = g.as_slice().expect("standard layout");
    let qs = q.as_slice().expect("standard layout");
    let ks = k.as_slice().expect("standard layout");
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    for i in 0..nq {
        for b in 0..batch {
            let r = i * batch + b;
            for j in 0..seq {
                let w = scale * gs[r * seq + j];
                if w == 0.0 {
                    continue;
                }
                let kr = j * batch + b;
                for t in 0..d {
                    gq[r * d + t] += w * ks[kr * d + t];
                    gk[kr * d + t] += w * qs[r * d + t];
                }
            }
        }
    }
    (
        Array2::from_shape_vec(q.dim(), gq).unwrap(),
        Array2::from_shape_vec(k.dim(), gk).unwrap(),
    )
}

fn attn_apply_backward(
    g: &Array2<f64>,
    a: &Array2<f64>,
    v: &Array2<f64>,
    batch: usize,
) -> (Array2<f64>, Array2<f64>) {
    let seq = a.ncols();
    let nq = a.nrows() / batch;
    let dv = v.ncols();
    let gs = g.as_slice().expect("standard layout");
    let as_ = a.as_slice().expect("standard layout");
    let vs = v.as_slice().expect("standard layout");
    let mut ga = vec![0.0; a.len()];
    let mut gv = vec![0.0; v.len()];
    for i in 0..nq {
        for b in 0..batch {
            let r = i * batch + b;
            let grow = &gs[r * dv..(r + 1) * dv];
            for j in 0..seq {
                let vr = j * batch + b;
                let vrow = &vs[vr * dv..(vr + 1) * dv];
                ga[r * seq + j] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                let w = as_[r * seq + j];
                if w != 0.0 {
                    for (o, x) in gv[vr * dv..(vr + 1) * dv].iter_mut().zip(grow) {
                        *o += w * x;
                    }
                }
            }
        }
    }
    (
        Array2::from_shape_vec(a.dim(), ga).unwrap(),
        Array2::from_shape_vec(v.dim(), gv).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` at `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let eps = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn sum_all(t: &mut Tape, v: Var) -> Var {
        let (n, m) = t.shape(v);
        let ones_r = t.leaf(Array2::ones((1, n)));
        let ones_c = t.leaf(Array2::ones((m, 1)));
        let r = t.matmul(ones_r, v);
        t.matmul(r, ones_c)
    }

    fn check(x: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let f = |xv: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(xv.clone());
            let y = build(&mut t, v);
            let s = sum_all(&mut t, y);
            t.value(s)[[0, 0]]
        };
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let y = build(&mut t, v);
        let s = sum_all(&mut t, y);
        let grads = t.backward(s);
        let analytic = grads.wrt(v).unwrap().clone();
        let numeric = numeric_grad(&x, f);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.5, 0.1, -0.4], [-0.9, 0.8, 0.2], [0.05, -0.3, 1.1]]
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let w = array![[0.2, -0.5, 1.0], [0.3, 0.4, -0.7], [1.1, -0.2, 0.5], [0.0, 0.9, -1.3]];
        check(sample(), |t, x| t.sigmoid(x));
        check(sample(), |t, x| t.tanh(x));
        check(sample(), |t, x| t.elu(x));
        check(sample(), |t, x| {
            let c = t.leaf(w.clone());
            let y = t.mul(x, x);
            t.mul(y, c)
        });
        check(sample(), |t, x| {
            let c = t.leaf(w.clone());
            let s = t.softmax(x);
            t.mul(s, c)
        });
    }

    #[test]
    fn layer_norm_gradient() {
        let w = array![[0.2, -0.5, 1.0], [0.3, 0.4, -0.7], [1.1, -0.2, 0.5], [0.0, 0.9, -1.3]];
        check(sample(), |t, x| {
            let gamma = t.leaf(array![[1.2, 0.7, -0.3]]);
            let beta = t.leaf(array![[0.1, 0.0, 0.2]]);
            let c = t.leaf(w.clone());
            let y = t.layer_norm(x, gamma, beta);
            t.mul(y, c)
        });
    }

    #[test]
    fn structural_ops_gradient() {
        check(sample(), |t, x| {
            let a = t.slice_cols(x, 0, 2);
            let b = t.slice_rows(x, 1, 3);
            let g = t.gather_rows(a, Rc::new(vec![3, 3, 0, 2]));
            let c = t.concat_cols(&[g, x]);
            let d = t.concat_rows(&[b, b]);
            let w = t.slice_cols(d, 2, 3);
            let sq = t.mul(c, c);
            t.mul_col(sq, w)
        });
    }

    #[test]
    fn attention_kernels_gradient() {
        // batch 2, seq 2, width 3: rows are time-major
        let allowed = vec![true, false, true, true];
        let k = array![[0.4, -0.1, 0.3], [0.2, 0.5, -0.6], [-0.7, 0.1, 0.9], [0.3, 0.3, 0.3]];
        check(sample(), |t, x| {
            let kk = t.leaf(k.clone());
            let s = t.attn_scores(x, kk, 2, 0.5);
            let a = t.masked_softmax(s, &allowed, 2, 0);
            let y = t.attn_apply(a, x, 2);
            t.mul(y, y)
        });
        check(sample(), |t, x| {
            let q = t.leaf(k.clone());
            let s = t.attn_scores(q, x, 2, 0.7);
            let a = t.masked_softmax(s, &allowed, 2, 0);
            let y = t.attn_apply(a, x, 2);
            t.mul(y, y)
        });
    }

    #[test]
    fn masked_softmax_zeroes_forbidden_positions() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0, 3.0], [0.5, 0.5, 9.0]]);
        let allowed = vec![true, false, false, true, true, false, true, true, true];
        let y = t.masked_softmax(x, &allowed, 1, 0);
        let v = t.value(y);
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v[[1, 2]], 0.0);
        assert!((v[[1, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matmul_and_bias_gradient() {
        let w = array![[0.5, -0.2], [0.1, 0.3], [-0.4, 0.8]];
        check(sample(), |t, x| {
            let wv = t.leaf(w.clone());
            let b = t.leaf(array![[0.1, -0.1]]);
            let y = t.matmul(x, wv);
            let y = t.add_row(y, b);
            let y2 = t.scale(y, 1.5);
            let d = t.sub(y2, y);
            t.mul(d, y)
        });
    }
}
