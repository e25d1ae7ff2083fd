//! Minimal tape-based reverse-mode automatic differentiation over dense
//! row-major matrices.
//!
//! Every node holds a materialized value. `backward` walks the tape in reverse
//! and accumulates vector-Jacobian products. Nodes whose inputs do not require
//! gradients are skipped.

use ndarray::{s, Array2, Axis};

use crate::scalar::{sigmoid, softplus, Scalar};

pub type Mat<T> = Array2<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    AddGrouped(Var, Var, Vec<usize>),
    OuterScale(Var, Vec<T>),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Attend(Box<AttendCache<T>>),
    GatherElems(Var, Vec<(usize, usize)>),
    Sum(Var),
    WeightedSum(Var, Mat<T>),
    RowCosine { a: Var, b: Var, dots: Vec<T>, na: Vec<T>, nb: Vec<T> },
}

struct AttendCache<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    lists: Vec<Vec<usize>>,
    /// softmax weights, laid out per query then per head
    weights: Vec<T>,
    offsets: Vec<usize>,
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by tape variable.
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Mat<T>>, g: Mat<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.tanh());
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.exp());
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.ln());
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start, end), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start, end), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&src.row(i));
        }
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx), rg)
    }

    /// Adds `offsets[group[r]]` to row `r` of `a`.
    pub fn add_grouped(&mut self, a: Var, offsets: Var, group: Vec<usize>) -> Var {
        let mut value = self.value(a).clone();
        let off = self.value(offsets);
        debug_assert_eq!(group.len(), value.nrows());
        for (r, &g) in group.iter().enumerate() {
            let mut row = value.row_mut(r);
            row += &off.row(g);
        }
        let rg = self.rg(a) || self.rg(offsets);
        self.push(value, Op::AddGrouped(a, offsets, group), rg)
    }

    /// `out[i][j] = c[i] * row[j]` for a `1 x n` row variable.
    pub fn outer_scale(&mut self, row: Var, c: Vec<T>) -> Var {
        let r = self.value(row);
        debug_assert_eq!(r.nrows(), 1);
        let n = r.ncols();
        let mut value = Mat::zeros((c.len(), n));
        for (i, &ci) in c.iter().enumerate() {
            for j in 0..n {
                value[[i, j]] = ci * r[[0, j]];
            }
        }
        let rg = self.rg(row);
        self.push(value, Op::OuterScale(row, c), rg)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let src = self.value(x);
        let n = T::of(src.ncols() as f64);
        let mut value = src.clone();
        let mut inv_std = Vec::with_capacity(src.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let rg = self.rg(x);
        self.push(value, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Multi-head scaled dot-product attention where query row `i` attends over
    /// the key/value rows listed in `lists[i]`. Columns are split evenly across
    /// `heads`.
    pub fn attend(&mut self, q: Var, k: Var, v: Var, lists: Vec<Vec<usize>>, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.ncols();
        assert_eq!(km.ncols(), d, "attend: key width");
        assert_eq!(vm.ncols(), d, "attend: value width");
        assert_eq!(km.nrows(), vm.nrows(), "attend: key/value rows");
        assert_eq!(lists.len(), qm.nrows(), "attend: one list per query");
        assert!(heads >= 1 && d % heads == 0, "attend: width divisible by heads");
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = Mat::zeros((qm.nrows(), d));
        let total: usize = lists.iter().map(|l| l.len()).sum::<usize>() * heads;
        let mut weights = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(lists.len() * heads);
        let mut logits = Vec::new();
        for (i, list) in lists.iter().enumerate() {
            assert!(!list.is_empty(), "attend: empty key list for query {i}");
            let qrow = qm.row(i);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                logits.clear();
                let mut max = T::neg_infinity();
                for &j in list {
                    let krow = km.row(j);
                    let mut dot = T::zero();
                    for c in cols.clone() {
                        dot += qrow[c] * krow[c];
                    }
                    let l = dot * scale;
                    if l > max {
                        max = l;
                    }
                    logits.push(l);
                }
                let mut z = T::zero();
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    z += *l;
                }
                offsets.push(weights.len());
                for (w, &j) in logits.iter().zip(list) {
                    let w = *w / z;
                    weights.push(w);
                    let vrow = vm.row(j);
                    for c in cols.clone() {
                        out[[i, c]] += w * vrow[c];
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let cache = AttendCache { q, k, v, heads, lists, weights, offsets };
        self.push(out, Op::Attend(Box::new(cache)), rg)
    }

    /// Softmax weights of an `attend` node, one vector per (query, head).
    pub fn attention_weights(&self, v: Var) -> Option<Vec<Vec<T>>> {
        match &self.nodes[v.0].op {
            Op::Attend(c) => {
                let mut res = Vec::new();
                for (i, list) in c.lists.iter().enumerate() {
                    for h in 0..c.heads {
                        let off = c.offsets[i * c.heads + h];
                        res.push(c.weights[off..off + list.len()].to_vec());
                    }
                }
                Some(res)
            }
            _ => None,
        }
    }

    /// Column vector of selected entries.
    pub fn gather_elems(&mut self, a: Var, idx: Vec<(usize, usize)>) -> Var {
        let src = self.value(a);
        let value = Mat::from_shape_fn((idx.len(), 1), |(r, _)| src[idx[r]]);
        let rg = self.rg(a);
        self.push(value, Op::GatherElems(a, idx), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// `sum(a * w)` for a constant weight matrix.
    pub fn weighted_sum(&mut self, a: Var, w: Mat<T>) -> Var {
        let value = Mat::from_elem((1, 1), (self.value(a) * &w).sum());
        let rg = self.rg(a);
        self.push(value, Op::WeightedSum(a, w), rg)
    }

    /// Row-wise cosine distance `1 - <a_i, b_i> / (|a_i| |b_i|)`, as a column.
    pub fn row_cosine_distance(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.dim(), bm.dim(), "row_cosine_distance: shapes");
        let tiny = T::of(1e-30);
        let n = am.nrows();
        let mut dots = Vec::with_capacity(n);
        let mut na = Vec::with_capacity(n);
        let mut nb = Vec::with_capacity(n);
        let mut value = Mat::zeros((n, 1));
        for i in 0..n {
            let (ra, rb) = (am.row(i), bm.row(i));
            let dot = ra.dot(&rb);
            let a_n = ra.dot(&ra).sqrt().max(tiny);
            let b_n = rb.dot(&rb).sqrt().max(tiny);
            value[[i, 0]] = T::one() - dot / (a_n * b_n);
            dots.push(dot);
            na.push(a_n);
            nb.push(b_n);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::RowCosine { a, b, dots, na, nb }, rg)
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::from_elem((1, 1), T::one()));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(idx, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g * self.value(*b));
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.rg(*row) {
                    add_into(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g * self.value(*row));
                }
                if self.rg(*row) {
                    let prod = g * self.value(*a);
                    add_into(&mut grads[row.0], prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => add_into(&mut grads[a.0], g * *c),
            Op::Tanh(a) => {
                let mut d = node.value.mapv(|y| T::one() - y * y);
                d *= g;
                add_into(&mut grads[a.0], d);
            }
            Op::Sigmoid(a) => {
                let mut d = node.value.mapv(|y| y * (T::one() - y));
                d *= g;
                add_into(&mut grads[a.0], d);
            }
            Op::Softplus(a) => {
                let mut d = self.value(*a).mapv(sigmoid);
                d *= g;
                add_into(&mut grads[a.0], d);
            }
            Op::Exp(a) => add_into(&mut grads[a.0], g * &node.value),
            Op::Log(a) => add_into(&mut grads[a.0], g / self.value(*a)),
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.rg(*p) {
                        add_into(&mut grads[p.0], g.slice(s![.., c0..c0 + w]).to_owned());
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    if self.rg(*p) {
                        add_into(&mut grads[p.0], g.slice(s![r0..r0 + h, ..]).to_owned());
                    }
                    r0 += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut full = Mat::zeros(self.value(*a).dim());
                full.slice_mut(s![.., *start..*end]).assign(g);
                add_into(&mut grads[a.0], full);
            }
            Op::SliceRows(a, start, end) => {
                let mut full = Mat::zeros(self.value(*a).dim());
                full.slice_mut(s![*start..*end, ..]).assign(g);
                add_into(&mut grads[a.0], full);
            }
            Op::GatherRows(a, rows) => {
                let mut full = Mat::zeros(self.value(*a).dim());
                for (r, &i) in rows.iter().enumerate() {
                    let mut dst = full.row_mut(i);
                    dst += &g.row(r);
                }
                add_into(&mut grads[a.0], full);
            }
            Op::AddGrouped(a, offsets, group) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.rg(*offsets) {
                    let mut go = Mat::zeros(self.value(*offsets).dim());
                    for (r, &gi) in group.iter().enumerate() {
                        let mut dst = go.row_mut(gi);
                        dst += &g.row(r);
                    }
                    add_into(&mut grads[offsets.0], go);
                }
            }
            Op::OuterScale(row, c) => {
                let n = g.ncols();
                let mut gr = Mat::zeros((1, n));
                for (i, &ci) in c.iter().enumerate() {
                    for j in 0..n {
                        gr[[0, j]] += ci * g[[i, j]];
                    }
                }
                add_into(&mut grads[row.0], gr);
            }
            Op::LayerNorm { x, inv_std } => {
                let n = T::of(node.value.ncols() as f64);
                let mut dx = Mat::zeros(node.value.dim());
                for (i, (xh, gr)) in node.value.rows().into_iter().zip(g.rows()).enumerate() {
                    let mean_g = gr.sum() / n;
                    let mean_gx = xh.dot(&gr) / n;
                    let mut out = dx.row_mut(i);
                    for c in 0..xh.len() {
                        out[c] = inv_std[i] * (gr[c] - mean_g - xh[c] * mean_gx);
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Attend(c) => self.attend_backward(c, g, grads),
            Op::GatherElems(a, idx) => {
                let mut full = Mat::zeros(self.value(*a).dim());
                for (r, &(i, j)) in idx.iter().enumerate() {
                    full[[i, j]] += g[[r, 0]];
                }
                add_into(&mut grads[a.0], full);
            }
            Op::Sum(a) => {
                let gv = g[[0, 0]];
                add_into(&mut grads[a.0], Mat::from_elem(self.value(*a).dim(), gv));
            }
            Op::WeightedSum(a, w) => {
                let gv = g[[0, 0]];
                add_into(&mut grads[a.0], w * gv);
            }
            Op::RowCosine { a, b, dots, na, nb } => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let mut ga = Mat::zeros(am.dim());
                let mut gb = Mat::zeros(bm.dim());
                for i in 0..am.nrows() {
                    let gi = g[[i, 0]];
                    let ab = na[i] * nb[i];
                    let cos = dots[i] / ab;
                    for c in 0..am.ncols() {
                        // d(1 - cos)/da = -(b/(|a||b|) - cos * a/|a|^2)
                        ga[[i, c]] = -gi * (bm[[i, c]] / ab - cos * am[[i, c]] / (na[i] * na[i]));
                        gb[[i, c]] = -gi * (am[[i, c]] / ab - cos * bm[[i, c]] / (nb[i] * nb[i]));
                    }
                }
                if self.rg(*a) {
                    add_into(&mut grads[a.0], ga);
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], gb);
                }
            }
        }
    }

    fn attend_backward(&self, c: &AttendCache<T>, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let (qm, km, vm) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = qm.ncols();
        let dh = d / c.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut gq = Mat::zeros(qm.dim());
        let mut gk = Mat::zeros(km.dim());
        let mut gv = Mat::zeros(vm.dim());
        let mut dw = Vec::new();
        for (i, list) in c.lists.iter().enumerate() {
            for h in 0..c.heads {
                let cols = h * dh..(h + 1) * dh;
                let off = c.offsets[i * c.heads + h];
                let w = &c.weights[off..off + list.len()];
                dw.clear();
                let mut wdw = T::zero();
                for (&wj, &j) in w.iter().zip(list) {
                    let mut dot = T::zero();
                    for col in cols.clone() {
                        dot += g[[i, col]] * vm[[j, col]];
                        gv[[j, col]] += wj * g[[i, col]];
                    }
                    dw.push(dot);
                    wdw += wj * dot;
                }
                for ((&wj, &j), &dwj) in w.iter().zip(list).zip(dw.iter()) {
                    let dl = wj * (dwj - wdw) * scale;
                    if dl == T::zero() {
                        continue;
                    }
                    for col in cols.clone() {
                        gq[[i, col]] += dl * km[[j, col]];
                        gk[[j, col]] += dl * qm[[i, col]];
                    }
                }
            }
        }
        if self.rg(c.q) {
            add_into(&mut grads[c.q.0], gq);
        }
        if self.rg(c.k) {
            add_into(&mut grads[c.k.0], gk);
        }
        if self.rg(c.v) {
            add_into(&mut grads[c.v.0], gv);
        }
    }
}
