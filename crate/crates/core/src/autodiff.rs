//! Eager reverse-mode tape over 2-D row-major values.
//!
//! Each op computes its value immediately and records enough state to push
//! gradients back later. Nodes are appended in evaluation order, so a single
//! reverse sweep is a valid topological traversal. Parameters are read from a
//! borrowed [`ParamStore`] rather than copied.

use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleByElem { x: Var, s: Var, idx: usize },
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Rotary { x: Var, start: usize, heads: usize, base: f64 },
    Attention { q: Var, keys: Vec<Var>, values: Vec<Var>, heads: usize, q_start: usize, probs: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Var, Var),
    L2Normalize { x: Var, norms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T> },
    Pick { x: Var, idx: Vec<usize> },
    SumAll(Var),
    MeanRows(Var),
    Transpose(Var),
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

pub struct Tape<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Parameter gradients laid out like [`ParamStore::flatten`]; untouched
    /// parameters contribute zeros.
    pub fn flat_param_grads(&self, store: &ParamStore<T>) -> Vec<T> {
        let mut offsets = Vec::with_capacity(store.len());
        let mut off = 0;
        for e in store.entries() {
            offsets.push(off);
            off += e.tensor.len();
        }
        let mut out = vec![T::zero(); off];
        for (id, g) in self.param_grads() {
            out[offsets[id.index()]..offsets[id.index()] + g.len()].copy_from_slice(g);
        }
        out
    }

    /// Gradients of every parameter touched by the tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(move |(id, v)| self.grads[v.0].as_deref().map(|g| (*id, g)))
    }
}

impl<'p, T: Real> Tape<'p, T> {
    /// Tape that can read parameters from `params`.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), param_vars: vec![None; params.len()], nodes: Vec::new() }
    }

    /// Tape without parameters (batch-level losses, unit checks).
    pub fn detached() -> Self {
        Self { params: None, param_vars: Vec::new(), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.expect("param node on detached tape").get(id).data(),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> T {
        assert_eq!(self.shape(v), (1, 1), "scalar() on non-scalar node");
        self.value(v)[0]
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Var {
        assert_eq!(rows * cols, value.len(), "leaf shape");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.rows(), t.cols(), t.data().to_vec())
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.expect("param on detached tape").get(id);
        let (rows, cols) = (t.rows(), t.cols());
        self.nodes.push(Node { rows, cols, value: Vec::new(), op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let out = matmul_kernel(self.value(a), self.value(b), m, k, n);
        self.push(m, n, out, Op::MatMul(a, b))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_t inner dims");
        let out = matmul_t_kernel(self.value(a), self.value(b), m, k, n);
        self.push(m, n, out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::Add(a, b))
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shapes");
        let bias = self.value(row);
        let out = self.value(a).chunks(c).flat_map(|x| x.iter().zip(bias).map(|(u, v)| *u + *v)).collect();
        self.push(r, c, out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).iter().map(|x| *x * s).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).iter().map(|x| *x + s).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::AddScalar(a))
    }

    /// `x * s[idx]` where `s` is any node and `idx` a flat index into it.
    pub fn scale_by_elem(&mut self, x: Var, s: Var, idx: usize) -> Var {
        let w = self.value(s)[idx];
        let out = self.value(x).iter().map(|v| *v * w).collect();
        let (r, c) = self.shape(x);
        self.push(r, c, out, Op::ScaleByElem { x, s, idx })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| kernels::gelu_scalar(*v)).collect();
        let (r, c) = self.shape(x);
        self.push(r, c, out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c), "layer_norm gain");
        assert_eq!(self.shape(bias), (1, c), "layer_norm bias");
        let (y, xhat, rstd) = kernels::layer_norm_rows(self.value(x), self.value(gain), self.value(bias));
        self.push(r, c, y, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let y = kernels::softmax_rows(self.value(x), c);
        self.push(r, c, y, Op::Softmax(x))
    }

    /// Rotary position encoding; row `i` of `x` sits at absolute position `start + i`.
    pub fn rotary(&mut self, x: Var, start: usize, heads: usize, base: f64) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        rotate_rows(&mut out, r, c, heads, start, base, false);
        self.push(r, c, out, Op::Rotary { x, start, heads, base })
    }

    /// Multi-head causal attention.
    ///
    /// `keys`/`values` are consecutive cache segments covering absolute
    /// positions `0..S`; query row `t` is at position `q_start + t` and sees
    /// keys at positions `<= q_start + t`.
    pub fn attention(&mut self, q: Var, keys: &[Var], values: &[Var], heads: usize, q_start: usize) -> Var {
        assert_eq!(keys.len(), values.len(), "attention segments");
        let (tq, d) = self.shape(q);
        assert_eq!(d % heads, 0, "head split");
        let dh = d / heads;
        let kbuf = self.stack_segments(keys, d);
        let vbuf = self.stack_segments(values, d);
        let s = kbuf.len() / d;
        assert!(q_start + tq <= s, "attention query beyond cached keys");
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qv = self.value(q);
        let mut probs = vec![T::zero(); heads * tq * s];
        let mut out = vec![T::zero(); tq * d];
        let mut logits = vec![T::zero(); s];
        for h in 0..heads {
            let ho = h * dh;
            for t in 0..tq {
                let visible = q_start + t + 1;
                let qrow = &qv[t * d + ho..t * d + ho + dh];
                let mut max = T::neg_infinity();
                for (j, l) in logits.iter_mut().enumerate().take(visible) {
                    let krow = &kbuf[j * d + ho..j * d + ho + dh];
                    let dot = kernels::dot(qrow, krow);
                    *l = dot * scale;
                    max = max.max(*l);
                }
                let prow = &mut probs[(h * tq + t) * s..(h * tq + t + 1) * s];
                let mut total = T::zero();
                for j in 0..visible {
                    prow[j] = (logits[j] - max).exp();
                    total = total + prow[j];
                }
                let orow = &mut out[t * d + ho..t * d + ho + dh];
                for j in 0..visible {
                    prow[j] = prow[j] / total;
                    let p = prow[j];
                    let vrow = &vbuf[j * d + ho..j * d + ho + dh];
                    for (o, v) in orow.iter_mut().zip(vrow) {
                        *o = *o + p * *v;
                    }
                }
            }
        }
        let op = Op::Attention { q, keys: keys.to_vec(), values: values.to_vec(), heads, q_start, probs };
        self.push(tq, d, out, op)
    }

    fn stack_segments(&self, segs: &[Var], d: usize) -> Vec<T> {
        let mut buf = Vec::with_capacity(segs.iter().map(|v| self.nodes[v.0].rows * d).sum());
        for v in segs {
            assert_eq!(self.shape(*v).1, d, "segment width");
            buf.extend_from_slice(self.value(*v));
        }
        buf
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (n, c) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            assert!(i < n, "gather index {i} out of {n}");
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        self.push(ids.len(), c, out, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = self.shape(*p);
            assert_eq!(pc, c, "concat_rows widths");
            out.extend_from_slice(self.value(*p));
            rows += r;
        }
        self.push(rows, c, out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start + len <= r && len > 0, "slice_rows range");
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        self.push(len, c, out, Op::SliceRows { x, start })
    }

    pub fn row(&mut self, x: Var, r: usize) -> Var {
        self.slice_rows(x, r, 1)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (r, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(r, rb, "concat_cols rows");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        self.push(r, ca + cb, out, Op::ConcatCols(a, b))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for row in xv.chunks(c) {
            let n = kernels::l2_norm(row).max(T::of(1e-12));
            norms.push(n);
            out.extend(row.iter().map(|v| *v / n));
        }
        self.push(r, c, out, Op::L2Normalize { x, norms })
    }

    /// Sum over rows with a target of `logsumexp(row) - row[target]`; `[1, 1]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(r, targets.len(), "cross_entropy targets");
        let probs = kernels::softmax_rows(self.value(logits), c);
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                assert!(t < c, "cross_entropy target {t} out of {c}");
                total = total - probs[i * c + t].max(T::min_positive_value()).ln();
            }
        }
        self.push(1, 1, vec![total], Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Flat elements `idx` of `x` as a `[1, n]` row.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let out = idx.iter().map(|&i| xv[i]).collect();
        self.push(1, idx.len(), out, Op::Pick { x, idx: idx.to_vec() })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(1, 1, vec![s], Op::SumAll(x))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = vec![T::zero(); c];
        for row in self.value(x).chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o = *o + *v;
            }
        }
        let n = T::of(r as f64);
        out.iter_mut().for_each(|o| *o = *o / n);
        self.push(1, c, out, Op::MeanRows(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(x))
    }

    pub fn backward_scalar(&self, loss: Var) -> Gradients<T> {
        self.backward(&[(loss, vec![T::one()])])
    }

    /// Reverse sweep seeded with `dL/dv` for each `(v, grad)` pair.
    pub fn backward(&self, seeds: &[(Var, Vec<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(g.len(), self.nodes[v.0].rows * self.nodes[v.0].cols, "seed shape");
            accumulate(&mut grads, *v, g);
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.push_back(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Gradients { grads, params }
    }

    fn push_back(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                // da = g · bᵀ ; db = aᵀ · g
                let da = matmul_t_kernel(g, self.value(*b), m, n, k);
                accumulate(grads, *a, &da);
                let db = matmul_tn_kernel(self.value(*a), g, m, k, n);
                accumulate(grads, *b, &db);
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                // da = g · b ; db = gᵀ · a
                let da = matmul_kernel(g, self.value(*b), m, n, k);
                accumulate(grads, *a, &da);
                let db = matmul_tn_kernel(g, self.value(*a), m, n, k);
                accumulate(grads, *b, &db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g);
                let mut db = vec![T::zero(); cols];
                for r in g.chunks(cols) {
                    for (d, v) in db.iter_mut().zip(r) {
                        *d = *d + *v;
                    }
                }
                accumulate(grads, *row, &db);
            }
            Op::Mul(a, b) => {
                let da: Vec<T> = g.iter().zip(self.value(*b)).map(|(x, y)| *x * *y).collect();
                let db: Vec<T> = g.iter().zip(self.value(*a)).map(|(x, y)| *x * *y).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Scale(a, s) => {
                let da: Vec<T> = g.iter().map(|x| *x * *s).collect();
                accumulate(grads, *a, &da);
            }
            Op::AddScalar(a) => accumulate(grads, *a, g),
            Op::ScaleByElem { x, s, idx } => {
                let w = self.value(*s)[*idx];
                let dx: Vec<T> = g.iter().map(|v| *v * w).collect();
                accumulate(grads, *x, &dx);
                let dw: T = g.iter().zip(self.value(*x)).map(|(a, b)| *a * *b).sum();
                let (sr, sc) = self.shape(*s);
                let mut ds = vec![T::zero(); sr * sc];
                ds[*idx] = dw;
                accumulate(grads, *s, &ds);
            }
            Op::Gelu(x) => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(d, v)| *d * kernels::gelu_grad_scalar(*v))
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (dx, dg, db) = kernels::layer_norm_rows_backward(g, xhat, rstd, self.value(*gain));
                accumulate(grads, *x, &dx);
                accumulate(grads, *gain, &dg);
                accumulate(grads, *bias, &db);
            }
            Op::Softmax(x) => {
                let dx = kernels::softmax_rows_backward(&node.value, g, cols);
                accumulate(grads, *x, &dx);
            }
            Op::Rotary { x, start, heads, base } => {
                let mut dx = g.to_vec();
                rotate_rows(&mut dx, rows, cols, *heads, *start, *base, true);
                accumulate(grads, *x, &dx);
            }
            Op::Attention { q, keys, values, heads, q_start, probs } => {
                self.attention_backward(g, *q, keys, values, *heads, *q_start, probs, grads);
            }
            Op::Gather { table, ids } => {
                let (n, c) = self.shape(*table);
                let mut dt = vec![T::zero(); n * c];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] = dt[id * c + j] + g[r * c + j];
                    }
                }
                accumulate(grads, *table, &dt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].rows * cols;
                    accumulate(grads, *p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let (xr, xc) = self.shape(*x);
                let mut dx = vec![T::zero(); xr * xc];
                dx[start * xc..(start + rows) * xc].copy_from_slice(g);
                accumulate(grads, *x, &dx);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = cols - ca;
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in g.chunks(cols) {
                    da.extend_from_slice(&r[..ca]);
                    db.extend_from_slice(&r[ca..]);
                }
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.shape(*logits).1;
                let mut dl = vec![T::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..c {
                            let one = if j == t { T::one() } else { T::zero() };
                            dl[r * c + j] = (probs[r * c + j] - one) * g[0];
                        }
                    }
                }
                accumulate(grads, *logits, &dl);
            }
            Op::Pick { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut dx = vec![T::zero(); r * c];
                for (k, &i) in idx.iter().enumerate() {
                    dx[i] = dx[i] + g[k];
                }
                accumulate(grads, *x, &dx);
            }
            Op::SumAll(x) => {
                let (r, c) = self.shape(*x);
                accumulate(grads, *x, &vec![g[0]; r * c]);
            }
            Op::MeanRows(x) => {
                let r = self.shape(*x).0;
                let inv = T::of(1.0 / r as f64);
                let mut dx = Vec::with_capacity(r * cols);
                for _ in 0..r {
                    dx.extend(g.iter().map(|v| *v * inv));
                }
                accumulate(grads, *x, &dx);
            }
            Op::Transpose(x) => {
                let mut dx = vec![T::zero(); rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dx[j * rows + i] = g[i * cols + j];
                    }
                }
                accumulate(grads, *x, &dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        keys: &[Var],
        values: &[Var],
        heads: usize,
        q_start: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (tq, d) = self.shape(q);
        let dh = d / heads;
        let kbuf = self.stack_segments(keys, d);
        let vbuf = self.stack_segments(values, d);
        let s = kbuf.len() / d;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qv = self.value(q);
        let mut dq = vec![T::zero(); tq * d];
        let mut dk = vec![T::zero(); s * d];
        let mut dv = vec![T::zero(); s * d];
        let mut dp = vec![T::zero(); s];
        for h in 0..heads {
            let ho = h * dh;
            for t in 0..tq {
                let visible = q_start + t + 1;
                let prow = &probs[(h * tq + t) * s..(h * tq + t + 1) * s];
                let grow = &g[t * d + ho..t * d + ho + dh];
                let mut dot = T::zero();
                for j in 0..visible {
                    let vrow = &vbuf[j * d + ho..j * d + ho + dh];
                    dp[j] = kernels::dot(grow, vrow);
                    dot = dot + prow[j] * dp[j];
                    let p = prow[j];
                    for (dvv, gg) in dv[j * d + ho..j * d + ho + dh].iter_mut().zip(grow) {
                        *dvv = *dvv + p * *gg;
                    }
                }
                let qrow = &qv[t * d + ho..t * d + ho + dh];
                for j in 0..visible {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = &kbuf[j * d + ho..j * d + ho + dh];
                    for c in 0..dh {
                        dq[t * d + ho + c] = dq[t * d + ho + c] + ds * krow[c];
                        dk[j * d + ho + c] = dk[j * d + ho + c] + ds * qrow[c];
                    }
                }
            }
        }
        accumulate(grads, q, &dq);
        let mut off = 0;
        for (kseg, vseg) in keys.iter().zip(values) {
            let n = self.nodes[kseg.0].rows * d;
            accumulate(grads, *kseg, &dk[off..off + n]);
            accumulate(grads, *vseg, &dv[off..off + n]);
            off += n;
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(buf) => {
            for (b, x) in buf.iter_mut().zip(g) {
                *b = *b + *x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// `a [m,k] · b [k,n]`.
fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
    out
}

/// `a [m,k] · b [n,k]ᵀ`.
fn matmul_t_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = kernels::dot(arow, brow);
        }
    }
    out
}

/// `a [m,k]ᵀ · b [m,n]` giving `[k, n]`.
fn matmul_tn_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
    out
}

/// Rotates interleaved pairs `(2i, 2i+1)` of every head by `pos * base^(-2i/dh)`.
fn rotate_rows<T: Real>(
    buf: &mut [T],
    rows: usize,
    cols: usize,
    heads: usize,
    start: usize,
    base: f64,
    inverse: bool,
) {
    let dh = cols / heads;
    assert_eq!(dh % 2, 0, "rotary needs an even head dimension");
    let half = dh / 2;
    let freqs: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / dh as f64)).collect();
    for r in 0..rows {
        let pos = (start + r) as f64;
        for (i, f) in freqs.iter().enumerate() {
            let angle = if inverse { -pos * f } else { pos * f };
            let (sin, cos) = (T::of(angle.sin()), T::of(angle.cos()));
            for h in 0..heads {
                let o = r * cols + h * dh + 2 * i;
                let (x0, x1) = (buf[o], buf[o + 1]);
                buf[o] = x0 * cos - x1 * sin;
                buf[o + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_backward_small() {
        let mut tape = Tape::<f64>::detached();
        let a = tape.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.leaf(2, 1, vec![5.0, 6.0]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &[17.0, 39.0]);
        let s = tape.sum_all(c);
        let g = tape.backward_scalar(s);
        assert_eq!(g.wrt(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.wrt(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_t_matches_explicit_transpose() {
        let mut tape = Tape::<f64>::detached();
        let a = tape.leaf(2, 3, vec![1.0, -2.0, 0.5, 3.0, 1.0, -1.0]);
        let b = tape.leaf(2, 3, vec![0.2, 0.4, -0.6, 1.5, 2.0, 0.1]);
        let direct = tape.matmul_t(a, b);
        let bt = tape.transpose(b);
        let via = tape.matmul(a, bt);
        assert_eq!(tape.value(direct), tape.value(via));
    }

    #[test]
    fn rotary_inverse_restores_input() {
        let mut buf: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.5).collect();
        let orig = buf.clone();
        rotate_rows(&mut buf, 2, 8, 2, 5, 10000.0, false);
        rotate_rows(&mut buf, 2, 8, 2, 5, 10000.0, true);
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotary_logits_depend_on_offset_only() {
        let q = vec![0.3, -1.1, 0.7, 0.2];
        let k = vec![-0.4, 0.9, 1.3, -0.5];
        let logit = |pq: usize, pk: usize| {
            let mut qa = q.clone();
            let mut ka = k.clone();
            rotate_rows(&mut qa, 1, 4, 1, pq, 10000.0, false);
            rotate_rows(&mut ka, 1, 4, 1, pk, 10000.0, false);
            qa.iter().zip(&ka).map(|(a, b)| a * b).sum::<f64>()
        };
        let base = logit(3, 1);
        for shift in [0usize, 7, 40, 300] {
            assert!((logit(3 + shift, 1 + shift) - base).abs() < 1e-9);
        }
        assert!((logit(4, 1) - base).abs() > 1e-6);
    }

    #[test]
    fn attention_is_causal_across_segments() {
        let mut tape = Tape::<f64>::detached();
        let k1 = tape.leaf(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let v1 = tape.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let k2 = tape.leaf(1, 2, vec![5.0, 5.0]);
        let v2 = tape.leaf(1, 2, vec![100.0, 100.0]);
        let q = tape.leaf(2, 2, vec![0.0, 0.0, 0.0, 0.0]);
        // rows at positions 1 and 2: first sees 2 keys, second sees 3
        let out = tape.attention(q, &[k1, k2], &[v1, v2], 1, 1);
        let o = tape.value(out);
        assert!((o[0] - 2.0).abs() < 1e-12 && (o[1] - 3.0).abs() < 1e-12);
        assert!((o[2] - (1.0 + 3.0 + 100.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_input_accumulates() {
        let mut tape = Tape::<f64>::detached();
        let x = tape.leaf(1, 2, vec![3.0, -1.0]);
        let sq = tape.mul(x, x);
        let s = tape.sum_all(sq);
        let g = tape.backward_scalar(s);
        assert_eq!(g.wrt(x).unwrap(), &[6.0, -2.0]);
    }
}
