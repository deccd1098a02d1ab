//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every op of one forward pass. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for [`Tape::backward`]. Ops that naturally batch
//! (attention, temporal convolution, grouped means) take a `groups` extent so
//! many frames or videos share one node.

pub mod kernels;

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{AsuError, Result};
use crate::tensor::{ParamStore, Real, Tensor};
use kernels::*;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask of shape `[lq × lk]`; `true` means the key is visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub lq: usize,
    pub lk: usize,
    allowed: Arc<Vec<bool>>,
}

impl AttnMask {
    pub fn new(lq: usize, lk: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != lq * lk {
            return Err(AsuError::Dimension(format!(
                "mask of {} entries for {lq}x{lk}",
                allowed.len()
            )));
        }
        for i in 0..lq {
            if !allowed[i * lk..(i + 1) * lk].iter().any(|&b| b) {
                return Err(AsuError::Contract(format!(
                    "attention mask row {i} has no visible key"
                )));
            }
        }
        Ok(AttnMask {
            lq,
            lk,
            allowed: Arc::new(allowed),
        })
    }

    /// Block mask from a key → block assignment: query `i` sees keys with `block_of_key == i`.
    pub fn from_blocks(num_blocks: usize, block_of_key: &[usize]) -> Result<Self> {
        let lk = block_of_key.len();
        let mut allowed = vec![false; num_blocks * lk];
        for (j, &b) in block_of_key.iter().enumerate() {
            if b >= num_blocks {
                return Err(AsuError::Invalid(format!("key {j} in block {b} ≥ {num_blocks}")));
            }
            allowed[b * lk + j] = true;
        }
        Self::new(num_blocks, lk, allowed)
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.lk + j]
    }
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddTiled { a: Var, b: Var },
    Gelu { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    L2NormalizeRows { a: Var, norms: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, groups: usize, lq: usize, lk: usize, probs: Vec<T> },
    Conv1dDepthwise { x: Var, kernel: Var, seq_len: usize },
    GatherRows { a: Var, index: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Reshape { a: Var },
    MeanRowsGrouped { a: Var, group_len: usize },
    Sum { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// One forward pass worth of recorded computation.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AsuError::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn derived(&mut self, shape: &[usize], data: Vec<T>, inputs: &[Var], op: Op<T>, name: &'static str) -> Result<Var> {
        let mut value = Tensor::new(shape, data)?;
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        self.push(value, op, name)
    }

    /// Leaf that keeps the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Binds a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let mut t = store.tensor(name)?.clone();
        t.requires_grad = true;
        let v = self.leaf(t);
        self.params.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    // ---- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AsuError::Dimension(format!("matmul {sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.derived(&[m, n], out, &[a, b], Op::MatMul { a, b, m, k, n }, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(AsuError::Dimension(format!("transpose of rank {}", s.len())));
        }
        let out = transpose(self.data(a), s[0], s[1]);
        self.derived(&[s[1], s[0]], out, &[a], Op::Transpose { a, rows: s[0], cols: s[1] }, "transpose")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(AsuError::Dimension(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        self.derived(&s, out, &[a, b], Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "sub")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        self.derived(&s, out, &[a, b], Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        self.derived(&s, out, &[a, b], Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let s = self.shape(a).to_vec();
        let out = self.data(a).iter().map(|&x| x * c).collect();
        self.derived(&s, out, &[a], Op::Scale { a, c }, "scale")
    }

    /// `a` viewed as `[g·l × d]` plus `b` of `l·d` elements repeated for each of the `g` groups.
    /// With `b` a single row this is a bias add.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if nb == 0 || na % nb != 0 || self.dims2(a).1 != self.dims2(b).1 {
            return Err(AsuError::Dimension(format!(
                "add_tiled {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let bd = self.data(b);
        let out = self
            .data(a)
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        let s = self.shape(a).to_vec();
        self.derived(&s, out, &[a, b], Op::AddTiled { a, b }, "add_tiled")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let out = self.data(a).iter().map(|&x| gelu(x)).collect();
        self.derived(&s, out, &[a], Op::Gelu { a }, "gelu")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(AsuError::Dimension(format!("softmax axis {axis} for rank {}", s.len())));
        }
        let mut out = self.data(a).to_vec();
        let (outer, len, inner) = axis_layout(&s, axis);
        for o in 0..outer {
            for i in 0..inner {
                softmax_lane(&mut out, o * len * inner + i, len, inner);
            }
        }
        self.derived(&s, out, &[a], Op::Softmax { a, axis }, "softmax")
    }

    /// Normalizes over the last axis, then applies per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.dims2(x);
        if d == 0 || self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(AsuError::Dimension(format!(
                "layer_norm over {d} features with gain {:?} bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = T::of(eps);
        let dt = T::of(d as f64);
        let xs = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let s = self.shape(x).to_vec();
        self.derived(&s, out, &[x, gain, bias], Op::LayerNorm { x, gain, bias, xhat, rstd }, "layer_norm")
    }

    /// Scales each row to unit L2 norm. Zero rows are a degenerate-input error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = self.dims2(a);
        let xs = self.data(a);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(AsuError::Degenerate(format!("row {r} has zero norm")));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let s = self.shape(a).to_vec();
        self.derived(&s, out, &[a], Op::L2NormalizeRows { a, norms }, "l2_normalize_rows")
    }

    /// Scaled dot-product attention over `groups` independent problems.
    ///
    /// `q` is `[groups·lq × d]`, `k` and `v` are `[groups·lk × d]`; group `g`
    /// only sees its own rows. Heads split the feature axis evenly and use
    /// `1/sqrt(d/heads)` scaling. An optional `[lq × lk]` mask is shared by
    /// all groups; hidden keys get exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize, mask: Option<&AttnMask>) -> Result<Var> {
        let (rq, d) = self.dims2(q);
        let (rk, dk) = self.dims2(k);
        let (rv, dv) = self.dims2(v);
        if heads == 0 || d % heads != 0 {
            return Err(AsuError::Dimension(format!("width {d} not divisible by {heads} heads")));
        }
        if dk != d || dv != d || rk != rv || groups == 0 || rq % groups != 0 || rk % groups != 0 {
            return Err(AsuError::Dimension(format!(
                "attention q {rq}x{d}, k {rk}x{dk}, v {rv}x{dv}, groups {groups}"
            )));
        }
        let (lq, lk) = (rq / groups, rk / groups);
        if lk == 0 {
            return Err(AsuError::Contract("attention over zero keys".into()));
        }
        if let Some(m) = mask {
            if m.lq != lq || m.lk != lk {
                return Err(AsuError::Dimension(format!(
                    "mask {}x{} for attention {lq}x{lk}",
                    m.lq, m.lk
                )));
            }
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let neg = T::of(MASK_NEG);
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); groups * heads * lq * lk];
        let mut out = vec![T::zero(); rq * d];
        for g in 0..groups {
            for h in 0..heads {
                let col = h * dh;
                let pbase = (g * heads + h) * lq * lk;
                for i in 0..lq {
                    let qrow = &qd[(g * lq + i) * d + col..(g * lq + i) * d + col + dh];
                    let prow = &mut probs[pbase + i * lk..pbase + (i + 1) * lk];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kd[(g * lk + j) * d + col..(g * lk + j) * d + col + dh];
                        let mut s = T::zero();
                        for (&x, &y) in qrow.iter().zip(krow) {
                            s += x * y;
                        }
                        s *= scale;
                        if let Some(m) = mask {
                            if !m.allows(i, j) {
                                s += neg;
                            }
                        }
                        *p = s;
                    }
                    softmax_lane(prow, 0, lk, 1);
                    let orow = &mut out[(g * lq + i) * d + col..(g * lq + i) * d + col + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        if p == T::zero() {
                            continue;
                        }
                        let vrow = &vd[(g * lk + j) * d + col..(g * lk + j) * d + col + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let s = self.shape(q).to_vec();
        self.derived(&s, out, &[q, k, v], Op::Attention { q, k, v, heads, groups, lq, lk, probs }, "attention")
    }

    /// Per-channel temporal convolution, kernel size 3, stride 1, zero padding 1.
    ///
    /// `x` is `[groups·seq_len × d]` (independent sequences stacked); `kernel` is
    /// `[d × 3]` with taps ordered (t−1, t, t+1).
    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var, seq_len: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x);
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(AsuError::Dimension(format!("{rows} rows not a multiple of sequence length {seq_len}")));
        }
        if self.shape(kernel) != [d, 3] {
            return Err(AsuError::Dimension(format!("kernel {:?} for {d} channels", self.shape(kernel))));
        }
        let (xd, kd) = (self.data(x), self.data(kernel));
        let mut out = vec![T::zero(); rows * d];
        for s in 0..rows / seq_len {
            let base = s * seq_len;
            for t in 0..seq_len {
                for (tap, off) in [(0usize, -1isize), (1, 0), (2, 1)] {
                    let src = t as isize + off;
                    if src < 0 || src >= seq_len as isize {
                        continue;
                    }
                    let src = base + src as usize;
                    for c in 0..d {
                        out[(base + t) * d + c] += kd[c * 3 + tap] * xd[src * d + c];
                    }
                }
            }
        }
        let s = self.shape(x).to_vec();
        self.derived(&s, out, &[x, kernel], Op::Conv1dDepthwise { x, kernel, seq_len }, "conv1d_depthwise")
    }

    /// Rows of `a` (as a matrix) picked by `index`; repeats allowed.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(AsuError::Dimension(format!("row {bad} of {rows}")));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.derived(&[index.len(), d], out, &[a], Op::GatherRows { a, index: index.to_vec() }, "gather_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = parts
            .first()
            .map(|&p| self.dims2(p).1)
            .ok_or_else(|| AsuError::Dimension("concat of nothing".into()))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if c != d {
                return Err(AsuError::Dimension(format!("concat width {c} vs {d}")));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        self.derived(&[rows, d], out, parts, Op::ConcatRows { parts: parts.to_vec() }, "concat_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let data = self.data(a).to_vec();
        self.derived(shape, data, &[a], Op::Reshape { a }, "reshape")
    }

    /// `[groups·group_len × d]` → `[groups × d]` by averaging consecutive rows.
    pub fn mean_rows_grouped(&mut self, a: Var, group_len: usize) -> Result<Var> {
        let (rows, d) = self.dims2(a);
        if group_len == 0 || rows % group_len != 0 {
            return Err(AsuError::Dimension(format!("{rows} rows in groups of {group_len}")));
        }
        let groups = rows / group_len;
        let inv = T::of(1.0 / group_len as f64);
        let src = self.data(a);
        let mut out = vec![T::zero(); groups * d];
        for g in 0..groups {
            for r in 0..group_len {
                let row = &src[(g * group_len + r) * d..(g * group_len + r + 1) * d];
                for (o, &x) in out[g * d..(g + 1) * d].iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        out.iter_mut().for_each(|x| *x *= inv);
        self.derived(&[groups, d], out, &[a], Op::MeanRowsGrouped { a, group_len }, "mean_rows_grouped")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum::<T>();
        self.derived(&[], vec![s], &[a], Op::Sum { a }, "sum")
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, classes) = self.dims2(logits);
        if targets.len() != b || self.shape(logits).len() != 2 {
            return Err(AsuError::Dimension(format!(
                "{} targets for logits {:?}",
                targets.len(),
                self.shape(logits)
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(AsuError::Invalid(format!("target {t} with {classes} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &self.data(logits)[r * classes..(r + 1) * classes];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max.as_f64() + row.iter().map(|&x| (x - max).as_f64().exp()).sum::<f64>().ln();
            loss += lse - row[t].as_f64();
            softmax_lane(&mut probs, r * classes, classes, 1);
        }
        let loss = T::of(loss / b as f64);
        self.derived(&[], vec![loss], &[logits], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, "cross_entropy")
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(AsuError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gout) = self.grads[id].take() else { continue };
            self.backprop_node(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize, gout: &[T]) {
        let Tape { nodes, grads, .. } = self;
        let nodes: &[Node<T>] = nodes;
        let rg = |v: &Var| nodes[v.0].value.requires_grad;
        let val = |v: &Var| nodes[v.0].value.data();
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(a) {
                    let bd = val(b);
                    let ga = buf(nodes, grads, a).unwrap();
                    matmul_nt_acc(gout, bd, ga, m, n, k);
                }
                if rg(b) {
                    let ad = val(a);
                    let gb = buf(nodes, grads, b).unwrap();
                    matmul_tn_acc(ad, gout, gb, m, k, n);
                }
            }
            Op::Transpose { a, rows, cols } => {
                if let Some(ga) = buf(nodes, grads, a) {
                    let t = transpose(gout, *cols, *rows);
                    ga.iter_mut().zip(t).for_each(|(g, x)| *g += x);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(g) = buf(nodes, grads, v) {
                        g.iter_mut().zip(gout).for_each(|(g, &x)| *g += x);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(g) = buf(nodes, grads, a) {
                    g.iter_mut().zip(gout).for_each(|(g, &x)| *g += x);
                }
                if let Some(g) = buf(nodes, grads, b) {
                    g.iter_mut().zip(gout).for_each(|(g, &x)| *g -= x);
                }
            }
            Op::Mul { a, b } => {
                if rg(a) {
                    let bd = val(b);
                    let g = buf(nodes, grads, a).unwrap();
                    for ((g, &x), &y) in g.iter_mut().zip(gout).zip(bd) {
                        *g += x * y;
                    }
                }
                if rg(b) {
                    let ad = val(a);
                    let g = buf(nodes, grads, b).unwrap();
                    for ((g, &x), &y) in g.iter_mut().zip(gout).zip(ad) {
                        *g += x * y;
                    }
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                if let Some(g) = buf(nodes, grads, a) {
                    g.iter_mut().zip(gout).for_each(|(g, &x)| *g += x * c);
                }
            }
            Op::AddTiled { a, b } => {
                if let Some(g) = buf(nodes, grads, a) {
                    g.iter_mut().zip(gout).for_each(|(g, &x)| *g += x);
                }
                if let Some(g) = buf(nodes, grads, b) {
                    let nb = g.len();
                    for chunk in gout.chunks(nb) {
                        g.iter_mut().zip(chunk).for_each(|(g, &x)| *g += x);
                    }
                }
            }
            Op::Gelu { a } => {
                if rg(a) {
                    let ad = val(a);
                    let g = buf(nodes, grads, a).unwrap();
                    for ((g, &x), &dy) in g.iter_mut().zip(ad).zip(gout) {
                        *g += dy * gelu_grad(x);
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if rg(a) {
                    let y = nodes[id].value.data();
                    let shape = nodes[id].value.shape();
                    let (outer, len, inner) = axis_layout(&shape, *axis);
                    let g = buf(nodes, grads, a).unwrap();
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: T = (0..len).map(|j| y[base + j * inner] * gout[base + j * inner]).sum();
                            for j in 0..len {
                                let idx = base + j * inner;
                                g[idx] += y[idx] * (gout[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = nodes[gain.0].value.numel();
                let rows = rstd.len();
                if rg(gain) {
                    let g = buf(nodes, grads, gain).unwrap();
                    for r in 0..rows {
                        for c in 0..d {
                            g[c] += gout[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(g) = buf(nodes, grads, bias) {
                    for r in 0..rows {
                        for c in 0..d {
                            g[c] += gout[r * d + c];
                        }
                    }
                }
                if rg(x) {
                    let gain_d = val(gain);
                    let dt = T::of(d as f64);
                    let g = buf(nodes, grads, x).unwrap();
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            let dh = gout[r * d + c] * gain_d[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + c];
                        }
                        mean_dh /= dt;
                        mean_dh_h /= dt;
                        for c in 0..d {
                            let dh = gout[r * d + c] * gain_d[c];
                            g[r * d + c] += rstd[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                if rg(a) {
                    let y = nodes[id].value.data();
                    let d = y.len() / norms.len();
                    let g = buf(nodes, grads, a).unwrap();
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gout[r * d..(r + 1) * d];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            g[r * d + c] += (gr[c] - yr[c] * dot) / n;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, groups, lq, lk, probs } => {
                attention_backward(nodes, grads, gout, *q, *k, *v, *heads, *groups, *lq, *lk, probs);
            }
            Op::Conv1dDepthwise { x, kernel, seq_len } => {
                let seq_len = *seq_len;
                let (rows, d) = nodes[x.0].value.dims2();
                if rg(x) {
                    let kd = val(kernel);
                    let g = buf(nodes, grads, x).unwrap();
                    for s in 0..rows / seq_len {
                        let base = s * seq_len;
                        for t in 0..seq_len {
                            for (tap, off) in [(0usize, -1isize), (1, 0), (2, 1)] {
                                let src = t as isize + off;
                                if src < 0 || src >= seq_len as isize {
                                    continue;
                                }
                                let src = base + src as usize;
                                for c in 0..d {
                                    g[src * d + c] += kd[c * 3 + tap] * gout[(base + t) * d + c];
                                }
                            }
                        }
                    }
                }
                if rg(kernel) {
                    let xd = val(x);
                    let g = buf(nodes, grads, kernel).unwrap();
                    for s in 0..rows / seq_len {
                        let base = s * seq_len;
                        for t in 0..seq_len {
                            for (tap, off) in [(0usize, -1isize), (1, 0), (2, 1)] {
                                let src = t as isize + off;
                                if src < 0 || src >= seq_len as isize {
                                    continue;
                                }
                                let src = base + src as usize;
                                for c in 0..d {
                                    g[c * 3 + tap] += xd[src * d + c] * gout[(base + t) * d + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherRows { a, index } => {
                let d = nodes[a.0].value.dims2().1;
                if let Some(g) = buf(nodes, grads, a) {
                    for (r, &i) in index.iter().enumerate() {
                        for c in 0..d {
                            g[i * d + c] += gout[r * d + c];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(g) = buf(nodes, grads, p) {
                        g.iter_mut().zip(&gout[offset..offset + n]).for_each(|(g, &x)| *g += x);
                    }
                    offset += n;
                }
            }
            Op::Reshape { a } => {
                if let Some(g) = buf(nodes, grads, a) {
                    g.iter_mut().zip(gout).for_each(|(g, &x)| *g += x);
                }
            }
            Op::MeanRowsGrouped { a, group_len } => {
                let (rows, d) = nodes[a.0].value.dims2();
                let inv = T::of(1.0 / *group_len as f64);
                if let Some(g) = buf(nodes, grads, a) {
                    for r in 0..rows {
                        let grp = r / group_len;
                        for c in 0..d {
                            g[r * d + c] += gout[grp * d + c] * inv;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                let s = gout[0];
                if let Some(g) = buf(nodes, grads, a) {
                    g.iter_mut().for_each(|g| *g += s);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let b = targets.len();
                let classes = probs.len() / b.max(1);
                let scale = gout[0] / T::of(b as f64);
                if let Some(g) = buf(nodes, grads, logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            g[r * classes + c] += (probs[r * classes + c] - onehot) * scale;
                        }
                    }
                }
            }
        }
    }

    /// Gradient accumulated on `v` by the last [`Tape::backward`], as a tensor.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads[v.0].as_ref()?;
        Tensor::new(self.shape(v), g.clone()).ok()
    }

    /// Node bound to parameter `name`, if the forward pass used it.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Copies parameter gradients into `store`. Parameters the loss does not
    /// reach get an all-zero gradient.
    pub fn write_param_grads(&self, store: &mut ParamStore<T>) {
        for p in store.iter_mut() {
            let g = self
                .params
                .get(&p.name)
                .and_then(|v| self.grads[v.0].clone())
                .unwrap_or_else(|| vec![T::zero(); p.tensor.numel()]);
            p.tensor.grad = Some(g);
        }
    }
}

/// Gradient buffer of `v`, created as zeros on first use. `None` if `v` takes no gradient.
fn buf<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: impl Borrow<Var>) -> Option<&'a mut Vec<T>> {
    let v = *v.borrow();
    let value = &nodes[v.0].value;
    if !value.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); value.numel()]))
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    gout: &[T],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    groups: usize,
    lq: usize,
    lk: usize,
    probs: &[T],
) {
    let d = nodes[q.0].value.dims2().1;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
    let mut dq = vec![T::zero(); qd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut dv = vec![T::zero(); vd.len()];
    let mut dp = vec![T::zero(); lk];
    for g in 0..groups {
        for h in 0..heads {
            let col = h * dh;
            let pbase = (g * heads + h) * lq * lk;
            for i in 0..lq {
                let qi = (g * lq + i) * d + col;
                let go = &gout[qi..qi + dh];
                let prow = &probs[pbase + i * lk..pbase + (i + 1) * lk];
                let mut dot = T::zero();
                for j in 0..lk {
                    let vj = (g * lk + j) * d + col;
                    let mut s = T::zero();
                    for c in 0..dh {
                        s += go[c] * vd[vj + c];
                    }
                    dp[j] = s;
                    let p = prow[j];
                    dot += s * p;
                    if p != T::zero() {
                        for c in 0..dh {
                            dv[vj + c] += p * go[c];
                        }
                    }
                }
                for j in 0..lk {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = (g * lk + j) * d + col;
                    for c in 0..dh {
                        dq[qi + c] += ds * kd[kj + c];
                        dk[kj + c] += ds * qd[qi + c];
                    }
                }
            }
        }
    }
    for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(g) = buf(nodes, grads, var) {
            g.iter_mut().zip(delta).for_each(|(g, x)| *g += x);
        }
    }
}

#[cfg(test)]
mod tests;
