use super::gemm::gemm;
use super::{AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var },
    Gelu { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { a: Var, b: Var, axis: usize },
    Mean { x: Var, axis: usize },
    Sum { x: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SoftCrossEntropy { logits: Var, target: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of executed primitives; inputs always precede their outputs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; `None` when `var` is not a differentiable leaf.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.leaves.get_mut(var.0).and_then(Option::take)
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

    /// Records a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NumericFault { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[..., K] · b[K, N] -> [..., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        self.push("matmul", value, &[a, b], Op::MatMul { a, b })
    }

    /// Batched product `a[G, M, K] · b[G, K, N]`, or `a · bᵀ` with `b[G, N, K]`
    /// when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || AutodiffError::ShapeMismatch { op: "bmm", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; g * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(&[g, m, n], out)?;
        self.push("bmm", value, &[a, b], Op::BatchMatMul { a, b, trans_b })
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, &[a, b], Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, &[a, b], Op::Sub { a, b })
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v * factor).collect())?;
        self.push("scale", value, &[x], Op::Scale { x, factor })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of
    /// length equal to that axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| AutodiffError::InvalidInput {
            op: "layer_norm",
            reason: "scalar input".into(),
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / d.max(1);
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gs[j] + bs[j];
            }
        }
        let value = Tensor::new(&sx, out)?;
        self.push(
            "layer_norm",
            value,
            &[x, gamma, beta],
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
        )
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push("softmax", value, &[x], Op::Softmax { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(t.shape(), out)?;
        self.push("gelu", value, &[x], Op::Gelu { x })
    }

    /// Row lookup `table[V, D]` at `ids` -> `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(AutodiffError::InvalidInput {
                op: "embedding",
                reason: format!("table must be 2-D, got {st:?}"),
            });
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::InvalidInput {
                op: "embedding",
                reason: format!("id {bad} out of range for {v} rows"),
            });
        }
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        self.push("embedding", value, &[table], Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(AutodiffError::ShapeMismatch { op: "concat", lhs: sa, rhs: sb });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * ca..(o + 1) * ca]);
            out.extend_from_slice(&db[o * cb..(o + 1) * cb]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        let value = Tensor::new(&shape, out)?;
        self.push("concat", value, &[a, b], Op::Concat { a, b, axis })
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(AutodiffError::InvalidInput {
                op: "mean",
                reason: format!("axis {axis} invalid for shape {sx:?}"),
            });
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let n = sx[axis];
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += data[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = sx;
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        self.push("mean", value, &[x], Op::Mean { x, axis })
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let mut value = self.value(x).reshaped(shape)?;
        value.set_requires_grad(false);
        self.push("reshape", value, &[x], Op::Reshape { x })
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = axes.len() == sx.len()
            && axes.iter().all(|&a| a < sx.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(AutodiffError::InvalidInput {
                op: "permute",
                reason: format!("axes {axes:?} invalid for shape {sx:?}"),
            });
        }
        let (data, shape) = permute_data(self.value(x).data(), &sx, axes);
        let value = Tensor::new(&shape, data)?;
        self.push("permute", value, &[x], Op::Permute { x, axes: axes.to_vec() })
    }

    /// Per-row cross-entropy `-log softmax(logits)[label]`, logits `[B, C]` -> `[B]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.rows_cols("cross_entropy", logits, labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(AutodiffError::InvalidInput {
                op: "cross_entropy",
                reason: format!("label {bad} out of range for {c} classes"),
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut out = vec![0.0; b];
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            out[r] = lse - row[labels[r]];
            softmax_in_place(row);
        }
        let value = Tensor::new(&[b], out)?;
        self.push(
            "cross_entropy",
            value,
            &[logits],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        )
    }

    /// Per-row cross-entropy against a constant distribution `target[B, C]`:
    /// `-Σ_j target_j · log softmax(logits)_j`. Rows of `target` must sum to 1.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if target.shape() != s.as_slice() {
            return Err(AutodiffError::ShapeMismatch {
                op: "soft_cross_entropy",
                lhs: s,
                rhs: target.shape().to_vec(),
            });
        }
        let (b, c) = self.rows_cols("soft_cross_entropy", logits, s.first().copied().unwrap_or(0))?;
        for (r, row) in target.data().chunks(c).enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-6 || row.iter().any(|&t| t < 0.0) {
                return Err(AutodiffError::InvalidInput {
                    op: "soft_cross_entropy",
                    reason: format!("target row {r} is not a distribution (sum {total})"),
                });
            }
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut out = vec![0.0; b];
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            let t = &target.data()[r * c..(r + 1) * c];
            out[r] = row.iter().zip(t).map(|(z, ti)| ti * (lse - z)).sum();
            softmax_in_place(row);
        }
        let value = Tensor::new(&[b], out)?;
        self.push(
            "soft_cross_entropy",
            value,
            &[logits],
            Op::SoftCrossEntropy { logits, target: target.data().to_vec(), probs },
        )
    }

    fn rows_cols(&self, op: &'static str, logits: Var, rows: usize) -> Result<(usize, usize)> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != rows || s[1] == 0 {
            return Err(AutodiffError::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![rows] });
        }
        Ok((s[0], s[1]))
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape(), out);
        }
        let shape = broadcast_shape(op, ta.shape(), tb.shape())?;
        let (stra, strb) = (broadcast_strides(ta.shape(), &shape), broadcast_strides(tb.shape(), &shape));
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; shape.iter().product()];
        for_each_broadcast(&shape, &stra, &strb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        Tensor::new(&shape, out)
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if !root_node.value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if root_node.requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaves[i] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            let mut acc = |v: Var, contrib: Vec<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::new(node.value.shape(), g)?);
                }
                Op::MatMul { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (k, n) = (tb.shape()[0], tb.shape()[1]);
                    let m = ta.numel() / k.max(1);
                    if self.requires_grad(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, tb.data(), true, &mut ga, false);
                        acc(*a, ga);
                    }
                    if self.requires_grad(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, &g, false, &mut gb, false);
                        acc(*b, gb);
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                    let n = node.value.shape()[2];
                    if self.requires_grad(*a) {
                        let mut ga = vec![0.0; bs * m * k];
                        for j in 0..bs {
                            gemm(
                                m,
                                n,
                                k,
                                &g[j * m * n..(j + 1) * m * n],
                                false,
                                &tb.data()[j * k * n..(j + 1) * k * n],
                                !*trans_b,
                                &mut ga[j * m * k..(j + 1) * m * k],
                                false,
                            );
                        }
                        acc(*a, ga);
                    }
                    if self.requires_grad(*b) {
                        let mut gb = vec![0.0; bs * k * n];
                        for j in 0..bs {
                            let gj = &g[j * m * n..(j + 1) * m * n];
                            let aj = &ta.data()[j * m * k..(j + 1) * m * k];
                            let out = &mut gb[j * k * n..(j + 1) * k * n];
                            if *trans_b {
                                gemm(n, m, k, gj, true, aj, false, out, false);
                            } else {
                                gemm(k, m, n, aj, true, gj, false, out, false);
                            }
                        }
                        acc(*b, gb);
                    }
                }
                Op::Add { a, b } | Op::Sub { a, b } => {
                    let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                    let out_shape = node.value.shape();
                    if self.requires_grad(*a) {
                        acc(*a, reduce_to(&g, out_shape, self.shape(*a), |_, x| x));
                    }
                    if self.requires_grad(*b) {
                        acc(*b, reduce_to(&g, out_shape, self.shape(*b), |_, x| sign * x));
                    }
                }
                Op::Mul { a, b } => {
                    let out_shape = node.value.shape();
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        let other = expand(tb, out_shape);
                        acc(*a, reduce_to(&g, out_shape, ta.shape(), |o, x| x * other[o]));
                    }
                    if self.requires_grad(*b) {
                        let other = expand(ta, out_shape);
                        acc(*b, reduce_to(&g, out_shape, tb.shape(), |o, x| x * other[o]));
                    }
                }
                Op::Scale { x, factor } => {
                    acc(*x, g.iter().map(|v| v * factor).collect());
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gs = self.value(*gamma).data();
                    let d = gs.len();
                    let rows = inv_std.len();
                    if self.requires_grad(*x) {
                        let mut gx = vec![0.0; g.len()];
                        for r in 0..rows {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..d {
                                let dh = gr[j] * gs[j];
                                s1 += dh;
                                s2 += dh * hr[j];
                            }
                            let scale = inv_std[r] / d as f64;
                            for j in 0..d {
                                let dh = gr[j] * gs[j];
                                gx[r * d + j] = scale * (d as f64 * dh - s1 - hr[j] * s2);
                            }
                        }
                        acc(*x, gx);
                    }
                    if self.requires_grad(*gamma) {
                        let mut gg = vec![0.0; d];
                        for (gv, hv) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += gv[j] * hv[j];
                            }
                        }
                        acc(*gamma, gg);
                    }
                    if self.requires_grad(*beta) {
                        let mut gb = vec![0.0; d];
                        for gv in g.chunks(d) {
                            for j in 0..d {
                                gb[j] += gv[j];
                            }
                        }
                        acc(*beta, gb);
                    }
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap_or(&1);
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*x, gx);
                }
                Op::Gelu { x } => {
                    let xs = self.value(*x).data();
                    acc(*x, g.iter().zip(xs).map(|(gv, &v)| gv * gelu_grad(v)).collect());
                }
                Op::Embedding { table, ids } => {
                    let st = self.shape(*table);
                    let d = st[1];
                    let mut gt = vec![0.0; st[0] * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                    acc(*table, gt);
                }
                Op::Concat { a, b, axis } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let outer: usize = sa[..*axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    let (ca, cb) = (sa[*axis] * inner, sb[*axis] * inner);
                    let mut ga = Vec::with_capacity(outer * ca);
                    let mut gb = Vec::with_capacity(outer * cb);
                    for o in 0..outer {
                        let base = o * (ca + cb);
                        ga.extend_from_slice(&g[base..base + ca]);
                        gb.extend_from_slice(&g[base + ca..base + ca + cb]);
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Mean { x, axis } => {
                    let sx = self.shape(*x);
                    let outer: usize = sx[..*axis].iter().product();
                    let inner: usize = sx[axis + 1..].iter().product();
                    let n = sx[*axis];
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                gx[(o * n + k) * inner + i] = g[o * inner + i] / n as f64;
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::Sum { x } => {
                    acc(*x, vec![g[0]; self.value(*x).numel()]);
                }
                Op::Reshape { x } => acc(*x, g),
                Op::Permute { x, axes } => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let (gx, _) = permute_data(&g, node.value.shape(), &inverse);
                    acc(*x, gx);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = probs.len() / labels.len().max(1);
                    let mut gl = probs.clone();
                    for (r, row) in gl.chunks_mut(c).enumerate() {
                        row[labels[r]] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= g[r]);
                    }
                    acc(*logits, gl);
                }
                Op::SoftCrossEntropy { logits, target, probs } => {
                    let rows = g.len();
                    let c = probs.len() / rows.max(1);
                    let mut gl = vec![0.0; probs.len()];
                    for r in 0..rows {
                        let t = &target[r * c..(r + 1) * c];
                        let mass: f64 = t.iter().sum();
                        for j in 0..c {
                            gl[r * c + j] = g[r] * (probs[r * c + j] * mass - t[j]);
                        }
                    }
                    acc(*logits, gl);
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

// libm's tanh is several times slower than exp.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = fast_tanh(inner);
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for (i, slot) in out.iter_mut().enumerate() {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        *slot = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(AutodiffError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` expressed over the (right-aligned) broadcast `out` shape;
/// broadcast dims get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for j in (0..shape.len()).rev() {
        if shape[j] != 1 {
            strides[j + offset] = acc;
        }
        acc *= shape[j];
    }
    strides
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let Some(&inner) = out.last() else {
        f(0, 0, 0);
        return;
    };
    let rank = out.len();
    let (ja, jb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for j in 0..inner {
            f(o + j, ia + j * ja, ib + j * jb);
        }
        o += inner;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `f(o, g[o])` over the broadcast dims of `shape` within `out_shape`.
fn reduce_to(g: &[f64], out_shape: &[usize], shape: &[usize], f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    if out_shape == shape {
        return g.iter().enumerate().map(|(o, &x)| f(o, x)).collect();
    }
    let strides = broadcast_strides(shape, out_shape);
    let zero = vec![0; out_shape.len()];
    let mut out = vec![0.0; shape.iter().product()];
    for_each_broadcast(out_shape, &strides, &zero, |o, i, _| out[i] += f(o, g[o]));
    out
}

/// Materializes `t` broadcast to `out_shape`.
fn expand(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    let strides = broadcast_strides(t.shape(), out_shape);
    let zero = vec![0; out_shape.len()];
    let data = t.data();
    let mut out = vec![0.0; out_shape.iter().product()];
    for_each_broadcast(out_shape, &strides, &zero, |o, i, _| out[o] = data[i]);
    out
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for j in (0..rank.saturating_sub(1)).rev() {
        in_strides[j] = in_strides[j + 1] * shape[j + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; rank];
    let mut out = vec![0.0; data.len()];
    for_each_broadcast(&out_shape, &strides, &zero, |o, i, _| out[o] = data[i]);
    (out, out_shape)
}
