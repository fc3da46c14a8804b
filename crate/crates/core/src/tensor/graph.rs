//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Each
//! node stores its forward value; [`Graph::backward`] walks the tape in
//! reverse and accumulates vector-Jacobian products into the nodes that
//! require a gradient. Leaves created from a [`ParamStore`] remember their
//! parameter id so gradients can be routed back into the store.

use super::{
    axis_split, cosine_sim_matrix, descending_order, gelu_scalar, matmul, normal_cdf,
    sigmoid_scalar, softmax, transpose, ParamId, ParamStore, Result, Scalar, Tensor,
    TensorError, NORM_FLOOR,
};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which key/value rows each query row attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyLayout {
    /// Every query attends to all key rows.
    Shared,
    /// Query `i` attends to key rows `i*k .. (i+1)*k`.
    PerQuery(usize),
}

impl KeyLayout {
    fn range(self, query: usize, total: usize) -> std::ops::Range<usize> {
        match self {
            KeyLayout::Shared => 0..total,
            KeyLayout::PerQuery(k) => query * k..(query + 1) * k,
        }
    }

    fn keys_per_query(self, total: usize) -> usize {
        match self {
            KeyLayout::Shared => total,
            KeyLayout::PerQuery(k) => k,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, T, T),
    Softmax(Var, usize),
    Cosine(Var, Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    TopMMean(Var, usize, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: KeyLayout,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient with respect to `v`; `None` when no path reaches it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that takes part in differentiation.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `x[p×q] + bias[q]`, the bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, q) = self.value(x).dims2("add_bias")?;
        if self.value(bias).numel() != q {
            return Err(TensorError::Shape {
                op: "add_bias",
                left: self.value(x).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + b[i % q];
        }
        let ng = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.needs(&[x]);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_scalar);
        let ng = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        let ng = self.needs(&[x]);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        let ng = self.needs(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::ln);
        let ng = self.needs(&[x]);
        self.push(out, Op::Log(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::abs);
        let ng = self.needs(&[x]);
        self.push(out, Op::Abs(x), ng)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let ng = self.needs(&[x]);
        self.push(out, Op::Clamp(x, lo, hi), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(x), axis)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), ng))
    }

    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = cosine_sim_matrix(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Cosine(a, b), ng))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Param("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        axis_split("concat", &base, axis)?;
        let mut extent = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = axis_split("concat", &shape, axis)?;
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_rows")?;
        if start > end || end > r {
            return Err(TensorError::Param(format!(
                "slice_rows {start}..{end} out of range for {r} rows"
            )));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let out = Tensor::new(vec![end - start, c], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Slice(x, start), ng))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("slice_cols")?;
        if start > end || end > c {
            return Err(TensorError::Param(format!(
                "slice_cols {start}..{end} out of range for {c} columns"
            )));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let out = Tensor::new(vec![r, end - start], data)?;
        let ng = self.needs(&[x]);
        // Column slices are recorded as a transpose-free gather.
        let idx = (0..r)
            .flat_map(|i| (start..end).map(move |j| i * c + j))
            .collect();
        let v = self.push(out, Op::Gather(x, idx), ng);
        Ok(v)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Picks flat elements of `x` into a vector.
    pub fn gather(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = flat.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::Param(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out = Tensor::vector(flat.iter().map(|&i| src[i]).collect());
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Gather(x, flat.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(&[x]);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_usize(t.numel().max(1)).expect("count");
        let out = Tensor::scalar(t.sum() / n);
        let ng = self.needs(&[x]);
        self.push(out, Op::Mean(x), ng)
    }

    /// Per-column mean of the `m` largest entries of a rank-2 tensor.
    ///
    /// Ties are broken by the lower row index. Output shape is `[cols]`.
    pub fn topm_mean_cols(&mut self, x: Var, m: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("topm_mean_cols")?;
        if m < 1 || m > r {
            return Err(TensorError::Param(format!(
                "top-M: M={m} must lie in [1, {r}]"
            )));
        }
        let mf = T::from_usize(m).expect("count");
        let mut picks = Vec::with_capacity(m * c);
        let mut out = Vec::with_capacity(c);
        for j in 0..c {
            let col: Vec<T> = (0..r).map(|i| t.at2(i, j)).collect();
            let order = descending_order(&col);
            let mut acc = T::zero();
            for &i in &order[..m] {
                acc = acc + col[i];
                picks.push(i * c + j);
            }
            out.push(acc / mf);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::vector(out), Op::TopMMean(x, m, picks), ng))
    }

    /// Scaled dot-product multi-head attention over pre-projected inputs.
    ///
    /// `q` is `[n×d]`; `k` and `v` are `[rows×d]` with rows assigned to each
    /// query by `layout`. Heads split `d` into contiguous blocks of `d/heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: KeyLayout,
    ) -> Result<Var> {
        let (n, d) = self.value(q).dims2("attention")?;
        let (rows, dk) = self.value(k).dims2("attention")?;
        let (rows_v, dv) = self.value(v).dims2("attention")?;
        if dk != d || dv != d || rows_v != rows {
            return Err(TensorError::Shape {
                op: "attention",
                left: self.value(k).shape().to_vec(),
                right: self.value(v).shape().to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Param(format!(
                "attention: dim {d} not divisible by {heads} heads"
            )));
        }
        let per = layout.keys_per_query(rows);
        let valid = match layout {
            KeyLayout::Shared => rows >= 1,
            KeyLayout::PerQuery(kk) => kk >= 1 && rows == n * kk,
        };
        if !valid {
            return Err(TensorError::Shape {
                op: "attention",
                left: self.value(q).shape().to_vec(),
                right: self.value(k).shape().to_vec(),
            });
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).expect("dim").sqrt();
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); n * heads * per];
        let mut out = vec![T::zero(); n * d];
        let mut logits = vec![T::zero(); per];
        for i in 0..n {
            let keys = layout.range(i, rows);
            let qi = qt.row(i);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for (slot, r) in keys.clone().enumerate() {
                    let kr = kt.row(r);
                    let dot: T = cols.clone().map(|t| qi[t] * kr[t]).sum();
                    logits[slot] = dot * scale;
                }
                let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                let p = &mut probs[(i * heads + h) * per..(i * heads + h + 1) * per];
                for (pp, &l) in p.iter_mut().zip(&logits) {
                    *pp = (l - max).exp();
                    total = total + *pp;
                }
                for pp in p.iter_mut() {
                    *pp = *pp / total;
                }
                for (slot, r) in keys.clone().enumerate() {
                    let vr = vt.row(r);
                    for t in cols.clone() {
                        out[i * d + t] = out[i * d + t] + p[slot] * vr[t];
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            ng,
        ))
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node,
    /// laid out as `[query][head][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                left: lt.shape().to_vec(),
                right: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contrib: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let bt = transpose(self.value(*b))?;
                    self.accumulate(grads, *a, matmul(g, &bt)?);
                }
                if self.wants(*b) {
                    let at = transpose(self.value(*a))?;
                    self.accumulate(grads, *b, matmul(&at, g)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let q = y.shape()[1];
                    let mut gb = vec![T::zero(); q];
                    for (i, &v) in g.data().iter().enumerate() {
                        gb[i % q] = gb[i % q] + v;
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, gb)?);
                }
            }
            Op::Affine(x, scale) => {
                let s = *scale;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, zip_map(g, y, |gv, yv| gv * yv * (T::one() - yv)));
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, zip_map(g, y, |gv, yv| gv * (T::one() - yv * yv)));
            }
            Op::Gelu(x) => {
                let inv_sqrt_2pi = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let d = self.value(*x).map(|v| {
                    normal_cdf(v) + v * inv_sqrt_2pi * (-(v * v) * T::lit(0.5)).exp()
                });
                self.accumulate(grads, *x, zip_map(g, &d, |a, b| a * b));
            }
            Op::Log(x) => {
                self.accumulate(grads, *x, zip_map(g, self.value(*x), |gv, xv| gv / xv));
            }
            Op::Abs(x) => {
                self.accumulate(
                    grads,
                    *x,
                    zip_map(g, self.value(*x), |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.accumulate(
                    grads,
                    *x,
                    zip_map(g, self.value(*x), |gv, xv| {
                        if xv >= lo && xv <= hi {
                            gv
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Softmax(x, axis) => {
                let (outer, extent, inner) = axis_split("softmax", y.shape(), *axis)?;
                let mut dx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * extent + k) * inner + i;
                        let dot: T = (0..extent).map(|k| g.data()[at(k)] * y.data()[at(k)]).sum();
                        for k in 0..extent {
                            dx[at(k)] = y.data()[at(k)] * (g.data()[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Cosine(a, b) => self.cosine_backward(*a, *b, y, g, grads)?,
            Op::Concat(parts, axis) => {
                let (outer, extent, inner) = axis_split("concat", y.shape(), *axis)?;
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let len = shape[*axis];
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * extent + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        self.accumulate(grads, *p, Tensor::new(shape, d)?);
                    }
                    offset += len;
                }
            }
            Op::Slice(x, start) => {
                let src = self.value(*x);
                let c = src.shape()[1];
                let mut d = Tensor::zeros(src.shape());
                d.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape)?);
            }
            Op::Gather(x, flat) => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (&i, &gv) in flat.iter().zip(g.data()) {
                    d.data_mut()[i] = d.data_mut()[i] + gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let src = self.value(*x);
                let n = T::from_usize(src.numel().max(1)).expect("count");
                self.accumulate(grads, *x, Tensor::full(src.shape(), g.item() / n));
            }
            Op::TopMMean(x, m, picks) => {
                let c = y.numel();
                let mf = T::from_usize(*m).expect("count");
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (slot, &flat) in picks.iter().enumerate() {
                    let col = slot / m;
                    debug_assert!(col < c);
                    d.data_mut()[flat] = d.data_mut()[flat] + g.data()[col] / mf;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => self.attention_backward([*q, *k, *v], *heads, *layout, probs, g, grads)?,
        }
        Ok(())
    }

    fn cosine_backward(
        &self,
        a: Var,
        b: Var,
        c: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (at, bt) = (self.value(a), self.value(b));
        let (p, d) = at.dims2("cosine")?;
        let (q, _) = bt.dims2("cosine")?;
        let floor = T::lit(NORM_FLOOR);
        let norms = |t: &Tensor<T>, n: usize| -> Vec<T> {
            (0..n).map(|i| t.row(i).iter().map(|&v| v * v).sum::<T>().sqrt()).collect()
        };
        let na = norms(at, p);
        let nb = norms(bt, q);
        let mut da = vec![T::zero(); p * d];
        let mut db = vec![T::zero(); q * d];
        for i in 0..p {
            if na[i] <= floor {
                continue;
            }
            for j in 0..q {
                if nb[j] <= floor {
                    continue;
                }
                let gij = g.at2(i, j);
                if gij == T::zero() {
                    continue;
                }
                let cij = c.at2(i, j);
                let (ai, bj) = (at.row(i), bt.row(j));
                for t in 0..d {
                    let ahat = ai[t] / na[i];
                    let bhat = bj[t] / nb[j];
                    da[i * d + t] = da[i * d + t] + gij * (bhat - cij * ahat) / na[i];
                    db[j * d + t] = db[j * d + t] + gij * (ahat - cij * bhat) / nb[j];
                }
            }
        }
        self.accumulate(grads, a, Tensor::new(vec![p, d], da)?);
        self.accumulate(grads, b, Tensor::new(vec![q, d], db)?);
        Ok(())
    }

    fn attention_backward(
        &self,
        [q, k, v]: [Var; 3],
        heads: usize,
        layout: KeyLayout,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qt.dims2("attention")?;
        let rows = kt.shape()[0];
        let per = layout.keys_per_query(rows);
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).expect("dim").sqrt();
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut da = vec![T::zero(); per];
        for i in 0..n {
            let keys = layout.range(i, rows);
            let gi = g.row(i);
            let qi = qt.row(i);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &probs[(i * heads + h) * per..(i * heads + h + 1) * per];
                let mut weighted = T::zero();
                for (slot, r) in keys.clone().enumerate() {
                    let vr = vt.row(r);
                    let dot: T = cols.clone().map(|t| gi[t] * vr[t]).sum();
                    da[slot] = dot;
                    weighted = weighted + p[slot] * dot;
                    for t in cols.clone() {
                        dv[r * d + t] = dv[r * d + t] + p[slot] * gi[t];
                    }
                }
                for (slot, r) in keys.clone().enumerate() {
                    let ds = p[slot] * (da[slot] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kr = kt.row(r);
                    for t in cols.clone() {
                        dq[i * d + t] = dq[i * d + t] + ds * kr[t];
                        dk[r * d + t] = dk[r * d + t] + ds * qi[t];
                    }
                }
            }
        }
        self.accumulate(grads, q, Tensor::new(vec![n, d], dq)?);
        self.accumulate(grads, k, Tensor::new(vec![rows, d], dk)?);
        self.accumulate(grads, v, Tensor::new(vec![rows, d], dv)?);
        Ok(())
    }

    /// Gradients of every trainable parameter leaf, in tape order.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let id = n.param?;
                let g = grads.grads[i].as_ref()?;
                Some((id, g.clone()))
            })
            .collect()
    }

    /// Adds this pass's parameter gradients into the store.
    pub fn accumulate_into(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for (id, g) in self.param_grads(grads) {
            store.get_mut(id).grad.add_assign(&g);
        }
    }
}
