//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! A [`GradTape`] records every op applied to its [`Var`]s. Parameters enter
//! as borrowed leaves (no copy), inputs as constants that never receive a
//! gradient. [`GradTape::backward`] walks the tape once in reverse.

use crate::conv::{self, ConvDims, Padding};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a, S> {
    Borrowed(&'a Tensor<S>),
    Owned(Tensor<S>),
}

impl<S> Value<'_, S> {
    fn get(&self) -> &Tensor<S> {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Conv2d { x: Var, w: Var, dims: ConvDims },
    ConvTranspose2d { x: Var, w: Var, dims: ConvDims },
    Depthwise { x: Var, k: Var },
    AddChannelBias { x: Var, b: Var },
    ScaleChannels { x: Var, s: Var },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    EmbedRows { table: Var, idx: Vec<usize> },
    Reparameterize { theta: Var, sigma: Var, eps: Var },
    DiagonalFilters { w: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Clamp { x: Var, lo: S, hi: S },
    Relu(Var),
    Exp(Var),
    Square(Var),
    MatMul(Var, Var),
    AddRowBias { x: Var, b: Var },
    Concat { a: Var, b: Var },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    LogSoftmax(Var),
    GatherCols { x: Var, idx: Vec<usize> },
    BceWithLogitsMean { logits: Var, targets: Var },
    SoftmaxCrossEntropyMean { logits: Var, labels: Vec<usize> },
}

struct Node<'a, S> {
    value: Value<'a, S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recorded computation. Single-owner; build one per forward pass.
pub struct GradTape<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
}

/// Result of [`GradTape::backward`]: d(loss)/d(var) for every var on the
/// path from a trainable leaf to the loss.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims4(t: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match *t {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, format!("expected [N,C,H,W], got {t:?}"))),
    }
}

fn dims2(t: &[usize], op: &'static str) -> Result<[usize; 2]> {
    match *t {
        [n, k] => Ok([n, k]),
        _ => Err(Error::shape(op, format!("expected a matrix, got {t:?}"))),
    }
}

fn log_softmax_rows<S: Scalar>(x: &[S], k: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

impl<'a, S: Scalar> Default for GradTape<'a, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> GradTape<'a, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a, S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Value::Owned(value), op, needs_grad)
    }

    /// Trainable leaf borrowing a parameter tensor.
    pub fn param(&mut self, t: &'a Tensor<S>) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, t: Tensor<S>) -> Var {
        self.push(Value::Owned(t), Op::Leaf, true)
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Value::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<S>) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let k = self.shape(w).get(2).copied().unwrap_or(0);
        let pad = padding.amount(k)?;
        let dims = ConvDims::conv(self.shape(x), self.shape(w), stride, pad)?;
        let out = conv::conv2d_forward(self.value(x).data(), self.value(w).data(), &dims);
        let shape = if self.value(x).ndim() == 3 { vec![dims.cout, dims.oh, dims.ow] } else { vec![dims.n, dims.cout, dims.oh, dims.ow] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(t, Op::Conv2d { x, w, dims }, &[x, w]))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let dims = ConvDims::transposed(self.shape(x), self.shape(w), stride, pad)?;
        let out = conv::conv_transpose2d_forward(self.value(x).data(), self.value(w).data(), &dims);
        let shape = if self.value(x).ndim() == 3 { vec![dims.cout, dims.oh, dims.ow] } else { vec![dims.n, dims.cout, dims.oh, dims.ow] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(t, Op::ConvTranspose2d { x, w, dims }, &[x, w]))
    }

    /// Stride-1 SAME per-channel convolution; `k` is `[C,m,m]`, `m` odd.
    pub fn depthwise_conv(&mut self, x: Var, k: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "depthwise_conv")?;
        let m = match *self.shape(k) {
            [kc, m, m2] if kc == c && m == m2 && m % 2 == 1 => m,
            ref s => {
                return Err(Error::shape("depthwise_conv", format!("kernels {s:?} incompatible with {c} channels (need [C,m,m], m odd)")))
            }
        };
        let out = conv::depthwise_forward(self.value(x).data(), self.value(k).data(), n, c, h, w, m);
        let t = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push_op(t, Op::Depthwise { x, k }, &[x, k]))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "add_channel_bias")?;
        if self.shape(b) != [c] {
            return Err(Error::shape("add_channel_bias", format!("bias {:?} for {c} channels", self.shape(b))));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(h * w).enumerate() {
            let bias = bv[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bias);
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push_op(t, Op::AddChannelBias { x, b }, &[x, b]))
    }

    /// `y[n,c] = x[n,c] * s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "scale_channels")?;
        if self.shape(s) != [c] {
            return Err(Error::shape("scale_channels", format!("scales {:?} for {c} channels", self.shape(s))));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(h * w).enumerate() {
            let k = sv[i % c];
            chunk.iter_mut().for_each(|v| *v = *v * k);
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push_op(t, Op::ScaleChannels { x, s }, &[x, s]))
    }

    /// `y[n,c] = x[n,c] * scale[n,c] + shift[n,c]` with per-sample channel
    /// coefficients broadcast over the spatial dims.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "channel_affine")?;
        if self.shape(scale) != [n, c] || self.shape(shift) != [n, c] {
            return Err(Error::shape(
                "channel_affine",
                format!("coefficients {:?}/{:?} for input [{n},{c},..]", self.shape(scale), self.shape(shift)),
            ));
        }
        let (sv, tv) = (self.value(scale).data(), self.value(shift).data());
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(h * w).enumerate() {
            let (a, b) = (sv[i], tv[i]);
            chunk.iter_mut().for_each(|v| *v = *v * a + b);
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push_op(t, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift]))
    }

    /// Row lookup: `out[i] = table[idx[i]]`.
    pub fn embed_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let [rows, d] = dims2(self.shape(table), "embed_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape("embed_rows", format!("indices {idx:?} for {rows} rows")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push_op(t, Op::EmbedRows { table, idx: idx.to_vec() }, &[table]))
    }

    /// `theta * (1 + sigma * eps)`, elementwise; `eps` should be a constant.
    pub fn reparameterize(&mut self, theta: Var, sigma: Var, eps: Var) -> Result<Var> {
        let (t, s, e) = (self.value(theta), self.value(sigma), self.value(eps));
        t.expect_same_shape(s, "reparameterize")?;
        t.expect_same_shape(e, "reparameterize")?;
        let data = t.data().iter().zip(s.data()).zip(e.data()).map(|((&t, &s), &e)| t * (S::one() + s * e)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Reparameterize { theta, sigma, eps }, &[theta, sigma, eps]))
    }

    /// `[C,C,m,m] -> [C,m,m]`, keeping channel `k` of filter `k`.
    pub fn diagonal_filters(&mut self, w: Var) -> Result<Var> {
        let [co, ci, m, m2] = dims4(self.shape(w), "diagonal_filters")?;
        if co != ci || m != m2 {
            return Err(Error::shape("diagonal_filters", format!("need [C,C,m,m], got {:?}", self.shape(w))));
        }
        let wv = self.value(w).data();
        let mm = m * m;
        let mut out = Vec::with_capacity(co * mm);
        for k in 0..co {
            let off = (k * ci + k) * mm;
            out.extend_from_slice(&wv[off..off + mm]);
        }
        let t = Tensor::new(vec![co, m, m], out)?;
        Ok(self.push_op(t, Op::DiagonalFilters { w }, &[w]))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<S>, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), name, f)?;
        Ok(self.push_op(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Minimum(a, b), "minimum", |x, y| if x <= y { x } else { y })
    }

    pub fn scale(&mut self, x: Var, k: S) -> Var {
        let out = self.value(x).scale(k);
        self.push_op(out, Op::Scale(x, k), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, k: S) -> Var {
        let out = self.value(x).map(|v| v + k);
        self.push_op(out, Op::AddScalar(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push_op(out, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(S::zero()));
        self.push_op(out, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push_op(out, Op::Exp(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push_op(out, Op::Square(x), &[x])
    }

    /// `[N,K] x [K,M] -> [N,M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, k] = dims2(self.shape(a), "matmul")?;
        let [k2, m] = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n},{k}] x [{k2},{m}]")));
        }
        let mut out = vec![S::zero(); n * m];
        S::gemm(
            n,
            k,
            m,
            S::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (m as isize, 1),
            S::zero(),
            &mut out,
            (m as isize, 1),
        );
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push_op(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [n, m] = dims2(self.shape(x), "add_row_bias")?;
        if self.shape(b) != [m] {
            return Err(Error::shape("add_row_bias", format!("bias {:?} for width {m}", self.shape(b))));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            row.iter_mut().zip(bv).for_each(|(v, &bb)| *v = *v + bb);
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push_op(t, Op::AddRowBias { x, b }, &[x, b]))
    }

    /// Concatenate along dim 1. Leading dims and dims after 1 must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat", format!("{sa:?} vs {sb:?}")));
        }
        let n = sa[0];
        let (la, lb) = (self.value(a).len() / n, self.value(b).len() / n);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..n {
            out.extend_from_slice(&av[i * la..(i + 1) * la]);
            out.extend_from_slice(&bv[i * lb..(i + 1) * lb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(t, Op::Concat { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(x), &[x]))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = self.value(x).len() / n;
        self.reshape(x, &[n, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push_op(out, Op::Mean(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let [n, k] = dims2(self.shape(x), "log_softmax")?;
        let out = log_softmax_rows(self.value(x).data(), k);
        let t = Tensor::new(vec![n, k], out)?;
        Ok(self.push_op(t, Op::LogSoftmax(x), &[x]))
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let [n, k] = dims2(self.shape(x), "gather_cols")?;
        if idx.len() != n || idx.iter().any(|&i| i >= k) {
            return Err(Error::shape("gather_cols", format!("indices {idx:?} for [{n},{k}]")));
        }
        let xv = self.value(x).data();
        let out: Vec<S> = idx.iter().enumerate().map(|(i, &j)| xv[i * k + j]).collect();
        let t = Tensor::new(vec![n], out)?;
        Ok(self.push_op(t, Op::GatherCols { x, idx: idx.to_vec() }, &[x]))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (x, t) = (self.value(logits), self.value(targets));
        x.expect_same_shape(t, "bce_with_logits_mean")?;
        let total: S = x.data().iter().zip(t.data()).map(|(&x, &t)| x.max(S::zero()) - x * t + (-x.abs()).exp().ln_1p()).sum();
        let out = Tensor::scalar(total / S::lit(x.len() as f64));
        Ok(self.push_op(out, Op::BceWithLogitsMean { logits, targets }, &[logits, targets]))
    }

    /// Mean categorical cross-entropy of row-wise softmax against `labels`.
    pub fn softmax_cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = dims2(self.shape(logits), "softmax_cross_entropy_mean")?;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape("softmax_cross_entropy_mean", format!("labels {labels:?} for [{n},{k}]")));
        }
        let lp = log_softmax_rows(self.value(logits).data(), k);
        let total: S = labels.iter().enumerate().map(|(i, &l)| -lp[i * k + l]).sum();
        let out = Tensor::scalar(total / S::lit(n as f64));
        Ok(self.push_op(out, Op::SoftmaxCrossEntropyMean { logits, labels: labels.to_vec() }, &[logits]))
    }

    /// Gradients of the single-element `loss` w.r.t. every var.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![S::one()])?);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = &self.nodes[i].op;
            if matches!(op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (parent, pg) in self.backward_op(i, op, &g)? {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn like(&self, v: Var, data: Vec<S>) -> Result<Tensor<S>> {
        Tensor::new(self.shape(v).to_vec(), data)
    }

    fn backward_op(&self, i: usize, op: &Op<S>, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let gd = g.data();
        let out = self.nodes[i].value.get();
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, dims } => {
                let (gx, gw) =
                    conv::conv2d_backward(self.value(*x).data(), self.value(*w).data(), gd, dims, self.needs(*x), self.needs(*w));
                if let Some(gx) = gx {
                    res.push((*x, self.like(*x, gx)?));
                }
                if let Some(gw) = gw {
                    res.push((*w, self.like(*w, gw)?));
                }
            }
            Op::ConvTranspose2d { x, w, dims } => {
                let (gx, gw) =
                    conv::conv_transpose2d_backward(self.value(*x).data(), self.value(*w).data(), gd, dims, self.needs(*x), self.needs(*w));
                if let Some(gx) = gx {
                    res.push((*x, self.like(*x, gx)?));
                }
                if let Some(gw) = gw {
                    res.push((*w, self.like(*w, gw)?));
                }
            }
            Op::Depthwise { x, k } => {
                let [n, c, h, w] = dims4(self.shape(*x), "depthwise_conv")?;
                let m = self.shape(*k)[1];
                let (gx, gk) = conv::depthwise_backward(self.value(*x).data(), self.value(*k).data(), gd, n, c, h, w, m);
                res.push((*x, self.like(*x, gx)?));
                res.push((*k, self.like(*k, gk)?));
            }
            Op::AddChannelBias { x, b } => {
                let [_, c, h, w] = dims4(self.shape(*x), "add_channel_bias")?;
                let mut gb = vec![S::zero(); c];
                for (j, chunk) in gd.chunks(h * w).enumerate() {
                    gb[j % c] = gb[j % c] + chunk.iter().copied().sum::<S>();
                }
                res.push((*x, g.clone()));
                res.push((*b, self.like(*b, gb)?));
            }
            Op::ScaleChannels { x, s } => {
                let [_, c, h, w] = dims4(self.shape(*x), "scale_channels")?;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                let mut gx = gd.to_vec();
                let mut gs = vec![S::zero(); c];
                for (j, (gchunk, xchunk)) in gx.chunks_mut(h * w).zip(xv.chunks(h * w)).enumerate() {
                    let ch = j % c;
                    gs[ch] = gs[ch] + gchunk.iter().zip(xchunk).map(|(&a, &b)| a * b).sum::<S>();
                    gchunk.iter_mut().for_each(|v| *v = *v * sv[ch]);
                }
                res.push((*x, self.like(*x, gx)?));
                res.push((*s, self.like(*s, gs)?));
            }
            Op::ChannelAffine { x, scale, shift } => {
                let [_, _, h, w] = dims4(self.shape(*x), "channel_affine")?;
                let (xv, sv) = (self.value(*x).data(), self.value(*scale).data());
                let mut gx = gd.to_vec();
                let mut gs = vec![S::zero(); sv.len()];
                let mut gt = vec![S::zero(); sv.len()];
                for (j, (gchunk, xchunk)) in gx.chunks_mut(h * w).zip(xv.chunks(h * w)).enumerate() {
                    gs[j] = gchunk.iter().zip(xchunk).map(|(&a, &b)| a * b).sum::<S>();
                    gt[j] = gchunk.iter().copied().sum::<S>();
                    gchunk.iter_mut().for_each(|v| *v = *v * sv[j]);
                }
                res.push((*x, self.like(*x, gx)?));
                res.push((*scale, self.like(*scale, gs)?));
                res.push((*shift, self.like(*shift, gt)?));
            }
            Op::EmbedRows { table, idx } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![S::zero(); self.value(*table).len()];
                for (row, &r) in idx.iter().enumerate() {
                    for j in 0..d {
                        gt[r * d + j] = gt[r * d + j] + gd[row * d + j];
                    }
                }
                res.push((*table, self.like(*table, gt)?));
            }
            Op::Reparameterize { theta, sigma, eps } => {
                let (t, s, e) = (self.value(*theta).data(), self.value(*sigma).data(), self.value(*eps).data());
                let gt = (0..gd.len()).map(|j| gd[j] * (S::one() + s[j] * e[j])).collect();
                let gs = (0..gd.len()).map(|j| gd[j] * t[j] * e[j]).collect();
                res.push((*theta, self.like(*theta, gt)?));
                res.push((*sigma, self.like(*sigma, gs)?));
            }
            Op::DiagonalFilters { w } => {
                let [co, ci, m, _] = dims4(self.shape(*w), "diagonal_filters")?;
                let mm = m * m;
                let mut gw = vec![S::zero(); self.value(*w).len()];
                for k in 0..co {
                    let off = (k * ci + k) * mm;
                    gw[off..off + mm].copy_from_slice(&gd[k * mm..(k + 1) * mm]);
                }
                res.push((*w, self.like(*w, gw)?));
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.scale(-S::one())));
            }
            Op::Mul(a, b) => {
                res.push((*a, g.mul(self.value(*b))?));
                res.push((*b, g.mul(self.value(*a))?));
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = (0..gd.len()).map(|j| if av[j] <= bv[j] { gd[j] } else { S::zero() }).collect();
                let gb = (0..gd.len()).map(|j| if av[j] <= bv[j] { S::zero() } else { gd[j] }).collect();
                res.push((*a, self.like(*a, ga)?));
                res.push((*b, self.like(*b, gb)?));
            }
            Op::Scale(x, k) => res.push((*x, g.scale(*k))),
            Op::AddScalar(x) => res.push((*x, g.clone())),
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let gx = (0..gd.len()).map(|j| if xv[j] > *lo && xv[j] < *hi { gd[j] } else { S::zero() }).collect();
                res.push((*x, self.like(*x, gx)?));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = (0..gd.len()).map(|j| if xv[j] > S::zero() { gd[j] } else { S::zero() }).collect();
                res.push((*x, self.like(*x, gx)?));
            }
            Op::Exp(x) => res.push((*x, g.mul(out)?)),
            Op::Square(x) => res.push((*x, g.mul(self.value(*x))?.scale(S::lit(2.0)))),
            Op::MatMul(a, b) => {
                let [n, k] = dims2(self.shape(*a), "matmul")?;
                let m = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut ga = vec![S::zero(); n * k];
                    S::gemm(
                        n,
                        m,
                        k,
                        S::one(),
                        gd,
                        (m as isize, 1),
                        self.value(*b).data(),
                        (1, m as isize),
                        S::zero(),
                        &mut ga,
                        (k as isize, 1),
                    );
                    res.push((*a, self.like(*a, ga)?));
                }
                if self.needs(*b) {
                    let mut gb = vec![S::zero(); k * m];
                    S::gemm(
                        k,
                        n,
                        m,
                        S::one(),
                        self.value(*a).data(),
                        (1, k as isize),
                        gd,
                        (m as isize, 1),
                        S::zero(),
                        &mut gb,
                        (m as isize, 1),
                    );
                    res.push((*b, self.like(*b, gb)?));
                }
            }
            Op::AddRowBias { x, b } => {
                let m = self.shape(*b)[0];
                let mut gb = vec![S::zero(); m];
                for row in gd.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                res.push((*x, g.clone()));
                res.push((*b, self.like(*b, gb)?));
            }
            Op::Concat { a, b } => {
                let n = self.shape(*a)[0];
                let (la, lb) = (self.value(*a).len() / n, self.value(*b).len() / n);
                let mut ga = Vec::with_capacity(n * la);
                let mut gb = Vec::with_capacity(n * lb);
                for row in gd.chunks(la + lb) {
                    ga.extend_from_slice(&row[..la]);
                    gb.extend_from_slice(&row[la..]);
                }
                res.push((*a, self.like(*a, ga)?));
                res.push((*b, self.like(*b, gb)?));
            }
            Op::Reshape(x) => res.push((*x, g.clone().reshape(self.shape(*x))?)),
            Op::Sum(x) => res.push((*x, Tensor::full(self.shape(*x), gd[0]))),
            Op::Mean(x) => {
                let n = S::lit(self.value(*x).len() as f64);
                res.push((*x, Tensor::full(self.shape(*x), gd[0] / n)));
            }
            Op::LogSoftmax(x) => {
                let k = self.shape(*x)[1];
                let mut gx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(k).zip(out.data().chunks(k)) {
                    let gsum: S = grow.iter().copied().sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&gv, &y)| gv - y.exp() * gsum));
                }
                res.push((*x, self.like(*x, gx)?));
            }
            Op::GatherCols { x, idx } => {
                let k = self.shape(*x)[1];
                let mut gx = vec![S::zero(); self.value(*x).len()];
                for (row, &j) in idx.iter().enumerate() {
                    gx[row * k + j] = gd[row];
                }
                res.push((*x, self.like(*x, gx)?));
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let (xv, tv) = (self.value(*logits).data(), self.value(*targets).data());
                let scale = gd[0] / S::lit(xv.len() as f64);
                let gx = xv.iter().zip(tv).map(|(&x, &t)| (S::one() / (S::one() + (-x).exp()) - t) * scale).collect();
                res.push((*logits, self.like(*logits, gx)?));
            }
            Op::SoftmaxCrossEntropyMean { logits, labels } => {
                let [n, k] = dims2(self.shape(*logits), "softmax_cross_entropy_mean")?;
                let lp = log_softmax_rows(self.value(*logits).data(), k);
                let scale = gd[0] / S::lit(n as f64);
                let mut gx: Vec<S> = lp.iter().map(|&v| v.exp() * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    gx[row * k + l] = gx[row * k + l] - scale;
                }
                res.push((*logits, self.like(*logits, gx)?));
            }
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = GradTape::new();
        let v = tape.param(&x);
        let sq = tape.square(v);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let x = Tensor::<f64>::ones(&[2]);
        let c = Tensor::<f64>::full(&[2], 3.0);
        let mut tape = GradTape::new();
        let xv = tape.param(&x);
        let cv = tape.constant_ref(&c);
        let p = tape.mul(xv, cv).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(cv).is_none());
        assert_eq!(g.get(xv).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::<f32>::ones(&[2]);
        let mut tape = GradTape::new();
        let v = tape.param(&x);
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn reused_var_accumulates() {
        let x = Tensor::<f64>::full(&[1], 3.0);
        let mut tape = GradTape::new();
        let v = tape.param(&x);
        let y = tape.mul(v, v).unwrap();
        let z = tape.add(y, v).unwrap();
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[7.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let x = Tensor::<f64>::zeros(&[2, 4]);
        let mut tape = GradTape::new();
        let v = tape.param(&x);
        let l = tape.softmax_cross_entropy_mean(v, &[0, 3]).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }
}
