use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Deliberate backward-rule corruption, used only as a negative control for
/// the gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the GELU derivative by 1.1.
    GeluDerivative,
}

#[derive(Debug)]
enum Op<S> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Sum(Var),
    AddRowBias(Var, Var),
    Tile(Var),
    Gelu {
        x: Var,
        cdf: Vec<S>,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        scale: S,
        probs: Vec<S>,
    },
    ExpandOuter {
        h: Var,
        w: Var,
        bias: Var,
    },
    PrependToken {
        x: Var,
        token: Var,
        batch: usize,
    },
    SelectRows {
        x: Var,
        stride: usize,
        offset: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    batch: usize,
    heads: usize,
    q_len: usize,
    kv_len: usize,
    qk_dim: usize,
    v_dim: usize,
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Append-only record of a forward computation. Inputs of a node are always
/// recorded before it, so a reverse sweep over the node list is a valid
/// topological order and visits every node once.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    fault: Option<Fault>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix_dims<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    let rows = t.shape()[0];
    (rows, t.numel() / rows)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        matrix_dims(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor that never receives gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// Records the current value of a trainable parameter.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            S::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let src = self.value(a);
        let value = Tensor::from_fn(src.shape(), |i| src.data()[i] * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Adds a `1 x n` bias to every row of an `m x n` input.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(bias).numel() != n {
            return Err(Error::dim("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let xs = self.value(x).data();
        let mut data = xs.to_vec();
        for row in data.chunks_mut(n) {
            add_into(row, b);
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// Stacks `times` copies of an `r x n` block vertically.
    pub fn tile(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, n) = self.dims(x);
        if times == 0 {
            return Err(Error::Usage("tile count must be positive".into()));
        }
        let src = self.value(x).data();
        let value = Tensor::from_fn(&[times * r, n], |i| src[i % (r * n)]);
        Ok(self.push(value, Op::Tile(x), &[x]))
    }

    /// Gaussian-error linear unit, exact form `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let cdf: Vec<S> = src.data().iter().map(|&v| normal_cdf(v)).collect();
        let data = src.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        self.push(value, Op::Gelu { x, cdf }, &[x])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (m, n) = matrix_dims(src);
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    /// Per-row normalization to zero mean and unit (biased) variance followed
    /// by the affine map `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (m, n) = self.dims(x);
        if n < 2 {
            return Err(Error::Usage("layer_norm needs at least 2 columns".into()));
        }
        if !(eps > S::zero()) {
            return Err(Error::Usage("layer_norm eps must be positive".into()));
        }
        if self.value(gamma).numel() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if self.value(beta).numel() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(beta)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let src = self.value(x).data();
        let inv_n = S::one() / S::from_usize(n).unwrap();
        let mut xhat = vec![S::zero(); m * n];
        let mut rstd = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let xh = (row[c] - mean) * rs;
                xhat[r * n + c] = xh;
                out[r * n + c] = xh * g[c] + b[c];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` is `(batch * q_len) x (heads * d)`, `k` is `(batch * kv_len) x
    /// (heads * d)` and `v` is `(batch * kv_len) x (heads * dv)`. Head `h`
    /// reads columns `h*d..(h+1)*d`; each sample attends only within its own
    /// block of rows. Output is `(batch * q_len) x (heads * dv)`, heads
    /// concatenated in order.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        scale: S,
    ) -> Result<Var> {
        let (qr, qc) = self.dims(q);
        let (kr, kc) = self.dims(k);
        let (vr, vc) = self.dims(v);
        let bad = batch == 0
            || heads == 0
            || qr % batch != 0
            || kr % batch != 0
            || kr != vr
            || qc != kc
            || qc % heads != 0
            || vc % heads != 0;
        if bad {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        let geom = AttnGeom {
            batch,
            heads,
            q_len: qr / batch,
            kv_len: kr / batch,
            qk_dim: qc / heads,
            v_dim: vc / heads,
        };
        let (out, probs) = attention_forward(
            &geom,
            scale,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let value = Tensor::new(vec![qr, vc], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                geom,
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Outer-product expansion of one row per sample into `len` rows:
    /// `out[b*len + l, :] = w[l] * h[b, :] + bias[l, :]` with `h: batch x d`,
    /// `w: len x 1`, `bias: len x d`.
    pub fn expand_outer(&mut self, h: Var, w: Var, bias: Var) -> Result<Var> {
        let (batch, d) = self.dims(h);
        let len = self.value(w).numel();
        if self.dims(bias) != (len, d) {
            return Err(Error::dim("expand_outer", self.shape(h), self.shape(bias)));
        }
        let hs = self.value(h).data();
        let ws = self.value(w).data();
        let bs = self.value(bias).data();
        let value = Tensor::from_fn(&[batch * len, d], |i| {
            let (row, c) = (i / d, i % d);
            let (b, l) = (row / len, row % len);
            ws[l] * hs[b * d + c] + bs[l * d + c]
        });
        Ok(self.push(value, Op::ExpandOuter { h, w, bias }, &[h, w, bias]))
    }

    /// Inserts a shared `1 x d` token in front of each sample's block of rows.
    pub fn prepend_token(&mut self, x: Var, token: Var, batch: usize) -> Result<Var> {
        let (rows, d) = self.dims(x);
        if batch == 0 || rows % batch != 0 || self.value(token).numel() != d {
            return Err(Error::dim(
                "prepend_token",
                self.shape(x),
                self.shape(token),
            ));
        }
        let len = rows / batch;
        let xs = self.value(x).data();
        let ts = self.value(token).data();
        let value = Tensor::from_fn(&[batch * (len + 1), d], |i| {
            let (row, c) = (i / d, i % d);
            let (b, l) = (row / (len + 1), row % (len + 1));
            if l == 0 {
                ts[c]
            } else {
                xs[(b * len + l - 1) * d + c]
            }
        });
        Ok(self.push(value, Op::PrependToken { x, token, batch }, &[x, token]))
    }

    /// Picks row `offset` out of every block of `stride` rows.
    pub fn select_rows(&mut self, x: Var, stride: usize, offset: usize) -> Result<Var> {
        let (rows, d) = self.dims(x);
        if stride == 0 || rows % stride != 0 || offset >= stride {
            return Err(Error::dim("select_rows", self.shape(x), &[stride, offset]));
        }
        let blocks = rows / stride;
        let xs = self.value(x).data();
        let value = Tensor::from_fn(&[blocks, d], |i| {
            let (b, c) = (i / d, i % d);
            xs[(b * stride + offset) * d + c]
        });
        Ok(self.push(value, Op::SelectRows { x, stride, offset }, &[x]))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat_cols needs at least one input".into()));
        };
        let rows = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, n) = self.dims(x);
        if start >= end || end > n {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let xs = self.value(x).data();
        let value = Tensor::from_fn(&[rows, w], |i| xs[(i / w) * n + start + i % w]);
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits`, computed through log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, classes) = self.dims(logits);
        if labels.len() != batch {
            return Err(Error::dim(
                "softmax_cross_entropy",
                self.shape(logits),
                &[labels.len()],
            ));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Dataset(format!(
                "label {y} of batch row {i} is outside [0, {classes})"
            )));
        }
        let zs = self.value(logits).data();
        let mut probs = zs.to_vec();
        let mut total = S::zero();
        for (r, row) in probs.chunks_mut(classes).enumerate() {
            let z = &zs[r * classes..(r + 1) * classes];
            let max = z.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            total += lse - z[labels[r]];
            softmax_in_place(row);
        }
        let loss = total / S::from_usize(batch).unwrap();
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite cross-entropy".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into the gradients of
    /// every parameter reachable from it. Gradients are never reset here:
    /// calling `backward` twice adds twice.
    pub fn backward(&self, loss: Var, params: &mut ParamStore<S>) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss is not recorded on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, params);
        }
        Ok(())
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut [S]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.numel();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![S::zero(); len])
                .as_mut_slice(),
        )
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(
        &self,
        node: &Node<S>,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
        params: &mut ParamStore<S>,
    ) {
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => params.accumulate_grad(*id, g),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.grad_slot(grads, *a) {
                    S::gemm(m, n, k, S::one(), g, false, bv, true, S::one(), da);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    S::gemm(k, m, n, S::one(), av, true, g, false, S::one(), db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_slot(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.grad_slot(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += *gi * *f;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::AddRowBias(x, bias) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.grad_slot(grads, *bias) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Tile(x) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let block = dx.len();
                    for chunk in g.chunks(block) {
                        add_into(dx, chunk);
                    }
                }
            }
            Op::Gelu { x, cdf } => {
                let xs = self.value(*x).data();
                let factor = match self.fault {
                    Some(Fault::GeluDerivative) => S::from_f64_lossy(1.1),
                    None => S::one(),
                };
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * (cdf[i] + xs[i] * normal_pdf(xs[i])) * factor;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let n = matrix_dims(&node.value).1;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for r in 0..y.len() / n {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: S = ys.iter().zip(gs).map(|(a, b)| *a * *b).sum();
                        for c in 0..n {
                            dx[r * n + c] += ys[c] * (gs[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.dims(*x).1;
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.grad_slot(grads, *gamma) {
                    for (r, row) in g.chunks(n).enumerate() {
                        for c in 0..n {
                            dg[c] += row[c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, *beta) {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let inv_n = S::one() / S::from_usize(n).unwrap();
                    for (r, row) in g.chunks(n).enumerate() {
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for c in 0..n {
                            let d = row[c] * gam[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for c in 0..n {
                            let d = row[c] * gam[c];
                            dx[r * n + c] += rstd[r] * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                scale,
                probs,
            } => {
                let grads_qkv = attention_backward(
                    geom,
                    *scale,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    [self.wants(*q), self.wants(*k), self.wants(*v)],
                );
                for (var, grad) in [*q, *k, *v].into_iter().zip(grads_qkv) {
                    if let (Some(d), Some(grad)) = (self.grad_slot(grads, var), grad) {
                        add_into(d, &grad);
                    }
                }
            }
            Op::ExpandOuter { h, w, bias } => {
                let (batch, d) = self.dims(*h);
                let len = self.value(*w).numel();
                let hs = self.value(*h).data();
                let ws = self.value(*w).data();
                if let Some(dh) = self.grad_slot(grads, *h) {
                    for b in 0..batch {
                        for l in 0..len {
                            let row = &g[(b * len + l) * d..(b * len + l + 1) * d];
                            for c in 0..d {
                                dh[b * d + c] += ws[l] * row[c];
                            }
                        }
                    }
                }
                if let Some(dw) = self.grad_slot(grads, *w) {
                    for b in 0..batch {
                        for l in 0..len {
                            let row = &g[(b * len + l) * d..(b * len + l + 1) * d];
                            let hrow = &hs[b * d..(b + 1) * d];
                            dw[l] += row.iter().zip(hrow).map(|(a, c)| *a * *c).sum::<S>();
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, *bias) {
                    for chunk in g.chunks(len * d) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::PrependToken { x, token, batch } => {
                let d = self.value(*token).numel();
                let len = self.dims(*x).0 / batch;
                if let Some(dt) = self.grad_slot(grads, *token) {
                    for b in 0..*batch {
                        let row = (b * (len + 1)) * d;
                        add_into(dt, &g[row..row + d]);
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for b in 0..*batch {
                        let src = (b * (len + 1) + 1) * d;
                        let dst = b * len * d;
                        add_into(&mut dx[dst..dst + len * d], &g[src..src + len * d]);
                    }
                }
            }
            Op::SelectRows { x, stride, offset } => {
                let d = self.dims(*x).1;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (b, row) in g.chunks(d).enumerate() {
                        let dst = (b * stride + offset) * d;
                        add_into(&mut dx[dst..dst + d], row);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = matrix_dims(&node.value).1;
                let mut start = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if let Some(dp) = self.grad_slot(grads, p) {
                        for (r, row) in g.chunks(total).enumerate() {
                            add_into(&mut dp[r * w..(r + 1) * w], &row[start..start + w]);
                        }
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.dims(*x).1;
                let w = matrix_dims(&node.value).1;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (r, row) in g.chunks(w).enumerate() {
                        add_into(&mut dx[r * n + start..r * n + start + w], row);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.dims(*logits).1;
                let coef = g[0] / S::from_usize(labels.len()).unwrap();
                if let Some(dz) = self.grad_slot(grads, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let target = if c == y { S::one() } else { S::zero() };
                            dz[r * classes + c] += coef * (probs[r * classes + c] - target);
                        }
                    }
                }
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Scalar GELU, `x * Phi(x)`.
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let inv_sqrt2 = S::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (S::one() + (x * inv_sqrt2).erf())
}

#[inline]
fn normal_cdf<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let inv_sqrt2 = S::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * (S::one() + (x * inv_sqrt2).erf())
}

#[inline]
fn normal_pdf<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let inv_sqrt_2pi = S::from_f64_lossy(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-half * x * x).exp()
}

fn attention_forward<S: Scalar>(
    geom: &AttnGeom,
    scale: S,
    q: &[S],
    k: &[S],
    v: &[S],
) -> (Vec<S>, Vec<S>) {
    let AttnGeom {
        batch,
        heads,
        q_len,
        kv_len,
        qk_dim,
        v_dim,
    } = *geom;
    let qc = heads * qk_dim;
    let vc = heads * v_dim;
    let mut out = vec![S::zero(); batch * q_len * vc];
    let mut probs = vec![S::zero(); batch * heads * q_len * kv_len];
    for b in 0..batch {
        for h in 0..heads {
            let p_base = (b * heads + h) * q_len * kv_len;
            for i in 0..q_len {
                let qrow = &q[(b * q_len + i) * qc + h * qk_dim..][..qk_dim];
                let prow = &mut probs[p_base + i * kv_len..p_base + (i + 1) * kv_len];
                for (j, p) in prow.iter_mut().enumerate() {
                    let krow = &k[(b * kv_len + j) * qc + h * qk_dim..][..qk_dim];
                    let dot: S = qrow.iter().zip(krow).map(|(x, y)| *x * *y).sum();
                    *p = dot * scale;
                }
                softmax_in_place(prow);
                let orow = &mut out[(b * q_len + i) * vc + h * v_dim..][..v_dim];
                for (j, &p) in prow.iter().enumerate() {
                    let vrow = &v[(b * kv_len + j) * vc + h * v_dim..][..v_dim];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += p * *x;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<S: Scalar>(
    geom: &AttnGeom,
    scale: S,
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    g: &[S],
    wants: [bool; 3],
) -> [Option<Vec<S>>; 3] {
    let AttnGeom {
        batch,
        heads,
        q_len,
        kv_len,
        qk_dim,
        v_dim,
    } = *geom;
    let qc = heads * qk_dim;
    let vc = heads * v_dim;
    let mut dq = vec![S::zero(); q.len()];
    let mut dk = vec![S::zero(); k.len()];
    let mut dv = vec![S::zero(); v.len()];
    let mut dp = vec![S::zero(); kv_len];
    for b in 0..batch {
        for h in 0..heads {
            let p_base = (b * heads + h) * q_len * kv_len;
            for i in 0..q_len {
                let grow = &g[(b * q_len + i) * vc + h * v_dim..][..v_dim];
                let prow = &probs[p_base + i * kv_len..p_base + (i + 1) * kv_len];
                for j in 0..kv_len {
                    let voff = (b * kv_len + j) * vc + h * v_dim;
                    let vrow = &v[voff..voff + v_dim];
                    dp[j] = grow.iter().zip(vrow).map(|(x, y)| *x * *y).sum();
                    if wants[2] {
                        for (d, x) in dv[voff..voff + v_dim].iter_mut().zip(grow) {
                            *d += prow[j] * *x;
                        }
                    }
                }
                let dot: S = prow.iter().zip(&dp).map(|(p, d)| *p * *d).sum();
                let qoff = (b * q_len + i) * qc + h * qk_dim;
                let qrow = &q[qoff..qoff + qk_dim];
                for j in 0..kv_len {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    let koff = (b * kv_len + j) * qc + h * qk_dim;
                    if wants[0] {
                        let krow = &k[koff..koff + qk_dim];
                        for (d, x) in dq[qoff..qoff + qk_dim].iter_mut().zip(krow) {
                            *d += ds * *x;
                        }
                    }
                    if wants[1] {
                        for (d, x) in dk[koff..koff + qk_dim].iter_mut().zip(qrow) {
                            *d += ds * *x;
                        }
                    }
                }
            }
        }
    }
    [
        wants[0].then_some(dq),
        wants[1].then_some(dk),
        wants[2].then_some(dv),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_dot_product() {
        let mut t = Tape::<f64>::new();
        let i2 = t.constant(Tensor::identity(2));
        let x = t.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = t.matmul(i2, x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(Tensor::matrix(&[&[1.0, 2.0]]));
        let b = t.constant(Tensor::matrix(&[&[3.0], &[4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[1, 1]);
        assert_eq!(t.value(c).item(), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn matmul_zero_cotangent_gives_zero_grads() {
        let mut store = ParamStore::<f64>::new();
        let a = store.register("a", Tensor::identity(2));
        let b = store.register("b", Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let mut t = Tape::new();
        let av = t.param(&store, a);
        let bv = t.param(&store, b);
        let c = t.matmul(av, bv).unwrap();
        let s = t.sum(c);
        let zero = t.scale(s, 0.0);
        t.backward(zero, &mut store).unwrap();
        assert!(store.grad(a).data().iter().all(|&g| g == 0.0));
        assert!(store.grad(b).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::matrix(&[
            &[0.0, 0.0, 0.0],
            &[1000.0, 1000.0, 1000.0],
            &[0.0, 3f64.ln(), f64::NEG_INFINITY],
        ]));
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        for c in 0..3 {
            assert!(close(v.get(0, c), 1.0 / 3.0, 1e-15));
            assert!(close(v.get(1, c), 1.0 / 3.0, 1e-15));
        }
        assert!(close(v.get(2, 0), 0.25, 1e-15));
        assert!(close(v.get(2, 1), 0.75, 1e-15));

        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::matrix(&[&[0.0, 0.0]]));
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::from_fn(&[1, 2], |i| {
            if i == 0 {
                f32::NAN
            } else {
                0.0
            }
        }));
        assert!(matches!(t.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::<f64>::new();
        let ones = t.constant(Tensor::full(&[1, 4], 1.0));
        let zeros = t.constant(Tensor::zeros(&[1, 4]));
        let x = t.constant(Tensor::matrix(&[&[5.0, 5.0, 5.0, 5.0]]));
        let y = t.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));

        let beta = t.constant(Tensor::matrix(&[&[0.5, -1.0, 2.0, 3.0]]));
        let x = t.constant(Tensor::matrix(&[&[1.0, -7.0, 2.5, 9.0]]));
        let y = t.layer_norm(x, zeros, beta, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), t.value(beta).data());

        let g2 = t.constant(Tensor::full(&[1, 2], 1.0));
        let b2 = t.constant(Tensor::zeros(&[1, 2]));
        let x = t.constant(Tensor::matrix(&[&[1.0, 3.0]]));
        let y = t.layer_norm(x, g2, b2, 1e-12).unwrap();
        assert!(close(t.value(y).get(0, 0), -1.0, 1e-9));
        assert!(close(t.value(y).get(0, 1), 1.0, 1e-9));

        let x1 = t.constant(Tensor::zeros(&[3, 1]));
        let g1 = t.constant(Tensor::zeros(&[1, 1]));
        assert!(matches!(
            t.layer_norm(x1, g1, g1, 1e-5),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!(close(gelu(10.0f64), 10.0, 1e-12));
        assert!(close(gelu(-10.0f64), 0.0, 1e-12));
    }

    #[test]
    fn backward_examples() {
        // loss = sum(W x) -> every row of dW equals x^T
        let mut store = ParamStore::<f64>::new();
        let w = store.register("w", Tensor::from_fn(&[3, 2], |i| i as f64 * 0.3 - 0.5));
        let unused = store.register("unused", Tensor::full(&[2, 2], 4.0));
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let x = t.constant(Tensor::matrix(&[&[2.0], &[-1.5]]));
        let y = t.matmul(wv, x).unwrap();
        let loss = t.sum(y);
        t.backward(loss, &mut store).unwrap();
        for r in 0..3 {
            assert_eq!(store.grad(w).row(r), &[2.0, -1.5]);
        }
        assert!(store.grad(unused).data().iter().all(|&g| g == 0.0));

        // repeated backward accumulates
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).row(0), &[4.0, -3.0]);

        // loss = ||W||^2 -> 2W
        store.zero_grads();
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let sq = t.mul(wv, wv).unwrap();
        let loss = t.sum(sq);
        t.backward(loss, &mut store).unwrap();
        for (g, v) in store.grad(w).data().iter().zip(store.value(w).data()) {
            assert_eq!(*g, 2.0 * v);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::<f64>::new();
        let w = store.register("w", Tensor::zeros(&[2, 2]));
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        assert!(matches!(t.backward(wv, &mut store), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_never_receive_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.register("w", Tensor::full(&[1, 2], 1.0));
        let mut t = Tape::new();
        let c = t.constant(Tensor::full(&[1, 2], 3.0));
        let wv = t.param(&store, w);
        let p = t.mul(c, wv).unwrap();
        let loss = t.sum(p);
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[3.0, 3.0]);
        assert!(!t.nodes[c.0].needs_grad);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::zeros(&[4, 8]));
        let l = t.softmax_cross_entropy(z, &[0, 3, 7, 1]).unwrap();
        assert!(close(t.value(l).item(), 8f64.ln(), 1e-12));

        let z = t.constant(Tensor::matrix(&[&[0.0, 0.0], &[0.0, 3f64.ln()]]));
        let l = t.softmax_cross_entropy(z, &[0, 1]).unwrap();
        let expected = -(0.5f64.ln() + 0.75f64.ln()) / 2.0;
        assert!(close(t.value(l).item(), expected, 1e-12));
        assert!(close(expected, 0.49041, 1e-5));

        assert!(matches!(
            t.softmax_cross_entropy(z, &[0, 2]),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn structural_ops_move_rows_as_documented() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_fn(&[4, 2], |i| i as f64));
        let tok = t.constant(Tensor::matrix(&[&[-1.0, -2.0]]));
        let p = t.prepend_token(x, tok, 2).unwrap();
        assert_eq!(
            t.value(p).data(),
            &[-1.0, -2.0, 0.0, 1.0, 2.0, 3.0, -1.0, -2.0, 4.0, 5.0, 6.0, 7.0]
        );
        let s = t.select_rows(p, 3, 0).unwrap();
        assert_eq!(t.value(s).data(), &[-1.0, -2.0, -1.0, -2.0]);
        let c = t.concat_cols(&[x, x]).unwrap();
        assert_eq!(t.value(c).row(1), &[2.0, 3.0, 2.0, 3.0]);
        let sl = t.slice_cols(c, 1, 3).unwrap();
        assert_eq!(t.value(sl).row(1), &[3.0, 2.0]);
        let tl = t.tile(tok, 3).unwrap();
        assert_eq!(t.value(tl).shape(), &[3, 2]);

        let h = t.constant(Tensor::matrix(&[&[1.0, 2.0]]));
        let w = t.constant(Tensor::matrix(&[&[2.0], &[-1.0]]));
        let b = t.constant(Tensor::matrix(&[&[0.5, 0.5], &[1.0, 1.0]]));
        let e = t.expand_outer(h, w, b).unwrap();
        assert_eq!(t.value(e).data(), &[2.5, 4.5, 0.0, -1.0]);
    }

    #[test]
    fn attention_with_single_key_copies_value() {
        let mut t = Tape::<f64>::new();
        let q = t.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        let k = t.constant(Tensor::matrix(&[&[0.3, -0.2]]));
        let v = t.constant(Tensor::matrix(&[&[7.0, -4.0]]));
        let o = t.attention(q, k, v, 1, 1, 0.5).unwrap();
        for r in 0..3 {
            assert_eq!(t.value(o).row(r), &[7.0, -4.0]);
        }
    }
}
