use super::fault;
use super::kernels::{self, ConvGeom, ConvGrads};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom, c_in: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    ConcatChannels { parts: Vec<(Var, usize)> },
    ConcatBatch { parts: Vec<Var> },
    SelectBatch { x: Var, rows: Vec<usize> },
    Reshape { x: Var },
    GlobalAvgPool { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    LogClamped { x: Var, floor: f64 },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(Unary::Relu, _) => "relu",
            Op::Unary(Unary::LeakyRelu(_), _) => "leaky_relu",
            Op::Unary(Unary::Sigmoid, _) => "sigmoid",
            Op::Unary(Unary::Tanh, _) => "tanh",
            Op::Unary(Unary::Scale(_), _) => "scale",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::ConcatBatch { .. } => "concat_batch",
            Op::SelectBatch { .. } => "select_batch",
            Op::Reshape { .. } => "reshape",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::LogClamped { .. } => "log_clamped",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op,
}

/// Recording tape for reverse-mode differentiation.
///
/// Node ids increase monotonically and every op's inputs are recorded before
/// it, so a reverse sweep over the tape is a valid topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, msg: msg.into() }
}

fn require_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(invalid(op, format!("expected rank {rank}, got shape {shape:?}")));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if any backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape().to_vec(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Name of the op that produced `v`, as used by [`super::fault::corrupt_backward`].
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let x = self.value(a);
        let out = match kind {
            // NaN passes through so divergence is not masked
            Unary::Relu => x.map(|v| if v <= T::zero() { T::zero() } else { v }),
            Unary::LeakyRelu(slope) => {
                let s = T::from_f64(slope);
                x.map(|v| if v > T::zero() { v } else { v * s })
            }
            Unary::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
            Unary::Tanh => x.map(|v| v.tanh()),
            Unary::Scale(c) => {
                let c = T::from_f64(c);
                x.map(|v| v * c)
            }
        };
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Unary(kind, a))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch(
                match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                x.shape(),
                y.shape(),
            ));
        }
        let f = match kind {
            Binary::Add => |p: T, q: T| p + q,
            Binary::Sub => |p: T, q: T| p - q,
            Binary::Mul => |p: T, q: T| p * q,
        };
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    /// `x · w + bias` for `x: B×F`, `w: F×G`, `bias: G`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        require_rank("linear", xs, 2)?;
        require_rank("linear", ws, 2)?;
        if xs[1] != ws[0] {
            return Err(mismatch("linear", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(mismatch("linear", ws, bs));
        }
        let (batch, f, g) = (xs[0], xs[1], ws[1]);
        let mut data = Vec::with_capacity(batch * g);
        for _ in 0..batch {
            data.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            batch,
            f,
            g,
            self.value(x).data(),
            (f as isize, 1),
            self.value(w).data(),
            (g as isize, 1),
            T::one(),
            &mut data,
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![batch, g],
                data,
            },
            rg,
            Op::Linear { x, w, b },
        ))
    }

    /// Zero-padded cross-correlation. `x: B×C×H×W`, `kernels: K×C×kh×kw`, `bias: K`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(x), self.shape(kernels), self.shape(bias));
        require_rank("conv2d", xs, 4)?;
        require_rank("conv2d", ks, 4)?;
        if xs[1] != ks[1] {
            return Err(mismatch("conv2d", xs, ks));
        }
        if bs != [ks[0]] {
            return Err(mismatch("conv2d", ks, bs));
        }
        let geom = ConvGeom::new("conv2d", (xs[1], xs[2], xs[3]), (ks[2], ks[3]), stride, padding)?;
        let (batch, k) = (xs[0], ks[0]);
        let mut data = vec![T::zero(); batch * k * geom.positions()];
        kernels::conv2d_forward(
            &geom,
            batch,
            self.value(x).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
            &mut data,
        );
        let rg = self.any_grad(&[x, kernels, bias]);
        Ok(self.push(
            Tensor {
                shape: vec![batch, k, geom.out_h, geom.out_w],
                data,
            },
            rg,
            Op::Conv2d {
                x,
                w: kernels,
                b: bias,
                geom,
            },
        ))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] in `x`.
    /// `x: B×C×H×W`, `kernels: C×K×kh×kw`, `bias: K`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(x), self.shape(kernels), self.shape(bias));
        require_rank("conv_transpose2d", xs, 4)?;
        require_rank("conv_transpose2d", ks, 4)?;
        if xs[1] != ks[0] {
            return Err(mismatch("conv_transpose2d", xs, ks));
        }
        if bs != [ks[1]] {
            return Err(mismatch("conv_transpose2d", ks, bs));
        }
        if stride == 0 {
            return Err(invalid("conv_transpose2d", "stride must be at least 1"));
        }
        let (kh, kw) = (ks[2], ks[3]);
        let oh = kernels::conv_transpose_out_extent(xs[2], kh, stride, padding);
        let ow = kernels::conv_transpose_out_extent(xs[3], kw, stride, padding);
        let (oh, ow) = match (oh, ow) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(invalid(
                    "conv_transpose2d",
                    format!("non-positive output extent for input {xs:?}, kernel {kh}x{kw}, stride {stride}, padding {padding}"),
                ))
            }
        };
        let geom = ConvGeom::new("conv_transpose2d", (ks[1], oh, ow), (kh, kw), stride, padding)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (xs[2], xs[3]));
        let (batch, c_in) = (xs[0], xs[1]);
        let mut data = vec![T::zero(); batch * geom.image_len()];
        kernels::conv_transpose2d_forward(
            &geom,
            batch,
            c_in,
            self.value(x).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
            &mut data,
        );
        let rg = self.any_grad(&[x, kernels, bias]);
        Ok(self.push(
            Tensor {
                shape: vec![batch, ks[1], oh, ow],
                data,
            },
            rg,
            Op::ConvTranspose2d {
                x,
                w: kernels,
                b: bias,
                geom,
                c_in,
            },
        ))
    }

    /// Max-pool over the last two axes. Ties route to the first row-major position.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        require_rank("maxpool2d", &xs, 4)?;
        if window == 0 || stride == 0 || window > xs[2] || window > xs[3] {
            return Err(invalid(
                "maxpool2d",
                format!("window {window} (stride {stride}) exceeds input {}x{}", xs[2], xs[3]),
            ));
        }
        let oh = (xs[2] - window) / stride + 1;
        let ow = (xs[3] - window) / stride + 1;
        let planes = xs[0] * xs[1];
        let mut data = vec![T::zero(); planes * oh * ow];
        let argmax = kernels::maxpool_forward(planes, (xs[2], xs[3]), window, stride, self.value(x).data(), &mut data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![xs[0], xs[1], oh, ow],
                data,
            },
            rg,
            Op::MaxPool { x, argmax },
        ))
    }

    /// Concatenate `B×Ci×H×W` parts along the channel axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat_channels", "empty part list"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(invalid("concat_channels", format!("rank too small: {s0:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(mismatch("concat_channels", &s0, s));
            }
            widths.push(s[1]);
        }
        let batch = s0[0];
        let plane: usize = s0[2..].iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(batch * total * plane);
        for b in 0..batch {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[b * w * plane..(b + 1) * w * plane]);
            }
        }
        let mut shape = s0;
        shape[1] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::ConcatChannels {
                parts: parts.iter().copied().zip(widths).collect(),
            },
        ))
    }

    /// Concatenate along the leading (batch) axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat_batch", "empty part list"))?;
        let s0 = self.shape(*first).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[1..] != s0[1..] {
                return Err(mismatch("concat_batch", &s0, s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = s0;
        shape[0] = rows;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::ConcatBatch {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Gather rows of the leading axis (rows may repeat).
    pub fn select_batch(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(invalid("select_batch", format!("rows {rows:?} out of range for {s:?}")));
        }
        let stride = self.value(x).len() / s[0];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&src[r * stride..(r + 1) * stride]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::SelectBatch { x, rows: rows.to_vec() },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    /// `B×C×H×W → B×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        require_rank("global_avg_pool", &s, 4)?;
        let plane = s[2] * s[3];
        let inv = T::one() / T::from_f64(plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![s[0], s[1]],
                data,
            },
            rg,
            Op::GlobalAvgPool { x },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(v), rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().copied().sum::<T>() / T::from_f64(t.len() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(v), rg, Op::Mean { x })
    }

    /// `ln(max(x, floor))`; gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let fl = T::from_f64(floor);
        let out = self.value(x).map(|v| if v > fl { v.ln() } else { fl.ln() });
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::LogClamped { x, floor })
    }

    /// Mean softmax cross-entropy of `logits: B×C` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        require_rank("softmax_cross_entropy", &s, 2)?;
        let (batch, classes) = (s[0], s[1]);
        if labels.len() != batch {
            return Err(invalid(
                "softmax_cross_entropy",
                format!("{} labels for batch of {batch}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(batch * classes);
        let mut total = 0.0;
        for (row, &label) in z.chunks(classes).zip(labels) {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let norm: f64 = exps.iter().sum();
            total += norm.ln() + max - row[label].as_f64();
            probs.extend(exps.iter().map(|e| e / norm));
        }
        let loss = T::from_f64(total / batch as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Same values as `x`, recorded without any backward edge.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, false, Op::Leaf)
    }

    /// Mean squared difference between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Accumulate `d loss / d v` into every reachable node that requires grad.
    /// Repeated calls add to existing gradients until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(mut upstream) = adj[i].take() else { continue };
            if let Some(f) = fault::factor(self.nodes[i].op.name()) {
                let f = T::from_f64(f);
                upstream.iter_mut().for_each(|g| *g = *g * f);
            }
            self.backward_node(i, &upstream, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(g) => g.iter_mut().zip(&upstream).for_each(|(a, &b)| *a = *a + b),
                None => node.grad = Some(upstream),
            }
        }
        Ok(())
    }

    fn zero_buf(&self, v: Var) -> Option<Vec<T>> {
        let n = &self.nodes[v.0];
        n.requires_grad.then(|| vec![T::zero(); n.value.len()])
    }

    fn accumulate(adj: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        match &mut adj[v.0] {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn with_grad(&self, adj: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if let Some(mut buf) = self.zero_buf(v) {
            f(&mut buf);
            Self::accumulate(adj, v, buf);
        }
    }

    fn backward_node(&self, i: usize, up: &[T], adj: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                let x = val(*a);
                let y = self.nodes[i].value.data();
                self.with_grad(adj, *a, |g| {
                    for (k, gk) in g.iter_mut().enumerate() {
                        let d = match kind {
                            Unary::Relu => {
                                if x[k] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::LeakyRelu(s) => {
                                if x[k] > T::zero() {
                                    T::one()
                                } else {
                                    T::from_f64(*s)
                                }
                            }
                            Unary::Sigmoid => y[k] * (T::one() - y[k]),
                            Unary::Tanh => T::one() - y[k] * y[k],
                            Unary::Scale(c) => T::from_f64(*c),
                        };
                        *gk = d * up[k];
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (x, y) = (val(*a), val(*b));
                self.with_grad(adj, *a, |g| {
                    for k in 0..g.len() {
                        g[k] = match kind {
                            Binary::Add | Binary::Sub => up[k],
                            Binary::Mul => up[k] * y[k],
                        };
                    }
                });
                self.with_grad(adj, *b, |g| {
                    for k in 0..g.len() {
                        g[k] = match kind {
                            Binary::Add => up[k],
                            Binary::Sub => -up[k],
                            Binary::Mul => up[k] * x[k],
                        };
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (batch, f) = (xs[0], xs[1]);
                let g_out = self.nodes[w.0].value.shape()[1];
                self.with_grad(adj, *x, |gx| {
                    // up (B×G) · wᵀ (G×F)
                    T::gemm(batch, g_out, f, up, (g_out as isize, 1), val(*w), (1, g_out as isize), T::zero(), gx);
                });
                self.with_grad(adj, *w, |gw| {
                    // xᵀ (F×B) · up (B×G)
                    T::gemm(f, batch, g_out, val(*x), (1, f as isize), up, (g_out as isize, 1), T::zero(), gw);
                });
                self.with_grad(adj, *b, |gb| {
                    for row in up.chunks(g_out) {
                        gb.iter_mut().zip(row).for_each(|(a, &r)| *a = *a + r);
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (mut gx, mut gw, mut gb) = (self.zero_buf(*x), self.zero_buf(*w), self.zero_buf(*b));
                let batch = self.nodes[x.0].value.shape()[0];
                let k = self.nodes[w.0].value.shape()[0];
                kernels::conv2d_backward(
                    geom,
                    batch,
                    val(*x),
                    val(*w),
                    k,
                    up,
                    ConvGrads {
                        x: gx.as_deref_mut(),
                        weight: gw.as_deref_mut(),
                        bias: gb.as_deref_mut(),
                    },
                );
                for (v, g) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(g) = g {
                        Self::accumulate(adj, v, g);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, c_in } => {
                let (mut gx, mut gw, mut gb) = (self.zero_buf(*x), self.zero_buf(*w), self.zero_buf(*b));
                let batch = self.nodes[x.0].value.shape()[0];
                kernels::conv_transpose2d_backward(
                    geom,
                    batch,
                    *c_in,
                    val(*x),
                    val(*w),
                    up,
                    ConvGrads {
                        x: gx.as_deref_mut(),
                        weight: gw.as_deref_mut(),
                        bias: gb.as_deref_mut(),
                    },
                );
                for (v, g) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(g) = g {
                        Self::accumulate(adj, v, g);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                self.with_grad(adj, *x, |g| {
                    for (&src, &u) in argmax.iter().zip(up) {
                        g[src] = g[src] + u;
                    }
                });
            }
            Op::ConcatChannels { parts } => {
                let out_shape = self.nodes[i].value.shape();
                let batch = out_shape[0];
                let plane: usize = out_shape[2..].iter().product();
                let total = out_shape[1];
                let mut offset = 0;
                for &(p, w) in parts {
                    self.with_grad(adj, p, |g| {
                        for b in 0..batch {
                            let src = &up[(b * total + offset) * plane..(b * total + offset + w) * plane];
                            g[b * w * plane..(b + 1) * w * plane]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &s)| *a = *a + s);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatBatch { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.with_grad(adj, p, |g| {
                        g.iter_mut().zip(&up[offset..offset + n]).for_each(|(a, &s)| *a = *a + s);
                    });
                    offset += n;
                }
            }
            Op::SelectBatch { x, rows } => {
                let stride = up.len() / rows.len();
                self.with_grad(adj, *x, |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &up[k * stride..(k + 1) * stride];
                        g[r * stride..(r + 1) * stride]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &s)| *a = *a + s);
                    }
                });
            }
            Op::Reshape { x } => {
                self.with_grad(adj, *x, |g| g.copy_from_slice(up));
            }
            Op::GlobalAvgPool { x } => {
                let s = self.nodes[x.0].value.shape();
                let plane = s[2] * s[3];
                let inv = T::one() / T::from_f64(plane as f64);
                self.with_grad(adj, *x, |g| {
                    for (chunk, &u) in g.chunks_mut(plane).zip(up) {
                        chunk.fill(u * inv);
                    }
                });
            }
            Op::Sum { x } => {
                self.with_grad(adj, *x, |g| g.fill(up[0]));
            }
            Op::Mean { x } => {
                let n = T::from_f64(self.nodes[x.0].value.len() as f64);
                self.with_grad(adj, *x, |g| g.fill(up[0] / n));
            }
            Op::LogClamped { x, floor } => {
                let xv = val(*x);
                let fl = T::from_f64(*floor);
                self.with_grad(adj, *x, |g| {
                    for k in 0..g.len() {
                        g[k] = if xv[k] > fl { up[k] / xv[k] } else { T::zero() };
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let classes = self.nodes[logits.0].value.shape()[1];
                let scale = up[0].as_f64() / labels.len() as f64;
                self.with_grad(adj, *logits, |g| {
                    for (b, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let target = if c == label { 1.0 } else { 0.0 };
                            g[b * classes + c] = T::from_f64((probs[b * classes + c] - target) * scale);
                        }
                    }
                });
            }
        }
    }
}
