use super::kernels::{conv2d_backward, conv2d_forward, ConvGeometry, Padding};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

/// Right-hand side of an element-wise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<T> {
    Var(Var),
    Scalar(T),
}

impl<T> From<Var> for Operand<T> {
    fn from(v: Var) -> Self {
        Operand::Var(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// How the right operand of a binary op is laid over the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Single-element right operand.
    Scalar,
    /// Right operand matches the trailing axes of the left (bias add).
    Trailing,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: ElementwiseOp,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    ScalarRhs {
        kind: ElementwiseOp,
        a: Var,
        s: T,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        axes: Vec<usize>,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Bce {
        p: Var,
        labels: Vec<T>,
        w0: T,
        w1: T,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Probability clamp applied before taking logarithms in the cross-entropy ops.
pub const PROB_EPSILON: f64 = 1e-7;

/// Record of one forward pass, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. A tape supports exactly one backward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} produced a non-finite value")))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Result<Var> {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
            .expect("pushing a leaf cannot fail")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    // ---- element-wise -------------------------------------------------

    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Operand<T>) -> Result<Var> {
        match b {
            Operand::Scalar(s) => self.scalar_rhs(kind, a, s),
            Operand::Var(b) => self.binary(kind, a, b),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Max, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.scalar_rhs(ElementwiseOp::Add, a, s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.scalar_rhs(ElementwiseOp::Mul, a, s)
    }

    fn broadcast_of(a: &[usize], b: &[usize], b_len: usize) -> Result<Broadcast> {
        if a == b {
            Ok(Broadcast::Same)
        } else if b_len == 1 {
            Ok(Broadcast::Scalar)
        } else if b.len() < a.len() && a.ends_with(b) {
            Ok(Broadcast::Trailing)
        } else {
            Err(Error::Shape(format!(
                "cannot broadcast {b:?} onto {a:?} (only scalar and trailing-axis broadcasting)"
            )))
        }
    }

    fn apply(kind: ElementwiseOp, x: T, y: T) -> T {
        match kind {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
            ElementwiseOp::Div => x / y,
            ElementwiseOp::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
        }
    }

    fn binary(&mut self, kind: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bcast = Self::broadcast_of(av.shape(), bv.shape(), bv.len())?;
        if kind == ElementwiseOp::Div && bv.data().iter().any(|v| v.is_zero()) {
            return Err(Error::Domain("division by a zero element".into()));
        }
        let bd = bv.data();
        let m = bd.len();
        let data: Vec<T> = match bcast {
            Broadcast::Same => av.data().iter().zip(bd).map(|(&x, &y)| Self::apply(kind, x, y)).collect(),
            Broadcast::Scalar => av.data().iter().map(|&x| Self::apply(kind, x, bd[0])).collect(),
            Broadcast::Trailing => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| Self::apply(kind, x, bd[i % m]))
                .collect(),
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        check_finite(&out, &format!("{kind:?}"))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, rg, Op::Binary { kind, a, b, bcast })
    }

    fn scalar_rhs(&mut self, kind: ElementwiseOp, a: Var, s: T) -> Result<Var> {
        if kind == ElementwiseOp::Div && s.is_zero() {
            return Err(Error::Domain("division by zero".into()));
        }
        let out = self.value(a).map(|x| Self::apply(kind, x, s));
        check_finite(&out, &format!("{kind:?}"))?;
        let rg = self.requires_grad(a);
        self.push(out, rg, Op::ScalarRhs { kind, a, s })
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
            return Err(Error::Shape(format!(
                "matmul needs two matrices, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {k} vs {k2}"
            )));
        }
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), false, bv.data(), false, &mut c, false);
        let out = Tensor::new(vec![m, n], c)?;
        check_finite(&out, "matmul")?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, rg, Op::MatMul { a, b, m, k, n })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Reshape(x))
    }

    // ---- reductions -----------------------------------------------------

    /// Reduces over `axes`, removing them from the shape.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= xv.ndim()) {
            return Err(Error::Shape(format!(
                "axis {bad} out of range for shape {:?}",
                xv.shape()
            )));
        }
        let (out_shape, map) = reduce_map(xv.shape(), &axes);
        let out_len: usize = out_shape.iter().product();
        let count = xv.len() / out_len;
        let mut argmax = Vec::new();
        let data = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut acc = vec![T::zero(); out_len];
                for (&v, &o) in xv.data().iter().zip(&map) {
                    acc[o] = acc[o] + v;
                }
                if kind == ReduceKind::Mean {
                    let inv = T::of(1.0 / count as f64);
                    acc.iter_mut().for_each(|v| *v = *v * inv);
                }
                acc
            }
            ReduceKind::Max => {
                let mut best = vec![T::neg_infinity(); out_len];
                argmax = vec![usize::MAX; out_len];
                for (i, (&v, &o)) in xv.data().iter().zip(&map).enumerate() {
                    if argmax[o] == usize::MAX || v > best[o] {
                        best[o] = v;
                        argmax[o] = i;
                    }
                }
                best
            }
        };
        let out = Tensor::new(out_shape, data)?;
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Reduce { kind, x, axes, argmax })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).ndim()).collect();
        self.reduce(ReduceKind::Sum, x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).ndim()).collect();
        self.reduce(ReduceKind::Mean, x, &axes)
    }

    // ---- unary ------------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(stable_sigmoid);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Sigmoid(x))
    }

    /// Natural logarithm; every element must be positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain("log of a non-positive element".into()));
        }
        let out = xv.map(|v| v.ln());
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Log(x))
    }

    // ---- convolution & normalization ---------------------------------------

    /// 2-D cross-correlation over NHWC input with a `[KH, KW, Cin, Cout]` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(x).shape(), self.value(kernel).shape(), stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.c_out] {
                return Err(Error::Shape(format!(
                    "conv2d bias must be [{}], got {:?}",
                    geom.c_out,
                    self.value(b).shape()
                )));
            }
        }
        let data = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(geom.out_shape(), data)?;
        let rg = self.requires_grad(x)
            || self.requires_grad(kernel)
            || bias.is_some_and(|b| self.requires_grad(b));
        self.push(out, rg, Op::Conv2d { x, kernel, bias, geom })
    }

    fn check_channel_params(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let xv = self.value(x);
        let c = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("batch norm on a 0-d tensor".into()))?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::Shape(format!(
                    "batch norm affine parameter must be [{c}], got {:?}",
                    self.value(p).shape()
                )));
            }
        }
        Ok(c)
    }

    /// Batch normalization over every axis except the last, using batch statistics.
    ///
    /// Returns the output together with the per-channel batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let c = self.check_channel_params(x, gamma, beta)?;
        let xv = self.value(x);
        let m = xv.len() / c;
        if m == 0 {
            return Err(Error::State("batch norm on an empty batch".into()));
        }
        let mut mean = vec![0.0f64; c];
        for row in xv.data().chunks_exact(c) {
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0f64; c];
        for row in xv.data().chunks_exact(c) {
            for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.as_f64() - mu;
                *acc += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let mean_t: Vec<T> = mean.iter().map(|&v| T::of(v)).collect();
        let var_t: Vec<T> = var.iter().map(|&v| T::of(v)).collect();
        let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + eps.as_f64()).sqrt())).collect();
        let (out, xhat) = self.normalize(x, gamma, beta, &mean_t, &inv_std)?;
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let y = self.push(
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
        )?;
        Ok((y, mean_t, var_t))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let c = self.check_channel_params(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!(
                "running statistics must have {c} channels"
            )));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.normalize(x, gamma, beta, mean, &inv_std)?;
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.push(
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
        )
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let xv = self.value(x);
        let c = mean.len();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        Ok((Tensor::new(xv.shape().to_vec(), out)?, xhat))
    }

    // ---- losses ---------------------------------------------------------------

    /// Per-example class-weighted binary cross-entropy.
    ///
    /// `p` holds probabilities with shape `[N]` or `[N, 1]`; the output has
    /// shape `[N]` with `-(w1*y*ln p + w0*(1-y)*ln(1-p))`, after clamping `p`
    /// to `[1e-7, 1 - 1e-7]`. Clamped entries receive zero gradient.
    pub fn bce(&mut self, p: Var, labels: &[T], w0: T, w1: T) -> Result<Var> {
        let pv = self.value(p);
        let n = pv.shape().first().copied().unwrap_or(0);
        if pv.len() != n || labels.len() != n {
            return Err(Error::Shape(format!(
                "bce expects probabilities [N] or [N,1] and N labels; got {:?} and {}",
                pv.shape(),
                labels.len()
            )));
        }
        let eps = T::of(PROB_EPSILON);
        let hi = T::one() - eps;
        let data: Vec<T> = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&q, &y)| {
                let q = q.max(eps).min(hi);
                -(w1 * y * q.ln() + w0 * (T::one() - y) * (T::one() - q).ln())
            })
            .collect();
        let out = Tensor::new(vec![n], data)?;
        let rg = self.requires_grad(p);
        self.push(
            out,
            rg,
            Op::Bce {
                p,
                labels: labels.to_vec(),
                w0,
                w1,
            },
        )
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let &[n, k] = lv.shape() else {
            return Err(Error::Shape(format!(
                "softmax cross-entropy needs [N,K] logits, got {:?}",
                lv.shape()
            )));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::Shape("labels must be N class indices below K".into()));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0f64;
        for (row, &label) in lv.data().chunks_exact(k).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
            let total = exps.iter().fold(T::zero(), |a, &b| a + b);
            loss += (total.ln() - (row[label] - max)).as_f64();
            probs.extend(exps.iter().map(|&e| e / total));
        }
        let out = Tensor::scalar(T::of(loss / n as f64));
        let rg = self.requires_grad(logits);
        self.push(
            out,
            rg,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    // ---- backward --------------------------------------------------------------

    /// Reverse pass from a scalar `loss`, seeded with gradient 1.
    ///
    /// Every gradient-requiring leaf gets an entry; leaves without a path to
    /// `loss` get exact zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this tape; re-run the forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            // Keep the gradient of intermediate nodes available to callers.
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let m = bv.len();
                let bi = |j: usize| match bcast {
                    Broadcast::Same => j,
                    Broadcast::Scalar => 0,
                    Broadcast::Trailing => j % m,
                };
                if self.requires_grad(*a) {
                    let da: Vec<T> = (0..av.len())
                        .map(|j| {
                            let (x, y) = (av[j], bv[bi(j)]);
                            match kind {
                                ElementwiseOp::Add | ElementwiseOp::Sub => gd[j],
                                ElementwiseOp::Mul => gd[j] * y,
                                ElementwiseOp::Div => gd[j] / y,
                                ElementwiseOp::Max => {
                                    if x >= y {
                                        gd[j]
                                    } else {
                                        T::zero()
                                    }
                                }
                            }
                        })
                        .collect();
                    self.add_grad(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); m];
                    for j in 0..av.len() {
                        let (x, y) = (av[j], bv[bi(j)]);
                        let contrib = match kind {
                            ElementwiseOp::Add => gd[j],
                            ElementwiseOp::Sub => -gd[j],
                            ElementwiseOp::Mul => gd[j] * x,
                            ElementwiseOp::Div => -gd[j] * x / (y * y),
                            ElementwiseOp::Max => {
                                if x >= y {
                                    T::zero()
                                } else {
                                    gd[j]
                                }
                            }
                        };
                        let t = bi(j);
                        db[t] = db[t] + contrib;
                    }
                    self.add_grad(grads, *b, db);
                }
            }
            Op::ScalarRhs { kind, a, s } => {
                let av = self.value(*a).data();
                let da: Vec<T> = av
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| match kind {
                        ElementwiseOp::Add | ElementwiseOp::Sub => g,
                        ElementwiseOp::Mul => g * *s,
                        ElementwiseOp::Div => g / *s,
                        ElementwiseOp::Max => {
                            if x >= *s {
                                g
                            } else {
                                T::zero()
                            }
                        }
                    })
                    .collect();
                self.add_grad(grads, *a, da);
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(*m, *n, *k, gd, false, self.value(*b).data(), true, &mut da, false);
                    self.add_grad(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(*k, *m, *n, self.value(*a).data(), true, gd, false, &mut db, false);
                    self.add_grad(grads, *b, db);
                }
            }
            Op::Reshape(x) => self.add_grad(grads, *x, gd.to_vec()),
            Op::Reduce { kind, x, axes, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.len()];
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let (_, map) = reduce_map(xv.shape(), axes);
                        let scale = if *kind == ReduceKind::Mean {
                            T::of(gd.len() as f64 / xv.len() as f64)
                        } else {
                            T::one()
                        };
                        for (d, &o) in dx.iter_mut().zip(&map) {
                            *d = gd[o] * scale;
                        }
                    }
                    ReduceKind::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src] = gd[o];
                        }
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.add_grad(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = y.iter().zip(gd).map(|(&s, &g)| g * s * (T::one() - s)).collect();
                self.add_grad(grads, *x, dx);
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(gd).map(|(&v, &g)| g / v).collect();
                self.add_grad(grads, *x, dx);
            }
            Op::Conv2d { x, kernel, bias, geom } => {
                let mut dx = self.requires_grad(*x).then(|| vec![T::zero(); self.value(*x).len()]);
                let mut dk = self
                    .requires_grad(*kernel)
                    .then(|| vec![T::zero(); self.value(*kernel).len()]);
                conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    gd,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.add_grad(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    self.add_grad(grads, *kernel, dk);
                }
                if let Some(b) = bias.filter(|&b| self.requires_grad(b)) {
                    let mut db = vec![T::zero(); geom.c_out];
                    for row in gd.chunks_exact(geom.c_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.add_grad(grads, b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let m = gd.len() / c;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_dy[ch] += grow[ch].as_f64();
                        sum_dy_xhat[ch] += (grow[ch] * hrow[ch]).as_f64();
                    }
                }
                if self.requires_grad(*gamma) {
                    self.add_grad(grads, *gamma, sum_dy_xhat.iter().map(|&v| T::of(v)).collect());
                }
                if self.requires_grad(*beta) {
                    self.add_grad(grads, *beta, sum_dy.iter().map(|&v| T::of(v)).collect());
                }
                if self.requires_grad(*x) {
                    let gm = self.value(*gamma).data();
                    let mut dx = Vec::with_capacity(gd.len());
                    if *train {
                        // dx = gamma*inv_std/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
                        let mf = m as f64;
                        let coef: Vec<f64> = (0..c).map(|ch| (gm[ch] * inv_std[ch]).as_f64() / mf).collect();
                        for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for ch in 0..c {
                                let v = coef[ch]
                                    * (mf * grow[ch].as_f64()
                                        - sum_dy[ch]
                                        - hrow[ch].as_f64() * sum_dy_xhat[ch]);
                                dx.push(T::of(v));
                            }
                        }
                    } else {
                        for grow in gd.chunks_exact(c) {
                            for ch in 0..c {
                                dx.push(grow[ch] * gm[ch] * inv_std[ch]);
                            }
                        }
                    }
                    self.add_grad(grads, *x, dx);
                }
            }
            Op::Bce { p, labels, w0, w1 } => {
                let pv = self.value(*p).data();
                let eps = T::of(PROB_EPSILON);
                let hi = T::one() - eps;
                let dp = pv
                    .iter()
                    .zip(labels)
                    .zip(gd)
                    .map(|((&q, &y), &g)| {
                        if q < eps || q > hi {
                            T::zero()
                        } else {
                            g * (-*w1 * y / q + *w0 * (T::one() - y) / (T::one() - q))
                        }
                    })
                    .collect();
                self.add_grad(grads, *p, dp);
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = gd[0] / T::of(labels.len() as f64);
                let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dz[r * k + l] = dz[r * k + l] - scale;
                }
                self.add_grad(grads, *logits, dz);
            }
        }
        Ok(())
    }

    fn add_grad(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        let shape = self.value(v).shape().to_vec();
        let t = Tensor::new(shape, data).expect("gradient shape matches value");
        match &mut grads[v.0] {
            Some(existing) => existing.accumulate(&t),
            slot => *slot = Some(t),
        }
    }
}

/// `1 / (1 + e^-x)` without overflow for large `|x|`.
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Output shape of a reduction, and the output index of every input element.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    // Stride of each input axis in the output (0 for reduced axes).
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for i in (0..shape.len()).rev() {
        if !axes.contains(&i) {
            out_strides[i] = stride;
            stride *= shape[i];
        }
    }
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut o = 0usize;
    for _ in 0..total {
        map.push(o);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            o += out_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            o -= out_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}
