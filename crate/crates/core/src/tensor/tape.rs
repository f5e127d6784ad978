use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{Element, Padding, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalization statistics carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F = f32> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Element> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchNormMode {
    /// Normalize by batch statistics and fold them into the running stats
    /// as `running = momentum * running + (1 - momentum) * batch`.
    Train { momentum: f64 },
    Eval,
}

enum Op<F> {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    Depthwise { input: Var, kernel: Var, geom: ConvGeom },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Relu { input: Var },
    MaxPool { input: Var, arg: Vec<usize> },
    Add { lhs: Var, rhs: Var },
    Mul { lhs: Var, rhs: Var },
    GlobalAvgPool { input: Var },
    Dense { input: Var, weight: Var, bias: Var },
    Sigmoid { input: Var },
    Dropout { input: Var, mask: Vec<F> },
    Sum { input: Var },
    Mean { input: Var },
    BceWithLogits { logits: Var, targets: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Linear record of executed ops. Nodes are appended in execution order, so
/// the tape order is already a topological order and `backward` walks it
/// once in reverse.
///
/// An inference tape ([`Tape::inference`]) computes the same values but
/// keeps no backward state.
pub struct Tape<F: Element = f32> {
    nodes: Vec<Node<F>>,
    recording: bool,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn finite<F: Element>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn sigmoid<F: Element>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Places a value on the tape that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a trainable value on the tape.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: self.recording,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn check(&self, var: Var) -> Result<&Tensor<F>> {
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownVar(var.0))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        finite(op_name, value.data())?;
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Dense 2-D convolution over an NCHW input with an `[M, C, kh, kw]`
    /// kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        const OP: &str = "conv2d";
        let (x, k) = (self.check(input)?, self.check(kernel)?);
        if k.shape().len() != 4 {
            return Err(shape_err(OP, format!("kernel must be [M, C, kh, kw], got {:?}", k.shape())));
        }
        let ks = k.shape();
        let geom = ConvGeom::resolve(OP, x.shape(), ks[0], ks[2], ks[3], stride, padding)?;
        if ks[1] != geom.in_c {
            return Err(shape_err(
                OP,
                format!("input has {} channels, kernel expects {}", geom.in_c, ks[1]),
            ));
        }
        let out = kernels::conv2d_forward(&geom, x.data(), k.data());
        let value = Tensor::new(geom.out_shape(), out)?;
        self.push(OP, value, Op::Conv2d { input, kernel, geom }, &[input, kernel])
    }

    /// One spatial filter per channel, kernel `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        const OP: &str = "depthwise_conv2d";
        let (x, k) = (self.check(input)?, self.check(kernel)?);
        let ks = k.shape();
        if ks.len() != 4 || ks[1] != 1 {
            return Err(shape_err(OP, format!("kernel must be [C, 1, kh, kw], got {ks:?}")));
        }
        let geom = ConvGeom::resolve(OP, x.shape(), ks[0], ks[2], ks[3], stride, padding)?;
        if ks[0] != geom.in_c {
            return Err(shape_err(
                OP,
                format!("input has {} channels, kernel has {}", geom.in_c, ks[0]),
            ));
        }
        let out = kernels::depthwise_forward(&geom, x.data(), k.data());
        let value = Tensor::new(geom.out_shape(), out)?;
        self.push(OP, value, Op::Depthwise { input, kernel, geom }, &[input, kernel])
    }

    /// Depthwise filtering followed by a 1x1 channel mix.
    pub fn separable_conv2d(
        &mut self,
        input: Var,
        depthwise: Var,
        pointwise: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (dw, pw) = (self.check(depthwise)?.shape(), self.check(pointwise)?.shape());
        if pw.len() != 4 || pw[2] != 1 || pw[3] != 1 {
            return Err(shape_err("separable_conv2d", format!("pointwise kernel must be [M, C, 1, 1], got {pw:?}")));
        }
        if dw.first() != pw.get(1) {
            return Err(shape_err(
                "separable_conv2d",
                format!("depthwise stage yields {:?} channels, pointwise expects {}", dw.first(), pw[1]),
            ));
        }
        let mid = self.depthwise_conv2d(input, depthwise, stride, padding)?;
        self.conv2d(mid, pointwise, 1, Padding::Valid)
    }

    /// Per-channel normalization over every axis except axis 1.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<F>,
        mode: BatchNormMode,
        eps: f64,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let x = self.check(input)?;
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(shape_err(OP, format!("need at least [N, C], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        let (g, b) = (self.check(gamma)?.data(), self.check(beta)?.data());
        if g.len() != c || b.len() != c || stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err(
                OP,
                format!("{c} channels but gamma {} beta {} stats {}", g.len(), b.len(), stats.mean.len()),
            ));
        }
        let count = n * plane;
        let eps = F::lit(eps);
        let xd = x.data();
        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Train { momentum } => {
                if count == 0 {
                    return Err(TensorError::EmptyBatch);
                }
                let m = F::lit(count as f64);
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                for ch in 0..c {
                    let mut s = F::zero();
                    for bi in 0..n {
                        s = s + xd[(bi * c + ch) * plane..][..plane].iter().copied().sum::<F>();
                    }
                    mean[ch] = s / m;
                    let mut sq = F::zero();
                    for bi in 0..n {
                        for &v in &xd[(bi * c + ch) * plane..][..plane] {
                            sq = sq + (v - mean[ch]) * (v - mean[ch]);
                        }
                    }
                    var[ch] = sq / m;
                }
                let mom = F::lit(momentum);
                let unbias = if count > 1 { m / (m - F::one()) } else { F::one() };
                for ch in 0..c {
                    stats.mean[ch] = mom * stats.mean[ch] + (F::one() - mom) * mean[ch];
                    stats.var[ch] = mom * stats.var[ch] + (F::one() - mom) * var[ch] * unbias;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval => (stats.mean.clone(), stats.var.clone(), false),
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); xd.len()];
        let mut out = vec![F::zero(); xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for i in base..base + plane {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        self.push(OP, value, op, &[input, gamma, beta])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.check(input)?;
        let out = x.data().iter().map(|&v| v.max(F::zero())).collect();
        let value = Tensor::new(x.shape(), out)?;
        self.push("relu", value, Op::Relu { input }, &[input])
    }

    pub fn max_pool(&mut self, input: Var, size: usize, stride: usize, padding: Padding) -> Result<Var> {
        const OP: &str = "max_pool";
        let x = self.check(input)?;
        let c = *x.shape().get(1).unwrap_or(&0);
        let geom = ConvGeom::resolve(OP, x.shape(), c, size, size, stride, padding)?;
        let (out, arg) = kernels::maxpool_forward(&geom, x.data());
        let value = Tensor::new(geom.out_shape(), out)?;
        self.push(OP, value, Op::MaxPool { input, arg }, &[input])
    }

    fn same_shape(&self, op: &'static str, lhs: Var, rhs: Var) -> Result<()> {
        let (a, b) = (self.check(lhs)?, self.check(rhs)?);
        if a.shape() != b.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape("add", lhs, rhs)?;
        let (a, b) = (self.value(lhs), self.value(rhs));
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(a.shape(), out)?;
        self.push("add", value, Op::Add { lhs, rhs }, &[lhs, rhs])
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape("mul", lhs, rhs)?;
        let (a, b) = (self.value(lhs), self.value(rhs));
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(a.shape(), out)?;
        self.push("mul", value, Op::Mul { lhs, rhs }, &[lhs, rhs])
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.check(input)?;
        let s = x.shape();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("expected NCHW, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let denom = F::lit(plane as f64);
        let out = x.data().chunks(plane).map(|p| p.iter().copied().sum::<F>() / denom).collect();
        let value = Tensor::new([s[0], s[1]], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool { input }, &[input])
    }

    /// `x · W + b` with `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "dense";
        let (x, w, b) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 2 {
            return Err(shape_err(OP, format!("input must be 2-D (batch, features), got {xs:?}")));
        }
        if ws.len() != 2 || ws[0] != xs[1] || b.shape() != [ws[1]] {
            return Err(shape_err(
                OP,
                format!("input {xs:?} incompatible with weight {ws:?} / bias {:?}", b.shape()),
            ));
        }
        let (n, fan_in, fan_out) = (xs[0], ws[0], ws[1]);
        let mut out: Vec<F> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
        F::gemm(n, fan_in, fan_out, x.data(), false, w.data(), false, &mut out, true);
        let value = Tensor::new([n, fan_out], out)?;
        self.push(OP, value, Op::Dense { input, weight, bias }, &[input, weight, bias])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.check(input)?;
        let out = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape(), out)?;
        self.push("sigmoid", value, Op::Sigmoid { input }, &[input])
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`; in
    /// eval mode the input is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate(rate));
        }
        let x = self.check(input)?;
        if !train {
            return Ok(input);
        }
        let keep = F::lit(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape(), out)?;
        self.push("dropout", value, Op::Dropout { input, mask }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let x = self.check(input)?;
        let value = Tensor::scalar(x.data().iter().copied().sum());
        self.push("sum", value, Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.check(input)?;
        let value = Tensor::scalar(x.data().iter().copied().sum::<F>() / F::lit(x.numel() as f64));
        self.push("mean", value, Op::Mean { input }, &[input])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
    /// computed in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[F]) -> Result<Var> {
        let z = self.check(logits)?;
        if z.numel() != targets.len() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} logits vs {} targets", z.numel(), targets.len()),
            ));
        }
        let total: F = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln())
            .sum();
        let value = Tensor::scalar(total / F::lit(targets.len() as f64));
        let op = Op::BceWithLogits {
            logits,
            targets: targets.to_vec(),
        };
        self.push("bce_with_logits", value, op, &[logits])
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape; gradients are
    /// returned for every trainable leaf that `loss` depends on.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let root = self.check(loss)?;
        if root.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        let acc = |grads: &mut Vec<Option<Vec<F>>>, var: Var, g: Vec<F>| {
            if !nodes[var.0].requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
                slot => *slot = Some(g),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => leaves[idx] = Some(Tensor::new(node.value.shape(), g)?),
                Op::Conv2d { input, kernel, geom } => {
                    let (dx, dk) = kernels::conv2d_backward(
                        geom,
                        val(*input),
                        val(*kernel),
                        &g,
                        nodes[input.0].requires_grad,
                        nodes[kernel.0].requires_grad,
                    );
                    if let Some(dx) = dx {
                        acc(&mut grads, *input, dx);
                    }
                    if let Some(dk) = dk {
                        acc(&mut grads, *kernel, dk);
                    }
                }
                Op::Depthwise { input, kernel, geom } => {
                    let (dx, dk) = kernels::depthwise_backward(geom, val(*input), val(*kernel), &g);
                    acc(&mut grads, *input, dx);
                    acc(&mut grads, *kernel, dk);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let shape = node.value.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let plane: usize = shape[2..].iter().product();
                    let gam = val(*gamma);
                    let mut d_gamma = vec![F::zero(); c];
                    let mut d_beta = vec![F::zero(); c];
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            for i in base..base + plane {
                                d_beta[ch] = d_beta[ch] + g[i];
                                d_gamma[ch] = d_gamma[ch] + g[i] * xhat[i];
                            }
                        }
                    }
                    let m = F::lit((n * plane) as f64);
                    let mut dx = vec![F::zero(); g.len()];
                    for bi in 0..n {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            let base = (bi * c + ch) * plane;
                            for i in base..base + plane {
                                dx[i] = if *batch_stats {
                                    scale / m * (m * g[i] - d_beta[ch] - xhat[i] * d_gamma[ch])
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    acc(&mut grads, *input, dx);
                    acc(&mut grads, *gamma, d_gamma);
                    acc(&mut grads, *beta, d_beta);
                }
                Op::Relu { input } => {
                    let dx = val(*input)
                        .iter()
                        .zip(&g)
                        .map(|(&x, &d)| if x > F::zero() { d } else { F::zero() })
                        .collect();
                    acc(&mut grads, *input, dx);
                }
                Op::MaxPool { input, arg } => {
                    let mut dx = vec![F::zero(); nodes[input.0].value.numel()];
                    for (&at, &d) in arg.iter().zip(&g) {
                        dx[at] = dx[at] + d;
                    }
                    acc(&mut grads, *input, dx);
                }
                Op::Add { lhs, rhs } => {
                    acc(&mut grads, *lhs, g.clone());
                    acc(&mut grads, *rhs, g);
                }
                Op::Mul { lhs, rhs } => {
                    let dl = g.iter().zip(val(*rhs)).map(|(&d, &r)| d * r).collect();
                    let dr = g.iter().zip(val(*lhs)).map(|(&d, &l)| d * l).collect();
                    acc(&mut grads, *lhs, dl);
                    acc(&mut grads, *rhs, dr);
                }
                Op::GlobalAvgPool { input } => {
                    let s = nodes[input.0].value.shape();
                    let plane = s[2] * s[3];
                    let denom = F::lit(plane as f64);
                    let dx = g.iter().flat_map(|&d| std::iter::repeat_n(d / denom, plane)).collect();
                    acc(&mut grads, *input, dx);
                }
                Op::Dense { input, weight, bias } => {
                    let ws = nodes[weight.0].value.shape();
                    let (fan_in, fan_out) = (ws[0], ws[1]);
                    let n = g.len() / fan_out;
                    if nodes[input.0].requires_grad {
                        let mut dx = vec![F::zero(); n * fan_in];
                        F::gemm(n, fan_out, fan_in, &g, false, val(*weight), true, &mut dx, false);
                        acc(&mut grads, *input, dx);
                    }
                    if nodes[weight.0].requires_grad {
                        let mut dw = vec![F::zero(); fan_in * fan_out];
                        F::gemm(fan_in, n, fan_out, val(*input), true, &g, false, &mut dw, false);
                        acc(&mut grads, *weight, dw);
                    }
                    let mut db = vec![F::zero(); fan_out];
                    for row in g.chunks(fan_out) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    acc(&mut grads, *bias, db);
                }
                Op::Sigmoid { input } => {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&y, &d)| d * y * (F::one() - y))
                        .collect();
                    acc(&mut grads, *input, dx);
                }
                Op::Dropout { input, mask } => {
                    let dx = g.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                    acc(&mut grads, *input, dx);
                }
                Op::Sum { input } => {
                    let n = nodes[input.0].value.numel();
                    acc(&mut grads, *input, vec![g[0]; n]);
                }
                Op::Mean { input } => {
                    let n = nodes[input.0].value.numel();
                    acc(&mut grads, *input, vec![g[0] / F::lit(n as f64); n]);
                }
                Op::BceWithLogits { logits, targets } => {
                    let scale = g[0] / F::lit(targets.len() as f64);
                    let dz = val(*logits)
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| scale * (sigmoid(z) - y))
                        .collect();
                    acc(&mut grads, *logits, dz);
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Gradients of trainable leaves, indexed by the [`Var`] they were placed
/// on the tape with.
pub struct Gradients<F = f32> {
    leaves: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.leaves.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.leaves.get_mut(var.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_pointwise_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0).unwrap());
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_shape_stride_two_same() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::zeros([1, 3, 224, 224]).unwrap());
        let k = tape.constant(Tensor::zeros([32, 3, 3, 3]).unwrap());
        let y = tape.conv2d(x, k, 2, Padding::Same).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 32, 112, 112]);
    }

    #[test]
    fn conv_hand_dot_product() {
        // Σ 1..=9 under an all-ones 3x3 kernel.
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([1, 1, 3, 3], |i| (i + 1) as f32).unwrap());
        let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0).unwrap());
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), [45.0]);
    }

    #[test]
    fn conv_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]).unwrap());
        let k = tape.constant(Tensor::zeros([1, 3, 3, 3]).unwrap());
        assert!(matches!(tape.conv2d(x, k, 1, Padding::Same), Err(TensorError::Shape { .. })));
        let k = tape.constant(Tensor::zeros([1, 2, 3, 3]).unwrap());
        assert!(matches!(
            tape.conv2d(x, k, 0, Padding::Same),
            Err(TensorError::NonPositiveStride { .. })
        ));
    }

    #[test]
    fn separable_identity_and_shape() {
        let mut tape = Tape::<f32>::new();
        let input = Tensor::from_fn([1, 1, 4, 4], |i| i as f32).unwrap();
        let x = tape.constant(input.clone());
        let dw = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let pw = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.separable_conv2d(x, dw, pw, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y), &input);

        let x = tape.constant(Tensor::zeros([1, 4, 8, 8]).unwrap());
        let dw = tape.constant(Tensor::zeros([4, 1, 3, 3]).unwrap());
        let pw = tape.constant(Tensor::zeros([16, 4, 1, 1]).unwrap());
        let y = tape.separable_conv2d(x, dw, pw, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 16, 8, 8]);

        let bad = tape.constant(Tensor::zeros([16, 3, 1, 1]).unwrap());
        assert!(tape.separable_conv2d(x, dw, bad, 1, Padding::Same).is_err());
    }

    #[test]
    fn batchnorm_constant_input_goes_to_beta() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([2, 3, 2, 2], 7.0).unwrap());
        let g = tape.param(Tensor::full([3], 1.0).unwrap());
        let b = tape.param(Tensor::zeros([3]).unwrap());
        let mut stats = RunningStats::new(3);
        let y = tape
            .batch_norm(x, g, b, &mut stats, BatchNormMode::Train { momentum: 0.9 }, 1e-3)
            .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        // running mean moved toward 7
        assert!((stats.mean[0] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_affine_shift() {
        // zero-mean unit-variance per channel
        let data = [1.0, -1.0, 1.0, -1.0, 2.0, -2.0, 0.0, 0.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([4, 2], data.iter().map(|&v| v as f64).collect()).unwrap());
        let g = tape.param(Tensor::full([2], 1.0).unwrap());
        let b = tape.param(Tensor::full([2], 5.0).unwrap());
        let mut stats = RunningStats::new(2);
        let y = tape
            .batch_norm(x, g, b, &mut stats, BatchNormMode::Train { momentum: 0.0 }, 0.0)
            .unwrap();
        let out = tape.value(y).data();
        for ch in 0..2 {
            let mean: f64 = (0..4).map(|n| out[n * 2 + ch]).sum::<f64>() / 4.0;
            assert!((mean - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_param_mismatch_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2]).unwrap());
        let g = tape.param(Tensor::full([3], 1.0).unwrap());
        let b = tape.param(Tensor::zeros([3]).unwrap());
        let mut stats = RunningStats::new(3);
        assert!(tape
            .batch_norm(x, g, b, &mut stats, BatchNormMode::Eval, 1e-3)
            .is_err());
    }

    #[test]
    fn pooling_sigmoid_dropout_basics() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 5, 7, 7], 1.0).unwrap());
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).shape(), [1, 5]);
        assert!(tape.value(p).data().iter().all(|&v| (v - 1.0).abs() < 1e-7));

        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), [0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = tape.dropout(x, 0.2, false, &mut rng).unwrap();
        assert_eq!(tape.value(d), tape.value(x));
        assert_eq!(tape.dropout(x, 1.0, true, &mut rng), Err(TensorError::DropoutRate(1.0)));
        let d = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn max_pool_same_halves() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([1, 1, 4, 4], |i| i as f32).unwrap());
        let y = tape.max_pool(x, 3, 2, Padding::Same).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), [10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn backward_linear_and_square() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::from_fn([2, 3], |i| i as f32).unwrap());
        let s = tape.sum(w).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(w).unwrap().data().iter().all(|&g| g == 1.0));

        let mut tape = Tape::<f32>::new();
        let w = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), [2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(w, w).unwrap();
        assert!(matches!(tape.backward(sq), Err(TensorError::NonScalarLoss(_))));

        let mut tape = Tape::<f32>::new();
        let c = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(c).unwrap();
        assert_eq!(tape.backward(s).err(), Some(TensorError::Detached));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(t(&[1], &[f32::MAX]));
        assert_eq!(tape.add(a, a), Err(TensorError::NonFinite { op: "add" }));
    }

    #[test]
    fn inference_tape_is_detached() {
        let mut tape = Tape::<f32>::inference();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(w).unwrap();
        assert_eq!(tape.backward(s).err(), Some(TensorError::Detached));
    }
}
