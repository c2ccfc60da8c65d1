//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is a flat arena of nodes built during one forward pass and
//! consumed by one backward pass. Parameters and inputs enter as leaves;
//! every op records what it needs for its gradient. The tape is rebuilt for
//! every training step, which keeps the engine small and the ownership story
//! trivial: one execution context owns the whole graph.

use crate::error::{Error, Result};
use crate::tensor::{self, maxpool2d_with_argmax, Padding, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

enum Op {
    Leaf,
    Permute {
        x: NodeId,
        inverse: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    SoftmaxRows {
        x: NodeId,
    },
    Conv2d {
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        pad: Padding,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    UpsampleNearest {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    ConcatChannels {
        xs: Vec<NodeId>,
    },
    /// Per-channel normalization; `mean`/`var` are the statistics actually
    /// used in the forward pass (batch stats in train mode, running stats in
    /// eval mode). `batch_stats` decides which backward formula applies.
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
        batch_stats: bool,
    },
    /// `mask` entries are 0.0 (dropped) or 1/(1-rate) (kept, inverted
    /// dropout scaling).
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Sum {
        x: NodeId,
    },
    BceWithLogits {
        logits: NodeId,
        target: Tensor,
    },
    DiceLoss {
        probs: NodeId,
        target: Tensor,
        smooth: f64,
    },
}

/// Per-channel mean/variance pair, used by batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn fresh(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Statistics source for a batch-norm node.
pub enum BnMode<'a> {
    /// Normalize with statistics computed from the input itself.
    Batch,
    /// Normalize with previously accumulated running statistics.
    Running(&'a BnStats),
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a graph leaf. Only leaves with `requires_grad` set
    /// accumulate gradients during [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Insert a tensor as a constant: gradient never flows into it. This is
    /// how the shrinkage gates are made straight-through.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root with respect to this node, if it
    /// was computed.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor> {
        self.nodes[id.0]
            .grad
            .as_ref()
            .map(|g| Tensor::from_raw(self.nodes[id.0].value.shape().to_vec(), g.clone()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &str, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::non_finite(op_name));
        }
        Ok(self.push(value, op, requires_grad))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── ops ──────────────────────────────────────────────────────────

    pub fn permute(&mut self, x: NodeId, order: &[usize]) -> Result<NodeId> {
        let value = tensor::permute(self.value(x), order)?;
        let inverse = tensor::inverse_permutation(order);
        let rg = self.needs(x);
        self.push_checked("permute", value, Op::Permute { x, inverse }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.needs(x);
        self.push_checked("reshape", value, Op::Reshape { x }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push_checked("matmul", value, Op::Matmul { a, b }, rg)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::softmax_rows(self.value(x))?;
        let rg = self.needs(x);
        self.push_checked("softmax_rows", value, Op::SoftmaxRows { x }, rg)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.conv2d_padded(x, kernels, bias, stride, Padding::uniform(padding))
    }

    pub fn conv2d_padded(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        pad: Padding,
    ) -> Result<NodeId> {
        let value = tensor::conv2d_padded(self.value(x), self.value(kernels), self.value(bias), stride, pad)?;
        let rg = self.needs(x) || self.needs(kernels) || self.needs(bias);
        self.push_checked(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                kernels,
                bias,
                stride,
                pad,
            },
            rg,
        )
    }

    pub fn maxpool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let (value, argmax) = maxpool2d_with_argmax(self.value(x))?;
        let rg = self.needs(x);
        self.push_checked("maxpool2d", value, Op::MaxPool2d { x, argmax }, rg)
    }

    pub fn upsample_nearest(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::upsample_nearest(self.value(x))?;
        let rg = self.needs(x);
        self.push_checked("upsample_nearest", value, Op::UpsampleNearest { x }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let input = self.value(x);
        let data: Vec<f64> = input.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_raw(input.shape().to_vec(), data);
        let rg = self.needs(x);
        self.push_checked("relu", value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let input = self.value(x);
        // clamp to the open interval's nearest representable values so
        // outputs stay strictly inside (0,1) even for saturating logits
        let data: Vec<f64> = input
            .data()
            .iter()
            .map(|&v| stable_sigmoid(v).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
            .collect();
        let value = Tensor::from_raw(input.shape().to_vec(), data);
        let rg = self.needs(x);
        self.push_checked("sigmoid", value, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::add(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push_checked("add", value, Op::Add { a, b }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push_checked("mul", value, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let value = tensor::scale(self.value(x), factor)?;
        let rg = self.needs(x);
        self.push_checked("scale", value, Op::Scale { x, factor }, rg)
    }

    /// Concatenate [C_i,H,W] tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_channels needs at least one input"));
        }
        let first = self.value(xs[0]);
        if first.rank() != 3 {
            return Err(Error::invalid(format!(
                "concat_channels expects [C,H,W] tensors, got {:?}",
                first.shape()
            )));
        }
        let (h, w) = (first.shape()[1], first.shape()[2]);
        let mut channels = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::invalid(format!(
                    "concat_channels spatial mismatch: {:?} vs {h}x{w}",
                    s
                )));
            }
            channels += s[0];
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let value = Tensor::from_raw(vec![channels, h, w], data);
        let rg = xs.iter().any(|&x| self.needs(x));
        self.push_checked("concat_channels", value, Op::ConcatChannels { xs: xs.to_vec() }, rg)
    }

    /// Per-channel batch normalization of a [C,H,W] tensor with learnable
    /// `gamma`/`beta` of shape [C]. In `BnMode::Batch` the statistics used
    /// are returned so the caller can fold them into running averages.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mode: BnMode<'_>,
    ) -> Result<(NodeId, Option<BnStats>)> {
        let input = self.value(x);
        if input.rank() != 3 {
            return Err(Error::invalid(format!(
                "batch_norm expects a [C,H,W] tensor, got {:?}",
                input.shape()
            )));
        }
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let m = h * w;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::invalid("batch_norm gamma/beta must have shape [C]"));
        }

        let (mean, var, batch_stats) = match mode {
            BnMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let plane = &input.data()[ci * m..(ci + 1) * m];
                    let mu = plane.iter().sum::<f64>() / m as f64;
                    let v = plane.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / m as f64;
                    mean[ci] = mu;
                    var[ci] = v;
                }
                (mean, var, true)
            }
            BnMode::Running(stats) => {
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(Error::invalid(format!(
                        "batch_norm running stats sized for {} channels, input has {c}",
                        stats.mean.len()
                    )));
                }
                (stats.mean.clone(), stats.var.clone(), false)
            }
        };

        let gamma_v = self.value(gamma).data().to_vec();
        let beta_v = self.value(beta).data().to_vec();
        let mut out = vec![0.0; c * m];
        for ci in 0..c {
            let inv_std = 1.0 / (var[ci] + eps).sqrt();
            let (g, b, mu) = (gamma_v[ci], beta_v[ci], mean[ci]);
            let src = &self.value(x).data()[ci * m..(ci + 1) * m];
            for (o, &v) in out[ci * m..(ci + 1) * m].iter_mut().zip(src) {
                *o = g * (v - mu) * inv_std + b;
            }
        }
        let value = Tensor::from_raw(vec![c, h, w], out);
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats_out = batch_stats.then(|| BnStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let id = self.push_checked(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
                batch_stats,
            },
            rg,
        )?;
        Ok((id, stats_out))
    }

    /// Inverted dropout with the given keep-mask source. `rate` in [0,1);
    /// rate 0 is the identity.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut impl rand::Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0,1)")));
        }
        let n = self.value(x).numel();
        if rate == 0.0 {
            let mask = vec![1.0; n];
            return self.dropout_with_mask(x, mask);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with an explicit mask (entries 0 or the inverted-keep scale).
    pub fn dropout_with_mask(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let input = self.value(x);
        if mask.len() != input.numel() {
            return Err(Error::invalid("dropout mask length mismatch"));
        }
        let data: Vec<f64> = input.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_raw(input.shape().to_vec(), data);
        let rg = self.needs(x);
        self.push_checked("dropout", value, Op::Dropout { x, mask }, rg)
    }

    /// Reduce to a scalar by summation.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().sum();
        let value = Tensor::from_raw(vec![1], vec![total]);
        let rg = self.needs(x);
        self.push_checked("sum", value, Op::Sum { x }, rg)
    }

    /// Mean binary cross-entropy computed from logits, numerically stable for
    /// any logit magnitude. `target` values must lie in [0,1].
    pub fn bce_with_logits(&mut self, logits: NodeId, target: &Tensor) -> Result<NodeId> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(Error::invalid(format!(
                "bce target shape {:?} does not match logits {:?}",
                target.shape(),
                z.shape()
            )));
        }
        let n = z.numel() as f64;
        let mut total = 0.0;
        for (&zi, &yi) in z.data().iter().zip(target.data()) {
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            total += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let value = Tensor::from_raw(vec![1], vec![total / n]);
        let rg = self.needs(logits);
        self.push_checked(
            "bce_with_logits",
            value,
            Op::BceWithLogits {
                logits,
                target: target.clone(),
            },
            rg,
        )
    }

    /// Soft Dice loss `1 - (2*sum(p*y) + s) / (sum(p) + sum(y) + s)` on
    /// probabilities.
    pub fn dice_loss(&mut self, probs: NodeId, target: &Tensor, smooth: f64) -> Result<NodeId> {
        let p = self.value(probs);
        if p.shape() != target.shape() {
            return Err(Error::invalid(format!(
                "dice target shape {:?} does not match probs {:?}",
                target.shape(),
                p.shape()
            )));
        }
        let inter: f64 = p.data().iter().zip(target.data()).map(|(&a, &b)| a * b).sum();
        let psum: f64 = p.data().iter().sum();
        let ysum: f64 = target.data().iter().sum();
        let loss = 1.0 - (2.0 * inter + smooth) / (psum + ysum + smooth);
        let value = Tensor::from_raw(vec![1], vec![loss]);
        let rg = self.needs(probs);
        self.push_checked(
            "dice_loss",
            value,
            Op::DiceLoss {
                probs,
                target: target.clone(),
                smooth,
            },
            rg,
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulate gradients of the scalar at `root` into every node that
    /// requires them. One backward pass per tape.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::invalid(
                "backward root does not depend on any gradient-tracked leaf",
            ));
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.clone().expect("just checked");
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::non_finite(format!("backward of {}", self.op_name(i))));
            }
            self.propagate(i, &grad);
        }
        Ok(())
    }

    fn op_name(&self, i: usize) -> &'static str {
        match self.nodes[i].op {
            Op::Leaf => "leaf",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Matmul { .. } => "matmul",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::Sum { .. } => "sum",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::DiceLoss { .. } => "dice_loss",
        }
    }

    fn accumulate(&mut self, target: NodeId, contribution: &[f64]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let n = self.nodes[target.0].value.numel();
        debug_assert_eq!(contribution.len(), n);
        let grad = self.nodes[target.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, &c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    fn propagate(&mut self, i: usize, grad: &[f64]) {
        // Split borrows: the op description is cloned where cheap, and value
        // reads go through immutable indexing before any accumulate call.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Permute { x, inverse } => {
                let (x, inverse) = (*x, inverse.clone());
                let out_shape = self.nodes[i].value.shape().to_vec();
                let g = Tensor::from_raw(out_shape, grad.to_vec());
                let back = tensor::permute(&g, &inverse).expect("inverse permutation is valid");
                self.accumulate(x, back.data());
            }
            Op::Reshape { x } => {
                let x = *x;
                self.accumulate(x, grad);
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (n, d) = {
                    let s = self.value(a).shape();
                    (s[0], s[1])
                };
                let m = self.value(b).shape()[1];
                if self.needs(a) {
                    // dA[i,k] = sum_j grad[i,j] * B[k,j]
                    let bdata = self.value(b).data();
                    let mut da = vec![0.0; n * d];
                    for r in 0..n {
                        let grow = &grad[r * m..(r + 1) * m];
                        for k in 0..d {
                            let brow = &bdata[k * m..(k + 1) * m];
                            da[r * d + k] = grow.iter().zip(brow).map(|(&g, &bv)| g * bv).sum();
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    // dB[k,j] = sum_i A[i,k] * grad[i,j]
                    let adata = self.value(a).data();
                    let mut db = vec![0.0; d * m];
                    for r in 0..n {
                        let grow = &grad[r * m..(r + 1) * m];
                        for k in 0..d {
                            let aik = adata[r * d + k];
                            if aik == 0.0 {
                                continue;
                            }
                            let drow = &mut db[k * m..(k + 1) * m];
                            for (dv, &g) in drow.iter_mut().zip(grow) {
                                *dv += aik * g;
                            }
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                let y = self.nodes[i].value.clone();
                let (n, m) = (y.shape()[0], y.shape()[1]);
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    let yrow = &y.data()[r * m..(r + 1) * m];
                    let grow = &grad[r * m..(r + 1) * m];
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &g)| yv * g).sum();
                    for c in 0..m {
                        dx[r * m + c] = yrow[c] * (grow[c] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Conv2d {
                x,
                kernels,
                bias,
                stride,
                pad,
            } => {
                let (x, kernels, bias, stride, pad) = (*x, *kernels, *bias, *stride, *pad);
                self.conv2d_backward(i, grad, x, kernels, bias, stride, pad);
            }
            Op::MaxPool2d { x, argmax } => {
                let (x, argmax) = (*x, argmax.clone());
                let n = self.value(x).numel();
                let mut dx = vec![0.0; n];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += grad[o];
                }
                self.accumulate(x, &dx);
            }
            Op::UpsampleNearest { x } => {
                let x = *x;
                let s = self.value(x).shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let base = ci * oh * ow + (2 * y) * ow + 2 * xx;
                            dx[(ci * h + y) * w + xx] =
                                grad[base] + grad[base + 1] + grad[base + ow] + grad[base + ow + 1];
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Relu { x } => {
                let x = *x;
                let dx: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let dx: Vec<f64> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad);
                self.accumulate(b, grad);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da: Vec<f64> = self.value(b).data().iter().zip(grad).map(|(&bv, &g)| bv * g).collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = self.value(a).data().iter().zip(grad).map(|(&av, &g)| av * g).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                let dx: Vec<f64> = grad.iter().map(|&g| g * factor).collect();
                self.accumulate(x, &dx);
            }
            Op::ConcatChannels { xs } => {
                let xs = xs.clone();
                let mut offset = 0;
                for x in xs {
                    let n = self.value(x).numel();
                    let slice = grad[offset..offset + n].to_vec();
                    self.accumulate(x, &slice);
                    offset += n;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
                batch_stats,
            } => {
                let (x, gamma, beta, eps, batch_stats) = (*x, *gamma, *beta, *eps, *batch_stats);
                let (mean, var) = (mean.clone(), var.clone());
                let s = self.value(x).shape().to_vec();
                let (c, m) = (s[0], s[1] * s[2]);
                let xdata = self.value(x).data().to_vec();
                let gdata = self.value(gamma).data().to_vec();

                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; c * m];
                for ci in 0..c {
                    let inv_std = 1.0 / (var[ci] + eps).sqrt();
                    let xs = &xdata[ci * m..(ci + 1) * m];
                    let gs = &grad[ci * m..(ci + 1) * m];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (&xv, &g) in xs.iter().zip(gs) {
                        let xhat = (xv - mean[ci]) * inv_std;
                        sum_g += g;
                        sum_gx += g * xhat;
                    }
                    dbeta[ci] = sum_g;
                    dgamma[ci] = sum_gx;
                    let dxs = &mut dx[ci * m..(ci + 1) * m];
                    if batch_stats {
                        let mf = m as f64;
                        for ((dxv, &xv), &g) in dxs.iter_mut().zip(xs).zip(gs) {
                            let xhat = (xv - mean[ci]) * inv_std;
                            *dxv = gdata[ci] * inv_std * (g - sum_g / mf - xhat * sum_gx / mf);
                        }
                    } else {
                        for (dxv, &g) in dxs.iter_mut().zip(gs) {
                            *dxv = gdata[ci] * inv_std * g;
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let dx: Vec<f64> = mask.iter().zip(grad).map(|(&m, &g)| m * g).collect();
                self.accumulate(x, &dx);
            }
            Op::Sum { x } => {
                let x = *x;
                let n = self.value(x).numel();
                let dx = vec![grad[0]; n];
                self.accumulate(x, &dx);
            }
            Op::BceWithLogits { logits, target } => {
                let logits = *logits;
                let target = target.clone();
                let n = self.value(logits).numel() as f64;
                let dz: Vec<f64> = self
                    .value(logits)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &y)| grad[0] * (stable_sigmoid(z) - y) / n)
                    .collect();
                self.accumulate(logits, &dz);
            }
            Op::DiceLoss {
                probs,
                target,
                smooth,
            } => {
                let (probs, smooth) = (*probs, *smooth);
                let target = target.clone();
                let p = self.value(probs).data();
                let inter: f64 = p.iter().zip(target.data()).map(|(&a, &b)| a * b).sum();
                let psum: f64 = p.iter().sum();
                let ysum: f64 = target.data().iter().sum();
                let num = 2.0 * inter + smooth;
                let den = psum + ysum + smooth;
                let dp: Vec<f64> = target
                    .data()
                    .iter()
                    .map(|&y| grad[0] * -((2.0 * y * den - num) / (den * den)))
                    .collect();
                self.accumulate(probs, &dp);
            }
        }
    }

    fn conv2d_backward(
        &mut self,
        node: usize,
        grad: &[f64],
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        pad: Padding,
    ) {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernels).shape().to_vec();
        let os = self.nodes[node].value.shape().to_vec();
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        let (oh, ow) = (os[1], os[2]);

        if self.needs(bias) {
            let mut db = vec![0.0; c_out];
            for co in 0..c_out {
                db[co] = grad[co * oh * ow..(co + 1) * oh * ow].iter().sum();
            }
            self.accumulate(bias, &db);
        }

        let xdata = self.value(x).data().to_vec();
        if self.needs(kernels) {
            let mut dk = vec![0.0; c_out * c_in * kh * kw];
            for co in 0..c_out {
                let gplane = &grad[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..c_in {
                    let plane = &xdata[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad.top as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                                let g_row = &gplane[oy * ow..(oy + 1) * ow];
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pad.left as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += g_row[ox] * in_row[ix as usize];
                                }
                            }
                            dk[((co * c_in + ci) * kh + ky) * kw + kx] = acc;
                        }
                    }
                }
            }
            self.accumulate(kernels, &dk);
        }

        if self.needs(x) {
            let kdata = self.value(kernels).data().to_vec();
            let mut dx = vec![0.0; c_in * h * w];
            for co in 0..c_out {
                let gplane = &grad[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kval = kdata[((co * c_in + ci) * kh + ky) * kw + kx];
                            if kval == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad.top as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let dx_row =
                                    &mut dx[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                                let g_row = &gplane[oy * ow..(oy + 1) * ow];
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pad.left as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    dx_row[ix as usize] += kval * g_row[ox];
                                }
                            }
                        }
                    }
                }
            }
            self.accumulate(x, &dx);
        }
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Compare the analytic gradient of `f` at `x` with central finite
/// differences, returning the maximum relative error over all elements of
/// `x`. `f` builds a scalar-valued graph from the leaf it is given; it must
/// be deterministic.
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::invalid(format!(
            "grad_check eps {eps} outside [1e-7, 1e-4]"
        )));
    }

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::invalid("grad_check target must be scalar-valued"));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .ok_or_else(|| Error::invalid("no gradient reached the checked tensor"))?
        .to_vec();

    let eval = |f: &mut F, point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point.clone(), true);
        let out = f(&mut tape, leaf)?;
        Ok(tape.value(out).data()[0])
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&mut f, &plus)? - eval(&mut f, &minus)?) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_raw(shape.to_vec(), data)
    }

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let err = grad_check(|t, x| t.sum(x), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "sum grad error {err}");

        let mut tape = Tape::new();
        let leaf = tape.leaf(x, true);
        let s = tape.sum(leaf).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(leaf).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn softmax_weighted_sum_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[3, 4], &mut rng);
        let err = grad_check(
            |t, x| {
                let s = t.softmax_rows(x)?;
                let prod = t.mul(s, x)?;
                t.sum(prod)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax*x grad error {err}");
    }

    #[test]
    fn matmul_grad_wrt_both_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_tensor(&[3, 4], &mut rng);
        let b = random_tensor(&[4, 2], &mut rng);

        let b2 = b.clone();
        let err_a = grad_check(
            move |t, x| {
                let bc = t.constant(b2.clone());
                let m = t.matmul(x, bc)?;
                t.sum(m)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err_a < 1e-6, "matmul dA error {err_a}");

        let a2 = a.clone();
        let err_b = grad_check(
            move |t, x| {
                let ac = t.constant(a2.clone());
                let m = t.matmul(ac, x)?;
                t.sum(m)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err_b < 1e-6, "matmul dB error {err_b}");
    }

    #[test]
    fn conv2d_grad_wrt_input_kernels_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&[2, 5, 5], &mut rng);
        let k = random_tensor(&[3, 2, 3, 3], &mut rng);
        let b = random_tensor(&[3], &mut rng);

        let (kc, bc) = (k.clone(), b.clone());
        let err_x = grad_check(
            move |t, leaf| {
                let kn = t.constant(kc.clone());
                let bn = t.constant(bc.clone());
                let c = t.conv2d(leaf, kn, bn, 1, 1)?;
                t.sum(c)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_x < 1e-6, "conv dX error {err_x}");

        let (xc, bc) = (x.clone(), b.clone());
        let err_k = grad_check(
            move |t, leaf| {
                let xn = t.constant(xc.clone());
                let bn = t.constant(bc.clone());
                let c = t.conv2d(xn, leaf, bn, 1, 1)?;
                t.sum(c)
            },
            &k,
            1e-5,
        )
        .unwrap();
        assert!(err_k < 1e-6, "conv dK error {err_k}");

        let (xc, kc) = (x.clone(), k.clone());
        let err_b = grad_check(
            move |t, leaf| {
                let xn = t.constant(xc.clone());
                let kn = t.constant(kc.clone());
                let c = t.conv2d(xn, kn, leaf, 1, 1)?;
                t.sum(c)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err_b < 1e-6, "conv dB error {err_b}");
    }

    #[test]
    fn conv2d_grad_with_asymmetric_padding_and_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[2, 4, 4], &mut rng);
        let k = random_tensor(&[2, 2, 2, 2], &mut rng);
        let b = random_tensor(&[2], &mut rng);
        let pad = Padding {
            top: 0,
            bottom: 1,
            left: 0,
            right: 1,
        };

        let (kc, bc) = (k.clone(), b.clone());
        let err = grad_check(
            move |t, leaf| {
                let kn = t.constant(kc.clone());
                let bn = t.constant(bc.clone());
                let c = t.conv2d_padded(leaf, kn, bn, 1, pad)?;
                t.sum(c)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "asym conv dX error {err}");

        let (xc, bc) = (x.clone(), b.clone());
        let err_k = grad_check(
            move |t, leaf| {
                let xn = t.constant(xc.clone());
                let bn = t.constant(bc.clone());
                let c = t.conv2d_padded(xn, leaf, bn, 1, pad)?;
                t.sum(c)
            },
            &k,
            1e-5,
        )
        .unwrap();
        assert!(err_k < 1e-6, "asym conv dK error {err_k}");
    }

    #[test]
    fn pool_upsample_permute_reshape_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // well-separated values so finite differences do not cross pool ties
        let n = 2 * 4 * 4;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.37).collect();
        // deterministic shuffle
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            vals.swap(i, j);
        }
        let x = Tensor::new(vec![2, 4, 4], vals).unwrap();

        let err_pool = grad_check(
            |t, leaf| {
                let p = t.maxpool2d(leaf)?;
                t.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_pool < 1e-6, "maxpool grad error {err_pool}");

        let err_up = grad_check(
            |t, leaf| {
                let u = t.upsample_nearest(leaf)?;
                // weight the output so the gradient is not trivially uniform
                let w = Tensor::from_raw(
                    vec![2, 8, 8],
                    (0..128).map(|i| (i as f64 * 0.11).sin()).collect(),
                );
                let wn = t.constant(w);
                let m = t.mul(u, wn)?;
                t.sum(m)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_up < 1e-6, "upsample grad error {err_up}");

        let err_perm = grad_check(
            |t, leaf| {
                let p = t.permute(leaf, &[2, 0, 1])?;
                let r = t.reshape(p, &[4, 8])?;
                let s = t.softmax_rows(r)?;
                let m = t.mul(s, r)?;
                t.sum(m)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_perm < 1e-6, "permute/reshape grad error {err_perm}");
    }

    #[test]
    fn pointwise_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // keep relu inputs away from the kink at zero
        let data: Vec<f64> = (0..24)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::new(vec![2, 3, 4], data).unwrap();

        let err_relu = grad_check(
            |t, leaf| {
                let r = t.relu(leaf)?;
                let sq = t.mul(r, r)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_relu < 1e-6, "relu grad error {err_relu}");

        let err_sig = grad_check(
            |t, leaf| {
                let s = t.sigmoid(leaf)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_sig < 1e-6, "sigmoid grad error {err_sig}");

        let other = random_tensor(&[2, 3, 4], &mut rng);
        let o2 = other.clone();
        let err_addmul = grad_check(
            move |t, leaf| {
                let c = t.constant(o2.clone());
                let a = t.add(leaf, c)?;
                let m = t.mul(a, leaf)?;
                let s = t.scale(m, 0.7)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_addmul < 1e-6, "add/mul/scale grad error {err_addmul}");
    }

    #[test]
    fn concat_channels_grad_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&[1, 2, 2], &mut rng);
        let b = random_tensor(&[2, 2, 2], &mut rng);

        let mut tape = Tape::new();
        let an = tape.leaf(a.clone(), true);
        let bn = tape.leaf(b.clone(), true);
        let cat = tape.concat_channels(&[an, bn]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[3, 2, 2]);
        assert_eq!(&tape.value(cat).data()[..4], a.data());
        assert_eq!(&tape.value(cat).data()[4..], b.data());

        let b2 = b.clone();
        let err = grad_check(
            move |t, leaf| {
                let bc = t.constant(b2.clone());
                let cat = t.concat_channels(&[leaf, bc])?;
                let sq = t.mul(cat, cat)?;
                t.sum(sq)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "concat grad error {err}");
    }

    #[test]
    fn batch_norm_train_and_eval_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&[2, 3, 3], &mut rng);
        let gamma = Tensor::new(vec![2], vec![1.3, 0.8]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();

        let (g2, b2) = (gamma.clone(), beta.clone());
        let err_x = grad_check(
            move |t, leaf| {
                let g = t.constant(g2.clone());
                let b = t.constant(b2.clone());
                let (y, _) = t.batch_norm(leaf, g, b, 1e-5, BnMode::Batch)?;
                let w = Tensor::from_raw(vec![2, 3, 3], (0..18).map(|i| (i as f64).cos()).collect());
                let wn = t.constant(w);
                let m = t.mul(y, wn)?;
                t.sum(m)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_x < 1e-6, "bn train dX error {err_x}");

        // weight the output: sum(bn(x)) alone has exactly zero gamma
        // gradient because x-hat sums to zero per channel
        let (x2, b2) = (x.clone(), beta.clone());
        let err_gamma = grad_check(
            move |t, leaf| {
                let xn = t.constant(x2.clone());
                let b = t.constant(b2.clone());
                let (y, _) = t.batch_norm(xn, leaf, b, 1e-5, BnMode::Batch)?;
                let w = Tensor::from_raw(vec![2, 3, 3], (0..18).map(|i| (i as f64).sin()).collect());
                let wn = t.constant(w);
                let m = t.mul(y, wn)?;
                t.sum(m)
            },
            &gamma,
            1e-5,
        )
        .unwrap();
        assert!(err_gamma < 1e-6, "bn dGamma error {err_gamma}");

        let stats = BnStats {
            mean: vec![0.2, -0.1],
            var: vec![0.9, 1.4],
        };
        let (g2, b2) = (gamma.clone(), beta.clone());
        let err_eval = grad_check(
            move |t, leaf| {
                let g = t.constant(g2.clone());
                let b = t.constant(b2.clone());
                let (y, _) = t.batch_norm(leaf, g, b, 1e-5, BnMode::Running(&stats))?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_eval < 1e-6, "bn eval dX error {err_eval}");
    }

    #[test]
    fn batch_norm_normalizes_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&[2, 4, 4], &mut rng);
        let gamma = Tensor::ones(&[2]);
        let beta = Tensor::zeros(&[2]);
        let mut tape = Tape::new();
        let xn = tape.leaf(x, false);
        let g = tape.constant(gamma);
        let b = tape.constant(beta);
        let (y, stats) = tape.batch_norm(xn, g, b, 1e-9, BnMode::Batch).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean.len(), 2);
        for c in 0..2 {
            let plane = &tape.value(y).data()[c * 16..(c + 1) * 16];
            let mean: f64 = plane.iter().sum::<f64>() / 16.0;
            let var: f64 = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_identity_at_rate_zero_and_mask_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_tensor(&[2, 3, 3], &mut rng);

        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone(), true);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let y = tape.dropout(xn, 0.0, &mut drop_rng).unwrap();
        assert_eq!(tape.value(y), &x);

        let mask: Vec<f64> = (0..18).map(|i| if i % 3 == 0 { 0.0 } else { 2.0 }).collect();
        let m2 = mask.clone();
        let err = grad_check(
            move |t, leaf| {
                let d = t.dropout_with_mask(leaf, m2.clone())?;
                let sq = t.mul(d, d)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "dropout grad error {err}");
    }

    #[test]
    fn loss_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random_tensor(&[1, 4, 4], &mut rng);
        let target_data: Vec<f64> = (0..16).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        let target = Tensor::new(vec![1, 4, 4], target_data).unwrap();

        let t2 = target.clone();
        let err_bce = grad_check(
            move |t, leaf| t.bce_with_logits(leaf, &t2),
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err_bce < 1e-6, "bce grad error {err_bce}");

        // dice operates on probabilities in (0,1)
        let probs_data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.05..0.95)).collect();
        let probs = Tensor::new(vec![1, 4, 4], probs_data).unwrap();
        let t2 = target.clone();
        let err_dice = grad_check(
            move |t, leaf| t.dice_loss(leaf, &t2, 1.0),
            &probs,
            1e-5,
        )
        .unwrap();
        assert!(err_dice < 1e-6, "dice grad error {err_dice}");
    }

    #[test]
    fn bce_matches_naive_formula_on_moderate_logits() {
        let logits = Tensor::new(vec![4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap();
        let target = Tensor::new(vec![4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(logits.clone(), false);
        let loss = tape.bce_with_logits(z, &target).unwrap();
        let naive: f64 = logits
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| {
                let p = stable_sigmoid(z);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((tape.value(loss).data()[0] - naive).abs() < 1e-12);
    }

    #[test]
    fn straight_through_constant_blocks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(&[2, 2], &mut rng);
        let mut tape = Tape::new();
        let xn = tape.leaf(x, true);
        let gate = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let gated = tape.mul(xn, gate).unwrap();
        let s = tape.sum(gated).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xn).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(tape.grad(gate).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, x| t.sum(x), &x, 1e-2).is_err());
    }

    #[test]
    fn non_finite_forward_is_reported_with_op_name() {
        let mut tape = Tape::new();
        let big = tape.leaf(Tensor::full(&[1, 2], 1e200), false);
        let err = tape.matmul(big, big);
        // 1e200 * 1e200 overflows — but shapes [1,2]x[1,2] mismatch first;
        // use a valid shape pair
        assert!(err.is_err());
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[1, 1], 1e200), false);
        let b = tape.leaf(Tensor::full(&[1, 1], 1e200), false);
        match tape.matmul(a, b) {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
