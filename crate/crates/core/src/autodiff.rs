//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order. Node inputs always
//! precede the node itself, so walking the tape backwards is a valid
//! topological order. All spatial operations use N×C×H×W layout; a single
//! C×H×W feature map is the N = 1 case.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolMode};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

/// Batch-norm behaviour for one call.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running mean and variance.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics observed by a training-mode batch norm: per-channel mean
/// and unbiased variance, ready for a running-average update.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Pool2d {
        input: Var,
        window: usize,
        stride: usize,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    GlobalPool {
        input: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    ChannelPool {
        input: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Add {
        a: Var,
        b: Var,
        maps: Option<(Vec<usize>, Vec<usize>)>,
    },
    Mul {
        a: Var,
        b: Var,
        maps: Option<(Vec<usize>, Vec<usize>)>,
    },
    Softmax {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    OrdinalLoss {
        probs: Var,
        weights: Vec<T>,
    },
    NllLoss {
        probs: Var,
        targets: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Pool2d { .. } => "pool2d",
            Op::GlobalPool { .. } => "global_pool",
            Op::ChannelPool { .. } => "channel_pool",
            Op::Dense { .. } => "dense",
            Op::Activation { .. } => "activation",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat_channels",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::OrdinalLoss { .. } => "ordinal_loss",
            Op::NllLoss { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward pass and, after [`Graph::backward`], its gradients.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Tensor<T>>>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.grads.is_some() {
            return Err(Error::Graph("graph is frozen after backward".into()));
        }
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a value into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the backward root with respect to `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c_in, h, w] = self.value(input).dims4()?;
        let [c_out, kc, kh, kw] = self.value(kernel).dims4()?;
        if kc != c_in {
            return Err(Error::dim(format!(
                "conv2d kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if kh != kw {
            return Err(Error::dim(format!("conv2d kernel must be square, got {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}×{kw} exceeds padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad: padding,
            oh: kernels::conv_out_len(h, kh, stride, padding),
            ow: kernels::conv_out_len(w, kw, stride, padding),
        };
        let out = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let value = Tensor::new(&[n, c_out, geom.oh, geom.ow], out)?;
        let rg = self.needs(&[input, kernel]);
        self.push(value, Op::Conv2d { input, kernel, geom }, rg)
    }

    pub fn bilinear_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        if !matches!(factor, 2 | 4 | 8) {
            return Err(Error::config(format!(
                "upsample factor must be 2, 4 or 8, got {factor}"
            )));
        }
        let [n, c, h, w] = self.value(input).dims4()?;
        let (oh, ow) = (h * factor, w * factor);
        let out = kernels::bilinear_forward(self.value(input).data(), n * c, (h, w), (oh, ow));
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.needs(&[input]);
        self.push(value, Op::Upsample { input, factor }, rg)
    }

    /// Windowed max/avg pooling without padding.
    pub fn pool2d(&mut self, input: Var, mode: PoolMode, window: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if window == 0 || stride == 0 {
            return Err(Error::dim("pool window and stride must be positive"));
        }
        if window > h || window > w {
            return Err(Error::dim(format!(
                "pool window {window} exceeds spatial extent {h}×{w}"
            )));
        }
        let (out, argmax) =
            kernels::pool2d_forward(self.value(input).data(), n * c, (h, w), window, stride, mode);
        let oh = kernels::conv_out_len(h, window, stride, 0);
        let ow = kernels::conv_out_len(w, window, stride, 0);
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.needs(&[input]);
        self.push(
            value,
            Op::Pool2d {
                input,
                window,
                stride,
                mode,
                argmax,
            },
            rg,
        )
    }

    /// Reduces each H×W plane to a single value: N×C×1×1.
    pub fn global_pool(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let plane = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::new();
        for p in 0..n * c {
            let slice = &x[p * plane..(p + 1) * plane];
            match mode {
                PoolMode::Avg => out.push(slice.iter().copied().sum::<T>() / T::of(plane as f64)),
                PoolMode::Max => {
                    let best = crate::tensor::argmax(slice);
                    out.push(slice[best]);
                    argmax.push(p * plane + best);
                }
            }
        }
        let value = Tensor::new(&[n, c, 1, 1], out)?;
        let rg = self.needs(&[input]);
        self.push(value, Op::GlobalPool { input, mode, argmax }, rg)
    }

    /// Reduces the channel axis only: N×1×H×W.
    pub fn channel_pool(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let (out, argmax) =
            kernels::channel_pool_forward(self.value(input).data(), n, c, h * w, mode);
        let value = Tensor::new(&[n, 1, h, w], out)?;
        let rg = self.needs(&[input]);
        self.push(value, Op::ChannelPool { input, mode, argmax }, rg)
    }

    /// Affine map of N×D rows: `x Wᵀ + b` with W of shape D_out×D.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        let (&[n, d], &[d_out, wd]) = (xs, ws) else {
            return Err(Error::dim(format!(
                "dense expects N×D input and D_out×D weight, got {xs:?} and {ws:?}"
            )));
        };
        if wd != d {
            return Err(Error::dim(format!(
                "dense weight inner dimension {wd} does not match input length {d}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [d_out] {
                return Err(Error::dim(format!(
                    "dense bias shape {:?} does not match output width {d_out}",
                    self.value(b).shape()
                )));
            }
        }
        let mut out = match bias {
            Some(b) => {
                let bv = self.value(b).data();
                (0..n).flat_map(|_| bv.iter().copied()).collect()
            }
            None => vec![T::zero(); n * d_out],
        };
        T::gemm(
            n,
            d,
            d_out,
            T::one(),
            self.value(input).data(),
            (d as isize, 1),
            self.value(weight).data(),
            (1, d as isize),
            T::one(),
            &mut out,
            (d_out as isize, 1),
        );
        let value = Tensor::new(&[n, d_out], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        self.push(value, Op::Dense { input, weight, bias }, rg)
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let value = match kind {
            Activation::Sigmoid => self.value(input).map(sigmoid),
            Activation::Relu => self.value(input).map(|v| v.max(T::zero())),
        };
        let rg = self.needs(&[input]);
        self.push(value, Op::Activation { input, kind }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    fn broadcast_pair(&self, a: Var, b: Var) -> Result<(Vec<usize>, Option<(Vec<usize>, Vec<usize>)>)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok((sa.to_vec(), None));
        }
        let out = kernels::broadcast_shape(sa, sb).ok_or_else(|| {
            Error::dim(format!("shapes {sa:?} and {sb:?} do not broadcast"))
        })?;
        let maps = (
            kernels::broadcast_index_map(sa, &out),
            kernels::broadcast_index_map(sb, &out),
        );
        Ok((out, Some(maps)))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, mul: bool) -> Result<Var> {
        let (shape, maps) = self.broadcast_pair(a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = match &maps {
            None => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Some((ma, mb)) => ma.iter().zip(mb).map(|(&i, &j)| f(da[i], db[j])).collect(),
        };
        let value = Tensor::new(&shape, out)?;
        let rg = self.needs(&[a, b]);
        let op = if mul {
            Op::Mul { a, b, maps }
        } else {
            Op::Add { a, b, maps }
        };
        self.push(value, op, rg)
    }

    /// Elementwise sum with size-1 axes broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, false)
    }

    /// Elementwise product with size-1 axes broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, true)
    }

    /// Row-wise softmax over the last axis of an N×n tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let &[n, k] = self.value(input).shape() else {
            return Err(Error::dim(format!(
                "softmax expects N×n logits, got {:?}",
                self.value(input).shape()
            )));
        };
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * k);
        for row in x.chunks(k) {
            out.extend(softmax_row(row));
        }
        let value = Tensor::new(&[n, k], out)?;
        let rg = self.needs(&[input]);
        self.push(value, Op::Softmax { input }, rg)
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("concat_channels needs at least one input"))?;
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut total = 0;
        for &v in inputs {
            let [vn, vc, vh, vw] = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::dim(format!(
                    "concat_channels spatial mismatch: {:?} vs {:?}",
                    self.value(v).shape(),
                    self.value(first).shape()
                )));
            }
            total += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &v in inputs {
                let c = self.value(v).shape()[1];
                out.extend_from_slice(&self.value(v).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], out)?;
        let rg = self.needs(inputs);
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    /// Per-channel normalization followed by scale `gamma` and shift `beta`.
    ///
    /// In training mode the returned moments hold the batch mean and the
    /// unbiased batch variance for the caller's running-average update.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::dim(format!(
                "batchnorm expects {c} channels, scale/shift have {:?}/{:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let plane = h * w;
        let eps = T::of(BN_EPS);
        let (mean, var, moments) = match mode {
            NormMode::Train => {
                let (mean, var) = kernels::channel_moments(self.value(input).data(), n, c, plane);
                let m = (n * plane) as f64;
                let correction = if m > 1.0 { T::of(m / (m - 1.0)) } else { T::one() };
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * correction).collect(),
                };
                (mean, var, Some(moments))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(format!(
                        "batchnorm running stats have {} channels, input has {c}",
                        mean.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for &v in &x[off..off + plane] {
                    let xh = (v - mean[ch]) * inv_std[ch];
                    xhat.push(xh);
                    out.push(g[ch] * xh + bt[ch]);
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.needs(&[input, gamma, beta]);
        let train = moments.is_some();
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        )?;
        Ok((var_out, moments))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(&[input]);
        self.push(value, Op::Reshape { input }, rg)
    }

    /// Sum of all entries as a 1-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(&[input]);
        self.push(value, Op::Sum { input }, rg)
    }

    /// Batch-mean penalty-weighted ordinal loss over N×n probability rows.
    ///
    /// `penalty` is n×n row-major with rows indexed by predicted grade and
    /// columns by true grade.
    pub fn ordinal_loss(&mut self, probs: Var, targets: &[usize], penalty: &[T]) -> Result<Var> {
        let (n, k) = self.check_loss_inputs(probs, targets)?;
        if penalty.len() != k * k {
            return Err(Error::dim(format!(
                "penalty matrix has {} entries, expected {}",
                penalty.len(),
                k * k
            )));
        }
        let p = self.value(probs).data();
        let scale = T::one() / T::of(n as f64);
        // d loss / d p[u] for each row: c_uv, negated on the true grade.
        let mut weights = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (row, &v) in p.chunks(k).zip(targets) {
            for (u, &pu) in row.iter().enumerate() {
                let c = penalty[u * k + v];
                if u == v {
                    total = total + c * (T::one() - pu);
                    weights.push(-c * scale);
                } else {
                    total = total + c * pu;
                    weights.push(c * scale);
                }
            }
        }
        let value = Tensor::scalar(total * scale);
        let rg = self.needs(&[probs]);
        self.push(value, Op::OrdinalLoss { probs, weights }, rg)
    }

    /// Batch-mean negative log-likelihood of the true grade, log clamped at 1e-12.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.check_loss_inputs(probs, targets)?;
        let p = self.value(probs).data();
        let floor = T::of(1e-12);
        let total: T = targets
            .iter()
            .enumerate()
            .map(|(i, &v)| -p[i * k + v].max(floor).ln())
            .sum();
        let value = Tensor::scalar(total / T::of(n as f64));
        let rg = self.needs(&[probs]);
        self.push(
            value,
            Op::NllLoss {
                probs,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    fn check_loss_inputs(&self, probs: Var, targets: &[usize]) -> Result<(usize, usize)> {
        let &[n, k] = self.value(probs).shape() else {
            return Err(Error::dim(format!(
                "loss expects N×n probabilities, got {:?}",
                self.value(probs).shape()
            )));
        };
        if targets.len() != n {
            return Err(Error::dim(format!(
                "{} targets for a batch of {n}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&v| v >= k) {
            return Err(Error::input(format!("grade {bad} out of range 0..{}", k - 1)));
        }
        Ok((n, k))
    }

    /// Runs reverse-mode accumulation from the 1-element `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(idx, &dy)?;
            grads[idx] = Some(dy);
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn node_backward(&self, idx: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        let dyd = dy.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    dyd,
                    geom,
                    want(*input),
                    want(*kernel),
                );
                if let Some(dx) = dx {
                    out.push((*input, Tensor::new(&shape_of(*input), dx)?));
                }
                if let Some(dk) = dk {
                    out.push((*kernel, Tensor::new(&shape_of(*kernel), dk)?));
                }
            }
            Op::Upsample { input, factor } => {
                let [n, c, h, w] = self.value(*input).dims4()?;
                let dx = kernels::bilinear_backward(dyd, n * c, (h, w), (h * factor, w * factor));
                out.push((*input, Tensor::new(&shape_of(*input), dx)?));
            }
            Op::Pool2d {
                input,
                window,
                stride,
                mode,
                argmax,
            } => {
                let [n, c, h, w] = self.value(*input).dims4()?;
                let dx =
                    kernels::pool2d_backward(dyd, argmax, n * c, (h, w), *window, *stride, *mode);
                out.push((*input, Tensor::new(&shape_of(*input), dx)?));
            }
            Op::GlobalPool {
                input,
                mode,
                argmax,
            } => {
                let [n, c, h, w] = self.value(*input).dims4()?;
                let plane = h * w;
                let mut dx = vec![T::zero(); n * c * plane];
                match mode {
                    PoolMode::Avg => {
                        let area = T::of(plane as f64);
                        for (p, &g) in dyd.iter().enumerate() {
                            dx[p * plane..(p + 1) * plane].fill(g / area);
                        }
                    }
                    PoolMode::Max => {
                        for (&g, &i) in dyd.iter().zip(argmax) {
                            dx[i] = dx[i] + g;
                        }
                    }
                }
                out.push((*input, Tensor::new(&shape_of(*input), dx)?));
            }
            Op::ChannelPool {
                input,
                mode,
                argmax,
            } => {
                let [n, c, h, w] = self.value(*input).dims4()?;
                let dx = kernels::channel_pool_backward(dyd, argmax, n, c, h * w, *mode);
                out.push((*input, Tensor::new(&shape_of(*input), dx)?));
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (n, d) = {
                    let s = self.value(*input).shape();
                    (s[0], s[1])
                };
                let d_out = self.value(*weight).shape()[0];
                if want(*input) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(
                        n,
                        d_out,
                        d,
                        T::one(),
                        dyd,
                        (d_out as isize, 1),
                        self.value(*weight).data(),
                        (d as isize, 1),
                        T::zero(),
                        &mut dx,
                        (d as isize, 1),
                    );
                    out.push((*input, Tensor::new(&[n, d], dx)?));
                }
                if want(*weight) {
                    let mut dw = vec![T::zero(); d_out * d];
                    T::gemm(
                        d_out,
                        n,
                        d,
                        T::one(),
                        dyd,
                        (1, d_out as isize),
                        self.value(*input).data(),
                        (d as isize, 1),
                        T::zero(),
                        &mut dw,
                        (d as isize, 1),
                    );
                    out.push((*weight, Tensor::new(&[d_out, d], dw)?));
                }
                if let Some(b) = bias.filter(|&b| want(b)) {
                    let mut db = vec![T::zero(); d_out];
                    for row in dyd.chunks(d_out) {
                        for (a, &g) in db.iter_mut().zip(row) {
                            *a = *a + g;
                        }
                    }
                    out.push((b, Tensor::new(&[d_out], db)?));
                }
            }
            Op::Activation { input, kind } => {
                let y = node.value.data();
                let x = self.value(*input).data();
                let dx: Vec<T> = match kind {
                    Activation::Sigmoid => y
                        .iter()
                        .zip(dyd)
                        .map(|(&s, &g)| g * s * (T::one() - s))
                        .collect(),
                    Activation::Relu => x
                        .iter()
                        .zip(dyd)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                };
                out.push((*input, Tensor::new(&shape_of(*input), dx)?));
            }
            Op::Add { a, b, maps } => {
                for (var, map) in [(*a, maps.as_ref().map(|m| &m.0)), (*b, maps.as_ref().map(|m| &m.1))] {
                    if !want(var) {
                        continue;
                    }
                    let g = match map {
                        None => dyd.to_vec(),
                        Some(map) => kernels::reduce_to(dyd, map, self.value(var).numel()),
                    };
                    out.push((var, Tensor::new(&shape_of(var), g)?));
                }
            }
            Op::Mul { a, b, maps } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                match maps {
                    None => {
                        if want(*a) {
                            let g = dyd.iter().zip(db).map(|(&g, &y)| g * y).collect();
                            out.push((*a, Tensor::new(&shape_of(*a), g)?));
                        }
                        if want(*b) {
                            let g = dyd.iter().zip(da).map(|(&g, &x)| g * x).collect();
                            out.push((*b, Tensor::new(&shape_of(*b), g)?));
                        }
                    }
                    Some((ma, mb)) => {
                        if want(*a) {
                            let full: Vec<T> =
                                dyd.iter().zip(mb).map(|(&g, &j)| g * db[j]).collect();
                            let g = kernels::reduce_to(&full, ma, da.len());
                            out.push((*a, Tensor::new(&shape_of(*a), g)?));
                        }
                        if want(*b) {
                            let full: Vec<T> =
                                dyd.iter().zip(ma).map(|(&g, &i)| g * da[i]).collect();
                            let g = kernels::reduce_to(&full, mb, db.len());
                            out.push((*b, Tensor::new(&shape_of(*b), g)?));
                        }
                    }
                }
            }
            Op::Softmax { input } => {
                let k = node.value.shape()[1];
                let mut dx = Vec::with_capacity(dyd.len());
                for (s, g) in node.value.data().chunks(k).zip(dyd.chunks(k)) {
                    let dot: T = s.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    dx.extend(s.iter().zip(g).map(|(&si, &gi)| si * (gi - dot)));
                }
                out.push((*input, Tensor::new(&shape_of(*input), dx)?));
            }
            Op::Concat { inputs } => {
                let [n, total, h, w] = node.value.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[1];
                    if want(v) {
                        let mut g = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            g.extend_from_slice(&dyd[start..start + c * plane]);
                        }
                        out.push((v, Tensor::new(&shape_of(v), g)?));
                    }
                    offset += c;
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = self.value(*input).dims4()?;
                let plane = h * w;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] = dgamma[ch] + dyd[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + dyd[i];
                        }
                    }
                }
                if want(*input) {
                    let mut dx = vec![T::zero(); dyd.len()];
                    let m = T::of((n * plane) as f64);
                    for ch in 0..c {
                        let scale = g[ch] * inv_std[ch];
                        for b in 0..n {
                            let off = (b * c + ch) * plane;
                            for i in off..off + plane {
                                dx[i] = if *train {
                                    scale * (dyd[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                } else {
                                    scale * dyd[i]
                                };
                            }
                        }
                    }
                    out.push((*input, Tensor::new(&shape_of(*input), dx)?));
                }
                if want(*gamma) {
                    out.push((*gamma, Tensor::new(&[c], dgamma)?));
                }
                if want(*beta) {
                    out.push((*beta, Tensor::new(&[c], dbeta)?));
                }
            }
            Op::Reshape { input } => {
                out.push((*input, dy.clone().reshape(&shape_of(*input))?));
            }
            Op::Sum { input } => {
                out.push((*input, Tensor::full(&shape_of(*input), dyd[0])));
            }
            Op::OrdinalLoss { probs, weights } => {
                let g = weights.iter().map(|&w| w * dyd[0]).collect();
                out.push((*probs, Tensor::new(&shape_of(*probs), g)?));
            }
            Op::NllLoss { probs, targets } => {
                let p = self.value(*probs).data();
                let k = self.value(*probs).shape()[1];
                let n = targets.len();
                let floor = T::of(1e-12);
                let mut g = vec![T::zero(); p.len()];
                for (i, &v) in targets.iter().enumerate() {
                    let pv = p[i * k + v];
                    if pv > floor {
                        g[i * k + v] = -dyd[0] / (pv * T::of(n as f64));
                    }
                }
                out.push((*probs, Tensor::new(&shape_of(*probs), g)?));
            }
        }
        Ok(out)
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Numerically stable softmax of one row.
pub fn softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
