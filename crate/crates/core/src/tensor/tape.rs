use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{BatchNormState, Mode, ParamId, ParamStore, Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d {
        x: Var,
        kernels: Var,
        bias: Var,
        cols: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
    },
    Dense {
        x: Var,
        weights: Var,
        bias: Var,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Relu {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    WeightedSqError {
        pred: Var,
        target: Vec<T>,
        channel_weights: Vec<T>,
        scale: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed differentiable operations.
///
/// Values are computed eagerly; the tape only remembers how each one was
/// produced. `backward` consumes the record, so every training step builds a
/// fresh graph.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

/// Gradients of the loss with respect to every node that influenced it.
pub struct Gradients<T = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn check_rank<T: Real>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::Shape(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, delta: &[T]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(delta.to_vec()),
    }
}

fn accumulate_owned<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(delta),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Hash of every non-differentiable branch taken so far: ReLU input
    /// signs and max-pool winners. Two evaluations with equal signatures lie
    /// on the same smooth piece of the network.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { x } => {
                    i.hash(&mut h);
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        value.ensure_finite("operation output")?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf; its gradient lands in the store on backward.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// 3×3 convolution with zero padding of one pixel, stride one.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (xt, kt, bt) = (self.value(x), self.value(kernels), self.value(bias));
        check_rank(xt, 4, "conv2d input")?;
        check_rank(kt, 4, "conv2d kernels")?;
        let &[n, c_in, h, w] = xt.shape() else { unreachable!() };
        let &[c_out, k_in, kh, kw] = kt.shape() else { unreachable!() };
        if kh != 3 || kw != 3 {
            return Err(Error::Shape(format!("conv2d kernels must be 3x3, got {kh}x{kw}")));
        }
        if k_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d input has {c_in} channels but kernels expect {k_in}"
            )));
        }
        if bt.shape() != [c_out] {
            return Err(Error::Shape(format!(
                "conv2d bias shape {:?} does not match {c_out} output channels",
                bt.shape()
            )));
        }
        let g = ConvGeom { n, c_in, c_out, h, w };
        let (y, cols) = kernels::conv2d_forward(xt.data(), kt.data(), bt.data(), &g);
        let out = Tensor::from_parts_unchecked(vec![n, c_out, h, w], y);
        self.push(
            out,
            Op::Conv2d {
                x,
                kernels,
                bias,
                cols,
            },
        )
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        check_rank(xt, 4, "maxpool2d input")?;
        let &[n, c, h, w] = xt.shape() else { unreachable!() };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("maxpool2d needs even height and width, got {h}x{w}")));
        }
        let (y, argmax) = kernels::maxpool_forward(xt.data(), n * c, h, w);
        let out = Tensor::from_parts_unchecked(vec![n, c, h / 2, w / 2], y);
        self.push(out, Op::MaxPool { x, argmax })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2d(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        check_rank(xt, 4, "upsample2d input")?;
        let &[n, c, h, w] = xt.shape() else { unreachable!() };
        let y = kernels::upsample_forward(xt.data(), n * c, h, w);
        let out = Tensor::from_parts_unchecked(vec![n, c, 2 * h, 2 * w], y);
        self.push(out, Op::Upsample { x })
    }

    /// Affine map `[N, F] → [N, M]` with weights `[M, F]`.
    pub fn dense(&mut self, x: Var, weights: Var, bias: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(weights), self.value(bias));
        check_rank(xt, 2, "dense input")?;
        check_rank(wt, 2, "dense weights")?;
        let &[n, f] = xt.shape() else { unreachable!() };
        let &[m, wf] = wt.shape() else { unreachable!() };
        if wf != f {
            return Err(Error::Shape(format!(
                "dense input has {f} features but weights expect {wf}"
            )));
        }
        if bt.shape() != [m] {
            return Err(Error::Shape(format!(
                "dense bias shape {:?} does not match {m} outputs",
                bt.shape()
            )));
        }
        let mut y = Vec::with_capacity(n * m);
        for _ in 0..n {
            y.extend_from_slice(bt.data());
        }
        kernels::gemm(
            n,
            f,
            m,
            xt.data(),
            f as isize,
            1,
            wt.data(),
            1,
            f as isize,
            T::one(),
            &mut y,
            m as isize,
            1,
        );
        let out = Tensor::from_parts_unchecked(vec![n, m], y);
        self.push(out, Op::Dense { x, weights, bias })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let y = xt.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::from_parts_unchecked(xt.shape().to_vec(), y);
        self.push(out, Op::Relu { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape { x })
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` in train
    /// mode; infer mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        let xt = self.value(x);
        let survivor_scale = T::from_f64(1.0 / (1.0 - rate as f64));
        let mask: Vec<T> = if mode == Mode::Infer || rate == 0.0 {
            vec![T::one(); xt.numel()]
        } else {
            (0..xt.numel())
                .map(|_| if rng.gen::<f32>() < rate { T::zero() } else { survivor_scale })
                .collect()
        };
        let y = xt.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_parts_unchecked(xt.shape().to_vec(), y);
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => self.batchnorm_train(x, scale, shift, state),
            Mode::Infer => self.batchnorm_infer(x, scale, shift, state),
        }
    }

    /// Normalizes with batch statistics and folds them into `state`.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        state: &mut BatchNormState,
    ) -> Result<Var> {
        let (n, c, s) = self.bn_geometry(x, scale, shift, state)?;
        let xt = self.value(x);
        let count = (n * s) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for b in 0..n {
                sum += xt.data()[(b * c + ch) * s..][..s].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mu = sum / count;
            let mut sq = 0.0f64;
            for b in 0..n {
                sq += xt.data()[(b * c + ch) * s..][..s]
                    .iter()
                    .map(|v| (v.as_f64() - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = sq / count;
        }
        let eps = BatchNormState::EPSILON as f64;
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();
        let out = self.bn_apply(x, scale, shift, &mean_t, &inv_std, n, c, s, true);
        let to32 = |v: &Vec<f64>| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        state.update(&to32(&mean), &to32(&var));
        out
    }

    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        state: &BatchNormState,
    ) -> Result<Var> {
        if !state.initialized {
            return Err(Error::InvalidArgument(
                "batchnorm running statistics are uninitialized".into(),
            ));
        }
        let (n, c, s) = self.bn_geometry(x, scale, shift, state)?;
        let eps = BatchNormState::EPSILON as f64;
        let inv_std: Vec<T> = state
            .var
            .iter()
            .map(|&v| T::from_f64(1.0 / (v as f64 + eps).sqrt()))
            .collect();
        let mean: Vec<T> = state.mean.iter().map(|&v| T::from_f64(v as f64)).collect();
        self.bn_apply(x, scale, shift, &mean, &inv_std, n, c, s, false)
    }

    fn bn_geometry(
        &self,
        x: Var,
        scale: Var,
        shift: Var,
        state: &BatchNormState,
    ) -> Result<(usize, usize, usize)> {
        let shape = self.value(x).shape();
        let (n, c, s) = match *shape {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => {
                return Err(Error::Shape(format!(
                    "batchnorm expects [N, C] or [N, C, H, W], got {shape:?}"
                )))
            }
        };
        for (what, v) in [("scale", scale), ("shift", shift)] {
            if self.value(v).shape() != [c] {
                return Err(Error::Shape(format!(
                    "batchnorm {what} shape {:?} does not match {c} channels",
                    self.value(v).shape()
                )));
            }
        }
        if state.channels() != c {
            return Err(Error::Shape(format!(
                "batchnorm state has {} channels, input has {c}",
                state.channels()
            )));
        }
        Ok((n, c, s))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[T],
        inv_std: &[T],
        n: usize,
        c: usize,
        s: usize,
        batch_stats: bool,
    ) -> Result<Var> {
        let xt = self.value(x);
        let (gamma, beta) = (self.value(scale).data(), self.value(shift).data());
        let mut normalized = vec![T::zero(); xt.numel()];
        let mut y = vec![T::zero(); xt.numel()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    let z = (xt.data()[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = z;
                    y[i] = gamma[ch] * z + beta[ch];
                }
            }
        }
        let out = Tensor::from_parts_unchecked(xt.shape().to_vec(), y);
        self.push(
            out,
            Op::BatchNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
        )
    }

    /// Squared error summed over all elements.
    pub fn sq_error(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let channels = self.value(pred).shape().get(1).copied().unwrap_or(1);
        self.weighted_sq_error(pred, target, &vec![T::one(); channels], T::one())
    }

    /// `scale · Σ w[c] (pred − target)²`, with one weight per channel (the
    /// second axis). Rank-1 inputs use a single weight.
    pub fn weighted_sq_error(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        channel_weights: &[T],
        scale: T,
    ) -> Result<Var> {
        let pt = self.value(pred);
        if pt.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "prediction shape {:?} differs from target shape {:?}",
                pt.shape(),
                target.shape()
            )));
        }
        let channels = pt.shape().get(1).copied().unwrap_or(1);
        if channel_weights.len() != channels {
            return Err(Error::Shape(format!(
                "{} channel weights for {channels} channels",
                channel_weights.len()
            )));
        }
        let inner: usize = pt.shape().iter().skip(2).product();
        let mut total = 0.0f64;
        for (i, (&p, &t)) in pt.data().iter().zip(target.data()).enumerate() {
            let ch = (i / inner) % channels;
            let d = (p - t).as_f64();
            total += channel_weights[ch].as_f64() * d * d;
        }
        let out = Tensor::scalar(T::from_f64(total * scale.as_f64()));
        self.push(
            out,
            Op::WeightedSqError {
                pred,
                target: target.data().to_vec(),
                channel_weights: channel_weights.to_vec(),
                scale,
            },
        )
    }

    /// Reverse-mode sweep from the scalar `loss`. Parameter gradients are
    /// added to `store`; the tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called on an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape("loss is not recorded on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            let shape = self.nodes[loss.0].value.shape().to_vec();
            self.nodes.clear();
            return Err(Error::Shape(format!("backward needs a scalar loss, got shape {shape:?}")));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    p.grad.iter_mut().zip(&dy).for_each(|(g, &d)| *g = *g + d);
                }
                Op::Conv2d {
                    x,
                    kernels: k,
                    bias,
                    cols,
                } => {
                    let &[n, c_in, h, w] = nodes[x.0].value.shape() else { unreachable!() };
                    let c_out = node.value.shape()[1];
                    let g = ConvGeom { n, c_in, c_out, h, w };
                    let kt = &nodes[k.0].value;
                    let mut dk = vec![T::zero(); kt.numel()];
                    let mut db = vec![T::zero(); c_out];
                    let dx = kernels::conv2d_backward(&dy, kt.data(), cols, &g, &mut dk, &mut db);
                    accumulate_owned(&mut grads[x.0], dx);
                    accumulate_owned(&mut grads[k.0], dk);
                    accumulate_owned(&mut grads[bias.0], db);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
                    for (&a, &d) in argmax.iter().zip(&dy) {
                        dx[a as usize] = dx[a as usize] + d;
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                }
                Op::Upsample { x } => {
                    let &[n, c, h, w] = nodes[x.0].value.shape() else { unreachable!() };
                    let dx = kernels::upsample_backward(&dy, n * c, h, w);
                    accumulate_owned(&mut grads[x.0], dx);
                }
                Op::Dense { x, weights, bias } => {
                    let xt = &nodes[x.0].value;
                    let wt = &nodes[weights.0].value;
                    let &[n, f] = xt.shape() else { unreachable!() };
                    let m = wt.shape()[0];
                    let mut dx = vec![T::zero(); n * f];
                    // dX[N,F] = dY[N,M] · W[M,F]
                    kernels::gemm(n, m, f, &dy, m as isize, 1, wt.data(), f as isize, 1, T::zero(), &mut dx, f as isize, 1);
                    let mut dw = vec![T::zero(); m * f];
                    // dW[M,F] = dYᵀ[M,N] · X[N,F]
                    kernels::gemm(m, n, f, &dy, 1, m as isize, xt.data(), f as isize, 1, T::zero(), &mut dw, f as isize, 1);
                    let mut db = vec![T::zero(); m];
                    for row in dy.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                    accumulate_owned(&mut grads[weights.0], dw);
                    accumulate_owned(&mut grads[bias.0], db);
                }
                Op::BatchNorm {
                    x,
                    scale,
                    shift,
                    normalized,
                    inv_std,
                    batch_stats,
                } => {
                    let shape = nodes[x.0].value.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let s: usize = shape.iter().skip(2).product();
                    let gamma = nodes[scale.0].value.data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    let mut dx = vec![T::zero(); dy.len()];
                    for ch in 0..c {
                        let (mut sum_dy, mut sum_dy_z) = (0.0f64, 0.0f64);
                        for b in 0..n {
                            let off = (b * c + ch) * s;
                            for i in off..off + s {
                                sum_dy += dy[i].as_f64();
                                sum_dy_z += (dy[i] * normalized[i]).as_f64();
                            }
                        }
                        dgamma[ch] = T::from_f64(sum_dy_z);
                        dbeta[ch] = T::from_f64(sum_dy);
                        let g = gamma[ch];
                        let is = inv_std[ch];
                        if *batch_stats {
                            let count = (n * s) as f64;
                            let (mean_dy, mean_dy_z) = (T::from_f64(sum_dy / count), T::from_f64(sum_dy_z / count));
                            for b in 0..n {
                                let off = (b * c + ch) * s;
                                for i in off..off + s {
                                    dx[i] = g * is * (dy[i] - mean_dy - normalized[i] * mean_dy_z);
                                }
                            }
                        } else {
                            for b in 0..n {
                                let off = (b * c + ch) * s;
                                for i in off..off + s {
                                    dx[i] = g * is * dy[i];
                                }
                            }
                        }
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                    accumulate_owned(&mut grads[scale.0], dgamma);
                    accumulate_owned(&mut grads[shift.0], dbeta);
                }
                Op::Dropout { x, mask } => {
                    let dx = dy.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                    accumulate_owned(&mut grads[x.0], dx);
                }
                Op::Relu { x } => {
                    let xt = &nodes[x.0].value;
                    let dx = dy
                        .iter()
                        .zip(xt.data())
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    accumulate_owned(&mut grads[x.0], dx);
                }
                Op::Reshape { x } => accumulate(&mut grads[x.0], &dy),
                Op::WeightedSqError {
                    pred,
                    target,
                    channel_weights,
                    scale,
                } => {
                    let pt = &nodes[pred.0].value;
                    let channels = channel_weights.len();
                    let inner: usize = pt.shape().iter().skip(2).product();
                    let upstream = dy[0];
                    let two = T::from_f64(2.0);
                    let dx = pt
                        .data()
                        .iter()
                        .zip(target)
                        .enumerate()
                        .map(|(i, (&p, &t))| {
                            let ch = (i / inner) % channels;
                            two * *scale * channel_weights[ch] * (p - t) * upstream
                        })
                        .collect();
                    accumulate_owned(&mut grads[pred.0], dx);
                }
            }
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }
}
