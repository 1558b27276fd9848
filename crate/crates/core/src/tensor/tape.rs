//! Computation tape: every op appends a node holding its value and the
//! context its backward pass needs. `backward` walks the nodes in reverse.

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{DrfError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    LogSoftmax {
        x: Var,
        len: usize,
    },
    GlobalAvgPool(Var),
    Broadcast {
        x: Var,
        n: usize,
        hw: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    /// Scalar loss whose input gradient was computed during the forward pass.
    Fused {
        x: Var,
        grad: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner record of one forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Targets for the fused mixture-density loss.
#[derive(Clone, Debug)]
pub struct MdnBatch {
    pub components: usize,
    pub horizon: usize,
    /// Lower bound added to each standard deviation (meters).
    pub sigma_eps: f64,
    /// Per-(sample, timestep) losses above this are discarded.
    pub clip: f64,
    /// Target offsets in meters, `[N * horizon]`.
    pub targets: Vec<[f64; 2]>,
    /// `false` excludes a (sample, timestep) from the loss.
    pub mask: Vec<bool>,
}

/// Outcome of one fused mixture-density loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MdnLossStats {
    pub used: usize,
    pub clipped: usize,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> DrfError {
    DrfError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            grad: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Parameter gradients accumulated by the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [f, cw, kh, kw] = self.value(w).dims4()?;
        if c != cw {
            return Err(shape_err("conv2d", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [f] {
                return Err(shape_err("conv2d bias", self.shape(b), &[f]));
            }
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d geometry", self.shape(x), self.shape(w)));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let y = kernels::conv_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            f,
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, f, geom.ho, geom.wo], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, &inputs))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if k == 0 || stride == 0 || h < k || w < k || !(h - k).is_multiple_of(stride) || !(w - k).is_multiple_of(stride) {
            return Err(DrfError::invalid(
                "max_pool2d",
                format!("{h}x{w} is not divisible into {k}x{k} windows at stride {stride}"),
            ));
        }
        let (y, argmax) = kernels::maxpool_forward(self.value(x).data(), n * c, h, w, k, stride);
        let value = Tensor::new(&[n, c, (h - k) / stride + 1, (w - k) / stride + 1], y)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if factor == 0 {
            return Err(DrfError::invalid("upsample", "factor must be positive"));
        }
        let y = kernels::upsample_forward(self.value(x).data(), n * c, h, w, factor);
        let value = Tensor::new(&[n, c, h * factor, w * factor], y)?;
        Ok(self.push(value, Op::Upsample { x, factor }, &[x]))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(DrfError::invalid(
                "group_norm",
                format!("{c} channels do not split into {groups} groups"),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("group_norm affine", self.shape(gamma), &[c]));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let stats = kernels::group_stats(xd, n, c, hw, groups);
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let per = c / groups;
        let mut y = Vec::with_capacity(xd.len());
        for b in 0..n {
            for ch in 0..c {
                let (mean, rstd) = stats[b * groups + ch / per];
                let (g, bb) = (gd[ch].as_f64(), bd[ch].as_f64());
                let base = (b * c + ch) * hw;
                y.extend(
                    xd[base..base + hw]
                        .iter()
                        .map(|v| T::from_f64((v.as_f64() - mean) * rstd * g + bb)),
                );
            }
        }
        let value = Tensor::new(&[n, c, h, w], y)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|v| f(*v)).collect(),
        };
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect(),
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Concatenates along dimension 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() < 2 {
            return Err(shape_err("concat", &first, &[]));
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(shape_err("concat", &first, s));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for p in parts {
                let v = self.value(*p);
                let len = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[b * len..(b + 1) * len]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `start .. start + len` along dimension 1.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] {
            return Err(shape_err("slice", &s, &[start, len]));
        }
        let inner: usize = s[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for b in 0..s[0] {
            let base = (b * s[1] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Slice { x, start }, &[x]))
    }

    /// Log-softmax over the trailing two (spatial) dimensions of `[N, T, H, W]`.
    pub fn log_softmax_spatial(&mut self, x: Var) -> Result<Var> {
        let [_, _, h, w] = self.value(x).dims4()?;
        let y = kernels::log_softmax_planes(self.value(x).data(), h * w);
        let value = Tensor::new(self.shape(x), y)?;
        Ok(self.push(value, Op::LogSoftmax { x, len: h * w }, &[x]))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var> {
        let len = *self.shape(x).last().unwrap_or(&1);
        let y = kernels::log_softmax_planes(self.value(x).data(), len);
        let value = Tensor::new(self.shape(x), y)?;
        Ok(self.push(value, Op::LogSoftmax { x, len }, &[x]))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// `[C] -> [N, C, H, W]`, repeating each value over batch and space.
    pub fn broadcast_planes(&mut self, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(shape_err("broadcast_planes", s, &[]));
        }
        let c = s[0];
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * hw);
        for _ in 0..n {
            for v in src {
                data.extend(std::iter::repeat_n(*v, hw));
            }
        }
        let value = Tensor::new(&[n, c, h, w], data)?;
        Ok(self.push(value, Op::Broadcast { x, n, hw }, &[x]))
    }

    /// `[N, in] x [out, in]^T + [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(shape_err("linear", &xs, &ws));
        }
        let (n, out) = (xs[0], ws[0]);
        let mut y = Vec::with_capacity(n * out);
        for _ in 0..n {
            y.extend_from_slice(self.value(b).data());
        }
        kernels::gemm(
            false,
            true,
            n,
            xs[1],
            out,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            T::one(),
            &mut y,
        );
        let value = Tensor::new(&[n, out], y)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Gathers flat element indices into a 1-d tensor.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let numel = self.value(x).numel();
        if let Some(bad) = idx.iter().find(|i| **i >= numel) {
            return Err(shape_err("pick", self.shape(x), &[*bad]));
        }
        let data = idx.iter().map(|i| self.value(x).data()[*i]).collect();
        let value = Tensor::new(&[idx.len()], data)?;
        Ok(self.push(value, Op::Pick { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Mean negative log-likelihood of a bivariate Gaussian mixture.
    ///
    /// `x` is `[N, horizon * components * 6]` raw outputs laid out per
    /// timestep, then per component, as `(mu_x, mu_y, s_x, s_y, r, logit)`
    /// with `sigma = exp(s) + sigma_eps`, `rho = tanh(r)` and mixture weights
    /// `softmax(logit)`.
    pub fn mdn_nll(&mut self, x: Var, batch: &MdnBatch) -> Result<(Var, MdnLossStats)> {
        let per = batch.horizon * batch.components * 6;
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] != per || batch.targets.len() != s[0] * batch.horizon || batch.mask.len() != batch.targets.len() {
            return Err(shape_err("mdn_nll", &s, &[batch.targets.len(), per]));
        }
        let raw = self.value(x).to_f64_vec();
        let mut grad = vec![0.0f64; raw.len()];
        let mut stats = MdnLossStats::default();
        let mut total = 0.0;
        for (i, (target, keep)) in batch.targets.iter().zip(&batch.mask).enumerate() {
            if !keep {
                continue;
            }
            let offset = (i / batch.horizon) * per + (i % batch.horizon) * batch.components * 6;
            let params = &raw[offset..offset + batch.components * 6];
            let (nll, g) = mixture_nll_grad(params, *target, batch.sigma_eps);
            if !nll.is_finite() || nll > batch.clip {
                stats.clipped += 1;
                continue;
            }
            stats.used += 1;
            total += nll;
            grad[offset..offset + g.len()].copy_from_slice(&g);
        }
        let denom = stats.used.max(1) as f64;
        let loss = if stats.used == 0 { 0.0 } else { total / denom };
        let grad = grad.into_iter().map(|g| T::from_f64(g / denom)).collect();
        let value = Tensor::scalar(T::from_f64(loss));
        Ok((self.push(value, Op::Fused { x, grad }, &[x]), stats))
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            None => node.grad = Some(g),
        }
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, gv) in contributions {
                self.accumulate(v, gv);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let f = self.shape(*w)[0];
                let (dx, dw, db) = kernels::conv_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    f,
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                let mut res = Vec::new();
                if let Some(dx) = dx {
                    res.push((*x, dx));
                }
                if self.needs(*w) {
                    res.push((*w, dw));
                }
                if let Some(b) = b {
                    res.push((*b, db));
                }
                res
            }
            Op::MaxPool { x, argmax } => {
                let [_, _, h, w] = self.value(*x).dims4().expect("4-d pool input");
                let [_, _, ho, wo] = node.value.dims4().expect("4-d pool output");
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (j, (gv, a)) in g.iter().zip(argmax).enumerate() {
                    let plane = j / (ho * wo);
                    let at = plane * h * w + *a as usize;
                    dx[at] = dx[at] + *gv;
                }
                vec![(*x, dx)]
            }
            Op::Upsample { x, factor } => {
                let [n, c, h, w] = self.value(*x).dims4().expect("4-d upsample input");
                vec![(*x, kernels::upsample_backward(g, n * c, h, w, *factor))]
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => self.group_norm_backward(*x, *gamma, *beta, *groups, stats, g),
            Op::Relu(x) => vec![(
                *x,
                g.iter()
                    .zip(self.value(*x).data())
                    .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                    .collect(),
            )],
            Op::Sigmoid(x) => vec![(
                *x,
                g.iter().zip(out).map(|(g, y)| *g * *y * (T::one() - *y)).collect(),
            )],
            Op::Tanh(x) => vec![(
                *x,
                g.iter().zip(out).map(|(g, y)| *g * (T::one() - *y * *y)).collect(),
            )],
            Op::Exp(x) => vec![(*x, g.iter().zip(out).map(|(g, y)| *g * *y).collect())],
            Op::Scale(x, s) => vec![(*x, g.iter().map(|g| *g * *s).collect())],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -*v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(g, y)| *g * *y).collect()),
                    (*b, g.iter().zip(av).map(|(g, x)| *g * *x).collect()),
                ]
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let (n, total) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut res: Vec<(Var, Vec<T>)> = parts
                    .iter()
                    .map(|p| (*p, Vec::with_capacity(self.value(*p).numel())))
                    .collect();
                for b in 0..n {
                    let mut c0 = 0;
                    for (p, buf) in res.iter_mut() {
                        let c = self.shape(*p)[1];
                        let base = (b * total + c0) * inner;
                        buf.extend_from_slice(&g[base..base + c * inner]);
                        c0 += c;
                    }
                }
                res
            }
            Op::Slice { x, start } => {
                let s = self.shape(*x);
                let (n, total) = (s[0], s[1]);
                let len = node.value.shape()[1];
                let inner: usize = s[2..].iter().product();
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for b in 0..n {
                    let base = (b * total + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[b * len * inner..(b + 1) * len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmax { x, len } => {
                let len = *len;
                let mut dx = Vec::with_capacity(g.len());
                for (gp, yp) in g.chunks(len).zip(out.chunks(len)) {
                    let total: f64 = gp.iter().map(|v| v.as_f64()).sum();
                    dx.extend(
                        gp.iter()
                            .zip(yp)
                            .map(|(gv, y)| T::from_f64(gv.as_f64() - y.as_f64().exp() * total)),
                    );
                }
                vec![(*x, dx)]
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.value(*x).dims4().expect("4-d pool input");
                let hw = h * w;
                let inv = T::from_f64(1.0 / hw as f64);
                let dx = g.iter().flat_map(|gv| std::iter::repeat_n(*gv * inv, hw)).collect();
                vec![(*x, dx)]
            }
            Op::Broadcast { x, n, hw } => {
                let c = self.value(*x).numel();
                let mut dx = vec![0.0f64; c];
                for b in 0..*n {
                    for (ch, d) in dx.iter_mut().enumerate() {
                        let base = (b * c + ch) * hw;
                        *d += g[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                vec![(*x, dx.into_iter().map(T::from_f64).collect())]
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out_dim = self.shape(*w)[0];
                let mut dx = vec![T::zero(); n * inp];
                kernels::gemm(false, false, n, out_dim, inp, T::one(), g, self.value(*w).data(), T::zero(), &mut dx);
                let mut dw = vec![T::zero(); out_dim * inp];
                kernels::gemm(true, false, out_dim, n, inp, T::one(), g, self.value(*x).data(), T::zero(), &mut dw);
                let db = (0..out_dim)
                    .map(|o| T::from_f64((0..n).map(|r| g[r * out_dim + o].as_f64()).sum()))
                    .collect();
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Pick { x, idx } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (gv, i) in g.iter().zip(idx) {
                    dx[*i] = dx[*i] + *gv;
                }
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Fused { x, grad } => vec![(*x, grad.iter().map(|v| *v * g[0]).collect())],
        }
    }

    fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: &[(f64, f64)],
        g: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let [n, c, h, w] = self.value(x).dims4().expect("4-d norm input");
        let hw = h * w;
        let per = c / groups;
        let m = (per * hw) as f64;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let mut dx = vec![T::zero(); xd.len()];
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for b in 0..n {
            for grp in 0..groups {
                let (mean, rstd) = stats[b * groups + grp];
                let start = (b * c + grp * per) * hw;
                let end = start + per * hw;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in start..end {
                    let ch = (j / hw) % c;
                    let xhat = (xd[j].as_f64() - mean) * rstd;
                    let gy = g[j].as_f64();
                    dgamma[ch] += gy * xhat;
                    dbeta[ch] += gy;
                    let d = gy * gd[ch].as_f64();
                    sum_d += d;
                    sum_dx += d * xhat;
                }
                for j in start..end {
                    let ch = (j / hw) % c;
                    let xhat = (xd[j].as_f64() - mean) * rstd;
                    let d = g[j].as_f64() * gd[ch].as_f64();
                    dx[j] = T::from_f64(rstd / m * (m * d - sum_d - xhat * sum_dx));
                }
            }
        }
        vec![
            (x, dx),
            (gamma, dgamma.into_iter().map(T::from_f64).collect()),
            (beta, dbeta.into_iter().map(T::from_f64).collect()),
        ]
    }
}

/// Negative log-likelihood of one timestep's mixture and its gradient with
/// respect to the raw parameters.
pub(crate) fn mixture_nll_grad(params: &[f64], target: [f64; 2], sigma_eps: f64) -> (f64, Vec<f64>) {
    let n = params.len() / 6;
    let logits: Vec<f64> = (0..n).map(|i| params[i * 6 + 5]).collect();
    let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse_logits = lmax + logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
    let mut joint = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let p = &params[i * 6..i * 6 + 6];
        let (sx, sy) = (p[2].exp() + sigma_eps, p[3].exp() + sigma_eps);
        let rho = p[4].tanh();
        let q = 1.0 - rho * rho;
        let a = (target[0] - p[0]) / sx;
        let b = (target[1] - p[1]) / sy;
        let z = a * a + b * b - 2.0 * rho * a * b;
        let log_n = -(2.0 * std::f64::consts::PI).ln() - sx.ln() - sy.ln() - 0.5 * q.ln() - z / (2.0 * q);
        joint.push(logits[i] - lse_logits + log_n);
        parts.push((sx, sy, rho, q, a, b, z));
    }
    let jmax = joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = jmax + joint.iter().map(|j| (j - jmax).exp()).sum::<f64>().ln();
    let nll = -lse;
    let mut grad = vec![0.0; params.len()];
    for i in 0..n {
        let resp = (joint[i] - lse).exp();
        let pi = (logits[i] - lse_logits).exp();
        let (sx, sy, rho, q, a, b, z) = parts[i];
        let p = &params[i * 6..i * 6 + 6];
        let d_mux = (a - rho * b) / (q * sx);
        let d_muy = (b - rho * a) / (q * sy);
        let d_sx = -1.0 / sx + a * (a - rho * b) / (q * sx);
        let d_sy = -1.0 / sy + b * (b - rho * a) / (q * sy);
        let d_rho = rho / q + a * b / q - rho * z / (q * q);
        let gi = &mut grad[i * 6..i * 6 + 6];
        gi[0] = -resp * d_mux;
        gi[1] = -resp * d_muy;
        gi[2] = -resp * d_sx * p[2].exp();
        gi[3] = -resp * d_sy * p[3].exp();
        gi[4] = -resp * d_rho * q;
        gi[5] = pi - resp;
    }
    (nll, grad)
}
