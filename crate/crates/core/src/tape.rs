//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations are recorded in execution order, so node indices are a
//! topological order by construction. `backward` walks the tape once in
//! reverse and accumulates gradients into the `grad` field of every leaf
//! that requires one.

use crate::error::{Error, Result};
use crate::kernels::{self, AttnGeom, ConvGeom, Mat};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        c_out: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        c_in: usize,
        c_out: usize,
        h: usize,
        w_: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: [usize; 5],
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    ChannelMean(Var),
    SpatialMean(Var),
    SpatialMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    ScaleSpatial {
        x: Var,
        gate: Var,
    },
    Concat(Vec<Var>),
    Patchify {
        x: Var,
        dims: [usize; 4],
    },
    Unpatchify {
        x: Var,
        dims: [usize; 4],
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    BceDice {
        p: Var,
        y: Tensor<T>,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Names of every differentiable operation the tape records.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "reshape",
    "add",
    "mul",
    "scale",
    "sum",
    "mean",
    "matmul",
    "linear",
    "conv2d",
    "conv_transpose2d",
    "depthwise_conv2d",
    "layer_norm",
    "relu",
    "gelu",
    "sigmoid",
    "softmax",
    "channel_mean",
    "spatial_mean",
    "spatial_max",
    "scale_channels",
    "scale_spatial",
    "concat",
    "patchify",
    "unpatchify",
    "attention",
    "bce_dice",
];

/// Channel, spatial-mean and spatial-max reductions of a `C×H×W` tensor.
#[derive(Clone, Copy, Debug)]
pub struct PooledStats {
    pub channel_avg: Var,
    pub spatial_mean: Var,
    pub spatial_max: Var,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::Contract(format!(
            "{op}: expected a non-empty C×H×W tensor, got {shape:?}"
        ))),
    }
}

fn matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Contract(format!("{op}: expected a matrix, got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions) || cfg!(test),
        }
    }

    /// Enables or disables the finiteness scan of every op output.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf, absent for constants and before
    /// any backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "output of {name} (node {})",
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(t.sum() / T::lit(t.numel() as f64));
        self.push("mean", value, Op::Mean(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix("matmul", self.shape(a))?;
        let (k2, n) = matrix("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            Mat::new(self.value(a).data(), m, k),
            Mat::new(self.value(b).data(), k, n),
            &mut out,
            n,
            false,
        );
        let value = Tensor::from_parts(vec![m, n], out);
        self.push("matmul", value, Op::Matmul(a, b), &[a, b])
    }

    /// `x·w + b` for `x: N×d_in`, `w: d_in×d_out`, `b: d_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d_in) = matrix("linear", self.shape(x))?;
        let (d_in2, d_out) = matrix("linear", self.shape(w))?;
        if d_in != d_in2 {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::shape("linear bias", self.shape(b), &[d_out]));
            }
        }
        let mut out = vec![T::zero(); n * d_out];
        kernels::gemm(
            Mat::new(self.value(x).data(), n, d_in),
            Mat::new(self.value(w).data(), d_in, d_out),
            &mut out,
            d_out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(d_out) {
                row.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
            }
        }
        let value = Tensor::from_parts(vec![n, d_out], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", value, Op::Linear { x, w, b }, &inputs)
    }

    /// Cross-correlation of `x: C_in×H×W` with `w: C_out×C_in×k×k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (c_in, h, wd) = chw("conv2d", self.shape(x))?;
        let (c_out, k) = match *self.shape(w) {
            [co, ci, kh, kw] if ci == c_in && kh == kw && kh > 0 => (co, kh),
            _ => return Err(Error::shape("conv2d", self.shape(x), self.shape(w))),
        };
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[c_out]));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            padding,
        };
        let (ho, wo) = geom.out_hw().ok_or_else(|| {
            Error::Config(format!(
                "conv2d: {h}×{wd} input with kernel {k}, stride {stride}, padding {padding} has no output"
            ))
        })?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c_out,
            geom,
        );
        let value = Tensor::from_parts(vec![c_out, ho, wo], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom, c_out }, &inputs)
    }

    /// Exact-doubling transposed convolution with `w: C_in×C_out×2×2`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (c_in, h, wd) = chw("conv_transpose2d", self.shape(x))?;
        let c_out = match *self.shape(w) {
            [ci, co, kh, kw] => {
                if kh != 2 || kw != 2 || stride != 2 {
                    return Err(Error::Config(format!(
                        "conv_transpose2d supports only a 2×2 kernel with stride 2, got {kh}×{kw} stride {stride}"
                    )));
                }
                if ci != c_in {
                    return Err(Error::shape("conv_transpose2d", self.shape(x), self.shape(w)));
                }
                co
            }
            _ => return Err(Error::shape("conv_transpose2d", self.shape(x), self.shape(w))),
        };
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv_transpose2d bias", self.shape(b), &[c_out]));
            }
        }
        let out = kernels::conv_transpose2x2_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c_in,
            c_out,
            h,
            wd,
        );
        let value = Tensor::from_parts(vec![c_out, 2 * h, 2 * wd], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let op = Op::ConvTranspose2d {
            x,
            w,
            b,
            c_in,
            c_out,
            h,
            w_: wd,
        };
        self.push("conv_transpose2d", value, op, &inputs)
    }

    /// One `k×k` kernel per channel, `w: C×1×k×k`, stride 1.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let (c, h, wd) = chw("depthwise_conv2d", self.shape(x))?;
        let k = match *self.shape(w) {
            [cw, 1, kh, kw] if cw == c && kh == kw && kh > 0 => kh,
            _ => return Err(Error::shape("depthwise_conv2d", self.shape(x), self.shape(w))),
        };
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::Config(format!(
                "depthwise_conv2d: {h}×{wd} input with kernel {k}, padding {padding} has no output"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(Error::shape("depthwise_conv2d bias", self.shape(b), &[c]));
            }
        }
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c,
            h,
            wd,
            k,
            padding,
        );
        let (ho, wo) = (h + 2 * padding + 1 - k, wd + 2 * padding + 1 - k);
        let value = Tensor::from_parts(vec![c, ho, wo], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let op = Op::Depthwise {
            x,
            w,
            b,
            dims: [c, h, wd, k, padding],
        };
        self.push("depthwise_conv2d", value, op, &inputs)
    }

    /// Normalizes each row of `x: N×d` and applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, d) = matrix("layer_norm", self.shape(x))?;
        if d == 0 {
            return Err(Error::Contract("layer_norm over zero features".into()));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm affine", self.shape(gamma), &[d]));
        }
        let xs = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); n * d];
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let inv_d = T::one() / T::lit(d as f64);
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bt[j];
            }
        }
        let value = Tensor::from_parts(vec![n, d], out);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layer_norm", value, op, &[x, gamma, beta])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * kernels::phi_cdf(v));
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = self.value(x).data().to_vec();
        let mut lane = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (a, l) in lane.iter_mut().enumerate() {
                    *l = data[base + a * inner];
                }
                kernels::softmax_row(&mut lane);
                for (a, &l) in lane.iter().enumerate() {
                    data[base + a * inner] = l;
                }
            }
        }
        let value = Tensor::from_parts(shape, data);
        let op = Op::Softmax {
            x,
            outer,
            axis: len,
            inner,
        };
        self.push("softmax", value, op, &[x])
    }

    /// Mean over H×W for every channel, shape `[C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("channel_mean", self.shape(x))?;
        let inv = T::one() / T::lit((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_parts(vec![c], data);
        self.push("channel_mean", value, Op::ChannelMean(x), &[x])
    }

    /// Mean over channels, shape `[1, H, W]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("spatial_mean", self.shape(x))?;
        let plane = h * w;
        let xs = self.value(x).data();
        let mut data = vec![T::zero(); plane];
        for ch in xs.chunks_exact(plane) {
            data.iter_mut().zip(ch).for_each(|(a, &v)| *a += v);
        }
        let inv = T::one() / T::lit(c as f64);
        data.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::from_parts(vec![1, h, w], data);
        self.push("spatial_mean", value, Op::SpatialMean(x), &[x])
    }

    /// Max over channels, shape `[1, H, W]`. Ties go to the lowest channel.
    pub fn spatial_max(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("spatial_max", self.shape(x))?;
        let plane = h * w;
        let xs = self.value(x).data();
        let mut data = xs[..plane].to_vec();
        let mut argmax = vec![0usize; plane];
        for ch in 1..c {
            let src = &xs[ch * plane..(ch + 1) * plane];
            for i in 0..plane {
                if src[i] > data[i] {
                    data[i] = src[i];
                    argmax[i] = ch;
                }
            }
        }
        let value = Tensor::from_parts(vec![1, h, w], data);
        self.push("spatial_max", value, Op::SpatialMax { x, argmax }, &[x])
    }

    pub fn pooled_statistics(&mut self, x: Var) -> Result<PooledStats> {
        Ok(PooledStats {
            channel_avg: self.channel_mean(x)?,
            spatial_mean: self.spatial_mean(x)?,
            spatial_max: self.spatial_max(x)?,
        })
    }

    /// `x ⊙ gate` with one gate value per channel.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (c, h, w) = chw("scale_channels", self.shape(x))?;
        if self.value(gate).numel() != c {
            return Err(Error::shape("scale_channels", self.shape(x), self.shape(gate)));
        }
        let plane = h * w;
        let g = self.value(gate).data();
        let mut data = self.value(x).data().to_vec();
        for (ch, gv) in data.chunks_exact_mut(plane).zip(g) {
            ch.iter_mut().for_each(|v| *v *= *gv);
        }
        let value = Tensor::from_parts(vec![c, h, w], data);
        self.push("scale_channels", value, Op::ScaleChannels { x, gate }, &[x, gate])
    }

    /// `x ⊙ gate` with one gate value per spatial position.
    pub fn scale_spatial(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (c, h, w) = chw("scale_spatial", self.shape(x))?;
        if self.value(gate).numel() != h * w {
            return Err(Error::shape("scale_spatial", self.shape(x), self.shape(gate)));
        }
        let g = self.value(gate).data();
        let mut data = self.value(x).data().to_vec();
        for ch in data.chunks_exact_mut(h * w) {
            ch.iter_mut().zip(g).for_each(|(v, gv)| *v *= *gv);
        }
        let value = Tensor::from_parts(vec![c, h, w], data);
        self.push("scale_spatial", value, Op::ScaleSpatial { x, gate }, &[x, gate])
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::from_parts(shape, data);
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    /// `C×H×W → (H/p·W/p) × (C·p·p)` tokens; `p = 1` is a plain transpose.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let (c, h, w) = chw("patchify", self.shape(x))?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "patch size {p} does not divide {h}×{w}"
            )));
        }
        let dims = [c, h, w, p];
        let mut data = vec![T::zero(); c * h * w];
        permute_patches(self.value(x).data(), &mut data, dims, false);
        let value = Tensor::from_parts(vec![(h / p) * (w / p), c * p * p], data);
        self.push("patchify", value, Op::Patchify { x, dims }, &[x])
    }

    /// Inverse of [`Tape::patchify`].
    pub fn unpatchify(&mut self, x: Var, chw_: [usize; 3], p: usize) -> Result<Var> {
        let [c, h, w] = chw_;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "patch size {p} does not divide {h}×{w}"
            )));
        }
        let want = [(h / p) * (w / p), c * p * p];
        if self.shape(x) != want {
            return Err(Error::shape("unpatchify", self.shape(x), &want));
        }
        let dims = [c, h, w, p];
        let mut data = vec![T::zero(); c * h * w];
        permute_patches(self.value(x).data(), &mut data, dims, true);
        let value = Tensor::from_parts(vec![c, h, w], data);
        self.push("unpatchify", value, Op::Unpatchify { x, dims }, &[x])
    }

    /// Scaled dot-product attention over `heads` heads; `q`, `k`, `v` are
    /// `N×d` and already projected. Returns the concatenated head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = matrix("attention", self.shape(q))?;
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention: {heads} heads do not divide width {d}"
            )));
        }
        if n == 0 {
            return Err(Error::Contract("attention over zero tokens".into()));
        }
        let geom = AttnGeom { n, d, heads };
        let probs = kernels::attention_probs(self.value(q).data(), self.value(k).data(), geom);
        let out = kernels::attention_apply(&probs, self.value(v).data(), geom);
        let value = Tensor::from_parts(vec![n, d], out);
        let op = Op::Attention {
            q,
            k,
            v,
            geom,
            probs,
        };
        self.push("attention", value, op, &[q, k, v])
    }

    /// Attention weights recorded by an `attention` node, `heads × N × N`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Soft Dice (averaged over rows) plus mean binary cross-entropy.
    ///
    /// `p` holds probabilities, one image per row; `y` is the binary target
    /// of the same shape. Probabilities are clamped to `[1e-7, 1 − 1e-7]`
    /// inside the logarithms only.
    pub fn bce_dice(&mut self, p: Var, y: &Tensor<T>, eps: T) -> Result<Var> {
        let (rows, cols) = match *self.shape(p) {
            [r, c] => (r, c),
            _ => {
                return Err(Error::Contract(format!(
                    "bce_dice expects images × pixels, got {:?}",
                    self.shape(p)
                )))
            }
        };
        if y.shape() != self.shape(p) {
            return Err(Error::shape("bce_dice", y.shape(), self.shape(p)));
        }
        if y.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Contract("bce_dice target is not binary".into()));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::Contract("bce_dice over an empty batch".into()));
        }
        let value = Tensor::scalar(crate::loss::bce_dice_value(
            self.value(p).data(),
            y.data(),
            rows,
            cols,
            eps,
        ));
        let op = Op::BceDice {
            p,
            y: y.clone(),
            eps,
        };
        self.push("bce_dice", value, op, &[p])
    }

    /// Populates `grad` on every leaf that requires one with ∂loss/∂leaf.
    ///
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.node_backward(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let Some(g) = g else { continue };
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }

    fn take_grads(&self, grads: &mut [Option<Vec<T>>], vars: &[Var]) -> Vec<Option<Vec<T>>> {
        vars.iter()
            .enumerate()
            .map(|(i, v)| {
                if !self.nodes[v.0].requires_grad {
                    return None;
                }
                let n = self.nodes[v.0].value.numel();
                if vars[..i].contains(v) {
                    return Some(vec![T::zero(); n]);
                }
                Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n]))
            })
            .collect()
    }

    fn put_grads(grads: &mut [Option<Vec<T>>], vars: &[Var], bufs: Vec<Option<Vec<T>>>) {
        for (v, buf) in vars.iter().zip(bufs) {
            let Some(buf) = buf else { continue };
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(buf),
            }
        }
    }

    fn node_backward(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Reshape(x) | Op::Sum(x) | Op::Mean(x) | Op::Scale(x, _) | Op::Relu(x) | Op::Gelu(x) | Op::Sigmoid(x) => {
                let vars = [*x];
                let mut bufs = self.take_grads(grads, &vars);
                if let Some(dx) = bufs[0].as_mut() {
                    let xs = val(*x);
                    match &self.nodes[i].op {
                        Op::Reshape(_) => dx.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                        Op::Sum(_) => dx.iter_mut().for_each(|a| *a += g[0]),
                        Op::Mean(_) => {
                            let s = g[0] / T::lit(xs.len() as f64);
                            dx.iter_mut().for_each(|a| *a += s);
                        }
                        Op::Scale(_, s) => dx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *s),
                        Op::Relu(_) => {
                            for ((a, &b), &xv) in dx.iter_mut().zip(g).zip(xs) {
                                if xv > T::zero() {
                                    *a += b;
                                }
                            }
                        }
                        Op::Gelu(_) => {
                            for ((a, &b), &xv) in dx.iter_mut().zip(g).zip(xs) {
                                *a += b * (kernels::phi_cdf(xv) + xv * kernels::phi_pdf(xv));
                            }
                        }
                        Op::Sigmoid(_) => {
                            for ((a, &b), &y) in dx.iter_mut().zip(g).zip(out) {
                                *a += b * y * (T::one() - y);
                            }
                        }
                        _ => unreachable!(),
                    }
                }
                Self::put_grads(grads, &vars, bufs);
            }
            Op::Add(a, b) => {
                let vars = [*a, *b];
                let mut bufs = self.take_grads(grads, &vars);
                for buf in bufs.iter_mut().flatten() {
                    buf.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                Self::put_grads(grads, &vars, bufs);
            }
            Op::Mul(a, b) => {
                let vars = [*a, *b];
                let mut bufs = self.take_grads(grads, &vars);
                let (va, vb) = (val(*a), val(*b));
                if let Some(da) = bufs[0].as_mut() {
                    for ((d, &gv), &o) in da.iter_mut().zip(g).zip(vb) {
                        *d += gv * o;
                    }
                }
                if let Some(db) = bufs[1].as_mut() {
                    for ((d, &gv), &o) in db.iter_mut().zip(g).zip(va) {
                        *d += gv * o;
                    }
                }
                Self::put_grads(grads, &vars, bufs);
            }
            Op::Matmul(a, b) => {
                let vars = [*a, *b];
                let mut bufs = self.take_grads(grads, &vars);
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let gm = Mat::new(g, m, n);
                if let Some(da) = bufs[0].as_mut() {
                    kernels::gemm(gm, Mat::new(val(*b), k, n).t(), da, k, true);
                }
                if let Some(db) = bufs[1].as_mut() {
                    kernels::gemm(Mat::new(val(*a), m, k).t(), gm, db, n, true);
                }
                Self::put_grads(grads, &vars, bufs);
            }
            Op::Linear { x, w, b } => {
                let mut vars = vec![*x, *w];
                vars.extend(*b);
                let mut bufs = self.take_grads(grads, &vars);
                let (n, d_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let d_out = self.shape(*w)[1];
                let gm = Mat::new(g, n, d_out);
                if let Some(dx) = bufs[0].as_mut() {
                    kernels::gemm(gm, Mat::new(val(*w), d_in, d_out).t(), dx, d_in, true);
                }
                if let Some(dw) = bufs[1].as_mut() {
                    kernels::gemm(Mat::new(val(*x), n, d_in).t(), gm, dw, d_out, true);
                }
                if let Some(Some(db)) = bufs.get_mut(2) {
                    for row in g.chunks_exact(d_out) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                }
                Self::put_grads(grads, &vars, bufs);
            }
            Op::Conv2d { x, w, b, geom, c_out } => {
                let mut vars = vec![*x, *w];
                vars.extend(*b);
                let mut bufs = self.take_grads(grads, &vars);
                let (bx, rest) = bufs.split_at_mut(1);
                let (bw, bb) = rest.split_at_mut(1);
                kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    *c_out,
                    *geom,
                    g,
                    bx[0].as_deref_mut(),
                    bw[0].as_deref_mut(),
                    bb.first_mut().and_then(|b| b.as_deref_mut()),
                );
                Self::put_grads(grads, &vars, bufs);
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                c_in,
                c_out,
                h,
                w_,
            } => {
                let mut vars = vec![*x, *w];
                vars.extend(*b);
                let mut bufs = self.take_grads(grads, &vars);
                let (bx, rest) = bufs.split_at_mut(1);
                let (bw, bb) = rest.split_at_mut(1);
                kernels::conv_transpose2x2_backward(
                    val(*x),
                    val(*w),
                    *c_in,
                    *c_out,
                    *h,
                    *w_,
                    g,
                    bx[0].as_deref_mut(),
                    bw[0].as_deref_mut(),
                    bb.first_mut().and_then(|b| b.as_deref_mut()),
                );
                Self::put_grads(grads, &vars, bufs);
            }
            Op::Depthwise { x, w, b, dims } => {
                let [c, h, wd, k, padding] = *dims;
                let mut vars = vec![*x, *w];
                vars.extend(*b);
                let mut bufs = self.take_grads(grads, &vars);
                let (bx, rest) = bufs.split_at_mut(1);
                let (bw, bb) = rest.split_at_mut(1);
                kernels::depthwise_backward(
                    val(*x),
                    val(*w),
                    c,
                    h,
                    wd,
                    k,
                    padding,
                    g,
                    bx[0].as_deref_mut(),
                    bw[0].as_deref_mut(),
                    bb.first_mut().and_then(|b| b.as_deref_mut()),
                );
                Self::put_grads(grads, &vars, bufs);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let vars = [*x, *gamma, *beta];
                let mut bufs = self.take_grads(grads, &vars);
                let d = self.shape(*gamma)[0];
                let gm = val(*gamma);
                let inv_d = T::one() / T::lit(d as f64);
                for (r, (grow, xrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    if let Some(dg) = bufs[1].as_mut() {
                        for j in 0..d {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                    if let Some(db) = bufs[2].as_mut() {
                        db.iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                    }
                    if let Some(dx) = bufs[0].as_mut() {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = grow[j] * gm[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xrow[j];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        let dst = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dxh = grow[j] * gm[j];
                            dst[j] += rstd[r] * (dxh - mean_dxh - xrow[j] * mean_dxh_xh);
                        }
                    }
                }
                Self::put_grads(grads, &vars, bufs);
            }
            Op::Softmax {
                x,
                outer,
                axis,
                inner,
            } => {
                let vars = [*x];
                let mut bufs = self.take_grads(grads, &vars);
                if let Some(dx) = bufs[0].as_mut() {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * axis * inner + i;
                            let dot = (0..*axis).fold(T::zero(), |acc, a| {
                                let idx = base + a * inner;
                                acc + g[idx] * out[idx]
                            });
                            for a in 0..*axis {
                                let idx = base + a * inner;
                                dx[idx] += out[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
                Self::put_grads(grads, &vars, bufs);
            }
            Op::ChannelMean(x) => {
                let vars = [*x];
                let mut bufs = self.take_grads(grads, &vars);
                if let Some(dx) = bufs[0].as_mut() {
                    let plane = dx.len() / g.len();
                    let inv = T::one() / T::lit(plane as f64);
                    for (ch, &gv) in dx.chunks_exact_mut(plane).zip(g) {
                        ch.iter_mut().for_each(|a| *a += gv * inv);
                    }
                }
                Self::put_grads(grads, &vars, bufs);
            }
            Op::SpatialMean(x) => {
                let vars = [*x];
                let mut bufs = self.take_grads(grads, &vars);
                if let Some(dx) = bufs[0].as_mut() {
                    let c = dx.len() / g.len();
                    let inv = T::one() / T::lit(c as f64);
                    for ch in dx.chunks_exact_mut(g.len()) {
                        ch.iter_mut().zip(g).for_each(|(a, &gv)| *a += gv * inv);
                    }
                }
                Self::put_grads(grads, &vars, bufs);
            }
            Op::SpatialMax { x, argmax } => {
                let vars = [*x];
                let mut bufs = self.take_grads(grads, &vars);
                if let Some(dx) = bufs[0].as_mut() {
                    let plane = g.len();
                    for (p, (&gv, &ch)) in g.iter().zip(argmax).enumerate() {
                        dx[ch * plane + p] += gv;
                    }
                }
                Self::put_grads(grads, &vars, bufs);
            }
            Op::ScaleChannels { x, gate } => {
                let vars = [*x, *gate];
                let mut bufs = self.take_grads(grads, &vars);
                let (xs, gs) = (val(*x), val(*gate));
                let plane = xs.len() / gs.len();
                if let Some(dx) = bufs[0].as_mut() {
                    for ((d, gr), &gv) in dx.chunks_exact_mut(plane).zip(g.chunks_exact(plane)).zip(gs) {
                        d.iter_mut().zip(gr).for_each(|(a, &b)| *a += b * gv);
                    }
                }
                if let Some(dg) = bufs[1].as_mut() {
                    for ((d, gr), xr) in dg.iter_mut().zip(g.chunks_exact(plane)).zip(xs.chunks_exact(plane)) {
                        *d += gr.iter().zip(xr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    }
                }
                Self::put_grads(grads, &vars, bufs);
            }
            Op::ScaleSpatial { x, gate } => {
                let vars = [*x, *gate];
                let mut bufs = self.take_grads(grads, &vars);
                let (xs, gs) = (val(*x), val(*gate));
                let plane = gs.len();
                if let Some(dx) = bufs[0].as_mut() {
                    for (d, gr) in dx.chunks_exact_mut(plane).zip(g.chunks_exact(plane)) {
                        for ((a, &b), &gv) in d.iter_mut().zip(gr).zip(gs) {
                            *a += b * gv;
                        }
                    }
                }
                if let Some(dg) = bufs[1].as_mut() {
                    for (gr, xr) in g.chunks_exact(plane).zip(xs.chunks_exact(plane)) {
                        for ((a, &b), &xv) in dg.iter_mut().zip(gr).zip(xr) {
                            *a += b * xv;
                        }
                    }
                }
                Self::put_grads(grads, &vars, bufs);
            }
            Op::Concat(parts) => {
                let mut bufs = self.take_grads(grads, parts);
                let mut offset = 0;
                for (p, buf) in parts.iter().zip(bufs.iter_mut()) {
                    let n = self.nodes[p.0].value.numel();
                    if let Some(d) = buf {
                        d.iter_mut().zip(&g[offset..offset + n]).for_each(|(a, &b)| *a += b);
                    }
                    offset += n;
                }
                Self::put_grads(grads, parts, bufs);
            }
            Op::Patchify { x, dims } | Op::Unpatchify { x, dims } => {
                let vars = [*x];
                let mut bufs = self.take_grads(grads, &vars);
                if let Some(dx) = bufs[0].as_mut() {
                    let mut tmp = vec![T::zero(); g.len()];
                    let inverse = matches!(self.nodes[i].op, Op::Patchify { .. });
                    permute_patches(g, &mut tmp, *dims, inverse);
                    dx.iter_mut().zip(&tmp).for_each(|(a, &b)| *a += b);
                }
                Self::put_grads(grads, &vars, bufs);
            }
            Op::Attention { q, k, v, geom, probs } => {
                let vars = [*q, *k, *v];
                let mut bufs = self.take_grads(grads, &vars);
                let (bq, rest) = bufs.split_at_mut(1);
                let (bk, bv) = rest.split_at_mut(1);
                kernels::attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    g,
                    *geom,
                    bq[0].as_deref_mut(),
                    bk[0].as_deref_mut(),
                    bv[0].as_deref_mut(),
                );
                Self::put_grads(grads, &vars, bufs);
            }
            Op::BceDice { p, y, eps } => {
                let vars = [*p];
                let mut bufs = self.take_grads(grads, &vars);
                if let Some(dp) = bufs[0].as_mut() {
                    let shape = self.shape(*p);
                    crate::loss::bce_dice_grad(val(*p), y.data(), shape[0], shape[1], *eps, g[0], dp);
                }
                Self::put_grads(grads, &vars, bufs);
            }
        }
    }
}

/// Moves data between `C×H×W` layout and patch-token layout.
/// `inverse = false` maps spatial → tokens.
/// `dst = srcᵀ` for a row-major `rows × cols` matrix, in cache tiles.
fn transpose<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

fn permute_patches<T: Scalar>(src: &[T], dst: &mut [T], dims: [usize; 4], inverse: bool) {
    let [c, h, w, p] = dims;
    if p == 1 {
        // plain C×HW ↔ HW×C transpose
        let (rows, cols) = if inverse { (h * w, c) } else { (c, h * w) };
        transpose(src, dst, rows, cols);
        return;
    }
    let pw = w / p;
    let width = c * p * p;
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            let feat = (ch * p + y % p) * p;
            let first = (y / p) * pw;
            for tx in 0..pw {
                let tok = (first + tx) * width + feat;
                let spatial = row + tx * p;
                if inverse {
                    dst[spatial..spatial + p].copy_from_slice(&src[tok..tok + p]);
                } else {
                    dst[tok..tok + p].copy_from_slice(&src[spatial..spatial + p]);
                }
            }
        }
    }
}
