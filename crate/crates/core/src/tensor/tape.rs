//! Reverse-mode differentiation tape.
//!
//! Every op appends a node holding its forward value and enough context to
//! run its vector-Jacobian product. Nodes are only ever appended, so the node
//! order is already a topological order and `backward` walks it in reverse.
//! A tape supports exactly one `backward` call.

use super::kernels::{self, ConvGeom};
use super::value::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        groups: usize,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    AdaptiveAvgPool(Var),
    Upsample(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddChannels {
        x: Var,
        v: Var,
    },
    MulLastDim {
        x: Var,
        v: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    GlobalAvgPool(Var),
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumKeepAxis {
        input: Var,
        axis: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss w.r.t. a leaf, available after [`Tape::backward`].
    /// `None` when the loss does not depend on the leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ----------------------------------------------------------------------
    // Forward ops

    /// 2-D convolution over `[N, Cin, H, W]` with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", format!("input rank {} (want 4)", xs.len())));
        }
        if ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("weight rank {} (want 4)", ws.len())));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if groups == 0 || cin % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin} not divisible by groups {groups}"),
            ));
        }
        if cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("output channels {cout} not divisible by groups {groups}"),
            ));
        }
        if cg != cin / groups {
            return Err(Error::shape(
                "conv2d",
                format!("weight in-channels {cg} != input channels {cin} / groups {groups}"),
            ));
        }
        if h + 2 * padding < kh {
            return Err(Error::shape(
                "conv2d",
                format!("height {h} + 2*padding {padding} < kernel height {kh}"),
            ));
        }
        if w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("width {w} + 2*padding {padding} < kernel width {kw}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} != [{cout}]", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            channels: cg,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let out = conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            n,
            cout,
            groups,
            &geom,
        );
        let value = Tensor::new(vec![n, cout, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                groups,
                geom,
            },
            &inputs,
        ))
    }

    /// `input · weightᵀ + bias` over the trailing dimension.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 {
            return Err(Error::shape("linear", format!("weight rank {} (want 2)", ws.len())));
        }
        let (dout, din) = (ws[0], ws[1]);
        if xs.last() != Some(&din) {
            return Err(Error::shape(
                "linear",
                format!("input trailing dim {:?} != weight in-features {din}", xs.last()),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} != [{dout}]", self.shape(b)),
                ));
            }
        }
        let rows = self.value(input).numel() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bd);
            }
        }
        kernels::gemm_nt(
            rows,
            din,
            dout,
            self.value(input).data(),
            self.value(weight).data(),
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, &inputs))
    }

    /// Normalizes each trailing-axis vector with population variance.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let c = *xs
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if c == 0 {
            return Err(Error::shape("layer_norm", "channel axis is empty"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{c}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = x.len() / c;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[input, gamma, beta],
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| {
            let v = x.data()[i];
            v * std_normal_cdf(v)
        });
        self.push(out, Op::Gelu(input), &[input])
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for shape {xs:?}"),
            ));
        }
        let (outer, len, inner) = kernels::split_axis(&xs, axis);
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::Softmax { input, axis }, &[input]))
    }

    /// Adaptive average pooling of `[N, C, H, W]` to `[N, C, out_h, out_w]`.
    pub fn adaptive_avg_pool2d(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("adaptive_avg_pool2d", format!("input rank {}", xs.len())));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if out_h == 0 || out_h > h || out_w == 0 || out_w > w {
            return Err(Error::shape(
                "adaptive_avg_pool2d",
                format!("target {out_h}x{out_w} outside 1..={h} x 1..={w}"),
            ));
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for by in 0..out_h {
                let (y0, y1) = kernels::adaptive_bin(by, h, out_h);
                for bx in 0..out_w {
                    let (x0, x1) = kernels::adaptive_bin(bx, w, out_w);
                    let mut s = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            s += plane[yy * w + xx];
                        }
                    }
                    out[(p * out_h + by) * out_w + bx] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool(input), &[input]))
    }

    /// Bilinear upsampling with half-pixel centers (`align_corners = false`).
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample_bilinear", format!("input rank {}", xs.len())));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if out_h < h || out_w < w {
            return Err(Error::shape(
                "upsample_bilinear",
                format!("cannot downscale {h}x{w} to {out_h}x{out_w}"),
            ));
        }
        let ty = kernels::bilinear_taps(h, out_h);
        let tx = kernels::bilinear_taps(w, out_w);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::Upsample(input), &[input]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(x.shape(), |i| f(x.data()[i], y.data()[i]));
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a per-channel offset to `[N, C, H, W]`. The offset is either `[C]`
    /// (shared across the batch) or `[N, C]` (one row per sample).
    pub fn add_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let vs = self.shape(v).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("add_channels", format!("input rank {}", xs.len())));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let per_sample = if vs == [c] {
            false
        } else if vs == [n, c] {
            true
        } else {
            return Err(Error::shape(
                "add_channels",
                format!("offset shape {vs:?} fits neither [{c}] nor [{n}, {c}]"),
            ));
        };
        let xd = self.value(x).data();
        let vd = self.value(v).data();
        let mut out = xd.to_vec();
        for s in 0..n {
            for ch in 0..c {
                let off = if per_sample { vd[s * c + ch] } else { vd[ch] };
                for o in &mut out[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                    *o += off;
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::AddChannels { x, v }, &[x, v]))
    }

    /// Scales the trailing axis of `x` by the vector `v`.
    pub fn mul_last_dim(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| Error::shape("mul_last_dim", "scalar input"))?;
        if self.shape(v) != [c] {
            return Err(Error::shape(
                "mul_last_dim",
                format!("scale shape {:?} != [{c}]", self.shape(v)),
            ));
        }
        let (xv, vv) = (self.value(x), self.value(v));
        let out = Tensor::from_fn(&xs, |i| xv.data()[i] * vv.data()[i % c]);
        Ok(self.push(out, Op::MulLastDim { x, v }, &[x, v]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} does not match {base:?} outside axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis];
                let d = self.value(*v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) along axis {axis} of {xs:?}", start + len),
            ));
        }
        let (outer, full, inner) = kernels::split_axis(&xs, axis);
        let d = self.value(input).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Narrow { input, axis, start }, &[input]))
    }

    /// Mean over the spatial axes of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
            return Err(Error::shape("global_avg_pool", format!("input {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let d = self.value(x).data();
        let out: Vec<f64> = d.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} are not a permutation for rank {}", xs.len()),
            ));
        }
        let out = permute_data(self.value(input).data(), &xs, axes);
        let shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Permute {
                input,
                axes: axes.to_vec(),
            },
            &[input],
        ))
    }

    /// `[N, C, H, W] -> [N, H, W, C]`
    pub fn to_channels_last(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[0, 2, 3, 1])
    }

    /// `[N, H, W, C] -> [N, C, H, W]`
    pub fn to_channels_first(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[0, 3, 1, 2])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sums over every axis except `axis`, giving a vector of that axis' length.
    pub fn sum_keep_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape("sum_keep_axis", format!("axis {axis} for {xs:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&xs, axis);
        let d = self.value(input).data();
        let mut out = vec![0.0; len];
        for o in 0..outer {
            for (k, acc) in out.iter_mut().enumerate() {
                let base = (o * len + k) * inner;
                *acc += d[base..base + inner].iter().sum::<f64>();
            }
        }
        let value = Tensor::new(vec![len], out)?;
        Ok(self.push(value, Op::SumKeepAxis { input, axis }, &[input]))
    }

    /// Mean negative log-likelihood of `labels` under a softmax over axis 1
    /// of `[N, K]` or `[N, K, H, W]` logits. `labels` has one entry per
    /// non-class position, in row-major order.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.shape(logits).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {xs:?} need a class axis at 1"),
            ));
        }
        let (n, k) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if labels.len() != n * inner || labels.is_empty() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for logits {xs:?}", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for s in 0..n {
            for i in 0..inner {
                let idx = |c: usize| (s * k + c) * inner + i;
                let max = (0..k).map(|c| x[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (x[idx(c)] - max).exp()).sum();
                let lse = max + z.ln();
                for c in 0..k {
                    probs[idx(c)] = (x[idx(c)] - lse).exp();
                }
                total += lse - x[idx(labels[s * inner + i])];
            }
        }
        let loss = total / labels.len() as f64;
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

    // ----------------------------------------------------------------------
    // Backward

    /// Accumulates `∂loss/∂leaf` into every gradient-requiring leaf.
    ///
    /// Fails for non-scalar losses and when called a second time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let shape = self.nodes[idx].value.shape().to_vec();
                self.nodes[idx].grad = Some(Tensor::new(shape, g)?);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        // Lazily allocates the gradient buffer of `v` and hands it to `f`.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &nodes[idx].op {
            Op::Leaf => unreachable!(),
            Op::Conv2d {
                input,
                weight,
                bias,
                groups,
                geom,
            } => {
                let x = nodes[input.0].value.data();
                let w = nodes[weight.0].value.data();
                let n = out.shape()[0];
                let cout = out.shape()[1];
                let coutg = cout / groups;
                let in_plane = geom.channels * geom.height * geom.width;
                let cin = geom.channels * groups;
                let out_hw = geom.col_cols();
                let rows = geom.col_rows();
                let mut cols = vec![0.0; rows * out_hw];
                let mut dcols = vec![0.0; rows * out_hw];
                let want_x = nodes[input.0].requires_grad;
                let want_w = nodes[weight.0].requires_grad;
                let mut dw = vec![0.0; if want_w { w.len() } else { 0 }];
                let mut dx = vec![0.0; if want_x { x.len() } else { 0 }];
                for s in 0..n {
                    for grp in 0..*groups {
                        let x_off = s * cin * geom.height * geom.width + grp * in_plane;
                        let g_off = (s * cout + grp * coutg) * out_hw;
                        let gy = &g[g_off..g_off + coutg * out_hw];
                        let w_g = &w[grp * coutg * rows..(grp + 1) * coutg * rows];
                        if want_w {
                            kernels::im2col(&x[x_off..x_off + in_plane], geom, &mut cols);
                            kernels::gemm_nt(
                                coutg,
                                out_hw,
                                rows,
                                gy,
                                &cols,
                                &mut dw[grp * coutg * rows..(grp + 1) * coutg * rows],
                            );
                        }
                        if want_x {
                            dcols.fill(0.0);
                            kernels::gemm_tn(rows, coutg, out_hw, w_g, gy, &mut dcols);
                            kernels::col2im(&dcols, geom, &mut dx[x_off..x_off + in_plane]);
                        }
                    }
                }
                if want_x {
                    acc(*input, &mut |b| add_into(b, &dx));
                }
                if want_w {
                    acc(*weight, &mut |b| add_into(b, &dw));
                }
                if let Some(bv) = bias {
                    acc(*bv, &mut |b| {
                        for s in 0..n {
                            for (c, bc) in b.iter_mut().enumerate() {
                                let off = (s * cout + c) * out_hw;
                                *bc += g[off..off + out_hw].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = nodes[input.0].value.data();
                let w = nodes[weight.0].value.data();
                let ws = nodes[weight.0].value.shape();
                let (dout, din) = (ws[0], ws[1]);
                let rows = x.len() / din;
                acc(*input, &mut |b| kernels::gemm_nn(rows, dout, din, g, w, b));
                acc(*weight, &mut |b| kernels::gemm_tn(dout, rows, din, g, x, b));
                if let Some(bv) = bias {
                    acc(*bv, &mut |b| {
                        for r in 0..rows {
                            add_into(b, &g[r * dout..(r + 1) * dout]);
                        }
                    });
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = nodes[gamma.0].value.data();
                let c = gam.len();
                let rows = xhat.len() / c;
                acc(*input, &mut |b| {
                    for r in 0..rows {
                        let gy = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = gy[j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            let d = gy[j] * gam[j];
                            b[r * c + j] += rstd[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                acc(*gamma, &mut |b| {
                    for (i, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                        b[i % c] += gv * xh;
                    }
                });
                acc(*beta, &mut |b| {
                    for (i, gv) in g.iter().enumerate() {
                        b[i % c] += gv;
                    }
                });
            }
            Op::Gelu(input) => {
                let x = nodes[input.0].value.data();
                acc(*input, &mut |b| {
                    for ((bv, &xv), gv) in b.iter_mut().zip(x).zip(g) {
                        *bv += gv * (std_normal_cdf(xv) + xv * std_normal_pdf(xv));
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let y = out.data();
                let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
                acc(*input, &mut |b| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                b[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::AdaptiveAvgPool(input) => {
                let xs = nodes[input.0].value.shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                acc(*input, &mut |b| {
                    for p in 0..xs[0] * xs[1] {
                        for by in 0..oh {
                            let (y0, y1) = kernels::adaptive_bin(by, h, oh);
                            for bx in 0..ow {
                                let (x0, x1) = kernels::adaptive_bin(bx, w, ow);
                                let share =
                                    g[(p * oh + by) * ow + bx] / ((y1 - y0) * (x1 - x0)) as f64;
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        b[p * h * w + yy * w + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample(input) => {
                let xs = nodes[input.0].value.shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let ty = kernels::bilinear_taps(h, oh);
                let tx = kernels::bilinear_taps(w, ow);
                acc(*input, &mut |b| {
                    for p in 0..xs[0] * xs[1] {
                        let plane = &mut b[p * h * w..(p + 1) * h * w];
                        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gv = gp[oy * ow + ox];
                                plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                                plane[y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b2) => {
                acc(*a, &mut |b| add_into(b, g));
                acc(*b2, &mut |b| add_into(b, g));
            }
            Op::Sub(a, b2) => {
                acc(*a, &mut |b| add_into(b, g));
                acc(*b2, &mut |b| {
                    for (bv, gv) in b.iter_mut().zip(g) {
                        *bv -= gv;
                    }
                });
            }
            Op::Mul(a, b2) => {
                let (av, bvv) = (nodes[a.0].value.data(), nodes[b2.0].value.data());
                acc(*a, &mut |b| {
                    for i in 0..b.len() {
                        b[i] += g[i] * bvv[i];
                    }
                });
                acc(*b2, &mut |b| {
                    for i in 0..b.len() {
                        b[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b2) => {
                let (av, bvv) = (nodes[a.0].value.data(), nodes[b2.0].value.data());
                acc(*a, &mut |b| {
                    for i in 0..b.len() {
                        b[i] += g[i] / bvv[i];
                    }
                });
                acc(*b2, &mut |b| {
                    for i in 0..b.len() {
                        b[i] -= g[i] * av[i] / (bvv[i] * bvv[i]);
                    }
                });
            }
            Op::AddChannels { x, v } => {
                acc(*x, &mut |b| add_into(b, g));
                let xs = out.shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let per_sample = nodes[v.0].value.rank() == 2;
                acc(*v, &mut |b| {
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let t: f64 = g[off..off + hw].iter().sum();
                            if per_sample {
                                b[s * c + ch] += t;
                            } else {
                                b[ch] += t;
                            }
                        }
                    }
                });
            }
            Op::MulLastDim { x, v } => {
                let (xd, vd) = (nodes[x.0].value.data(), nodes[v.0].value.data());
                let c = vd.len();
                acc(*x, &mut |b| {
                    for i in 0..b.len() {
                        b[i] += g[i] * vd[i % c];
                    }
                });
                acc(*v, &mut |b| {
                    for i in 0..g.len() {
                        b[i % c] += g[i] * xd[i];
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    acc(*v, &mut |b| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(
                                &mut b[o * len * inner..(o + 1) * len * inner],
                                &g[src..src + len * inner],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let (outer, full, inner) = kernels::split_axis(nodes[input.0].value.shape(), *axis);
                let len = out.shape()[*axis];
                acc(*input, &mut |b| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        add_into(
                            &mut b[dst..dst + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = nodes[x.0].value.shape();
                let hw = xs[2] * xs[3];
                acc(*x, &mut |b| {
                    for (p, chunk) in b.chunks_mut(hw).enumerate() {
                        let share = g[p] / hw as f64;
                        for v in chunk {
                            *v += share;
                        }
                    }
                });
            }
            Op::Permute { input, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(g, out.shape(), &inverse);
                acc(*input, &mut |b| add_into(b, &back));
            }
            Op::Scale(x, factor) => {
                acc(*x, &mut |b| {
                    for (bv, gv) in b.iter_mut().zip(g) {
                        *bv += gv * factor;
                    }
                });
            }
            Op::AddScalar(x) => acc(*x, &mut |b| add_into(b, g)),
            Op::Sum(x) => acc(*x, &mut |b| {
                for v in b.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::Mean(x) => acc(*x, &mut |b| {
                let share = g[0] / b.len() as f64;
                for v in b.iter_mut() {
                    *v += share;
                }
            }),
            Op::SumKeepAxis { input, axis } => {
                let (outer, len, inner) = kernels::split_axis(nodes[input.0].value.shape(), *axis);
                acc(*input, &mut |b| {
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            for v in &mut b[base..base + inner] {
                                *v += g[k];
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let xs = nodes[logits.0].value.shape();
                let k = xs[1];
                let inner: usize = xs[2..].iter().product();
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |b| {
                    for (i, (bv, p)) in b.iter_mut().zip(probs).enumerate() {
                        let s = i / (k * inner);
                        let c = (i / inner) % k;
                        let pos = i % inner;
                        let t = if labels[s * inner + pos] == c { 1.0 } else { 0.0 };
                        *bv += scale * (p - t);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the source for each output axis
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    n: usize,
    cout: usize,
    groups: usize,
    geom: &ConvGeom,
) -> Vec<f64> {
    let coutg = cout / groups;
    let rows = geom.col_rows();
    let out_hw = geom.col_cols();
    let in_plane = geom.channels * geom.height * geom.width;
    let cin = geom.channels * groups;
    let mut out = vec![0.0; n * cout * out_hw];
    let mut cols = vec![0.0; rows * out_hw];
    for s in 0..n {
        for grp in 0..groups {
            let x_off = s * cin * geom.height * geom.width + grp * in_plane;
            kernels::im2col(&x[x_off..x_off + in_plane], geom, &mut cols);
            let o_off = (s * cout + grp * coutg) * out_hw;
            let dst = &mut out[o_off..o_off + coutg * out_hw];
            if let Some(b) = bias {
                for (c, plane) in dst.chunks_mut(out_hw).enumerate() {
                    plane.fill(b[grp * coutg + c]);
                }
            }
            kernels::gemm_nn(
                coutg,
                rows,
                out_hw,
                &w[grp * coutg * rows..(grp + 1) * coutg * rows],
                &cols,
                dst,
            );
        }
    }
    out
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
