// The closed primitive catalog: forward evaluation and backward rules.

use std::f32::consts::PI;

use super::kernels::{self, ConvGeom};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{permute_data, Tensor};

/// One entry of the primitive catalog, with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Elementwise `a + b` with broadcasting.
    Add,
    /// Elementwise `a - b` with broadcasting.
    Subtract,
    /// Elementwise `a ∘ b` with broadcasting.
    HadamardMultiply,
    ScalarScale { factor: f32 },
    /// `[..., m, k] × [..., k, n]`.
    Matmul,
    /// `x[..., in] · w[in, out] (+ b[out])`.
    Linear,
    /// Stride-1 NHWC convolution, `x[N,H,W,Ci] ⋆ w[K,K,Ci,Co] (+ b[Co])`.
    Conv2d { padding: usize },
    /// 3×3, stride 2, padding 1, over `x[N,H,W,C]`.
    MaxPool2d,
    /// Inputs `x[..., C], gamma, beta, running_mean, running_var`.
    BatchNorm { train: bool, eps: f32 },
    Reshape { shape: Vec<usize> },
    PermuteAxes { perm: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Sum { axes: Vec<usize>, keepdim: bool },
    Mean { axes: Vec<usize>, keepdim: bool },
    Sigmoid,
    Tanh,
    Log,
    Exp,
    /// `x[..., G, D] × w[G, D, K] -> [..., G, K]`, contracting `D` per group.
    GroupedContraction,
    /// Spike emission `[x ≥ v_th]` with the arctan surrogate derivative.
    /// With `surrogate_forward` the forward also uses the smooth surrogate.
    HeavisideWithSurrogate { v_th: f32, width: f32, surrogate_forward: bool },
}

/// Loosely typed attributes for [`Primitive::from_name`].
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub factor: Option<f32>,
    pub padding: Option<usize>,
    pub train: bool,
    pub eps: Option<f32>,
    pub shape: Option<Vec<usize>>,
    pub perm: Option<Vec<usize>>,
    pub axis: Option<usize>,
    pub axes: Option<Vec<usize>>,
    pub keepdim: bool,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub v_th: Option<f32>,
    pub width: Option<f32>,
    pub surrogate_forward: bool,
}

fn need<T>(v: Option<T>, op: &str, attr: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("primitive `{op}` requires attribute `{attr}`")))
}

impl Primitive {
    pub const CATALOG: [&'static str; 21] = [
        "add",
        "subtract",
        "hadamard_multiply",
        "scalar_scale",
        "matmul",
        "linear",
        "conv2d",
        "maxpool2d",
        "batchnorm",
        "reshape",
        "permute_axes",
        "concat",
        "slice",
        "sum",
        "mean",
        "sigmoid",
        "tanh",
        "log",
        "exp",
        "grouped_contraction",
        "heaviside_with_surrogate",
    ];

    pub fn from_name(name: &str, attrs: &Attrs) -> Result<Primitive> {
        Ok(match name {
            "add" => Primitive::Add,
            "subtract" => Primitive::Subtract,
            "hadamard_multiply" => Primitive::HadamardMultiply,
            "scalar_scale" => Primitive::ScalarScale { factor: need(attrs.factor, name, "factor")? },
            "matmul" => Primitive::Matmul,
            "linear" => Primitive::Linear,
            "conv2d" => Primitive::Conv2d { padding: attrs.padding.unwrap_or(0) },
            "maxpool2d" => Primitive::MaxPool2d,
            "batchnorm" => Primitive::BatchNorm { train: attrs.train, eps: attrs.eps.unwrap_or(1e-5) },
            "reshape" => Primitive::Reshape { shape: need(attrs.shape.clone(), name, "shape")? },
            "permute_axes" => Primitive::PermuteAxes { perm: need(attrs.perm.clone(), name, "perm")? },
            "concat" => Primitive::Concat { axis: need(attrs.axis, name, "axis")? },
            "slice" => Primitive::Slice {
                axis: need(attrs.axis, name, "axis")?,
                start: need(attrs.start, name, "start")?,
                end: need(attrs.end, name, "end")?,
            },
            "sum" => Primitive::Sum { axes: need(attrs.axes.clone(), name, "axes")?, keepdim: attrs.keepdim },
            "mean" => Primitive::Mean { axes: need(attrs.axes.clone(), name, "axes")?, keepdim: attrs.keepdim },
            "sigmoid" => Primitive::Sigmoid,
            "tanh" => Primitive::Tanh,
            "log" => Primitive::Log,
            "exp" => Primitive::Exp,
            "grouped_contraction" => Primitive::GroupedContraction,
            "heaviside_with_surrogate" => Primitive::HeavisideWithSurrogate {
                v_th: attrs.v_th.unwrap_or(1.0),
                width: attrs.width.unwrap_or(2.0),
                surrogate_forward: attrs.surrogate_forward,
            },
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::HadamardMultiply => "hadamard_multiply",
            Primitive::ScalarScale { .. } => "scalar_scale",
            Primitive::Matmul => "matmul",
            Primitive::Linear => "linear",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::MaxPool2d => "maxpool2d",
            Primitive::BatchNorm { .. } => "batchnorm",
            Primitive::Reshape { .. } => "reshape",
            Primitive::PermuteAxes { .. } => "permute_axes",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::GroupedContraction => "grouped_contraction",
            Primitive::HeavisideWithSurrogate { .. } => "heaviside_with_surrogate",
        }
    }

    /// True for primitives whose forward is differentiable everywhere on
    /// their domain (used by the gradient-check harness).
    pub fn is_smooth(&self) -> bool {
        !matches!(
            self,
            Primitive::MaxPool2d
                | Primitive::HeavisideWithSurrogate { surrogate_forward: false, .. }
        )
    }
}

/// Values a primitive keeps for its backward rule.
#[derive(Clone, Debug, Default)]
pub(crate) enum Saved {
    #[default]
    Nothing,
    Norm { mean: Vec<f32>, var: Vec<f32>, mean64: Vec<f64>, inv_std64: Vec<f64> },
    Argmax(Vec<u32>),
}

/// Derivative of the arctan surrogate `atan(π·a·(h − v_th)/2)/π + ½`.
#[inline]
pub fn arctan_surrogate_grad(h: f32, v_th: f32, width: f32) -> f32 {
    let z = PI * width * (h - v_th) / 2.0;
    (width / 2.0) / (1.0 + z * z)
}

#[inline]
pub fn arctan_surrogate(h: f32, v_th: f32, width: f32) -> f32 {
    (PI * width * (h - v_th) / 2.0).atan() / PI + 0.5
}

fn arity(op: &Primitive, n: usize) -> Result<()> {
    let ok = match op {
        Primitive::Add
        | Primitive::Subtract
        | Primitive::HadamardMultiply
        | Primitive::Matmul
        | Primitive::GroupedContraction => n == 2,
        Primitive::Linear | Primitive::Conv2d { .. } => n == 2 || n == 3,
        Primitive::BatchNorm { .. } => n == 5,
        Primitive::Concat { .. } => n >= 1,
        _ => n == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Shape {
            op: op.name(),
            detail: format!("wrong number of inputs: {n}"),
        })
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return shape_err(op, format!("cannot broadcast {a:?} with {b:?}"));
        };
    }
    Ok(out)
}

fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = kernels::broadcast_strides(a.shape(), &out_shape);
    let sb = kernels::broadcast_strides(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let mut out = vec![0.0f32; n];
    let (ad, bd) = (a.data(), b.data());
    kernels::for_each_broadcast_row(&out_shape, &sa, &sb, |o, ia, ib, len, stpa, stpb| {
        let dst = &mut out[o..o + len];
        match (stpa, stpb) {
            (1, 1) => {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[ia + j], bd[ib + j]);
                }
            }
            (1, 0) => {
                let y = bd[ib];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[ia + j], y);
                }
            }
            (0, 1) => {
                let x = ad[ia];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = f(x, bd[ib + j]);
                }
            }
            _ => {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[ia + j * stpa], bd[ib + j * stpb]);
                }
            }
        }
    });
    Tensor::new(out_shape, out)
}

/// Expands `g` laid out as `small` (broadcast-compatible) to `big`.
fn expand_to(g: &[f32], small: &[usize], big: &[usize]) -> Vec<f32> {
    if small == big {
        return g.to_vec();
    }
    let s = kernels::broadcast_strides(small, big);
    let zeros = vec![0; big.len()];
    let n: usize = big.iter().product();
    let mut out = vec![0.0; n];
    kernels::for_each_broadcast_row(big, &s, &zeros, |o, a, _, len, step, _| {
        for j in 0..len {
            out[o + j] = g[a + j * step];
        }
    });
    out
}

fn keep_shape(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut keep = shape.to_vec();
    for &ax in axes {
        if ax >= shape.len() {
            return shape_err(op, format!("axis {ax} out of range for {shape:?}"));
        }
        keep[ax] = 1;
    }
    Ok(keep)
}

fn drop_axes(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        vec![1]
    } else {
        out
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn forward(op: &Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    arity(op, inputs.len())?;
    let name = op.name();
    let x = inputs[0];
    let out = match op {
        Primitive::Add => binary_broadcast(name, x, inputs[1], |a, b| a + b)?,
        Primitive::Subtract => binary_broadcast(name, x, inputs[1], |a, b| a - b)?,
        Primitive::HadamardMultiply => binary_broadcast(name, x, inputs[1], |a, b| a * b)?,
        Primitive::ScalarScale { factor } => x.map(|v| v * factor),
        Primitive::Matmul => {
            let (batch, m, k, n) = matmul_dims(x.shape(), inputs[1].shape())?;
            let (a, b) = (x.data(), inputs[1].data());
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                kernels::gemm_acc(
                    m,
                    k,
                    n,
                    &a[bi * m * k..],
                    &b[bi * k * n..],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::new(shape, out)?
        }
        Primitive::Linear => {
            let (rows, fin, fout) = linear_dims(inputs)?;
            let mut out = vec![0.0; rows * fout];
            if let Some(b) = inputs.get(2) {
                for r in 0..rows {
                    out[r * fout..(r + 1) * fout].copy_from_slice(b.data());
                }
            }
            kernels::gemm_acc(rows, fin, fout, x.data(), inputs[1].data(), &mut out);
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = fout;
            Tensor::new(shape, out)?
        }
        Primitive::Conv2d { padding } => {
            let g = conv_geom(inputs, *padding)?;
            let (ho, wo) = g.out_hw();
            let mut out = vec![0.0; g.n * ho * wo * g.co];
            if let Some(b) = inputs.get(2) {
                for px in 0..g.n * ho * wo {
                    out[px * g.co..(px + 1) * g.co].copy_from_slice(b.data());
                }
            }
            kernels::conv2d_forward(&g, x.data(), inputs[1].data(), &mut out);
            Tensor::new(vec![g.n, ho, wo, g.co], out)?
        }
        Primitive::MaxPool2d => {
            let s = x.shape();
            if s.len() != 4 {
                return shape_err(name, format!("expected [N,H,W,C], got {s:?}"));
            }
            let (ho, wo, out, arg) = kernels::maxpool_forward(s[0], s[1], s[2], s[3], x.data());
            return Ok((Tensor::new(vec![s[0], ho, wo, s[3]], out)?, Saved::Argmax(arg)));
        }
        Primitive::BatchNorm { train, eps } => return batchnorm_forward(inputs, *train, *eps),
        Primitive::Reshape { shape } => {
            let n: usize = shape.iter().product();
            if n != x.numel() {
                return shape_err(name, format!("cannot reshape {:?} into {shape:?}", x.shape()));
            }
            Tensor::new(shape.clone(), x.data().to_vec())?
        }
        Primitive::PermuteAxes { perm } => {
            let (shape, data) = permute_data(x.shape(), x.data(), perm)?;
            Tensor::new(shape, data)?
        }
        Primitive::Concat { axis } => concat_forward(inputs, *axis)?,
        Primitive::Slice { axis, start, end } => {
            let s = x.shape();
            if *axis >= s.len() || start >= end || *end > s[*axis] {
                return shape_err(name, format!("slice {start}..{end} of axis {axis} in {s:?}"));
            }
            let (outer, ext, inner) = split_at_axis(s, *axis);
            let len = (end - start) * inner;
            let mut out = Vec::with_capacity(outer * len);
            for o in 0..outer {
                let base = o * ext * inner + start * inner;
                out.extend_from_slice(&x.data()[base..base + len]);
            }
            let mut shape = s.to_vec();
            shape[*axis] = end - start;
            Tensor::new(shape, out)?
        }
        Primitive::Sum { axes, keepdim } | Primitive::Mean { axes, keepdim } => {
            let keep = keep_shape(name, x.shape(), axes)?;
            let mut data = kernels::reduce_to_shape(x.data(), x.shape(), &keep);
            if matches!(op, Primitive::Mean { .. }) {
                let count = (x.numel() / data.len()) as f32;
                data.iter_mut().for_each(|v| *v /= count);
            }
            let shape = if *keepdim { keep } else { drop_axes(x.shape(), axes) };
            Tensor::new(shape, data)?
        }
        Primitive::Sigmoid => x.map(|v| 1.0 / (1.0 + (-v).exp())),
        Primitive::Tanh => x.map(f32::tanh),
        Primitive::Log => {
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain { op: name, detail: format!("log of {bad}") });
            }
            x.map(f32::ln)
        }
        Primitive::Exp => x.map(f32::exp),
        Primitive::GroupedContraction => {
            let (m, g, d, k) = grouped_dims(x.shape(), inputs[1].shape())?;
            let (xd, wd) = (x.data(), inputs[1].data());
            let mut out = vec![0.0; m * g * k];
            for mi in 0..m {
                for gi in 0..g {
                    kernels::gemm_acc(
                        1,
                        d,
                        k,
                        &xd[(mi * g + gi) * d..],
                        &wd[gi * d * k..],
                        &mut out[(mi * g + gi) * k..(mi * g + gi + 1) * k],
                    );
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = k;
            Tensor::new(shape, out)?
        }
        Primitive::HeavisideWithSurrogate { v_th, width, surrogate_forward } => {
            if *surrogate_forward {
                x.map(|h| arctan_surrogate(h, *v_th, *width))
            } else {
                x.map(|h| if h >= *v_th { 1.0 } else { 0.0 })
            }
        }
    };
    Ok((out, Saved::Nothing))
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if a.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return shape_err("matmul", format!("{a:?} × {b:?}"));
    }
    let r = a.len();
    let (m, k) = (a[r - 2], a[r - 1]);
    let (k2, n) = (b[r - 2], b[r - 1]);
    if k != k2 {
        return shape_err("matmul", format!("inner extents differ: {a:?} × {b:?}"));
    }
    Ok((a[..r - 2].iter().product(), m, k, n))
}

fn linear_dims(inputs: &[&Tensor]) -> Result<(usize, usize, usize)> {
    let (x, w) = (inputs[0].shape(), inputs[1].shape());
    if w.len() != 2 || *x.last().unwrap() != w[0] {
        return shape_err("linear", format!("input {x:?} with weight {w:?}"));
    }
    if let Some(b) = inputs.get(2) {
        if b.shape() != [w[1]] {
            return shape_err("linear", format!("bias {:?} for weight {w:?}", b.shape()));
        }
    }
    Ok((inputs[0].numel() / w[0], w[0], w[1]))
}

fn conv_geom(inputs: &[&Tensor], pad: usize) -> Result<ConvGeom> {
    let (x, w) = (inputs[0].shape(), inputs[1].shape());
    if x.len() != 4 || w.len() != 4 || w[0] != w[1] || w[2] != x[3] {
        return shape_err("conv2d", format!("input {x:?} (NHWC) with kernel {w:?} (KKIO)"));
    }
    let k = w[0];
    if x[1] + 2 * pad < k || x[2] + 2 * pad < k {
        return shape_err("conv2d", format!("kernel {k} larger than padded input {x:?}"));
    }
    if let Some(b) = inputs.get(2) {
        if b.shape() != [w[3]] {
            return shape_err("conv2d", format!("bias {:?} for kernel {w:?}", b.shape()));
        }
    }
    Ok(ConvGeom { n: x[0], h: x[1], w: x[2], ci: x[3], co: w[3], k, pad })
}

fn grouped_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let r = x.len();
    if r < 2 || w.len() != 3 || x[r - 2] != w[0] || x[r - 1] != w[1] {
        return shape_err("grouped_contraction", format!("input {x:?} with weight {w:?}"));
    }
    let m = x[..r - 2].iter().product();
    Ok((m, w[0], w[1], w[2]))
}

fn batchnorm_forward(inputs: &[&Tensor], train: bool, eps: f32) -> Result<(Tensor, Saved)> {
    let x = inputs[0];
    let c = *x.shape().last().unwrap();
    for t in &inputs[1..] {
        if t.shape() != [c] {
            return shape_err("batchnorm", format!("per-channel tensor {:?} for {c} channels", t.shape()));
        }
    }
    let rows = x.numel() / c;
    let xd = x.data();
    // Statistics and normalization run in f64 and round once at the output.
    let (mean, var): (Vec<f64>, Vec<f64>) = if train {
        let mut sum = vec![0f64; c];
        for r in 0..rows {
            for (s, &v) in sum.iter_mut().zip(&xd[r * c..(r + 1) * c]) {
                *s += v as f64;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
        let mut sq = vec![0f64; c];
        for r in 0..rows {
            for ch in 0..c {
                let d = xd[r * c + ch] as f64 - mean[ch];
                sq[ch] += d * d;
            }
        }
        (mean, sq.iter().map(|s| s / rows as f64).collect())
    } else {
        let f = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect();
        (f(inputs[3]), f(inputs[4]))
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
    let (gamma, beta) = (inputs[1].data(), inputs[2].data());
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        for ch in 0..c {
            let i = r * c + ch;
            let xhat = (xd[i] as f64 - mean[ch]) * inv_std[ch];
            out[i] = (xhat * gamma[ch] as f64 + beta[ch] as f64) as f32;
        }
    }
    let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let saved = Saved::Norm { mean: to32(&mean), var: to32(&var), mean64: mean, inv_std64: inv_std };
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        saved,
    ))
}

fn concat_forward(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0].shape();
    if axis >= first.len() {
        return shape_err("concat", format!("axis {axis} out of range for {first:?}"));
    }
    let mut total = 0;
    for t in inputs {
        let s = t.shape();
        let same = s.len() == first.len()
            && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return shape_err("concat", format!("{s:?} does not match {first:?} off axis {axis}"));
        }
        total += s[axis];
    }
    let (outer, _, inner) = split_at_axis(first, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let block = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

/// Gradients for each input (`None` where `needs[i]` is false).
pub(crate) fn backward(
    op: &Primitive,
    inputs: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    g: &[f32],
    needs: &[bool],
) -> Result<Vec<Option<Vec<f32>>>> {
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; inputs.len()];
    let x = inputs[0];
    match op {
        Primitive::Add | Primitive::Subtract => {
            for i in 0..2 {
                if needs[i] {
                    let mut gi = kernels::reduce_to_shape(g, out.shape(), inputs[i].shape());
                    if i == 1 && matches!(op, Primitive::Subtract) {
                        gi.iter_mut().for_each(|v| *v = -*v);
                    }
                    grads[i] = Some(gi);
                }
            }
        }
        Primitive::HadamardMultiply => {
            for i in 0..2 {
                if needs[i] {
                    let other = inputs[1 - i];
                    let o = expand_to(other.data(), other.shape(), out.shape());
                    let prod: Vec<f32> = g.iter().zip(&o).map(|(a, b)| a * b).collect();
                    grads[i] = Some(kernels::reduce_to_shape(&prod, out.shape(), inputs[i].shape()));
                }
            }
        }
        Primitive::ScalarScale { factor } => {
            grads[0] = Some(g.iter().map(|v| v * factor).collect());
        }
        Primitive::Matmul => {
            let (batch, m, k, n) = matmul_dims(x.shape(), inputs[1].shape())?;
            let (a, b) = (x.data(), inputs[1].data());
            if needs[0] {
                let mut da = vec![0.0; batch * m * k];
                for bi in 0..batch {
                    let bt = kernels::transpose2d(k, n, &b[bi * k * n..(bi + 1) * k * n]);
                    kernels::gemm_acc(m, n, k, &g[bi * m * n..], &bt, &mut da[bi * m * k..(bi + 1) * m * k]);
                }
                grads[0] = Some(da);
            }
            if needs[1] {
                let mut db = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    kernels::gemm_at_b_acc(
                        m,
                        k,
                        n,
                        &a[bi * m * k..],
                        &g[bi * m * n..],
                        &mut db[bi * k * n..(bi + 1) * k * n],
                    );
                }
                grads[1] = Some(db);
            }
        }
        Primitive::Linear => {
            let (rows, fin, fout) = linear_dims(inputs)?;
            if needs[0] {
                let wt = kernels::transpose2d(fin, fout, inputs[1].data());
                let mut dx = vec![0.0; rows * fin];
                kernels::gemm_acc(rows, fout, fin, g, &wt, &mut dx);
                grads[0] = Some(dx);
            }
            if needs[1] {
                let mut dw = vec![0.0; fin * fout];
                kernels::gemm_at_b_acc(rows, fin, fout, x.data(), g, &mut dw);
                grads[1] = Some(dw);
            }
            if inputs.len() == 3 && needs[2] {
                grads[2] = Some(kernels::reduce_to_shape(g, &[rows, fout], &[fout]));
            }
        }
        Primitive::Conv2d { padding } => {
            let geom = conv_geom(inputs, *padding)?;
            if needs[0] {
                let mut dx = vec![0.0; x.numel()];
                kernels::conv2d_backward_input(&geom, inputs[1].data(), g, &mut dx);
                grads[0] = Some(dx);
            }
            if needs[1] {
                let mut dw = vec![0.0; inputs[1].numel()];
                kernels::conv2d_backward_weight(&geom, x.data(), g, &mut dw);
                grads[1] = Some(dw);
            }
            if inputs.len() == 3 && needs[2] {
                grads[2] = Some(kernels::reduce_to_shape(g, &[g.len() / geom.co, geom.co], &[geom.co]));
            }
        }
        Primitive::MaxPool2d => {
            let Saved::Argmax(arg) = saved else {
                return Err(Error::Backward("maxpool2d lost its argmax record".into()));
            };
            let mut dx = vec![0.0; x.numel()];
            for (&a, &gv) in arg.iter().zip(g) {
                dx[a as usize] += gv;
            }
            grads[0] = Some(dx);
        }
        Primitive::BatchNorm { train, .. } => {
            let Saved::Norm { mean64: mean, inv_std64: inv_std, .. } = saved else {
                return Err(Error::Backward("batchnorm lost its statistics".into()));
            };
            let c = mean.len();
            let rows = x.numel() / c;
            let xd = x.data();
            let gamma = inputs[1].data();
            let xhat = |i: usize, ch: usize| (xd[i] as f64 - mean[ch]) * inv_std[ch];
            let mut dgamma = vec![0f64; c];
            let mut dbeta = vec![0f64; c];
            for r in 0..rows {
                for ch in 0..c {
                    let i = r * c + ch;
                    dgamma[ch] += g[i] as f64 * xhat(i, ch);
                    dbeta[ch] += g[i] as f64;
                }
            }
            if needs[0] {
                let m = rows as f64;
                let mut dx = vec![0.0; x.numel()];
                for r in 0..rows {
                    for ch in 0..c {
                        let i = r * c + ch;
                        let scale = gamma[ch] as f64 * inv_std[ch];
                        dx[i] = if *train {
                            (scale * (g[i] as f64 - dbeta[ch] / m - xhat(i, ch) * dgamma[ch] / m)) as f32
                        } else {
                            (g[i] as f64 * scale) as f32
                        };
                    }
                }
                grads[0] = Some(dx);
            }
            if needs[1] {
                grads[1] = Some(dgamma.iter().map(|&v| v as f32).collect());
            }
            if needs[2] {
                grads[2] = Some(dbeta.iter().map(|&v| v as f32).collect());
            }
        }
        Primitive::Reshape { .. } => grads[0] = Some(g.to_vec()),
        Primitive::PermuteAxes { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (_, data) = permute_data(out.shape(), g, &inv)?;
            grads[0] = Some(data);
        }
        Primitive::Concat { axis } => {
            let (outer, total, inner) = split_at_axis(out.shape(), *axis);
            let mut offset = 0;
            for (i, t) in inputs.iter().enumerate() {
                let ext = t.shape()[*axis];
                if needs[i] {
                    let block = ext * inner;
                    let mut gi = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        gi.extend_from_slice(&g[base..base + block]);
                    }
                    grads[i] = Some(gi);
                }
                offset += ext;
            }
        }
        Primitive::Slice { axis, start, end } => {
            let (outer, ext, inner) = split_at_axis(x.shape(), *axis);
            let len = (end - start) * inner;
            let mut dx = vec![0.0; x.numel()];
            for o in 0..outer {
                let base = o * ext * inner + start * inner;
                dx[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
            }
            grads[0] = Some(dx);
        }
        Primitive::Sum { axes, .. } | Primitive::Mean { axes, .. } => {
            let keep = keep_shape(op.name(), x.shape(), axes)?;
            let mut dx = expand_to(g, &keep, x.shape());
            if matches!(op, Primitive::Mean { .. }) {
                let count = (x.numel() / g.len()) as f32;
                dx.iter_mut().for_each(|v| *v /= count);
            }
            grads[0] = Some(dx);
        }
        Primitive::Sigmoid => {
            grads[0] = Some(g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect());
        }
        Primitive::Tanh => {
            grads[0] = Some(g.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect());
        }
        Primitive::Log => {
            grads[0] = Some(g.iter().zip(x.data()).map(|(gv, v)| gv / v).collect());
        }
        Primitive::Exp => {
            grads[0] = Some(g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect());
        }
        Primitive::GroupedContraction => {
            let (m, gr, d, k) = grouped_dims(x.shape(), inputs[1].shape())?;
            let (xd, wd) = (x.data(), inputs[1].data());
            if needs[0] {
                let wt: Vec<f32> = (0..gr)
                    .flat_map(|gi| kernels::transpose2d(d, k, &wd[gi * d * k..(gi + 1) * d * k]))
                    .collect();
                let mut dx = vec![0.0; m * gr * d];
                for mi in 0..m {
                    for gi in 0..gr {
                        let row = mi * gr + gi;
                        kernels::gemm_acc(1, k, d, &g[row * k..], &wt[gi * k * d..], &mut dx[row * d..(row + 1) * d]);
                    }
                }
                grads[0] = Some(dx);
            }
            if needs[1] {
                let mut dw = vec![0.0; gr * d * k];
                for mi in 0..m {
                    for gi in 0..gr {
                        let row = mi * gr + gi;
                        kernels::gemm_at_b_acc(
                            1,
                            d,
                            k,
                            &xd[row * d..],
                            &g[row * k..],
                            &mut dw[gi * d * k..(gi + 1) * d * k],
                        );
                    }
                }
                grads[1] = Some(dw);
            }
        }
        Primitive::HeavisideWithSurrogate { v_th, width, .. } => {
            grads[0] = Some(
                g.iter()
                    .zip(x.data())
                    .map(|(gv, &h)| gv * arctan_surrogate_grad(h, *v_th, *width))
                    .collect(),
            );
        }
    }
    for (i, gi) in grads.iter_mut().enumerate() {
        if !needs[i] {
            *gi = None;
        }
    }
    Ok(grads)
}
