//! Orthonormal Haar wavelet transforms.
//!
//! The network-facing functions work on *band stacks*: tensors with a band
//! axis that collects every subband produced so far. A transform over `n`
//! axes turns a stack with `K` bands into one with `2ⁿ·K`. For the 3D case the
//! new bands are indexed `k·8 + 4·t_bit + 2·h_bit + w_bit`, so band 0 is the
//! low component. All transforms are composed from tape primitives and
//! differentiate as linear maps.
//!
//! [`dwt3d`], [`multilevel_dwt3d`] and [`idwt3d_multilevel`] are the plain
//! tensor interface over `[C, T, H, W]`.

use std::f32::consts::FRAC_1_SQRT_2;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::neuron::{sn, LifParams};
use crate::tensor::Tensor;

fn check_even(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    match shape.get(axis) {
        Some(&n) if n >= 2 && n % 2 == 0 => Ok(()),
        Some(&n) => Err(Error::Shape {
            op,
            detail: format!("axis {axis} of {shape:?} has odd or unit extent {n}"),
        }),
        None => Err(Error::Shape { op, detail: format!("axis {axis} out of range for {shape:?}") }),
    }
}

/// Shape with `axis` split into `[n/2, 2]`.
fn paired_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape[..axis].to_vec();
    s.push(shape[axis] / 2);
    s.push(2);
    s.extend_from_slice(&shape[axis + 1..]);
    s
}

/// Even/odd members of each non-overlapping pair along `axis`, each with the
/// axis halved.
fn split_pairs(tape: &mut Tape, x: Var, axis: usize) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let paired = paired_shape(&shape, axis);
    let mut half = shape.clone();
    half[axis] /= 2;
    let xp = tape.reshape(x, &paired)?;
    let even = tape.slice(xp, axis + 1, 0, 1)?;
    let odd = tape.slice(xp, axis + 1, 1, 2)?;
    Ok((tape.reshape(even, &half)?, tape.reshape(odd, &half)?))
}

/// Interleaves `even` and `odd` along `axis`, doubling it.
fn merge_pairs(tape: &mut Tape, even: Var, odd: Var, axis: usize) -> Result<Var> {
    let shape = tape.shape(even).to_vec();
    let mut unit = shape[..=axis].to_vec();
    unit.push(1);
    unit.extend_from_slice(&shape[axis + 1..]);
    let e = tape.reshape(even, &unit)?;
    let o = tape.reshape(odd, &unit)?;
    let both = tape.concat(&[e, o], axis + 1)?;
    let mut out = shape;
    out[axis] *= 2;
    tape.reshape(both, &out)
}

/// One Haar analysis step along `axis`: `a = (x₀+x₁)/√2`, `d = (x₀−x₁)/√2`.
pub fn dwt1d_var(tape: &mut Tape, x: Var, axis: usize) -> Result<(Var, Var)> {
    check_even("dwt1d", tape.shape(x), axis)?;
    let (even, odd) = split_pairs(tape, x, axis)?;
    let sum = tape.add(even, odd)?;
    let diff = tape.sub(even, odd)?;
    Ok((tape.scale(sum, FRAC_1_SQRT_2)?, tape.scale(diff, FRAC_1_SQRT_2)?))
}

/// Haar synthesis step: `x₀ = (a+d)/√2`, `x₁ = (a−d)/√2`, interleaved along `axis`.
pub fn idwt1d_var(tape: &mut Tape, a: Var, d: Var, axis: usize) -> Result<Var> {
    if tape.shape(a) != tape.shape(d) {
        return Err(Error::Shape {
            op: "idwt1d",
            detail: format!("bands {:?} and {:?} differ", tape.shape(a), tape.shape(d)),
        });
    }
    let sum = tape.add(a, d)?;
    let diff = tape.sub(a, d)?;
    let even = tape.scale(sum, FRAC_1_SQRT_2)?;
    let odd = tape.scale(diff, FRAC_1_SQRT_2)?;
    merge_pairs(tape, even, odd, axis)
}

/// Splits each band of the stack into its low and high halves along `axis`
/// and doubles the band axis, placing the new bit last.
fn analyze_stack(tape: &mut Tape, x: Var, band_axis: usize, axis: usize) -> Result<Var> {
    let (a, d) = dwt1d_var(tape, x, axis)?;
    merge_pairs(tape, a, d, band_axis)
}

/// Separable analysis over a band stack, one axis at a time in the order
/// given (time, height, width for the 3D transform). With `interleave`, a
/// spiking neuron layer running along axis 0 precedes each axis transform.
pub fn dwt_stack(
    tape: &mut Tape,
    x: Var,
    band_axis: usize,
    axes: &[usize],
    interleave: Option<&LifParams>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    for &ax in axes {
        check_even("dwt3d", &shape, ax)?;
        if ax == band_axis {
            return Err(Error::Shape { op: "dwt3d", detail: "band axis cannot be transformed".into() });
        }
    }
    let mut cur = x;
    for &ax in axes {
        if let Some(lif) = interleave {
            cur = sn(tape, cur, lif)?;
        }
        cur = analyze_stack(tape, cur, band_axis, ax)?;
    }
    Ok(cur)
}

/// Exact inverse of [`dwt_stack`] without interleave: undoes the axis
/// steps in reverse order, dividing the band axis by `2ⁿ`.
pub fn idwt_stack(tape: &mut Tape, x: Var, band_axis: usize, axes: &[usize]) -> Result<Var> {
    let bands = tape.shape(x)[band_axis];
    let per = 1usize << axes.len();
    if !bands.is_multiple_of(per) {
        return Err(Error::Shape {
            op: "idwt3d",
            detail: format!("band axis has {bands} entries, not a multiple of {per}"),
        });
    }
    let mut cur = x;
    for &ax in axes.iter().rev() {
        let (a, d) = split_pairs(tape, cur, band_axis)?;
        cur = idwt1d_var(tape, a, d, ax)?;
    }
    Ok(cur)
}

/// Band-stack pyramid: `highs[n]` holds the high bands of level `n+1` (7 for
/// a 3D transform), `low` the final low band (band axis of extent 1).
#[derive(Clone, Debug)]
pub struct StackPyramid {
    pub highs: Vec<Var>,
    pub low: Var,
}

/// `levels`-deep analysis of a single-band stack, each level decomposing the
/// previous low band.
pub fn multilevel_dwt_stack(
    tape: &mut Tape,
    x: Var,
    band_axis: usize,
    axes: &[usize],
    levels: usize,
    interleave: Option<&LifParams>,
) -> Result<StackPyramid> {
    if levels == 0 {
        return Err(Error::Config("wavelet pyramid needs at least one level".into()));
    }
    let shape = tape.shape(x).to_vec();
    if shape[band_axis] != 1 {
        return Err(Error::Shape {
            op: "multilevel_dwt3d",
            detail: format!("input stack must hold one band, got {}", shape[band_axis]),
        });
    }
    let factor = 1usize << levels;
    for &ax in axes {
        if !shape[ax].is_multiple_of(factor) {
            return Err(Error::Shape {
                op: "multilevel_dwt3d",
                detail: format!("axis {ax} of {shape:?} is not divisible by 2^{levels}"),
            });
        }
    }
    let mut highs = Vec::with_capacity(levels);
    let mut low = x;
    for _ in 0..levels {
        let stack = dwt_stack(tape, low, band_axis, axes, interleave)?;
        highs.push(tape.slice(stack, band_axis, 1, 1 << axes.len())?);
        low = tape.slice(stack, band_axis, 0, 1)?;
    }
    Ok(StackPyramid { highs, low })
}

pub fn idwt_multilevel_stack(
    tape: &mut Tape,
    pyramid: &StackPyramid,
    band_axis: usize,
    axes: &[usize],
) -> Result<Var> {
    let highs_per_level = (1usize << axes.len()) - 1;
    let mut low = pyramid.low;
    for &high in pyramid.highs.iter().rev() {
        if tape.shape(high)[band_axis] != highs_per_level {
            return Err(Error::Shape {
                op: "idwt3d_multilevel",
                detail: format!("high-band stack {:?} does not hold {highs_per_level} bands", tape.shape(high)),
            });
        }
        let stack = tape.concat(&[low, high], band_axis)?;
        low = idwt_stack(tape, stack, band_axis, axes)?;
    }
    Ok(low)
}

// Tensor interface over [C, T, H, W].

/// Wavelet decomposition of a `[C, T, H, W]` tensor: per level, the 7 high
/// bands in index order 1..=7, and the final low band.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    pub levels: Vec<Vec<Tensor>>,
    pub low: Tensor,
}

impl WaveletPyramid {
    /// Sum of squares over every band.
    pub fn energy(&self) -> f64 {
        self.levels.iter().flatten().map(Tensor::sq_norm).sum::<f64>() + self.low.sq_norm()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

fn check_cthw(op: &'static str, x: &Tensor) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::Shape { op, detail: format!("expected [C, T, H, W], got {:?}", x.shape()) });
    }
    Ok(())
}

/// `[C, T, H, W]` to a one-band stack `[T, 1, C, H, W]`.
fn to_stack(tape: &mut Tape, x: &Tensor) -> Result<Var> {
    let v = tape.constant(x.clone());
    let p = tape.permute(v, &[1, 0, 2, 3])?;
    let s = tape.value(p).shape().to_vec();
    tape.reshape(p, &[s[0], 1, s[1], s[2], s[3]])
}

/// Band `k` of a stack `[T, K, C, H, W]` as `[C, T, H, W]`.
fn band_of(tape: &mut Tape, stack: Var, k: usize) -> Result<Tensor> {
    let b = tape.slice(stack, 1, k, k + 1)?;
    let s = tape.shape(b).to_vec();
    let r = tape.reshape(b, &[s[0], s[2], s[3], s[4]])?;
    let p = tape.permute(r, &[1, 0, 2, 3])?;
    Ok(tape.value(p).clone())
}

fn from_bands(tape: &mut Tape, bands: &[&Tensor]) -> Result<Var> {
    let first = bands[0].shape().to_vec();
    let mut vars = Vec::with_capacity(bands.len());
    for b in bands {
        if b.shape() != first.as_slice() {
            return Err(Error::Shape {
                op: "idwt3d_multilevel",
                detail: format!("band {:?} does not match {:?}", b.shape(), first),
            });
        }
        vars.push(to_stack(tape, b)?);
    }
    tape.concat(&vars, 1)
}

/// Haar analysis along one axis of a tensor.
pub fn dwt1d_along(x: &Tensor, axis: usize) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let (a, d) = dwt1d_var(&mut tape, v, axis)?;
    Ok((tape.value(a).clone(), tape.value(d).clone()))
}

const STACK_AXES: [usize; 3] = [0, 3, 4];

/// One-level 3D transform of `[C, T, H, W]` into 8 bands (band 0 low).
/// `interleave` runs a spiking layer along T before each axis transform.
pub fn dwt3d(x: &Tensor, interleave: Option<&LifParams>) -> Result<Vec<Tensor>> {
    check_cthw("dwt3d", x)?;
    let mut tape = Tape::new();
    let s = to_stack(&mut tape, x)?;
    let out = dwt_stack(&mut tape, s, 1, &STACK_AXES, interleave)?;
    (0..8).map(|k| band_of(&mut tape, out, k)).collect()
}

pub fn multilevel_dwt3d(x: &Tensor, levels: usize, interleave: Option<&LifParams>) -> Result<WaveletPyramid> {
    check_cthw("multilevel_dwt3d", x)?;
    let mut tape = Tape::new();
    let s = to_stack(&mut tape, x)?;
    let p = multilevel_dwt_stack(&mut tape, s, 1, &STACK_AXES, levels, interleave)?;
    let mut out_levels = Vec::with_capacity(levels);
    for &h in &p.highs {
        out_levels.push((0..7).map(|k| band_of(&mut tape, h, k)).collect::<Result<Vec<_>>>()?);
    }
    let low = band_of(&mut tape, p.low, 0)?;
    Ok(WaveletPyramid { levels: out_levels, low })
}

pub fn idwt3d_multilevel(pyramid: &WaveletPyramid) -> Result<Tensor> {
    if pyramid.levels.is_empty() {
        return Err(Error::Shape { op: "idwt3d_multilevel", detail: "pyramid has no levels".into() });
    }
    check_cthw("idwt3d_multilevel", &pyramid.low)?;
    let mut tape = Tape::new();
    let low = to_stack(&mut tape, &pyramid.low)?;
    let mut highs = Vec::with_capacity(pyramid.levels.len());
    for (n, level) in pyramid.levels.iter().enumerate() {
        if level.len() != 7 {
            return Err(Error::Shape {
                op: "idwt3d_multilevel",
                detail: format!("level {} has {} high bands, expected 7", n + 1, level.len()),
            });
        }
        let refs: Vec<&Tensor> = level.iter().collect();
        highs.push(from_bands(&mut tape, &refs)?);
    }
    // Each level is half the extent of the one above; the last matches the low band.
    for n in 0..highs.len() {
        let here = tape.shape(highs[n]).to_vec();
        let (below, factor) = if n + 1 < highs.len() {
            (tape.shape(highs[n + 1]).to_vec(), 2)
        } else {
            (tape.shape(low).to_vec(), 1)
        };
        let fits = [0, 3, 4].iter().all(|&ax| here[ax] == factor * below[ax]) && here[2] == below[2];
        if !fits {
            return Err(Error::Shape {
                op: "idwt3d_multilevel",
                detail: format!("level {} bands {here:?} do not fit {below:?}", n + 1),
            });
        }
    }
    let p = StackPyramid { highs, low };
    let out = idwt_multilevel_stack(&mut tape, &p, 1, &STACK_AXES)?;
    let s = tape.shape(out).to_vec();
    let r = tape.reshape(out, &[s[0], s[2], s[3], s[4]])?;
    let c = tape.permute(r, &[1, 0, 2, 3])?;
    Ok(tape.value(c).clone())
}
