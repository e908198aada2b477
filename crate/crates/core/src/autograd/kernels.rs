// Compute kernels behind the primitive catalog. All loops run in a fixed
// order so repeated evaluations are bit-identical.

use crate::tensor::strides_of;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major and contiguous.
///
/// Zero entries of `a` are skipped, which makes products with spike
/// matrices proportional to the number of spikes.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            axpy(av, &b[kk * n..(kk + 1) * n], c_row);
        }
    }
}

/// `c[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub(crate) fn gemm_at_b_acc(m: usize, k: usize, n: usize, a: &[f32], g: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            axpy(av, g_row, &mut c[kk * n..(kk + 1) * n]);
        }
    }
}

#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub(crate) fn transpose2d(rows: usize, cols: usize, a: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a stride-1 NHWC convolution with square kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (self.h + 2 * self.pad + 1 - self.k, self.w + 2 * self.pad + 1 - self.k)
    }

    /// Calls `f(in_pixel, out_pixel, tap, run)` for every contiguous run of
    /// output pixels that reads a valid input row for a given kernel tap.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        for n in 0..self.n {
            for oy in 0..ho {
                for ky in 0..self.k {
                    let iy = oy + ky;
                    if iy < self.pad || iy - self.pad >= self.h {
                        continue;
                    }
                    let iy = iy - self.pad;
                    for kx in 0..self.k {
                        let lo = self.pad.saturating_sub(kx);
                        let hi = (self.w + self.pad).saturating_sub(kx).min(wo);
                        if lo >= hi {
                            continue;
                        }
                        let ix = lo + kx - self.pad;
                        let in_px = (n * self.h + iy) * self.w + ix;
                        let out_px = (n * ho + oy) * wo + lo;
                        f(in_px, out_px, ky * self.k + kx, hi - lo);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f32], w: &[f32], out: &mut [f32]) {
    let (ci, co) = (g.ci, g.co);
    g.for_each_run(|in_px, out_px, tap, run| {
        let wt = &w[tap * ci * co..(tap + 1) * ci * co];
        gemm_acc(
            run,
            ci,
            co,
            &x[in_px * ci..(in_px + run) * ci],
            wt,
            &mut out[out_px * co..(out_px + run) * co],
        );
    });
}

pub(crate) fn conv2d_backward_weight(g: &ConvGeom, x: &[f32], dy: &[f32], dw: &mut [f32]) {
    let (ci, co) = (g.ci, g.co);
    g.for_each_run(|in_px, out_px, tap, run| {
        gemm_at_b_acc(
            run,
            ci,
            co,
            &x[in_px * ci..(in_px + run) * ci],
            &dy[out_px * co..(out_px + run) * co],
            &mut dw[tap * ci * co..(tap + 1) * ci * co],
        );
    });
}

pub(crate) fn conv2d_backward_input(g: &ConvGeom, w: &[f32], dy: &[f32], dx: &mut [f32]) {
    let (ci, co) = (g.ci, g.co);
    let taps = g.k * g.k;
    // Per-tap transposed weights [co, ci] so the inner loop is an axpy.
    let wt: Vec<f32> = (0..taps)
        .flat_map(|t| transpose2d(ci, co, &w[t * ci * co..(t + 1) * ci * co]))
        .collect();
    g.for_each_run(|in_px, out_px, tap, run| {
        gemm_acc(
            run,
            co,
            ci,
            &dy[out_px * co..(out_px + run) * co],
            &wt[tap * ci * co..(tap + 1) * ci * co],
            &mut dx[in_px * ci..(in_px + run) * ci],
        );
    });
}

/// 3×3 / stride 2 / padding 1 max pooling over NHWC. Returns values and the
/// flat input index of each maximum (first maximum in scan order on ties).
pub(crate) fn maxpool_forward(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    x: &[f32],
) -> (usize, usize, Vec<f32>, Vec<u32>) {
    let ho = (h + 2 - 3) / 2 + 1;
    let wo = (w + 2 - 3) / 2 + 1;
    let mut out = vec![f32::NEG_INFINITY; n * ho * wo * c];
    let mut arg = vec![0u32; n * ho * wo * c];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = ((b * ho + oy) * wo + ox) * c;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = ((b * h + iy as usize) * w + ix as usize) * c;
                        for ch in 0..c {
                            let v = x[i + ch];
                            if v > out[o + ch] {
                                out[o + ch] = v;
                                arg[o + ch] = (i + ch) as u32;
                            }
                        }
                    }
                }
            }
        }
    }
    (ho, wo, out, arg)
}

/// Strides of `shape` aligned right against an output of rank `rank`, with
/// zero stride on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides_of(shape);
    let lead = rank - shape.len();
    (0..rank)
        .map(|ax| {
            if ax < lead || shape[ax - lead] == 1 && out_shape[ax] != 1 {
                0
            } else {
                own[ax - lead]
            }
        })
        .collect()
}

/// Iterates the output of a broadcast binary op row by row, calling
/// `f(out_off, a_off, b_off, len, a_step, b_step)` for each innermost run.
pub(crate) fn for_each_broadcast_row(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let rank = out_shape.len();
    let inner = out_shape[rank - 1];
    let total: usize = out_shape.iter().product();
    let rows = total / inner;
    let mut idx = vec![0usize; rank];
    for r in 0..rows {
        let mut oa = 0;
        let mut ob = 0;
        for ax in 0..rank - 1 {
            oa += idx[ax] * sa[ax];
            ob += idx[ax] * sb[ax];
        }
        f(r * inner, oa, ob, inner, sa[rank - 1], sb[rank - 1]);
        for ax in (0..rank.saturating_sub(1)).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// Sums `x` (of shape `out_shape`) into a buffer laid out as `shape`, which
/// broadcasts to `out_shape`. Accumulation is in f64 in row-major order.
pub(crate) fn reduce_to_shape(x: &[f32], out_shape: &[usize], shape: &[usize]) -> Vec<f32> {
    let n: usize = shape.iter().product();
    if shape == out_shape {
        return x.to_vec();
    }
    let s = broadcast_strides(shape, out_shape);
    let zeros = vec![0usize; out_shape.len()];
    let mut acc = vec![0f64; n];
    for_each_broadcast_row(out_shape, &s, &zeros, |o, a, _, len, step, _| {
        if step == 0 {
            let mut sum = 0f64;
            for v in &x[o..o + len] {
                sum += *v as f64;
            }
            acc[a] += sum;
        } else {
            for j in 0..len {
                acc[a + j * step] += x[o + j] as f64;
            }
        }
    });
    acc.into_iter().map(|v| v as f32).collect()
}
