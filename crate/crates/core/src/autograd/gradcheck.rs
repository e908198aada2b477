use super::{SpikeMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing backward-pass gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / (|numeric| + 1e-8)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f32>,
    pub numeric: Vec<f64>,
}

fn eval<F>(program: &F, point: Tensor) -> Result<(Tape, Var, Var)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::with_spike_mode(SpikeMode::SurrogateForward);
    let x = tape.param(point);
    let y = program(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::Shape {
            op: "check_gradients",
            detail: format!("program output has shape {:?}, expected a scalar", tape.shape(y)),
        });
    }
    Ok((tape, x, y))
}

/// Checks the gradient of a scalar `program` at `point` against central
/// finite differences with step `eps`. Spiking nodes run in
/// [`SpikeMode::SurrogateForward`] so the program is smooth.
pub fn check_gradients<F>(program: F, point: &Tensor, eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (mut tape, x, y) = eval(&program, point.clone())?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    // Five-point central stencil, exact for polynomials up to degree four.
    // The step is `eps` rounded to a power of two so that every stencil
    // point is exactly representable for moderate coordinates.
    let h = 2f32.powi(eps.log2().round() as i32);
    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let base = point.data()[i];
        let mut f = [0f64; 4];
        let mut exact = true;
        for (slot, k) in [2.0f32, 1.0, -1.0, -2.0].into_iter().enumerate() {
            let mut p = point.clone();
            p.data_mut()[i] = base + k * h;
            exact &= p.data()[i] as f64 - base as f64 == (k * h) as f64;
            let (tape, _, y) = eval(&program, p)?;
            f[slot] = tape.value(y).data()[0] as f64;
        }
        let h = h as f64;
        numeric.push(if exact {
            (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h)
        } else {
            // Large coordinates: fall back to the plain two-point quotient
            // over the representable offsets.
            let mut p = point.clone();
            p.data_mut()[i] = base + h as f32;
            let up = p.data()[i] as f64;
            p.data_mut()[i] = base - h as f32;
            (f[1] - f[2]) / (up - p.data()[i] as f64)
        });
    }

    let mut max_rel_error = 0.0;
    let mut max_abs_error = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let abs = (a as f64 - n).abs();
        let rel = abs / (n.abs() + 1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
        max_abs_error = f64::max(max_abs_error, abs);
    }
    Ok(GradCheckReport { max_rel_error, max_abs_error, worst_index, analytic, numeric })
}
