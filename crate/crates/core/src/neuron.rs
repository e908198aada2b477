//! Leaky integrate-and-fire neurons.
//!
//! One step charges, fires and resets:
//!
//! ```text
//! H[t] = V[t-1] + (1/γ)·(I[t] − (V[t-1] − V_reset))
//! S[t] = [H[t] ≥ v_th]
//! V[t] = V_reset·S[t] + H[t]·(1 − S[t])
//! ```
//!
//! The firing step is recorded with the arctan surrogate derivative. The reset
//! path is detached from the graph unless the tape runs in
//! [`SpikeMode::SurrogateForward`].

use serde::{Deserialize, Serialize};

use crate::autograd::{arctan_surrogate_grad, SpikeMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub gamma: f32,
    pub v_th: f32,
    pub v_reset: f32,
    pub surrogate_width: f32,
}

impl Default for LifParams {
    fn default() -> Self {
        Self { gamma: 2.0, v_th: 1.0, v_reset: 0.0, surrogate_width: 2.0 }
    }
}

impl LifParams {
    pub fn with_threshold(self, v_th: f32) -> Self {
        Self { v_th, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.gamma, self.v_th, self.v_reset, self.surrogate_width]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config(format!("LIF parameters must be finite: {self:?}")));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config(format!("LIF gamma must be positive, got {}", self.gamma)));
        }
        if self.surrogate_width <= 0.0 {
            return Err(Error::Config(format!(
                "LIF surrogate width must be positive, got {}",
                self.surrogate_width
            )));
        }
        if self.v_th <= self.v_reset {
            return Err(Error::Config(format!(
                "LIF threshold {} must exceed the reset potential {}",
                self.v_th, self.v_reset
            )));
        }
        Ok(())
    }
}

/// Membrane potential after the last step and the pre-spike potential of
/// that step.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub v: Tensor,
    pub h: Tensor,
}

impl LifState {
    /// Resting state for a population of the given shape.
    pub fn resting(shape: &[usize], params: &LifParams) -> Self {
        Self { v: Tensor::full(shape, params.v_reset), h: Tensor::full(shape, params.v_reset) }
    }
}

/// Outputs of one recorded LIF step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub spikes: Var,
    pub v: Var,
    pub h: Var,
}

/// Records one LIF step on `tape`.
pub fn lif_step_var(tape: &mut Tape, input: Var, v: Var, params: &LifParams) -> Result<StepVars> {
    if tape.shape(input) != tape.shape(v) {
        return Err(Error::Shape {
            op: "lif_step",
            detail: format!("input {:?} vs membrane {:?}", tape.shape(input), tape.shape(v)),
        });
    }
    let leak = if params.v_reset == 0.0 {
        // v − 0 is v exactly.
        v
    } else {
        let vr = tape.constant(Tensor::scalar(params.v_reset));
        tape.sub(v, vr)?
    };
    let drive = tape.sub(input, leak)?;
    let drive = tape.scale(drive, 1.0 / params.gamma)?;
    let h = tape.add(v, drive)?;
    let spikes = tape.heaviside(h, params.v_th, params.surrogate_width)?;
    let reset_gate = match tape.spike_mode() {
        SpikeMode::Heaviside => tape.detach(spikes),
        SpikeMode::SurrogateForward => spikes,
    };
    let one = tape.constant(Tensor::scalar(1.0));
    let keep = tape.sub(one, reset_gate)?;
    let kept = tape.mul(h, keep)?;
    let v_next = if params.v_reset == 0.0 {
        // At a spike H ≥ v_th > 0, so H·0 is +0 and adding 0·S changes nothing.
        kept
    } else {
        let reset = tape.scale(reset_gate, params.v_reset)?;
        tape.add(kept, reset)?
    };
    Ok(StepVars { spikes, v: v_next, h })
}

/// Runs the neuron over the leading (time) axis of `input`, starting from
/// rest. Returns spikes with the same shape and, when `record` is set, the
/// time-averaged pre-spike potential `(1/T)·Σ_t H[t]`.
pub fn lif_sequence_var(
    tape: &mut Tape,
    input: Var,
    params: &LifParams,
    record: bool,
) -> Result<(Var, Option<Var>)> {
    let shape = tape.shape(input).to_vec();
    let t_len = match shape.first() {
        Some(&t) if t >= 1 => t,
        _ => {
            return Err(Error::Shape {
                op: "lif_sequence",
                detail: format!("needs a leading time axis of length ≥ 1, got {shape:?}"),
            })
        }
    };
    let mut step_shape = shape.clone();
    step_shape[0] = 1;
    let mut v = tape.constant(Tensor::full(&step_shape, params.v_reset));
    let mut spikes = Vec::with_capacity(t_len);
    let mut h_sum: Option<Var> = None;
    for t in 0..t_len {
        let i_t = if t_len == 1 { input } else { tape.slice(input, 0, t, t + 1)? };
        let step = lif_step_var(tape, i_t, v, params)?;
        spikes.push(step.spikes);
        v = step.v;
        if record {
            h_sum = Some(match h_sum {
                None => step.h,
                Some(acc) => tape.add(acc, step.h)?,
            });
        }
    }
    let s = tape.concat(&spikes, 0)?;
    let mean = match h_sum {
        Some(acc) => {
            let m = tape.scale(acc, 1.0 / t_len as f32)?;
            Some(tape.reshape(m, &shape[1..])?)
        }
        None => None,
    };
    Ok((s, mean))
}

/// Spiking neuron layer: LIF over the leading axis, spikes only.
pub fn sn(tape: &mut Tape, input: Var, params: &LifParams) -> Result<Var> {
    Ok(lif_sequence_var(tape, input, params, false)?.0)
}

/// One LIF step on concrete tensors.
pub fn lif_step(input: &Tensor, state: &LifState, params: &LifParams) -> Result<(Tensor, LifState)> {
    params.validate()?;
    let mut tape = Tape::new();
    let i = tape.constant(input.clone());
    let v = tape.constant(state.v.clone());
    let out = lif_step_var(&mut tape, i, v, params)?;
    Ok((
        tape.value(out.spikes).clone(),
        LifState { v: tape.value(out.v).clone(), h: tape.value(out.h).clone() },
    ))
}

/// LIF over the leading axis of a concrete tensor `[T, ...]`.
pub fn lif_sequence(input: &Tensor, params: &LifParams, record: bool) -> Result<(Tensor, Option<Tensor>)> {
    params.validate()?;
    let mut tape = Tape::new();
    let i = tape.constant(input.clone());
    let (s, m) = lif_sequence_var(&mut tape, i, params, record)?;
    Ok((tape.value(s).clone(), m.map(|m| tape.value(m).clone())))
}

/// `dS/dH` of the arctan surrogate, elementwise.
pub fn surrogate_grad(h: &Tensor, params: &LifParams) -> Tensor {
    h.map(|x| arctan_surrogate_grad(x, params.v_th, params.surrogate_width))
}
