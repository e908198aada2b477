//! Adam with decoupled weight decay, plus the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Learning rate as a function of the optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f32 },
    /// Half-cosine from `lr` at step 0 down to `min_lr` at `total_steps`.
    Cosine { lr: f32, min_lr: f32, total_steps: u64 },
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f32 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { lr, min_lr, total_steps } => {
                let frac = (step.min(total_steps) as f64) / (total_steps.max(1) as f64);
                let c = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
                (min_lr as f64 + (lr - min_lr) as f64 * c) as f32
            }
        }
    }
}

/// Per-parameter first and second moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
    pub schedule: LrSchedule,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], schedule: LrSchedule) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
            schedule,
        }
    }

    /// Learning rate the next call to [`optimizer_step`] will use.
    pub fn next_lr(&self) -> f32 {
        self.schedule.lr_at(self.step)
    }
}

/// One Adam step with decoupled weight decay. `grads[i]` of `None` is
/// treated as a zero gradient. Every gradient is validated before any
/// parameter is touched, so a rejected step leaves everything unchanged.
pub fn optimizer_step(
    params: &mut [Tensor],
    grads: &[Option<&[f32]>],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            op: "optimizer_step",
            detail: format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    let lr = state.next_lr();
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if state.m[i].len() != p.numel() {
            return Err(Error::Shape {
                op: "optimizer_step",
                detail: format!("moment slot {i} has {} entries for shape {:?}", state.m[i].len(), p.shape()),
            });
        }
        if let Some(g) = g {
            if g.len() != p.numel() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    detail: format!("gradient {i} has {} entries for shape {:?}", g.len(), p.shape()),
                });
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {i} at entry {j} is {}", g[j])));
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (lr, wd, eps) = (lr as f64, cfg.weight_decay as f64, cfg.eps as f64);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i];
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g[k] as f64);
            let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
            let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let update = (mk / bc1) / ((vk / bc2).sqrt() + eps) + wd * *w as f64;
            *w = (*w as f64 - lr * update) as f32;
        }
    }
    Ok(())
}
