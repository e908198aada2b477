//! Spiking WaveMixer and the Spiking Waveformer Block.
//!
//! The mixer decomposes its input with a two-level spike-interleaved Haar
//! transform, reweights the low band (global mixer), reweights and then
//! channel-mixes the high bands (token and channel mixers), and recomposes
//! with the inverse transform.
//!
//! The spatiotemporal variant transforms time, height and width. The spatial
//! variant transforms height and width of every time step independently, with
//! weights that carry no time axis and spiking sites that keep no state from
//! one step to the next, which makes it exactly equivariant to reversing time.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::neuron::{sn, LifParams};
use crate::nn::{Mlp, ParamBuilder, ParamId, Session, SynapticSite};
use crate::wavelet::{dwt_stack, idwt_multilevel_stack, StackPyramid};

/// Wavelet levels of every mixer.
pub const LEVELS: usize = 2;

/// `SN(L₂) ∘ W₁`, with `w1` broadcast against the low band.
pub fn global_mixer(tape: &mut Tape, low: Var, w1: Var, lif: &LifParams) -> Result<Var> {
    let spikes = sn(tape, low, lif)?;
    tape.mul(spikes, w1)
}

/// `SN(H) ∘ W`, with `w` broadcast over channels.
pub fn token_mixer(tape: &mut Tape, high: Var, w: Var, lif: &LifParams) -> Result<Var> {
    let spikes = sn(tape, high, lif)?;
    tape.mul(spikes, w)
}

/// Grouped contraction over channels: the last axis of `spikes` splits into
/// `[groups, D]` and `out[.., g, k] = Σ_d spikes[.., g, d]·w[g, d, k]`.
pub fn channel_mixer(tape: &mut Tape, spikes: Var, w: Var) -> Result<Var> {
    let shape = tape.shape(spikes).to_vec();
    let ws = tape.shape(w).to_vec();
    let c = *shape.last().unwrap_or(&0);
    if ws.len() != 3 || ws[0] * ws[1] != c || ws[1] != ws[2] {
        return Err(Error::Shape {
            op: "channel_mixer",
            detail: format!("{c} channels with weight {ws:?}; expected [groups, C/groups, C/groups]"),
        });
    }
    let mut grouped = shape[..shape.len() - 1].to_vec();
    grouped.extend([ws[0], ws[1]]);
    let xg = tape.reshape(spikes, &grouped)?;
    let y = tape.grouped_contraction(xg, w)?;
    tape.reshape(y, &shape)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwmVariant {
    /// Transform over time, height and width.
    #[default]
    Spatiotemporal,
    /// Transform over height and width, per time step.
    Spatial,
}

impl SwmVariant {
    fn high_bands(self) -> usize {
        match self {
            SwmVariant::Spatiotemporal => 7,
            SwmVariant::Spatial => 3,
        }
    }
}

/// Input geometry a mixer is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwmShape {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Handles to the mixer weights. In the spatiotemporal variant `w1` is
/// `[C, T/4, H/4, W/4]`, `w2` is `[7, T/2, H/2, W/2]` and `w3` is
/// `[7, T/4, H/4, W/4]`; the spatial variant drops the time extents and has 3
/// bands. `w4` and `w5` are `[groups, C/groups, C/groups]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwmParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub w4: ParamId,
    pub w5: ParamId,
    pub groups: usize,
    pub shape: SwmShape,
    pub variant: SwmVariant,
    pub lif: LifParams,
}

fn check_divisible(shape: SwmShape, groups: usize, variant: SwmVariant) -> Result<()> {
    let f = 1 << LEVELS;
    let mut bad = !shape.h.is_multiple_of(f) || !shape.w.is_multiple_of(f);
    if variant == SwmVariant::Spatiotemporal {
        bad |= !shape.t.is_multiple_of(f);
    }
    if bad {
        return Err(Error::Shape {
            op: "swm",
            detail: format!("T, H, W = {}, {}, {} must be divisible by {f}", shape.t, shape.h, shape.w),
        });
    }
    if groups == 0 || !shape.c.is_multiple_of(groups) {
        return Err(Error::Shape { op: "swm", detail: format!("{} channels do not split into {groups} groups", shape.c) });
    }
    Ok(())
}

impl SwmParams {
    /// Registers mixer weights: the Hadamard weights uniform in [0.25, 0.75],
    /// the channel weights normal with standard deviation `1/√D`.
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        shape: SwmShape,
        groups: usize,
        variant: SwmVariant,
        lif: LifParams,
    ) -> Result<Self> {
        check_divisible(shape, groups, variant)?;
        let SwmShape { t, c, h, w } = shape;
        let bands = variant.high_bands();
        let (s1, s2, s3) = match variant {
            SwmVariant::Spatiotemporal => (
                vec![c, t / 4, h / 4, w / 4],
                vec![bands, t / 2, h / 2, w / 2],
                vec![bands, t / 4, h / 4, w / 4],
            ),
            SwmVariant::Spatial => (vec![c, h / 4, w / 4], vec![bands, h / 2, w / 2], vec![bands, h / 4, w / 4]),
        };
        let d = c / groups;
        let std = 1.0 / (d as f32).sqrt();
        b.push(name);
        let w1 = b.uniform("w1", &s1, 0.25, 0.75)?;
        let w2 = b.uniform("w2", &s2, 0.25, 0.75)?;
        let w3 = b.uniform("w3", &s3, 0.25, 0.75)?;
        let w4 = b.normal("w4", &[groups, d, d], std)?;
        let w5 = b.normal("w5", &[groups, d, d], std)?;
        b.pop();
        Ok(Self { w1, w2, w3, w4, w5, groups, shape, variant, lif })
    }

    fn axes(&self) -> &'static [usize] {
        match self.variant {
            SwmVariant::Spatiotemporal => &[0, 3, 4],
            SwmVariant::Spatial => &[3, 4],
        }
    }

    /// `w1` laid out to broadcast against the low band `[t, 1, b, h, w, C]`.
    fn global_weight(&self, s: &mut Session) -> Result<Var> {
        let w1 = s.param(self.w1);
        let SwmShape { t, c, h, w } = self.shape;
        match self.variant {
            SwmVariant::Spatiotemporal => {
                let p = s.tape.permute(w1, &[1, 2, 3, 0])?;
                s.tape.reshape(p, &[t / 4, 1, 1, h / 4, w / 4, c])
            }
            SwmVariant::Spatial => {
                let p = s.tape.permute(w1, &[1, 2, 0])?;
                s.tape.reshape(p, &[1, 1, 1, h / 4, w / 4, c])
            }
        }
    }

    /// Token weight of `level` (1 or 2) laid out as `[t, bands, 1, h, w, 1]`.
    fn token_weight(&self, s: &mut Session, level: usize) -> Result<Var> {
        let id = if level == 1 { self.w2 } else { self.w3 };
        let wv = s.param(id);
        let f = 1 << level;
        let SwmShape { t, h, w, .. } = self.shape;
        let bands = self.variant.high_bands();
        match self.variant {
            SwmVariant::Spatiotemporal => {
                let p = s.tape.permute(wv, &[1, 0, 2, 3])?;
                s.tape.reshape(p, &[t / f, bands, 1, h / f, w / f, 1])
            }
            SwmVariant::Spatial => s.tape.reshape(wv, &[1, bands, 1, h / f, w / f, 1]),
        }
    }

    /// Spiking sites of the mixer with the operations their spikes drive
    /// per sample. Transform steps count 4 operations per output pair, the
    /// Hadamard mixers one per element and the channel mixer `2·D` per
    /// output element.
    pub fn sites(&self, name: &str) -> Vec<SynapticSite> {
        let SwmShape { t, c, h, w } = self.shape;
        let axes = self.axes().len();
        let bands = self.variant.high_bands() as u64;
        let d = (c / self.groups) as u64;
        let mut out = Vec::new();
        let mut size = (t * c * h * w) as u64;
        let mut high = Vec::new();
        for level in 1..=LEVELS {
            for k in 0..axes {
                // Each step doubles the band count and halves every band, so
                // the element count it reads is the level's input size.
                out.push(SynapticSite::new(format!("{name}.dwt{level}.{k}"), 2 * size));
            }
            size /= 1 << axes;
            high.push(SynapticSite::new(format!("{name}.token{level}"), size * bands));
            high.push(SynapticSite::new(format!("{name}.channel{level}"), size * bands * 2 * d));
        }
        out.push(SynapticSite::new(format!("{name}.global"), size));
        out.extend(high);
        out
    }

    /// The mixer on `[T, B, H, W, C]`; output has the input's shape.
    pub fn forward(&self, s: &mut Session, x: Var, name: &str) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        let [t, b, h, w, c] = shape[..] else {
            return Err(Error::Shape { op: "swm", detail: format!("expected [T, B, H, W, C], got {shape:?}") });
        };
        let want = self.shape;
        if (t, h, w, c) != (want.t, want.h, want.w, want.c) {
            return Err(Error::Shape {
                op: "swm",
                detail: format!("input {shape:?} does not match the mixer geometry {want:?}"),
            });
        }
        let stack_shape = match self.variant {
            SwmVariant::Spatiotemporal => [t, 1, b, h, w, c],
            SwmVariant::Spatial => [1, 1, t * b, h, w, c],
        };
        let stack = s.tape.reshape(x, &stack_shape)?;
        let axes = self.axes();
        let per_level = 1 << axes.len();
        let mut low = stack;
        let mut bands = Vec::with_capacity(LEVELS);
        for level in 1..=LEVELS {
            for (k, &ax) in axes.iter().enumerate() {
                let spikes = sn(&mut s.tape, low, &self.lif)?;
                s.probe(&format!("{name}.dwt{level}.{k}"), spikes);
                low = dwt_stack(&mut s.tape, spikes, 1, &[ax], None)?;
            }
            bands.push(s.tape.slice(low, 1, 1, per_level)?);
            low = s.tape.slice(low, 1, 0, 1)?;
        }

        let low = sn(&mut s.tape, low, &self.lif)?;
        s.probe(&format!("{name}.global"), low);
        let w1 = self.global_weight(s)?;
        let low = s.tape.mul(low, w1)?;

        let mut highs = Vec::with_capacity(LEVELS);
        for (i, &band) in bands.iter().enumerate() {
            let level = i + 1;
            let spikes = sn(&mut s.tape, band, &self.lif)?;
            s.probe(&format!("{name}.token{level}"), spikes);
            let wt = self.token_weight(s, level)?;
            let mixed = s.tape.mul(spikes, wt)?;
            let spikes = sn(&mut s.tape, mixed, &self.lif)?;
            s.probe(&format!("{name}.channel{level}"), spikes);
            let wc = s.param(if level == 1 { self.w4 } else { self.w5 });
            highs.push(channel_mixer(&mut s.tape, spikes, wc)?);
        }
        let out = idwt_multilevel_stack(&mut s.tape, &StackPyramid { highs, low }, 1, axes)?;
        s.tape.reshape(out, &shape)
    }
}

/// `X + SWM(X)` followed by `X + MLP(X)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveformerBlock {
    pub swm: SwmParams,
    pub mlp: Mlp,
}

impl WaveformerBlock {
    /// `mixer_lif` drives the neurons inside the mixer, `lif` those of the MLP.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        shape: SwmShape,
        groups: usize,
        mlp_ratio: usize,
        variant: SwmVariant,
        mixer_lif: LifParams,
        lif: LifParams,
    ) -> Result<Self> {
        b.push(name);
        let swm = SwmParams::build(b, "swm", shape, groups, variant, mixer_lif);
        let mlp = swm.and_then(|swm| Ok((swm, b.mlp("mlp", shape.c, mlp_ratio, lif)?)));
        b.pop();
        let (swm, mlp) = mlp?;
        Ok(Self { swm, mlp })
    }

    pub fn sites(&self, name: &str) -> Vec<SynapticSite> {
        let SwmShape { t, h, w, .. } = self.swm.shape;
        let mut out = self.swm.sites(&format!("{name}.swm"));
        out.extend(self.mlp.sites(&format!("{name}.mlp"), t * h * w));
        out
    }

    pub fn forward(&self, s: &mut Session, x: Var, name: &str) -> Result<Var> {
        let m = self.swm.forward(s, x, &format!("{name}.swm"))?;
        let x = s.tape.add(x, m)?;
        let m = self.mlp.forward(s, x, &format!("{name}.mlp"))?;
        s.tape.add(x, m)
    }
}

#[cfg(test)]
mod tests;
