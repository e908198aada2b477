use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::LifParams;
use crate::swm::{SwmVariant, LEVELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Swm,
    Ssa,
}

/// One stage: a downsample layer `[SN; Conv 3×3; BN]` with an optional
/// 3×3 stride-2 max pool, followed by `blocks` blocks of width `dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub block: BlockKind,
    pub dim: usize,
    pub blocks: usize,
    pub maxpool: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashVariant {
    /// Spikes of a shared linear layer, AND-reduced over time.
    #[default]
    Spiking,
    /// `sgn(tanh(Linear(mean_t f)))`.
    TanhSign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSize {
    Ti,
    S,
    M,
    L,
    Xl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub time_steps: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stem_dim: usize,
    pub stages: Vec<StageConfig>,
    pub hash_bits: usize,
    pub classes: usize,
    pub hash_variant: HashVariant,
    pub heads: usize,
    pub swm_groups: usize,
    pub mlp_ratio: usize,
    pub attn_scale: f32,
    pub swm_variant: SwmVariant,
    pub lif: LifParams,
    /// Neurons inside the wavelet mixers.
    pub swm_lif: LifParams,
}

/// Spatial extents and widths of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageGeometry {
    pub in_dim: usize,
    pub dim: usize,
    /// Extent the downsample convolution runs at.
    pub conv_h: usize,
    pub conv_w: usize,
    /// Extent the blocks run at.
    pub h: usize,
    pub w: usize,
}

pub(crate) fn pooled(n: usize) -> usize {
    (n - 1) / 2 + 1
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::nano()
    }
}

impl ModelConfig {
    /// Desk-scale configuration: four stages `[SWM, SWM, SSA, SSA]` of widths
    /// 16, 24, 32, 32 with one block each, on 4 × 1 × 32 × 32 inputs.
    pub fn nano() -> Self {
        let stage = |block, dim| StageConfig { block, dim, blocks: 1, maxpool: true };
        Self {
            time_steps: 4,
            in_channels: 1,
            height: 32,
            width: 32,
            stem_dim: 8,
            stages: vec![
                stage(BlockKind::Swm, 16),
                stage(BlockKind::Swm, 24),
                stage(BlockKind::Ssa, 32),
                stage(BlockKind::Ssa, 32),
            ],
            hash_bits: 16,
            classes: 4,
            hash_variant: HashVariant::Spiking,
            heads: 2,
            swm_groups: 4,
            mlp_ratio: 2,
            attn_scale: 0.125,
            swm_variant: SwmVariant::Spatiotemporal,
            lif: LifParams::default(),
            swm_lif: LifParams::default().with_threshold(0.25),
        }
    }

    /// The published size ladder with one block per populated stage.
    pub fn preset(size: ModelSize, time_steps: usize, in_channels: usize, height: usize, width: usize) -> Self {
        let (dims, pool_early, populated) = match size {
            ModelSize::Ti => ([128, 128, 256, 256], true, [false, true, false, true]),
            ModelSize::S => ([96, 192, 192, 384], false, [true; 4]),
            ModelSize::M => ([96, 192, 384, 384], false, [true; 4]),
            ModelSize::L => ([128, 256, 384, 512], true, [true; 4]),
            ModelSize::Xl => ([128, 256, 512, 512], true, [true; 4]),
        };
        let stages = (0..4)
            .map(|i| StageConfig {
                block: if i < 2 { BlockKind::Swm } else { BlockKind::Ssa },
                dim: dims[i],
                blocks: populated[i] as usize,
                maxpool: i >= 2 || pool_early,
            })
            .collect();
        Self {
            time_steps,
            in_channels,
            height,
            width,
            stem_dim: dims[0] / 2,
            stages,
            heads: 8,
            swm_groups: 8,
            mlp_ratio: 4,
            ..Self::nano()
        }
    }

    /// Stage-by-stage extents, checking every structural constraint.
    pub fn trace(&self) -> Result<Vec<StageGeometry>> {
        let positive = [
            ("time_steps", self.time_steps),
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("stem_dim", self.stem_dim),
            ("hash_bits", self.hash_bits),
            ("classes", self.classes),
            ("heads", self.heads),
            ("swm_groups", self.swm_groups),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if !(self.attn_scale > 0.0 && self.attn_scale.is_finite()) {
            return Err(Error::Config(format!("attention scale must be positive, got {}", self.attn_scale)));
        }
        self.lif.validate()?;
        self.swm_lif.validate()?;

        let f = 1 << LEVELS;
        let (mut h, mut w, mut prev) = (self.height, self.width, self.stem_dim);
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let n = i + 1;
            if st.dim == 0 {
                return Err(Error::Config(format!("stage {n} has zero width")));
            }
            if i > 0 && st.dim < self.stages[i - 1].dim {
                return Err(Error::Config(format!(
                    "stage widths must not decrease: stage {n} has {} after {}",
                    st.dim,
                    self.stages[i - 1].dim
                )));
            }
            let (conv_h, conv_w) = (h, w);
            if st.maxpool {
                h = pooled(h);
                w = pooled(w);
            }
            if st.blocks > 0 {
                match st.block {
                    BlockKind::Ssa if st.dim % self.heads != 0 => {
                        return Err(Error::Config(format!(
                            "stage {n} width {} is not divisible by {} heads",
                            st.dim, self.heads
                        )));
                    }
                    BlockKind::Swm => {
                        if st.dim % self.swm_groups != 0 {
                            return Err(Error::Config(format!(
                                "stage {n} width {} is not divisible by {} mixer groups",
                                st.dim, self.swm_groups
                            )));
                        }
                        let t_bad = self.swm_variant == SwmVariant::Spatiotemporal && !self.time_steps.is_multiple_of(f);
                        if h % f != 0 || w % f != 0 || t_bad {
                            return Err(Error::Config(format!(
                                "stage {n} mixer input T×H×W = {}×{h}×{w} is not divisible by {f}",
                                self.time_steps
                            )));
                        }
                    }
                    _ => {}
                }
            }
            out.push(StageGeometry { in_dim: prev, dim: st.dim, conv_h, conv_w, h, w });
            prev = st.dim;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.trace().map(|_| ())
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(self.stem_dim, |s| s.dim)
    }
}
