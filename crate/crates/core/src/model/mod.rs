//! The four-stage network: stem, downsample layers, Waveformer and
//! Transformer stages, global average pooling, the hash layer and the
//! classification head.
//!
//! Activations are `[T, B, H, W, C]`. Public entry points that take single
//! samples use `[T, C, H, W]`.

pub mod checkpoint;
mod code;
mod config;

pub use checkpoint::Checkpoint;
pub use code::HashCode;
pub use config::{BlockKind, HashVariant, ModelConfig, ModelSize, StageConfig, StageGeometry};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::neuron::{lif_sequence_var, sn};
use crate::nn::{BatchNorm, Conv, Linear, ParamBuilder, ParamStore, Session, SynapticSite};
use crate::ssa::TransformerBlock;
use crate::swm::{SwmShape, WaveformerBlock};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Block {
    Waveformer(WaveformerBlock),
    Transformer(TransformerBlock),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub maxpool: bool,
    pub blocks: Vec<Block>,
    pub geometry: StageGeometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub stem: Conv,
    pub stem_bn: BatchNorm,
    pub stages: Vec<Stage>,
    pub hash: Linear,
    pub head: Linear,
}

/// Graph handles produced by one forward pass over a batch of `B` samples.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Pooled features `[T, B, C]`.
    pub features: Var,
    /// Hash-layer pre-activation, time-averaged for the spiking variant:
    /// `[B, L]`.
    pub mean_potential: Var,
    /// Relaxed code in `{−1, +1}` (spiking) or `(−1, 1)` (tanh) `[B, L]`.
    pub signed_code: Var,
    /// What the classification head reads `[B, L]`.
    pub head_input: Var,
    /// Log class probabilities `[B, classes]`.
    pub log_probs: Var,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let geometry = config.trace()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, seed);
        let stem = b.conv("stem", 3, config.in_channels, config.stem_dim, false)?;
        let stem_bn = b.batchnorm("stem_bn", config.stem_dim)?;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, (st, g)) in config.stages.iter().zip(&geometry).enumerate() {
            b.push(format!("stage{}", i + 1));
            let conv = b.conv("down", 3, g.in_dim, g.dim, false)?;
            let bn = b.batchnorm("down_bn", g.dim)?;
            let mut blocks = Vec::with_capacity(st.blocks);
            for j in 0..st.blocks {
                let name = format!("block{}", j + 1);
                blocks.push(match st.block {
                    BlockKind::Swm => Block::Waveformer(WaveformerBlock::build(
                        &mut b,
                        &name,
                        SwmShape { t: config.time_steps, c: g.dim, h: g.h, w: g.w },
                        config.swm_groups,
                        config.mlp_ratio,
                        config.swm_variant,
                        config.swm_lif,
                        config.lif,
                    )?),
                    BlockKind::Ssa => Block::Transformer(TransformerBlock::build(
                        &mut b,
                        &name,
                        g.dim,
                        config.heads,
                        config.attn_scale,
                        config.mlp_ratio,
                        config.lif,
                    )?),
                });
            }
            b.pop();
            stages.push(Stage { conv, bn, maxpool: st.maxpool, blocks, geometry: *g });
        }
        let hash = b.linear("hash", config.feature_dim(), config.hash_bits, true)?;
        let head = b.linear("head", config.hash_bits, config.classes, true)?;
        Ok(Self { config, seed, store, stem, stem_bn, stages, hash, head })
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.store.num_weights()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let ok = shape.len() == 5
            && shape[0] == c.time_steps
            && shape[2] == c.height
            && shape[3] == c.width
            && shape[4] == c.in_channels;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                op: "model",
                detail: format!(
                    "expected [{}, B, {}, {}, {}], got {shape:?}",
                    c.time_steps, c.height, c.width, c.in_channels
                ),
            })
        }
    }

    /// Stem and stages on `[T, B, H, W, C_in]`, then spatial average pooling:
    /// `[T, B, C_last]`.
    pub fn features_var(&self, s: &mut Session, x: Var) -> Result<Var> {
        self.check_input(s.tape.shape(x))?;
        let x = self.stem.forward(s, x)?;
        let mut x = self.stem_bn.forward(s, x)?;
        for (i, stage) in self.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let spikes = sn(&mut s.tape, x, &self.config.lif)?;
            s.probe(&format!("{name}.down"), spikes);
            let y = stage.conv.forward(s, spikes)?;
            x = stage.bn.forward(s, y)?;
            if stage.maxpool {
                x = maxpool(&mut s.tape, x)?;
            }
            for (j, block) in stage.blocks.iter().enumerate() {
                let bname = format!("{name}.block{}", j + 1);
                x = match block {
                    Block::Waveformer(blk) => blk.forward(s, x, &bname)?,
                    Block::Transformer(blk) => blk.forward(s, x, &bname)?,
                };
            }
        }
        s.tape.mean(x, &[2, 3], false)
    }

    /// Full pass: features, hash layer and head.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<ForwardOutput> {
        let features = self.features_var(s, x)?;
        let (mean_potential, signed_code, head_input) = match self.config.hash_variant {
            HashVariant::Spiking => {
                let h = hash_layer_spiking(s, features, &self.hash, &self.config)?;
                let signed = s.tape.scale(h.code, 2.0)?;
                let signed = s.tape.add_scalar(signed, -1.0)?;
                (h.mean_potential, signed, h.mean_spikes)
            }
            HashVariant::TanhSign => {
                let f_mean = s.tape.mean(features, &[0], false)?;
                let pre = self.hash.forward(s, f_mean)?;
                let relaxed = s.tape.tanh(pre)?;
                (pre, relaxed, relaxed)
            }
        };
        let logits = self.head.forward(s, head_input)?;
        let log_probs = log_softmax(&mut s.tape, logits)?;
        Ok(ForwardOutput { features, mean_potential, signed_code, head_input, log_probs })
    }

    /// Log class probabilities of the head applied to `±1` codes `[B, L]`.
    pub fn classify_codes(&self, s: &mut Session, signed: Var) -> Result<Var> {
        let logits = self.head.forward(s, signed)?;
        log_softmax(&mut s.tape, logits)
    }

    /// Binary codes from the output of [`Model::forward`].
    pub fn codes(&self, s: &Session, out: &ForwardOutput) -> Result<Vec<HashCode>> {
        let l = self.config.hash_bits;
        let data = s.tape.data(out.signed_code);
        data.chunks(l)
            .map(|row| match self.config.hash_variant {
                HashVariant::Spiking => HashCode::from_bits(&row.iter().map(|&v| (v + 1.0) / 2.0).collect::<Vec<_>>()),
                HashVariant::TanhSign => Ok(HashCode::from_signs(row)),
            })
            .collect()
    }

    /// Eval-mode codes for a batch `[T, B, H, W, C]`.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<HashCode>> {
        let mut s = Session::new(&self.store, false);
        let xv = s.tape.constant(x.clone());
        let out = self.forward(&mut s, xv)?;
        self.codes(&s, &out)
    }

    /// Eval-mode pooled features of one sample `[T, C, H, W]`: `[T, C_last]`.
    pub fn features(&self, sample: &Tensor) -> Result<Tensor> {
        let x = batch_samples(std::slice::from_ref(sample))?;
        let mut s = Session::new(&self.store, false);
        let xv = s.tape.constant(x);
        let f = self.features_var(&mut s, xv)?;
        let t = self.config.time_steps;
        s.tape.value(f).reshape(&[t, self.config.feature_dim()])
    }

    /// Flops of the stem convolution per sample over all time steps. Its
    /// input is not binary, so these are multiply-accumulates.
    pub fn stem_flops(&self) -> u64 {
        let c = &self.config;
        c.time_steps as u64 * self.stem.flops(c.height, c.width)
    }

    /// Every spike-driven site behind the stem, in forward order.
    pub fn sites(&self) -> Vec<SynapticSite> {
        let t = self.config.time_steps;
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let g = stage.geometry;
            out.push(SynapticSite::new(format!("{name}.down"), t as u64 * stage.conv.flops(g.conv_h, g.conv_w)));
            for (j, block) in stage.blocks.iter().enumerate() {
                let bname = format!("{name}.block{}", j + 1);
                out.extend(match block {
                    Block::Waveformer(blk) => blk.sites(&bname),
                    Block::Transformer(blk) => blk.sites(&bname, t, g.h, g.w),
                });
            }
        }
        out
    }
}

fn maxpool(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [t, b, h, w, c] = shape[..] else {
        return Err(Error::Shape { op: "maxpool", detail: format!("expected [T, B, H, W, C], got {shape:?}") });
    };
    let flat = tape.reshape(x, &[t * b, h, w, c])?;
    let y = tape.maxpool2d(flat)?;
    let (ho, wo) = (config::pooled(h), config::pooled(w));
    tape.reshape(y, &[t, b, ho, wo, c])
}

/// Outputs of the spiking hash layer for a batch.
#[derive(Clone, Copy, Debug)]
pub struct SpikingHash {
    /// Spikes `[T, B, L]`.
    pub spikes: Var,
    /// Product of the spikes over time `[B, L]`.
    pub code: Var,
    /// Time-averaged pre-spike potential `[B, L]`.
    pub mean_potential: Var,
    /// Time-averaged spikes `[B, L]`.
    pub mean_spikes: Var,
}

/// `SN(Linear(f))` with the linear map shared over time, AND-reduced over
/// the time axis of `features` `[T, ..., C]`.
pub fn hash_layer_spiking(s: &mut Session, features: Var, linear: &Linear, config: &ModelConfig) -> Result<SpikingHash> {
    let pre = linear.forward(s, features)?;
    let (spikes, mean) = lif_sequence_var(&mut s.tape, pre, &config.lif, true)?;
    let mean_potential = mean.expect("potential requested");
    let code = and_over_time(&mut s.tape, spikes)?;
    let mean_spikes = s.tape.mean(spikes, &[0], false)?;
    Ok(SpikingHash { spikes, code, mean_potential, mean_spikes })
}

/// Product over the leading axis; equals logical AND on {0, 1}.
pub fn and_over_time(tape: &mut Tape, spikes: Var) -> Result<Var> {
    let shape = tape.shape(spikes).to_vec();
    let t = match shape.first() {
        Some(&t) if t >= 1 => t,
        _ => return Err(Error::Shape { op: "and_over_time", detail: format!("no time axis in {shape:?}") }),
    };
    let mut acc = tape.slice(spikes, 0, 0, 1)?;
    for i in 1..t {
        let step = tape.slice(spikes, 0, i, i + 1)?;
        acc = tape.mul(acc, step)?;
    }
    tape.reshape(acc, &shape[1..])
}

/// `log softmax` over the last axis of `[B, K]`. The row maxima are
/// subtracted as constants.
pub fn log_softmax(tape: &mut Tape, logits: Var) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let [b, k] = shape[..] else {
        return Err(Error::Shape { op: "log_softmax", detail: format!("expected [B, K], got {shape:?}") });
    };
    if k == 0 {
        return Err(Error::Shape { op: "log_softmax", detail: "no classes".into() });
    }
    let maxima: Vec<f32> =
        tape.data(logits).chunks(k).map(|r| r.iter().copied().fold(f32::NEG_INFINITY, f32::max)).collect();
    let m = tape.constant(Tensor::new(vec![b, 1], maxima)?);
    let shifted = tape.sub(logits, m)?;
    let e = tape.exp(shifted)?;
    let z = tape.sum(e, &[1], true)?;
    let lz = tape.log(z)?;
    tape.sub(shifted, lz)
}

/// Class probabilities for each row of `logits` `[B, K]`.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let lp = log_softmax(&mut tape, l)?;
    Ok(tape.value(lp).map(f32::exp))
}

/// Stacks samples `[T, C, H, W]` into a batch `[T, B, H, W, C]`.
pub fn batch_samples(samples: &[Tensor]) -> Result<Tensor> {
    let Some(first) = samples.first() else {
        return Err(Error::Shape { op: "batch_samples", detail: "empty batch".into() });
    };
    let shape = first.shape().to_vec();
    let [t, c, h, w] = shape[..] else {
        return Err(Error::Shape { op: "batch_samples", detail: format!("expected [T, C, H, W], got {shape:?}") });
    };
    let b = samples.len();
    let mut data = vec![0.0f32; t * b * h * w * c];
    for (bi, x) in samples.iter().enumerate() {
        if x.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "batch_samples",
                detail: format!("sample {bi} is {:?}, sample 0 is {shape:?}", x.shape()),
            });
        }
        let src = x.data();
        for ti in 0..t {
            for ci in 0..c {
                for p in 0..h * w {
                    data[((ti * b + bi) * h * w + p) * c + ci] = src[(ti * c + ci) * h * w + p];
                }
            }
        }
    }
    Tensor::new(vec![t, b, h, w, c], data)
}
