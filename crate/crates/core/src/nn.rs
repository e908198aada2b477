//! Parameter storage, the per-pass forward session and the small layers the
//! network is assembled from.
//!
//! Activations use the channel-last layout `[T, B, H, W, C]`. Convolutions
//! fold time and batch into one leading axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{SpikeMode, Tape, Var};
use crate::error::{Error, Result};
use crate::neuron::{sn, LifParams};
use crate::tensor::Tensor;

pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Trained by the optimizer.
    Weight,
    /// Running statistics, updated outside the optimizer.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry { name, kind, value });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).filter(|&i| self.entries[i].kind == ParamKind::Weight).collect()
    }

    /// Number of trainable scalars.
    pub fn num_weights(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Weight).map(|e| e.value.numel()).sum()
    }

    /// Replaces every tensor with the one of the same name in `other`,
    /// checking that names, kinds and shapes agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: expected {}, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.kind != theirs.kind || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

/// Deterministic parameter factory with a name prefix stack.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn tensor(&mut self, name: &str, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, kind, value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f32, hi: f32) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(lo..hi));
        self.tensor(name, ParamKind::Weight, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f32) -> Result<ParamId> {
        let dist = Normal::new(0.0f32, std).map_err(|e| Error::Config(format!("normal init: {e}")))?;
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.tensor(name, ParamKind::Weight, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f32) -> Result<ParamId> {
        self.tensor(name, ParamKind::Weight, Tensor::full(shape, v))
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], v: f32) -> Result<ParamId> {
        self.tensor(name, ParamKind::Buffer, Tensor::full(shape, v))
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize, bias: bool) -> Result<Linear> {
        self.push(name);
        let bound = 1.0 / (fin as f32).sqrt();
        let w = self.uniform("weight", &[fin, fout], -bound, bound)?;
        let b = if bias { Some(self.uniform("bias", &[fout], -bound, bound)?) } else { None };
        self.pop();
        Ok(Linear { w, b, fin, fout })
    }

    pub fn conv(&mut self, name: &str, k: usize, ci: usize, co: usize, bias: bool) -> Result<Conv> {
        self.push(name);
        let bound = 1.0 / ((k * k * ci) as f32).sqrt();
        let w = self.uniform("weight", &[k, k, ci, co], -bound, bound)?;
        let b = if bias { Some(self.uniform("bias", &[co], -bound, bound)?) } else { None };
        self.pop();
        Ok(Conv { w, b, k, ci, co })
    }

    pub fn batchnorm(&mut self, name: &str, c: usize) -> Result<BatchNorm> {
        self.push(name);
        let gamma = self.constant("gamma", &[c], 1.0)?;
        let beta = self.constant("beta", &[c], 0.0)?;
        let mean = self.buffer("running_mean", &[c], 0.0)?;
        let var = self.buffer("running_var", &[c], 1.0)?;
        self.pop();
        Ok(BatchNorm { gamma, beta, mean, var, eps: 1e-5 })
    }

    pub fn mlp(&mut self, name: &str, dim: usize, ratio: usize, lif: LifParams) -> Result<Mlp> {
        self.push(name);
        let hidden = dim * ratio;
        let fc1 = self.linear("fc1", dim, hidden, true)?;
        let bn1 = self.batchnorm("bn1", hidden)?;
        let fc2 = self.linear("fc2", hidden, dim, true)?;
        let bn2 = self.batchnorm("bn2", dim)?;
        self.pop();
        Ok(Mlp { fc1, bn1, fc2, bn2, lif })
    }
}

/// A spiking site and the operations its spikes drive, per sample over all
/// time steps when every slot fires.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynapticSite {
    pub probe: String,
    pub flops: u64,
}

impl SynapticSite {
    pub fn new(probe: impl Into<String>, flops: u64) -> Self {
        Self { probe: probe.into(), flops }
    }
}

/// Spike tensor recorded for firing-rate measurement.
#[derive(Clone, Debug)]
pub struct SpikeProbe {
    pub name: String,
    pub spikes: Var,
}

struct BnBatch {
    mean: ParamId,
    var: ParamId,
    out: Var,
    count: usize,
}

/// One forward (and optional backward) pass over a [`ParamStore`].
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    bn_batches: Vec<BnBatch>,
    probes: Option<Vec<SpikeProbe>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self::with_spike_mode(store, train, SpikeMode::Heaviside)
    }

    pub fn with_spike_mode(store: &'a ParamStore, train: bool, mode: SpikeMode) -> Self {
        Self::with_tape(store, train, Tape::with_spike_mode(mode))
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(store: &'a ParamStore, train: bool, tape: Tape) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
            train,
            bn_batches: Vec::new(),
            probes: None,
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Starts collecting spike tensors passed to [`Session::probe`].
    pub fn record_spikes(&mut self) {
        self.probes = Some(Vec::new());
    }

    pub fn probe(&mut self, name: &str, spikes: Var) {
        if let Some(p) = &mut self.probes {
            p.push(SpikeProbe { name: name.to_string(), spikes });
        }
    }

    pub fn probes(&self) -> &[SpikeProbe] {
        self.probes.as_deref().unwrap_or(&[])
    }

    /// Tape handle for a stored tensor, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = match self.store.entries()[id].kind {
            ParamKind::Weight => self.tape.param(value),
            ParamKind::Buffer => self.tape.constant(value),
        };
        self.bound[id] = Some(v);
        v
    }

    /// Uses `var` in place of the stored tensor `id` for the rest of the pass.
    pub fn bind(&mut self, id: ParamId, var: Var) -> Result<()> {
        if self.tape.shape(var) != self.store.get(id).shape() {
            return Err(Error::Shape {
                op: "bind",
                detail: format!("{:?} for parameter of shape {:?}", self.tape.shape(var), self.store.get(id).shape()),
            });
        }
        self.bound[id] = Some(var);
        Ok(())
    }

    /// Gradient of every stored tensor after `tape.backward`; `None` for
    /// buffers and tensors the pass never touched.
    pub fn gradients(&self) -> Vec<Option<&[f32]>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(id, v)| match (self.store.entries()[id].kind, v) {
                (ParamKind::Weight, Some(v)) => self.tape.grad(*v),
                _ => None,
            })
            .collect()
    }

    /// New running statistics for every batchnorm evaluated in train mode,
    /// as exponential averages with the given momentum. The variance uses
    /// the unbiased batch estimate.
    pub fn running_stat_updates(&self, momentum: f32) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::new();
        for b in &self.bn_batches {
            let Some((mean, var)) = self.tape.norm_stats(b.out) else { continue };
            let correction = if b.count > 1 { b.count as f64 / (b.count - 1) as f64 } else { 1.0 };
            let blend = |old: &Tensor, new: &[f32], scale: f64| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(&o, &n)| ((1.0 - momentum as f64) * o as f64 + momentum as f64 * n as f64 * scale) as f32)
                    .collect();
                Tensor::new(old.shape().to_vec(), data).expect("running statistic keeps its shape")
            };
            out.push((b.mean, blend(self.store.get(b.mean), mean, 1.0)));
            out.push((b.var, blend(self.store.get(b.var), var, correction)));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    /// Affine map over the last axis.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = self.b.map(|b| s.param(b));
        s.tape.linear(x, w, b)
    }

    pub fn flops_per_row(&self) -> u64 {
        2 * (self.fin * self.fout) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub k: usize,
    pub ci: usize,
    pub co: usize,
}

impl Conv {
    /// Same-size stride-1 convolution over `[..., H, W, C]`; all leading
    /// axes are folded into the batch.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        let r = shape.len();
        if r < 3 {
            return Err(Error::Shape { op: "conv2d", detail: format!("expected [..., H, W, C], got {shape:?}") });
        }
        let n: usize = shape[..r - 3].iter().product();
        let flat = s.tape.reshape(x, &[n, shape[r - 3], shape[r - 2], shape[r - 1]])?;
        let w = s.param(self.w);
        let b = self.b.map(|b| s.param(b));
        let y = s.tape.conv2d(flat, w, b, self.k / 2)?;
        let mut out_shape = shape;
        out_shape[r - 1] = self.co;
        s.tape.reshape(y, &out_shape)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        2 * (self.k * self.k * self.ci * self.co * h * w) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub eps: f32,
}

impl BatchNorm {
    /// Normalizes over every axis but the last.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        let rm = s.param(self.mean);
        let rv = s.param(self.var);
        let train = s.train;
        let y = s.tape.batchnorm(x, g, b, rm, rv, train, self.eps)?;
        if train {
            let shape = s.tape.shape(x);
            let count = shape.iter().product::<usize>() / shape.last().copied().unwrap_or(1);
            s.bn_batches.push(BnBatch { mean: self.mean, var: self.var, out: y, count });
        }
        Ok(y)
    }
}

/// `BN ∘ Linear ∘ SN ∘ BN ∘ Linear ∘ SN`, applied per position over channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
    pub lif: LifParams,
}

impl Mlp {
    pub fn forward(&self, s: &mut Session, x: Var, name: &str) -> Result<Var> {
        let s1 = sn(&mut s.tape, x, &self.lif)?;
        s.probe(&format!("{name}.fc1"), s1);
        let h = self.fc1.forward(s, s1)?;
        let h = self.bn1.forward(s, h)?;
        let s2 = sn(&mut s.tape, h, &self.lif)?;
        s.probe(&format!("{name}.fc2"), s2);
        let y = self.fc2.forward(s, s2)?;
        self.bn2.forward(s, y)
    }

    /// Spiking sites for `positions` token positions per sample (all time
    /// steps included).
    pub fn sites(&self, name: &str, positions: usize) -> Vec<SynapticSite> {
        let p = positions as u64;
        vec![
            SynapticSite::new(format!("{name}.fc1"), p * self.fc1.flops_per_row()),
            SynapticSite::new(format!("{name}.fc2"), p * self.fc2.flops_per_row()),
        ]
    }
}
