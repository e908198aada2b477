//! Spiking self-attention and the Spiking Transformer Block.
//!
//! Queries, keys and values are spike tensors, so `Q·Kᵀ·V` counts
//! coincidences and needs no softmax. The product is formed per time step
//! and head over the spatial tokens; only the spiking neurons carry state
//! from one step to the next.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::neuron::{sn, LifParams};
use crate::nn::{BatchNorm, Conv, Mlp, ParamBuilder, Session, SynapticSite};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsaParams {
    pub q: Conv,
    pub q_bn: BatchNorm,
    pub k: Conv,
    pub k_bn: BatchNorm,
    pub v: Conv,
    pub v_bn: BatchNorm,
    pub proj: Conv,
    pub proj_bn: BatchNorm,
    pub dim: usize,
    pub heads: usize,
    pub scale: f32,
    pub lif: LifParams,
}

impl SsaParams {
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        dim: usize,
        heads: usize,
        scale: f32,
        lif: LifParams,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("embedding dim {dim} is not divisible by {heads} heads")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("attention scale must be positive, got {scale}")));
        }
        b.push(name);
        let q = b.conv("q", 1, dim, dim, false)?;
        let q_bn = b.batchnorm("q_bn", dim)?;
        let k = b.conv("k", 1, dim, dim, false)?;
        let k_bn = b.batchnorm("k_bn", dim)?;
        let v = b.conv("v", 1, dim, dim, false)?;
        let v_bn = b.batchnorm("v_bn", dim)?;
        let proj = b.conv("proj", 1, dim, dim, false)?;
        let proj_bn = b.batchnorm("proj_bn", dim)?;
        b.pop();
        Ok(Self { q, q_bn, k, k_bn, v, v_bn, proj, proj_bn, dim, heads, scale, lif })
    }

    /// `SN(BN(Conv1×1(SN(X))))` for each of Q, K, V, split into heads:
    /// `[T, B, H, W, C]` becomes `[T, B, heads, H·W, C/heads]`.
    pub fn qkv_project(&self, s: &mut Session, x: Var, name: &str) -> Result<[Var; 3]> {
        let shape = s.tape.shape(x).to_vec();
        let [t, b, h, w, c] = shape[..] else {
            return Err(Error::Shape { op: "ssa", detail: format!("expected [T, B, H, W, C], got {shape:?}") });
        };
        if c != self.dim {
            return Err(Error::Shape { op: "ssa", detail: format!("{c} channels for embedding dim {}", self.dim) });
        }
        let input = sn(&mut s.tape, x, &self.lif)?;
        s.probe(&format!("{name}.qkv"), input);
        let dh = c / self.heads;
        let mut out = [x; 3];
        for (slot, (conv, bn, tag)) in
            [(self.q, self.q_bn, "q"), (self.k, self.k_bn, "k"), (self.v, self.v_bn, "v")].into_iter().enumerate()
        {
            let y = conv.forward(s, input)?;
            let y = bn.forward(s, y)?;
            let spikes = sn(&mut s.tape, y, &self.lif)?;
            s.probe(&format!("{name}.{tag}"), spikes);
            let split = s.tape.reshape(spikes, &[t, b, h * w, self.heads, dh])?;
            out[slot] = s.tape.permute(split, &[0, 1, 3, 2, 4])?;
        }
        Ok(out)
    }

    /// `X + BN(Conv1×1(SA(Q, K, V)))`.
    pub fn forward(&self, s: &mut Session, x: Var, name: &str) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        let [q, k, v] = self.qkv_project(s, x, name)?;
        let attn = spiking_attention(&mut s.tape, q, k, v, self.scale, &self.lif)?;
        s.probe(&format!("{name}.proj"), attn);
        let merged = s.tape.permute(attn, &[0, 1, 3, 2, 4])?;
        let merged = s.tape.reshape(merged, &shape)?;
        let y = self.proj.forward(s, merged)?;
        let y = self.proj_bn.forward(s, y)?;
        s.tape.add(x, y)
    }

    /// Spiking sites for `t` steps over an `h × w` token grid.
    pub fn sites(&self, name: &str, t: usize, h: usize, w: usize) -> Vec<SynapticSite> {
        let positions = (t * h * w) as u64;
        let conv = 2 * (self.dim * self.dim) as u64;
        let tokens = (h * w) as u64;
        let dh = (self.dim / self.heads) as u64;
        let attn = 2 * tokens * tokens * dh * 2 * self.heads as u64 * t as u64;
        vec![
            SynapticSite::new(format!("{name}.qkv"), 3 * positions * conv),
            SynapticSite::new(format!("{name}.q"), attn),
            SynapticSite::new(format!("{name}.proj"), positions * conv),
        ]
    }
}

/// `Q·Kᵀ·V·s` before the spiking nonlinearity, per leading index. Inputs are
/// `[..., N, d]`; evaluated as `Q·(Kᵀ·V)`, which is exact for spike inputs.
pub fn attention_scores(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f32) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() < 2 || qs != ks || ks[..ks.len() - 1] != vs[..vs.len() - 1] {
        return Err(Error::Shape { op: "spiking_attention", detail: format!("Q {qs:?}, K {ks:?}, V {vs:?}") });
    }
    let r = ks.len();
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    let kt = tape.permute(k, &perm)?;
    let kv = tape.matmul(kt, v)?;
    let qkv = tape.matmul(q, kv)?;
    tape.scale(qkv, scale)
}

/// `SN(Q·Kᵀ·V·s)` over `[T, ..., N, d]` spike tensors; the neurons run along
/// the leading time axis.
pub fn spiking_attention(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f32, lif: &LifParams) -> Result<Var> {
    let scores = attention_scores(tape, q, k, v, scale)?;
    sn(tape, scores, lif)
}

/// Attention sublayer followed by `X + MLP(X)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ssa: SsaParams,
    pub mlp: Mlp,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        dim: usize,
        heads: usize,
        scale: f32,
        mlp_ratio: usize,
        lif: LifParams,
    ) -> Result<Self> {
        b.push(name);
        let built = SsaParams::build(b, "ssa", dim, heads, scale, lif)
            .and_then(|ssa| Ok((ssa, b.mlp("mlp", dim, mlp_ratio, lif)?)));
        b.pop();
        let (ssa, mlp) = built?;
        Ok(Self { ssa, mlp })
    }

    pub fn forward(&self, s: &mut Session, x: Var, name: &str) -> Result<Var> {
        let x = self.ssa.forward(s, x, &format!("{name}.ssa"))?;
        let m = self.mlp.forward(s, x, &format!("{name}.mlp"))?;
        s.tape.add(x, m)
    }

    pub fn sites(&self, name: &str, t: usize, h: usize, w: usize) -> Vec<SynapticSite> {
        let mut out = self.ssa.sites(&format!("{name}.ssa"), t, h, w);
        out.extend(self.mlp.sites(&format!("{name}.mlp"), t * h * w));
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn bits(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
    }

    #[test]
    fn worked_attention_example() {
        let mut tape = Tape::new();
        let q = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let k = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 1.0, 1.0]));
        let v = tape.constant(t(&[1, 2, 2], &[1.0, 1.0, 0.0, 1.0]));
        let scores = attention_scores(&mut tape, q, k, v, 1.0).unwrap();
        assert_eq!(tape.data(scores), &[1.0, 2.0, 0.0, 1.0]);
        let out = spiking_attention(&mut tape, q, k, v, 4.0, &LifParams::default()).unwrap();
        assert_eq!(tape.data(out), &[1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_values_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let q = tape.constant(bits(&mut rng, &[3, 2, 5, 4]));
        let k = tape.constant(bits(&mut rng, &[3, 2, 5, 4]));
        let v = tape.constant(Tensor::zeros(&[3, 2, 5, 4]));
        let out = spiking_attention(&mut tape, q, k, v, 0.125, &LifParams::default()).unwrap();
        assert!(tape.data(out).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unscaled_scores_are_nonnegative_integers_matching_a_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d) = (6, 3);
        for _ in 0..50 {
            let (qt, kt, vt) = (bits(&mut rng, &[n, d]), bits(&mut rng, &[n, d]), bits(&mut rng, &[n, d]));
            let mut tape = Tape::new();
            let (q, k, v) = (tape.constant(qt.clone()), tape.constant(kt.clone()), tape.constant(vt.clone()));
            let s = attention_scores(&mut tape, q, k, v, 1.0).unwrap();
            for i in 0..n {
                for j in 0..d {
                    let mut acc = 0u32;
                    for m in 0..n {
                        let qk: u32 = (0..d).map(|e| (qt.at(&[i, e]) * kt.at(&[m, e])) as u32).sum();
                        acc += qk * vt.at(&[m, j]) as u32;
                    }
                    assert_eq!(tape.value(s).at(&[i, j]), acc as f32);
                }
            }
        }
    }

    #[test]
    fn attention_is_token_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (steps, n, d) = (3, 7, 4);
        let (qt, kt, vt) = (bits(&mut rng, &[steps, n, d]), bits(&mut rng, &[steps, n, d]), bits(&mut rng, &[steps, n, d]));
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permute = |x: &Tensor| Tensor::from_fn(&[steps, n, d], |i| {
            let (s, rest) = (i / (n * d), i % (n * d));
            x.at(&[s, perm[rest / d], rest % d])
        });
        let lif = LifParams::default();
        let run = |q: &Tensor, k: &Tensor, v: &Tensor| {
            let mut tape = Tape::new();
            let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
            let out = spiking_attention(&mut tape, q, k, v, 0.125, &lif).unwrap();
            tape.value(out).clone()
        };
        let base = run(&qt, &kt, &vt);
        let permuted = run(&permute(&qt), &permute(&kt), &permute(&vt));
        assert_eq!(permuted, permute(&base));
    }

    #[test]
    fn scores_of_a_step_depend_only_on_that_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = [4, 2, 5, 3];
        let (qt, kt, vt) = (bits(&mut rng, &shape), bits(&mut rng, &shape), bits(&mut rng, &shape));
        let scores = |q: &Tensor, k: &Tensor, v: &Tensor| {
            let mut tape = Tape::new();
            let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
            let s = attention_scores(&mut tape, q, k, v, 0.125).unwrap();
            tape.value(s).clone()
        };
        let base = scores(&qt, &kt, &vt);
        let step = base.numel() / 4;
        for changed in 0..4 {
            let mut k2 = kt.clone();
            for x in &mut k2.data_mut()[changed * step..(changed + 1) * step] {
                *x = 1.0 - *x;
            }
            let other = scores(&qt, &k2, &vt);
            for s in (0..4).filter(|&s| s != changed) {
                assert_eq!(&other.data()[s * step..(s + 1) * step], &base.data()[s * step..(s + 1) * step]);
            }
        }
    }

    fn block(dim: usize, heads: usize, seed: u64) -> (ParamStore, TransformerBlock) {
        let mut store = ParamStore::new();
        let blk = {
            let mut b = ParamBuilder::new(&mut store, seed);
            TransformerBlock::build(&mut b, "blk", dim, heads, 0.125, 2, LifParams::default()).unwrap()
        };
        (store, blk)
    }

    fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..3.0))
    }

    #[test]
    fn qkv_projection_shapes_and_binarity() {
        let (store, blk) = block(16, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = Session::new(&store, true);
        let x = s.tape.constant(input(&mut rng, &[4, 1, 4, 4, 16]));
        let qkv = blk.ssa.qkv_project(&mut s, x, "ssa").unwrap();
        for v in qkv {
            assert_eq!(s.tape.shape(v), &[4, 1, 2, 16, 8]);
            assert!(s.tape.data(v).iter().all(|&x| x == 0.0 || x == 1.0));
        }
    }

    #[test]
    fn zero_projection_weights_give_zero_spikes() {
        let (mut store, blk) = block(8, 2, 6);
        for conv in [blk.ssa.q, blk.ssa.k, blk.ssa.v] {
            let z = Tensor::zeros(store.get(conv.w).shape());
            *store.get_mut(conv.w) = z;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = Session::new(&store, false);
        let x = s.tape.constant(input(&mut rng, &[2, 2, 2, 2, 8]));
        for v in blk.ssa.qkv_project(&mut s, x, "ssa").unwrap() {
            assert!(s.tape.data(v).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 0);
        let err = SsaParams::build(&mut b, "ssa", 10, 4, 0.125, LifParams::default()).unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn zero_output_projection_reduces_block_to_mlp_residual() {
        let (mut store, blk) = block(8, 2, 7);
        for id in [blk.ssa.proj_bn.gamma, blk.ssa.proj_bn.beta] {
            let z = Tensor::zeros(store.get(id).shape());
            *store.get_mut(id) = z;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = input(&mut rng, &[4, 2, 4, 4, 8]);
        let mut s = Session::new(&store, false);
        let xv = s.tape.constant(x.clone());
        let y = blk.forward(&mut s, xv, "blk").unwrap();
        let got = s.tape.value(y).clone();

        let mut s = Session::new(&store, false);
        let xv = s.tape.constant(x);
        let m = blk.mlp.forward(&mut s, xv, "mlp").unwrap();
        let expect = s.tape.add(xv, m).unwrap();
        assert_eq!(&got, s.tape.value(expect));
    }

    #[test]
    fn block_preserves_shape_and_is_token_permutation_equivariant() {
        let (store, blk) = block(32, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = [4, 1, 4, 4, 32];
        let x = input(&mut rng, &shape);
        let mut perm: Vec<usize> = (0..16).collect();
        for i in (1..16).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permute = |x: &Tensor| {
            Tensor::from_fn(&shape, |i| {
                let (outer, rest) = (i / (16 * 32), i % (16 * 32));
                x.data()[outer * 16 * 32 + perm[rest / 32] * 32 + rest % 32]
            })
        };
        let run = |x: &Tensor| {
            let mut s = Session::new(&store, false);
            let xv = s.tape.constant(x.clone());
            let y = blk.forward(&mut s, xv, "blk").unwrap();
            s.tape.value(y).clone()
        };
        let base = run(&x);
        assert_eq!(base.shape(), &shape);
        assert_eq!(run(&permute(&x)), permute(&base));
    }
}
