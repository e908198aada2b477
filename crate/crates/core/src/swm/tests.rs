use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::check_gradients;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

fn t(shape: &[usize], v: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// One time step with `H = I/2`: inputs of 2 fire, inputs of 0 stay silent.
fn fire_pattern(bits: &[f32]) -> Tensor {
    t(&[1, bits.len()], &bits.iter().map(|b| 2.0 * b).collect::<Vec<_>>())
}

#[test]
fn global_mixer_masks_weights_with_spikes() {
    let lif = LifParams::default();
    let mut tape = Tape::new();
    let l2 = tape.constant(fire_pattern(&[1.0, 0.0, 1.0]));
    let w1 = tape.constant(t(&[1, 3], &[0.5, 0.7, -0.2]));
    let out = global_mixer(&mut tape, l2, w1, &lif).unwrap();
    assert_eq!(tape.data(out), &[0.5, 0.0, -0.2]);

    let ones = tape.constant(Tensor::ones(&[1, 3]));
    let out = global_mixer(&mut tape, l2, ones, &lif).unwrap();
    assert_eq!(tape.data(out), &[1.0, 0.0, 1.0]);

    let quiet = tape.constant(t(&[3, 3], &[0.3; 9]));
    let w = tape.constant(t(&[1, 3], &[5.0, -4.0, 9.0]));
    let out = global_mixer(&mut tape, quiet, w, &lif).unwrap();
    assert!(tape.data(out).iter().all(|&v| v == 0.0));
}

#[test]
fn token_mixer_broadcasts_over_channels() {
    let lif = LifParams::default();
    let mut tape = Tape::new();
    // [t=1, band=1, h=1, w=2, C=2] with every site firing.
    let h = tape.constant(Tensor::full(&[1, 1, 1, 2, 2], 2.0));
    let w = tape.constant(t(&[1, 1, 1, 2, 1], &[0.3, 1.0]));
    let out = token_mixer(&mut tape, h, w, &lif).unwrap();
    assert_eq!(tape.data(out), &[0.3, 0.3, 1.0, 1.0]);

    let zero = tape.constant(Tensor::zeros(&[1, 1, 1, 2, 1]));
    let out = token_mixer(&mut tape, h, zero, &lif).unwrap();
    assert!(tape.data(out).iter().all(|&v| v == 0.0));
}

#[test]
fn token_mixer_outputs_are_zero_or_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lif = LifParams::default();
    for _ in 0..20 {
        let bits = Tensor::from_fn(&[1, 7, 1, 2, 2, 3], |_| if rng.gen_bool(0.5) { 2.0 } else { 0.0 });
        let wv = random(&mut rng, &[1, 7, 1, 2, 2, 1], -1.0, 1.0);
        let mut tape = Tape::new();
        let h = tape.constant(bits.clone());
        let w = tape.constant(wv.clone());
        let out = token_mixer(&mut tape, h, w, &lif).unwrap();
        let out = tape.value(out);
        for (i, &o) in out.data().iter().enumerate() {
            let site = i / 3;
            let expect = if bits.data()[i] > 0.0 { wv.data()[site] } else { 0.0 };
            assert_eq!(o, expect);
        }
    }
}

#[test]
fn channel_mixer_examples() {
    let mut tape = Tape::new();
    let w = tape.constant(t(&[1, 2, 2], &[0.3, 0.1, 0.2, 0.4]));
    let one_hot = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let out = channel_mixer(&mut tape, one_hot, w).unwrap();
    assert_eq!(tape.data(out), &[0.3, 0.1]);

    let both = tape.constant(t(&[1, 2], &[1.0, 1.0]));
    let out = channel_mixer(&mut tape, both, w).unwrap();
    let got = tape.data(out);
    assert!((got[0] - 0.5).abs() < 1e-7 && (got[1] - 0.5).abs() < 1e-7, "{got:?}");

    let eye = tape.constant(t(&[2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]));
    let spikes = t(&[3, 4], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    let s = tape.constant(spikes.clone());
    let out = channel_mixer(&mut tape, s, eye).unwrap();
    assert_eq!(tape.value(out), &spikes);
}

#[test]
fn channel_mixer_with_unit_groups_scales_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = 5;
    let scales = random(&mut rng, &[c], -2.0, 2.0);
    let spikes = Tensor::from_fn(&[4, 3, c], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let w = tape.constant(scales.reshape(&[c, 1, 1]).unwrap());
    let s = tape.constant(spikes.clone());
    let out = channel_mixer(&mut tape, s, w).unwrap();
    for (i, &o) in tape.data(out).iter().enumerate() {
        assert_eq!(o, spikes.data()[i] * scales.data()[i % c]);
    }
}

#[test]
fn channel_mixer_rejects_mismatched_groups() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::ones(&[2, 6]));
    let w = tape.constant(Tensor::ones(&[4, 2, 2]));
    assert!(channel_mixer(&mut tape, s, w).is_err());
}

struct Fixture {
    store: ParamStore,
    block: WaveformerBlock,
}

fn fixture(shape: SwmShape, groups: usize, variant: SwmVariant, seed: u64) -> Fixture {
    let mut store = ParamStore::new();
    let lif = LifParams::default().with_threshold(0.25);
    let block = {
        let mut b = ParamBuilder::new(&mut store, seed);
        WaveformerBlock::build(&mut b, "block", shape, groups, 2, variant, lif, lif).unwrap()
    };
    Fixture { store, block }
}

fn input(rng: &mut ChaCha8Rng, t: usize, b: usize, shape: SwmShape) -> Tensor {
    random(rng, &[t, b, shape.h, shape.w, shape.c], -1.5, 2.5)
}

fn run_swm(f: &Fixture, x: &Tensor) -> Tensor {
    let mut s = Session::new(&f.store, false);
    let xv = s.tape.constant(x.clone());
    let y = f.block.swm.forward(&mut s, xv, "swm").unwrap();
    s.tape.value(y).clone()
}

fn reverse_time(x: &Tensor) -> Tensor {
    let shape = x.shape().to_vec();
    let step = x.numel() / shape[0];
    let mut data = Vec::with_capacity(x.numel());
    for t in (0..shape[0]).rev() {
        data.extend_from_slice(&x.data()[t * step..(t + 1) * step]);
    }
    Tensor::new(shape, data).unwrap()
}

#[test]
fn swm_preserves_shape() {
    let shape = SwmShape { t: 4, c: 8, h: 8, w: 8 };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for variant in [SwmVariant::Spatiotemporal, SwmVariant::Spatial] {
        let f = fixture(shape, 2, variant, 5);
        let x = input(&mut rng, 4, 2, shape);
        let y = run_swm(&f, &x);
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
    }
}

#[test]
fn swm_rejects_indivisible_geometry() {
    let mut store = ParamStore::new();
    let mut b = ParamBuilder::new(&mut store, 0);
    let lif = LifParams::default();
    let bad_t = SwmShape { t: 6, c: 4, h: 8, w: 8 };
    assert!(SwmParams::build(&mut b, "a", bad_t, 2, SwmVariant::Spatiotemporal, lif).is_err());
    assert!(SwmParams::build(&mut b, "b", bad_t, 2, SwmVariant::Spatial, lif).is_ok());
    let bad_c = SwmShape { t: 4, c: 6, h: 8, w: 8 };
    assert!(SwmParams::build(&mut b, "c", bad_c, 4, SwmVariant::Spatiotemporal, lif).is_err());
}

#[test]
fn zero_mixer_weights_give_zero_output() {
    let shape = SwmShape { t: 4, c: 4, h: 8, w: 8 };
    let mut f = fixture(shape, 2, SwmVariant::Spatiotemporal, 2);
    let p = f.block.swm;
    for id in [p.w1, p.w2, p.w3, p.w4, p.w5] {
        let z = Tensor::zeros(f.store.get(id).shape());
        *f.store.get_mut(id) = z;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = run_swm(&f, &input(&mut rng, 4, 1, shape));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn spatiotemporal_mixer_is_sensitive_to_time_order() {
    let shape = SwmShape { t: 8, c: 4, h: 8, w: 8 };
    let f = fixture(shape, 2, SwmVariant::Spatiotemporal, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = input(&mut rng, 8, 1, shape);
    let forward = run_swm(&f, &x);
    let backward = reverse_time(&run_swm(&f, &reverse_time(&x)));
    assert!(forward.max_abs_diff(&backward).unwrap() > 1e-3);
}

#[test]
fn spatial_mixer_is_equivariant_to_time_reversal() {
    let shape = SwmShape { t: 8, c: 4, h: 8, w: 8 };
    let f = fixture(shape, 2, SwmVariant::Spatial, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..5 {
        let x = input(&mut rng, 8, 2, shape);
        let forward = run_swm(&f, &x);
        let backward = reverse_time(&run_swm(&f, &reverse_time(&x)));
        assert!(forward.max_abs_diff(&backward).unwrap() <= 1e-5);
        assert!(forward.data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn block_with_all_weights_zero_is_identity() {
    let shape = SwmShape { t: 4, c: 8, h: 8, w: 8 };
    let mut f = fixture(shape, 2, SwmVariant::Spatiotemporal, 3);
    for e in f.store.weight_ids() {
        let z = Tensor::zeros(f.store.get(e).shape());
        *f.store.get_mut(e) = z;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = input(&mut rng, 4, 2, shape);
    for train in [false, true] {
        let mut s = Session::new(&f.store, train);
        let xv = s.tape.constant(x.clone());
        let y = f.block.forward(&mut s, xv, "block").unwrap();
        assert_eq!(s.tape.value(y), &x);
    }
}

#[test]
fn block_preserves_shape_and_binarity_of_probes() {
    let shape = SwmShape { t: 4, c: 16, h: 8, w: 8 };
    let f = fixture(shape, 4, SwmVariant::Spatiotemporal, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = input(&mut rng, 4, 2, shape);
    let mut s = Session::new(&f.store, true);
    s.record_spikes();
    let xv = s.tape.constant(x.clone());
    let y = f.block.forward(&mut s, xv, "block").unwrap();
    assert_eq!(s.tape.shape(y), x.shape());
    let sites = f.block.sites("block");
    assert_eq!(s.probes().len(), sites.len());
    for (probe, site) in s.probes().iter().zip(&sites) {
        assert_eq!(probe.name, site.probe);
        assert!(s.tape.data(probe.spikes).iter().all(|&v| v == 0.0 || v == 1.0), "{}", probe.name);
    }
}

/// Scalar readout of the block as a function of `w1`, in the form the
/// gradient checker expects.
fn block_readout<'a>(f: &'a Fixture, x: &Tensor, weights: &Tensor) -> impl Fn(&mut Tape, Var) -> Result<Var> + 'a {
    let x = x.clone();
    let weights = weights.clone();
    move |tape: &mut Tape, w1: Var| {
        let mut s = Session::with_tape(&f.store, true, std::mem::take(tape));
        s.bind(f.block.swm.w1, w1)?;
        let xv = s.tape.constant(x.clone());
        let y = f.block.forward(&mut s, xv, "block")?;
        let wv = s.tape.constant(weights.clone());
        let p = s.tape.mul(y, wv)?;
        let r = s.tape.sum_all(p)?;
        *tape = s.into_tape();
        Ok(r)
    }
}

#[test]
fn block_gradient_wrt_global_weights_matches_finite_differences() {
    let shape = SwmShape { t: 4, c: 4, h: 8, w: 8 };
    let f = fixture(shape, 2, SwmVariant::Spatiotemporal, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let w1_shape = f.store.get(f.block.swm.w1).shape().to_vec();
    let mut worst = 0.0f64;
    let mut accepted = 0;
    let mut drawn = 0;
    while accepted < 20 {
        drawn += 1;
        assert!(drawn < 500, "too few well-conditioned points");
        let x = input(&mut rng, 4, 2, shape);
        let weights = random(&mut rng, x.shape(), 0.5, 1.5);
        let point = random(&mut rng, &w1_shape, 0.25, 0.75);
        let report = check_gradients(block_readout(&f, &x, &weights), &point, 1.0 / 16.0).unwrap();
        if report.numeric.iter().any(|&n| n.abs() < 0.05) {
            continue;
        }
        accepted += 1;
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn spatial_equivariance_holds_for_any_seed(seed in any::<u64>()) {
        let shape = SwmShape { t: 4, c: 4, h: 4, w: 4 };
        let f = fixture(shape, 4, SwmVariant::Spatial, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        let x = input(&mut rng, 4, 1, shape);
        let forward = run_swm(&f, &x);
        let backward = reverse_time(&run_swm(&f, &reverse_time(&x)));
        prop_assert!(forward.max_abs_diff(&backward).unwrap() <= 1e-5);
    }
}
