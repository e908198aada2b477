use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random multiples of 1/8 in [-2, 2]: exactly representable, so affine and
/// quadratic programs evaluate without rounding.
/// Entries with magnitude in [0.5, 1.5] and random sign, keeping every
/// gradient coordinate of the test programs away from zero.
fn signed_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f32 = rng.gen_range(0.5..1.5);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

fn dyadic_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-16i32..=16) as f32 / 8.0)
}

#[test]
fn hadamard_with_binary_mask() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[3], &[1.0, 0.0, 1.0]));
    let b = tape.constant(t(&[3], &[0.5, 0.7, -0.2]));
    let y = tape.mul(a, b).unwrap();
    assert_eq!(tape.data(y), &[0.5, 0.0, -0.2]);
}

#[test]
fn matmul_of_ones() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::ones(&[2, 3]));
    let b = tape.constant(Tensor::ones(&[3, 2]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(y), &[2, 2]);
    assert!(tape.data(y).iter().all(|&v| v == 3.0));
}

/// Direct sliding-window evaluation of a same-padded 2D convolution on a
/// single-channel image.
fn naive_conv(img: &[f32], h: usize, w: usize, kernel: &[f32], k: usize, pad: usize) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..k {
                for kx in 0..k {
                    let iy = y as isize + ky as isize - pad as isize;
                    let ix = x as isize + kx as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        acc += img[iy as usize * w + ix as usize] * kernel[ky * k + kx];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

#[test]
fn conv2d_constant_image() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 4, 4, 1]));
    let k = tape.constant(Tensor::ones(&[3, 3, 1, 1]));
    let y = tape.conv2d(x, k, None, 1).unwrap();
    let out = tape.data(y).to_vec();
    let oracle = naive_conv(&[1.0; 16], 4, 4, &[1.0; 9], 3, 1);
    assert_eq!(out, oracle);
    assert_eq!(out[0], 4.0);
    assert_eq!(out[3], 4.0);
    assert_eq!(out[12], 4.0);
    assert_eq!(out[15], 4.0);
    assert_eq!(out[5], 9.0);
    assert_eq!(out[10], 9.0);
}

#[test]
fn conv2d_matches_sliding_window_on_random_multichannel() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, h, w, ci, co) = (2, 5, 6, 3, 4);
    let x = rand_tensor(&mut rng, &[n, h, w, ci], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 3, ci, co], -1.0, 1.0);
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let y = tape.conv2d(xv, kv, None, 1).unwrap();
    for b in 0..n {
        for o in 0..co {
            let mut expect = vec![0.0; h * w];
            for c in 0..ci {
                let img: Vec<f32> = (0..h * w).map(|p| x.data()[(b * h * w + p) * ci + c]).collect();
                let ker: Vec<f32> = (0..9).map(|tap| k.data()[(tap * ci + c) * co + o]).collect();
                for (e, v) in expect.iter_mut().zip(naive_conv(&img, h, w, &ker, 3, 1)) {
                    *e += v;
                }
            }
            for p in 0..h * w {
                let got = tape.data(y)[(b * h * w + p) * co + o];
                assert!((got - expect[p]).abs() < 1e-5, "{got} vs {}", expect[p]);
            }
        }
    }
}

#[test]
fn maxpool_halves_and_routes_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_fn(&[1, 4, 4, 1], |i| i as f32));
    let y = tape.maxpool2d(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2, 1]);
    assert_eq!(tape.data(y), &[5.0, 7.0, 13.0, 15.0]);
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    assert_eq!(g.iter().sum::<f32>(), 4.0);
    assert_eq!(g[5], 1.0);
    assert_eq!(g[15], 1.0);
}

#[test]
fn backward_of_square() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum_all(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 6.0]);
}

#[test]
fn backward_of_sigmoid_at_zero() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1], &[0.0]));
    let y = tape.sigmoid(x).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.25]);
}

#[test]
fn matmul_gradient_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a0 = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b0 = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let mut tape = Tape::new();
    let a = tape.param(a0.clone());
    let b = tape.constant(b0.clone());
    let y = tape.matmul(a, b).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(a).unwrap().to_vec();
    // Finite-difference oracle, eps = 1e-3.
    let f = |a: &Tensor| -> f64 {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    acc += a.at(&[i, k]) as f64 * b0.at(&[k, j]) as f64;
                }
            }
        }
        acc
    };
    for idx in 0..12 {
        let mut p = a0.clone();
        let mut m = a0.clone();
        p.data_mut()[idx] += 1e-3;
        m.data_mut()[idx] -= 1e-3;
        let fd = (f(&p) - f(&m)) / (p.data()[idx] as f64 - m.data()[idx] as f64);
        assert!((g[idx] as f64 - fd).abs() < 1e-4, "{} vs {fd}", g[idx]);
        // ones · Bᵀ: every row of the gradient is the row sums of B.
        let k = idx % 4;
        let row_sum: f32 = b0.data()[k * 2] + b0.data()[k * 2 + 1];
        assert!((g[idx] - row_sum).abs() < 1e-6);
    }
}

#[test]
fn fan_out_accumulates_exactly() {
    let x0 = t(&[3], &[0.3, -1.2, 2.0]);
    let grad_of = |which: u8| {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let f = tape.tanh(x).unwrap();
        let g = tape.exp(x).unwrap();
        let root = match which {
            0 => tape.sum_all(f).unwrap(),
            1 => tape.sum_all(g).unwrap(),
            _ => {
                let s = tape.add(f, g).unwrap();
                tape.sum_all(s).unwrap()
            }
        };
        tape.backward(root).unwrap();
        tape.grad(x).unwrap().to_vec()
    };
    let (gf, gg, both) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..3 {
        assert_eq!(both[i], gf[i] + gg[i]);
    }
}

#[test]
fn broadcast_add_reduces_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2, 3]));
    let b = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.add(x, b).unwrap();
    assert_eq!(tape.data(y), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn errors_name_the_primitive() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::ones(&[2, 3]));
    let b = tape.constant(Tensor::ones(&[2, 2]));
    match tape.matmul(a, b) {
        Err(Error::Shape { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(tape.add(a, b), Err(Error::Shape { op: "add", .. })));
    assert!(matches!(
        tape.apply_named("softmax", &[a], &Attrs::default()),
        Err(Error::UnknownOp(name)) if name == "softmax"
    ));
    let neg = tape.constant(t(&[2], &[1.0, -1.0]));
    assert!(matches!(tape.log(neg), Err(Error::Domain { op: "log", .. })));
}

#[test]
fn catalog_names_round_trip() {
    let attrs = Attrs {
        factor: Some(2.0),
        shape: Some(vec![1]),
        perm: Some(vec![0]),
        axis: Some(0),
        axes: Some(vec![0]),
        start: Some(0),
        end: Some(1),
        ..Attrs::default()
    };
    for name in Primitive::CATALOG {
        let op = Primitive::from_name(name, &attrs).unwrap();
        assert_eq!(op.name(), name);
    }
}

#[test]
fn backward_rejects_bad_roots() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones(&[3]));
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Backward(_))));
    let c = tape.constant(Tensor::ones(&[1]));
    let d = tape.exp(c).unwrap();
    assert!(matches!(tape.backward(d), Err(Error::Backward(_))));
}

#[test]
fn permute_and_reshape_round_trip_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let x0 = rand_tensor(&mut rng, &[2, 3, 4, 5], -3.0, 3.0);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let p = tape.permute(x, &[3, 1, 0, 2]).unwrap();
        let back = tape.permute(p, &[2, 1, 3, 0]).unwrap();
        assert_eq!(tape.value(back).data(), x0.data());
        let r = tape.reshape(x, &[6, 20]).unwrap();
        let r2 = tape.reshape(r, &[2, 3, 4, 5]).unwrap();
        assert_eq!(tape.value(r2), &x0);
    }
}

#[test]
fn batchnorm_eval_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 3;
    let gamma = rand_tensor(&mut rng, &[c], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[c], -0.5, 0.5);
    let rm = rand_tensor(&mut rng, &[c], -0.5, 0.5);
    let rv = rand_tensor(&mut rng, &[c], 0.5, 2.0);
    let bn = |x: &Tensor| {
        let mut tape = Tape::new();
        let vs: Vec<Var> = [x, &gamma, &beta, &rm, &rv].iter().map(|t| tape.constant((*t).clone())).collect();
        let y = tape.batchnorm(vs[0], vs[1], vs[2], vs[3], vs[4], false, 1e-5).unwrap();
        tape.value(y).clone()
    };
    for _ in 0..10 {
        let x1 = rand_tensor(&mut rng, &[4, c], -2.0, 2.0);
        let x2 = rand_tensor(&mut rng, &[4, c], -2.0, 2.0);
        let lam: f32 = rng.gen_range(-1.0..2.0);
        let mix = Tensor::from_fn(&[4, c], |i| lam * x1.data()[i] + (1.0 - lam) * x2.data()[i]);
        let (y1, y2, ym) = (bn(&x1), bn(&x2), bn(&mix));
        for i in 0..4 * c {
            let expect = lam * y1.data()[i] + (1.0 - lam) * y2.data()[i];
            assert!((ym.data()[i] - expect).abs() < 1e-4);
        }
    }
}

#[test]
fn batchnorm_train_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&mut rng, &[64, 2], -3.0, 5.0));
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let rm = tape.constant(Tensor::zeros(&[2]));
    let rv = tape.constant(Tensor::ones(&[2]));
    let y = tape.batchnorm(x, g, b, rm, rv, true, 1e-5).unwrap();
    let m = tape.mean(y, &[0], false).unwrap();
    assert!(tape.data(m).iter().all(|v| v.abs() < 1e-5));
    assert!(tape.norm_stats(y).is_some());
}

#[test]
fn heaviside_fires_at_threshold() {
    let mut tape = Tape::new();
    let h = tape.constant(t(&[3], &[0.999, 1.0, 1.5]));
    let s = tape.heaviside(h, 1.0, 2.0).unwrap();
    assert_eq!(tape.data(s), &[0.0, 1.0, 1.0]);
}

#[test]
fn quadratic_form_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = dyadic_tensor(&mut rng, &[4, 4]);
    let x = dyadic_tensor(&mut rng, &[4, 1]);
    // eps = 2⁻¹⁰ ≈ 1e-3 keeps the perturbed points representable.
    let report = check_gradients(
        |tape, x| {
            let av = tape.constant(a.clone());
            let ax = tape.matmul(av, x)?;
            let q = tape.mul(x, ax)?;
            tape.sum_all(q)
        },
        &x,
        1.0 / 1024.0,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn linear_map_check_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let w = dyadic_tensor(&mut rng, &[5, 3]);
    let x = dyadic_tensor(&mut rng, &[2, 5]);
    let report = check_gradients(
        |tape, x| {
            let wv = tape.constant(w.clone());
            let y = tape.linear(x, wv, None)?;
            tape.sum_all(y)
        },
        &x,
        1.0 / 128.0,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn check_gradients_rejects_non_scalar_program() {
    let x = Tensor::ones(&[3]);
    let r = check_gradients(|tape, x| tape.exp(x), &x, 1e-3);
    assert!(matches!(r, Err(Error::Shape { .. })));
}

/// Weighted readout `Σ w ∘ y`. Programs with mixing structure use
/// positive weights (a fixed mixed-sign readout can cancel a gradient
/// coordinate at every point); elementwise ones use mixed signs, which keeps the
/// readout, and with it the f32 rounding of the result, small.
fn readout(tape: &mut Tape, y: Var, seed: u64, mixed_signs: bool) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = if mixed_signs {
        signed_tensor(&mut rng, &shape)
    } else {
        rand_tensor(&mut rng, &shape, 0.5, 1.5)
    };
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    tape.sum_all(p)
}

type Program = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// One smooth-primitive program per catalog entry (maxpool and the step
/// function are excluded), each with its finite-difference step and the shape
/// of its checked input. Programs of degree at most two in the input are
/// differenced exactly by any step, so they use a large one to stay clear of
/// f32 rounding.
pub(crate) fn smooth_primitive_programs(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f32, Vec<usize>, Program)> {
    let other = rand_tensor(rng, &[3, 4], 0.5, 1.5);
    let w_lin = rand_tensor(rng, &[4, 3], 0.5, 1.5);
    let b_lin = rand_tensor(rng, &[3], 0.5, 1.5);
    let k_conv = rand_tensor(rng, &[3, 3, 2, 2], 0.5, 1.5);
    let w_group = rand_tensor(rng, &[2, 2, 3], 0.5, 1.5);
    let gamma = rand_tensor(rng, &[2], 0.5, 1.5);
    let o1 = other.clone();
    let o2 = other.clone();
    let o3 = other.clone();
    let o4 = other.clone();
    vec![
        ("add", 0.25, vec![3, 4], Box::new(move |t, x| {
            let o = t.constant(o1.clone());
            let y = t.add(x, o)?;
            readout(t, y, 1, false)
        })),
        ("subtract", 0.25, vec![3, 4], Box::new(move |t, x| {
            let o = t.constant(o2.clone());
            let y = t.sub(o, x)?;
            readout(t, y, 2, false)
        })),
        ("hadamard_multiply", 0.25, vec![3, 4], Box::new(move |t, x| {
            let o = t.constant(o3.clone());
            let y = t.mul(x, o)?;
            let y = t.mul(y, x)?;
            readout(t, y, 3, false)
        })),
        ("scalar_scale", 0.25, vec![3, 4], Box::new(|t, x| {
            let y = t.scale(x, -1.75)?;
            readout(t, y, 4, false)
        })),
        ("matmul", 0.25, vec![4, 3], Box::new(move |t, x| {
            let o = t.constant(o4.clone());
            let y = t.matmul(o, x)?;
            readout(t, y, 5, false)
        })),
        ("linear", 0.25, vec![2, 4], Box::new(move |t, x| {
            let w = t.constant(w_lin.clone());
            let b = t.constant(b_lin.clone());
            let y = t.linear(x, w, Some(b))?;
            readout(t, y, 6, false)
        })),
        ("conv2d", 0.25, vec![1, 3, 3, 2], Box::new(move |t, x| {
            let k = t.constant(k_conv.clone());
            let y = t.conv2d(x, k, None, 1)?;
            readout(t, y, 7, false)
        })),
        ("batchnorm", 0.03125, vec![6, 2], Box::new(move |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(Tensor::zeros(&[2]));
            let rm = t.constant(Tensor::zeros(&[2]));
            let rv = t.constant(Tensor::ones(&[2]));
            let y = t.batchnorm(x, g, b, rm, rv, true, 1e-5)?;
            readout(t, y, 8, false)
        })),
        ("reshape", 0.25, vec![3, 4], Box::new(|t, x| {
            let y = t.reshape(x, &[2, 6])?;
            let y = t.mul(y, y)?;
            readout(t, y, 9, false)
        })),
        ("permute_axes", 0.25, vec![2, 3, 2], Box::new(|t, x| {
            let y = t.permute(x, &[2, 0, 1])?;
            let y = t.mul(y, y)?;
            readout(t, y, 10, false)
        })),
        ("concat", 0.25, vec![2, 3], Box::new(|t, x| {
            let sq = t.mul(x, x)?;
            let y = t.concat(&[x, sq, x], 1)?;
            readout(t, y, 11, false)
        })),
        ("slice", 0.25, vec![3, 4], Box::new(|t, x| {
            let y = t.slice(x, 1, 1, 3)?;
            let y = t.mul(y, y)?;
            readout(t, y, 12, false)
        })),
        ("sum", 0.25, vec![3, 4], Box::new(|t, x| {
            let sq = t.mul(x, x)?;
            let y = t.sum(sq, &[0], true)?;
            readout(t, y, 13, false)
        })),
        ("mean", 0.25, vec![3, 4], Box::new(|t, x| {
            let sq = t.mul(x, x)?;
            let y = t.mean(sq, &[1], false)?;
            readout(t, y, 14, false)
        })),
        ("sigmoid", 0.0625, vec![3, 4], Box::new(|t, x| {
            let y = t.sigmoid(x)?;
            readout(t, y, 15, true)
        })),
        ("tanh", 0.0625, vec![3, 4], Box::new(|t, x| {
            let y = t.tanh(x)?;
            readout(t, y, 16, true)
        })),
        ("log", 0.0625, vec![3, 4], Box::new(|t, x| {
            // shifted into the positive domain
            let sq = t.mul(x, x)?;
            let p = t.add_scalar(sq, 0.5)?;
            let y = t.log(p)?;
            readout(t, y, 17, true)
        })),
        ("exp", 0.0625, vec![3, 4], Box::new(|t, x| {
            let y = t.exp(x)?;
            readout(t, y, 18, true)
        })),
        ("grouped_contraction", 0.25, vec![3, 2, 2], Box::new(move |t, x| {
            let w = t.constant(w_group.clone());
            let y = t.grouped_contraction(x, w)?;
            readout(t, y, 19, false)
        })),
        ("heaviside_with_surrogate", 0.03125, vec![2, 3], Box::new(|t, x| {
            let y = t.heaviside(x, 0.25, 2.0)?;
            readout(t, y, 20, true)
        })),
    ]
}

/// Relative error is only meaningful where the true gradient is clearly
/// nonzero: f32 differencing noise is around 1e-6 absolute. Points with a
/// gradient coordinate below this magnitude are redrawn. Exact zeros (inputs
/// the program ignores) are kept.
const MIN_GRADIENT: f64 = 0.05;

#[test]
fn smooth_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let programs = smooth_primitive_programs(&mut rng);
    for (name, eps, shape, program) in &programs {
        let mut worst = 0.0f64;
        let mut accepted = 0;
        let mut drawn = 0;
        while accepted < 100 {
            drawn += 1;
            assert!(drawn < 10_000, "{name}: too few well-conditioned points");
            let point = signed_tensor(&mut rng, shape);
            let report = check_gradients(program, &point, *eps).unwrap();
            if report.numeric.iter().any(|&n| n != 0.0 && n.abs() < MIN_GRADIENT) {
                continue;
            }
            accepted += 1;
            worst = worst.max(report.max_rel_error);
        }
        // Batch statistics couple every coordinate, and the f32 rounding of
        // the readout caps what differencing can resolve for batchnorm.
        let tol = if *name == "batchnorm" { 1e-3 } else { 1e-4 };
        assert!(worst < tol, "{name}: worst relative error {worst}");
    }
}


#[test]
fn batchnorm_train_with_weighted_sum_readout() {
    let x = t(&[6, 2], &[0.9, -1.1, -0.7, 1.3, 1.4, 0.6, -1.2, -0.8, 0.5, 1.0, -0.6, -1.4]);
    let w = t(&[6, 2], &[1.2, -0.7, 0.6, 1.1, -1.3, 0.8, 0.9, -1.0, -0.5, 1.4, 1.0, 0.7]);
    let report = check_gradients(
        |tape, x| {
            let g = tape.constant(t(&[2], &[1.3, 0.8]));
            let b = tape.constant(t(&[2], &[0.1, -0.2]));
            let rm = tape.constant(Tensor::zeros(&[2]));
            let rv = tape.constant(Tensor::ones(&[2]));
            let y = tape.batchnorm(x, g, b, rm, rv, true, 1e-5)?;
            let wv = tape.constant(w.clone());
            let p = tape.mul(y, wv)?;
            tape.sum_all(p)
        },
        &x,
        0.03,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn small_vec(n: usize) -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::vec(-4.0f32..4.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fan_out_gradient_is_sum_of_branches(xs in small_vec(6)) {
            let x0 = Tensor::new(vec![2, 3], xs).unwrap();
            let run = |branches: &[u8]| {
                let mut tape = Tape::new();
                let x = tape.param(x0.clone());
                let mut outs = Vec::new();
                for &b in branches {
                    let y = match b {
                        0 => tape.sigmoid(x).unwrap(),
                        1 => tape.exp(x).unwrap(),
                        _ => tape.scale(x, 3.0).unwrap(),
                    };
                    outs.push(tape.sum_all(y).unwrap());
                }
                let mut root = outs[0];
                for &o in &outs[1..] {
                    root = tape.add(root, o).unwrap();
                }
                tape.backward(root).unwrap();
                tape.grad(x).unwrap().to_vec()
            };
            let (a, b, c) = (run(&[0]), run(&[1]), run(&[2]));
            let all = run(&[0, 1, 2]);
            for i in 0..6 {
                // The reverse sweep meets the branches last-recorded first.
                prop_assert_eq!(all[i], (c[i] + b[i]) + a[i]);
            }
        }

        #[test]
        fn permute_round_trip_is_bitwise(xs in small_vec(24), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
            let x0 = Tensor::new(vec![2, 3, 4], xs).unwrap();
            let mut inv = vec![0; 3];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let p = tape.permute(x, &perm).unwrap();
            let back = tape.permute(p, &inv).unwrap();
            prop_assert_eq!(tape.value(back), &x0);
        }

        #[test]
        fn outputs_stay_finite(xs in small_vec(12)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![3, 4], xs).unwrap());
            let outs = [
                tape.sigmoid(x).unwrap(),
                tape.tanh(x).unwrap(),
                tape.exp(x).unwrap(),
                tape.mean(x, &[0], false).unwrap(),
            ];
            for o in outs {
                prop_assert!(tape.value(o).is_finite());
            }
        }

        #[test]
        fn heaviside_is_binary(xs in small_vec(12), th in -1.0f32..1.0) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![12], xs.clone()).unwrap());
            let s = tape.heaviside(x, th, 2.0).unwrap();
            for (v, h) in tape.data(s).iter().zip(&xs) {
                prop_assert_eq!(*v, if *h >= th { 1.0 } else { 0.0 });
            }
        }
    }
}
