mod common;

use common::{grad_check, naive_conv, random_tensor};
use ddtb::tensor::{Tape, Tensor, Var};
use ddtb::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t4(shape: [usize; 4], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

#[test]
fn conv_identity_1x1() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for i in 0..3 {
        w.data_mut()[i * 3 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.conv2d(xv, wv, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_dot_product_example() {
    let mut tape = Tape::new();
    let x = tape.constant(t4([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(t4([1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).item(), 5.0);
}

#[test]
fn conv_output_shape() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
    let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4, 8, 8]);
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4, 4, 4]);
}

#[test]
fn conv_shape_errors_name_axes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
    let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(matches!(&err, Error::Dimension { .. }));
    assert!(err.to_string().contains("axis 1"), "{err}");
    let small = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(tape.conv2d(small, w, None, 1, 0).is_err());
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(c, o, k, stride, pad, h, w) in &[(3, 4, 3, 1, 1, 7, 9), (2, 5, 1, 1, 0, 4, 4), (4, 3, 3, 2, 1, 9, 8), (1, 2, 5, 1, 2, 6, 6)] {
        let x = random_tensor(&mut rng, &[2, c, h, w], -1.0, 1.0);
        let wt = random_tensor(&mut rng, &[o, c, k, k], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[o], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = naive_conv(&x, &wt, Some(&b), stride, pad);
        assert_eq!(tape.value(y).shape(), want.shape());
        for (a, e) in tape.value(y).data().iter().zip(want.data()) {
            assert!((a - e).abs() <= 1e-12 * (1.0 + e.abs()));
        }
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let x = random_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[3, 2, k, k], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[3], -1.0, 1.0);
        let r = grad_check(&[x, w, b], &[0, 1, 2], 1e-5, &|t: &mut Tape, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            let y = t.square(y);
            Ok(t.mean(y))
        });
        assert!(!r.crossed_kink);
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }
}

#[test]
fn backward_linear_and_accumulation() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
    let y = tape.mul_scalar(x, 3.0);
    let root = tape.sum(y);
    let g = tape.backward(root).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0; 3]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
    let a = tape.sum(x);
    let b = tape.sum(x);
    let root = tape.add(a, b).unwrap();
    let g = tape.backward(root).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0; 3]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn broadcasting_is_limited() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::zeros(&[2, 3]));
    let b = tape.param(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
    let s = tape.param(Tensor::scalar(2.0));
    assert!(tape.mul(a, s).is_ok());
}

#[test]
fn elementwise_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![-2.0, 3.0, 0.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 3.0, 0.0]);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s).data()[2], 0.5);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![0.0, 1.0]));
    let r = tape.relu(x);
    let root = tape.sum(r);
    assert_eq!(tape.backward(root).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn mean_gradient_is_one_over_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[7], -1.0, 1.0);
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let m = tape.mean(v);
    let g = tape.backward(m).unwrap();
    assert!(g.get(v).unwrap().data().iter().all(|&d| (d - 1.0 / 7.0).abs() < 1e-15));
    let r = grad_check(&[x], &[0], 1e-5, &|t: &mut Tape, v: &[Var]| Ok(t.mean(v[0])));
    assert!(r.max_rel_err <= 1e-4);
}

#[test]
fn ste_round_forward_and_backward() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![0.5, -0.5, 1.4, 3.0, -2.5]));
    let y = tape.ste_round(x);
    assert_eq!(tape.value(y).data(), &[1.0, -1.0, 1.0, 3.0, -3.0]);
    let root = tape.sum(y);
    assert_eq!(tape.backward(root).unwrap().get(x).unwrap().data(), &[1.0; 5]);
}

#[test]
fn pixel_shuffle_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t4([1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.pixel_shuffle(x, 2).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let z = tape.constant(Tensor::zeros(&[2, 64, 5, 5]));
    let y = tape.pixel_shuffle(z, 4).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4, 20, 20]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let av = tape.constant(a.clone());
    let y = tape.pixel_shuffle(av, 1).unwrap();
    assert_eq!(tape.value(y), &a);

    let bad = tape.constant(Tensor::zeros(&[1, 6, 2, 2]));
    assert!(matches!(tape.pixel_shuffle(bad, 2), Err(Error::Dimension { .. })));
}

#[test]
fn pixel_shuffle_index_mapping() {
    let (n, c, h, w, r) = (2, 2, 3, 2, 3);
    let x = Tensor::new(vec![n, c * r * r, h, w], (0..n * c * r * r * h * w).map(|i| i as f64).collect()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.pixel_shuffle(xv, r).unwrap();
    let out = tape.value(y);
    for b in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    for i in 0..r {
                        for j in 0..r {
                            let o = out.data()[((b * c + ch) * h * r + yy * r + i) * w * r + xx * r + j];
                            let src = x.data()[((b * c * r * r + ch * r * r + i * r + j) * h + yy) * w + xx];
                            assert_eq!(o, src);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn smooth_composites_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor(&mut rng, &[2, 4, 4, 4], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[4, 4, 3, 3], -0.5, 0.5);
    let gamma = random_tensor(&mut rng, &[4], 0.5, 1.5);
    let beta = random_tensor(&mut rng, &[4], -0.5, 0.5);
    let slope = Tensor::scalar(0.25);
    let r = grad_check(&[x, w, gamma, beta, slope], &[0, 1, 2, 3, 4], 1e-5, &|t: &mut Tape, v: &[Var]| {
        let y = t.conv2d(v[0], v[1], None, 1, 1)?;
        let y = t.batch_norm(y, v[2], v[3], &[], &[], 1e-5, true)?;
        let y = t.prelu(y, v[4])?;
        let cat = t.concat(&[y, v[0]])?;
        let y = t.pixel_shuffle(cat, 2)?;
        let y = t.sigmoid(y);
        let e = t.channel_energy(y)?;
        let n = t.sample_l2_norm(e);
        let n = t.add_scalar(n, 1e-12);
        let e = t.sample_div(e, n)?;
        let p = t.spatial_mean(y)?;
        let s = t.select_channel(p, 0)?;
        let a = t.sum(e);
        let b = t.sum(s);
        let b = t.mul_scalar(b, 2.0);
        Ok(t.add(a, b)?)
    });
    assert!(!r.crossed_kink);
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn batch_norm_eval_mode_and_abs_sub() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = random_tensor(&mut rng, &[2, 3, 3, 3], 0.1, 1.0);
    let gamma = random_tensor(&mut rng, &[3], 0.5, 1.5);
    let beta = random_tensor(&mut rng, &[3], -0.5, 0.5);
    let other = random_tensor(&mut rng, &[2, 3, 3, 3], -3.0, -2.0);
    let r = grad_check(&[x, gamma, beta, other], &[0, 1, 2, 3], 1e-5, &|t: &mut Tape, v: &[Var]| {
        let y = t.batch_norm(v[0], v[1], v[2], &[0.3, 0.5, 0.1], &[1.5, 0.7, 2.0], 1e-5, false)?;
        let d = t.sub(y, v[3])?;
        let d = t.abs(d);
        let m = t.mul(d, v[0])?;
        Ok(t.mean(m))
    });
    assert!(!r.crossed_kink);
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3, 3, 3, 3], -1.0, 1.0);
    let run = || {
        let mut tape = Tape::new();
        let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = tape.relu(y);
        let y = tape.square(y);
        let root = tape.mean(y);
        let g = tape.backward(root).unwrap();
        (g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert!(a.0.data().iter().zip(b.0.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.1.data().iter().zip(b.1.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let d = tape.detach(x);
    let y = tape.mul(x, d).unwrap();
    let root = tape.sum(y);
    assert_eq!(tape.backward(root).unwrap().get(x).unwrap().data(), &[1.0, 2.0]);
}

proptest! {
    #[test]
    fn shuffle_then_unshuffle_is_identity(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, r in 1usize..4) {
        let len = n * c * r * r * h * w;
        let data: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let y = ddtb::tensor::pixel_shuffle_values(&data, n, c * r * r, h, w, r);
        let back = ddtb::tensor::pixel_unshuffle_values(&y, n, c, h, w, r);
        prop_assert_eq!(back, data);
    }
}
