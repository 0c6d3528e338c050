use cvs_core::tensor::{Tape, Tensor};
use cvs_core::Error;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn identity_kernel_conv() {
    let mut tape = Tape::<f64>::new();
    let x = Tensor::from_fn([1, 4, 5], |i| i as f64 * 0.3 - 2.0);
    let xv = tape.constant(x.clone());
    let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(xv, k, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn all_ones_conv_gives_nine() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([1, 5, 5], 1.0));
    let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &Tensor::full([1, 3, 3], 9.0));
}

#[test]
fn conv_rejects_oversized_kernel() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([1, 2, 2], 1.0));
    let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
    assert!(matches!(tape.conv2d(x, k, None, 1, 0), Err(Error::Shape { .. })));
}

#[test]
fn relu_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn upsample_repeats_blocks() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.upsample2x(x).unwrap();
    assert_eq!(
        tape.value(y).data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
}

#[test]
fn maxpool_gradient_routes_to_argmax() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]), true);
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 9.0]);
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn normalize_constant_channel_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([2, 3, 3], 4.2));
    let y = tape.channel_normalize(x, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn normalize_two_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 2], &[-1.0, 1.0]));
    let y = tape.channel_normalize(x, 1e-5).unwrap();
    let want = 1.0 / (1.0 + 1e-5f64).sqrt();
    let d = tape.value(y).data();
    assert!((d[0] + want).abs() < 1e-15 && (d[1] - want).abs() < 1e-15);
    assert_eq!(d[0] + d[1], 0.0);
}

#[test]
fn normalize_needs_two_positions() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 1], &[3.0]));
    assert!(tape.channel_normalize(x, 1e-5).is_err());
}

#[test]
fn affine_zero_gamma_gives_shift() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn([2, 2, 3], |i| i as f64));
    let g = tape.constant(Tensor::zeros([2]));
    let b = tape.constant(t(&[2], &[0.5, -3.0]));
    let y = tape.channel_affine(x, g, b).unwrap();
    let d = tape.value(y).data();
    assert!(d[..6].iter().all(|&v| v == 0.5) && d[6..].iter().all(|&v| v == -3.0));
}

#[test]
fn affine_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([2, 2, 2]));
    let g = tape.constant(Tensor::zeros([3]));
    let b = tape.constant(Tensor::zeros([3]));
    assert!(tape.channel_affine(x, g, b).is_err());
}

#[test]
fn mse_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::full([2, 3, 4], 1.0));
    let b = tape.constant(Tensor::zeros([2, 3, 4]));
    let l = tape.mse(a, b).unwrap();
    assert_eq!(tape.value(l).item(), 1.0);
    let l = tape.mse(a, a).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let c = tape.constant(Tensor::zeros([4, 3, 2]));
    assert!(tape.mse(a, c).is_err());
}

#[test]
fn mse_gradient_formula() {
    let mut tape = Tape::<f64>::new();
    let av = Tensor::from_fn([2, 3, 4], |i| (i as f64).sin());
    let bv = Tensor::from_fn([2, 3, 4], |i| (i as f64).cos());
    let a = tape.leaf(av.clone(), true);
    let b = tape.constant(bv.clone());
    let l = tape.mse(a, b).unwrap();
    tape.backward(l).unwrap();
    for (i, g) in tape.grad(a).unwrap().iter().enumerate() {
        assert!((g - 2.0 * (av.data()[i] - bv.data()[i]) / 24.0).abs() < 1e-15);
    }
}

#[test]
fn focal_reduces_to_cross_entropy() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let l = tape.focal_loss(z, &[1], &[1.0, 1.0], 0.0).unwrap();
    assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn focal_confident_correct_is_near_zero() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(t(&[1, 4], &[40.0, 0.0, 0.0, 0.0]));
    let l = tape.focal_loss(z, &[0], &[0.25; 4], 2.0).unwrap();
    assert!(tape.value(l).item() < 1e-30);
}

#[test]
fn focal_invalid_class() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros([2, 4]));
    assert!(matches!(
        tape.focal_loss(z, &[0, 4], &[0.25; 4], 2.0),
        Err(Error::InvalidClass { index: 4, classes: 4 })
    ));
}

#[test]
fn l1_line_direction_invariant() {
    let gt = t(&[4, 2], &[0.0, 0.0, 1.0, 0.5, 2.0, 0.0, 3.0, -1.0]);
    let rev = t(&[4, 2], &[3.0, -1.0, 2.0, 0.0, 1.0, 0.5, 0.0, 0.0]);
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(gt.clone());
    let l = tape.l1_line_loss(p, &gt).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let p = tape.constant(rev);
    let l = tape.l1_line_loss(p, &gt).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn l1_line_two_ordering_oracle() {
    let pred: [f64; 10] = [0.3, -1.2, 2.0, 0.7, -0.4, 1.1, 0.9, 0.0, 2.5, -0.6];
    let gt: [f64; 10] = [1.0, 0.2, -0.5, 0.9, 0.1, 1.4, 2.2, -0.3, 0.6, 0.8];
    let fwd: f64 = pred.iter().zip(&gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / 10.0;
    let mut rev_gt = Vec::new();
    for k in (0..5).rev() {
        rev_gt.extend_from_slice(&gt[2 * k..2 * k + 2]);
    }
    let rev: f64 = pred.iter().zip(&rev_gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / 10.0;
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(t(&[5, 2], &pred));
    let l = tape.l1_line_loss(p, &t(&[5, 2], &gt)).unwrap();
    assert!((tape.value(l).item() - fwd.min(rev)).abs() < 1e-15);
}

#[test]
fn l1_line_shape_mismatch() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::zeros([4, 2]));
    assert!(tape.l1_line_loss(p, &Tensor::zeros([5, 2])).is_err());
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn([3, 2, 2], |i| i as f64), true);
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
}

#[test]
fn fan_out_gradients_accumulate() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, -2.0]), true);
    let y = tape.add(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let s = tape.sum(z).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros([2]), true);
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[f64::MAX, 1.0]));
    assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
}

proptest! {
    #[test]
    fn mse_symmetric_bitwise(a in prop::collection::vec(-1e3f64..1e3, 12), b in prop::collection::vec(-1e3f64..1e3, 12)) {
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(t(&[3, 2, 2], &a));
        let bv = tape.constant(t(&[3, 2, 2], &b));
        let ab = tape.mse(av, bv).unwrap();
        let ba = tape.mse(bv, av).unwrap();
        prop_assert_eq!(tape.value(ab).item().to_bits(), tape.value(ba).item().to_bits());
    }

    #[test]
    fn affine_identity_bitwise(x in prop::collection::vec(prop_oneof![-1e6f64..1e6, Just(-0.0), Just(0.0)], 18)) {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(t(&[2, 3, 3], &x));
        let g = tape.constant(Tensor::full([2], 1.0));
        let b = tape.constant(Tensor::zeros([2]));
        let y = tape.channel_affine(xv, g, b).unwrap();
        let got: Vec<u64> = tape.value(y).data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn normalized_mean_is_zero(x in prop::collection::vec(-1e4f64..1e4, 2..40)) {
        let n = x.len();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(t(&[1, 1, n], &x));
        let y = tape.channel_normalize(xv, 1e-5).unwrap();
        let m = tape.value(y).data().iter().sum::<f64>() / n as f64;
        prop_assert!(m.abs() < 1e-10, "{}", m);
    }
}
