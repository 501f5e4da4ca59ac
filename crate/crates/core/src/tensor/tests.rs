use super::*;

fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn new_rejects_wrong_element_count() {
    assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::<f32>::new(&[0, 3], vec![]).is_err());
}

#[test]
fn conv3d_of_zeros_is_zero() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 3, 4, 4]));
    let w = tape.constant(Tensor::from_fn(&[3, 2, 3, 3, 3], |i| i as f32 * 0.1 - 2.0));
    let y = tape.conv3d(x, w, None, ConvGeometry::new([1; 3], [1; 3])).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv3d_unit_kernel_is_identity() {
    let mut tape = Tape::<f32>::new();
    let input = Tensor::from_fn(&[1, 1, 2, 3, 3], |i| i as f32);
    let x = tape.constant(input.clone());
    let w = tape.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
    let y = tape.conv3d(x, w, None, ConvGeometry::default()).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn conv3d_full_cube_sums_everything() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3, 3], |i| i as f32));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3, 3]));
    let y = tape.conv3d(x, w, None, ConvGeometry::default()).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1, 1]);
    assert_eq!(tape.value(y).data()[0], 351.0);
}

#[test]
fn conv3d_reports_bad_groups_and_channels() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 1, 2, 2]));
    let w = tape.constant(Tensor::zeros(&[4, 1, 1, 1, 1]));
    let err = tape.conv3d(x, w, None, ConvGeometry::default().with_groups(2)).unwrap_err();
    assert!(matches!(err, Error::Divisibility { .. }), "{err}");

    let w = tape.constant(Tensor::zeros(&[4, 2, 1, 1, 1]));
    let err = tape.conv3d(x, w, None, ConvGeometry::default()).unwrap_err();
    assert!(err.to_string().contains("input-channel"), "{err}");

    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 1, 1]));
    let err = tape.conv3d(x, w, None, ConvGeometry::default()).unwrap_err();
    assert!(err.to_string().contains("depth"), "{err}");
}

#[test]
fn conv3d_output_extent_formula() {
    let geom = ConvGeometry::new([1, 2, 2], [0, 3, 3]);
    assert_eq!(conv::output_shape(&[2, 1, 9, 64, 64], &[8, 1, 1, 7, 7], &geom).unwrap(), vec![2, 8, 9, 32, 32]);
}

#[test]
fn pool_identity_window() {
    let mut tape = Tape::<f32>::new();
    let input = Tensor::from_fn(&[1, 2, 2, 2, 2], |i| (i as f32).sin());
    let x = tape.constant(input.clone());
    let y = tape.pool3d(x, PoolGeometry::new(PoolMode::Max, [1; 3], [1; 3])).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn max_pool_picks_largest() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[1, 1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.pool3d(x, PoolGeometry::new(PoolMode::Max, [1, 2, 2], [1, 2, 2])).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);
}

#[test]
fn max_pool_ties_route_gradient_to_first() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(t(&[1, 1, 1, 2, 2], &[5.0, 5.0, 5.0, 5.0]), true);
    let y = tape.pool3d(x, PoolGeometry::new(PoolMode::Max, [1, 2, 2], [1, 2, 2])).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn pool_window_too_large() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 1, 2, 2]));
    let err = tape.pool3d(x, PoolGeometry::new(PoolMode::Avg, [2, 2, 2], [1; 3])).unwrap_err();
    assert!(matches!(err, Error::WindowTooLarge { .. }));
}

#[test]
fn padded_max_pool_keeps_spatial_alignment() {
    let geom = PoolGeometry::new(PoolMode::Max, [1, 3, 3], [1, 2, 2]).with_pad([0, 1, 1]);
    assert_eq!(geom.output_shape(&[1, 4, 9, 32, 32]).unwrap(), vec![1, 4, 9, 16, 16]);
}

#[test]
fn group_norm_constant_input_is_zero() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1, 4, 2, 2], 3.5));
    let g = tape.constant(Tensor::ones(&[4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.group_norm(x, g, b, 2).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn group_norm_zero_gamma_yields_beta() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn(&[2, 4, 3], |i| i as f32 * 0.37 - 1.0));
    let g = tape.constant(Tensor::zeros(&[4]));
    let b = tape.constant(Tensor::full(&[4], 5.0));
    let y = tape.group_norm(x, g, b, 2).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
}

#[test]
fn group_norm_requires_divisible_channels() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 6, 2]));
    let g = tape.constant(Tensor::ones(&[6]));
    let b = tape.constant(Tensor::zeros(&[6]));
    assert!(matches!(tape.group_norm(x, g, b, 4), Err(Error::Divisibility { .. })));
}

#[test]
fn elementwise_definitions() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[2], &[-1.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
    let z = tape.constant(Tensor::zeros(&[2]));
    let a = tape.add(x, z).unwrap();
    assert_eq!(tape.value(a), tape.value(x));
    let zero = tape.constant(Tensor::zeros(&[1]));
    let s = tape.sigmoid(zero);
    assert_eq!(tape.value(s).data(), &[0.5]);
    let m = tape.mul_scalar(x, -2.0);
    assert_eq!(tape.value(m).data(), &[2.0, -4.0]);
    let bad = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.add(x, bad).is_err());
}

#[test]
fn upsample_replicates_blocks() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.upsample2x_nearest(x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[1.0; 4]);
}

#[test]
fn upsample_then_avg_pool_is_identity() {
    let mut tape = Tape::<f32>::new();
    let input = Tensor::from_fn(&[1, 2, 1, 3, 4], |i| i as f32 * 0.5);
    let x = tape.constant(input.clone());
    let up = tape.upsample2x_nearest(x).unwrap();
    let down = tape.pool3d(up, PoolGeometry::new(PoolMode::Avg, [1, 2, 2], [1, 2, 2])).unwrap();
    assert_eq!(tape.value(down), &input);
}

#[test]
fn upsample_gradient_is_four() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64), true);
    let y = tape.upsample2x_nearest(x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 4.0));
}

#[test]
fn loss_closed_forms() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::zeros(&[1]));
    let l = tape.bce_with_logits(p, &Tensor::full(&[1], 0.5), &Tensor::ones(&[1])).unwrap();
    assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

    let target = Tensor::from_fn(&[3], |i| i as f64);
    let same = tape.constant(target.clone());
    let l = tape.smooth_l1(same, &target, 1.0, &Tensor::ones(&[3])).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);

    let off = tape.constant(Tensor::full(&[3], 2.0));
    let l = tape.smooth_l1(off, &Tensor::zeros(&[3]), 1.0, &Tensor::ones(&[3])).unwrap();
    assert_eq!(tape.value(l).data()[0], 1.5);

    let l = tape.smooth_l1(off, &Tensor::zeros(&[3]), 1.0, &Tensor::zeros(&[3])).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);
    assert!(tape.bce_with_logits(off, &Tensor::zeros(&[2]), &Tensor::ones(&[2])).is_err());
    assert!(tape.bce_with_logits(off, &Tensor::zeros(&[3]), &Tensor::full(&[3], -1.0)).is_err());
}

#[test]
fn backward_linear_and_quadratic() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

    let mut tape = Tape::<f64>::new();
    let xv = Tensor::from_fn(&[4], |i| i as f64 * 0.5 - 1.0);
    let x = tape.leaf(xv.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &xv.map(|v| 2.0 * v));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn unreachable_leaf_gets_zero_grad() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::ones(&[2]), true);
    let unused = tape.leaf(Tensor::ones(&[3]), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(unused).unwrap(), &Tensor::zeros(&[3]));
}

#[test]
fn shape_ops_round_trip() {
    let mut tape = Tape::<f32>::new();
    let input = Tensor::from_fn(&[2, 3, 4], |i| i as f32);
    let x = tape.constant(input.clone());
    let p = tape.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(tape.shape(p), &[4, 2, 3]);
    assert_eq!(tape.value(p).at(&[3, 1, 2]), input.at(&[1, 2, 3]));
    let back = tape.permute(p, &[1, 2, 0]).unwrap();
    assert_eq!(tape.value(back), &input);

    let a = tape.narrow(x, 1, 0, 1).unwrap();
    let b = tape.narrow(x, 1, 1, 2).unwrap();
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c), &input);
    assert!(tape.narrow(x, 1, 2, 2).is_err());
    assert!(tape.permute(x, &[0, 0, 1]).is_err());
}
