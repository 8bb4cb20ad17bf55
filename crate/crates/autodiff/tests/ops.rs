use road_autodiff::{AutodiffError, ConvSpec, Graph, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn tensor_rejects_mismatched_length() {
    assert!(matches!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]), Err(AutodiffError::Shape { .. })));
    assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
}

#[test]
fn conv_identity_kernel_scales() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
    let k = g.constant(t(&[1, 1, 1, 1], &[2.0]));
    let b = g.constant(t(&[1], &[0.0]));
    let y = g.conv2d(x, k, Some(b), ConvSpec::default()).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_row_difference_kernel() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 5], &[1., 2., 3., 4., 5.]));
    let k = g.constant(t(&[1, 1, 1, 3], &[1., 0., -1.]));
    let y = g.conv2d(x, k, None, ConvSpec::default()).unwrap();
    assert_eq!(g.value(y).data(), &[-2., -2., -2.]);
}

#[test]
fn conv_dilated_taps() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 5], &[1., 2., 3., 4., 5.]));
    let k = g.constant(t(&[1, 1, 1, 2], &[1., -1.]));
    let y = g.conv2d(x, k, None, ConvSpec { stride: 1, dilation: 2, padding: 0 }).unwrap();
    assert_eq!(g.value(y).data(), &[-2., -2., -2.]);
}

#[test]
fn conv_output_size_formula() {
    for (h, k, s, d, p) in [(64, 3, 2, 1, 1), (16, 3, 1, 2, 2), (7, 3, 2, 2, 0), (9, 1, 3, 1, 0)] {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, h, h + 1]));
        let ker = g.constant(Tensor::zeros(&[3, 2, k, k]));
        let y = g.conv2d(x, ker, None, ConvSpec { stride: s, dilation: d, padding: p }).unwrap();
        let expect = |n: usize| (n + 2 * p - d * (k - 1) - 1) / s + 1;
        assert_eq!(g.shape(y), &[3, expect(h), expect(h + 1)]);
    }
}

#[test]
fn conv_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 4, 4]));
    let bad = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, bad, None, ConvSpec::default()), Err(AutodiffError::Shape { .. })));
    let k = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    for spec in [ConvSpec { stride: 0, ..ConvSpec::default() }, ConvSpec { dilation: 0, ..ConvSpec::default() }] {
        assert!(matches!(g.conv2d(x, k, None, spec), Err(AutodiffError::Param { .. })));
    }
    let big = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
    assert!(g.conv2d(x, big, None, ConvSpec::default()).is_err());
}

#[test]
fn relu_values_and_dead_gradient() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[-1., 0., 2.]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0., 0., 2.]);

    let mut g = Graph::new();
    let x = g.param(t(&[4], &[-1., -2., -0.5, -3.]));
    let y = g.relu(x);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn affine_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let w = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let b = g.constant(t(&[2], &[0., 0.]));
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);

    let x = g.constant(t(&[1, 2], &[1., 2.]));
    let w = g.constant(t(&[2, 1], &[1., 1.]));
    let b = g.constant(t(&[1], &[3.]));
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[6.]);

    let w3 = g.constant(Tensor::zeros(&[3, 1]));
    assert!(g.affine(x, w3, b).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let l = g.constant(t(&[1, 2], &[0., 0.]));
    let ce = g.softmax_cross_entropy(l, &[0], 255).unwrap();
    assert!((g.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);

    let l = g.constant(t(&[1, 2], &[1000., 0.]));
    let ce = g.softmax_cross_entropy(l, &[0], 255).unwrap();
    let v = g.value(ce).item();
    assert!(v.is_finite() && v.abs() < 1e-12);

    let single = g.constant(t(&[1, 3], &[0.3, -1.0, 2.0]));
    let ce1 = g.softmax_cross_entropy(single, &[2], 255).unwrap();
    let pair = g.constant(t(&[2, 3], &[0.3, -1.0, 2.0, 9.0, 9.0, -9.0]));
    let ce2 = g.softmax_cross_entropy(pair, &[2, 255], 255).unwrap();
    assert_eq!(g.value(ce1).item(), g.value(ce2).item());

    assert!(matches!(
        g.softmax_cross_entropy(pair, &[3, 0], 255),
        Err(AutodiffError::Validation { .. })
    ));
}

#[test]
fn cross_entropy_all_ignored_is_zero_with_zero_gradient() {
    let mut g = Graph::new();
    let l = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
    let ce = g.softmax_cross_entropy(l, &[255, 255], 255).unwrap();
    assert_eq!(g.value(ce).item(), 0.0);
    let grads = g.backward(ce).unwrap();
    assert!(grads.get(l).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn l2_distance_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 1, 2], &[1., 2., 3., 4.]));
    let d = g.l2_distance_map(a, a).unwrap();
    assert_eq!(g.value(d).data(), &[0., 0.]);

    let a = g.param(t(&[2, 1, 1], &[3., 4.]));
    let b = g.constant(t(&[2, 1, 1], &[0., 0.]));
    let d = g.l2_distance_map(a, b).unwrap();
    assert_eq!(g.value(d).data(), &[5.]);
    let s = g.sum(d);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[0.6, 0.8]);

    let c = g.constant(Tensor::zeros(&[3, 1, 1]));
    assert!(g.l2_distance_map(a, c).is_err());
}

#[test]
fn l2_distance_gradient_is_zero_at_coincident_points() {
    let mut g = Graph::new();
    let a = g.param(t(&[2, 1, 1], &[1., 1.]));
    let b = g.constant(t(&[2, 1, 1], &[1., 1.]));
    let d = g.l2_distance_map(a, b).unwrap();
    let s = g.sum(d);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[0., 0.]);
}

#[test]
fn grad_reverse_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.5, -2.]));
    let y = g.grad_reverse(x);
    assert_eq!(g.value(y).data(), &[1.5, -2.]);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[-1., -1.]);
}

#[test]
fn pool_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 4, 4], 3.25));
    let y = g.pool_avg2d(x, 2, 2).unwrap();
    assert_eq!(g.shape(y), &[2, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 3.25));

    let x = g.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
    let y = g.pool_avg2d(x, 2, 1).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);
    assert!(g.pool_avg2d(x, 3, 1).is_err());
}

#[test]
fn upsample_examples() {
    let mut g = Graph::new();
    let data = [0.5, -1., 2., 7., 3., 1.];
    let x = g.constant(t(&[1, 2, 3], &data));
    let y = g.upsample_bilinear(x, 2, 3).unwrap();
    assert_eq!(g.value(y).data(), &data);

    let x = g.constant(t(&[1, 1, 1], &[4.5]));
    let y = g.upsample_bilinear(x, 3, 5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 4.5));

    let x = g.constant(t(&[1, 1, 2], &[0., 2.]));
    let y = g.upsample_bilinear(x, 1, 3).unwrap();
    assert_eq!(g.value(y).data(), &[0., 1., 2.]);

    assert!(g.upsample_bilinear(x, 1, 1).is_err());
}

#[test]
fn backward_basics() {
    let mut g = Graph::new();
    let x = g.param(t(&[1], &[3.]));
    let grads = g.backward(x).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.]);

    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1., 2., 3.]));
    let y = g.scale(x, 2.0);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2., 2., 2.]);

    assert!(matches!(g.backward(y), Err(AutodiffError::Contract(_))));
}

#[test]
fn backward_accumulates_until_zero_grad() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1., -1.]));
    let y = g.scale(x, 3.0);
    let s = g.sum(y);
    let first = g.backward(s).unwrap().get(x).unwrap().clone();
    let second = g.backward(s).unwrap().get(x).unwrap().clone();
    assert_eq!(second.data(), &[6., 6.]);
    g.zero_grad();
    let third = g.backward(s).unwrap().get(x).unwrap().clone();
    assert_eq!(first, third);
}

#[test]
fn gradient_map_lists_each_reachable_leaf_once() {
    let mut g = Graph::new();
    let a = g.param(t(&[2], &[1., 2.]));
    let b = g.param(t(&[2], &[3., 4.]));
    let unused = g.param(t(&[2], &[0., 0.]));
    let c = g.constant(t(&[2], &[1., 1.]));
    let ab = g.add(a, b).unwrap();
    let aab = g.add(ab, a).unwrap();
    let abc = g.add(aab, c).unwrap();
    let s = g.sum(abc);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.len(), 2);
    assert_eq!(grads.get(a).unwrap().data(), &[2., 2.]);
    assert!(grads.get(unused).is_none());
    assert!(grads.get(c).is_none());
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1., 2.]));
    let d = g.detach(x);
    let both = g.add(x, d).unwrap();
    let s = g.sum(both);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1., 1.]);
}

#[test]
fn gather_rows_and_channels_last() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
    let cl = g.channels_last(x).unwrap();
    assert_eq!(g.shape(cl), &[4, 2]);
    assert_eq!(g.value(cl).data(), &[0., 4., 1., 5., 2., 6., 3., 7.]);
    let rows = g.gather_rows(&[cl, cl], &[(0, 3), (1, 3), (0, 0)]).unwrap();
    assert_eq!(g.value(rows).data(), &[3., 7., 3., 7., 0., 4.]);
    let s = g.sum(rows);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1., 0., 0., 2., 1., 0., 0., 2.]);
    assert!(g.gather_rows(&[cl], &[(0, 4)]).is_err());
}
