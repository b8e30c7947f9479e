use hkd_tensor::{ConvSpec, PadMode, Tape, Tensor, TensorError};
use hkd_testkit as oracle;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, oracle::uniform(rng, n, -1.0, 1.0))
}

fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: ConvSpec) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let out = tape.conv2d(xv, wv, bv, spec).unwrap();
    tape.value(out).clone()
}

#[test]
fn conv_identity_kernel() {
    let x = t(&[1, 1, 3, 3], (0..9).map(f64::from).collect());
    let w = t(&[1, 1, 1, 1], vec![1.0]);
    let b = t(&[1], vec![0.0]);
    let out = run_conv(&x, &w, Some(&b), ConvSpec::new(1, 1, 1));
    assert_eq!(out, x);
}

#[test]
fn conv_all_ones_sums_window() {
    let x = Tensor::<f64>::ones([1, 1, 3, 3]);
    let w = Tensor::<f64>::ones([1, 1, 3, 3]);
    let out = run_conv(&x, &w, None, ConvSpec::new(1, 1, 3).with_padding(0));
    assert_eq!(out.shape(), &[1, 1, 1, 1]);
    assert_eq!(out.data(), &[9.0]);
}

#[test]
fn conv_matches_nested_loop_reference() {
    let mut rng = oracle::rng(11);
    for (stride, pad, groups, reflect) in [(1, 1, 1, false), (2, 1, 1, false), (1, 1, 1, true), (1, 0, 2, false)] {
        let x = random(&mut rng, &[2, 2, 5, 5]);
        let w = random(&mut rng, &[4, 2 / groups, 3, 3]);
        let b = random(&mut rng, &[4]);
        let spec = ConvSpec::new(2, 4, 3)
            .with_stride(stride)
            .with_padding(pad)
            .with_groups(groups)
            .with_pad_mode(if reflect { PadMode::Reflect } else { PadMode::Zeros });
        let got = run_conv(&x, &w, Some(&b), spec);
        let (want, shape) = oracle::conv2d(
            x.data(),
            [2, 2, 5, 5],
            w.data(),
            [4, 2 / groups, 3, 3],
            Some(b.data()),
            oracle::NaiveConv { stride, pad, groups, reflect },
        );
        assert_eq!(got.shape(), &shape);
        assert!(got.max_abs_diff(&t(&shape, want)).unwrap() < 1e-12);
    }
}

#[test]
fn conv_shape_errors_name_axes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros([2, 2, 3, 3]));
    let err = tape.conv2d(x, w, None, ConvSpec::new(2, 2, 3)).unwrap_err();
    match err {
        TensorError::Dimension { detail, .. } => assert!(detail.contains("channel axis"), "{detail}"),
        other => panic!("unexpected {other:?}"),
    }
    let err = tape
        .conv2d(x, w, None, ConvSpec::new(3, 2, 3).with_groups(2))
        .unwrap_err();
    assert!(matches!(err, TensorError::Config { .. }));
}

#[test]
fn conv_is_linear_in_input() {
    let mut rng = oracle::rng(3);
    let x = random(&mut rng, &[1, 3, 6, 6]);
    let y = random(&mut rng, &[1, 3, 6, 6]);
    let w = random(&mut rng, &[2, 3, 3, 3]);
    let spec = ConvSpec::new(3, 2, 3);
    let (a, b) = (0.7, -1.3);
    let mix = t(
        &[1, 3, 6, 6],
        x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
    );
    let lhs = run_conv(&mix, &w, None, spec);
    let cx = run_conv(&x, &w, None, spec);
    let cy = run_conv(&y, &w, None, spec);
    let rhs = t(
        lhs.shape(),
        cx.data().iter().zip(cy.data()).map(|(p, q)| a * p + b * q).collect(),
    );
    assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
}

#[test]
fn separable_identity_and_composition() {
    let x = t(&[1, 1, 3, 3], (0..9).map(f64::from).collect());
    let mut dw = vec![0.0; 9];
    dw[4] = 1.0;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let dwv = tape.constant(t(&[1, 1, 3, 3], dw));
    let pwv = tape.constant(t(&[1, 1, 1, 1], vec![1.0]));
    let out = tape
        .depthwise_separable_conv(xv, dwv, None, pwv, None, ConvSpec::depthwise(1, 3))
        .unwrap();
    assert_eq!(tape.value(out), &x);

    let mut rng = oracle::rng(5);
    let x = random(&mut rng, &[2, 3, 6, 5]);
    let dw = random(&mut rng, &[3, 1, 3, 3]);
    let pw = random(&mut rng, &[4, 3, 1, 1]);
    let pb = random(&mut rng, &[4]);
    let mut tape = Tape::new();
    let (xv, dwv, pwv, pbv) = (
        tape.constant(x.clone()),
        tape.constant(dw.clone()),
        tape.constant(pw.clone()),
        tape.constant(pb.clone()),
    );
    let fused = tape
        .depthwise_separable_conv(xv, dwv, None, pwv, Some(pbv), ConvSpec::depthwise(3, 3))
        .unwrap();
    let mid = run_conv(&x, &dw, None, ConvSpec::depthwise(3, 3));
    let composed = run_conv(&mid, &pw, Some(&pb), ConvSpec::new(3, 4, 1));
    assert_eq!(tape.value(fused), &composed);
}

#[test]
fn separable_parameter_count() {
    let (cin, cout, k) = (8, 16, 3);
    let dw = ConvSpec::depthwise(cin, k);
    let pw = ConvSpec::new(cin, cout, 1);
    let stored = Tensor::<f32>::zeros(dw.weight_shape()).numel() + Tensor::<f32>::zeros(pw.weight_shape()).numel();
    assert_eq!(stored, cin * k * k + cin * cout);
    assert_eq!(stored, 200);
    assert_eq!(ConvSpec::new(cin, cout, k).weight_count(), 1152);
}

#[test]
fn transposed_conv_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 1, 1], vec![2.5]));
    let w = tape.constant(Tensor::ones([1, 1, 2, 2]));
    let spec = ConvSpec::new(1, 1, 2).with_stride(2).with_padding(0);
    let out = tape.conv_transpose2d(x, w, None, spec).unwrap();
    assert_eq!(tape.value(out), &Tensor::full([1, 1, 2, 2], 2.5));

    let x = tape.constant(Tensor::ones([1, 1, 2, 2]));
    let out = tape.conv_transpose2d(x, w, None, spec).unwrap();
    assert_eq!(tape.shape(out), &[1, 1, 4, 4]);
}

/// A transposed convolution is the input-gradient of the matching conv.
#[test]
fn transposed_conv_equals_conv_input_gradient() {
    let mut rng = oracle::rng(21);
    for (stride, pad, op) in [(1, 0, 0), (2, 1, 1), (3, 4, 2)] {
        let (cin_t, cout_t, k) = (3, 2, if stride == 3 { 9 } else { 3 });
        let x = random(&mut rng, &[2, cin_t, 4, 3]);
        let w = random(&mut rng, &[cin_t, cout_t, k, k]);
        let spec = ConvSpec::new(cin_t, cout_t, k)
            .with_stride(stride)
            .with_padding(pad)
            .with_output_padding(op);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let yt = tape.conv_transpose2d(xv, wv, None, spec).unwrap();
        let got = tape.value(yt).clone();

        // d/dz Σ conv(z) ⊙ x for z shaped like the transposed output.
        let z = tape.leaf(Tensor::zeros(got.shape().to_vec()), true);
        let conv_spec = ConvSpec::new(cout_t, cin_t, k).with_stride(stride).with_padding(pad);
        let c = tape.conv2d(z, wv, None, conv_spec).unwrap();
        assert_eq!(tape.shape(c), x.shape());
        let prod = tape.hadamard(c, xv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let vjp = grads.get(z).unwrap();
        assert!(got.max_abs_diff(vjp).unwrap() < 1e-12);

        let (naive, shape) = oracle::conv_transpose2d(x.data(), [2, cin_t, 4, 3], w.data(), [cin_t, cout_t, k, k], stride, pad, op);
        assert!(got.max_abs_diff(&t(&shape, naive)).unwrap() < 1e-12);
    }
}

#[test]
fn avg_pool_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let p = tape.avg_pool2d(x, 0.5).unwrap();
    assert_eq!(tape.value(p).data(), &[2.5]);

    let c = tape.constant(Tensor::full([1, 2, 8, 4], 0.3));
    let p = tape.avg_pool2d(c, 0.25).unwrap();
    assert_eq!(tape.shape(p), &[1, 2, 2, 1]);
    assert!(tape.value(p).data().iter().all(|v| (v - 0.3).abs() < 1e-15));

    assert!(matches!(tape.avg_pool2d(c, 2.0), Err(TensorError::Config { .. })));
    assert!(matches!(tape.avg_pool2d(c, 0.3), Err(TensorError::Config { .. })));
}

#[test]
fn avg_pool_matches_window_loop_and_pads_by_reflection() {
    let mut rng = oracle::rng(8);
    for shape in [[1, 2, 8, 8], [2, 1, 10, 7]] {
        let x = random(&mut rng, &shape);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = tape.avg_pool2d(xv, 0.25).unwrap();
        let (want, oh, ow) = oracle::avg_pool(x.data(), shape, 4);
        assert_eq!(tape.shape(p), &[shape[0], shape[1], oh, ow]);
        assert!(tape.value(p).max_abs_diff(&t(tape.shape(p), want)).unwrap() < 1e-12);
    }
}

#[test]
fn avg_pool_preserves_mean_when_tiling() {
    let mut rng = oracle::rng(9);
    let x = random(&mut rng, &[1, 3, 8, 12]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = tape.avg_pool2d(xv, 0.25).unwrap();
    assert!((tape.value(p).mean() - x.mean()).abs() < 1e-6);
}

#[test]
fn global_avg_pool_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2, 2], vec![0.0, 2.0, 4.0, 6.0, 5.0, 5.0, 5.0, 5.0]));
    let g = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.shape(g), &[1, 2, 1, 1]);
    assert_eq!(tape.value(g).data(), &[3.0, 5.0]);

    let mut rng = oracle::rng(2);
    let r = random(&mut rng, &[2, 3, 5, 4]);
    let rv = tape.constant(r.clone());
    let g = tape.global_avg_pool(rv).unwrap();
    let want = oracle::channel_means(r.data(), [2, 3, 5, 4]);
    assert!(tape.value(g).max_abs_diff(&t(&[2, 3, 1, 1], want)).unwrap() < 1e-12);
}

#[test]
fn activation_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 1, 3], vec![-1.0, 0.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s).data()[1], 0.5);
    let y = tape.constant(t(&[1, 1, 1, 1], vec![-2.0]));
    let slope = tape.constant(t(&[1], vec![0.25]));
    let p = tape.prelu(y, slope).unwrap();
    assert_eq!(tape.value(p).data(), &[-0.5]);
}

#[test]
fn matmul_and_friends() {
    let mut rng = oracle::rng(4);
    let a = random(&mut rng, &[3, 4, 5]);
    let b = random(&mut rng, &[3, 5, 2]);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.batched_matmul(av, bv).unwrap();
    let want = oracle::batched_matmul(a.data(), b.data(), 3, 4, 5, 2);
    assert!(tape.value(c).max_abs_diff(&t(&[3, 4, 2], want)).unwrap() < 1e-12);

    let eye = tape.constant(Tensor::from_fn([3, 4, 4], |i| if (i % 16) % 5 == 0 { 1.0 } else { 0.0 }));
    let same = tape.batched_matmul(eye, av).unwrap();
    assert_eq!(tape.value(same), &a);

    assert!(matches!(tape.batched_matmul(av, av), Err(TensorError::Dimension { .. })));

    let at = tape.transpose_last2(av).unwrap();
    assert_eq!(tape.shape(at), &[3, 5, 4]);
    assert_eq!(tape.value(at).data()[1], a.data()[5]);

    let x = random(&mut rng, &[2, 3, 4, 4]);
    let xv = tape.constant(x.clone());
    let ones = tape.constant(Tensor::ones([2, 3, 4, 4]));
    let h = tape.hadamard(xv, ones).unwrap();
    assert_eq!(tape.value(h), &x);
    let f = tape.flatten_spatial(xv).unwrap();
    assert_eq!(tape.shape(f), &[2, 3, 16]);
}

#[test]
fn broadcast_only_for_attention_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full([2, 3, 4, 4], 2.0));
    let w = tape.constant(Tensor::full([2, 3, 1, 1], 0.5));
    let y = tape.scale_channels(x, w).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 1.0));
    let a = tape.constant(Tensor::full([2, 1, 4, 4], 0.25));
    let z = tape.scale_pixels(x, a).unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v == 0.5));
    let wrong = tape.constant(Tensor::full([2, 3, 4, 1], 0.5));
    assert!(tape.scale_channels(x, wrong).is_err());
    assert!(tape.add(x, w).is_err());
}

#[test]
fn forward_is_deterministic() {
    let mut rng = oracle::rng(1);
    let x: Tensor<f32> = random(&mut rng, &[2, 4, 9, 9]).cast();
    let w: Tensor<f32> = random(&mut rng, &[4, 4, 3, 3]).cast();
    let run = || {
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(xv, wv, None, ConvSpec::new(4, 4, 3)).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
