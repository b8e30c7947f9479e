use hkd_tensor::gradcheck::check_gradients;
use hkd_tensor::{ConvSpec, PadMode, Tape, Tensor, TensorError, Var};
use hkd_testkit as oracle;
use proptest::prelude::*;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn random(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = oracle::rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), oracle::uniform(&mut rng, n, lo, hi)).unwrap()
}

/// Values bounded away from zero so kinks sit outside the FD stencil.
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor<f64> {
    random(seed, shape, 0.1, 1.0).clone_with_signs(seed)
}

trait Signs {
    fn clone_with_signs(&self, seed: u64) -> Tensor<f64>;
}

impl Signs for Tensor<f64> {
    fn clone_with_signs(&self, seed: u64) -> Tensor<f64> {
        let signs = random(seed ^ 0xabc, self.shape(), -1.0, 1.0);
        Tensor::new(
            self.shape().to_vec(),
            self.data()
                .iter()
                .zip(signs.data())
                .map(|(v, s)| if *s < 0.0 { -v } else { *v })
                .collect(),
        )
        .unwrap()
    }
}

/// Contract the output with a fixed random cotangent so every output element
/// contributes with a different weight.
fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> hkd_tensor::Result<Var> {
    let r = random(seed, tape.shape(out), -1.0, 1.0);
    let rv = tape.constant(r);
    let p = tape.hadamard(out, rv)?;
    Ok(tape.sum(p))
}

fn assert_close(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> hkd_tensor::Result<Var>) {
    let report = check_gradients(inputs, STEP, f).unwrap();
    assert!(
        report.max_rel_error() < TOL,
        "relative errors {:?}",
        report.rel_errors
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_gradients(
        seed in 0u64..1 << 40,
        cin in 1usize..4, cout in 1usize..4,
        h in 3usize..5, w in 3usize..5,
        stride in 1usize..3, reflect in any::<bool>(),
    ) {
        let spec = ConvSpec::new(cin, cout, 3)
            .with_stride(stride)
            .with_pad_mode(if reflect { PadMode::Reflect } else { PadMode::Zeros });
        let inputs = [
            random(seed, &[2, cin, h, w], -1.0, 1.0),
            random(seed + 1, &spec.weight_shape(), -1.0, 1.0),
            random(seed + 2, &[cout], -1.0, 1.0),
        ];
        assert_close(&inputs, |tape, v| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), spec)?;
            contract(tape, y, seed + 3)
        });
    }

    #[test]
    fn grouped_and_separable_gradients(seed in 0u64..1 << 40, c in 1usize..5, cout in 1usize..4, h in 3usize..5) {
        let dw = ConvSpec::depthwise(c, 3).with_pad_mode(PadMode::Reflect);
        let inputs = [
            random(seed, &[1, c, h, h + 1], -1.0, 1.0),
            random(seed + 1, &dw.weight_shape(), -1.0, 1.0),
            random(seed + 2, &[cout, c, 1, 1], -1.0, 1.0),
            random(seed + 3, &[cout], -1.0, 1.0),
        ];
        assert_close(&inputs, |tape, v| {
            let y = tape.depthwise_separable_conv(v[0], v[1], None, v[2], Some(v[3]), dw)?;
            contract(tape, y, seed + 4)
        });
    }

    #[test]
    fn conv_transpose_gradients(seed in 0u64..1 << 40, cin in 1usize..4, cout in 1usize..3, stride in 1usize..4) {
        let k = stride + 2;
        let spec = ConvSpec::new(cin, cout, k)
            .with_stride(stride)
            .with_padding(1)
            .with_output_padding(stride - 1);
        let inputs = [
            random(seed, &[2, cin, 3, 2], -1.0, 1.0),
            random(seed + 1, &spec.transposed_weight_shape(), -1.0, 1.0),
            random(seed + 2, &[cout], -1.0, 1.0),
        ];
        assert_close(&inputs, |tape, v| {
            let y = tape.conv_transpose2d(v[0], v[1], Some(v[2]), spec)?;
            contract(tape, y, seed + 3)
        });
    }

    #[test]
    fn pooling_gradients(seed in 0u64..1 << 40, c in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let inputs = [random(seed, &[2, c, h, w], -1.0, 1.0)];
        assert_close(&inputs, |tape, v| {
            let p = tape.avg_pool2d(v[0], 0.5)?;
            let q = tape.avg_pool2d(v[0], 0.25)?;
            let g = tape.global_avg_pool(v[0])?;
            let a = contract(tape, p, seed + 1)?;
            let b = contract(tape, q, seed + 2)?;
            let c = contract(tape, g, seed + 3)?;
            let ab = tape.add(a, b)?;
            tape.add(ab, c)
        });
    }

    #[test]
    fn activation_gradients(seed in 0u64..1 << 40, c in 1usize..4, h in 1usize..4) {
        let shape = [2, c, h, 3];
        let inputs = [away_from_zero(seed, &shape), random(seed + 1, &[c], 0.05, 0.5)];
        assert_close(&inputs, |tape, v| {
            let r = tape.relu(v[0]);
            let p = tape.prelu(v[0], v[1])?;
            let s = tape.sigmoid(v[0]);
            let a = tape.abs(v[0]);
            let sq = tape.square(v[0]);
            let l = tape.log(a);
            let mut acc = contract(tape, r, seed + 2)?;
            for (i, node) in [p, s, sq, l].into_iter().enumerate() {
                let term = contract(tape, node, seed + 3 + i as u64)?;
                acc = tape.add(acc, term)?;
            }
            Ok(acc)
        });
    }

    #[test]
    fn broadcast_gradients(seed in 0u64..1 << 40, c in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let inputs = [
            random(seed, &[2, c, h, w], -1.0, 1.0),
            random(seed + 1, &[2, c, 1, 1], -1.0, 1.0),
            random(seed + 2, &[2, 1, h, w], -1.0, 1.0),
        ];
        assert_close(&inputs, |tape, v| {
            let a = tape.scale_channels(v[0], v[1])?;
            let b = tape.scale_pixels(a, v[2])?;
            let d = tape.sub(b, v[0])?;
            contract(tape, d, seed + 3)
        });
    }

    #[test]
    fn matrix_gradients(seed in 0u64..1 << 40, b in 1usize..3, m in 1usize..5, k in 1usize..5) {
        let inputs = [random(seed, &[b, m, k], -1.0, 1.0)];
        assert_close(&inputs, |tape, v| {
            let t = tape.transpose_last2(v[0])?;
            let g = tape.batched_matmul(v[0], t)?;
            let r = tape.reshape(g, vec![b * m * m])?;
            let sq = tape.square(r);
            Ok(tape.mean(sq))
        });
    }

    #[test]
    fn channel_plumbing_gradients(seed in 0u64..1 << 40, c1 in 1usize..4, c2 in 1usize..4) {
        let inputs = [random(seed, &[2, c1, 2, 3], -1.0, 1.0), random(seed + 1, &[2, c2, 2, 3], -1.0, 1.0)];
        assert_close(&inputs, |tape, v| {
            let cat = tape.concat_channels(&[v[0], v[1], v[0]])?;
            let s = tape.slice_channels(cat, 1, c1 + c2 - 1)?;
            contract(tape, s, seed + 2)
        });
    }

    #[test]
    fn row_normalize_gradients(seed in 0u64..1 << 40, rows in 1usize..5, n in 1usize..5) {
        let inputs = [random(seed, &[1, rows, n], 0.1, 2.0)];
        assert_close(&inputs, |tape, v| {
            let p = tape.row_normalize(v[0], 1e-8)?;
            let l = tape.log(p);
            contract(tape, l, seed + 1)
        });
    }
}

#[test]
fn linear_loss_gradient_is_input() {
    let x = random(1, &[1, 2, 2, 2], -1.0, 1.0);
    let mut tape = Tape::new();
    let w = tape.leaf(random(2, &[1, 2, 2, 2], -1.0, 1.0), true);
    let xv = tape.constant(x.clone());
    let p = tape.hadamard(w, xv).unwrap();
    let loss = tape.sum(p);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &x);
    assert!(grads.get(xv).is_none());
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::zeros([1, 1, 1, 2]), true);
    let r = tape.relu(x);
    let loss = tape.sum(r);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::zeros([1, 1, 1, 1]), true);
    let slope = tape.leaf(Tensor::full([1], 0.25), true);
    let p = tape.prelu(x, slope).unwrap();
    let loss = tape.sum(p);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
    assert_eq!(grads.get(slope).unwrap().data(), &[0.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::ones([2]), true);
    assert!(matches!(tape.backward(x), Err(TensorError::Usage(_))));
}

#[test]
fn unused_parameters_get_no_buffer_and_constants_stay_clean() {
    let mut tape = Tape::<f32>::new();
    let used = tape.leaf(Tensor::ones([1, 1, 2, 2]), true);
    let unused = tape.leaf(Tensor::ones([1, 1, 2, 2]), true);
    let frozen = tape.constant(Tensor::ones([1, 1, 2, 2]));
    let y = tape.hadamard(used, frozen).unwrap();
    let loss = tape.mean(y);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(used).is_some());
    assert!(grads.get(unused).is_none());
    assert!(grads.get(frozen).is_none());
    assert!(!tape.requires_grad(frozen));
}

#[test]
fn no_grad_tape_never_requires_grad() {
    let mut tape = Tape::<f32>::no_grad();
    let x = tape.leaf(Tensor::ones([1, 1, 2, 2]), true);
    let y = tape.relu(x);
    let loss = tape.sum(y);
    assert!(!tape.requires_grad(loss));
    assert_eq!(tape.backward(loss).unwrap().populated(), 0);
}
