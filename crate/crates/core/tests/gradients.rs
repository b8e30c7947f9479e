use hkd_core::distill::{fa_term, total_loss, FaForm, FaLossConfig, FaLossKind, GramScale};
use hkd_core::gradcheck::{check_graph_gradients, check_graph_gradients_steps};
use hkd_core::nn::{Deconv, Graph, ParamStore, PRelu, SeparableConv};
use hkd_core::student::{mse, ChannelAttention, PixelAttention, StudentArch, StudentConfig};
use hkd_core::teacher::{sr_loss, FsrcnnBranchConfig, TeacherArch};
use hkd_tensor::gradcheck::check_gradients;
use hkd_tensor::{ConvSpec, PadMode, Tensor, Var};
use hkd_testkit as oracle;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = oracle::rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), oracle::uniform(&mut rng, n, lo, hi)).unwrap()
}

/// Every parameter replaced by uniform noise, so zero-initialised layers
/// also carry signal.
fn randomized(store: &ParamStore, seed: u64) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for (i, (name, t)) in store.iter().enumerate() {
        out.insert(name, random(seed.wrapping_add(i as u64 * 7919), t.shape(), -0.6, 0.6));
    }
    out
}

/// The initial weights at half scale, with zero-initialised tensors
/// replaced by small noise. Keeps the attention sigmoids of a deep stack out
/// of saturation, where gradients fall below what differences can resolve.
fn with_noisy_zeros(store: &ParamStore, seed: u64) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for (i, (name, t)) in store.cast::<f64>().iter().enumerate() {
        if t.data().iter().all(|v| *v == 0.0) {
            out.insert(name, random(seed.wrapping_add(i as u64 * 7919), t.shape(), -0.1, 0.1));
        } else {
            out.insert(name, t.map(|v| 0.5 * v));
        }
    }
    out
}

/// Weighted sum against a fixed random cotangent.
fn contract(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> hkd_core::Result<Var> {
    let r = random(seed, g.tape.shape(out), -1.0, 1.0);
    let rv = g.input(r);
    let p = g.tape.hadamard(out, rv)?;
    Ok(g.tape.sum(p))
}

fn assert_graph(params: &ParamStore<f64>, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> hkd_core::Result<Var>) {
    let report = check_graph_gradients(params, inputs, STEP, f).unwrap();
    assert!(report.max_rel_error() < TOL, "worst {:?}", report.worst());
}

/// For whole networks: several steps, best agreement per tensor.
fn assert_network(params: &ParamStore<f64>, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> hkd_core::Result<Var>) {
    let report = check_graph_gradients_steps(params, inputs, &[1e-4, 1e-5, 1e-6, 1e-7], f).unwrap();
    assert!(report.max_rel_error() < TOL, "worst {:?}", report.worst());
}

fn tiny_teacher(dsc: bool) -> FsrcnnBranchConfig {
    FsrcnnBranchConfig {
        d: 4,
        s: 2,
        m: 1,
        ..FsrcnnBranchConfig::default()
    }
    .with_dsc(dsc)
}

fn tiny_student() -> StudentConfig {
    StudentConfig {
        width: 4,
        outer_blocks: 2,
        inner_blocks: 1,
        reduction: 2,
        teacher_tap_channels: tiny_teacher(false).tap_channels().to_vec(),
    }
}

fn kind_of(i: usize) -> FaLossKind {
    [FaLossKind::L2, FaLossKind::L1, FaLossKind::Kl][i % 3]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn channel_attention(seed in 0u64..1 << 40, c in 2usize..6, hidden in 1usize..3, h in 2usize..5) {
        let ca = ChannelAttention::new("ca", c, hidden);
        let mut store = ParamStore::new();
        ca.init(&mut store, 0);
        let params = randomized(&store, seed);
        assert_graph(&params, &[random(seed ^ 1, &[2, c, h, h + 1], -1.0, 1.0)], |g, v| {
            let (out, _) = ca.forward(g, v[0])?;
            contract(g, out, seed)
        });
    }

    #[test]
    fn pixel_attention(seed in 0u64..1 << 40, c in 1usize..5, hidden in 1usize..3, h in 1usize..5) {
        let pa = PixelAttention::new("pa", c, hidden);
        let mut store = ParamStore::new();
        pa.init(&mut store, 0);
        let params = randomized(&store, seed);
        assert_graph(&params, &[random(seed ^ 1, &[1, c, h, 3], -1.0, 1.0)], |g, v| {
            let (out, _) = pa.forward(g, v[0])?;
            contract(g, out, seed)
        });
    }

    #[test]
    fn separable_module(seed in 0u64..1 << 40, cin in 1usize..4, cout in 1usize..4, reflect in any::<bool>()) {
        let mode = if reflect { PadMode::Reflect } else { PadMode::Zeros };
        let sep = SeparableConv::replacing("sep", ConvSpec::new(cin, cout, 3).with_pad_mode(mode));
        let mut store = ParamStore::new();
        sep.init(&mut store, 0);
        let params = randomized(&store, seed);
        assert_graph(&params, &[random(seed ^ 1, &[1, cin, 4, 5], -1.0, 1.0)], |g, v| {
            let out = sep.forward(g, v[0])?;
            contract(g, out, seed)
        });
    }

    #[test]
    fn deconv_module(seed in 0u64..1 << 40, cin in 1usize..4, cout in 1usize..3, scale in prop::sample::select(vec![2usize, 4])) {
        let spec = ConvSpec::new(cin, cout, 9).with_stride(scale).with_padding(4).with_output_padding(scale - 1);
        let deconv = Deconv { name: "up".into(), spec };
        let mut store = ParamStore::new();
        deconv.init(&mut store, 0);
        let params = randomized(&store, seed);
        assert_graph(&params, &[random(seed ^ 1, &[1, cin, 2, 3], -1.0, 1.0)], |g, v| {
            let out = deconv.forward(g, v[0])?;
            contract(g, out, seed)
        });
    }

    #[test]
    fn prelu_module(seed in 0u64..1 << 40, c in 1usize..4) {
        let p = PRelu { name: "act".into(), channels: c };
        let mut store = ParamStore::new();
        p.init(&mut store);
        let params = randomized(&store, seed);
        assert_graph(&params, &[random(seed ^ 1, &[2, c, 3, 3], -1.0, 1.0)], |g, v| {
            let out = p.forward(g, v[0])?;
            contract(g, out, seed)
        });
    }

    #[test]
    fn affinity_losses(seed in 0u64..1 << 40, c in 1usize..5, kind in 0usize..3, mean in any::<bool>()) {
        let cfg = FaLossConfig {
            kind: kind_of(kind),
            gram_scale: if mean { GramScale::Mean } else { GramScale::Raw },
            ..FaLossConfig::default()
        };
        let s = random(seed, &[2, c, 8, 8], -1.0, 1.0);
        let t = random(seed ^ 3, &[2, c, 8, 8], -1.0, 1.0);
        let report = check_gradients(&[s, t], 1e-5, |tape, v| {
            fa_term(tape, v[0], v[1], &cfg).map_err(|e| match e {
                hkd_core::CoreError::Tensor(t) => t,
                other => panic!("{other}"),
            })
        })
        .unwrap();
        prop_assert!(report.max_rel_error() < TOL, "{:?}", report.rel_errors);
    }

    #[test]
    fn pixel_losses(seed in 0u64..1 << 40, c in 1usize..4, l1 in any::<bool>()) {
        let cfg = FaLossConfig {
            kind: if l1 { FaLossKind::L1 } else { FaLossKind::L2 },
            form: FaForm::Pixel,
            ..FaLossConfig::default()
        };
        let s = random(seed, &[1, c, 3, 4], -1.0, 1.0);
        let t = random(seed ^ 3, &[1, c, 3, 4], -1.0, 1.0);
        let report = check_gradients(&[s, t], 1e-6, |tape, v| {
            fa_term(tape, v[0], v[1], &cfg).map_err(|e| match e {
                hkd_core::CoreError::Tensor(t) => t,
                other => panic!("{other}"),
            })
        })
        .unwrap();
        prop_assert!(report.max_rel_error() < TOL, "{:?}", report.rel_errors);
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 8,
        rng_seed: RngSeed::Fixed(11),
        ..ProptestConfig::default()
    })]

    #[test]
    fn teacher_reconstruction_loss(seed in 0u64..1 << 40, dsc in any::<bool>(), scale in prop::sample::select(vec![2usize, 4])) {
        let cfg = FsrcnnBranchConfig { scale, ..tiny_teacher(dsc) };
        let arch = TeacherArch::new(cfg).unwrap();
        let params = randomized(&arch.init(0), seed);
        let lr = random(seed ^ 1, &[1, 3, 3, 3], 0.0, 1.0);
        let hr = random(seed ^ 2, &[1, 3, 3 * scale, 3 * scale], 0.0, 1.0);
        assert_graph(&params, &[lr, hr], |g, v| {
            let out = arch.forward(g, v[0])?;
            sr_loss(&mut g.tape, out.sr, v[1])
        });
    }

    #[test]
    fn student_reconstruction_loss(seed in 0u64..1 << 40) {
        let arch = StudentArch::new(tiny_student()).unwrap();
        let params = with_noisy_zeros(&arch.init(seed), seed);
        let hazy = random(seed ^ 1, &[1, 3, 16, 16], 0.0, 1.0);
        let clear = random(seed ^ 2, &[1, 3, 16, 16], 0.0, 1.0);
        assert_network(&params, &[hazy, clear], |g, v| {
            let out = arch.forward(g, v[0], false)?;
            mse(&mut g.tape, out.out, v[1])
        });
    }

    #[test]
    fn student_distillation_loss(seed in 0u64..1 << 40, kind in 0usize..3, w_fa in 0.0f64..1.0, mean in any::<bool>()) {
        let cfg = tiny_student();
        let arch = StudentArch::new(cfg.clone()).unwrap();
        let params = with_noisy_zeros(&arch.init(seed), seed);
        let fa = FaLossConfig {
            kind: kind_of(kind),
            w_fa,
            gram_scale: if mean { GramScale::Mean } else { GramScale::Raw },
            ..FaLossConfig::default()
        };
        let hazy = random(seed ^ 1, &[1, 3, 16, 16], 0.0, 1.0);
        let clear = random(seed ^ 2, &[1, 3, 16, 16], 0.0, 1.0);
        let teacher: Vec<Tensor<f64>> = cfg
            .teacher_tap_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| random(seed ^ (10 + i as u64), &[1, c, 16, 16], -1.0, 1.0))
            .collect();
        // The target stays a constant: next to a raw Gram term its gradient
        // is too small for finite differences to resolve.
        assert_network(&params, &[hazy], |g, v| {
            let out = arch.forward(g, v[0], true)?;
            let y = g.input(clear.clone());
            let l_mse = mse(&mut g.tape, out.out, y)?;
            let mut terms = Vec::new();
            for (k, &tap) in out.taps.iter().enumerate() {
                let t = g.input(teacher[cfg.teacher_level(k)].clone());
                terms.push(fa_term(&mut g.tape, tap, t, &fa)?);
            }
            total_loss(&mut g.tape, l_mse, &terms, &fa)
        });
    }
}
