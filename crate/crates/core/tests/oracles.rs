use hkd_core::distill::{affinity, scaled_affinity, GramScale};
use hkd_core::haze::resize_bicubic;
use hkd_core::ImageRGB;
use hkd_tensor::{Tape, Tensor};
use hkd_testkit as oracle;
use rand::Rng;

fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = oracle::rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), oracle::uniform(&mut rng, n, -1.0, 1.0)).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn affinity_matches_composed_loops() {
    let mut rng = oracle::rng(3);
    for case in 0..50u64 {
        let b = rng.random_range(1..3);
        let c = rng.random_range(1..7);
        let h = rng.random_range(4..14);
        let w = rng.random_range(4..14);
        let x = random(case, &[b, c, h, w]);
        let mut tape = Tape::<f64>::no_grad();
        let v = tape.constant(x.clone());
        let a = affinity(&mut tape, v, 0.25).unwrap();
        assert_eq!(tape.shape(a), &[b, c, c]);
        let want = oracle::affinity(x.data(), [b, c, h, w], 4);
        let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff(tape.value(a).data(), &want) / scale < 1e-12, "case {case}");
    }
}

#[test]
fn mean_scaled_affinity_divides_by_pooled_area() {
    let x = random(9, &[1, 3, 8, 12]);
    let mut tape = Tape::<f64>::no_grad();
    let v = tape.constant(x.clone());
    let m = scaled_affinity(&mut tape, v, 0.25, GramScale::Mean).unwrap();
    let want: Vec<f64> = oracle::affinity(x.data(), [1, 3, 8, 12], 4).iter().map(|v| v / 6.0).collect();
    assert!(max_diff(tape.value(m).data(), &want) < 1e-12);
}

#[test]
fn bicubic_resize_matches_full_sum() {
    let mut rng = oracle::rng(5);
    for case in 0..10u64 {
        let (w, h) = (rng.random_range(6..20), rng.random_range(6..20));
        let (ow, oh) = (rng.random_range(3..24), rng.random_range(3..24));
        let img = ImageRGB::from_fn(w, h, |y, x| {
            let v = ((x * 31 + y * 17 + case as usize * 7) % 23) as f32 / 22.0;
            [v, 1.0 - v, (v * 0.5 + 0.25).fract()]
        })
        .unwrap();
        let out = resize_bicubic(&img, ow, oh).unwrap();
        for c in 0..3 {
            let plane: Vec<f64> = img.plane(c).into_iter().map(f64::from).collect();
            for oy in 0..oh {
                for ox in 0..ow {
                    let want = oracle::bicubic_sample(&plane, h, w, oh, ow, oy, ox).clamp(0.0, 1.0);
                    let got = out.get(oy, ox, c) as f64;
                    assert!((got - want).abs() < 1e-5, "case {case} c{c} ({oy},{ox}): {got} vs {want}");
                }
            }
        }
    }
}
