//! Rough single-thread conv throughput, forward and backward timed apart.
use std::time::Instant;

use hkd_tensor::{ConvSpec, PadMode, Tape, Tensor};

fn main() {
    let cases = [
        (16, 16, 3, 96, 128, PadMode::Zeros),
        (16, 16, 3, 96, 128, PadMode::Reflect),
        (16, 2, 1, 96, 128, PadMode::Zeros),
        (2, 1, 1, 96, 128, PadMode::Zeros),
        (32, 32, 3, 96, 128, PadMode::Zeros),
    ];
    for (cin, cout, k, h, w, pad) in cases {
        let x = Tensor::<f32>::from_fn([2, cin, h, w], |i| ((i * 7919) % 1000) as f32 / 1000.0);
        let wt = Tensor::<f32>::from_fn([cout, cin, k, k], |i| ((i * 104729) % 100) as f32 / 1000.0);
        let spec = ConvSpec::new(cin, cout, k).with_pad_mode(pad);
        let reps = 10;
        let (mut fwd, mut bwd) = (0.0, 0.0);
        for _ in 0..reps {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(wt.clone(), true);
            let t0 = Instant::now();
            let y = tape.conv2d(xv, wv, None, spec).unwrap();
            let l = tape.mean(y);
            let t1 = Instant::now();
            tape.backward(l).unwrap();
            fwd += (t1 - t0).as_secs_f64();
            bwd += t1.elapsed().as_secs_f64();
        }
        let macs = (2 * cin * cout * k * k * h * w) as f64;
        println!(
            "{cin}->{cout} k{k} {h}x{w} {pad:?}: fwd {:.2} ms ({:.1} GMAC/s), bwd {:.2} ms ({:.1} GMAC/s)",
            fwd / reps as f64 * 1e3,
            macs * reps as f64 / fwd / 1e9,
            bwd / reps as f64 * 1e3,
            2.0 * macs * reps as f64 / bwd / 1e9
        );
    }
}
