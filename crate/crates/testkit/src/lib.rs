//! Deliberately naive reference implementations.
//!
//! Everything here works on plain `f64` slices with explicit loops and shares
//! no code with the library kernels it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NaiveConv {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub reflect: bool,
}

/// Direct six-nested-loop convolution. Returns `(data, [B, Cout, OH, OW])`.
pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    cfg: NaiveConv,
) -> (Vec<f64>, [usize; 4]) {
    let [b, cin, h, wd] = xs;
    let [cout, cin_g, kh, kw] = ws;
    assert_eq!(cin_g * cfg.groups, cin);
    let cout_g = cout / cfg.groups;
    let oh = (h + 2 * cfg.pad - kh) / cfg.stride + 1;
    let ow = (wd + 2 * cfg.pad - kw) / cfg.stride + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for co in 0..cout {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[co]);
                    for ci in 0..cin_g {
                        let c = grp * cin_g + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * cfg.stride + ky) as i64 - cfg.pad as i64;
                                let ix = (ox * cfg.stride + kx) as i64 - cfg.pad as i64;
                                let (iy, ix) = if cfg.reflect {
                                    (reflect(iy, h), reflect(ix, wd))
                                } else if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                } else {
                                    (iy as usize, ix as usize)
                                };
                                acc += x[((n * cin + c) * h + iy) * wd + ix]
                                    * w[((co * cin_g + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((n * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [b, cout, oh, ow])
}

/// Scatter form of a transposed convolution; `w` is `Cin × Cout × kh × kw`.
pub fn conv_transpose2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, cin, h, wd] = xs;
    let [cin2, cout, kh, kw] = ws;
    assert_eq!(cin, cin2);
    let oh = (h - 1) * stride + kh + output_padding - 2 * pad;
    let ow = (wd - 1) * stride + kw + output_padding - 2 * pad;
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x[((n * cin + ci) * h + iy) * wd + ix];
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as i64 - pad as i64;
                                let ox = (ix * stride + kx) as i64 - pad as i64;
                                if oy < 0 || ox < 0 || oy >= oh as i64 || ox >= ow as i64 {
                                    continue;
                                }
                                out[((n * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                    v * w[((ci * cout + co) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [b, cout, oh, ow])
}

/// Triple-loop batched product `[B, M, K] × [B, K, N]`.
pub fn batched_matmul(a: &[f64], b: &[f64], bs: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; bs * m * n];
    for t in 0..bs {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[(t * m + i) * k + p] * b[(t * k + p) * n + j];
                }
                out[(t * m + i) * n + j] = acc;
            }
        }
    }
    out
}

/// Window-loop average pooling by `k`, reflect-padding the bottom/right edge
/// up to the next multiple of `k`. Returns `(data, OH, OW)`.
pub fn avg_pool(x: &[f64], xs: [usize; 4], k: usize) -> (Vec<f64>, usize, usize) {
    let [b, c, h, w] = xs;
    let oh = h.div_ceil(k);
    let ow = w.div_ceil(k);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        let iy = reflect((oy * k + dy) as i64, h);
                        let ix = reflect((ox * k + dx) as i64, w);
                        acc += x[(p * h + iy) * w + ix];
                    }
                }
                out.push(acc / (k * k) as f64);
            }
        }
    }
    (out, oh, ow)
}

/// Per-channel spatial mean.
pub fn channel_means(x: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [b, c, h, w] = xs;
    (0..b * c)
        .map(|p| x[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect()
}

/// Pool by `k`, flatten spatially, multiply by own transpose: `B × C × C`.
pub fn affinity(x: &[f64], xs: [usize; 4], k: usize) -> Vec<f64> {
    let [b, c, _, _] = xs;
    let (pooled, oh, ow) = avg_pool(x, xs, k);
    let n = oh * ow;
    let mut out = vec![0.0; b * c * c];
    for t in 0..b {
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for p in 0..n {
                    acc += pooled[(t * c + i) * n + p] * pooled[(t * c + j) * n + p];
                }
                out[(t * c + i) * c + j] = acc;
            }
        }
    }
    out
}

/// `Σ p log(p/q)` for one pair of distributions.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// One output sample of a bicubic resize evaluated as a full 2-D sum over
/// every input pixel (no separability), with the kernel stretched by the
/// downscale factor and weights normalised per output sample.
pub fn bicubic_sample(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize, oy: usize, ox: usize) -> f64 {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let support_y = sy.max(1.0);
    let support_x = sx.max(1.0);
    let cy = (oy as f64 + 0.5) * sy - 0.5;
    let cx = (ox as f64 + 0.5) * sx - 0.5;
    let lo_y = (cy - 2.0 * support_y).floor() as i64;
    let hi_y = (cy + 2.0 * support_y).ceil() as i64;
    let lo_x = (cx - 2.0 * support_x).floor() as i64;
    let hi_x = (cx + 2.0 * support_x).ceil() as i64;
    let mut acc = 0.0;
    let mut norm = 0.0;
    for iy in lo_y..=hi_y {
        let wy = cubic((iy as f64 - cy) / support_y);
        if wy == 0.0 {
            continue;
        }
        for ix in lo_x..=hi_x {
            let wx = cubic((ix as f64 - cx) / support_x);
            if wx == 0.0 {
                continue;
            }
            let v = plane[reflect(iy, h) * w + reflect(ix, w)];
            acc += wy * wx * v;
            norm += wy * wx;
        }
    }
    acc / norm
}

/// Eigenvalues of a symmetric `n × n` row-major matrix by cyclic Jacobi
/// rotations, ascending.
pub fn symmetric_eigenvalues(m: &[f64], n: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}
