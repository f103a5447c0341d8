//! Plain-loop reference implementations shared by the integration tests.
//! Nothing here calls into the library's kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Proptest settings without on-disk failure persistence.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases: n,
        failure_persistence: None,
        ..Default::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller keeps the oracle side free of rand_distr
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Grouped cross-correlation with zero padding. Taps that fall in the
/// padding are skipped; the bias is added after the window sum.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    (c_in, h, wd): (usize, usize, usize),
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let cin_g = c_in / groups;
    let cout_g = c_out / groups;
    let mut out = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        let g = co / cout_g;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..cin_g {
                    let cx = g * cin_g + ci;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let wv = w[((co * cin_g + ci) * k + ky) * k + kx];
                            acc += wv * x[(cx * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b[co];
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (out, ho, wo)
}

/// 2×2 stride-2 transposed convolution as an explicit scatter-add.
/// `w` is laid out `c_in × c_out × 2 × 2`.
pub fn conv_transpose2x2(x: &[f64], w: &[f64], (c_in, h, wd): (usize, usize, usize), c_out: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * wd);
    let mut out = vec![0.0; c_out * ho * wo];
    for ci in 0..c_in {
        for y in 0..h {
            for xx in 0..wd {
                let v = x[(ci * h + y) * wd + xx];
                for co in 0..c_out {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            out[(co * ho + 2 * y + ky) * wo + 2 * xx + kx] += v * w[((ci * c_out + co) * 2 + ky) * 2 + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// erf by its Maclaurin series, summed until terms vanish. Cancellation
/// limits it to roughly |x| ≤ 2.5 at 1e-12.
pub fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x;
    let mut n = 0u32;
    while term.abs() > 1e-18 || n < 3 {
        sum += term / f64::from(2 * n + 1);
        n += 1;
        term *= -x * x / f64::from(n);
        if n > 200 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn layer_norm(x: &[f64], n: usize, d: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        for j in 0..d {
            out[r * d + j] = (row[j] - mu) / (var + eps).sqrt() * gamma[j] + beta[j];
        }
    }
    out
}

/// Dense multi-head attention on already projected `n × d` inputs.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, heads: usize) -> Vec<f64> {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..hd).map(|c| q[i * d + h * hd + c] * k[j * d + h * hd + c]).sum::<f64>() * scale)
                .collect();
            let p = softmax(&scores);
            for c in 0..hd {
                out[i * d + h * hd + c] = (0..n).map(|j| p[j] * v[j * d + h * hd + c]).sum();
            }
        }
    }
    out
}

pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = matmul(x, w, n, d_in, d_out);
    if let Some(b) = b {
        for r in 0..n {
            for j in 0..d_out {
                y[r * d_out + j] += b[j];
            }
        }
    }
    y
}

/// `C×H×W` to `(H·W)×C`.
pub fn tokens(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut t = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            t[p * c + ch] = x[ch * hw + p];
        }
    }
    t
}

/// `(H·W)×C` to `C×H×W`.
pub fn untokens(t: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            x[ch * hw + p] = t[p * c + ch];
        }
    }
    x
}

/// Intersection, |P| and |G| by a pixel-by-pixel scan of `h × w` masks.
pub fn confusion_counts_oracle(p: &[u8], g: &[u8], h: usize, w: usize) -> (u64, u64, u64) {
    let (mut inter, mut np, mut ng) = (0u64, 0u64, 0u64);
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (p[y * w + x], g[y * w + x]);
            if a == 1 {
                np += 1;
            }
            if b == 1 {
                ng += 1;
            }
            if a == 1 && b == 1 {
                inter += 1;
            }
        }
    }
    (inter, np, ng)
}

/// BCE-Dice evaluated directly from its definition, one image per row.
pub fn bce_dice(p: &[f64], y: &[f64], rows: usize, cols: usize, eps: f64) -> f64 {
    let mut dice = 0.0;
    let mut bce = 0.0;
    for r in 0..rows {
        let (pr, yr) = (&p[r * cols..(r + 1) * cols], &y[r * cols..(r + 1) * cols]);
        let inter: f64 = pr.iter().zip(yr).map(|(a, b)| a * b).sum();
        let sy: f64 = yr.iter().sum();
        let sp: f64 = pr.iter().sum();
        dice += 1.0 - 2.0 * inter / (sy + sp + eps);
        for (&pv, &yv) in pr.iter().zip(yr) {
            let pc = pv.clamp(1e-7, 1.0 - 1e-7);
            bce -= yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln();
        }
    }
    dice / rows as f64 + bce / (rows * cols) as f64
}
