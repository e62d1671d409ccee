//! Small procedural image corpus for sweeps and tests.

use alloc::vec::Vec;

use crate::rng::{CounterRng, Domain};
use crate::tensor::Tensor;

pub const CORPUS_SIZE: usize = 32;
pub const CORPUS_NAMES: [&str; 5] = ["disc", "stripes", "checker", "blobs", "clouds"];

fn sin(x: f64) -> f64 {
    libm::sin(x)
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn disc(n: usize) -> Tensor {
    let c = (n as f64 - 1.0) / 2.0;
    Tensor::from_hwc_fn(n, n, 3, |y, x, ch| {
        let (fy, fx) = (y as f64 / n as f64, x as f64 / n as f64);
        let r = libm::hypot(y as f64 - c * 0.9, x as f64 - c * 1.1) / n as f64;
        let inside = 1.0 - smoothstep((r - 0.28) / 0.04);
        let bg = [0.15 + 0.6 * fx, 0.3 + 0.4 * fy, 0.7 - 0.5 * fx * fy][ch];
        let fg = [0.9, 0.55 + 0.3 * sin(8.0 * fx), 0.2][ch];
        (bg * (1.0 - inside) + fg * inside) as f32
    })
}

fn stripes(n: usize) -> Tensor {
    Tensor::from_hwc_fn(n, n, 3, |y, x, ch| {
        let (fy, fx) = (y as f64, x as f64);
        let s = sin(0.55 * fx + 0.3 * fy);
        let t = sin(0.21 * fx - 0.4 * fy + 1.0);
        let v = [0.5 + 0.35 * s, 0.5 + 0.25 * t, 0.45 + 0.2 * s * t][ch];
        v as f32
    })
}

fn checker(n: usize) -> Tensor {
    let cell = 6.0;
    Tensor::from_hwc_fn(n, n, 3, |y, x, ch| {
        let u = sin(core::f64::consts::PI * x as f64 / cell);
        let v = sin(core::f64::consts::PI * y as f64 / cell);
        let k = 0.5 + 0.5 * (3.0 * u * v).clamp(-1.0, 1.0);
        let lo = [0.1, 0.2, 0.35][ch];
        let hi = [0.85, 0.8, 0.6][ch];
        (lo + (hi - lo) * k) as f32
    })
}

fn blobs(n: usize, seed: u64) -> Tensor {
    let mut rng = CounterRng::new(seed, Domain::Corpus, 3, 0);
    let params: Vec<[f64; 6]> = (0..7)
        .map(|_| {
            [
                rng.uniform() * n as f64,
                rng.uniform() * n as f64,
                2.0 + rng.uniform() * 6.0,
                rng.uniform(),
                rng.uniform(),
                rng.uniform(),
            ]
        })
        .collect();
    Tensor::from_hwc_fn(n, n, 3, |y, x, ch| {
        let mut v = 0.2;
        for p in &params {
            let (dy, dx) = (y as f64 - p[0], x as f64 - p[1]);
            let d2 = dy * dy + dx * dx;
            v += 0.6 * (p[3 + ch] - 0.3) * libm::exp(-d2 / (2.0 * p[2] * p[2]));
        }
        v.clamp(0.0, 1.0) as f32
    })
}

fn clouds(n: usize, seed: u64) -> Tensor {
    let mut rng = CounterRng::new(seed, Domain::Corpus, 4, 0);
    // Value noise: three octaves of bilinearly interpolated lattices.
    let octaves: Vec<(usize, Vec<[f64; 3]>)> = [4usize, 8, 16]
        .iter()
        .map(|&g| {
            let pts = (0..(g + 1) * (g + 1)).map(|_| [rng.uniform(), rng.uniform(), rng.uniform()]).collect();
            (g, pts)
        })
        .collect();
    Tensor::from_hwc_fn(n, n, 3, |y, x, ch| {
        let mut v = 0.0;
        let mut amp = 0.55;
        for (g, pts) in &octaves {
            let fy = y as f64 * *g as f64 / n as f64;
            let fx = x as f64 * *g as f64 / n as f64;
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |yy: usize, xx: usize| pts[yy * (g + 1) + xx][ch];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            v += amp * (top * (1.0 - ty) + bot * ty);
            amp *= 0.5;
        }
        (v / 0.9625).clamp(0.0, 1.0) as f32
    })
}

/// Corpus image `i` (0..5) at `CORPUS_SIZE`×`CORPUS_SIZE`.
pub fn corpus_image(i: usize) -> Tensor {
    corpus_image_sized(i, CORPUS_SIZE)
}

pub fn corpus_image_sized(i: usize, n: usize) -> Tensor {
    const SEED: u64 = 20180411;
    match i % CORPUS_NAMES.len() {
        0 => disc(n),
        1 => stripes(n),
        2 => checker(n),
        3 => blobs(n, SEED),
        _ => clouds(n, SEED),
    }
}

pub fn corpus() -> Vec<Tensor> {
    (0..CORPUS_NAMES.len()).map(corpus_image).collect()
}
