use std::time::{Duration, Instant};

use elpips_core::convnet::{generate_tiny_weights, DropoutPlan, generate_weights, ArchitectureId, WeightContainer};
use elpips_core::corpus::{corpus, corpus_image, corpus_image_sized};
use elpips_core::geometry::{
    barycenter, crossfade, geodesic, hessian_vector_product, lambda_extremes, lambda_extremes_from, pixel_mean,
    spectrum_moments, BarycenterConfig, BarycenterInit, GeodesicConfig, GeodesicInit, HessianProbe,
};
use elpips_core::graph::{value_and_grad, Graph, Var};
use elpips_core::metric::{
    estimate, sample_distances, DiagonalQuadratic, ImageMetric, MetricConfig, Realization, SquaredL2, Wrt, L2,
};
use elpips_core::ops::Pads;
use elpips_core::optimize::{anchor_epsilon, attack_a1, attack_a2, noisy_anchor, AttackConfig, ANCHOR_SIGMA};
use elpips_core::transforms::{
    apply_transform, identity_params, transform_for, transform_graph, EnsembleConfig, TransformParams,
    CHANNEL_PERMUTATIONS,
};
use elpips_core::{Result, Tensor};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::reference::{self, dot, Img};
use super::{median, random_tensor, Check, TestRng};

// ------------------------------------------------------------ gradients ----

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-3;
pub const FD_MIN_GRAD: f64 = 1e-6;
/// Allowed relative gap between a reference forward value and the
/// library's 32-bit one.
pub const FORWARD_AGREEMENT: f64 = 1e-5;

/// Worst relative error between `grad` and central differences of the
/// double-precision `f` over `coords`, skipping coordinates whose gradient
/// is at most `FD_MIN_GRAD`.
pub fn fd_error(x: &Img, grad: &Tensor, coords: &[usize], f: &dyn Fn(&Img) -> f64) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for &i in coords {
        let an = grad.data()[i] as f64;
        if an.abs() <= FD_MIN_GRAD {
            continue;
        }
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.v[i] += FD_STEP;
        xm.v[i] -= FD_STEP;
        let fd = (f(&xp) - f(&xm)) / (2.0 * FD_STEP);
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()));
        checked += 1;
    }
    (worst, checked)
}

fn coords(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut r = TestRng::new(seed);
    (0..max).map(|_| r.below(n)).collect()
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Checks the gradient of `sum(op(x) ⊙ r)` for a fixed random `r` against
/// central differences of the reference `reference(x) · r`.
fn op_check<'a>(
    name: &str,
    x: &Tensor,
    op: impl Fn(&mut Graph<'a>, Var) -> Result<Var>,
    reference: impl Fn(&Img) -> Img,
) -> Check {
    let name = format!("gradient {name}");
    let objective = |g: &mut Graph<'a>, v: Var| -> Result<Var> {
        let y = op(g, v)?;
        let r = g.constant(random_tensor(g.shape(y), -1.0, 1.0, 0x5eed));
        let m = g.mul(y, r)?;
        Ok(g.reduce_sum(m))
    };
    let (value, grad) = match value_and_grad(x, |g, v| objective(g, v)) {
        Ok(v) => v,
        Err(e) => return Check::new(name, false, e),
    };
    let probe = reference(&Img::from_tensor(x));
    let r = random_tensor(&[probe.h, probe.w, probe.c], -1.0, 1.0, 0x5eed);
    let f = |t: &Img| dot(&reference(t), &r);
    let gap = relative_gap(f(&Img::from_tensor(x)), value);
    let (err, n) = fd_error(&Img::from_tensor(x), &grad, &coords(x.len(), 300, 9), &f);
    Check::new(
        name,
        n > 0 && err < FD_TOLERANCE && gap < FORWARD_AGREEMENT,
        format!("max rel err {err:.2e} over {n} coords, forward gap {gap:.1e}"),
    )
}

/// Uniform values kept at least `gap` away from zero, so ReLU kinks stay
/// outside the difference stencil.
fn away_from_zero(shape: &[usize], gap: f32, seed: u64) -> Tensor {
    random_tensor(shape, -1.0, 1.0, seed).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

pub fn gradient_suite() -> Vec<Check> {
    let x = random_tensor(&[6, 5, 3], 0.05, 0.95, 1);
    let c = random_tensor(&[6, 5, 3], -1.0, 1.0, 2);
    let ci = Img::from_tensor(&c);
    let kernel = random_tensor(&[3, 3, 3, 4], -0.5, 0.5, 3);
    let bias = random_tensor(&[4], -0.1, 0.1, 4);
    let mask = Tensor::from_fn(&[6, 5, 3], |i| if i % 7 == 3 { 0.0 } else { 1.0 });
    let wide = random_tensor(&[7, 9, 4], -1.0, 1.0, 5);
    let kinked = away_from_zero(&[6, 5, 3], 1e-2, 6);
    let cs = [0.3f32, -1.2, 2.0];
    let shift = [0.5f32, -0.25, 0.0];
    let zip = |a: &Img, b: &Img, f: fn(f64, f64) -> f64| {
        let mut o = a.clone();
        for (d, (u, v)) in o.v.iter_mut().zip(a.v.iter().zip(&b.v)) {
            *d = f(*u, *v);
        }
        o
    };
    let scalar = |v: f64| Img { h: 1, w: 1, c: 1, v: vec![v] };

    let mut out = vec![
        op_check(
            "add",
            &x,
            |g, v| {
                let k = g.constant(c.clone());
                g.add(v, k)
            },
            |t| zip(t, &ci, |a, b| a + b),
        ),
        op_check(
            "add (second operand)",
            &x,
            |g, v| {
                let k = g.constant(c.clone());
                g.add(k, v)
            },
            |t| zip(&ci, t, |a, b| a + b),
        ),
        op_check(
            "sub",
            &x,
            |g, v| {
                let k = g.constant(c.clone());
                g.sub(v, k)
            },
            |t| zip(t, &ci, |a, b| a - b),
        ),
        op_check(
            "sub (second operand)",
            &x,
            |g, v| {
                let k = g.constant(c.clone());
                g.sub(k, v)
            },
            |t| zip(&ci, t, |a, b| a - b),
        ),
        op_check(
            "mul",
            &x,
            |g, v| {
                let k = g.constant(c.clone());
                g.mul(v, k)
            },
            |t| zip(t, &ci, |a, b| a * b),
        ),
        op_check(
            "mul (second operand)",
            &x,
            |g, v| {
                let k = g.constant(c.clone());
                g.mul(k, v)
            },
            |t| zip(&ci, t, |a, b| a * b),
        ),
        op_check("mul (same operand twice)", &x, |g, v| g.mul(v, v), |t| zip(t, t, |a, b| a * b)),
        op_check("scale", &x, |g, v| Ok(g.scale(v, -1.7)), |t| t.map(|_, _, _, v| v * -1.7f32 as f64)),
        op_check(
            "conv2d_same",
            &x,
            |g, v| g.conv2d_same(v, &kernel, &bias),
            |t| reference::conv_same(t, &kernel, &bias),
        ),
        op_check("relu", &kinked, |g, v| Ok(g.relu(v)), reference::relu),
        op_check("avg_pool_2x2", &wide, |g, v| g.avg_pool_2x2(v), reference::avg_pool),
        op_check(
            "mirror_pad",
            &x,
            |g, v| g.mirror_pad(v, Pads::new(2, 1, 3, 4)),
            |t| reference::pad(t, 2, 1, 3, 4),
        ),
        op_check("downscale_box 2", &wide, |g, v| g.downscale_box(v, 2), |t| reference::downscale(t, 2)),
        op_check("downscale_box 3", &wide, |g, v| g.downscale_box(v, 3), |t| reference::downscale(t, 3)),
        op_check("flip_x", &x, |g, v| g.flip_x(v), reference::flip_x),
        op_check("flip_y", &x, |g, v| g.flip_y(v), reference::flip_y),
        op_check("swap_xy", &x, |g, v| g.swap_xy(v), reference::swap),
        op_check(
            "permute_channels",
            &x,
            |g, v| g.permute_channels(v, &[2, 0, 1]),
            |t| reference::permute(t, &[2, 0, 1]),
        ),
        op_check("channel_scale", &x, |g, v| g.channel_scale(v, &cs), |t| reference::channel_scale(t, &cs)),
        op_check(
            "channel_affine",
            &x,
            |g, v| g.channel_affine(v, &cs, &shift),
            |t| reference::channel_affine(t, &cs, &shift),
        ),
        op_check(
            "channel_l2_normalize",
            &wide,
            |g, v| g.channel_l2_normalize(v, 1e-10),
            |t| reference::normalize(t, 1e-10f32 as f64),
        ),
        op_check("dropout", &x, |g, v| g.dropout(v, &mask, 0.9), |t| reference::dropout(t, &mask, 0.9f32 as f64)),
        op_check("reduce_mean", &x, |g, v| Ok(g.reduce_mean(v)), |t| scalar(t.v.iter().sum::<f64>() / t.v.len() as f64)),
        op_check("reduce_sum", &x, |g, v| Ok(g.reduce_sum(v)), |t| scalar(t.v.iter().sum())),
    ];

    let img = random_tensor(&[20, 18, 3], 0.0, 1.0, 7);
    let p = TransformParams {
        dx: 3,
        dy: 5,
        flip_x: true,
        flip_y: false,
        swap_xy: true,
        col_perm: [1, 2, 0],
        brightness: [0.4, 0.9, 0.65],
        scale: 2,
        scale_dx: 1,
        scale_dy: 0,
    };
    out.push(op_check(
        "transform pipeline",
        &img,
        |g, v| transform_graph(g, v, &p),
        |t| reference::transform(t, &p),
    ));

    let w = generate_tiny_weights(0);
    out.push(net_check("tiny net plain distance", &MetricConfig::plain(&w), 16, 0));
    // A realization with a nontrivial downscale and every group active.
    let ens = MetricConfig::new(&w, EnsembleConfig::full());
    let index = (0..64)
        .find(|&i| {
            ens.transforms(32, 32, Realization::new(3, i))
                .is_some_and(|(p, _)| p.scale > 1 && p.col_perm != [0, 1, 2])
        })
        .expect("a scaled realization among the first 64");
    out.push(net_check("tiny net ensembled distance", &ens, 32, index));
    out
}

/// Step used where the `FD_STEP` stencil straddles a ReLU kink.
pub const KINK_STEP: f64 = 1e-7;
/// Largest share of checked coordinates allowed to straddle a kink.
pub const KINK_SHARE: f64 = 0.25;

struct NetFd {
    worst: f64,
    checked: usize,
    kinked: usize,
}

/// Like `fd_error` for a function with ReLU kinks. `f` also returns the
/// activation pattern; where `x ± FD_STEP` sees a different pattern from
/// `x` the quotient measures the kink rather than the gradient, so that
/// coordinate is differenced at `KINK_STEP` and counted.
fn net_fd(x: &Img, grad: &Tensor, coords: &[usize], f: &dyn Fn(&Img) -> (f64, Vec<bool>)) -> NetFd {
    let base = f(x).1;
    let mut out = NetFd { worst: 0.0, checked: 0, kinked: 0 };
    for &i in coords {
        let an = grad.data()[i] as f64;
        if an.abs() <= FD_MIN_GRAD {
            continue;
        }
        let diff = |h: f64| {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.v[i] += h;
            xm.v[i] -= h;
            let (p, m) = (f(&xp), f(&xm));
            ((p.0 - m.0) / (2.0 * h), p.1 == base && m.1 == base)
        };
        let (mut fd, smooth) = diff(FD_STEP);
        if !smooth {
            fd = diff(KINK_STEP).0;
            out.kinked += 1;
        }
        out.worst = out.worst.max((fd - an).abs() / fd.abs().max(an.abs()));
        out.checked += 1;
    }
    out
}

/// Reference distance for one realization of `m`.
fn reference_distance(m: &MetricConfig<'_>, x: &Img, y: &Img, r: Realization) -> f64 {
    reference_distance_and_pattern(m, x, y, r).0
}

fn reference_distance_and_pattern(m: &MetricConfig<'_>, x: &Img, y: &Img, r: Realization) -> (f64, Vec<bool>) {
    let (tx, ty) = match m.transforms(x.h, x.w, r) {
        Some((px, py)) => (reference::transform(x, &px), reference::transform(y, &py)),
        None => (x.clone(), y.clone()),
    };
    let plan = m.ensemble.dropout.then(|| DropoutPlan::new(r.seed, r.index));
    let (fx, mut pattern) = reference::features_and_pattern(&tx, m.weights, plan.as_ref());
    let (fy, py) = reference::features_and_pattern(&ty, m.weights, plan.as_ref());
    pattern.extend(py);
    (reference::feature_distance(&fx, &fy, m.weights, m.epsilon as f64), pattern)
}

/// Full distance pass through the tiny net, both arguments.
fn net_check(name: &str, m: &MetricConfig<'_>, n: usize, index: u64) -> Check {
    let name = format!("gradient {name}");
    let x = corpus_image_sized(1, n);
    let y = corpus_image_sized(4, n);
    let r = Realization::new(3, index);
    let g = match m.sample_grad(&x, &y, r, Wrt::Both) {
        Ok(g) => g,
        Err(e) => return Check::new(name, false, e),
    };
    let (xi, yi) = (Img::from_tensor(&x), Img::from_tensor(&y));
    let gap = relative_gap(reference_distance(m, &xi, &yi, r), g.value);
    let fx = |t: &Img| reference_distance_and_pattern(m, t, &yi, r);
    let fy = |t: &Img| reference_distance_and_pattern(m, &xi, t, r);
    let a = net_fd(&xi, g.first.as_ref().unwrap(), &coords(x.len(), 80, 11), &fx);
    let b = net_fd(&yi, g.second.as_ref().unwrap(), &coords(y.len(), 80, 12), &fy);
    let (err, checked, kinked) = (a.worst.max(b.worst), a.checked + b.checked, a.kinked + b.kinked);
    Check::new(
        name,
        a.checked > 0
            && b.checked > 0
            && err < FD_TOLERANCE
            && (kinked as f64) <= KINK_SHARE * checked as f64
            && gap < FORWARD_AGREEMENT,
        format!("max rel err {err:.2e} over {checked} coords ({kinked} across a kink), forward gap {gap:.1e}"),
    )
}

// --------------------------------------------------------- metric axioms ----

pub fn metric_axioms() -> Vec<Check> {
    let w = generate_tiny_weights(0);
    let full = MetricConfig::new(&w, EnsembleConfig::full());
    let plain = MetricConfig::plain(&w);
    let images = corpus();
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for (i, x) in images.iter().enumerate() {
        for k in 0..8 {
            let r = Realization::new(i as u64, k);
            worst = worst.max(full.sample(x, x, r).unwrap().abs()).max(plain.sample(x, x, r).unwrap().abs());
        }
    }
    out.push(Check::new("d(x, x) = 0 exactly", worst == 0.0, format!("largest |d(x, x)| = {worst:e}")));

    let mut asymmetric = 0;
    for i in 0..images.len() {
        for j in 0..images.len() {
            for k in 0..4 {
                let r = Realization::new(17, k);
                if full.sample(&images[i], &images[j], r).unwrap().to_bits()
                    != full.sample(&images[j], &images[i], r).unwrap().to_bits()
                {
                    asymmetric += 1;
                }
            }
        }
    }
    out.push(Check::new(
        "symmetry bit-exact under a shared realization",
        asymmetric == 0,
        format!("{asymmetric} of 100 ordered pairs differ"),
    ));

    let mut rng = TestRng::new(99);
    let mut negative = 0;
    let mut smallest = f64::INFINITY;
    for k in 0..1000u64 {
        let x = random_tensor(&[16, 16, 3], 0.0, 1.0, rng.next_u64());
        let y = if k % 2 == 0 {
            random_tensor(&[16, 16, 3], 0.0, 1.0, rng.next_u64())
        } else {
            noisy_anchor(&x, 0.01, k)
        };
        let d = full.sample(&x, &y, Realization::new(k, k)).unwrap();
        smallest = smallest.min(d);
        if d < 0.0 {
            negative += 1;
        }
    }
    out.push(Check::new(
        "non-negative over 1000 random pairs",
        negative == 0,
        format!("{negative} negative, smallest {smallest:.3e}"),
    ));

    let identity = MetricConfig::new(&w, EnsembleConfig::off().with_samples(8));
    let no_drop = w.with_keep_prob(1.0).unwrap();
    let dropout_only = MetricConfig::new(&no_drop, EnsembleConfig { dropout: true, ..EnsembleConfig::off() });
    let plain_one = MetricConfig::plain(&no_drop);
    let mut differing = 0;
    for i in 0..images.len() {
        let (x, y) = (&images[i], &images[(i + 2) % images.len()]);
        let want = plain.sample(x, y, Realization::new(0, 0)).unwrap().to_bits();
        let want_one = plain_one.sample(x, y, Realization::new(0, 0)).unwrap().to_bits();
        for k in 0..4 {
            let r = Realization::new(5, k);
            differing += (identity.sample(x, y, r).unwrap().to_bits() != want) as usize;
            differing += (dropout_only.sample(x, y, r).unwrap().to_bits() != want_one) as usize;
        }
        let est = estimate(&identity, x, y, 5, 8).unwrap();
        differing += (est.mean.to_bits() != want || est.stderr != 0.0) as usize;
    }
    out.push(Check::new(
        "identity ensemble equals the plain metric bit-exactly",
        differing == 0,
        format!("{differing} evaluations differ"),
    ));
    out
}

// ----------------------------------------------------------- transforms ----

/// Symmetric reflection into `0..n`, edge sample repeated.
fn mirror(p: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if p < 0 {
        -1 - p
    } else if p >= n {
        2 * n - 1 - p
    } else {
        p
    };
    assert!((0..n).contains(&r), "reflection out of range");
    r as usize
}

/// Scalar-loop transformation: every output pixel is traced back through
/// swap, flips, border and downscale to the source pixels it averages.
pub fn transform_by_loops(img: &[f32], h: usize, w: usize, p: &TransformParams) -> (usize, usize, Vec<f32>) {
    let s = p.scale;
    // Image after the phase shift of the downscale.
    let (ph, pw) = (h + p.scale_dy, w + p.scale_dx);
    let (dh, dw) = (ph.div_ceil(s), pw.div_ceil(s));
    let (bh, bw) = (dh + 7, dw + 7);
    let (oh, ow) = if p.swap_xy { (bw, bh) } else { (bh, bw) };
    let downscaled = |y: usize, x: usize, c: usize| -> f32 {
        if s == 1 {
            return img[(y * w + x) * 3 + c];
        }
        let mut acc = 0.0f64;
        for ky in 0..s {
            let sy = mirror(mirror((y * s + ky) as isize, ph) as isize - p.scale_dy as isize, h);
            for kx in 0..s {
                let sx = mirror(mirror((x * s + kx) as isize, pw) as isize - p.scale_dx as isize, w);
                acc += img[(sy * w + sx) * 3 + c] as f64;
            }
        }
        (acc / (s * s) as f64) as f32
    };
    let mut out = vec![0.0f32; oh * ow * 3];
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut y, mut x) = if p.swap_xy { (ox, oy) } else { (oy, ox) };
            if p.flip_y {
                y = bh - 1 - y;
            }
            if p.flip_x {
                x = bw - 1 - x;
            }
            let sy = mirror(y as isize - p.dy as isize, dh);
            let sx = mirror(x as isize - p.dx as isize, dw);
            for c in 0..3 {
                let v = downscaled(sy, sx, p.col_perm[c]);
                out[(oy * ow + ox) * 3 + c] = if p.brightness == [1.0; 3] { v } else { v * p.brightness[c] };
            }
        }
    }
    (oh, ow, out)
}

fn random_params(r: &mut TestRng) -> TransformParams {
    let scale = 1 + r.below(4);
    TransformParams {
        dx: r.below(8),
        dy: r.below(8),
        flip_x: r.below(2) == 1,
        flip_y: r.below(2) == 1,
        swap_xy: r.below(2) == 1,
        col_perm: CHANNEL_PERMUTATIONS[r.below(6)],
        brightness: [0; 3].map(|_| r.range(0.2, 1.0) as f32),
        scale,
        scale_dx: r.below(scale),
        scale_dy: r.below(scale),
    }
}

fn chi_square(name: &str, counts: &[u64], probs: &[f64]) -> Check {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e) * (o as f64 - e) / e
        })
        .sum();
    let critical = ChiSquared::new((counts.len() - 1) as f64).unwrap().inverse_cdf(1.0 - 1e-3);
    Check::new(
        format!("chi-square {name}"),
        stat < critical,
        format!("statistic {stat:.2}, critical {critical:.2} at 1e-3"),
    )
}

pub const TRANSFORM_SAMPLES: u64 = 100_000;

pub fn transform_suite() -> Vec<Check> {
    let mut out = Vec::new();

    // Scale law normalizer, summed directly.
    let z: f64 = (1..=8).map(|i| 1.0 / (i as f64 * i as f64)).sum();
    out.push(Check::new("scale law normalizer", (z - 1.527422).abs() < 1e-6, format!("Z = {z:.7}")));

    let cfg = EnsembleConfig::full();
    let mut dx = [0u64; 8];
    let mut dy = [0u64; 8];
    let mut flips = [[0u64; 2]; 3];
    let mut perm = [0u64; 6];
    let mut scale = [0u64; 8];
    let mut phase = [0u64; 4];
    let mut bright = [0u64; 10];
    for i in 0..TRANSFORM_SAMPLES {
        let p = transform_for(2024, i, 0, &cfg);
        dx[p.dx] += 1;
        dy[p.dy] += 1;
        flips[0][p.flip_x as usize] += 1;
        flips[1][p.flip_y as usize] += 1;
        flips[2][p.swap_xy as usize] += 1;
        perm[CHANNEL_PERMUTATIONS.iter().position(|q| *q == p.col_perm).unwrap()] += 1;
        scale[p.scale - 1] += 1;
        if p.scale == 4 {
            phase[p.scale_dx] += 1;
        }
        for b in p.brightness {
            bright[((b as f64 - 0.2) / 0.08).floor().clamp(0.0, 9.0) as usize] += 1;
        }
    }
    out.push(chi_square("offset x uniform on 0..=7", &dx, &[1.0 / 8.0; 8]));
    out.push(chi_square("offset y uniform on 0..=7", &dy, &[1.0 / 8.0; 8]));
    for (k, name) in ["flip x", "flip y", "axis swap"].iter().enumerate() {
        out.push(chi_square(&format!("{name} fair"), &flips[k], &[0.5; 2]));
    }
    out.push(chi_square("channel permutation uniform", &perm, &[1.0 / 6.0; 6]));
    let law: Vec<f64> = (1..=8).map(|i| 1.0 / (i as f64 * i as f64) / z).collect();
    out.push(chi_square("scale p(i) ∝ 1/i²", &scale, &law));
    out.push(chi_square("downscale phase uniform given scale 4", &phase, &[0.25; 4]));
    out.push(chi_square("brightness uniform on [0.2, 1]", &bright, &[0.1; 10]));

    let mut r = TestRng::new(31);
    let mut mismatches = 0;
    for k in 0..100 {
        let (h, w) = (32 + r.below(9), 32 + r.below(9));
        let img = random_tensor(&[h, w, 3], 0.0, 1.0, 1000 + k);
        let p = random_params(&mut r);
        let got = apply_transform(&img, &p).unwrap();
        let (oh, ow, want) = transform_by_loops(img.data(), h, w, &p);
        let same = got.shape() == [oh, ow, 3]
            && got.data().iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
        mismatches += !same as usize;
    }
    out.push(Check::new(
        "pipeline matches scalar loops bit-exactly on 100 parameter sets",
        mismatches == 0,
        format!("{mismatches} mismatching sets"),
    ));

    let img = corpus_image(2);
    let id = apply_transform(&img, &identity_params()).unwrap();
    let crop_ok = (0..32).all(|y| (0..32).all(|x| (0..3).all(|c| id.at(y, x, c) == img.at(y, x, c))));
    out.push(Check::new(
        "identity parameters only append the mirrored border",
        crop_ok && id.shape() == [39, 39, 3],
        format!("shape {:?}", id.shape()),
    ));

    let mut g = Graph::new();
    let v = g.constant(img.clone());
    let mut involutive = true;
    for (name, twice) in [
        ("flip x", {
            let a = g.flip_x(v).unwrap();
            g.flip_x(a).unwrap()
        }),
        ("flip y", {
            let a = g.flip_y(v).unwrap();
            g.flip_y(a).unwrap()
        }),
        ("swap", {
            let a = g.swap_xy(v).unwrap();
            g.swap_xy(a).unwrap()
        }),
        ("permutation and inverse", {
            let a = g.permute_channels(v, &[1, 2, 0]).unwrap();
            g.permute_channels(a, &[2, 0, 1]).unwrap()
        }),
    ] {
        if g.value(twice) != &img {
            involutive = false;
            eprintln!("{name} is not undone");
        }
    }
    out.push(Check::new("flips, swap and permutation are undone exactly", involutive, "applied twice"));

    let off = transform_for(5, 11, 0, &EnsembleConfig::off());
    out.push(Check::new("all groups disabled gives identity parameters", off.is_identity(), format!("{off:?}")));
    out
}

// ------------------------------------------------------------- geometry ----

pub fn geometry_oracles() -> Vec<Check> {
    let mut out = Vec::new();
    let (a, b) = (corpus_image(0), corpus_image(2));

    let cfg = GeodesicConfig {
        frames: 6,
        iterations: 5000,
        init: GeodesicInit::Noise,
        seed: 8,
        ..GeodesicConfig::default()
    };
    let res = geodesic(&a, &b, &L2, &cfg).unwrap();
    let fade = crossfade(&a, &b, cfg.frames + 1).unwrap();
    let dev = res.frames.iter().zip(&fade).map(|(u, v)| u.max_abs_diff(v)).fold(0.0f32, f32::max);
    out.push(Check::new(
        "L2 geodesic is the linear crossfade",
        dev < 1e-3,
        format!("max deviation {dev:.2e} (limit 1e-3)"),
    ));

    let images = [corpus_image(1), corpus_image(3), corpus_image(4)];
    let cfg = BarycenterConfig {
        iterations: 5000,
        init: BarycenterInit::Noise,
        seed: 4,
        ..BarycenterConfig::default()
    };
    let res = barycenter(&images, &L2, &cfg).unwrap();
    let dev = res.image.max_abs_diff(&pixel_mean(&images).unwrap());
    out.push(Check::new(
        "L2 barycenter is the pixel mean",
        dev < 1e-4,
        format!("max deviation {dev:.2e} (limit 1e-4)"),
    ));

    // diag(3, 1, …, 1): Hessian 2A has extremes 6 and 2.
    let anchor = random_tensor(&[4, 4, 3], 0.2, 0.8, 21);
    let spike = DiagonalQuadratic::new(Tensor::from_fn(&[4, 4, 3], |i| if i == 0 { 3.0 } else { 1.0 })).unwrap();
    let probe = HessianProbe::new(&anchor, &spike);
    let ext = lambda_extremes(&probe, 200).unwrap();
    let (hi, lo) = (ext.max.value, ext.min.value);
    out.push(Check::new(
        "crafted quadratic extremes 6 and 2",
        (hi / 6.0 - 1.0).abs() < 0.01 && (lo / 2.0 - 1.0).abs() < 0.01,
        format!("λmax {hi:.5}, λmin {lo:.5}"),
    ));
    let restarts: Vec<f64> =
        (0..5).map(|k| lambda_extremes_from(&probe, 200, k).unwrap().max.value).collect();
    let spread = restarts.iter().cloned().fold(f64::MIN, f64::max) / restarts.iter().cloned().fold(f64::MAX, f64::min);
    out.push(Check::new("λmax agrees across 5 restarts", spread - 1.0 < 0.02, format!("{restarts:.5?}")));

    let v = random_tensor(&[4, 4, 3], -1.0, 1.0, 22);
    let hv = hessian_vector_product(&probe, &v).unwrap();
    let want = Tensor::from_fn(&[4, 4, 3], |i| 2.0 * if i == 0 { 3.0 } else { 1.0 } * v.data()[i]);
    let rel = hv.dist(&want) / want.norm();
    out.push(Check::new("Hv = 2Av on the crafted quadratic", rel < 0.01, format!("relative error {rel:.2e}")));

    // Spectrum {2, 4, 6, 8} equally weighted.
    let quad = DiagonalQuadratic::new(Tensor::from_fn(&[4, 4, 3], |i| (1 + i % 4) as f32)).unwrap();
    let probe = HessianProbe::new(&anchor, &quad);
    let s = spectrum_moments(&probe, 300, 64).unwrap();
    let within = |got: f64, want: f64| (got - want).abs() <= 0.1 * want.abs().max(1.0);
    out.push(Check::new(
        "crafted spectrum moments",
        within(s.mean, 5.0) && within(s.variance, 5.0) && within(s.skewness, 0.0) && within(s.kurtosis, 1.64),
        format!(
            "mean {:.4}, variance {:.4}, skewness {:.4}, kurtosis {:.4} (want 5, 5, 0, 1.64)",
            s.mean, s.variance, s.skewness, s.kurtosis
        ),
    ));
    out.push(Check::new(
        "crafted spectrum extremes 8 and 2",
        (s.lambda_max / 8.0 - 1.0).abs() < 0.01 && (s.lambda_min / 2.0 - 1.0).abs() < 0.01,
        format!("λmax {:.5}, λmin {:.5}", s.lambda_max, s.lambda_min),
    ));

    let probe = HessianProbe { step: 1e-2, ..HessianProbe::new(&anchor, &SquaredL2) };
    let ext = lambda_extremes(&probe, 50).unwrap();
    out.push(Check::new(
        "squared L2 Hessian is 2I",
        (ext.max.value - 2.0).abs() < 0.02 && (ext.min.value - 2.0).abs() < 0.02,
        format!("λmax {:.5}, λmin {:.5}", ext.max.value, ext.min.value),
    ));
    out
}

// ---------------------------------------------------------- Monte Carlo ----

pub fn monte_carlo() -> Vec<Check> {
    let w = generate_tiny_weights(0);
    let m = MetricConfig::new(&w, EnsembleConfig::full());
    let (x, y) = (corpus_image(1), corpus_image(4));
    let long = sample_distances(&m, &x, &y, 77, 256).unwrap();
    let short = sample_distances(&m, &x, &y, 77, 64).unwrap();
    let prefix_ok = short.iter().zip(&long).all(|(a, b)| a.to_bits() == b.to_bits());
    let e64 = estimate(&m, &x, &y, 77, 64).unwrap();
    let e256 = estimate(&m, &x, &y, 77, 256).unwrap();
    let ratio = e256.stderr / e64.stderr;

    // Independent reduction of the same samples.
    let mean: f64 = long.iter().sum::<f64>() / 256.0;
    let var: f64 = long.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 255.0;
    let stderr = (var / 256.0).sqrt();
    let same = estimate(&m, &x, &x, 77, 64).unwrap();
    vec![
        Check::new(
            "stderr shrinks like 1/√N",
            ratio <= 0.65,
            format!("stderr {:.3e} at 256, {:.3e} at 64, ratio {ratio:.3} (limit 0.65)", e256.stderr, e64.stderr),
        ),
        Check::new("growing N keeps earlier samples", prefix_ok, "64-sample prefix of the 256-sample run"),
        Check::new(
            "estimate matches an independent mean and stderr",
            (e256.mean - mean).abs() <= 1e-12 * mean && (e256.stderr - stderr).abs() <= 1e-9 * stderr,
            format!("mean {:.6} vs {mean:.6}", e256.mean),
        ),
        Check::new(
            "identical images give 0 ± 0",
            same.mean == 0.0 && same.stderr == 0.0,
            format!("{} ± {}", same.mean, same.stderr),
        ),
    ]
}

// ---------------------------------------------------------- performance ----

pub fn time_mean(metric: &dyn ImageMetric, x: &Tensor, y: &Tensor, indices: std::ops::Range<u64>) -> Duration {
    let n = indices.end - indices.start;
    let t = Instant::now();
    for i in indices {
        metric.sample(x, y, Realization::new(0, i)).unwrap();
    }
    t.elapsed() / n as u32
}

pub const BENCH_SIZE: usize = 256;
pub const BENCH_LIMIT: f64 = 1.5;

/// Plain and ensembled single evaluations on vgg16 at 256×256.
pub fn performance(weights: &WeightContainer, repeats: u64) -> Check {
    assert_eq!(weights.architecture().id(), ArchitectureId::Vgg16);
    let x = corpus_image_sized(0, BENCH_SIZE);
    let y = noisy_anchor(&x, 0.05, 1);
    let plain = MetricConfig::plain(weights);
    let ens = MetricConfig::new(weights, EnsembleConfig::full());
    time_mean(&plain, &x, &y, 0..1);
    let tp = time_mean(&plain, &x, &y, 0..repeats);
    let te = time_mean(&ens, &x, &y, 0..repeats);
    let ratio = te.as_secs_f64() / tp.as_secs_f64();
    Check::new(
        "ensembled evaluation within 1.5× of plain (vgg16, 256×256)",
        ratio <= BENCH_LIMIT,
        format!("plain {:.0} ms, ensembled {:.0} ms, ratio {ratio:.3}", tp.as_secs_f64() * 1e3, te.as_secs_f64() * 1e3),
    )
}

pub fn vgg16() -> WeightContainer {
    generate_weights(ArchitectureId::Vgg16, 0)
}

// ----------------------------------------------------------- robustness ----

pub const ATTACK_BUDGET: usize = 300;
pub const ATTACK_SAMPLES: usize = 16;
pub const ATTACK_SEED: u64 = 7;
pub const ANCHOR_SEED: u64 = 1;

pub struct RungResult {
    pub name: &'static str,
    pub escape: Vec<f64>,
    pub feasible: Vec<bool>,
    /// A2 distance over the mean corpus distance, when run.
    pub a2: Option<Vec<f64>>,
    pub elapsed: Duration,
}

fn attack_config() -> AttackConfig {
    AttackConfig {
        budget: ATTACK_BUDGET,
        samples_per_step: ATTACK_SAMPLES,
        seed: ATTACK_SEED,
        ..AttackConfig::default()
    }
}

/// A1 (and optionally A2) over the corpus for one metric. Image `i` is
/// attacked toward image `i + 1`.
pub fn run_rung(name: &'static str, metric: &dyn ImageMetric, with_a2: bool) -> RungResult {
    let started = Instant::now();
    let c = corpus();
    let cfg = attack_config();
    let mut escape = Vec::new();
    let mut feasible = Vec::new();
    let mut a2 = Vec::new();
    let scale = if with_a2 {
        let mut total = 0.0;
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                total += estimate(metric, &c[i], &c[j], ANCHOR_SEED, 300).unwrap().mean;
            }
        }
        total / 10.0
    } else {
        1.0
    };
    for i in 0..c.len() {
        let (a, b) = (&c[i], &c[(i + 1) % c.len()]);
        let (eps, noisy) = anchor_epsilon(a, ANCHOR_SIGMA, metric, ANCHOR_SEED, 300).unwrap();
        let r = attack_a1(a, b, metric, eps.mean, &cfg).unwrap();
        escape.push(r.escape_ratio(a, &noisy));
        feasible.push(r.feasible);
        if with_a2 {
            let r = attack_a2(a, metric, noisy.sq_dist(a), &cfg).unwrap();
            a2.push(r.distance.mean / scale);
        }
    }
    RungResult {
        name,
        escape,
        feasible,
        a2: with_a2.then_some(a2),
        elapsed: started.elapsed(),
    }
}

/// The cumulative ablation ladder on the tiny net. The first rung is the
/// plain metric and the last the full 16-sample ensemble, which also
/// carry A2.
pub fn ablation_ladder() -> Vec<RungResult> {
    let w = generate_tiny_weights(0);
    let ladder = EnsembleConfig::ablation_ladder();
    let last = ladder.len() - 1;
    ladder
        .iter()
        .enumerate()
        .map(|(k, (name, cfg))| run_rung(name, &MetricConfig::new(&w, *cfg), k == 0 || k == last))
        .collect()
}

pub fn robustness_checks(rungs: &[RungResult]) -> Vec<Check> {
    let (plain, full) = (&rungs[0], &rungs[rungs.len() - 1]);
    let (p1, e1) = (median(plain.escape.clone()), median(full.escape.clone()));
    let (p2, e2) = (
        median(plain.a2.clone().expect("A2 on the plain rung")),
        median(full.a2.clone().expect("A2 on the full rung")),
    );
    vec![
        Check::new(
            "A1 median escape ratio, plain ≥ 2× ensembled",
            p1 >= 2.0 * e1,
            format!("plain {p1:.3}, ensembled {e1:.3}, factor {:.2}", p1 / e1),
        ),
        Check::new(
            "A2 median achieved distance, plain ≥ 2× ensembled",
            p2 >= 2.0 * e2,
            format!("plain {p2:.4}, ensembled {e2:.4} (corpus-mean units), factor {:.2}", p2 / e2),
        ),
    ]
}

pub fn ablation_check(rungs: &[RungResult]) -> Check {
    let medians: Vec<f64> = rungs.iter().map(|r| median(r.escape.clone())).collect();
    let ok = medians.windows(2).all(|w| w[1] <= w[0]);
    let detail: Vec<String> = rungs.iter().zip(&medians).map(|(r, m)| format!("{} {m:.3}", r.name)).collect();
    Check::new("A1 median escape ratio non-increasing along the ablation ladder", ok, detail.join(", "))
}
