//! Barycenters, discrete geodesics and the local Hessian spectrum of a
//! metric.
//!
//! Barycenters and geodesics run Adam over pixels with a cosine-decayed
//! learning rate, one or more fresh realizations per step. Hessian probes
//! difference analytic gradients of `f(v) = d(x₀, x₀ + v)` with the
//! realizations frozen, so every probe sees one smooth sample function.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::metric::{ImageMetric, Realization, Wrt};
use crate::optimize::AdamState;
use crate::rng::{CounterRng, Domain};
use crate::tensor::{pairwise_sum, Tensor};

/// Learning rate at step `t` of `total`: cosine decay from `lr` to zero.
pub fn cosine_lr(lr: f64, t: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    0.5 * lr * (1.0 + libm::cos(core::f64::consts::PI * t as f64 / total as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BarycenterInit {
    Mean,
    Noise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarycenterConfig {
    pub iterations: usize,
    pub lr: f64,
    pub samples_per_step: usize,
    pub seed: u64,
    pub init: BarycenterInit,
}

impl Default for BarycenterConfig {
    fn default() -> Self {
        BarycenterConfig {
            iterations: 5000,
            lr: 0.02,
            samples_per_step: 1,
            seed: 0,
            init: BarycenterInit::Mean,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BarycenterResult {
    pub image: Tensor,
    /// Per-step single-realization objective `Σᵢ d(x, nᵢ)²`.
    pub trace: Vec<f64>,
}

pub fn pixel_mean(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::contract("pixel_mean", "no images"))?;
    for t in images {
        first.expect_same_shape(t, "pixel_mean")?;
    }
    let n = images.len() as f64;
    Ok(Tensor::from_fn(first.shape(), |i| {
        (images.iter().map(|t| t.data()[i] as f64).sum::<f64>() / n) as f32
    }))
}

fn uniform_noise(shape: &[usize], seed: u64, lane: u64) -> Tensor {
    let mut rng = CounterRng::new(seed, Domain::FrameInit, lane, 0);
    Tensor::from_fn(shape, |_| rng.uniform() as f32)
}

fn check_finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Minimizes `Σᵢ d(x, nᵢ)²` over pixels in `[0, 1]`. All inputs share the
/// realization of each step.
pub fn barycenter(images: &[Tensor], metric: &dyn ImageMetric, cfg: &BarycenterConfig) -> Result<BarycenterResult> {
    if images.len() < 2 {
        return Err(Error::contract("barycenter", format!("need at least 2 images, got {}", images.len())));
    }
    if cfg.samples_per_step == 0 || !(cfg.lr > 0.0) {
        return Err(Error::contract("barycenter", "samples per step and learning rate must be positive"));
    }
    let mean = pixel_mean(images)?;
    let mut x = match cfg.init {
        BarycenterInit::Mean => mean,
        BarycenterInit::Noise => uniform_noise(mean.shape(), cfg.seed, 0),
    };
    let mut adam = AdamState::new(x.shape(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let k = cfg.samples_per_step;
    let inv_k = 1.0 / k as f32;
    for it in 0..cfg.iterations {
        let mut grad = Tensor::zeros(x.shape());
        let mut values = Vec::with_capacity(k * images.len());
        for s in 0..k {
            let r = Realization::new(cfg.seed, (it * k + s) as u64);
            for n in images {
                let g = metric.sample_grad(&x, n, r, Wrt::First)?;
                values.push(g.value * g.value);
                grad.axpy(2.0 * g.value as f32 * inv_k, &g.first.expect("requested"));
            }
        }
        trace.push(check_finite(pairwise_sum(&values) / k as f64, "barycenter objective")?);
        adam.lr = cosine_lr(cfg.lr, it, cfg.iterations);
        adam.step(&mut x, &grad)?;
        x.clamp_in_place(0.0, 1.0);
    }
    Ok(BarycenterResult { image: x, trace })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeodesicInit {
    Noise,
    Crossfade,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicConfig {
    /// Free frames between the two endpoints.
    pub frames: usize,
    pub iterations: usize,
    pub lr: f64,
    pub samples_per_step: usize,
    pub seed: u64,
    pub init: GeodesicInit,
    /// Steps between evaluations of the path energy at a fixed seed; 0
    /// disables them.
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        GeodesicConfig {
            frames: 8,
            iterations: 5000,
            lr: 0.02,
            samples_per_step: 1,
            seed: 0,
            init: GeodesicInit::Noise,
            eval_every: 100,
            eval_samples: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeodesicResult {
    /// All frames including both endpoints.
    pub frames: Vec<Tensor>,
    /// Per-step single-realization path energy.
    pub trace: Vec<f64>,
    /// `(step, energy)` at a fixed evaluation seed.
    pub evaluations: Vec<(usize, f64)>,
}

/// `a + (i/n)(b − a)` for `i = 0..=n`.
pub fn crossfade(a: &Tensor, b: &Tensor, segments: usize) -> Result<Vec<Tensor>> {
    a.expect_same_shape(b, "crossfade")?;
    Ok((0..=segments)
        .map(|i| {
            let t = i as f64 / segments as f64;
            a.zip_map(b, |x, y| (x as f64 + t * (y as f64 - x as f64)) as f32).expect("same shape")
        })
        .collect())
}

/// `Σᵢ d(xᵢ, xᵢ₊₁)²` averaged over realizations `0..n` of `seed`.
pub fn path_energy(frames: &[Tensor], metric: &dyn ImageMetric, seed: u64, n: usize) -> Result<f64> {
    let n = if metric.is_stochastic() { n.max(1) } else { 1 };
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let r = Realization::new(seed, i);
        let mut seg = Vec::with_capacity(frames.len());
        for w in frames.windows(2) {
            let d = metric.sample(&w[0], &w[1], r)?;
            seg.push(d * d);
        }
        per_sample.push(pairwise_sum(&seg));
    }
    Ok(pairwise_sum(&per_sample) / n as f64)
}

/// Jointly optimizes the free frames of a path from `a` to `b` to minimize
/// the sum of squared distances between neighbours.
pub fn geodesic(a: &Tensor, b: &Tensor, metric: &dyn ImageMetric, cfg: &GeodesicConfig) -> Result<GeodesicResult> {
    a.expect_same_shape(b, "geodesic")?;
    if cfg.frames == 0 || cfg.samples_per_step == 0 || !(cfg.lr > 0.0) {
        return Err(Error::contract("geodesic", "frames, samples per step and learning rate must be positive"));
    }
    let segments = cfg.frames + 1;
    let mut frames = match cfg.init {
        GeodesicInit::Crossfade => crossfade(a, b, segments)?,
        GeodesicInit::Noise => {
            let mut f = Vec::with_capacity(segments + 1);
            f.push(a.clone());
            f.extend((0..cfg.frames).map(|i| uniform_noise(a.shape(), cfg.seed, i as u64)));
            f.push(b.clone());
            f
        }
    };
    let mut adams: Vec<AdamState> = (0..cfg.frames).map(|_| AdamState::new(a.shape(), cfg.lr)).collect();
    let eval_seed = crate::optimize::evaluation_seed(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut evaluations = Vec::new();
    let k = cfg.samples_per_step;
    let inv_k = 1.0 / k as f32;

    for it in 0..cfg.iterations {
        if cfg.eval_every > 0 && it % cfg.eval_every == 0 {
            evaluations.push((it, path_energy(&frames, metric, eval_seed, cfg.eval_samples)?));
        }
        let mut grads: Vec<Tensor> = (0..cfg.frames).map(|_| Tensor::zeros(a.shape())).collect();
        let mut values = Vec::with_capacity(k * segments);
        for s in 0..k {
            let r = Realization::new(cfg.seed, (it * k + s) as u64);
            for j in 0..segments {
                // Endpoints are fixed, so only differentiate free frames.
                let wrt = match (j == 0, j + 1 == segments) {
                    (true, true) => unreachable!("at least one free frame"),
                    (true, false) => Wrt::Second,
                    (false, true) => Wrt::First,
                    (false, false) => Wrt::Both,
                };
                let g = metric.sample_grad(&frames[j], &frames[j + 1], r, wrt)?;
                values.push(g.value * g.value);
                let w = 2.0 * g.value as f32 * inv_k;
                if let Some(g1) = &g.first {
                    grads[j - 1].axpy(w, g1);
                }
                if let Some(g2) = &g.second {
                    grads[j].axpy(w, g2);
                }
            }
        }
        trace.push(check_finite(pairwise_sum(&values) / k as f64, "geodesic objective")?);
        let lr = cosine_lr(cfg.lr, it, cfg.iterations);
        for (i, (adam, g)) in adams.iter_mut().zip(&grads).enumerate() {
            adam.lr = lr;
            adam.step(&mut frames[i + 1], g)?;
            frames[i + 1].clamp_in_place(0.0, 1.0);
        }
    }
    if cfg.eval_every > 0 {
        evaluations.push((cfg.iterations, path_energy(&frames, metric, eval_seed, cfg.eval_samples)?));
    }
    Ok(GeodesicResult {
        frames,
        trace,
        evaluations,
    })
}

/// Local second-order probe of `f(v) = d(x₀, x₀ + v)` around `v = 0`.
#[derive(Clone, Copy)]
pub struct HessianProbe<'m> {
    pub anchor: &'m Tensor,
    pub metric: &'m dyn ImageMetric,
    /// Finite-difference step along the unit direction.
    pub step: f64,
    pub seed: u64,
    /// Frozen realizations averaged by every gradient evaluation.
    pub samples: usize,
}

pub const DEFAULT_HVP_STEP: f64 = 1e-3;

impl<'m> HessianProbe<'m> {
    pub fn new(anchor: &'m Tensor, metric: &'m dyn ImageMetric) -> Self {
        HessianProbe {
            anchor,
            metric,
            step: DEFAULT_HVP_STEP,
            seed: 0,
            samples: 1,
        }
    }

    fn gradient_at(&self, dir: &Tensor, h: f32) -> Result<Tensor> {
        let mut y = self.anchor.clone();
        y.axpy(h, dir);
        let n = if self.metric.is_stochastic() { self.samples.max(1) } else { 1 };
        let g = crate::metric::gradient_estimate(self.metric, self.anchor, &y, self.seed, 0, n, Wrt::Second)?;
        let g = g.second.expect("requested");
        if !g.is_finite() {
            return Err(Error::NonFinite("hessian probe gradient"));
        }
        Ok(g)
    }
}

/// Central difference of gradients along `v`, rescaled to `‖v‖`.
pub fn hessian_vector_product(probe: &HessianProbe<'_>, v: &Tensor) -> Result<Tensor> {
    probe.anchor.expect_same_shape(v, "hessian_vector_product")?;
    if !(probe.step > 0.0) {
        return Err(Error::contract("hessian_vector_product", "step must be positive"));
    }
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::contract("hessian_vector_product", "zero direction"));
    }
    let dir = v.scaled((1.0 / norm) as f32);
    let h = probe.step as f32;
    let gp = probe.gradient_at(&dir, h)?;
    let gm = probe.gradient_at(&dir, -h)?;
    let s = norm / (2.0 * probe.step);
    gp.zip_map(&gm, |p, m| ((p as f64 - m as f64) * s) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerResult {
    pub value: f64,
    pub iterations: usize,
    /// Relative change of the Rayleigh quotient at the last iteration.
    pub last_change: f64,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaExtremes {
    pub max: PowerResult,
    pub min: PowerResult,
}

/// Relative change below which power iteration counts as converged.
pub const POWER_TOLERANCE: f64 = 1e-3;
/// Spectral shift factor for the smallest eigenvalue.
pub const SHIFT_FACTOR: f64 = 1.01;

fn random_direction(shape: &[usize], seed: u64, lane: u64) -> Tensor {
    let mut rng = CounterRng::new(seed, Domain::Probe, lane, 0);
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}

/// Dominant eigenvalue of `shift·I − H` (or of `H` when `shift` is `None`).
fn power_iteration(
    probe: &HessianProbe<'_>,
    iterations: usize,
    shift: Option<f64>,
    lane: u64,
) -> Result<PowerResult> {
    let mut v = random_direction(probe.anchor.shape(), probe.seed, lane);
    v = v.scaled((1.0 / v.norm()) as f32);
    let mut prev: Option<f64> = None;
    let mut out = PowerResult {
        value: 0.0,
        iterations: 0,
        last_change: f64::INFINITY,
        converged: false,
    };
    let mut calm = 0;
    for it in 0..iterations {
        let hv = hessian_vector_product(probe, &v)?;
        let w = match shift {
            None => hv,
            Some(s) => v.zip_map(&hv, |a, b| (s * a as f64 - b as f64) as f32)?,
        };
        let rq = v.dot(&w) / v.sq_norm();
        let change = match prev {
            Some(p) => libm::fabs(rq - p) / libm::fabs(rq).max(f64::MIN_POSITIVE),
            None => f64::INFINITY,
        };
        out = PowerResult {
            value: rq,
            iterations: it + 1,
            last_change: change,
            converged: change <= POWER_TOLERANCE,
        };
        prev = Some(rq);
        calm = if change <= POWER_TOLERANCE { calm + 1 } else { 0 };
        let n = w.norm();
        if n == 0.0 || calm >= 3 {
            if n == 0.0 {
                out.converged = true;
            }
            break;
        }
        v = w.scaled((1.0 / n) as f32);
    }
    Ok(out)
}

/// Largest eigenvalue by power iteration and smallest by power iteration
/// on `σI − H` with `σ = 1.01·λ_max`.
pub fn lambda_extremes(probe: &HessianProbe<'_>, iterations: usize) -> Result<LambdaExtremes> {
    lambda_extremes_from(probe, iterations, 0)
}

/// As [`lambda_extremes`] with the random starts drawn from `restart`.
pub fn lambda_extremes_from(probe: &HessianProbe<'_>, iterations: usize, restart: u64) -> Result<LambdaExtremes> {
    if iterations == 0 {
        return Err(Error::contract("lambda_extremes", "need at least one iteration"));
    }
    let max = power_iteration(probe, iterations, None, 2 * restart)?;
    let sigma = SHIFT_FACTOR * max.value;
    let shifted = power_iteration(probe, iterations, Some(sigma), 2 * restart + 1)?;
    let min = PowerResult {
        value: sigma - shifted.value,
        ..shifted
    };
    Ok(LambdaExtremes { max, min })
}

/// Hutchinson estimates of `tr(Hᵏ)/dim`, `k = 1..=4`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawMoments {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub probes: usize,
}

pub const MIN_SPECTRUM_PROBES: usize = 8;

/// Averages `uᵀHᵏu / dim` over Rademacher probes `u`, two products each.
pub fn raw_moments(probe: &HessianProbe<'_>, samples: usize) -> Result<RawMoments> {
    if samples < MIN_SPECTRUM_PROBES {
        return Err(Error::contract(
            "spectrum_moments",
            format!("need at least {MIN_SPECTRUM_PROBES} probes, got {samples}"),
        ));
    }
    let dim = probe.anchor.len() as f64;
    let mut acc = [Vec::with_capacity(samples), Vec::new(), Vec::new(), Vec::new()];
    for p in 0..samples as u64 {
        let mut rng = CounterRng::new(probe.seed, Domain::Probe, 1 << 32, p);
        let u = Tensor::from_fn(probe.anchor.shape(), |_| if rng.coin() { 1.0 } else { -1.0 });
        let w1 = hessian_vector_product(probe, &u)?;
        let w2 = hessian_vector_product(probe, &w1)?;
        acc[0].push(u.dot(&w1) / dim);
        acc[1].push(w1.sq_norm() / dim);
        acc[2].push(w1.dot(&w2) / dim);
        acc[3].push(w2.sq_norm() / dim);
    }
    let mean = |v: &Vec<f64>| pairwise_sum(v) / samples as f64;
    Ok(RawMoments {
        m1: mean(&acc[0]),
        m2: mean(&acc[1]),
        m3: mean(&acc[2]),
        m4: mean(&acc[3]),
        probes: samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectrumSummary {
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    /// `λ_max / mean`.
    pub normalized_lambda_max: f64,
    /// `λ_min / mean`.
    pub normalized_lambda_min: f64,
    /// `variance / mean²`.
    pub normalized_variance: f64,
    pub condition: f64,
    pub probes: usize,
    pub power_iterations: usize,
    pub converged: bool,
    /// Set when the variance estimate came out non-positive; skewness and
    /// kurtosis are then reported as zero.
    pub variance_flagged: bool,
}

impl SpectrumSummary {
    pub fn from_parts(ext: &LambdaExtremes, raw: &RawMoments) -> Self {
        let (m1, m2, m3, m4) = (raw.m1, raw.m2, raw.m3, raw.m4);
        let mu2 = m2 - m1 * m1;
        let mu3 = m3 - 3.0 * m1 * m2 + 2.0 * m1 * m1 * m1;
        let mu4 = m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1 * m1 * m1 * m1;
        // Cancellation leaves relative noise of order 1e-12 in the variance.
        let flagged = !(mu2 > 1e-9 * m2.abs().max(f64::MIN_POSITIVE));
        let (skewness, kurtosis) = if flagged {
            (0.0, 0.0)
        } else {
            (mu3 / libm::pow(mu2, 1.5), mu4 / (mu2 * mu2))
        };
        let norm = |v: f64| if m1 != 0.0 { v / m1 } else { f64::NAN };
        SpectrumSummary {
            lambda_max: ext.max.value,
            lambda_min: ext.min.value,
            mean: m1,
            variance: if flagged { mu2.max(0.0) } else { mu2 },
            skewness,
            kurtosis,
            normalized_lambda_max: norm(ext.max.value),
            normalized_lambda_min: norm(ext.min.value),
            normalized_variance: if flagged { 0.0 } else { norm(norm(mu2)) },
            condition: ext.max.value / ext.min.value,
            probes: raw.probes,
            power_iterations: ext.max.iterations + ext.min.iterations,
            converged: ext.max.converged && ext.min.converged,
            variance_flagged: flagged,
        }
    }
}

pub fn spectrum_moments(probe: &HessianProbe<'_>, iterations: usize, samples: usize) -> Result<SpectrumSummary> {
    let ext = lambda_extremes(probe, iterations)?;
    let raw = raw_moments(probe, samples)?;
    Ok(SpectrumSummary::from_parts(&ext, &raw))
}
