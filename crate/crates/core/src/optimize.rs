//! Adam and the two adversarial attacks.
//!
//! A1 looks for an image close to a target `b` while keeping the metric
//! distance to the source `a` under a small anchor distance. A2 looks for
//! the image that is metrically farthest from `a` inside a small pixel-space
//! ball. Both differentiate through the ensemble with one or more fresh
//! realizations per step.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::metric::{estimate, gradient_estimate, DistanceEstimate, ImageMetric, Wrt};
use crate::rng::{CounterRng, Domain};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Standard deviation of the noise defining the anchor distance.
pub const ANCHOR_SIGMA: f64 = 2.0 / 255.0;
/// Realizations used when a distance is reported rather than optimized.
pub const REPORT_SAMPLES: usize = 300;
/// Slack on the A1 constraint when judging feasibility.
pub const FEASIBILITY_SLACK: f64 = 1.05;

/// Offset mixed into the seed of final measurements, so that they never
/// reuse the realizations seen during optimization.
const EVAL_SEED_SALT: u64 = 0x6576_616c_7561_7465;

pub fn evaluation_seed(seed: u64) -> u64 {
    seed ^ EVAL_SEED_SALT
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamState {
    pub fn new(shape: &[usize], lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }

    /// One bias-corrected descent step on `x` along `grad`.
    pub fn step(&mut self, x: &mut Tensor, grad: &Tensor) -> Result<()> {
        x.expect_same_shape(grad, "adam_step")?;
        x.expect_same_shape(&self.m, "adam_step")?;
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(BETA1, t as f64);
        let c2 = 1.0 - libm::pow(BETA2, t as f64);
        let (m, v) = (self.m.data_mut(), self.v.data_mut());
        for (((xi, &gi), mi), vi) in x.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            let g = gi as f64;
            let mn = BETA1 * *mi as f64 + (1.0 - BETA1) * g;
            let vn = BETA2 * *vi as f64 + (1.0 - BETA2) * g * g;
            *mi = mn as f32;
            *vi = vn as f32;
            let update = self.lr * (mn / c1) / (libm::sqrt(vn / c2) + ADAM_EPSILON);
            *xi = (*xi as f64 - update) as f32;
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, x: &mut Tensor, grad: &Tensor) -> Result<()> {
    state.step(x, grad)
}

/// Returns `x` if it lies within `radius` of `center`, else its radial
/// projection onto that sphere.
pub fn project_l2_ball(x: &Tensor, center: &Tensor, radius: f64) -> Result<Tensor> {
    x.expect_same_shape(center, "project_l2_ball")?;
    if !(radius >= 0.0) {
        return Err(Error::contract("project_l2_ball", format!("negative radius {radius}")));
    }
    let dist = x.dist(center);
    if dist <= radius {
        return Ok(x.clone());
    }
    let s = radius / dist;
    x.zip_map(center, |xv, cv| (cv as f64 + (xv as f64 - cv as f64) * s) as f32)
}

/// `clamp(a + σ·N(0, 1))` with noise drawn from `seed`.
pub fn noisy_anchor(a: &Tensor, sigma: f64, seed: u64) -> Tensor {
    let mut rng = CounterRng::new(seed, Domain::Noise, 0, 0);
    a.map(|v| (v as f64 + sigma * rng.normal()).clamp(0.0, 1.0) as f32)
}

/// Distance between `a` and its noisy copy, averaged over `n` realizations.
pub fn anchor_epsilon(
    a: &Tensor,
    sigma: f64,
    metric: &dyn ImageMetric,
    seed: u64,
    n: usize,
) -> Result<(DistanceEstimate, Tensor)> {
    if !(sigma > 0.0) {
        return Err(Error::contract("anchor_epsilon", format!("sigma must be positive, got {sigma}")));
    }
    let noisy = noisy_anchor(a, sigma, seed);
    let eps = estimate(metric, a, &noisy, evaluation_seed(seed), n)?;
    Ok((eps, noisy))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub budget: usize,
    pub lr: f64,
    /// Ensemble realizations averaged per gradient step.
    pub samples_per_step: usize,
    /// A1 penalty weight at the first stage.
    pub penalty_start: f64,
    /// Factor applied to the A1 penalty weight at every stage boundary.
    pub penalty_growth: f64,
    pub penalty_stages: usize,
    pub seed: u64,
    pub clamp: bool,
    /// Realizations used to re-measure the result.
    pub report_samples: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            budget: 1000,
            lr: 0.01,
            samples_per_step: 1,
            penalty_start: 1.0,
            penalty_growth: 10.0,
            penalty_stages: 5,
            seed: 0,
            clamp: true,
            report_samples: REPORT_SAMPLES,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 || self.samples_per_step == 0 || self.penalty_stages == 0 || self.report_samples == 0 {
            return Err(Error::contract("attack", "budget, samples and stages must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::contract("attack", format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.penalty_start > 0.0) || !(self.penalty_growth >= 1.0) {
            return Err(Error::contract("attack", "penalty weight must be positive and non-decreasing"));
        }
        Ok(())
    }

    fn stage_length(&self) -> usize {
        self.budget.div_ceil(self.penalty_stages)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub objective: f64,
    /// Single-step estimate of the metric distance `d(a, x)`.
    pub distance: f64,
    pub penalty_weight: f64,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub image: Tensor,
    /// `d(a, x)`, re-measured after optimization.
    pub distance: DistanceEstimate,
    /// `‖x − a‖₂`.
    pub l2_to_source: f64,
    /// `‖x − b‖₂` for A1.
    pub l2_to_target: Option<f64>,
    /// A1 only: whether the re-measured distance satisfies the constraint.
    pub feasible: bool,
    pub trace: Vec<TraceEntry>,
}

impl AttackResult {
    /// `‖x − b‖ / ‖a − b‖`; 1 when `a = b`.
    pub fn target_residual_ratio(&self, a: &Tensor, b: &Tensor) -> f64 {
        let ab = a.dist(b);
        if ab == 0.0 {
            1.0
        } else {
            self.image.dist(b) / ab
        }
    }

    /// How far the result escaped from `a`, in units of the noise used to
    /// define the anchor distance.
    pub fn escape_ratio(&self, a: &Tensor, noisy: &Tensor) -> f64 {
        let r = noisy.dist(a);
        if r == 0.0 {
            0.0
        } else {
            self.l2_to_source / r
        }
    }
}

fn check_finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Minimizes `‖x − b‖² / ‖a − b‖² + μ·max(0, d(a, x)/ε − 1)²` from `x = a`.
///
/// The candidates at the end of each penalty stage are re-measured with
/// `cfg.report_samples` fresh realizations; the one closest to `b` among
/// those within `1.05·ε` is returned, else the final iterate is returned
/// marked infeasible.
pub fn attack_a1(a: &Tensor, b: &Tensor, metric: &dyn ImageMetric, eps: f64, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    a.expect_same_shape(b, "attack_a1")?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::contract("attack_a1", format!("epsilon must be positive, got {eps}")));
    }
    let den = {
        let d = a.sq_dist(b);
        if d > 0.0 {
            d
        } else {
            1.0
        }
    };
    let mut x = a.clone();
    let mut adam = AdamState::new(a.shape(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.budget);
    let mut candidates = Vec::with_capacity(cfg.penalty_stages + 1);
    let stage_len = cfg.stage_length();
    let k = cfg.samples_per_step;

    for it in 0..cfg.budget {
        let stage = it / stage_len;
        let mu = cfg.penalty_start * libm::pow(cfg.penalty_growth, stage as f64);
        let mg = gradient_estimate(metric, a, &x, cfg.seed, (it * k) as u64, k, Wrt::Second)?;
        let dgrad = mg.second.expect("requested");
        let violation = (mg.value / eps - 1.0).max(0.0);
        let objective = check_finite(x.sq_dist(b) / den + mu * violation * violation, "A1 objective")?;
        trace.push(TraceEntry {
            iteration: it,
            objective,
            distance: mg.value,
            penalty_weight: mu,
        });

        let mut grad = x.zip_map(b, |xv, bv| (2.0 * (xv as f64 - bv as f64) / den) as f32)?;
        if violation > 0.0 {
            grad.axpy((2.0 * mu * violation / eps) as f32, &dgrad);
        }
        adam.step(&mut x, &grad)?;
        if cfg.clamp {
            x.clamp_in_place(0.0, 1.0);
        }
        if (it + 1) % stage_len == 0 && it + 1 < cfg.budget {
            candidates.push(x.clone());
        }
    }
    candidates.push(x);

    let eval_seed = evaluation_seed(cfg.seed);
    let mut best: Option<(f64, usize, DistanceEstimate)> = None;
    let mut last = None;
    for (i, c) in candidates.iter().enumerate() {
        let d = estimate(metric, a, c, eval_seed, cfg.report_samples)?;
        check_finite(d.mean, "A1 distance")?;
        if d.mean <= FEASIBILITY_SLACK * eps {
            let r = c.dist(b);
            if best.is_none_or(|(br, _, _)| r < br) {
                best = Some((r, i, d));
            }
        }
        last = Some(d);
    }
    let (idx, distance, feasible) = match best {
        Some((_, i, d)) => (i, d, true),
        None => (candidates.len() - 1, last.expect("at least one candidate"), false),
    };
    let image = candidates.swap_remove(idx);
    Ok(AttackResult {
        l2_to_source: image.dist(a),
        l2_to_target: Some(image.dist(b)),
        image,
        distance,
        feasible,
        trace,
    })
}

/// Projected gradient ascent on `d(a, x)` over `‖x − a‖₂² ≤ eps`.
///
/// The gradient vanishes at `x = a`, so the iterate starts at a random
/// point at half the ball radius.
pub fn attack_a2(a: &Tensor, metric: &dyn ImageMetric, eps: f64, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::contract("attack_a2", format!("epsilon must be non-negative, got {eps}")));
    }
    let radius = libm::sqrt(eps);
    let mut x = a.clone();
    if radius > 0.0 {
        let mut rng = CounterRng::new(cfg.seed, Domain::Noise, 1, 0);
        let dir = a.map(|_| rng.normal() as f32);
        let n = dir.norm();
        if n > 0.0 {
            x.axpy((0.5 * radius / n) as f32, &dir);
        }
        if cfg.clamp {
            x.clamp_in_place(0.0, 1.0);
        }
        x = project_l2_ball(&x, a, radius)?;
    }
    let mut adam = AdamState::new(a.shape(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.budget);
    let k = cfg.samples_per_step;
    if radius > 0.0 {
        for it in 0..cfg.budget {
            let mg = gradient_estimate(metric, a, &x, cfg.seed, (it * k) as u64, k, Wrt::Second)?;
            check_finite(mg.value, "A2 objective")?;
            trace.push(TraceEntry {
                iteration: it,
                objective: -mg.value,
                distance: mg.value,
                penalty_weight: 0.0,
            });
            let ascent = mg.second.expect("requested").map(|v| -v);
            adam.step(&mut x, &ascent)?;
            if cfg.clamp {
                x.clamp_in_place(0.0, 1.0);
            }
            x = project_l2_ball(&x, a, radius)?;
        }
    }
    let distance = estimate(metric, a, &x, evaluation_seed(cfg.seed), cfg.report_samples)?;
    check_finite(distance.mean, "A2 distance")?;
    Ok(AttackResult {
        l2_to_source: x.dist(a),
        l2_to_target: None,
        image: x,
        distance,
        feasible: true,
        trace,
    })
}
