//! Feature distances, their ensembled expectation and simple reference
//! metrics sharing one interface.
//!
//! Every stochastic quantity is addressed by a [`Realization`]: the seed of
//! a run plus the index of the sample. Realization `i` always draws the same
//! transformation and dropout masks, so estimates are prefix-stable in the
//! sample count and two evaluations with the same realization see the same
//! sample function.

use alloc::format;
use alloc::vec::Vec;

use crate::convnet::{forward_graph, DropoutPlan, FeatureStack, WeightContainer};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{pairwise_sum, Tensor};
use crate::transforms::{transform_for, transform_graph, EnsembleConfig, TransformParams};

/// Epsilon inside the per-pixel feature normalization.
pub const NORMALIZE_EPSILON: f32 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Realization {
    pub seed: u64,
    pub index: u64,
}

impl Realization {
    pub fn new(seed: u64, index: u64) -> Self {
        Realization { seed, index }
    }
}

/// Which argument(s) of `d(x, y)` to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    First,
    Second,
    Both,
}

impl Wrt {
    fn first(self) -> bool {
        matches!(self, Wrt::First | Wrt::Both)
    }

    fn second(self) -> bool {
        matches!(self, Wrt::Second | Wrt::Both)
    }
}

#[derive(Clone, Debug)]
pub struct MetricGrad {
    pub value: f64,
    pub first: Option<Tensor>,
    pub second: Option<Tensor>,
}

/// A distance between images that may depend on a random realization.
pub trait ImageMetric: Sync {
    /// False when every realization gives the same value.
    fn is_stochastic(&self) -> bool;

    fn sample(&self, x: &Tensor, y: &Tensor, r: Realization) -> Result<f64>;

    fn sample_grad(&self, x: &Tensor, y: &Tensor, r: Realization, wrt: Wrt) -> Result<MetricGrad>;
}

/// Monte-Carlo estimate of an expected distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceEstimate {
    pub mean: f64,
    /// Sample standard deviation over √n.
    pub stderr: f64,
    pub n: usize,
}

impl DistanceEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return DistanceEstimate { mean: 0.0, stderr: 0.0, n: 0 };
        }
        let mean = pairwise_sum(samples) / n as f64;
        let stderr = if n > 1 {
            let sq: Vec<f64> = samples.iter().map(|v| (v - mean) * (v - mean)).collect();
            libm::sqrt(pairwise_sum(&sq) / (n - 1) as f64) / libm::sqrt(n as f64)
        } else {
            0.0
        };
        DistanceEstimate { mean, stderr, n }
    }
}

/// Per-sample distances for realizations `0..n` of `seed`.
pub fn sample_distances(metric: &dyn ImageMetric, x: &Tensor, y: &Tensor, seed: u64, n: usize) -> Result<Vec<f64>> {
    (0..n as u64).map(|i| metric.sample(x, y, Realization::new(seed, i))).collect()
}

/// Mean of `n` realizations. A deterministic metric is evaluated once and
/// reported with zero standard error.
pub fn estimate(metric: &dyn ImageMetric, x: &Tensor, y: &Tensor, seed: u64, n: usize) -> Result<DistanceEstimate> {
    if n == 0 {
        return Err(Error::contract("estimate", "sample count must be at least 1"));
    }
    if !metric.is_stochastic() {
        let v = metric.sample(x, y, Realization::new(seed, 0))?;
        return Ok(DistanceEstimate { mean: v, stderr: 0.0, n });
    }
    Ok(DistanceEstimate::from_samples(&sample_distances(metric, x, y, seed, n)?))
}

/// Both distances from `reference`, computed with identical realizations.
pub fn pairwise_compare(
    metric: &dyn ImageMetric,
    reference: &Tensor,
    a: &Tensor,
    b: &Tensor,
    seed: u64,
    n: usize,
) -> Result<(DistanceEstimate, DistanceEstimate)> {
    Ok((estimate(metric, reference, a, seed, n)?, estimate(metric, reference, b, seed, n)?))
}

/// Average value and gradient over realizations `start..start + n`.
pub fn gradient_estimate(
    metric: &dyn ImageMetric,
    x: &Tensor,
    y: &Tensor,
    seed: u64,
    start: u64,
    n: usize,
    wrt: Wrt,
) -> Result<MetricGrad> {
    if n == 0 {
        return Err(Error::contract("gradient_estimate", "sample count must be at least 1"));
    }
    let n = if metric.is_stochastic() { n } else { 1 };
    let mut acc: Option<MetricGrad> = None;
    let mut values = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let g = metric.sample_grad(x, y, Realization::new(seed, start + i), wrt)?;
        values.push(g.value);
        acc = Some(match acc {
            None => g,
            Some(mut a) => {
                add_opt(&mut a.first, g.first);
                add_opt(&mut a.second, g.second);
                a
            }
        });
    }
    let mut out = acc.expect("n >= 1");
    out.value = pairwise_sum(&values) / n as f64;
    if n > 1 {
        let inv = 1.0 / n as f32;
        out.first = out.first.map(|t| t.scaled(inv));
        out.second = out.second.map(|t| t.scaled(inv));
    }
    Ok(out)
}

fn add_opt(acc: &mut Option<Tensor>, g: Option<Tensor>) {
    if let (Some(a), Some(g)) = (acc.as_mut(), g) {
        a.axpy(1.0, &g);
    }
}

fn check_pair(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::contract(
            op,
            format!("image shapes differ: {:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    Ok(())
}

/// Euclidean distance `‖x − y‖₂`.
#[derive(Clone, Copy, Debug, Default)]
pub struct L2;

/// Squared Euclidean distance `‖x − y‖₂²`.
#[derive(Clone, Copy, Debug, Default)]
pub struct SquaredL2;

/// `(x − y)ᵀ diag(a) (x − y)` with a fixed non-negative diagonal.
#[derive(Clone, Debug)]
pub struct DiagonalQuadratic {
    pub diagonal: Tensor,
}

fn diff64(x: &Tensor, y: &Tensor) -> Vec<f64> {
    x.data().iter().zip(y.data()).map(|(&a, &b)| a as f64 - b as f64).collect()
}

fn grad_pair(x: &Tensor, wrt: Wrt, g: Vec<f64>) -> (Option<Tensor>, Option<Tensor>) {
    let first = Tensor::new(x.shape(), g.iter().map(|&v| v as f32).collect()).expect("shape");
    let second = wrt.second().then(|| first.map(|v| -v));
    (wrt.first().then_some(first), second)
}

impl ImageMetric for SquaredL2 {
    fn is_stochastic(&self) -> bool {
        false
    }

    fn sample(&self, x: &Tensor, y: &Tensor, _: Realization) -> Result<f64> {
        check_pair("l2", x, y)?;
        Ok(x.sq_dist(y))
    }

    fn sample_grad(&self, x: &Tensor, y: &Tensor, _: Realization, wrt: Wrt) -> Result<MetricGrad> {
        check_pair("l2", x, y)?;
        let d = diff64(x, y);
        let value = pairwise_sum(&d.iter().map(|v| v * v).collect::<Vec<_>>());
        let (first, second) = grad_pair(x, wrt, d.iter().map(|v| 2.0 * v).collect());
        Ok(MetricGrad { value, first, second })
    }
}

impl ImageMetric for L2 {
    fn is_stochastic(&self) -> bool {
        false
    }

    fn sample(&self, x: &Tensor, y: &Tensor, _: Realization) -> Result<f64> {
        check_pair("l2", x, y)?;
        Ok(x.dist(y))
    }

    /// The gradient at `x = y` is taken as zero.
    fn sample_grad(&self, x: &Tensor, y: &Tensor, _: Realization, wrt: Wrt) -> Result<MetricGrad> {
        check_pair("l2", x, y)?;
        let d = diff64(x, y);
        let value = libm::sqrt(pairwise_sum(&d.iter().map(|v| v * v).collect::<Vec<_>>()));
        let inv = if value > 0.0 { 1.0 / value } else { 0.0 };
        let (first, second) = grad_pair(x, wrt, d.iter().map(|v| v * inv).collect());
        Ok(MetricGrad { value, first, second })
    }
}

impl DiagonalQuadratic {
    pub fn new(diagonal: Tensor) -> Result<Self> {
        if diagonal.data().iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::contract("quadratic", "diagonal entries must be finite and non-negative"));
        }
        Ok(DiagonalQuadratic { diagonal })
    }
}

impl ImageMetric for DiagonalQuadratic {
    fn is_stochastic(&self) -> bool {
        false
    }

    fn sample(&self, x: &Tensor, y: &Tensor, r: Realization) -> Result<f64> {
        Ok(self.sample_grad(x, y, r, Wrt::First)?.value)
    }

    fn sample_grad(&self, x: &Tensor, y: &Tensor, _: Realization, wrt: Wrt) -> Result<MetricGrad> {
        check_pair("quadratic", x, y)?;
        check_pair("quadratic", x, &self.diagonal)?;
        let d = diff64(x, y);
        let a = self.diagonal.data();
        let value = pairwise_sum(&d.iter().zip(a).map(|(v, &a)| a as f64 * v * v).collect::<Vec<_>>());
        let (first, second) = grad_pair(x, wrt, d.iter().zip(a).map(|(v, &a)| 2.0 * a as f64 * v).collect());
        Ok(MetricGrad { value, first, second })
    }
}

/// Records the feature distance between two stacks of graph nodes:
/// per layer, the squared weighted difference of normalized features,
/// averaged over pixels; summed over layers.
pub fn lpips_graph(g: &mut Graph<'_>, fx: &[Var], fy: &[Var], weights: &WeightContainer, epsilon: f32) -> Result<Var> {
    if fx.len() != fy.len() || fx.len() != weights.distance_layer_count() {
        return Err(Error::contract(
            "lpips_distance",
            format!(
                "stacks have {} and {} layers, weights expect {}",
                fx.len(),
                fy.len(),
                weights.distance_layer_count()
            ),
        ));
    }
    let mut total: Option<Var> = None;
    for (l, (&a, &b)) in fx.iter().zip(fy).enumerate() {
        if g.shape(a) != g.shape(b) {
            return Err(Error::contract(
                "lpips_distance",
                format!("layer {l} shapes differ: {:?} vs {:?}", g.shape(a), g.shape(b)),
            ));
        }
        let (h, w, _) = g.value(a).hwc()?;
        let na = g.channel_l2_normalize(a, epsilon)?;
        let nb = g.channel_l2_normalize(b, epsilon)?;
        let d = g.sub(na, nb)?;
        let d = g.channel_scale(d, weights.layer_weight(l))?;
        let sq = g.mul(d, d)?;
        let s = g.reduce_sum(sq);
        let term = g.scale(s, 1.0 / (h * w) as f32);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::contract("lpips_distance", "no distance layers"))
}

/// Feature distance between two precomputed stacks.
pub fn lpips_distance(fx: &FeatureStack, fy: &FeatureStack, weights: &WeightContainer) -> Result<f64> {
    let mut g = Graph::new();
    let a: Vec<Var> = fx.layers.iter().map(|t| g.constant(t.clone())).collect();
    let b: Vec<Var> = fy.layers.iter().map(|t| g.constant(t.clone())).collect();
    let d = lpips_graph(&mut g, &a, &b, weights, NORMALIZE_EPSILON)?;
    Ok(g.scalar(d))
}

/// Feature distance under a transformation ensemble. With every group
/// disabled it is the plain feature distance.
#[derive(Clone, Copy, Debug)]
pub struct MetricConfig<'w> {
    pub weights: &'w WeightContainer,
    pub ensemble: EnsembleConfig,
    pub epsilon: f32,
}

impl<'w> MetricConfig<'w> {
    pub fn new(weights: &'w WeightContainer, ensemble: EnsembleConfig) -> Self {
        MetricConfig {
            weights,
            ensemble,
            epsilon: NORMALIZE_EPSILON,
        }
    }

    pub fn plain(weights: &'w WeightContainer) -> Self {
        Self::new(weights, EnsembleConfig::off())
    }

    pub fn with_samples(mut self, samples: usize) -> Self {
        self.ensemble.samples = samples;
        self
    }

    fn effective_index(&self, index: u64) -> u64 {
        match self.ensemble.fixed_ensemble {
            Some(k) => index % k as u64,
            None => index,
        }
    }

    /// Transformations applied to the two images for realization `r`, or
    /// `None` when the ensemble uses no transformations.
    pub fn transforms(&self, h: usize, w: usize, r: Realization) -> Option<(TransformParams, TransformParams)> {
        if !self.ensemble.transforms_enabled() {
            return None;
        }
        let cfg = self.ensemble.fitted_to(h, w);
        let i = self.effective_index(r.index);
        let px = transform_for(r.seed, i, 0, &cfg);
        let py = if self.ensemble.shared { px } else { transform_for(r.seed, i, 1, &cfg) };
        Some((px, py))
    }

    fn dropout_plans(&self, r: Realization) -> Option<(DropoutPlan, DropoutPlan)> {
        if !self.ensemble.dropout {
            return None;
        }
        let i = self.effective_index(r.index);
        let px = DropoutPlan::new(r.seed, i);
        let py = if self.ensemble.shared {
            px
        } else {
            // A distinct seed family for the second image.
            DropoutPlan::new(r.seed ^ 0x9e37_79b9_7f4a_7c15, i)
        };
        Some((px, py))
    }

    /// Records one realization of the distance on `g`.
    pub fn distance_graph(&self, g: &mut Graph<'w>, x: Var, y: Var, r: Realization) -> Result<Var> {
        let (h, w, _) = g.value(x).hwc()?;
        let (mut tx, mut ty) = (x, y);
        if let Some((px, py)) = self.transforms(h, w, r) {
            tx = transform_graph(g, x, &px)?;
            ty = transform_graph(g, y, &py)?;
        }
        let plans = self.dropout_plans(r);
        let fx = forward_graph(g, tx, self.weights, plans.as_ref().map(|p| &p.0))?;
        let fy = forward_graph(g, ty, self.weights, plans.as_ref().map(|p| &p.1))?;
        lpips_graph(g, &fx, &fy, self.weights, self.epsilon)
    }
}

impl ImageMetric for MetricConfig<'_> {
    fn is_stochastic(&self) -> bool {
        self.ensemble.transforms_enabled() || (self.ensemble.dropout && self.weights.keep_prob() < 1.0)
    }

    fn sample(&self, x: &Tensor, y: &Tensor, r: Realization) -> Result<f64> {
        check_pair("elpips_distance", x, y)?;
        let mut g = Graph::new();
        let (vx, vy) = (g.constant(x.clone()), g.constant(y.clone()));
        let d = self.distance_graph(&mut g, vx, vy, r)?;
        finite(g.scalar(d))
    }

    fn sample_grad(&self, x: &Tensor, y: &Tensor, r: Realization, wrt: Wrt) -> Result<MetricGrad> {
        check_pair("elpips_gradient", x, y)?;
        let mut g = Graph::new();
        let vx = if wrt.first() { g.leaf(x.clone()) } else { g.constant(x.clone()) };
        let vy = if wrt.second() { g.leaf(y.clone()) } else { g.constant(y.clone()) };
        let d = self.distance_graph(&mut g, vx, vy, r)?;
        let value = finite(g.scalar(d))?;
        let leaves: Vec<Var> = [(wrt.first(), vx), (wrt.second(), vy)]
            .into_iter()
            .filter_map(|(on, v)| on.then_some(v))
            .collect();
        let mut grads = g.backward(d, &leaves)?;
        let first = wrt.first().then(|| grads.take(vx).expect("leaf"));
        let second = wrt.second().then(|| grads.take(vy).expect("leaf"));
        Ok(MetricGrad { value, first, second })
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("distance"))
    }
}

/// Ensembled distance averaged over `config.ensemble.samples` realizations.
pub fn elpips_distance(x: &Tensor, y: &Tensor, config: &MetricConfig<'_>, seed: u64) -> Result<DistanceEstimate> {
    config.ensemble.validate()?;
    estimate(config, x, y, seed, config.ensemble.samples)
}

/// Value and gradient with respect to `x`, averaged over
/// `config.ensemble.samples` realizations.
pub fn elpips_gradient(x: &Tensor, y: &Tensor, config: &MetricConfig<'_>, seed: u64) -> Result<(f64, Tensor)> {
    config.ensemble.validate()?;
    let g = gradient_estimate(config, x, y, seed, 0, config.ensemble.samples, Wrt::First)?;
    Ok((g.value, g.first.expect("requested")))
}
