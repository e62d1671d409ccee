//! Random input transformations and the ensemble configuration.
//!
//! One realization combines a box downscale at a random power-law scale
//! with a random sub-pixel phase, a random offset inside a fixed 7-pixel
//! mirrored border, random flips and axis swap, a random color channel
//! permutation and random per-channel brightness. Both images of a pair
//! always receive the same realization.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::Pads;
use crate::rng::{CounterRng, Domain};
use crate::tensor::Tensor;

/// Total mirrored border added on each axis after downscaling.
pub const BORDER: usize = 7;
/// Largest downscale factor.
pub const MAX_SCALE: usize = 8;
/// Lower bound of the per-channel brightness factors.
pub const MIN_BRIGHTNESS: f64 = 0.2;

/// The six permutations of three channels in lexicographic order.
pub const CHANNEL_PERMUTATIONS: [[usize; 3]; 6] =
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformParams {
    pub dx: usize,
    pub dy: usize,
    pub flip_x: bool,
    pub flip_y: bool,
    pub swap_xy: bool,
    pub col_perm: [usize; 3],
    /// Brightness of output channels 0, 1, 2 (after permutation).
    pub brightness: [f32; 3],
    pub scale: usize,
    pub scale_dx: usize,
    pub scale_dy: usize,
}

pub fn identity_params() -> TransformParams {
    TransformParams {
        dx: 0,
        dy: 0,
        flip_x: false,
        flip_y: false,
        swap_xy: false,
        col_perm: [0, 1, 2],
        brightness: [1.0; 3],
        scale: 1,
        scale_dx: 0,
        scale_dy: 0,
    }
}

impl Default for TransformParams {
    fn default() -> Self {
        identity_params()
    }
}

impl TransformParams {
    pub fn is_identity(&self) -> bool {
        *self == identity_params()
    }

    /// Extents (height, width) of the transformed `h`×`w` image.
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + self.scale_dy).div_ceil(self.scale) + BORDER;
        let ow = (w + self.scale_dx).div_ceil(self.scale) + BORDER;
        if self.swap_xy {
            (ow, oh)
        } else {
            (oh, ow)
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.dx <= BORDER
            && self.dy <= BORDER
            && (1..=MAX_SCALE).contains(&self.scale)
            && self.scale_dx < self.scale
            && self.scale_dy < self.scale
            && CHANNEL_PERMUTATIONS.contains(&self.col_perm)
            && self.brightness.iter().all(|b| b.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::contract("apply_transform", format!("parameters out of range: {self:?}")))
        }
    }
}

/// Which transformation groups an ensemble draws from, and how many
/// realizations an estimate averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnsembleConfig {
    /// Offsets, flips and axis swap.
    pub spatial: bool,
    /// Channel permutation and brightness.
    pub color: bool,
    /// Multi-scale downscaling.
    pub scale: bool,
    pub dropout: bool,
    /// Realizations averaged per reported estimate.
    pub samples: usize,
    /// Give both images the same realization. Turning this off breaks
    /// `d(x, x) = 0` and exists only for experiments.
    pub shared: bool,
    /// Reuse a fixed list of this many realizations instead of an
    /// unbounded stream.
    pub fixed_ensemble: Option<usize>,
    /// Largest downscale factor drawn.
    pub max_scale: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl EnsembleConfig {
    pub fn full() -> Self {
        EnsembleConfig {
            spatial: true,
            color: true,
            scale: true,
            dropout: true,
            samples: 1,
            shared: true,
            fixed_ensemble: None,
            max_scale: MAX_SCALE,
        }
    }

    /// No transformations and no dropout: the plain feature distance.
    pub fn off() -> Self {
        EnsembleConfig {
            spatial: false,
            color: false,
            scale: false,
            dropout: false,
            ..Self::full()
        }
    }

    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }

    pub fn transforms_enabled(&self) -> bool {
        self.spatial || self.color || self.scale
    }

    pub fn is_deterministic(&self) -> bool {
        !self.transforms_enabled() && !self.dropout
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::contract("ensemble", "sample count must be at least 1"));
        }
        if self.fixed_ensemble == Some(0) {
            return Err(Error::contract("ensemble", "fixed ensemble size must be at least 1"));
        }
        if !(1..=MAX_SCALE).contains(&self.max_scale) {
            return Err(Error::contract(
                "ensemble",
                format!("max scale {} outside 1..={MAX_SCALE}", self.max_scale),
            ));
        }
        Ok(())
    }

    /// Copy whose scale range is limited to factors that leave an `h`×`w`
    /// image larger than the border after downscaling.
    pub fn fitted_to(&self, h: usize, w: usize) -> Self {
        let mut out = *self;
        out.max_scale = self.max_scale.min(max_feasible_scale(h, w).max(1));
        out
    }

    /// Cumulative ablation ladder: plain, then spatial, color, scale and
    /// finally dropout switched on one after another.
    pub fn ablation_ladder() -> [(&'static str, EnsembleConfig); 5] {
        let off = Self::off();
        let spatial = EnsembleConfig { spatial: true, ..off };
        let color = EnsembleConfig { color: true, ..spatial };
        let scale = EnsembleConfig { scale: true, ..color };
        let dropout = EnsembleConfig { dropout: true, ..scale };
        [
            ("plain", off),
            ("spatial", spatial),
            ("color", color),
            ("scale", scale),
            ("dropout", dropout),
        ]
    }
}

/// Largest factor `s ≤ MAX_SCALE` with `⌈h/s⌉` and `⌈w/s⌉` above the border.
pub fn max_feasible_scale(h: usize, w: usize) -> usize {
    (1..=MAX_SCALE)
        .rev()
        .find(|&s| h.div_ceil(s) > BORDER && w.div_ceil(s) > BORDER)
        .unwrap_or(0)
}

/// Probability of each scale `1..=max_scale`, proportional to `1/i²`.
pub fn scale_probabilities(max_scale: usize) -> Vec<f64> {
    let weights: Vec<f64> = (1..=max_scale).map(|i| 1.0 / (i * i) as f64).collect();
    let z: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / z).collect()
}

/// Draws one realization. Every draw is made regardless of which groups
/// are enabled, so toggling a group never shifts the values of the others;
/// disabled groups are then reset to identity.
pub fn sample_transform(rng: &mut CounterRng, config: &EnsembleConfig) -> TransformParams {
    let dx = rng.below(BORDER as u32 + 1) as usize;
    let dy = rng.below(BORDER as u32 + 1) as usize;
    let flip_x = rng.coin();
    let flip_y = rng.coin();
    let swap_xy = rng.coin();
    let col_perm = CHANNEL_PERMUTATIONS[rng.below(6) as usize];
    let mut brightness = [0.0f32; 3];
    for b in &mut brightness {
        *b = rng.uniform_range(MIN_BRIGHTNESS, 1.0) as f32;
    }
    let weights: Vec<f64> = (1..=config.max_scale.max(1)).map(|i| 1.0 / (i * i) as f64).collect();
    let scale = rng.weighted_index(&weights) + 1;
    let scale_dx = rng.below(scale as u32) as usize;
    let scale_dy = rng.below(scale as u32) as usize;

    let mut p = identity_params();
    if config.spatial {
        p.dx = dx;
        p.dy = dy;
        p.flip_x = flip_x;
        p.flip_y = flip_y;
        p.swap_xy = swap_xy;
    }
    if config.color {
        p.col_perm = col_perm;
        p.brightness = brightness;
    }
    if config.scale {
        p.scale = scale;
        p.scale_dx = scale_dx;
        p.scale_dy = scale_dy;
    }
    p
}

/// Realization `index` of the transform stream for `seed`.
pub fn transform_for(seed: u64, index: u64, lane: u64, config: &EnsembleConfig) -> TransformParams {
    let mut rng = CounterRng::new(seed, Domain::Transform, lane, index);
    sample_transform(&mut rng, config)
}

/// Records the transformation pipeline on `g`.
pub fn transform_graph(g: &mut Graph<'_>, image: Var, p: &TransformParams) -> Result<Var> {
    p.validate()?;
    let (h, w, _) = g.value(image).hwc()?;
    let (sh, sw) = ((h + p.scale_dy).div_ceil(p.scale), (w + p.scale_dx).div_ceil(p.scale));
    if sh <= BORDER || sw <= BORDER {
        return Err(Error::contract(
            "apply_transform",
            format!("{h}×{w} image is {sh}×{sw} after downscaling by {}, needs more than {BORDER}", p.scale),
        ));
    }
    let mut x = image;
    if p.scale > 1 {
        x = g.mirror_pad(x, Pads::new(p.scale_dx, p.scale_dy, 0, 0))?;
        x = g.downscale_box(x, p.scale)?;
    }
    x = g.mirror_pad(x, Pads::new(p.dx, p.dy, BORDER - p.dx, BORDER - p.dy))?;
    if p.flip_x {
        x = g.flip_x(x)?;
    }
    if p.flip_y {
        x = g.flip_y(x)?;
    }
    if p.swap_xy {
        x = g.swap_xy(x)?;
    }
    if p.col_perm != [0, 1, 2] {
        x = g.permute_channels(x, &p.col_perm)?;
    }
    if p.brightness != [1.0; 3] {
        x = g.channel_scale(x, &p.brightness)?;
    }
    Ok(x)
}

pub fn apply_transform(image: &Tensor, p: &TransformParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let y = transform_graph(&mut g, x, p)?;
    Ok(g.value(y).clone())
}
