//! Fixed feature-extractor networks and their weights.
//!
//! Two architectures exist: a VGG-16-shaped network (13 convolutions, 5
//! average pools) and a four-convolution stand-in used for fast tests. The
//! forward pass records the preprocessed input and every post-ReLU
//! convolution output; those are the distance layers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, FormatError, Result};
use crate::graph::{Graph, Var};
use crate::rng::{CounterRng, Domain};
use crate::tensor::Tensor;

pub const DEFAULT_KEEP_PROB: f32 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchitectureId {
    Vgg16,
    Tiny,
}

impl ArchitectureId {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureId::Vgg16 => "vgg16",
            ArchitectureId::Tiny => "tiny",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vgg16" => Some(ArchitectureId::Vgg16),
            "tiny" => Some(ArchitectureId::Tiny),
            _ => None,
        }
    }
}

impl core::fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for ArchitectureId {
    type Err = FormatError;

    fn from_str(s: &str) -> Result<Self, FormatError> {
        Self::parse(s).ok_or_else(|| FormatError::UnknownArchitecture(s.into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    /// 3×3 same-padded convolution followed by ReLU.
    Conv { cin: usize, cout: usize },
    AvgPool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    id: ArchitectureId,
    layers: Vec<Layer>,
}

impl Architecture {
    pub fn new(id: ArchitectureId) -> Self {
        let plan: &[usize] = match id {
            ArchitectureId::Vgg16 => &[
                64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0,
            ],
            ArchitectureId::Tiny => &[8, 8, 0, 16, 16, 0],
        };
        let mut cin = 3;
        let layers = plan
            .iter()
            .map(|&cout| {
                if cout == 0 {
                    Layer::AvgPool
                } else {
                    let layer = Layer::Conv { cin, cout };
                    cin = cout;
                    layer
                }
            })
            .collect();
        Architecture { id, layers }
    }

    pub fn id(&self) -> ArchitectureId {
        self.id
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Conv { .. })).count()
    }

    pub fn pool_count(&self) -> usize {
        self.layers.len() - self.conv_count()
    }

    /// Channel count of each distance layer; entry 0 is the input.
    pub fn distance_channels(&self) -> Vec<usize> {
        let mut out = vec![3];
        out.extend(self.layers.iter().filter_map(|l| match l {
            Layer::Conv { cout, .. } => Some(*cout),
            Layer::AvgPool => None,
        }));
        out
    }

    /// Shapes of the distance layers for an `h`×`w` input.
    pub fn feature_shapes(&self, h: usize, w: usize) -> Vec<[usize; 3]> {
        let (mut h, mut w) = (h, w);
        let mut out = vec![[h, w, 3]];
        for layer in &self.layers {
            match *layer {
                Layer::Conv { cout, .. } => out.push([h, w, cout]),
                Layer::AvgPool => {
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                }
            }
        }
        out
    }

    /// Every tensor the weight container must hold, with its shape.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            (names::PREPROCESS_SHIFT.to_string(), vec![3]),
            (names::PREPROCESS_SCALE.to_string(), vec![3]),
        ];
        let mut conv = 0;
        for layer in &self.layers {
            if let Layer::Conv { cin, cout } = *layer {
                conv += 1;
                out.push((names::kernel(conv), vec![3, 3, cin, cout]));
                out.push((names::bias(conv), vec![cout]));
            }
        }
        for (l, c) in self.distance_channels().into_iter().enumerate() {
            out.push((names::layer_weight(l), vec![c]));
        }
        out
    }
}

/// Tensor names inside a weight container.
pub mod names {
    use alloc::format;
    use alloc::string::String;

    pub const PREPROCESS_SHIFT: &str = "preprocess.shift";
    pub const PREPROCESS_SCALE: &str = "preprocess.scale";

    /// Kernel of the `i`-th convolution, counting from 1.
    pub fn kernel(i: usize) -> String {
        format!("conv{i}.kernel")
    }

    pub fn bias(i: usize) -> String {
        format!("conv{i}.bias")
    }

    /// Per-channel weight of distance layer `l` (0 is the input layer).
    pub fn layer_weight(l: usize) -> String {
        format!("lin{l}")
    }
}

/// Validated network weights, distance-layer weights and preprocessing
/// constants. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightContainer {
    arch: Architecture,
    tensors: BTreeMap<String, Tensor>,
    keep_prob: f32,
    metadata: BTreeMap<String, String>,
    kernels: Vec<(usize, usize)>,
}

impl WeightContainer {
    pub fn new(id: ArchitectureId, tensors: BTreeMap<String, Tensor>, keep_prob: f32) -> Result<Self, FormatError> {
        Self::with_metadata(id, tensors, keep_prob, BTreeMap::new())
    }

    /// Like [`WeightContainer::new`], keeping extra metadata entries (other
    /// than `architecture` and `keep_prob`) for round-tripping.
    pub fn with_metadata(
        id: ArchitectureId,
        tensors: BTreeMap<String, Tensor>,
        keep_prob: f32,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self, FormatError> {
        let arch = Architecture::new(id);
        let expected = arch.expected_tensors();
        for (name, shape) in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(FormatError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(FormatError::NonFinitePayload(name.clone()));
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.iter().any(|(n, _)| n == *k)) {
            return Err(FormatError::UnexpectedTensor(extra.clone()));
        }
        for l in 0..arch.distance_channels().len() {
            let name = names::layer_weight(l);
            if tensors[&name].data().iter().any(|&v| v < 0.0) {
                return Err(FormatError::NegativeLayerWeight(name));
            }
        }
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(FormatError::KeepProb(keep_prob));
        }
        let kernels = arch
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { cin, cout } => Some((*cin, *cout)),
                Layer::AvgPool => None,
            })
            .collect();
        Ok(WeightContainer {
            arch,
            tensors,
            keep_prob,
            metadata,
            kernels,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn keep_prob(&self) -> f32 {
        self.keep_prob
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Kernel and bias of the `i`-th convolution (from 1).
    pub fn conv(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.tensors[&names::kernel(i)], &self.tensors[&names::bias(i)])
    }

    pub fn layer_weight(&self, l: usize) -> &[f32] {
        self.tensors[&names::layer_weight(l)].data()
    }

    pub fn preprocess_shift(&self) -> &[f32] {
        self.tensors[names::PREPROCESS_SHIFT].data()
    }

    pub fn preprocess_scale(&self) -> &[f32] {
        self.tensors[names::PREPROCESS_SCALE].data()
    }

    pub fn distance_layer_count(&self) -> usize {
        self.kernels.len() + 1
    }

    /// Copy with one tensor replaced, revalidated.
    pub fn with_tensor(&self, name: &str, tensor: Tensor) -> Result<Self, FormatError> {
        let mut tensors = self.tensors.clone();
        tensors.insert(name.to_string(), tensor);
        Self::with_metadata(self.arch.id(), tensors, self.keep_prob, self.metadata.clone())
    }

    pub fn with_keep_prob(&self, keep_prob: f32) -> Result<Self, FormatError> {
        Self::with_metadata(self.arch.id(), self.tensors.clone(), keep_prob, self.metadata.clone())
    }
}

/// Deterministic random weights: He-scaled normal kernels (variance
/// 2 / fan-in), zero biases, unit layer weights and the [0,1] → [−1,1]
/// preprocessing.
pub fn generate_weights(id: ArchitectureId, seed: u64) -> WeightContainer {
    let arch = Architecture::new(id);
    let mut tensors = BTreeMap::new();
    tensors.insert(names::PREPROCESS_SHIFT.to_string(), Tensor::full(&[3], 0.5));
    tensors.insert(names::PREPROCESS_SCALE.to_string(), Tensor::full(&[3], 2.0));
    let mut conv = 0;
    for layer in arch.layers() {
        if let Layer::Conv { cin, cout } = *layer {
            conv += 1;
            let std = libm::sqrt(2.0 / (9 * cin) as f64);
            let mut rng = CounterRng::new(seed, Domain::WeightInit, conv as u64, 0);
            let kernel = Tensor::from_fn(&[3, 3, cin, cout], |_| (rng.normal() * std) as f32);
            tensors.insert(names::kernel(conv), kernel);
            tensors.insert(names::bias(conv), Tensor::zeros(&[cout]));
        }
    }
    for (l, c) in arch.distance_channels().into_iter().enumerate() {
        tensors.insert(names::layer_weight(l), Tensor::full(&[c], 1.0));
    }
    WeightContainer::new(id, tensors, DEFAULT_KEEP_PROB).expect("generated weights are valid")
}

pub fn generate_tiny_weights(seed: u64) -> WeightContainer {
    generate_weights(ArchitectureId::Tiny, seed)
}

/// Activations of the distance layers; entry 0 is the preprocessed input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<Tensor>,
}

/// Source of per-layer dropout masks for one ensemble realization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutPlan {
    pub seed: u64,
    pub index: u64,
}

impl DropoutPlan {
    pub fn new(seed: u64, index: u64) -> Self {
        DropoutPlan { seed, index }
    }

    /// {0, 1} mask for distance layer `layer`, each entry Bernoulli(keep_prob).
    pub fn mask(&self, layer: usize, shape: &[usize], keep_prob: f32) -> Tensor {
        let mut rng = CounterRng::new(self.seed, Domain::Dropout, layer as u64, self.index);
        let threshold = keep_prob as f64 * 4_294_967_296.0;
        Tensor::from_fn(shape, |_| if (rng.next_u32() as f64) < threshold { 1.0 } else { 0.0 })
    }
}

fn maybe_dropout<'a>(
    g: &mut Graph<'a>,
    v: Var,
    layer: usize,
    dropout: Option<&DropoutPlan>,
    keep_prob: f32,
) -> Result<Var> {
    match dropout {
        Some(plan) if keep_prob < 1.0 => {
            let mask = plan.mask(layer, g.shape(v), keep_prob);
            g.dropout(v, &mask, keep_prob)
        }
        _ => Ok(v),
    }
}

/// Records the forward pass on `g` and returns one node per distance layer.
pub fn forward_graph<'a>(
    g: &mut Graph<'a>,
    image: Var,
    weights: &'a WeightContainer,
    dropout: Option<&DropoutPlan>,
) -> Result<Vec<Var>> {
    let (h, w, c) = g.value(image).hwc()?;
    if c != 3 {
        return Err(Error::contract(
            "forward_features",
            format!("expected 3 color channels, got {c}"),
        ));
    }
    if h == 0 || w == 0 {
        return Err(Error::contract("forward_features", "empty image"));
    }
    let keep = weights.keep_prob();
    let x = g.channel_affine(image, weights.preprocess_scale(), weights.preprocess_shift())?;
    let x = maybe_dropout(g, x, 0, dropout, keep)?;
    let mut features = vec![x];
    let last_conv = weights
        .architecture()
        .layers()
        .iter()
        .rposition(|l| matches!(l, Layer::Conv { .. }))
        .unwrap_or(0);
    let mut cur = x;
    let mut conv = 0;
    for layer in &weights.architecture().layers()[..=last_conv] {
        match layer {
            Layer::Conv { .. } => {
                conv += 1;
                let (k, b) = weights.conv(conv);
                let y = g.conv2d_same(cur, k, b)?;
                let y = g.relu(y);
                cur = maybe_dropout(g, y, conv, dropout, keep)?;
                features.push(cur);
            }
            Layer::AvgPool => cur = g.avg_pool_2x2(cur)?,
        }
    }
    Ok(features)
}

pub fn forward_features(image: &Tensor, weights: &WeightContainer, dropout: Option<&DropoutPlan>) -> Result<FeatureStack> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let vars = forward_graph(&mut g, x, weights, dropout)?;
    Ok(FeatureStack {
        layers: vars.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}
