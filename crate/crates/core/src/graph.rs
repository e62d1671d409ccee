//! Eager tape for reverse-mode differentiation over a closed op set.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and `backward` walks it in reverse. Only nodes that
//! depend on a leaf created with [`Graph::leaf`] carry gradients.
//!
//! Scalar nodes produced by reductions also keep an unrounded `f64` copy of
//! their value; scalar arithmetic on top of them (add, sub, mul, scale)
//! propagates that copy so objectives are reported at double precision.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{self, Pads};
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<'a> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Conv { input: Var, kernel: &'a Tensor },
    Relu(Var),
    AvgPool(Var),
    MirrorPad(Var, Pads),
    Downscale(Var, usize),
    FlipX(Var),
    FlipY(Var),
    SwapXY(Var),
    Permute(Var, Vec<usize>),
    ChannelScale(Var, Vec<f32>),
    Normalize { input: Var, norms: Vec<f32> },
    Dropout { input: Var, factors: Tensor },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<'a> {
    op: Op<'a>,
    value: Tensor,
    exact: Option<f64>,
    needs_grad: bool,
}

/// Reverse-mode tape. Kernels referenced by convolution nodes are borrowed
/// for the lifetime `'a`, so weights are never copied into the graph.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar objective with respect to requested leaves.
#[derive(Debug, Clone)]
pub struct GradientMap {
    entries: Vec<(Var, Tensor)>,
}

impl GradientMap {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.entries.iter().find(|(v, _)| *v == leaf).map(|(_, t)| t)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        let i = self.entries.iter().position(|(v, _)| *v == leaf)?;
        Some(self.entries.swap_remove(i).1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Leaf, value, None, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Constant, value, None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a one-element node, at double precision when the node came
    /// from a reduction.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.exact.unwrap_or_else(|| node.value.item() as f64)
    }

    fn push_node(&mut self, op: Op<'a>, value: Tensor, exact: Option<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            exact,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<'a>, value: Tensor, exact: Option<f64>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_node(op, value, exact, needs_grad)
    }

    fn exact_pair(&self, a: Var, b: Var) -> Option<(f64, f64)> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.value.len() == 1 && nb.value.len() == 1 && (na.exact.is_some() || nb.exact.is_some()) {
            Some((self.scalar(a), self.scalar(b)))
        } else {
            None
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let exact = self.exact_pair(a, b).map(|(x, y)| x + y);
        Ok(self.push(Op::Add(a, b), value, exact, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let exact = self.exact_pair(a, b).map(|(x, y)| x - y);
        Ok(self.push(Op::Sub(a, b), value, exact, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let exact = self.exact_pair(a, b).map(|(x, y)| x * y);
        Ok(self.push(Op::Mul(a, b), value, exact, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, alpha: f32) -> Var {
        let value = self.value(a).scaled(alpha);
        let exact = self.nodes[a.0].exact.map(|x| x * alpha as f64);
        self.push(Op::Scale(a, alpha), value, exact, &[a])
    }

    pub fn conv2d_same(&mut self, input: Var, kernel: &'a Tensor, bias: &'a Tensor) -> Result<Var> {
        let value = ops::conv2d_same(self.value(input), kernel, bias)?;
        Ok(self.push(Op::Conv { input, kernel }, value, None, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = ops::relu(self.value(input));
        self.push(Op::Relu(input), value, None, &[input])
    }

    pub fn avg_pool_2x2(&mut self, input: Var) -> Result<Var> {
        let value = ops::avg_pool_2x2(self.value(input))?;
        Ok(self.push(Op::AvgPool(input), value, None, &[input]))
    }

    pub fn mirror_pad(&mut self, input: Var, pads: Pads) -> Result<Var> {
        let value = ops::mirror_pad(self.value(input), pads)?;
        Ok(self.push(Op::MirrorPad(input, pads), value, None, &[input]))
    }

    pub fn downscale_box(&mut self, input: Var, factor: usize) -> Result<Var> {
        let value = ops::downscale_box(self.value(input), factor)?;
        Ok(self.push(Op::Downscale(input, factor), value, None, &[input]))
    }

    pub fn flip_x(&mut self, input: Var) -> Result<Var> {
        let value = ops::flip_x(self.value(input))?;
        Ok(self.push(Op::FlipX(input), value, None, &[input]))
    }

    pub fn flip_y(&mut self, input: Var) -> Result<Var> {
        let value = ops::flip_y(self.value(input))?;
        Ok(self.push(Op::FlipY(input), value, None, &[input]))
    }

    pub fn swap_xy(&mut self, input: Var) -> Result<Var> {
        let value = ops::swap_xy(self.value(input))?;
        Ok(self.push(Op::SwapXY(input), value, None, &[input]))
    }

    pub fn permute_channels(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let value = ops::permute_channels(self.value(input), perm)?;
        Ok(self.push(Op::Permute(input, perm.to_vec()), value, None, &[input]))
    }

    pub fn channel_scale(&mut self, input: Var, factors: &[f32]) -> Result<Var> {
        let value = ops::channel_scale(self.value(input), factors)?;
        Ok(self.push(Op::ChannelScale(input, factors.to_vec()), value, None, &[input]))
    }

    /// `(input − shift) · scale` per channel; the shift carries no gradient.
    pub fn channel_affine(&mut self, input: Var, scale: &[f32], shift: &[f32]) -> Result<Var> {
        let value = ops::channel_affine(self.value(input), scale, shift)?;
        Ok(self.push(Op::ChannelScale(input, scale.to_vec()), value, None, &[input]))
    }

    pub fn channel_l2_normalize(&mut self, input: Var, epsilon: f32) -> Result<Var> {
        let (value, norms) = ops::channel_l2_normalize_with_norms(self.value(input), epsilon)?;
        Ok(self.push(Op::Normalize { input, norms }, value, None, &[input]))
    }

    pub fn dropout(&mut self, input: Var, mask: &Tensor, keep_prob: f32) -> Result<Var> {
        let value = ops::dropout_mask_apply(self.value(input), mask, keep_prob)?;
        let factors = mask.map(|m| m / keep_prob);
        Ok(self.push(Op::Dropout { input, factors }, value, None, &[input]))
    }

    pub fn reduce_sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.push(Op::Sum(input), Tensor::scalar(s as f32), Some(s), &[input])
    }

    pub fn reduce_mean(&mut self, input: Var) -> Var {
        let m = self.value(input).mean();
        self.push(Op::Mean(input), Tensor::scalar(m as f32), Some(m), &[input])
    }

    /// Reverse accumulation from a one-element objective. Leaves that the
    /// objective does not depend on receive exact zeros.
    pub fn backward(&self, objective: Var, leaves: &[Var]) -> Result<GradientMap> {
        let root = &self.nodes[objective.0];
        if root.value.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("objective must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        for leaf in leaves {
            if !matches!(self.nodes.get(leaf.0).map(|n| &n.op), Some(Op::Leaf)) {
                return Err(Error::contract("backward", format!("{leaf:?} is not a leaf")));
            }
        }

        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(objective.0 + 1, || None);
        grads[objective.0] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut found: Vec<(Var, Tensor)> = Vec::new();

        for i in (0..=objective.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if leaves.contains(&Var(i)) {
                        found.push((Var(i), g));
                    }
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *b, g.clone());
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *b, g.scaled(-1.0));
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |g, y| g * y)?;
                    let gb = g.zip_map(self.value(*a), |g, x| g * x)?;
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, alpha) => self.accumulate(&mut grads, *a, g.scaled(*alpha)),
                Op::Conv { input, kernel } => {
                    let gi = ops::conv2d_same_backward(&g, self.shape(*input), kernel);
                    self.accumulate(&mut grads, *input, gi);
                }
                Op::Relu(a) => {
                    let gi = ops::relu_backward(&g, self.value(*a));
                    self.accumulate(&mut grads, *a, gi);
                }
                Op::AvgPool(a) => {
                    let gi = ops::avg_pool_2x2_backward(&g, self.shape(*a));
                    self.accumulate(&mut grads, *a, gi);
                }
                Op::MirrorPad(a, pads) => {
                    let gi = ops::mirror_pad_backward(&g, self.shape(*a), *pads);
                    self.accumulate(&mut grads, *a, gi);
                }
                Op::Downscale(a, factor) => {
                    let gi = ops::downscale_box_backward(&g, self.shape(*a), *factor);
                    self.accumulate(&mut grads, *a, gi);
                }
                Op::FlipX(a) => self.accumulate(&mut grads, *a, ops::flip_x(&g)?),
                Op::FlipY(a) => self.accumulate(&mut grads, *a, ops::flip_y(&g)?),
                Op::SwapXY(a) => self.accumulate(&mut grads, *a, ops::swap_xy(&g)?),
                Op::Permute(a, perm) => {
                    let gi = ops::permute_channels(&g, &ops::inverse_permutation(perm))?;
                    self.accumulate(&mut grads, *a, gi);
                }
                Op::ChannelScale(a, factors) => {
                    self.accumulate(&mut grads, *a, ops::channel_scale(&g, factors)?)
                }
                Op::Normalize { input, norms } => {
                    let gi = ops::channel_l2_normalize_backward(&g, self.value(*input), norms);
                    self.accumulate(&mut grads, *input, gi);
                }
                Op::Dropout { input, factors } => {
                    self.accumulate(&mut grads, *input, g.zip_map(factors, |g, f| g * f)?)
                }
                Op::Sum(a) => {
                    let gi = Tensor::full(self.shape(*a), g.item());
                    self.accumulate(&mut grads, *a, gi);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len().max(1) as f32;
                    let gi = Tensor::full(self.shape(*a), g.item() / n);
                    self.accumulate(&mut grads, *a, gi);
                }
            }
        }

        let entries = leaves
            .iter()
            .map(|&leaf| {
                let g = match found.iter().position(|(v, _)| *v == leaf) {
                    Some(i) => found.swap_remove(i).1,
                    None => Tensor::zeros(self.shape(leaf)),
                };
                (leaf, g)
            })
            .collect();
        Ok(GradientMap { entries })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, g: Tensor) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Convenience: gradient of a scalar-valued graph function at `x`.
pub fn value_and_grad<'a>(
    x: &Tensor,
    f: impl FnOnce(&mut Graph<'a>, Var) -> Result<Var>,
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let out = f(&mut g, leaf)?;
    let value = g.scalar(out);
    let mut grads = g.backward(out, &[leaf])?;
    Ok((value, grads.take(leaf).unwrap_or_else(|| Tensor::zeros(x.shape()))))
}
