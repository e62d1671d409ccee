//! Forward kernels and their vector-Jacobian products.
//!
//! Every public function here is a pure tensor → tensor map. The tape in
//! [`crate::graph`] records which kernel produced a node and calls the
//! matching `*_backward` routine during reverse accumulation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Padding amounts in the (left, top, right, bottom) order used by the
/// transform pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Pads {
    pub left: usize,
    pub top: usize,
    pub right: usize,
    pub bottom: usize,
}

impl Pads {
    pub const fn new(left: usize, top: usize, right: usize, bottom: usize) -> Self {
        Pads {
            left,
            top,
            right,
            bottom,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Pads::default()
    }
}

/// Symmetric (edge-inclusive) reflection of a padded coordinate back into
/// `0..n`. Valid for `pos` in `-n..2n`.
#[inline]
pub(crate) fn reflect(pos: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if pos < 0 {
        -pos - 1
    } else if pos >= n {
        2 * n - pos - 1
    } else {
        pos
    };
    debug_assert!((0..n).contains(&r));
    r as usize
}

// ---------------------------------------------------------------- conv ----

pub fn conv2d_same(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, cin) = input.hwc()?;
    let cout = check_conv_shapes(cin, kernel, bias)?;
    let k = kernel.data();
    let x = input.data();
    let mut out = vec![0.0f32; h * w * cout];
    for oy in 0..h {
        for ox in 0..w {
            let acc = &mut out[(oy * w + ox) * cout..][..cout];
            acc.copy_from_slice(bias.data());
            for ky in 0..3 {
                let iy = oy as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = ox as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &x[(iy as usize * w + ix as usize) * cin..][..cin];
                    let taps = &k[(ky * 3 + kx) * cin * cout..][..cin * cout];
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &taps[ci * cout..][..cout];
                        for (a, &wv) in acc.iter_mut().zip(row) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, cout], out)
}

fn check_conv_shapes(cin: usize, kernel: &Tensor, bias: &Tensor) -> Result<usize> {
    let ks = kernel.shape();
    if ks.len() != 4 || ks[0] != 3 || ks[1] != 3 {
        return Err(Error::contract(
            "conv2d_same",
            format!("kernel must be 3×3×Cin×Cout, got {ks:?}"),
        ));
    }
    if ks[2] != cin {
        return Err(Error::contract(
            "conv2d_same",
            format!("input has {cin} channels but kernel expects {}", ks[2]),
        ));
    }
    if bias.shape() != [ks[3]] {
        return Err(Error::contract(
            "conv2d_same",
            format!("bias shape {:?} does not match {} output channels", bias.shape(), ks[3]),
        ));
    }
    Ok(ks[3])
}

/// Gradient of `conv2d_same` with respect to its input.
pub(crate) fn conv2d_same_backward(grad_out: &Tensor, input_shape: &[usize], kernel: &Tensor) -> Tensor {
    let (h, w, cin) = (input_shape[0], input_shape[1], input_shape[2]);
    let cout = kernel.shape()[3];
    let k = kernel.data();
    let g = grad_out.data();
    let mut gin = vec![0.0f32; h * w * cin];
    for oy in 0..h {
        for ox in 0..w {
            let go = &g[(oy * w + ox) * cout..][..cout];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..3 {
                let iy = oy as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = ox as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = &mut gin[(iy as usize * w + ix as usize) * cin..][..cin];
                    let taps = &k[(ky * 3 + kx) * cin * cout..][..cin * cout];
                    for (ci, d) in dst.iter_mut().enumerate() {
                        let row = &taps[ci * cout..][..cout];
                        let mut s = 0.0f32;
                        for (&wv, &gv) in row.iter().zip(go) {
                            s += wv * gv;
                        }
                        *d += s;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape, gin).expect("shape preserved")
}

// ---------------------------------------------------------- pointwise ----

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub(crate) fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Tensor {
    grad_out
        .zip_map(input, |g, v| if v > 0.0 { g } else { 0.0 })
        .expect("same shape")
}

/// `input · mask / keep_prob` with a {0, 1} mask.
pub fn dropout_mask_apply(input: &Tensor, mask: &Tensor, keep_prob: f32) -> Result<Tensor> {
    input
        .expect_same_shape(mask, "dropout_mask_apply")
        .map_err(|_| {
            Error::contract(
                "dropout_mask_apply",
                format!("mask shape {:?} != input shape {:?}", mask.shape(), input.shape()),
            )
        })?;
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::contract(
            "dropout_mask_apply",
            format!("keep probability {keep_prob} outside (0, 1]"),
        ));
    }
    input.zip_map(mask, |v, m| v * (m / keep_prob))
}

/// Multiplies channel `c` of an H×W×C tensor by `factors[c]`.
pub fn channel_scale(input: &Tensor, factors: &[f32]) -> Result<Tensor> {
    let (_, _, c) = input.hwc()?;
    if factors.len() != c {
        return Err(Error::contract(
            "channel_scale",
            format!("{} factors for {c} channels", factors.len()),
        ));
    }
    let mut out = input.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (v, &s) in px.iter_mut().zip(factors) {
            *v *= s;
        }
    }
    Ok(out)
}

/// `(input − shift[c]) · scale[c]` per channel.
pub fn channel_affine(input: &Tensor, scale: &[f32], shift: &[f32]) -> Result<Tensor> {
    let (_, _, c) = input.hwc()?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::contract(
            "channel_affine",
            format!("{}/{} constants for {c} channels", scale.len(), shift.len()),
        ));
    }
    let mut out = input.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for ((v, &s), &t) in px.iter_mut().zip(scale).zip(shift) {
            *v = (*v - t) * s;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------- reductions ----

/// Per-pixel norms `sqrt(Σ v² + epsilon)` of an H×W×C tensor.
fn pixel_norms(input: &Tensor, c: usize, epsilon: f32) -> Vec<f32> {
    input
        .data()
        .chunks_exact(c)
        .map(|px| {
            let s: f64 = px.iter().map(|&v| v as f64 * v as f64).sum();
            libm::sqrt(s + epsilon as f64) as f32
        })
        .collect()
}

pub fn channel_l2_normalize(input: &Tensor, epsilon: f32) -> Result<Tensor> {
    Ok(channel_l2_normalize_with_norms(input, epsilon)?.0)
}

pub(crate) fn channel_l2_normalize_with_norms(input: &Tensor, epsilon: f32) -> Result<(Tensor, Vec<f32>)> {
    let (_, _, c) = input.hwc()?;
    if !(epsilon > 0.0) {
        return Err(Error::contract(
            "channel_l2_normalize",
            format!("epsilon must be positive, got {epsilon}"),
        ));
    }
    let norms = pixel_norms(input, c, epsilon);
    let mut out = input.clone();
    for (px, &n) in out.data_mut().chunks_exact_mut(c).zip(&norms) {
        for v in px {
            *v /= n;
        }
    }
    Ok((out, norms))
}

/// d/dv of v / sqrt(|v|² + ε): g/n − v (v·g)/n³.
pub(crate) fn channel_l2_normalize_backward(grad_out: &Tensor, input: &Tensor, norms: &[f32]) -> Tensor {
    let c = input.shape()[2];
    let mut gin = vec![0.0f32; input.len()];
    for (((dst, px), g), &n) in gin
        .chunks_exact_mut(c)
        .zip(input.data().chunks_exact(c))
        .zip(grad_out.data().chunks_exact(c))
        .zip(norms)
    {
        let n = n as f64;
        let vg: f64 = px.iter().zip(g).map(|(&v, &g)| v as f64 * g as f64).sum();
        let n3 = n * n * n;
        for ((d, &v), &gv) in dst.iter_mut().zip(px).zip(g) {
            *d = (gv as f64 / n - v as f64 * vg / n3) as f32;
        }
    }
    Tensor::new(input.shape(), gin).expect("shape preserved")
}

// ------------------------------------------------------------- spatial ----

/// 2×2 average pooling with stride 2. Odd extents produce a trailing
/// window that averages only its in-bounds cells.
pub fn avg_pool_2x2(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let x = input.data();
    let mut out = vec![0.0f32; oh * ow * c];
    let mut acc = vec![0.0f64; c];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let ys = 2 * oy..(2 * oy + 2).min(h);
            let xs = 2 * ox..(2 * ox + 2).min(w);
            let count = (ys.len() * xs.len()) as f64;
            for y in ys {
                for xx in xs.clone() {
                    for (a, &v) in acc.iter_mut().zip(&x[(y * w + xx) * c..][..c]) {
                        *a += v as f64;
                    }
                }
            }
            for (o, a) in out[(oy * ow + ox) * c..][..c].iter_mut().zip(&acc) {
                *o = (a / count) as f32;
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

pub(crate) fn avg_pool_2x2_backward(grad_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let ow = w.div_ceil(2);
    let g = grad_out.data();
    let mut gin = vec![0.0f32; h * w * c];
    for y in 0..h {
        let cy = if (y / 2) * 2 + 1 < h { 2 } else { 1 };
        for x in 0..w {
            let cx = if (x / 2) * 2 + 1 < w { 2 } else { 1 };
            let inv = 1.0 / (cy * cx) as f32;
            let src = &g[((y / 2) * ow + x / 2) * c..][..c];
            for (d, &gv) in gin[(y * w + x) * c..][..c].iter_mut().zip(src) {
                *d = gv * inv;
            }
        }
    }
    Tensor::new(input_shape, gin).expect("shape preserved")
}

fn check_pads(op: &'static str, h: usize, w: usize, pads: Pads) -> Result<()> {
    let too_big = |p: usize, n: usize| p > 0 && p >= n;
    if too_big(pads.left, w) || too_big(pads.right, w) || too_big(pads.top, h) || too_big(pads.bottom, h) {
        return Err(Error::contract(
            op,
            format!("pads {pads:?} must each be smaller than the {h}×{w} extent they reflect"),
        ));
    }
    Ok(())
}

/// Symmetric reflection padding, edge pixels included in the reflection.
pub fn mirror_pad(input: &Tensor, pads: Pads) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    check_pads("mirror_pad", h, w, pads)?;
    if pads.is_zero() {
        return Ok(input.clone());
    }
    let (oh, ow) = (h + pads.top + pads.bottom, w + pads.left + pads.right);
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        let sy = reflect(oy as isize - pads.top as isize, h);
        for ox in 0..ow {
            let sx = reflect(ox as isize - pads.left as isize, w);
            out.extend_from_slice(&x[(sy * w + sx) * c..][..c]);
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

pub(crate) fn mirror_pad_backward(grad_out: &Tensor, input_shape: &[usize], pads: Pads) -> Tensor {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (grad_out.shape()[0], grad_out.shape()[1]);
    let g = grad_out.data();
    let mut gin = vec![0.0f32; h * w * c];
    for oy in 0..oh {
        let sy = reflect(oy as isize - pads.top as isize, h);
        for ox in 0..ow {
            let sx = reflect(ox as isize - pads.left as isize, w);
            for (d, &gv) in gin[(sy * w + sx) * c..][..c].iter_mut().zip(&g[(oy * ow + ox) * c..][..c]) {
                *d += gv;
            }
        }
    }
    Tensor::new(input_shape, gin).expect("shape preserved")
}

/// Non-overlapping `factor`×`factor` box averaging. Extents that are not a
/// multiple of `factor` are first mirror-padded on the right/bottom.
pub fn downscale_box(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    if factor < 1 {
        return Err(Error::contract("downscale_box", "factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let pads = downscale_pads(h, w, factor);
    check_pads("downscale_box", h, w, pads)?;
    let (oh, ow) = ((h + pads.bottom) / factor, (w + pads.right) / factor);
    let x = input.data();
    let count = (factor * factor) as f64;
    let mut out = vec![0.0f32; oh * ow * c];
    let mut acc = vec![0.0f64; c];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for py in oy * factor..(oy + 1) * factor {
                let sy = reflect(py as isize, h);
                for px in ox * factor..(ox + 1) * factor {
                    let sx = reflect(px as isize, w);
                    for (a, &v) in acc.iter_mut().zip(&x[(sy * w + sx) * c..][..c]) {
                        *a += v as f64;
                    }
                }
            }
            for (o, a) in out[(oy * ow + ox) * c..][..c].iter_mut().zip(&acc) {
                *o = (a / count) as f32;
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

pub(crate) fn downscale_pads(h: usize, w: usize, factor: usize) -> Pads {
    Pads::new(0, 0, (factor - w % factor) % factor, (factor - h % factor) % factor)
}

pub(crate) fn downscale_box_backward(grad_out: &Tensor, input_shape: &[usize], factor: usize) -> Tensor {
    if factor == 1 {
        return grad_out.clone();
    }
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (grad_out.shape()[0], grad_out.shape()[1]);
    let inv = 1.0 / (factor * factor) as f32;
    let g = grad_out.data();
    let mut gin = vec![0.0f32; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let src = &g[(oy * ow + ox) * c..][..c];
            for py in oy * factor..(oy + 1) * factor {
                let sy = reflect(py as isize, h);
                for px in ox * factor..(ox + 1) * factor {
                    let sx = reflect(px as isize, w);
                    for (d, &gv) in gin[(sy * w + sx) * c..][..c].iter_mut().zip(src) {
                        *d += gv * inv;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape, gin).expect("shape preserved")
}

/// Reverses the width axis.
pub fn flip_x(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    let x = input.data();
    let mut out = Vec::with_capacity(x.len());
    for y in 0..h {
        for xx in (0..w).rev() {
            out.extend_from_slice(&x[(y * w + xx) * c..][..c]);
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Reverses the height axis.
pub fn flip_y(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    let x = input.data();
    let mut out = Vec::with_capacity(x.len());
    for y in (0..h).rev() {
        out.extend_from_slice(&x[y * w * c..][..w * c]);
    }
    Tensor::new(&[h, w, c], out)
}

/// Transposes the two spatial axes.
pub fn swap_xy(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    let x = input.data();
    let mut out = Vec::with_capacity(x.len());
    for xx in 0..w {
        for y in 0..h {
            out.extend_from_slice(&x[(y * w + xx) * c..][..c]);
        }
    }
    Tensor::new(&[w, h, c], out)
}

/// Output channel `c` takes input channel `perm[c]`.
pub fn permute_channels(input: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    let mut seen = vec![false; c];
    if perm.len() != c || perm.iter().any(|&p| p >= c || core::mem::replace(&mut seen[p], true)) {
        return Err(Error::contract(
            "permute_channels",
            format!("{perm:?} is not a permutation of {c} channels"),
        ));
    }
    let mut out = Vec::with_capacity(input.len());
    for px in input.data().chunks_exact(c) {
        out.extend(perm.iter().map(|&p| px[p]));
    }
    Tensor::new(&[h, w, c], out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
