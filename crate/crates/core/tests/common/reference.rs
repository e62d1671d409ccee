//! Double-precision reference forward passes written as plain loops. They
//! serve as the function under finite differences: the library stores
//! tensors in 32 bits, and differencing its own forward pass at h = 1e-3
//! leaves a rounding floor near 1e-4 on every derivative.

use elpips_core::convnet::{DropoutPlan, Layer, WeightContainer};
use elpips_core::transforms::TransformParams;
use elpips_core::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Img {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl Img {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Img { h, w, c, v: vec![0.0; h * w * c] }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.v[(y * self.w + x) * self.c + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, val: f64) {
        self.v[(y * self.w + x) * self.c + c] = val;
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Img { h: s[0], w: s[1], c: s[2], v: t.data().iter().map(|&x| x as f64).collect() }
    }

    pub fn map(&self, f: impl Fn(usize, usize, usize, f64) -> f64) -> Img {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..self.c {
                    out.set(y, x, c, f(y, x, c, self.at(y, x, c)));
                }
            }
        }
        out
    }
}

pub fn dot(a: &Img, r: &Tensor) -> f64 {
    a.v.iter().zip(r.data()).map(|(x, &y)| x * y as f64).sum()
}

fn mirror(p: isize, n: usize) -> usize {
    let n = n as isize;
    (if p < 0 {
        -1 - p
    } else if p >= n {
        2 * n - 1 - p
    } else {
        p
    }) as usize
}

pub fn conv_same(x: &Img, kernel: &Tensor, bias: &Tensor) -> Img {
    let (cin, cout) = (kernel.shape()[2], kernel.shape()[3]);
    let k = |ky: usize, kx: usize, i: usize, o: usize| kernel.data()[((ky * 3 + kx) * cin + i) * cout + o] as f64;
    let mut out = Img::zeros(x.h, x.w, cout);
    for y in 0..x.h {
        for xx in 0..x.w {
            for o in 0..cout {
                let mut acc = bias.data()[o] as f64;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                            continue;
                        }
                        for i in 0..cin {
                            acc += k(ky, kx, i, o) * x.at(sy as usize, sx as usize, i);
                        }
                    }
                }
                out.set(y, xx, o, acc);
            }
        }
    }
    out
}

pub fn relu(x: &Img) -> Img {
    x.map(|_, _, _, v| v.max(0.0))
}

pub fn avg_pool(x: &Img) -> Img {
    let (oh, ow) = (x.h.div_ceil(2), x.w.div_ceil(2));
    let mut out = Img::zeros(oh, ow, x.c);
    for y in 0..oh {
        for xx in 0..ow {
            for c in 0..x.c {
                let (mut s, mut n) = (0.0, 0.0);
                for sy in 2 * y..(2 * y + 2).min(x.h) {
                    for sx in 2 * xx..(2 * xx + 2).min(x.w) {
                        s += x.at(sy, sx, c);
                        n += 1.0;
                    }
                }
                out.set(y, xx, c, s / n);
            }
        }
    }
    out
}

/// Pads by (left, top, right, bottom) with symmetric reflection.
pub fn pad(x: &Img, l: usize, t: usize, r: usize, b: usize) -> Img {
    let mut out = Img::zeros(x.h + t + b, x.w + l + r, x.c);
    for y in 0..out.h {
        for xx in 0..out.w {
            for c in 0..x.c {
                let v = x.at(mirror(y as isize - t as isize, x.h), mirror(xx as isize - l as isize, x.w), c);
                out.set(y, xx, c, v);
            }
        }
    }
    out
}

pub fn downscale(x: &Img, s: usize) -> Img {
    let (oh, ow) = (x.h.div_ceil(s), x.w.div_ceil(s));
    let mut out = Img::zeros(oh, ow, x.c);
    for y in 0..oh {
        for xx in 0..ow {
            for c in 0..x.c {
                let mut acc = 0.0;
                for ky in 0..s {
                    for kx in 0..s {
                        acc += x.at(mirror((y * s + ky) as isize, x.h), mirror((xx * s + kx) as isize, x.w), c);
                    }
                }
                out.set(y, xx, c, acc / (s * s) as f64);
            }
        }
    }
    out
}

pub fn flip_x(x: &Img) -> Img {
    x.map(|y, xx, c, _| x.at(y, x.w - 1 - xx, c))
}

pub fn flip_y(x: &Img) -> Img {
    x.map(|y, xx, c, _| x.at(x.h - 1 - y, xx, c))
}

pub fn swap(x: &Img) -> Img {
    let mut out = Img::zeros(x.w, x.h, x.c);
    for y in 0..out.h {
        for xx in 0..out.w {
            for c in 0..x.c {
                out.set(y, xx, c, x.at(xx, y, c));
            }
        }
    }
    out
}

pub fn permute(x: &Img, perm: &[usize]) -> Img {
    x.map(|y, xx, c, _| x.at(y, xx, perm[c]))
}

pub fn channel_scale(x: &Img, f: &[f32]) -> Img {
    x.map(|_, _, c, v| v * f[c] as f64)
}

pub fn channel_affine(x: &Img, scale: &[f32], shift: &[f32]) -> Img {
    x.map(|_, _, c, v| (v - shift[c] as f64) * scale[c] as f64)
}

pub fn normalize(x: &Img, eps: f64) -> Img {
    let mut out = x.clone();
    for y in 0..x.h {
        for xx in 0..x.w {
            let n = ((0..x.c).map(|c| x.at(y, xx, c).powi(2)).sum::<f64>() + eps).sqrt();
            for c in 0..x.c {
                out.set(y, xx, c, x.at(y, xx, c) / n);
            }
        }
    }
    out
}

pub fn dropout(x: &Img, mask: &Tensor, keep: f64) -> Img {
    let mut out = x.clone();
    for (o, &m) in out.v.iter_mut().zip(mask.data()) {
        *o = *o * m as f64 / keep;
    }
    out
}

pub fn transform(x: &Img, p: &TransformParams) -> Img {
    let mut t = x.clone();
    if p.scale > 1 {
        t = downscale(&pad(&t, p.scale_dx, p.scale_dy, 0, 0), p.scale);
    }
    t = pad(&t, p.dx, p.dy, 7 - p.dx, 7 - p.dy);
    if p.flip_x {
        t = flip_x(&t);
    }
    if p.flip_y {
        t = flip_y(&t);
    }
    if p.swap_xy {
        t = swap(&t);
    }
    t = permute(&t, &p.col_perm);
    channel_scale(&t, &p.brightness)
}

/// Feature stack: preprocessed input, then every convolution output.
pub fn features(x: &Img, w: &WeightContainer, plan: Option<&DropoutPlan>) -> Vec<Img> {
    features_and_pattern(x, w, plan).0
}

/// Features plus the sign of every ReLU input, in order.
pub fn features_and_pattern(x: &Img, w: &WeightContainer, plan: Option<&DropoutPlan>) -> (Vec<Img>, Vec<bool>) {
    let keep = w.keep_prob();
    let drop = |l: usize, t: Img| match plan {
        Some(p) if keep < 1.0 => dropout(&t, &p.mask(l, &[t.h, t.w, t.c], keep), keep as f64),
        _ => t,
    };
    let mut out = vec![drop(0, channel_affine(x, w.preprocess_scale(), w.preprocess_shift()))];
    let layers = w.architecture().layers();
    let last = layers.iter().rposition(|l| matches!(l, Layer::Conv { .. })).unwrap();
    let mut cur = out[0].clone();
    let mut conv = 0;
    let mut pattern = Vec::new();
    for layer in &layers[..=last] {
        match layer {
            Layer::Conv { .. } => {
                conv += 1;
                let (k, b) = w.conv(conv);
                let pre = conv_same(&cur, k, b);
                pattern.extend(pre.v.iter().map(|&v| v > 0.0));
                cur = drop(conv, relu(&pre));
                out.push(cur.clone());
            }
            Layer::AvgPool => cur = avg_pool(&cur),
        }
    }
    (out, pattern)
}

pub fn feature_distance(fx: &[Img], fy: &[Img], w: &WeightContainer, eps: f64) -> f64 {
    let mut total = 0.0;
    for (l, (a, b)) in fx.iter().zip(fy).enumerate() {
        let (na, nb) = (normalize(a, eps), normalize(b, eps));
        let wl = w.layer_weight(l);
        let mut s = 0.0;
        for (i, (u, v)) in na.v.iter().zip(&nb.v).enumerate() {
            let d = wl[i % a.c] as f64 * (u - v);
            s += d * d;
        }
        total += s / (a.h * a.w) as f64;
    }
    total
}
