//! Oracles and helpers shared by the unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::layers::ConvGeom;
use crate::model::{ArchConfig, Image, LabelMap};
use crate::params::ParamSet;
use crate::tensor::Tensor3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor3 {
    let data = (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect();
    Tensor3::from_vec(c, h, w, data).unwrap()
}

pub fn rand_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::new(rand_tensor(rng, 3, h, w, 0.0, 1.0)).unwrap()
}

pub fn rand_labels(rng: &mut impl Rng, h: usize, w: usize, classes: u8) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

/// Three hidden layers, downsample 4, 8x8 inputs: a few hundred parameters.
pub fn tiny_arch(num_classes: usize) -> ArchConfig {
    ArchConfig {
        in_channels: 3,
        num_classes,
        widths: vec![4, 4, 5],
        dilations: vec![1, 2, 1],
        pools: vec![2, 2, 1],
    }
}

/// Direct nested-loop "same" convolution.
pub fn naive_conv(input: &Tensor3, weight: &[f64], bias: &[f64], g: &ConvGeom) -> Tensor3 {
    let (h, w) = (input.height, input.width);
    let k = g.kernel as isize;
    let pad = g.padding() as isize;
    let d = g.dilation as isize;
    let mut out = Tensor3::zeros(g.out_channels, h, w);
    for o in 0..g.out_channels {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = bias[o];
                for c in 0..g.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y + ky * d - pad;
                            let sx = x + kx * d - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let wi = ((o * g.in_channels + c) * g.kernel + ky as usize) * g.kernel
                                + kx as usize;
                            s += weight[wi] * input.get(c, sy as usize, sx as usize);
                        }
                    }
                }
                out.set(o, y as usize, x as usize, s);
            }
        }
    }
    out
}

/// Corner-aligned bilinear resampling written pixel by pixel.
pub fn naive_bilinear(input: &Tensor3, factor: usize) -> Tensor3 {
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (h * factor, w * factor);
    let pos = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if src == 1 {
            return (0, 0, 0.0);
        }
        let p = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (p.floor() as usize).min(src - 2);
        (lo, lo + 1, p - lo as f64)
    };
    let mut out = Tensor3::zeros(input.channels, oh, ow);
    for c in 0..input.channels {
        for y in 0..oh {
            let (y0, y1, ty) = pos(y, h, oh);
            for x in 0..ow {
                let (x0, x1, tx) = pos(x, w, ow);
                let v = (1.0 - ty) * ((1.0 - tx) * input.get(c, y0, x0) + tx * input.get(c, y0, x1))
                    + ty * ((1.0 - tx) * input.get(c, y1, x0) + tx * input.get(c, y1, x1));
                out.set(c, y, x, v);
            }
        }
    }
    out
}

/// Relative error of two gradient vectors in the Euclidean norm.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central differences of `f` with respect to every value of `params`.
pub fn fd_params(params: &ParamSet, step: f64, mut f: impl FnMut(&ParamSet) -> f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.num_values())
        .map(|i| {
            let v = p.value_at(i);
            p.set_value_at(i, v + step);
            let up = f(&p);
            p.set_value_at(i, v - step);
            let down = f(&p);
            p.set_value_at(i, v);
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Central differences of `f` with respect to every entry of `t`.
pub fn fd_tensor(t: &Tensor3, step: f64, mut f: impl FnMut(&Tensor3) -> f64) -> Vec<f64> {
    let mut x = t.clone();
    (0..t.data.len())
        .map(|i| {
            let v = x.data[i];
            x.data[i] = v + step;
            let up = f(&x);
            x.data[i] = v - step;
            let down = f(&x);
            x.data[i] = v;
            (up - down) / (2.0 * step)
        })
        .collect()
}
