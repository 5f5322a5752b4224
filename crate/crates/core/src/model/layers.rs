//! Layer primitives with explicit backward rules.
//!
//! All tensors are channel-major. Convolutions are lowered to matrix
//! products over an im2col buffer.

use crate::tensor::Tensor3;

/// Geometry of a square, stride-1, "same"-padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }
}

/// im2col buffer: `patch_len` rows by `height*width` columns.
pub fn im2col(input: &Tensor3, geom: &ConvGeom) -> Vec<f64> {
    let (h, w) = (input.height, input.width);
    let n = h * w;
    let k = geom.kernel;
    let pad = geom.padding() as isize;
    let d = geom.dilation as isize;
    let mut col = vec![0.0; geom.patch_len() * n];
    for ci in 0..geom.in_channels {
        let plane = input.plane(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                let oy = ky as isize * d - pad;
                let ox = kx as isize * d - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = ((w as isize - ox).min(w as isize)).max(0) as usize;
                    for x in x_lo..x_hi {
                        dst_row[x] = src_row[(x as isize + ox) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of an im2col gradient buffer back onto the input grid.
pub fn col2im(col: &[f64], geom: &ConvGeom, height: usize, width: usize) -> Tensor3 {
    let (h, w) = (height, width);
    let n = h * w;
    let k = geom.kernel;
    let pad = geom.padding() as isize;
    let d = geom.dilation as isize;
    let mut out = Tensor3::zeros(geom.in_channels, h, w);
    for ci in 0..geom.in_channels {
        let plane = out.plane_mut(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                let oy = ky as isize * d - pad;
                let ox = kx as isize * d - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = ((w as isize - ox).min(w as isize)).max(0) as usize;
                    for x in x_lo..x_hi {
                        plane[sy as usize * w + (x as isize + ox) as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// `c[m×n] = beta*c + a[m×k] · b[k×n]`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers below size every buffer exactly for the given
    // dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution. Returns the output and the im2col buffer needed by
/// the backward pass (empty for 1×1 kernels, whose patch matrix is the input
/// itself).
pub fn conv2d_forward(
    input: &Tensor3,
    weight: &[f64],
    bias: &[f64],
    geom: &ConvGeom,
) -> (Tensor3, Vec<f64>) {
    assert_eq!(input.channels, geom.in_channels, "conv input channels");
    assert_eq!(weight.len(), geom.out_channels * geom.patch_len());
    assert_eq!(bias.len(), geom.out_channels);
    let n = input.plane_len();
    let col = if geom.kernel == 1 {
        Vec::new()
    } else {
        im2col(input, geom)
    };
    let patches: &[f64] = if geom.kernel == 1 { &input.data } else { &col };
    let mut out = Tensor3::zeros(geom.out_channels, input.height, input.width);
    for (o, &b) in bias.iter().enumerate() {
        out.plane_mut(o).fill(b);
    }
    let kk = geom.patch_len();
    gemm(
        geom.out_channels,
        kk,
        n,
        weight,
        kk as isize,
        1,
        patches,
        n as isize,
        1,
        1.0,
        &mut out.data,
    );
    (out, col)
}

pub struct ConvGrads {
    pub input: Option<Tensor3>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backward convolution. `patches` is the im2col buffer returned by the
/// forward pass, or the input data itself for 1×1 kernels.
pub fn conv2d_backward(
    grad_out: &Tensor3,
    patches: &[f64],
    weight: &[f64],
    geom: &ConvGeom,
    need_input_grad: bool,
) -> ConvGrads {
    let n = grad_out.plane_len();
    let kk = geom.patch_len();
    let mut gw = vec![0.0; geom.out_channels * kk];
    // dW = dY · patchesᵀ
    gemm(
        geom.out_channels,
        n,
        kk,
        &grad_out.data,
        n as isize,
        1,
        patches,
        1,
        n as isize,
        0.0,
        &mut gw,
    );
    let gb = (0..geom.out_channels)
        .map(|o| grad_out.plane(o).iter().sum())
        .collect();
    let input = need_input_grad.then(|| {
        let mut gcol = vec![0.0; kk * n];
        // dPatches = Wᵀ · dY
        gemm(
            kk,
            geom.out_channels,
            n,
            weight,
            1,
            kk as isize,
            &grad_out.data,
            n as isize,
            1,
            0.0,
            &mut gcol,
        );
        if geom.kernel == 1 {
            Tensor3::from_vec(geom.in_channels, grad_out.height, grad_out.width, gcol)
                .expect("1x1 conv input grad shape")
        } else {
            col2im(&gcol, geom, grad_out.height, grad_out.width)
        }
    });
    ConvGrads {
        input,
        weight: gw,
        bias: gb,
    }
}

pub fn relu_inplace(t: &mut Tensor3) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` by the positive entries of the rectifier output.
pub fn relu_backward_inplace(grad: &mut Tensor3, activ: &Tensor3) {
    for (g, &a) in grad.data.iter_mut().zip(&activ.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `max(x, slope·x)` for `0 < slope < 1`.
pub fn leaky_relu_inplace(t: &mut Tensor3, slope: f64) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Backward of [`leaky_relu_inplace`] given its output.
pub fn leaky_relu_backward_inplace(grad: &mut Tensor3, activ: &Tensor3, slope: f64) {
    for (g, &a) in grad.data.iter_mut().zip(&activ.data) {
        if a < 0.0 {
            *g *= slope;
        }
    }
}

/// Non-overlapping `k×k` average pooling with stride `k`.
pub fn avg_pool_forward(input: &Tensor3, k: usize) -> Tensor3 {
    if k == 1 {
        return input.clone();
    }
    let (oh, ow) = (input.height / k, input.width / k);
    let mut out = Tensor3::zeros(input.channels, oh, ow);
    let inv = 1.0 / (k * k) as f64;
    for c in 0..input.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..oh * k {
            let row = &src[y * input.width..y * input.width + ow * k];
            let drow = &mut dst[(y / k) * ow..(y / k + 1) * ow];
            for (x, v) in row.iter().enumerate() {
                drow[x / k] += v;
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    out
}

pub fn avg_pool_backward(grad_out: &Tensor3, k: usize, height: usize, width: usize) -> Tensor3 {
    if k == 1 {
        return grad_out.clone();
    }
    let mut out = Tensor3::zeros(grad_out.channels, height, width);
    let inv = 1.0 / (k * k) as f64;
    let ow = grad_out.width;
    for c in 0..grad_out.channels {
        let src = grad_out.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..grad_out.height * k {
            for x in 0..ow * k {
                dst[y * width + x] = src[(y / k) * ow + x / k] * inv;
            }
        }
    }
    out
}

/// Interpolation taps along one axis for corner-aligned resampling from
/// `src` samples to `dst` samples.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0.0);
            }
            let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
            let i0 = (pos.floor() as usize).min(src - 2);
            (i0, pos - i0 as f64)
        })
        .collect()
}

fn lerp_pair(src: usize, i0: usize) -> usize {
    if src == 1 {
        0
    } else {
        i0 + 1
    }
}

/// Channel-separable bilinear upsampling by an integer factor, using the
/// corner-aligned convention (first and last samples map onto the first and
/// last output pixels). Factor 1 returns an identical copy.
pub fn bilinear_upsample(input: &Tensor3, factor: usize) -> Tensor3 {
    assert!(factor >= 1, "upsample factor must be positive");
    if factor == 1 {
        return input.clone();
    }
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (h * factor, w * factor);
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = Tensor3::zeros(input.channels, oh, ow);
    let mut rows = vec![0.0; h * ow];
    for c in 0..input.channels {
        let src = input.plane(c);
        for y in 0..h {
            for (x, &(x0, t)) in tx.iter().enumerate() {
                let a = src[y * w + x0];
                let b = src[y * w + lerp_pair(w, x0)];
                rows[y * ow + x] = (1.0 - t) * a + t * b;
            }
        }
        let dst = out.plane_mut(c);
        for (y, &(y0, t)) in ty.iter().enumerate() {
            let y1 = lerp_pair(h, y0);
            for x in 0..ow {
                dst[y * ow + x] = (1.0 - t) * rows[y0 * ow + x] + t * rows[y1 * ow + x];
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_upsample`].
pub fn bilinear_upsample_backward(
    grad_out: &Tensor3,
    factor: usize,
    height: usize,
    width: usize,
) -> Tensor3 {
    if factor == 1 {
        return grad_out.clone();
    }
    let (oh, ow) = (grad_out.height, grad_out.width);
    let ty = axis_taps(height, oh);
    let tx = axis_taps(width, ow);
    let mut out = Tensor3::zeros(grad_out.channels, height, width);
    let mut rows = vec![0.0; height * ow];
    for c in 0..grad_out.channels {
        rows.fill(0.0);
        let g = grad_out.plane(c);
        for (y, &(y0, t)) in ty.iter().enumerate() {
            let y1 = lerp_pair(height, y0);
            for x in 0..ow {
                let v = g[y * ow + x];
                rows[y0 * ow + x] += (1.0 - t) * v;
                rows[y1 * ow + x] += t * v;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..height {
            for (x, &(x0, t)) in tx.iter().enumerate() {
                let v = rows[y * ow + x];
                dst[y * width + x0] += (1.0 - t) * v;
                dst[y * width + lerp_pair(width, x0)] += t * v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_tensor, naive_bilinear, naive_conv, rand_tensor, rel_err, rng};

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut r = rng(1);
        for (k, d) in [(3, 1), (3, 2), (3, 4), (1, 1)] {
            let g = ConvGeom {
                in_channels: 3,
                out_channels: 4,
                kernel: k,
                dilation: d,
            };
            let x = rand_tensor(&mut r, 3, 9, 7, -1.0, 1.0);
            let w = rand_tensor(&mut r, 1, 1, 4 * g.patch_len(), -1.0, 1.0).data;
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let (y, _) = conv2d_forward(&x, &w, &b, &g);
            let o = naive_conv(&x, &w, &b, &g);
            assert!(rel_err(&y.data, &o.data) < 1e-12, "k={k} d={d}");
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        let mut r = rng(2);
        let g = ConvGeom {
            in_channels: 2,
            out_channels: 1,
            kernel: 3,
            dilation: 2,
        };
        let x = rand_tensor(&mut r, 2, 6, 5, -1.0, 1.0);
        let c = rand_tensor(&mut r, 1, 1, g.patch_len() * 30, -1.0, 1.0).data;
        let lhs = dot(&im2col(&x, &g), &c);
        let rhs = dot(&x.data, &col2im(&c, &g, 6, 5).data);
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng(3);
        for (k, d) in [(3, 1), (3, 2), (1, 1)] {
            let g = ConvGeom {
                in_channels: 2,
                out_channels: 3,
                kernel: k,
                dilation: d,
            };
            let x = rand_tensor(&mut r, 2, 5, 6, -1.0, 1.0);
            let w = rand_tensor(&mut r, 1, 1, 3 * g.patch_len(), -1.0, 1.0);
            let b = rand_tensor(&mut r, 1, 1, 3, -1.0, 1.0);
            let up = rand_tensor(&mut r, 3, 5, 6, -1.0, 1.0);
            let loss = |x: &Tensor3, w: &[f64], b: &[f64]| dot(&conv2d_forward(x, w, b, &g).0.data, &up.data);
            let (_, col) = conv2d_forward(&x, &w.data, &b.data, &g);
            let patches = if k == 1 { x.data.clone() } else { col };
            let cg = conv2d_backward(&up, &patches, &w.data, &g, true);
            let nx = fd_tensor(&x, 1e-4, |x| loss(x, &w.data, &b.data));
            let nw = fd_tensor(&w, 1e-4, |w| loss(&x, &w.data, &b.data));
            let nb = fd_tensor(&b, 1e-4, |b| loss(&x, &w.data, &b.data));
            assert!(rel_err(&cg.input.unwrap().data, &nx) < 1e-8);
            assert!(rel_err(&cg.weight, &nw) < 1e-8);
            assert!(rel_err(&cg.bias, &nb) < 1e-8);
        }
    }

    #[test]
    fn rectifiers_and_their_backward_rules() {
        let mut t = Tensor3::from_vec(1, 1, 4, vec![-2.0, -0.5, 0.0, 3.0]).unwrap();
        let mut l = t.clone();
        relu_inplace(&mut t);
        assert_eq!(t.data, vec![0.0, 0.0, 0.0, 3.0]);
        let mut g = Tensor3::filled(1, 1, 4, 1.0);
        relu_backward_inplace(&mut g, &t);
        assert_eq!(g.data, vec![0.0, 0.0, 0.0, 1.0]);
        leaky_relu_inplace(&mut l, 0.2);
        assert_eq!(l.data, vec![-0.4, -0.1, 0.0, 3.0]);
        let mut g = Tensor3::filled(1, 1, 4, 1.0);
        leaky_relu_backward_inplace(&mut g, &l, 0.2);
        assert_eq!(g.data, vec![0.2, 0.2, 1.0, 1.0]);
    }

    #[test]
    fn avg_pool_values_and_adjoint() {
        let x = Tensor3::from_vec(1, 2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = avg_pool_forward(&x, 2);
        assert_eq!(y.shape(), (1, 1, 2));
        assert_eq!(y.data, vec![3.5, 5.5]);
        assert_eq!(avg_pool_forward(&x, 1), x);

        let mut r = rng(4);
        let x = rand_tensor(&mut r, 2, 8, 8, -1.0, 1.0);
        let g = rand_tensor(&mut r, 2, 2, 2, -1.0, 1.0);
        let lhs = dot(&avg_pool_forward(&x, 4).data, &g.data);
        let rhs = dot(&x.data, &avg_pool_backward(&g, 4, 8, 8).data);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_two_by_two_closed_form() {
        let x = Tensor3::from_vec(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_upsample(&x, 2);
        assert_eq!(y.shape(), (1, 4, 4));
        // corners are the original samples
        assert_eq!(y.get(0, 0, 0), 0.0);
        assert_eq!(y.get(0, 0, 3), 1.0);
        assert_eq!(y.get(0, 3, 0), 2.0);
        assert_eq!(y.get(0, 3, 3), 3.0);
        // f(u, v) = u + 2v on the unit square, sampled at thirds
        for yy in 0..4 {
            for xx in 0..4 {
                let want = xx as f64 / 3.0 + 2.0 * yy as f64 / 3.0;
                assert!((y.get(0, yy, xx) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_identity_constants_and_oracle() {
        let mut r = rng(5);
        let x = rand_tensor(&mut r, 3, 4, 5, -1.0, 1.0);
        assert_eq!(bilinear_upsample(&x, 1), x);
        let c = Tensor3::filled(2, 3, 3, 0.7);
        assert!(bilinear_upsample(&c, 8).data.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        for f in [2, 3, 8] {
            let y = bilinear_upsample(&x, f);
            assert!(rel_err(&y.data, &naive_bilinear(&x, f).data) < 1e-12);
        }
        let one = Tensor3::from_vec(1, 1, 1, vec![0.3]).unwrap();
        assert!(bilinear_upsample(&one, 4).data.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn bilinear_backward_is_the_adjoint() {
        let mut r = rng(6);
        for (h, w, f) in [(4, 4, 8), (3, 5, 2), (1, 3, 4)] {
            let x = rand_tensor(&mut r, 2, h, w, -1.0, 1.0);
            let g = rand_tensor(&mut r, 2, h * f, w * f, -1.0, 1.0);
            let lhs = dot(&bilinear_upsample(&x, f).data, &g.data);
            let rhs = dot(&x.data, &bilinear_upsample_backward(&g, f, h, w).data);
            assert!((lhs - rhs).abs() < 1e-10, "{h}x{w} f={f}");
        }
    }

    proptest::proptest! {
        #[test]
        fn bilinear_stays_within_channel_range(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            f in 1usize..6,
        ) {
            let x = Tensor3::from_vec(1, 3, 4, vals).unwrap();
            let (lo, hi) = x.min_max();
            let y = bilinear_upsample(&x, f);
            proptest::prop_assert!(y.data.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }
}
