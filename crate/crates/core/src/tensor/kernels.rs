//! Raw array kernels behind the differentiable ops.
//!
//! Convolution uses patch-matrix expansion (im2col) followed by a row-major
//! matrix product whose innermost loop runs over contiguous output pixels.
//! Every reduction runs in a fixed order, so results are bit-reproducible.

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom { c, h, w, k, stride, pad, ho, wo })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Expand one CHW image into a `(C·k·k) × (Ho·Wo)` patch matrix.
pub fn im2col(
    image: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let g = ConvGeom::new(c, h, w, k, stride, pad).expect("valid convolution geometry");
    let mut cols = vec![0.0; g.patch_len() * g.out_pixels()];
    im2col_into(image, &g, &mut cols);
    cols
}

pub(crate) fn im2col_into(image: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_pixels();
    for ci in 0..g.c {
        let plane = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch matrix back onto a CHW image (adjoint of [`im2col`]).
pub fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let g = ConvGeom::new(c, h, w, k, stride, pad).expect("valid convolution geometry");
    let mut image = vec![0.0; c * h * w];
    col2im_add(cols, &g, &mut image);
    image
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, image: &mut [f64]) {
    let p = g.out_pixels();
    for ci in 0..g.c {
        let plane = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[M×P] += a[M×K] · b[K×P]`, all row-major.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[M×K] += a[M×P] · b[K×P]ᵀ`.
pub(crate) fn matmul_abt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + kk] += acc;
        }
    }
}

/// `out[K×P] += a[M×K]ᵀ · b[M×P]`.
pub(crate) fn matmul_atb_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Forward convolution on raw NCHW / OIHW buffers. Returns the NCHW output
/// together with its spatial size.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    out_ch: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let g = ConvGeom::new(c, h, w, k, stride, pad).expect("valid convolution geometry");
    let p = g.out_pixels();
    let mut out = vec![0.0; n * out_ch * p];
    let mut cols = vec![0.0; g.patch_len() * p];
    for b in 0..n {
        let img = &input[b * c * h * w..(b + 1) * c * h * w];
        let dst = &mut out[b * out_ch * p..(b + 1) * out_ch * p];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[o]);
            }
        }
        if k == 1 && stride == 1 && pad == 0 {
            matmul_acc(weight, img, dst, out_ch, c, p);
        } else {
            im2col_into(img, &g, &mut cols);
            matmul_acc(weight, &cols, dst, out_ch, g.patch_len(), p);
        }
    }
    (out, g.ho, g.wo)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    out_ch: usize,
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads {
    let p = g.out_pixels();
    let kl = g.patch_len();
    let chw = g.c * g.h * g.w;
    let direct = g.k == 1 && g.stride == 1 && g.pad == 0;
    let mut gi = want_input.then(|| vec![0.0; n * chw]);
    let mut gw = want_weight.then(|| vec![0.0; out_ch * kl]);
    let mut gb = want_bias.then(|| vec![0.0; out_ch]);
    let mut cols = vec![0.0; kl * p];
    let mut dcols = vec![0.0; kl * p];
    for b in 0..n {
        let go = &grad_out[b * out_ch * p..(b + 1) * out_ch * p];
        if let Some(gb) = gb.as_mut() {
            for (o, chunk) in go.chunks(p).enumerate() {
                gb[o] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let img = &input[b * chw..(b + 1) * chw];
            if direct {
                matmul_abt_acc(go, img, gw, out_ch, kl, p);
            } else {
                im2col_into(img, g, &mut cols);
                matmul_abt_acc(go, &cols, gw, out_ch, kl, p);
            }
        }
        if let Some(gi) = gi.as_mut() {
            let dst = &mut gi[b * chw..(b + 1) * chw];
            if direct {
                matmul_atb_acc(weight, go, dst, out_ch, kl, p);
            } else {
                dcols.iter_mut().for_each(|v| *v = 0.0);
                matmul_atb_acc(weight, go, &mut dcols, out_ch, kl, p);
                col2im_add(&dcols, g, dst);
            }
        }
    }
    ConvGrads { input: gi, weight: gw, bias: gb }
}

/// Channel-to-space rearrangement: `(N, C·r², H, W) → (N, C, H·r, W·r)`.
pub fn pixel_shuffle_values(x: &[f64], n: usize, c_in: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let c = c_in / (r * r);
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for co in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            let src = ((b * c_in + ci) * h + y) * w + xx;
                            let dst = ((b * c + co) * h * r + y * r + i) * w * r + xx * r + j;
                            out[dst] = x[src];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle_values`]: `(N, C, H·r, W·r) → (N, C·r², H, W)`.
pub fn pixel_unshuffle_values(x: &[f64], n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let c_in = c * r * r;
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for co in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            let dst = ((b * c_in + ci) * h + y) * w + xx;
                            let src = ((b * c + co) * h * r + y * r + i) * w * r + xx * r + j;
                            out[dst] = x[src];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k, s, p) = (2, 5, 4, 3, 2, 1);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, c, h, w, k, s, p);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, c, h, w, k, s, p);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn shuffle_round_trip() {
        let x: Vec<f64> = (0..2 * 8 * 3 * 2).map(|i| i as f64).collect();
        let y = pixel_shuffle_values(&x, 2, 8, 3, 2, 2);
        assert_eq!(pixel_unshuffle_values(&y, 2, 2, 3, 2, 2), x);
    }
}
