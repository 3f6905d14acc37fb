use super::image::Image;
use crate::error::{Error, Result};

/// Cubic convolution kernel with `a = −0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Mirror an out-of-range index back into `[0, n)` (edge sample repeated).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Taps and normalised weights for each output sample of an antialiased
/// `1/scale` reduction along one axis.
pub fn resample_weights(n_in: usize, scale: usize) -> Vec<Vec<(usize, f64)>> {
    let s = scale as f64;
    let n_out = n_in / scale;
    let support = 2.0 * s;
    (0..n_out)
        .map(|o| {
            let u = (o as f64 + 0.5) * s - 0.5;
            let lo = (u - support).floor() as isize;
            let hi = (u + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let w = cubic((u - j as f64) / s) / s;
                if w != 0.0 {
                    taps.push((reflect(j, n_in), w));
                    total += w;
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable bicubic reduction of one `w × h` plane.
pub fn downsample_plane(plane: &[f64], w: usize, h: usize, scale: usize) -> Vec<f64> {
    let (wo, ho) = (w / scale, h / scale);
    let wx = resample_weights(w, scale);
    let wy = resample_weights(h, scale);
    let mut tmp = vec![0.0; wo * h];
    for y in 0..h {
        for (x, taps) in wx.iter().enumerate() {
            tmp[y * wo + x] = taps.iter().map(|&(j, k)| k * plane[y * w + j]).sum();
        }
    }
    let mut out = vec![0.0; wo * ho];
    for (y, taps) in wy.iter().enumerate() {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().map(|&(j, k)| k * tmp[j * wo + x]).sum();
        }
    }
    out
}

/// Bicubic LR synthesis. Dimensions must be multiples of `scale`.
pub fn bicubic_downsample(hr: &Image, scale: usize) -> Result<Image> {
    if scale == 0 || hr.width % scale != 0 || hr.height % scale != 0 {
        return Err(Error::dim(
            "bicubic_downsample",
            format!("{}x{} not divisible by scale {scale}; crop first", hr.width, hr.height),
        ));
    }
    if scale == 1 {
        return Ok(hr.clone());
    }
    let planar = hr.to_planar();
    let hw = hr.width * hr.height;
    let mut out = Vec::with_capacity(3 * hw / (scale * scale));
    for c in 0..3 {
        out.extend(downsample_plane(&planar[c * hw..(c + 1) * hw], hr.width, hr.height, scale));
    }
    Image::from_planar(hr.width / scale, hr.height / scale, &out)
}
