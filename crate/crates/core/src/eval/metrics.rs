use crate::data::Image;
use crate::error::{Error, Result};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum YConvention {
    /// `0.299 R + 0.587 G + 0.114 B`.
    #[default]
    FullRange,
    /// `16 + (65.481 R + 128.553 G + 24.966 B) / 255`.
    Studio,
}

pub fn luma(rgb: [u8; 3], conv: YConvention) -> f64 {
    let (r, g, b) = (rgb[0] as f64, rgb[1] as f64, rgb[2] as f64);
    match conv {
        YConvention::FullRange => 0.299 * r + 0.587 * g + 0.114 * b,
        YConvention::Studio => 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0,
    }
}

/// Y plane with `crop` pixels removed from every border: `(w, h, values)`.
pub fn y_plane(img: &Image, crop: usize, conv: YConvention) -> (usize, usize, Vec<f64>) {
    let w = img.width.saturating_sub(2 * crop);
    let h = img.height.saturating_sub(2 * crop);
    let mut out = Vec::with_capacity(w * h);
    for y in crop..crop + h {
        for x in crop..crop + w {
            out.push(luma(img.pixel(x, y), conv));
        }
    }
    (w, h, out)
}

fn check_pair(sr: &Image, hr: &Image) -> Result<()> {
    if (sr.width, sr.height) != (hr.width, hr.height) {
        return Err(Error::dim("metric", format!("sr {}x{} vs hr {}x{}", sr.width, sr.height, hr.width, hr.height)));
    }
    Ok(())
}

pub fn psnr_y_with(sr: &Image, hr: &Image, scale: usize, conv: YConvention) -> Result<f64> {
    check_pair(sr, hr)?;
    let (w, h, a) = y_plane(sr, scale, conv);
    let (_, _, b) = y_plane(hr, scale, conv);
    if w * h == 0 {
        return Err(Error::dim("psnr", format!("nothing left after cropping {scale} pixels")));
    }
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / (w * h) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP))
}

/// PSNR on full-range Y after a `scale`-pixel border crop.
pub fn psnr_y(sr: &Image, hr: &Image, scale: usize) -> Result<f64> {
    psnr_y_with(sr, hr, scale, YConvention::FullRange)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Normalised 11×11 Gaussian, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

pub fn ssim_y_with(sr: &Image, hr: &Image, scale: usize, conv: YConvention) -> Result<f64> {
    check_pair(sr, hr)?;
    let (w, h, a) = y_plane(sr, scale, conv);
    let (_, _, b) = y_plane(hr, scale, conv);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::dim("ssim", format!("{w}x{h} after cropping is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let win = gaussian_window();
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let g = win[ky * SSIM_WINDOW + kx];
                    let i = (y + ky) * w + x + kx;
                    ma += g * a[i];
                    mb += g * b[i];
                    saa += g * a[i] * a[i];
                    sbb += g * b[i] * b[i];
                    sab += g * a[i] * b[i];
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

/// Single-scale SSIM on full-range Y after a `scale`-pixel border crop.
pub fn ssim_y(sr: &Image, hr: &Image, scale: usize) -> Result<f64> {
    ssim_y_with(sr, hr, scale, YConvention::FullRange)
}
