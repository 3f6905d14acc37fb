//! Image-quality metrics, level occupancy and analytic cost.

mod complexity;
mod levels;
mod metrics;

pub use complexity::{complexity, default_gated, ComplexityReport, LayerCost};
pub use levels::{wasted_levels, LevelQuantizer};
pub use metrics::{gaussian_window, luma, psnr_y, psnr_y_with, ssim_y, ssim_y_with, y_plane, YConvention, PSNR_CAP, SSIM_SIGMA, SSIM_WINDOW};

use crate::data::{Dataset, Image};
use crate::error::Result;
use crate::models::Network;

/// Scores of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub images: Vec<ImageScore>,
}

/// Super-resolve every LR image of `data` and score it against its HR
/// partner on the Y channel with a border crop equal to the scale.
pub fn evaluate(net: &Network, data: &Dataset, quantized: bool) -> Result<EvalSummary> {
    let mut images = Vec::with_capacity(data.pairs.len());
    for (index, p) in data.pairs.iter().enumerate() {
        let out = net.infer(&p.lr.to_tensor(), quantized)?;
        let sr = Image::from_tensor(&out, 0)?;
        images.push(ImageScore { index, psnr: psnr_y(&sr, &p.hr, p.scale)?, ssim: ssim_y(&sr, &p.hr, p.scale)? });
    }
    let n = images.len().max(1) as f64;
    Ok(EvalSummary {
        psnr: images.iter().map(|s| s.psnr).fold(0.0, |a, b| a + b) / n,
        ssim: images.iter().map(|s| s.ssim).fold(0.0, |a, b| a + b) / n,
        images,
    })
}
