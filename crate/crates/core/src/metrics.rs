//! Image quality metrics.

use serde::Serialize;

use crate::error::Result;
use crate::image::Image;
use crate::loss::{mean_ssim, ssim_window_stats, total_loss, LossConfig};

/// `−10 log₁₀(MSE)` over all channels; identical images give `+∞`.
pub fn psnr(rendered: &Image, target: &Image) -> Result<f64> {
    rendered.check_same_dims(target)?;
    let n = 3 * rendered.len();
    let sse: f64 = rendered
        .data
        .iter()
        .zip(&target.data)
        .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]) * (a[c] - b[c])))
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * (sse / n as f64).log10())
}

/// Mean SSIM over pixels and channels; the same value the loss uses.
pub fn ssim_metric(rendered: &Image, target: &Image, config: &LossConfig) -> Result<f64> {
    let stats = ssim_window_stats(rendered, target, config)?;
    Ok(mean_ssim(&stats, config))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub view: usize,
    /// `+∞` for a perfect match (serialized as `null`).
    pub psnr: f64,
    pub ssim: f64,
    pub loss: f64,
}

impl ViewMetrics {
    pub fn compute(view: usize, rendered: &Image, target: &Image, config: &LossConfig) -> Result<Self> {
        Ok(Self {
            view,
            psnr: psnr(rendered, target)?,
            ssim: ssim_metric(rendered, target, config)?,
            loss: total_loss(rendered, target, config)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_loss: f64,
}

impl MetricsReport {
    pub fn new(views: Vec<ViewMetrics>) -> Self {
        let n = views.len().max(1) as f64;
        let mean = |f: fn(&ViewMetrics) -> f64| views.iter().map(f).sum::<f64>() / n;
        Self {
            mean_psnr: mean(|v| v.psnr),
            mean_ssim: mean(|v| v.ssim),
            mean_loss: mean(|v| v.loss),
            views,
        }
    }
}
