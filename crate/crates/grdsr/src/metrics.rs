//! Peak signal-to-noise ratio and structural similarity.

use crate::error::{GrdError, Result};
use crate::image::ImagePlane;

/// SSIM window: 11x11 Gaussian, sigma 1.5, K1 = 0.01, K2 = 0.03.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub dynamic_range: f64,
}

fn check_pair(a: &ImagePlane, b: &ImagePlane, dynamic_range: f64) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(GrdError::data(format!(
            "metric extents disagree: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if dynamic_range <= 0.0 {
        return Err(GrdError::domain(format!(
            "dynamic range must be positive, got {dynamic_range}"
        )));
    }
    Ok(())
}

/// 10 log10(range^2 / MSE) in dB; identical inputs return +inf.
pub fn psnr(a: &ImagePlane, b: &ImagePlane, dynamic_range: f64) -> Result<f64> {
    check_pair(a, b, dynamic_range)?;
    let mse: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (dynamic_range * dynamic_range / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut sum = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w.push(v);
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over all fully interior window positions.
pub fn ssim(a: &ImagePlane, b: &ImagePlane, dynamic_range: f64) -> Result<f64> {
    check_pair(a, b, dynamic_range)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(GrdError::data(format!(
            "image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.width, a.height
        )));
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let (w, h) = (a.width, a.height);

    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let mut mu_a = 0.0f64;
            let mut mu_b = 0.0f64;
            for wy in 0..SSIM_WINDOW {
                let row = (y0 + wy) * w + x0;
                for wx in 0..SSIM_WINDOW {
                    let wt = window[wy * SSIM_WINDOW + wx];
                    mu_a += wt * a.pixels[row + wx] as f64;
                    mu_b += wt * b.pixels[row + wx] as f64;
                }
            }
            let mut var_a = 0.0f64;
            let mut var_b = 0.0f64;
            let mut cov = 0.0f64;
            for wy in 0..SSIM_WINDOW {
                let row = (y0 + wy) * w + x0;
                for wx in 0..SSIM_WINDOW {
                    let wt = window[wy * SSIM_WINDOW + wx];
                    let da = a.pixels[row + wx] as f64 - mu_a;
                    let db = b.pixels[row + wx] as f64 - mu_b;
                    var_a += wt * da * da;
                    var_b += wt * db * db;
                    cov += wt * da * db;
                }
            }
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn evaluate(a: &ImagePlane, b: &ImagePlane, dynamic_range: f64) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(a, b, dynamic_range)?,
        ssim: ssim(a, b, dynamic_range)?,
        dynamic_range,
    })
}
