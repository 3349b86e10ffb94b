//! The observation model relating high- and low-resolution images:
//! Gaussian blur `B`, its adjoint `Bᵀ`, down-sampling `D`, bicubic
//! up-sampling `Dᵀ`, and the sigma rules that tie the blur width to the
//! scale factor.
//!
//! Test-data degradation uses sigma = s / (2 sqrt(2 ln 2)), which makes the
//! kernel's full width at half maximum equal to the scale factor s.
//! Intermediate cascade stages sharpen that to
//! sigma = stage_scale / (2 sqrt(2 lambda ln 2)).

use crate::error::{GrdError, Result};
use crate::image::ImagePlane;

/// Scale factor, blur width and kernel truncation for one degradation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationSpec {
    pub scale_factor: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub kernel_radius: usize,
}

impl DegradationSpec {
    /// Degradation used to simulate test LR data: FWHM of the blur equals
    /// the scale factor.
    pub fn for_test(scale: f64) -> Result<Self> {
        let sigma = sigma_for_test_degradation(scale)?;
        Ok(DegradationSpec {
            scale_factor: scale,
            lambda: 1.0,
            sigma,
            kernel_radius: radius_for_sigma(sigma),
        })
    }

    /// Sharper degradation used when building training pairs for an
    /// intermediate cascade magnification.
    pub fn for_cascade_stage(stage_scale: f64, lambda: f64) -> Result<Self> {
        let sigma = sigma_for_cascade_stage(stage_scale, lambda)?;
        Ok(DegradationSpec {
            scale_factor: stage_scale,
            lambda,
            sigma,
            kernel_radius: radius_for_sigma(sigma),
        })
    }

    pub fn kernel(&self) -> BlurKernel {
        gaussian_kernel(self.sigma, self.kernel_radius)
    }
}

/// Truncate at three standard deviations (99.7% of the mass), never below 1.
fn radius_for_sigma(sigma: f64) -> usize {
    ((3.0 * sigma).ceil() as usize).max(1)
}

/// sigma = s / (2 sqrt(2 ln 2)): the blur whose FWHM equals the scale.
pub fn sigma_for_test_degradation(scale: f64) -> Result<f64> {
    if scale <= 1.0 {
        return Err(GrdError::domain(format!(
            "test degradation needs scale > 1, got {scale}"
        )));
    }
    Ok(scale / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt()))
}

/// sigma = stage_scale / (2 sqrt(2 lambda ln 2)); lambda > 1 narrows the
/// blur relative to the FWHM rule.
pub fn sigma_for_cascade_stage(stage_scale: f64, lambda: f64) -> Result<f64> {
    if stage_scale <= 1.0 {
        return Err(GrdError::domain(format!(
            "cascade stage needs scale > 1, got {stage_scale}"
        )));
    }
    if lambda <= 0.0 {
        return Err(GrdError::domain(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    Ok(stage_scale / (2.0 * (2.0 * lambda * std::f64::consts::LN_2).sqrt()))
}

/// Sampled isotropic Gaussian with unit sum; side length 2*radius + 1.
#[derive(Debug, Clone)]
pub struct BlurKernel {
    pub taps: Vec<f64>,
    pub radius: usize,
}

impl BlurKernel {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn tap(&self, du: isize, dv: isize) -> f64 {
        let side = self.side() as isize;
        let r = self.radius as isize;
        self.taps[((du + r) * side + (dv + r)) as usize]
    }
}

pub fn gaussian_kernel(sigma: f64, radius: usize) -> BlurKernel {
    let side = 2 * radius + 1;
    let mut taps = vec![0.0f64; side * side];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut sum = 0.0;
    for u in 0..side {
        for v in 0..side {
            let du = u as f64 - radius as f64;
            let dv = v as f64 - radius as f64;
            let w = (-(du * du + dv * dv) * inv).exp();
            taps[u * side + v] = w;
            sum += w;
        }
    }
    for t in &mut taps {
        *t /= sum;
    }
    BlurKernel { taps, radius }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    // mirror without repeating the edge sample: -1 -> 1, n -> n-2
    let n = n as isize;
    let j = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    debug_assert!(j >= 0 && j < n);
    j as usize
}

fn check_kernel_fits(image: &ImagePlane, kernel: &BlurKernel) -> Result<()> {
    if kernel.side() > image.width || kernel.side() > image.height {
        return Err(GrdError::domain(format!(
            "kernel side {} exceeds image extents {}x{}",
            kernel.side(),
            image.width,
            image.height
        )));
    }
    Ok(())
}

/// Blur operator `B`: same-size convolution with mirror border handling.
pub fn blur(image: &ImagePlane, kernel: &BlurKernel) -> Result<ImagePlane> {
    check_kernel_fits(image, kernel)?;
    let (w, h) = (image.width, image.height);
    let r = kernel.radius as isize;
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for du in -r..=r {
                let sy = reflect(y as isize + du, h);
                for dv in -r..=r {
                    let sx = reflect(x as isize + dv, w);
                    acc += kernel.tap(du, dv) * image.pixels[sy * w + sx] as f64;
                }
            }
            out[y * w + x] = acc as f32;
        }
    }
    ImagePlane::new(w, h, out, image.spacing)
}

/// Adjoint blur operator `Bᵀ` under the standard inner product.
///
/// Realized by transposing the gather in [`blur`] into a scatter: every
/// output position deposits kernel-weighted mass back onto the source
/// pixels it read from, including through the mirrored border, so
/// <Bx, y> = <x, Bᵀy> holds by construction.
pub fn blur_adjoint(image: &ImagePlane, kernel: &BlurKernel) -> Result<ImagePlane> {
    check_kernel_fits(image, kernel)?;
    let (w, h) = (image.width, image.height);
    let r = kernel.radius as isize;
    let mut acc = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = image.pixels[y * w + x] as f64;
            for du in -r..=r {
                let sy = reflect(y as isize + du, h);
                for dv in -r..=r {
                    let sx = reflect(x as isize + dv, w);
                    acc[sy * w + sx] += kernel.tap(du, dv) * v;
                }
            }
        }
    }
    let out: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
    ImagePlane::new(w, h, out, image.spacing)
}

/// Rounded target extent for resampling by a scale ratio.
pub fn scaled_extent(extent: usize, factor: f64) -> usize {
    (extent as f64 * factor).round() as usize
}

fn is_integral(s: f64) -> bool {
    (s - s.round()).abs() < 1e-9
}

/// Down-sampling operator `D`.
///
/// Integer scale factors decimate with stride s from the top-left sample;
/// fractional factors (intermediate cascade scales) resample bicubically to
/// round(extent / s).
pub fn downsample(image: &ImagePlane, scale: f64) -> Result<ImagePlane> {
    if scale <= 1.0 {
        return Err(GrdError::domain(format!(
            "downsample needs scale > 1, got {scale}"
        )));
    }
    let out_w = scaled_extent(image.width, 1.0 / scale);
    let out_h = scaled_extent(image.height, 1.0 / scale);
    if out_w < 4 || out_h < 4 {
        return Err(GrdError::domain(format!(
            "downsampling {}x{} by {scale} leaves {out_w}x{out_h}, minimum extent is 4",
            image.width, image.height
        )));
    }
    if is_integral(scale) {
        let s = scale.round() as usize;
        let mut pixels = Vec::with_capacity(out_w * out_h);
        for y in 0..out_h {
            for x in 0..out_w {
                pixels.push(image.get(x * s, y * s));
            }
        }
        let mut plane = ImagePlane::new(out_w, out_h, pixels, image.spacing)?;
        plane.spacing = (
            image.spacing.0 * scale as f32,
            image.spacing.1 * scale as f32,
        );
        Ok(plane)
    } else {
        let mut plane = resize_bicubic(image, out_w, out_h);
        plane.spacing = (
            image.spacing.0 * scale as f32,
            image.spacing.1 * scale as f32,
        );
        Ok(plane)
    }
}

/// Up-sampling operator `Dᵀ`: bicubic interpolation to round(extent * s).
/// Serves both as the network-input interpolation and as the up-projection
/// inside iterative back-projection.
pub fn upsample(image: &ImagePlane, scale: f64) -> Result<ImagePlane> {
    if scale <= 1.0 {
        return Err(GrdError::domain(format!(
            "upsample needs scale > 1, got {scale}"
        )));
    }
    let out_w = scaled_extent(image.width, scale);
    let out_h = scaled_extent(image.height, scale);
    let mut plane = resize_bicubic(image, out_w, out_h);
    plane.spacing = (
        image.spacing.0 / scale as f32,
        image.spacing.1 / scale as f32,
    );
    Ok(plane)
}

/// Composite degradation D∘B: blur with the spec's kernel, then downsample
/// by its scale factor.
pub fn degrade(image: &ImagePlane, spec: &DegradationSpec) -> Result<ImagePlane> {
    let blurred = blur(image, &spec.kernel())?;
    downsample(&blurred, spec.scale_factor)
}

// Catmull-Rom cubic convolution weights (a = -0.5) for the four samples at
// offsets -1..2 around the interpolation point, fraction t in [0, 1).
fn keys_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.5;
    let t2 = t * t;
    let t3 = t2 * t;
    [
        A * (t3 - 2.0 * t2 + t),
        (A + 2.0) * t3 - (A + 3.0) * t2 + 1.0,
        -(A + 2.0) * t3 + (2.0 * A + 3.0) * t2 - A * t,
        A * (t2 - t3),
    ]
}

fn axis_taps(src_n: usize, dst_n: usize) -> Vec<(isize, [f64; 4])> {
    let ratio = src_n as f64 / dst_n as f64;
    (0..dst_n)
        .map(|i| {
            let src = i as f64 * ratio;
            let base = src.floor();
            (base as isize, keys_weights(src - base))
        })
        .collect()
}

/// Bicubic resampling to exact target extents; out-of-range taps clamp to
/// the border sample. Output index i reads source coordinate i*src/dst, so
/// integer-ratio upsampling passes through the original samples exactly.
pub fn resize_bicubic(image: &ImagePlane, out_w: usize, out_h: usize) -> ImagePlane {
    assert!(out_w > 0 && out_h > 0, "resize target must be positive");
    if out_w == image.width && out_h == image.height {
        return image.clone();
    }
    let (w, h) = (image.width, image.height);
    let xt = axis_taps(w, out_w);
    let yt = axis_taps(h, out_h);

    // horizontal pass in f64, then vertical
    let mut temp = vec![0.0f64; out_w * h];
    for y in 0..h {
        let row = &image.pixels[y * w..(y + 1) * w];
        for (xo, &(base, wts)) in xt.iter().enumerate() {
            let mut acc = 0.0f64;
            for (k, &wk) in wts.iter().enumerate() {
                let xi = (base + k as isize - 1).clamp(0, w as isize - 1) as usize;
                acc += wk * row[xi] as f64;
            }
            temp[y * out_w + xo] = acc;
        }
    }
    let mut out = vec![0.0f32; out_w * out_h];
    for (yo, &(base, wts)) in yt.iter().enumerate() {
        for xo in 0..out_w {
            let mut acc = 0.0f64;
            for (k, &wk) in wts.iter().enumerate() {
                let yi = (base + k as isize - 1).clamp(0, h as isize - 1) as usize;
                acc += wk * temp[yi * out_w + xo];
            }
            out[yo * out_w + xo] = acc as f32;
        }
    }
    ImagePlane {
        width: out_w,
        height: out_h,
        pixels: out,
        spacing: image.spacing,
    }
}

/// Measures the kernel's full width at half maximum along the central row
/// by linear interpolation of the half-max crossing.
pub fn measured_fwhm(kernel: &BlurKernel) -> f64 {
    let r = kernel.radius as isize;
    let peak = kernel.tap(0, 0);
    let half = peak / 2.0;
    let mut crossing = r as f64; // if never crossing, the whole support
    for d in 0..r {
        let a = kernel.tap(0, d);
        let b = kernel.tap(0, d + 1);
        if a >= half && b < half {
            crossing = d as f64 + (a - half) / (a - b);
            break;
        }
    }
    2.0 * crossing
}

/// <a, b> in f64, used by the adjoint identity checks.
pub fn inner_product(a: &ImagePlane, b: &ImagePlane) -> f64 {
    a.pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}
