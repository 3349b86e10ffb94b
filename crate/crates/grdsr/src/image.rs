//! 2-d slice and 3-d stack containers plus patch extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GrdError, Result};
use crate::tensor::Tensor;

/// Single grayscale slice: row-major f32 intensities with pixel spacing in
/// millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub spacing: (f32, f32),
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, spacing: (f32, f32)) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GrdError::config(format!(
                "image extents must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(GrdError::config(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(ImagePlane {
            width,
            height,
            pixels,
            spacing,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        ImagePlane {
            width,
            height,
            pixels: vec![0.0; width * height],
            spacing: (1.0, 1.0),
        }
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        ImagePlane {
            width,
            height,
            pixels: vec![value; width * height],
            spacing: (1.0, 1.0),
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        ImagePlane {
            width,
            height,
            pixels,
            spacing: (1.0, 1.0),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn max_value(&self) -> f32 {
        self.pixels.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.pixels.iter().cloned().fold(f32::INFINITY, f32::min)
    }

    /// Root-mean-square difference against another plane of equal extents.
    pub fn rms_diff(&self, other: &ImagePlane) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(GrdError::data(format!(
                "rms_diff extent mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let acc: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok((acc / self.pixels.len() as f64).sqrt())
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<ImagePlane> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(GrdError::data(format!(
                "crop [{x0},{y0}] {width}x{height} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + width]);
        }
        ImagePlane::new(width, height, pixels, self.spacing)
    }

    /// Views the plane as a 1x1xHxW tensor for the network.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![1, 1, self.height, self.width],
            data: self.pixels.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_tensor(t: &Tensor, spacing: (f32, f32)) -> Result<ImagePlane> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 1 {
            return Err(GrdError::config(format!(
                "expected a 1x1xHxW tensor, got {:?}",
                t.shape
            )));
        }
        ImagePlane::new(w, h, t.data.clone(), spacing)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(pos) = self.pixels.iter().position(|v| !v.is_finite()) {
            return Err(GrdError::numerical(format!(
                "non-finite pixel {} at flat index {pos} in {context}",
                self.pixels[pos]
            )));
        }
        Ok(())
    }
}

/// 3-d stack of slices sharing in-plane spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub voxels: Vec<f32>,
    pub spacing: (f32, f32, f32),
}

impl Volume {
    pub fn new(
        width: usize,
        height: usize,
        depth: usize,
        voxels: Vec<f32>,
        spacing: (f32, f32, f32),
    ) -> Result<Self> {
        if width == 0 || height == 0 || depth == 0 {
            return Err(GrdError::config(format!(
                "volume extents must be positive, got {width}x{height}x{depth}"
            )));
        }
        if voxels.len() != width * height * depth {
            return Err(GrdError::config(format!(
                "{width}x{height}x{depth} volume needs {} voxels, got {}",
                width * height * depth,
                voxels.len()
            )));
        }
        Ok(Volume {
            width,
            height,
            depth,
            voxels,
            spacing,
        })
    }

    pub fn zeros(width: usize, height: usize, depth: usize) -> Self {
        Volume {
            width,
            height,
            depth,
            voxels: vec![0.0; width * height * depth],
            spacing: (1.0, 1.0, 1.0),
        }
    }

    pub fn slice(&self, k: usize) -> Result<ImagePlane> {
        if k >= self.depth {
            return Err(GrdError::data(format!(
                "slice {k} out of range for depth {}",
                self.depth
            )));
        }
        let hw = self.width * self.height;
        ImagePlane::new(
            self.width,
            self.height,
            self.voxels[k * hw..(k + 1) * hw].to_vec(),
            (self.spacing.0, self.spacing.1),
        )
    }

    pub fn set_slice(&mut self, k: usize, plane: &ImagePlane) -> Result<()> {
        if k >= self.depth {
            return Err(GrdError::data(format!(
                "slice {k} out of range for depth {}",
                self.depth
            )));
        }
        if plane.width != self.width || plane.height != self.height {
            return Err(GrdError::data(format!(
                "slice extents {}x{} do not match volume {}x{}",
                plane.width, plane.height, self.width, self.height
            )));
        }
        let hw = self.width * self.height;
        self.voxels[k * hw..(k + 1) * hw].copy_from_slice(&plane.pixels);
        Ok(())
    }

    pub fn from_slices(slices: &[ImagePlane], dz: f32) -> Result<Volume> {
        let first = slices
            .first()
            .ok_or_else(|| GrdError::data("cannot build a volume from zero slices".to_string()))?;
        let mut vol = Volume::zeros(first.width, first.height, slices.len());
        vol.spacing = (first.spacing.0, first.spacing.1, dz);
        for (k, s) in slices.iter().enumerate() {
            vol.set_slice(k, s)?;
        }
        Ok(vol)
    }
}

/// How to place patch origins over a plane.
#[derive(Debug, Clone)]
pub enum PatchSampling {
    Grid { stride: usize },
    Random { count: usize, seed: u64 },
}

/// Patch origin coordinates for the given extents; paired extraction across
/// registered modalities calls this once and crops each plane identically.
pub fn patch_coords(
    width: usize,
    height: usize,
    size: usize,
    sampling: &PatchSampling,
) -> Result<Vec<(usize, usize)>> {
    if size > width || size > height {
        return Err(GrdError::data(format!(
            "patch size {size} exceeds plane extents {width}x{height}"
        )));
    }
    match sampling {
        PatchSampling::Grid { stride } => {
            if *stride == 0 {
                return Err(GrdError::config("patch stride must be positive".to_string()));
            }
            let mut coords = Vec::new();
            let mut y = 0;
            while y + size <= height {
                let mut x = 0;
                while x + size <= width {
                    coords.push((x, y));
                    x += stride;
                }
                y += stride;
            }
            Ok(coords)
        }
        PatchSampling::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let coords = (0..*count)
                .map(|_| {
                    let x = rng.gen_range(0..=width - size);
                    let y = rng.gen_range(0..=height - size);
                    (x, y)
                })
                .collect();
            Ok(coords)
        }
    }
}

pub fn extract_patches(
    plane: &ImagePlane,
    size: usize,
    sampling: &PatchSampling,
) -> Result<Vec<ImagePlane>> {
    patch_coords(plane.width, plane.height, size, sampling)?
        .into_iter()
        .map(|(x, y)| plane.crop(x, y, size, size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_full_patch_equals_plane() {
        let plane = ImagePlane::from_fn(64, 64, |x, y| (x + y) as f32);
        let patches =
            extract_patches(&plane, 64, &PatchSampling::Grid { stride: 64 }).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].pixels, plane.pixels);
    }

    #[test]
    fn grid_tiles_without_overlap() {
        let plane = ImagePlane::from_fn(128, 128, |x, y| (x * 131 + y) as f32);
        let patches =
            extract_patches(&plane, 64, &PatchSampling::Grid { stride: 64 }).unwrap();
        assert_eq!(patches.len(), 4);
        // tiling: reassembling the four quadrants recovers every pixel sum
        let total: f64 = patches
            .iter()
            .flat_map(|p| p.pixels.iter())
            .map(|&v| v as f64)
            .sum();
        let expected: f64 = plane.pixels.iter().map(|&v| v as f64).sum();
        assert_eq!(total, expected);
    }

    #[test]
    fn random_coords_are_seed_deterministic() {
        let a = patch_coords(100, 90, 32, &PatchSampling::Random { count: 20, seed: 9 }).unwrap();
        let b = patch_coords(100, 90, 32, &PatchSampling::Random { count: 20, seed: 9 }).unwrap();
        assert_eq!(a, b);
        let c = patch_coords(100, 90, 32, &PatchSampling::Random { count: 20, seed: 10 }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_patch_is_a_data_error() {
        let plane = ImagePlane::zeros(16, 16);
        assert!(matches!(
            extract_patches(&plane, 32, &PatchSampling::Grid { stride: 1 }),
            Err(GrdError::Data(_))
        ));
    }

    #[test]
    fn volume_slice_round_trip() {
        let mut vol = Volume::zeros(8, 6, 3);
        vol.spacing = (0.5, 0.5, 2.0);
        let plane = ImagePlane::from_fn(8, 6, |x, y| (10 * x + y) as f32);
        vol.set_slice(1, &plane).unwrap();
        let back = vol.slice(1).unwrap();
        assert_eq!(back.pixels, plane.pixels);
        assert_eq!(back.spacing, (0.5, 0.5));
        assert!(vol.slice(3).is_err());
    }
}
