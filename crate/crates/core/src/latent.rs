//! Latent tensors, patch regions and the per-channel 2-D Fourier pair.
//!
//! Layout is row-major `channel × row × column`. The forward transform is
//! unnormalized and the inverse carries the `1/(h·w)` factor.

use std::fmt;
use std::sync::Arc;

pub use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// A dense `channels × height × width` tensor of latent values.
#[derive(Clone, PartialEq)]
pub struct LatentGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl fmt::Debug for LatentGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LatentGrid")
            .field("channels", &self.channels)
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl LatentGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "latent grid dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::Config(format!(
                "latent data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty latent grid");
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty latent grid");
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for r in 0..height {
                for col in 0..width {
                    data.push(f(c, r, col));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, r: usize, col: usize) -> usize {
        (c * self.height + r) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[self.index(c, r, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, value: f64) {
        let i = self.index(c, r, col);
        self.data[i] = value;
    }

    pub fn full_region(&self) -> PatchRegion {
        PatchRegion::new(0, 0, self.height, self.width)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &LatentGrid) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        LatentGrid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &LatentGrid,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<LatentGrid> {
        self.ensure_same_shape(other, op)?;
        Ok(LatentGrid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Copies `region` out of the grid, across all channels.
    pub fn crop(&self, region: &PatchRegion) -> Result<LatentGrid> {
        region.check_inside(self.height, self.width)?;
        let mut data = Vec::with_capacity(self.channels * region.area());
        for c in 0..self.channels {
            for r in region.top..region.bottom() {
                let start = self.index(c, r, region.left);
                data.extend_from_slice(&self.data[start..start + region.width]);
            }
        }
        Ok(LatentGrid {
            channels: self.channels,
            height: region.height,
            width: region.width,
            data,
        })
    }

    /// Overwrites `region` with `patch`.
    pub fn paste(&mut self, region: &PatchRegion, patch: &LatentGrid) -> Result<()> {
        region.check_inside(self.height, self.width)?;
        let expected = (self.channels, region.height, region.width);
        if patch.shape() != expected {
            return Err(Error::Shape {
                op: "paste",
                expected,
                actual: patch.shape(),
            });
        }
        for c in 0..self.channels {
            for r in 0..region.height {
                let dst = self.index(c, region.top + r, region.left);
                let src = patch.index(c, r, 0);
                self.data[dst..dst + region.width]
                    .copy_from_slice(&patch.data[src..src + region.width]);
            }
        }
        Ok(())
    }
}

/// A rectangular window `(top, left, height, width)` in latent pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchRegion {
    pub const fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom()).contains(&row) && (self.left..self.right()).contains(&col)
    }

    pub fn check_inside(&self, grid_height: usize, grid_width: usize) -> Result<()> {
        if self.height == 0 || self.bottom() > grid_height {
            return Err(Error::Bounds {
                axis: "row",
                start: self.top,
                extent: self.height,
                limit: grid_height,
            });
        }
        if self.width == 0 || self.right() > grid_width {
            return Err(Error::Bounds {
                axis: "column",
                start: self.left,
                extent: self.width,
                limit: grid_width,
            });
        }
        Ok(())
    }
}

/// Full complex spectrum of a latent patch, unshifted, one plane per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::Config(format!(
                "spectrum data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> Complex64 {
        self.data[(c * self.height + u) * self.width + v]
    }
}

/// Planned forward and inverse transforms for one patch size.
#[derive(Clone)]
pub struct FourierPlan {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for FourierPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FourierPlan({}x{})", self.height, self.width)
    }
}

impl FourierPlan {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn forward(&self, patch: &LatentGrid) -> Spectrum {
        assert_eq!(
            (patch.height, patch.width),
            (self.height, self.width),
            "patch does not match plan"
        );
        let mut data: Vec<Complex64> = patch.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        for plane in data.chunks_exact_mut(self.height * self.width) {
            self.transform_plane(plane, &*self.row_fwd, &*self.col_fwd);
        }
        Spectrum {
            channels: patch.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Normalized inverse, returned as complex values.
    pub fn inverse_complex(&self, spec: &Spectrum) -> Vec<Complex64> {
        assert_eq!(
            (spec.height, spec.width),
            (self.height, self.width),
            "spectrum does not match plan"
        );
        let mut data = spec.data.clone();
        let norm = 1.0 / (self.height * self.width) as f64;
        for plane in data.chunks_exact_mut(self.height * self.width) {
            self.transform_plane(plane, &*self.row_inv, &*self.col_inv);
        }
        data.iter_mut().for_each(|v| *v *= norm);
        data
    }

    /// Inverse transform keeping only the real part.
    pub fn inverse_real(&self, spec: &Spectrum) -> LatentGrid {
        let data = self
            .inverse_complex(spec)
            .into_iter()
            .map(|v| v.re)
            .collect();
        LatentGrid {
            channels: spec.channels,
            height: spec.height,
            width: spec.width,
            data,
        }
    }

    /// Inverse transform that rejects spectra whose inverse is not real.
    pub fn inverse(&self, spec: &Spectrum) -> Result<LatentGrid> {
        let values = self.inverse_complex(spec);
        let (max_re, max_im) = values.iter().fold((0.0f64, 0.0f64), |(r, i), v| {
            (r.max(v.re.abs()), i.max(v.im.abs()))
        });
        let limit = 1e-6 * max_re.max(1.0);
        if max_im > limit {
            return Err(Error::NumericConsistency {
                residue: max_im,
                limit,
            });
        }
        Ok(LatentGrid {
            channels: spec.channels,
            height: spec.height,
            width: spec.width,
            data: values.into_iter().map(|v| v.re).collect(),
        })
    }

    fn transform_plane(&self, plane: &mut [Complex64], rows: &dyn Fft<f64>, cols: &dyn Fft<f64>) {
        let (h, w) = (self.height, self.width);
        let scratch_len = rows
            .get_inplace_scratch_len()
            .max(cols.get_inplace_scratch_len());
        let mut scratch = vec![Complex64::default(); scratch_len];
        for row in plane.chunks_exact_mut(w) {
            rows.process_with_scratch(row, &mut scratch);
        }
        let mut column = vec![Complex64::default(); h];
        for col in 0..w {
            for r in 0..h {
                column[r] = plane[r * w + col];
            }
            cols.process_with_scratch(&mut column, &mut scratch);
            for r in 0..h {
                plane[r * w + col] = column[r];
            }
        }
    }
}

/// Per-channel 2-D DFT with an unnormalized forward convention.
pub fn fft2(patch: &LatentGrid) -> Spectrum {
    FourierPlan::new(patch.height, patch.width).forward(patch)
}

/// Inverse of [`fft2`]. Fails if the imaginary residue exceeds
/// `1e-6 · max(1, max|real|)`.
pub fn ifft2(spec: &Spectrum) -> Result<LatentGrid> {
    FourierPlan::new(spec.height, spec.width).inverse(spec)
}

/// Inverse of [`fft2`] taking the real part unconditionally. Used for
/// phase-fused spectra, which are not conjugate-symmetric.
pub fn ifft2_real(spec: &Spectrum) -> LatentGrid {
    FourierPlan::new(spec.height, spec.width).inverse_real(spec)
}
