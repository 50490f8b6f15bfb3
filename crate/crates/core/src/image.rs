//! Pixel-space images and separable Lanczos-3 resampling.

use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};

/// Lanczos window half-width in input pixels (for upsampling).
pub const LANCZOS_A: f64 = 3.0;

/// Planar `channels × height × width` image with values nominally in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct PixelImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl fmt::Debug for PixelImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PixelImage")
            .field("channels", &self.channels)
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl PixelImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "image dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Config(format!(
                "image data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("PixelImage::new"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty image");
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.height + r) * self.width + col]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn max_abs_diff(&self, other: &PixelImage) -> f64 {
        assert_eq!(
            (self.channels, self.height, self.width),
            (other.channels, other.height, other.width),
            "image shape mismatch"
        );
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// `sinc(x)·sinc(x/3)` on `|x| < 3`, zero outside.
pub fn lanczos3(x: f64) -> f64 {
    if x.abs() < LANCZOS_A {
        sinc(x) * sinc(x / LANCZOS_A)
    } else {
        0.0
    }
}

/// Normalized taps for one output sample along one axis.
#[derive(Debug, Clone)]
struct Taps {
    weights: Vec<f64>,
    indices: Vec<usize>,
}

fn axis_taps(len_in: usize, len_out: usize) -> Vec<Taps> {
    let scale = len_in as f64 / len_out as f64;
    let support = scale.max(1.0);
    let radius = LANCZOS_A * support;
    (0..len_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - radius).ceil() as i64;
            let hi = (center + radius).floor() as i64;
            let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
            let mut indices = Vec::with_capacity(weights.capacity());
            for k in lo..=hi {
                weights.push(lanczos3((k as f64 - center) / support));
                indices.push(k.clamp(0, len_in as i64 - 1) as usize);
            }
            let sum: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= sum);
            Taps { weights, indices }
        })
        .collect()
}

/// Separable Lanczos-3 resampling with edge clamping, without clamping the
/// output range. Horizontal pass first.
pub fn lanczos_resize_unclamped(img: &PixelImage, out_h: usize, out_w: usize) -> PixelImage {
    assert!(out_h > 0 && out_w > 0, "output dims must be positive");
    let (h, w) = (img.height, img.width);
    let col_taps = axis_taps(w, out_w);
    let row_taps = axis_taps(h, out_h);
    let mut data = Vec::with_capacity(img.channels * out_h * out_w);
    let mut horiz = vec![0.0; h * out_w];
    for c in 0..img.channels {
        let plane = img.plane(c);
        for r in 0..h {
            let row = &plane[r * w..(r + 1) * w];
            for (o, taps) in col_taps.iter().enumerate() {
                horiz[r * out_w + o] = taps
                    .indices
                    .iter()
                    .zip(&taps.weights)
                    .map(|(&i, &wt)| wt * row[i])
                    .sum();
            }
        }
        for taps in &row_taps {
            for col in 0..out_w {
                let v: f64 = taps
                    .indices
                    .iter()
                    .zip(&taps.weights)
                    .map(|(&i, &wt)| wt * horiz[i * out_w + col])
                    .sum();
                data.push(v);
            }
        }
    }
    PixelImage {
        channels: img.channels,
        height: out_h,
        width: out_w,
        data,
    }
}

/// Lanczos-3 resize, output clamped to `[0, 1]`.
pub fn lanczos_resize(img: &PixelImage, out_h: usize, out_w: usize) -> PixelImage {
    if (out_h, out_w) == (img.height, img.width) {
        return img.clone().clamped();
    }
    lanczos_resize_unclamped(img, out_h, out_w).clamped()
}
