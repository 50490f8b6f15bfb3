//! Pixel ↔ latent codecs. Only shape semantics matter here: a learned VAE
//! can implement [`Codec`] and drop in.

use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::latent::LatentGrid;

pub trait Codec {
    /// Pixels per latent cell along each axis.
    fn scale(&self) -> usize;
    fn latent_channels(&self) -> usize;
    fn image_channels(&self) -> usize;
    fn encode(&self, img: &PixelImage) -> Result<LatentGrid>;
    /// Output values are clamped to `[0, 1]`.
    fn decode(&self, z: &LatentGrid) -> Result<PixelImage>;

    /// Latent `(channels, height, width)` for a pixel size.
    fn latent_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let f = self.scale();
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "pixel dims {height}x{width} not divisible by codec scale {f}"
            )));
        }
        Ok((self.latent_channels(), height / f, width / f))
    }
}

/// `f = 1`, channels preserved, exact roundtrip for values in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityCodec {
    pub channels: usize,
}

impl Default for IdentityCodec {
    fn default() -> Self {
        Self { channels: 3 }
    }
}

impl Codec for IdentityCodec {
    fn scale(&self) -> usize {
        1
    }

    fn latent_channels(&self) -> usize {
        self.channels
    }

    fn image_channels(&self) -> usize {
        self.channels
    }

    fn encode(&self, img: &PixelImage) -> Result<LatentGrid> {
        if img.channels() != self.channels {
            return Err(Error::Shape {
                op: "IdentityCodec::encode",
                expected: (self.channels, img.height(), img.width()),
                actual: (img.channels(), img.height(), img.width()),
            });
        }
        LatentGrid::new(
            img.channels(),
            img.height(),
            img.width(),
            img.data().to_vec(),
        )
    }

    fn decode(&self, z: &LatentGrid) -> Result<PixelImage> {
        if z.channels() != self.channels {
            return Err(Error::Shape {
                op: "IdentityCodec::decode",
                expected: (self.channels, z.height(), z.width()),
                actual: z.shape(),
            });
        }
        z.ensure_finite("IdentityCodec::decode")?;
        Ok(PixelImage::new(z.channels(), z.height(), z.width(), z.data().to_vec())?.clamped())
    }
}

/// Box-average encoder and bilinear decoder.
///
/// Encoding averages each `f×f` block over all image channels and
/// replicates the result into every latent channel. Decoding takes the
/// latent channel mean, upsamples it bilinearly and replicates it into
/// every image channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolCodec {
    pub factor: usize,
    pub latent_channels: usize,
    pub image_channels: usize,
}

impl PoolCodec {
    pub fn new(factor: usize) -> Self {
        Self {
            factor,
            latent_channels: 4,
            image_channels: 3,
        }
    }
}

impl Codec for PoolCodec {
    fn scale(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    fn image_channels(&self) -> usize {
        self.image_channels
    }

    fn encode(&self, img: &PixelImage) -> Result<LatentGrid> {
        let (lc, lh, lw) = self.latent_shape(img.height(), img.width())?;
        let f = self.factor;
        let norm = 1.0 / (f * f * img.channels()) as f64;
        let mut pooled = vec![0.0; lh * lw];
        for c in 0..img.channels() {
            let plane = img.plane(c);
            for r in 0..img.height() {
                for col in 0..img.width() {
                    pooled[(r / f) * lw + col / f] += plane[r * img.width() + col];
                }
            }
        }
        pooled.iter_mut().for_each(|v| *v *= norm);
        Ok(LatentGrid::from_fn(lc, lh, lw, |_, r, col| {
            pooled[r * lw + col]
        }))
    }

    fn decode(&self, z: &LatentGrid) -> Result<PixelImage> {
        z.ensure_finite("PoolCodec::decode")?;
        let (zc, zh, zw) = z.shape();
        let mean: Vec<f64> = (0..zh * zw)
            .map(|i| (0..zc).map(|c| z.data()[c * zh * zw + i]).sum::<f64>() / zc as f64)
            .collect();
        let f = self.factor;
        let (h, w) = (zh * f, zw * f);
        let rows: Vec<(usize, usize, f64)> = (0..h).map(|o| bilinear_tap(o, f, zh)).collect();
        let cols: Vec<(usize, usize, f64)> = (0..w).map(|o| bilinear_tap(o, f, zw)).collect();
        let mut plane = Vec::with_capacity(h * w);
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = mean[r0 * zw + c0] * (1.0 - fc) + mean[r0 * zw + c1] * fc;
                let bottom = mean[r1 * zw + c0] * (1.0 - fc) + mean[r1 * zw + c1] * fc;
                plane.push(top * (1.0 - fr) + bottom * fr);
            }
        }
        let data = plane.repeat(self.image_channels);
        Ok(PixelImage::new(self.image_channels, h, w, data)?.clamped())
    }
}

/// Half-pixel-centred bilinear source taps for output index `o`.
fn bilinear_tap(o: usize, factor: usize, len_in: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len_in - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(len_in - 1);
    (i0, i1, src - i0 as f64)
}
