//! Guided generation: forward-noised guidance latents, Fourier phase
//! averaging, absolute-parity chess masking and the slider gate.

use rustfft::num_complex::Complex64;

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::image::{lanczos_resize, PixelImage};
use crate::latent::{FourierPlan, LatentGrid, PatchRegion, Spectrum};
use crate::noise::{gaussian_grid, seeded_rng, stream};
use crate::schedule::{add_noise, NoiseSchedule};

/// Phasor sums smaller than this are treated as antipodal.
pub const DEGENERATE_PHASOR: f64 = 1e-12;

/// Encoded previous-stage image plus one fixed noise draw. Guidance at any
/// `(t, region)` is produced on demand.
#[derive(Debug, Clone)]
pub struct GuidanceStack {
    z0: LatentGrid,
    eps: LatentGrid,
    schedule: NoiseSchedule,
}

impl GuidanceStack {
    pub fn new(z0: LatentGrid, eps: LatentGrid, schedule: NoiseSchedule) -> Result<Self> {
        z0.ensure_same_shape(&eps, "GuidanceStack::new")?;
        z0.ensure_finite("GuidanceStack::new")?;
        Ok(Self { z0, eps, schedule })
    }

    /// Draws the fixed noise from `seed`.
    pub fn from_latent(z0: LatentGrid, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        let (c, h, w) = z0.shape();
        let eps = gaussian_grid(c, h, w, &mut seeded_rng(seed, stream::GUIDANCE));
        Self::new(z0, eps, schedule)
    }

    pub fn z0(&self) -> &LatentGrid {
        &self.z0
    }

    pub fn eps(&self) -> &LatentGrid {
        &self.eps
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.z0.shape()
    }

    /// `add_noise(crop(z0, region), crop(eps, region), t)`.
    pub fn at(&self, t: usize, region: &PatchRegion) -> Result<LatentGrid> {
        let z0 = self.z0.crop(region)?;
        let eps = self.eps.crop(region)?;
        add_noise(&z0, &eps, t, &self.schedule)
    }
}

/// Lanczos-upsamples `prev` to `target_h × target_w`, encodes it and draws
/// the guidance noise from `seed`.
pub fn prepare_guidance(
    prev: &PixelImage,
    codec: &dyn Codec,
    target_h: usize,
    target_w: usize,
    seed: u64,
    schedule: NoiseSchedule,
) -> Result<GuidanceStack> {
    if target_h < prev.height() || target_w < prev.width() {
        return Err(Error::Config(format!(
            "guidance target {target_h}x{target_w} smaller than source {}x{}",
            prev.height(),
            prev.width()
        )));
    }
    codec.latent_shape(target_h, target_w)?;
    let upsampled = lanczos_resize(prev, target_h, target_w);
    let z0 = codec.encode(&upsampled)?;
    GuidanceStack::from_latent(z0, schedule, seed)
}

/// Which Fourier components are averaged with the guidance. Only
/// [`FusionMode::Phase`] is a product mode; the others exist for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    #[default]
    Phase,
    Amplitude,
    AmplitudeAndPhase,
}

/// Unit phasor of `z`; the phase of zero is taken as 0.
fn unit_phasor(z: Complex64) -> Complex64 {
    let n = z.norm();
    if n == 0.0 {
        Complex64::new(1.0, 0.0)
    } else {
        z / n
    }
}

/// Circular mean of two angles, `arg(e^{ia} + e^{ib})`. `None` when the
/// angles are antipodal.
pub fn circular_mean(a: f64, b: f64) -> Option<f64> {
    let s = Complex64::from_polar(1.0, a) + Complex64::from_polar(1.0, b);
    (s.norm() >= DEGENERATE_PHASOR).then(|| s.arg())
}

/// Coefficient-wise fusion of `current` with `guide`. Under
/// [`FusionMode::Phase`] the output keeps `current`'s amplitudes and takes
/// the circular mean of the two phases, falling back to `current`'s phase
/// when the phasors cancel.
pub fn fuse_spectra(current: &Spectrum, guide: &Spectrum, mode: FusionMode) -> Result<Spectrum> {
    if current.shape() != guide.shape() {
        return Err(Error::Shape {
            op: "fuse_spectra",
            expected: current.shape(),
            actual: guide.shape(),
        });
    }
    let (c, h, w) = current.shape();
    let data = current
        .data()
        .iter()
        .zip(guide.data())
        .map(|(&z, &g)| {
            let (pz, pg) = (unit_phasor(z), unit_phasor(g));
            let phase = match mode {
                FusionMode::Amplitude => pz,
                FusionMode::Phase | FusionMode::AmplitudeAndPhase => {
                    let s = pz + pg;
                    let n = s.norm();
                    if n < DEGENERATE_PHASOR {
                        pz
                    } else {
                        s / n
                    }
                }
            };
            let amplitude = match mode {
                FusionMode::Phase => z.norm(),
                FusionMode::Amplitude | FusionMode::AmplitudeAndPhase => {
                    0.5 * (z.norm() + g.norm())
                }
            };
            phase * amplitude
        })
        .collect();
    Spectrum::new(c, h, w, data)
}

/// Phase fusion with a reusable transform plan for one patch size.
#[derive(Debug, Clone)]
pub struct PhaseFuser {
    plan: FourierPlan,
    mode: FusionMode,
}

impl PhaseFuser {
    pub fn new(height: usize, width: usize, mode: FusionMode) -> Self {
        Self {
            plan: FourierPlan::new(height, width),
            mode,
        }
    }

    pub fn fuse(&self, current: &LatentGrid, guide: &LatentGrid) -> Result<LatentGrid> {
        current.ensure_same_shape(guide, "fuse_phase")?;
        let fallback;
        let plan = if self.plan.dims() == (current.height(), current.width()) {
            &self.plan
        } else {
            fallback = FourierPlan::new(current.height(), current.width());
            &fallback
        };
        let fused = fuse_spectra(&plan.forward(current), &plan.forward(guide), self.mode)?;
        let out = plan.inverse_real(&fused);
        out.ensure_finite("fuse_phase")?;
        Ok(out)
    }
}

/// Replaces each Fourier phase of `current` by its circular mean with the
/// matching phase of `guide`, keeping `current`'s amplitudes; the real part
/// of the inverse is returned.
pub fn fuse_phase(current: &LatentGrid, guide: &LatentGrid) -> Result<LatentGrid> {
    PhaseFuser::new(current.height(), current.width(), FusionMode::Phase).fuse(current, guide)
}

/// Chess-mask weight at absolute latent position `(row, col)`: 0 where
/// `row + col` is even (guidance), 1 where odd (denoised).
#[inline]
pub fn chess_weight(row: usize, col: usize) -> f64 {
    ((row + col) % 2) as f64
}

/// `Λ·denoised + (1 − Λ)·guide`, with Λ taken from absolute coordinates.
pub fn chess_mask_apply(
    denoised: &LatentGrid,
    guide: &LatentGrid,
    region: &PatchRegion,
) -> Result<LatentGrid> {
    denoised.ensure_same_shape(guide, "chess_mask_apply")?;
    if (denoised.height(), denoised.width()) != (region.height, region.width) {
        return Err(Error::Shape {
            op: "chess_mask_apply",
            expected: (denoised.channels(), region.height, region.width),
            actual: denoised.shape(),
        });
    }
    let (c, h, w) = denoised.shape();
    Ok(LatentGrid::from_fn(c, h, w, |ch, r, col| {
        if (region.top + r + region.left + col) % 2 == 1 {
            denoised.get(ch, r, col)
        } else {
            guide.get(ch, r, col)
        }
    }))
}

/// Number of guided reverse steps, counted from the noisiest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliderConfig {
    slider: usize,
    steps: usize,
}

impl SliderConfig {
    pub fn new(slider: usize, steps: usize) -> Result<Self> {
        if slider > steps {
            return Err(Error::Config(format!(
                "slider {slider} exceeds step count {steps}"
            )));
        }
        Ok(Self { slider, steps })
    }

    pub fn slider(&self) -> usize {
        self.slider
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Step 0 is the noisiest.
    pub fn is_guided(&self, step_index: usize) -> bool {
        step_index < self.slider
    }
}

/// Which guidance timestep the chess mask composites against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskTiming {
    /// Guidance at `t_prev`, matching the freshly denoised patch.
    #[default]
    NextStep,
    /// Guidance at the current `t`.
    CurrentStep,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{IdentityCodec, PoolCodec};
    use crate::latent::fft2;
    use std::f64::consts::PI;

    fn wave(c: usize, h: usize, w: usize, k: f64) -> LatentGrid {
        LatentGrid::from_fn(c, h, w, |ch, r, col| {
            (k * r as f64 + 0.7 * col as f64 + ch as f64).sin() + 0.1 * (r * col) as f64 / 10.0
        })
    }

    #[test]
    fn circular_mean_cases() {
        let m = circular_mean(0.0, 2.0 * PI - 0.2).unwrap();
        assert!((m + 0.1).abs() < 1e-12, "{m}");
        let m = circular_mean(0.0, PI / 2.0).unwrap();
        assert!((m - PI / 4.0).abs() < 1e-12);
        assert!(circular_mean(0.0, PI).is_none());
    }

    #[test]
    fn identical_inputs_are_fixed_point() {
        let z = wave(2, 8, 6, 0.3);
        let out = fuse_phase(&z, &z).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-6);
    }

    #[test]
    fn antipodal_keeps_current_phase() {
        let z = wave(1, 4, 4, 0.9);
        let neg = z.map(|v| -v);
        let out = fuse_phase(&z, &neg).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-9);
    }

    #[test]
    fn fused_amplitude_matches_current() {
        let z = wave(1, 8, 8, 0.4);
        let g = wave(1, 8, 8, 1.3).map(|v| v * 2.0 + 0.5);
        let fused = fuse_spectra(&fft2(&z), &fft2(&g), FusionMode::Phase).unwrap();
        for (a, b) in fused.data().iter().zip(fft2(&z).data()) {
            assert!((a.norm() - b.norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn ablation_modes() {
        let z = wave(1, 4, 4, 0.4);
        let g = wave(1, 4, 4, 1.1);
        let (fz, fg) = (fft2(&z), fft2(&g));
        let amp = fuse_spectra(&fz, &fg, FusionMode::Amplitude).unwrap();
        for ((a, x), y) in amp.data().iter().zip(fz.data()).zip(fg.data()) {
            assert!((a.norm() - 0.5 * (x.norm() + y.norm())).abs() < 1e-9);
            if x.norm() > 1e-9 {
                assert!((a.arg() - x.arg()).abs() < 1e-9);
            }
        }
        let both = fuse_spectra(&fz, &fg, FusionMode::AmplitudeAndPhase).unwrap();
        let phase = fuse_spectra(&fz, &fg, FusionMode::Phase).unwrap();
        for ((b, p), x) in both.data().iter().zip(phase.data()).zip(fz.data()) {
            if x.norm() > 1e-9 && p.norm() > 1e-9 {
                assert!((b.arg() - p.arg()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn chess_mask_corner() {
        let d = LatentGrid::filled(1, 2, 2, 1.0);
        let g = LatentGrid::filled(1, 2, 2, 0.0);
        let out = chess_mask_apply(&d, &g, &PatchRegion::new(0, 0, 2, 2)).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 1.0, 0.0]);
        let out = chess_mask_apply(&d, &g, &PatchRegion::new(0, 1, 2, 2)).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn chess_mask_count_128() {
        let d = LatentGrid::filled(1, 128, 128, 1.0);
        let g = LatentGrid::zeros(1, 128, 128);
        let out = chess_mask_apply(&d, &g, &PatchRegion::new(3, 8, 128, 128)).unwrap();
        assert_eq!(out.data().iter().filter(|&&v| v == 1.0).count(), 8192);
    }

    #[test]
    fn slider_gate() {
        let s = SliderConfig::new(30, 50).unwrap();
        assert!((0..30).all(|i| s.is_guided(i)));
        assert!((30..50).all(|i| !s.is_guided(i)));
        let none = SliderConfig::new(0, 50).unwrap();
        assert!((0..50).all(|i| !none.is_guided(i)));
        let all = SliderConfig::new(50, 50).unwrap();
        assert!((0..50).all(|i| all.is_guided(i)));
        assert!(SliderConfig::new(99, 50).is_err());
    }

    #[test]
    fn guidance_crop_and_noise_commute() {
        let sched = NoiseSchedule::default_linear(50).unwrap();
        let z0 = wave(4, 12, 9, 0.2);
        let stack = GuidanceStack::from_latent(z0.clone(), sched.clone(), 11).unwrap();
        let region = PatchRegion::new(2, 3, 7, 5);
        for t in [0, 20, 640, 1000] {
            let full = add_noise(stack.z0(), stack.eps(), t, &sched).unwrap();
            let local = stack.at(t, &region).unwrap();
            assert!(local.max_abs_diff(&full.crop(&region).unwrap()) < 1e-9);
            assert_eq!(local, stack.at(t, &region).unwrap());
        }
        assert_eq!(stack.at(0, &region).unwrap(), z0.crop(&region).unwrap());
        assert!(stack.at(20, &PatchRegion::new(8, 0, 7, 5)).is_err());
    }

    #[test]
    fn prepare_guidance_shapes_and_determinism() {
        let sched = NoiseSchedule::default_linear(10).unwrap();
        let img = PixelImage::from_fn(3, 8, 8, |c, r, col| ((c + r + col) % 5) as f64 / 4.0);
        let codec = IdentityCodec::default();
        let same = prepare_guidance(&img, &codec, 8, 8, 3, sched.clone()).unwrap();
        assert_eq!(same.z0(), &codec.encode(&img).unwrap());
        let a = prepare_guidance(&img, &codec, 16, 16, 3, sched.clone()).unwrap();
        let b = prepare_guidance(&img, &codec, 16, 16, 3, sched.clone()).unwrap();
        assert_eq!(a.z0(), b.z0());
        assert_eq!(a.eps(), b.eps());
        assert!(prepare_guidance(&img, &codec, 4, 4, 3, sched.clone()).is_err());
        assert!(prepare_guidance(&img, &PoolCodec::new(8), 20, 20, 3, sched).is_err());
    }
}
