//! The noise-prediction contract called once per patch, the probe that
//! enforces its size limit, and analytic oracle implementations.

use std::collections::HashMap;
use std::fmt;

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::guidance::GuidanceStack;
use crate::image::{lanczos_resize, PixelImage};
use crate::latent::{LatentGrid, PatchRegion};
use crate::schedule::NoiseSchedule;

/// Opaque conditioning token standing in for a prompt embedding.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Condition {
    Id(u64),
    Bytes(Vec<u8>),
}

impl Default for Condition {
    fn default() -> Self {
        Condition::Id(0)
    }
}

impl From<u64> for Condition {
    fn from(id: u64) -> Self {
        Condition::Id(id)
    }
}

impl From<&str> for Condition {
    fn from(s: &str) -> Self {
        Condition::Bytes(s.as_bytes().to_vec())
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Id(id) => write!(f, "{id}"),
            Condition::Bytes(b) => write!(f, "{}", String::from_utf8_lossy(b)),
        }
    }
}

/// What a denoiser learns about the stage it is about to serve.
pub struct StageContext<'a> {
    pub index: usize,
    pub pixel_height: usize,
    pub pixel_width: usize,
    /// `(channels, height, width)` of the latent being generated.
    pub latent_shape: (usize, usize, usize),
    pub schedule: &'a NoiseSchedule,
    pub guidance: Option<&'a GuidanceStack>,
    pub codec: &'a dyn Codec,
    pub condition: &'a Condition,
}

/// A noise predictor invoked on one latent patch at a time.
///
/// `region` gives the absolute placement of `patch` in the full grid. Real
/// networks ignore it; oracles use it to localize their target.
pub trait Denoiser {
    fn predict_noise(
        &self,
        patch: &LatentGrid,
        t: usize,
        condition: &Condition,
        region: &PatchRegion,
    ) -> Result<LatentGrid>;

    /// Largest `(height, width)` this denoiser accepts, if it has a limit.
    fn max_patch(&self) -> Option<(usize, usize)> {
        None
    }

    /// Called once before each cascade stage.
    fn prepare_stage(&mut self, _ctx: &StageContext<'_>) -> Result<()> {
        Ok(())
    }
}

/// Enforces the patch-size limit on every call and records what the
/// denoiser was actually shown.
pub struct DenoiserProbe<'a> {
    inner: &'a dyn Denoiser,
    max_height: usize,
    max_width: usize,
    calls: usize,
    max_area_seen: usize,
}

impl<'a> DenoiserProbe<'a> {
    pub fn new(inner: &'a dyn Denoiser, max_height: usize, max_width: usize) -> Result<Self> {
        if let Some((h, w)) = inner.max_patch() {
            if max_height > h || max_width > w {
                return Err(Error::Config(format!(
                    "engine patch {max_height}x{max_width} exceeds denoiser limit {h}x{w}"
                )));
            }
        }
        Ok(Self {
            inner,
            max_height,
            max_width,
            calls: 0,
            max_area_seen: 0,
        })
    }

    pub fn predict_noise(
        &mut self,
        patch: &LatentGrid,
        t: usize,
        condition: &Condition,
        region: &PatchRegion,
    ) -> Result<LatentGrid> {
        if patch.height() > self.max_height || patch.width() > self.max_width {
            return Err(Error::ContractViolation {
                height: patch.height(),
                width: patch.width(),
                max_height: self.max_height,
                max_width: self.max_width,
            });
        }
        self.calls += 1;
        self.max_area_seen = self.max_area_seen.max(patch.area());
        let eps = self.inner.predict_noise(patch, t, condition, region)?;
        patch.ensure_same_shape(&eps, "predict_noise")?;
        eps.ensure_finite("predict_noise")?;
        Ok(eps)
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn max_area_seen(&self) -> usize {
        self.max_area_seen
    }
}

/// Always predicts zero noise; DDIM then reduces to pure rescaling.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_noise(
        &self,
        patch: &LatentGrid,
        _t: usize,
        _condition: &Condition,
        _region: &PatchRegion,
    ) -> Result<LatentGrid> {
        let (c, h, w) = patch.shape();
        Ok(LatentGrid::zeros(c, h, w))
    }
}

/// Exact noise for `patch` assuming it was produced by forward-noising the
/// matching crop of `target`.
pub fn oracle_predict(
    patch: &LatentGrid,
    t: usize,
    region: &PatchRegion,
    target: &LatentGrid,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    if t == 0 {
        return Err(Error::Singularity {
            t,
            reason: "oracle noise is undefined where 1 - alpha_bar = 0",
        });
    }
    if t > sched.train_steps() {
        return Err(Error::Config(format!("timestep {t} outside schedule")));
    }
    let clean = target.crop(region)?;
    let ab = sched.alpha_bar(t);
    let (signal, inv_noise) = (ab.sqrt(), 1.0 / (1.0 - ab).sqrt());
    patch.zip_map(&clean, "oracle_predict", |z, x| {
        (z - signal * x) * inv_noise
    })
}

/// Analytic denoiser that knows the clean latent for each condition.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    schedule: NoiseSchedule,
    targets: HashMap<Condition, LatentGrid>,
    max_patch: Option<(usize, usize)>,
}

impl OracleDenoiser {
    pub fn new(schedule: NoiseSchedule) -> Self {
        Self {
            schedule,
            targets: HashMap::new(),
            max_patch: None,
        }
    }

    pub fn with_target(mut self, condition: Condition, target: LatentGrid) -> Self {
        self.set_target(condition, target);
        self
    }

    pub fn with_max_patch(mut self, height: usize, width: usize) -> Self {
        self.max_patch = Some((height, width));
        self
    }

    pub fn set_target(&mut self, condition: Condition, target: LatentGrid) {
        self.targets.insert(condition, target);
    }

    pub fn target(&self, condition: &Condition) -> Option<&LatentGrid> {
        self.targets.get(condition)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_noise(
        &self,
        patch: &LatentGrid,
        t: usize,
        condition: &Condition,
        region: &PatchRegion,
    ) -> Result<LatentGrid> {
        let target = self.targets.get(condition).ok_or_else(|| {
            Error::Denoiser(format!(
                "no oracle target registered for condition {condition}"
            ))
        })?;
        oracle_predict(patch, t, region, target, &self.schedule)
    }

    fn max_patch(&self) -> Option<(usize, usize)> {
        self.max_patch
    }

    fn prepare_stage(&mut self, ctx: &StageContext<'_>) -> Result<()> {
        self.schedule = ctx.schedule.clone();
        if let Some(target) = self.targets.get(ctx.condition) {
            if target.shape() != ctx.latent_shape {
                return Err(Error::Shape {
                    op: "oracle target",
                    expected: ctx.latent_shape,
                    actual: target.shape(),
                });
            }
        }
        Ok(())
    }
}

/// Where a [`CascadeOracle`] gets its per-stage target.
#[derive(Debug, Clone)]
pub enum OracleTarget {
    /// `base` for the first stage, then the stage's encoded guidance.
    FollowGuidance { base: LatentGrid },
    /// The encoding of `image` resampled to each stage's pixel size.
    Image(PixelImage),
}

/// Oracle that re-targets itself at every cascade stage.
#[derive(Debug, Clone)]
pub struct CascadeOracle {
    policy: OracleTarget,
    inner: OracleDenoiser,
}

impl CascadeOracle {
    pub fn new(policy: OracleTarget, schedule: NoiseSchedule) -> Self {
        Self {
            policy,
            inner: OracleDenoiser::new(schedule),
        }
    }

    /// Target of the most recently prepared stage.
    pub fn current_target(&self, condition: &Condition) -> Option<&LatentGrid> {
        self.inner.target(condition)
    }
}

impl Denoiser for CascadeOracle {
    fn predict_noise(
        &self,
        patch: &LatentGrid,
        t: usize,
        condition: &Condition,
        region: &PatchRegion,
    ) -> Result<LatentGrid> {
        self.inner.predict_noise(patch, t, condition, region)
    }

    fn prepare_stage(&mut self, ctx: &StageContext<'_>) -> Result<()> {
        let target = match (&self.policy, ctx.guidance) {
            (OracleTarget::FollowGuidance { .. }, Some(stack)) => stack.z0().clone(),
            (OracleTarget::FollowGuidance { base }, None) => base.clone(),
            (OracleTarget::Image(img), _) => {
                let resized = lanczos_resize(img, ctx.pixel_height, ctx.pixel_width);
                ctx.codec.encode(&resized)?
            }
        };
        self.inner.set_target(ctx.condition.clone(), target);
        self.inner.prepare_stage(ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::add_noise;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default_linear(50).unwrap()
    }

    fn target() -> LatentGrid {
        LatentGrid::from_fn(4, 12, 10, |c, r, col| {
            ((c + 1) as f64 * 0.37 + r as f64 * 0.11 - col as f64 * 0.07).cos()
        })
    }

    #[test]
    fn oracle_recovers_exact_noise() {
        let s = sched();
        let tgt = target();
        let region = PatchRegion::new(3, 2, 6, 5);
        let eps = LatentGrid::from_fn(4, 6, 5, |c, r, col| ((c * 13 + r * 5 + col) as f64).sin());
        for t in [1, 20, 500, 1000] {
            let patch = add_noise(&tgt.crop(&region).unwrap(), &eps, t, &s).unwrap();
            let got = oracle_predict(&patch, t, &region, &tgt, &s).unwrap();
            assert!(got.max_abs_diff(&eps) < 1e-9, "t={t}");
        }
    }

    #[test]
    fn noiseless_input_predicts_zero() {
        let s = sched();
        let tgt = target();
        let region = PatchRegion::new(0, 0, 4, 4);
        let ab = s.alpha_bar(300).sqrt();
        let patch = tgt.crop(&region).unwrap().map(|v| ab * v);
        let got = oracle_predict(&patch, 300, &region, &tgt, &s).unwrap();
        assert!(got.max_abs() < 1e-12);
    }

    #[test]
    fn oracle_is_patch_local() {
        let s = sched();
        let tgt = target();
        let z = LatentGrid::from_fn(4, 12, 10, |c, r, col| (c + r * col) as f64 * 0.01 - 0.3);
        let full = oracle_predict(&z, 420, &tgt.full_region(), &tgt, &s).unwrap();
        for region in [
            PatchRegion::new(0, 0, 3, 3),
            PatchRegion::new(5, 4, 7, 6),
            PatchRegion::new(11, 9, 1, 1),
        ] {
            let local = oracle_predict(&z.crop(&region).unwrap(), 420, &region, &tgt, &s).unwrap();
            assert_eq!(local, full.crop(&region).unwrap());
        }
    }

    #[test]
    fn oracle_rejects_t_zero() {
        let s = sched();
        let tgt = target();
        let err = oracle_predict(&tgt, 0, &tgt.full_region(), &tgt, &s).unwrap_err();
        assert!(matches!(err, Error::Singularity { t: 0, .. }));
    }

    #[test]
    fn probe_trips_on_oversize_patch() {
        let d = ZeroDenoiser;
        let mut probe = DenoiserProbe::new(&d, 4, 4).unwrap();
        let c = Condition::default();
        let ok = LatentGrid::zeros(4, 4, 3);
        assert_eq!(
            probe
                .predict_noise(&ok, 10, &c, &PatchRegion::new(0, 0, 4, 3))
                .unwrap()
                .shape(),
            ok.shape()
        );
        let big = LatentGrid::zeros(4, 5, 4);
        let err = probe
            .predict_noise(&big, 10, &c, &PatchRegion::new(0, 0, 5, 4))
            .unwrap_err();
        assert!(matches!(err, Error::ContractViolation { height: 5, .. }));
        assert_eq!(probe.calls(), 1);
        assert_eq!(probe.max_area_seen(), 12);
    }

    #[test]
    fn probe_respects_declared_limit() {
        let d = OracleDenoiser::new(sched()).with_max_patch(8, 8);
        assert!(DenoiserProbe::new(&d, 16, 16).is_err());
        assert!(DenoiserProbe::new(&d, 8, 8).is_ok());
    }

    #[test]
    fn unknown_condition_is_an_error() {
        let d = OracleDenoiser::new(sched()).with_target(Condition::Id(1), target());
        let p = LatentGrid::zeros(4, 2, 2);
        let r = PatchRegion::new(0, 0, 2, 2);
        assert!(d.predict_noise(&p, 5, &Condition::Id(1), &r).is_ok());
        assert!(d.predict_noise(&p, 5, &Condition::Id(2), &r).is_err());
    }
}
