//! Per-timestep patch denoising.
//!
//! Each timestep reads patches from an immutable snapshot of `z_t` and
//! writes the denoised result into a separate `z_{t_prev}` buffer. A ledger
//! records which latent positions have been denoised in the current step;
//! the first denoising of a position wins, and already-denoised positions
//! close to freshly denoised ones are averaged to hide seams.
//!
//! Reading from the snapshot is what makes overlapping patches see the
//! reverted (pre-step) values of positions another patch already denoised.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Condition, Denoiser, DenoiserProbe};
use crate::error::{Error, Result};
use crate::guidance::{
    chess_mask_apply, FusionMode, GuidanceStack, MaskTiming, PhaseFuser, SliderConfig,
};
use crate::latent::{LatentGrid, PatchRegion};
use crate::noise::{seeded_rng, stream};
use crate::schedule::{ddim_step, NoiseSchedule, StepPair};

pub const DEFAULT_PATCH: usize = 128;
pub const DEFAULT_OVERLAP_TOLERANCE: usize = 10;
/// Patches per timestep are capped at this multiple of the tiling count.
pub const LIVELOCK_FACTOR: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selection {
    /// Uniform un-denoised position, covered by a uniformly offset patch.
    #[default]
    Random,
    /// First un-denoised position in row-major order, patch anchored there.
    Raster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub patch_height: usize,
    pub patch_width: usize,
    /// Chebyshev radius, in latent pixels, of the averaging band around
    /// freshly denoised positions. Zero disables averaging.
    pub overlap_tolerance: usize,
    pub selection: Selection,
    pub fusion: FusionMode,
    pub mask_timing: MaskTiming,
}

impl EngineConfig {
    pub fn new(patch_height: usize, patch_width: usize) -> Self {
        Self {
            patch_height,
            patch_width,
            overlap_tolerance: DEFAULT_OVERLAP_TOLERANCE,
            selection: Selection::Random,
            fusion: FusionMode::Phase,
            mask_timing: MaskTiming::NextStep,
        }
    }

    pub fn with_selection(mut self, selection: Selection) -> Self {
        self.selection = selection;
        self
    }

    pub fn with_tolerance(mut self, tolerance: usize) -> Self {
        self.overlap_tolerance = tolerance;
        self
    }

    pub fn patch_area(&self) -> usize {
        self.patch_height * self.patch_width
    }
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self::new(DEFAULT_PATCH, DEFAULT_PATCH)
    }
}

/// Per-timestep record of which positions have been denoised.
#[derive(Debug, Clone)]
pub struct StepLedger {
    height: usize,
    width: usize,
    denoised: Vec<bool>,
    first_writes: Vec<u32>,
    band: Vec<bool>,
    band_cells: Vec<usize>,
    // Un-denoised positions, with `slot` giving each one's index in `pending`.
    pending: Vec<usize>,
    slot: Vec<usize>,
}

impl StepLedger {
    pub fn new(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            denoised: vec![false; n],
            first_writes: vec![0; n],
            band: vec![false; n],
            band_cells: Vec::new(),
            pending: (0..n).collect(),
            slot: (0..n).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.denoised.iter_mut().for_each(|d| *d = false);
        self.first_writes.iter_mut().for_each(|c| *c = 0);
        self.clear_band();
        self.pending.clear();
        self.pending.extend(0..self.height * self.width);
        self.slot.clear();
        self.slot.extend(0..self.height * self.width);
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_denoised(&self, row: usize, col: usize) -> bool {
        self.denoised[row * self.width + col]
    }

    /// Whether `(row, col)` was averaged by the most recent paste.
    pub fn in_band(&self, row: usize, col: usize) -> bool {
        self.band[row * self.width + col]
    }

    pub fn remaining(&self) -> usize {
        self.pending.len()
    }

    pub fn is_full(&self) -> bool {
        self.pending.is_empty()
    }

    /// How many times each position was first-written this step.
    pub fn first_write_counts(&self) -> &[u32] {
        &self.first_writes
    }

    fn mark(&mut self, idx: usize) {
        debug_assert!(!self.denoised[idx]);
        self.denoised[idx] = true;
        self.first_writes[idx] += 1;
        let s = self.slot[idx];
        let last = *self.pending.last().expect("pending non-empty");
        self.pending.swap_remove(s);
        if last != idx {
            self.slot[last] = s;
        }
    }

    fn clear_band(&mut self) {
        for &i in &self.band_cells {
            self.band[i] = false;
        }
        self.band_cells.clear();
    }

    fn flag_band(&mut self, idx: usize) {
        self.band[idx] = true;
        self.band_cells.push(idx);
    }
}

/// What a single paste did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PasteOutcome {
    pub fresh: usize,
    pub averaged: usize,
}

/// Mutable engine state for one generation.
#[derive(Debug, Clone)]
pub struct EngineState {
    prev: LatentGrid,
    next: LatentGrid,
    ledger: StepLedger,
    rng: ChaCha8Rng,
    raster_cursor: usize,
    config: EngineConfig,
    schedule: NoiseSchedule,
    fuser: PhaseFuser,
    last_patch_count: usize,
}

impl EngineState {
    /// State positioned at the start of a timestep with `prev = z_t`.
    pub fn new(
        z_t: LatentGrid,
        schedule: NoiseSchedule,
        config: EngineConfig,
        seed: u64,
    ) -> Result<Self> {
        let (_, h, w) = z_t.shape();
        if config.patch_height == 0
            || config.patch_width == 0
            || config.patch_height > h
            || config.patch_width > w
        {
            return Err(Error::Config(format!(
                "patch {}x{} must be non-empty and fit the {h}x{w} latent",
                config.patch_height, config.patch_width
            )));
        }
        z_t.ensure_finite("EngineState::new")?;
        let fuser = PhaseFuser::new(config.patch_height, config.patch_width, config.fusion);
        Ok(Self {
            next: z_t.clone(),
            prev: z_t,
            ledger: StepLedger::new(h, w),
            rng: seeded_rng(seed, stream::PATCH_SELECTION),
            raster_cursor: 0,
            config,
            schedule,
            fuser,
            last_patch_count: 0,
        })
    }

    pub fn prev(&self) -> &LatentGrid {
        &self.prev
    }

    pub fn next(&self) -> &LatentGrid {
        &self.next
    }

    pub fn ledger(&self) -> &StepLedger {
        &self.ledger
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn last_patch_count(&self) -> usize {
        self.last_patch_count
    }

    /// Starts a new timestep from `z_t`.
    pub fn reset(&mut self, z_t: LatentGrid) -> Result<()> {
        self.prev.ensure_same_shape(&z_t, "EngineState::reset")?;
        self.next = z_t.clone();
        self.prev = z_t;
        self.ledger.clear();
        self.raster_cursor = 0;
        self.last_patch_count = 0;
        Ok(())
    }

    /// Chooses a patch containing at least one un-denoised position.
    pub fn select_patch(&mut self) -> Result<PatchRegion> {
        if self.ledger.is_full() {
            return Err(Error::Scheduling(
                "every position is already denoised this step".into(),
            ));
        }
        let (h, w) = (self.ledger.height, self.ledger.width);
        let (ph, pw) = (self.config.patch_height, self.config.patch_width);
        let region = match self.config.selection {
            Selection::Random => {
                let idx = self.ledger.pending[self.rng.random_range(0..self.ledger.remaining())];
                let (r, c) = (idx / w, idx % w);
                let top = self
                    .rng
                    .random_range(r.saturating_sub(ph - 1)..=r.min(h - ph));
                let left = self
                    .rng
                    .random_range(c.saturating_sub(pw - 1)..=c.min(w - pw));
                PatchRegion::new(top, left, ph, pw)
            }
            Selection::Raster => {
                while self.ledger.denoised[self.raster_cursor] {
                    self.raster_cursor += 1;
                }
                let (r, c) = (self.raster_cursor / w, self.raster_cursor % w);
                PatchRegion::new(r.min(h - ph), c.min(w - pw), ph, pw)
            }
        };
        Ok(region)
    }

    /// Writes `patch` into the step output.
    ///
    /// Un-denoised positions are written and marked. Already-denoised
    /// positions within `overlap_tolerance` (Chebyshev) of a position
    /// freshly marked by this paste become the mean of the existing and new
    /// values. All other positions keep their first denoising.
    pub fn blend_paste(
        &mut self,
        region: &PatchRegion,
        patch: &LatentGrid,
    ) -> Result<PasteOutcome> {
        let (ch, h, w) = self.next.shape();
        region.check_inside(h, w)?;
        let expected = (ch, region.height, region.width);
        if patch.shape() != expected {
            return Err(Error::Shape {
                op: "blend_paste",
                expected,
                actual: patch.shape(),
            });
        }
        self.ledger.clear_band();

        let (rh, rw) = (region.height, region.width);
        // prefix[(i)*(rw+1)+j] = fresh cells in region rows < i, cols < j
        let mut prefix = vec![0u32; (rh + 1) * (rw + 1)];
        for i in 0..rh {
            let mut row_sum = 0;
            for j in 0..rw {
                let idx = (region.top + i) * w + region.left + j;
                row_sum += u32::from(!self.ledger.denoised[idx]);
                prefix[(i + 1) * (rw + 1) + j + 1] = prefix[i * (rw + 1) + j + 1] + row_sum;
            }
        }
        let fresh_in = |i0: usize, j0: usize, i1: usize, j1: usize| -> u32 {
            prefix[i1 * (rw + 1) + j1] + prefix[i0 * (rw + 1) + j0]
                - prefix[i0 * (rw + 1) + j1]
                - prefix[i1 * (rw + 1) + j0]
        };

        let tol = self.config.overlap_tolerance;
        let mut outcome = PasteOutcome::default();
        let plane = h * w;
        let patch_plane = rh * rw;
        for i in 0..rh {
            for j in 0..rw {
                let idx = (region.top + i) * w + region.left + j;
                let src = i * rw + j;
                if !self.ledger.denoised[idx] {
                    for c in 0..ch {
                        self.next.data_mut()[c * plane + idx] = patch.data()[c * patch_plane + src];
                    }
                    self.ledger.mark(idx);
                    outcome.fresh += 1;
                } else if tol > 0 {
                    let near = fresh_in(
                        i.saturating_sub(tol),
                        j.saturating_sub(tol),
                        (i + tol + 1).min(rh),
                        (j + tol + 1).min(rw),
                    );
                    if near > 0 {
                        let next = self.next.data_mut();
                        for c in 0..ch {
                            let dst = c * plane + idx;
                            next[dst] = 0.5 * (next[dst] + patch.data()[c * patch_plane + src]);
                        }
                        self.ledger.flag_band(idx);
                        outcome.averaged += 1;
                    }
                }
            }
        }
        Ok(outcome)
    }

    /// Denoises one full timestep `pair.t → pair.t_prev` and returns the
    /// assembled `z_{t_prev}`.
    pub fn denoise_timestep(
        &mut self,
        pair: StepPair,
        denoiser: &mut DenoiserProbe<'_>,
        guidance: Option<&GuidanceStack>,
        guided: bool,
        condition: &Condition,
    ) -> Result<LatentGrid> {
        let guidance = match (guided, guidance) {
            (true, Some(g)) => {
                if g.shape() != self.prev.shape() {
                    return Err(Error::Shape {
                        op: "guidance",
                        expected: self.prev.shape(),
                        actual: g.shape(),
                    });
                }
                Some(g)
            }
            (true, None) => {
                return Err(Error::Config(
                    "guided step requested without guidance".into(),
                ))
            }
            (false, _) => None,
        };
        let (_, h, w) = self.prev.shape();
        let limit = LIVELOCK_FACTOR * (h * w).div_ceil(self.config.patch_area());
        let mut patches = 0;
        while !self.ledger.is_full() {
            if patches >= limit {
                return Err(Error::Livelock { patches, limit });
            }
            let region = self.select_patch()?;
            let mut input = self.prev.crop(&region)?;
            if let Some(g) = guidance {
                input = self.fuser.fuse(&input, &g.at(pair.t, &region)?)?;
            }
            let eps = denoiser.predict_noise(&input, pair.t, condition, &region)?;
            let mut out = ddim_step(&input, &eps, pair, &self.schedule)?;
            if let Some(g) = guidance {
                let t_mask = match self.config.mask_timing {
                    MaskTiming::NextStep => pair.t_prev,
                    MaskTiming::CurrentStep => pair.t,
                };
                out = chess_mask_apply(&out, &g.at(t_mask, &region)?, &region)?;
            }
            self.blend_paste(&region, &out)?;
            patches += 1;
        }
        self.last_patch_count = patches;
        self.next.ensure_finite("denoise_timestep")?;
        Ok(self.next.clone())
    }
}

/// Instrumentation gathered over a whole sampling run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleStats {
    pub patches_per_step: Vec<usize>,
    pub denoiser_calls: usize,
    pub max_patch_area: usize,
}

/// Guidance for a sampling run and how many steps use it.
#[derive(Debug, Clone, Copy)]
pub struct Guide<'a> {
    pub stack: &'a GuidanceStack,
    pub slider: SliderConfig,
}

/// Runs the full reverse trajectory of `schedule` from `z_t`.
pub fn sample(
    z_t: LatentGrid,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    condition: &Condition,
    config: &EngineConfig,
    guide: Option<Guide<'_>>,
    seed: u64,
) -> Result<(LatentGrid, SampleStats)> {
    if let Some(g) = &guide {
        if g.slider.steps() != schedule.inference_steps() {
            return Err(Error::Config(format!(
                "slider configured for {} steps but schedule has {}",
                g.slider.steps(),
                schedule.inference_steps()
            )));
        }
    }
    let mut probe = DenoiserProbe::new(denoiser, config.patch_height, config.patch_width)?;
    let mut state = EngineState::new(z_t, schedule.clone(), config.clone(), seed)?;
    let mut stats = SampleStats::default();
    let mut z = state.prev().clone();
    for (step, pair) in schedule.pairs().into_iter().enumerate() {
        let guided = guide.is_some_and(|g| g.slider.is_guided(step));
        z = state.denoise_timestep(pair, &mut probe, guide.map(|g| g.stack), guided, condition)?;
        stats.patches_per_step.push(state.last_patch_count());
        state.reset(z.clone())?;
    }
    stats.denoiser_calls = probe.calls();
    stats.max_patch_area = probe.max_area_seen();
    Ok((z, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{OracleDenoiser, ZeroDenoiser};

    fn state(
        h: usize,
        w: usize,
        ph: usize,
        pw: usize,
        selection: Selection,
        seed: u64,
    ) -> EngineState {
        let sched = NoiseSchedule::default_linear(10).unwrap();
        let cfg = EngineConfig::new(ph, pw).with_selection(selection);
        EngineState::new(LatentGrid::zeros(1, h, w), sched, cfg, seed).unwrap()
    }

    fn run_coverage(st: &mut EngineState) -> Vec<PatchRegion> {
        let mut regions = Vec::new();
        while !st.ledger().is_full() {
            let r = st.select_patch().unwrap();
            let (ph, pw) = (r.height, r.width);
            st.blend_paste(&r, &LatentGrid::zeros(1, ph, pw)).unwrap();
            regions.push(r);
        }
        regions
    }

    #[test]
    fn raster_tiles_in_order() {
        let mut st = state(16, 16, 8, 8, Selection::Raster, 0);
        let regions = run_coverage(&mut st);
        let origins: Vec<_> = regions.iter().map(|r| (r.top, r.left)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 8), (8, 0), (8, 8)]);
    }

    #[test]
    fn single_patch_grid() {
        let mut st = state(8, 8, 8, 8, Selection::Random, 5);
        assert_eq!(run_coverage(&mut st), vec![PatchRegion::new(0, 0, 8, 8)]);
        assert!(matches!(st.select_patch(), Err(Error::Scheduling(_))));
    }

    #[test]
    fn random_selection_always_covers() {
        for seed in 0..1000 {
            let mut st = state(37, 51, 8, 8, Selection::Random, seed);
            for region in run_coverage(&mut st) {
                region.check_inside(37, 51).unwrap();
            }
            assert!(st.ledger().first_write_counts().iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn selected_patch_has_fresh_cell() {
        let mut st = state(20, 20, 6, 6, Selection::Random, 9);
        while !st.ledger().is_full() {
            let r = st.select_patch().unwrap();
            let fresh = (r.top..r.bottom())
                .flat_map(|i| (r.left..r.right()).map(move |j| (i, j)))
                .any(|(i, j)| !st.ledger().is_denoised(i, j));
            assert!(fresh);
            st.blend_paste(&r, &LatentGrid::zeros(1, 6, 6)).unwrap();
        }
    }

    #[test]
    fn disjoint_pastes_do_not_average() {
        let mut st = state(4, 8, 4, 4, Selection::Raster, 0);
        let a = st
            .blend_paste(
                &PatchRegion::new(0, 0, 4, 4),
                &LatentGrid::filled(1, 4, 4, 1.0),
            )
            .unwrap();
        let b = st
            .blend_paste(
                &PatchRegion::new(0, 4, 4, 4),
                &LatentGrid::filled(1, 4, 4, 3.0),
            )
            .unwrap();
        assert_eq!((a.averaged, b.averaged), (0, 0));
        assert_eq!(st.next().get(0, 0, 3), 1.0);
        assert_eq!(st.next().get(0, 0, 4), 3.0);
    }

    #[test]
    fn duplicate_paste_is_a_no_op() {
        let mut st = state(8, 8, 4, 4, Selection::Raster, 0);
        let region = PatchRegion::new(2, 2, 4, 4);
        let p = LatentGrid::from_fn(1, 4, 4, |_, r, c| (r * 4 + c) as f64);
        st.blend_paste(&region, &p).unwrap();
        let before = st.next().clone();
        st.blend_paste(&region, &p).unwrap();
        assert_eq!(st.next(), &before);
    }

    #[test]
    fn one_dimensional_overlap_band() {
        // 1 x 40 strip: a at [0, 24), then b at [8, 32) with tolerance 10.
        let sched = NoiseSchedule::default_linear(10).unwrap();
        let cfg = EngineConfig::new(1, 24);
        let mut st = EngineState::new(LatentGrid::zeros(1, 1, 40), sched, cfg, 0).unwrap();
        st.blend_paste(
            &PatchRegion::new(0, 0, 1, 24),
            &LatentGrid::filled(1, 1, 24, 2.0),
        )
        .unwrap();
        st.blend_paste(
            &PatchRegion::new(0, 8, 1, 24),
            &LatentGrid::filled(1, 1, 24, 6.0),
        )
        .unwrap();
        let row: Vec<f64> = (0..40).map(|c| st.next().get(0, 0, c)).collect();
        for (c, v) in row.iter().enumerate() {
            let want = match c {
                0..=7 => 2.0,   // untouched by the second patch
                8..=13 => 2.0,  // overlap deeper than 10 from fresh cell 24
                14..=23 => 4.0, // band
                24..=31 => 6.0, // fresh
                _ => 0.0,
            };
            assert_eq!(*v, want, "col {c}");
        }
        assert!(st.ledger().in_band(0, 14) && !st.ledger().in_band(0, 13));
    }

    #[test]
    fn full_patch_matches_single_ddim_step() {
        let sched = NoiseSchedule::default_linear(10).unwrap();
        let target = LatentGrid::from_fn(2, 6, 6, |c, r, col| (c + r + col) as f64 * 0.1);
        let oracle =
            OracleDenoiser::new(sched.clone()).with_target(Condition::default(), target.clone());
        let z = LatentGrid::from_fn(2, 6, 6, |c, r, col| ((c * 36 + r * 6 + col) as f64).sin());
        let pair = sched.pairs()[0];
        let mut probe = DenoiserProbe::new(&oracle, 6, 6).unwrap();
        let mut st =
            EngineState::new(z.clone(), sched.clone(), EngineConfig::new(6, 6), 1).unwrap();
        let out = st
            .denoise_timestep(pair, &mut probe, None, false, &Condition::default())
            .unwrap();
        let eps = oracle
            .predict_noise(&z, pair.t, &Condition::default(), &z.full_region())
            .unwrap();
        let want = ddim_step(&z, &eps, pair, &sched).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn guided_step_without_guidance_is_rejected() {
        let sched = NoiseSchedule::default_linear(10).unwrap();
        let d = ZeroDenoiser;
        let mut probe = DenoiserProbe::new(&d, 4, 4).unwrap();
        let mut st = EngineState::new(
            LatentGrid::zeros(1, 4, 4),
            sched.clone(),
            EngineConfig::new(4, 4),
            0,
        )
        .unwrap();
        assert!(st
            .denoise_timestep(
                sched.pairs()[0],
                &mut probe,
                None,
                true,
                &Condition::default()
            )
            .is_err());
    }

    #[test]
    fn oversize_patch_config_rejected() {
        let sched = NoiseSchedule::default_linear(10).unwrap();
        assert!(EngineState::new(
            LatentGrid::zeros(1, 4, 4),
            sched,
            EngineConfig::new(5, 4),
            0
        )
        .is_err());
    }
}
