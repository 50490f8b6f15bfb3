//! Stage orchestration: a base generation followed by guided stages, each
//! guided by the previous stage's decoded image upsampled in pixel space.

use std::time::{Duration, Instant};

use crate::codec::Codec;
use crate::denoiser::{Condition, Denoiser, StageContext};
use crate::engine::{
    sample, EngineConfig, Guide, SampleStats, Selection, DEFAULT_OVERLAP_TOLERANCE, DEFAULT_PATCH,
};
use crate::error::{Error, Result};
use crate::guidance::{prepare_guidance, FusionMode, MaskTiming, SliderConfig};
use crate::image::PixelImage;
use crate::noise::{derive_stage_seed, gaussian_grid, seeded_rng, stream};
use crate::schedule::{
    NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_INFERENCE_STEPS,
    DEFAULT_TRAIN_STEPS,
};

pub const DEFAULT_SLIDER: usize = 30;

/// One cascade stage. Dimensions are in pixels, patch sizes in latent cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub slider: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub seed: u64,
    pub guided: bool,
}

impl StageSpec {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            steps: DEFAULT_INFERENCE_STEPS,
            slider: DEFAULT_SLIDER,
            patch_height: DEFAULT_PATCH,
            patch_width: DEFAULT_PATCH,
            seed: 0,
            guided: false,
        }
    }

    pub fn patch(mut self, height: usize, width: usize) -> Self {
        self.patch_height = height;
        self.patch_width = width;
        self
    }

    pub fn steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn slider(mut self, slider: usize) -> Self {
        self.slider = slider;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn guided(mut self, guided: bool) -> Self {
        self.guided = guided;
        self
    }
}

/// Builds a cascade through `dims`, with the first stage unguided and
/// per-stage seeds derived from `master_seed`.
pub fn cascade_stages(
    dims: &[(usize, usize)],
    master_seed: u64,
    template: &StageSpec,
) -> Vec<StageSpec> {
    dims.iter()
        .enumerate()
        .map(|(k, &(h, w))| StageSpec {
            height: h,
            width: w,
            seed: derive_stage_seed(master_seed, k),
            guided: k > 0,
            ..template.clone()
        })
        .collect()
}

/// Settings shared by every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeSettings {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub overlap_tolerance: usize,
    pub selection: Selection,
    pub fusion: FusionMode,
    pub mask_timing: MaskTiming,
}

impl Default for CascadeSettings {
    fn default() -> Self {
        Self {
            train_steps: DEFAULT_TRAIN_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            overlap_tolerance: DEFAULT_OVERLAP_TOLERANCE,
            selection: Selection::Random,
            fusion: FusionMode::Phase,
            mask_timing: MaskTiming::NextStep,
        }
    }
}

impl CascadeSettings {
    pub fn schedule(&self, steps: usize) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_steps, self.beta_start, self.beta_end, steps)
    }

    fn engine_config(&self, spec: &StageSpec) -> EngineConfig {
        EngineConfig {
            patch_height: spec.patch_height,
            patch_width: spec.patch_width,
            overlap_tolerance: self.overlap_tolerance,
            selection: self.selection,
            fusion: self.fusion,
            mask_timing: self.mask_timing,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub spec: StageSpec,
    pub latent_shape: (usize, usize, usize),
    pub image: PixelImage,
    pub stats: SampleStats,
    pub wall_time: Duration,
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub stages: Vec<StageOutcome>,
}

impl CascadeOutput {
    pub fn final_image(&self) -> &PixelImage {
        &self
            .stages
            .last()
            .expect("cascade has at least one stage")
            .image
    }
}

/// Checks every stage invariant, reporting all violations.
pub fn validate_stages(stages: &[StageSpec], codec: &dyn Codec) -> Result<()> {
    let mut problems = Vec::new();
    if stages.is_empty() {
        problems.push("cascade needs at least one stage".to_string());
    }
    for (k, s) in stages.iter().enumerate() {
        if k == 0 && s.guided {
            problems.push("stage 0 cannot be guided: it has no predecessor".into());
        }
        if k > 0 && !s.guided {
            problems.push(format!("stage {k} must be guided"));
        }
        if s.steps == 0 {
            problems.push(format!("stage {k}: steps must be positive"));
        }
        if s.guided && s.slider > s.steps {
            problems.push(format!(
                "stage {k}: slider {} exceeds steps {}",
                s.slider, s.steps
            ));
        }
        match codec.latent_shape(s.height, s.width) {
            Err(e) => problems.push(format!("stage {k}: {e}")),
            Ok((_, lh, lw)) => {
                if s.patch_height == 0
                    || s.patch_width == 0
                    || s.patch_height > lh
                    || s.patch_width > lw
                {
                    problems.push(format!(
                        "stage {k}: patch {}x{} must be non-empty and fit latent {lh}x{lw}",
                        s.patch_height, s.patch_width
                    ));
                }
            }
        }
        if k > 0 {
            let p = &stages[k - 1];
            if s.height < p.height || s.width < p.width {
                problems.push(format!(
                    "stage {k}: dims {}x{} smaller than previous {}x{}",
                    s.height, s.width, p.height, p.width
                ));
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems.join("; ")))
    }
}

/// Runs every stage in order and returns all stage images.
pub fn run_cascade(
    stages: &[StageSpec],
    denoiser: &mut dyn Denoiser,
    codec: &dyn Codec,
    condition: &Condition,
    settings: &CascadeSettings,
) -> Result<CascadeOutput> {
    validate_stages(stages, codec)?;
    let mut outcomes: Vec<StageOutcome> = Vec::with_capacity(stages.len());
    for (k, spec) in stages.iter().enumerate() {
        let prev = outcomes.last().map(|o| &o.image);
        let outcome = run_stage(k, spec, prev, denoiser, codec, condition, settings)
            .map_err(|e| e.in_stage(k))?;
        outcomes.push(outcome);
    }
    Ok(CascadeOutput { stages: outcomes })
}

fn run_stage(
    index: usize,
    spec: &StageSpec,
    prev: Option<&PixelImage>,
    denoiser: &mut dyn Denoiser,
    codec: &dyn Codec,
    condition: &Condition,
    settings: &CascadeSettings,
) -> Result<StageOutcome> {
    let start = Instant::now();
    let schedule = settings.schedule(spec.steps)?;
    let latent_shape = codec.latent_shape(spec.height, spec.width)?;
    let guidance = match (spec.guided, prev) {
        (true, Some(img)) => Some(prepare_guidance(
            img,
            codec,
            spec.height,
            spec.width,
            spec.seed,
            schedule.clone(),
        )?),
        (true, None) => return Err(Error::Config("guided stage without a predecessor".into())),
        (false, _) => None,
    };
    denoiser.prepare_stage(&StageContext {
        index,
        pixel_height: spec.height,
        pixel_width: spec.width,
        latent_shape,
        schedule: &schedule,
        guidance: guidance.as_ref(),
        codec,
        condition,
    })?;
    let (c, h, w) = latent_shape;
    let z_t = gaussian_grid(c, h, w, &mut seeded_rng(spec.seed, stream::INITIAL_LATENT));
    let guide = match &guidance {
        Some(stack) => Some(Guide {
            stack,
            slider: SliderConfig::new(spec.slider, spec.steps)?,
        }),
        None => None,
    };
    let config = settings.engine_config(spec);
    let (z0, stats) = sample(
        z_t, &schedule, &*denoiser, condition, &config, guide, spec.seed,
    )?;
    let image = codec.decode(&z0)?;
    if (image.height(), image.width()) != (spec.height, spec.width) {
        return Err(Error::Shape {
            op: "stage output",
            expected: (image.channels(), spec.height, spec.width),
            actual: (image.channels(), image.height(), image.width()),
        });
    }
    Ok(StageOutcome {
        spec: spec.clone(),
        latent_shape,
        image,
        stats,
        wall_time: start.elapsed(),
    })
}
