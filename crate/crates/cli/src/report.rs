//! Machine-readable record of a generation run.
//!
//! Field order is declaration order, so the JSON text is stable. Figures
//! under `stages` come from engine instrumentation; `config` is an echo.

use std::path::Path;

use patchwise::{CascadeOutput, FusionMode, MaskTiming, Selection};
use serde::Serialize;

use crate::config::{DenoiserChoice, RunConfig};

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub engine_version: String,
    pub config: ConfigEcho,
    pub stages: Vec<StageReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub seed: u64,
    pub condition: String,
    pub codec: String,
    pub denoiser: String,
    pub oracle_target: Option<String>,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub overlap: usize,
    pub selection: &'static str,
    pub fusion: &'static str,
    pub mask_timing: &'static str,
    pub stages: Vec<StageEcho>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageEcho {
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub slider: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub seed: u64,
    pub guided: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PatchCounts {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

impl PatchCounts {
    pub fn from_counts(counts: &[usize]) -> Self {
        if counts.is_empty() {
            return Self {
                min: 0,
                mean: 0.0,
                max: 0,
            };
        }
        Self {
            min: *counts.iter().min().unwrap(),
            mean: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
            max: *counts.iter().max().unwrap(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub index: usize,
    pub image: String,
    pub latent: [usize; 3],
    pub timesteps: usize,
    pub patches_per_timestep: PatchCounts,
    pub denoiser_calls: usize,
    pub max_patch_area: usize,
    pub configured_patch_area: usize,
    /// `None` when timing is disabled.
    pub wall_time_ms: Option<f64>,
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(
        || p.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

fn echo(cfg: &RunConfig) -> ConfigEcho {
    let (denoiser, oracle_target) = match &cfg.denoiser {
        DenoiserChoice::Oracle { target } => ("oracle", Some(file_name(target))),
        DenoiserChoice::Zero => ("zero", None),
    };
    ConfigEcho {
        seed: cfg.seed,
        condition: cfg.condition.to_string(),
        codec: cfg.codec.name(),
        denoiser: denoiser.into(),
        oracle_target,
        train_steps: cfg.settings.train_steps,
        beta_start: cfg.settings.beta_start,
        beta_end: cfg.settings.beta_end,
        overlap: cfg.settings.overlap_tolerance,
        selection: match cfg.settings.selection {
            Selection::Random => "random",
            Selection::Raster => "raster",
        },
        fusion: match cfg.settings.fusion {
            FusionMode::Phase => "phase",
            FusionMode::Amplitude => "amplitude",
            FusionMode::AmplitudeAndPhase => "both",
        },
        mask_timing: match cfg.settings.mask_timing {
            MaskTiming::NextStep => "next",
            MaskTiming::CurrentStep => "current",
        },
        stages: cfg
            .stages
            .iter()
            .map(|s| StageEcho {
                height: s.height,
                width: s.width,
                steps: s.steps,
                slider: s.slider,
                patch_height: s.patch_height,
                patch_width: s.patch_width,
                seed: s.seed,
                guided: s.guided,
            })
            .collect(),
    }
}

/// Builds the report for a finished run whose stage images went to `images`.
pub fn build_report(
    cfg: &RunConfig,
    output: &CascadeOutput,
    images: &[impl AsRef<Path>],
) -> RunReport {
    let stages = output
        .stages
        .iter()
        .zip(images)
        .enumerate()
        .map(|(index, (o, path))| {
            let (c, h, w) = o.latent_shape;
            StageReport {
                index,
                image: file_name(path.as_ref()),
                latent: [c, h, w],
                timesteps: o.stats.patches_per_step.len(),
                patches_per_timestep: PatchCounts::from_counts(&o.stats.patches_per_step),
                denoiser_calls: o.stats.denoiser_calls,
                max_patch_area: o.stats.max_patch_area,
                configured_patch_area: o.spec.patch_height * o.spec.patch_width,
                wall_time_ms: cfg.timing.then_some(o.wall_time.as_secs_f64() * 1e3),
            }
        })
        .collect();
    RunReport {
        engine_version: patchwise::VERSION.to_string(),
        config: echo(cfg),
        stages,
    }
}

pub fn to_json(report: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}
