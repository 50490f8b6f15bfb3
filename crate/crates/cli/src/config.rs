//! `key = value` run configuration with repeated `[stage]` sections.
//!
//! ```text
//! seed = 7
//! codec = identity
//! denoiser = oracle
//! oracle_target = target.ppm
//! output = out.ppm
//!
//! [stage]
//! height = 64
//! width = 64
//! patch = 32
//!
//! [stage]
//! height = 128
//! width = 128
//! slider = 30
//! ```
//!
//! Top-level keys: `seed`, `condition`, `codec` (identity, pool2, pool8),
//! `channels`, `denoiser` (oracle, zero), `oracle_target`, `output`,
//! `report`, `train_steps`, `beta_start`, `beta_end`, `overlap`,
//! `selection` (random, raster), `fusion` (phase, amplitude, both),
//! `mask_timing` (next, current) and `timing`. Stage keys: `height`,
//! `width`, `steps`, `slider`, `patch` (`N` or `HxW`).
//!
//! Relative paths are resolved against the directory holding the config.

use std::fmt;
use std::path::{Path, PathBuf};

use patchwise::cascade::{validate_stages, DEFAULT_SLIDER};
use patchwise::engine::{DEFAULT_OVERLAP_TOLERANCE, DEFAULT_PATCH};
use patchwise::noise::derive_stage_seed;
use patchwise::schedule::{
    DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_INFERENCE_STEPS, DEFAULT_TRAIN_STEPS,
};
use patchwise::{
    CascadeSettings, Codec, Condition, FusionMode, IdentityCodec, MaskTiming, PoolCodec, Selection,
    StageSpec,
};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// Every problem found in a config, in line order.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecChoice {
    Identity { channels: usize },
    Pool { factor: usize },
}

impl CodecChoice {
    pub fn build(&self) -> Box<dyn Codec> {
        match *self {
            CodecChoice::Identity { channels } => Box::new(IdentityCodec { channels }),
            CodecChoice::Pool { factor } => Box::new(PoolCodec::new(factor)),
        }
    }

    pub fn name(&self) -> String {
        match self {
            CodecChoice::Identity { .. } => "identity".into(),
            CodecChoice::Pool { factor } => format!("pool{factor}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DenoiserChoice {
    /// Analytic oracle whose per-stage target is this image, resampled.
    Oracle {
        target: PathBuf,
    },
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub stages: Vec<StageSpec>,
    pub seed: u64,
    pub condition: Condition,
    pub codec: CodecChoice,
    pub denoiser: DenoiserChoice,
    pub output: PathBuf,
    pub report: PathBuf,
    pub settings: CascadeSettings,
    /// Record wall time in the report. Off for byte-stable reports.
    pub timing: bool,
}

impl RunConfig {
    /// Re-derives per-stage seeds from a new master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        for (k, s) in self.stages.iter_mut().enumerate() {
            s.seed = derive_stage_seed(seed, k);
        }
        self
    }
}

#[derive(Debug, Default)]
struct RawStage {
    line: usize,
    height: Option<(usize, usize)>,
    width: Option<(usize, usize)>,
    steps: Option<(usize, usize)>,
    slider: Option<(usize, usize)>,
    patch: Option<(usize, (usize, usize))>,
}

/// Line-number-tagged value of type `T`.
type Field<T> = Option<(usize, T)>;

#[derive(Debug, Default)]
struct RawConfig {
    seed: Field<u64>,
    condition: Field<Condition>,
    codec: Field<String>,
    channels: Field<usize>,
    denoiser: Field<String>,
    oracle_target: Field<String>,
    output: Field<String>,
    report: Field<String>,
    train_steps: Field<usize>,
    beta_start: Field<f64>,
    beta_end: Field<f64>,
    overlap: Field<usize>,
    selection: Field<String>,
    fusion: Field<String>,
    mask_timing: Field<String>,
    timing: Field<bool>,
    stages: Vec<RawStage>,
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2 && v.starts_with('"') && v.ends_with('"') {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

fn parse_patch(v: &str) -> Option<(usize, usize)> {
    match v.split_once(['x', 'X']) {
        Some((h, w)) => Some((h.trim().parse().ok()?, w.trim().parse().ok()?)),
        None => {
            let n = v.parse().ok()?;
            Some((n, n))
        }
    }
}

/// Parses and validates a config. `base_dir` anchors relative paths.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<RunConfig, ConfigErrors> {
    let mut errors = Vec::new();
    let mut raw = RawConfig::default();

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => line,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            if content == "[stage]" {
                raw.stages.push(RawStage {
                    line: lineno,
                    ..RawStage::default()
                });
            } else {
                errors.push(ConfigError {
                    line: Some(lineno),
                    field: content.to_string(),
                    message: "unknown section (only [stage] is supported)".into(),
                });
            }
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            errors.push(ConfigError {
                line: Some(lineno),
                field: content.to_string(),
                message: "expected `key = value`".into(),
            });
            continue;
        };
        let (key, value) = (key.trim(), unquote(value));
        let mismatch = |expected: &str| ConfigError {
            line: Some(lineno),
            field: key.to_string(),
            message: format!("expected {expected}, got `{value}`"),
        };

        macro_rules! set {
            ($slot:expr, $parse:expr, $what:expr) => {
                match $parse {
                    Some(v) => $slot = Some((lineno, v)),
                    None => errors.push(mismatch($what)),
                }
            };
        }

        if let Some(stage) = raw.stages.last_mut() {
            let handled = match key {
                "height" => {
                    set!(stage.height, value.parse().ok(), "an unsigned integer");
                    true
                }
                "width" => {
                    set!(stage.width, value.parse().ok(), "an unsigned integer");
                    true
                }
                "steps" => {
                    set!(stage.steps, value.parse().ok(), "an unsigned integer");
                    true
                }
                "slider" => {
                    set!(stage.slider, value.parse().ok(), "an unsigned integer");
                    true
                }
                "patch" => {
                    set!(stage.patch, parse_patch(value), "`N` or `HxW`");
                    true
                }
                _ => false,
            };
            if handled {
                continue;
            }
            errors.push(ConfigError {
                line: Some(lineno),
                field: key.to_string(),
                message: "unknown key in [stage] section".into(),
            });
            continue;
        }

        match key {
            "seed" => set!(raw.seed, value.parse().ok(), "an unsigned integer"),
            "condition" => {
                let c = match value.parse::<u64>() {
                    Ok(id) => Condition::Id(id),
                    Err(_) => Condition::from(value),
                };
                raw.condition = Some((lineno, c));
            }
            "codec" => raw.codec = Some((lineno, value.to_string())),
            "channels" => set!(raw.channels, value.parse().ok(), "an unsigned integer"),
            "denoiser" => raw.denoiser = Some((lineno, value.to_string())),
            "oracle_target" => raw.oracle_target = Some((lineno, value.to_string())),
            "output" => raw.output = Some((lineno, value.to_string())),
            "report" => raw.report = Some((lineno, value.to_string())),
            "train_steps" => set!(raw.train_steps, value.parse().ok(), "an unsigned integer"),
            "beta_start" => set!(raw.beta_start, value.parse().ok(), "a number"),
            "beta_end" => set!(raw.beta_end, value.parse().ok(), "a number"),
            "overlap" => set!(raw.overlap, value.parse().ok(), "an unsigned integer"),
            "selection" => raw.selection = Some((lineno, value.to_string())),
            "fusion" => raw.fusion = Some((lineno, value.to_string())),
            "mask_timing" => raw.mask_timing = Some((lineno, value.to_string())),
            "timing" => set!(raw.timing, value.parse().ok(), "`true` or `false`"),
            _ => errors.push(ConfigError {
                line: Some(lineno),
                field: key.to_string(),
                message: "unknown key".into(),
            }),
        }
    }

    let cfg = resolve(raw, base_dir, &mut errors);
    if errors.is_empty() {
        Ok(cfg.expect("resolved without errors"))
    } else {
        errors.sort_by_key(|e| e.line.unwrap_or(usize::MAX));
        Err(ConfigErrors(errors))
    }
}

fn resolve(raw: RawConfig, base_dir: &Path, errors: &mut Vec<ConfigError>) -> Option<RunConfig> {
    let err = |line: Option<usize>, field: &str, message: String| ConfigError {
        line,
        field: field.to_string(),
        message,
    };

    let channels = raw.channels.map_or(3, |(_, c)| c);
    if channels != 1 && channels != 3 {
        errors.push(err(
            raw.channels.map(|(l, _)| l),
            "channels",
            format!("image channels must be 1 or 3, got {channels}"),
        ));
    }
    let codec = match raw.codec.as_ref().map(|(l, s)| (*l, s.as_str())) {
        None | Some((_, "identity")) => Some(CodecChoice::Identity { channels }),
        Some((_, "pool2")) => Some(CodecChoice::Pool { factor: 2 }),
        Some((_, "pool8")) => Some(CodecChoice::Pool { factor: 8 }),
        Some((l, other)) => {
            errors.push(err(
                Some(l),
                "codec",
                format!("expected identity, pool2 or pool8, got `{other}`"),
            ));
            None
        }
    };
    if matches!(codec, Some(CodecChoice::Pool { .. })) && channels != 3 {
        errors.push(err(
            None,
            "channels",
            "pool codecs decode to 3 channels".into(),
        ));
    }

    let denoiser = match raw.denoiser.as_ref().map(|(l, s)| (*l, s.as_str())) {
        None | Some((_, "oracle")) => match &raw.oracle_target {
            Some((_, p)) => Some(DenoiserChoice::Oracle {
                target: base_dir.join(p),
            }),
            None => {
                errors.push(err(
                    raw.denoiser.as_ref().map(|(l, _)| *l),
                    "oracle_target",
                    "required when denoiser = oracle".into(),
                ));
                None
            }
        },
        Some((_, "zero")) => Some(DenoiserChoice::Zero),
        Some((l, other)) => {
            errors.push(err(
                Some(l),
                "denoiser",
                format!("expected oracle or zero, got `{other}`"),
            ));
            None
        }
    };

    let selection = match raw.selection.as_ref().map(|(l, s)| (*l, s.as_str())) {
        None | Some((_, "random")) => Selection::Random,
        Some((_, "raster")) => Selection::Raster,
        Some((l, other)) => {
            errors.push(err(
                Some(l),
                "selection",
                format!("expected random or raster, got `{other}`"),
            ));
            Selection::Random
        }
    };

    let fusion = match raw.fusion.as_ref().map(|(l, s)| (*l, s.as_str())) {
        None | Some((_, "phase")) => FusionMode::Phase,
        Some((_, "amplitude")) => FusionMode::Amplitude,
        Some((_, "both")) => FusionMode::AmplitudeAndPhase,
        Some((l, other)) => {
            errors.push(err(
                Some(l),
                "fusion",
                format!("expected phase, amplitude or both, got `{other}`"),
            ));
            FusionMode::Phase
        }
    };
    let mask_timing = match raw.mask_timing.as_ref().map(|(l, s)| (*l, s.as_str())) {
        None | Some((_, "next")) => MaskTiming::NextStep,
        Some((_, "current")) => MaskTiming::CurrentStep,
        Some((l, other)) => {
            errors.push(err(
                Some(l),
                "mask_timing",
                format!("expected next or current, got `{other}`"),
            ));
            MaskTiming::NextStep
        }
    };

    let settings = CascadeSettings {
        train_steps: raw.train_steps.map_or(DEFAULT_TRAIN_STEPS, |(_, v)| v),
        beta_start: raw.beta_start.map_or(DEFAULT_BETA_START, |(_, v)| v),
        beta_end: raw.beta_end.map_or(DEFAULT_BETA_END, |(_, v)| v),
        overlap_tolerance: raw.overlap.map_or(DEFAULT_OVERLAP_TOLERANCE, |(_, v)| v),
        selection,
        fusion,
        mask_timing,
    };
    if !(settings.beta_start > 0.0
        && settings.beta_start <= settings.beta_end
        && settings.beta_end < 1.0)
    {
        errors.push(err(
            raw.beta_start.or(raw.beta_end).map(|(l, _)| l),
            "beta_start",
            format!(
                "need 0 < beta_start <= beta_end < 1, got [{}, {}]",
                settings.beta_start, settings.beta_end
            ),
        ));
    }
    if settings.train_steps == 0 {
        errors.push(err(
            raw.train_steps.map(|(l, _)| l),
            "train_steps",
            "must be positive".into(),
        ));
    }

    let seed = raw.seed.map_or(0, |(_, s)| s);
    if raw.stages.is_empty() {
        errors.push(err(
            None,
            "[stage]",
            "at least one stage is required".into(),
        ));
    }
    let scale = codec.map(|c| c.build().scale());
    let mut stages = Vec::with_capacity(raw.stages.len());
    for (k, s) in raw.stages.iter().enumerate() {
        let (Some((_, height)), Some((_, width))) = (s.height, s.width) else {
            errors.push(err(
                Some(s.line),
                "[stage]",
                format!("stage {k} needs height and width"),
            ));
            continue;
        };
        if height == 0 || width == 0 {
            errors.push(err(
                Some(s.line),
                "[stage]",
                format!("stage {k} dims must be positive"),
            ));
            continue;
        }
        let steps = s.steps.map_or(DEFAULT_INFERENCE_STEPS, |(_, v)| v);
        if steps == 0 || steps > settings.train_steps {
            errors.push(err(
                s.steps.map(|(l, _)| l),
                "steps",
                format!(
                    "stage {k}: need 1 <= steps <= train_steps ({}), got {steps}",
                    settings.train_steps
                ),
            ));
        }
        let guided = k > 0;
        let slider = match s.slider {
            Some((l, v)) => {
                if v > steps {
                    errors.push(err(
                        Some(l),
                        "slider",
                        format!("stage {k}: {v} exceeds steps {steps}"),
                    ));
                }
                v
            }
            None if guided => DEFAULT_SLIDER.min(steps),
            None => 0,
        };
        let Some(f) = scale else { continue };
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            errors.push(err(
                s.height.map(|(l, _)| l),
                "height",
                format!("stage {k}: {height}x{width} not divisible by codec scale {f}"),
            ));
            continue;
        }
        let (lh, lw) = (height / f, width / f);
        let (ph, pw) = match s.patch {
            Some((l, (ph, pw))) => {
                if ph == 0 || pw == 0 || ph > lh || pw > lw {
                    errors.push(err(
                        Some(l),
                        "patch",
                        format!("stage {k}: {ph}x{pw} must be non-empty and fit latent {lh}x{lw}"),
                    ));
                }
                (ph, pw)
            }
            None => (DEFAULT_PATCH.min(lh), DEFAULT_PATCH.min(lw)),
        };
        if let Some(prev) = stages.last() {
            let prev: &StageSpec = prev;
            if height < prev.height || width < prev.width {
                errors.push(err(
                    Some(s.line),
                    "[stage]",
                    format!(
                        "stage {k}: dims must not shrink ({}x{} -> {height}x{width})",
                        prev.height, prev.width
                    ),
                ));
            }
        }
        stages.push(StageSpec {
            height,
            width,
            steps,
            slider,
            patch_height: ph,
            patch_width: pw,
            seed: derive_stage_seed(seed, k),
            guided,
        });
    }

    let output = base_dir.join(raw.output.map_or("output.ppm".to_string(), |(_, p)| p));
    let report = match raw.report {
        Some((_, p)) => base_dir.join(p),
        None => output.with_extension("json"),
    };

    if !errors.is_empty() {
        return None;
    }
    let codec = codec?;
    if let Err(e) = validate_stages(&stages, codec.build().as_ref()) {
        errors.push(err(None, "[stage]", e.to_string()));
        return None;
    }
    Some(RunConfig {
        stages,
        seed,
        condition: raw.condition.map_or_else(Condition::default, |(_, c)| c),
        codec,
        denoiser: denoiser?,
        output,
        report,
        settings,
        timing: raw.timing.is_none_or(|(_, v)| v),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigErrors> {
        parse_config(text, Path::new("/cfg"))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse("denoiser = zero\n[stage]\nheight = 64\nwidth = 32\n").unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.codec, CodecChoice::Identity { channels: 3 });
        assert_eq!(cfg.output, PathBuf::from("/cfg/output.ppm"));
        assert_eq!(cfg.report, PathBuf::from("/cfg/output.json"));
        assert_eq!(cfg.settings, CascadeSettings::default());
        assert!(cfg.timing);
        let s = &cfg.stages[0];
        assert_eq!(
            (s.steps, s.slider, s.patch_height, s.patch_width),
            (50, 0, 64, 32)
        );
        assert!(!s.guided);
        assert_eq!(s.seed, derive_stage_seed(0, 0));
    }

    #[test]
    fn guided_stage_defaults() {
        let cfg = parse(
            "denoiser = zero\n[stage]\nheight = 8\nwidth = 8\n[stage]\nheight = 16\nwidth = 16\nsteps = 20\n",
        )
        .unwrap();
        assert!(cfg.stages[1].guided);
        assert_eq!(cfg.stages[1].slider, 20);
    }

    #[test]
    fn slider_above_steps_names_field() {
        let errs =
            parse("denoiser = zero\n[stage]\nheight = 8\nwidth = 8\nsteps = 50\nslider = 99\n")
                .unwrap_err();
        assert_eq!(errs.0.len(), 1);
        assert_eq!(errs.0[0].field, "slider");
        assert_eq!(errs.0[0].line, Some(6));
    }

    #[test]
    fn non_divisible_dims_rejected() {
        let errs = parse("codec = pool8\ndenoiser = zero\n[stage]\nheight = 1004\nwidth = 1004\n")
            .unwrap_err();
        assert!(errs.to_string().contains("not divisible by codec scale 8"));
        assert_eq!(errs.0[0].line, Some(4));
        let errs = parse(
            "codec = pool8\ndenoiser = zero\n[stage]\nheight = 1000\nwidth = 1000\npatch = 128\n",
        )
        .unwrap_err();
        assert_eq!(errs.0[0].field, "patch");
    }

    #[test]
    fn reports_every_violation() {
        let text =
            "bogus = 1\nseed = abc\ndenoiser = zero\n[stage]\nheight = 8\nwidth = x\n[other]\n";
        let errs = parse(text).unwrap_err();
        let lines: Vec<_> = errs.0.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![Some(1), Some(2), Some(4), Some(6), Some(7)]);
        assert!(errs.to_string().contains("line 1: bogus: unknown key"));
    }

    #[test]
    fn oracle_needs_target() {
        let errs = parse("[stage]\nheight = 8\nwidth = 8\n").unwrap_err();
        assert_eq!(errs.0[0].field, "oracle_target");
        let cfg = parse("oracle_target = t.ppm\n[stage]\nheight = 8\nwidth = 8\n").unwrap();
        assert_eq!(
            cfg.denoiser,
            DenoiserChoice::Oracle {
                target: PathBuf::from("/cfg/t.ppm")
            }
        );
    }

    #[test]
    fn patch_forms_and_comments() {
        let cfg = parse(
            "# run\ndenoiser = zero # inline\ncondition = \"a cat\"\n[stage]\nheight = 16\nwidth = 32\npatch = 8x16\n",
        )
        .unwrap();
        assert_eq!(
            (cfg.stages[0].patch_height, cfg.stages[0].patch_width),
            (8, 16)
        );
        assert_eq!(cfg.condition, Condition::from("a cat"));
    }

    #[test]
    fn seed_override_rederives_stage_seeds() {
        let cfg = parse("denoiser = zero\nseed = 1\n[stage]\nheight = 8\nwidth = 8\n").unwrap();
        let cfg = cfg.with_seed(99);
        assert_eq!(cfg.stages[0].seed, derive_stage_seed(99, 0));
    }
}
