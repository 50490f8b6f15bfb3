//! The `generate` command: run a cascade and write images plus a report.

use std::fs;
use std::path::{Path, PathBuf};

use patchwise::{run_cascade, CascadeOracle, Denoiser, OracleTarget, ZeroDenoiser};
use thiserror::Error;

use crate::config::{parse_config, ConfigErrors, DenoiserChoice, RunConfig};
use crate::pnm::{read_image, write_image, PnmError};
use crate::report::{build_report, to_json, RunReport};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config:\n{0}")]
    Config(#[from] ConfigErrors),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] PnmError),
    #[error(transparent)]
    Engine(#[from] patchwise::Error),
}

impl CliError {
    /// 1 for configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut cfg = parse_config(&text, base)?;
    if let Some(seed) = overrides.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &overrides.out {
        if overrides.report.is_none() && cfg.report == cfg.output.with_extension("json") {
            cfg.report = out.with_extension("json");
        }
        cfg.output = out.clone();
    }
    if let Some(report) = &overrides.report {
        cfg.report = report.clone();
    }
    Ok(cfg)
}

/// `out.ppm` becomes `out-stage0.ppm`, `out-stage1.ppm`, ...
pub fn stage_image_path(output: &Path, index: usize) -> PathBuf {
    let stem = output
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let name = match output.extension() {
        Some(ext) => format!("{stem}-stage{index}.{}", ext.to_string_lossy()),
        None => format!("{stem}-stage{index}"),
    };
    output.with_file_name(name)
}

#[derive(Debug)]
pub struct Generated {
    /// One path per stage; the last is the configured output.
    pub images: Vec<PathBuf>,
    pub report_path: PathBuf,
    pub report: RunReport,
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Generated, CliError> {
    let codec = cfg.codec.build();
    let mut denoiser: Box<dyn Denoiser> = match &cfg.denoiser {
        DenoiserChoice::Oracle { target } => {
            let img = read_image(target)?;
            // The schedule is replaced per stage in `prepare_stage`.
            let schedule = cfg.settings.schedule(cfg.stages[0].steps)?;
            Box::new(CascadeOracle::new(OracleTarget::Image(img), schedule))
        }
        DenoiserChoice::Zero => Box::new(ZeroDenoiser),
    };
    let output = run_cascade(
        &cfg.stages,
        denoiser.as_mut(),
        codec.as_ref(),
        &cfg.condition,
        &cfg.settings,
    )?;

    let last = output.stages.len() - 1;
    let images: Vec<PathBuf> = (0..=last)
        .map(|k| {
            if k == last {
                cfg.output.clone()
            } else {
                stage_image_path(&cfg.output, k)
            }
        })
        .collect();
    for (stage, path) in output.stages.iter().zip(&images) {
        write_image(&stage.image, path)?;
    }
    let report = build_report(cfg, &output, &images);
    fs::write(&cfg.report, to_json(&report)).map_err(|source| CliError::Io {
        path: cfg.report.display().to_string(),
        source,
    })?;
    Ok(Generated {
        images,
        report_path: cfg.report.clone(),
        report,
    })
}
