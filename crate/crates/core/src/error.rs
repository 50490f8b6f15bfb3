use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("region out of bounds: {axis} {start}+{extent} exceeds grid {axis} {limit}")]
    Bounds {
        axis: &'static str,
        start: usize,
        extent: usize,
        limit: usize,
    },

    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric consistency violated: imaginary residue {residue:e} above {limit:e}")]
    NumericConsistency { residue: f64, limit: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("singular step at t={t}: {reason}")]
    Singularity { t: usize, reason: &'static str },

    #[error(
        "denoiser contract violated: patch {height}x{width} exceeds limit {max_height}x{max_width}"
    )]
    ContractViolation {
        height: usize,
        width: usize,
        max_height: usize,
        max_width: usize,
    },

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("livelock guard tripped after {patches} patches (limit {limit})")]
    Livelock { patches: usize, limit: usize },

    #[error("denoiser failed: {0}")]
    Denoiser(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_stage(self, stage: usize) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
