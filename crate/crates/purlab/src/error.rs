use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("quasinorm undefined at origin")]
    QuasinormAtOrigin,

    #[error("ellipticity violated at {point:?}: quadratic form {value} below {bound}")]
    Ellipticity {
        point: Vec<f64>,
        value: f64,
        bound: f64,
    },

    #[error("linear solve failed to converge: residual {residual} after {iters} iterations")]
    SolveDiverged { residual: f64, iters: usize },

    #[error("pole too close to boundary: gap {gap} requires at least {min_gap}")]
    PoleTooClose { gap: f64, min_gap: f64 },

    #[error("level not attained on search interval [{lo}, {hi}] for level {level}")]
    LevelNotAttained { lo: f64, hi: f64, level: f64 },

    #[error("unresolvable localization: scale {scale} below {cells} grid cells")]
    UnresolvableLocalization { scale: f64, cells: usize },

    #[error("measure missing on required cube {0}")]
    MeasureMissing(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
