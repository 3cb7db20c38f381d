use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("Y1 is numerically singular at t = {t} (condition number {cond:.3e})")]
    SingularY1 { t: f64, cond: f64 },

    #[error("filter for measure {measure} collapsed at step {step}")]
    FilterCollapse { step: usize, measure: usize },

    #[error("regression at step {step} is ill-conditioned (condition number {cond:.3e})")]
    IllConditioned { step: usize, cond: f64 },

    #[error("{0}")]
    Unsupported(String),

    #[error("malformed model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical pipeline, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite
                | Error::SingularY1 { .. }
                | Error::FilterCollapse { .. }
                | Error::IllConditioned { .. }
        )
    }
}
