use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("no units")]
    EmptyInput,
    #[error("duplicate unit id `{0}`")]
    DuplicateId(String),
    #[error("covariate of unit `{0}` is not finite")]
    NonFiniteCovariate(String),
    #[error("missing outcome for unit `{0}`")]
    MissingOutcome(String),
    #[error("missing covariate for unit `{0}`")]
    MissingCovariate(String),
    #[error("outcome of unit `{0}` is not finite")]
    NonFiniteOutcome(String),
    #[error("an arm has no units")]
    EmptyArm,
    #[error("covariate has zero variance")]
    DegenerateCovariate,
    #[error("design matrix is singular")]
    DegenerateDesign,
    #[error("too few units: need at least {needed}, have {have}")]
    TooFewUnits { needed: usize, have: usize },
    #[error("too few samples per arm: need at least {needed}, have {have}")]
    TooFewSamples { needed: usize, have: usize },
    #[error("too few pairs: need at least {needed}, have {have}")]
    TooFewPairs { needed: usize, have: usize },
    #[error("zero variance in test statistic denominator")]
    ZeroVariance,
    #[error("plan has no pairing (paired analysis requires a COSS plan)")]
    NotPaired,
    #[error("N too small: need at least {needed}, have {have}")]
    NTooSmall { needed: usize, have: usize },
    #[error("sample of {requested} exceeds population of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
