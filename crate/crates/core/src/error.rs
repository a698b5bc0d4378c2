use thiserror::Error;

use crate::lexicon::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexiconError {
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("unknown token id {0}")]
    UnknownId(TokenId),
    #[error("duplicate word `{0}` in vocabulary")]
    Duplicate(String),
    #[error("vocabulary must start with <pad> <bos> <eos> <sep>")]
    MissingReserved,
    #[error("vocabulary has {0} words, the limit is 256")]
    TooLarge(usize),
    #[error("malformed vocabulary file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("question kind `{0}` needs a non-empty scene")]
    EmptyScene(&'static str),
    #[error("relation questions need two distinct, singly occurring objects")]
    InsufficientObjects,
    #[error("invalid co-occurrence prior: {0}")]
    InvalidPrior(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

#[derive(Debug, Error)]
pub enum DisprefError {
    #[error("no absent object has a positive co-occurrence boost from a present one")]
    NoCandidate,
    #[error("answer contains no spatial relation word")]
    NoRelation,
    #[error("answer mentions no colored object")]
    NoAttribute,
    #[error("malformed answer: {0}")]
    MalformedAnswer(String),
    #[error("annotator request to {endpoint} failed after {attempts} attempt(s): {message}")]
    Annotator {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("annotator misconfigured: {0}")]
    Config(String),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NoiseError {
    #[error("noise schedule needs at least one step, got {0}")]
    InvalidStepCount(usize),
    #[error("noise step {step} is outside [0, {steps})")]
    StepOutOfRange { step: usize, steps: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("sequence length {len} exceeds the maximum {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("invalid policy configuration: {0}")]
    InvalidConfig(String),
    #[error("image has {got} values, expected {expected}")]
    ImageShape { got: usize, expected: usize },
    #[error("response must not be empty")]
    EmptyResponse,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("invalid coefficient: {0}")]
    InvalidCoefficient(String),
    #[error("empty preference batch")]
    EmptyBatch,
    #[error("malformed batch: {0}")]
    MalformedBatch(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("gradient check failed at step {step}, parameter {index}: analytic {analytic}, numeric {numeric}")]
    GradientCheck {
        step: usize,
        index: usize,
        analytic: f64,
        numeric: f64,
    },
    #[error("triggered dispreference at step {step} does not match a recomputation under the current weights")]
    StaleTrigger { step: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("rate `{name}` = {value} is outside [0, 1]")]
    RateOutOfRange { name: String, value: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
