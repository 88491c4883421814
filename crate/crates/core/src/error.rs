use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScoreError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("missing metric for objective `{0}`")]
    MissingMetric(String),
    #[error("parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EnvError {
    #[error("parameter {index} = {value} outside bounds [{lo}, {hi}]")]
    OutOfBounds { index: usize, value: f64, lo: f64, hi: f64 },
    #[error("expected {expected} parameters, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("turn {turn} exceeds the budget of {max_turns} turns")]
    BudgetExceeded { turn: usize, max_turns: usize },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("task construction failed after {attempts} attempts: {reason}")]
    Construction { attempts: usize, reason: String },
    #[error("simulation backend failed: {0}")]
    Backend(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PolicyError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("choice {choice} out of range for {num_choices} multipliers")]
    ChoiceOutOfRange { choice: usize, num_choices: usize },
    #[error("checkpoint feature schema {found} does not match {expected}")]
    SchemaMismatch { expected: String, found: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RlError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("member {0} has no recorded old log-probability")]
    MissingOldLogProb(usize),
    #[error("environment error at turn {turn}: {source}")]
    Env { turn: usize, source: EnvError },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("iteration {iteration}: {message}")]
    Iteration { iteration: usize, message: String },
    #[error("budget audit failed in {phase} phase: expected {expected}, counted {counted} (query {query_id})")]
    Audit { phase: String, query_id: String, expected: u64, counted: u64 },
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BoError {
    #[error("GP needs at least one observation")]
    NoObservations,
    #[error("kernel matrix is not positive definite after jitter {0:e}")]
    SingularKernel(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}
