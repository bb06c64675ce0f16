use thiserror::Error;

/// Structural problems that make a scenario unrunnable.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("n below minimum: {0} < 4")]
    TooFewProcesses(usize),
    #[error("byzantine member {member} outside 1..={n}")]
    ByzantineOutOfRange { member: u32, n: usize },
    #[error("byzantine member {0} listed twice")]
    DuplicateByzantine(u32),
    #[error("every process is byzantine")]
    NoHonestProcess,
    #[error("state machine has no states")]
    EmptyMachine,
    #[error("state machine: {0}")]
    Machine(String),
    #[error("inputs: {0}")]
    Inputs(String),
    #[error("transients: {0}")]
    Transients(String),
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Failures of a single simulation run.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("non-byzantine {proc} sent divergent messages in pulse {pulse} round {round}")]
    HonestEquivocation { proc: u32, pulse: u64, round: usize },
    #[error("outbox of {proc} addresses {got} recipients, expected {expected}")]
    OutboxShape { proc: u32, got: usize, expected: usize },
    #[error("handler of {proc} panicked in pulse {pulse} round {round}: {message}")]
    HandlerPanic { proc: u32, pulse: u64, round: usize, message: String },
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum SelectError {
    #[error("agreement vector holds only ⊥; fault bounds were violated")]
    AllBottom,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransitionError {
    #[error("state {0} outside Q")]
    StateOutOfRange(i64),
    #[error("input {0} outside Σ")]
    InputOutsideAlphabet(i64),
    #[error("input is ⊥")]
    BottomInput,
}
