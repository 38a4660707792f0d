use std::path::PathBuf;

use thiserror::Error;

/// Dataset, configuration and domain-value errors.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("demonstration pool too small: requested {requested}, available {available}")]
    InsufficientPool { requested: usize, available: usize },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LexiconError {
    #[error("cannot build a phrase set from an empty sentence")]
    EmptyInput,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("unsatisfiable schema: {0}")]
    Unsatisfiable(String),
    #[error("no live transition for byte {byte:#04x} at offset {offset}")]
    DeadTransition { offset: usize, byte: u8 },
    #[error("no vocabulary token can extend the output from automaton state {state}")]
    EmptyMask { state: u32 },
    #[error("output is not a complete tuple list (stopped at offset {offset})")]
    Incomplete { offset: usize },
    #[error("output does not parse under the schema: {0}")]
    Parse(String),
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("context length exceeded: {prompt_tokens} prompt + {max_tokens} generation > {limit}")]
    ContextLengthExceeded {
        prompt_tokens: usize,
        max_tokens: usize,
        limit: usize,
    },
    #[error("oracle has no entry for instance `{0}`")]
    OracleMiss(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("empty generation")]
    EmptyGeneration,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("demonstration `{0}` has no gold tuples")]
    MalformedDemonstration(String),
    #[error("template {path}: {source}")]
    Template {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("requests under group key `{key}` carry different prefixes")]
    GroupingIntegrity { key: String },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation impossible: {0}")]
    MissingGold(String),
    #[error("no predictions found in {0}")]
    EmptyPredictions(PathBuf),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Errors surfaced by the multi-view engine and the run driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("instance `{instance}`, view `{view}`: {source}")]
    View {
        instance: String,
        view: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("run cancelled")]
    Cancelled,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
