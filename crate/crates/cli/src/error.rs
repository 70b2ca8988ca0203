use std::io;

use rcakb_core::corpus::CorpusError;
use rcakb_core::embedding::EmbeddingError;
use rcakb_core::evaluation::EvalError;
use rcakb_core::gateway::GatewayError;
use rcakb_core::pipeline::PipelineError;
use rcakb_core::prompt::PromptError;
use rcakb_core::retrieval::RetrievalError;
use rcakb_core::rules::RuleError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config file {path}: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Data { path: String, message: String },
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error("every ticket failed; first error: {0}")]
    AllTicketsFailed(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Index(#[from] RetrievalError),
    #[error(transparent)]
    Rules(#[from] RuleError),
}

impl CliError {
    pub fn io(path: impl std::fmt::Display, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_string(),
            source,
        }
    }

    /// Exit status class: 1 usage, 2 data, 3 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Io { .. } | CliError::Data { .. } | CliError::BindFailure { .. } => EXIT_DATA,
            CliError::AllTicketsFailed(_) => EXIT_BACKEND,
            CliError::Corpus(CorpusError::InvalidRatio(_)) => EXIT_USAGE,
            CliError::Corpus(_) => EXIT_DATA,
            CliError::Embedding(EmbeddingError::InvalidConfig(_)) => EXIT_USAGE,
            CliError::Embedding(_) => EXIT_DATA,
            CliError::Eval(EvalError::InvalidOrder) => EXIT_USAGE,
            CliError::Eval(_) => EXIT_DATA,
            CliError::Gateway(e) => gateway_class(e),
            CliError::Pipeline(e) => match e {
                PipelineError::InvalidConfig(_) | PipelineError::NoBackend(_) => EXIT_USAGE,
                PipelineError::Gateway(g) => gateway_class(g),
                PipelineError::Prompt(PromptError::PromptTooLong { .. }) => EXIT_USAGE,
                _ => EXIT_DATA,
            },
            CliError::Index(_) => EXIT_DATA,
            CliError::Rules(RuleError::InvalidThreshold(_)) => EXIT_USAGE,
            CliError::Rules(_) => EXIT_DATA,
        }
    }
}

fn gateway_class(e: &GatewayError) -> i32 {
    match e {
        GatewayError::InvalidConfig(_) | GatewayError::NoBackend(_) | GatewayError::InvalidRequest(_) => EXIT_USAGE,
        GatewayError::Fixture(_) => EXIT_DATA,
        _ => EXIT_BACKEND,
    }
}
