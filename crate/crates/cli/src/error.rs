use std::fmt;

use thiserror::Error;

use layoutprior::annotations::AnnotationError;
use layoutprior::evalsuite::EvalError;
use layoutprior::model::ModelError;
use layoutprior::sampler::SampleError;
use layoutprior::tokenizer::TokenizerError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Data(#[from] AnnotationError),
    #[error(transparent)]
    Vocabulary(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    pub fn io(what: impl fmt::Display, e: std::io::Error) -> Self {
        CliError::Io(format!("{what}: {e}"))
    }

    /// Process exit code; 2 is left to argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Data(_) => 5,
            CliError::Vocabulary(_) => 6,
            CliError::Model(_) => 7,
            CliError::Sample(_) => 8,
            CliError::Eval(_) => 9,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Data(_) => "data",
            CliError::Vocabulary(_) => "vocabulary",
            CliError::Model(_) => "model",
            CliError::Sample(_) => "sample",
            CliError::Eval(_) => "eval",
        }
    }

    /// `error family=<f> code=<n> message=<json string>`
    pub fn diagnostic(&self) -> String {
        let msg = serde_json::to_string(&self.to_string()).unwrap_or_else(|_| "\"?\"".into());
        format!(
            "error family={} code={} message={msg}",
            self.family(),
            self.exit_code()
        )
    }
}
