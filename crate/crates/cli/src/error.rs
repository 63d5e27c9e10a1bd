use tilesr_core::media::MediaError;
use tilesr_core::prompts::PromptError;
use tilesr_core::sampler::SamplerError;

use crate::config::ConfigError;

/// Failure of a subcommand, grouped by process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Exit code 1.
    #[error("{0}")]
    Usage(String),
    /// Exit code 2: configuration, inputs, or manifests that fail validation.
    #[error("{0}")]
    Config(String),
    /// Exit code 3.
    #[error("{0}")]
    Extraction(String),
    /// Exit code 4.
    #[error("{0}")]
    Backend(String),
    /// Exit code 5.
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Extraction(_) => 3,
            CliError::Backend(_) => 4,
            CliError::Internal(_) => 5,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MediaError> for CliError {
    fn from(e: MediaError) -> Self {
        CliError::Config(format!("input: {e}"))
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Extractor { .. } => CliError::Extraction(e.to_string()),
            PromptError::Io { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Backend { .. } | SamplerError::Decode(_) => CliError::Backend(e.to_string()),
            SamplerError::Prompt(p) => p.into(),
            SamplerError::Config(_) => CliError::Config(e.to_string()),
            SamplerError::Coverage { .. } | SamplerError::Schedule(_) | SamplerError::Tensor(_) => {
                CliError::Internal(e.to_string())
            }
        }
    }
}
