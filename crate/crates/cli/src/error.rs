use std::fmt::Display;

use tjac_core::Error as CoreError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Internal => 1,
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }

    fn label(self) -> &'static str {
        match self {
            ErrorKind::Config => "config error",
            ErrorKind::Data => "data error",
            ErrorKind::Numeric => "numeric error",
            ErrorKind::Internal => "internal error",
        }
    }
}

/// A failure tagged with its class and the pipeline stage it happened in.
#[derive(Debug, thiserror::Error)]
#[error("{} in stage `{stage}`: {message}", kind.label())]
pub struct CliError {
    pub kind: ErrorKind,
    pub stage: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, stage: &str, message: impl Display) -> Self {
        Self { kind, stage: stage.to_string(), message: message.to_string() }
    }

    pub fn config(stage: &str, message: impl Display) -> Self {
        Self::new(ErrorKind::Config, stage, message)
    }

    pub fn data(stage: &str, message: impl Display) -> Self {
        Self::new(ErrorKind::Data, stage, message)
    }

    pub fn numeric(stage: &str, message: impl Display) -> Self {
        Self::new(ErrorKind::Numeric, stage, message)
    }

    pub fn internal(stage: &str, message: impl Display) -> Self {
        Self::new(ErrorKind::Internal, stage, message)
    }

    pub fn exit_code(&self) -> u8 {
        self.kind.exit_code()
    }
}

pub fn classify(e: &CoreError) -> ErrorKind {
    match e {
        _ if e.is_numeric() => ErrorKind::Numeric,
        CoreError::RankDeficient { .. } | CoreError::NotOrthonormal { .. } => ErrorKind::Numeric,
        CoreError::Parse { .. } | CoreError::InvalidSplit(_) => ErrorKind::Data,
        CoreError::InvalidArgument(_) => ErrorKind::Config,
        _ => ErrorKind::Internal,
    }
}

/// Attaches a stage name to fallible results.
pub trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T, CliError>;
}

impl<T> StageExt<T> for Result<T, CoreError> {
    fn stage(self, stage: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(classify(&e), stage, e))
    }
}

impl<T> StageExt<T> for std::io::Result<T> {
    fn stage(self, stage: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::internal(stage, e))
    }
}

impl<T> StageExt<T> for Result<T, csv::Error> {
    fn stage(self, stage: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::internal(stage, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let codes: Vec<u8> = [ErrorKind::Config, ErrorKind::Data, ErrorKind::Numeric, ErrorKind::Internal]
            .iter()
            .map(|k| k.exit_code())
            .collect();
        assert_eq!(codes, vec![2, 3, 4, 1]);
    }

    #[test]
    fn core_errors_are_classified() {
        let r: Result<(), _> = Err(CoreError::TrainingDiverged { step: 3 });
        let e = r.stage("train").unwrap_err();
        assert_eq!(e.kind, ErrorKind::Numeric);
        assert!(e.to_string().contains("`train`"), "{e}");
        assert_eq!(classify(&CoreError::Parse { line: 1, message: "x".into() }), ErrorKind::Data);
        assert_eq!(classify(&CoreError::InvalidArgument("k".into())), ErrorKind::Config);
    }
}
