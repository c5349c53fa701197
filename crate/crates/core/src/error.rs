use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("format error at {location}: {message}")]
    Format { location: Location, message: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("empty input set")]
    EmptyInput,
    #[error("empty template")]
    EmptyTemplate,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("need more than {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("insufficient examples: {0}")]
    InsufficientExamples(String),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no genuine pairs")]
    NoGenuine,
    #[error("no impostor pairs")]
    NoImpostor,
    #[error("empty gallery")]
    EmptyGallery,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Where in an input file a format error was detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Byte(u64),
    Line(usize),
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Location::Byte(b) => write!(f, "byte {b}"),
            Location::Line(l) => write!(f, "line {l}"),
        }
    }
}

impl Error {
    pub(crate) fn format_at_byte(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { location: Location::Byte(offset), message: message.into() }
    }

    pub(crate) fn format_at_line(line: usize, message: impl Into<String>) -> Self {
        Error::Format { location: Location::Line(line), message: message.into() }
    }

    pub(crate) fn dims(expected: usize, found: usize) -> Self {
        Error::DimMismatch { expected, found }
    }

    /// Stable identifier used in machine-readable CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroVector => "ZeroVector",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::Format { .. } => "FormatError",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::EmptyInput => "EmptyInput",
            Error::EmptyTemplate => "EmptyTemplate",
            Error::TooFewPoints { .. } => "TooFewPoints",
            Error::TooFewSamples { .. } => "TooFewSamples",
            Error::InsufficientExamples(_) => "InsufficientExamples",
            Error::BadLabel { .. } => "BadLabel",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NoGenuine => "NoGenuine",
            Error::NoImpostor => "NoImpostor",
            Error::EmptyGallery => "EmptyGallery",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
        }
    }
}
