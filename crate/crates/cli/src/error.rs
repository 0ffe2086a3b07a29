//! Error categories and their exit codes.

use std::fmt;

use raf_core::augmentation::AugmentError;
use raf_core::bank::BankError;
use raf_core::coverage::CoverageError;
use raf_core::retrieval::RetrievalError;
use raf_core::toy::ToyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Data,
    Retrieval,
    Numeric,
    Io,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Data => 3,
            Category::Retrieval => 4,
            Category::Numeric => 5,
            Category::Io => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Data => "data",
            Category::Retrieval => "retrieval",
            Category::Numeric => "numeric",
            Category::Io => "io",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self { category, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Category::Usage, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Category::Data, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Keep the message on one line so the category stays machine-parseable.
        let flat = self.message.replace('\n', " ");
        write!(f, "error[{}]: {}", self.category.name(), flat.trim())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(Category::Io, e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            return Self::new(Category::Io, e.to_string());
        }
        Self::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            return Self::new(Category::Io, e.to_string());
        }
        Self::data(e.to_string())
    }
}

impl From<BankError> for CliError {
    fn from(e: BankError) -> Self {
        match e {
            BankError::Io(io) => io.into(),
            other => Self::data(other.to_string()),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        Self::new(Category::Retrieval, e.to_string())
    }
}

impl From<CoverageError> for CliError {
    fn from(e: CoverageError) -> Self {
        let cat = match &e {
            CoverageError::Retrieval(_) => Category::Retrieval,
            CoverageError::BadFraction(_)
            | CoverageError::NonPositiveBandwidth(_)
            | CoverageError::BadComponentCount { .. } => Category::Usage,
            CoverageError::DegenerateSet | CoverageError::TooFewSamples { .. } => Category::Numeric,
            CoverageError::DimensionMismatch { .. } | CoverageError::TagCountMismatch { .. } => Category::Data,
        };
        Self::new(cat, e.to_string())
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        let cat = match &e {
            AugmentError::Retrieval(_) => Category::Retrieval,
            AugmentError::BadProbability(_) | AugmentError::BadSigma(_) | AugmentError::BadWeights => Category::Usage,
            AugmentError::DimensionMismatch { .. } => Category::Data,
        };
        Self::new(cat, e.to_string())
    }
}

impl From<ToyError> for CliError {
    fn from(e: ToyError) -> Self {
        match e {
            ToyError::Io(io) => io.into(),
            ToyError::Bank(b) => b.into(),
            ToyError::Retrieval(r) => r.into(),
            ToyError::Augment(a) => a.into(),
            ToyError::DivergedLoss { .. } | ToyError::NonFiniteWeights => Self::new(Category::Numeric, e.to_string()),
            ToyError::ConfigInvalid(_) => Self::usage(e.to_string()),
            other => Self::data(other.to_string()),
        }
    }
}
