use std::fmt;

/// Where in the network a non-finite value first appeared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Locus {
    pub stage: &'static str,
    pub layer: Option<usize>,
    pub head: Option<usize>,
}

impl fmt::Display for Locus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.stage)?;
        if let Some(l) = self.layer {
            write!(f, " layer {l}")?;
        }
        if let Some(h) = self.head {
            write!(f, " head {h}")?;
        }
        Ok(())
    }
}

/// Distinct failure kinds when decoding one of the binary file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    Checksum,
    Truncated,
    Shape,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid numeric input to a pure math routine (non-finite values, shape mismatch).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault at {locus}")]
    NumericFault { locus: Locus },

    #[error("numeric fault in trajectory {traj} timestep {t}: {source}")]
    NumericFaultAt {
        traj: usize,
        t: usize,
        #[source]
        source: Box<Error>,
    },

    /// An iterative procedure left its safe numeric range.
    #[error("diverged: {0}")]
    Divergence(String),

    /// Training hit a non-finite loss or gradient; `last_good` holds the
    /// state after the last clean step.
    #[error("training aborted at step {step}: {source}")]
    TrainingAborted {
        step: usize,
        #[source]
        source: Box<Error>,
        last_good: Box<crate::lora::AdaptedPolicy>,
    },

    #[error("{kind:?}: {msg}")]
    Format { kind: FormatErrorKind, msg: String },

    /// The scripted expert could not solve a sampled scene within its retry budget.
    #[error("demo generation failed: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing input file {}", .0.display())]
    MissingInput(std::path::PathBuf),

    /// A replayed run produced different bytes than the recorded one.
    #[error("reproduction mismatch: {0}")]
    ReproMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(kind: FormatErrorKind, msg: impl Into<String>) -> Self {
        Error::Format {
            kind,
            msg: msg.into(),
        }
    }

    /// True for any flavour of non-finite arithmetic failure.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericFault { .. }
                | Error::NumericFaultAt { .. }
                | Error::Divergence(_)
                | Error::TrainingAborted { .. }
        )
    }
}

impl Error {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingInput(_) | Error::Io(_) | Error::Json(_) | Error::Format { .. } => 3,
            e if e.is_numeric() => 4,
            Error::ReproMismatch(_) => 6,
            _ => 5,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
