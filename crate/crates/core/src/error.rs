use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("grid sample query {index} lies outside [0, 1]^3: {coords:?}")]
    QueryOutOfRange { index: usize, coords: [f64; 3] },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    NotOnTape,
    #[error("function evaluated twice at the same point gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("patch geometry: {0}")]
    Geometry(String),
    #[error("region {child:?} is not contained in {parent:?}")]
    Containment { child: String, parent: String },
    #[error("unknown class id {id} (model has {classes} classes)")]
    UnknownClass { id: usize, classes: usize },
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("sigma schedule: {0}")]
    Schedule(String),
    #[error("activation cache: {0}")]
    Cache(String),
    #[error("{what}: bad magic bytes")]
    BadMagic { what: &'static str },
    #[error("{what}: unsupported version {version}")]
    UnsupportedVersion { what: &'static str, version: u32 },
    #[error("{what}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        what: &'static str,
        stored: u32,
        computed: u32,
    },
    #[error("{what}: truncated input")]
    Truncated { what: &'static str },
    #[error("{what}: malformed: {msg}")]
    Malformed { what: &'static str, msg: String },
    #[error("training aborted: {0}")]
    NumericAbort(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }

    /// True for corrupt or unreadable artifacts (checksums, truncation, magic).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedVersion { .. }
                | Error::Checksum { .. }
                | Error::Truncated { .. }
                | Error::Malformed { .. }
                | Error::Io { .. }
        )
    }

    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::NumericAbort(_)
        )
    }
}
