use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // sequence input
    #[error("sequence '{label}' has length {found}, expected {expected}")]
    AlignmentLength {
        label: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate label '{0}'")]
    DuplicateLabel(String),
    #[error("illegal residue '{symbol}' in '{label}' at position {position}")]
    Residue {
        label: String,
        symbol: char,
        position: usize,
    },
    #[error("malformed FASTA at line {line}: {reason}")]
    Fasta { line: usize, reason: String },
    #[error("trimming removed every column")]
    EmptyTrim,

    // distances
    #[error("no comparable sites")]
    NoComparableSites,
    #[error("distance saturated: {0}")]
    Saturation(String),
    #[error("bootstrap degenerate for pair ({0}, {1}): {2} of {3} replicates saturated")]
    BootstrapDegenerate(String, String, usize, usize),
    #[error("distance matrix is not symmetric at ({0}, {1})")]
    ReadSymmetry(String, String),

    // trees
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("Newick parse error at byte {position}: {reason}")]
    NewickParse { position: usize, reason: String },

    // embeddings
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    #[error("reference mismatch: {0}")]
    ReferenceMismatch(String),
    #[error("k-means configuration: {0}")]
    KMeansConfig(String),

    // neural core
    #[error("shape error: {0}")]
    Shape(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("target error: {0}")]
    Target(String),
    #[error("stage error: {0}")]
    Stage(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    // data and metrics
    #[error("data error: {0}")]
    Data(String),
    #[error("unknown label '{0}'")]
    Label(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::AlignmentLength { .. } => "AlignmentLengthError",
            Error::DuplicateLabel(_) => "DuplicateLabelError",
            Error::Residue { .. } => "ResidueError",
            Error::Fasta { .. } => "FastaError",
            Error::EmptyTrim => "EmptyTrimError",
            Error::NoComparableSites => "NoComparableSitesError",
            Error::Saturation(_) => "SaturationError",
            Error::BootstrapDegenerate(..) => "BootstrapDegenerateError",
            Error::ReadSymmetry(..) => "ReadSymmetryError",
            Error::Numerical(_) => "NumericalError",
            Error::NewickParse { .. } => "NewickParseError",
            Error::DegenerateVector(_) => "DegenerateVectorError",
            Error::ReferenceMismatch(_) => "ReferenceMismatchError",
            Error::KMeansConfig(_) => "KMeansConfigError",
            Error::Shape(_) => "ShapeError",
            Error::Tape(_) => "TapeError",
            Error::Target(_) => "TargetError",
            Error::Stage(_) => "StageError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Data(_) => "DataError",
            Error::Label(_) => "LabelError",
            Error::Metric(_) => "MetricError",
            Error::InvalidParam(_) => "InvalidParamError",
            Error::Io(_) => "IoError",
            Error::Csv(_) => "CsvError",
            Error::Json(_) => "JsonError",
        }
    }
}
