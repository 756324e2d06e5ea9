use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: {message}")]
    MalformedRow { row: u64, message: String },

    #[error("duplicate event id `{0}`")]
    DuplicateId(String),

    #[error("row {row}: timestamp {timestamp} precedes the catalog epoch")]
    BeforeEpoch { row: u64, timestamp: String },

    #[error("unrecognized catalog header `{0}` (expected `id,lon,lat,timestamp` or `id,x,y,t,c`)")]
    UnknownHeader(String),

    #[error("catalog is empty")]
    EmptyCatalog,

    #[error("catalog too small: {found} events, at least {required} required")]
    CatalogTooSmall { found: usize, required: usize },

    #[error("catalog is not sorted by time at position {0}")]
    Unsorted(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("conditional intensity vanishes at event {index} (`{id}`)")]
    ZeroIntensity { index: usize, id: String },

    #[error("kernel density fit needs at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("all kernel density samples coincide; leave-one-out likelihood is degenerate")]
    DegenerateSamples,

    #[error("every candidate bandwidth has zero leave-one-out likelihood")]
    NoFiniteLikelihood,

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(
        "no convergence after {iterations} iterations (last distance {last:.4}, smoothed {smoothed:.4}); trace: {trace:?}"
    )]
    NonConvergence {
        iterations: usize,
        last: f64,
        smoothed: f64,
        trace: Vec<f64>,
    },

    #[error("grid has no region labels")]
    NoRegions,

    #[error("no realized events fall inside the grid and slot")]
    NoEventsInScope,

    #[error("wilcoxon test needs at least 5 nonzero differences, got {0}")]
    TooFewDifferences(usize),

    #[error("all paired differences are zero")]
    AllDifferencesZero,

    #[error("model `{model}` has {found} periods, expected {expected}")]
    PeriodMismatch {
        model: String,
        found: usize,
        expected: usize,
    },

    #[error("simulation expects {0:.0} events, above the 1e6 limit")]
    RunawaySimulation(f64),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
