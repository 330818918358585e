use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad IDX magic number {0:#010x}")]
    BadMagic(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("image of {width}x{height} is smaller than the {r}x{r} receptive field")]
    ImageTooSmall { width: usize, height: usize, r: usize },

    #[error("covariance eigendecomposition is degenerate: {0}")]
    DegenerateCovariance(String),

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("cluster is empty")]
    EmptyCluster,
    #[error("lambda {lambda} is infeasible for a cluster of {n} points (need lambda * n >= 1)")]
    InfeasibleLambda { lambda: f64, n: usize },
    #[error("solver did not converge within {iters} iterations (residual {residual:e})")]
    NotConverged { iters: usize, residual: f64 },
    #[error("cluster {cluster}: {source}")]
    Cluster {
        cluster: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("ball model does not match the dictionary: {0}")]
    BallMismatch(String),
    #[error("feature map of {height}x{width} is too small for gradient histograms")]
    MapTooSmall { width: usize, height: usize },

    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("missing view {0}")]
    MissingView(usize),
    #[error("requested {requested} components but data has numerical rank {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("no ground truth for query {0}")]
    MissingTruth(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model format error: {0}")]
    Format(String),
    #[error("unsupported model format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("model bundle has no {0}")]
    MissingMember(String),
}

impl Error {
    pub(crate) fn in_cluster(self, cluster: usize) -> Self {
        Error::Cluster {
            cluster,
            source: Box::new(self),
        }
    }
}
