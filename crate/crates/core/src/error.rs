use thiserror::Error;

/// Errors raised anywhere in the back-end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle is within 1e-6 rad of pi; log map is ambiguous")]
    AngleNearPi,
    #[error("point is behind the camera (depth {0:.3e} m)")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("dual quadric does not describe an ellipsoid")]
    NotAnEllipsoid,
    #[error("dual conic does not describe an ellipse")]
    NotAnEllipse,
    #[error("quadric projection is degenerate")]
    DegenerateProjection,
    #[error("conic has a zero homogeneous scale term")]
    DegenerateConic,
    #[error("at least 3 views are required, got {0}")]
    InsufficientViews(usize),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("no observations supplied")]
    EmptyObservations,
    #[error("at least 8 points are required, got {0}")]
    TooFewPoints(usize),
    #[error("point cloud covariance is rank deficient")]
    DegenerateCloud,
    #[error("optimization diverged")]
    DivergedOptimization,
    #[error("frame id {got} is not greater than the last frame id {last}")]
    NonMonotoneFrameId { last: u64, got: u64 },
    #[error("factor references a state that is not in the window: {0}")]
    DanglingFactor(String),
    #[error("normal equations are singular")]
    SingularSystem,
    #[error("problem has no factors")]
    NoFactors,
    #[error("no view sees both quadrics")]
    NoValidView,
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("trajectory lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("table is empty")]
    EmptyTable,
    #[error("config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::AngleNearPi
                | Error::NotAnEllipsoid
                | Error::NotAnEllipse
                | Error::DegenerateProjection
                | Error::DegenerateConic
                | Error::DegenerateCloud
                | Error::DivergedOptimization
                | Error::SingularSystem
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
