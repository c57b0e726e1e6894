use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation is not in SO(3): {0}")]
    NotARotation(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point is behind the camera (z = {z})")]
    PointBehindCamera { z: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("event stream is not sorted by timestamp (t = {t} after {previous})")]
    UnsortedStream { t: u64, previous: u64 },
    #[error("insufficient events for a frequency estimate")]
    InsufficientEvents,
    #[error("degenerate point configuration: {0}")]
    Degenerate(String),
    #[error("no pose candidate places the marker in front of the camera")]
    InvalidPose,
    #[error("empty measurement set")]
    EmptyData,
    #[error("ground truth does not cover t = {t} for marker {marker}")]
    GroundTruthCoverage { marker: String, t: u64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
