//! Pose estimation of blinking active LED markers from event-camera streams.

pub mod calib;
pub mod config;
pub mod detect;
pub mod error;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod pose;
pub mod scalar;
pub mod sim;
pub mod track;

pub use error::{Error, Result};
pub use geometry::{pose_error, CameraIntrinsics, PoseError, Transform};
pub use scalar::Real;

pub type Transform64 = Transform<f64>;
pub type Transform32 = Transform<f32>;
pub type CameraIntrinsics64 = CameraIntrinsics<f64>;
pub type CameraIntrinsics32 = CameraIntrinsics<f32>;
pub type PoseError64 = PoseError<f64>;
pub type PoseError32 = PoseError<f32>;
pub type PoseSolution64 = pose::PoseSolution<f64>;
pub type PoseSolution32 = pose::PoseSolution<f32>;
pub type Tracker64 = track::Tracker<f64>;
pub type Tracker32 = track::Tracker<f32>;
