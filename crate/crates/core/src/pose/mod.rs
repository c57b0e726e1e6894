//! Planar PnP: homography, IPPE decomposition, reprojection refinement and the
//! tracking-lost gate.

mod homography;
mod ippe;
mod refine;

pub use homography::{estimate_homography, Homography};
pub use ippe::ippe_pose;
pub use refine::{refine_pose, RefineStatus};

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Transform};
use crate::scalar::Real;
use crate::track::TrackerState;

/// A marker-plane point (meters, z = 0) and its measured image position (pixels).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence<T: Real = f64> {
    pub object_point: Vector2<T>,
    pub image_point: Vector2<T>,
}

impl<T: Real> Correspondence<T> {
    pub fn new(object_point: Vector2<T>, image_point: Vector2<T>) -> Self {
        Self {
            object_point,
            image_point,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlternatePose<T: Real = f64> {
    pub pose: Transform<T>,
    pub reprojection_rms: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSolution<T: Real = f64> {
    /// Marker in camera frame.
    pub pose: Transform<T>,
    pub reprojection_rms: T,
    /// Pixel error per correspondence, in input order.
    pub per_point_errors: Vec<T>,
    pub alternate: Option<AlternatePose<T>>,
    /// Set once the solution has been through [`refine_pose`].
    pub refinement: Option<RefineStatus>,
}

/// Per-point pixel errors of `pose`; `None` if any point is not in front of the camera.
pub fn reprojection_errors<T: Real>(
    pose: &Transform<T>,
    corrs: &[Correspondence<T>],
    k: &CameraIntrinsics<T>,
) -> Option<Vec<T>> {
    corrs
        .iter()
        .map(|c| {
            let x = pose.transform_point(&Vector3::new(c.object_point.x, c.object_point.y, T::zero()));
            k.project(&x).ok().map(|p| (p - c.image_point).norm())
        })
        .collect()
}

pub fn rms<T: Real>(errors: &[T]) -> T {
    if errors.is_empty() {
        return T::zero();
    }
    let ss = errors.iter().fold(T::zero(), |a, &e| a + e * e);
    (ss / T::lit(errors.len() as f64)).sqrt()
}

/// Best-fit plane of a point set. Returns the frame whose z = 0 plane is the fit
/// (plane coordinates → input coordinates) and the largest point-to-plane distance.
/// Points already on z = 0 get the identity frame.
pub fn plane_fit<T: Real>(points: &[Vector3<T>]) -> (Transform<T>, T) {
    if points.iter().all(|p| p.z == T::zero()) || points.len() < 3 {
        return (Transform::identity(), T::zero());
    }
    let n = T::lit(points.len() as f64);
    let centroid = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let x_axis = eig.eigenvectors.column(idx[0]).normalize();
    let mut normal = eig.eigenvectors.column(idx[2]).normalize();
    if normal.z < T::zero() {
        normal = -normal;
    }
    let y_axis = normal.cross(&x_axis).normalize();
    let x_axis = y_axis.cross(&normal);
    let frame = Transform::from_approximate(&Matrix3::from_columns(&[x_axis, y_axis, normal]), centroid);
    let dev = points
        .iter()
        .fold(T::zero(), |m, p| m.max((p - centroid).dot(&normal).abs()));
    (frame, dev)
}

/// Coplanar 3D points expressed in their own plane frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarObject<T: Real = f64> {
    /// Plane frame → object frame.
    pub frame: Transform<T>,
    pub points: Vec<Vector2<T>>,
}

impl<T: Real> PlanarObject<T> {
    /// Fails when the points deviate from a plane by more than `tolerance` meters.
    pub fn new(points: &[Vector3<T>], tolerance: T) -> Result<Self> {
        let (frame, dev) = plane_fit(points);
        if dev > tolerance {
            return Err(Error::Degenerate(format!(
                "points are not coplanar (deviation {} m)",
                dev.as_f64()
            )));
        }
        let inv = frame.inverse();
        let points = points
            .iter()
            .map(|p| {
                let q = inv.transform_point(p);
                Vector2::new(q.x, q.y)
            })
            .collect();
        Ok(Self { frame, points })
    }

    pub fn correspondences(&self, image: &[Vector2<T>]) -> Vec<Correspondence<T>> {
        self.points
            .iter()
            .zip(image)
            .map(|(&o, &i)| Correspondence::new(o, i))
            .collect()
    }

    /// IPPE (plus optional refinement) with the result expressed for object-frame points.
    pub fn solve(&self, image: &[Vector2<T>], k: &CameraIntrinsics<T>, refine: bool) -> Result<PoseSolution<T>> {
        if image.len() != self.points.len() {
            return Err(Error::Degenerate(format!(
                "{} image points for {} object points",
                image.len(),
                self.points.len()
            )));
        }
        let corrs = self.correspondences(image);
        let mut sol = ippe_pose(&corrs, k)?;
        if refine {
            sol = refine_pose(&sol, &corrs, k);
        }
        let to_plane = self.frame.inverse();
        sol.pose = sol.pose.compose(&to_plane);
        if let Some(alt) = sol.alternate.as_mut() {
            alt.pose = alt.pose.compose(&to_plane);
        }
        Ok(sol)
    }
}

/// Lost when any point's reprojection error strictly exceeds its tracker's mean event
/// distance (radius / 2), or any tracker is starved. `trackers[i]` pairs with
/// `sol.per_point_errors[i]`.
pub fn check_tracking_lost<T: Real>(sol: &PoseSolution<T>, trackers: &[TrackerState<T>]) -> bool {
    debug_assert_eq!(sol.per_point_errors.len(), trackers.len());
    trackers.iter().any(|t| t.starved)
        || sol
            .per_point_errors
            .iter()
            .zip(trackers)
            .any(|(&e, t)| !(e <= t.mean_distance()))
}
