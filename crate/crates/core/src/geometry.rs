//! Rigid transforms, pinhole projection and pose-error metrics.
//!
//! A [`Transform`] is stored as a rotation matrix plus a displacement and
//! acts on points as `x ↦ R·x + d`. Composition follows the homogeneous
//! matrix product, so `a.compose(&b)` maps a point first through `b`, then
//! through `a` (the chain `H_a · H_b`).

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Skew-symmetric (cross product) matrix of `w`.
pub fn skew<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -w.z, w.y, w.z, z, -w.x, -w.y, w.x, z)
}

fn vee_antisymmetric<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    let half = T::lit(0.5);
    Vector3::new(
        (r[(2, 1)] - r[(1, 2)]) * half,
        (r[(0, 2)] - r[(2, 0)]) * half,
        (r[(1, 0)] - r[(0, 1)]) * half,
    )
}

/// Exponential map so(3) → SO(3) (Rodrigues).
pub fn exp_so3<T: Real>(omega: &Vector3<T>) -> Matrix3<T> {
    let theta = omega.norm();
    let k = skew(omega);
    let k2 = k * k;
    if theta < T::lit(1e-8) {
        return Matrix3::identity() + k + k2 * T::lit(0.5);
    }
    let a = theta.sin() / theta;
    let b = (T::one() - theta.cos()) / (theta * theta);
    Matrix3::identity() + k * a + k2 * b
}

/// Rotation angle of `r` in radians, in `[0, π]`.
///
/// Uses `atan2(sin, cos)` so that small angles keep full precision.
pub fn rotation_angle<T: Real>(r: &Matrix3<T>) -> T {
    let s = vee_antisymmetric(r).norm();
    let c = (r.trace() - T::one()) * T::lit(0.5);
    s.atan2(c)
}

/// Logarithm map SO(3) → so(3); returns the rotation vector `θ·axis`.
pub fn log_so3<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    let w = vee_antisymmetric(r);
    let s = w.norm();
    let c = (r.trace() - T::one()) * T::lit(0.5);
    let theta = s.atan2(c);
    if theta < T::lit(1e-8) {
        return w;
    }
    if T::pi() - theta > T::lit(1e-6) {
        return w * (theta / s);
    }
    // Near π the antisymmetric part vanishes; recover the axis from R + Rᵀ.
    let sym = (r + r.transpose()) * T::lit(0.5) - Matrix3::identity() * c;
    let denom = T::one() - c;
    let aat = sym / denom;
    let mut i = 0;
    for j in 1..3 {
        if aat[(j, j)] > aat[(i, i)] {
            i = j;
        }
    }
    let mut axis: Vector3<T> = aat.column(i).into_owned() / aat[(i, i)].max(T::zero()).sqrt();
    axis /= axis.norm();
    if axis.dot(&w) < T::zero() {
        axis = -axis;
    }
    axis * theta
}

/// Closest rotation matrix (Frobenius sense) to `m`.
pub fn orthonormalize<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < T::zero() {
        fix[(2, 2)] = -T::one();
    }
    u * fix * v_t
}

fn check_rotation<T: Real>(r: &Matrix3<T>) -> Result<()> {
    let tol = T::lit(T::ORTHONORMAL_TOL);
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::NotARotation("non-finite entry".into()));
    }
    let dev = r * r.transpose() - Matrix3::identity();
    let max_dev = dev.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    if max_dev > tol {
        return Err(Error::NotARotation(format!(
            "R·Rᵀ deviates from identity by {}",
            max_dev.as_f64()
        )));
    }
    let det = r.determinant();
    if (det - T::one()).abs() > tol {
        return Err(Error::NotARotation(format!("det(R) = {}", det.as_f64())));
    }
    Ok(())
}

/// Rigid transform in SE(3): rotation matrix plus displacement (meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform<T: Real = f64> {
    rotation: Matrix3<T>,
    displacement: Vector3<T>,
}

impl<T: Real> Default for Transform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Transform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            displacement: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not orthonormal with det +1.
    pub fn new(rotation: Matrix3<T>, displacement: Vector3<T>) -> Result<Self> {
        check_rotation(&rotation)?;
        if displacement.iter().any(|x| !x.is_finite()) {
            return Err(Error::NotARotation("non-finite displacement".into()));
        }
        Ok(Self { rotation, displacement })
    }

    /// Projects `rotation` onto SO(3) before building the transform.
    pub fn from_approximate(rotation: &Matrix3<T>, displacement: Vector3<T>) -> Self {
        Self {
            rotation: orthonormalize(rotation),
            displacement,
        }
    }

    pub fn from_translation(displacement: Vector3<T>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            displacement,
        }
    }

    /// Rotation given as a rotation vector (axis · angle in radians).
    pub fn from_rotation_vector(omega: &Vector3<T>, displacement: Vector3<T>) -> Self {
        Self {
            rotation: exp_so3(omega),
            displacement,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<T>, angle: T, displacement: Vector3<T>) -> Self {
        let axis = axis.normalize();
        Self::from_rotation_vector(&(axis * angle), displacement)
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn displacement(&self) -> &Vector3<T> {
        &self.displacement
    }

    /// Homogeneous product `self · other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            displacement: self.rotation * other.displacement + self.displacement,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            displacement: -(rt * self.displacement),
        }
    }

    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.displacement
    }

    pub fn to_homogeneous(&self) -> Matrix4<T> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.displacement);
        h
    }

    /// Twelve numbers: rotation row-major, then displacement.
    pub fn to_row_major(&self) -> [T; 12] {
        let r = &self.rotation;
        let d = &self.displacement;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            d.x,
            d.y,
            d.z,
        ]
    }

    pub fn from_row_major(values: &[T]) -> Result<Self> {
        if values.len() != 12 {
            return Err(Error::Parse(format!("transform needs 12 values, got {}", values.len())));
        }
        let rotation = Matrix3::from_row_slice(&values[..9]);
        let displacement = Vector3::new(values[9], values[10], values[11]);
        Self::new(rotation, displacement)
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> T {
        rotation_angle(&self.rotation)
    }

    pub fn rotation_vector(&self) -> Vector3<T> {
        log_so3(&self.rotation)
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<T> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// Geodesic interpolation: `s = 0` yields `self`, `s = 1` yields `other`.
    pub fn interpolate(&self, other: &Self, s: T) -> Self {
        let rel = self.rotation.transpose() * other.rotation;
        let omega = log_so3(&rel) * s;
        Self {
            rotation: self.rotation * exp_so3(&omega),
            displacement: self.displacement + (other.displacement - self.displacement) * s,
        }
    }

    /// Re-projects the rotation onto SO(3) to remove accumulated drift.
    pub fn renormalized(&self) -> Self {
        Self::from_approximate(&self.rotation, self.displacement)
    }

    pub fn cast<U: Real>(&self) -> Transform<U> {
        Transform {
            rotation: self.rotation.map(|x| U::lit(x.as_f64())),
            displacement: self.displacement.map(|x| U::lit(x.as_f64())),
        }
    }
}

impl<T: Real> Mul for Transform<T> {
    type Output = Transform<T>;

    fn mul(self, rhs: Self) -> Self::Output {
        self.compose(&rhs)
    }
}

impl<'a, T: Real> Mul<&'a Transform<T>> for &'a Transform<T> {
    type Output = Transform<T>;

    fn mul(self, rhs: &'a Transform<T>) -> Self::Output {
        self.compose(rhs)
    }
}

/// Pinhole intrinsics of a rectified camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics<T: Real = f64> {
    pub focal_x: T,
    pub focal_y: T,
    pub principal_x: T,
    pub principal_y: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(focal_x: T, focal_y: T, principal_x: T, principal_y: T, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            focal_x,
            focal_y,
            principal_x,
            principal_y,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_x > T::zero() && self.focal_y > T::zero()) {
            return Err(Error::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("empty resolution".into()));
        }
        let w = T::lit(self.width as f64);
        let h = T::lit(self.height as f64);
        if !(self.principal_x >= T::zero()
            && self.principal_x < w
            && self.principal_y >= T::zero()
            && self.principal_y < h)
        {
            return Err(Error::InvalidIntrinsics("principal point outside the sensor".into()));
        }
        Ok(())
    }

    /// Pinhole projection of a camera-frame point to pixels.
    pub fn project(&self, p: &Vector3<T>) -> Result<Vector2<T>> {
        if p.z <= T::zero() {
            return Err(Error::PointBehindCamera { z: p.z.as_f64() });
        }
        Ok(Vector2::new(
            self.focal_x * p.x / p.z + self.principal_x,
            self.focal_y * p.y / p.z + self.principal_y,
        ))
    }

    /// Pixel to normalized image coordinates (`z = 1` plane).
    pub fn normalize(&self, pixel: &Vector2<T>) -> Vector2<T> {
        Vector2::new(
            (pixel.x - self.principal_x) / self.focal_x,
            (pixel.y - self.principal_y) / self.focal_y,
        )
    }

    pub fn matrix(&self) -> Matrix3<T> {
        let z = T::zero();
        Matrix3::new(
            self.focal_x,
            z,
            self.principal_x,
            z,
            self.focal_y,
            self.principal_y,
            z,
            z,
            T::one(),
        )
    }

    pub fn cast<U: Real>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            focal_x: U::lit(self.focal_x.as_f64()),
            focal_y: U::lit(self.focal_y.as_f64()),
            principal_x: U::lit(self.principal_x.as_f64()),
            principal_y: U::lit(self.principal_y.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Absolute pose error of an estimate against ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseError<T: Real = f64> {
    /// `d_gt − d_est` in meters.
    pub translation_error: Vector3<T>,
    pub translation_norm: T,
    /// Geodesic angle of `R_estᵀ·R_gt`, degrees in `[0, 180]`.
    pub orientation_error_deg: T,
}

pub fn pose_error<T: Real>(estimate: &Transform<T>, ground_truth: &Transform<T>) -> PoseError<T> {
    let translation_error = ground_truth.displacement - estimate.displacement;
    let rel = estimate.rotation.transpose() * ground_truth.rotation;
    PoseError {
        translation_error,
        translation_norm: translation_error.norm(),
        orientation_error_deg: rotation_angle(&rel) * T::lit(180.0) / T::pi(),
    }
}
