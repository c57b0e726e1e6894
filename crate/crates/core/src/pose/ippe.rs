//! Infinitesimal plane-based pose estimation: two rotation candidates from the
//! homography Jacobian at the object-point centroid.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{estimate_homography, reprojection_errors, rms, AlternatePose, Correspondence, PoseSolution};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Transform};
use crate::scalar::Real;

/// The two rotations consistent with a plane-to-normalized-image Jacobian `j`
/// at a point imaged at normalized position `v`, plus the scale γ.
pub(crate) fn ippe_rotations<T: Real>(v: &Vector2<T>, j: &Matrix2<T>) -> Result<(Matrix3<T>, Matrix3<T>, T)> {
    let one = T::one();
    let vn = v.norm();
    // rotation taking the optical axis onto the ray through v
    let rv = if vn <= T::default_epsilon() {
        Matrix3::identity()
    } else {
        let s = (vn * vn + one).sqrt();
        let costh = one / s;
        let sinth = (one - one / (s * s)).max(T::zero()).sqrt();
        let kc = Matrix3::new(
            T::zero(),
            T::zero(),
            v.x,
            T::zero(),
            T::zero(),
            v.y,
            -v.x,
            -v.y,
            T::zero(),
        ) / vn;
        Matrix3::identity() + kc * sinth + kc * kc * (one - costh)
    };
    let proj = Matrix2x3::new(one, T::zero(), -v.x, T::zero(), one, -v.y);
    let b = proj * rv.fixed_view::<3, 2>(0, 0);
    let b_inv = b
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("plane seen edge-on".into()))?;
    let a = b_inv * j;
    let aa = a * a.transpose();
    let gamma =
        ((aa[(0, 0)] + aa[(1, 1)] + ((aa[(0, 0)] - aa[(1, 1)]).powi(2) + T::lit(4.0) * aa[(0, 1)].powi(2)).sqrt())
            * T::lit(0.5))
        .sqrt();
    if !(gamma > T::zero()) {
        return Err(Error::Degenerate("zero homography scale".into()));
    }
    let r22 = a / gamma;
    let h = Matrix2::identity() - r22.transpose() * r22;
    let b1 = h[(0, 0)].max(T::zero()).sqrt();
    let mut b2 = h[(1, 1)].max(T::zero()).sqrt();
    if h[(0, 1)] < T::zero() {
        b2 = -b2;
    }
    let d = Vector3::new(r22[(0, 0)], r22[(1, 0)], b1).cross(&Vector3::new(r22[(0, 1)], r22[(1, 1)], b2));
    let (c, a3) = (Vector2::new(d.x, d.y), d.z);
    let r1 = rv * Matrix3::new(r22[(0, 0)], r22[(0, 1)], c.x, r22[(1, 0)], r22[(1, 1)], c.y, b1, b2, a3);
    let r2 = rv
        * Matrix3::new(
            r22[(0, 0)],
            r22[(0, 1)],
            -c.x,
            r22[(1, 0)],
            r22[(1, 1)],
            -c.y,
            -b1,
            -b2,
            a3,
        );
    Ok((r1, r2, gamma))
}

/// Least-squares translation for a fixed rotation in normalized image coordinates.
fn fit_translation<T: Real>(r: &Matrix3<T>, obj: &[Vector2<T>], img: &[Vector2<T>]) -> Option<Vector3<T>> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (o, q) in obj.iter().zip(img) {
        let p = r * Vector3::new(o.x, o.y, T::zero());
        for (row, rhs) in [
            (Vector3::new(T::one(), T::zero(), -q.x), q.x * p.z - p.x),
            (Vector3::new(T::zero(), T::one(), -q.y), q.y * p.z - p.y),
        ] {
            ata += row * row.transpose();
            atb += row * rhs;
        }
    }
    ata.cholesky().map(|c| c.solve(&atb))
}

/// Planar pose from ≥ 4 correspondences. Both IPPE candidates are scored by pixel
/// rms; the lower one is returned with the other as the alternate. Near-equal rms
/// (the frontal ambiguity) prefers the candidate whose plane normal is closer to +z.
pub fn ippe_pose<T: Real>(corrs: &[Correspondence<T>], k: &CameraIntrinsics<T>) -> Result<PoseSolution<T>> {
    k.validate()?;
    if corrs.len() < 4 {
        return Err(Error::Degenerate(format!(
            "{} correspondences, need at least 4",
            corrs.len()
        )));
    }
    let n = T::lit(corrs.len() as f64);
    let centroid = corrs.iter().fold(Vector2::zeros(), |a, c| a + c.object_point) / n;
    let obj: Vec<Vector2<T>> = corrs.iter().map(|c| c.object_point - centroid).collect();
    let img: Vec<Vector2<T>> = corrs.iter().map(|c| k.normalize(&c.image_point)).collect();
    let centered: Vec<Correspondence<T>> = obj.iter().zip(&img).map(|(&o, &i)| Correspondence::new(o, i)).collect();
    let hom = estimate_homography(&centered)?;
    let h = hom.matrix;
    if h[(2, 2)].abs() <= T::lit(1e-12) * h.norm() {
        return Err(Error::InvalidPose);
    }
    let h = h / h[(2, 2)];
    let v = Vector2::new(h[(0, 2)], h[(1, 2)]);
    let j = Matrix2::new(
        h[(0, 0)] - h[(2, 0)] * h[(0, 2)],
        h[(0, 1)] - h[(2, 1)] * h[(0, 2)],
        h[(1, 0)] - h[(2, 0)] * h[(1, 2)],
        h[(1, 1)] - h[(2, 1)] * h[(1, 2)],
    );
    let (r1, r2, gamma) = ippe_rotations(&v, &j)?;
    let t_scale = Vector3::new(v.x, v.y, T::one()) / gamma;

    let offset = Vector3::new(centroid.x, centroid.y, T::zero());
    let mut candidates = Vec::with_capacity(2);
    for r in [r1, r2] {
        let t = fit_translation(&r, &obj, &img).unwrap_or(t_scale);
        let pose = Transform::from_approximate(&r, t - r * offset);
        if let Some(errors) = reprojection_errors(&pose, corrs, k) {
            let e_rms = rms(&errors);
            candidates.push((pose, e_rms, errors));
        }
    }
    if candidates.is_empty() {
        return Err(Error::InvalidPose);
    }
    if candidates.len() == 2 {
        let (r_a, r_b) = (candidates[0].1, candidates[1].1);
        let tol = T::lit(1e-9) + T::lit(1e-6) * r_a.max(r_b);
        let swap = if (r_a - r_b).abs() <= tol {
            candidates[1].0.rotation()[(2, 2)] > candidates[0].0.rotation()[(2, 2)]
        } else {
            r_b < r_a
        };
        if swap {
            candidates.swap(0, 1);
        }
    }
    let mut it = candidates.into_iter();
    let (pose, reprojection_rms, per_point_errors) = it.next().expect("non-empty");
    let alternate = it.next().map(|(pose, rms, _)| AlternatePose {
        pose,
        reprojection_rms: rms,
    });
    Ok(PoseSolution {
        pose,
        reprojection_rms,
        per_point_errors,
        alternate,
        refinement: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_error;
    use proptest::prelude::*;

    fn camera() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0, 1280, 720).unwrap()
    }

    /// Corners of a square of side `s`, centered at the origin.
    fn square(s: f64) -> Vec<Vector2<f64>> {
        let h = s / 2.0;
        vec![
            Vector2::new(-h, -h),
            Vector2::new(h, -h),
            Vector2::new(h, h),
            Vector2::new(-h, h),
        ]
    }

    fn project_all(pose: &Transform<f64>, obj: &[Vector2<f64>], k: &CameraIntrinsics<f64>) -> Vec<Correspondence<f64>> {
        obj.iter()
            .map(|o| {
                let x = pose.transform_point(&Vector3::new(o.x, o.y, 0.0));
                Correspondence::new(*o, k.project(&x).unwrap())
            })
            .collect()
    }

    #[test]
    fn frontal_nine_centimetre_square() {
        let k = camera();
        let truth = Transform::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let sol = ippe_pose(&project_all(&truth, &square(0.09), &k), &k).unwrap();
        let err = pose_error(&sol.pose, &truth);
        assert!(err.translation_norm < 1e-9, "{err:?}");
        assert!(err.orientation_error_deg < 1e-6, "{err:?}");
        assert!(sol.reprojection_rms < 1e-6);
        // both candidates coincide on the exact frontal view
        let alt = sol.alternate.unwrap();
        assert!((alt.reprojection_rms - sol.reprojection_rms).abs() < 1e-6);
        assert!(sol.pose.rotation()[(2, 2)] >= alt.pose.rotation()[(2, 2)]);
    }

    #[test]
    fn tilted_thirty_degrees() {
        let k = camera();
        let truth = Transform::from_axis_angle(&Vector3::x(), 30f64.to_radians(), Vector3::new(0.0, 0.0, 2.0));
        let sol = ippe_pose(&project_all(&truth, &square(0.09), &k), &k).unwrap();
        let err = pose_error(&sol.pose, &truth);
        assert!(err.translation_norm < 1e-6, "{err:?}");
        assert!(err.orientation_error_deg < 1e-6, "{err:?}");
        let alt = sol.alternate.unwrap();
        assert!(alt.reprojection_rms > sol.reprojection_rms);
        // the flip is roughly a reflection of the tilt about the line of sight
        let flip = pose_error(&alt.pose, &truth).orientation_error_deg;
        assert!(flip > 10.0, "alternate too close to truth: {flip}");
    }

    #[test]
    fn works_in_f32() {
        let k = camera().cast::<f32>();
        let truth = Transform::<f32>::from_axis_angle(&Vector3::y(), 0.3, Vector3::new(0.05, 0.0, 1.5));
        let obj: Vec<Vector2<f32>> = square(0.2).iter().map(|p| p.cast()).collect();
        let corrs: Vec<_> = obj
            .iter()
            .map(|o| {
                let x = truth.transform_point(&Vector3::new(o.x, o.y, 0.0));
                Correspondence::new(*o, k.project(&x).unwrap())
            })
            .collect();
        let sol = ippe_pose(&corrs, &k).unwrap();
        let err = pose_error(&sol.pose, &truth);
        assert!(err.translation_norm < 1e-3, "{err:?}");
        assert!(err.orientation_error_deg < 0.1, "{err:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn round_trip_is_exact(
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in 0.0f64..1.2,
            x in -0.3f64..0.3,
            y in -0.2f64..0.2,
            z in 0.5f64..4.0,
            side in 0.05f64..0.6,
            extra in prop::collection::vec((-0.5f64..0.5, -0.5f64..0.5), 0..6),
        ) {
            let axis = Vector3::from(axis);
            prop_assume!(axis.norm() > 0.1);
            let k = camera();
            let truth = Transform::from_axis_angle(&axis.normalize(), angle, Vector3::new(x, y, z));
            let mut obj = square(side);
            obj.extend(extra.iter().map(|&(a, b)| Vector2::new(a * side, b * side)));
            let corrs = project_all(&truth, &obj, &k);
            let sol = ippe_pose(&corrs, &k).unwrap();
            let err = pose_error(&sol.pose, &truth);
            prop_assert!(err.translation_norm < 1e-6, "{:?}", err);
            prop_assert!(err.orientation_error_deg < 1e-6, "{:?}", err);
            prop_assert!(sol.pose.displacement().z > 0.0);
            if let Some(alt) = sol.alternate {
                prop_assert!(sol.reprojection_rms <= alt.reprojection_rms);
            }
        }
    }
}
