//! Normalized direct linear transform for plane-to-image homographies.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};

use super::Correspondence;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// 3×3 projective map, scaled so the bottom-right entry is 1 when it is not ~0
/// (unit Frobenius norm otherwise).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography<T: Real = f64> {
    pub matrix: Matrix3<T>,
    /// Smallest singular value of the normalized DLT system.
    pub algebraic_residual: T,
}

impl<T: Real> Homography<T> {
    pub fn apply(&self, p: &Vector2<T>) -> Vector2<T> {
        let q = self.matrix * Vector3::new(p.x, p.y, T::one());
        Vector2::new(q.x / q.z, q.y / q.z)
    }

    /// Largest transfer error over `corrs`.
    pub fn max_transfer_error(&self, corrs: &[Correspondence<T>]) -> T {
        corrs.iter().fold(T::zero(), |m, c| {
            m.max((self.apply(&c.object_point) - c.image_point).norm())
        })
    }
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn normalizing_transform<T: Real>(pts: impl Iterator<Item = Vector2<T>> + Clone) -> Result<Matrix3<T>> {
    let n = T::lit(pts.clone().count() as f64);
    let c = pts.clone().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = pts.fold(T::zero(), |a, p| a + (p - c).norm()) / n;
    if !(mean_dist > T::zero()) {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = T::lit(std::f64::consts::SQRT_2) / mean_dist;
    let z = T::zero();
    Ok(Matrix3::new(s, z, -s * c.x, z, s, -s * c.y, z, z, T::one()))
}

/// Ratio of the two principal spreads of a 2D point set (0 when collinear).
fn spread_ratio<T: Real>(pts: impl Iterator<Item = Vector2<T>> + Clone) -> T {
    let n = T::lit(pts.clone().count() as f64);
    let c = pts.clone().fold(Vector2::zeros(), |a, p| a + p) / n;
    let (mut sxx, mut sxy, mut syy) = (T::zero(), T::zero(), T::zero());
    for p in pts {
        let d = p - c;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr * T::lit(0.25) - det).max(T::zero()).sqrt();
    let hi = tr * T::lit(0.5) + disc;
    let lo = tr * T::lit(0.5) - disc;
    if hi > T::zero() {
        lo.max(T::zero()) / hi
    } else {
        T::zero()
    }
}

/// Homography mapping object-plane points to image points.
pub fn estimate_homography<T: Real>(corrs: &[Correspondence<T>]) -> Result<Homography<T>> {
    if corrs.len() < 4 {
        return Err(Error::Degenerate(format!(
            "{} correspondences, need at least 4",
            corrs.len()
        )));
    }
    let degenerate_spread = T::lit(1e-12);
    if spread_ratio(corrs.iter().map(|c| c.object_point)) < degenerate_spread
        || spread_ratio(corrs.iter().map(|c| c.image_point)) < degenerate_spread
    {
        return Err(Error::Degenerate("points are collinear".into()));
    }
    let t_obj = normalizing_transform(corrs.iter().map(|c| c.object_point))?;
    let t_img = normalizing_transform(corrs.iter().map(|c| c.image_point))?;

    let rows = (2 * corrs.len()).max(9);
    let mut a = DMatrix::<T>::zeros(rows, 9);
    for (i, c) in corrs.iter().enumerate() {
        let p = t_obj * Vector3::new(c.object_point.x, c.object_point.y, T::one());
        let q = t_img * Vector3::new(c.image_point.x, c.image_point.y, T::one());
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r = 2 * i;
        a[(r, 0)] = -x;
        a[(r, 1)] = -y;
        a[(r, 2)] = -T::one();
        a[(r, 6)] = u * x;
        a[(r, 7)] = u * y;
        a[(r, 8)] = u;
        a[(r + 1, 3)] = -x;
        a[(r + 1, 4)] = -y;
        a[(r + 1, 5)] = -T::one();
        a[(r + 1, 6)] = v * x;
        a[(r + 1, 7)] = v * y;
        a[(r + 1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let smallest = svd.singular_values[order[0]];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[order[order.len() - 1]];
    if second <= largest * T::lit(1e-10) {
        return Err(Error::Degenerate("homography is not uniquely determined".into()));
    }
    let h = v_t.row(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let inv_img = t_img
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("singular normalization".into()))?;
    let mut m = inv_img * hn * t_obj;
    let scale = if m[(2, 2)].abs() > T::lit(1e-12) * m.norm() {
        m[(2, 2)]
    } else {
        m.norm()
    };
    m /= scale;
    Ok(Homography {
        matrix: m,
        algebraic_residual: smallest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Transform};
    use approx::assert_relative_eq;

    fn square() -> Vec<Vector2<f64>> {
        vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(1.0, 1.0),
            Vector2::new(0.0, 1.0),
        ]
    }

    #[test]
    fn identity_and_scaling() {
        let c: Vec<_> = square().into_iter().map(|p| Correspondence::new(p, p)).collect();
        let h = estimate_homography(&c).unwrap();
        assert_relative_eq!(h.matrix, Matrix3::identity(), epsilon = 1e-12);

        let c: Vec<_> = square().into_iter().map(|p| Correspondence::new(p, p * 2.0)).collect();
        let h = estimate_homography(&c).unwrap();
        assert_relative_eq!(
            h.matrix,
            Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn matches_projection_oracle() {
        let k = CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0, 1280, 720).unwrap();
        let pose = Transform::from_rotation_vector(
            &nalgebra::Vector3::new(0.3, -0.2, 0.1),
            nalgebra::Vector3::new(0.1, -0.05, 2.0),
        );
        let c: Vec<_> = square()
            .into_iter()
            .map(|p| {
                let x = pose.transform_point(&nalgebra::Vector3::new(p.x, p.y, 0.0));
                Correspondence::new(p, k.project(&x).unwrap())
            })
            .collect();
        let h = estimate_homography(&c).unwrap();
        // oracle: K·[r1 r2 d] up to scale
        let r = pose.rotation();
        let d = pose.displacement();
        let mut expected =
            k.matrix() * Matrix3::from_columns(&[r.column(0).into_owned(), r.column(1).into_owned(), *d]);
        expected /= expected[(2, 2)];
        assert_relative_eq!(h.matrix, expected, epsilon = 1e-9 * expected.norm());
        assert!(h.algebraic_residual < 1e-9);
        assert!(h.max_transfer_error(&c) < 1e-9);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let line: Vec<_> = (0..5)
            .map(|i| {
                let p = Vector2::new(i as f64, 2.0 * i as f64);
                Correspondence::new(p, p)
            })
            .collect();
        assert!(matches!(estimate_homography(&line), Err(Error::Degenerate(_))));
        let few: Vec<_> = square()[..3].iter().map(|&p| Correspondence::new(p, p)).collect();
        assert!(estimate_homography(&few).is_err());
    }
}
