//! Levenberg-damped Gauss–Newton on reprojection error over SE(3).

use nalgebra::{Matrix6, Vector2, Vector3, Vector6};

use super::{reprojection_errors, rms, AlternatePose, Correspondence, PoseSolution};
use crate::geometry::{exp_so3, skew, CameraIntrinsics, Transform};
use crate::scalar::Real;

const MAX_ITERATIONS: usize = 50;
const GRADIENT_TOL: f64 = 1e-10;
const LAMBDA_START: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineStatus {
    /// Gradient norm fell below tolerance.
    Converged,
    MaxIterations,
    /// Damping saturated without reaching the gradient tolerance; the best pose found
    /// is kept.
    Stalled,
    /// No usable step (non-finite cost or points behind the camera); the initial
    /// solution is returned unchanged.
    Diverged,
}

/// Stacked pixel residuals and their Jacobian w.r.t. (ω, δ) for R ← exp(ω)R, d ← d + δ.
fn linearize<T: Real>(
    pose: &Transform<T>,
    corrs: &[Correspondence<T>],
    k: &CameraIntrinsics<T>,
) -> Option<(T, Matrix6<T>, Vector6<T>)> {
    let r = pose.rotation();
    let d = pose.displacement();
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    let mut cost = T::zero();
    for c in corrs {
        let rp = r * Vector3::new(c.object_point.x, c.object_point.y, T::zero());
        let x = rp + d;
        if !(x.z > T::zero()) {
            return None;
        }
        let iz = T::one() / x.z;
        let proj = Vector2::new(
            k.focal_x * x.x * iz + k.principal_x,
            k.focal_y * x.y * iz + k.principal_y,
        );
        let res = proj - c.image_point;
        cost += res.norm_squared();
        // d(pixel)/d(X)
        let dpx = Vector3::new(k.focal_x * iz, T::zero(), -k.focal_x * x.x * iz * iz);
        let dpy = Vector3::new(T::zero(), k.focal_y * iz, -k.focal_y * x.y * iz * iz);
        let dx_dw = -skew(&rp);
        for (dp, ri) in [(dpx, res.x), (dpy, res.y)] {
            let jw = dx_dw.transpose() * dp;
            let row = Vector6::new(jw.x, jw.y, jw.z, dp.x, dp.y, dp.z);
            jtj += row * row.transpose();
            jtr += row * ri;
        }
    }
    Some((cost, jtj, jtr))
}

fn apply_step<T: Real>(pose: &Transform<T>, step: &Vector6<T>) -> Transform<T> {
    let w = Vector3::new(step[0], step[1], step[2]);
    let dt = Vector3::new(step[3], step[4], step[5]);
    Transform::from_approximate(&(exp_so3(&w) * pose.rotation()), pose.displacement() + dt)
}

struct Refined<T: Real> {
    pose: Transform<T>,
    rms: T,
    errors: Vec<T>,
    status: RefineStatus,
}

/// Damped Gauss-Newton from `start`; `None` when no usable step exists or the
/// result is worse than `start_rms`.
fn descend<T: Real>(
    start: &Transform<T>,
    start_rms: T,
    corrs: &[Correspondence<T>],
    k: &CameraIntrinsics<T>,
) -> Option<Refined<T>> {
    let (mut cost, mut jtj, mut jtr) = linearize(start, corrs, k)?;
    if !cost.is_finite() {
        return None;
    }
    let mut pose = *start;
    let mut lambda = T::lit(LAMBDA_START);
    let mut status = RefineStatus::MaxIterations;
    for _ in 0..MAX_ITERATIONS {
        if jtr.norm() < T::lit(GRADIENT_TOL) {
            status = RefineStatus::Converged;
            break;
        }
        let mut accepted = false;
        while lambda <= T::lit(LAMBDA_MAX) {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * jtj[(i, i)].max(T::lit(1e-12));
            }
            let Some(chol) = a.cholesky() else {
                lambda *= T::lit(10.0);
                continue;
            };
            let step = -chol.solve(&jtr);
            let candidate = apply_step(&pose, &step);
            match linearize(&candidate, corrs, k) {
                Some((c, j2, r2)) if c.is_finite() && c < cost => {
                    pose = candidate;
                    cost = c;
                    jtj = j2;
                    jtr = r2;
                    lambda /= T::lit(10.0);
                    accepted = true;
                    break;
                }
                _ => lambda *= T::lit(10.0),
            }
        }
        if !accepted {
            status = if jtr.norm() < T::lit(GRADIENT_TOL) {
                RefineStatus::Converged
            } else {
                RefineStatus::Stalled
            };
            break;
        }
    }
    let errors = reprojection_errors(&pose, corrs, k)?;
    let rms = rms(&errors);
    (rms <= start_rms).then_some(Refined {
        pose,
        rms,
        errors,
        status,
    })
}

/// Minimizes the summed squared reprojection error starting from `initial.pose`,
/// and from the alternate pose when there is one. The lower refined minimum wins
/// and the other is kept as the alternate. The result never has a larger rms than
/// the initial solution.
pub fn refine_pose<T: Real>(
    initial: &PoseSolution<T>,
    corrs: &[Correspondence<T>],
    k: &CameraIntrinsics<T>,
) -> PoseSolution<T> {
    let main = descend(&initial.pose, initial.reprojection_rms, corrs, k);
    let alt = initial
        .alternate
        .and_then(|a| descend(&a.pose, a.reprojection_rms, corrs, k));
    let Some(main) = main else {
        return PoseSolution {
            refinement: Some(RefineStatus::Diverged),
            ..initial.clone()
        };
    };
    let as_solution = |best: Refined<T>, other: Option<AlternatePose<T>>| PoseSolution {
        pose: best.pose,
        reprojection_rms: best.rms,
        per_point_errors: best.errors,
        alternate: other,
        refinement: Some(best.status),
    };
    match alt {
        Some(alt) if alt.rms < main.rms => {
            let other = AlternatePose {
                pose: main.pose,
                reprojection_rms: main.rms,
            };
            as_solution(alt, Some(other))
        }
        Some(alt) => {
            let other = AlternatePose {
                pose: alt.pose,
                reprojection_rms: alt.rms,
            };
            as_solution(main, Some(other))
        }
        None => as_solution(main, initial.alternate),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_error;
    use crate::pose::ippe_pose;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn camera() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0, 1280, 720).unwrap()
    }

    fn eight_led_square(s: f64) -> Vec<Vector2<f64>> {
        let h = s / 2.0;
        vec![
            Vector2::new(-h, -h),
            Vector2::new(0.0, -h),
            Vector2::new(h, -h),
            Vector2::new(h, 0.0),
            Vector2::new(h, h),
            Vector2::new(0.0, h),
            Vector2::new(-h, h),
            Vector2::new(-h, 0.0),
        ]
    }

    fn observe(pose: &Transform<f64>, obj: &[Vector2<f64>], noise: f64, seed: u64) -> Vec<Correspondence<f64>> {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
        obj.iter()
            .map(|o| {
                let x = pose.transform_point(&Vector3::new(o.x, o.y, 0.0));
                let mut p = k.project(&x).unwrap();
                if noise > 0.0 {
                    p += Vector2::new(n.sample(&mut rng), n.sample(&mut rng));
                }
                Correspondence::new(*o, p)
            })
            .collect()
    }

    fn truth() -> Transform<f64> {
        Transform::from_rotation_vector(&Vector3::new(0.2, -0.3, 0.1), Vector3::new(0.05, -0.02, 1.5))
    }

    #[test]
    fn noiseless_solution_is_kept() {
        let k = camera();
        let corrs = observe(&truth(), &eight_led_square(0.09), 0.0, 0);
        let sol = ippe_pose(&corrs, &k).unwrap();
        let refined = refine_pose(&sol, &corrs, &k);
        let change = pose_error(&refined.pose, &sol.pose);
        assert!(change.translation_norm < 1e-9, "{change:?}");
        assert!(change.orientation_error_deg.to_radians() < 1e-9, "{change:?}");
    }

    #[test]
    fn converges_from_perturbed_start() {
        let k = camera();
        let corrs = observe(&truth(), &eight_led_square(0.09), 0.0, 0);
        let perturbation = Transform::from_axis_angle(
            &Vector3::new(1.0, 1.0, 0.0).normalize(),
            1f64.to_radians(),
            Vector3::new(0.01, 0.0, 0.0),
        );
        let start = perturbation.compose(&truth());
        let errors = reprojection_errors(&start, &corrs, &k).unwrap();
        let initial = PoseSolution {
            pose: start,
            reprojection_rms: rms(&errors),
            per_point_errors: errors,
            alternate: None,
            refinement: None,
        };
        let refined = refine_pose(&initial, &corrs, &k);
        let err = pose_error(&refined.pose, &truth());
        assert!(err.translation_norm < 1e-8, "{err:?}");
        assert!(err.orientation_error_deg.to_radians() < 1e-8, "{err:?}");
        assert_eq!(refined.refinement, Some(RefineStatus::Converged));
    }

    #[test]
    fn noisy_refinement_never_worsens_rms() {
        let k = camera();
        for seed in 0..50 {
            let corrs = observe(&truth(), &eight_led_square(0.09), 0.2, seed);
            let sol = ippe_pose(&corrs, &k).unwrap();
            let refined = refine_pose(&sol, &corrs, &k);
            assert!(refined.reprojection_rms <= sol.reprojection_rms, "seed {seed}");
        }
    }

    #[test]
    fn better_alternate_wins() {
        let k = camera();
        let corrs = observe(&truth(), &eight_led_square(0.09), 0.0, 0);
        let sol = ippe_pose(&corrs, &k).unwrap();
        let alt = sol.alternate.expect("tilted square has two candidates");
        let errors = reprojection_errors(&alt.pose, &corrs, &k).unwrap();
        let swapped = PoseSolution {
            pose: alt.pose,
            reprojection_rms: alt.reprojection_rms,
            per_point_errors: errors,
            alternate: Some(AlternatePose {
                pose: sol.pose,
                reprojection_rms: sol.reprojection_rms,
            }),
            refinement: None,
        };
        let refined = refine_pose(&swapped, &corrs, &k);
        let err = pose_error(&refined.pose, &truth());
        assert!(err.translation_norm < 1e-8, "{err:?}");
        assert!(err.orientation_error_deg.to_radians() < 1e-8, "{err:?}");
        assert!(refined.alternate.unwrap().reprojection_rms >= refined.reprojection_rms);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let k = camera();
        let corrs = observe(&truth(), &eight_led_square(0.2), 0.5, 3);
        let pose = truth();
        let (c0, _, g) = linearize(&pose, &corrs, &k).unwrap();
        let h = 1e-7;
        for i in 0..6 {
            let mut s = Vector6::zeros();
            s[i] = h;
            let (cp, _, _) = linearize(&apply_step(&pose, &s), &corrs, &k).unwrap();
            s[i] = -h;
            let (cm, _, _) = linearize(&apply_step(&pose, &s), &corrs, &k).unwrap();
            // cost = Σr², so ∂cost = 2 Jᵀr
            let fd = (cp - cm) / (2.0 * h);
            assert!(
                (fd - 2.0 * g[i]).abs() < 1e-4 * (1.0 + fd.abs()),
                "param {i}: {fd} vs {} (cost {c0})",
                2.0 * g[i]
            );
        }
    }
}
