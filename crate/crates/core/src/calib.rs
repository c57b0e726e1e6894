//! Hand-eye style calibration of the hidden rig transforms: camera body → optical
//! centre and marker body → marker, from synchronized tracking-system and camera
//! measurements.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, skew, Transform};
use crate::scalar::Real;

/// Weight of the orientation term.
pub const DEFAULT_WEIGHT: f64 = 0.1;

const MAX_ITERATIONS: usize = 200;
const COST_DECREASE_TOL: f64 = 1e-12;
const STEP_TOL: f64 = 1e-10;
const OBSERVABILITY_RATIO: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct CalibMeasurement<T: Real = f64> {
    pub t_us: u64,
    /// Camera body in the tracking-system world frame.
    pub world_camera_body: Transform<T>,
    /// Marker body `i` in the world frame.
    pub world_marker_body: Vec<Transform<T>>,
    /// Marker `i` in the camera frame, as estimated by the pose solver.
    pub camera_marker: Vec<Transform<T>>,
}

impl<T: Real> CalibMeasurement<T> {
    pub fn marker_count(&self) -> usize {
        self.camera_marker.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalibStatus {
    Converged,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibSolution<T: Real = f64> {
    pub camera_body_to_camera: Transform<T>,
    pub marker_body_to_marker: Vec<Transform<T>>,
    pub final_cost: T,
    pub iterations: usize,
    pub status: CalibStatus,
    /// Set when the data cannot pin down all 6 + 6·markers parameters.
    pub unobservable: bool,
}

impl<T: Real> CalibSolution<T> {
    pub fn identity(markers: usize) -> Self {
        Self {
            camera_body_to_camera: Transform::identity(),
            marker_body_to_marker: vec![Transform::identity(); markers],
            final_cost: T::zero(),
            iterations: 0,
            status: CalibStatus::Converged,
            unobservable: false,
        }
    }

    pub fn from_transforms(camera_body_to_camera: Transform<T>, marker_body_to_marker: Vec<Transform<T>>) -> Self {
        Self {
            camera_body_to_camera,
            marker_body_to_marker,
            ..Self::identity(0)
        }
    }
}

/// (W_Mb · Mb_M)⁻¹ · (W_Cb · Cb_C · C_M): identity when the chain closes.
pub fn residual_transform<T: Real>(m: &CalibMeasurement<T>, sol: &CalibSolution<T>, i: usize) -> Transform<T> {
    let via_camera = m
        .world_camera_body
        .compose(&sol.camera_body_to_camera)
        .compose(&m.camera_marker[i]);
    let via_marker = m.world_marker_body[i].compose(&sol.marker_body_to_marker[i]);
    via_marker.inverse().compose(&via_camera)
}

fn frobenius_from_identity<T: Real>(r: &Matrix3<T>) -> T {
    (Matrix3::identity() - r).norm()
}

/// Σ over measurements and markers of (‖d̃‖ + w‖I − R̃‖_F)².
pub fn calibration_cost<T: Real>(sol: &CalibSolution<T>, data: &[CalibMeasurement<T>], w: T) -> Result<T> {
    validate(sol, data, w)?;
    Ok(data.iter().fold(T::zero(), |acc, m| {
        (0..m.marker_count()).fold(acc, |acc, i| {
            let h = residual_transform(m, sol, i);
            let r = h.displacement().norm() + w * frobenius_from_identity(h.rotation());
            acc + r * r
        })
    }))
}

fn validate<T: Real>(sol: &CalibSolution<T>, data: &[CalibMeasurement<T>], w: T) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    if !(w > T::zero()) {
        return Err(Error::Config("calibration weight must be positive".into()));
    }
    let markers = sol.marker_body_to_marker.len();
    for m in data {
        if m.camera_marker.len() != markers || m.world_marker_body.len() != markers {
            return Err(Error::Config(format!(
                "measurement at t={} has {} camera / {} world marker poses, expected {markers}",
                m.t_us,
                m.camera_marker.len(),
                m.world_marker_body.len()
            )));
        }
    }
    Ok(())
}

/// Residual transform of one term and its first-order variation along each of the
/// 12 local parameters (camera hidden transform, then marker hidden transform).
/// Each parameter perturbs R ← exp(ω)R, d ← d + δ.
struct TermLinearization<T: Real> {
    d: Vector3<T>,
    r: Matrix3<T>,
    dd: [Vector3<T>; 12],
    dr: [Matrix3<T>; 12],
}

fn linearize_term<T: Real>(m: &CalibMeasurement<T>, sol: &CalibSolution<T>, i: usize) -> TermLinearization<T> {
    let wc = &m.world_camera_body;
    let ch = &sol.camera_body_to_camera;
    let cm = &m.camera_marker[i];
    let wm = &m.world_marker_body[i];
    let mh = &sol.marker_body_to_marker[i];
    let p = wc.compose(ch).compose(cm);
    let q = wm.compose(mh);
    let rq_t = q.rotation().transpose();
    let r = rq_t * p.rotation();
    let gap = p.displacement() - q.displacement();
    let d = rq_t * gap;

    let mut dd = [Vector3::zeros(); 12];
    let mut dr = [Matrix3::zeros(); 12];
    let ch_dcm = ch.rotation() * cm.displacement();
    let mh_t = mh.rotation().transpose();
    let gap_m = wm.rotation().transpose() * gap;
    for j in 0..3 {
        let e = Vector3::ith(j, T::one());
        let ex = skew(&e);
        // camera hidden transform
        dr[j] = rq_t * wc.rotation() * ex * ch.rotation() * cm.rotation();
        dd[j] = rq_t * wc.rotation() * (ex * ch_dcm);
        dd[3 + j] = rq_t * wc.rotation() * e;
        // marker hidden transform
        dr[6 + j] = -(mh_t * ex * wm.rotation().transpose() * p.rotation());
        dd[6 + j] = -(mh_t * (ex * gap_m));
        dd[9 + j] = -(rq_t * wm.rotation() * e);
    }
    TermLinearization { d, r, dd, dr }
}

/// Global parameter column of local parameter `j` for marker `i`.
fn column(i: usize, j: usize) -> usize {
    if j < 6 {
        j
    } else {
        6 + 6 * i + (j - 6)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Residuals {
    /// Scalar ‖d̃‖ + w‖I − R̃‖_F per term: the objective as stated.
    Stated,
    /// [d̃; w·vec(R̃ − I)] per term: smooth, same zero set; used to get close first.
    Stacked,
}

/// Returns (Σ residual², JᵀJ, Jᵀr).
fn normal_equations<T: Real>(
    sol: &CalibSolution<T>,
    data: &[CalibMeasurement<T>],
    w: T,
    kind: Residuals,
) -> (T, DMatrix<T>, DVector<T>) {
    let n = 6 + 6 * sol.marker_body_to_marker.len();
    let mut jtj = DMatrix::zeros(n, n);
    let mut jtr = DVector::zeros(n);
    let mut cost = T::zero();
    let tiny = T::lit(1e-300_f64.max(f64::MIN_POSITIVE));
    let mut add_row = |row: &[(usize, T)], res: T, cost: &mut T| {
        *cost += res * res;
        for &(a, va) in row {
            jtr[a] += va * res;
            for &(b, vb) in row {
                jtj[(a, b)] += va * vb;
            }
        }
    };
    for m in data {
        for i in 0..m.marker_count() {
            let lin = linearize_term(m, sol, i);
            match kind {
                Residuals::Stated => {
                    let dn = lin.d.norm();
                    let e = Matrix3::identity() - lin.r;
                    let en = e.norm();
                    let row: Vec<(usize, T)> = (0..12)
                        .map(|j| {
                            let mut g = T::zero();
                            if dn > tiny {
                                g += lin.d.dot(&lin.dd[j]) / dn;
                            }
                            if en > tiny {
                                g -= w * e.dot(&lin.dr[j]) / en;
                            }
                            (column(i, j), g)
                        })
                        .collect();
                    add_row(&row, dn + w * en, &mut cost);
                }
                Residuals::Stacked => {
                    for a in 0..3 {
                        let row: Vec<(usize, T)> = (0..12).map(|j| (column(i, j), lin.dd[j][a])).collect();
                        add_row(&row, lin.d[a], &mut cost);
                    }
                    for a in 0..9 {
                        let row: Vec<(usize, T)> = (0..12).map(|j| (column(i, j), w * lin.dr[j][a])).collect();
                        add_row(
                            &row,
                            w * (lin.r[a] - if a % 4 == 0 { T::one() } else { T::zero() }),
                            &mut cost,
                        );
                    }
                }
            }
        }
    }
    (cost, jtj, jtr)
}

fn apply_step<T: Real>(sol: &CalibSolution<T>, step: &DVector<T>) -> CalibSolution<T> {
    let update = |t: &Transform<T>, o: usize| {
        let w = Vector3::new(step[o], step[o + 1], step[o + 2]);
        let dt = Vector3::new(step[o + 3], step[o + 4], step[o + 5]);
        Transform::from_approximate(&(exp_so3(&w) * t.rotation()), t.displacement() + dt)
    };
    CalibSolution {
        camera_body_to_camera: update(&sol.camera_body_to_camera, 0),
        marker_body_to_marker: sol
            .marker_body_to_marker
            .iter()
            .enumerate()
            .map(|(i, t)| update(t, 6 + 6 * i))
            .collect(),
        ..sol.clone()
    }
}

/// Damped Gauss–Newton; returns the solution, its residual sum and the iteration count.
fn levenberg_marquardt<T: Real>(
    start: CalibSolution<T>,
    data: &[CalibMeasurement<T>],
    w: T,
    kind: Residuals,
) -> (CalibSolution<T>, usize, bool) {
    let mut sol = start;
    let (mut cost, mut jtj, mut jtr) = normal_equations(&sol, data, w, kind);
    let mut lambda = T::lit(1e-3);
    let n = jtr.len();
    for iter in 0..MAX_ITERATIONS {
        if cost == T::zero() {
            return (sol, iter, true);
        }
        let mut accepted = None;
        while lambda <= T::lit(1e12) {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += lambda * jtj[(k, k)].max(T::lit(1e-12));
            }
            let Some(chol) = a.cholesky() else {
                lambda *= T::lit(10.0);
                continue;
            };
            let step = -chol.solve(&jtr);
            let candidate = apply_step(&sol, &step);
            let (c, j2, r2) = normal_equations(&candidate, data, w, kind);
            if c.is_finite() && c < cost {
                accepted = Some((candidate, c, j2, r2, step.norm()));
                lambda /= T::lit(10.0);
                break;
            }
            lambda *= T::lit(10.0);
        }
        let Some((candidate, c, j2, r2, step_norm)) = accepted else {
            // no descent direction left
            return (sol, iter, true);
        };
        let decrease = cost - c;
        sol = candidate;
        cost = c;
        jtj = j2;
        jtr = r2;
        if decrease < T::lit(COST_DECREASE_TOL) || step_norm < T::lit(STEP_TOL) {
            return (sol, iter + 1, true);
        }
    }
    (sol, MAX_ITERATIONS, false)
}

/// Smallest/largest eigenvalue ratio of the stacked-residual normal matrix.
fn observability<T: Real>(sol: &CalibSolution<T>, data: &[CalibMeasurement<T>], w: T) -> T {
    let (_, jtj, _) = normal_equations(sol, data, w, Residuals::Stacked);
    let eig = jtj.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if max > T::zero() {
        min / max
    } else {
        T::zero()
    }
}

/// Minimizes [`calibration_cost`] over the hidden transforms, starting from `init`
/// (identity when `None`). The smooth stacked residual is solved first, then the
/// stated objective is polished from there.
pub fn solve_hidden_transforms<T: Real>(
    data: &[CalibMeasurement<T>],
    w: T,
    init: Option<CalibSolution<T>>,
) -> Result<CalibSolution<T>> {
    let markers = data.first().map(|m| m.marker_count()).ok_or(Error::EmptyData)?;
    let start = init.unwrap_or_else(|| CalibSolution::identity(markers));
    validate(&start, data, w)?;

    let (warm, it1, ok1) = levenberg_marquardt(start, data, w, Residuals::Stacked);
    let (mut sol, it2, ok2) = levenberg_marquardt(warm, data, w, Residuals::Stated);
    sol.final_cost = calibration_cost(&sol, data, w)?;
    sol.iterations = it1 + it2;
    sol.status = if ok1 && ok2 {
        CalibStatus::Converged
    } else {
        CalibStatus::MaxIterations
    };
    let distinct_views = data
        .iter()
        .skip(1)
        .any(|m| pose_differs(&m.world_camera_body, &data[0].world_camera_body));
    sol.unobservable = data.len() < 3 || !distinct_views || observability(&sol, data, w) < T::lit(OBSERVABILITY_RATIO);
    Ok(sol)
}

fn pose_differs<T: Real>(a: &Transform<T>, b: &Transform<T>) -> bool {
    let rel = a.inverse().compose(b);
    rel.angle() > T::lit(1e-9) || rel.displacement().norm() > T::lit(1e-9)
}

/// Analytic gradient of [`calibration_cost`] in the local (ω, δ) parameters, ordered
/// camera hidden transform first, then each marker's.
pub fn calibration_gradient<T: Real>(sol: &CalibSolution<T>, data: &[CalibMeasurement<T>], w: T) -> Result<DVector<T>> {
    validate(sol, data, w)?;
    let (_, _, jtr) = normal_equations(sol, data, w, Residuals::Stated);
    Ok(jtr * T::lit(2.0))
}

/// Local perturbation used by [`calibration_gradient`]; exposed for checking it.
pub fn perturb<T: Real>(sol: &CalibSolution<T>, step: &DVector<T>) -> CalibSolution<T> {
    apply_step(sol, step)
}

/// Noise applied to the simulated camera-side marker poses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticNoise {
    pub displacement_m: f64,
    pub rotation_rad: f64,
}

impl SyntheticNoise {
    pub const NONE: Self = Self {
        displacement_m: 0.0,
        rotation_rad: 0.0,
    };
}

fn random_rotation_vector(rng: &mut ChaCha8Rng, max_angle: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n * rng.random_range(0.0..max_angle);
        }
    }
}

/// Random rig with hidden transforms and `count` measurements of `markers` markers,
/// each seen by the camera at 1–4 m. Returns the data and the true hidden transforms.
pub fn synthetic_dataset(
    count: usize,
    markers: usize,
    noise: SyntheticNoise,
    seed: u64,
) -> (Vec<CalibMeasurement<f64>>, CalibSolution<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = |rng: &mut ChaCha8Rng| {
        Transform::from_rotation_vector(
            &random_rotation_vector(rng, 0.3),
            Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ),
        )
    };
    let ch = hidden(&mut rng);
    let mh: Vec<_> = (0..markers).map(|_| hidden(&mut rng)).collect();
    let nd = Normal::new(0.0, noise.displacement_m.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let nr = Normal::new(0.0, noise.rotation_rad.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let data = (0..count)
        .map(|k| {
            let wc = Transform::from_rotation_vector(
                &random_rotation_vector(&mut rng, std::f64::consts::PI),
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.5..2.5),
                ),
            );
            let mut camera_marker = Vec::with_capacity(markers);
            let mut world_marker_body = Vec::with_capacity(markers);
            for h in &mh {
                let cm = Transform::from_rotation_vector(
                    &random_rotation_vector(&mut rng, 0.8),
                    Vector3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(1.0..4.0),
                    ),
                );
                world_marker_body.push(wc.compose(&ch).compose(&cm).compose(&h.inverse()));
                let measured = if noise.displacement_m > 0.0 || noise.rotation_rad > 0.0 {
                    let dw = if noise.rotation_rad > 0.0 {
                        Vector3::new(nr.sample(&mut rng), nr.sample(&mut rng), nr.sample(&mut rng))
                    } else {
                        Vector3::zeros()
                    };
                    let dd = if noise.displacement_m > 0.0 {
                        Vector3::new(nd.sample(&mut rng), nd.sample(&mut rng), nd.sample(&mut rng))
                    } else {
                        Vector3::zeros()
                    };
                    Transform::from_approximate(&(exp_so3(&dw) * cm.rotation()), cm.displacement() + dd)
                } else {
                    cm
                };
                camera_marker.push(measured);
            }
            CalibMeasurement {
                t_us: k as u64 * 10_000,
                world_camera_body: wc,
                world_marker_body,
                camera_marker,
            }
        })
        .collect();
    (data, CalibSolution::from_transforms(ch, mh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_error;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn single(camera_marker: Transform) -> CalibMeasurement {
        CalibMeasurement {
            t_us: 0,
            world_camera_body: Transform::identity(),
            world_marker_body: vec![Transform::identity()],
            camera_marker: vec![camera_marker],
        }
    }

    #[test]
    fn closed_chain_has_identity_residual() {
        let (data, truth) = synthetic_dataset(20, 2, SyntheticNoise::NONE, 7);
        for m in &data {
            for i in 0..2 {
                let h = residual_transform(m, &truth, i);
                assert!(h.displacement().norm() < 1e-12);
                assert!(h.angle() < 1e-12);
            }
        }
        assert!(calibration_cost(&truth, &data, DEFAULT_WEIGHT).unwrap() < 1e-24);
    }

    #[test]
    fn camera_offset_propagates_to_residual() {
        let m = single(Transform::identity());
        let sol = CalibSolution::from_transforms(
            Transform::from_translation(Vector3::new(0.01, 0.0, 0.0)),
            vec![Transform::identity()],
        );
        assert_relative_eq!(
            residual_transform(&m, &sol, 0).displacement().norm(),
            0.01,
            epsilon = 1e-15
        );
    }

    #[test]
    fn cost_arithmetic() {
        let sol = CalibSolution::identity(1);
        let shifted = single(Transform::from_translation(Vector3::new(0.1, 0.0, 0.0)));
        assert_relative_eq!(calibration_cost(&sol, &[shifted], 0.1).unwrap(), 0.01, epsilon = 1e-15);
        let turned = single(Transform::from_axis_angle(
            &Vector3::z(),
            std::f64::consts::FRAC_PI_2,
            Vector3::zeros(),
        ));
        assert_relative_eq!(calibration_cost(&sol, &[turned], 0.1).unwrap(), 0.04, epsilon = 1e-12);
        assert_eq!(
            calibration_cost(&sol, &[single(Transform::identity())], 0.1).unwrap(),
            0.0
        );
        assert!(matches!(calibration_cost(&sol, &[], 0.1), Err(Error::EmptyData)));
    }

    #[test]
    fn identity_rig_stays_at_zero() {
        let (data, _) = synthetic_dataset(10, 1, SyntheticNoise::NONE, 1);
        // rebuild the data for identity hidden transforms
        let data: Vec<_> = data
            .into_iter()
            .map(|mut m| {
                m.world_marker_body = vec![m.world_camera_body.compose(&m.camera_marker[0])];
                m
            })
            .collect();
        let sol = solve_hidden_transforms(&data, 0.1, Some(CalibSolution::identity(1))).unwrap();
        assert!(sol.final_cost < 1e-24);
        let e = pose_error(&sol.camera_body_to_camera, &Transform::identity());
        assert!(e.translation_norm < 1e-12 && e.orientation_error_deg < 1e-10, "{e:?}");
    }

    #[test]
    fn recovers_noiseless_hidden_transforms() {
        let (data, truth) = synthetic_dataset(50, 2, SyntheticNoise::NONE, 42);
        let sol = solve_hidden_transforms(&data, DEFAULT_WEIGHT, None).unwrap();
        assert_eq!(sol.status, CalibStatus::Converged);
        assert!(!sol.unobservable);
        let e = pose_error(&sol.camera_body_to_camera, &truth.camera_body_to_camera);
        assert!(e.translation_norm < 1e-6 && e.orientation_error_deg < 1e-5, "{e:?}");
        for (a, b) in sol.marker_body_to_marker.iter().zip(&truth.marker_body_to_marker) {
            let e = pose_error(a, b);
            assert!(e.translation_norm < 1e-6 && e.orientation_error_deg < 1e-5, "{e:?}");
        }
    }

    #[test]
    fn flags_single_view_as_unobservable() {
        let (data, _) = synthetic_dataset(1, 1, SyntheticNoise::NONE, 3);
        let sol = solve_hidden_transforms(&data, DEFAULT_WEIGHT, None).unwrap();
        assert!(sol.unobservable);
    }

    #[test]
    fn reordering_does_not_move_the_minimum() {
        let noise = SyntheticNoise {
            displacement_m: 1e-3,
            rotation_rad: 1e-3,
        };
        let (mut data, _) = synthetic_dataset(30, 1, noise, 5);
        let a = solve_hidden_transforms(&data, DEFAULT_WEIGHT, None).unwrap();
        data.reverse();
        let b = solve_hidden_transforms(&data, DEFAULT_WEIGHT, None).unwrap();
        let e = pose_error(&a.camera_body_to_camera, &b.camera_body_to_camera);
        assert!(e.translation_norm < 1e-7 && e.orientation_error_deg < 1e-5, "{e:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradient_matches_central_differences(seed in 0u64..1000, markers in 1usize..3) {
            let noise = SyntheticNoise { displacement_m: 0.01, rotation_rad: 0.02 };
            let (data, truth) = synthetic_dataset(6, markers, noise, seed);
            // evaluate away from the optimum so every norm is well away from zero
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
            let n = 6 + 6 * markers;
            let offset = DVector::from_fn(n, |_, _| rand::Rng::random_range(&mut rng, -0.05..0.05));
            let sol = perturb(&truth, &offset);
            let g = calibration_gradient(&sol, &data, DEFAULT_WEIGHT).unwrap();
            let h = 1e-6;
            for j in 0..n {
                let mut s = DVector::zeros(n);
                s[j] = h;
                let cp = calibration_cost(&perturb(&sol, &s), &data, DEFAULT_WEIGHT).unwrap();
                s[j] = -h;
                let cm = calibration_cost(&perturb(&sol, &s), &data, DEFAULT_WEIGHT).unwrap();
                let fd = (cp - cm) / (2.0 * h);
                prop_assert!((fd - g[j]).abs() <= 1e-5 * g.amax().max(1e-8), "param {}: fd {} vs {}", j, fd, g[j]);
            }
        }

        #[test]
        fn cost_is_non_negative_and_zero_at_truth(seed in 0u64..1000, markers in 1usize..4, count in 1usize..10) {
            let (data, truth) = synthetic_dataset(count, markers, SyntheticNoise::NONE, seed);
            prop_assert!(calibration_cost(&truth, &data, DEFAULT_WEIGHT).unwrap() < 1e-20);
            let other = CalibSolution::identity(markers);
            prop_assert!(calibration_cost(&other, &data, DEFAULT_WEIGHT).unwrap() >= 0.0);
        }
    }
}
