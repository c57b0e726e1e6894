//! Accuracy of a pose log against ground truth.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::PoseLog;
use crate::error::{Error, Result};
use crate::geometry::{pose_error, Transform};

/// Ground-truth samples per marker id, sorted by time.
pub type GroundTruth = BTreeMap<String, Vec<(u64, Transform)>>;

/// Pose at `t` by geodesic interpolation between the bracketing samples.
pub fn interpolate_ground_truth(samples: &[(u64, Transform)], t: u64) -> Option<Transform> {
    let idx = samples.partition_point(|(ts, _)| *ts < t);
    if idx < samples.len() && samples[idx].0 == t {
        return Some(samples[idx].1);
    }
    if idx == 0 || idx == samples.len() {
        return None;
    }
    let (t0, a) = &samples[idx - 1];
    let (t1, b) = &samples[idx];
    let s = (t - t0) as f64 / (t1 - t0) as f64;
    Some(a.interpolate(b, s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSample {
    pub t_us: u64,
    pub marker_id: String,
    /// Ground-truth minus estimated displacement, meters.
    pub translation_error: Vector3<f64>,
    pub translation_norm: f64,
    pub orientation_error_deg: f64,
    /// ‖e_t‖ / ‖d_gt‖.
    pub relative_error: f64,
    /// ‖d_gt‖ / max ‖d_gt‖ over the report.
    pub normalized_distance: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self::default();
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.clone().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let max = values.fold(f64::NEG_INFINITY, f64::max);
        Self {
            mean,
            std: var.sqrt(),
            max,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub samples: Vec<MetricSample>,
    /// Records flagged lost; they carry no usable pose and are not scored.
    pub lost_records: usize,
    pub translation: Summary,
    pub orientation_deg: Summary,
    pub relative: Summary,
}

/// Scores every non-lost record against ground truth interpolated at its time.
pub fn compute_metrics(log: &PoseLog, gt: &GroundTruth) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    let mut gt_dist = Vec::new();
    for r in &log.records {
        if r.lost {
            report.lost_records += 1;
            continue;
        }
        let truth = gt
            .get(&r.marker_id)
            .and_then(|s| interpolate_ground_truth(s, r.t_us))
            .ok_or_else(|| Error::GroundTruthCoverage {
                marker: r.marker_id.clone(),
                t: r.t_us,
            })?;
        let e = pose_error(&r.pose, &truth);
        let d = truth.displacement().norm();
        gt_dist.push(d);
        report.samples.push(MetricSample {
            t_us: r.t_us,
            marker_id: r.marker_id.clone(),
            translation_error: e.translation_error,
            translation_norm: e.translation_norm,
            orientation_error_deg: e.orientation_error_deg,
            relative_error: e.translation_norm / d,
            normalized_distance: 0.0,
        });
    }
    let max_d = gt_dist.iter().copied().fold(0.0, f64::max);
    for (s, d) in report.samples.iter_mut().zip(&gt_dist) {
        s.normalized_distance = if max_d > 0.0 { d / max_d } else { 0.0 };
    }
    report.translation = Summary::of(report.samples.iter().map(|s| s.translation_norm));
    report.orientation_deg = Summary::of(report.samples.iter().map(|s| s.orientation_error_deg));
    report.relative = Summary::of(report.samples.iter().map(|s| s.relative_error));
    Ok(report)
}
