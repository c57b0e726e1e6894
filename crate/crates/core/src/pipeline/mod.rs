//! Detection, tracking and pose stages wired together, with respawn on loss.
//!
//! Two schedulers share the stage code: [`run_pipeline`] steps the stages in a
//! fixed order on stream time and is bitwise reproducible; [`run_free_running`]
//! runs them on threads against a replay clock for throughput measurements.

mod concurrent;
mod metrics;
mod stepped;

pub use concurrent::{measure_throughput, run_free_running, ReplayOptions, ThroughputReport};
pub use metrics::{compute_metrics, interpolate_ground_truth, GroundTruth, MetricSample, MetricsReport, Summary};
pub use stepped::run_pipeline;

use std::collections::HashMap;

use nalgebra::Vector2;

use crate::detect::{DetectConfig, DetectedMarker};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Transform};
use crate::pose::{check_tracking_lost, ippe_pose, plane_fit, refine_pose, Correspondence, PoseSolution};
use crate::sim::{AlmConfig, Event, SimScene};
use crate::track::{AlmSnapshot, TrackConfig, TrackerState};

/// Where published poses come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    /// Poses from the per-LED trackers, solved back-to-back.
    #[default]
    Tracking,
    /// Poses straight from each detection window's LED centroids.
    Detection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseConfig {
    /// Polish IPPE with reprojection refinement.
    pub refine: bool,
    /// Stream time between solves in the stepped scheduler, standing in for the
    /// solver's run time.
    pub solve_period_us: u64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            refine: true,
            solve_period_us: 250,
        }
    }
}

/// An ALM rigidly mounted on a board; `offset` is the ALM frame in the board frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BoardMember {
    pub alm: String,
    pub offset: Transform,
}

/// ALMs that move together and are solved as one pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Board {
    pub id: String,
    pub members: Vec<BoardMember>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub intrinsics: CameraIntrinsics,
    pub alms: Vec<AlmConfig>,
    /// ALMs not listed in any board form a board of their own named after the ALM.
    pub boards: Vec<Board>,
    pub detect: DetectConfig,
    pub track: TrackConfig,
    pub pose: PoseConfig,
    pub mode: Mode,
}

impl PipelineConfig {
    pub fn new(intrinsics: CameraIntrinsics, alms: Vec<AlmConfig>) -> Self {
        Self {
            intrinsics,
            alms,
            boards: Vec::new(),
            detect: DetectConfig::default(),
            track: TrackConfig::default(),
            pose: PoseConfig::default(),
            mode: Mode::Tracking,
        }
    }

    /// One board per simulated marker, with the same ids and mounting offsets.
    pub fn from_scene(scene: &SimScene) -> Self {
        let mut cfg = Self::new(
            scene.intrinsics,
            scene
                .markers
                .iter()
                .flat_map(|m| m.alms.iter().map(|a| a.alm.clone()))
                .collect(),
        );
        cfg.boards = scene
            .markers
            .iter()
            .map(|m| Board {
                id: m.id.clone(),
                members: m
                    .alms
                    .iter()
                    .map(|a| BoardMember {
                        alm: a.alm.name.clone(),
                        offset: a.offset,
                    })
                    .collect(),
            })
            .collect();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    pub(crate) fn resolve(&self) -> Result<Registry> {
        self.intrinsics.validate()?;
        self.detect.validate()?;
        self.track.validate()?;
        if self.pose.solve_period_us == 0 {
            return Err(Error::Config("solve period must be positive".into()));
        }
        let mut by_name = HashMap::new();
        let mut periods = HashMap::new();
        for (i, alm) in self.alms.iter().enumerate() {
            alm.validate()?;
            if by_name.insert(alm.name.as_str(), i).is_some() {
                return Err(Error::Config(format!("duplicate ALM name {}", alm.name)));
            }
            for led in &alm.leds {
                if let Some(other) = periods.insert(led.period_us(), (alm.name.as_str(), led.id)) {
                    return Err(Error::Config(format!(
                        "LED {} of {} and LED {} of {} share the period {} µs",
                        other.1,
                        other.0,
                        led.id,
                        alm.name,
                        led.period_us()
                    )));
                }
            }
        }
        let mut board_of = vec![usize::MAX; self.alms.len()];
        let mut boards = Vec::new();
        for b in &self.boards {
            let mut members = Vec::with_capacity(b.members.len());
            for m in &b.members {
                let &ai = by_name
                    .get(m.alm.as_str())
                    .ok_or_else(|| Error::Config(format!("board {} references unknown ALM {}", b.id, m.alm)))?;
                if board_of[ai] != usize::MAX {
                    return Err(Error::Config(format!("ALM {} is on more than one board", m.alm)));
                }
                board_of[ai] = boards.len();
                members.push((ai, m.offset));
            }
            if members.is_empty() {
                return Err(Error::Config(format!("board {} has no members", b.id)));
            }
            boards.push(BoardGeometry::new(b.id.clone(), members, &self.alms)?);
        }
        for (ai, alm) in self.alms.iter().enumerate() {
            if board_of[ai] == usize::MAX {
                board_of[ai] = boards.len();
                boards.push(BoardGeometry::new(
                    alm.name.clone(),
                    vec![(ai, Transform::identity())],
                    &self.alms,
                )?);
            }
        }
        if boards
            .iter()
            .map(|b| &b.id)
            .collect::<std::collections::HashSet<_>>()
            .len()
            != boards.len()
        {
            return Err(Error::Config("board ids must be unique".into()));
        }
        Ok(Registry { boards, board_of })
    }
}

/// LED layout of a board in its own plane frame.
#[derive(Clone, Debug)]
pub(crate) struct BoardGeometry {
    pub id: String,
    /// Plane frame → board frame.
    frame_inv: Transform,
    /// ALM index and, per LED id, its plane coordinates.
    members: Vec<(usize, HashMap<u32, Vector2<f64>>)>,
}

impl BoardGeometry {
    fn new(id: String, members: Vec<(usize, Transform)>, alms: &[AlmConfig]) -> Result<Self> {
        let pts: Vec<_> = members
            .iter()
            .flat_map(|(ai, off)| alms[*ai].leds.iter().map(move |l| off.transform_point(&l.position)))
            .collect();
        let (frame, dev) = plane_fit(&pts);
        if dev > 1e-6 {
            return Err(Error::Config(format!("board {id} is not planar (deviation {dev} m)")));
        }
        let frame_inv = frame.inverse();
        let members = members
            .into_iter()
            .map(|(ai, off)| {
                let map = alms[ai]
                    .leds
                    .iter()
                    .map(|l| {
                        let q = frame_inv.transform_point(&off.transform_point(&l.position));
                        (l.id, Vector2::new(q.x, q.y))
                    })
                    .collect();
                (ai, map)
            })
            .collect();
        Ok(Self { id, frame_inv, members })
    }

    fn plane_point(&self, alm_index: usize, led_id: u32) -> Option<Vector2<f64>> {
        self.members
            .iter()
            .find(|(ai, _)| *ai == alm_index)
            .and_then(|(_, m)| m.get(&led_id).copied())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Registry {
    pub boards: Vec<BoardGeometry>,
    pub board_of: Vec<usize>,
}

/// Outcome of one board solve.
pub(crate) struct BoardSolve {
    pub pose: Transform,
    pub rms_px: f64,
    pub lost: bool,
}

impl Registry {
    /// Pools the trackers of every given ALM on `board` into one planar solve.
    /// Returns `None` when fewer than 4 LEDs are available.
    pub fn solve(
        &self,
        board: usize,
        groups: &[(usize, Vec<TrackerState<f64>>)],
        k: &CameraIntrinsics,
        refine: bool,
    ) -> Option<BoardSolve> {
        let geo = &self.boards[board];
        let mut corrs = Vec::new();
        let mut states = Vec::new();
        for (ai, trackers) in groups {
            for s in trackers {
                if let Some(p) = geo.plane_point(*ai, s.led_id) {
                    corrs.push(Correspondence::new(p, s.center));
                    states.push(*s);
                }
            }
        }
        if corrs.len() < 4 {
            return None;
        }
        let solution: Result<PoseSolution> =
            ippe_pose(&corrs, k).map(|s| if refine { refine_pose(&s, &corrs, k) } else { s });
        Some(match solution {
            Ok(sol) => BoardSolve {
                pose: sol.pose.compose(&geo.frame_inv),
                rms_px: sol.reprojection_rms,
                lost: check_tracking_lost(&sol, &states),
            },
            Err(_) => BoardSolve {
                pose: Transform::identity(),
                rms_px: f64::NAN,
                lost: true,
            },
        })
    }

    /// Tracker snapshot grouped by board.
    pub fn group_snapshot(&self, alms: &[AlmSnapshot<f64>]) -> Vec<(usize, Vec<(usize, Vec<TrackerState<f64>>)>)> {
        let mut out: Vec<(usize, Vec<(usize, Vec<TrackerState<f64>>)>)> = Vec::new();
        for a in alms {
            let b = self.board_of[a.alm_index];
            let entry = (a.alm_index, a.trackers.clone());
            match out.iter_mut().find(|(ob, _)| *ob == b) {
                Some((_, v)) => v.push(entry),
                None => out.push((b, vec![entry])),
            }
        }
        out.sort_by_key(|(b, _)| *b);
        out
    }

    /// Detections of one window grouped by board, as tracker-like states whose
    /// radius is the seed's blob radius.
    pub fn group_detections(&self, found: &[DetectedMarker]) -> Vec<(usize, Vec<(usize, Vec<TrackerState<f64>>)>)> {
        let alms: Vec<AlmSnapshot<f64>> = found
            .iter()
            .map(|m| AlmSnapshot {
                alm_index: m.alm_index,
                generation: 0,
                trackers: m
                    .seeds
                    .iter()
                    .map(|s| TrackerState {
                        led_id: s.led_id,
                        center: s.centroid,
                        radius: s.radius,
                        starved: false,
                    })
                    .collect(),
            })
            .collect();
        self.group_snapshot(&alms)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseRecord {
    pub t_us: u64,
    pub marker_id: String,
    /// Board frame in camera frame.
    pub pose: Transform,
    pub rms_px: f64,
    pub lost: bool,
    /// Wall-clock time from the injection of the newest consumed event to the
    /// pose being available (free-running mode only).
    pub latency_us: Option<f64>,
    /// Wall-clock availability since replay start (free-running mode only).
    pub wall_us: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseLog {
    pub records: Vec<PoseRecord>,
}

impl PoseLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn for_marker<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a PoseRecord> + 'a {
        self.records.iter().filter(move |r| r.marker_id == id)
    }
}

pub(crate) fn check_sorted(events: &[Event]) -> Result<()> {
    match events.windows(2).find(|w| w[1].t < w[0].t) {
        Some(w) => Err(Error::UnsortedStream {
            t: w[1].t,
            previous: w[0].t,
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::LedSpec;
    use nalgebra::Vector3;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0, 1280, 720).unwrap()
    }

    fn alm(name: &str, first_period: u32) -> AlmConfig {
        let p: Vec<u32> = (0..8).map(|i| first_period + i).collect();
        AlmConfig::square_eight(name, 0.09, p.try_into().unwrap())
    }

    #[test]
    fn unknown_alm_is_rejected() {
        let mut cfg = PipelineConfig::new(camera(), vec![alm("a", 50)]);
        cfg.boards.push(Board {
            id: "b".into(),
            members: vec![BoardMember {
                alm: "nope".into(),
                offset: Transform::identity(),
            }],
        });
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn shared_periods_are_rejected() {
        let cfg = PipelineConfig::new(camera(), vec![alm("a", 50), alm("b", 55)]);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = PipelineConfig::new(camera(), vec![alm("a", 50), alm("b", 58)]);
        cfg.validate().unwrap();
    }

    #[test]
    fn loose_alms_become_singleton_boards() {
        let mut cfg = PipelineConfig::new(camera(), vec![alm("a", 50), alm("b", 58), alm("c", 66)]);
        cfg.boards.push(Board {
            id: "pair".into(),
            members: vec![
                BoardMember {
                    alm: "a".into(),
                    offset: Transform::from_translation(Vector3::new(-0.2, 0.0, 0.0)),
                },
                BoardMember {
                    alm: "c".into(),
                    offset: Transform::from_translation(Vector3::new(0.2, 0.0, 0.0)),
                },
            ],
        });
        let reg = cfg.resolve().unwrap();
        let ids: Vec<_> = reg.boards.iter().map(|b| b.id.as_str()).collect();
        assert_eq!(ids, ["pair", "b"]);
        assert_eq!(reg.board_of, [0, 1, 0]);
    }

    #[test]
    fn non_planar_board_is_rejected() {
        let mut cfg = PipelineConfig::new(camera(), vec![alm("a", 50), alm("b", 58)]);
        cfg.boards.push(Board {
            id: "bent".into(),
            members: vec![
                BoardMember {
                    alm: "a".into(),
                    offset: Transform::identity(),
                },
                BoardMember {
                    alm: "b".into(),
                    offset: Transform::from_axis_angle(&Vector3::y(), 0.5, Vector3::new(0.3, 0.0, 0.0)),
                },
            ],
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn board_solve_pools_member_alms() {
        let k = camera();
        let a = alm("a", 50);
        let b = alm("b", 58);
        let offsets = [
            Transform::from_translation(Vector3::new(-0.25, 0.0, 0.0)),
            Transform::from_translation(Vector3::new(0.25, 0.0, 0.0)),
        ];
        let mut cfg = PipelineConfig::new(k, vec![a.clone(), b.clone()]);
        cfg.boards.push(Board {
            id: "board".into(),
            members: vec![
                BoardMember {
                    alm: "a".into(),
                    offset: offsets[0],
                },
                BoardMember {
                    alm: "b".into(),
                    offset: offsets[1],
                },
            ],
        });
        let reg = cfg.resolve().unwrap();
        let truth = Transform::from_axis_angle(&Vector3::x(), 0.4, Vector3::new(0.1, 0.0, 3.0));
        let groups: Vec<_> = [&a, &b]
            .iter()
            .enumerate()
            .map(|(ai, alm)| {
                let states = alm
                    .leds
                    .iter()
                    .map(|l: &LedSpec| {
                        let x = truth.compose(&offsets[ai]).transform_point(&l.position);
                        TrackerState {
                            led_id: l.id,
                            center: k.project(&x).unwrap(),
                            radius: 2.0,
                            starved: false,
                        }
                    })
                    .collect();
                (ai, states)
            })
            .collect();
        let s = reg.solve(0, &groups, &k, true).unwrap();
        let err = crate::geometry::pose_error(&s.pose, &truth);
        assert!(
            err.translation_norm < 1e-9 && err.orientation_error_deg < 1e-7,
            "{err:?}"
        );
        assert!(!s.lost);
        // a single member is enough on its own
        let s = reg.solve(0, &groups[1..], &k, true).unwrap();
        assert!(crate::geometry::pose_error(&s.pose, &truth).translation_norm < 1e-8);
    }
}
