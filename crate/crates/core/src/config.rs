//! TOML configuration shared by the simulator and the pipeline.
//!
//! One file can describe both: `[[markers]]` (with keyframes) drive the
//! simulator, and double as pipeline boards when no `[[boards]]` are given.
//!
//! ```toml
//! duration_us = 1000000
//! [intrinsics]
//! fx = 1000.0
//! fy = 1000.0
//! cx = 640.0
//! cy = 360.0
//! width = 1280
//! height = 720
//!
//! [[alms]]
//! name = "alm0"
//! square_side = 0.09
//! periods_us = [50, 52, 54, 56, 58, 60, 62, 64]
//!
//! [[markers]]
//! id = "alm0"
//! members = [{ alm = "alm0" }]
//! keyframes = [{ t_us = 0, translation = [0.0, 0.0, 1.0] }]
//! ```

use serde::Deserialize;

use crate::detect::DetectConfig;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Transform};
use crate::pipeline::{Board, BoardMember, Mode, PipelineConfig, PoseConfig};
use crate::sim::{AlmConfig, LedSpec, MountedAlm, SimMarker, SimScene, Trajectory};
use crate::track::TrackConfig;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Either 12 row-major numbers or a rotation vector (radians) plus translation.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum TransformSpec {
    RowMajor(Vec<f64>),
    Parts {
        #[serde(default)]
        rotation_vector: [f64; 3],
        #[serde(default)]
        translation: [f64; 3],
    },
}

impl TransformSpec {
    pub fn to_transform(&self) -> Result<Transform> {
        match self {
            TransformSpec::RowMajor(v) => Transform::from_row_major(v),
            TransformSpec::Parts {
                rotation_vector,
                translation,
            } => Ok(Transform::from_rotation_vector(
                &(*rotation_vector).into(),
                (*translation).into(),
            )),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedEntry {
    pub id: u32,
    pub position: [f64; 3],
    pub period_us: Option<u32>,
    pub frequency_hz: Option<f64>,
    #[serde(default)]
    pub phase_us: u32,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlmEntry {
    pub name: String,
    #[serde(default)]
    pub leds: Vec<LedEntry>,
    /// Shorthand for the 8-LED square: side length in meters.
    pub square_side: Option<f64>,
    pub periods_us: Option<Vec<u32>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberEntry {
    pub alm: String,
    pub offset: Option<TransformSpec>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeEntry {
    pub t_us: u64,
    /// 12 row-major numbers; alternative to the two fields below.
    pub pose: Option<Vec<f64>>,
    pub rotation_vector: Option<[f64; 3]>,
    pub translation: Option<[f64; 3]>,
}

impl KeyframeEntry {
    pub fn to_transform(&self) -> Result<Transform> {
        match (&self.pose, self.rotation_vector, self.translation) {
            (Some(v), None, None) => Transform::from_row_major(v),
            (None, r, d) => TransformSpec::Parts {
                rotation_vector: r.unwrap_or_default(),
                translation: d.unwrap_or_default(),
            }
            .to_transform(),
            _ => Err(Error::Config(format!(
                "keyframe at {} us: give pose or rotation_vector/translation, not both",
                self.t_us
            ))),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerEntry {
    pub id: String,
    pub members: Vec<MemberEntry>,
    #[serde(default)]
    pub keyframes: Vec<KeyframeEntry>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardEntry {
    pub id: String,
    pub members: Vec<MemberEntry>,
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DetectEntry {
    pub f_min_hz: Option<f64>,
    pub window_us: Option<u64>,
    pub min_area: Option<usize>,
    pub match_tolerance: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrackEntry {
    pub beta: Option<f64>,
    pub radius_update_events: Option<u32>,
    pub min_radius_px: Option<f64>,
    pub starvation_periods: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PoseEntry {
    pub refine: Option<bool>,
    pub solve_period_us: Option<u64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub intrinsics: IntrinsicsSpec,
    pub alms: Vec<AlmEntry>,
    #[serde(default)]
    pub markers: Vec<MarkerEntry>,
    #[serde(default)]
    pub boards: Vec<BoardEntry>,

    // simulator
    pub duration_us: Option<u64>,
    pub blob_radius_px: Option<f64>,
    pub blob_jitter_px: Option<f64>,
    pub refractory_us: Option<u64>,
    pub noise_rate: Option<f64>,
    pub contrast_threshold: Option<f64>,
    pub single_polarity: Option<bool>,
    pub seed: Option<u64>,
    /// Ground-truth sampling period, microseconds.
    pub ground_truth_period_us: Option<u64>,

    // pipeline
    pub mode: Option<String>,
    #[serde(default)]
    pub detect: DetectEntry,
    #[serde(default)]
    pub track: TrackEntry,
    #[serde(default)]
    pub pose: PoseEntry,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let k = &self.intrinsics;
        CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)
    }

    pub fn alm_configs(&self) -> Result<Vec<AlmConfig>> {
        self.alms.iter().map(alm_from_entry).collect()
    }

    fn alm(&self, alms: &[AlmConfig], name: &str) -> Result<AlmConfig> {
        alms.iter()
            .find(|a| a.name == name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unknown ALM {name}")))
    }

    pub fn to_scene(&self) -> Result<SimScene> {
        let alms = self.alm_configs()?;
        let duration = self
            .duration_us
            .ok_or_else(|| Error::Config("scene needs duration_us".into()))?;
        if self.markers.is_empty() {
            return Err(Error::Config("scene needs at least one [[markers]] entry".into()));
        }
        let markers = self
            .markers
            .iter()
            .map(|m| {
                let mounted = m
                    .members
                    .iter()
                    .map(|mem| {
                        Ok(MountedAlm {
                            alm: self.alm(&alms, &mem.alm)?,
                            offset: offset_of(mem)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let keys = m
                    .keyframes
                    .iter()
                    .map(|k| Ok((k.t_us, k.to_transform()?)))
                    .collect::<Result<Vec<_>>>()?;
                if keys.is_empty() {
                    return Err(Error::Config(format!("marker {} has no keyframes", m.id)));
                }
                Ok(SimMarker {
                    id: m.id.clone(),
                    alms: mounted,
                    trajectory: Trajectory::new(keys)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut scene = SimScene::new(self.intrinsics()?, markers, duration);
        if let Some(v) = self.blob_radius_px {
            scene.blob_radius_px = v;
        }
        if let Some(v) = self.blob_jitter_px {
            scene.blob_jitter_px = v;
        }
        if let Some(v) = self.refractory_us {
            scene.refractory_us = v;
        }
        if let Some(v) = self.noise_rate {
            scene.noise_rate = v;
        }
        if let Some(v) = self.contrast_threshold {
            scene.contrast_threshold = v;
        }
        if let Some(v) = self.single_polarity {
            scene.single_polarity = v;
        }
        if let Some(v) = self.seed {
            scene.rng_seed = v;
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_pipeline(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::new(self.intrinsics()?, self.alm_configs()?);
        let boards: Vec<(&String, &Vec<MemberEntry>)> = if self.boards.is_empty() {
            self.markers.iter().map(|m| (&m.id, &m.members)).collect()
        } else {
            self.boards.iter().map(|b| (&b.id, &b.members)).collect()
        };
        cfg.boards = boards
            .into_iter()
            .map(|(id, members)| {
                Ok(Board {
                    id: id.clone(),
                    members: members
                        .iter()
                        .map(|m| {
                            Ok(BoardMember {
                                alm: m.alm.clone(),
                                offset: offset_of(m)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        cfg.mode = match self.mode.as_deref() {
            None | Some("tracking") => Mode::Tracking,
            Some("detection") => Mode::Detection,
            Some(other) => return Err(Error::Config(format!("unknown mode {other:?}"))),
        };
        let d = &self.detect;
        let mut detect = DetectConfig::with_f_min(d.f_min_hz.unwrap_or(DetectConfig::default().f_min_hz));
        if let Some(v) = d.window_us {
            detect.window_us = v;
        }
        if let Some(v) = d.min_area {
            detect.min_area = v;
        }
        if let Some(v) = d.match_tolerance {
            detect.match_tolerance = v;
        }
        cfg.detect = detect;
        let t = &self.track;
        let dt = TrackConfig::default();
        cfg.track = TrackConfig {
            beta: t.beta.unwrap_or(dt.beta),
            radius_update_events: t.radius_update_events.unwrap_or(dt.radius_update_events),
            min_radius_px: t.min_radius_px.unwrap_or(dt.min_radius_px),
            starvation_periods: t.starvation_periods.unwrap_or(dt.starvation_periods),
        };
        let dp = PoseConfig::default();
        cfg.pose = PoseConfig {
            refine: self.pose.refine.unwrap_or(dp.refine),
            solve_period_us: self.pose.solve_period_us.unwrap_or(dp.solve_period_us),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn offset_of(m: &MemberEntry) -> Result<Transform> {
    m.offset
        .as_ref()
        .map_or(Ok(Transform::identity()), TransformSpec::to_transform)
}

fn alm_from_entry(a: &AlmEntry) -> Result<AlmConfig> {
    match (a.square_side, &a.periods_us, a.leds.is_empty()) {
        (Some(side), Some(periods), true) => {
            let p: [u32; 8] = periods
                .as_slice()
                .try_into()
                .map_err(|_| Error::Config(format!("ALM {}: square_side needs exactly 8 periods_us", a.name)))?;
            let alm = AlmConfig::square_eight(a.name.clone(), side, p);
            alm.validate()?;
            Ok(alm)
        }
        (None, None, false) => {
            let leds = a
                .leds
                .iter()
                .map(|l| {
                    let pos = l.position.into();
                    let spec = match (l.period_us, l.frequency_hz) {
                        (Some(p), None) => LedSpec::with_period(l.id, pos, p),
                        (None, Some(f)) => LedSpec::new(l.id, pos, f)?,
                        _ => {
                            return Err(Error::Config(format!(
                                "ALM {} LED {}: give exactly one of period_us, frequency_hz",
                                a.name, l.id
                            )))
                        }
                    };
                    Ok(spec.with_phase(l.phase_us))
                })
                .collect::<Result<Vec<_>>>()?;
            AlmConfig::new(a.name.clone(), leds)
        }
        _ => Err(Error::Config(format!(
            "ALM {}: give either leds or square_side with periods_us",
            a.name
        ))),
    }
}
