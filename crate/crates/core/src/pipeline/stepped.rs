//! Deterministic scheduler: every stage runs at fixed points of stream time.
//!
//! Detection window `[kT_d, (k+1)T_d)` is processed when the first event at or
//! after its end arrives. In tracking mode a pose solve runs at every solve tick
//! `s` (spaced by `solve_period_us` while anything is tracked) on the trackers
//! after all events with `t ≤ s`. Ties between a window end and a tick run the
//! window first.

use super::{check_sorted, Mode, PipelineConfig, PoseLog, PoseRecord, Registry};
use crate::detect::detect_window;
use crate::error::Result;
use crate::sim::Event;
use crate::track::TrackerBank;

struct Stepper<'a> {
    cfg: &'a PipelineConfig,
    reg: Registry,
    bank: TrackerBank<f64>,
    log: PoseLog,
    next_solve: Option<u64>,
}

impl Stepper<'_> {
    fn window(&mut self, events: &[Event], start: u64) -> Result<()> {
        let k = &self.cfg.intrinsics;
        let found = detect_window(events, start, &self.cfg.detect, &self.cfg.alms, k.width, k.height)?;
        let end = start + self.cfg.detect.window_us;
        match self.cfg.mode {
            Mode::Tracking => {
                let mut spawned = false;
                for m in &found {
                    spawned |= self.bank.spawn(m, end).is_some();
                }
                if spawned && self.next_solve.is_none() {
                    self.next_solve = Some(end);
                }
            }
            Mode::Detection => {
                for (board, groups) in self.reg.group_detections(&found) {
                    if let Some(s) = self.reg.solve(board, &groups, k, self.cfg.pose.refine) {
                        self.log.records.push(PoseRecord {
                            t_us: end,
                            marker_id: self.reg.boards[board].id.clone(),
                            pose: s.pose,
                            rms_px: s.rms_px,
                            lost: s.lost,
                            latency_us: None,
                            wall_us: None,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn solve(&mut self, at: u64) {
        let snap = self.bank.snapshot(at);
        for (board, groups) in self.reg.group_snapshot(&snap.alms) {
            let Some(s) = self
                .reg
                .solve(board, &groups, &self.cfg.intrinsics, self.cfg.pose.refine)
            else {
                continue;
            };
            if s.lost {
                for (ai, _) in &groups {
                    let gen = snap.alms.iter().find(|a| a.alm_index == *ai).map(|a| a.generation);
                    self.bank.teardown(*ai, gen);
                }
            }
            self.log.records.push(PoseRecord {
                t_us: at,
                marker_id: self.reg.boards[board].id.clone(),
                pose: s.pose,
                rms_px: s.rms_px,
                lost: s.lost,
                latency_us: None,
                wall_us: None,
            });
        }
        self.next_solve = if self.bank.tracked().is_empty() {
            None
        } else {
            Some(at + self.cfg.pose.solve_period_us)
        };
    }
}

/// Runs all stages over a sorted stream in deterministic stepped order.
pub fn run_pipeline(cfg: &PipelineConfig, events: &[Event]) -> Result<PoseLog> {
    check_sorted(events)?;
    let mut st = Stepper {
        cfg,
        reg: cfg.resolve()?,
        bank: TrackerBank::new(cfg.track.clone()),
        log: PoseLog::default(),
        next_solve: None,
    };
    let Some(first) = events.first() else {
        return Ok(st.log);
    };
    let td = cfg.detect.window_us;
    let mut window_start = first.t / td * td;
    let mut window_lo = 0usize;
    let mut i = 0usize;
    while i < events.len() {
        let t = events[i].t;
        loop {
            let window_end = window_start + td;
            let tick = st.next_solve.filter(|&s| s < t);
            if window_end <= t && tick.is_none_or(|s| window_end <= s) {
                st.window(&events[window_lo..i], window_start)?;
                window_lo = i;
                window_start = if t >= window_end + td { t / td * td } else { window_end };
            } else if let Some(s) = tick {
                st.solve(s);
            } else {
                break;
            }
        }
        while i < events.len() && events[i].t == t {
            if cfg.mode == Mode::Tracking {
                st.bank.process(&events[i])?;
            }
            i += 1;
        }
    }
    let last = events[events.len() - 1].t;
    while let Some(s) = st.next_solve.filter(|&s| s <= last) {
        st.solve(s);
    }
    Ok(st.log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::DetectConfig;
    use crate::geometry::{pose_error, CameraIntrinsics, Transform};
    use crate::sim::{simulate_blink_events, spaced_periods, AlmConfig, SimMarker, SimScene, Trajectory};
    use nalgebra::Vector3;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0, 1280, 720).unwrap()
    }

    fn scene(trajectory: Trajectory, duration: u64) -> SimScene {
        let p = spaced_periods(8, 50, 1.03);
        let alm = AlmConfig::square_eight("alm", 0.09, p.try_into().unwrap());
        SimScene::new(camera(), vec![SimMarker::single(alm, trajectory)], duration)
    }

    fn config(scene: &SimScene) -> PipelineConfig {
        let mut cfg = PipelineConfig::from_scene(scene);
        cfg.detect = DetectConfig::with_f_min(5000.0);
        cfg.detect.window_us = 1000;
        cfg
    }

    #[test]
    fn empty_stream_gives_empty_log() {
        let s = scene(Trajectory::constant(Transform::identity()), 1000);
        assert!(run_pipeline(&config(&s), &[]).unwrap().is_empty());
    }

    #[test]
    fn unsorted_stream_is_rejected() {
        let s = scene(Trajectory::constant(Transform::identity()), 1000);
        let ev = [
            Event::new(5, 0, 0, crate::sim::Polarity::Positive),
            Event::new(4, 0, 0, crate::sim::Polarity::Positive),
        ];
        assert!(matches!(
            run_pipeline(&config(&s), &ev),
            Err(crate::Error::UnsortedStream { t: 4, previous: 5 })
        ));
    }

    #[test]
    fn static_scene_tracks_without_loss() {
        let truth = Transform::from_axis_angle(&Vector3::x(), 0.2, Vector3::new(0.02, -0.01, 0.8));
        let s = scene(Trajectory::constant(truth), 200_000);
        let ev = simulate_blink_events(&s, s.duration_us).unwrap();
        let log = run_pipeline(&config(&s), &ev).unwrap();
        assert!(log.len() > 500, "{} records", log.len());
        assert!(log.records.iter().all(|r| !r.lost));
        assert!(log.records.windows(2).all(|w| w[0].t_us <= w[1].t_us));
        for r in &log.records {
            let e = pose_error(&r.pose, &truth);
            assert!(e.translation_norm < 5e-3 && e.orientation_error_deg < 2.0, "{e:?}");
        }
        let last = &log.records[log.len() - 1];
        let prev = &log.records[log.len() - 2];
        assert!(pose_error(&last.pose, &prev.pose).translation_norm < 1e-4);
    }

    #[test]
    fn detection_mode_emits_once_per_window() {
        let truth = Transform::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let s = scene(Trajectory::constant(truth), 20_000);
        let ev = simulate_blink_events(&s, s.duration_us).unwrap();
        let mut cfg = config(&s);
        cfg.mode = Mode::Detection;
        let log = run_pipeline(&cfg, &ev).unwrap();
        // the last window is never closed by a later event
        assert_eq!(log.len(), 19);
        assert!(log.records.iter().all(|r| r.t_us % 1000 == 0 && !r.lost));
    }
}
