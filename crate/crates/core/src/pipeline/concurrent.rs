//! Free-running scheduler: ingest/tracking, detection and pose solving on their
//! own threads, fed by a replay clock.
//!
//! The ingest thread owns the trackers. The pose thread raises a flag when it is
//! idle and receives the next tracker snapshot over a rendezvous channel, so a
//! new solve starts as soon as the previous one finishes. Lost signals go back
//! to the ingest thread tagged with the tracker generation they refer to.
//!
//! Detection always runs on the newest closed window and is skipped in
//! tracking mode while every ALM has trackers. Under a replay clock,
//! detections older than one window when they reach the ingest thread are
//! dropped.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::{check_sorted, metrics::Summary, Mode, PipelineConfig, PoseLog, PoseRecord};
use crate::detect::{detect_window, DetectedMarker};
use crate::error::Result;
use crate::sim::Event;
use crate::track::{Snapshot, TrackerBank};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplayOptions {
    /// Stream seconds per wall second; 0 injects every event immediately.
    pub speed: f64,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self { speed: 1.0 }
    }
}

struct Window {
    start: u64,
    events: Vec<Event>,
    injected: Instant,
}

struct SnapshotMsg {
    snap: Snapshot<f64>,
    injected: Instant,
}

fn micros_since(a: Instant, b: Instant) -> f64 {
    b.saturating_duration_since(a).as_secs_f64() * 1e6
}

/// Runs the stages concurrently against a replay clock. Records carry wall-clock
/// latency and availability times and are returned sorted by stream time.
pub fn run_free_running(cfg: &PipelineConfig, events: &[Event], replay: ReplayOptions) -> Result<PoseLog> {
    check_sorted(events)?;
    let reg = Arc::new(cfg.resolve()?);
    let Some(first) = events.first() else {
        return Ok(PoseLog::default());
    };
    let start = Instant::now();
    let t0 = first.t;

    let (window_tx, window_rx) = mpsc::channel::<Window>();
    let (found_tx, found_rx) = mpsc::channel::<Vec<DetectedMarker>>();
    let (record_tx, record_rx) = mpsc::channel::<PoseRecord>();
    let (snap_tx, snap_rx) = mpsc::sync_channel::<SnapshotMsg>(1);
    let (lost_tx, lost_rx) = mpsc::channel::<(usize, u64)>();
    let want = Arc::new(AtomicBool::new(false));

    let mut records = thread::scope(|scope| -> Result<Vec<PoseRecord>> {
        // detection
        {
            let reg = Arc::clone(&reg);
            let record_tx = record_tx.clone();
            scope.spawn(move || {
                let k = &cfg.intrinsics;
                while let Ok(mut w) = window_rx.recv() {
                    // only the newest complete window is worth detecting on
                    while let Ok(newer) = window_rx.try_recv() {
                        w = newer;
                    }
                    let Ok(found) = detect_window(&w.events, w.start, &cfg.detect, &cfg.alms, k.width, k.height) else {
                        continue;
                    };
                    match cfg.mode {
                        Mode::Tracking => {
                            if !found.is_empty() && found_tx.send(found).is_err() {
                                break;
                            }
                        }
                        Mode::Detection => {
                            let end = w.start + cfg.detect.window_us;
                            for (board, groups) in reg.group_detections(&found) {
                                if let Some(s) = reg.solve(board, &groups, k, cfg.pose.refine) {
                                    let now = Instant::now();
                                    let _ = record_tx.send(PoseRecord {
                                        t_us: end,
                                        marker_id: reg.boards[board].id.clone(),
                                        pose: s.pose,
                                        rms_px: s.rms_px,
                                        lost: s.lost,
                                        latency_us: Some(micros_since(w.injected, now)),
                                        wall_us: Some(micros_since(start, now)),
                                    });
                                }
                            }
                        }
                    }
                }
            });
        }
        // pose
        if cfg.mode == Mode::Tracking {
            let reg = Arc::clone(&reg);
            let want = Arc::clone(&want);
            let record_tx = record_tx.clone();
            scope.spawn(move || {
                let mut dead = HashSet::new();
                loop {
                    want.store(true, Ordering::Release);
                    let Ok(msg) = snap_rx.recv() else { break };
                    if msg.snap.alms.is_empty() {
                        thread::sleep(Duration::from_micros(20));
                        continue;
                    }
                    let mut alms = msg.snap.alms;
                    alms.retain(|a| !dead.contains(&(a.alm_index, a.generation)));
                    for (board, groups) in reg.group_snapshot(&alms) {
                        let Some(s) = reg.solve(board, &groups, &cfg.intrinsics, cfg.pose.refine) else {
                            continue;
                        };
                        if s.lost {
                            for (ai, _) in &groups {
                                if let Some(a) = alms.iter().find(|a| a.alm_index == *ai) {
                                    dead.insert((a.alm_index, a.generation));
                                    let _ = lost_tx.send((a.alm_index, a.generation));
                                }
                            }
                        }
                        let now = Instant::now();
                        let _ = record_tx.send(PoseRecord {
                            t_us: msg.snap.t,
                            marker_id: reg.boards[board].id.clone(),
                            pose: s.pose,
                            rms_px: s.rms_px,
                            lost: s.lost,
                            latency_us: Some(micros_since(msg.injected, now)),
                            wall_us: Some(micros_since(start, now)),
                        });
                    }
                }
            });
        } else {
            drop(snap_rx);
            drop(lost_tx);
        }
        drop(record_tx);

        // ingest and tracking on this thread
        let mut bank = TrackerBank::<f64>::new(cfg.track.clone());
        let td = cfg.detect.window_us;
        let mut window = Window {
            start: t0 / td * td,
            events: Vec::new(),
            injected: start,
        };
        let mut injected = start;
        let mut i = 0;
        while i < events.len() {
            let t = events[i].t;
            if replay.speed > 0.0 {
                let due = Duration::from_secs_f64((t - t0) as f64 * 1e-6 / replay.speed);
                loop {
                    let elapsed = start.elapsed();
                    if elapsed >= due {
                        break;
                    }
                    let ahead = due - elapsed;
                    if ahead > Duration::from_micros(500) {
                        thread::sleep(ahead - Duration::from_micros(200));
                    } else {
                        thread::yield_now();
                    }
                }
            }
            if t >= window.start + td {
                let next_start = if t >= window.start + 2 * td {
                    t / td * td
                } else {
                    window.start + td
                };
                let done = std::mem::replace(
                    &mut window,
                    Window {
                        start: next_start,
                        events: Vec::new(),
                        injected,
                    },
                );
                if cfg.mode == Mode::Detection || bank.tracked().len() < cfg.alms.len() {
                    let _ = window_tx.send(Window { injected, ..done });
                }
            }
            while let Ok((ai, gen)) = lost_rx.try_recv() {
                bank.teardown(ai, Some(gen));
            }
            while let Ok(found) = found_rx.try_recv() {
                if replay.speed > 0.0 && found[0].window_end + td < t {
                    continue;
                }
                // trackers start now: the events since the window closed were not theirs
                let now = bank.last_t().unwrap_or(t).max(found[0].window_end);
                for m in &found {
                    bank.spawn(m, now);
                }
            }
            while i < events.len() && events[i].t == t {
                if cfg.mode == Mode::Tracking {
                    bank.process(&events[i])?;
                }
                window.events.push(events[i]);
                i += 1;
            }
            injected = Instant::now();
            if want.load(Ordering::Acquire) {
                while let Ok((ai, gen)) = lost_rx.try_recv() {
                    bank.teardown(ai, Some(gen));
                }
                want.store(false, Ordering::Relaxed);
                let _ = snap_tx.try_send(SnapshotMsg {
                    snap: bank.snapshot(t),
                    injected,
                });
            }
        }
        drop(window_tx);
        drop(snap_tx);
        let mut out: Vec<PoseRecord> = record_rx.iter().collect();
        out.sort_by_key(|r| r.t_us);
        Ok(out)
    })?;
    records.sort_by_key(|r| r.t_us);
    Ok(PoseLog { records })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputReport {
    pub poses: usize,
    pub wall_seconds: f64,
    /// Output rate over 50 ms wall-clock bins, Hz.
    pub rate_hz: Summary,
    pub latency_us: Summary,
}

const RATE_BIN_S: f64 = 0.05;

/// Replays `events` through the free-running pipeline and reports output rate
/// and latency statistics.
pub fn measure_throughput(
    cfg: &PipelineConfig,
    events: &[Event],
    replay: ReplayOptions,
) -> Result<(PoseLog, ThroughputReport)> {
    let started = Instant::now();
    let log = run_free_running(cfg, events, replay)?;
    let wall_seconds = started.elapsed().as_secs_f64();
    let report = throughput_of(&log, wall_seconds);
    Ok((log, report))
}

pub(crate) fn throughput_of(log: &PoseLog, wall_seconds: f64) -> ThroughputReport {
    let bins = ((wall_seconds / RATE_BIN_S).floor() as usize).max(1);
    let mut counts = vec![0usize; bins];
    for r in &log.records {
        if let Some(w) = r.wall_us {
            let b = (w * 1e-6 / RATE_BIN_S) as usize;
            if b < bins {
                counts[b] += 1;
            }
        }
    }
    let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / RATE_BIN_S).collect();
    ThroughputReport {
        poses: log.len(),
        wall_seconds,
        rate_hz: Summary::of(rates.iter().copied()),
        latency_us: Summary::of(log.records.iter().filter_map(|r| r.latency_us)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::DetectConfig;
    use crate::geometry::{CameraIntrinsics, Transform};
    use crate::sim::{simulate_blink_events, spaced_periods, AlmConfig, SimMarker, SimScene, Trajectory};
    use nalgebra::Vector3;

    fn setup(duration: u64) -> (PipelineConfig, Vec<Event>) {
        let k = CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0, 1280, 720).unwrap();
        let p = spaced_periods(8, 50, 1.03);
        let alm = AlmConfig::square_eight("alm", 0.09, p.try_into().unwrap());
        let truth = Transform::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let scene = SimScene::new(k, vec![SimMarker::single(alm, Trajectory::constant(truth))], duration);
        let ev = simulate_blink_events(&scene, duration).unwrap();
        let mut cfg = PipelineConfig::from_scene(&scene);
        cfg.detect = DetectConfig::with_f_min(5000.0);
        cfg.detect.window_us = 1000;
        (cfg, ev)
    }

    #[test]
    fn unthrottled_replay_reports_non_negative_latency() {
        let (cfg, ev) = setup(50_000);
        let (log, rep) = measure_throughput(&cfg, &ev, ReplayOptions { speed: 0.0 }).unwrap();
        assert!(log.records.iter().all(|r| r.latency_us.unwrap() >= 0.0));
        assert!(rep.latency_us.mean >= 0.0);
        assert!(log.records.windows(2).all(|w| w[0].t_us <= w[1].t_us));
    }

    #[test]
    fn fast_replay_tracks() {
        let (cfg, ev) = setup(200_000);
        let (log, _) = measure_throughput(&cfg, &ev, ReplayOptions { speed: 4.0 }).unwrap();
        assert!(!log.is_empty());
        assert!(log.records.iter().all(|r| !r.lost));
    }

    #[test]
    fn real_time_replay_tracks() {
        let (cfg, ev) = setup(100_000);
        let (log, rep) = measure_throughput(&cfg, &ev, ReplayOptions::default()).unwrap();
        assert!(rep.wall_seconds >= 0.099);
        assert!(log.len() > 10, "{rep:?}");
        assert!(log.records.iter().all(|r| !r.lost));
    }

    #[test]
    fn empty_stream() {
        let (cfg, _) = setup(1000);
        assert!(run_free_running(&cfg, &[], ReplayOptions::default())
            .unwrap()
            .is_empty());
    }
}
