//! Per-LED event trackers.
//!
//! Every event inside a tracker's capture radius moves its center by an
//! exponential moving average with factor `beta`. Every `N` events the radius
//! is reset to twice the mean event distance seen since the last reset.

use nalgebra::Vector2;

use crate::detect::DetectedMarker;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sim::Event;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackConfig {
    /// EMA update factor.
    pub beta: f64,
    /// Events between radius updates (`N`).
    pub radius_update_events: u32,
    pub min_radius_px: f64,
    /// A tracker that misses this many of its blink periods is starved.
    pub starvation_periods: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            beta: 0.02,
            radius_update_events: 32,
            min_radius_px: 1.0,
            starvation_periods: 3.0,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config("beta must lie in (0, 1]".into()));
        }
        if self.radius_update_events == 0 {
            return Err(Error::Config("radius update interval must be positive".into()));
        }
        if !(self.min_radius_px > 0.0) || !(self.starvation_periods > 0.0) {
            return Err(Error::Config(
                "min radius and starvation periods must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tracker<T: Real = f64> {
    pub led_id: u32,
    pub frequency_hz: f64,
    pub center: Vector2<T>,
    pub radius: T,
    pub events_since_radius_update: u32,
    /// Sum of event-to-center distances since the last radius update.
    pub distance_accumulator: T,
    pub last_event_t: u64,
}

impl<T: Real> Tracker<T> {
    pub fn new(led_id: u32, frequency_hz: f64, center: Vector2<T>, radius: T, t: u64) -> Self {
        Self {
            led_id,
            frequency_hz,
            center,
            radius,
            events_since_radius_update: 0,
            distance_accumulator: T::zero(),
            last_event_t: t,
        }
    }

    /// Mean event distance implied by the radius rule.
    pub fn mean_distance(&self) -> T {
        self.radius * T::lit(0.5)
    }

    pub fn is_starved(&self, now: u64, starvation_periods: f64) -> bool {
        let limit = starvation_periods * 1e6 / self.frequency_hz;
        now.saturating_sub(self.last_event_t) as f64 > limit
    }
}

/// One tracker per LED seed, centered on the detection centroid.
pub fn spawn_trackers<T: Real>(marker: &DetectedMarker, t: u64) -> Vec<Tracker<T>> {
    marker
        .seeds
        .iter()
        .map(|s| {
            Tracker::new(
                s.led_id,
                s.frequency_hz,
                Vector2::new(T::lit(s.centroid.x), T::lit(s.centroid.y)),
                T::lit(s.radius),
                t,
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Route {
    pub index: usize,
    /// The event fell inside more than one capture disc.
    pub overlap: bool,
}

/// The tracker whose capture disc contains `e`; overlaps go to the nearest
/// center, then to the lower LED id.
pub fn route_event<T: Real>(e: &Event, trackers: &[Tracker<T>]) -> Option<Route> {
    let p = Vector2::new(T::lit(e.u as f64), T::lit(e.v as f64));
    let mut best: Option<(usize, T)> = None;
    let mut hits = 0;
    for (i, tr) in trackers.iter().enumerate() {
        let d2 = (p - tr.center).norm_squared();
        if d2 > tr.radius * tr.radius {
            continue;
        }
        hits += 1;
        best = match best {
            None => Some((i, d2)),
            Some((j, bd)) => {
                if d2 < bd || (d2 == bd && tr.led_id < trackers[j].led_id) {
                    Some((i, d2))
                } else {
                    Some((j, bd))
                }
            }
        };
    }
    best.map(|(index, _)| Route {
        index,
        overlap: hits > 1,
    })
}

/// Applies one routed event: EMA center update and distance bookkeeping.
pub fn update_tracker<T: Real>(tr: &mut Tracker<T>, e: &Event, beta: T) {
    let p = Vector2::new(T::lit(e.u as f64), T::lit(e.v as f64));
    tr.distance_accumulator += (p - tr.center).norm();
    tr.center = p * beta + tr.center * (T::one() - beta);
    tr.events_since_radius_update += 1;
    tr.last_event_t = e.t;
}

/// Resets the radius to twice the mean accumulated distance, floored at `min_radius`.
pub fn update_radius<T: Real>(tr: &mut Tracker<T>, min_radius: T) {
    if tr.events_since_radius_update == 0 {
        return;
    }
    let n = T::lit(tr.events_since_radius_update as f64);
    tr.radius = (T::lit(2.0) * tr.distance_accumulator / n).max(min_radius);
    tr.distance_accumulator = T::zero();
    tr.events_since_radius_update = 0;
}

/// Full per-event step: route, update, and refresh the radius every `N` events.
///
/// Returns the route taken, if any. Events must arrive in timestamp order.
pub fn process_event<T: Real>(trackers: &mut [Tracker<T>], e: &Event, config: &TrackConfig) -> Option<Route> {
    let route = route_event(e, trackers)?;
    let tr = &mut trackers[route.index];
    update_tracker(tr, e, T::lit(config.beta));
    if tr.events_since_radius_update >= config.radius_update_events {
        update_radius(tr, T::lit(config.min_radius_px));
    }
    Some(route)
}

/// Immutable copy of one tracker taken between event updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerState<T: Real = f64> {
    pub led_id: u32,
    pub center: Vector2<T>,
    pub radius: T,
    pub starved: bool,
}

impl<T: Real> TrackerState<T> {
    pub fn mean_distance(&self) -> T {
        self.radius * T::lit(0.5)
    }
}

/// Trackers of every live ALM, owned by the event-consuming stage.
#[derive(Clone, Debug)]
pub struct TrackerBank<T: Real = f64> {
    config: TrackConfig,
    /// Live ALMs; the generation increments on every spawn.
    groups: Vec<TrackedAlm>,
    trackers: Vec<Tracker<T>>,
    owner: Vec<usize>,
    last_t: Option<u64>,
    next_generation: u64,
    pub overlap_faults: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackedAlm {
    pub alm_index: usize,
    pub generation: u64,
    pub spawned_at: u64,
}

/// Snapshot of all trackers of one ALM.
#[derive(Clone, Debug, PartialEq)]
pub struct AlmSnapshot<T: Real = f64> {
    pub alm_index: usize,
    pub generation: u64,
    pub trackers: Vec<TrackerState<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T: Real = f64> {
    /// Timestamp of the newest event consumed before the copy.
    pub t: u64,
    pub alms: Vec<AlmSnapshot<T>>,
}

impl<T: Real> TrackerBank<T> {
    pub fn new(config: TrackConfig) -> Self {
        Self {
            config,
            groups: Vec::new(),
            trackers: Vec::new(),
            owner: Vec::new(),
            last_t: None,
            next_generation: 0,
            overlap_faults: 0,
        }
    }

    pub fn config(&self) -> &TrackConfig {
        &self.config
    }

    pub fn is_tracking(&self, alm_index: usize) -> bool {
        self.groups.iter().any(|g| g.alm_index == alm_index)
    }

    pub fn generation(&self, alm_index: usize) -> Option<u64> {
        self.groups
            .iter()
            .find(|g| g.alm_index == alm_index)
            .map(|g| g.generation)
    }

    pub fn tracked(&self) -> &[TrackedAlm] {
        &self.groups
    }

    pub fn trackers(&self) -> &[Tracker<T>] {
        &self.trackers
    }

    /// Spawns trackers for a detected ALM unless it is already tracked.
    /// Returns the new generation.
    pub fn spawn(&mut self, marker: &DetectedMarker, t: u64) -> Option<u64> {
        if self.is_tracking(marker.alm_index) {
            return None;
        }
        let generation = self.next_generation;
        self.next_generation += 1;
        let group = self.groups.len();
        self.groups.push(TrackedAlm {
            alm_index: marker.alm_index,
            generation,
            spawned_at: t,
        });
        for tr in spawn_trackers::<T>(marker, t) {
            self.trackers.push(tr);
            self.owner.push(group);
        }
        Some(generation)
    }

    /// Drops the trackers of `alm_index` if they still belong to `generation`.
    pub fn teardown(&mut self, alm_index: usize, generation: Option<u64>) -> bool {
        let Some(group) = self
            .groups
            .iter()
            .position(|g| g.alm_index == alm_index && generation.is_none_or(|gen| g.generation == gen))
        else {
            return false;
        };
        let mut keep_trackers = Vec::with_capacity(self.trackers.len());
        let mut keep_owner = Vec::with_capacity(self.owner.len());
        for (tr, &o) in self.trackers.drain(..).zip(self.owner.iter()) {
            if o != group {
                keep_trackers.push(tr);
                keep_owner.push(if o > group { o - 1 } else { o });
            }
        }
        self.trackers = keep_trackers;
        self.owner = keep_owner;
        self.groups.remove(group);
        true
    }

    /// Routes and applies one event. Out-of-order events are rejected.
    pub fn process(&mut self, e: &Event) -> Result<Option<Route>> {
        if let Some(prev) = self.last_t {
            if e.t < prev {
                return Err(Error::UnsortedStream { t: e.t, previous: prev });
            }
        }
        self.last_t = Some(e.t);
        let route = process_event(&mut self.trackers, e, &self.config);
        if matches!(route, Some(Route { overlap: true, .. })) {
            self.overlap_faults += 1;
        }
        Ok(route)
    }

    pub fn last_t(&self) -> Option<u64> {
        self.last_t
    }

    pub fn snapshot(&self, now: u64) -> Snapshot<T> {
        let alms = self
            .groups
            .iter()
            .enumerate()
            .map(|(gi, g)| AlmSnapshot {
                alm_index: g.alm_index,
                generation: g.generation,
                trackers: self
                    .trackers
                    .iter()
                    .zip(&self.owner)
                    .filter(|(_, &o)| o == gi)
                    .map(|(tr, _)| TrackerState {
                        led_id: tr.led_id,
                        center: tr.center,
                        radius: tr.radius,
                        starved: tr.is_starved(now, self.config.starvation_periods),
                    })
                    .collect(),
            })
            .collect();
        Snapshot { t: now, alms }
    }
}
