//! Deterministic synthetic event camera for blinking LED markers.
//!
//! Every LED blink is modeled as a guaranteed trigger: each pixel inside a
//! constant-radius disc around the LED's projection emits exactly one
//! positive event stamped with the blink instant. A per-pixel refractory
//! period then suppresses events that follow too closely. Log-intensity
//! contrast is not rendered; `contrast_threshold` is carried for reference
//! only.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Transform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_i8(p: i8) -> Option<Self> {
        match p {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

/// One sensor event: pixel, timestamp in microseconds and polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub u: u16,
    pub v: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, u: u16, v: u16, polarity: Polarity) -> Self {
        Self { t, u, v, polarity }
    }

    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u as f64, self.v as f64)
    }
}

pub type EventStream = Vec<Event>;

pub fn is_time_sorted(events: &[Event]) -> bool {
    events.windows(2).all(|w| w[0].t <= w[1].t)
}

/// A single LED: marker-frame position and an integer-microsecond blink period.
#[derive(Clone, Debug, PartialEq)]
pub struct LedSpec {
    pub id: u32,
    pub position: Vector3<f64>,
    period_us: u32,
    /// Time of the first blink.
    pub phase_us: u32,
}

impl LedSpec {
    /// Accepts only frequencies whose period is a whole number of microseconds.
    pub fn new(id: u32, position: Vector3<f64>, frequency_hz: f64) -> Result<Self> {
        if !(frequency_hz > 0.0 && frequency_hz.is_finite()) {
            return Err(Error::Config(format!("LED {id}: invalid frequency {frequency_hz}")));
        }
        let period = 1e6 / frequency_hz;
        let rounded = period.round();
        if (period - rounded).abs() > 1e-9 * period.max(1.0) || rounded < 1.0 {
            return Err(Error::Config(format!(
                "LED {id}: {frequency_hz} Hz has a non-integer period of {period} µs"
            )));
        }
        Ok(Self::with_period(id, position, rounded as u32))
    }

    pub fn with_period(id: u32, position: Vector3<f64>, period_us: u32) -> Self {
        assert!(period_us > 0, "LED period must be positive");
        Self {
            id,
            position,
            period_us,
            phase_us: 0,
        }
    }

    pub fn with_phase(mut self, phase_us: u32) -> Self {
        self.phase_us = phase_us;
        self
    }

    pub fn period_us(&self) -> u32 {
        self.period_us
    }

    pub fn frequency_hz(&self) -> f64 {
        1e6 / self.period_us as f64
    }
}

/// Geometry and blink frequencies of one active LED marker.
#[derive(Clone, Debug, PartialEq)]
pub struct AlmConfig {
    pub name: String,
    pub leds: Vec<LedSpec>,
}

impl AlmConfig {
    pub fn new(name: impl Into<String>, leds: Vec<LedSpec>) -> Result<Self> {
        let alm = Self {
            name: name.into(),
            leds,
        };
        alm.validate()?;
        Ok(alm)
    }

    /// Eight LEDs on the border of a square of `side` meters: corners and edge
    /// midpoints, counter-clockwise from `(-side/2, -side/2)`, in the `z = 0` plane.
    pub fn square_eight(name: impl Into<String>, side: f64, periods_us: [u32; 8]) -> Self {
        let h = side / 2.0;
        let xy = [
            (-h, -h),
            (0.0, -h),
            (h, -h),
            (h, 0.0),
            (h, h),
            (0.0, h),
            (-h, h),
            (-h, 0.0),
        ];
        let leds = xy
            .iter()
            .zip(periods_us)
            .enumerate()
            .map(|(i, (&(x, y), p))| LedSpec::with_period(i as u32, Vector3::new(x, y, 0.0), p))
            .collect();
        Self {
            name: name.into(),
            leds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.leds.len() < 4 {
            return Err(Error::Config(format!(
                "marker {} has {} LEDs; planar pose needs at least 4",
                self.name,
                self.leds.len()
            )));
        }
        for (i, a) in self.leds.iter().enumerate() {
            for b in &self.leds[i + 1..] {
                if a.id == b.id {
                    return Err(Error::Config(format!(
                        "marker {}: duplicate LED id {}",
                        self.name, a.id
                    )));
                }
                if a.period_us == b.period_us {
                    return Err(Error::Config(format!(
                        "marker {}: LEDs {} and {} share frequency {} Hz",
                        self.name,
                        a.id,
                        b.id,
                        a.frequency_hz()
                    )));
                }
            }
        }
        let dev = self.plane_deviation();
        if dev >= 1e-9 {
            return Err(Error::Config(format!(
                "marker {}: LEDs are not coplanar (deviation {dev:e} m)",
                self.name
            )));
        }
        Ok(())
    }

    /// All LED frequencies must lie in `[f_min, f_max]`.
    pub fn validate_band(&self, f_min: f64, f_max: f64) -> Result<()> {
        for led in &self.leds {
            let f = led.frequency_hz();
            if f < f_min || f > f_max {
                return Err(Error::Config(format!(
                    "marker {} LED {}: {f} Hz outside [{f_min}, {f_max}]",
                    self.name, led.id
                )));
            }
        }
        Ok(())
    }

    /// Largest distance of an LED from the best-fit plane, meters.
    pub fn plane_deviation(&self) -> f64 {
        let pts: Vec<Vector3<f64>> = self.leds.iter().map(|l| l.position).collect();
        crate::pose::plane_fit(&pts).1
    }
}

/// Evenly ratio-spaced integer periods: each period is at least `ratio` times the
/// previous one, starting at `first_us`.
pub fn spaced_periods(count: usize, first_us: u32, ratio: f64) -> Vec<u32> {
    let mut out = Vec::with_capacity(count);
    let mut p = first_us;
    for _ in 0..count {
        out.push(p);
        p = ((p as f64 * ratio).ceil() as u32).max(p + 1);
    }
    out
}

/// Piecewise-linear pose trajectory (geodesic interpolation between keyframes).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    keyframes: Vec<(u64, Transform)>,
}

impl Trajectory {
    pub fn constant(pose: Transform) -> Self {
        Self {
            keyframes: vec![(0, pose)],
        }
    }

    pub fn new(keyframes: Vec<(u64, Transform)>) -> Result<Self> {
        if keyframes.is_empty() {
            return Err(Error::Config("trajectory needs at least one keyframe".into()));
        }
        if keyframes.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config(
                "trajectory keyframes must have strictly increasing timestamps".into(),
            ));
        }
        Ok(Self { keyframes })
    }

    pub fn keyframes(&self) -> &[(u64, Transform)] {
        &self.keyframes
    }

    /// Pose at `t` microseconds; held constant before the first and after the last keyframe.
    pub fn pose_at(&self, t: u64) -> Transform {
        self.pose_at_f(t as f64)
    }

    pub fn pose_at_f(&self, t: f64) -> Transform {
        let kf = &self.keyframes;
        let idx = kf.partition_point(|(k, _)| (*k as f64) <= t);
        if idx == 0 {
            return kf[0].1;
        }
        if idx == kf.len() {
            return kf[kf.len() - 1].1;
        }
        let (t0, p0) = &kf[idx - 1];
        let (t1, p1) = &kf[idx];
        let s = (t - *t0 as f64) / (*t1 - *t0) as f64;
        p0.interpolate(p1, s)
    }
}

/// An ALM mounted on a rigid body at a fixed offset (ALM frame in body frame).
#[derive(Clone, Debug, PartialEq)]
pub struct MountedAlm {
    pub alm: AlmConfig,
    pub offset: Transform,
}

/// A rigid body carrying one or more ALMs along a trajectory (body pose in camera frame).
#[derive(Clone, Debug, PartialEq)]
pub struct SimMarker {
    pub id: String,
    pub alms: Vec<MountedAlm>,
    pub trajectory: Trajectory,
}

impl SimMarker {
    pub fn single(alm: AlmConfig, trajectory: Trajectory) -> Self {
        Self {
            id: alm.name.clone(),
            alms: vec![MountedAlm {
                alm,
                offset: Transform::identity(),
            }],
            trajectory,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimScene {
    pub intrinsics: CameraIntrinsics,
    pub markers: Vec<SimMarker>,
    /// Radius of the LED's image disc. Below one pixel only the rounded projection fires.
    pub blob_radius_px: f64,
    /// Standard deviation of a per-blink random offset of the disc center.
    pub blob_jitter_px: f64,
    pub refractory_us: u64,
    /// Background events per second per pixel.
    pub noise_rate: f64,
    /// Temporal contrast threshold; recorded, not simulated.
    pub contrast_threshold: f64,
    /// Emit background noise with positive polarity only.
    pub single_polarity: bool,
    pub rng_seed: u64,
    pub duration_us: u64,
}

impl SimScene {
    pub fn new(intrinsics: CameraIntrinsics, markers: Vec<SimMarker>, duration_us: u64) -> Self {
        Self {
            intrinsics,
            markers,
            blob_radius_px: 1.5,
            blob_jitter_px: 0.0,
            refractory_us: 10,
            noise_rate: 0.0,
            contrast_threshold: 0.2,
            single_polarity: true,
            rng_seed: 0,
            duration_us,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if !(self.blob_radius_px > 0.0 && self.blob_radius_px.is_finite()) {
            return Err(Error::Config("blob_radius_px must be positive".into()));
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate.is_finite()) {
            return Err(Error::Config("noise_rate must be non-negative".into()));
        }
        if !(self.blob_jitter_px >= 0.0) {
            return Err(Error::Config("blob_jitter_px must be non-negative".into()));
        }
        for m in &self.markers {
            for mounted in &m.alms {
                mounted.alm.validate()?;
            }
        }
        Ok(())
    }

    pub fn marker_index(&self, id: &str) -> Option<usize> {
        self.markers.iter().position(|m| m.id == id)
    }
}

fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the seed and the stream identifiers
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Integer pixels covered by a disc of `radius` around `center`, clipped to the sensor.
pub fn rasterize_disc(center: &Vector2<f64>, radius: f64, width: u32, height: u32) -> Vec<(u16, u16)> {
    let inside = |u: i64, v: i64| u >= 0 && v >= 0 && u < width as i64 && v < height as i64;
    if radius < 1.0 {
        let (u, v) = (center.x.round() as i64, center.y.round() as i64);
        return if inside(u, v) {
            vec![(u as u16, v as u16)]
        } else {
            Vec::new()
        };
    }
    let r2 = radius * radius;
    let u0 = (center.x - radius).ceil() as i64;
    let u1 = (center.x + radius).floor() as i64;
    let v0 = (center.y - radius).ceil() as i64;
    let v1 = (center.y + radius).floor() as i64;
    let mut out = Vec::new();
    for v in v0.max(0)..=v1.min(height as i64 - 1) {
        for u in u0.max(0)..=u1.min(width as i64 - 1) {
            let du = u as f64 - center.x;
            let dv = v as f64 - center.y;
            if du * du + dv * dv <= r2 {
                out.push((u as u16, v as u16));
            }
        }
    }
    out
}

/// Generates the LED events of `scene` over `[0, duration_us)`.
///
/// The stream is sorted by `(t, u, v, led)` where `led` orders by marker,
/// mounted ALM and LED id.
pub fn simulate_blink_events(scene: &SimScene, duration_us: u64) -> Result<EventStream> {
    scene.validate()?;
    if duration_us == 0 {
        return Err(Error::Config("duration must be positive".into()));
    }
    let k = &scene.intrinsics;
    let jitter = if scene.blob_jitter_px > 0.0 {
        Some(Normal::new(0.0, scene.blob_jitter_px).expect("finite jitter"))
    } else {
        None
    };

    let mut raw: Vec<(u64, u16, u16, (usize, usize, u32))> = Vec::new();
    for (mi, marker) in scene.markers.iter().enumerate() {
        for (ai, mounted) in marker.alms.iter().enumerate() {
            for led in &mounted.alm.leds {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(scene.rng_seed, &[mi as u64, ai as u64, led.id as u64]));
                let period = led.period_us as u64;
                let mut t = led.phase_us as u64;
                while t < duration_us {
                    let pose = marker.trajectory.pose_at(t).compose(&mounted.offset);
                    let p = pose.transform_point(&led.position);
                    if let Ok(mut uv) = k.project(&p) {
                        if let Some(n) = &jitter {
                            uv.x += n.sample(&mut rng);
                            uv.y += n.sample(&mut rng);
                        }
                        for (u, v) in rasterize_disc(&uv, scene.blob_radius_px, k.width, k.height) {
                            raw.push((t, u, v, (mi, ai, led.id)));
                        }
                    }
                    t += period;
                }
            }
        }
    }
    raw.sort_unstable();

    let width = k.width as usize;
    let mut last = vec![u64::MAX; width * k.height as usize];
    let mut out = Vec::with_capacity(raw.len());
    for (t, u, v, _) in raw {
        let slot = &mut last[v as usize * width + u as usize];
        if *slot == u64::MAX || t - *slot > scene.refractory_us {
            *slot = t;
            out.push(Event::new(t, u, v, Polarity::Positive));
        }
    }
    Ok(out)
}

/// Merges Poisson background noise, uniform over the sensor and `[0, duration_us)`.
pub fn add_noise_events(stream: &[Event], scene: &SimScene, duration_us: u64) -> EventStream {
    if scene.noise_rate <= 0.0 || duration_us == 0 {
        return stream.to_vec();
    }
    let k = &scene.intrinsics;
    let mean = scene.noise_rate * duration_us as f64 * 1e-6 * k.width as f64 * k.height as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.rng_seed, &[u64::MAX]));
    let count = if mean > 0.0 {
        Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize
    } else {
        0
    };
    let mut noise: Vec<Event> = (0..count)
        .map(|_| {
            let t = rng.random_range(0..duration_us);
            let u = rng.random_range(0..k.width) as u16;
            let v = rng.random_range(0..k.height) as u16;
            let polarity = if scene.single_polarity || rng.random_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            Event::new(t, u, v, polarity)
        })
        .collect();
    noise.sort_unstable_by_key(|e| (e.t, e.u, e.v, e.polarity));

    let mut out = Vec::with_capacity(stream.len() + noise.len());
    let (mut i, mut j) = (0, 0);
    while i < stream.len() && j < noise.len() {
        if noise[j].t < stream[i].t {
            out.push(noise[j]);
            j += 1;
        } else {
            out.push(stream[i]);
            i += 1;
        }
    }
    out.extend_from_slice(&stream[i..]);
    out.extend_from_slice(&noise[j..]);
    out
}

/// Samples the body pose of marker `marker_index` at `0, p, 2p, …` up to the scene duration.
pub fn synth_ground_truth(
    scene: &SimScene,
    marker_index: usize,
    sample_period_us: u64,
) -> Result<Vec<(u64, Transform)>> {
    if sample_period_us == 0 {
        return Err(Error::Config("sample period must be positive".into()));
    }
    let marker = scene
        .markers
        .get(marker_index)
        .ok_or_else(|| Error::Config(format!("no marker with index {marker_index}")))?;
    Ok((0..=scene.duration_us)
        .step_by(sample_period_us as usize)
        .map(|t| (t, marker.trajectory.pose_at(t)))
        .collect())
}
