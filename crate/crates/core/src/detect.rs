//! Windowed LED detection.
//!
//! Events of one accumulation window are counted per pixel, pixels seeing
//! more than `T_d · f_min` events are grouped into 8-connected regions, and
//! each region's blink frequency is read off the histogram of per-pixel
//! inter-event intervals. Regions are finally assigned to configured markers
//! by frequency.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::sim::{AlmConfig, Event};

#[derive(Clone, Debug, PartialEq)]
pub struct DetectConfig {
    /// Lowest LED frequency that must be detectable, Hz.
    pub f_min_hz: f64,
    /// Accumulation window `T_d`, microseconds.
    pub window_us: u64,
    /// Smallest accepted region, pixels.
    pub min_area: usize,
    /// Relative frequency tolerance for matching regions to LEDs.
    pub match_tolerance: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self::with_f_min(2000.0)
    }
}

impl DetectConfig {
    /// Uses the shortest admissible window, `2 / f_min`.
    pub fn with_f_min(f_min_hz: f64) -> Self {
        Self {
            f_min_hz,
            window_us: min_window_us(f_min_hz),
            min_area: 3,
            match_tolerance: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_min_hz > 0.0 && self.f_min_hz.is_finite()) {
            return Err(Error::Config("f_min must be positive".into()));
        }
        if (self.window_us as f64) < 2e6 / self.f_min_hz - 1e-9 {
            return Err(Error::Config(format!(
                "detection window {} µs is shorter than two periods of f_min ({} µs)",
                self.window_us,
                2e6 / self.f_min_hz
            )));
        }
        if !(self.match_tolerance > 0.0) {
            return Err(Error::Config("match tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Per-pixel count a candidate pixel must exceed: `T_d · f_min`.
    pub fn count_threshold(&self) -> f64 {
        self.window_us as f64 * 1e-6 * self.f_min_hz
    }
}

/// Shortest window that shows two blinks of an `f_min` LED, microseconds.
pub fn min_window_us(f_min_hz: f64) -> u64 {
    (2e6 / f_min_hz).ceil() as u64
}

/// Per-pixel event counts of one window `[window_start, window_end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CountImage {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
    pub window_start: u64,
    pub window_end: u64,
}

impl CountImage {
    pub fn get(&self, u: u32, v: u32) -> u32 {
        self.counts[v as usize * self.width as usize + u as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn window_us(&self) -> u64 {
        self.window_end - self.window_start
    }

    /// Binary portable greymap; counts are clamped to 255.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.counts.iter().map(|&c| c.min(255) as u8).collect();
        out.write_all(&bytes)
    }
}

/// Counts the events falling into `[window_start, window_start + T_d)`.
pub fn accumulate(
    events: &[Event],
    window_start: u64,
    config: &DetectConfig,
    width: u32,
    height: u32,
) -> Result<CountImage> {
    config.validate()?;
    let window_end = window_start + config.window_us;
    let mut counts = vec![0u32; width as usize * height as usize];
    for e in events {
        if e.t >= window_start && e.t < window_end && (e.u as u32) < width && (e.v as u32) < height {
            counts[e.v as usize * width as usize + e.u as usize] += 1;
        }
    }
    Ok(CountImage {
        width,
        height,
        counts,
        window_start,
        window_end,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateRegion {
    pub pixels: Vec<(u16, u16)>,
    /// Count-weighted center of mass.
    pub centroid: Vector2<f64>,
    pub area: usize,
    /// Inclusive bounding box `(u_min, v_min, u_max, v_max)`.
    pub bbox: (u16, u16, u16, u16),
    /// Count-weighted mean pixel distance from the centroid.
    pub mean_distance: f64,
    /// Indices into the window's event buffer, filled by [`collect_region_events`].
    pub event_refs: Vec<usize>,
}

impl CandidateRegion {
    /// Twice the mean pixel distance, the same rule trackers apply to their
    /// events, floored at one pixel.
    pub fn radius_estimate(&self) -> f64 {
        (2.0 * self.mean_distance).max(1.0)
    }
}

/// 8-connected regions of pixels with count `> T_d · f_min` and at least `min_area` pixels.
pub fn find_candidates(img: &CountImage, f_min_hz: f64, min_area: usize) -> Vec<CandidateRegion> {
    let threshold = img.window_us() as f64 * 1e-6 * f_min_hz;
    let w = img.width as usize;
    let hot: Vec<(u16, u16)> = img
        .counts
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c as f64 > threshold)
        .map(|(i, _)| ((i % w) as u16, (i / w) as u16))
        .collect();
    label_regions(&hot, |u, v| img.get(u as u32, v as u32), min_area)
}

/// Connected-component labelling over hot pixels given in row-major order.
fn label_regions(hot: &[(u16, u16)], count: impl Fn(u16, u16) -> u32, min_area: usize) -> Vec<CandidateRegion> {
    let mut seen: HashMap<(u16, u16), bool> = hot.iter().map(|&p| (p, false)).collect();
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();

    for &start in hot {
        if seen[&start] {
            continue;
        }
        seen.insert(start, true);
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some((u, v)) = queue.pop_front() {
            pixels.push((u, v));
            for dv in -1i32..=1 {
                for du in -1i32..=1 {
                    let (nu, nv) = (u as i32 + du, v as i32 + dv);
                    if nu < 0 || nv < 0 || nu > u16::MAX as i32 || nv > u16::MAX as i32 {
                        continue;
                    }
                    let n = (nu as u16, nv as u16);
                    if let Some(s) = seen.get_mut(&n) {
                        if !*s {
                            *s = true;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
        if pixels.len() < min_area {
            continue;
        }
        pixels.sort_unstable_by_key(|&(u, v)| (v, u));
        let (mut m0, mut mu, mut mv) = (0.0, 0.0, 0.0);
        let mut bbox = (u16::MAX, u16::MAX, 0, 0);
        for &(u, v) in &pixels {
            let c = count(u, v) as f64;
            m0 += c;
            mu += c * u as f64;
            mv += c * v as f64;
            bbox = (bbox.0.min(u), bbox.1.min(v), bbox.2.max(u), bbox.3.max(v));
        }
        let centroid = Vector2::new(mu / m0, mv / m0);
        let spread: f64 = pixels
            .iter()
            .map(|&(u, v)| count(u, v) as f64 * (Vector2::new(u as f64, v as f64) - centroid).norm())
            .sum();
        regions.push(CandidateRegion {
            area: pixels.len(),
            pixels,
            centroid,
            bbox,
            mean_distance: spread / m0,
            event_refs: Vec::new(),
        });
    }
    regions
}

/// Same result as [`accumulate`] followed by [`find_candidates`], touching only pixels with events.
pub fn find_candidates_sparse(
    events: &[Event],
    window_start: u64,
    config: &DetectConfig,
    width: u32,
    height: u32,
) -> Result<Vec<CandidateRegion>> {
    config.validate()?;
    let window_end = window_start + config.window_us;
    let mut counts: HashMap<(u16, u16), u32> = HashMap::new();
    for e in events {
        if e.t >= window_start && e.t < window_end && (e.u as u32) < width && (e.v as u32) < height {
            *counts.entry((e.u, e.v)).or_insert(0) += 1;
        }
    }
    let threshold = config.window_us as f64 * 1e-6 * config.f_min_hz;
    let mut hot: Vec<(u16, u16)> = counts
        .iter()
        .filter(|&(_, &c)| c as f64 > threshold)
        .map(|(&p, _)| p)
        .collect();
    hot.sort_unstable_by_key(|&(u, v)| (v, u));
    Ok(label_regions(&hot, |u, v| counts[&(u, v)], config.min_area))
}

/// Fills `event_refs` of every region with the indices of window events on its pixels.
pub fn collect_region_events(regions: &mut [CandidateRegion], events: &[Event], window: (u64, u64)) {
    let mut owner: HashMap<(u16, u16), usize> = HashMap::new();
    for (ri, r) in regions.iter_mut().enumerate() {
        r.event_refs.clear();
        for &px in &r.pixels {
            owner.insert(px, ri);
        }
    }
    for (i, e) in events.iter().enumerate() {
        if e.t < window.0 || e.t >= window.1 {
            continue;
        }
        if let Some(&ri) = owner.get(&(e.u, e.v)) {
            regions[ri].event_refs.push(i);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrequencyEstimate {
    pub frequency_hz: f64,
    pub histogram_peak_us: u64,
    /// Share of all inter-event intervals falling into the peak bin.
    pub peak_fraction: f64,
}

/// Blink frequency from the 1 µs histogram of per-pixel inter-event intervals.
///
/// Intervals are taken between consecutive events of the same pixel and pooled
/// over the region. Ties between bins resolve to the shorter interval.
pub fn estimate_frequency<'a, I>(events: I) -> Result<FrequencyEstimate>
where
    I: IntoIterator<Item = &'a Event>,
{
    let mut last: HashMap<(u16, u16), u64> = HashMap::new();
    let mut histogram: BTreeMap<u64, u32> = BTreeMap::new();
    let mut total = 0u32;
    for e in events {
        if let Some(prev) = last.insert((e.u, e.v), e.t) {
            let dt = e.t.abs_diff(prev);
            if dt > 0 {
                *histogram.entry(dt).or_insert(0) += 1;
                total += 1;
            }
        }
    }
    let (&peak, &count) = histogram
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .ok_or(Error::InsufficientEvents)?;
    Ok(FrequencyEstimate {
        frequency_hz: 1e6 / peak as f64,
        histogram_peak_us: peak,
        peak_fraction: count as f64 / total as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedSeed {
    pub led_id: u32,
    pub centroid: Vector2<f64>,
    pub frequency_hz: f64,
    pub radius: f64,
}

/// A marker whose LEDs were all found in one window.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectedMarker {
    /// Index into the ALM list passed to [`match_marker`].
    pub alm_index: usize,
    pub alm_name: String,
    pub seeds: Vec<LedSeed>,
    pub window_end: u64,
}

/// Assigns candidates to ALMs by nearest frequency within `tol` (relative).
///
/// An ALM is reported only when every one of its LEDs matches exactly one
/// candidate and no candidate serves two LEDs.
pub fn match_marker(
    candidates: &[(CandidateRegion, FrequencyEstimate)],
    alms: &[AlmConfig],
    tol: f64,
) -> Vec<DetectedMarker> {
    let mut out = Vec::new();
    'alm: for (ai, alm) in alms.iter().enumerate() {
        let mut used = vec![false; candidates.len()];
        let mut seeds = Vec::with_capacity(alm.leds.len());
        for led in &alm.leds {
            let f = led.frequency_hz();
            let mut hits = candidates
                .iter()
                .enumerate()
                .filter(|(_, (_, est))| ((est.frequency_hz - f) / f).abs() <= tol);
            let Some((ci, (region, est))) = hits.next() else {
                continue 'alm;
            };
            if hits.next().is_some() || used[ci] {
                continue 'alm;
            }
            used[ci] = true;
            seeds.push(LedSeed {
                led_id: led.id,
                centroid: region.centroid,
                frequency_hz: est.frequency_hz,
                radius: region.radius_estimate(),
            });
        }
        out.push(DetectedMarker {
            alm_index: ai,
            alm_name: alm.name.clone(),
            seeds,
            window_end: 0,
        });
    }
    out
}

/// Runs the full detection chain on one window of events.
pub fn detect_window(
    events: &[Event],
    window_start: u64,
    config: &DetectConfig,
    alms: &[AlmConfig],
    width: u32,
    height: u32,
) -> Result<Vec<DetectedMarker>> {
    let window = (window_start, window_start + config.window_us);
    let mut regions = find_candidates_sparse(events, window_start, config, width, height)?;
    collect_region_events(&mut regions, events, window);
    let candidates: Vec<_> = regions
        .into_iter()
        .filter_map(|r| {
            let est = estimate_frequency(r.event_refs.iter().map(|&i| &events[i])).ok()?;
            Some((r, est))
        })
        .collect();
    let mut found = match_marker(&candidates, alms, config.match_tolerance);
    for m in &mut found {
        m.window_end = window.1;
    }
    Ok(found)
}
