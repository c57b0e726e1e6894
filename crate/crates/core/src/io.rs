//! CSV formats: event streams, ground truth, pose logs and calibration measurements.
//!
//! Transforms are written as 12 columns, rotation row-major then displacement.
//! Floats use the shortest representation that parses back to the same value.

use std::io::{Read, Write};

use nalgebra::Matrix3;

use crate::calib::CalibMeasurement;
use crate::error::{Error, Result};
use crate::geometry::Transform;
use crate::pipeline::{GroundTruth, PoseLog, PoseRecord};
use crate::sim::{Event, EventStream, Polarity};

const TRANSFORM_FIELDS: [&str; 12] = [
    "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22", "dx", "dy", "dz",
];

/// Rotations read from files may carry rounding; anything this close to SO(3)
/// is projected onto it.
const ROTATION_READ_TOL: f64 = 1e-5;

fn transform_header(prefix: &str) -> impl Iterator<Item = String> + '_ {
    TRANSFORM_FIELDS.iter().map(move |f| format!("{prefix}{f}"))
}

fn push_transform(row: &mut Vec<String>, t: &Transform) {
    row.extend(t.to_row_major().iter().map(|x| x.to_string()));
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad {what} value {s:?}")))
}

fn parse_u64(s: &str, what: &str) -> Result<u64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad {what} value {s:?}")))
}

/// Parses 12 row-major values, projecting nearly orthonormal rotations onto SO(3).
pub fn parse_transform(fields: &[&str]) -> Result<Transform> {
    let v = fields
        .iter()
        .map(|f| parse_f64(f, "transform"))
        .collect::<Result<Vec<_>>>()?;
    match Transform::from_row_major(&v) {
        Ok(t) => Ok(t),
        Err(Error::NotARotation(msg)) => {
            let r = Matrix3::from_row_slice(&v[..9]);
            let off = (r.transpose() * r - Matrix3::identity()).amax();
            if off < ROTATION_READ_TOL && r.determinant() > 0.0 && v.iter().all(|x| x.is_finite()) {
                Ok(Transform::from_approximate(
                    &r,
                    nalgebra::Vector3::new(v[9], v[10], v[11]),
                ))
            } else {
                Err(Error::NotARotation(msg))
            }
        }
        Err(e) => Err(e),
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn expect_header<R: Read>(rd: &mut csv::Reader<R>, expected: &[String]) -> Result<()> {
    let h = rd.headers()?;
    if h.len() != expected.len() || h.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(Error::Parse(format!(
            "unexpected header {:?}, expected {:?}",
            h.iter().collect::<Vec<_>>(),
            expected
        )));
    }
    Ok(())
}

pub fn write_events_csv<W: Write>(w: W, events: &[Event]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t_us", "u", "v", "p"])?;
    for e in events {
        wr.write_record([
            e.t.to_string(),
            e.u.to_string(),
            e.v.to_string(),
            e.polarity.as_i8().to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_events_csv<R: Read>(r: R) -> Result<EventStream> {
    let mut rd = reader(r);
    expect_header(&mut rd, &["t_us", "u", "v", "p"].map(String::from))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let u = rec[1]
            .parse()
            .map_err(|_| Error::Parse(format!("bad pixel u {:?}", &rec[1])))?;
        let v = rec[2]
            .parse()
            .map_err(|_| Error::Parse(format!("bad pixel v {:?}", &rec[2])))?;
        let p = rec[3]
            .parse::<i8>()
            .ok()
            .and_then(Polarity::from_i8)
            .ok_or_else(|| Error::Parse(format!("polarity must be 1 or -1, got {:?}", &rec[3])))?;
        out.push(Event::new(parse_u64(&rec[0], "t_us")?, u, v, p));
    }
    Ok(out)
}

fn ground_truth_header() -> Vec<String> {
    ["t_us".to_string(), "marker_id".to_string()]
        .into_iter()
        .chain(transform_header(""))
        .collect()
}

/// Rows ordered by time, then marker id.
pub fn write_ground_truth_csv<W: Write>(w: W, gt: &GroundTruth) -> Result<()> {
    let mut rows: Vec<(u64, &str, &Transform)> = gt
        .iter()
        .flat_map(|(id, s)| s.iter().map(move |(t, p)| (*t, id.as_str(), p)))
        .collect();
    rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(ground_truth_header())?;
    for (t, id, p) in rows {
        let mut row = vec![t.to_string(), id.to_string()];
        push_transform(&mut row, p);
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_ground_truth_csv<R: Read>(r: R) -> Result<GroundTruth> {
    let mut rd = reader(r);
    expect_header(&mut rd, &ground_truth_header())?;
    let mut gt = GroundTruth::new();
    for rec in rd.records() {
        let rec = rec?;
        let fields: Vec<&str> = rec.iter().collect();
        let t = parse_u64(fields[0], "t_us")?;
        let pose = parse_transform(&fields[2..14])?;
        gt.entry(fields[1].to_string()).or_default().push((t, pose));
    }
    for samples in gt.values_mut() {
        samples.sort_by_key(|(t, _)| *t);
    }
    Ok(gt)
}

fn pose_log_header() -> Vec<String> {
    ["t_us".to_string(), "marker_id".to_string()]
        .into_iter()
        .chain(transform_header(""))
        .chain(["rms_px".to_string(), "lost_flag".to_string()])
        .collect()
}

pub fn write_pose_log_csv<W: Write>(w: W, log: &PoseLog) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(pose_log_header())?;
    for r in &log.records {
        let mut row = vec![r.t_us.to_string(), r.marker_id.clone()];
        push_transform(&mut row, &r.pose);
        row.push(r.rms_px.to_string());
        row.push(u8::from(r.lost).to_string());
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_pose_log_csv<R: Read>(r: R) -> Result<PoseLog> {
    let mut rd = reader(r);
    expect_header(&mut rd, &pose_log_header())?;
    let mut records = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let fields: Vec<&str> = rec.iter().collect();
        let lost = match fields[15] {
            "0" | "false" => false,
            "1" | "true" => true,
            other => return Err(Error::Parse(format!("bad lost_flag {other:?}"))),
        };
        records.push(PoseRecord {
            t_us: parse_u64(fields[0], "t_us")?,
            marker_id: fields[1].to_string(),
            pose: parse_transform(&fields[2..14])?,
            rms_px: parse_f64(fields[14], "rms_px")?,
            lost,
            latency_us: None,
            wall_us: None,
        });
    }
    Ok(PoseLog { records })
}

fn measurement_header(markers: usize) -> Vec<String> {
    let mut h = vec!["t_us".to_string()];
    h.extend(transform_header("wcb_"));
    for i in 0..markers {
        h.extend(transform_header(&format!("wmb{i}_")));
        h.extend(transform_header(&format!("cm{i}_")));
    }
    h
}

/// Columns: `t_us`, the camera body in world (`wcb_*`), then per marker `i` the
/// marker body in world (`wmb{i}_*`) and the marker in camera (`cm{i}_*`).
pub fn write_measurements_csv<W: Write>(w: W, data: &[CalibMeasurement]) -> Result<()> {
    let markers = data.first().map_or(0, |m| m.marker_count());
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(measurement_header(markers))?;
    for m in data {
        let mut row = vec![m.t_us.to_string()];
        push_transform(&mut row, &m.world_camera_body);
        for i in 0..markers {
            push_transform(&mut row, &m.world_marker_body[i]);
            push_transform(&mut row, &m.camera_marker[i]);
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_measurements_csv<R: Read>(r: R) -> Result<Vec<CalibMeasurement>> {
    let mut rd = reader(r);
    let cols = rd.headers()?.len();
    if cols < 13 || (cols - 13) % 24 != 0 {
        return Err(Error::Parse(format!(
            "{cols} columns do not match t_us + 12 + 24·markers"
        )));
    }
    let markers = (cols - 13) / 24;
    expect_header(&mut rd, &measurement_header(markers))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let f: Vec<&str> = rec.iter().collect();
        let mut m = CalibMeasurement {
            t_us: parse_u64(f[0], "t_us")?,
            world_camera_body: parse_transform(&f[1..13])?,
            world_marker_body: Vec::with_capacity(markers),
            camera_marker: Vec::with_capacity(markers),
        };
        for i in 0..markers {
            let o = 13 + 24 * i;
            m.world_marker_body.push(parse_transform(&f[o..o + 12])?);
            m.camera_marker.push(parse_transform(&f[o + 12..o + 24])?);
        }
        out.push(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{synthetic_dataset, SyntheticNoise};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    #[test]
    fn event_csv_layout() {
        let ev = vec![
            Event::new(0, 3, 4, Polarity::Positive),
            Event::new(17, 1279, 719, Polarity::Negative),
        ];
        let mut buf = Vec::new();
        write_events_csv(&mut buf, &ev).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "t_us,u,v,p\n0,3,4,1\n17,1279,719,-1\n"
        );
        assert_eq!(read_events_csv(buf.as_slice()).unwrap(), ev);
    }

    #[test]
    fn bad_polarity_and_header_are_rejected() {
        assert!(read_events_csv("t_us,u,v,p\n0,1,1,0\n".as_bytes()).is_err());
        assert!(read_events_csv("t,u,v,p\n0,1,1,1\n".as_bytes()).is_err());
    }

    #[test]
    fn pose_log_round_trip_is_bit_exact() {
        let pose = Transform::from_axis_angle(
            &Vector3::new(1.0, 2.0, 3.0).normalize(),
            0.7,
            Vector3::new(0.1, -0.2, 1.3),
        );
        let log = PoseLog {
            records: vec![
                PoseRecord {
                    t_us: 250,
                    marker_id: "board".into(),
                    pose,
                    rms_px: 0.123456789,
                    lost: false,
                    latency_us: None,
                    wall_us: None,
                },
                PoseRecord {
                    t_us: 500,
                    marker_id: "board".into(),
                    pose: Transform::identity(),
                    rms_px: f64::NAN,
                    lost: true,
                    latency_us: None,
                    wall_us: None,
                },
            ],
        };
        let mut buf = Vec::new();
        write_pose_log_csv(&mut buf, &log).unwrap();
        let back = read_pose_log_csv(buf.as_slice()).unwrap();
        assert_eq!(back.records[0], log.records[0]);
        assert!(back.records[1].lost && back.records[1].rms_px.is_nan());
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t_us,marker_id,r00,r01,r02,r10,r11,r12,r20,r21,r22,dx,dy,dz,rms_px,lost_flag\n"));
    }

    #[test]
    fn measurement_round_trip() {
        let (data, _) = synthetic_dataset(5, 2, SyntheticNoise::NONE, 9);
        let mut buf = Vec::new();
        write_measurements_csv(&mut buf, &data).unwrap();
        assert_eq!(read_measurements_csv(buf.as_slice()).unwrap(), data);
    }

    #[test]
    fn rounded_rotations_are_projected() {
        let fields = ["0.999999", "0", "0", "0", "1", "0", "0", "0", "1", "0", "0", "1"];
        let t = parse_transform(&fields).unwrap();
        assert!((t.rotation()[(0, 0)] - 1.0).abs() < 1e-15);
        let bad = ["0.9", "0", "0", "0", "1", "0", "0", "0", "1", "0", "0", "1"];
        assert!(parse_transform(&bad).is_err());
    }

    proptest! {
        #[test]
        fn ground_truth_round_trip(
            poses in prop::collection::vec((prop::array::uniform3(-3.0f64..3.0), prop::array::uniform3(-5.0f64..5.0)), 1..20),
        ) {
            let samples: Vec<_> = poses
                .iter()
                .enumerate()
                .map(|(i, (w, d))| (i as u64 * 1000, Transform::from_rotation_vector(&Vector3::from(*w), Vector3::from(*d))))
                .collect();
            let gt: GroundTruth = [("m".to_string(), samples)].into_iter().collect();
            let mut buf = Vec::new();
            write_ground_truth_csv(&mut buf, &gt).unwrap();
            prop_assert_eq!(read_ground_truth_csv(buf.as_slice()).unwrap(), gt);
        }
    }
}
