use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{IgnoredFields, IoError};
use crate::retarget::{landmark_index, landmark_label, HumanHandFrame, LandmarkPose, LANDMARKS};

pub const GLOVE_FORMAT: &str = "dexlink-glove";
pub const WRIST_FORMAT: &str = "dexlink-wrist";
pub const STREAM_VERSION: u32 = 1;

const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;
const IDENTITY_TOLERANCE: f64 = 1e-9;

/// Maps landmark labels used by a glove SDK onto the canonical labels.
pub type LabelAliases = BTreeMap<String, String>;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct LandmarkRecord {
    label: String,
    position_m: [f64; 3],
    orientation_wxyz: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct GloveRecord {
    timestamp_s: f64,
    landmarks: Vec<LandmarkRecord>,
}

#[derive(Serialize, Deserialize)]
struct WristRecord {
    timestamp_s: f64,
    position_m: [f64; 3],
    orientation_wxyz: [f64; 4],
}

/// Controller pose relative to its pose at the first sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WristSample {
    pub timestamp: f64,
    pub pose: Isometry3<f64>,
}

fn decode<T: DeserializeOwned>(line_no: usize, line: &str, what: &str, ignored: &mut IgnoredFields) -> Result<T, IoError> {
    let mut de = serde_json::Deserializer::from_str(line);
    serde_ignored::deserialize(&mut de, |p| ignored.note(what, format!("{p} (line {line_no})")))
        .map_err(|e| IoError::parse(line_no, e.to_string()))
}

/// Non-blank lines with 1-based line numbers, header checked; `None` for an empty stream.
fn records<R: BufRead>(
    reader: R,
    format: &'static str,
) -> Result<Option<Vec<(usize, String)>>, IoError> {
    let mut lines = Vec::new();
    for (i, l) in reader.lines().enumerate() {
        let l = l.map_err(|e| IoError::parse(i + 1, e.to_string()))?;
        if !l.trim().is_empty() {
            lines.push((i + 1, l));
        }
    }
    let Some((first_no, first)) = lines.first() else {
        return Ok(None);
    };
    let header: Header = serde_json::from_str(first).map_err(|e| IoError::parse(*first_no, format!("bad header: {e}")))?;
    if header.format != format {
        return Err(IoError::parse(
            *first_no,
            format!("expected a '{format}' stream, found '{}'", header.format),
        ));
    }
    if header.version != STREAM_VERSION {
        return Err(IoError::Version {
            what: format,
            found: header.version.to_string(),
            expected: STREAM_VERSION,
        });
    }
    Ok(Some(lines.split_off(1)))
}

fn check_quaternion(line: usize, q: &[f64; 4]) -> Result<(), IoError> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((n - 1.0).abs() <= QUATERNION_NORM_TOLERANCE) {
        return Err(IoError::parse(line, format!("quaternion norm {n} is not 1")));
    }
    Ok(())
}

fn check_finite(line: usize, values: &[f64]) -> Result<(), IoError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(IoError::parse(line, "non-finite value"))
    }
}

fn check_time(line: usize, previous: &mut Option<f64>, t: f64) -> Result<(), IoError> {
    check_finite(line, &[t])?;
    if let Some(p) = *previous {
        if !(t > p) {
            return Err(IoError::NonMonotoneTimestamp {
                line,
                previous: p,
                current: t,
            });
        }
    }
    *previous = Some(t);
    Ok(())
}

pub fn read_glove_stream<R: BufRead>(reader: R, aliases: &LabelAliases) -> Result<Vec<HumanHandFrame>, IoError> {
    let Some(lines) = records(reader, GLOVE_FORMAT)? else {
        return Ok(Vec::new());
    };
    let mut ignored = IgnoredFields::default();
    let mut previous = None;
    let mut frames = Vec::with_capacity(lines.len());
    for (no, line) in lines {
        let rec: GloveRecord = decode(no, &line, "glove stream", &mut ignored)?;
        check_time(no, &mut previous, rec.timestamp_s)?;
        if rec.landmarks.len() != LANDMARKS {
            return Err(IoError::parse(
                no,
                format!("expected {LANDMARKS} landmarks, found {}", rec.landmarks.len()),
            ));
        }
        let mut slots: Vec<Option<LandmarkPose>> = vec![None; LANDMARKS];
        for lm in &rec.landmarks {
            let label = aliases.get(&lm.label).unwrap_or(&lm.label);
            let idx = landmark_index(label).ok_or_else(|| IoError::parse(no, format!("unknown landmark label '{label}'")))?;
            check_finite(no, &lm.position_m)?;
            check_finite(no, &lm.orientation_wxyz)?;
            check_quaternion(no, &lm.orientation_wxyz)?;
            if slots[idx].is_some() {
                return Err(IoError::parse(no, format!("duplicate landmark '{label}'")));
            }
            slots[idx] = Some(LandmarkPose {
                position: Vector3::from(lm.position_m),
                orientation: lm.orientation_wxyz,
            });
        }
        frames.push(HumanHandFrame {
            timestamp: rec.timestamp_s,
            landmarks: slots.into_iter().map(|s| s.expect("25 unique labels fill every slot")).collect(),
        });
    }
    Ok(frames)
}

pub fn read_wrist_stream<R: BufRead>(reader: R) -> Result<Vec<WristSample>, IoError> {
    let Some(lines) = records(reader, WRIST_FORMAT)? else {
        return Ok(Vec::new());
    };
    let mut ignored = IgnoredFields::default();
    let mut previous = None;
    let mut out = Vec::with_capacity(lines.len());
    for (no, line) in lines {
        let rec: WristRecord = decode(no, &line, "wrist stream", &mut ignored)?;
        check_time(no, &mut previous, rec.timestamp_s)?;
        check_finite(no, &rec.position_m)?;
        check_finite(no, &rec.orientation_wxyz)?;
        check_quaternion(no, &rec.orientation_wxyz)?;
        let [w, x, y, z] = rec.orientation_wxyz;
        let rot = UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z));
        let pose = Isometry3::from_parts(Translation3::from(Vector3::from(rec.position_m)), rot);
        if out.is_empty() && (pose.translation.vector.norm() > IDENTITY_TOLERANCE || rot.angle() > IDENTITY_TOLERANCE) {
            return Err(IoError::parse(no, "first wrist pose must be the identity"));
        }
        out.push(WristSample {
            timestamp: rec.timestamp_s,
            pose,
        });
    }
    Ok(out)
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(|e| IoError::io(path, e))
}

pub fn parse_glove_stream(path: &Path, aliases: &LabelAliases) -> Result<Vec<HumanHandFrame>, IoError> {
    read_glove_stream(open(path)?, aliases)
}

pub fn parse_wrist_stream(path: &Path) -> Result<Vec<WristSample>, IoError> {
    read_wrist_stream(open(path)?)
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(std::io::Error::other)?;
    w.write_all(b"\n")
}

pub fn write_glove_stream<W: Write>(mut w: W, frames: &[HumanHandFrame]) -> std::io::Result<()> {
    write_line(
        &mut w,
        &Header {
            format: GLOVE_FORMAT.into(),
            version: STREAM_VERSION,
        },
    )?;
    for f in frames {
        let rec = GloveRecord {
            timestamp_s: f.timestamp,
            landmarks: f
                .landmarks
                .iter()
                .enumerate()
                .map(|(i, l)| LandmarkRecord {
                    label: landmark_label(i),
                    position_m: l.position.into(),
                    orientation_wxyz: l.orientation,
                })
                .collect(),
        };
        write_line(&mut w, &rec)?;
    }
    w.flush()
}

pub fn write_wrist_stream<W: Write>(mut w: W, samples: &[WristSample]) -> std::io::Result<()> {
    write_line(
        &mut w,
        &Header {
            format: WRIST_FORMAT.into(),
            version: STREAM_VERSION,
        },
    )?;
    for s in samples {
        let q = s.pose.rotation.quaternion();
        let rec = WristRecord {
            timestamp_s: s.timestamp,
            position_m: s.pose.translation.vector.into(),
            orientation_wxyz: [q.w, q.i, q.j, q.k],
        };
        write_line(&mut w, &rec)?;
    }
    w.flush()
}

pub fn write_glove_stream_file(path: &Path, frames: &[HumanHandFrame]) -> Result<(), IoError> {
    let f = File::create(path).map_err(|e| IoError::io(path, e))?;
    write_glove_stream(BufWriter::new(f), frames).map_err(|e| IoError::io(path, e))
}

pub fn write_wrist_stream_file(path: &Path, samples: &[WristSample]) -> Result<(), IoError> {
    let f = File::create(path).map_err(|e| IoError::io(path, e))?;
    write_wrist_stream(BufWriter::new(f), samples).map_err(|e| IoError::io(path, e))
}
