//! Fingertip-distance traces and a small column table for tabular output.

use std::io::Write;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::hand::{hand_fk, HandGeometry, DIGITS, DIGIT_NAMES};
use crate::retarget::HumanHandFrame;
use crate::runtime::CommandLog;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("unknown fingertip pair '{0}' (expected e.g. thumb-index)")]
    UnknownPair(String),
    #[error("nothing to measure: give a command log, a glove stream or both")]
    NoInput,
}

/// Named columns of numbers, written as CSV or as one JSON object per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.columns)?;
        for r in &self.rows {
            out.write_record(r.iter().map(|v| format!("{v:?}")))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_json_lines<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.rows {
            let obj: Map<String, Value> = self
                .columns
                .iter()
                .zip(r)
                .map(|(c, v)| (c.clone(), serde_json::Number::from_f64(*v).map_or(Value::Null, Value::Number)))
                .collect();
            serde_json::to_writer(&mut w, &obj)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Parses `"thumb-index"` style pair names into digit indices.
pub fn parse_pair(name: &str) -> Result<(usize, usize), MetricsError> {
    let unknown = || MetricsError::UnknownPair(name.to_string());
    let (a, b) = name.split_once('-').ok_or_else(unknown)?;
    let digit = |s: &str| DIGIT_NAMES.iter().position(|n| *n == s.trim());
    match (digit(a), digit(b)) {
        (Some(a), Some(b)) if a != b && a < DIGITS && b < DIGITS => Ok((a, b)),
        _ => Err(unknown()),
    }
}

fn human_gap(f: &HumanHandFrame, (a, b): (usize, usize)) -> f64 {
    let tip = |d: usize| f.landmarks[5 * d + 4].position;
    (tip(a) - tip(b)).norm()
}

/// Fingertip distances over time. With a log there is one row per tick and
/// the human columns (if a stream is given) hold the newest frame at or
/// before the tick; with only a stream there is one row per frame.
pub fn fingertip_distances(
    log: Option<&CommandLog>,
    glove: Option<&[HumanHandFrame]>,
    g: &HandGeometry,
    pairs: &[&str],
) -> Result<Table, MetricsError> {
    let parsed: Vec<(usize, usize)> = pairs.iter().map(|p| parse_pair(p)).collect::<Result<_, _>>()?;
    let mut columns = vec!["t_s".to_string()];
    for p in pairs {
        if glove.is_some() {
            columns.push(format!("human_{p}_m"));
        }
        if log.is_some() {
            columns.push(format!("robot_{p}_m"));
        }
    }
    let rows = match (log, glove) {
        (None, None) => return Err(MetricsError::NoInput),
        (None, Some(frames)) => frames
            .iter()
            .map(|f| std::iter::once(f.timestamp).chain(parsed.iter().map(|p| human_gap(f, *p))).collect())
            .collect(),
        (Some(log), frames) => {
            let mut cursor = 0;
            log.ticks
                .iter()
                .map(|tick| {
                    let human = frames.map(|fr| {
                        while cursor + 1 < fr.len() && fr[cursor + 1].timestamp <= tick.t {
                            cursor += 1;
                        }
                        &fr[cursor]
                    });
                    let kp = hand_fk(&tick.joints(), g);
                    let mut row = vec![tick.t];
                    for &(a, b) in &parsed {
                        if let Some(f) = human {
                            row.push(human_gap(f, (a, b)));
                        }
                        row.push((kp.point(a, 3) - kp.point(b, 3)).norm());
                    }
                    row
                })
                .collect()
        }
    };
    Ok(Table { columns, rows })
}
