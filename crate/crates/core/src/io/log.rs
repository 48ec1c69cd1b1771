use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::IoError;
use crate::armik::ARM_DOF;
use crate::hand::{ACTUATORS, DIGIT_NAMES, JOINTS};
use crate::runtime::{CommandLog, CommandTick, TickLatency};

pub const COMMAND_LOG_VERSION: u32 = 1;
const COMMAND_TAG: &str = "dexlink-command-log";
const LATENCY_TAG: &str = "dexlink-latency-log";
const LATENCY_COLUMNS: [&str; 4] = ["retarget_us", "hand_ik_us", "arm_us", "tick_us"];

fn command_columns() -> Vec<String> {
    let mut c = vec!["t_s".to_string(), "flags".to_string()];
    for name in DIGIT_NAMES {
        for j in 1..=4 {
            c.push(format!("q_{name}_{j}_rad"));
        }
    }
    for name in DIGIT_NAMES {
        for k in 1..=3 {
            c.push(format!("d_{name}_{k}_m"));
        }
    }
    for i in 1..=ARM_DOF {
        c.push(format!("arm_qd_{i}_rad_s"));
    }
    c
}

/// Shortest text that parses back to the same bits.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn version_line(tag: &str) -> String {
    format!("# {tag} v{COMMAND_LOG_VERSION}")
}

pub fn write_command_log<W: Write>(w: W, log: &CommandLog) -> Result<(), csv::Error> {
    let mut w = BufWriter::new(w);
    writeln!(w, "{}", version_line(COMMAND_TAG))?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(command_columns())?;
    for t in &log.ticks {
        let mut row = Vec::with_capacity(2 + JOINTS + ACTUATORS + ARM_DOF);
        row.push(num(t.t));
        row.push(t.flags.to_string());
        row.extend(t.q.iter().chain(&t.d).chain(&t.arm_q_dot).map(|v| num(*v)));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_latency_log<W: Write>(w: W, log: &CommandLog) -> Result<(), csv::Error> {
    let mut w = BufWriter::new(w);
    writeln!(w, "{}", version_line(LATENCY_TAG))?;
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["t_s"];
    header.extend(LATENCY_COLUMNS);
    out.write_record(&header)?;
    for (t, l) in log.ticks.iter().zip(&log.latencies) {
        out.write_record([num(t.t), num(l.retarget_us), num(l.hand_ik_us), num(l.arm_us), num(l.tick_us)])?;
    }
    out.flush()?;
    Ok(())
}

fn csv_to_io(path: &Path, e: csv::Error) -> IoError {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => IoError::io(path, e),
        other => IoError::Config(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_command_log_file(path: &Path, log: &CommandLog) -> Result<(), IoError> {
    let f = File::create(path).map_err(|e| IoError::io(path, e))?;
    write_command_log(f, log).map_err(|e| csv_to_io(path, e))
}

pub fn write_latency_log_file(path: &Path, log: &CommandLog) -> Result<(), IoError> {
    let f = File::create(path).map_err(|e| IoError::io(path, e))?;
    write_latency_log(f, log).map_err(|e| csv_to_io(path, e))
}

/// Checks the version line and returns a CSV reader over the rest.
fn open_table<R: Read>(reader: R, tag: &'static str) -> Result<csv::Reader<BufReader<R>>, IoError> {
    let mut reader = BufReader::new(reader);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| IoError::parse(1, e.to_string()))?;
    let first = first.trim_end();
    let version = first
        .strip_prefix("# ")
        .and_then(|r| r.strip_prefix(tag))
        .and_then(|r| r.trim().strip_prefix('v'))
        .ok_or_else(|| IoError::parse(1, format!("expected '# {tag} v<N>' header line")))?;
    if version != COMMAND_LOG_VERSION.to_string() {
        return Err(IoError::Version {
            what: tag,
            found: version.to_string(),
            expected: COMMAND_LOG_VERSION,
        });
    }
    Ok(csv::ReaderBuilder::new().flexible(false).from_reader(reader))
}

/// Column index of each required name; extra columns are warned about and skipped.
fn column_map<R: Read>(rdr: &mut csv::Reader<R>, required: &[String], what: &str) -> Result<Vec<usize>, IoError> {
    let header = rdr.headers().map_err(|e| IoError::parse(2, e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().collect();
    for extra in names.iter().filter(|n| !required.iter().any(|r| r == *n)) {
        ::log::warn!("{what}: ignoring unknown column '{extra}'");
    }
    required
        .iter()
        .map(|r| {
            names
                .iter()
                .position(|n| n == r)
                .ok_or_else(|| IoError::parse(2, format!("missing column '{r}'")))
        })
        .collect()
}

fn rows<R: Read>(
    rdr: &mut csv::Reader<R>,
    cols: &[usize],
    mut each: impl FnMut(usize, &[&str]) -> Result<(), IoError>,
) -> Result<(), IoError> {
    for rec in rdr.records() {
        // One extra line for the version header.
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize + 1).unwrap_or(0);
            IoError::parse(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize + 1).unwrap_or(0);
        let fields: Vec<&str> = cols.iter().map(|&c| rec.get(c).unwrap_or("")).collect();
        each(line, &fields)?;
    }
    Ok(())
}

fn parse_f64(line: usize, s: &str, col: &str) -> Result<f64, IoError> {
    s.trim()
        .parse()
        .map_err(|_| IoError::parse(line, format!("column '{col}': '{s}' is not a number")))
}

fn check_time(line: usize, previous: &mut Option<f64>, t: f64) -> Result<(), IoError> {
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

pub fn read_command_log<R: Read>(reader: R) -> Result<CommandLog, IoError> {
    let mut rdr = open_table(reader, COMMAND_TAG)?;
    let names = command_columns();
    let cols = column_map(&mut rdr, &names, "command log")?;
    let mut log = CommandLog::default();
    let mut previous = None;
    rows(&mut rdr, &cols, |line, f| {
        let mut v = Vec::with_capacity(names.len());
        for (i, s) in f.iter().enumerate() {
            if i == 1 {
                v.push(0.0);
            } else {
                v.push(parse_f64(line, s, &names[i])?);
            }
        }
        let flags = f[1]
            .trim()
            .parse()
            .map_err(|_| IoError::parse(line, format!("column 'flags': '{}' is not an integer", f[1])))?;
        check_time(line, &mut previous, v[0])?;
        let mut tick = CommandTick {
            t: v[0],
            flags,
            ..Default::default()
        };
        tick.q.copy_from_slice(&v[2..2 + JOINTS]);
        tick.d.copy_from_slice(&v[2 + JOINTS..2 + JOINTS + ACTUATORS]);
        tick.arm_q_dot.copy_from_slice(&v[2 + JOINTS + ACTUATORS..]);
        log.ticks.push(tick);
        Ok(())
    })?;
    Ok(log)
}

/// Timestamps and latencies of a latency sidecar.
pub fn read_latency_log<R: Read>(reader: R) -> Result<Vec<(f64, TickLatency)>, IoError> {
    let mut rdr = open_table(reader, LATENCY_TAG)?;
    let mut names = vec!["t_s".to_string()];
    names.extend(LATENCY_COLUMNS.iter().map(|s| s.to_string()));
    let cols = column_map(&mut rdr, &names, "latency log")?;
    let mut out = Vec::new();
    let mut previous = None;
    rows(&mut rdr, &cols, |line, f| {
        let v: Vec<f64> = f
            .iter()
            .zip(&names)
            .map(|(s, n)| parse_f64(line, s, n))
            .collect::<Result<_, _>>()?;
        check_time(line, &mut previous, v[0])?;
        out.push((
            v[0],
            TickLatency {
                retarget_us: v[1],
                hand_ik_us: v[2],
                arm_us: v[3],
                tick_us: v[4],
            },
        ));
        Ok(())
    })?;
    Ok(out)
}

pub fn parse_command_log(path: &Path) -> Result<CommandLog, IoError> {
    read_command_log(File::open(path).map_err(|e| IoError::io(path, e))?)
}

pub fn parse_latency_log(path: &Path) -> Result<Vec<(f64, TickLatency)>, IoError> {
    read_latency_log(File::open(path).map_err(|e| IoError::io(path, e))?)
}
