use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};
use thiserror::Error;

use dexlink::armik::{ready_pose, ArmIkConfig, ArmModel};
use dexlink::bench::run_bench;
use dexlink::finger::{ActuatorState, FingerError, FingerJointState};
use dexlink::hand::{digit_fk, digit_ik, HandError, HandGeometry, DIGITS, DIGIT_NAMES};
use dexlink::io::{
    parse_command_log, parse_glove_stream, save_toml, write_command_log_file, write_glove_stream_file,
    write_latency_log_file, write_wrist_stream_file, ArmConfigFile, HandConfigFile, IoError, LabelAliases,
    RetargetConfigFile, CONFIG_VERSION,
};
use dexlink::metrics::{fingertip_distances, MetricsError, Table};
use dexlink::retarget::{KeyvectorSpec, RetargetConfig};
use dexlink::runtime::{latency_report, run_replay, Mode, HAND_HELD, RuntimeError, SessionConfig};
use dexlink::synth::{pinch_trajectory, wrist_motion};

const EXIT_PARSE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_NO_CONVERGENCE: u8 = 4;
const EXIT_TRAVEL: u8 = 5;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "dexlink", version, about = "Kinematics, retargeting replay and benchmarks for a linkage-driven hand and arm")]
struct Cli {
    /// Directory that relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    config: PathBuf,
    /// Output format for tables printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    JsonLines,
}

#[derive(Args)]
struct HandArg {
    /// Hand geometry file; the built-in reference hand when omitted.
    #[arg(long)]
    hand: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Joint angles reached by the given screw displacements.
    Fk {
        #[command(flatten)]
        hand: HandArg,
        /// Digit name, or `all` for the whole hand.
        #[arg(long, default_value = "index")]
        digit: String,
        /// Screw displacements in metres, three per digit.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        d: Vec<f64>,
    },
    /// Screw displacements that realize the given joint angles.
    Ik {
        #[command(flatten)]
        hand: HandArg,
        #[arg(long, default_value = "index")]
        digit: String,
        /// Joint angles in radians, three or four per digit (the DIP value is ignored).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        q: Vec<f64>,
    },
    /// Check a hand geometry file and print its zero-configuration residuals.
    ValidateGeometry {
        #[command(flatten)]
        hand: HandArg,
    },
    /// Replay a session and write its command log.
    Replay {
        session: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-tick solve latencies here.
        #[arg(long)]
        latency_out: Option<PathBuf>,
        /// Override the session's worker thread count.
        #[arg(long)]
        threads: Option<usize>,
        /// Override the session's pacing mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Fingertip distances over time from a command log and/or a glove stream.
    Distances {
        #[command(flatten)]
        hand: HandArg,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        glove: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "thumb-index,thumb-middle")]
        pairs: Vec<String>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time every solver and print the distribution summary.
    Bench {
        #[command(flatten)]
        hand: HandArg,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the full JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write reference configs and a synthetic pinch session into a directory.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Replay,
    Realtime,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Hand(#[from] HandError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Output(String),
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

fn io_code(e: &IoError) -> u8 {
    match e {
        IoError::Config(_) => EXIT_CONFIG,
        _ => EXIT_PARSE,
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Metrics(_) => EXIT_USAGE,
            CliError::Io(e) | CliError::Runtime(RuntimeError::Io(e)) => io_code(e),
            CliError::Runtime(_) => EXIT_CONFIG,
            CliError::Hand(e) => match e.finger_error() {
                Some(FingerError::NoConvergence { .. }) => EXIT_NO_CONVERGENCE,
                Some(FingerError::OutOfTravel { .. } | FingerError::TravelExceeded { .. }) => EXIT_TRAVEL,
                Some(FingerError::Solver(_)) => EXIT_NO_CONVERGENCE,
                _ => EXIT_CONFIG,
            },
            CliError::Output(_) => 1,
        }
    }
}

/// Ordered key/value rows printed as CSV or JSON lines.
struct Records {
    rows: Vec<Vec<(String, Value)>>,
}

impl Records {
    fn print(&self, format: Format) -> Result<(), CliError> {
        let stdout = io::stdout();
        let mut w = BufWriter::new(stdout.lock());
        match format {
            Format::JsonLines => {
                for r in &self.rows {
                    let obj: Map<String, Value> = r.iter().cloned().collect();
                    writeln!(w, "{}", Value::Object(obj))?;
                }
            }
            Format::Csv => {
                let cell = |v: &Value| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                if let Some(first) = self.rows.first() {
                    writeln!(w, "{}", first.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join(","))?;
                }
                for r in &self.rows {
                    writeln!(w, "{}", r.iter().map(|(_, v)| cell(v)).collect::<Vec<_>>().join(","))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

fn load_hand(root: &Path, arg: &HandArg) -> Result<HandGeometry, CliError> {
    match &arg.hand {
        Some(p) => Ok(HandConfigFile::load(&root.join(p))?),
        None => Ok(HandGeometry::reference()),
    }
}

fn digits(name: &str) -> Result<Vec<usize>, CliError> {
    if name == "all" {
        return Ok((0..DIGITS).collect());
    }
    DIGIT_NAMES
        .iter()
        .position(|n| *n == name)
        .map(|d| vec![d])
        .ok_or_else(|| CliError::Usage(format!("unknown digit '{name}' (expected one of {} or all)", DIGIT_NAMES.join(", "))))
}

fn per_digit(values: &[f64], n: usize, allowed: &[usize], what: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let per = allowed
        .iter()
        .copied()
        .find(|k| values.len() == k * n)
        .ok_or_else(|| CliError::Usage(format!("{what} needs {} values per digit, got {}", allowed[0], values.len())))?;
    Ok(values.chunks(per).map(<[f64]>::to_vec).collect())
}

fn cmd_fk(g: &HandGeometry, digit: &str, d: &[f64]) -> Result<Records, CliError> {
    let ds = digits(digit)?;
    let chunks = per_digit(d, ds.len(), &[3], "--d")?;
    let mut rows = Vec::new();
    for (&i, v) in ds.iter().zip(&chunks) {
        let s = digit_fk(i, &ActuatorState::new(v[0], v[1], v[2]), g, None, None)?;
        let q = s.joints.as_array();
        let mut r = vec![("digit".to_string(), json!(DIGIT_NAMES[i]))];
        r.extend((0..4).map(|j| (format!("q{}_rad", j + 1), num(q[j]))));
        r.push(("alpha_rad".into(), num(s.alpha)));
        r.push(("residual_inf".into(), num(s.residuals.max_abs())));
        r.push(("iterations".into(), json!(s.iterations)));
        rows.push(r);
    }
    Ok(Records { rows })
}

fn cmd_ik(g: &HandGeometry, digit: &str, q: &[f64]) -> Result<Records, CliError> {
    let ds = digits(digit)?;
    let chunks = per_digit(q, ds.len(), &[3, 4], "--q")?;
    let mut rows = Vec::new();
    for (&i, v) in ds.iter().zip(&chunks) {
        let joints = FingerJointState::new(v[0], v[1], v[2], v.get(3).copied().unwrap_or(0.0));
        let s = digit_ik(i, &joints, g, None, None)?;
        let d = s.actuators.as_array();
        let mut r = vec![("digit".to_string(), json!(DIGIT_NAMES[i]))];
        r.extend((0..3).map(|j| (format!("d{}_m", j + 1), num(d[j]))));
        r.push(("alpha_rad".into(), num(s.alpha)));
        r.push(("residual_inf".into(), num(s.residuals.max_abs())));
        rows.push(r);
    }
    Ok(Records { rows })
}

fn cmd_validate(g: &HandGeometry) -> Result<Records, CliError> {
    g.validate()?;
    let rows = (0..DIGITS)
        .map(|i| {
            let z = g.digits[i].zero_config_residuals();
            vec![
                ("digit".to_string(), json!(DIGIT_NAMES[i])),
                ("mcp_1".into(), num(z.mcp[0])),
                ("mcp_2".into(), num(z.mcp[1])),
                ("psu".into(), num(z.psu)),
                ("pip_fourbar".into(), num(z.pip_fourbar)),
                ("dip".into(), num(z.dip)),
            ]
        })
        .collect();
    Ok(Records { rows })
}

fn cmd_replay(
    root: &Path,
    session: &Path,
    out: &Path,
    latency_out: Option<&Path>,
    threads: Option<usize>,
    mode: Option<ModeArg>,
) -> Result<Records, CliError> {
    let path = root.join(session);
    let mut cfg = SessionConfig::load(&path)?;
    if let Some(t) = threads {
        cfg.threads = t;
    }
    if let Some(m) = mode {
        cfg.mode = match m {
            ModeArg::Replay => Mode::Replay,
            ModeArg::Realtime => Mode::Realtime,
        };
    }
    let log = run_replay(&cfg, root)?;
    write_command_log_file(&root.join(out), &log)?;
    if let Some(p) = latency_out {
        write_latency_log_file(&root.join(p), &log)?;
    }
    let held = log.ticks.iter().filter(|t| t.has(HAND_HELD)).count();
    log::info!("{} ticks, {held} held", log.ticks.len());
    let Ok(report) = latency_report(&log) else {
        return Ok(Records { rows: Vec::new() });
    };
    let rows = report
        .stages
        .iter()
        .map(|s| {
            let budget = match s.stage.as_str() {
                "tick" => json!(report.hand_budget_met),
                "arm" => json!(report.arm_budget_met),
                _ => Value::Null,
            };
            vec![
                ("stage".to_string(), json!(s.stage)),
                ("samples".into(), json!(s.samples)),
                ("median_us".into(), num(s.median_us)),
                ("p99_us".into(), num(s.p99_us)),
                ("max_us".into(), num(s.max_us)),
                ("within_budget".into(), budget),
            ]
        })
        .collect();
    Ok(Records { rows })
}

fn write_table(t: &Table, format: Format, out: Option<&Path>) -> Result<(), CliError> {
    let w: Box<dyn Write> = match out {
        Some(p) => Box::new(File::create(p).map_err(|e| IoError::Io {
            path: p.to_path_buf(),
            source: e,
        })?),
        None => Box::new(io::stdout().lock()),
    };
    match format {
        Format::Csv => t.write_csv(w).map_err(|e| CliError::Output(e.to_string())),
        Format::JsonLines => Ok(t.write_json_lines(BufWriter::new(w))?),
    }
}

fn cmd_bench(g: &HandGeometry, iterations: usize, seed: u64, out: Option<&Path>) -> Result<Records, CliError> {
    let report = run_bench(g, iterations, seed);
    if let Some(p) = out {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Output(e.to_string()))?;
        fs::write(p, text).map_err(|e| IoError::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    if report.failures > 0 {
        log::warn!("{} solves failed during the benchmark", report.failures);
    }
    let rows = report
        .entries
        .iter()
        .map(|e| {
            vec![
                ("solve".to_string(), json!(e.name)),
                ("start".into(), json!(e.start)),
                ("samples".into(), json!(e.samples)),
                ("median_us".into(), num(e.median_us)),
                ("p99_us".into(), num(e.p99_us)),
                ("max_us".into(), num(e.max_us)),
            ]
        })
        .collect();
    Ok(Records { rows })
}

fn cmd_synth(dir: &Path, duration: f64) -> Result<(), CliError> {
    if !(duration > 0.0) {
        return Err(CliError::Usage("--duration must be positive".into()));
    }
    fs::create_dir_all(dir).map_err(|e| IoError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let g = HandGeometry::reference();
    save_toml(&HandConfigFile::new(g.clone()), &dir.join("hand.toml"))?;
    save_toml(
        &RetargetConfigFile::new(RetargetConfig::for_hand(&g), KeyvectorSpec::standard()),
        &dir.join("retarget.toml"),
    )?;
    save_toml(
        &ArmConfigFile::new(ArmModel::reference(), ArmIkConfig::default(), ready_pose()),
        &dir.join("arm.toml"),
    )?;
    let (frames, _) = pinch_trajectory(&g, duration);
    write_glove_stream_file(&dir.join("glove.jsonl"), &frames)?;
    write_wrist_stream_file(&dir.join("wrist.jsonl"), &wrist_motion(duration))?;
    let session = SessionConfig {
        format_version: CONFIG_VERSION,
        hand_rate_hz: 100.0,
        arm_rate_hz: 50.0,
        mode: Mode::Replay,
        glove_stream: "glove.jsonl".into(),
        wrist_stream: Some("wrist.jsonl".into()),
        hand_geometry: "hand.toml".into(),
        retarget: "retarget.toml".into(),
        arm: Some("arm.toml".into()),
        threads: 0,
        calibrate_on_first_frame: true,
        landmark_aliases: LabelAliases::new(),
        input_timeout_s: 0.1,
    };
    save_toml(&session, &dir.join("session.toml"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let root = cli.config.as_path();
    let records = match &cli.command {
        Command::Fk { hand, digit, d } => cmd_fk(&load_hand(root, hand)?, digit, d)?,
        Command::Ik { hand, digit, q } => cmd_ik(&load_hand(root, hand)?, digit, q)?,
        Command::ValidateGeometry { hand } => cmd_validate(&load_hand(root, hand)?)?,
        Command::Replay {
            session,
            out,
            latency_out,
            threads,
            mode,
        } => cmd_replay(root, session, out, latency_out.as_deref(), *threads, *mode)?,
        Command::Distances {
            hand,
            log,
            glove,
            pairs,
            out,
        } => {
            let g = load_hand(root, hand)?;
            let log = log.as_ref().map(|p| parse_command_log(&root.join(p))).transpose()?;
            let glove = glove
                .as_ref()
                .map(|p| parse_glove_stream(&root.join(p), &LabelAliases::new()))
                .transpose()?;
            let pairs: Vec<&str> = pairs.iter().map(String::as_str).collect();
            let table = fingertip_distances(log.as_ref(), glove.as_deref(), &g, &pairs)?;
            write_table(&table, cli.format, out.as_ref().map(|p| root.join(p)).as_deref())?;
            return Ok(());
        }
        Command::Bench {
            hand,
            iterations,
            seed,
            out,
        } => cmd_bench(&load_hand(root, hand)?, *iterations, *seed, out.as_ref().map(|p| root.join(p)).as_deref())?,
        Command::Synth { out_dir, duration } => {
            cmd_synth(&root.join(out_dir), *duration)?;
            return Ok(());
        }
    };
    records.print(cli.format)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
