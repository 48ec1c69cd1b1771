//! Replay pipeline: glove frames drive the hand command loop, wrist poses
//! drive the arm loop, and every tick lands in a command log.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::Isometry3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::armik::{arm_fk, arm_step, relative_target, velocity_bounds, ArmState, ArmVector, ARM_DOF};
use crate::hand::{hand_ik, HandActuatorState, HandGeometry, HandJointState, ACTUATORS, JOINTS};
use crate::io::{
    load_toml, parse_glove_stream, parse_wrist_stream, ArmConfigFile, HandConfigFile, IoError, LabelAliases,
    RetargetConfigFile, WristSample, CONFIG_VERSION,
};
use crate::retarget::{retarget_step, HumanHandFrame, KeyvectorSpec, RetargetConfig, RetargetState};

/// The hand command was held from the previous tick.
pub const HAND_HELD: u32 = 1;
/// No glove frame arrived within the input timeout.
pub const INPUT_GAP: u32 = 2;
/// The arm velocity was held (clamped into the current bounds).
pub const ARM_HELD: u32 = 4;
/// The arm QP ran on this tick.
pub const ARM_UPDATED: u32 = 8;

pub const HAND_BUDGET_US: f64 = 10_000.0;
pub const ARM_BUDGET_US: f64 = 20_000.0;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid session: {0}")]
    Config(String),
    #[error("latency report needs at least one tick")]
    EmptyLog,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Ticks run back to back.
    #[default]
    Replay,
    /// Ticks are paced by the wall clock.
    Realtime,
}

fn default_hand_rate() -> f64 {
    100.0
}

fn default_arm_rate() -> f64 {
    50.0
}

fn default_timeout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub format_version: u32,
    #[serde(default = "default_hand_rate")]
    pub hand_rate_hz: f64,
    #[serde(default = "default_arm_rate")]
    pub arm_rate_hz: f64,
    #[serde(default)]
    pub mode: Mode,
    pub glove_stream: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrist_stream: Option<PathBuf>,
    pub hand_geometry: PathBuf,
    pub retarget: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<PathBuf>,
    /// Worker threads for the per-digit solves; 0 uses one per core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub calibrate_on_first_frame: bool,
    #[serde(default, skip_serializing_if = "LabelAliases::is_empty")]
    pub landmark_aliases: LabelAliases,
    #[serde(default = "default_timeout")]
    pub input_timeout_s: f64,
}

impl SessionConfig {
    pub fn load(path: &Path) -> Result<Self, RuntimeError> {
        let s: Self = load_toml(path, "session config")?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.format_version != CONFIG_VERSION {
            return Err(IoError::Version {
                what: "session config",
                found: self.format_version.to_string(),
                expected: CONFIG_VERSION,
            }
            .into());
        }
        for (name, r) in [("hand_rate_hz", self.hand_rate_hz), ("arm_rate_hz", self.arm_rate_hz)] {
            if !(r.is_finite() && r > 0.0) {
                return Err(RuntimeError::Config(format!("{name} must be positive, got {r}")));
            }
        }
        if !(self.input_timeout_s > 0.0) {
            return Err(RuntimeError::Config("input_timeout_s must be positive".into()));
        }
        if self.wrist_stream.is_some() != self.arm.is_some() {
            return Err(RuntimeError::Config("wrist_stream and arm must be given together".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSetup {
    pub config: ArmConfigFile,
    pub wrist: Vec<WristSample>,
}

/// Everything a replay needs, already parsed and validated.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub hand_rate_hz: f64,
    pub arm_rate_hz: f64,
    pub mode: Mode,
    pub threads: usize,
    pub calibrate_on_first_frame: bool,
    pub input_timeout_s: f64,
    pub geometry: HandGeometry,
    pub retarget: RetargetConfig,
    pub keyvectors: KeyvectorSpec,
    pub glove: Vec<HumanHandFrame>,
    pub arm: Option<ArmSetup>,
}

impl Session {
    /// Reads every file named by `cfg`, resolving relative paths against `root`.
    pub fn load(cfg: &SessionConfig, root: &Path) -> Result<Self, RuntimeError> {
        cfg.validate()?;
        let at = |p: &Path| root.join(p);
        let geometry = HandConfigFile::load(&at(&cfg.hand_geometry))?;
        let (retarget, keyvectors) = RetargetConfigFile::load(&at(&cfg.retarget))?;
        if retarget.q_lower.len() != JOINTS {
            return Err(RuntimeError::Config("retarget limits do not match the hand".into()));
        }
        let glove = parse_glove_stream(&at(&cfg.glove_stream), &cfg.landmark_aliases)?;
        let arm = match (&cfg.arm, &cfg.wrist_stream) {
            (Some(a), Some(w)) => Some(ArmSetup {
                config: ArmConfigFile::load(&at(a))?,
                wrist: parse_wrist_stream(&at(w))?,
            }),
            _ => None,
        };
        Ok(Self {
            hand_rate_hz: cfg.hand_rate_hz,
            arm_rate_hz: cfg.arm_rate_hz,
            mode: cfg.mode,
            threads: cfg.threads,
            calibrate_on_first_frame: cfg.calibrate_on_first_frame,
            input_timeout_s: cfg.input_timeout_s,
            geometry,
            retarget,
            keyvectors,
            glove,
            arm,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CommandTick {
    pub t: f64,
    pub flags: u32,
    /// Joint command, digit-major.
    pub q: [f64; JOINTS],
    /// Screw displacements, digit-major.
    pub d: [f64; ACTUATORS],
    pub arm_q_dot: [f64; ARM_DOF],
}

impl CommandTick {
    pub fn joints(&self) -> HandJointState {
        HandJointState::from_slice(&self.q)
    }

    pub fn has(&self, flag: u32) -> bool {
        self.flags & flag != 0
    }
}

/// Wall-clock cost of one tick, microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TickLatency {
    pub retarget_us: f64,
    pub hand_ik_us: f64,
    pub arm_us: f64,
    pub tick_us: f64,
}

/// Commands are deterministic; latencies are kept alongside but never
/// written into the command log itself.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommandLog {
    pub ticks: Vec<CommandTick>,
    pub latencies: Vec<TickLatency>,
}

fn micros(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e6
}

/// Index of the most recent sample at or before `t`, advancing `cursor`.
fn hold_index(times: impl Fn(usize) -> f64, len: usize, cursor: &mut Option<usize>, t: f64) -> Option<usize> {
    let mut next = cursor.map_or(0, |c| c + 1);
    while next < len && times(next) <= t {
        *cursor = Some(next);
        next += 1;
    }
    *cursor
}

struct ArmLoop<'a> {
    setup: &'a ArmSetup,
    state: ArmState,
    start: Isometry3<f64>,
    cursor: Option<usize>,
    next_tick: u64,
}

impl<'a> ArmLoop<'a> {
    fn new(setup: &'a ArmSetup) -> Self {
        let q = ArmVector::from(setup.config.initial_q);
        Self {
            setup,
            state: ArmState {
                q,
                q_dot_prev: ArmVector::zeros(),
            },
            start: arm_fk(&q, &setup.config.model).tool,
            cursor: None,
            next_tick: 0,
        }
    }

    fn step(&mut self, t: f64, dt: f64, timeout: f64) -> u32 {
        let (model, ik) = (&self.setup.config.model, &self.setup.config.ik);
        let wrist = &self.setup.wrist;
        let idx = hold_index(|i| wrist[i].timestamp, wrist.len(), &mut self.cursor, t);
        let fresh = idx.is_some_and(|i| t - wrist[i].timestamp <= timeout);
        let motion = idx.map_or(Isometry3::identity(), |i| wrist[i].pose);
        let ik = crate::armik::ArmIkConfig { dt, ..ik.clone() };
        let solved = if fresh || idx.is_none() {
            arm_step(&self.state, &relative_target(&self.start, &motion), model, &ik).ok()
        } else {
            None
        };
        match solved {
            Some(r) => {
                self.state = r.state;
                ARM_UPDATED
            }
            None => {
                let (lo, hi) = velocity_bounds(&self.state.q, model, &ik);
                let held = self.state.q_dot_prev.zip_zip_map(&lo, &hi, |v, l, h| v.clamp(l, h));
                self.state = crate::armik::integrate(&self.state, &held, dt);
                ARM_UPDATED | ARM_HELD
            }
        }
    }
}

/// Runs the whole session. Hand ticks fall on `t0 + k / hand_rate` where
/// `t0` is the first glove timestamp; each tick retargets the newest frame
/// at or before it. A tick whose frame is stale, or whose solve fails, repeats
/// the previous command and is flagged.
pub fn run_session(session: &Session) -> Result<CommandLog, RuntimeError> {
    let mut log = CommandLog::default();
    let Some(first) = session.glove.first() else {
        return Ok(log);
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(session.threads)
        .build()
        .map_err(|e| RuntimeError::Config(e.to_string()))?;
    pool.install(|| replay(session, first, &mut log))?;
    Ok(log)
}

fn replay(session: &Session, first: &HumanHandFrame, log: &mut CommandLog) -> Result<(), RuntimeError> {
    let g = &session.geometry;
    let mut spec = session.keyvectors.clone();
    if session.calibrate_on_first_frame {
        spec.calibrate_beta(first, &session.retarget, g)
            .map_err(|e| RuntimeError::Config(format!("calibration: {e}")))?;
    }
    let mut state = RetargetState::new(g);
    let mut q_cmd = state.q_prev;
    let mut d_cmd: HandActuatorState = hand_ik(&q_cmd, g, None)
        .map_err(|e| RuntimeError::Config(format!("initial hand command is not reachable: {e}")))?;

    let t0 = first.timestamp;
    let t_end = session.glove.last().map_or(t0, |f| f.timestamp);
    let hand_dt = 1.0 / session.hand_rate_hz;
    let arm_dt = 1.0 / session.arm_rate_hz;
    let mut arm = session.arm.as_ref().map(ArmLoop::new);
    let mut cursor = None;
    let wall = Instant::now();

    for k in 0u64.. {
        let t = t0 + k as f64 * hand_dt;
        if t > t_end {
            break;
        }
        if session.mode == Mode::Realtime {
            let due = Duration::from_secs_f64(t - t0);
            if let Some(wait) = due.checked_sub(wall.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        let tick_start = Instant::now();
        let mut lat = TickLatency::default();
        let mut flags = 0;

        let glove = &session.glove;
        let idx = hold_index(|i| glove[i].timestamp, glove.len(), &mut cursor, t).expect("first frame is at t0");
        if t - glove[idx].timestamp > session.input_timeout_s {
            flags |= INPUT_GAP | HAND_HELD;
        } else {
            let saved = state.clone();
            let start = Instant::now();
            let step = retarget_step(&glove[idx], &spec, &session.retarget, &mut state, g);
            lat.retarget_us = micros(start);
            match step {
                Ok(report) => {
                    let start = Instant::now();
                    let ik = hand_ik(&report.command, g, Some(&d_cmd));
                    lat.hand_ik_us = micros(start);
                    match ik {
                        Ok(d) => {
                            q_cmd = report.command;
                            d_cmd = d;
                        }
                        Err(e) => {
                            log::debug!("t={t}: hand IK failed, holding: {e}");
                            state = saved;
                            flags |= HAND_HELD;
                        }
                    }
                }
                Err(e) => {
                    log::debug!("t={t}: retarget failed, holding: {e}");
                    flags |= HAND_HELD;
                }
            }
        }

        let mut arm_q_dot = [0.0; ARM_DOF];
        if let Some(arm) = arm.as_mut() {
            // Arm tick m is due at t0 + m / arm_rate.
            let due = (t - t0) * session.arm_rate_hz + 1e-9;
            if arm.next_tick as f64 <= due {
                let start = Instant::now();
                flags |= arm.step(t, arm_dt, session.input_timeout_s);
                lat.arm_us = micros(start);
                arm.next_tick = due.floor() as u64 + 1;
            }
            arm_q_dot = arm.state.q_dot_prev.into();
        }

        lat.tick_us = micros(tick_start);
        log.ticks.push(CommandTick {
            t,
            flags,
            q: q_cmd.to_array(),
            d: d_cmd.to_array(),
            arm_q_dot,
        });
        log.latencies.push(lat);
    }
    Ok(())
}

/// Loads the session described by `cfg` and replays it.
pub fn run_replay(cfg: &SessionConfig, root: &Path) -> Result<CommandLog, RuntimeError> {
    run_session(&Session::load(cfg, root)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub stage: String,
    pub samples: usize,
    pub median_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub ticks: usize,
    pub stages: Vec<StageLatency>,
    /// Full-tick p99 fits the 100 Hz hand loop.
    pub hand_budget_met: bool,
    /// Arm p99 fits the 50 Hz arm loop.
    pub arm_budget_met: bool,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn stage(name: &str, values: impl Iterator<Item = f64>) -> Option<StageLatency> {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(StageLatency {
        stage: name.into(),
        samples: v.len(),
        median_us: percentile(&v, 50.0),
        p99_us: percentile(&v, 99.0),
        max_us: v[v.len() - 1],
    })
}

pub fn latency_report(log: &CommandLog) -> Result<LatencyReport, RuntimeError> {
    if log.latencies.is_empty() {
        return Err(RuntimeError::EmptyLog);
    }
    let l = &log.latencies;
    let ticks = &log.ticks;
    let solved = |i: &usize| ticks.get(*i).map_or(true, |t| !t.has(INPUT_GAP));
    let arm_ran = |i: &usize| ticks.get(*i).is_some_and(|t| t.has(ARM_UPDATED));
    let stages: Vec<StageLatency> = [
        stage("retarget", (0..l.len()).filter(solved).map(|i| l[i].retarget_us)),
        stage("hand_ik", (0..l.len()).filter(solved).map(|i| l[i].hand_ik_us)),
        stage("arm", (0..l.len()).filter(arm_ran).map(|i| l[i].arm_us)),
        stage("tick", l.iter().map(|x| x.tick_us)),
    ]
    .into_iter()
    .flatten()
    .collect();
    let p99 = |name: &str| stages.iter().find(|s| s.stage == name).map_or(0.0, |s| s.p99_us);
    Ok(LatencyReport {
        ticks: l.len(),
        hand_budget_met: p99("tick") <= HAND_BUDGET_US,
        arm_budget_met: p99("arm") <= ARM_BUDGET_US,
        stages,
    })
}
