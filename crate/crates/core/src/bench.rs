//! Solver timing on a smooth random joint trajectory.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::armik::{arm_fk, arm_step, ready_pose, ArmIkConfig, ArmModel, ArmState, ArmVector};
use crate::finger::{FkSolution, IkSolution};
use crate::hand::{digit_fk, digit_ik, hand_ik, HandGeometry, HandJointState, DIGITS};
use crate::retarget::{retarget_step, KeyvectorSpec, RetargetConfig, RetargetState};
use crate::runtime::percentile;
use crate::synth::{feasible_command, random_command, synth_frame};

/// Largest per-tick joint change of the benchmark trajectory, rad.
const WALK_STEP: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub name: String,
    /// `warm` when seeded from the previous tick, `cold` otherwise.
    pub start: String,
    pub samples: usize,
    pub median_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub iterations: usize,
    pub failures: usize,
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn entry(&self, name: &str, start: &str) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| e.name == name && e.start == start)
    }
}

fn entry(name: &str, start: &str, mut us: Vec<f64>) -> BenchEntry {
    us.sort_by(f64::total_cmp);
    let (median_us, p99_us, max_us) = if us.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        (percentile(&us, 50.0), percentile(&us, 99.0), us[us.len() - 1])
    };
    BenchEntry {
        name: name.into(),
        start: start.into(),
        samples: us.len(),
        median_us,
        p99_us,
        max_us,
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed().as_secs_f64() * 1e6)
}

/// Random walk through the feasible joint box, one step per control tick.
pub fn joint_walk(g: &HandGeometry, n: usize, seed: u64) -> Vec<HandJointState> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut q = random_command(&mut rng, g);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(q);
        let mut next = q;
        for d in next.digits.iter_mut() {
            d.q1 += rng.gen_range(-WALK_STEP..WALK_STEP);
            d.q2 += rng.gen_range(-WALK_STEP..WALK_STEP);
            d.q3 += rng.gen_range(-WALK_STEP..WALK_STEP);
        }
        q = feasible_command(&next, g).expect("coupling is defined on the whole PIP range");
    }
    out
}

/// Times every solver over `iterations` ticks of a seeded random walk.
pub fn run_bench(g: &HandGeometry, iterations: usize, seed: u64) -> BenchReport {
    let walk = joint_walk(g, iterations.max(2), seed);
    let mut failures = 0;
    let (mut fk_warm, mut fk_cold, mut ik_warm, mut ik_cold) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());

    for digit in 0..DIGITS {
        let mut prev_ik: Option<IkSolution> = None;
        let mut prev_fk: Option<FkSolution> = None;
        for q in &walk {
            let q = q.digits[digit];
            let (cold, us) = timed(|| digit_ik(digit, &q, g, None, None));
            ik_cold.push(us);
            let (warm, us) = timed(|| digit_ik(digit, &q, g, prev_ik.as_ref().map(|s| &s.actuators), prev_ik.map(|s| s.alpha)));
            ik_warm.push(us);
            let Ok(sol) = warm.and(cold) else {
                failures += 1;
                continue;
            };
            let d = sol.actuators;
            prev_ik = Some(sol);
            let (cold, us) = timed(|| digit_fk(digit, &d, g, None, None));
            fk_cold.push(us);
            let (warm, us) = timed(|| digit_fk(digit, &d, g, prev_fk.as_ref().map(|s| &s.joints), prev_fk.map(|s| s.alpha)));
            fk_warm.push(us);
            match warm.and(cold) {
                Ok(s) => prev_fk = Some(s),
                Err(_) => failures += 1,
            }
        }
    }

    let mut hand = Vec::new();
    let mut d_prev = None;
    for q in &walk {
        let (r, us) = timed(|| hand_ik(q, g, d_prev.as_ref()));
        hand.push(us);
        match r {
            Ok(d) => d_prev = Some(d),
            Err(_) => failures += 1,
        }
    }

    let cfg = RetargetConfig::for_hand(g);
    let spec = KeyvectorSpec::standard();
    let mut state = RetargetState::new(g);
    let mut retarget = Vec::new();
    for (k, q) in walk.iter().enumerate() {
        let frame = synth_frame(q, g, 1.0, k as f64 * 0.01);
        let (r, us) = timed(|| retarget_step(&frame, &spec, &cfg, &mut state, g));
        retarget.push(us);
        failures += usize::from(r.is_err());
    }

    let model = ArmModel::reference();
    let ik = ArmIkConfig::default();
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let mut arm = ArmState {
        q: ready_pose(),
        q_dot_prev: ArmVector::zeros(),
    };
    let home = arm_fk(&ready_pose(), &model).tool;
    let mut qp = Vec::new();
    for _ in 0..iterations.max(2) {
        let mut target = home;
        target.translation.vector += nalgebra::Vector3::from_fn(|_, _| rng.gen_range(-0.1..0.1));
        let (r, us) = timed(|| arm_step(&arm, &target, &model, &ik));
        qp.push(us);
        match r {
            Ok(r) => arm = r.state,
            Err(_) => failures += 1,
        }
    }

    BenchReport {
        iterations,
        failures,
        entries: vec![
            entry("finger_fk", "warm", fk_warm),
            entry("finger_fk", "cold", fk_cold),
            entry("finger_ik", "warm", ik_warm),
            entry("finger_ik", "cold", ik_cold),
            entry("hand_ik", "warm", hand),
            entry("retarget_step", "warm", retarget),
            entry("arm_qp", "warm", qp),
        ],
    }
}
