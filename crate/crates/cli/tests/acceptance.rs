//! Acceptance suite: ten criteria, one PASS/FAIL line each. Exits non-zero
//! if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector6};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;

use dexlink::armik::{
    kkt_residual, ready_pose, solve_box_qp, tool_jacobian, velocity_bounds, AngleJacobian, ArmIkConfig, ArmModel, ArmQp,
    ArmVector, ARM_DOF,
};
use dexlink::finger::{
    alpha_from_pip, dip_partials, dip_residual, mcp_jacobian_d, mcp_jacobian_q, mcp_residual, pip_fourbar_partials,
    pip_fourbar_residual, psu_partials, psu_residual, ActuatorState, FingerJointState, StageResiduals,
};
use dexlink::hand::{clamp_command, digit_fk, digit_ik, thumb_residuals, HandGeometry, HandJointState, DIGITS, JOINTS, THUMB};
use dexlink::io::{parse_command_log, parse_glove_stream, LabelAliases};
use dexlink::retarget::{
    prepare_frame, residuals_and_jacobian, retarget_step, target_length, weight, KeyvectorSpec, Membership,
    RetargetConfig, RetargetState,
};
use dexlink::synth::{random_command, synth_frame};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture() -> PathBuf {
    repo().join("fixtures/pinch")
}

fn dexlink(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dexlink"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "dexlink {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

/// Residuals of a digit solution, computed from scratch.
fn closure_residual(digit: usize, q: &FingerJointState, d: &ActuatorState, g: &HandGeometry) -> f64 {
    let fg = &g.digits[digit];
    let alpha = alpha_from_pip(q.q3, fg, 0.0).unwrap_or(f64::NAN);
    let r = if digit == THUMB {
        thumb_residuals(q, d, alpha, fg, &g.thumb_abduction)
    } else {
        StageResiduals::evaluate(q, d, alpha, fg)
    };
    r.max_abs()
}

fn criterion_1() -> Outcome {
    let g = HandGeometry::reference();
    let mut rng = StdRng::seed_from_u64(1);
    let start = Instant::now();
    let (mut worst_q, mut worst_d) = (0.0f64, 0.0f64);
    for digit in 0..DIGITS {
        for _ in 0..1000 {
            let q = random_command(&mut rng, &g).digits[digit];
            let d = digit_ik(digit, &q, &g, None, None).map_err(|e| e.to_string())?.actuators;
            let back = digit_fk(digit, &d, &g, None, None).map_err(|e| e.to_string())?.joints;
            for (a, b) in back.as_array().iter().zip(q.as_array()) {
                worst_q = worst_q.max((a - b).abs());
            }
            let d = digit_ik(digit, &random_command(&mut rng, &g).digits[digit], &g, None, None)
                .map_err(|e| e.to_string())?
                .actuators;
            let q = digit_fk(digit, &d, &g, None, None).map_err(|e| e.to_string())?.joints;
            let back = digit_ik(digit, &q, &g, None, None).map_err(|e| e.to_string())?.actuators;
            for (a, b) in back.as_array().iter().zip(d.as_array()) {
                worst_d = worst_d.max((a - b).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst_q < 1e-8, "joint round trip error {worst_q:.3e} rad");
    ensure!(worst_d < 1e-8, "actuator round trip error {worst_d:.3e} m");
    ensure!(secs < 10.0, "took {secs:.2} s");
    Ok(format!("5x1000 cold round trips, max |dq| {worst_q:.1e} rad, max |dd| {worst_d:.1e} m, {secs:.2} s"))
}

fn criterion_2() -> Outcome {
    let g = HandGeometry::reference();
    let mut rng = StdRng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for digit in 0..DIGITS {
        for _ in 0..500 {
            let q = random_command(&mut rng, &g).digits[digit];
            let ik = digit_ik(digit, &q, &g, None, None).map_err(|e| e.to_string())?;
            worst = worst.max(closure_residual(digit, &q, &ik.actuators, &g));
            let fk = digit_fk(digit, &ik.actuators, &g, None, None).map_err(|e| e.to_string())?;
            worst = worst.max(closure_residual(digit, &fk.joints, &ik.actuators, &g));
            checked += 2;
        }
    }
    let log = parse_command_log(&fixture().join("expected_commands.csv")).map_err(|e| e.to_string())?;
    for tick in &log.ticks {
        let q = tick.joints();
        for digit in 0..DIGITS {
            let d = ActuatorState::new(tick.d[3 * digit], tick.d[3 * digit + 1], tick.d[3 * digit + 2]);
            worst = worst.max(closure_residual(digit, &q.digits[digit], &d, &g));
            checked += 1;
        }
    }
    ensure!(worst <= 1e-9, "residual {worst:.3e}");
    Ok(format!("{checked} solver outputs, max residual {worst:.1e}"))
}

fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn criterion_3() -> Outcome {
    let g = HandGeometry::reference();
    let mut rng = StdRng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut bump = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for _ in 0..60 {
        for digit in 1..DIGITS {
            let fg = &g.digits[digit];
            let q = random_command(&mut rng, &g).digits[digit];
            let d = ActuatorState::new(rng.gen_range(-0.01..0.0), rng.gen_range(-0.01..0.0), rng.gen_range(-0.005..0.01));
            let alpha = rng.gen_range(-1.0..1.0);
            let jq = mcp_jacobian_q(q.q1, q.q2, &d, fg);
            let jd = mcp_jacobian_d(q.q1, q.q2, &d, fg);
            for r in 0..2 {
                bump(jq[(r, 0)], fd(|x| mcp_residual(x, q.q2, &d, fg)[r], q.q1));
                bump(jq[(r, 1)], fd(|x| mcp_residual(q.q1, x, &d, fg)[r], q.q2));
                bump(jd[(r, 0)], fd(|x| mcp_residual(q.q1, q.q2, &ActuatorState { d1: x, ..d }, fg)[r], d.d1));
                bump(jd[(r, 1)], fd(|x| mcp_residual(q.q1, q.q2, &ActuatorState { d2: x, ..d }, fg)[r], d.d2));
            }
            let p = psu_partials(alpha, d.d3, q.q1, q.q2, fg);
            bump(p.alpha, fd(|x| psu_residual(x, d.d3, q.q1, q.q2, fg), alpha));
            bump(p.d3, fd(|x| psu_residual(alpha, x, q.q1, q.q2, fg), d.d3));
            bump(p.q1, fd(|x| psu_residual(alpha, d.d3, x, q.q2, fg), q.q1));
            bump(p.q2, fd(|x| psu_residual(alpha, d.d3, q.q1, x, fg), q.q2));
            let (a, b) = pip_fourbar_partials(q.q3, alpha, fg);
            bump(a, fd(|x| pip_fourbar_residual(x, alpha, fg), q.q3));
            bump(b, fd(|x| pip_fourbar_residual(q.q3, x, fg), alpha));
            let (a, b) = dip_partials(q.q3, q.q4, fg);
            bump(a, fd(|x| dip_residual(x, q.q4, fg), q.q3));
            bump(b, fd(|x| dip_residual(q.q3, x, fg), q.q4));
        }
        let ab = &g.thumb_abduction;
        let (qa, da) = (rng.gen_range(ab.range[0]..ab.range[1]), rng.gen_range(ab.travel[0]..ab.travel[1]));
        let (a, b) = ab.partials(qa, da);
        bump(a, fd(|x| ab.residual(x, da), qa));
        bump(b, fd(|x| ab.residual(qa, x), da));
    }
    let finger_worst = worst;

    let cfg = RetargetConfig::for_hand(&g);
    let spec = KeyvectorSpec::standard();
    let mut stack_worst = 0.0f64;
    for _ in 0..60 {
        let frame = synth_frame(&random_command(&mut rng, &g), &g, rng.gen_range(0.9..1.2), 0.0);
        let prepared = prepare_frame(&frame, &spec, &cfg).map_err(|e| e.to_string())?;
        let prev = random_command(&mut rng, &g);
        let q = random_command(&mut rng, &g);
        let (_, jac) = residuals_and_jacobian(&q, &prepared, &spec, &cfg, &g, &prev).map_err(|e| e.to_string())?;
        let r = |v: &[f64]| residuals_and_jacobian(&HandJointState::from_slice(v), &prepared, &spec, &cfg, &g, &prev).unwrap().0;
        let base = q.to_array();
        for c in 0..JOINTS {
            let h = 1e-6;
            let (mut p, mut m) = (base, base);
            p[c] += h;
            m[c] -= h;
            let col = (r(&p) - r(&m)) / (2.0 * h);
            stack_worst = stack_worst.max((col - jac.column(c)).amax());
        }
    }
    ensure!(finger_worst < 1e-5, "closure partials off by {finger_worst:.3e}");
    ensure!(stack_worst < 1e-5, "retarget stack Jacobian off by {stack_worst:.3e}");
    Ok(format!(
        "closure partials max err {finger_worst:.1e}, 65x20 retarget Jacobian max err {stack_worst:.1e} (60 states each)"
    ))
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = dir.path().join("bench.json");
    dexlink(&["bench", "--iterations", "1000", "--out", report.to_str().unwrap()])?;
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let get = |name: &str, start: &str, key: &str| {
        v["entries"]
            .as_array()
            .and_then(|a| a.iter().find(|e| e["name"] == name && e["start"] == start))
            .and_then(|e| e[key].as_f64())
            .unwrap_or(f64::INFINITY)
    };
    let fk = get("finger_fk", "warm", "median_us");
    let ik = get("finger_ik", "warm", "median_us");
    let hand = get("hand_ik", "warm", "p99_us");
    ensure!(fk < 100.0, "warm finger FK median {fk:.1} us");
    ensure!(ik < 100.0, "warm finger IK median {ik:.1} us");
    ensure!(hand < 10_000.0, "hand_ik p99 {hand:.1} us");
    Ok(format!("warm finger FK median {fk:.1} us, IK median {ik:.1} us, hand_ik p99 {hand:.1} us"))
}

fn criterion_5() -> Outcome {
    let g = HandGeometry::reference();
    // Proximity targets only hold q* as the optimum when no pair is inside epsilon.
    let cfg = RetargetConfig {
        epsilon: 1e-9,
        ..RetargetConfig::for_hand(&g)
    };
    let spec = KeyvectorSpec::standard();
    let mut rng = StdRng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let truth = random_command(&mut rng, &g);
        let mut state = RetargetState::new(&g);
        let r = retarget_step(&synth_frame(&truth, &g, 1.0, 0.0), &spec, &cfg, &mut state, &g).map_err(|e| e.to_string())?;
        for (a, b) in r.command.to_array().iter().zip(truth.to_array()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst < 1e-4, "max joint error {worst:.3e} rad");
    Ok(format!("100 poses recovered, max joint error {worst:.1e} rad"))
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log = dir.path().join("log.csv");
    let csv = dir.path().join("distances.csv");
    let root = fixture();
    let root_s = root.to_str().unwrap();
    dexlink(&["--config", root_s, "replay", "session.toml", "--out", log.to_str().unwrap()])?;
    dexlink(&[
        "--config",
        root_s,
        "distances",
        "--log",
        log.to_str().unwrap(),
        "--glove",
        "glove.jsonl",
        "--pairs",
        "thumb-index",
        "--out",
        csv.to_str().unwrap(),
    ])?;
    let text = fs::read_to_string(&csv).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("missing column {name}"));
    let (hi, ri) = (col("human_thumb-index_m")?, col("robot_thumb-index_m")?);
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect()).collect();

    let g = HandGeometry::reference();
    let cfg = RetargetConfig::for_hand(&g);
    let glove = parse_glove_stream(&root.join("glove.jsonl"), &LabelAliases::new()).map_err(|e| e.to_string())?;
    let mut spec = KeyvectorSpec::standard();
    spec.calibrate_beta(&glove[0], &cfg, &g).map_err(|e| e.to_string())?;
    let beta = spec
        .keyvectors
        .iter()
        .find(|k| k.from == "index_tip" && k.to == "thumb_tip")
        .ok_or("no thumb-index keyvector")?
        .beta[0];

    let human: Vec<f64> = rows.iter().map(|r| r[hi]).collect();
    let robot: Vec<f64> = rows.iter().map(|r| r[ri]).collect();
    let (hmin, hmax) = human.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
    ensure!(hmin <= cfg.epsilon && hmax > cfg.epsilon, "human trajectory does not cross epsilon");
    let rmin = robot.iter().cloned().fold(f64::INFINITY, f64::min);
    let closure = (0..human.len()).min_by(|a, b| human[*a].total_cmp(&human[*b])).unwrap();
    let (h, r) = (human[closure], robot[closure]);
    ensure!(rmin <= cfg.eta1 + 0.002, "robot minimum {rmin:.4} m");
    ensure!(r <= cfg.eta1 + 0.002, "robot at closure {r:.4} m");
    ensure!(r <= beta * h, "robot {r:.4} m above scaled human {:.4} m", beta * h);
    Ok(format!(
        "human min {:.2} mm, robot at closure {:.2} mm <= eta1 + 2 mm and <= scaled human {:.2} mm ({} rows)",
        h * 1e3,
        r * 1e3,
        beta * h * 1e3,
        rows.len()
    ))
}

fn criterion_7() -> Outcome {
    let g = HandGeometry::reference();
    let cfg = RetargetConfig::for_hand(&g);
    let beta = 0.8;
    let eps = cfg.epsilon;
    let cases = [
        (2.0 * eps, Membership::S1, 1.0, beta * 2.0 * eps),
        (2.0 * eps, Membership::S2, 1.0, beta * 2.0 * eps),
        (2.0 * eps, Membership::None, 1.0, beta * 2.0 * eps),
        (0.5 * eps, Membership::S1, 200.0, 0.004),
        (0.5 * eps, Membership::S2, 400.0, 0.02),
        (0.5 * eps, Membership::None, 1.0, beta * 0.5 * eps),
        (eps, Membership::S1, 200.0, 0.004),
        (eps, Membership::S2, 400.0, 0.02),
    ];
    for (d, m, w, f) in cases {
        ensure!(weight(d, m, &cfg) == w, "w({d}, {m:?}) = {}", weight(d, m, &cfg));
        let t = target_length(d, m, beta, &cfg);
        ensure!(t == f, "f({d}, {m:?}) = {t}, expected {f}");
    }
    Ok("6 branch combinations plus the d = epsilon boundary match exactly".into())
}

fn reduced_objective(qp: &ArmQp, k: usize, v: f64) -> f64 {
    let free: Vec<usize> = (0..ARM_DOF).filter(|&i| i != k).collect();
    let h = DMatrix::from_fn(6, 6, |r, c| qp.hessian[(free[r], free[c])]);
    let rhs = DVector::from_fn(6, |r, _| qp.linear[free[r]] - qp.hessian[(free[r], k)] * v);
    let y = h.cholesky().expect("regularized Hessian").solve(&rhs);
    let mut x = ArmVector::zeros();
    x[k] = v;
    for (r, &i) in free.iter().enumerate() {
        x[i] = y[r];
    }
    qp.objective(&x)
}

fn criterion_8() -> Outcome {
    let m = ArmModel::reference();
    let cfg = ArmIkConfig::default();
    let mut rng = StdRng::seed_from_u64(8);
    let (lo_q, hi_q) = (m.lower(), m.upper());
    let mut worst_kkt = 0.0f64;
    for _ in 0..100_000 {
        let q = ArmVector::from_fn(|i, _| rng.gen_range(lo_q[i]..=hi_q[i]));
        let dx = Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0)) / cfg.dt;
        let prev = ArmVector::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let ja = AngleJacobian::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let qp = ArmQp::build(&tool_jacobian(&q, &m), &dx, &ja, rng.gen_range(-5.0..5.0), &prev, &cfg);
        let (lo, hi) = velocity_bounds(&q, &m, &cfg);
        let x = solve_box_qp(&qp, &lo, &hi, &ArmVector::zeros()).q_dot;
        ensure!((0..ARM_DOF).all(|i| lo[i] <= x[i] && x[i] <= hi[i]), "infeasible solution at q = {q:?}");
        worst_kkt = worst_kkt.max(kkt_residual(&qp, &x, &lo, &hi));
    }
    ensure!(worst_kkt <= 1e-8, "KKT residual {worst_kkt:.3e}");

    let q = ready_pose();
    let j = tool_jacobian(&q, &m);
    let z7 = j.fixed_view::<3, 1>(3, 6).into_owned();
    let dx = Vector6::new(0.0, 0.0, 0.0, z7.x, z7.y, z7.z) * 20.0;
    let qp = ArmQp::build(&j, &dx, &AngleJacobian::zeros(), 0.0, &ArmVector::zeros(), &cfg);
    let (lo, hi) = velocity_bounds(&q, &m, &cfg);
    let sol = solve_box_qp(&qp, &lo, &hi, &ArmVector::zeros());
    ensure!(sol.q_dot[6] == hi[6], "last joint not saturated");
    let (mut a, mut b) = (lo[6], hi[6]);
    for _ in 0..12 {
        let n = 40;
        let best = (0..=n)
            .map(|i| a + (b - a) * i as f64 / n as f64)
            .min_by(|x, y| reduced_objective(&qp, 6, *x).total_cmp(&reduced_objective(&qp, 6, *y)))
            .unwrap();
        let cell = (b - a) / n as f64;
        a = (best - cell).max(lo[6]);
        b = (best + cell).min(hi[6]);
    }
    let grid_err = (0.5 * (a + b) - sol.q_dot[6]).abs();
    ensure!(grid_err < 1e-6, "saturated coordinate differs from grid oracle by {grid_err:.3e}");

    let zero = ArmQp::build(&j, &Vector6::zeros(), &AngleJacobian::zeros(), 0.0, &ArmVector::zeros(), &cfg);
    let x0 = solve_box_qp(&zero, &lo, &hi, &ArmVector::zeros()).q_dot;
    ensure!(x0 == ArmVector::zeros(), "zero input gave {x0:?}");
    Ok(format!(
        "1e5 instances feasible, max KKT {worst_kkt:.1e}, grid oracle diff {grid_err:.1e}, zero in -> zero out"
    ))
}

fn criterion_9() -> Outcome {
    let g = HandGeometry::reference();
    let map = &g.limit_map;
    for digit in 1..DIGITS {
        let full = map.static_limits[digit][1][1];
        for a in [-0.3, -0.1, 0.2, 0.35] {
            let mut q = HandJointState::default();
            q.digits[digit].q1 = a;
            q.digits[digit].q2 = full;
            let c = clamp_command(&q, map);
            ensure!(c.digits[digit].q1 == 0.0, "digit {digit}: abduction {a} clamps to {}", c.digits[digit].q1);
        }
    }
    let mut rng = StdRng::seed_from_u64(9);
    for _ in 0..1000 {
        let v: Vec<f64> = (0..JOINTS).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let once = clamp_command(&HandJointState::from_slice(&v), map);
        ensure!(clamp_command(&once, map) == once, "clamp not idempotent at {v:?}");
    }
    Ok("abduction clamps to 0 at full flexion on all fingers; clamp idempotent on 1000 commands".into())
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = fixture();
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "1", "4", "0"].iter().enumerate() {
        let out = dir.path().join(format!("log{i}.csv"));
        dexlink(&[
            "--config",
            root.to_str().unwrap(),
            "replay",
            "session.toml",
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ])?;
        outputs.push(fs::read(&out).map_err(|e| e.to_string())?);
    }
    let golden = fs::read(root.join("expected_commands.csv")).map_err(|e| e.to_string())?;
    for (i, o) in outputs.iter().enumerate() {
        ensure!(*o == outputs[0], "run {i} differs from run 0");
    }
    ensure!(outputs[0] == golden, "replay differs from the golden log");
    Ok(format!("4 runs (1, 1, 4 and all threads) byte-identical to the golden log ({} bytes)", golden.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("FK/IK round trip", criterion_1),
        ("constraint satisfaction", criterion_2),
        ("Jacobian correctness", criterion_3),
        ("latency", criterion_4),
        ("self-retargeting oracle", criterion_5),
        ("pinch behavior", criterion_6),
        ("branch table", criterion_7),
        ("arm QP", criterion_8),
        ("coupled limit map", criterion_9),
        ("replay determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.2} s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why} [{secs:.2} s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
