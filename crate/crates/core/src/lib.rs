//! Transmission kinematics, retargeting and arm differential IK for a
//! 20-DoF linkage-driven hand.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b, tol): (f64, f64, f64) = ($a, $b, $tol);
        assert!((a - b).abs() <= tol, "{} = {a} not within {tol} of {b}", stringify!($a));
    }};
}

pub mod armik;
pub mod bench;
pub mod finger;
pub mod hand;
pub mod io;
pub mod kincore;
pub mod math;
pub mod metrics;
pub mod retarget;
pub mod runtime;
pub mod synth;
