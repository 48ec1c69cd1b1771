use serde::{Deserialize, Serialize};

use super::{HandJointState, DIGITS, THUMB};

/// Abduction half-range shrinking linearly with flexion magnitude:
/// `a(q2) = a0 * max(0, 1 - |q2| / q2_full)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McpTaper {
    pub abduction_half_range_rad: f64,
    pub full_flexion_rad: f64,
}

impl McpTaper {
    pub fn half_range(&self, q2: f64) -> f64 {
        self.abduction_half_range_rad * (1.0 - q2.abs() / self.full_flexion_rad).max(0.0)
    }
}

/// Static joint limits of every digit plus the flexion-dependent abduction
/// limit of each finger MCP joint. The thumb abduction joint is not tapered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledLimitMap {
    #[serde(rename = "static_limits_rad")]
    pub static_limits: [[[f64; 2]; 4]; DIGITS],
    #[serde(with = "taper_list")]
    pub tapers: [Option<McpTaper>; DIGITS],
}

/// Tapers are stored as a list of `{ digit, ... }` entries; digits without an entry are untapered.
mod taper_list {
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    use super::{McpTaper, DIGITS};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        digit: usize,
        #[serde(flatten)]
        taper: McpTaper,
    }

    pub fn serialize<S: Serializer>(t: &[Option<McpTaper>; DIGITS], s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = t
            .iter()
            .enumerate()
            .filter_map(|(digit, t)| t.map(|taper| Entry { digit, taper }))
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[Option<McpTaper>; DIGITS], D::Error> {
        let mut out = [None; DIGITS];
        for e in Vec::<Entry>::deserialize(d)? {
            if e.digit >= DIGITS {
                return Err(D::Error::custom(format!("taper digit {} out of range", e.digit)));
            }
            if out[e.digit].replace(e.taper).is_some() {
                return Err(D::Error::custom(format!("duplicate taper for digit {}", e.digit)));
            }
        }
        Ok(out)
    }
}

impl CoupledLimitMap {
    pub fn validate(&self) -> Result<(), String> {
        for (i, digit) in self.static_limits.iter().enumerate() {
            for (j, [lo, hi]) in digit.iter().enumerate() {
                if !(lo <= hi) {
                    return Err(format!("digit {i} joint {j}: limits not ordered"));
                }
            }
        }
        for (i, t) in self.tapers.iter().enumerate() {
            if let Some(t) = t {
                if !(t.abduction_half_range_rad >= 0.0 && t.full_flexion_rad > 0.0) {
                    return Err(format!("digit {i}: taper parameters must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Allowed abduction interval of digit `digit` at flexion `q2`.
pub fn coupled_mcp_limit(digit: usize, q2: f64, map: &CoupledLimitMap) -> [f64; 2] {
    let [lo, hi] = map.static_limits[digit][0];
    match map.tapers[digit] {
        Some(t) => {
            let a = t.half_range(q2);
            [lo.max(-a), hi.min(a)]
        }
        None => [lo, hi],
    }
}

/// Clamp every joint to its static range, then clamp finger abduction to the
/// coupled interval of the already clamped flexion. Idempotent.
pub fn clamp_command(q: &HandJointState, map: &CoupledLimitMap) -> HandJointState {
    let mut out = *q;
    for (d, digit) in out.digits.iter_mut().enumerate() {
        let mut v = digit.as_array();
        for (j, x) in v.iter_mut().enumerate() {
            let [lo, hi] = map.static_limits[d][j];
            *x = x.clamp(lo, hi);
        }
        if d != THUMB {
            let [lo, hi] = coupled_mcp_limit(d, v[1], map);
            v[0] = if lo <= hi { v[0].clamp(lo, hi) } else { 0.5 * (lo + hi) };
        }
        *digit = crate::finger::FingerJointState::from_array(v);
    }
    out
}
