//! Channel profiles: monotonically non-increasing coefficient vectors that
//! rank channels by importance, so a forward pass can drop the tail.
//!
//! Each profile is a [`ProfileFn`] registered under its configuration name.
//! Indices are 1-based in the formulas below, matching how the profiles are
//! usually written down.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{IdpError, Result};

/// A coefficient schedule over `n` channels.
pub trait ProfileFn: Sync {
    fn name(&self) -> &'static str;
    /// Coefficient of channel `i` (1-based) out of `n`.
    fn coefficient(&self, i: usize, n: usize) -> f64;
}

/// `γ_i = 1`: a standard layer.
pub struct AllOne;
/// `γ_i = 1 / i`.
pub struct Harmonic;
/// `γ_i = 1 − i / n`; the last channel gets exactly zero.
pub struct Linear;
/// `γ_i = 1` for `i < n/2`, else `exp(n/2 − i − 1)`; the comparison is real-valued.
pub struct HalfExp;

impl ProfileFn for AllOne {
    fn name(&self) -> &'static str {
        "all-one"
    }
    fn coefficient(&self, _i: usize, _n: usize) -> f64 {
        1.0
    }
}

impl ProfileFn for Harmonic {
    fn name(&self) -> &'static str {
        "harmonic"
    }
    fn coefficient(&self, i: usize, _n: usize) -> f64 {
        1.0 / i as f64
    }
}

impl ProfileFn for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn coefficient(&self, i: usize, n: usize) -> f64 {
        1.0 - i as f64 / n as f64
    }
}

impl ProfileFn for HalfExp {
    fn name(&self) -> &'static str {
        "half-exp"
    }
    fn coefficient(&self, i: usize, n: usize) -> f64 {
        let half = n as f64 / 2.0;
        if (i as f64) < half {
            1.0
        } else {
            (half - i as f64 - 1.0).exp()
        }
    }
}

static REGISTRY: [&dyn ProfileFn; 4] = [&AllOne, &Harmonic, &Linear, &HalfExp];

/// All registered profiles, in canonical order.
pub fn registry() -> &'static [&'static dyn ProfileFn] {
    &REGISTRY
}

pub fn lookup(name: &str) -> Option<&'static dyn ProfileFn> {
    REGISTRY.iter().copied().find(|p| p.name() == name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ProfileKind {
    AllOne,
    Harmonic,
    Linear,
    HalfExp,
}

impl ProfileKind {
    pub const ALL: [ProfileKind; 4] = [
        ProfileKind::AllOne,
        ProfileKind::Harmonic,
        ProfileKind::Linear,
        ProfileKind::HalfExp,
    ];

    pub fn function(self) -> &'static dyn ProfileFn {
        match self {
            ProfileKind::AllOne => &AllOne,
            ProfileKind::Harmonic => &Harmonic,
            ProfileKind::Linear => &Linear,
            ProfileKind::HalfExp => &HalfExp,
        }
    }

    pub fn name(self) -> &'static str {
        self.function().name()
    }
}

impl fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProfileKind {
    type Err = IdpError;

    fn from_str(s: &str) -> Result<Self> {
        ProfileKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = registry().iter().map(|p| p.name()).collect();
                IdpError::argument(format!("unknown profile `{s}` (known: {})", known.join(", ")))
            })
    }
}

impl TryFrom<String> for ProfileKind {
    type Error = IdpError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ProfileKind> for String {
    fn from(k: ProfileKind) -> String {
        k.name().to_string()
    }
}

/// The coefficient vector of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileCoefficients {
    kind: ProfileKind,
    gamma: Vec<f64>,
}

impl ProfileCoefficients {
    pub fn kind(&self) -> ProfileKind {
        self.kind
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn is_all_one(&self) -> bool {
        self.gamma.iter().all(|&g| g == 1.0)
    }

    /// Checks length, non-negativity, monotonicity and `0 < γ_1 ≤ 1`.
    pub fn validate(&self) -> Result<()> {
        let g = &self.gamma;
        if g.is_empty() {
            return Err(IdpError::argument("empty profile"));
        }
        if !(g[0] > 0.0 && g[0] <= 1.0) {
            return Err(IdpError::argument(format!("first coefficient {} not in (0, 1]", g[0])));
        }
        if let Some(i) = (1..g.len()).find(|&i| g[i] > g[i - 1] || g[i] < 0.0) {
            return Err(IdpError::argument(format!(
                "profile not non-increasing at channel {}",
                i + 1
            )));
        }
        Ok(())
    }
}

/// Coefficients of `kind` for `n` channels.
pub fn make_profile(kind: ProfileKind, n: usize) -> Result<ProfileCoefficients> {
    if n == 0 {
        return Err(IdpError::argument("profile needs at least one channel"));
    }
    if kind == ProfileKind::Linear && n == 1 {
        // 1 - 1/1 = 0 would silence the only channel.
        return Err(IdpError::argument("linear profile needs at least two channels"));
    }
    let f = kind.function();
    let gamma = (1..=n).map(|i| f.coefficient(i, n)).collect();
    Ok(ProfileCoefficients { kind, gamma })
}

/// Number of leading channels kept at IDP fraction `p`: `max(1, ⌈p·n⌉)`.
///
/// The product is nudged down by 1e-9 before the ceiling so that fractions
/// like 0.3 × 10 do not round up through representation error.
pub fn active_channels(p: f64, n: usize) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(IdpError::argument(format!("IDP fraction {p} not in (0, 1]")));
    }
    if n == 0 {
        return Err(IdpError::argument("channel count must be positive"));
    }
    let k = (p * n as f64 - 1e-9).ceil() as usize;
    Ok(k.clamp(1, n))
}
