//! Convex, even interaction potentials `V` and their assumption constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An even, uniformly convex interaction with Hölder-continuous `V''`.
pub trait Interaction: Send + Sync {
    fn value(&self, t: f64) -> f64;
    fn first(&self, t: f64) -> f64;
    fn second(&self, t: f64) -> f64;
    /// Lower bound on `V''`.
    fn lambda(&self) -> f64;
    /// Upper bound on `V''`.
    fn big_lambda(&self) -> f64;
    /// Hölder exponent of `V''`.
    fn gamma(&self) -> f64;
    /// Hölder seminorm bound of `V''`.
    fn holder_m(&self) -> f64;
}

/// The built-in potentials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Potential {
    /// `V(t) = c t² / 2`.
    Quadratic { c: f64 },
    /// `V(t) = t² / 2 + a log cosh t`.
    #[serde(rename = "logcosh")]
    LogCosh { a: f64 },
}

/// `max |d/dt sech²(t)| = 4 / (3√3)`, attained at `tanh t = 1/√3`.
const SECH2_SLOPE: f64 = 0.769_800_358_919_501_2;

fn log_cosh(t: f64) -> f64 {
    let x = t.abs();
    x + (-2.0 * x).exp().ln_1p() - std::f64::consts::LN_2
}

fn sech2(t: f64) -> f64 {
    let s = 1.0 / t.cosh();
    s * s
}

impl Potential {
    pub fn quadratic(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!("quadratic coefficient must be > 0, got {c}")));
        }
        Ok(Self::Quadratic { c })
    }

    pub fn logcosh(a: f64) -> Result<Self> {
        if !(a > -1.0 && a.is_finite()) || a == 0.0 {
            return Err(Error::InvalidParameter(format!(
                "logcosh amplitude must satisfy -1 < a, a != 0, got {a}"
            )));
        }
        Ok(Self::LogCosh { a })
    }

    /// Check the parameters of a deserialized value.
    pub fn validated(self) -> Result<Self> {
        match self {
            Self::Quadratic { c } => Self::quadratic(c),
            Self::LogCosh { a } => Self::logcosh(a),
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, Self::Quadratic { .. })
    }

    /// Short identifier used in output tables.
    pub fn id(&self) -> String {
        match self {
            Self::Quadratic { c } => format!("quadratic(c={c})"),
            Self::LogCosh { a } => format!("logcosh(a={a})"),
        }
    }
}

impl Interaction for Potential {
    #[inline]
    fn value(&self, t: f64) -> f64 {
        match *self {
            Self::Quadratic { c } => 0.5 * c * t * t,
            Self::LogCosh { a } => 0.5 * t * t + a * log_cosh(t),
        }
    }

    #[inline]
    fn first(&self, t: f64) -> f64 {
        match *self {
            Self::Quadratic { c } => c * t,
            Self::LogCosh { a } => t + a * t.tanh(),
        }
    }

    #[inline]
    fn second(&self, t: f64) -> f64 {
        match *self {
            Self::Quadratic { c } => c,
            Self::LogCosh { a } => 1.0 + a * sech2(t),
        }
    }

    fn lambda(&self) -> f64 {
        match *self {
            Self::Quadratic { c } => c,
            Self::LogCosh { a } => 1.0 + a.min(0.0),
        }
    }

    fn big_lambda(&self) -> f64 {
        match *self {
            Self::Quadratic { c } => c,
            Self::LogCosh { a } => 1.0 + a.max(0.0),
        }
    }

    fn gamma(&self) -> f64 {
        1.0
    }

    fn holder_m(&self) -> f64 {
        match *self {
            Self::Quadratic { .. } => 0.0,
            Self::LogCosh { a } => 2.0 * a.abs() * SECH2_SLOPE,
        }
    }
}

/// Sample points used by [`validate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    /// Slack allowed on each bound before a violation is flagged.
    pub tolerance: f64,
}

impl Default for SampleGrid {
    fn default() -> Self {
        Self { lo: -10.0, hi: 10.0, points: 2001, tolerance: 1e-12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub min_second: f64,
    pub max_second: f64,
    /// `max |V''(s) - V''(t)| / |s - t|^γ` over adjacent and strided grid pairs.
    pub holder_ratio: f64,
    /// `max |V(t) - V(-t)|`.
    pub symmetry_residual: f64,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Sample-based check of convexity bounds, evenness and Hölder continuity.
pub fn validate<V: Interaction + ?Sized>(v: &V, grid: &SampleGrid) -> ValidationReport {
    let n = grid.points.max(2);
    let ts: Vec<f64> =
        (0..n).map(|k| grid.lo + (grid.hi - grid.lo) * k as f64 / (n - 1) as f64).collect();
    let second: Vec<f64> = ts.iter().map(|&t| v.second(t)).collect();
    let min_second = second.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_second = second.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let gamma = v.gamma();
    let mut holder_ratio: f64 = 0.0;
    for stride in [1usize, 7, 49] {
        for k in stride..n {
            let ds = (ts[k] - ts[k - stride]).abs();
            if ds > 0.0 {
                holder_ratio = holder_ratio.max((second[k] - second[k - stride]).abs() / ds.powf(gamma));
            }
        }
    }
    let symmetry_residual =
        ts.iter().map(|&t| (v.value(t) - v.value(-t)).abs()).fold(0.0, f64::max);

    let tol = grid.tolerance;
    let mut violations = Vec::new();
    if min_second < v.lambda() - tol || min_second <= 0.0 {
        violations.push(format!("V'' drops to {min_second} below lambda = {}", v.lambda()));
    }
    if max_second > v.big_lambda() + tol {
        violations.push(format!("V'' reaches {max_second} above Lambda = {}", v.big_lambda()));
    }
    if holder_ratio > v.holder_m() + tol {
        violations.push(format!("Hölder ratio {holder_ratio} exceeds M = {}", v.holder_m()));
    }
    if symmetry_residual > tol * (1.0 + grid.hi.abs().max(grid.lo.abs()).powi(2)) {
        violations.push(format!("V is not even: residual {symmetry_residual}"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        violations.push(format!("Hölder exponent {gamma} outside (0, 1]"));
    }
    ValidationReport { min_second, max_second, holder_ratio, symmetry_residual, violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct DoubleWell;

    impl Interaction for DoubleWell {
        fn value(&self, t: f64) -> f64 {
            0.25 * t.powi(4) - 0.5 * t * t
        }
        fn first(&self, t: f64) -> f64 {
            t.powi(3) - t
        }
        fn second(&self, t: f64) -> f64 {
            3.0 * t * t - 1.0
        }
        fn lambda(&self) -> f64 {
            1.0
        }
        fn big_lambda(&self) -> f64 {
            1.0
        }
        fn gamma(&self) -> f64 {
            1.0
        }
        fn holder_m(&self) -> f64 {
            1.0
        }
    }

    #[test]
    fn quadratic_values() {
        let v = Potential::quadratic(1.0).unwrap();
        assert_eq!(v.second(7.3), 1.0);
        assert_eq!(v.first(3.0), 3.0);
        let v2 = Potential::quadratic(2.0).unwrap();
        assert_eq!((v2.lambda(), v2.big_lambda(), v2.holder_m()), (2.0, 2.0, 0.0));
        assert!(Potential::quadratic(0.0).is_err());
        assert!(Potential::quadratic(-1.0).is_err());
    }

    #[test]
    fn logcosh_values() {
        let v = Potential::logcosh(0.5).unwrap();
        assert_eq!(v.second(0.0), 1.5);
        assert_eq!((v.lambda(), v.big_lambda()), (1.0, 1.5));
        for k in -5..=5 {
            let t = k as f64;
            assert!((v.value(t) - v.value(-t)).abs() < 1e-14);
        }
        assert!(Potential::logcosh(-1.0).is_err());
        assert!(Potential::logcosh(0.0).is_err());
        let n = Potential::logcosh(-0.5).unwrap();
        assert_eq!((n.lambda(), n.big_lambda()), (0.5, 1.0));
    }

    #[test]
    fn log_cosh_is_stable_for_large_arguments() {
        assert!((log_cosh(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-9);
        assert!((log_cosh(0.3) - 0.3f64.cosh().ln()).abs() < 1e-15);
    }

    #[test]
    fn validation_reports() {
        let g = SampleGrid::default();
        let q = validate(&Potential::quadratic(1.0).unwrap(), &g);
        assert_eq!((q.min_second, q.max_second, q.holder_ratio), (1.0, 1.0, 0.0));
        assert!(q.ok());
        let l = validate(&Potential::logcosh(0.5).unwrap(), &g);
        assert!(l.min_second >= 1.0 - 1e-12 && l.max_second <= 1.5);
        assert!(l.ok(), "{:?}", l.violations);
        let bad = validate(&DoubleWell, &g);
        assert!(!bad.ok());
    }

    #[test]
    fn finite_differences() {
        for v in [Potential::quadratic(1.3).unwrap(), Potential::logcosh(0.5).unwrap(), Potential::logcosh(-0.4).unwrap()] {
            for &h in &[1e-3, 1e-4] {
                for k in -20..=20 {
                    let t = 0.37 * k as f64;
                    let d1 = (v.value(t + h) - v.value(t - h)) / (2.0 * h);
                    assert!((d1 - v.first(t)).abs() < 10.0 * h * h + 1e-9 * (1.0 + t * t), "V' at {t}");
                    let d2 = (v.first(t + h) - v.first(t - h)) / (2.0 * h);
                    assert!((d2 - v.second(t)).abs() < 10.0 * h * h + 1e-9, "V'' at {t}");
                }
            }
        }
    }

    #[test]
    fn serde_roundtrip() {
        let v = Potential::logcosh(0.5).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"{"name":"logcosh","a":0.5}"#);
        let back: Potential = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
