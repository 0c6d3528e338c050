//! Independent oracles and property suites shared by the `selftest`
//! command and the acceptance tests. Each check reports its worst observed
//! error against a fixed tolerance.

mod autodiff;
mod metrics;
mod oracles;

use std::fmt;

pub use autodiff::{autodiff_suite, grad_check};
pub use metrics::{cka_invariance_suite, mapeval_property_suite, metric_oracle_suite, random_corpus};
pub use oracles::{conv2d_oracle, oracle_suite};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, cases: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            cases,
            worst,
            tolerance,
        }
    }

    /// Pass/fail check with no numeric error.
    pub fn flag(name: impl Into<String>, cases: usize, ok: bool) -> Self {
        Self::new(name, cases, if ok { 0.0 } else { 1.0 }, 0.5)
    }

    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} cases={} worst={:.3e} tol={:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

/// Largest absolute elementwise difference.
pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
