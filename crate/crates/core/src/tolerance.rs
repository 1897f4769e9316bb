//! Numeric tolerances shared by the library and its test suites.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative error allowed for `to_natural(to_mean(η))` round trips.
    pub round_trip: f64,
    /// Agreement between a cached and a recomputed log-partition.
    pub log_partition: f64,
    /// Step used by centered finite-difference checks.
    pub fd_step: f64,
    /// Relative tolerance for finite-difference agreement.
    pub fd_relative: f64,
    /// Fixed-point stopping threshold (max ‖Δη‖∞) for analytic models.
    pub fixed_point_analytic: f64,
    /// Fixed-point stopping threshold for Monte-Carlo models.
    pub fixed_point_mc: f64,
    /// Minimum effective sample size for importance-weighted moments.
    pub min_ess: f64,
    /// Maximum number of damping halvings before a step is declared divergent.
    pub max_halvings: u32,
}

impl Default for Tolerances {
    fn default() -> Self {
        DEFAULT
    }
}

pub const DEFAULT: Tolerances = Tolerances {
    round_trip: 1e-10,
    log_partition: 1e-12,
    fd_step: 1e-6,
    fd_relative: 1e-4,
    fixed_point_analytic: 1e-8,
    fixed_point_mc: 1e-4,
    min_ess: 10.0,
    max_halvings: 10,
};
