//! Covariate Ordered Systematic Sampling (COSS) for two-arm experiments.
//!
//! Units are sorted by a pre-experiment covariate and dealt alternately into
//! treatment and control. The crate also carries the usual baselines (seeded
//! complete randomization, CUPED, regression adjustment), paired and
//! independent inference, closed-form and Monte Carlo bias/variance
//! diagnostics, and a simulation harness that replays the linear and
//! quadratic studies end to end.
//!
//! ```
//! use coss::allocation::{coss_allocate, Arm, ExperimentUnit};
//!
//! let units = vec![
//!     ExperimentUnit::new("u1", 5.0),
//!     ExperimentUnit::new("u2", 3.0),
//!     ExperimentUnit::new("u3", 9.0),
//!     ExperimentUnit::new("u4", 1.0),
//! ];
//! let plan = coss_allocate(&units, 7).unwrap();
//! assert_eq!(plan.arm_of("u3"), Some(Arm::Treatment));
//! assert_eq!(plan.arm_of("u1"), Some(Arm::Control));
//! ```

pub mod allocation;
pub mod cli;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod inference;
pub mod rng;
pub mod simgen;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
