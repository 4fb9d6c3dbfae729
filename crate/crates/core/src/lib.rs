//! Design and analysis of two-phase studies.
//!
//! The crate computes second-phase sampling rules that minimise (or, for
//! vector parameters, maximin-improve) the semiparametric efficiency bound,
//! estimates those rules from a pilot subsample, draws the second phase under
//! an exact expected budget, and produces efficient one-step estimates.
//!
//! Module map:
//! - [`eif`]: catalog of estimation problems and their influence functions
//! - [`rule`]: sampling rules, threshold solver and Neyman-type optimal rules
//! - [`maximin`]: relative-improvement objective and maximin solvers
//! - [`moments`]: joint conditional mean / standard deviation sieve fit
//! - [`pipeline`]: pilot, rule estimation, second-phase draw and estimators
//! - [`sim`]: simulation designs and Monte Carlo aggregation
//! - [`io`]: plain-text key-value formats and CSV ingestion

pub mod eif;
pub mod error;
pub mod io;
pub mod linalg;
pub mod maximin;
pub mod moments;
pub mod pipeline;
pub mod rule;
pub mod sim;

pub use error::{Error, Result};
