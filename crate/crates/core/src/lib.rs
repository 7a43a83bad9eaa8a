//! Design-based estimation for two-stage cluster samples.
//!
//! The crate covers the full path from a finite population of primary
//! sampling units (PSUs) to confidence intervals:
//!
//! - [`frame`]: population model, CSV ingestion, synthetic populations.
//! - [`designs`]: first-stage (SI, SIR, Bernoulli, stratified SI) and
//!   second-stage (SI, systematic, census) selection engines.
//! - [`estimators`]: Horvitz–Thompson and Hansen–Hurwitz totals, variance
//!   estimators, smooth functions of totals and linearization.
//! - [`coupling`]: joint Bernoulli/SI and SIR/SI draws and the empirical
//!   checks built on them.
//! - [`bootstrap`]: with-replacement bootstrap of PSUs and its intervals.
//! - [`montecarlo`]: simulation harness producing relative bias, relative
//!   stability and tail error rates.
//!
//! All randomness flows through [`rng::Stream`], a keyed counter-based
//! generator, so results do not depend on thread count.

pub mod bootstrap;
pub mod coupling;
pub mod designs;
pub mod error;
pub mod estimators;
pub mod frame;
pub mod montecarlo;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
