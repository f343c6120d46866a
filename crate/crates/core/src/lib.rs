//! Realized and conditional asymmetric betas.
//!
//! The crate covers the full workflow: daily-return and characteristic
//! panels, realized CAPM/downside/upside betas and semibetas, a suite of
//! panel learners forecasting those betas from firm characteristics under
//! a rolling-window protocol, out-of-sample evaluation, DCF valuation with
//! beta-implied discount rates, and market-neutral minimum-variance
//! portfolios. A synthetic data generator with a known beta process makes
//! every stage testable without proprietary data.

pub mod beta;
pub mod error;
pub mod evaluation;
pub mod forecast;
pub mod learners;
pub mod month;
pub mod panel;
pub mod par;
pub mod pipeline;
pub mod portfolio;
pub mod stats;
pub mod synth;
pub mod valuation;

pub use error::{Error, Result};
pub use month::Month;
