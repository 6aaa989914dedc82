//! Online forecasting with vanishing decision swap regret for every downstream
//! agent whose loss is (approximately) linear in a fixed basis of outcome
//! features.
//!
//! The pipeline: build a [`basis::Basis`], lift each agent loss into a
//! [`linearize::LiftedLoss`], snap the family to a γ-grid, then run the
//! [`engine::Forecaster`] so predictions stay unbiased on every event defined
//! by those agents' best responses. [`audit`] recomputes every regret and bias
//! quantity from a transcript; [`batch`] turns a run into an offline predictor.

pub mod audit;
pub mod basis;
pub mod batch;
pub mod domain;
pub mod engine;
pub mod error;
pub mod game;
pub mod linearize;

pub use error::{Error, Result};
