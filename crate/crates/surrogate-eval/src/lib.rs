//! Evaluation of longitudinal surrogate markers for censored time-to-event
//! outcomes.
//!
//! The crate estimates the proportion of a treatment effect on survival at a
//! horizon `t` that is explained by a surrogate trajectory collected through
//! an earlier horizon `t0`, using cross-fitted influence-function estimators
//! (a one-step plug-in and a targeted minimum loss estimator), with
//! influence-function standard errors, a simulation harness, and a stepdown
//! procedure for choosing `t0`.

pub mod cli;
pub mod data;
pub mod estimators;
pub mod inference;
pub mod learners;
pub mod nuisance;
pub mod simulation;
pub mod tmle;
pub mod toy;
