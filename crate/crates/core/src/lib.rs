//! Reset prediction for redirected walking: layout geometry, a redirected
//! walking simulator for ground-truth reset counts, dataset tooling with the
//! group statistics, and a from-scratch Vision Transformer regressor with
//! attention rollout.

pub mod dataset;
pub mod geometry;
pub mod layout;
pub mod model;
pub mod predict;
pub mod rdwsim;
pub mod training;
