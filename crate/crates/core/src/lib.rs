//! Binary-mask feature disentanglement with information-theoretic
//! sufficiency, paired purification and an information bottleneck, trained
//! on synthetic multi-domain data whose feature regions are known.
//!
//! Layout:
//! - [`grad`]: reverse-mode differentiation tape and gradient checking
//! - [`gradcheck`]: finite-difference check of the full objective
//! - [`synth`]: multi-domain generator with ground-truth feature regions
//! - [`model`]: encoder, mask disentangler, class and domain classifiers
//! - [`losses`]: the objective terms and their weighted total
//! - [`trainer`]: Adam, warm-up schedules, weight averaging, training loop
//! - [`eval`]: accuracy, mask recovery, probe information estimates, suites
//! - [`config`]: flat key=value run configuration
//! - [`report`]: CSV tables and JSON manifests

pub mod config;
pub mod eval;
pub mod grad;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod report;
pub mod synth;
pub mod trainer;
