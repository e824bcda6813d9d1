//! Training-data influence estimation from per-layer gradients.
//!
//! * [`store`]: gradient data model, binary dump format, damping rule.
//! * [`influence`]: DataInf, Exact, LiSSA, Hessian-free, EK-FAC and the
//!   retraining oracle, plus the inversion/averaging gap diagnostic.
//! * [`lab`]: small adapter-tuned classifiers that generate gradients and
//!   ground truth.
//! * [`eval`]: metrics and experiment pipelines.
//! * [`cli`]: the `datatk` command line.

pub mod cli;
pub mod eval;
pub mod influence;
pub mod lab;
pub mod linalg;
pub mod store;
