//! A desk-scale testbed for lattice-based sequence-discriminative training.
//!
//! The crate implements and compares four optimizers — SGD, Hessian-Free
//! (Gauss-Newton), DSAG-HF and Natural Gradient (empirical Fisher) — on
//! MMI/MPE/sMBR criteria over small feed-forward networks and hypothesis
//! lattices, together with brute-force oracles (dense matrices, finite
//! differences, exhaustive path enumeration) that verify every gradient,
//! curvature product and lattice quantity.
//!
//! Module map:
//! - [`tensor_net`]: networks, flat parameters, forward/backward/R-op passes.
//! - [`lattice`]: lattices, forward-backward, the sequence criteria, decoding.
//! - [`curvature`]: matrix-free Gauss-Newton and empirical-Fisher products.
//! - [`optim`]: the CG solver and the four optimizer update rules.
//! - [`oracle`]: independent brute-force checks used by tests and `verify`.
//! - [`harness`]: synthetic tasks, CE pre-training, the training loop, metrics.

pub mod curvature;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod math;
pub mod optim;
pub mod oracle;
pub mod tensor_net;

pub use error::{Error, Result};
