//! CUDGNet: single-source domain generalization with contrastive,
//! uncertainty-aware adversarial domain augmentation.
//!
//! Trains a task model on one source domain (CIFAR-10) so it holds up on
//! unseen corrupted domains (CIFAR-10-C). Source capacity is expanded three
//! ways: fractal/affine input mixing ([`transform`]), exact feature
//! distribution mixing in feature space ([`style_ops`]), and a variational
//! perturbation generator trained adversarially against the task model
//! ([`generator`], [`training`]). A contrastive loss ties the views of each
//! sample together ([`objectives`]), and the generator's predicted
//! perturbation scale doubles as a single-pass domain-uncertainty score
//! ([`uncertainty`]).
//!
//! Start with the runnable programs in `examples/` (one per capability) or
//! the `cudgnet` binary's `train` / `eval` / `uncertainty` / `ablate`
//! subcommands.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod generator;
pub mod models;
pub mod nn;
pub mod npy;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod rng;
pub mod style_ops;
pub mod synth;
pub mod tape;
pub mod training;
pub mod transform;
pub mod uncertainty;

pub use error::{Error, Result};
