//! Continual learning for mean-field Bayesian MLPs.
//!
//! The crate trains a variational posterior over network weights on a stream
//! of tasks. The core objective combines a Monte Carlo estimate of the
//! negative log likelihood, a KL term against the previous task's posterior,
//! and an optional quadratic elastic penalty weighted by a diagonal Fisher
//! estimate. Baselines (plain variational training, coresets, elastic
//! regularization alone, naive finetuning) share the same network, optimizer
//! and evaluation path so runs are directly comparable.
//!
//! Layout:
//! - [`grad`]: reverse-mode tape over dense f64 tensors
//! - [`bayes`]: variational layers, forward passes, KL, prediction
//! - [`objectives`]: training losses and Fisher information estimation
//! - [`optim`]: Adam on flat parameter vectors
//! - [`continual`]: task loop, coreset selection, evaluation matrix
//! - [`data`]: dataset formats, benchmark task streams
//! - [`harness`]: experiment configs, metrics, summaries, plots

pub mod bayes;
pub(crate) mod container;
pub mod continual;
pub mod data;
pub mod grad;
pub mod gradcheck;
pub mod harness;
pub mod objectives;
pub mod optim;
pub mod seeding;
