//! Training-free out-of-distribution detection by selective low-rank
//! approximation of encoder weight matrices.
//!
//! The crate ships a miniature, fully deterministic dual encoder (a vision
//! tower over patch tokens and a text tower over class prompts, both joined in
//! a shared feature space by projection matrices). On top of it sit:
//!
//! * [`linalg`]: dense matrices, a one-sided Jacobi SVD and rank-`r`
//!   approximations with selectable prune strategy;
//! * [`model`]: the encoder, its weight store and on-disk container;
//! * [`scoring`]: image/concept similarities, MCM, GL-MCM, MSP, Energy and the
//!   thresholded detector;
//! * [`loss`]: the LoCoOp objective (ID cross-entropy plus entropy
//!   regularisation over ID-irrelevant patches);
//! * [`search`]: greedy per-layer search over rank-reduction ratios and its
//!   interleaved and layer-exhaustive variants;
//! * [`metrics`]: FPR at a fixed TPR and AUROC;
//! * [`finetune`]: training of the minor singular factors with the principal
//!   part frozen, plus a zero-initialised low-rank adapter baseline;
//! * [`harness`]: synthetic tasks, experiment configuration, the end-to-end
//!   pipeline and report emission.

pub mod error;
pub mod finetune;
pub mod harness;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod scoring;
pub mod search;

pub use error::{Error, Result};
pub use linalg::{Matrix, PruneKind, PruneStrategy, SvdTriple};
pub use model::{ModelConfig, Tower, WeightKey, WeightStore, WeightType};
