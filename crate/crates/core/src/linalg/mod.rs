//! Dense matrices, SVD and low-rank approximation.

mod lowrank;
mod matrix;
mod svd;

pub use lowrank::{ft_split, low_rank_approx, reduced_rank, PruneKind, PruneStrategy};
pub use matrix::{dot, norm, Matrix};
pub use svd::{svd, SvdTriple};
