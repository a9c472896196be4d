use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::matrix::Matrix;
use super::svd::SvdTriple;

/// Fractional parts within this distance of one half are treated as ties, so
/// that products such as `0.95 * 10` round like the exact `9.5`.
const TIE_EPS: f64 = 1e-9;

/// Which singular components survive a rank reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneKind {
    /// Drop the trailing (smallest) components.
    Minor,
    /// Drop the leading (largest) components.
    Principle,
    /// Drop a uniformly sampled subset.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PruneStrategy {
    pub kind: PruneKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PruneStrategy {
    fn default() -> Self {
        PruneStrategy { kind: PruneKind::Minor, seed: 0 }
    }
}

impl PruneStrategy {
    pub fn minor() -> Self {
        Self::default()
    }

    pub fn principle() -> Self {
        PruneStrategy { kind: PruneKind::Principle, seed: 0 }
    }

    pub fn random(seed: u64) -> Self {
        PruneStrategy { kind: PruneKind::Random, seed }
    }

    /// Same strategy with the seed mixed with `salt`, so that different
    /// matrices draw independent random subsets.
    pub fn salted(self, salt: u64) -> Self {
        PruneStrategy { seed: splitmix64(self.seed ^ splitmix64(salt)), ..self }
    }

    /// Indices (ascending) of the `keep` components retained out of `k`.
    pub fn kept_components(&self, k: usize, keep: usize) -> Vec<usize> {
        debug_assert!(keep <= k);
        match self.kind {
            PruneKind::Minor => (0..keep).collect(),
            PruneKind::Principle => (k - keep..k).collect(),
            PruneKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut idx = rand::seq::index::sample(&mut rng, k, keep).into_vec();
                idx.sort_unstable();
                idx
            }
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rank kept after removing a `ratio` fraction of `full_rank` components:
/// `round((1 - ratio) * full_rank)`, ties rounded away from zero.
pub fn reduced_rank(full_rank: usize, ratio: f64) -> Result<usize> {
    if full_rank == 0 {
        return invalid("full rank must be at least 1");
    }
    if !(0.0..=1.0).contains(&ratio) {
        return invalid(format!("rank reduction ratio {ratio} outside [0, 1]"));
    }
    let x = (1.0 - ratio) * full_rank as f64;
    let floor = x.floor();
    let r = if x - floor >= 0.5 - TIE_EPS { floor + 1.0 } else { floor };
    Ok((r as usize).min(full_rank))
}

/// Rank-`r` approximation built from the components chosen by `strategy`.
pub fn low_rank_approx(t: &SvdTriple, r: usize, strategy: PruneStrategy) -> Result<Matrix> {
    let k = t.sigma.len();
    if r > k {
        return invalid(format!("requested rank {r} exceeds {k} singular components"));
    }
    Ok(t.partial_sum(&strategy.kept_components(k, r)))
}

/// Splits `W` into its rank-`r` principal part and the minor factors:
/// `W = w_hat + b · a`, with `b` holding columns `sqrt(sigma_i) u_i` and `a`
/// rows `sqrt(sigma_i) v_iᵀ` for the components past `r`.
pub fn ft_split(t: &SvdTriple, r: usize) -> Result<(Matrix, Matrix, Matrix)> {
    let k = t.sigma.len();
    if r > k {
        return invalid(format!("reserved rank {r} exceeds {k} singular components"));
    }
    let w_hat = low_rank_approx(t, r, PruneStrategy::minor())?;
    let (m, n) = t.source_shape();
    let minor = k - r;
    let mut b = Matrix::zeros(m, minor);
    let mut a = Matrix::zeros(minor, n);
    for (j, i) in (r..k).enumerate() {
        let root = t.sigma[i].sqrt();
        for row in 0..m {
            b[(row, j)] = root * t.u[(row, i)];
        }
        for col in 0..n {
            a[(j, col)] = root * t.v[(col, i)];
        }
    }
    Ok((w_hat, b, a))
}
