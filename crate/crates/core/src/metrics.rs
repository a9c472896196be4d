//! FPR at a fixed TPR and AUROC over [`ScoreSet`]s.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scoring::{fit_threshold, ScoreSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub score_name: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

/// Fraction of OOD scores accepted by the detector whose threshold keeps a
/// `tpr` fraction of ID scores.
pub fn fpr_at_tpr(scores: &ScoreSet, tpr: f64) -> Result<f64> {
    scores.validate()?;
    let lambda = fit_threshold(&scores.id_scores, tpr)?;
    let accepted = scores.ood_scores.iter().filter(|&&s| s >= lambda).count();
    Ok(accepted as f64 / scores.ood_scores.len() as f64)
}

/// Mann–Whitney AUROC: the probability that an ID score exceeds an OOD score,
/// ties counting one half. Sort-based, `O(n log n)`.
pub fn auroc(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let n_id = scores.id_scores.len();
    let n_ood = scores.ood_scores.len();
    let mut all: Vec<(f64, bool)> = scores
        .id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    // Sum of (1-based, tie-averaged) ranks of the ID scores, doubled to stay
    // in integers.
    let mut id_rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j share the average (i + 1 + j) / 2.
        let avg_x2 = (i + 1 + j) as u64;
        let ids = all[i..j].iter().filter(|e| e.1).count() as u64;
        id_rank_sum_x2 += avg_x2 * ids;
        i = j;
    }
    let min_x2 = (n_id * (n_id + 1)) as u64;
    let u = (id_rank_sum_x2 - min_x2) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

pub fn evaluate(scores: &ScoreSet, tpr: f64) -> Result<EvalReport> {
    Ok(EvalReport {
        score_name: scores.score_name.clone(),
        fpr95: fpr_at_tpr(scores, tpr)?,
        auroc: auroc(scores)?,
        n_id: scores.id_scores.len(),
        n_ood: scores.ood_scores.len(),
    })
}
