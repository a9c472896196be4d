//! Image/concept similarities, OOD scores and the thresholded detector.
//!
//! Every score follows the same convention: higher means more
//! in-distribution, and a sample is accepted as ID when `score >= lambda`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::model::{ConceptBank, EncodedImage};

/// `(1 - tpr) * n` values within this distance above an integer count as that
/// integer before taking the ceiling.
const CEIL_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreParams {
    /// Temperature of the global softmax.
    pub tau: f64,
    /// Temperature of the local (patch) softmax.
    pub tau_local: f64,
    /// Energy temperature.
    pub energy_t: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams { tau: 1.0, tau_local: 1.0, energy_t: 0.1 }
    }
}

impl ScoreParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("tau_local", self.tau_local), ("energy_t", self.energy_t)] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("scores.{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Mcm,
    #[serde(rename = "gl-mcm", alias = "glmcm")]
    GlMcm,
    Msp,
    Energy,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Mcm => "mcm",
            ScoreKind::GlMcm => "gl-mcm",
            ScoreKind::Msp => "msp",
            ScoreKind::Energy => "energy",
        }
    }

    /// MCM and GL-MCM need concept features; MSP and Energy need a head.
    pub fn needs_text_tower(self) -> bool {
        matches!(self, ScoreKind::Mcm | ScoreKind::GlMcm)
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcm" => Ok(ScoreKind::Mcm),
            "gl-mcm" | "glmcm" | "gl_mcm" => Ok(ScoreKind::GlMcm),
            "msp" => Ok(ScoreKind::Msp),
            "energy" => Ok(ScoreKind::Energy),
            other => invalid(format!("unknown score {other:?}")),
        }
    }
}

/// Labelled ID and OOD scores of one scoring function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub score_name: String,
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(score_name: impl Into<String>, id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Self {
        ScoreSet { score_name: score_name.into(), id_scores, ood_scores }
    }

    /// Non-empty and finite on both sides.
    pub fn validate(&self) -> Result<()> {
        if self.id_scores.is_empty() || self.ood_scores.is_empty() {
            return invalid(format!("score set {:?} needs ID and OOD scores", self.score_name));
        }
        if !self.id_scores.iter().chain(&self.ood_scores).all(|v| v.is_finite()) {
            return invalid(format!("score set {:?} has non-finite scores", self.score_name));
        }
        Ok(())
    }

    /// Writes `sample_id,label,score`, ID rows first.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample_id", "label", "score"])?;
        let rows = self
            .id_scores
            .iter()
            .map(|s| ("id", s))
            .chain(self.ood_scores.iter().map(|s| ("ood", s)));
        for (i, (label, score)) in rows.enumerate() {
            w.write_record([i.to_string(), label.to_string(), score.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(score_name: impl Into<String>, input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            #[allow(dead_code)]
            sample_id: String,
            label: String,
            score: f64,
        }
        let mut set = ScoreSet::new(score_name, Vec::new(), Vec::new());
        for row in csv::Reader::from_reader(input).deserialize() {
            let row: Row = row?;
            match row.label.as_str() {
                "id" => set.id_scores.push(row.score),
                "ood" => set.ood_scores.push(row.score),
                other => return invalid(format!("unknown label {other:?} in score CSV")),
            }
        }
        Ok(set)
    }
}

fn cosine(a: &[f64], b: &[f64], what: &str) -> Result<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric(format!("zero-norm feature in {what}")));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn check_dims(img: &EncodedImage, bank: &ConceptBank) -> Result<()> {
    if img.global.len() != bank.features.cols() || img.local.cols() != bank.features.cols() {
        return invalid(format!(
            "image features have dim {}, concepts have dim {}",
            img.global.len(),
            bank.features.cols()
        ));
    }
    Ok(())
}

/// Cosine similarity of the global image feature with each concept.
pub fn iwic_global(img: &EncodedImage, bank: &ConceptBank) -> Result<Vec<f64>> {
    check_dims(img, bank)?;
    (0..bank.n_classes())
        .map(|c| cosine(&img.global, bank.features.row(c), "global IWIC"))
        .collect()
}

/// Cosine similarity of every patch with every concept, `n_patches × K`.
pub fn patch_similarities(img: &EncodedImage, bank: &ConceptBank) -> Result<Matrix> {
    check_dims(img, bank)?;
    let (l, k) = (img.local.rows(), bank.n_classes());
    let mut out = Matrix::zeros(l, k);
    for i in 0..l {
        for c in 0..k {
            out[(i, c)] = cosine(img.local.row(i), bank.features.row(c), "local IWIC")?;
        }
    }
    Ok(out)
}

/// Per-class maximum over patches of the patch/concept cosine similarity.
pub fn iwic_local(img: &EncodedImage, bank: &ConceptBank) -> Result<Vec<f64>> {
    let sims = patch_similarities(img, bank)?;
    Ok((0..sims.cols())
        .map(|c| (0..sims.rows()).map(|i| sims[(i, c)]).fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Numerically stable `softmax(values / temperature)`.
pub fn softmax(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Largest softmax probability, computed as `1 / sum_c exp((x_c - max)/t)`.
pub fn max_softmax(values: &[f64], temperature: f64) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| ((v - max) / temperature).exp()).sum();
    1.0 / sum
}

/// `t * log sum_c exp(x_c / t)`, shifted by the maximum.
pub fn log_sum_exp(values: &[f64], temperature: f64) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| ((v - max) / temperature).exp()).sum();
    max + temperature * sum.ln()
}

/// Maximum concept matching: the largest softmax probability of the global
/// similarities at temperature `tau`.
pub fn mcm_score(sims_global: &[f64], tau: f64) -> f64 {
    max_softmax(sims_global, tau)
}

/// MCM plus the same max-softmax over the local similarities at `tau_local`.
pub fn glmcm_score(sims_global: &[f64], sims_local: &[f64], tau: f64, tau_local: f64) -> f64 {
    max_softmax(sims_global, tau) + max_softmax(sims_local, tau_local)
}

/// Maximum softmax probability of classifier logits.
pub fn msp_score(logits: &[f64]) -> f64 {
    max_softmax(logits, 1.0)
}

/// `T · log sum_c exp(logit_c / T)`; higher means more ID.
pub fn energy_score(logits: &[f64], temperature: f64) -> f64 {
    log_sum_exp(logits, temperature)
}

/// Threshold such that at least a `tpr` fraction of the ID scores pass:
/// the `ceil((1 - tpr) · n)`-th smallest ID score.
pub fn fit_threshold(id_scores: &[f64], tpr: f64) -> Result<f64> {
    if id_scores.is_empty() {
        return invalid("fit_threshold needs at least one ID score");
    }
    if !(tpr > 0.0 && tpr < 1.0) {
        return invalid(format!("tpr must lie in (0, 1), got {tpr}"));
    }
    if id_scores.iter().any(|v| !v.is_finite()) {
        return invalid("fit_threshold got a non-finite score");
    }
    let n = id_scores.len();
    let k = (((1.0 - tpr) * n as f64) - CEIL_EPS).ceil().clamp(1.0, n as f64) as usize;
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    Ok(sorted[k - 1])
}

/// 1 (ID) when `score >= lambda`, else 0 (OOD).
pub fn detect(score: f64, lambda: f64) -> u8 {
    u8::from(score >= lambda)
}
