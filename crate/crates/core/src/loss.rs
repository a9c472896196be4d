//! LoCoOp objective: cross-entropy on the global similarities plus entropy
//! maximisation over patches whose predictions rank the true class outside
//! the top-k.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::model::{
    classify_logits, encode_concepts, encode_image, ConceptBank, EncodedImage, LabeledImage,
    Prompt, WeightStore,
};
use crate::scoring::{iwic_global, log_sum_exp, patch_similarities, softmax};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    /// Weight of the OOD (negative entropy) term.
    pub lambda_ood: f64,
    /// Rank cutoff defining the ID-irrelevant patches.
    pub top_k: usize,
    /// Softmax temperature for both the patch and the global (ID) term.
    pub tau_local: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams { lambda_ood: 0.1, top_k: 2, tau_local: 1.0 }
    }
}

impl LossParams {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !(self.lambda_ood >= 0.0 && self.lambda_ood.is_finite()) {
            return invalid(format!("lambda_ood must be non-negative, got {}", self.lambda_ood));
        }
        if self.top_k > n_classes {
            return invalid(format!("top_k {} exceeds class count {n_classes}", self.top_k));
        }
        if !(self.tau_local > 0.0 && self.tau_local.is_finite()) {
            return invalid(format!("tau_local must be positive, got {}", self.tau_local));
        }
        Ok(())
    }
}

/// Components of the objective; `total = id_loss + lambda_ood * ood_loss`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub id_loss: f64,
    pub ood_loss: f64,
    pub ood_patch_fraction: f64,
}

impl LossBreakdown {
    fn add(self, o: LossBreakdown) -> LossBreakdown {
        LossBreakdown {
            total: self.total + o.total,
            id_loss: self.id_loss + o.id_loss,
            ood_loss: self.ood_loss + o.ood_loss,
            ood_patch_fraction: self.ood_patch_fraction + o.ood_patch_fraction,
        }
    }

    fn scale(self, s: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * s,
            id_loss: self.id_loss * s,
            ood_loss: self.ood_loss * s,
            ood_patch_fraction: self.ood_patch_fraction * s,
        }
    }
}

/// What the global feature is matched against: class prompts through the
/// text tower, or the unimodal classification head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSpace {
    Prompts(Vec<Prompt>),
    Head,
}

/// Per-patch class probabilities: softmax of patch/concept cosines at
/// `tau_local`, one row per patch.
pub fn patch_probs(img: &EncodedImage, bank: &ConceptBank, tau_local: f64) -> Result<Matrix> {
    let sims = patch_similarities(img, bank)?;
    let mut probs = Matrix::zeros(sims.rows(), sims.cols());
    for i in 0..sims.rows() {
        probs.row_mut(i).copy_from_slice(&softmax(sims.row(i), tau_local));
    }
    Ok(probs)
}

/// 1-based rank of `class` in `row`; ties go to the lower class index.
fn rank_of(row: &[f64], class: usize) -> usize {
    let p = row[class];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > p || (v == p && c < class))
        .count()
}

/// Patches whose true-class rank exceeds `top_k`.
pub fn ood_regions(probs: &Matrix, true_class: usize, top_k: usize) -> Vec<usize> {
    assert!(true_class < probs.cols(), "true class out of range");
    (0..probs.rows()).filter(|&i| rank_of(probs.row(i), true_class) > top_k).collect()
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn check_class(true_class: usize, k: usize) -> Result<()> {
    if true_class >= k {
        return invalid(format!("class {true_class} out of range for {k} classes"));
    }
    Ok(())
}

fn cross_entropy(logits: &[f64], temperature: f64, target: usize) -> f64 {
    (log_sum_exp(logits, temperature) - logits[target]) / temperature
}

/// LoCoOp loss of one image.
pub fn locoop_loss(
    img: &EncodedImage,
    bank: &ConceptBank,
    true_class: usize,
    params: &LossParams,
) -> Result<LossBreakdown> {
    check_class(true_class, bank.n_classes())?;
    let sims = iwic_global(img, bank)?;
    let id_loss = cross_entropy(&sims, params.tau_local, true_class);
    let probs = patch_probs(img, bank, params.tau_local)?;
    let j = ood_regions(&probs, true_class, params.top_k);
    let ood_loss = if j.is_empty() {
        0.0
    } else {
        -j.iter().map(|&i| entropy(probs.row(i))).sum::<f64>() / j.len() as f64
    };
    Ok(LossBreakdown {
        total: id_loss + params.lambda_ood * ood_loss,
        id_loss,
        ood_loss,
        ood_patch_fraction: j.len() as f64 / probs.rows() as f64,
    })
}

/// Loss of the unimodal path: cross-entropy of the head logits.
pub fn head_loss(logits: &[f64], true_class: usize) -> Result<LossBreakdown> {
    check_class(true_class, logits.len())?;
    let id_loss = cross_entropy(logits, 1.0, true_class);
    Ok(LossBreakdown { total: id_loss, id_loss, ood_loss: 0.0, ood_patch_fraction: 0.0 })
}

/// Gradient of cos(a, b) with respect to `a`.
fn cos_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na = norm(a);
    let nb = norm(b);
    let c = dot(a, b) / (na * nb);
    a.iter().zip(b).map(|(x, y)| y / (na * nb) - c * x / (na * na)).collect()
}

/// Gradients of [`locoop_loss`] with respect to the image and concept
/// features. The patch set J is held fixed (it is piecewise constant).
pub struct FeatureGrads {
    pub loss: LossBreakdown,
    pub d_global: Vec<f64>,
    pub d_local: Matrix,
    pub d_concepts: Matrix,
}

pub fn locoop_feature_grads(
    img: &EncodedImage,
    bank: &ConceptBank,
    true_class: usize,
    params: &LossParams,
) -> Result<FeatureGrads> {
    let loss = locoop_loss(img, bank, true_class, params)?;
    let k = bank.n_classes();
    let d = bank.features.cols();
    let tau = params.tau_local;
    let mut d_global = vec![0.0; d];
    let mut d_local = Matrix::zeros(img.local.rows(), d);
    let mut d_concepts = Matrix::zeros(k, d);

    let sims = iwic_global(img, bank)?;
    let q = softmax(&sims, tau);
    for c in 0..k {
        let ds = (q[c] - if c == true_class { 1.0 } else { 0.0 }) / tau;
        let concept = bank.features.row(c);
        for (o, g) in d_global.iter_mut().zip(cos_grad(&img.global, concept)) {
            *o += ds * g;
        }
        for (o, g) in d_concepts.row_mut(c).iter_mut().zip(cos_grad(concept, &img.global)) {
            *o += ds * g;
        }
    }

    let probs = patch_probs(img, bank, tau)?;
    let j = ood_regions(&probs, true_class, params.top_k);
    if !j.is_empty() && params.lambda_ood != 0.0 {
        let weight = params.lambda_ood / j.len() as f64;
        for &i in &j {
            let p = probs.row(i);
            let plogp: f64 = p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
            let patch = img.local.row(i);
            for c in 0..k {
                let log_p = if p[c] > 0.0 { p[c].ln() } else { 0.0 };
                let dt = weight * p[c] * (log_p - plogp) / tau;
                if dt == 0.0 {
                    continue;
                }
                let concept = bank.features.row(c);
                for (o, g) in d_local.row_mut(i).iter_mut().zip(cos_grad(patch, concept)) {
                    *o += dt * g;
                }
                for (o, g) in d_concepts.row_mut(c).iter_mut().zip(cos_grad(concept, patch)) {
                    *o += dt * g;
                }
            }
        }
    }
    Ok(FeatureGrads { loss, d_global, d_local, d_concepts })
}

/// Mean loss and ID accuracy over a labelled set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    /// Fraction of samples whose global argmax is the true class.
    pub accuracy: f64,
}

/// Sum in a fixed pairwise tree so the result does not depend on threading.
pub(crate) fn pairwise_sum<T: Copy>(items: &[T], add: &impl Fn(T, T) -> T) -> Option<T> {
    match items.len() {
        0 => None,
        1 => Some(items[0]),
        n => {
            let (a, b) = items.split_at(n / 2);
            Some(add(pairwise_sum(a, add)?, pairwise_sum(b, add)?))
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Evaluates the objective on every sample (in parallel) and averages.
pub fn evaluate_dataset(
    store: &WeightStore,
    samples: &[LabeledImage],
    space: &ClassSpace,
    params: &LossParams,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return invalid("evaluation set is empty");
    }
    let k = store.config().n_classes;
    params.validate(k)?;
    let bank = match space {
        ClassSpace::Prompts(prompts) => Some(encode_concepts(store, prompts)?),
        ClassSpace::Head => None,
    };
    let per_sample: Vec<(LossBreakdown, f64)> = samples
        .par_iter()
        .map(|s| -> Result<(LossBreakdown, f64)> {
            match &bank {
                Some(bank) => {
                    let img = encode_image(store, &s.patches)?;
                    let loss = locoop_loss(&img, bank, s.label, params)?;
                    let hit = argmax(&iwic_global(&img, bank)?) == s.label;
                    Ok((loss, f64::from(u8::from(hit))))
                }
                None => {
                    let logits = classify_logits(store, &s.patches)?;
                    let loss = head_loss(&logits, s.label)?;
                    Ok((loss, f64::from(u8::from(argmax(&logits) == s.label))))
                }
            }
        })
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let losses: Vec<LossBreakdown> = per_sample.iter().map(|p| p.0).collect();
    let hits: Vec<f64> = per_sample.iter().map(|p| p.1).collect();
    let loss = pairwise_sum(&losses, &LossBreakdown::add).expect("non-empty").scale(1.0 / n);
    let accuracy = pairwise_sum(&hits, &|a, b| a + b).expect("non-empty") / n;
    Ok(Evaluation { loss, accuracy })
}

/// Mean [`LossBreakdown`] over a labelled set.
pub fn dataset_loss(
    store: &WeightStore,
    samples: &[LabeledImage],
    space: &ClassSpace,
    params: &LossParams,
) -> Result<LossBreakdown> {
    evaluate_dataset(store, samples, space, params).map(|e| e.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank(rows: Vec<Vec<f64>>) -> ConceptBank {
        let n = rows.len();
        ConceptBank {
            features: Matrix::from_rows(&rows).unwrap(),
            class_names: (0..n).map(|i| format!("c{i}")).collect(),
        }
    }

    fn random_instance(seed: u64, k: usize, l: usize, d: usize) -> (EncodedImage, ConceptBank) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize| Matrix::from_fn(r, d, |_, _| rng.gen_range(-1.0..1.0));
        let concepts = m(k);
        let local = m(l);
        let global = m(1).row(0).to_vec();
        (
            EncodedImage { global, local },
            ConceptBank { features: concepts, class_names: vec![String::new(); k] },
        )
    }

    #[test]
    fn single_class_rows_are_one() {
        let (img, _) = random_instance(1, 1, 4, 3);
        let b = bank(vec![vec![0.5, -0.2, 0.1]]);
        let p = patch_probs(&img, &b, 0.3).unwrap();
        assert!(p.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn equidistant_patch_has_uniform_row() {
        let b = bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let img = EncodedImage {
            global: vec![1.0, 0.0],
            local: Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
        };
        let p = patch_probs(&img, &b, 0.5).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15 && (p[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn patch_probs_match_direct_softmax() {
        let (img, b) = random_instance(3, 4, 5, 6);
        let p = patch_probs(&img, &b, 0.2).unwrap();
        for i in 0..5 {
            let patch = img.local.row(i);
            let cos: Vec<f64> = (0..4)
                .map(|c| {
                    let v = b.features.row(c);
                    dot(patch, v) / (norm(patch) * norm(v))
                })
                .collect();
            let z: f64 = cos.iter().map(|c| (c / 0.2).exp()).sum();
            for c in 0..4 {
                assert!(((cos[c] / 0.2).exp() / z - p[(i, c)]).abs() < 1e-12);
            }
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ood_region_examples() {
        let top = Matrix::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.5, 0.3, 0.2]]).unwrap();
        assert!(ood_regions(&top, 0, 1).is_empty());
        assert_eq!(ood_regions(&top, 0, 0), vec![0, 1]);
        // True class 1: ranks are 2, 3 (tie broken toward lower index), 1.
        let crafted =
            Matrix::from_rows(&[vec![0.5, 0.3, 0.2], vec![0.4, 0.2, 0.4], vec![0.1, 0.6, 0.3]])
                .unwrap();
        assert_eq!(ood_regions(&crafted, 1, 1), vec![0, 1]);
        assert_eq!(ood_regions(&crafted, 1, 2), vec![1]);
        assert!(ood_regions(&crafted, 1, 3).is_empty());
        // True class 2: ranks 3, 2 (tie with class 0 loses), 2.
        assert_eq!(ood_regions(&crafted, 2, 1), vec![0, 1, 2]);
        assert_eq!(ood_regions(&crafted, 2, 2), vec![0]);
    }

    #[test]
    fn zero_lambda_total_is_id_loss() {
        let (img, b) = random_instance(4, 3, 4, 5);
        let params = LossParams { lambda_ood: 0.0, top_k: 1, tau_local: 0.5 };
        let l = locoop_loss(&img, &b, 2, &params).unwrap();
        assert_eq!(l.total, l.id_loss);
    }

    #[test]
    fn uniform_regions_give_minus_log_k() {
        // Every patch orthogonal to all three concepts: uniform rows, and with
        // ties the true class 2 ranks last.
        let b = bank(vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]);
        let img = EncodedImage {
            global: vec![0.0, 0.0, 1.0, 0.0],
            local: Matrix::from_rows(&[vec![0.0, 0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0, -2.0]]).unwrap(),
        };
        let params = LossParams { lambda_ood: 0.5, top_k: 1, tau_local: 1.0 };
        let l = locoop_loss(&img, &b, 2, &params).unwrap();
        assert!((l.ood_loss + 3.0f64.ln()).abs() < 1e-15);
        assert_eq!(l.ood_patch_fraction, 1.0);
    }

    #[test]
    fn feature_gradients_match_finite_differences() {
        let (img, b) = random_instance(9, 4, 5, 3);
        let params = LossParams { lambda_ood: 0.7, top_k: 1, tau_local: 0.3 };
        let g = locoop_feature_grads(&img, &b, 1, &params).unwrap();
        let j0 = ood_regions(&patch_probs(&img, &b, 0.3).unwrap(), 1, 1);
        let h = 1e-6;
        let f = |img: &EncodedImage, b: &ConceptBank| locoop_loss(img, b, 1, &params).unwrap().total;
        for i in 0..3 {
            let mut p = img.clone();
            p.global[i] += h;
            let mut m = img.clone();
            m.global[i] -= h;
            let fd = (f(&p, &b) - f(&m, &b)) / (2.0 * h);
            assert!((fd - g.d_global[i]).abs() < 1e-6);
        }
        for idx in 0..img.local.as_slice().len() {
            let mut p = img.clone();
            p.local.as_mut_slice()[idx] += h;
            let mut m = img.clone();
            m.local.as_mut_slice()[idx] -= h;
            assert_eq!(ood_regions(&patch_probs(&p, &b, 0.3).unwrap(), 1, 1), j0);
            let fd = (f(&p, &b) - f(&m, &b)) / (2.0 * h);
            assert!((fd - g.d_local.as_slice()[idx]).abs() < 1e-6);
        }
        for idx in 0..b.features.as_slice().len() {
            let mut p = b.clone();
            p.features.as_mut_slice()[idx] += h;
            let mut m = b.clone();
            m.features.as_mut_slice()[idx] -= h;
            let fd = (f(&img, &p) - f(&img, &m)) / (2.0 * h);
            assert!((fd - g.d_concepts.as_slice()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn pairwise_sum_is_exact_on_integers() {
        let v: Vec<f64> = (1..=37).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v, &|a, b| a + b), Some(703.0));
        assert_eq!(pairwise_sum::<f64>(&[], &|a, b| a + b), None);
    }

    #[test]
    fn params_validation() {
        assert!(LossParams { top_k: 6, ..Default::default() }.validate(5).is_err());
        assert!(LossParams { lambda_ood: -1.0, ..Default::default() }.validate(5).is_err());
        assert!(LossParams::default().validate(5).is_ok());
    }
}
