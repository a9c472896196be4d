//! Fine-tuning of the minor singular factors.
//!
//! Each planned matrix is split as `W = w_hat + b · a`; `w_hat` stays frozen
//! and plain gradient descent on the LoCoOp loss updates `a` and `b`. The
//! baseline mode freezes `W` itself and trains a zero-initialised adapter of
//! a fixed rank on every planned layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{ft_split, reduced_rank, svd, Matrix};
use crate::loss::{
    head_loss, locoop_feature_grads, ClassSpace, LossBreakdown, LossParams,
};
use crate::model::{
    backward_head, backward_image, backward_prompt, encode_image_traced, encode_prompt_traced,
    logits_from_global, ConceptBank, LabeledImage, WeightGrads, WeightKey, WeightStore,
};
use crate::scoring::softmax;
use crate::search::RankPlan;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtMode {
    /// Train the minor factors left out by the searched rank.
    #[default]
    SetarFt,
    /// Train a zero-initialised adapter of `baseline_rank` on every layer.
    LoraBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub loss_params: LossParams,
    pub baseline_rank: usize,
    pub mode: FtMode,
    /// Seeds the adapter initialisation of the baseline.
    pub seed: u64,
}

impl Default for FtConfig {
    fn default() -> Self {
        FtConfig {
            learning_rate: 1e-2,
            epochs: 5,
            loss_params: LossParams::default(),
            baseline_rank: 2,
            mode: FtMode::default(),
            seed: 0,
        }
    }
}

impl FtConfig {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("ft.learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return invalid("ft.epochs must be at least 1");
        }
        if self.mode == FtMode::LoraBaseline && self.baseline_rank == 0 {
            return invalid("ft.baseline_rank must be at least 1");
        }
        self.loss_params.validate(n_classes)
    }
}

/// One trainable matrix: the effective weight is `w_hat + b · a`.
#[derive(Clone, Debug, PartialEq)]
pub struct FtLayerState {
    pub key: WeightKey,
    pub w_hat: Matrix,
    /// `k_minor × n`.
    pub a: Matrix,
    /// `m × k_minor`.
    pub b: Matrix,
}

impl FtLayerState {
    pub fn minor_rank(&self) -> usize {
        self.a.rows()
    }

    pub fn weight(&self) -> Matrix {
        if self.minor_rank() == 0 {
            self.w_hat.clone()
        } else {
            self.w_hat.add(&self.b.matmul(&self.a))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorGrads {
    pub d_a: Matrix,
    pub d_b: Matrix,
}

/// Splits every planned matrix of `store` into frozen and trainable parts.
pub fn ft_init(store: &WeightStore, plan: &RankPlan, cfg: &FtConfig) -> Result<Vec<FtLayerState>> {
    plan.validate(store.config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut states = Vec::with_capacity(plan.entries.len());
    for e in &plan.entries {
        let key = plan.key(e);
        let w = store.get(&key)?;
        let (m, n) = w.shape();
        let state = match cfg.mode {
            FtMode::SetarFt => {
                let t = svd(w).map_err(|err| err.context(key))?;
                let k = t.rank_capacity();
                let r = reduced_rank(k, e.ratio)?;
                if r == k {
                    FtLayerState { key, w_hat: w.clone(), a: Matrix::zeros(0, n), b: Matrix::zeros(m, 0) }
                } else {
                    let (w_hat, b, a) = ft_split(&t, r).map_err(|err| err.context(key))?;
                    FtLayerState { key, w_hat, a, b }
                }
            }
            FtMode::LoraBaseline => {
                let rank = cfg.baseline_rank;
                if rank > m.min(n) {
                    return invalid(format!("{key}: adapter rank {rank} exceeds {m}x{n} matrix rank"));
                }
                let bound = 1.0 / (n as f64).sqrt();
                let a = Matrix::from_fn(rank, n, |_, _| rng.gen_range(-bound..bound));
                FtLayerState { key, w_hat: w.clone(), a, b: Matrix::zeros(m, rank) }
            }
        };
        states.push(state);
    }
    Ok(states)
}

/// `store` with every state's effective weight swapped in.
pub fn reassemble(store: &WeightStore, states: &[FtLayerState]) -> Result<WeightStore> {
    let mut out = store.clone();
    for s in states {
        out = out.set_weight(&s.key, s.weight())?;
    }
    Ok(out)
}

struct SampleGrads {
    loss: LossBreakdown,
    weights: WeightGrads,
    d_concepts: Option<Matrix>,
}

fn sample_grads(
    store: &WeightStore,
    bank: Option<&ConceptBank>,
    sample: &LabeledImage,
    params: &LossParams,
) -> Result<SampleGrads> {
    let (img, trace) = encode_image_traced(store, &sample.patches, true)?;
    let mut weights = WeightGrads::default();
    match bank {
        Some(bank) => {
            let g = locoop_feature_grads(&img, bank, sample.label, params)?;
            backward_image(store, &trace, &g.d_global, &g.d_local, &mut weights);
            Ok(SampleGrads { loss: g.loss, weights, d_concepts: Some(g.d_concepts) })
        }
        None => {
            let logits = logits_from_global(store, &img.global)?;
            let loss = head_loss(&logits, sample.label)?;
            let mut d_logits = softmax(&logits, 1.0);
            d_logits[sample.label] -= 1.0;
            let d_global = backward_head(store, &img.global, &d_logits, &mut weights);
            let d_local = Matrix::zeros(img.local.rows(), img.local.cols());
            backward_image(store, &trace, &d_global, &d_local, &mut weights);
            Ok(SampleGrads { loss, weights, d_concepts: None })
        }
    }
}

fn merge(mut a: SampleGrads, b: SampleGrads) -> SampleGrads {
    a.loss = LossBreakdown {
        total: a.loss.total + b.loss.total,
        id_loss: a.loss.id_loss + b.loss.id_loss,
        ood_loss: a.loss.ood_loss + b.loss.ood_loss,
        ood_patch_fraction: a.loss.ood_patch_fraction + b.loss.ood_patch_fraction,
    };
    a.weights.merge(b.weights);
    if let (Some(x), Some(y)) = (a.d_concepts.as_mut(), b.d_concepts) {
        x.add_assign(&y);
    }
    a
}

/// Mean batch loss of the reassembled model and its exact gradient with
/// respect to each state's `a` and `b`.
pub fn ft_grads(
    store: &WeightStore,
    states: &[FtLayerState],
    batch: &[LabeledImage],
    space: &ClassSpace,
    params: &LossParams,
) -> Result<(LossBreakdown, Vec<FactorGrads>)> {
    if batch.is_empty() {
        return invalid("fine-tuning batch is empty");
    }
    params.validate(store.config().n_classes)?;
    let model = reassemble(store, states)?;

    let prompts = match space {
        ClassSpace::Prompts(p) if !p.is_empty() => Some(p),
        ClassSpace::Prompts(_) => return invalid("at least one class prompt is required"),
        ClassSpace::Head => None,
    };
    let mut prompt_traces = Vec::new();
    let bank = match prompts {
        Some(prompts) => {
            let mut features = Matrix::zeros(prompts.len(), model.config().feature_dim);
            for (c, p) in prompts.iter().enumerate() {
                let (f, trace) = encode_prompt_traced(&model, p, true)?;
                features.row_mut(c).copy_from_slice(&f);
                prompt_traces.push(trace);
            }
            let class_names = prompts.iter().map(|p| p.label.clone()).collect();
            Some(ConceptBank { features, class_names })
        }
        None => None,
    };

    let per_sample = batch
        .par_iter()
        .map(|s| sample_grads(&model, bank.as_ref(), s, params))
        .collect::<Result<Vec<_>>>()?;
    let total = tree_merge(per_sample.into_iter().map(Some).collect());
    let mut weights = total.weights;
    if let Some(d_concepts) = &total.d_concepts {
        for (c, trace) in prompt_traces.iter().enumerate() {
            backward_prompt(&model, trace, d_concepts.row(c), &mut weights);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    weights.scale(inv);
    let loss = LossBreakdown {
        total: total.loss.total * inv,
        id_loss: total.loss.id_loss * inv,
        ood_loss: total.loss.ood_loss * inv,
        ood_patch_fraction: total.loss.ood_patch_fraction * inv,
    };

    let mut out = Vec::with_capacity(states.len());
    for s in states {
        let d_w = match weights.get(&s.key) {
            Some(g) => g.clone(),
            None => Matrix::zeros(s.w_hat.rows(), s.w_hat.cols()),
        };
        let g = FactorGrads { d_a: s.b.t_matmul(&d_w), d_b: d_w.matmul_t(&s.a) };
        if !g.d_a.is_finite() || !g.d_b.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {}", s.key)));
        }
        out.push(g);
    }
    Ok((loss, out))
}

/// Deterministic pairwise reduction of owned per-sample gradients.
fn tree_merge(mut items: Vec<Option<SampleGrads>>) -> SampleGrads {
    fn go(items: &mut [Option<SampleGrads>]) -> SampleGrads {
        if items.len() == 1 {
            return items[0].take().expect("each item is taken once");
        }
        let (a, b) = items.split_at_mut(items.len() / 2);
        merge(go(a), go(b))
    }
    go(&mut items)
}

#[derive(Clone, Debug)]
pub struct FtOutcome {
    pub store: WeightStore,
    pub states: Vec<FtLayerState>,
    /// Loss before training, then after each epoch.
    pub loss_curve: Vec<LossBreakdown>,
}

/// Full-batch gradient descent for `cfg.epochs` epochs.
pub fn ft_train(
    store: &WeightStore,
    plan: &RankPlan,
    train_set: &[LabeledImage],
    space: &ClassSpace,
    cfg: &FtConfig,
) -> Result<FtOutcome> {
    cfg.validate(store.config().n_classes)?;
    let mut states = ft_init(store, plan, cfg)?;
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (loss, grads) = ft_grads(store, &states, train_set, space, &cfg.loss_params)
            .map_err(|e| e.context(format!("epoch {epoch}")))?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at epoch {epoch}")));
        }
        curve.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        for (s, g) in states.iter_mut().zip(grads) {
            s.a.axpy(-cfg.learning_rate, &g.d_a);
            s.b.axpy(-cfg.learning_rate, &g.d_b);
        }
    }
    let trained = reassemble(store, &states)?;
    Ok(FtOutcome { store: trained, states, loss_curve: curve })
}

/// Loss curve as CSV `epoch,total,id,ood`, epoch 0 being the initial model.
pub fn write_loss_curve<W: std::io::Write>(curve: &[LossBreakdown], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "total", "id", "ood"])?;
    for (i, l) in curve.iter().enumerate() {
        w.write_record([i.to_string(), l.total.to_string(), l.id_loss.to_string(), l.ood_loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
