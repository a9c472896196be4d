//! Search over per-layer rank-reduction ratios.
//!
//! Layers are visited one at a time (sequentially or interleaving the two
//! towers); at each layer every candidate ratio is tried against the running
//! incumbent and the best strict improvement is committed. The exhaustive
//! variant instead picks the single best (layer, ratio) pair per round.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{low_rank_approx, reduced_rank, svd, PruneStrategy, SvdTriple};
use crate::loss::{evaluate_dataset, ClassSpace, Evaluation, LossBreakdown, LossParams};
use crate::model::{LabeledImage, ModelConfig, Tower, WeightKey, WeightStore, WeightType};

/// Zero to 40% in 5% steps.
pub const DEFAULT_CANDIDATES: [f64; 9] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4];

/// Towers whose matrices take part in the search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[default]
    #[serde(rename = "vision+text")]
    VisionText,
    #[serde(rename = "vision")]
    Vision,
    #[serde(rename = "text")]
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::VisionText => "vision+text",
            Modality::Vision => "vision",
            Modality::Text => "text",
        }
    }

    /// Towers searched for `model`, vision first. A unimodal model has no
    /// text tower, so `vision+text` reduces to the vision tower there.
    pub fn towers(self, model: &ModelConfig) -> Result<Vec<Tower>> {
        match (self, model.unimodal) {
            (Modality::Text, true) => Err(Error::Unsupported(
                "text modality requested for a unimodal model".into(),
            )),
            (Modality::Text, false) => Ok(vec![Tower::Text]),
            (Modality::Vision, _) | (Modality::VisionText, true) => Ok(vec![Tower::Vision]),
            (Modality::VisionText, false) => Ok(vec![Tower::Vision, Tower::Text]),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vision+text" => Ok(Modality::VisionText),
            "vision" => Ok(Modality::Vision),
            "text" => Ok(Modality::Text),
            other => invalid(format!("unknown modality {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchAlgorithm {
    /// Vision layers top to bottom, then text layers top to bottom.
    #[default]
    Sequential,
    /// Vision and text alternating at each depth, top to bottom.
    Interleaved,
    /// Each round commits the best (layer, ratio) pair over all remaining layers.
    Exhaustive,
}

impl FromStr for SearchAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(SearchAlgorithm::Sequential),
            "interleaved" => Ok(SearchAlgorithm::Interleaved),
            "exhaustive" => Ok(SearchAlgorithm::Exhaustive),
            other => invalid(format!("unknown search algorithm {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Ratios to try, starting with 0 and strictly increasing.
    pub candidates: Vec<f64>,
    pub weight_type: WeightType,
    pub modality: Modality,
    pub algorithm: SearchAlgorithm,
    pub strategy: PruneStrategy,
    pub loss_params: LossParams,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            candidates: DEFAULT_CANDIDATES.to_vec(),
            weight_type: WeightType::Wup,
            modality: Modality::default(),
            algorithm: SearchAlgorithm::default(),
            strategy: PruneStrategy::default(),
            loss_params: LossParams::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.candidates.first() != Some(&0.0) {
            return invalid("search.candidates must start with 0");
        }
        for w in self.candidates.windows(2) {
            if !(w[1] > w[0]) {
                return invalid(format!(
                    "search.candidates must be strictly increasing ({} then {})",
                    w[0], w[1]
                ));
            }
        }
        if let Some(&last) = self.candidates.last() {
            if !(last < 1.0) {
                return invalid(format!("search.candidates must lie in [0, 1), got {last}"));
            }
        }
        self.loss_params.validate(model.n_classes)?;
        search_order(model, self.weight_type, self.modality, self.algorithm).map(|_| ())
    }
}

/// Keys visited by the search, in visiting order. The exhaustive variant
/// reports its layers in sequential order.
pub fn search_order(
    model: &ModelConfig,
    weight_type: WeightType,
    modality: Modality,
    algorithm: SearchAlgorithm,
) -> Result<Vec<WeightKey>> {
    let towers = modality.towers(model)?;
    if weight_type == WeightType::Head && (!model.unimodal || towers != [Tower::Vision]) {
        return Err(Error::Unsupported("the head only exists on a unimodal vision tower".into()));
    }
    let per_tower = |tower: Tower| -> Vec<WeightKey> {
        if weight_type.is_tower_level() {
            vec![WeightKey::tower_level(tower, weight_type)]
        } else {
            (0..model.n_layers(tower)).rev().map(|l| WeightKey::new(tower, l, weight_type)).collect()
        }
    };
    let lists: Vec<Vec<WeightKey>> = towers.into_iter().map(per_tower).collect();
    Ok(match algorithm {
        SearchAlgorithm::Sequential | SearchAlgorithm::Exhaustive => lists.concat(),
        SearchAlgorithm::Interleaved => {
            // Lists run top to bottom, so index i is depth i below the top.
            let depth = lists.iter().map(Vec::len).max().unwrap_or(0);
            (0..depth).flat_map(|i| lists.iter().filter_map(move |l| l.get(i).copied())).collect()
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub tower: Tower,
    pub layer: usize,
    pub ratio: f64,
}

/// Searched ratio per layer, in search order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub weight_type: WeightType,
    pub strategy: PruneStrategy,
    pub modality: Modality,
    pub entries: Vec<PlanEntry>,
}

impl RankPlan {
    pub fn key(&self, entry: &PlanEntry) -> WeightKey {
        WeightKey::new(entry.tower, entry.layer, self.weight_type)
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.ratio).collect()
    }

    pub fn ratio_for(&self, key: &WeightKey) -> Option<f64> {
        self.entries.iter().find(|e| self.key(e) == *key).map(|e| e.ratio)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let mut expected = search_order(model, self.weight_type, self.modality, SearchAlgorithm::Sequential)?;
        let mut got: Vec<WeightKey> = self.entries.iter().map(|e| self.key(e)).collect();
        expected.sort();
        got.sort();
        if got != expected {
            return invalid(format!(
                "plan covers {} {} matrices that do not match the {} layers of this model",
                got.len(),
                self.weight_type,
                self.modality
            ));
        }
        for e in &self.entries {
            if !(0.0..1.0).contains(&e.ratio) {
                return invalid(format!("plan ratio {} outside [0, 1)", e.ratio));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub key: WeightKey,
    pub best_ratio: f64,
    /// Incumbent after the step.
    pub loss: LossBreakdown,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchTrace {
    pub rows: Vec<TraceRow>,
}

impl SearchTrace {
    pub const HEADER: [&'static str; 10] = [
        "step",
        "tower_type",
        "weight_type",
        "layer_num",
        "best_ratio",
        "total_loss",
        "id_loss",
        "ood_loss",
        "val_acc",
        "ood_patch_percent",
    ];

    /// CSV with accuracy and the OOD patch share as percentages.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::HEADER)?;
        for r in &self.rows {
            let tower = match r.key.tower {
                Tower::Vision => "visual",
                Tower::Text => "text",
            };
            w.write_record([
                r.step.to_string(),
                tower.to_string(),
                r.key.weight_type.to_string(),
                r.key.layer.to_string(),
                r.best_ratio.to_string(),
                r.loss.total.to_string(),
                r.loss.id_loss.to_string(),
                r.loss.ood_loss.to_string(),
                (100.0 * r.val_acc).to_string(),
                (100.0 * r.loss.ood_patch_fraction).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Validation objective minimised by the search.
pub trait Objective: Sync {
    fn evaluate(&self, store: &WeightStore) -> Result<Evaluation>;
}

/// Mean LoCoOp loss over a labelled validation set.
pub struct LocoopObjective<'a> {
    pub samples: &'a [LabeledImage],
    pub space: &'a ClassSpace,
    pub params: LossParams,
}

impl Objective for LocoopObjective<'_> {
    fn evaluate(&self, store: &WeightStore) -> Result<Evaluation> {
        evaluate_dataset(store, self.samples, self.space, &self.params)
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub plan: RankPlan,
    pub trace: SearchTrace,
    pub store: WeightStore,
    /// Objective of the unmodified store.
    pub initial: Evaluation,
    pub final_eval: Evaluation,
}

fn key_salt(key: &WeightKey) -> u64 {
    ((key.tower as u64) << 40) | ((key.layer as u64) << 8) | key.weight_type as u64
}

/// Replacement for the matrix behind `t` at `ratio`; `None` when the reduced
/// rank keeps every component, so the original matrix stays in place.
fn candidate(
    store: &WeightStore,
    key: &WeightKey,
    t: &SvdTriple,
    ratio: f64,
    strategy: PruneStrategy,
) -> Result<WeightStore> {
    let k = t.rank_capacity();
    let r = reduced_rank(k, ratio)?;
    if r == k {
        return Ok(store.clone());
    }
    let w_hat = low_rank_approx(t, r, strategy.salted(key_salt(key)))?;
    store.set_weight(key, w_hat)
}

fn evaluate_candidates(
    store: &WeightStore,
    obj: &dyn Objective,
    pairs: &[(WeightKey, f64)],
    svds: &BTreeMap<WeightKey, SvdTriple>,
    strategy: PruneStrategy,
) -> Result<Vec<(WeightStore, Evaluation)>> {
    pairs
        .par_iter()
        .map(|&(key, ratio)| {
            let run = || -> Result<(WeightStore, Evaluation)> {
                let cand = candidate(store, &key, &svds[&key], ratio, strategy)?;
                let ev = obj.evaluate(&cand)?;
                if !ev.loss.total.is_finite() {
                    return Err(Error::Numeric("non-finite loss".into()));
                }
                Ok((cand, ev))
            };
            run().map_err(|e| e.context(format!("{key} at ratio {ratio}")))
        })
        .collect()
}

fn decompose(store: &WeightStore, key: &WeightKey) -> Result<SvdTriple> {
    svd(store.get(key)?).map_err(|e| e.context(key))
}

fn baseline(store: &WeightStore, obj: &dyn Objective) -> Result<Evaluation> {
    let ev = obj.evaluate(store).map_err(|e| e.context("unmodified model"))?;
    if !ev.loss.total.is_finite() {
        return Err(Error::Numeric("unmodified model: non-finite loss".into()));
    }
    Ok(ev)
}

/// Runs the variant selected by `cfg.algorithm` on the LoCoOp objective.
pub fn greedy_search(
    store: &WeightStore,
    val_set: &[LabeledImage],
    space: &ClassSpace,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    let obj = LocoopObjective { samples: val_set, space, params: cfg.loss_params };
    match cfg.algorithm {
        SearchAlgorithm::Exhaustive => exhaustive_with(store, &obj, cfg),
        _ => greedy_with(store, &obj, cfg),
    }
}

/// Layer-exhaustive rounds on the LoCoOp objective, whatever `cfg.algorithm`.
pub fn exhaustive_step_search(
    store: &WeightStore,
    val_set: &[LabeledImage],
    space: &ClassSpace,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    let obj = LocoopObjective { samples: val_set, space, params: cfg.loss_params };
    exhaustive_with(store, &obj, cfg)
}

/// Layer-by-layer greedy search. Evaluates the objective once for the
/// unmodified store and once per (layer, nonzero candidate).
pub fn greedy_with(store: &WeightStore, obj: &dyn Objective, cfg: &SearchConfig) -> Result<SearchOutcome> {
    cfg.validate(store.config())?;
    let algorithm = match cfg.algorithm {
        SearchAlgorithm::Exhaustive => SearchAlgorithm::Sequential,
        a => a,
    };
    let order = search_order(store.config(), cfg.weight_type, cfg.modality, algorithm)?;
    let initial = baseline(store, obj)?;
    let mut best = initial;
    let mut current = store.clone();
    let mut trace = SearchTrace::default();
    let mut entries = Vec::with_capacity(order.len());

    for (step, key) in order.into_iter().enumerate() {
        let svds = BTreeMap::from([(key, decompose(&current, &key)?)]);
        let pairs: Vec<(WeightKey, f64)> = cfg.candidates[1..].iter().map(|&r| (key, r)).collect();
        let results = evaluate_candidates(&current, obj, &pairs, &svds, cfg.strategy)?;
        let mut chosen = 0.0;
        let mut next = None;
        for ((_, ratio), (cand, ev)) in pairs.iter().zip(results) {
            if ev.loss.total < best.loss.total {
                best = ev;
                chosen = *ratio;
                next = Some(cand);
            }
        }
        if let Some(s) = next {
            current = s;
        }
        entries.push(PlanEntry { tower: key.tower, layer: key.layer, ratio: chosen });
        trace.rows.push(TraceRow { step, key, best_ratio: chosen, loss: best.loss, val_acc: best.accuracy });
    }

    let plan = RankPlan { weight_type: cfg.weight_type, strategy: cfg.strategy, modality: cfg.modality, entries };
    Ok(SearchOutcome { plan, trace, store: current, initial, final_eval: best })
}

/// Rounds over every remaining (layer, ratio) pair; the best strict
/// improvement is committed and its layer retired. Layers never committed
/// are listed after the commits with ratio 0.
pub fn exhaustive_with(store: &WeightStore, obj: &dyn Objective, cfg: &SearchConfig) -> Result<SearchOutcome> {
    cfg.validate(store.config())?;
    let order = search_order(store.config(), cfg.weight_type, cfg.modality, SearchAlgorithm::Sequential)?;
    let initial = baseline(store, obj)?;
    let svds = order
        .iter()
        .map(|k| Ok((*k, decompose(store, k)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut best = initial;
    let mut current = store.clone();
    let mut remaining = order.clone();
    let mut ratios: BTreeMap<WeightKey, f64> = order.iter().map(|k| (*k, 0.0)).collect();
    let mut trace = SearchTrace::default();

    while !remaining.is_empty() && cfg.candidates.len() > 1 {
        let pairs: Vec<(WeightKey, f64)> = remaining
            .iter()
            .flat_map(|&k| cfg.candidates[1..].iter().map(move |&r| (k, r)))
            .collect();
        let results = evaluate_candidates(&current, obj, &pairs, &svds, cfg.strategy)?;
        let mut pick = None;
        for (i, (_, ev)) in results.iter().enumerate() {
            if ev.loss.total < best.loss.total {
                best = *ev;
                pick = Some(i);
            }
        }
        let Some(i) = pick else { break };
        let (key, ratio) = pairs[i];
        current = results.into_iter().nth(i).expect("picked index").0;
        ratios.insert(key, ratio);
        remaining.retain(|k| *k != key);
        let step = trace.rows.len();
        trace.rows.push(TraceRow { step, key, best_ratio: ratio, loss: best.loss, val_acc: best.accuracy });
    }
    for key in remaining {
        let step = trace.rows.len();
        trace.rows.push(TraceRow { step, key, best_ratio: 0.0, loss: best.loss, val_acc: best.accuracy });
    }

    let entries = order
        .iter()
        .map(|k| PlanEntry { tower: k.tower, layer: k.layer, ratio: ratios[k] })
        .collect();
    let plan = RankPlan { weight_type: cfg.weight_type, strategy: cfg.strategy, modality: cfg.modality, entries };
    Ok(SearchOutcome { plan, trace, store: current, initial, final_eval: best })
}

/// Replays a plan on the store it was searched from, reproducing the searched
/// store bit for bit.
pub fn apply_plan(store: &WeightStore, plan: &RankPlan) -> Result<WeightStore> {
    plan.validate(store.config())?;
    let mut out = store.clone();
    for e in &plan.entries {
        if e.ratio == 0.0 {
            continue;
        }
        let key = plan.key(e);
        let t = decompose(store, &key)?;
        out = candidate(&out, &key, &t, e.ratio, plan.strategy).map_err(|err| err.context(key))?;
    }
    Ok(out)
}
