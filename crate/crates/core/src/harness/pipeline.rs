//! Search, evaluation and fine-tuning stages, and the pipeline chaining them.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{ft_train, write_loss_curve, FtConfig, FtOutcome};
use crate::loss::{evaluate_dataset, ClassSpace, LossBreakdown};
use crate::metrics::evaluate;
use crate::model::{
    class_prompts, classify_logits, encode_concepts, encode_image, load_samples, load_store,
    save_samples, save_store, ConceptBank, LabeledImage, ModelConfig, WeightStore,
};
use crate::scoring::{
    energy_score, glmcm_score, iwic_global, iwic_local, mcm_score, msp_score, ScoreKind,
    ScoreParams, ScoreSet,
};
use crate::search::{apply_plan, greedy_search, RankPlan, SearchOutcome, SearchTrace};

use super::config::{DataConfig, ExperimentConfig, FileData};
use super::synthetic::{generate_task, OodSet, SyntheticTask};

/// Everything the stages read: the model under test, an optional reference
/// model, and the data splits.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub vanilla: WeightStore,
    pub reference: Option<WeightStore>,
    pub id_train: Vec<LabeledImage>,
    pub id_val: Vec<LabeledImage>,
    pub id_test: Vec<LabeledImage>,
    pub ood: Vec<OodSet>,
}

impl From<SyntheticTask> for Inputs {
    fn from(t: SyntheticTask) -> Self {
        Inputs {
            vanilla: t.noisy_store,
            reference: Some(t.clean_store),
            id_train: t.id_train,
            id_val: t.id_val,
            id_test: t.id_test,
            ood: t.ood_test,
        }
    }
}

pub fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    match &cfg.data {
        DataConfig::Synthetic(spec) => Ok(generate_task(&cfg.model, cfg.seed, spec)?.into()),
        DataConfig::Files(f) => {
            let ood = f
                .ood
                .iter()
                .map(|name| Ok(OodSet { name: name.clone(), samples: load_samples(&f.dir, name)? }))
                .collect::<Result<Vec<_>>>()?;
            Ok(Inputs {
                vanilla: load_store(&f.dir, &f.weights)?,
                reference: f.reference_weights.as_ref().map(|n| load_store(&f.dir, n)).transpose()?,
                id_train: load_samples(&f.dir, &f.id_train)?,
                id_val: load_samples(&f.dir, &f.id_val)?,
                id_test: load_samples(&f.dir, &f.id_test)?,
                ood,
            })
        }
    }
}

/// Writes a synthetic task as containers and returns the matching file-backed
/// data section.
pub fn save_task(task: &SyntheticTask, dir: &Path) -> Result<FileData> {
    save_store(&task.noisy_store, dir, "weights_noisy")?;
    save_store(&task.clean_store, dir, "weights_clean")?;
    save_samples(&task.id_train, dir, "id_train")?;
    save_samples(&task.id_val, dir, "id_val")?;
    save_samples(&task.id_test, dir, "id_test")?;
    for set in &task.ood_test {
        save_samples(&set.samples, dir, &set.name)?;
    }
    Ok(FileData {
        dir: dir.to_path_buf(),
        weights: "weights_noisy".into(),
        reference_weights: Some("weights_clean".into()),
        id_train: "id_train".into(),
        id_val: "id_val".into(),
        id_test: "id_test".into(),
        ood: task.ood_test.iter().map(|s| s.name.clone()).collect(),
    })
}

pub fn class_space(model: &ModelConfig) -> ClassSpace {
    if model.unimodal {
        ClassSpace::Head
    } else {
        ClassSpace::Prompts(class_prompts(model.n_classes))
    }
}

fn score_one(
    store: &WeightStore,
    bank: Option<&ConceptBank>,
    image: &LabeledImage,
    kind: ScoreKind,
    p: &ScoreParams,
) -> Result<f64> {
    match (kind, bank) {
        (ScoreKind::Mcm, Some(bank)) => {
            let img = encode_image(store, &image.patches)?;
            Ok(mcm_score(&iwic_global(&img, bank)?, p.tau))
        }
        (ScoreKind::GlMcm, Some(bank)) => {
            let img = encode_image(store, &image.patches)?;
            Ok(glmcm_score(&iwic_global(&img, bank)?, &iwic_local(&img, bank)?, p.tau, p.tau_local))
        }
        (ScoreKind::Msp, None) => Ok(msp_score(&classify_logits(store, &image.patches)?)),
        (ScoreKind::Energy, None) => Ok(energy_score(&classify_logits(store, &image.patches)?, p.energy_t)),
        _ => Err(Error::Unsupported(format!(
            "score {kind} does not apply to a {} model",
            if store.config().unimodal { "unimodal" } else { "dual-encoder" }
        ))),
    }
}

/// Scores every sample with `kind`; higher means more in-distribution.
pub fn score_dataset(
    store: &WeightStore,
    samples: &[LabeledImage],
    kind: ScoreKind,
    params: &ScoreParams,
) -> Result<Vec<f64>> {
    let bank = match store.config().unimodal {
        true => None,
        false => Some(encode_concepts(store, &class_prompts(store.config().n_classes))?),
    };
    samples.par_iter().map(|s| score_one(store, bank.as_ref(), s, kind, params)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub score: String,
    /// OOD set name, or `Average` for the mean over sets.
    pub dataset: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub initial: LossBreakdown,
    pub initial_accuracy: f64,
    #[serde(rename = "final")]
    pub final_loss: LossBreakdown,
    pub final_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtSummary {
    pub model: String,
    pub loss_curve: Vec<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// `ok` or `error`.
    pub status: String,
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub finetune: Vec<FtSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorRecord>,
}

impl Report {
    pub fn row(&self, model: &str, score: &str, dataset: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.score == score && r.dataset == dataset)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn score_csv_path(dir: &Path, model: &str, score: ScoreKind, dataset: &str) -> std::path::PathBuf {
    dir.join(format!("scores_{model}_{score}_{dataset}.csv"))
}

/// Report rows for one model: one per (score, OOD set) plus an `Average`
/// row per score. Score files are written when `out` is given.
pub fn evaluate_model(
    name: &str,
    store: &WeightStore,
    inputs: &Inputs,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &kind in &cfg.scores {
        let id = score_dataset(store, &inputs.id_test, kind, &cfg.score_params)?;
        let mut per_set = Vec::with_capacity(inputs.ood.len());
        for set in &inputs.ood {
            let ood = score_dataset(store, &set.samples, kind, &cfg.score_params)?;
            let scores = ScoreSet::new(format!("{name}/{kind}"), id.clone(), ood);
            if let Some(dir) = out {
                let file = fs::File::create(score_csv_path(dir, name, kind, &set.name))?;
                scores.write_csv(std::io::BufWriter::new(file))?;
            }
            let m = evaluate(&scores, cfg.tpr)?;
            per_set.push(ReportRow {
                model: name.into(),
                score: kind.to_string(),
                dataset: set.name.clone(),
                fpr95: m.fpr95,
                auroc: m.auroc,
                n_id: m.n_id,
                n_ood: m.n_ood,
            });
        }
        let n = per_set.len() as f64;
        let average = ReportRow {
            model: name.into(),
            score: kind.to_string(),
            dataset: "Average".into(),
            fpr95: per_set.iter().map(|r| r.fpr95).sum::<f64>() / n,
            auroc: per_set.iter().map(|r| r.auroc).sum::<f64>() / n,
            n_id: id.len(),
            n_ood: per_set.iter().map(|r| r.n_ood).sum(),
        };
        rows.extend(per_set);
        rows.push(average);
    }
    Ok(rows)
}

/// Runs the configured search on the validation split of `inputs`.
pub fn search_stage(inputs: &Inputs, cfg: &ExperimentConfig) -> Result<SearchOutcome> {
    let space = class_space(inputs.vanilla.config());
    greedy_search(&inputs.vanilla, &inputs.id_val, &space, &cfg.search)
}

pub fn write_search(outcome: &SearchOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("plan.json"), outcome.plan.to_json()?)?;
    write_trace(&outcome.trace, dir)?;
    save_store(&outcome.store, dir, "weights_setar")
}

pub fn write_trace(trace: &SearchTrace, dir: &Path) -> Result<()> {
    let file = fs::File::create(dir.join("trace.csv"))?;
    trace.write_csv(std::io::BufWriter::new(file))
}

/// Fine-tunes the vanilla model on the training split.
pub fn finetune_stage(inputs: &Inputs, plan: &RankPlan, ft: &FtConfig) -> Result<FtOutcome> {
    let space = class_space(inputs.vanilla.config());
    ft_train(&inputs.vanilla, plan, &inputs.id_train, &space, ft)
}

fn write_finetune(name: &str, outcome: &FtOutcome, dir: &Path) -> Result<()> {
    save_store(&outcome.store, dir, &format!("weights_{name}"))?;
    let file = fs::File::create(dir.join(format!("loss_curve_{name}.csv")))?;
    write_loss_curve(&outcome.loss_curve, std::io::BufWriter::new(file))
}

/// Which part of the workflow to run. The split stages share `output_dir`:
/// `Eval` and `Finetune` pick up the `plan.json` left there by `Search`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Search,
    Eval,
    Finetune,
    Pipeline,
}

fn read_plan(dir: &Path) -> Result<Option<RankPlan>> {
    let path = dir.join("plan.json");
    if !path.exists() {
        return Ok(None);
    }
    RankPlan::from_json(&fs::read_to_string(&path)?).map(Some)
}

fn evaluate_baselines(inputs: &Inputs, cfg: &ExperimentConfig, report: &mut Report) -> Result<()> {
    let dir = cfg.output_dir.as_path();
    report.rows.extend(evaluate_model("vanilla", &inputs.vanilla, inputs, cfg, Some(dir))?);
    if let Some(reference) = &inputs.reference {
        report.rows.extend(evaluate_model("clean", reference, inputs, cfg, Some(dir))?);
    }
    Ok(())
}

fn run_finetunes(inputs: &Inputs, plan: &RankPlan, cfg: &ExperimentConfig, report: &mut Report) -> Result<()> {
    let dir = cfg.output_dir.as_path();
    for (name, stage) in [("setar_ft", cfg.ft_stage()), ("lora", cfg.lora_stage())] {
        let Some(ft) = stage else { continue };
        let trained = finetune_stage(inputs, plan, &ft).map_err(|e| e.context(name))?;
        write_finetune(name, &trained, dir)?;
        report.rows.extend(evaluate_model(name, &trained.store, inputs, cfg, Some(dir))?);
        report.finetune.push(FtSummary { model: name.into(), loss_curve: trained.loss_curve });
    }
    Ok(())
}

fn stage_inner(cfg: &ExperimentConfig, stage: Stage, report: &mut Report) -> Result<()> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let inputs = load_inputs(cfg)?;

    match stage {
        Stage::Search | Stage::Pipeline => {
            let searched = search_stage(&inputs, cfg)?;
            write_search(&searched, dir)?;
            save_store(&inputs.vanilla, dir, "weights_vanilla")?;
            report.search = Some(SearchSummary {
                initial: searched.initial.loss,
                initial_accuracy: searched.initial.accuracy,
                final_loss: searched.final_eval.loss,
                final_accuracy: searched.final_eval.accuracy,
            });
            if stage == Stage::Pipeline {
                evaluate_baselines(&inputs, cfg, report)?;
                report.rows.extend(evaluate_model("setar", &searched.store, &inputs, cfg, Some(dir))?);
                run_finetunes(&inputs, &searched.plan, cfg, report)?;
            }
        }
        Stage::Eval => {
            evaluate_baselines(&inputs, cfg, report)?;
            if let Some(plan) = read_plan(dir)? {
                let setar = apply_plan(&inputs.vanilla, &plan)?;
                report.rows.extend(evaluate_model("setar", &setar, &inputs, cfg, Some(dir))?);
            }
        }
        Stage::Finetune => {
            let plan = read_plan(dir)?.ok_or_else(|| {
                Error::InvalidInput(format!("{} has no plan.json; run the search first", dir.display()))
            })?;
            if cfg.ft.is_none() && cfg.lora.is_none() {
                return Err(Error::InvalidInput("neither ft nor lora is configured".into()));
            }
            run_finetunes(&inputs, &plan, cfg, report)?;
        }
    }
    Ok(())
}

/// Runs one stage, writing its artifacts and `report.json` under
/// `cfg.output_dir`. On failure `report.json` carries the error record and
/// the error is returned.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<Report> {
    let mut report = Report { status: "ok".into(), ..Report::default() };
    match stage_inner(cfg, stage, &mut report) {
        Ok(()) => {
            report.write(&cfg.output_dir)?;
            Ok(report)
        }
        Err(e) => {
            let failed = Report {
                status: "error".into(),
                error: Some(ErrorRecord { kind: e.kind().into(), message: e.to_string() }),
                ..report
            };
            // The original error matters more than a failure to record it.
            let _ = failed.write(&cfg.output_dir);
            Err(e)
        }
    }
}

/// Search, evaluation of vanilla / SeTAR / reference models, then the
/// configured fine-tuning stages.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Report> {
    run_stage(cfg, Stage::Pipeline)
}

/// Mean validation loss of a store, as the search sees it.
pub fn validation_loss(store: &WeightStore, inputs: &Inputs, cfg: &ExperimentConfig) -> Result<LossBreakdown> {
    let space = class_space(store.config());
    Ok(evaluate_dataset(store, &inputs.id_val, &space, &cfg.search.loss_params)?.loss)
}
