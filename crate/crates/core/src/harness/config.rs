use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, Error, Result};
use crate::finetune::{FtConfig, FtMode};
use crate::model::{ModelConfig, Tower};
use crate::scoring::{ScoreKind, ScoreParams};
use crate::search::SearchConfig;

/// A layer whose `W_up` receives minor-subspace noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLayer {
    pub tower: Tower,
    pub layer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub layers: Vec<NoiseLayer>,
    /// Number of leading singular components left untouched.
    pub r_true: usize,
    /// Spectral norm of the noise as a fraction of `sigma_{r_true}`.
    pub scale: f64,
    /// Multiplier applied to the clean components past `r_true`.
    pub tail_shrink: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { layers: Vec::new(), r_true: 24, scale: 0.0, tail_shrink: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Samples per OOD set.
    pub n_ood: usize,
    pub n_ood_sets: usize,
    /// Norm of each class prototype in patch space.
    pub prototype_scale: f64,
    /// Per-coordinate standard deviation around the prototype.
    pub cluster_spread: f64,
    /// Distance between a class prototype and its OOD counterpart.
    pub ood_displacement: f64,
    /// Patches carrying the class prototype; the rest are background.
    pub object_patches: usize,
    pub background_scale: f64,
    pub noise: NoiseSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_train: 40,
            n_val: 40,
            n_test: 100,
            n_ood: 100,
            n_ood_sets: 2,
            prototype_scale: 2.0,
            cluster_spread: 0.2,
            ood_displacement: 3.0,
            object_patches: 5,
            background_scale: 1.0,
            noise: NoiseSpec::default(),
        }
    }
}

/// Sample and weight containers produced earlier (for instance by `gen-task`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub dir: PathBuf,
    /// Container evaluated as the vanilla model.
    pub weights: String,
    /// Optional reference model reported alongside (e.g. the clean store).
    #[serde(default)]
    pub reference_weights: Option<String>,
    pub id_train: String,
    pub id_val: String,
    pub id_test: String,
    pub ood: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Files(FileData),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Seeds weight initialisation and data generation.
    pub seed: u64,
    pub data: DataConfig,
    pub search: SearchConfig,
    /// Fine-tuning of the searched minor factors, run after the search.
    pub ft: Option<FtConfig>,
    /// Uniform-rank adapter baseline; its `mode` is ignored.
    pub lora: Option<FtConfig>,
    pub scores: Vec<ScoreKind>,
    pub score_params: ScoreParams,
    /// TPR at which the FPR is reported.
    pub tpr: f64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            seed: 0,
            data: DataConfig::default(),
            search: SearchConfig::default(),
            ft: None,
            lora: None,
            scores: vec![ScoreKind::Mcm, ScoreKind::GlMcm],
            score_params: ScoreParams::default(),
            tpr: 0.95,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        for (path, raw) in overrides {
            apply_override(&mut value, path, raw)?;
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?, overrides)
    }

    /// Model configuration used by the experiment. File-backed data takes it
    /// from the weights manifest, so this reads the container.
    pub fn effective_model(&self) -> Result<ModelConfig> {
        match &self.data {
            DataConfig::Synthetic(_) => Ok(self.model.clone()),
            DataConfig::Files(f) => {
                let path = crate::model::manifest_path(&f.dir, &f.weights);
                let man: crate::model::Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
                man.config.ok_or_else(|| Error::InvalidInput(format!("{} lacks a model config", path.display())))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DataConfig::Files(f) = &self.data {
            let mut names = vec![&f.weights, &f.id_train, &f.id_val, &f.id_test];
            names.extend(f.reference_weights.iter());
            names.extend(f.ood.iter());
            for name in names {
                for p in [
                    crate::model::manifest_path(&f.dir, name),
                    crate::model::blob_path(&f.dir, name),
                ] {
                    if !p.exists() {
                        return invalid(format!("data file {} does not exist", p.display()));
                    }
                }
            }
            if f.ood.is_empty() {
                return invalid("data.files.ood must name at least one OOD set");
            }
        }
        let model = self.effective_model()?;
        model.validate()?;
        if let DataConfig::Synthetic(spec) = &self.data {
            spec.validate(&model)?;
        }
        self.search.validate(&model)?;
        for ft in self.ft.iter().chain(self.lora.iter()) {
            ft.validate(model.n_classes)?;
        }
        if self.scores.is_empty() {
            return invalid("at least one score must be requested");
        }
        for s in &self.scores {
            if s.needs_text_tower() == model.unimodal {
                let need = if s.needs_text_tower() { "a dual encoder" } else { "a unimodal model" };
                return invalid(format!("score {s} requires {need}"));
            }
        }
        self.score_params.validate()?;
        if !(self.tpr > 0.0 && self.tpr < 1.0) {
            return invalid(format!("tpr must lie in (0, 1), got {}", self.tpr));
        }
        Ok(())
    }

    pub fn ft_stage(&self) -> Option<FtConfig> {
        self.ft.clone().map(|c| FtConfig { mode: FtMode::SetarFt, ..c })
    }

    pub fn lora_stage(&self) -> Option<FtConfig> {
        self.lora.clone().map(|c| FtConfig { mode: FtMode::LoraBaseline, ..c })
    }
}

impl SyntheticSpec {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        for (name, v) in [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
            ("n_ood", self.n_ood),
            ("n_ood_sets", self.n_ood_sets),
        ] {
            if v == 0 {
                return invalid(format!("data.synthetic.{name} must be at least 1"));
            }
        }
        if model.n_classes > model.input_dim {
            return invalid(format!(
                "{} classes cannot have orthogonal prototypes in {} input dimensions",
                model.n_classes, model.input_dim
            ));
        }
        if self.object_patches == 0 || self.object_patches > model.n_patches {
            return invalid(format!(
                "data.synthetic.object_patches must lie in 1..={}, got {}",
                model.n_patches, self.object_patches
            ));
        }
        for (name, v) in [
            ("prototype_scale", self.prototype_scale),
            ("cluster_spread", self.cluster_spread),
            ("ood_displacement", self.ood_displacement),
            ("background_scale", self.background_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("data.synthetic.{name} must be non-negative, got {v}"));
            }
        }
        let n = &self.noise;
        let k = model.hidden_dim.min(model.ffn_dim);
        if !n.layers.is_empty() && (n.r_true == 0 || n.r_true >= k) {
            return invalid(format!("noise.r_true must lie in 1..{k}, got {}", n.r_true));
        }
        if !(n.scale >= 0.0 && n.scale.is_finite() && n.tail_shrink >= 0.0 && n.tail_shrink.is_finite()) {
            return invalid("noise.scale and noise.tail_shrink must be non-negative");
        }
        if n.scale > 0.0 && n.scale + n.tail_shrink >= 1.0 {
            // Otherwise the perturbed tail could outgrow sigma_{r_true}.
            return invalid(format!(
                "noise.scale ({}) plus noise.tail_shrink ({}) must stay below 1",
                n.scale, n.tail_shrink
            ));
        }
        for l in &n.layers {
            if l.layer >= model.n_layers(l.tower) {
                return invalid(format!("noise layer {} {} does not exist", l.tower, l.layer));
            }
        }
        Ok(())
    }
}

/// Sets the dotted `path` inside `root` to `raw`, parsed as JSON when it is
/// valid JSON and kept as a string otherwise. Missing objects are created.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return invalid(format!("malformed override key {path:?}"));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("override {path:?}: {part:?} is not an index")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::InvalidInput(format!("override {path:?}: index {idx} out of {len}")))?
            }
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just created").entry(part.to_string()).or_insert(Value::Null)
            }
            Value::Object(map) => map.entry(part.to_string()).or_insert(Value::Null),
            _ => return invalid(format!("override {path:?}: {part:?} is below a scalar")),
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    Ok(())
}

/// Splits trailing `--key=value` arguments.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    args.iter()
        .map(|a| {
            let body = a
                .strip_prefix("--")
                .ok_or_else(|| Error::InvalidInput(format!("override {a:?} must look like --key=value")))?;
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("override {a:?} must look like --key=value")))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}
