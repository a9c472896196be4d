use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

use super::tokens;

/// Shape of the miniature dual encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_vision_layers: usize,
    pub n_text_layers: usize,
    /// Width of the residual stream.
    pub hidden_dim: usize,
    /// Width of the shared projection space.
    pub feature_dim: usize,
    pub n_patches: usize,
    pub ffn_dim: usize,
    pub n_classes: usize,
    /// Vision tower plus a linear classification head, no text tower.
    pub unimodal: bool,
    /// Width of one raw patch token.
    pub input_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_vision_layers: 4,
            n_text_layers: 4,
            hidden_dim: 32,
            feature_dim: 16,
            n_patches: 9,
            ffn_dim: 64,
            n_classes: 5,
            unimodal: false,
            input_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_vision_layers", self.n_vision_layers),
            ("hidden_dim", self.hidden_dim),
            ("feature_dim", self.feature_dim),
            ("n_patches", self.n_patches),
            ("ffn_dim", self.ffn_dim),
            ("n_classes", self.n_classes),
            ("input_dim", self.input_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return invalid(format!("model.{name} must be at least 1"));
            }
        }
        if !self.unimodal && self.n_text_layers == 0 {
            return invalid("model.n_text_layers must be at least 1 for a dual encoder");
        }
        if self.ffn_dim < self.hidden_dim {
            return invalid(format!(
                "model.ffn_dim ({}) must be at least hidden_dim ({})",
                self.ffn_dim, self.hidden_dim
            ));
        }
        Ok(())
    }

    pub fn n_layers(&self, tower: Tower) -> usize {
        match tower {
            Tower::Vision => self.n_vision_layers,
            Tower::Text if self.unimodal => 0,
            Tower::Text => self.n_text_layers,
        }
    }

    pub fn towers(&self) -> &'static [Tower] {
        if self.unimodal {
            &[Tower::Vision]
        } else {
            &[Tower::Vision, Tower::Text]
        }
    }

    /// Every key this configuration implies, in store order.
    pub fn weight_keys(&self) -> Vec<WeightKey> {
        let mut keys = Vec::new();
        for &tower in self.towers() {
            for layer in 0..self.n_layers(tower) {
                for &wt in WeightType::PER_LAYER {
                    keys.push(WeightKey { tower, layer, weight_type: wt });
                }
            }
            keys.push(WeightKey::tower_level(tower, WeightType::Wp));
        }
        if self.unimodal {
            keys.push(WeightKey::tower_level(Tower::Vision, WeightType::Head));
        }
        keys.sort();
        keys
    }

    pub fn expected_shape(&self, key: &WeightKey) -> (usize, usize) {
        let d = self.hidden_dim;
        match key.weight_type {
            WeightType::Wq | WeightType::Wk | WeightType::Wv | WeightType::Wo => (d, d),
            WeightType::Wup => (d, self.ffn_dim),
            WeightType::Wdown => (self.ffn_dim, d),
            WeightType::Wp => (d, self.feature_dim),
            WeightType::Head => (self.feature_dim, self.n_classes),
        }
    }

    pub fn is_valid_key(&self, key: &WeightKey) -> bool {
        if !self.towers().contains(&key.tower) {
            return false;
        }
        match key.weight_type {
            WeightType::Head => self.unimodal && key.tower == Tower::Vision,
            WeightType::Wp => true,
            _ => key.layer < self.n_layers(key.tower),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tower {
    Vision,
    Text,
}

impl Tower {
    pub fn as_str(self) -> &'static str {
        match self {
            Tower::Vision => "vision",
            Tower::Text => "text",
        }
    }
}

impl fmt::Display for Tower {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tower {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vision" | "visual" => Ok(Tower::Vision),
            "text" => Ok(Tower::Text),
            other => invalid(format!("unknown tower {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WeightType {
    #[serde(rename = "W_q")]
    Wq,
    #[serde(rename = "W_k")]
    Wk,
    #[serde(rename = "W_v")]
    Wv,
    #[serde(rename = "W_o")]
    Wo,
    #[serde(rename = "W_up")]
    Wup,
    #[serde(rename = "W_down")]
    Wdown,
    #[serde(rename = "W_p")]
    Wp,
    #[serde(rename = "head")]
    Head,
}

impl WeightType {
    pub const PER_LAYER: &'static [WeightType] = &[
        WeightType::Wq,
        WeightType::Wk,
        WeightType::Wv,
        WeightType::Wo,
        WeightType::Wup,
        WeightType::Wdown,
    ];

    pub fn is_tower_level(self) -> bool {
        matches!(self, WeightType::Wp | WeightType::Head)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WeightType::Wq => "W_q",
            WeightType::Wk => "W_k",
            WeightType::Wv => "W_v",
            WeightType::Wo => "W_o",
            WeightType::Wup => "W_up",
            WeightType::Wdown => "W_down",
            WeightType::Wp => "W_p",
            WeightType::Head => "head",
        }
    }
}

impl fmt::Display for WeightType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = WeightType::PER_LAYER.iter().chain(&[WeightType::Wp, WeightType::Head]);
        for &wt in all {
            if wt.as_str() == s {
                return Ok(wt);
            }
        }
        invalid(format!("unknown weight type {s:?}"))
    }
}

/// Address of one weight matrix. Tower-level matrices (`W_p`, `head`) always
/// carry layer 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeightKey {
    pub tower: Tower,
    pub layer: usize,
    pub weight_type: WeightType,
}

impl WeightKey {
    pub fn new(tower: Tower, layer: usize, weight_type: WeightType) -> Self {
        let layer = if weight_type.is_tower_level() { 0 } else { layer };
        WeightKey { tower, layer, weight_type }
    }

    pub fn tower_level(tower: Tower, weight_type: WeightType) -> Self {
        WeightKey::new(tower, 0, weight_type)
    }

    pub fn name(&self) -> String {
        if self.weight_type.is_tower_level() {
            format!("{}.{}", self.tower, self.weight_type)
        } else {
            format!("{}.layer{}.{}", self.tower, self.layer, self.weight_type)
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            [tower, wt] => {
                let wt: WeightType = wt.parse()?;
                if !wt.is_tower_level() {
                    return invalid(format!("weight key {name:?} lacks a layer index"));
                }
                Ok(WeightKey::tower_level(tower.parse()?, wt))
            }
            [tower, layer, wt] => {
                let layer = layer
                    .strip_prefix("layer")
                    .and_then(|l| l.parse().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("bad layer in key {name:?}")))?;
                Ok(WeightKey::new(tower.parse()?, layer, wt.parse()?))
            }
            _ => invalid(format!("malformed weight key {name:?}")),
        }
    }
}

impl fmt::Display for WeightKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Input-side parameters that are not addressable by [`WeightKey`].
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    /// `input_dim × hidden_dim`.
    pub patch: Matrix,
    /// `1 × hidden_dim`.
    pub cls: Matrix,
    /// `(n_patches + 1) × hidden_dim`.
    pub vision_pos: Matrix,
    /// `vocab × hidden_dim`; absent for unimodal models.
    pub token: Option<Matrix>,
    /// `context × hidden_dim`; absent for unimodal models.
    pub text_pos: Option<Matrix>,
}

impl Embeddings {
    /// Named matrices in container order.
    pub fn named(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![
            ("embed.patch", &self.patch),
            ("embed.cls", &self.cls),
            ("embed.vision_pos", &self.vision_pos),
        ];
        if let Some(t) = &self.token {
            out.push(("embed.token", t));
        }
        if let Some(p) = &self.text_pos {
            out.push(("embed.text_pos", p));
        }
        out
    }

    pub fn expected(config: &ModelConfig) -> Vec<(&'static str, (usize, usize))> {
        let d = config.hidden_dim;
        let mut out = vec![
            ("embed.patch", (config.input_dim, d)),
            ("embed.cls", (1, d)),
            ("embed.vision_pos", (config.n_patches + 1, d)),
        ];
        if !config.unimodal {
            out.push(("embed.token", (tokens::vocab_size(config.n_classes), d)));
            out.push(("embed.text_pos", (tokens::CONTEXT_LEN, d)));
        }
        out
    }
}

/// Immutable set of encoder weights; updates return a new store sharing the
/// untouched matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    config: ModelConfig,
    entries: BTreeMap<WeightKey, Arc<Matrix>>,
    embeddings: Arc<Embeddings>,
}

impl WeightStore {
    /// Assembles a store, checking that every implied key is present with the
    /// right shape and finite entries.
    pub fn from_parts(
        config: ModelConfig,
        entries: BTreeMap<WeightKey, Matrix>,
        embeddings: Embeddings,
    ) -> Result<Self> {
        config.validate()?;
        let expected = config.weight_keys();
        if entries.len() != expected.len() {
            return invalid(format!(
                "store has {} weight matrices, config implies {}",
                entries.len(),
                expected.len()
            ));
        }
        for key in &expected {
            let m = entries
                .get(key)
                .ok_or_else(|| Error::InvalidInput(format!("missing weight {key}")))?;
            check_shape(key.name().as_str(), m, config.expected_shape(key))?;
        }
        let named = embeddings.named();
        let want = Embeddings::expected(&config);
        if named.len() != want.len() {
            return invalid("embedding set does not match config");
        }
        for ((name, m), (_, shape)) in named.into_iter().zip(want) {
            check_shape(name, m, shape)?;
        }
        Ok(WeightStore {
            config,
            entries: entries.into_iter().map(|(k, m)| (k, Arc::new(m))).collect(),
            embeddings: Arc::new(embeddings),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &Embeddings {
        &self.embeddings
    }

    pub fn keys(&self) -> impl Iterator<Item = &WeightKey> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&WeightKey, &Matrix)> {
        self.entries.iter().map(|(k, m)| (k, m.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &WeightKey) -> Result<&Matrix> {
        self.entries
            .get(key)
            .map(Arc::as_ref)
            .ok_or_else(|| Error::InvalidInput(format!("no weight {key} in this store")))
    }

    /// Weight lookup for the forward pass, where the key is known to exist.
    pub(crate) fn w(&self, tower: Tower, layer: usize, wt: WeightType) -> &Matrix {
        &self.entries[&WeightKey::new(tower, layer, wt)]
    }

    /// Returns a copy of this store with `key` replaced by `m`.
    pub fn set_weight(&self, key: &WeightKey, m: Matrix) -> Result<WeightStore> {
        let current = self.get(key)?;
        check_shape(&key.name(), &m, current.shape())?;
        let mut next = self.clone();
        next.entries.insert(*key, Arc::new(m));
        Ok(next)
    }
}

fn check_shape(name: &str, m: &Matrix, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return invalid(format!(
            "{name} has shape {}x{}, expected {}x{}",
            m.rows(),
            m.cols(),
            shape.0,
            shape.1
        ));
    }
    if !m.is_finite() {
        return invalid(format!("{name} has non-finite entries"));
    }
    Ok(())
}

/// Seeded uniform initialisation with scale `1/sqrt(fan_in)`.
///
/// Values are drawn in single precision so that a fresh store survives the
/// float32 container bit-exactly.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<WeightStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |rows: usize, cols: usize, scale: f64| {
        Matrix::from_fn(rows, cols, |_, _| {
            (rng.gen_range(-1.0f32..1.0f32) * scale as f32) as f64
        })
    };
    let mut entries = BTreeMap::new();
    for key in config.weight_keys() {
        let (rows, cols) = config.expected_shape(&key);
        entries.insert(key, uniform(rows, cols, 1.0 / (rows as f64).sqrt()));
    }
    let d = config.hidden_dim;
    let patch = uniform(config.input_dim, d, 1.0 / (config.input_dim as f64).sqrt());
    let cls = uniform(1, d, 1.0);
    let vision_pos = uniform(config.n_patches + 1, d, 0.1);
    let (token, text_pos) = if config.unimodal {
        (None, None)
    } else {
        (
            Some(uniform(tokens::vocab_size(config.n_classes), d, 1.0)),
            Some(uniform(tokens::CONTEXT_LEN, d, 0.1)),
        )
    };
    let embeddings = Embeddings { patch, cls, vision_pos, token, text_pos };
    WeightStore::from_parts(config.clone(), entries, embeddings)
}
