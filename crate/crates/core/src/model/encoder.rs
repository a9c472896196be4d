use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

use super::store::{Tower, WeightKey, WeightStore, WeightType};
use super::tokens;
use super::tower::{backprop_tower, run_tower, BlockGrads, TowerTrace};

/// Vision tower output: the projected `[cls]` feature and one projected
/// feature per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    pub global: Vec<f64>,
    /// `n_patches × feature_dim`.
    pub local: Matrix,
}

/// Projected `[eos]` features of the ID class prompts, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBank {
    pub features: Matrix,
    pub class_names: Vec<String>,
}

impl ConceptBank {
    pub fn n_classes(&self) -> usize {
        self.features.rows()
    }
}

/// A class label with its token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub label: String,
    pub tokens: Vec<usize>,
}

impl Prompt {
    pub fn for_class(class_index: usize, label: impl Into<String>) -> Self {
        Prompt { label: label.into(), tokens: tokens::prompt_tokens(class_index) }
    }
}

/// Default prompts `class_0 .. class_{k-1}`.
pub fn class_prompts(n_classes: usize) -> Vec<Prompt> {
    (0..n_classes).map(|c| Prompt::for_class(c, format!("class_{c}"))).collect()
}

/// Accumulated gradients keyed by weight.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightGrads(pub BTreeMap<WeightKey, Matrix>);

impl WeightGrads {
    pub fn get(&self, key: &WeightKey) -> Option<&Matrix> {
        self.0.get(key)
    }

    pub(crate) fn add(&mut self, key: WeightKey, g: Matrix) {
        match self.0.get_mut(&key) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.0.insert(key, g);
            }
        }
    }

    fn add_blocks(&mut self, tower: Tower, blocks: Vec<BlockGrads>) {
        for (layer, BlockGrads(mats)) in blocks.into_iter().enumerate() {
            for (wt, g) in WeightType::PER_LAYER.iter().zip(mats) {
                self.add(WeightKey::new(tower, layer, *wt), g);
            }
        }
    }

    pub fn merge(&mut self, other: WeightGrads) {
        for (k, g) in other.0 {
            self.add(k, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.values_mut() {
            *g = g.scale(s);
        }
    }
}

fn embed_image(store: &WeightStore, image: &Matrix) -> Result<Matrix> {
    let cfg = store.config();
    if image.shape() != (cfg.n_patches, cfg.input_dim) {
        return invalid(format!(
            "image has shape {}x{}, model expects {}x{}",
            image.rows(),
            image.cols(),
            cfg.n_patches,
            cfg.input_dim
        ));
    }
    if !image.is_finite() {
        return invalid("image has non-finite entries");
    }
    let emb = store.embeddings();
    let patches = image.matmul(&emb.patch);
    let mut x = Matrix::zeros(cfg.n_patches + 1, cfg.hidden_dim);
    x.row_mut(0).copy_from_slice(emb.cls.row(0));
    for i in 0..cfg.n_patches {
        x.row_mut(i + 1).copy_from_slice(patches.row(i));
    }
    x.add_assign(&emb.vision_pos);
    Ok(x)
}

pub(crate) fn encode_image_traced(
    store: &WeightStore,
    image: &Matrix,
    record: bool,
) -> Result<(EncodedImage, TowerTrace)> {
    let x0 = embed_image(store, image)?;
    let trace = run_tower(store, Tower::Vision, x0, record)?;
    let wp = store.w(Tower::Vision, 0, WeightType::Wp);
    let projected = trace.hidden.matmul(wp);
    let l = store.config().n_patches;
    let enc = EncodedImage {
        global: projected.row(0).to_vec(),
        local: projected.slice_rows(1, l + 1),
    };
    Ok((enc, trace))
}

/// Runs the vision tower and projects `[cls]` and patch outputs.
pub fn encode_image(store: &WeightStore, image: &Matrix) -> Result<EncodedImage> {
    encode_image_traced(store, image, false).map(|(enc, _)| enc)
}

/// Gradient of a scalar objective flowing back from the image features.
pub(crate) fn backward_image(
    store: &WeightStore,
    trace: &TowerTrace,
    d_global: &[f64],
    d_local: &Matrix,
    grads: &mut WeightGrads,
) {
    let wp = store.w(Tower::Vision, 0, WeightType::Wp);
    let n = trace.hidden.rows();
    let mut d_proj = Matrix::zeros(n, wp.cols());
    d_proj.row_mut(0).copy_from_slice(d_global);
    for i in 0..d_local.rows() {
        d_proj.row_mut(i + 1).copy_from_slice(d_local.row(i));
    }
    grads.add(WeightKey::tower_level(Tower::Vision, WeightType::Wp), trace.hidden.t_matmul(&d_proj));
    let d_hidden = d_proj.matmul_t(wp);
    let blocks = backprop_tower(store, trace, d_hidden);
    grads.add_blocks(Tower::Vision, blocks);
}

fn require_dual(store: &WeightStore, what: &str) -> Result<()> {
    if store.config().unimodal {
        Err(Error::Unsupported(format!("{what} needs a text tower; this store is unimodal")))
    } else {
        Ok(())
    }
}

fn embed_prompt(store: &WeightStore, prompt: &Prompt) -> Result<Matrix> {
    let cfg = store.config();
    let vocab = tokens::vocab_size(cfg.n_classes);
    if prompt.tokens.len() != tokens::CONTEXT_LEN {
        return invalid(format!(
            "prompt {:?} has {} tokens, expected {}",
            prompt.label,
            prompt.tokens.len(),
            tokens::CONTEXT_LEN
        ));
    }
    if let Some(&t) = prompt.tokens.iter().find(|&&t| t >= vocab) {
        return invalid(format!("token {t} outside vocabulary of size {vocab}"));
    }
    let emb = store.embeddings();
    let table = emb.token.as_ref().expect("dual store has token embeddings");
    let pos = emb.text_pos.as_ref().expect("dual store has text positions");
    let mut x = Matrix::zeros(tokens::CONTEXT_LEN, cfg.hidden_dim);
    for (i, &t) in prompt.tokens.iter().enumerate() {
        for ((o, &a), &b) in x.row_mut(i).iter_mut().zip(table.row(t)).zip(pos.row(i)) {
            *o = a + b;
        }
    }
    Ok(x)
}

pub(crate) fn encode_prompt_traced(
    store: &WeightStore,
    prompt: &Prompt,
    record: bool,
) -> Result<(Vec<f64>, TowerTrace)> {
    require_dual(store, "encode_concepts")?;
    let x0 = embed_prompt(store, prompt)?;
    let trace = run_tower(store, Tower::Text, x0, record)?;
    let eos = trace.hidden.row(trace.hidden.rows() - 1);
    let feature = Matrix::vec_mul(eos, store.w(Tower::Text, 0, WeightType::Wp));
    Ok((feature, trace))
}

pub(crate) fn backward_prompt(
    store: &WeightStore,
    trace: &TowerTrace,
    d_feature: &[f64],
    grads: &mut WeightGrads,
) {
    let wp = store.w(Tower::Text, 0, WeightType::Wp);
    let last = trace.hidden.rows() - 1;
    let eos = trace.hidden.row(last);
    let d_wp = Matrix::from_fn(wp.rows(), wp.cols(), |r, c| eos[r] * d_feature[c]);
    grads.add(WeightKey::tower_level(Tower::Text, WeightType::Wp), d_wp);
    let mut d_hidden = Matrix::zeros(trace.hidden.rows(), trace.hidden.cols());
    for (r, o) in d_hidden.row_mut(last).iter_mut().enumerate() {
        *o = crate::linalg::dot(wp.row(r), d_feature);
    }
    let blocks = backprop_tower(store, trace, d_hidden);
    grads.add_blocks(Tower::Text, blocks);
}

/// Encodes each class prompt through the text tower.
pub fn encode_concepts(store: &WeightStore, prompts: &[Prompt]) -> Result<ConceptBank> {
    require_dual(store, "encode_concepts")?;
    if prompts.is_empty() {
        return invalid("at least one class prompt is required");
    }
    let d = store.config().feature_dim;
    let mut features = Matrix::zeros(prompts.len(), d);
    for (c, p) in prompts.iter().enumerate() {
        let (f, _) = encode_prompt_traced(store, p, false)?;
        features.row_mut(c).copy_from_slice(&f);
    }
    Ok(ConceptBank { features, class_names: prompts.iter().map(|p| p.label.clone()).collect() })
}

fn head(store: &WeightStore) -> Result<&Matrix> {
    if !store.config().unimodal {
        return Err(Error::Unsupported(
            "classify_logits needs a unimodal store with a classification head".into(),
        ));
    }
    Ok(store.w(Tower::Vision, 0, WeightType::Head))
}

/// Class logits of the unimodal path: global feature times the head.
pub fn classify_logits(store: &WeightStore, image: &Matrix) -> Result<Vec<f64>> {
    let head = head(store)?;
    let enc = encode_image(store, image)?;
    Ok(Matrix::vec_mul(&enc.global, head))
}

pub(crate) fn logits_from_global(store: &WeightStore, global: &[f64]) -> Result<Vec<f64>> {
    Ok(Matrix::vec_mul(global, head(store)?))
}

/// Gradient of the head and of the global feature given `d_logits`.
pub(crate) fn backward_head(
    store: &WeightStore,
    global: &[f64],
    d_logits: &[f64],
    grads: &mut WeightGrads,
) -> Vec<f64> {
    let head = store.w(Tower::Vision, 0, WeightType::Head);
    let d_head = Matrix::from_fn(head.rows(), head.cols(), |r, c| global[r] * d_logits[c]);
    grads.add(WeightKey::tower_level(Tower::Vision, WeightType::Head), d_head);
    (0..head.rows()).map(|r| crate::linalg::dot(head.row(r), d_logits)).collect()
}
