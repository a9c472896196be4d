//! Miniature dual encoder: a vision tower over patch tokens, a text tower over
//! class prompts, and projections into a shared feature space.
//!
//! Every linear map is applied as `x · W` on row vectors, so a weight's shape
//! is `(in, out)`; `W_up` is `hidden_dim × ffn_dim`.

mod container;
mod encoder;
mod store;
pub mod tokens;
mod tower;

use crate::linalg::Matrix;

pub use container::{blob_path, load_samples, manifest_path, load_store, save_samples, save_store, ContainerKind, Manifest};
pub use encoder::{
    class_prompts, classify_logits, encode_concepts, encode_image, ConceptBank, EncodedImage,
    Prompt, WeightGrads,
};
pub(crate) use encoder::{
    backward_head, backward_image, backward_prompt, encode_image_traced, encode_prompt_traced,
    logits_from_global,
};
pub use store::{init_weights, Embeddings, ModelConfig, Tower, WeightKey, WeightStore, WeightType};

/// One image (`n_patches × input_dim` patch tokens) with its ID class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub patches: Matrix,
    pub label: usize,
}
