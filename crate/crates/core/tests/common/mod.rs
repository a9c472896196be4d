#![allow(dead_code)]

use std::path::PathBuf;

use setar::harness::{ExperimentConfig, NoiseLayer, NoiseSpec, SyntheticSpec};
use setar::{ModelConfig, Tower};

pub fn tiny_model(n_vision_layers: usize, n_text_layers: usize) -> ModelConfig {
    ModelConfig {
        n_vision_layers,
        n_text_layers,
        hidden_dim: 8,
        feature_dim: 4,
        n_patches: 4,
        ffn_dim: 12,
        n_classes: 3,
        unimodal: false,
        input_dim: 4,
    }
}

/// Small task with minor-subspace noise on the bottom vision layer.
pub fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_train: 12,
        n_val: 12,
        n_test: 20,
        n_ood: 20,
        n_ood_sets: 2,
        object_patches: 3,
        noise: NoiseSpec {
            layers: vec![NoiseLayer { tower: Tower::Vision, layer: 0 }],
            r_true: 5,
            scale: 0.6,
            tail_shrink: 0.2,
        },
        ..SyntheticSpec::default()
    }
}

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs")
}

/// The shipped recovery experiment with `seed` and `output_dir` replaced.
pub fn recovery_config(seed: u64, output_dir: &std::path::Path) -> ExperimentConfig {
    let overrides = vec![
        ("seed".to_string(), seed.to_string()),
        ("output_dir".to_string(), output_dir.display().to_string()),
    ];
    ExperimentConfig::load(&configs_dir().join("recovery.json"), &overrides).unwrap()
}
