//! On-disk container: `<name>.manifest.json` plus `<name>.weights.bin`, the
//! blob holding little-endian float32 matrices concatenated row-major in
//! manifest order. The manifest records the CRC32 of the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

use super::store::{Embeddings, ModelConfig, WeightKey, WeightStore};
use super::LabeledImage;

pub const FORMAT: &str = "setar-container";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerKind {
    Weights,
    Samples,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntrySpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: ContainerKind,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    pub entries: Vec<EntrySpec>,
    pub byte_len: u64,
    pub crc32: u32,
}

pub fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.manifest.json"))
}

pub fn blob_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.weights.bin"))
}

fn encode_blob<'a>(mats: impl Iterator<Item = (String, &'a Matrix)>) -> Result<(Vec<EntrySpec>, Vec<u8>)> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, m) in mats {
        for &v in m.as_slice() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Numeric(format!("{name} does not fit in float32")));
            }
            blob.extend_from_slice(&f.to_le_bytes());
        }
        entries.push(EntrySpec { name, rows: m.rows(), cols: m.cols() });
    }
    Ok((entries, blob))
}

fn write(dir: &Path, name: &str, manifest: &Manifest, blob: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(blob_path(dir, name), blob)?;
    fs::write(manifest_path(dir, name), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

fn read(dir: &Path, name: &str, kind: ContainerKind) -> Result<(Manifest, Vec<Matrix>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(dir, name))?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return invalid(format!(
            "{name}: unsupported container {} v{}",
            manifest.format, manifest.version
        ));
    }
    if manifest.kind != kind {
        return invalid(format!("{name}: expected a {kind:?} container, found {:?}", manifest.kind));
    }
    if manifest.dtype != "f32le" {
        return invalid(format!("{name}: unsupported dtype {}", manifest.dtype));
    }
    let blob = fs::read(blob_path(dir, name))?;
    if blob.len() as u64 != manifest.byte_len {
        return invalid(format!(
            "{name}: blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.byte_len
        ));
    }
    let crc = crc32fast::hash(&blob);
    if crc != manifest.crc32 {
        return invalid(format!("{name}: CRC32 mismatch ({crc:#010x} != {:#010x})", manifest.crc32));
    }
    let expected: usize = manifest.entries.iter().map(|e| e.rows * e.cols * 4).sum();
    if expected != blob.len() {
        return invalid(format!("{name}: entry shapes need {expected} bytes, blob has {}", blob.len()));
    }
    let mut mats = Vec::with_capacity(manifest.entries.len());
    let mut offset = 0;
    for e in &manifest.entries {
        let n = e.rows * e.cols;
        let data = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        offset += 4 * n;
        mats.push(Matrix::from_vec(e.rows, e.cols, data)?);
    }
    Ok((manifest, mats))
}

fn manifest(kind: ContainerKind, entries: Vec<EntrySpec>, blob: &[u8]) -> Manifest {
    Manifest {
        format: FORMAT.into(),
        version: VERSION,
        kind,
        dtype: "f32le".into(),
        config: None,
        labels: None,
        entries,
        byte_len: blob.len() as u64,
        crc32: crc32fast::hash(blob),
    }
}

/// Writes every keyed weight (store order) followed by the embeddings.
pub fn save_store(store: &WeightStore, dir: &Path, name: &str) -> Result<()> {
    let keyed = store.iter().map(|(k, m)| (k.name(), m));
    let emb = store.embeddings().named().into_iter().map(|(n, m)| (n.to_string(), m));
    let (entries, blob) = encode_blob(keyed.chain(emb))?;
    let mut man = manifest(ContainerKind::Weights, entries, &blob);
    man.config = Some(store.config().clone());
    write(dir, name, &man, &blob)
}

pub fn load_store(dir: &Path, name: &str) -> Result<WeightStore> {
    let (man, mats) = read(dir, name, ContainerKind::Weights)?;
    let config = man
        .config
        .ok_or_else(|| Error::InvalidInput(format!("{name}: weights manifest lacks a config")))?;
    let mut keyed = BTreeMap::new();
    let mut named: BTreeMap<String, Matrix> = BTreeMap::new();
    for (spec, m) in man.entries.iter().zip(mats) {
        if spec.name.starts_with("embed.") {
            named.insert(spec.name.clone(), m);
        } else {
            keyed.insert(WeightKey::parse(&spec.name)?, m);
        }
    }
    let mut take = |n: &str| named.remove(n);
    let missing = |n: &str| Error::InvalidInput(format!("{name}: missing {n}"));
    let embeddings = Embeddings {
        patch: take("embed.patch").ok_or_else(|| missing("embed.patch"))?,
        cls: take("embed.cls").ok_or_else(|| missing("embed.cls"))?,
        vision_pos: take("embed.vision_pos").ok_or_else(|| missing("embed.vision_pos"))?,
        token: take("embed.token"),
        text_pos: take("embed.text_pos"),
    };
    if let Some(extra) = named.keys().next() {
        return invalid(format!("{name}: unexpected entry {extra}"));
    }
    WeightStore::from_parts(config, keyed, embeddings)
}

/// Writes labelled patch-token matrices, one entry per sample.
pub fn save_samples(samples: &[LabeledImage], dir: &Path, name: &str) -> Result<()> {
    let mats = samples.iter().enumerate().map(|(i, s)| (format!("sample{i}"), &s.patches));
    let (entries, blob) = encode_blob(mats)?;
    let mut man = manifest(ContainerKind::Samples, entries, &blob);
    man.labels = Some(samples.iter().map(|s| s.label).collect());
    write(dir, name, &man, &blob)
}

pub fn load_samples(dir: &Path, name: &str) -> Result<Vec<LabeledImage>> {
    let (man, mats) = read(dir, name, ContainerKind::Samples)?;
    let labels = man
        .labels
        .ok_or_else(|| Error::InvalidInput(format!("{name}: samples manifest lacks labels")))?;
    if labels.len() != mats.len() {
        return invalid(format!("{name}: {} labels for {} samples", labels.len(), mats.len()));
    }
    Ok(mats.into_iter().zip(labels).map(|(patches, label)| LabeledImage { patches, label }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_vision_layers: 1,
            n_text_layers: 1,
            hidden_dim: 4,
            feature_dim: 3,
            n_patches: 2,
            ffn_dim: 8,
            n_classes: 2,
            unimodal: false,
            input_dim: 3,
        }
    }

    #[test]
    fn fresh_store_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let store = init_weights(&tiny(), 4).unwrap();
        save_store(&store, dir.path(), "w").unwrap();
        assert_eq!(load_store(dir.path(), "w").unwrap(), store);

        let uni = init_weights(&ModelConfig { unimodal: true, ..tiny() }, 4).unwrap();
        save_store(&uni, dir.path(), "u").unwrap();
        assert_eq!(load_store(dir.path(), "u").unwrap(), uni);
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = init_weights(&tiny(), 4).unwrap();
        save_store(&store, dir.path(), "w").unwrap();
        let path = blob_path(dir.path(), "w");
        let mut bytes = fs::read(&path).unwrap();
        bytes[5] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        let err = load_store(dir.path(), "w").unwrap_err();
        assert!(err.to_string().contains("CRC32"), "{err}");
    }

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![
            LabeledImage { patches: Matrix::from_fn(2, 3, |r, c| (r + c) as f64 * 0.5), label: 1 },
            LabeledImage { patches: Matrix::zeros(2, 3), label: 0 },
        ];
        save_samples(&samples, dir.path(), "s").unwrap();
        assert_eq!(load_samples(dir.path(), "s").unwrap(), samples);
        assert!(load_store(dir.path(), "s").is_err());
    }
}
