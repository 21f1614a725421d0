//! Checkpoint directories: `manifest.json` plus one little-endian raw file per
//! tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::encoder::{EncoderConfig, EncoderModel};
use super::params::ParamStore;
use super::scalar::Real;
use super::tokenizer::Vocab;
use crate::adapters::{self, AdapterBank, AdapterConfig, BankProvenance, Compose};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const KIND_MODEL: &str = "model";
pub const KIND_ADAPTER_BANK: &str = "adapter-bank";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub frozen: bool,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config: Value,
    pub seed: u64,
    pub params: Vec<TensorEntry>,
    #[serde(default)]
    pub provenance: Value,
}

fn file_name(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:04}-{clean}.bin")
}

/// Writes `store` under `dir` (created if needed).
pub fn save_store<T: Real>(
    dir: &Path,
    kind: &str,
    config: Value,
    store: &ParamStore<T>,
    seed: u64,
    provenance: Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(store.len());
    for (i, (_, p)) in store.iter().enumerate() {
        let file = file_name(i, &p.name);
        let mut bytes = Vec::with_capacity(p.data.len() * T::BYTES);
        for &x in &p.data {
            x.write_le(&mut bytes);
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        params.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            dtype: T::DTYPE.to_string(),
            frozen: p.frozen,
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config,
        seed,
        params,
        provenance,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported checkpoint format {}",
            path.display(),
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads every tensor, converting to `T` when the stored dtype differs.
pub fn load_store<T: Real>(dir: &Path) -> Result<(Manifest, ParamStore<T>)> {
    let manifest = read_manifest(dir)?;
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let numel: usize = entry.shape.iter().product();
        let data: Vec<T> = match entry.dtype.as_str() {
            "f32" => decode::<f32>(&bytes, numel, &path)?
                .into_iter()
                .map(|x| T::of(x as f64))
                .collect(),
            "f64" => decode::<f64>(&bytes, numel, &path)?
                .into_iter()
                .map(T::of)
                .collect(),
            other => {
                return Err(Error::Validation(format!(
                    "{}: unknown dtype {other}",
                    path.display()
                )))
            }
        };
        let id = store.add(&entry.name, &entry.shape, data)?;
        store.get_mut(id).frozen = entry.frozen;
    }
    Ok((manifest, store))
}

fn decode<T: Real>(bytes: &[u8], numel: usize, path: &Path) -> Result<Vec<T>> {
    if bytes.len() != numel * T::BYTES {
        return Err(Error::Validation(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            numel * T::BYTES,
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayout {
    pub compose: Compose,
    pub banks: Vec<(String, AdapterConfig)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub encoder: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapters: Option<AdapterLayout>,
}

/// Saves a model (with any heads and adapters in its store) and its vocabulary.
pub fn save_model<T: Real>(
    dir: &Path,
    model: &EncoderModel<T>,
    vocab: &Vocab,
    seed: u64,
    provenance: Value,
) -> Result<Manifest> {
    let meta = ModelMeta {
        encoder: model.config.clone(),
        adapters: model.adapter_setup().map(|s| AdapterLayout {
            compose: s.compose(),
            banks: s
                .domains()
                .into_iter()
                .map(|d| {
                    (
                        d.to_string(),
                        s.bank_config(d).cloned().expect("bank config"),
                    )
                })
                .collect(),
        }),
    };
    let manifest = save_store(
        dir,
        KIND_MODEL,
        serde_json::to_value(&meta)?,
        &model.params,
        seed,
        provenance,
    )?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    Ok(manifest)
}

pub fn load_model<T: Real>(dir: &Path) -> Result<(EncoderModel<T>, Vocab, Manifest)> {
    let (manifest, store) = load_store::<T>(dir)?;
    if manifest.kind != KIND_MODEL {
        return Err(Error::Validation(format!(
            "{} holds a {:?} checkpoint, not a model",
            dir.display(),
            manifest.kind
        )));
    }
    let meta: ModelMeta = serde_json::from_value(manifest.config.clone())?;
    let mut model = EncoderModel::from_store(meta.encoder, store)?;
    if let Some(layout) = meta.adapters {
        adapters::attach(&mut model, layout.compose, &layout.banks)?;
    }
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    Ok((model, vocab, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankMeta {
    domain: String,
    layers: usize,
    hidden: usize,
    adapter: AdapterConfig,
    provenance: BankProvenance,
}

pub fn save_bank<T: Real>(
    dir: &Path,
    bank: &AdapterBank<T>,
    provenance: Value,
) -> Result<Manifest> {
    let meta = BankMeta {
        domain: bank.domain.clone(),
        layers: bank.layers.len(),
        hidden: bank.layers.first().map_or(0, |l| l.hidden),
        adapter: bank.config.clone(),
        provenance: bank.provenance.clone(),
    };
    save_store(
        dir,
        KIND_ADAPTER_BANK,
        serde_json::to_value(&meta)?,
        &bank.to_store()?,
        bank.provenance.seed,
        provenance,
    )
}

pub fn load_bank<T: Real>(dir: &Path) -> Result<AdapterBank<T>> {
    let (manifest, store) = load_store::<T>(dir)?;
    if manifest.kind != KIND_ADAPTER_BANK {
        return Err(Error::Validation(format!(
            "{} holds a {:?} checkpoint, not an adapter bank",
            dir.display(),
            manifest.kind
        )));
    }
    let meta: BankMeta = serde_json::from_value(manifest.config)?;
    AdapterBank::from_store(
        &store,
        &meta.domain,
        meta.layers,
        meta.adapter,
        meta.provenance,
    )
}
