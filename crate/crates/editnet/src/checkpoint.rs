//! Single-file weight container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `SEGW` |
//! | 4 | format version, `u32` |
//! | 8 | manifest length `m`, `u64` |
//! | m | UTF-8 JSON manifest |
//! | … | tensor data, `f64` little-endian, in manifest order |
//!
//! The manifest holds `version`, `seed`, the model config, free-form `meta`
//! and a `tensors` list of `{name, shape, offset, length}` where `offset` is
//! the byte offset into the data section and `length` the element count.
//! Generator tensors and discriminator tensors (`disc.*`) share the list.

use std::fs;
use std::io::Write;
use std::path::Path;

use segedit_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{init_discriminator, init_generator, DiscriminatorWeights, GeneratorWeights, ModelConfig};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SEGW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub generator: GeneratorWeights,
    pub discriminator: Option<DiscriminatorWeights>,
    pub meta: Value,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Parameter(format!("invalid checkpoint: {}", msg.into()))
}

pub fn encode_checkpoint(gen: &GeneratorWeights, disc: Option<&DiscriminatorWeights>, meta: Value) -> Result<Vec<u8>> {
    if disc.is_some_and(|d| d.config != gen.config) {
        return Err(Error::Parameter("generator and discriminator configs differ".into()));
    }
    let mut entries = Vec::new();
    let mut data = Vec::new();
    let stores = std::iter::once(&gen.params).chain(disc.map(|d| &d.params));
    for store in stores {
        for (name, t) in store.iter() {
            if !t.is_finite() {
                return Err(Error::Numeric {
                    component: "checkpoint".into(),
                    detail: format!("tensor {name} has non-finite values"),
                });
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset: data.len() as u64,
                length: t.len() as u64,
            });
            for v in &t.data {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format: "segedit-weights".into(),
        version: FORMAT_VERSION,
        seed: gen.seed,
        model: gen.config.clone(),
        meta,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Parses the manifest and the raw tensors without checking them against
/// the architecture.
pub fn decode_raw(bytes: &[u8]) -> Result<(Manifest, ParamStore)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize.checked_add(mlen).filter(|e| *e <= bytes.len()).ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])?;
    if manifest.version != version {
        return Err(corrupt("manifest version disagrees with header"));
    }
    let data = &bytes[data_start..];
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if n as u64 != e.length {
            return Err(corrupt(format!("tensor {} shape/length mismatch", e.name)));
        }
        let start = e.offset as usize;
        let end = start.checked_add(n * 8).filter(|end| *end <= data.len()).ok_or_else(|| corrupt(format!("tensor {} out of bounds", e.name)))?;
        let values: Vec<f64> = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(format!("tensor {} has non-finite values", e.name)));
        }
        if store.get(&e.name).is_some() {
            return Err(corrupt(format!("duplicate tensor {}", e.name)));
        }
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
    }
    Ok((manifest, store))
}

/// Every tensor of `reference` must be present in `store` with the same
/// shape, and nothing else.
fn check_against(store: &ParamStore, reference: &ParamStore, what: &str) -> Result<()> {
    if store.len() != reference.len() {
        return Err(corrupt(format!("{what}: expected {} tensors, found {}", reference.len(), store.len())));
    }
    for (name, t) in reference.iter() {
        let got = store.get(name).ok_or_else(|| corrupt(format!("{what}: missing tensor {name}")))?;
        if got.shape != t.shape {
            return Err(corrupt(format!("{what}: tensor {name} has shape {:?}, expected {:?}", got.shape, t.shape)));
        }
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, store) = decode_raw(bytes)?;
    manifest.model.validate()?;
    let gen_params = ParamStore::from_iter(store.iter().filter(|(k, _)| !k.starts_with("disc.")).map(|(k, v)| (k.clone(), v.clone())));
    let disc_params = store.subset("disc.");
    let reference = init_generator(&manifest.model, 0)?;
    check_against(&gen_params, &reference.params, "generator")?;
    let discriminator = if disc_params.is_empty() {
        None
    } else {
        check_against(&disc_params, &init_discriminator(&manifest.model, 0)?.params, "discriminator")?;
        Some(DiscriminatorWeights {
            config: manifest.model.clone(),
            seed: manifest.seed,
            params: disc_params,
        })
    };
    Ok(Checkpoint {
        generator: GeneratorWeights {
            config: manifest.model.clone(),
            seed: manifest.seed,
            params: gen_params,
        },
        discriminator,
        meta: manifest.meta,
    })
}

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partial checkpoint.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path.file_name().ok_or_else(|| Error::Parameter(format!("bad path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, gen: &GeneratorWeights, disc: Option<&DiscriminatorWeights>, meta: Value) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(gen, disc, meta)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
