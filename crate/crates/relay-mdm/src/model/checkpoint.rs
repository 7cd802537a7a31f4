//! Checkpoint container: magic `RMDM`, a format version, one JSON header
//! describing the config and the array manifest, then raw little-endian
//! f32 payloads in manifest order. Writes go to a temporary name and are
//! renamed into place so interrupted runs never leave truncated files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{array_names, ModelConfig, ModelParams, Norm};

const MAGIC: &[u8; 4] = b"RMDM";
const VERSION: u32 = 1;

/// One named f32 array with its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    arrays: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
}

/// In-memory checkpoint: model config, every stored array, and free-form
/// metadata (training state lives there).
#[derive(Debug)]
pub struct Container {
    pub config: ModelConfig,
    pub entries: Vec<Entry>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut offset = 0u64;
        let manifest: Vec<ManifestEntry> = self
            .entries
            .iter()
            .map(|e| {
                let m = ManifestEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    offset,
                };
                offset += 4 * e.data.len() as u64;
                m
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            arrays: manifest,
            meta: self.meta.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;

        let file_name = path
            .file_name()
            .ok_or_else(|| Error::Checkpoint("path has no file name".into()))?;
        let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_u32::<LittleEndian>(VERSION)?;
            w.write_u64::<LittleEndian>(header_json.len() as u64)?;
            w.write_all(&header_json)?;
            for e in &self.entries {
                let mut buf = vec![0u8; e.data.len() * 4];
                LittleEndian::write_f32_into(&e.data, &mut buf);
                w.write_all(&buf)?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Container> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?} in {}",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let header_len = r.read_u64::<LittleEndian>()? as usize;
        let mut header_buf = vec![0u8; header_len];
        r.read_exact(&mut header_buf)?;
        let header: Header = serde_json::from_slice(&header_buf)?;

        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut entries = Vec::with_capacity(header.arrays.len());
        for m in &header.arrays {
            let count: usize = m.shape.iter().product();
            let start = m.offset as usize;
            let end = start + 4 * count;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "array {} ({count} values at offset {start}) exceeds payload of {} bytes",
                    m.name,
                    payload.len()
                )));
            }
            let mut data = vec![0f32; count];
            LittleEndian::read_f32_into(&payload[start..end], &mut data);
            entries.push(Entry {
                name: m.name.clone(),
                shape: m.shape.clone(),
                data,
            });
        }
        Ok(Container {
            config: header.config,
            entries,
            meta: header.meta,
        })
    }
}

/// Model arrays as manifest entries in canonical order.
pub fn params_to_entries(params: &ModelParams<f32>) -> Vec<Entry> {
    array_names(&params.config)
        .into_iter()
        .zip(params.arrays())
        .map(|(name, a)| {
            let view = a.view();
            Entry {
                name,
                shape: view.shape().to_vec(),
                data: view.iter().copied().collect(),
            }
        })
        .collect()
}

fn take2(
    map: &mut HashMap<String, Entry>,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<Array2<f32>> {
    let e = map
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
    if e.shape != [rows, cols] {
        return Err(Error::Checkpoint(format!(
            "array {name} has shape {:?}, expected [{rows}, {cols}]",
            e.shape
        )));
    }
    Array2::from_shape_vec((rows, cols), e.data)
        .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))
}

fn take1(map: &mut HashMap<String, Entry>, name: &str, d: usize) -> Result<Array1<f32>> {
    let e = map
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
    if e.shape != [d] {
        return Err(Error::Checkpoint(format!(
            "array {name} has shape {:?}, expected [{d}]",
            e.shape
        )));
    }
    Ok(Array1::from_vec(e.data))
}

fn take_norm(map: &mut HashMap<String, Entry>, prefix: &str, d: usize) -> Result<Norm<f32>> {
    Ok(Norm {
        gamma: take1(map, &format!("{prefix}.gamma"), d)?,
        beta: take1(map, &format!("{prefix}.beta"), d)?,
    })
}

/// Rebuilds model parameters from container entries per the embedded
/// config. Non-model entries (optimizer state) are ignored here.
pub fn entries_to_params(container: &Container) -> Result<ModelParams<f32>> {
    let cfg = &container.config;
    cfg.validate()?;
    let mut map: HashMap<String, Entry> = container
        .entries
        .iter()
        .map(|e| (e.name.clone(), e.clone()))
        .collect();
    let d = cfg.d_model;
    let embedding = take2(&mut map, "embedding", cfg.vocab_size, d)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{i}.{s}");
        layers.push(crate::model::LayerParams {
            norm1: take_norm(&mut map, &p("norm1"), d)?,
            wq: take2(&mut map, &p("wq"), d, d)?,
            wk: take2(&mut map, &p("wk"), d, d)?,
            wv: take2(&mut map, &p("wv"), d, d)?,
            wo: take2(&mut map, &p("wo"), d, d)?,
            norm2: take_norm(&mut map, &p("norm2"), d)?,
            w1: take2(&mut map, &p("w1"), d, cfg.d_ff)?,
            b1: take1(&mut map, &p("b1"), cfg.d_ff)?,
            w2: take2(&mut map, &p("w2"), cfg.d_ff, d)?,
            b2: take1(&mut map, &p("b2"), d)?,
        });
    }
    let final_norm = take_norm(&mut map, "final_norm", d)?;
    let relay_norm = if cfg.relay_enabled {
        Some(take_norm(&mut map, "relay_norm", d)?)
    } else {
        None
    };
    let unembedding = if cfg.tie_embeddings {
        None
    } else {
        Some(take2(&mut map, "unembedding", d, cfg.vocab_size)?)
    };
    Ok(ModelParams {
        config: cfg.clone(),
        embedding,
        layers,
        final_norm,
        relay_norm,
        unembedding,
    })
}

/// Writes a model-only checkpoint (optional metadata appended).
pub fn save_model(
    path: &Path,
    params: &ModelParams<f32>,
    meta: serde_json::Value,
    extra_entries: Vec<Entry>,
) -> Result<()> {
    let mut entries = params_to_entries(params);
    entries.extend(extra_entries);
    Container {
        config: params.config.clone(),
        entries,
        meta,
    }
    .write(path)
}

/// Loads a checkpoint, returning the parameters plus the raw container
/// (for optimizer state and metadata).
pub fn load_model(path: &Path) -> Result<(ModelParams<f32>, Container)> {
    let container = Container::read(path)?;
    let params = entries_to_params(&container)?;
    Ok((params, container))
}

/// Like [`load_model`], also requiring the stored config to equal an
/// expected one, so a checkpoint never silently adapts to a different
/// architecture.
pub fn load_model_expecting(
    path: &Path,
    expected: &ModelConfig,
) -> Result<(ModelParams<f32>, Container)> {
    let container = Container::read(path)?;
    if &container.config != expected {
        return Err(Error::Config(format!(
            "checkpoint config does not match: stored {:?}, expected {expected:?}",
            container.config
        )));
    }
    let params = entries_to_params(&container)?;
    Ok((params, container))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny();
        let params = build_model::<f32>(&cfg, 51).unwrap();
        let p1 = dir.path().join("a.rmdm");
        let p2 = dir.path().join("b.rmdm");
        save_model(&p1, &params, serde_json::Value::Null, Vec::new()).unwrap();
        let (loaded, _) = load_model(&p1).unwrap();
        assert_eq!(loaded, params);
        save_model(&p2, &loaded, serde_json::Value::Null, Vec::new()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_array_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny();
        let params = build_model::<f32>(&cfg, 52).unwrap();
        let path = dir.path().join("c.rmdm");
        save_model(&path, &params, serde_json::Value::Null, Vec::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Container::read(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rmdm");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(Container::read(&path), Err(Error::Checkpoint(_))));

        let cfg = ModelConfig::tiny();
        let params = build_model::<f32>(&cfg, 53).unwrap();
        save_model(&path, &params, serde_json::Value::Null, Vec::new()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Container::read(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn untied_checkpoint_rejected_by_tied_expectation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_untied = ModelConfig { tie_embeddings: false, ..ModelConfig::tiny() };
        let params = build_model::<f32>(&cfg_untied, 54).unwrap();
        let path = dir.path().join("untied.rmdm");
        save_model(&path, &params, serde_json::Value::Null, Vec::new()).unwrap();
        let tied = ModelConfig { tie_embeddings: true, ..ModelConfig::tiny() };
        assert!(matches!(
            load_model_expecting(&path, &tied),
            Err(Error::Config(_))
        ));
        assert!(load_model_expecting(&path, &cfg_untied).is_ok());
    }

    #[test]
    fn meta_and_extra_entries_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny();
        let params = build_model::<f32>(&cfg, 55).unwrap();
        let path = dir.path().join("meta.rmdm");
        let meta = serde_json::json!({"step": 12, "note": "x"});
        let extra = vec![Entry {
            name: "adam.m.embedding".into(),
            shape: vec![cfg.vocab_size, cfg.d_model],
            data: vec![0.5; cfg.vocab_size * cfg.d_model],
        }];
        save_model(&path, &params, meta.clone(), extra.clone()).unwrap();
        let (_, container) = load_model(&path).unwrap();
        assert_eq!(container.meta, meta);
        let got = container
            .entries
            .iter()
            .find(|e| e.name == "adam.m.embedding")
            .unwrap();
        assert_eq!(got, &extra[0]);
    }
}
