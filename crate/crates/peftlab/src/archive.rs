//! Flat binary tensor archives with a JSON manifest.
//!
//! A checkpoint directory holds `manifest.json` (tensor names, shapes,
//! offsets, plus caller metadata) and `tensors.bin` (little-endian f64,
//! concatenated in manifest order). Values round-trip bit-exactly, which
//! the resume and freeze contracts rely on.

use crate::error::{Error, Result};
use crate::optim::{AdamState, AdamW};
use crate::tensor::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<EntryMeta>,
}

#[derive(Debug, Default)]
pub struct TensorArchive {
    entries: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        TensorArchive {
            entries: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut tensors = Vec::with_capacity(self.entries.len());
        let mut blob: Vec<u8> = Vec::new();
        for (name, t) in &self.entries {
            tensors.push(EntryMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
                len: t.numel(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors,
        };
        let json =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        let mut f = std::fs::File::create(dir.join("tensors.bin"))?;
        f.write_all(&blob)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
                .map_err(|e| Error::Parse(format!("manifest.json: {e}")))?;
        let mut blob = Vec::new();
        std::fs::File::open(dir.join("tensors.bin"))?.read_to_end(&mut blob)?;

        let mut entries = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let start = e.offset;
            let end = start + e.len * 8;
            if end > blob.len() {
                return Err(Error::Parse(format!(
                    "tensor '{}' extends past end of tensors.bin",
                    e.name
                )));
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((e.name.clone(), Tensor::new(data, &e.shape)?));
        }
        Ok(TensorArchive {
            entries,
            meta: manifest.meta,
        })
    }
}

const PARAM_PREFIX: &str = "param.";
const OPT_M_PREFIX: &str = "optim.m.";
const OPT_V_PREFIX: &str = "optim.v.";

/// Adds every parameter value to the archive.
pub fn push_params(archive: &mut TensorArchive, params: &ParamSet) {
    for p in params.iter() {
        archive.push(format!("{PARAM_PREFIX}{}", p.name), p.tensor.clone());
    }
}

/// Restores parameter values in place. Every existing parameter must be
/// present in the archive with a matching shape; flags (trainable/frozen)
/// are left to the model constructor.
pub fn restore_params(archive: &TensorArchive, params: &mut ParamSet) -> Result<()> {
    for p in params.iter_mut() {
        let t = archive
            .get(&format!("{PARAM_PREFIX}{}", p.name))
            .ok_or_else(|| Error::Parse(format!("checkpoint missing parameter '{}'", p.name)))?;
        if t.shape() != p.tensor.shape() {
            return Err(Error::Shape(format!(
                "checkpoint parameter '{}' has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = t.clone();
    }
    Ok(())
}

/// Adds optimizer moments to the archive; the step counter goes in `meta`.
pub fn push_optimizer(archive: &mut TensorArchive, opt: &AdamW) {
    for (name, st) in &opt.state {
        let n = st.m.len();
        archive.push(
            format!("{OPT_M_PREFIX}{name}"),
            Tensor::new(st.m.clone(), &[n]).expect("flat state"),
        );
        archive.push(
            format!("{OPT_V_PREFIX}{name}"),
            Tensor::new(st.v.clone(), &[n]).expect("flat state"),
        );
    }
}

/// Rebuilds optimizer state recorded by [`push_optimizer`].
pub fn restore_optimizer(archive: &TensorArchive, opt: &mut AdamW, step_count: u64) {
    opt.step_count = step_count;
    opt.state.clear();
    for name in archive.names() {
        if let Some(param_name) = name.strip_prefix(OPT_M_PREFIX) {
            let m = archive.get(name).unwrap().data().to_vec();
            let v = archive
                .get(&format!("{OPT_V_PREFIX}{param_name}"))
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; m.len()]);
            opt.state.insert(param_name.to_string(), AdamState { m, v });
        }
    }
}
