//! Named-array archive: the on-disk format for checkpoints and external
//! weight import.
//!
//! Layout: 8-byte magic, u64 little-endian JSON index length, the JSON
//! index, then a flat little-endian f64 payload. The index records, per
//! array: section (which model state it belongs to), name, kind
//! (param/buffer), shape, and offset/len in f64 units; a free-form `meta`
//! object carries scalars like step counters and config hashes.

use crate::backbone::{Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::state::ModelState;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MAYOARC1";

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    section: String,
    name: String,
    kind: String, // "param" | "buffer"
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    arrays: Vec<IndexEntry>,
    meta: serde_json::Value,
}

/// Write sections of model states plus a metadata object.
pub fn save_archive(
    path: &Path,
    sections: &BTreeMap<String, &ModelState>,
    meta: serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    for (section, state) in sections {
        for (kind, iter) in [
            ("param", state.params().collect::<Vec<_>>()),
            ("buffer", state.buffers().collect::<Vec<_>>()),
        ] {
            for (name, value) in iter {
                entries.push(IndexEntry {
                    section: section.clone(),
                    name: name.clone(),
                    kind: kind.to_string(),
                    shape: value.shape().to_vec(),
                    offset: payload.len(),
                    len: value.len(),
                });
                payload.extend(value.iter().copied());
            }
        }
    }
    let index = Index {
        arrays: entries,
        meta,
    };
    let json = serde_json::to_vec(&index)?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(MAGIC).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&(json.len() as u64).to_le_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&json).map_err(|e| Error::io(&tmp, e))?;
        let mut bytes = Vec::with_capacity(payload.len() * 8);
        for v in &payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read every section of an archive.
pub fn load_archive(path: &Path) -> Result<(BTreeMap<String, ModelState>, serde_json::Value)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::validation(format!(
            "{} is not a weight archive (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    f.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let index: Index = serde_json::from_slice(&json)?;
    let mut rest = Vec::new();
    f.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if rest.len() % 8 != 0 {
        return Err(Error::validation("truncated archive payload"));
    }
    let payload: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut sections: BTreeMap<String, ModelState> = BTreeMap::new();
    for e in &index.arrays {
        if e.offset + e.len > payload.len() {
            return Err(Error::validation(format!(
                "array {} overruns payload",
                e.name
            )));
        }
        let data = payload[e.offset..e.offset + e.len].to_vec();
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|err| Error::validation(format!("array {}: {err}", e.name)))?;
        let state = sections.entry(e.section.clone()).or_default();
        match e.kind.as_str() {
            "param" => state.insert_param(&e.name, arr),
            "buffer" => state.insert_buffer(&e.name, arr),
            other => {
                return Err(Error::validation(format!("unknown array kind {other}")));
            }
        }
    }
    Ok((sections, index.meta))
}

/// Outcome of an external weight import: what matched and what did not.
#[derive(Debug, Clone, Default)]
pub struct ImportReport {
    pub matched: Vec<String>,
    pub unmatched_in_archive: Vec<String>,
    pub unmatched_in_model: Vec<String>,
}

impl ImportReport {
    pub fn is_clean(&self) -> bool {
        self.unmatched_in_archive.is_empty() && self.unmatched_in_model.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "imported {} arrays; {} archive arrays unmatched; {} model arrays left at init",
            self.matched.len(),
            self.unmatched_in_archive.len(),
            self.unmatched_in_model.len()
        )
    }
}

/// Build an encoder state from `spec` and fill it with arrays from the
/// archive's `encoder` section, by name. Unmatched names on either side are
/// reported, not fatal; shape mismatches are errors. Classifier sections in
/// the archive are ignored (downstream heads always start fresh).
pub fn import_weights(source: &Path, spec: &EncoderSpec) -> Result<(ModelState, ImportReport)> {
    let encoder = Encoder::new(spec.clone())?;
    let mut state = encoder.init_state(0);
    let (sections, _meta) = load_archive(source)?;
    let Some(archive_state) = sections.get("encoder") else {
        return Err(Error::validation(format!(
            "{} has no encoder section (found: {})",
            source.display(),
            sections.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    };

    let mut report = ImportReport::default();
    let model_names: Vec<String> = state.param_names().cloned().collect();
    for name in &model_names {
        match archive_state.param(name) {
            Some(src) => {
                let dst = state.param_mut(name).unwrap();
                if src.shape() != dst.shape() {
                    return Err(Error::validation(format!(
                        "shape mismatch for {name}: archive {:?} vs model {:?}",
                        src.shape(),
                        dst.shape()
                    )));
                }
                dst.assign(src);
                report.matched.push(name.clone());
            }
            None => report.unmatched_in_model.push(name.clone()),
        }
    }
    for (name, _) in archive_state.params() {
        if !model_names.iter().any(|n| n == name) {
            report.unmatched_in_archive.push(name.clone());
        }
    }
    // carry running statistics over when present
    let buffer_names: Vec<String> = state.buffers().map(|(n, _)| n.clone()).collect();
    for name in buffer_names {
        if let Some(src) = archive_state.buffer(&name) {
            if let Some(dst) = state.buffer_mut(&name) {
                if src.shape() == dst.shape() {
                    dst.assign(src);
                }
            }
        }
    }
    Ok((state, report))
}
