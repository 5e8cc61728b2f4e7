//! Model file layout:
//!
//! ```text
//! "OMMODEL1" | u64 LE header length | JSON header | f64 LE parameter blob
//! ```
//!
//! The header carries the config, class count, image size, seed, the basis
//! (as JSON rows, for inspection) and a section table locating every named
//! tensor in the blob. The basis is also stored as an exact blob section and
//! must match the seeded construction bit for bit on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::DetectorConfig;
use super::model::{Detector, ParamSet};
use super::train::EpochRecord;
use crate::error::{Error, FormatErrorKind, Result};
use crate::ortho::{build_orthogonal_basis, BasisFile, OrthoBasis};
use crate::tensor::Array;

const MAGIC: &[u8; 8] = b"OMMODEL1";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const BASIS_SECTION: &str = "ortho.basis";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Section {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 elements from the start of the blob.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: DetectorConfig,
    classes: usize,
    image_size: usize,
    seed: u64,
    basis: Option<BasisFile>,
    sections: Vec<Section>,
}

pub fn encode_model(model: &Detector) -> Result<Vec<u8>> {
    let mut blob: Vec<f64> = Vec::new();
    let mut sections = Vec::new();
    let mut add = |name: &str, a: &Array| {
        sections.push(Section {
            name: name.to_string(),
            shape: a.shape().to_vec(),
            offset: blob.len(),
        });
        blob.extend_from_slice(a.data());
    };
    for (name, value) in model.params().iter() {
        add(name, value);
    }
    if let Some(b) = model.basis() {
        add(BASIS_SECTION, b.basis());
    }
    let header = Header {
        format_version: MODEL_FORMAT_VERSION,
        config: model.config().clone(),
        classes: model.classes(),
        image_size: model.image_size(),
        seed: model.config().seed,
        basis: model.basis().map(OrthoBasis::to_file),
        sections,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::contract(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<Detector> {
    let fail = |kind, detail: String| Error::format(path, kind, detail);
    if bytes.len() < 16 {
        return Err(fail(FormatErrorKind::Truncated, "shorter than the file header".into()));
    }
    if &bytes[..7] != &MAGIC[..7] {
        return Err(fail(FormatErrorKind::BadMagic, "not a model file".into()));
    }
    if bytes[7] != MAGIC[7] {
        return Err(fail(
            FormatErrorKind::VersionMismatch,
            format!("model version byte {:?}", bytes[7] as char),
        ));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(fail(FormatErrorKind::Truncated, "incomplete JSON header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| fail(FormatErrorKind::Malformed, e.to_string()))?;
    if header.format_version != MODEL_FORMAT_VERSION {
        return Err(fail(
            FormatErrorKind::VersionMismatch,
            format!("format {} (expected {MODEL_FORMAT_VERSION})", header.format_version),
        ));
    }
    let raw = &body[hlen..];
    if raw.len() % 8 != 0 {
        return Err(fail(FormatErrorKind::Truncated, "blob is not whole f64 values".into()));
    }
    let blob: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let section = |s: &Section| -> Result<Array> {
        let n: usize = s.shape.iter().product();
        let data = blob.get(s.offset..s.offset + n).ok_or_else(|| {
            fail(FormatErrorKind::Truncated, format!("section {} runs past the blob", s.name))
        })?;
        Array::new(s.shape.clone(), data.to_vec())
    };
    let mut params = ParamSet::new();
    let mut basis = None;
    for s in &header.sections {
        if s.name == BASIS_SECTION {
            basis = Some(section(s)?);
        } else {
            params.push(&s.name, section(s)?);
        }
    }
    // the stored basis must be exactly the one the seed constructs
    let basis = match basis {
        Some(stored) => {
            let cfg = &header.config;
            let rebuilt = build_orthogonal_basis(
                header.seed,
                cfg.head.outputs(header.classes),
                cfg.feature_dim,
                cfg.basis_ksize,
            )?;
            if rebuilt.basis().data() != stored.data() {
                return Err(fail(
                    FormatErrorKind::ChecksumMismatch,
                    "stored basis differs from the seeded construction".into(),
                ));
            }
            Some(rebuilt)
        }
        None => None,
    };
    Detector::from_parts(header.config, header.classes, header.image_size, params, basis)
        .map_err(|e| fail(FormatErrorKind::Malformed, e.to_string()))
}

pub fn save_model(model: &Detector, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Detector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}

/// JSON-lines training log, one record per epoch.
pub fn write_train_log(log: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for rec in log {
        serde_json::to_writer(&mut out, rec).map_err(|e| Error::contract(e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
