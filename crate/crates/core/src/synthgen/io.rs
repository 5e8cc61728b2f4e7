//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json        generator settings, seed, content hash
//! <dir>/annotations.jsonl    {"scene_id": i, "boxes": [[x1, y1, x2, y2, class_id], ...]}
//! <dir>/images/000000.bin    "OMDS1" | u32 channels | u32 height | u32 width | f32 pixels (LE)
//! ```
//!
//! The content hash is SHA-256 over every image file in scene order followed
//! by the annotation file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{scene_seed, Annotation, Dataset, GenConfig, Scene};
use crate::error::{Error, FormatErrorKind, Result};
use crate::tensor::Array;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC_PREFIX: &[u8; 4] = b"OMDS";
const MAGIC: &[u8; 5] = b"OMDS1";
const HEADER_LEN: usize = 5 + 3 * 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub scene_count: usize,
    pub seed: u64,
    pub classes: usize,
    pub families: usize,
    pub subclasses: usize,
    pub delta: f64,
    pub generator: GenConfig,
    pub content_hash: String,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    scene_id: usize,
    boxes: Vec<(f64, f64, f64, f64, usize)>,
    #[serde(default)]
    foreground_pixels: usize,
}

fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("images").join(format!("{id:06}.bin"))
}

fn encode_image(image: &Array) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * image.len());
    out.extend_from_slice(MAGIC);
    for &d in image.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode_image(bytes: &[u8], path: &Path) -> Result<Array> {
    let fail = |kind, detail: &str| Error::format(path, kind, detail);
    if bytes.len() < MAGIC.len() {
        return Err(fail(FormatErrorKind::Truncated, "shorter than the magic bytes"));
    }
    if &bytes[..4] != MAGIC_PREFIX {
        return Err(fail(FormatErrorKind::BadMagic, "not an OMDS image"));
    }
    if bytes[4] != MAGIC[4] {
        return Err(fail(
            FormatErrorKind::VersionMismatch,
            &format!("image version byte {:?}", bytes[4] as char),
        ));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fail(FormatErrorKind::Truncated, "incomplete header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    let body = &bytes[HEADER_LEN..];
    if body.len() < 4 * n {
        return Err(fail(
            FormatErrorKind::Truncated,
            &format!("{} pixel bytes, expected {}", body.len(), 4 * n),
        ));
    }
    if body.len() > 4 * n {
        return Err(fail(FormatErrorKind::Malformed, "trailing bytes after pixels"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Array::new(shape, data)
}

fn encode_annotations(scenes: &[Scene]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in scenes {
        let rec = AnnotationRecord {
            scene_id: s.id,
            boxes: s
                .annotations
                .iter()
                .map(|a| (a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3], a.class_id))
                .collect(),
            foreground_pixels: s.foreground_pixels,
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::contract(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

fn content_hash<'a>(images: impl IntoIterator<Item = &'a [u8]>, annotations: &[u8]) -> String {
    let mut h = Sha256::new();
    for bytes in images {
        h.update(bytes);
    }
    h.update(annotations);
    hex::encode(h.finalize())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `dataset` under `dir` (created if missing) and returns the
/// manifest that was recorded.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let encoded: Vec<Vec<u8>> = dataset.scenes.iter().map(|s| encode_image(&s.image)).collect();
    for (s, bytes) in dataset.scenes.iter().zip(&encoded) {
        write_file(&image_path(dir, s.id), bytes)?;
    }
    let ann = encode_annotations(&dataset.scenes)?;
    write_file(&dir.join("annotations.jsonl"), &ann)?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        scene_count: dataset.scenes.len(),
        seed: dataset.seed,
        classes: dataset.config.classes,
        families: dataset.config.families,
        subclasses: dataset.config.subclasses(),
        delta: dataset.config.delta,
        generator: dataset.config.clone(),
        content_hash: content_hash(encoded.iter().map(Vec::as_slice), &ann),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::contract(e.to_string()))?;
    write_file(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads and fully validates a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = read_file(&manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_slice(&text)
        .map_err(|e| Error::format(&manifest_path, FormatErrorKind::Malformed, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            FormatErrorKind::VersionMismatch,
            format!("format {} (expected {FORMAT_VERSION})", manifest.format_version),
        ));
    }
    let config = manifest.generator.clone();
    config.validate()?;

    let ann_path = dir.join("annotations.jsonl");
    let ann = read_file(&ann_path)?;
    let malformed = |detail: String| Error::format(&ann_path, FormatErrorKind::Malformed, detail);
    let records: Vec<AnnotationRecord> = ann
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).map_err(|e| malformed(e.to_string())))
        .collect::<Result<_>>()?;
    if records.len() != manifest.scene_count {
        return Err(Error::format(
            &ann_path,
            FormatErrorKind::Truncated,
            format!("{} records for {} scenes", records.len(), manifest.scene_count),
        ));
    }

    let mut raw_images = Vec::with_capacity(records.len());
    let mut scenes = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        if rec.scene_id != i {
            return Err(malformed(format!("record {i} has scene_id {}", rec.scene_id)));
        }
        let path = image_path(dir, i);
        let bytes = read_file(&path)?;
        let image = decode_image(&bytes, &path)?;
        raw_images.push(bytes);
        let mut annotations = Vec::with_capacity(rec.boxes.len());
        for (x1, y1, x2, y2, class_id) in rec.boxes {
            if class_id >= config.classes {
                return Err(malformed(format!("class {class_id} out of range")));
            }
            annotations.push(Annotation {
                bbox: [x1, y1, x2, y2],
                class_id,
                family_id: config.family_of(class_id),
            });
        }
        scenes.push(Scene {
            id: i,
            seed: scene_seed(manifest.seed, i),
            image,
            annotations,
            foreground_pixels: rec.foreground_pixels,
        });
    }
    let recomputed = content_hash(raw_images.iter().map(Vec::as_slice), &ann);
    if recomputed != manifest.content_hash {
        return Err(Error::format(
            &manifest_path,
            FormatErrorKind::ChecksumMismatch,
            format!("recorded {}, computed {recomputed}", manifest.content_hash),
        ));
    }
    Ok(Dataset {
        seed: manifest.seed,
        config,
        scenes,
    })
}

/// Recomputes the content hash of a dataset directory without decoding it.
pub fn recompute_hash(dir: &Path, scene_count: usize) -> Result<String> {
    let ann = read_file(&dir.join("annotations.jsonl"))?;
    let images = (0..scene_count)
        .map(|i| read_file(&image_path(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(content_hash(images.iter().map(Vec::as_slice), &ann))
}
