//! JSON-lines dataset files.
//!
//! One sample per line:
//!
//! ```json
//! {"schema_version": "radsurv-1", "id": "s000001",
//!  "image": {"grid": {"height": 224, "width": 224, "b64": "..."}},
//!  "boxes": [[x1, y1, x2, y2], ...29], "detected": [true, ...29],
//!  "report": ["...", "...", "...", "...", "..."],
//!  "survival": {"time_days": 31.5, "event": true},
//!  "clinical": [...], "meta": {...}}
//! ```
//!
//! The image is either an inline little-endian `f32` grid encoded as base64,
//! or `{"png": "relative/or/absolute/path.png"}` (8-bit grayscale, scaled to
//! `[0,1]`). `detected` and `meta` are optional.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::types::*;
use super::SCHEMA_VERSION;
use crate::error::{Error, Result};

/// What a dataset file is expected to contain.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub schema_version: String,
    pub image_size: (usize, usize),
    pub clinical_dim: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            schema_version: SCHEMA_VERSION.to_string(),
            image_size: (224, 224),
            clinical_dim: super::DEFAULT_CLINICAL_DIM,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRecord {
    height: usize,
    width: usize,
    b64: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum ImageRecord {
    Png(String),
    Grid(GridRecord),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurvivalLabel {
    time_days: f64,
    event: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    schema_version: String,
    id: String,
    image: ImageRecord,
    boxes: Vec<[f32; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    detected: Option<Vec<bool>>,
    report: Vec<String>,
    survival: SurvivalLabel,
    clinical: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<SampleMeta>,
}

/// How images are written by [`save_dataset`].
#[derive(Clone, Debug)]
pub enum ImageStorage {
    /// Inline base64 `f32` grid; round-trips bit-exactly.
    Grid,
    /// 8-bit PNG files written into this directory, referenced relative to
    /// the dataset file when possible.
    Png(PathBuf),
}

pub fn encode_grid(image: &Radiograph) -> String {
    let mut bytes = Vec::with_capacity(image.pixels.len() * 4);
    for p in &image.pixels {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_grid(height: usize, width: usize, b64: &str) -> std::result::Result<Radiograph, String> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(|e| format!("bad base64 image: {e}"))?;
    if bytes.len() != height * width * 4 {
        return Err(format!("image grid holds {} bytes, expected {}", bytes.len(), height * width * 4));
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Radiograph { height, width, pixels })
}

pub fn read_png(path: &Path) -> Result<Radiograph> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Radiograph::new(h as usize, w as usize, pixels)
}

pub fn write_png(path: &Path, image: &Radiograph) -> Result<()> {
    let raw: Vec<u8> = image
        .pixels
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(image.width as u32, image.height as u32, raw)
        .ok_or_else(|| Error::shape("png buffer size"))?;
    buf.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn record_to_sample(rec: SampleRecord, base: &Path, spec: &DatasetSpec, line: usize) -> Result<CohortSample> {
    let parse = |msg: String| Error::Parse { line, msg };
    if rec.schema_version != spec.schema_version {
        return Err(parse(format!(
            "unknown schema_version {:?} (expected {:?})",
            rec.schema_version, spec.schema_version
        )));
    }
    let image = match rec.image {
        ImageRecord::Grid(g) => decode_grid(g.height, g.width, &g.b64).map_err(parse)?,
        ImageRecord::Png(p) => {
            let p = PathBuf::from(p);
            let full = if p.is_absolute() { p } else { base.join(p) };
            read_png(&full).map_err(|e| parse(e.to_string()))?
        }
    };
    if rec.boxes.len() != NUM_REGIONS {
        return Err(parse(format!("{} boxes, expected {NUM_REGIONS}", rec.boxes.len())));
    }
    let detected = rec.detected.unwrap_or_else(|| vec![true; NUM_REGIONS]);
    if detected.len() != NUM_REGIONS {
        return Err(parse(format!("{} detection flags, expected {NUM_REGIONS}", detected.len())));
    }
    let sentences: [String; NUM_SENTENCES] = rec
        .report
        .try_into()
        .map_err(|r: Vec<String>| parse(format!("{} report sentences, expected {NUM_SENTENCES}", r.len())))?;
    let mut boxes = [BoundingBox::MASK; NUM_REGIONS];
    for (slot, b) in boxes.iter_mut().zip(&rec.boxes) {
        *slot = BoundingBox::from(*b);
    }
    let sample = CohortSample {
        id: rec.id,
        image,
        regions: RegionSet { boxes, detected: detected.try_into().expect("length checked") },
        report: StructuredReport::new(sentences),
        survival: SurvivalRecord {
            time_days: rec.survival.time_days,
            event: rec.survival.event,
            clinical: rec.clinical,
        },
        meta: rec.meta,
    };
    sample.validate(spec.image_size, spec.clinical_dim)?;
    Ok(sample)
}

/// Reads a JSON-lines dataset with the default image size and clinical width.
pub fn load_dataset(path: &Path, schema_version: &str) -> Result<Vec<CohortSample>> {
    let spec = DatasetSpec { schema_version: schema_version.to_string(), ..Default::default() };
    load_dataset_with(path, &spec)
}

/// Reads a JSON-lines dataset, validating every sample and returning them
/// sorted by id.
pub fn load_dataset_with(path: &Path, spec: &DatasetSpec) -> Result<Vec<CohortSample>> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        samples.push(record_to_sample(rec, &base, spec, line_no)?);
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = samples.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Validation { id: w[0].id.clone(), msg: "duplicate sample id".into() });
    }
    Ok(samples)
}

pub fn save_dataset(path: &Path, samples: &[CohortSample], storage: &ImageStorage) -> Result<()> {
    if let ImageStorage::Png(dir) = storage {
        std::fs::create_dir_all(dir)?;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        let image = match storage {
            ImageStorage::Grid => ImageRecord::Grid(GridRecord {
                height: s.image.height,
                width: s.image.width,
                b64: encode_grid(&s.image),
            }),
            ImageStorage::Png(dir) => {
                let file = dir.join(format!("{}.png", s.id));
                write_png(&file, &s.image)?;
                let rel = file.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(file);
                ImageRecord::Png(rel.to_string_lossy().into_owned())
            }
        };
        let rec = SampleRecord {
            schema_version: SCHEMA_VERSION.to_string(),
            id: s.id.clone(),
            image,
            boxes: s.regions.boxes.iter().map(|b| b.to_array()).collect(),
            detected: (!s.regions.is_complete()).then(|| s.regions.detected.to_vec()),
            report: s.report.sentences.to_vec(),
            survival: SurvivalLabel { time_days: s.survival.time_days, event: s.survival.event },
            clinical: s.survival.clinical.clone(),
            meta: s.meta.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a standalone clinical covariate file: a JSON array of numbers, or an
/// object `{"schema_version": ..., "clinical": [...]}`.
pub fn load_clinical(path: &Path) -> Result<Vec<f32>> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
    let arr = match &value {
        serde_json::Value::Array(a) => a.clone(),
        serde_json::Value::Object(o) => {
            if let Some(v) = o.get("schema_version").and_then(|v| v.as_str()) {
                if v != SCHEMA_VERSION {
                    return Err(Error::Data(format!("unknown schema_version {v:?}")));
                }
            }
            o.get("clinical")
                .and_then(|v| v.as_array())
                .cloned()
                .ok_or_else(|| Error::Data("missing \"clinical\" array".into()))?
        }
        _ => return Err(Error::Data("clinical file must be an array or object".into())),
    };
    arr.iter()
        .map(|v| v.as_f64().map(|x| x as f32).ok_or_else(|| Error::Data(format!("non-numeric covariate {v}"))))
        .collect()
}
