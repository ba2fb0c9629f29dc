//! Dataset directory format.
//!
//! `meta.json` holds the vocabulary, the dataset mode and a split manifest;
//! each split is a line-delimited JSON file with one record per sample.
//! Grids are embedded as `{ "shape": [...], "dtype": ..., "data": base64 }`
//! where `dtype` is `f32le` (appearance, shape `[H, W, C]`) or `u16le`
//! (panoptic maps, shape `[H, W]`).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetSummary, Sample, SplitName};
use super::grid::{BBox, Grid};
use super::refs::{DatasetMode, RefExpression};
use super::scene::{Instance, InstanceId, Scene, NO_INSTANCE};
use super::vocab::CategoryVocabulary;
use super::WorldError;

pub const FORMAT_NAME: &str = "scenereg-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: SplitName,
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub format_version: u32,
    pub vocabulary: CategoryVocabulary,
    /// When present, must equal the fingerprint of `vocabulary`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary_fingerprint: Option<String>,
    pub mode: DatasetMode,
    pub splits: Vec<SplitEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRecord {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: InstanceId,
    pub category: u16,
    pub bbox: [usize; 4],
    pub color: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub width: usize,
    pub height: usize,
    pub template: String,
    pub instances: Vec<InstanceRecord>,
    pub appearance: GridRecord,
    pub panoptic_category: GridRecord,
    pub panoptic_instance: GridRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub target: InstanceId,
    #[serde(default)]
    pub flagged: bool,
    pub references: Vec<Vec<String>>,
    pub scene: SceneRecord,
}

fn encode_f32(g: &Grid<f32>) -> GridRecord {
    let bytes: Vec<u8> = g.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    GridRecord {
        shape: vec![g.height, g.width, g.channels],
        dtype: "f32le".into(),
        data: B64.encode(bytes),
    }
}

fn encode_u16(g: &Grid<u16>) -> GridRecord {
    let bytes: Vec<u8> = g.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    GridRecord {
        shape: vec![g.height, g.width],
        dtype: "u16le".into(),
        data: B64.encode(bytes),
    }
}

fn decode_bytes(r: &GridRecord, dtype: &str, rank: usize, width: usize) -> Result<(Vec<u8>, usize, usize, usize), String> {
    if r.dtype != dtype {
        return Err(format!("expected dtype {dtype}, got {}", r.dtype));
    }
    if r.shape.len() != rank {
        return Err(format!("expected rank-{rank} shape, got {:?}", r.shape));
    }
    let (h, w, c) = (r.shape[0], r.shape[1], if rank == 3 { r.shape[2] } else { 1 });
    let bytes = B64.decode(&r.data).map_err(|e| format!("base64: {e}"))?;
    let want = h * w * c * width;
    if bytes.len() != want {
        return Err(format!(
            "grid payload has {} bytes, shape {:?} needs {want}",
            bytes.len(),
            r.shape
        ));
    }
    Ok((bytes, h, w, c))
}

fn decode_f32(r: &GridRecord) -> Result<Grid<f32>, String> {
    let (bytes, h, w, c) = decode_bytes(r, "f32le", 3, 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Grid {
        width: w,
        height: h,
        channels: c,
        data,
    })
}

fn decode_u16(r: &GridRecord) -> Result<Grid<u16>, String> {
    let (bytes, h, w, _) = decode_bytes(r, "u16le", 2, 2)?;
    let data = bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Grid {
        width: w,
        height: h,
        channels: 1,
        data,
    })
}

impl SampleRecord {
    pub fn from_sample(s: &Sample) -> Self {
        let sc = &s.scene;
        Self {
            id: s.id.clone(),
            target: s.target,
            flagged: s.flagged,
            references: s.reference_tokens(),
            scene: SceneRecord {
                width: sc.width,
                height: sc.height,
                template: sc.template_name.clone(),
                instances: sc
                    .instances
                    .iter()
                    .map(|i| InstanceRecord {
                        instance_id: i.instance_id,
                        category: i.category,
                        bbox: i.bbox.into(),
                        color: i.color_attr.clone(),
                    })
                    .collect(),
                appearance: encode_f32(&sc.appearance),
                panoptic_category: encode_u16(&sc.panoptic_category),
                panoptic_instance: encode_u16(&sc.panoptic_instance),
            },
        }
    }

    /// Validates the record against the vocabulary and rebuilds the sample.
    pub fn into_sample(self, vocab: &CategoryVocabulary) -> Result<Sample, String> {
        let r = self.scene;
        let appearance = decode_f32(&r.appearance)?;
        let panoptic_category = decode_u16(&r.panoptic_category)?;
        let panoptic_instance = decode_u16(&r.panoptic_instance)?;
        for (name, (w, h)) in [
            ("appearance", (appearance.width, appearance.height)),
            ("panoptic_category", (panoptic_category.width, panoptic_category.height)),
            ("panoptic_instance", (panoptic_instance.width, panoptic_instance.height)),
        ] {
            if (w, h) != (r.width, r.height) {
                return Err(format!("{name} is {w}×{h}, scene is {}×{}", r.width, r.height));
            }
        }
        if appearance.channels != vocab.channels() {
            return Err(format!(
                "appearance has {} channels, vocabulary colors have {}",
                appearance.channels,
                vocab.channels()
            ));
        }
        if let Some(&bad) = panoptic_category.data.iter().find(|&&c| c as usize >= vocab.len()) {
            return Err(format!("category id {bad} outside vocabulary of {}", vocab.len()));
        }
        let mut instances = Vec::with_capacity(r.instances.len());
        for i in r.instances {
            let bbox = BBox::from(i.bbox);
            if !bbox.is_valid_in(r.width, r.height) {
                return Err(format!("instance {} bbox {:?} outside scene", i.instance_id, i.bbox));
            }
            if i.category as usize >= vocab.len() {
                return Err(format!("instance {} category {} outside vocabulary", i.instance_id, i.category));
            }
            instances.push(Instance {
                instance_id: i.instance_id,
                category: i.category,
                bbox,
                color_attr: i.color,
            });
        }
        for &id in &panoptic_instance.data {
            if id != NO_INSTANCE && !instances.iter().any(|i| i.instance_id == id) {
                return Err(format!("panoptic map references unknown instance {id}"));
            }
        }
        if !instances.iter().any(|i| i.instance_id == self.target) {
            return Err(format!("target {} not among instances", self.target));
        }
        if self.references.is_empty() || self.references.iter().any(Vec::is_empty) {
            return Err("sample needs at least one nonempty reference".into());
        }
        let references = self
            .references
            .into_iter()
            .map(|tokens| RefExpression {
                tokens,
                target_instance: self.target,
            })
            .collect();
        Ok(Sample {
            id: self.id,
            scene: Scene {
                width: r.width,
                height: r.height,
                appearance,
                panoptic_category,
                panoptic_instance,
                instances,
                template_name: r.template,
            },
            target: self.target,
            references,
            flagged: self.flagged,
        })
    }
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), WorldError> {
    fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    for (&name, samples) in &ds.splits {
        let file = format!("{name}.jsonl");
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        for s in samples {
            serde_json::to_writer(&mut w, &SampleRecord::from_sample(s))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        splits.push(SplitEntry {
            name,
            file,
            count: samples.len(),
        });
    }
    let meta = DatasetMeta {
        format: FORMAT_NAME.into(),
        format_version: FORMAT_VERSION,
        vocabulary: ds.vocabulary.clone(),
        vocabulary_fingerprint: Some(ds.vocabulary.fingerprint()),
        mode: ds.mode,
        splits,
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_vec_pretty(&DatasetSummary::of(ds))?,
    )?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta, WorldError> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path)?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| WorldError::Parse {
        file: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT_NAME) || version != Some(FORMAT_VERSION as u64) {
        return Err(WorldError::Version(format!(
            "{} declares format {:?} version {:?}, expected {FORMAT_NAME} version {FORMAT_VERSION}",
            path.display(),
            raw.get("format"),
            version
        )));
    }
    let meta: DatasetMeta = serde_json::from_value(raw).map_err(|e| WorldError::Parse {
        file: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    if let Some(fp) = &meta.vocabulary_fingerprint {
        let actual = meta.vocabulary.fingerprint();
        if *fp != actual {
            return Err(WorldError::Version(format!(
                "vocabulary fingerprint mismatch: file says {fp}, vocabulary hashes to {actual}"
            )));
        }
    }
    meta.vocabulary.validate()?;
    Ok(meta)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, WorldError> {
    let meta = load_meta(dir)?;
    let mut splits = BTreeMap::new();
    for entry in &meta.splits {
        let path = dir.join(&entry.file);
        let file = path.display().to_string();
        let reader = BufReader::new(fs::File::open(&path)?);
        let mut samples = Vec::with_capacity(entry.count);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| WorldError::Parse {
                file: file.clone(),
                line: i + 1,
                msg,
            };
            let rec: SampleRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(format!("column {}: {e}", e.column())))?;
            samples.push(rec.into_sample(&meta.vocabulary).map_err(parse_err)?);
        }
        if samples.len() != entry.count {
            return Err(WorldError::Parse {
                file,
                line: samples.len(),
                msg: format!("manifest lists {} samples, file has {}", entry.count, samples.len()),
            });
        }
        splits.insert(entry.name, samples);
    }
    Ok(Dataset {
        vocabulary: meta.vocabulary,
        mode: meta.mode,
        splits,
    })
}

/// Loads and additionally requires the vocabulary to match `expected`.
pub fn load_dataset_with_vocabulary(dir: &Path, expected: &CategoryVocabulary) -> Result<Dataset, WorldError> {
    let ds = load_dataset(dir)?;
    if ds.vocabulary != *expected {
        return Err(WorldError::Version(format!(
            "dataset vocabulary {} does not match expected {}",
            ds.vocabulary.fingerprint(),
            expected.fingerprint()
        )));
    }
    Ok(ds)
}
