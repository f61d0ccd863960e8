// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset directories and the structured-text annotation format.
//!
//! A dataset directory holds:
//!
//! - `manifest.json`: provenance, vocabulary and size
//! - `records.json`: per-image id, label, scores and, for generated images,
//!   the scene they were rendered from
//! - `images.dump`: one `image/{index}` tensor per record
//! - `masks.dump`: `mask/{index}` tensors for records without a scene

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use csae_core::data::{fuse_annotation, generate_dataset, Dataset, Sample, SceneSpec, CANVAS, IMAGE_SHAPE, NUM_CLASSES};
use csae_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::atomic::{write_atomic, write_dir_atomic};
use crate::dump::{open_dump, write_dump, DumpWriter};
use crate::error::{Result, WorkbenchError};
use crate::provenance::Provenance;

const PLANE: usize = CANVAS * CANVAS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub provenance: Provenance,
    pub vocabulary: Vec<String>,
    pub size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredRecord {
    id: u32,
    label: usize,
    scores: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<SceneSpec>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub size: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |f| {
        let mut w = BufWriter::new(f);
        serde_json::to_writer_pretty(&mut w, value).map_err(WorkbenchError::json("json output"))?;
        w.into_inner().map_err(|e| e.into_error())?;
        Ok(())
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<T> {
    let f = File::open(path).map_err(WorkbenchError::io(path))?;
    serde_json::from_reader(BufReader::new(f)).map_err(WorkbenchError::json(what))
}

pub fn gen_data(out: &Path, seed: u64, size: usize) -> Result<Dataset> {
    let data = generate_dataset(seed, size);
    let provenance = Provenance::new("gen-data", seed, &GenConfig { seed, size });
    save_dataset(out, &data, &provenance)?;
    Ok(data)
}

/// Write `data` as a dataset directory, replacing `dir` atomically.
pub fn save_dataset(dir: &Path, data: &Dataset, provenance: &Provenance) -> Result<()> {
    write_dir_atomic(dir, |tmp| {
        let manifest = Manifest {
            provenance: provenance.clone(),
            vocabulary: data.vocabulary.clone(),
            size: data.len(),
        };
        write_json(&tmp.join("manifest.json"), &manifest)?;
        let records: Vec<StoredRecord> = data
            .samples
            .iter()
            .map(|s| StoredRecord {
                id: s.id,
                label: s.label,
                scores: s.scores.clone(),
                scene: s.scene.clone(),
            })
            .collect();
        write_json(&tmp.join("records.json"), &records)?;

        let names: Vec<String> = (0..data.len()).map(|i| format!("image/{i}")).collect();
        let images: Vec<(&str, &Tensor<f32>)> =
            names.iter().map(String::as_str).zip(data.samples.iter().map(|s| &s.image)).collect();
        write_dump(&tmp.join("images.dump"), &images)?;

        let explicit: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].scene.is_none()).collect();
        if !explicit.is_empty() {
            write_atomic(&tmp.join("masks.dump"), |f| {
                let mut w = DumpWriter::new(BufWriter::new(f), explicit.len() as u64)?;
                for &i in &explicit {
                    w.write(&format!("mask/{i}"), &data.samples[i].pixel_masks)?;
                }
                w.finish()?.into_inner().map_err(|e| e.into_error())?;
                Ok(())
            })?;
        }
        Ok(())
    })
}

fn foreground_of(masks: &Tensor<f32>) -> Vec<bool> {
    let mut fg = vec![false; PLANE];
    for row in masks.data().chunks(PLANE) {
        for (f, &v) in fg.iter_mut().zip(row) {
            *f |= v > 0.0;
        }
    }
    fg
}

fn scene_masks(scene: &SceneSpec, scores: &[f32]) -> Result<Tensor<f32>> {
    let (_, raw) = scene.concept_truth();
    if raw.len() != scores.len() {
        return Err(WorkbenchError::DimensionMismatch {
            field: "scores".into(),
            expected: raw.len().to_string(),
            found: scores.len().to_string(),
        });
    }
    let mut values = Vec::with_capacity(raw.len() * PLANE);
    for (s, m) in scores.iter().zip(&raw) {
        values.extend(fuse_annotation(*s, m));
    }
    Ok(Tensor::new(&[raw.len(), PLANE], values)?)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join("manifest.json"), "dataset manifest")
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let records: Vec<StoredRecord> = read_json(&dir.join("records.json"), "dataset records")?;
    if records.len() != manifest.size {
        return Err(WorkbenchError::DimensionMismatch {
            field: "size".into(),
            expected: manifest.size.to_string(),
            found: records.len().to_string(),
        });
    }
    let n = manifest.vocabulary.len();
    let mut images = Vec::with_capacity(records.len());
    for (i, rec) in open_dump(&dir.join("images.dump"))?.enumerate() {
        let (name, t) = rec?;
        if name != format!("image/{i}") {
            return Err(WorkbenchError::Malformed {
                what: "images.dump",
                detail: format!("record #{i} is `{name}`, expected `image/{i}`"),
            });
        }
        if t.shape() != IMAGE_SHAPE {
            return Err(WorkbenchError::DimensionMismatch {
                field: name,
                expected: format!("{IMAGE_SHAPE:?}"),
                found: format!("{:?}", t.shape()),
            });
        }
        images.push(t);
    }
    if images.len() != records.len() {
        return Err(WorkbenchError::MissingRecord(format!("image/{}", images.len())));
    }
    let mut masks: Vec<Option<Tensor<f32>>> = vec![None; records.len()];
    let masks_path = dir.join("masks.dump");
    if masks_path.exists() {
        for rec in open_dump(&masks_path)? {
            let (name, t) = rec?;
            let index = name
                .strip_prefix("mask/")
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&i| i < records.len())
                .ok_or_else(|| WorkbenchError::Malformed {
                    what: "masks.dump",
                    detail: format!("unexpected record `{name}`"),
                })?;
            if t.shape() != [n, PLANE] {
                return Err(WorkbenchError::DimensionMismatch {
                    field: name,
                    expected: format!("[{n}, {PLANE}]"),
                    found: format!("{:?}", t.shape()),
                });
            }
            masks[index] = Some(t);
        }
    }
    let mut samples = Vec::with_capacity(records.len());
    for ((i, rec), image) in records.into_iter().enumerate().zip(images) {
        if rec.scores.len() != n {
            return Err(WorkbenchError::Annotation {
                id: rec.id as u64,
                detail: format!("{} scores for {n} concepts", rec.scores.len()),
            });
        }
        let pixel_masks = match (&rec.scene, masks[i].take()) {
            (Some(scene), _) => scene_masks(scene, &rec.scores)?,
            (None, Some(m)) => m,
            (None, None) => return Err(WorkbenchError::MissingRecord(format!("mask/{i}"))),
        };
        let foreground = match &rec.scene {
            Some(scene) => scene.foreground(),
            None => foreground_of(&pixel_masks),
        };
        samples.push(Sample {
            id: rec.id,
            image,
            label: rec.label,
            scene: rec.scene,
            foreground,
            scores: rec.scores,
            pixel_masks,
        });
    }
    Ok(Dataset {
        vocabulary: manifest.vocabulary,
        samples,
    })
}

/// `M` as stored in an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskArray {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    #[serde(rename = "S")]
    pub scores: Vec<f32>,
    #[serde(rename = "M")]
    pub masks: MaskArray,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub vocabulary: Vec<String>,
    pub records: Vec<AnnotationRecord>,
}

impl AnnotationFile {
    pub fn from_dataset(data: &Dataset) -> Self {
        Self {
            vocabulary: data.vocabulary.clone(),
            records: data
                .samples
                .iter()
                .map(|s| AnnotationRecord {
                    id: s.id as u64,
                    scores: s.scores.clone(),
                    masks: MaskArray {
                        dims: s.pixel_masks.shape().to_vec(),
                        values: s.pixel_masks.data().to_vec(),
                    },
                    label: s.label,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vocabulary.len();
        if n == 0 {
            return Err(WorkbenchError::Malformed {
                what: "annotation file",
                detail: "empty vocabulary".into(),
            });
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            let bad = |detail: String| Err(WorkbenchError::Annotation { id: r.id, detail });
            if !seen.insert(r.id) {
                return bad("duplicate id".into());
            }
            if r.id > u32::MAX as u64 {
                return bad("id does not fit in 32 bits".into());
            }
            if r.scores.len() != n {
                return bad(format!("S has {} values, vocabulary has {n}", r.scores.len()));
            }
            if r.masks.dims != [n, PLANE] {
                return bad(format!("M dims {:?}, expected [{n}, {PLANE}]", r.masks.dims));
            }
            if r.masks.values.len() != n * PLANE {
                return bad(format!("M has {} values for dims {:?}", r.masks.values.len(), r.masks.dims));
            }
            if let Some(v) = r.scores.iter().chain(&r.masks.values).find(|v| !(0.0..=1.0).contains(*v)) {
                return bad(format!("value {v} outside [0, 1]"));
            }
            if r.label >= NUM_CLASSES {
                return bad(format!("label {} out of range", r.label));
            }
        }
        Ok(())
    }

    /// Pair validated annotations with `images`, in record order.
    pub fn into_dataset(self, images: Vec<Tensor<f32>>) -> Result<Dataset> {
        self.validate()?;
        if images.len() != self.records.len() {
            return Err(WorkbenchError::DimensionMismatch {
                field: "images".into(),
                expected: self.records.len().to_string(),
                found: images.len().to_string(),
            });
        }
        let n = self.vocabulary.len();
        let mut samples = Vec::with_capacity(images.len());
        for (r, image) in self.records.into_iter().zip(images) {
            let mut values = Vec::with_capacity(n * PLANE);
            for (s, m) in r.scores.iter().zip(r.masks.values.chunks(PLANE)) {
                values.extend(fuse_annotation(*s, m));
            }
            let pixel_masks = Tensor::new(&[n, PLANE], values)?;
            samples.push(Sample {
                id: r.id as u32,
                image,
                label: r.label,
                scene: None,
                foreground: foreground_of(&pixel_masks),
                scores: r.scores,
                pixel_masks,
            });
        }
        Ok(Dataset {
            vocabulary: self.vocabulary,
            samples,
        })
    }
}

pub fn export_annotations(data: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, |f| {
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, &AnnotationFile::from_dataset(data)).map_err(WorkbenchError::json("annotation file"))?;
        w.into_inner().map_err(|e| e.into_error())?;
        Ok(())
    })
}

pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    read_json(path, "annotation file")
}

/// Images for an import, one `image/{id}` record per annotation id.
pub fn read_images_for(file: &AnnotationFile, images: &Path) -> Result<Vec<Tensor<f32>>> {
    let mut by_name: std::collections::BTreeMap<String, Tensor<f32>> = std::collections::BTreeMap::new();
    for rec in open_dump(images)? {
        let (name, t) = rec?;
        by_name.insert(name, t);
    }
    file.records
        .iter()
        .map(|r| {
            let name = format!("image/{}", r.id);
            let t = by_name.remove(&name).ok_or_else(|| WorkbenchError::MissingRecord(name.clone()))?;
            if t.shape() != IMAGE_SHAPE {
                return Err(WorkbenchError::DimensionMismatch {
                    field: name,
                    expected: format!("{IMAGE_SHAPE:?}"),
                    found: format!("{:?}", t.shape()),
                });
            }
            Ok(t)
        })
        .collect()
}

/// Write the images of `data` keyed by sample id, the companion of an
/// exported annotation file.
pub fn export_images(data: &Dataset, path: &Path) -> Result<()> {
    let names: Vec<String> = data.samples.iter().map(|s| format!("image/{}", s.id)).collect();
    let records: Vec<(&str, &Tensor<f32>)> =
        names.iter().map(String::as_str).zip(data.samples.iter().map(|s| &s.image)).collect();
    write_dump(path, &records)
}
