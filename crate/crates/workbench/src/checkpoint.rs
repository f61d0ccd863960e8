// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint container for trained SAEs and target models.
//!
//! ```text
//! magic (4 bytes) | version u32 | section count u32
//! per section: tag (4 bytes) | length u64 | bytes | crc32 u32
//! ```
//!
//! Sections are `META` (JSON) followed by `TENS` (a tensor dump).

use std::collections::BTreeMap;
use std::path::Path;

use csae_core::aggregator::{AggregatorDims, AggregatorParams};
use csae_core::free::FreeParams;
use csae_core::model::{AdversarialSet, Layer, TargetModel};
use csae_core::pipeline::{FeatureStats, LayerSae, PipelineConfig, SaeCheckpoint, StageRecord};
use csae_core::tokenizer::{TokenizerDims, TokenizerParams};
use csae_core::{Parameters, Tensor};
use serde::{Deserialize, Serialize};

use crate::atomic::write_bytes_atomic;
use crate::dump::{decode_dump, encode_dump};
use crate::error::{Result, WorkbenchError};
use crate::provenance::Provenance;

pub const SAE_MAGIC: &[u8; 4] = b"CSCK";
pub const MODEL_MAGIC: &[u8; 4] = b"CSTM";
pub const CONTAINER_VERSION: u32 = 1;

const TOKENIZER_FIELDS: [&str; 7] = ["w_merge", "proj", "proj_bias", "w_score", "b_score", "w_seg", "b_seg"];
const AGGREGATOR_FIELDS: [&str; 7] = ["mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "decoder", "decoder_bias", "w_aggr"];

fn encode_container(magic: &[u8; 4], sections: &[(&[u8; 4], &[u8])]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (tag, body) in sections {
        out.extend_from_slice(&tag[..]);
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(body);
        let mut crc = crc32fast::Hasher::new();
        crc.update(&tag[..]);
        crc.update(body);
        out.extend_from_slice(&crc.finalize().to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64, context: impl FnOnce() -> String) -> Result<&'a [u8]> {
        let left = (self.bytes.len() - self.pos) as u64;
        if n > left {
            return Err(WorkbenchError::Truncated {
                context: context(),
                expected: n,
                actual: left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }
}

fn decode_container<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    what: &'static str,
) -> Result<BTreeMap<[u8; 4], &'a [u8]>> {
    let head = bytes.get(..4).unwrap_or(bytes);
    if head != &magic[..head.len()] || head.is_empty() {
        return Err(WorkbenchError::BadMagic {
            expected: what,
            found: head.to_vec(),
        });
    }
    let mut c = Cursor { bytes, pos: 0 };
    let header = c.take(12, || "container header".into())?;
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version == 0 || version > CONTAINER_VERSION {
        return Err(WorkbenchError::UnsupportedVersion {
            found: version,
            supported: CONTAINER_VERSION,
        });
    }
    let count = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let mut out = BTreeMap::new();
    for i in 0..count {
        let tag: [u8; 4] = c.take(4, || format!("section #{i} tag"))?.try_into().unwrap();
        let label = String::from_utf8_lossy(&tag).into_owned();
        let len = u64::from_le_bytes(c.take(8, || format!("section {label} length"))?.try_into().unwrap());
        let body = c.take(len, || format!("section {label}"))?;
        let stored = u32::from_le_bytes(c.take(4, || format!("section {label} checksum"))?.try_into().unwrap());
        let mut crc = crc32fast::Hasher::new();
        crc.update(&tag);
        crc.update(body);
        if crc.finalize() != stored {
            return Err(WorkbenchError::Checksum(format!("section {label}")));
        }
        out.insert(tag, body);
    }
    if c.pos != bytes.len() {
        return Err(WorkbenchError::TrailingData((bytes.len() - c.pos) as u64));
    }
    Ok(out)
}

fn section<'a>(map: &BTreeMap<[u8; 4], &'a [u8]>, tag: &[u8; 4]) -> Result<&'a [u8]> {
    map.get(tag)
        .copied()
        .ok_or_else(|| WorkbenchError::MissingRecord(format!("section {}", String::from_utf8_lossy(tag))))
}

struct Tensors(BTreeMap<String, Tensor<f32>>);

impl Tensors {
    fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(Self(decode_dump(bytes)?.into_iter().collect()))
    }

    /// Remove `name`, requiring the shape of `like`.
    fn take(&mut self, name: &str, like: &[usize]) -> Result<Tensor<f32>> {
        let t = self.0.remove(name).ok_or_else(|| WorkbenchError::MissingRecord(name.to_owned()))?;
        if t.shape() != like {
            return Err(WorkbenchError::DimensionMismatch {
                field: name.to_owned(),
                expected: format!("{like:?}"),
                found: format!("{:?}", t.shape()),
            });
        }
        Ok(t)
    }

    fn fill(&mut self, prefix: &str, fields: &[&str], target: &mut dyn Parameters<f32>) -> Result<()> {
        for (field, slot) in fields.iter().zip(target.tensors_mut()) {
            let shape = slot.shape().to_vec();
            *slot = self.take(&format!("{prefix}/{field}"), &shape)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.0.into_keys().next() {
            Some(extra) => Err(WorkbenchError::Malformed {
                what: "checkpoint",
                detail: format!("unexpected tensor `{extra}`"),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerMeta {
    layer: usize,
    height: usize,
    width: usize,
    channels: usize,
    stats: bool,
    tokenizer: bool,
    aggregator: bool,
    free: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaeMeta {
    pub provenance: Option<Provenance>,
    pub config: PipelineConfig,
    pub concepts: usize,
    pub stages_done: [bool; 3],
    layers: Vec<LayerMeta>,
    pub metrics: Vec<StageRecord>,
    pub model_fingerprint: u64,
    /// Checksum of the parameters, verified after loading.
    pub fingerprint: u64,
}

fn push_params<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, prefix: &str, fields: &[&str], p: &'a dyn Parameters<f32>) {
    for (f, t) in fields.iter().zip(p.tensors()) {
        out.push((format!("{prefix}/{f}"), t));
    }
}

pub fn encode_sae(ckpt: &SaeCheckpoint, provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
    let mut owned: Vec<(String, Tensor<f32>)> = Vec::new();
    for l in &ckpt.layers {
        let p = format!("layer{}", l.layer);
        if let Some(s) = &l.stats {
            owned.push((format!("{p}/stats/mean"), Tensor::new(&[s.mean.len()], s.mean.clone())?));
            owned.push((format!("{p}/stats/scale"), Tensor::new(&[s.scale.len()], s.scale.clone())?));
        }
        if let Some(t) = &l.tokenizer {
            push_params(&mut named, &format!("{p}/tokenizer"), &TOKENIZER_FIELDS, t);
        }
        if let Some(a) = &l.aggregator {
            push_params(&mut named, &format!("{p}/aggregator"), &AGGREGATOR_FIELDS, a);
        }
        if let Some(f) = &l.free {
            push_params(&mut named, &format!("{p}/free/tokenizer"), &TOKENIZER_FIELDS, &f.tokenizer);
            push_params(&mut named, &format!("{p}/free/aggregator"), &AGGREGATOR_FIELDS, &f.aggregator);
        }
    }
    let mut records: Vec<(&str, &Tensor<f32>)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
    records.extend(named.iter().map(|(n, t)| (n.as_str(), *t)));
    let meta = SaeMeta {
        provenance: provenance.cloned(),
        config: ckpt.config.clone(),
        concepts: ckpt.concepts,
        stages_done: ckpt.stages_done,
        layers: ckpt
            .layers
            .iter()
            .map(|l| LayerMeta {
                layer: l.layer,
                height: l.height,
                width: l.width,
                channels: l.channels,
                stats: l.stats.is_some(),
                tokenizer: l.tokenizer.is_some(),
                aggregator: l.aggregator.is_some(),
                free: l.free.is_some(),
            })
            .collect(),
        metrics: ckpt.metrics.clone(),
        model_fingerprint: ckpt.model_fingerprint,
        fingerprint: ckpt.fingerprint(),
    };
    let meta = serde_json::to_vec_pretty(&meta).map_err(WorkbenchError::json("checkpoint metadata"))?;
    let tensors = encode_dump(&records)?;
    Ok(encode_container(SAE_MAGIC, &[(b"META", &meta), (b"TENS", &tensors)]))
}

pub fn decode_sae(bytes: &[u8]) -> Result<(SaeCheckpoint, Option<Provenance>)> {
    let sections = decode_container(bytes, SAE_MAGIC, "SAE checkpoint")?;
    let meta: SaeMeta =
        serde_json::from_slice(section(&sections, b"META")?).map_err(WorkbenchError::json("checkpoint metadata"))?;
    let mut tensors = Tensors::decode(section(&sections, b"TENS")?)?;
    let c = &meta.config;
    let mut layers = Vec::new();
    for lm in &meta.layers {
        let p = format!("layer{}", lm.layer);
        let positions = lm.height * lm.width;
        let tok = TokenizerDims {
            concepts: meta.concepts,
            positions,
            channels: lm.channels,
            embed: c.embed_dim,
            mask: positions,
        };
        let agg = |t: TokenizerDims| AggregatorDims {
            concepts: t.concepts,
            positions: t.positions,
            channels: t.channels,
            mask: t.mask,
            hidden: c.hidden_dim,
        };
        let stats = if lm.stats {
            let mean = tensors.take(&format!("{p}/stats/mean"), &[lm.channels])?.into_data();
            let scale = tensors.take(&format!("{p}/stats/scale"), &[lm.channels])?.into_data();
            Some(FeatureStats { mean, scale })
        } else {
            None
        };
        let tokenizer = if lm.tokenizer {
            let mut t = TokenizerParams::zeros(tok);
            tensors.fill(&format!("{p}/tokenizer"), &TOKENIZER_FIELDS, &mut t)?;
            Some(t)
        } else {
            None
        };
        let aggregator = if lm.aggregator {
            let mut a = AggregatorParams::zeros(agg(tok));
            tensors.fill(&format!("{p}/aggregator"), &AGGREGATOR_FIELDS, &mut a)?;
            Some(a)
        } else {
            None
        };
        let free = if lm.free {
            let ft = TokenizerDims {
                concepts: c.free_tokens,
                ..tok
            };
            let mut f = FreeParams {
                tokenizer: TokenizerParams::zeros(ft),
                aggregator: AggregatorParams::zeros(agg(ft)),
            };
            tensors.fill(&format!("{p}/free/tokenizer"), &TOKENIZER_FIELDS, &mut f.tokenizer)?;
            tensors.fill(&format!("{p}/free/aggregator"), &AGGREGATOR_FIELDS, &mut f.aggregator)?;
            Some(f)
        } else {
            None
        };
        layers.push(LayerSae {
            layer: lm.layer,
            height: lm.height,
            width: lm.width,
            channels: lm.channels,
            stats,
            tokenizer,
            aggregator,
            free,
        });
    }
    tensors.finish()?;
    let ckpt = SaeCheckpoint {
        config: meta.config.clone(),
        concepts: meta.concepts,
        stages_done: meta.stages_done,
        layers,
        metrics: meta.metrics.clone(),
        model_fingerprint: meta.model_fingerprint,
    };
    ckpt.validate()?;
    if ckpt.fingerprint() != meta.fingerprint {
        return Err(WorkbenchError::Checksum("checkpoint parameters".into()));
    }
    Ok((ckpt, meta.provenance))
}

/// Reject a checkpoint whose structure differs from what `config` and
/// `concepts` would produce.
pub fn ensure_compatible(ckpt: &SaeCheckpoint, config: &PipelineConfig, concepts: usize) -> Result<()> {
    let mismatch = |field: &str, expected: String, found: String| {
        Err(WorkbenchError::DimensionMismatch {
            field: field.to_owned(),
            expected,
            found,
        })
    };
    if ckpt.concepts != concepts {
        return mismatch("concepts", concepts.to_string(), ckpt.concepts.to_string());
    }
    let c = &ckpt.config;
    for (field, want, have) in [
        ("free_tokens", config.free_tokens, c.free_tokens),
        ("embed_dim", config.embed_dim, c.embed_dim),
        ("hidden_dim", config.hidden_dim, c.hidden_dim),
    ] {
        if want != have {
            return mismatch(field, want.to_string(), have.to_string());
        }
    }
    if config.taps != c.taps {
        return mismatch("taps", format!("{:?}", config.taps), format!("{:?}", c.taps));
    }
    Ok(())
}

pub fn save_sae(path: &Path, ckpt: &SaeCheckpoint, provenance: Option<&Provenance>) -> Result<()> {
    write_bytes_atomic(path, &encode_sae(ckpt, provenance)?)
}

pub fn load_sae(path: &Path) -> Result<(SaeCheckpoint, Option<Provenance>)> {
    decode_sae(&std::fs::read(path).map_err(WorkbenchError::io(path))?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub provenance: Option<Provenance>,
    pub layers: Vec<String>,
    pub tap_points: Vec<usize>,
    pub num_classes: usize,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub fingerprint: u64,
}

pub fn encode_model(model: &TargetModel, provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let mut named = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        match l {
            Layer::Conv { kernel, bias } => {
                named.push((format!("layer{i}/kernel"), kernel));
                named.push((format!("layer{i}/bias"), bias));
            }
            Layer::Dense { weight, bias } => {
                named.push((format!("layer{i}/weight"), weight));
                named.push((format!("layer{i}/bias"), bias));
            }
            _ => {}
        }
    }
    let records: Vec<(&str, &Tensor<f32>)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let meta = ModelMeta {
        provenance: provenance.cloned(),
        layers: model.layers.iter().map(|l| l.kind().to_owned()).collect(),
        tap_points: model.tap_points.clone(),
        num_classes: model.num_classes,
        train_accuracy: model.train_accuracy,
        val_accuracy: model.val_accuracy,
        fingerprint: model.fingerprint(),
    };
    let meta = serde_json::to_vec_pretty(&meta).map_err(WorkbenchError::json("model metadata"))?;
    Ok(encode_container(MODEL_MAGIC, &[(b"META", &meta), (b"TENS", &encode_dump(&records)?)]))
}

pub fn decode_model(bytes: &[u8]) -> Result<(TargetModel, Option<Provenance>)> {
    let sections = decode_container(bytes, MODEL_MAGIC, "target model")?;
    let meta: ModelMeta =
        serde_json::from_slice(section(&sections, b"META")?).map_err(WorkbenchError::json("model metadata"))?;
    let mut tensors = Tensors::decode(section(&sections, b"TENS")?)?;
    let reference = TargetModel::reference(0);
    let kinds: Vec<&str> = reference.layers.iter().map(Layer::kind).collect();
    if meta.layers != kinds {
        return Err(WorkbenchError::DimensionMismatch {
            field: "layers".into(),
            expected: format!("{kinds:?}"),
            found: format!("{:?}", meta.layers),
        });
    }
    let mut layers = Vec::with_capacity(reference.layers.len());
    for (i, l) in reference.layers.into_iter().enumerate() {
        layers.push(match l {
            Layer::Conv { kernel, bias } => Layer::Conv {
                kernel: tensors.take(&format!("layer{i}/kernel"), kernel.shape())?,
                bias: tensors.take(&format!("layer{i}/bias"), bias.shape())?,
            },
            Layer::Dense { weight, bias } => Layer::Dense {
                weight: tensors.take(&format!("layer{i}/weight"), weight.shape())?,
                bias: tensors.take(&format!("layer{i}/bias"), bias.shape())?,
            },
            other => other,
        });
    }
    tensors.finish()?;
    let model = TargetModel {
        layers,
        tap_points: meta.tap_points.clone(),
        num_classes: meta.num_classes,
        train_accuracy: meta.train_accuracy,
        val_accuracy: meta.val_accuracy,
    };
    if model.fingerprint() != meta.fingerprint {
        return Err(WorkbenchError::Checksum("model parameters".into()));
    }
    Ok((model, meta.provenance))
}

pub fn save_model(path: &Path, model: &TargetModel, provenance: Option<&Provenance>) -> Result<()> {
    write_bytes_atomic(path, &encode_model(model, provenance)?)
}

pub fn load_model(path: &Path) -> Result<(TargetModel, Option<Provenance>)> {
    decode_model(&std::fs::read(path).map_err(WorkbenchError::io(path))?)
}

pub const ADVERSARIAL_MAGIC: &[u8; 4] = b"CSAV";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdversarialMeta {
    provenance: Option<Provenance>,
    ids: Vec<usize>,
    labels: Vec<usize>,
    epsilon: f32,
    model_fingerprint: u64,
}

pub fn encode_adversarial(set: &AdversarialSet, provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    if set.ids.len() != set.images.len() || set.labels.len() != set.images.len() {
        return Err(WorkbenchError::Malformed {
            what: "adversarial set",
            detail: format!("{} ids, {} labels, {} images", set.ids.len(), set.labels.len(), set.images.len()),
        });
    }
    let names: Vec<String> = (0..set.images.len()).map(|i| format!("adv/{i}")).collect();
    let records: Vec<(&str, &Tensor<f32>)> = names.iter().map(String::as_str).zip(&set.images).collect();
    let meta = AdversarialMeta {
        provenance: provenance.cloned(),
        ids: set.ids.clone(),
        labels: set.labels.clone(),
        epsilon: set.epsilon,
        model_fingerprint: set.model_fingerprint,
    };
    let meta = serde_json::to_vec_pretty(&meta).map_err(WorkbenchError::json("adversarial metadata"))?;
    Ok(encode_container(ADVERSARIAL_MAGIC, &[(b"META", &meta), (b"TENS", &encode_dump(&records)?)]))
}

pub fn decode_adversarial(bytes: &[u8]) -> Result<(AdversarialSet, Option<Provenance>)> {
    let sections = decode_container(bytes, ADVERSARIAL_MAGIC, "adversarial set")?;
    let meta: AdversarialMeta =
        serde_json::from_slice(section(&sections, b"META")?).map_err(WorkbenchError::json("adversarial metadata"))?;
    if meta.labels.len() != meta.ids.len() {
        return Err(WorkbenchError::DimensionMismatch {
            field: "labels".into(),
            expected: meta.ids.len().to_string(),
            found: meta.labels.len().to_string(),
        });
    }
    let mut tensors = Tensors::decode(section(&sections, b"TENS")?)?;
    let images = (0..meta.ids.len())
        .map(|i| tensors.take(&format!("adv/{i}"), &csae_core::data::IMAGE_SHAPE))
        .collect::<Result<Vec<_>>>()?;
    tensors.finish()?;
    let set = AdversarialSet {
        ids: meta.ids,
        images,
        labels: meta.labels,
        epsilon: meta.epsilon,
        model_fingerprint: meta.model_fingerprint,
    };
    Ok((set, meta.provenance))
}

pub fn save_adversarial(path: &Path, set: &AdversarialSet, provenance: Option<&Provenance>) -> Result<()> {
    write_bytes_atomic(path, &encode_adversarial(set, provenance)?)
}

pub fn load_adversarial(path: &Path) -> Result<(AdversarialSet, Option<Provenance>)> {
    decode_adversarial(&std::fs::read(path).map_err(WorkbenchError::io(path))?)
}
