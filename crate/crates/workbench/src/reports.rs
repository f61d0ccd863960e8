// SPDX-License-Identifier: MIT OR Apache-2.0

//! Diagnostic reports shared by the CLI and the HTTP service.

use std::fmt::Write;

use csae_core::data::Dataset;
use csae_core::diagnostics::{
    dataset_loc_ratio, free_scores, group_entropy, irrelevant_audit, layer_scores, top_activated, EntropyReport,
    JsReport,
};
use csae_core::intervention::rank_vulnerability;
use csae_core::model::{generate_adversarial, AdversarialSet, TargetModel};
use csae_core::pipeline::SaeCheckpoint;
use csae_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const DEFAULT_EPSILON: f32 = 0.05;
pub const ENTROPY_GROUPS: [&str; 3] = ["correct", "incorrect", "adversarial"];

/// Held-out images under the checkpoint's train split.
pub fn eval_ids(data: &Dataset, ckpt: &SaeCheckpoint, limit: Option<usize>) -> Vec<usize> {
    let (_, mut held) = data.split(ckpt.config.train_fraction);
    if let Some(k) = limit {
        held.truncate(k);
    }
    held
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLocr {
    pub layer: usize,
    /// `None` when the ratio is undefined on this image set.
    pub concept: Option<f64>,
    pub joint: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocrReport {
    pub images: usize,
    pub layers: Vec<LayerLocr>,
}

impl LocrReport {
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |r| format!("{r:.4}"));
        let mut out = String::from("layer | concept LocR | joint LocR\n");
        for l in &self.layers {
            let _ = writeln!(out, "{} | {} | {}", l.layer, cell(l.concept), cell(l.joint));
        }
        out
    }
}

pub fn locr_report(model: &TargetModel, ckpt: &SaeCheckpoint, data: &Dataset, ids: &[usize]) -> Result<LocrReport> {
    let mut layers = Vec::new();
    for sae in &ckpt.layers {
        let concept = dataset_loc_ratio(model, sae, data, ids, false)?.ratio().ok();
        let joint = match sae.free {
            Some(_) => dataset_loc_ratio(model, sae, data, ids, true)?.ratio().ok(),
            None => None,
        };
        layers.push(LayerLocr {
            layer: sae.layer,
            concept,
            joint,
        });
    }
    Ok(LocrReport {
        images: ids.len(),
        layers,
    })
}

fn stack(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = images.iter().collect();
    Ok(Tensor::stack(&refs)?)
}

/// Entropy per layer for clean images split by correctness, plus an FGSM
/// group when `epsilon` is given.
pub fn entropy_report(
    model: &TargetModel,
    ckpt: &SaeCheckpoint,
    data: &Dataset,
    ids: &[usize],
    epsilon: Option<f32>,
) -> Result<EntropyReport> {
    let clean = data.batch(ids);
    let labels: Vec<usize> = ids.iter().map(|&i| data.samples[i].label).collect();
    let preds = model.predict_batch_chunked(&clean)?;
    let adv = match epsilon {
        Some(eps) => Some(stack(&generate_adversarial(model, data, ids, eps)?.images)?),
        None => None,
    };
    let mut report = EntropyReport::default();
    for sae in &ckpt.layers {
        let scores = layer_scores(model, sae, &clean)?;
        let adv_scores = match &adv {
            Some(a) => Some(layer_scores(model, sae, a)?),
            None => None,
        };
        report.layers.push(group_entropy(
            sae.layer,
            &scores,
            &preds,
            &labels,
            adv_scores.as_deref(),
            &mut report.notices,
        )?);
    }
    Ok(report)
}

pub fn js_report(
    model: &TargetModel,
    ckpt: &SaeCheckpoint,
    data: &Dataset,
    ids: &[usize],
    epsilon: f32,
) -> Result<(JsReport, AdversarialSet)> {
    Ok(rank_vulnerability(model, ckpt, data, ids, epsilon)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub concepts: Vec<usize>,
    /// `(layer, mean entropy)`.
    pub layers: Vec<(usize, f64)>,
}

impl AuditReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("concepts {:?}\nlayer | mean entropy\n", self.concepts);
        for (l, e) in &self.layers {
            let _ = writeln!(out, "{l} | {e:.6}");
        }
        out
    }
}

pub fn audit_report(
    model: &TargetModel,
    ckpt: &SaeCheckpoint,
    data: &Dataset,
    ids: &[usize],
    concepts: &[usize],
) -> Result<AuditReport> {
    let clean = data.batch(ids);
    let mut layers = Vec::new();
    for sae in &ckpt.layers {
        layers.push((sae.layer, irrelevant_audit(&layer_scores(model, sae, &clean)?, concepts)?));
    }
    Ok(AuditReport {
        concepts: concepts.to_vec(),
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeTopReport {
    pub layer: usize,
    pub token: usize,
    /// `(image id, score)`, best first.
    pub images: Vec<(usize, f32)>,
}

impl FreeTopReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("layer {} free token {}\nrank | image | score\n", self.layer, self.token);
        for (i, (id, s)) in self.images.iter().enumerate() {
            let _ = writeln!(out, "{} | {id} | {s:.6}", i + 1);
        }
        out
    }
}

pub fn free_top_report(
    model: &TargetModel,
    ckpt: &SaeCheckpoint,
    data: &Dataset,
    ids: &[usize],
    layer: usize,
    token: usize,
    k: usize,
) -> Result<FreeTopReport> {
    let sae = ckpt.layer(layer)?;
    let scores = free_scores(model, sae, &data.batch(ids))?;
    Ok(FreeTopReport {
        layer,
        token,
        images: top_activated(&scores, ids, token, k)?,
    })
}
