// SPDX-License-Identifier: MIT OR Apache-2.0

//! Counterfactual score edits with forward resumption, layer vulnerability
//! ranking under FGSM, and single-layer adversarial finetuning.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, Dataset, IMAGE_SHAPE};
use crate::diagnostics::{js_distance, layer_scores, JsReport};
use crate::error::{shape_err, Error, Result};
use crate::model::{accuracy_of, argmax, shuffled, AdversarialSet, TargetModel, Trainable};
use crate::optim::{AdamState, Parameters};
use crate::pipeline::{tap_features, LayerSae, SaeCheckpoint};
use crate::tensor::Tensor;

/// Edit concept scores of one image at one tap layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRequest {
    pub image: usize,
    pub layer: usize,
    /// Concept index → replacement score in `[0, 1]`.
    #[serde(default)]
    pub edits: BTreeMap<usize, f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub layer: usize,
    pub original_prediction: usize,
    pub original_logits: Vec<f32>,
    /// Prediction from the unedited reconstruction.
    pub baseline_prediction: usize,
    pub baseline_logits: Vec<f32>,
    pub counterfactual_prediction: usize,
    pub counterfactual_logits: Vec<f32>,
    pub scores: Vec<f32>,
    pub edited_scores: Vec<f32>,
    /// `‖ĥ' − ĥ‖₂` between edited and unedited reconstructions.
    pub feature_delta_norm: f64,
}

pub fn validate_edits(edits: &BTreeMap<usize, f32>, concepts: usize) -> Result<()> {
    for (&c, &v) in edits {
        if c >= concepts {
            return Err(Error::Invalid(format!("concept index {c} out of range (n = {concepts})")));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Invalid(format!("edit value {v} for concept {c} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Run the edit pipeline on a `[B, 3, 32, 32]` batch with one edit map per
/// image: tokenize, overwrite scores, aggregate, add the unedited free
/// reconstruction and resume the model after the tap.
pub fn intervene_batch(
    model: &TargetModel,
    sae: &LayerSae,
    images: &Tensor<f32>,
    edits: &[BTreeMap<usize, f32>],
) -> Result<Vec<CounterfactualResult>> {
    let bsz = images.shape()[0];
    if edits.len() != bsz {
        return Err(shape_err("intervene", format!("{bsz} images, {} edit maps", edits.len())));
    }
    let n = sae.tokenizer()?.dims().concepts;
    for e in edits {
        validate_edits(e, n)?;
    }
    sae.aggregator()?;
    let (logits, taps) = model.forward_batch(images, &[sae.layer])?;
    let h = sae.stats()?.standardize(&crate::pipeline::chw_batch_to_pc(&taps[0].1)?)?;
    let r = sae.readout(&h)?;
    let mut edited = r.s.clone();
    for (b, e) in edits.iter().enumerate() {
        for (&c, &v) in e {
            edited.data_mut()[c * bsz + b] = v;
        }
    }
    let free = match &sae.free {
        Some(_) => Some(sae.free_recon(&h)?),
        None => None,
    };
    let with_free = |t: Tensor<f32>| -> Result<Tensor<f32>> {
        match &free {
            Some(f) => t.zip_map(f, |a, b| a + b),
            None => Ok(t),
        }
    };
    let base = with_free(sae.concept_recon(&r.s, &r.m)?)?;
    let cf = with_free(sae.concept_recon(&edited, &r.m)?)?;
    let k = model.num_classes;
    let base_logits = model.resume_batch(sae.layer, &sae.to_native(&base)?)?;
    let cf_logits = model.resume_batch(sae.layer, &sae.to_native(&cf)?)?;
    let inner = base.numel() / bsz;
    let mut out = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let row = |t: &Tensor<f32>| t.data()[b * k..(b + 1) * k].to_vec();
        let delta: f64 = base.data()[b * inner..(b + 1) * inner]
            .iter()
            .zip(&cf.data()[b * inner..(b + 1) * inner])
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        let (ol, bl, cl) = (row(&logits), row(&base_logits), row(&cf_logits));
        out.push(CounterfactualResult {
            layer: sae.layer,
            original_prediction: argmax(&ol),
            baseline_prediction: argmax(&bl),
            counterfactual_prediction: argmax(&cl),
            original_logits: ol,
            baseline_logits: bl,
            counterfactual_logits: cl,
            scores: r.scores(b),
            edited_scores: (0..n).map(|c| edited.data()[c * bsz + b]).collect(),
            feature_delta_norm: libm::sqrt(delta),
        });
    }
    Ok(out)
}

/// Single-image intervention on a `[3, 32, 32]` image.
pub fn intervene_image(
    model: &TargetModel,
    ckpt: &SaeCheckpoint,
    image: &Tensor<f32>,
    layer: usize,
    edits: &BTreeMap<usize, f32>,
) -> Result<CounterfactualResult> {
    if image.shape() != IMAGE_SHAPE {
        return Err(shape_err("intervene", format!("expected image {IMAGE_SHAPE:?}, got {:?}", image.shape())));
    }
    let sae = ckpt.layer(layer)?;
    let batch = image.clone().reshape(&[1, 3, 32, 32])?;
    Ok(intervene_batch(model, sae, &batch, core::slice::from_ref(edits))?.remove(0))
}

pub fn intervene(
    request: &InterventionRequest,
    model: &TargetModel,
    ckpt: &SaeCheckpoint,
    data: &Dataset,
) -> Result<CounterfactualResult> {
    let sample = data
        .samples
        .get(request.image)
        .ok_or_else(|| Error::Invalid(format!("unknown image id {}", request.image)))?;
    intervene_image(model, ckpt, &sample.image, request.layer, &request.edits)
}

/// Class-conditional edit: the true class's shape concept set to 1, the
/// other shape concepts set to 0. Shape concepts share the class indices.
pub fn class_edit_rule(true_class: usize, classes: usize) -> BTreeMap<usize, f32> {
    (0..classes).map(|c| (c, if c == true_class { 1.0 } else { 0.0 })).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrection {
    pub layer: usize,
    pub images: usize,
    /// Fraction whose counterfactual prediction equals the true label.
    pub corrected: f64,
    /// Fraction whose unedited reconstruction already predicts the label.
    pub baseline: f64,
}

/// Apply `rule(label)` to every image and report per-layer correction rates.
pub fn batch_correct(
    model: &TargetModel,
    ckpt: &SaeCheckpoint,
    images: &[Tensor<f32>],
    labels: &[usize],
    rule: impl Fn(usize) -> BTreeMap<usize, f32>,
) -> Result<Vec<LayerCorrection>> {
    if images.is_empty() {
        return Err(Error::Empty("misclassified set"));
    }
    if images.len() != labels.len() {
        return Err(shape_err("batch_correct", format!("{} images, {} labels", images.len(), labels.len())));
    }
    let mut out = Vec::new();
    for sae in &ckpt.layers {
        let (mut fixed, mut base) = (0usize, 0usize);
        for (chunk, lab) in images.chunks(64).zip(labels.chunks(64)) {
            let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
            let edits: Vec<_> = lab.iter().map(|&l| rule(l)).collect();
            for (res, &l) in intervene_batch(model, sae, &Tensor::stack(&refs)?, &edits)?.iter().zip(lab) {
                fixed += (res.counterfactual_prediction == l) as usize;
                base += (res.baseline_prediction == l) as usize;
            }
        }
        out.push(LayerCorrection {
            layer: sae.layer,
            images: images.len(),
            corrected: fixed as f64 / images.len() as f64,
            baseline: base as f64 / images.len() as f64,
        });
    }
    Ok(out)
}

fn stack_images(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = images.iter().collect();
    Tensor::stack(&refs)
}

/// Per-layer JS distance between clean and adversarial score sets.
pub fn js_report(
    model: &TargetModel,
    ckpt: &SaeCheckpoint,
    clean: &Tensor<f32>,
    adversarial: &Tensor<f32>,
    degenerate: bool,
) -> Result<JsReport> {
    let mut d = Vec::new();
    for sae in &ckpt.layers {
        let a = layer_scores(model, sae, clean)?;
        let b = layer_scores(model, sae, adversarial)?;
        d.push((sae.layer, js_distance(&a, &b)?));
    }
    Ok(JsReport::from_distances(d, degenerate))
}

/// Attack images `ids` once with FGSM and rank tap layers by JS distance.
pub fn rank_vulnerability(
    model: &TargetModel,
    ckpt: &SaeCheckpoint,
    data: &Dataset,
    ids: &[usize],
    epsilon: f32,
) -> Result<(JsReport, AdversarialSet)> {
    if ids.is_empty() {
        return Err(Error::Empty("image id list"));
    }
    let adv = crate::model::generate_adversarial(model, data, ids, epsilon)?;
    let report = js_report(model, ckpt, &data.batch(ids), &stack_images(&adv.images)?, !(epsilon > 0.0))?;
    Ok((report, adv))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Images per batch, half clean and half adversarial.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub layer: usize,
    pub epochs: usize,
    pub adversarial_accuracy_before: f64,
    pub adversarial_accuracy_after: f64,
    pub clean_accuracy_before: f64,
    pub clean_accuracy_after: f64,
    /// `(tap layer, before, after)` when a checkpoint was supplied.
    pub js: Vec<(usize, f64, f64)>,
}

/// Evaluation material for a finetuning report.
pub struct FinetuneEval<'a> {
    pub clean: &'a Tensor<f32>,
    pub adversarial: &'a AdversarialSet,
    pub labels: &'a [usize],
    pub ckpt: Option<&'a SaeCheckpoint>,
}

fn check_tag(model: &TargetModel, set: &AdversarialSet) -> Result<()> {
    let fp = model.fingerprint();
    if set.model_fingerprint != fp {
        return Err(Error::Invalid(format!(
            "adversarial set was generated against model {:016x}, not {fp:016x}",
            set.model_fingerprint
        )));
    }
    Ok(())
}

/// Nearest layer at or before `layer` that has parameters.
pub fn owning_layer(model: &TargetModel, layer: usize) -> Result<usize> {
    if layer >= model.layers.len() {
        return Err(Error::UnknownLayer(layer));
    }
    (0..=layer)
        .rev()
        .find(|&l| model.layers[l].is_trainable())
        .ok_or(Error::NotTrainable(layer))
}

/// Finetune only `layer` on pairs of clean and adversarial images for
/// `config.epochs` epochs; every other layer stays bit-identical.
pub fn finetune_layer(
    model: &TargetModel,
    layer: usize,
    clean: &Tensor<f32>,
    adversarial: &AdversarialSet,
    eval: &FinetuneEval<'_>,
    config: &FinetuneConfig,
) -> Result<(TargetModel, FinetuneReport)> {
    if layer >= model.layers.len() {
        return Err(Error::UnknownLayer(layer));
    }
    if !model.layers[layer].is_trainable() {
        return Err(Error::NotTrainable(layer));
    }
    check_tag(model, adversarial)?;
    check_tag(model, eval.adversarial)?;
    let n = adversarial.images.len();
    if clean.shape()[0] != n || n == 0 {
        return Err(shape_err("finetune", format!("{} clean vs {n} adversarial images", clean.shape()[0])));
    }
    let half = (config.batch_size / 2).max(1);
    let adv = stack_images(&adversarial.images)?;
    let eval_adv = stack_images(&eval.adversarial.images)?;
    let frozen: Vec<u64> = (0..model.layers.len())
        .filter(|&l| l != layer)
        .map(|l| model.fingerprint_layer(l))
        .collect();

    let mut tuned = model.clone();
    let trainable = Trainable::Only(layer);
    let shapes = tuned.trainable_shapes(trainable);
    let mut adam = AdamState::<f32>::for_shapes(shapes.iter().map(|s| s.as_slice()));
    let pairs: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        let order = shuffled(&pairs, mix_seed(config.seed, epoch as u64));
        for chunk in order.chunks(half) {
            let mut batch = crate::pipeline::gather_rows(clean, chunk).into_data();
            batch.extend_from_slice(crate::pipeline::gather_rows(&adv, chunk).data());
            let labels: Vec<usize> = chunk.iter().chain(chunk).map(|&i| adversarial.labels[i]).collect();
            let x = Tensor::new(&[2 * chunk.len(), 3, 32, 32], batch)?;
            tuned.train_step(&x, &labels, trainable, &mut adam, config.lr as f32)?;
        }
    }
    let after: Vec<u64> = (0..model.layers.len())
        .filter(|&l| l != layer)
        .map(|l| tuned.fingerprint_layer(l))
        .collect();
    if after != frozen {
        return Err(Error::FrozenMutated("layer finetuning"));
    }

    let acc = |m: &TargetModel, x: &Tensor<f32>| -> Result<f64> { accuracy_of(&m.predict_batch_chunked(x)?, eval.labels) };
    let mut js = Vec::new();
    if let Some(ck) = eval.ckpt {
        let before = js_report(model, ck, eval.clean, &eval_adv, false)?;
        let after = js_report(&tuned, ck, eval.clean, &eval_adv, false)?;
        for l in ck.tap_layers() {
            js.push((l, before.distance(l).unwrap_or(0.0), after.distance(l).unwrap_or(0.0)));
        }
    }
    let report = FinetuneReport {
        layer,
        epochs: config.epochs,
        adversarial_accuracy_before: acc(model, &eval_adv)?,
        adversarial_accuracy_after: acc(&tuned, &eval_adv)?,
        clean_accuracy_before: acc(model, eval.clean)?,
        clean_accuracy_after: acc(&tuned, eval.clean)?,
        js,
    };
    Ok((tuned, report))
}

/// Features at `layer` for a `[B, 3, 32, 32]` batch, `[B, P, C]`.
pub fn features(model: &TargetModel, images: &Tensor<f32>, layer: usize) -> Result<Tensor<f32>> {
    tap_features(model, images, layer)
}
