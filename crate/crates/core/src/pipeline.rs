// SPDX-License-Identifier: MIT OR Apache-2.0

//! Three-stage SAE training: tokenizers, then aggregators with the
//! tokenizers frozen, then free modules with both concept modules frozen.
//! One independent SAE is trained per tap layer.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{
    aggregate_graph, aggregator_loss_graph, AggregatorDims, AggregatorLambdas, AggregatorParams,
};
use crate::autodiff::{Tape, Var};
use crate::data::{mix_seed, Dataset, CANVAS};
use crate::error::{shape_err, Error, Result};
use crate::free::{free_graph, free_loss_graph, FreeLambdas, FreeParams, DEFAULT_FREE_TOKENS};
use crate::model::{mirror_rows, shuffled, TargetModel};
use crate::optim::{AdamState, Parameters, StepLrSchedule};
use crate::tensor::{Fingerprint, Tensor};
use crate::tokenizer::{
    tokenize_graph, tokenizer_loss_graph, BatchReadout, TokenizerDims, TokenizerLambdas, TokenizerParams,
};

/// Optimizer settings of one training stage (always Adam).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub lr: f64,
    /// Step-decay period in epochs; `None` keeps the rate constant.
    pub lr_step: Option<usize>,
    pub lr_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl StageConfig {
    pub fn schedule(&self) -> Result<StepLrSchedule> {
        match self.lr_step {
            Some(step) => StepLrSchedule::new(self.lr, step, self.lr_gamma),
            None if self.lr > 0.0 => Ok(StepLrSchedule::constant(self.lr)),
            None => Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Tap layers of the target model to interpret.
    pub taps: Vec<usize>,
    /// Concept embedding size `d_t`.
    pub embed_dim: usize,
    /// Aggregator MLP output size `d_m`.
    pub hidden_dim: usize,
    pub free_tokens: usize,
    /// Fraction of the dataset (leading ids) used for training.
    pub train_fraction: f64,
    /// Train on a left-right mirrored copy of each image with
    /// probability 1/2 per epoch.
    pub mirror_augment: bool,
    pub tokenizer: StageConfig,
    pub tokenizer_lambdas: TokenizerLambdas,
    pub aggregator: StageConfig,
    pub aggregator_lambdas: AggregatorLambdas,
    pub free: StageConfig,
    pub free_lambdas: FreeLambdas,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            taps: vec![1, 4, 7],
            embed_dim: 16,
            hidden_dim: 16,
            free_tokens: DEFAULT_FREE_TOKENS,
            train_fraction: 0.8,
            mirror_augment: true,
            tokenizer: StageConfig {
                lr: 1e-3,
                lr_step: Some(20),
                lr_gamma: 0.1,
                epochs: 30,
                batch_size: 64,
            },
            tokenizer_lambdas: TokenizerLambdas::default(),
            aggregator: StageConfig {
                lr: 1e-3,
                lr_step: Some(30),
                lr_gamma: 0.1,
                epochs: 50,
                batch_size: 64,
            },
            aggregator_lambdas: AggregatorLambdas::default(),
            free: StageConfig {
                lr: 1e-3,
                lr_step: None,
                lr_gamma: 1.0,
                epochs: 30,
                batch_size: 64,
            },
            free_lambdas: FreeLambdas::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Empty("tap layer list"));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("free_tokens", self.free_tokens),
            ("tokenizer.batch_size", self.tokenizer.batch_size),
            ("aggregator.batch_size", self.aggregator.batch_size),
            ("free.batch_size", self.free.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Invalid(format!("train_fraction {} outside (0, 1]", self.train_fraction)));
        }
        self.tokenizer.schedule()?;
        self.aggregator.schedule()?;
        self.free.schedule()?;
        Ok(())
    }

    /// Checksum of every field, used for provenance.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fingerprint::default();
        h.write_u64(self.seed);
        for &t in &self.taps {
            h.write_u64(t as u64);
        }
        for v in [self.embed_dim, self.hidden_dim, self.free_tokens] {
            h.write_u64(v as u64);
        }
        h.write_u64(self.train_fraction.to_bits());
        h.write_u64(self.mirror_augment as u64);
        for s in [&self.tokenizer, &self.aggregator, &self.free] {
            h.write_u64(s.lr.to_bits());
            h.write_u64(s.lr_step.map_or(0, |v| v as u64 + 1));
            h.write_u64(s.lr_gamma.to_bits());
            h.write_u64(s.epochs as u64);
            h.write_u64(s.batch_size as u64);
        }
        let l = &self.tokenizer_lambdas;
        let a = &self.aggregator_lambdas;
        let f = &self.free_lambdas;
        for v in [l.score, l.mask, l.merge_l1, a.recon, a.align, a.aggr_l1, f.recon, f.sparsity] {
            h.write_u64(v.to_bits());
        }
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Tokenizer = 1,
    Aggregator = 2,
    Free = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Tokenizer, Stage::Aggregator, Stage::Free];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Tokenizer),
            2 => Ok(Stage::Aggregator),
            3 => Ok(Stage::Free),
            _ => Err(Error::Invalid(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Tokenizer => "tokenizer",
            Stage::Aggregator => "aggregator",
            Stage::Free => "free",
        }
    }
}

/// Losses and held-out figures of one stage on one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub layer: usize,
    pub epoch_losses: Vec<f64>,
    /// Held-out stage loss, or reconstruction MSE for stages 2 and 3.
    pub held_out: f64,
}

/// Per-channel affine standardization of tap features. SAEs read and
/// write features in the standardized space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl FeatureStats {
    /// Channel means and standard deviations of `[N, P, C]` features; a
    /// constant channel keeps unit scale.
    pub fn fit(feats: &Tensor<f32>) -> Result<Self> {
        let s = feats.shape();
        if s.len() != 3 {
            return Err(shape_err("feature_stats", format!("expected [N, P, C], got {s:?}")));
        }
        let c = s[2];
        let rows = (s[0] * s[1]) as f64;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for row in feats.data().chunks(c) {
            for j in 0..c {
                let v = row[j] as f64;
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        let mut mean = Vec::with_capacity(c);
        let mut scale = Vec::with_capacity(c);
        for j in 0..c {
            let m = sum[j] / rows;
            let var = (sq[j] / rows - m * m).max(0.0);
            mean.push(m as f32);
            scale.push(if var > 1e-12 { libm::sqrt(var) as f32 } else { 1.0 });
        }
        Ok(Self { mean, scale })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, t: &Tensor<f32>) -> Result<usize> {
        let c = self.channels();
        match t.shape().last() {
            Some(&last) if last == c => Ok(c),
            _ => Err(shape_err("feature_stats", format!("{:?} does not end in {c} channels", t.shape()))),
        }
    }

    /// `(h − mean) / scale` over the trailing channel axis.
    pub fn standardize(&self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let c = self.check(t)?;
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.scale[i % c];
        }
        Ok(out)
    }

    /// Inverse of [`standardize`](Self::standardize).
    pub fn restore(&self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let c = self.check(t)?;
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.scale[i % c] + self.mean[i % c];
        }
        Ok(out)
    }

    fn fingerprint(&self) -> u64 {
        let mut h = Fingerprint::default();
        for (&m, &s) in self.mean.iter().zip(&self.scale) {
            h.write_u64(m.to_bits() as u64);
            h.write_u64(s.to_bits() as u64);
        }
        h.finish()
    }
}

/// Trained SAE parameters for one tap layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSae {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Fitted on the training split during stage 1.
    pub stats: Option<FeatureStats>,
    pub tokenizer: Option<TokenizerParams>,
    pub aggregator: Option<AggregatorParams>,
    pub free: Option<FreeParams>,
}

impl LayerSae {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    fn need<'a, P>(&self, p: &'a Option<P>) -> Result<&'a P> {
        p.as_ref().ok_or(Error::UntrainedLayer(self.layer))
    }

    pub fn stats(&self) -> Result<&FeatureStats> {
        self.need(&self.stats)
    }

    /// Standardized `[B, P, C]` features of a `[B, 3, 32, 32]` batch.
    pub fn features(&self, model: &TargetModel, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.stats()?.standardize(&tap_features(model, images, self.layer)?)
    }

    /// Map a standardized `[B, P, C]` reconstruction back to the model's
    /// native `[B, C, H, W]` activation layout.
    pub fn to_native(&self, recon: &Tensor<f32>) -> Result<Tensor<f32>> {
        pc_batch_to_chw(&self.stats()?.restore(recon)?, self.height, self.width)
    }

    pub fn tokenizer(&self) -> Result<&TokenizerParams> {
        self.need(&self.tokenizer)
    }

    pub fn aggregator(&self) -> Result<&AggregatorParams> {
        self.need(&self.aggregator)
    }

    pub fn free(&self) -> Result<&FreeParams> {
        self.need(&self.free)
    }

    /// Concept readout of standardized `[B, P, C]` features.
    pub fn readout(&self, h: &Tensor<f32>) -> Result<BatchReadout> {
        crate::tokenizer::tokenize_batch(h, self.tokenizer()?)
    }

    /// Concept reconstruction from scores `[n, B, 1]` and masks `[n, B, d_s]`.
    pub fn concept_recon(&self, s: &Tensor<f32>, m: &Tensor<f32>) -> Result<Tensor<f32>> {
        crate::aggregator::aggregate(s, m, self.aggregator()?)
    }

    pub fn free_recon(&self, h: &Tensor<f32>) -> Result<Tensor<f32>> {
        crate::free::free_forward(h, self.free()?)
    }

    /// `ĥ_concept + ĥ_free` (free part omitted before stage 3).
    pub fn reconstruct(&self, h: &Tensor<f32>) -> Result<Tensor<f32>> {
        let r = self.readout(h)?;
        let concept = self.concept_recon(&r.s, &r.m)?;
        match &self.free {
            Some(_) => concept.zip_map(&self.free_recon(h)?, |a, b| a + b),
            None => Ok(concept),
        }
    }

    fn fingerprint_stage(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Tokenizer => {
                let mut h = Fingerprint::default();
                h.write_u64(self.stats.as_ref().map_or(0, |s| s.fingerprint()));
                h.write_u64(self.tokenizer.as_ref().map_or(0, |p| p.fingerprint()));
                h.finish()
            }
            Stage::Aggregator => self.aggregator.as_ref().map_or(0, |p| p.fingerprint()),
            Stage::Free => self.free.as_ref().map_or(0, |p| p.fingerprint()),
        }
    }
}

/// All SAE parameters plus their training provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeCheckpoint {
    pub config: PipelineConfig,
    pub concepts: usize,
    /// `stages_done[k]` is set once stage `k + 1` finished on every layer.
    pub stages_done: [bool; 3],
    pub layers: Vec<LayerSae>,
    pub metrics: Vec<StageRecord>,
    pub model_fingerprint: u64,
}

impl SaeCheckpoint {
    /// Empty checkpoint with layer geometry taken from `model`.
    pub fn new(config: PipelineConfig, concepts: usize, model: &TargetModel) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        for &l in &config.taps {
            let s = model.layer_shape(l)?;
            if s.len() != 3 {
                return Err(shape_err("tap", format!("layer {l} output {s:?} is not a feature map")));
            }
            layers.push(LayerSae {
                layer: l,
                channels: s[0],
                height: s[1],
                width: s[2],
                stats: None,
                tokenizer: None,
                aggregator: None,
                free: None,
            });
        }
        Ok(Self {
            config,
            concepts,
            stages_done: [false; 3],
            layers,
            metrics: Vec::new(),
            model_fingerprint: model.fingerprint(),
        })
    }

    pub fn stage_done(&self, stage: Stage) -> bool {
        self.stages_done[stage as usize - 1]
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerSae> {
        self.layers.iter().find(|l| l.layer == layer).ok_or(Error::UnknownLayer(layer))
    }

    pub fn tap_layers(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    pub fn records(&self, stage: Stage, layer: usize) -> Option<&StageRecord> {
        self.metrics.iter().find(|r| r.stage == stage && r.layer == layer)
    }

    /// Structural consistency: every stored tensor has the shape implied by
    /// the config and layer geometry, and stage flags match stored params.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        for l in &self.layers {
            let tok_dims = TokenizerDims {
                concepts: self.concepts,
                positions: l.positions(),
                channels: l.channels,
                embed: c.embed_dim,
                mask: l.positions(),
            };
            if let Some(t) = &l.tokenizer {
                check_tokenizer(t, tok_dims)?;
            }
            if let Some(st) = &l.stats {
                dim_check("channels", l.channels, st.mean.len())?;
                dim_check("channels", l.channels, st.scale.len())?;
            }
            if let Some(a) = &l.aggregator {
                check_aggregator(a, agg_dims(tok_dims, c.hidden_dim))?;
            }
            if let Some(f) = &l.free {
                let fd = TokenizerDims {
                    concepts: c.free_tokens,
                    ..tok_dims
                };
                check_tokenizer(&f.tokenizer, fd)?;
                check_aggregator(&f.aggregator, agg_dims(fd, c.hidden_dim))?;
            }
            for stage in Stage::ALL {
                let present = match stage {
                    Stage::Tokenizer => l.tokenizer.is_some() && l.stats.is_some(),
                    Stage::Aggregator => l.aggregator.is_some(),
                    Stage::Free => l.free.is_some(),
                };
                if self.stage_done(stage) && !present {
                    return Err(Error::Invalid(format!(
                        "stage {} flagged complete but layer {} lacks its parameters",
                        stage.number(),
                        l.layer
                    )));
                }
            }
        }
        Ok(())
    }

    /// Bit-exact checksum of every parameter tensor and stage flag.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fingerprint::default();
        h.write_u64(self.config.fingerprint());
        for &d in &self.stages_done {
            h.write_u64(d as u64);
        }
        for l in &self.layers {
            for s in Stage::ALL {
                h.write_u64(l.fingerprint_stage(s));
            }
        }
        h.finish()
    }
}

fn agg_dims(t: TokenizerDims, hidden: usize) -> AggregatorDims {
    AggregatorDims {
        concepts: t.concepts,
        positions: t.positions,
        channels: t.channels,
        mask: t.mask,
        hidden,
    }
}

fn dim_check(field: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { field, expected, found });
    }
    Ok(())
}

fn check_tokenizer(t: &TokenizerParams, d: TokenizerDims) -> Result<()> {
    let found = t.dims();
    dim_check("concepts", d.concepts, found.concepts)?;
    dim_check("positions", d.positions, found.positions)?;
    dim_check("channels", d.channels, found.channels)?;
    dim_check("embed_dim", d.embed, found.embed)?;
    dim_check("mask_dim", d.mask, found.mask)?;
    let want = TokenizerParams::<f32>::zeros(d);
    for (a, b) in t.tensors().iter().zip(want.tensors()) {
        if a.shape() != b.shape() {
            return Err(shape_err("tokenizer", format!("{:?} vs expected {:?}", a.shape(), b.shape())));
        }
    }
    Ok(())
}

fn check_aggregator(a: &AggregatorParams, d: AggregatorDims) -> Result<()> {
    let found = a.dims();
    dim_check("concepts", d.concepts, found.concepts)?;
    dim_check("positions", d.positions, found.positions)?;
    dim_check("channels", d.channels, found.channels)?;
    dim_check("mask_dim", d.mask, found.mask)?;
    dim_check("hidden_dim", d.hidden, found.hidden)?;
    let want = AggregatorParams::<f32>::zeros(d);
    for (x, y) in a.tensors().iter().zip(want.tensors()) {
        if x.shape() != y.shape() {
            return Err(shape_err("aggregator", format!("{:?} vs expected {:?}", x.shape(), y.shape())));
        }
    }
    Ok(())
}

/// Tap activations as `[B, P, C]` for the images `ids`.
pub fn tap_features(model: &TargetModel, images: &Tensor<f32>, layer: usize) -> Result<Tensor<f32>> {
    let (_, taps) = model.forward_batch(images, &[layer])?;
    let (_, t) = taps.into_iter().next().ok_or(Error::UnknownLayer(layer))?;
    chw_batch_to_pc(&t)
}

/// `[B, C, H, W]` → `[B, H·W, C]`.
pub fn chw_batch_to_pc(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(shape_err("feature_map", format!("expected [B, C, H, W], got {s:?}")));
    }
    t.clone().reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// `[B, P, C]` → `[B, C, H, W]`.
pub fn pc_batch_to_chw(t: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.len() != 3 || s[1] != height * width {
        return Err(shape_err("feature_map", format!("{s:?} is not [B, {}, C]", height * width)));
    }
    t.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], height, width])
}

/// Features of dataset images at one layer, computed in chunks.
pub fn dataset_features(model: &TargetModel, data: &Dataset, ids: &[usize], layer: usize) -> Result<Tensor<f32>> {
    features_of(model, data, ids, layer, false)
}

fn features_of(model: &TargetModel, data: &Dataset, ids: &[usize], layer: usize, mirrored: bool) -> Result<Tensor<f32>> {
    let mut out = Vec::new();
    let mut inner = Vec::new();
    for chunk in ids.chunks(128) {
        let mut images = data.batch(chunk);
        if mirrored {
            mirror_rows(images.data_mut(), CANVAS);
        }
        let f = tap_features(model, &images, layer)?;
        inner = f.shape()[1..].to_vec();
        out.extend_from_slice(f.data());
    }
    if ids.is_empty() {
        return Err(Error::Empty("image id list"));
    }
    let mut shape = vec![ids.len()];
    shape.extend(inner);
    Tensor::new(&shape, out)
}

/// Gather rows `idx` of an `[N, ...]` tensor.
pub fn gather_rows(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let inner: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(inner * idx.len());
    for &i in idx {
        data.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(&t.shape()[1..]);
    Tensor::new(&shape, data).expect("gathered shape")
}

/// Per-layer training material for the images `ids`. With mirroring,
/// row `i + N` holds the mirrored copy of row `i`.
struct LayerData {
    /// `[N, P, C]` or `[2N, P, C]`
    feats: Tensor<f32>,
    /// `[N, n]` or `[2N, n]`
    scores: Tensor<f32>,
    /// `[N, n, d_s]` or `[2N, n, d_s]`
    masks: Tensor<f32>,
    images: usize,
}

impl LayerData {
    fn build(
        model: &TargetModel,
        data: &Dataset,
        ids: &[usize],
        sae: &LayerSae,
        stats: &FeatureStats,
        mirror: bool,
    ) -> Result<Self> {
        if sae.height != sae.width {
            return Err(shape_err("mask grid", format!("{}x{} is not square", sae.height, sae.width)));
        }
        let views: &[bool] = if mirror { &[false, true] } else { &[false] };
        let n = data.vocabulary.len();
        let p = sae.positions();
        let rows = ids.len() * views.len();
        let mut feats = Vec::with_capacity(rows * p * sae.channels);
        let mut scores = Vec::with_capacity(rows * n);
        let mut masks = Vec::with_capacity(rows * n * p);
        for &mirrored in views {
            feats.extend_from_slice(features_of(model, data, ids, sae.layer, mirrored)?.data());
            for &id in ids {
                let a = data.samples[id].annotation(sae.height)?;
                scores.extend_from_slice(&a.scores);
                let start = masks.len();
                masks.extend_from_slice(a.masks.data());
                if mirrored {
                    mirror_rows(&mut masks[start..], sae.width);
                }
            }
        }
        Ok(Self {
            feats: stats.standardize(&Tensor::new(&[rows, p, sae.channels], feats)?)?,
            scores: Tensor::new(&[rows, n], scores)?,
            masks: Tensor::new(&[rows, n, p], masks)?,
            images: ids.len(),
        })
    }

    /// Number of distinct images.
    fn len(&self) -> usize {
        self.images
    }

    fn views(&self) -> usize {
        self.feats.shape()[0] / self.images
    }

    /// Targets `([n, B, 1], [n, B, d_s])`.
    fn targets(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let n = self.scores.shape()[1];
        let s = gather_rows(&self.scores, idx).permute(&[1, 0])?.reshape(&[n, idx.len(), 1])?;
        let m = gather_rows(&self.masks, idx).permute(&[1, 0, 2])?;
        Ok((s, m))
    }
}

fn stream(seed: u64, stage: Stage, layer: usize, epoch: u64) -> u64 {
    mix_seed(mix_seed(mix_seed(seed, stage as u64), layer as u64), epoch)
}

const INIT_STREAM: u64 = u64::MAX;

/// Adam over shuffled mini-batches with per-epoch learning rates.
#[allow(clippy::too_many_arguments)]
fn fit<P: Parameters<f32>>(
    params: &mut P,
    cfg: &StageConfig,
    seed: u64,
    stage: Stage,
    layer: usize,
    n: usize,
    views: usize,
    mut graph: impl FnMut(&mut Tape<f32>, &P, &[usize]) -> Result<(Var, Vec<Var>)>,
) -> Result<Vec<f64>> {
    let schedule = cfg.schedule()?;
    let mut adam = AdamState::new(params);
    let all: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch) as f32;
        let epoch_seed = stream(seed, stage, layer, epoch as u64);
        let mut order = shuffled(&all, epoch_seed);
        if views > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(epoch_seed, 1));
            for i in order.iter_mut() {
                *i += n * rng.random_range(0..views);
            }
        }
        let (mut total, mut count) = (0.0f64, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let (loss, vars) = graph(&mut tape, params, batch)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: stage.name(),
                    epoch,
                    step,
                    loss: value as f64,
                });
            }
            let mut grads = tape.backward(loss).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    stage: stage.name(),
                    epoch,
                    step,
                    loss: value as f64,
                },
                other => other,
            })?;
            let g = grads.wrt(&tape, &vars);
            adam.step(&mut params.tensors_mut(), &g, lr)?;
            total += value as f64 * batch.len() as f64;
            count += batch.len();
        }
        losses.push(total / count.max(1) as f64);
    }
    Ok(losses)
}

fn check_frozen(before: u64, after: u64, stage: &'static str) -> Result<()> {
    if before != after {
        return Err(Error::FrozenMutated(stage));
    }
    Ok(())
}

/// Mean squared error between two equally shaped tensors.
pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

const EVAL_CHUNK: usize = 128;

fn train_tokenizer_layer(
    sae: &mut LayerSae,
    cfg: &PipelineConfig,
    concepts: usize,
    train: &LayerData,
    held: Option<&LayerData>,
) -> Result<StageRecord> {
    let dims = TokenizerDims {
        concepts,
        positions: sae.positions(),
        channels: sae.channels,
        embed: cfg.embed_dim,
        mask: sae.positions(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, Stage::Tokenizer, sae.layer, INIT_STREAM));
    let mut params = TokenizerParams::init(dims, &mut rng);
    prevalence_prior(&mut params, &train.scores);
    let lambdas = cfg.tokenizer_lambdas;
    let graph = |tape: &mut Tape<f32>, p: &TokenizerParams, data: &LayerData, idx: &[usize], trainable: bool| {
        let h = tape.constant(gather_rows(&data.feats, idx));
        let (ts, tm) = data.targets(idx)?;
        let (ts, tm) = (tape.constant(ts), tape.constant(tm));
        let pv = p.on_tape(tape, trainable);
        let r = tokenize_graph(tape, h, &pv)?;
        let loss = tokenizer_loss_graph(tape, &r, ts, tm, pv.w_merge, &lambdas)?;
        Ok::<_, Error>((loss, pv.all()))
    };
    let losses = fit(
        &mut params,
        &cfg.tokenizer,
        cfg.seed,
        Stage::Tokenizer,
        sae.layer,
        train.len(),
        train.views(),
        |tape, p, idx| graph(tape, p, train, idx, true),
    )?;
    let held_out = match held {
        Some(d) => chunked_mean(d.len(), |idx| {
            let mut tape = Tape::new();
            let (l, _) = graph(&mut tape, &params, d, idx, false)?;
            Ok(tape.value(l).item() as f64)
        })?,
        None => f64::NAN,
    };
    sae.tokenizer = Some(params);
    Ok(StageRecord {
        stage: Stage::Tokenizer,
        layer: sae.layer,
        epoch_losses: losses,
        held_out,
    })
}

/// Start every score at its concept's training prevalence, clamped away
/// from 0 and 1.
fn prevalence_prior(params: &mut TokenizerParams, scores: &Tensor<f32>) {
    let n = scores.shape()[1];
    let rows = scores.shape()[0] as f64;
    let mut mean = vec![0.0f64; n];
    for row in scores.data().chunks(n) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64 / rows;
        }
    }
    for (b, m) in params.b_score.data_mut().iter_mut().zip(mean) {
        let p = m.clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP);
        *b = libm::log(p / (1.0 - p)) as f32;
    }
}

const PRIOR_CLAMP: f64 = 1e-4;

/// Size-weighted mean of a per-chunk statistic over `0..n`.
fn chunked_mean(n: usize, mut f: impl FnMut(&[usize]) -> Result<f64>) -> Result<f64> {
    let all: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for chunk in all.chunks(EVAL_CHUNK) {
        total += f(chunk)? * chunk.len() as f64;
    }
    Ok(total / n.max(1) as f64)
}

fn train_aggregator_layer(sae: &mut LayerSae, cfg: &PipelineConfig, train: &LayerData, held: Option<&LayerData>) -> Result<StageRecord> {
    let tok = sae.tokenizer()?.clone();
    let frozen = tok.fingerprint();
    let dims = agg_dims(tok.dims(), cfg.hidden_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, Stage::Aggregator, sae.layer, INIT_STREAM));
    let mut params = AggregatorParams::init(dims, &mut rng);
    let lambdas = cfg.aggregator_lambdas;
    let losses = fit(
        &mut params,
        &cfg.aggregator,
        cfg.seed,
        Stage::Aggregator,
        sae.layer,
        train.len(),
        train.views(),
        |tape, p, idx| {
            let h = tape.constant(gather_rows(&train.feats, idx));
            let tv = tok.on_tape(tape, false);
            let r = tokenize_graph(tape, h, &tv)?;
            let pv = p.on_tape(tape, true);
            let recon = aggregate_graph(tape, r.s, r.m, &pv)?;
            let loss = aggregator_loss_graph(tape, recon, h, tv.w_merge, pv.w_aggr, &lambdas)?;
            Ok((loss, pv.all()))
        },
    )?;
    check_frozen(frozen, tok.fingerprint(), "aggregator training")?;
    check_frozen(frozen, sae.tokenizer()?.fingerprint(), "aggregator training")?;
    sae.aggregator = Some(params);
    let held_out = match held {
        Some(d) => chunked_mean(d.len(), |idx| {
            let h = gather_rows(&d.feats, idx);
            mse(&sae.reconstruct(&h)?, &h)
        })?,
        None => f64::NAN,
    };
    Ok(StageRecord {
        stage: Stage::Aggregator,
        layer: sae.layer,
        epoch_losses: losses,
        held_out,
    })
}

fn train_free_layer(sae: &mut LayerSae, cfg: &PipelineConfig, train: &LayerData, held: Option<&LayerData>) -> Result<StageRecord> {
    let frozen = (sae.tokenizer()?.fingerprint(), sae.aggregator()?.fingerprint());
    // ĥ_concept is fixed throughout the stage.
    let n = train.len();
    let mut concept = Vec::with_capacity(train.feats.numel());
    for chunk in (0..n * train.views()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
        let h = gather_rows(&train.feats, chunk);
        let r = sae.readout(&h)?;
        concept.extend_from_slice(sae.concept_recon(&r.s, &r.m)?.data());
    }
    let concept = Tensor::new(train.feats.shape(), concept)?;
    let dims = TokenizerDims {
        concepts: cfg.free_tokens,
        ..sae.tokenizer()?.dims()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, Stage::Free, sae.layer, INIT_STREAM));
    let mut params = FreeParams::init(dims, cfg.hidden_dim, &mut rng);
    let lambdas = cfg.free_lambdas;
    let losses = fit(&mut params, &cfg.free, cfg.seed, Stage::Free, sae.layer, n, train.views(), |tape, p, idx| {
        let h = tape.constant(gather_rows(&train.feats, idx));
        let hc = tape.constant(gather_rows(&concept, idx));
        let pv = p.on_tape(tape, true);
        let (r, recon) = free_graph(tape, h, &pv)?;
        let loss = free_loss_graph(tape, &r, recon, hc, h, &lambdas)?;
        Ok((loss, pv.all()))
    })?;
    check_frozen(frozen.0, sae.tokenizer()?.fingerprint(), "free-module training")?;
    check_frozen(frozen.1, sae.aggregator()?.fingerprint(), "free-module training")?;
    sae.free = Some(params);
    let held_out = match held {
        Some(d) => chunked_mean(d.len(), |idx| {
            let h = gather_rows(&d.feats, idx);
            mse(&sae.reconstruct(&h)?, &h)
        })?,
        None => f64::NAN,
    };
    Ok(StageRecord {
        stage: Stage::Free,
        layer: sae.layer,
        epoch_losses: losses,
        held_out,
    })
}

/// A failed pipeline run together with every stage that did complete.
#[derive(Debug, Clone)]
pub struct PipelineFailure {
    pub error: Error,
    pub partial: Box<SaeCheckpoint>,
}

impl fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let done: Vec<String> = Stage::ALL
            .iter()
            .filter(|s| self.partial.stage_done(**s))
            .map(|s| format!("{}", s.number()))
            .collect();
        write!(f, "{} (completed stages: [{}])", self.error, done.join(", "))
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PipelineFailure {}

impl SaeCheckpoint {
    /// Train `stage` on every tap layer. Earlier stages must be complete;
    /// on error the checkpoint keeps only fully completed stages.
    pub fn train_stage(&mut self, stage: Stage, data: &Dataset, model: &TargetModel) -> Result<()> {
        if stage > Stage::Tokenizer {
            let required = stage.number() - 1;
            if !self.stages_done[required as usize - 1] {
                return Err(Error::StageOrder {
                    stage: stage.number(),
                    required,
                });
            }
        }
        if model.fingerprint() != self.model_fingerprint {
            return Err(Error::Invalid("checkpoint was started against a different target model".into()));
        }
        if data.vocabulary.len() != self.concepts {
            return Err(Error::DimensionMismatch {
                field: "concepts",
                expected: self.concepts,
                found: data.vocabulary.len(),
            });
        }
        let (train_ids, held_ids) = data.split(self.config.train_fraction);
        if train_ids.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let cfg = self.config.clone();
        let mut layers = self.layers.clone();
        let mut records = Vec::new();
        for sae in layers.iter_mut() {
            let stats = match stage {
                Stage::Tokenizer => FeatureStats::fit(&dataset_features(model, data, &train_ids, sae.layer)?)?,
                _ => sae.stats()?.clone(),
            };
            let train = LayerData::build(model, data, &train_ids, sae, &stats, cfg.mirror_augment)?;
            let held = if held_ids.is_empty() {
                None
            } else {
                Some(LayerData::build(model, data, &held_ids, sae, &stats, false)?)
            };
            sae.stats = Some(stats);
            let rec = match stage {
                Stage::Tokenizer => train_tokenizer_layer(sae, &cfg, self.concepts, &train, held.as_ref())?,
                Stage::Aggregator => train_aggregator_layer(sae, &cfg, &train, held.as_ref())?,
                Stage::Free => train_free_layer(sae, &cfg, &train, held.as_ref())?,
            };
            records.push(rec);
        }
        for (old, new) in self.layers.iter().zip(&layers) {
            for s in Stage::ALL.iter().filter(|&&s| s < stage) {
                check_frozen(old.fingerprint_stage(*s), new.fingerprint_stage(*s), stage.name())?;
            }
        }
        self.layers = layers;
        self.metrics.retain(|r| r.stage < stage);
        self.metrics.extend(records);
        self.stages_done[stage as usize - 1] = true;
        for later in &mut self.stages_done[stage as usize..] {
            *later = false;
        }
        for l in &mut self.layers {
            if stage < Stage::Free {
                l.free = None;
            }
            if stage < Stage::Aggregator {
                l.aggregator = None;
            }
        }
        Ok(())
    }

    /// Run every stage not yet completed, in order.
    pub fn resume(mut self, data: &Dataset, model: &TargetModel) -> core::result::Result<Self, PipelineFailure> {
        for stage in Stage::ALL {
            if self.stage_done(stage) {
                continue;
            }
            if let Err(error) = self.train_stage(stage, data, model) {
                return Err(PipelineFailure {
                    error,
                    partial: Box::new(self),
                });
            }
        }
        Ok(self)
    }
}

/// Train all three stages from scratch.
pub fn run_pipeline(
    data: &Dataset,
    model: &TargetModel,
    config: &PipelineConfig,
) -> core::result::Result<SaeCheckpoint, PipelineFailure> {
    let ckpt = SaeCheckpoint::new(config.clone(), data.vocabulary.len(), model).map_err(|error| PipelineFailure {
        error,
        partial: Box::new(SaeCheckpoint {
            config: config.clone(),
            concepts: data.vocabulary.len(),
            stages_done: [false; 3],
            layers: Vec::new(),
            metrics: Vec::new(),
            model_fingerprint: model.fingerprint(),
        }),
    })?;
    ckpt.resume(data, model)
}

/// MSE of predicting the per-position, per-channel training mean.
pub fn mean_baseline_mse(train: &Tensor<f32>, held: &Tensor<f32>) -> Result<f64> {
    let inner: usize = train.shape()[1..].iter().product();
    if held.shape()[1..] != train.shape()[1..] {
        return Err(shape_err("mean_baseline", format!("{:?} vs {:?}", train.shape(), held.shape())));
    }
    let n = train.shape()[0] as f64;
    let mut mean = vec![0.0f64; inner];
    for row in train.data().chunks(inner) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut total = 0.0;
    for row in held.data().chunks(inner) {
        for (m, &v) in mean.iter().zip(row) {
            let d = v as f64 - m;
            total += d * d;
        }
    }
    Ok(total / held.numel() as f64)
}
