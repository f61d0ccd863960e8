// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference classifier with tap points, forward resumption and FGSM.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{mix_seed, Dataset, IMAGE_SHAPE, NUM_CLASSES};
use crate::error::{shape_err, Error, Result};
use crate::optim::{AdamState, Parameters};
use crate::real::Real;
use crate::tensor::{Fingerprint, Tensor};

/// Intermediate representation at one tap, viewed as `P × C`
/// (`P = height·width` positions in row-major order).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Real = f32> {
    pub height: usize,
    pub width: usize,
    /// `[P, C]`
    pub values: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    /// From a `[C, H, W]` activation.
    pub fn from_chw(chw: &Tensor<T>) -> Result<Self> {
        let s = chw.shape();
        if s.len() != 3 {
            return Err(shape_err("feature_map", format!("expected [C, H, W], got {s:?}")));
        }
        let values = chw.clone().reshape(&[s[0], s[1] * s[2]])?.transpose2()?;
        Ok(Self {
            height: s[1],
            width: s[2],
            values,
        })
    }

    pub fn to_chw(&self) -> Result<Tensor<T>> {
        let c = self.channels();
        self.values
            .transpose2()?
            .reshape(&[c, self.height, self.width])
    }

    pub fn positions(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// 3×3, stride 1, padding 1.
    Conv {
        kernel: Tensor<f32>,
        bias: Tensor<f32>,
    },
    Relu,
    MaxPool,
    Flatten,
    Dense {
        weight: Tensor<f32>,
        bias: Tensor<f32>,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv3x3",
            Layer::Relu => "relu",
            Layer::MaxPool => "maxpool2x2",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Dense { .. })
    }

    fn params(&self) -> Vec<&Tensor<f32>> {
        match self {
            Layer::Conv { kernel, bias } => vec![kernel, bias],
            Layer::Dense { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        match self {
            Layer::Conv { kernel, bias } => vec![kernel, bias],
            Layer::Dense { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }
}

/// Which layers contribute differentiable parameters to a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    None,
    All,
    Only(usize),
}

impl Trainable {
    fn includes(self, layer: usize) -> bool {
        match self {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Only(l) => l == layer,
        }
    }
}

/// Output of a forward pass on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TapBundle {
    pub taps: BTreeMap<usize, FeatureMap<f32>>,
    pub logits: Vec<f32>,
    pub predicted: usize,
}

/// Graph handles for a batched forward pass.
pub struct ForwardGraph {
    pub logits: Var,
    /// `(layer, var)` for every requested tap, `[B, C, H, W]`.
    pub taps: Vec<(usize, Var)>,
    /// `(layer, param index within layer, var)` for differentiable params.
    pub params: Vec<(usize, usize, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub layers: Vec<Layer>,
    pub tap_points: Vec<usize>,
    pub num_classes: usize,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
}

impl Parameters<f32> for TargetModel {
    fn tensors(&self) -> Vec<&Tensor<f32>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

const CHANNELS: [usize; 3] = [16, 32, 64];

impl TargetModel {
    /// conv16-relu-pool / conv32-relu-pool / conv64-relu / flatten / dense,
    /// with taps after each relu (layers 1, 4 and 7).
    pub fn reference(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7a26));
        let mut conv = |cin: usize, cout: usize| {
            let fan_in = (cin * 9) as f32;
            let bound = libm::sqrtf(6.0 / fan_in);
            Layer::Conv {
                kernel: Tensor::from_fn(&[cout, cin, 3, 3], |_| rng.random_range(-bound..bound)),
                bias: Tensor::zeros(&[cout, 1, 1]),
            }
        };
        let c1 = conv(3, CHANNELS[0]);
        let c2 = conv(CHANNELS[0], CHANNELS[1]);
        let c3 = conv(CHANNELS[1], CHANNELS[2]);
        let flat = CHANNELS[2] * 8 * 8;
        let bound = 1.0 / libm::sqrtf(flat as f32);
        let dense = Layer::Dense {
            weight: Tensor::from_fn(&[flat, NUM_CLASSES], |_| rng.random_range(-bound..bound)),
            bias: Tensor::zeros(&[1, NUM_CLASSES]),
        };
        Self {
            layers: vec![
                c1,
                Layer::Relu,
                Layer::MaxPool,
                c2,
                Layer::Relu,
                Layer::MaxPool,
                c3,
                Layer::Relu,
                Layer::Flatten,
                dense,
            ],
            tap_points: vec![1, 4, 7],
            num_classes: NUM_CLASSES,
            train_accuracy: None,
            val_accuracy: None,
        }
    }

    /// Reference architecture with every parameter set to zero.
    pub fn zeros() -> Self {
        let mut m = Self::reference(0);
        for t in m.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        m
    }

    /// Activation shape `[C, H, W]` after `layer` for a 3×32×32 input.
    pub fn layer_shape(&self, layer: usize) -> Result<Vec<usize>> {
        if layer >= self.layers.len() {
            return Err(Error::UnknownLayer(layer));
        }
        let mut shape = IMAGE_SHAPE.to_vec();
        for l in &self.layers[..=layer] {
            shape = match l {
                Layer::Conv { kernel, .. } => vec![kernel.shape()[0], shape[1], shape[2]],
                Layer::Relu => shape,
                Layer::MaxPool => vec![shape[0], shape[1] / 2, shape[2] / 2],
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Dense { weight, .. } => vec![weight.shape()[1]],
            };
        }
        Ok(shape)
    }

    pub fn fingerprint_layer(&self, layer: usize) -> u64 {
        let mut h = Fingerprint::default();
        for t in self.layers[layer].params() {
            h.write_tensor(t);
        }
        h.finish()
    }

    /// Record layers `from..` on `tape`, starting from `input` of shape
    /// `[B, ...]` matching the activation entering layer `from`.
    pub fn build<T: Real>(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        from: usize,
        taps: &[usize],
        trainable: Trainable,
    ) -> Result<ForwardGraph> {
        let mut x = input;
        let mut tap_vars = Vec::new();
        let mut params = Vec::new();
        for (li, layer) in self.layers.iter().enumerate().skip(from) {
            let mut param = |tape: &mut Tape<T>, t: &Tensor<f32>, pi: usize| {
                
                if trainable.includes(li) {
                    let v = tape.leaf(t.cast());
                    params.push((li, pi, v));
                    v
                } else {
                    tape.constant(t.cast())
                }
            };
            x = match layer {
                Layer::Conv { kernel, bias } => {
                    let k = param(tape, kernel, 0);
                    let b = param(tape, bias, 1);
                    let y = tape.conv2d(x, k, 1, 1)?;
                    tape.add(y, b)?
                }
                Layer::Relu => tape.relu(x),
                Layer::MaxPool => tape.maxpool2(x)?,
                Layer::Flatten => {
                    let s = tape.shape(x).to_vec();
                    let inner: usize = s[1..].iter().product();
                    tape.reshape(x, &[s[0], inner])?
                }
                Layer::Dense { weight, bias } => {
                    let w = param(tape, weight, 0);
                    let b = param(tape, bias, 1);
                    let y = tape.matmul(x, w)?;
                    tape.add(y, b)?
                }
            };
            if taps.contains(&li) {
                tap_vars.push((li, x));
            }
        }
        Ok(ForwardGraph {
            logits: x,
            taps: tap_vars,
            params,
        })
    }

    fn check_image(&self, image: &Tensor<f32>) -> Result<()> {
        if image.shape() != IMAGE_SHAPE {
            return Err(shape_err(
                "forward",
                format!("expected image {IMAGE_SHAPE:?}, got {:?}", image.shape()),
            ));
        }
        Ok(())
    }

    fn check_taps(&self, taps: &[usize]) -> Result<()> {
        match taps.iter().find(|&&t| t >= self.layers.len()) {
            Some(&t) => Err(Error::UnknownLayer(t)),
            None => Ok(()),
        }
    }

    /// Forward one image, exporting features at `taps`.
    pub fn forward_with_taps(&self, image: &Tensor<f32>, taps: &[usize]) -> Result<TapBundle> {
        self.check_image(image)?;
        let batch = image.clone().reshape(&[1, 3, 32, 32])?;
        let (logits, tap_values) = self.forward_batch(&batch, taps)?;
        let mut out = BTreeMap::new();
        for (layer, t) in tap_values {
            out.insert(layer, FeatureMap::from_chw(&t.index0(0))?);
        }
        let logits = logits.data().to_vec();
        Ok(TapBundle {
            predicted: argmax(&logits),
            logits,
            taps: out,
        })
    }

    /// Batched forward: logits `[B, K]` and `[B, C, H, W]` tap activations.
    pub fn forward_batch(
        &self,
        images: &Tensor<f32>,
        taps: &[usize],
    ) -> Result<(Tensor<f32>, Vec<(usize, Tensor<f32>)>)> {
        self.check_taps(taps)?;
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(images.clone());
        let g = self.build(&mut tape, x, 0, taps, Trainable::None)?;
        let taps = g
            .taps
            .iter()
            .map(|&(l, v)| (l, tape.value(v).clone()))
            .collect();
        Ok((tape.value(g.logits).clone(), taps))
    }

    /// Run only the layers after `layer`, starting from `feature`.
    pub fn resume_from(&self, layer: usize, feature: &FeatureMap<f32>) -> Result<Vec<f32>> {
        let chw = feature.to_chw()?;
        let mut shape = vec![1];
        shape.extend_from_slice(chw.shape());
        let logits = self.resume_batch(layer, &chw.reshape(&shape)?)?;
        Ok(logits.into_data())
    }

    /// Batched resumption from `[B, C, H, W]` activations after `layer`.
    pub fn resume_batch(&self, layer: usize, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let native = self.layer_shape(layer)?;
        if features.shape()[1..] != native[..] {
            return Err(shape_err(
                "resume_from",
                format!("layer {layer} produces {native:?}, got {:?}", &features.shape()[1..]),
            ));
        }
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(features.clone());
        let g = self.build(&mut tape, x, layer + 1, &[], Trainable::None)?;
        Ok(tape.value(g.logits).clone())
    }

    pub fn predict_batch(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let (logits, _) = self.forward_batch(images, &[])?;
        Ok(logits.data().chunks(self.num_classes).map(argmax).collect())
    }

    /// Predictions for a `[N, 3, 32, 32]` stack, evaluated in chunks.
    pub fn predict_batch_chunked(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let n = images.shape()[0];
        let idx: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(n);
        for chunk in idx.chunks(128) {
            out.extend(self.predict_batch(&crate::pipeline::gather_rows(images, chunk))?);
        }
        Ok(out)
    }

    /// Predictions for dataset samples `ids`, evaluated in chunks.
    pub fn predict(&self, data: &Dataset, ids: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(128) {
            out.extend(self.predict_batch(&data.batch(chunk))?);
        }
        Ok(out)
    }

    pub fn accuracy(&self, data: &Dataset, ids: &[usize]) -> Result<f64> {
        accuracy_of(&self.predict(data, ids)?, &ids.iter().map(|&i| data.samples[i].label).collect::<Vec<_>>())
    }

    pub fn accuracy_on(&self, images: &[Tensor<f32>], labels: &[usize]) -> Result<f64> {
        let mut preds = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
            preds.extend(self.predict_batch(&Tensor::stack(&refs)?)?);
        }
        accuracy_of(&preds, labels)
    }

    /// One optimizer step on a batch; returns the batch loss.
    pub fn train_step(
        &mut self,
        images: &Tensor<f32>,
        labels: &[usize],
        trainable: Trainable,
        adam: &mut AdamState<f32>,
        lr: f32,
    ) -> Result<f32> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(images.clone());
        let g = self.build(&mut tape, x, 0, &[], trainable)?;
        let loss = tape.cross_entropy(g.logits, labels)?;
        let mut grads = tape.backward(loss)?;
        let vars: Vec<Var> = g.params.iter().map(|p| p.2).collect();
        let grads = grads.wrt(&tape, &vars);
        let mut params: Vec<&mut Tensor<f32>> = Vec::new();
        for (li, layer) in self.layers.iter_mut().enumerate() {
            if trainable.includes(li) {
                params.extend(layer.params_mut());
            }
        }
        adam.step(&mut params, &grads, lr)?;
        Ok(tape.value(loss).item())
    }

    pub fn trainable_shapes(&self, trainable: Trainable) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(li, _)| trainable.includes(*li))
            .flat_map(|(_, l)| l.params().into_iter().map(|t| t.shape().to_vec()))
            .collect()
    }
}

pub fn accuracy_of(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::Invalid(format!(
            "accuracy over {} predictions and {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Training hyperparameters for the reference classifier.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TargetTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub train_fraction: f64,
    /// Mirror each training image left-right with probability 1/2. Every
    /// class is symmetric under this flip.
    pub flip_augment: bool,
}

impl Default for TargetTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            train_fraction: 0.8,
            flip_augment: true,
        }
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Reverse every run of `width` values, mirroring images or grids
/// stored row-major with `width` as the trailing axis.
pub fn mirror_rows(data: &mut [f32], width: usize) {
    for row in data.chunks_mut(width) {
        row.reverse();
    }
}

/// Mirror random images of a `[B, C, H, W]` batch along the width axis.
pub fn random_hflip(batch: &mut Tensor<f32>, seed: u64) {
    let s = batch.shape().to_vec();
    let (b, w) = (s[0], s[3]);
    let per_image = s[1] * s[2] * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for bi in 0..b {
        if rng.random_bool(0.5) {
            mirror_rows(&mut batch.data_mut()[bi * per_image..(bi + 1) * per_image], w);
        }
    }
}

/// Deterministic epoch order of `ids`.
pub fn shuffled(ids: &[usize], seed: u64) -> Vec<usize> {
    let mut order = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Train the reference classifier on the leading `train_fraction` of
/// `data`; the remainder is the validation split.
pub fn train_target(data: &Dataset, config: &TargetTrainConfig) -> Result<(TargetModel, TargetTrainLog)> {
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let (train, val) = data.split(config.train_fraction);
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut model = TargetModel::reference(config.seed);
    let shapes = model.trainable_shapes(Trainable::All);
    let mut adam = AdamState::<f32>::for_shapes(shapes.iter().map(|s| s.as_slice()));
    let mut log = TargetTrainLog {
        epoch_losses: Vec::new(),
    };
    for epoch in 0..config.epochs {
        let order = shuffled(&train, mix_seed(config.seed, 0x1000 + epoch as u64));
        let mut total = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label).collect();
            let mut batch = data.batch(chunk);
            if config.flip_augment {
                let seed = mix_seed(config.seed, ((epoch as u64) << 32) | step as u64);
                random_hflip(&mut batch, seed);
            }
            let loss = model.train_step(&batch, &labels, Trainable::All, &mut adam, config.lr as f32);
            let loss = match loss {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(diverged("target training", epoch, step, l as f64)),
                Err(Error::NonFinite { .. }) => return Err(diverged("target training", epoch, step, f64::NAN)),
                Err(e) => return Err(e),
            };
            total += loss as f64 * chunk.len() as f64;
        }
        log.epoch_losses.push(total / train.len() as f64);
    }
    model.train_accuracy = Some(model.accuracy(data, &train)?);
    model.val_accuracy = if val.is_empty() {
        None
    } else {
        Some(model.accuracy(data, &val)?)
    };
    Ok((model, log))
}

pub(crate) fn diverged(stage: &'static str, epoch: usize, step: usize, loss: f64) -> Error {
    Error::Diverged {
        stage,
        epoch,
        step,
        loss,
    }
}

/// Mean cross-entropy of the model on `ids`.
pub fn mean_loss(model: &TargetModel, data: &Dataset, ids: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in ids.chunks(128) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(data.batch(chunk));
        let g = model.build(&mut tape, x, 0, &[], Trainable::None)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label).collect();
        let l = tape.cross_entropy(g.logits, &labels)?;
        total += tape.value(l).item() as f64 * chunk.len() as f64;
    }
    Ok(total / ids.len() as f64)
}

/// `clip[0,1](x + ε·sign(∂CE/∂x))`, batched over `[B, 3, 32, 32]`.
pub fn fgsm_batch(model: &TargetModel, images: &Tensor<f32>, labels: &[usize], epsilon: f32) -> Result<Tensor<f32>> {
    if !(epsilon >= 0.0) {
        return Err(Error::Invalid(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(images.clone());
    }
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(images.clone());
    let g = model.build(&mut tape, x, 0, &[], Trainable::None)?;
    let loss = tape.cross_entropy(g.logits, labels)?;
    let grads = tape.backward(loss)?;
    let grad = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(images.shape()));
    images.zip_map(&grad, |v, d| (v + epsilon * d.signum_or_zero()).clamp(0.0, 1.0))
}

pub fn fgsm(model: &TargetModel, image: &Tensor<f32>, label: usize, epsilon: f32) -> Result<Tensor<f32>> {
    model.check_image(image)?;
    let batch = image.clone().reshape(&[1, 3, 32, 32])?;
    fgsm_batch(model, &batch, &[label], epsilon)?.reshape(&IMAGE_SHAPE)
}

/// Adversarial copies of dataset samples, tagged with the checksum of the
/// model they were generated against.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSet {
    pub ids: Vec<usize>,
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub epsilon: f32,
    pub model_fingerprint: u64,
}

pub fn generate_adversarial(model: &TargetModel, data: &Dataset, ids: &[usize], epsilon: f32) -> Result<AdversarialSet> {
    let mut images = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(64) {
        let labels: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label).collect();
        let adv = fgsm_batch(model, &data.batch(chunk), &labels, epsilon)?;
        for b in 0..chunk.len() {
            images.push(adv.index0(b));
        }
    }
    Ok(AdversarialSet {
        ids: ids.to_vec(),
        labels: ids.iter().map(|&i| data.samples[i].label).collect(),
        images,
        epsilon,
        model_fingerprint: model.fingerprint(),
    })
}

pub fn describe(model: &TargetModel) -> String {
    let mut s = String::new();
    for (i, l) in model.layers.iter().enumerate() {
        let tap = if model.tap_points.contains(&i) { " [tap]" } else { "" };
        s.push_str(&format!("{i}: {}{tap}\n", l.kind()));
    }
    s
}
