// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept tokenizer: feature map → per-concept embeddings, existence
//! scores and spatial masks.
//!
//! For concept `i` with channel-selection row `w_merge[i]`:
//!
//! ```text
//! g_i = H · w_merge[i]                (P)
//! z_i = U_i · g_i + c_i               (d_t)
//! s_i = sigmoid(z_i · W_score,i + b_score,i)
//! m_i = z_i · W_seg,i + b_seg,i       (d_s)
//! ```
//!
//! Batched graphs keep concepts on the leading axis: `z` is `[n, B, d_t]`,
//! `s` is `[n, B, 1]` and `m` is `[n, B, d_s]`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::optim::Parameters;
use crate::real::Real;
use crate::tensor::Tensor;

/// Structural sizes of one tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerDims {
    pub concepts: usize,
    pub positions: usize,
    pub channels: usize,
    pub embed: usize,
    pub mask: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerParams<T: Real = f32> {
    /// `[n, C]`
    pub w_merge: Tensor<T>,
    /// `[n, d_t, P]`
    pub proj: Tensor<T>,
    /// `[n, 1, d_t]`
    pub proj_bias: Tensor<T>,
    /// `[n, d_t, 1]`
    pub w_score: Tensor<T>,
    /// `[n, 1, 1]`
    pub b_score: Tensor<T>,
    /// `[n, d_t, d_s]`
    pub w_seg: Tensor<T>,
    /// `[n, 1, d_s]`
    pub b_seg: Tensor<T>,
}

impl<T: Real> Parameters<T> for TokenizerParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        alloc::vec![
            &self.w_merge,
            &self.proj,
            &self.proj_bias,
            &self.w_score,
            &self.b_score,
            &self.w_seg,
            &self.b_seg,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        alloc::vec![
            &mut self.w_merge,
            &mut self.proj,
            &mut self.proj_bias,
            &mut self.w_score,
            &mut self.b_score,
            &mut self.w_seg,
            &mut self.b_seg,
        ]
    }
}

pub(crate) fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}

impl<T: Real> TokenizerParams<T> {
    pub fn zeros(d: TokenizerDims) -> Self {
        Self {
            w_merge: Tensor::zeros(&[d.concepts, d.channels]),
            proj: Tensor::zeros(&[d.concepts, d.embed, d.positions]),
            proj_bias: Tensor::zeros(&[d.concepts, 1, d.embed]),
            w_score: Tensor::zeros(&[d.concepts, d.embed, 1]),
            b_score: Tensor::zeros(&[d.concepts, 1, 1]),
            w_seg: Tensor::zeros(&[d.concepts, d.embed, d.mask]),
            b_seg: Tensor::zeros(&[d.concepts, 1, d.mask]),
        }
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(d: TokenizerDims, rng: &mut impl Rng) -> Self {
        let inv = |fan: usize| 1.0 / libm::sqrt(fan as f64);
        let mut p = Self::zeros(d);
        p.w_merge = uniform(&[d.concepts, d.channels], inv(d.channels), rng);
        p.proj = uniform(&[d.concepts, d.embed, d.positions], inv(d.positions), rng);
        p.w_score = uniform(&[d.concepts, d.embed, 1], inv(d.embed), rng);
        p.w_seg = uniform(&[d.concepts, d.embed, d.mask], inv(d.embed), rng);
        p
    }

    pub fn dims(&self) -> TokenizerDims {
        let ps = self.proj.shape();
        TokenizerDims {
            concepts: ps[0],
            embed: ps[1],
            positions: ps[2],
            channels: self.w_merge.shape()[1],
            mask: self.w_seg.shape()[2],
        }
    }

    pub fn cast<U: Real>(&self) -> TokenizerParams<U> {
        TokenizerParams {
            w_merge: self.w_merge.cast(),
            proj: self.proj.cast(),
            proj_bias: self.proj_bias.cast(),
            w_score: self.w_score.cast(),
            b_score: self.b_score.cast(),
            w_seg: self.w_seg.cast(),
            b_seg: self.b_seg.cast(),
        }
    }

    /// Record the parameters on `tape`, as leaves when `trainable`.
    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> TokenizerVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        TokenizerVars {
            w_merge: put(&self.w_merge),
            proj: put(&self.proj),
            proj_bias: put(&self.proj_bias),
            w_score: put(&self.w_score),
            b_score: put(&self.b_score),
            w_seg: put(&self.w_seg),
            b_seg: put(&self.b_seg),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TokenizerVars {
    pub w_merge: Var,
    pub proj: Var,
    pub proj_bias: Var,
    pub w_score: Var,
    pub b_score: Var,
    pub w_seg: Var,
    pub b_seg: Var,
}

impl TokenizerVars {
    /// Same order as [`Parameters::tensors`].
    pub fn all(&self) -> Vec<Var> {
        alloc::vec![
            self.w_merge,
            self.proj,
            self.proj_bias,
            self.w_score,
            self.b_score,
            self.w_seg,
            self.b_seg,
        ]
    }
}

/// Batched tokenizer outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ReadoutVars {
    /// `[n, B, d_t]`
    pub z: Var,
    /// `[n, B, 1]`
    pub s: Var,
    /// `[n, B, d_s]`
    pub m: Var,
}

/// Record the tokenizer on `h` of shape `[B, P, C]`.
pub fn tokenize_graph<T: Real>(tape: &mut Tape<T>, h: Var, p: &TokenizerVars) -> Result<ReadoutVars> {
    let hs = tape.shape(h).to_vec();
    let ws = tape.shape(p.w_merge).to_vec();
    let us = tape.shape(p.proj).to_vec();
    if hs.len() != 3 || hs[2] != ws[1] || hs[1] != us[2] {
        return Err(shape_err(
            "tokenize",
            format!("features {hs:?} vs tokenizer (n, C) = {ws:?}, P = {}", us[2]),
        ));
    }
    let g = tape.bmm(h, p.w_merge, false, true)?; // [B, P, n]
    let g = tape.permute(g, &[2, 0, 1])?; // [n, B, P]
    let z = tape.bmm(g, p.proj, false, true)?; // [n, B, d_t]
    let z = tape.add(z, p.proj_bias)?;
    let logit = tape.bmm(z, p.w_score, false, false)?; // [n, B, 1]
    let logit = tape.add(logit, p.b_score)?;
    let s = tape.sigmoid(logit);
    let m = tape.bmm(z, p.w_seg, false, false)?; // [n, B, d_s]
    let m = tape.add(m, p.b_seg)?;
    Ok(ReadoutVars { z, s, m })
}

/// Tokenizer output for a single feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptReadout<T: Real = f32> {
    /// `[n, d_t]`
    pub z: Tensor<T>,
    /// `n` scores in `(0, 1)`.
    pub s: Vec<T>,
    /// `[n, d_s]`
    pub m: Tensor<T>,
}

/// Tokenizer output for a batch, concept-major like the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchReadout<T: Real = f32> {
    /// `[n, B, d_t]`
    pub z: Tensor<T>,
    /// `[n, B, 1]`
    pub s: Tensor<T>,
    /// `[n, B, d_s]`
    pub m: Tensor<T>,
}

impl<T: Real> BatchReadout<T> {
    pub fn batch_size(&self) -> usize {
        self.s.shape()[1]
    }

    pub fn concepts(&self) -> usize {
        self.s.shape()[0]
    }

    /// Scores of image `b`.
    pub fn scores(&self, b: usize) -> Vec<T> {
        let bs = self.batch_size();
        (0..self.concepts()).map(|i| self.s.data()[i * bs + b]).collect()
    }

    pub fn readout(&self, b: usize) -> ConceptReadout<T> {
        let pick = |t: &Tensor<T>| -> Tensor<T> {
            let (n, bs, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            Tensor::from_fn(&[n, d], |j| t.data()[(j / d) * bs * d + b * d + j % d])
        };
        ConceptReadout {
            z: pick(&self.z),
            s: self.scores(b),
            m: pick(&self.m),
        }
    }
}

impl<T: Real> ConceptReadout<T> {
    /// Batch-of-one layout `(s [n,1,1], m [n,1,d_s])` for graph inputs.
    pub fn as_batch(&self) -> (Tensor<T>, Tensor<T>) {
        let n = self.s.len();
        let d = self.m.shape()[1];
        (
            Tensor::new(&[n, 1, 1], self.s.clone()).expect("score shape"),
            self.m.clone().reshape(&[n, 1, d]).expect("mask shape"),
        )
    }
}

/// Evaluate the tokenizer on `[B, P, C]` features.
pub fn tokenize_batch<T: Real>(h: &Tensor<T>, params: &TokenizerParams<T>) -> Result<BatchReadout<T>> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let pv = params.on_tape(&mut tape, false);
    let r = tokenize_graph(&mut tape, hv, &pv)?;
    Ok(BatchReadout {
        z: tape.value(r.z).clone(),
        s: tape.value(r.s).clone(),
        m: tape.value(r.m).clone(),
    })
}

/// Evaluate the tokenizer on one `[P, C]` feature map.
pub fn tokenize<T: Real>(h: &Tensor<T>, params: &TokenizerParams<T>) -> Result<ConceptReadout<T>> {
    let s = h.shape();
    if s.len() != 2 {
        return Err(shape_err("tokenize", format!("expected [P, C], got {s:?}")));
    }
    let batch = h.clone().reshape(&[1, s[0], s[1]])?;
    Ok(tokenize_batch(&batch, params)?.readout(0))
}

/// Loss weights `(λ_score, λ_mask, λ_sparsity)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TokenizerLambdas {
    pub score: f64,
    pub mask: f64,
    pub merge_l1: f64,
}

impl Default for TokenizerLambdas {
    fn default() -> Self {
        Self {
            score: 1.0,
            mask: 1.0,
            merge_l1: 0.1,
        }
    }
}

/// `λ1·mean((S−s)²) + λ2·mean((M−m)²) + λ3·mean|W_merge|`.
///
/// `targets_s` is `[n, B, 1]`, `targets_m` is `[n, B, d_s]`.
pub fn tokenizer_loss_graph<T: Real>(
    tape: &mut Tape<T>,
    readout: &ReadoutVars,
    targets_s: Var,
    targets_m: Var,
    w_merge: Var,
    lambdas: &TokenizerLambdas,
) -> Result<Var> {
    let ls = tape.mse(readout.s, targets_s)?;
    let lm = tape.mse(readout.m, targets_m)?;
    let l1 = tape.mean_abs(w_merge);
    tape.weighted_sum(&[
        (T::from_f64(lambdas.score), ls),
        (T::from_f64(lambdas.mask), lm),
        (T::from_f64(lambdas.merge_l1), l1),
    ])
}

/// Loss of one readout against its annotation.
pub fn tokenizer_loss<T: Real>(
    readout: &ConceptReadout<T>,
    scores: &[T],
    masks: &Tensor<T>,
    params: &TokenizerParams<T>,
    lambdas: &TokenizerLambdas,
) -> Result<T> {
    if scores.len() != readout.s.len() || masks.shape() != readout.m.shape() {
        return Err(shape_err(
            "tokenizer_loss",
            format!(
                "readout ({}, {:?}) vs annotation ({}, {:?})",
                readout.s.len(),
                readout.m.shape(),
                scores.len(),
                masks.shape()
            ),
        ));
    }
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(&[scores.len()], readout.s.clone())?);
    let ts = tape.constant(Tensor::new(&[scores.len()], scores.to_vec())?);
    let m = tape.constant(readout.m.clone());
    let tm = tape.constant(masks.clone());
    let w = tape.constant(params.w_merge.clone());
    let r = ReadoutVars { z: s, s, m };
    let loss = tokenizer_loss_graph(&mut tape, &r, ts, tm, w, lambdas)?;
    Ok(tape.value(loss).item())
}
