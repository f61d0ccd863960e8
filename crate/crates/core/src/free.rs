// SPDX-License-Identifier: MIT OR Apache-2.0

//! Unsupervised free tokens that model the residual left by the concept
//! reconstruction.

use alloc::vec::Vec;

use rand::Rng;

use crate::aggregator::{aggregate_graph, AggregatorDims, AggregatorParams, AggregatorVars};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::optim::Parameters;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize_graph, ReadoutVars, TokenizerDims, TokenizerParams, TokenizerVars};

pub const DEFAULT_FREE_TOKENS: usize = 36;

/// Initial score of every free token.
const FREE_SCORE_PRIOR: f64 = 0.02;
/// Free masks start at this fraction of the concept-tokenizer init, and
/// the fusion MLP input weights at this multiple, so the L1 penalty on the
/// readout starts small while the reconstruction path stays trainable.
const FREE_MASK_GAIN: f64 = 0.01;
const FREE_FUSE_GAIN: f64 = 300.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FreeParams<T: Real = f32> {
    pub tokenizer: TokenizerParams<T>,
    pub aggregator: AggregatorParams<T>,
}

impl<T: Real> Parameters<T> for FreeParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.tokenizer.tensors();
        v.extend(self.aggregator.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.tokenizer.tensors_mut();
        v.extend(self.aggregator.tensors_mut());
        v
    }
}

impl<T: Real> FreeParams<T> {
    pub fn init(tok: TokenizerDims, hidden: usize, rng: &mut impl Rng) -> Self {
        let tokenizer = TokenizerParams::init(tok, rng);
        let aggregator = AggregatorParams::init(
            AggregatorDims {
                concepts: tok.concepts,
                positions: tok.positions,
                channels: tok.channels,
                mask: tok.mask,
                hidden,
            },
            rng,
        );
        let mut out = Self { tokenizer, aggregator };
        let prior = T::from_f64(libm::log(FREE_SCORE_PRIOR / (1.0 - FREE_SCORE_PRIOR)));
        out.tokenizer.b_score.data_mut().fill(prior);
        let (mask_gain, fuse_gain) = (T::from_f64(FREE_MASK_GAIN), T::from_f64(FREE_FUSE_GAIN));
        out.tokenizer.w_seg = out.tokenizer.w_seg.map(|v| v * mask_gain);
        out.aggregator.mlp_w1 = out.aggregator.mlp_w1.map(|v| v * fuse_gain);
        out
    }

    pub fn tokens(&self) -> usize {
        self.tokenizer.dims().concepts
    }

    pub fn cast<U: Real>(&self) -> FreeParams<U> {
        FreeParams {
            tokenizer: self.tokenizer.cast(),
            aggregator: self.aggregator.cast(),
        }
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> FreeVars {
        FreeVars {
            tokenizer: self.tokenizer.on_tape(tape, trainable),
            aggregator: self.aggregator.on_tape(tape, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FreeVars {
    pub tokenizer: TokenizerVars,
    pub aggregator: AggregatorVars,
}

impl FreeVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.tokenizer.all();
        v.extend(self.aggregator.all());
        v
    }
}

/// Free-token readout and reconstruction of `[B, P, C]` features.
pub fn free_graph<T: Real>(tape: &mut Tape<T>, h: Var, p: &FreeVars) -> Result<(ReadoutVars, Var)> {
    let r = tokenize_graph(tape, h, &p.tokenizer)?;
    let recon = aggregate_graph(tape, r.s, r.m, &p.aggregator)?;
    Ok((r, recon))
}

/// Free-module reconstruction outside of training.
pub fn free_forward<T: Real>(h: &Tensor<T>, params: &FreeParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let pv = params.on_tape(&mut tape, false);
    let (_, recon) = free_graph(&mut tape, hv, &pv)?;
    Ok(tape.value(recon).clone())
}

/// Loss weights `(λ_recon, λ_sparsity)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FreeLambdas {
    pub recon: f64,
    pub sparsity: f64,
}

impl Default for FreeLambdas {
    fn default() -> Self {
        Self {
            recon: 1.0,
            sparsity: 1.0,
        }
    }
}

/// `λ1·mean((h − ĥ_free − ĥ_concept)²) + λ2·(mean|s_free| + mean|m_free|)`.
pub fn free_loss_graph<T: Real>(
    tape: &mut Tape<T>,
    free: &ReadoutVars,
    free_recon: Var,
    concept_recon: Var,
    h: Var,
    lambdas: &FreeLambdas,
) -> Result<Var> {
    let joint = tape.add(free_recon, concept_recon)?;
    let mse = tape.mse(joint, h)?;
    let ls = tape.mean_abs(free.s);
    let lm = tape.mean_abs(free.m);
    let sp = tape.add(ls, lm)?;
    tape.weighted_sum(&[(T::from_f64(lambdas.recon), mse), (T::from_f64(lambdas.sparsity), sp)])
}
