// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept aggregator: gated concept readouts → reconstructed feature map.
//!
//! ```text
//! f_i = MLP(s_i · m_i)               shared MLP d_s → 2·d_m → d_m
//! q_i = V_i · f_i + d_i              (P)
//! ĥ[p, c] = Σ_i q_i[p] · W_aggr[c, i]
//! ```

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::optim::Parameters;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::tokenizer::uniform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregatorDims {
    pub concepts: usize,
    pub positions: usize,
    pub channels: usize,
    pub mask: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams<T: Real = f32> {
    /// `[d_s, 2·d_m]`
    pub mlp_w1: Tensor<T>,
    /// `[1, 2·d_m]`
    pub mlp_b1: Tensor<T>,
    /// `[2·d_m, d_m]`
    pub mlp_w2: Tensor<T>,
    /// `[1, d_m]`
    pub mlp_b2: Tensor<T>,
    /// `[n, P, d_m]`
    pub decoder: Tensor<T>,
    /// `[n, 1, P]`
    pub decoder_bias: Tensor<T>,
    /// `[C, n]`
    pub w_aggr: Tensor<T>,
}

impl<T: Real> Parameters<T> for AggregatorParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        alloc::vec![
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
            &self.decoder,
            &self.decoder_bias,
            &self.w_aggr,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        alloc::vec![
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.decoder,
            &mut self.decoder_bias,
            &mut self.w_aggr,
        ]
    }
}

impl<T: Real> AggregatorParams<T> {
    pub fn zeros(d: AggregatorDims) -> Self {
        let wide = 2 * d.hidden;
        Self {
            mlp_w1: Tensor::zeros(&[d.mask, wide]),
            mlp_b1: Tensor::zeros(&[1, wide]),
            mlp_w2: Tensor::zeros(&[wide, d.hidden]),
            mlp_b2: Tensor::zeros(&[1, d.hidden]),
            decoder: Tensor::zeros(&[d.concepts, d.positions, d.hidden]),
            decoder_bias: Tensor::zeros(&[d.concepts, 1, d.positions]),
            w_aggr: Tensor::zeros(&[d.channels, d.concepts]),
        }
    }

    pub fn init(d: AggregatorDims, rng: &mut impl Rng) -> Self {
        let inv = |fan: usize| 1.0 / libm::sqrt(fan as f64);
        let wide = 2 * d.hidden;
        let mut p = Self::zeros(d);
        p.mlp_w1 = uniform(&[d.mask, wide], libm::sqrt(6.0 / d.mask as f64), rng);
        p.mlp_w2 = uniform(&[wide, d.hidden], libm::sqrt(6.0 / wide as f64), rng);
        p.decoder = uniform(&[d.concepts, d.positions, d.hidden], inv(d.hidden), rng);
        p.w_aggr = uniform(&[d.channels, d.concepts], inv(d.concepts), rng);
        p
    }

    pub fn dims(&self) -> AggregatorDims {
        let ds = self.decoder.shape();
        AggregatorDims {
            concepts: ds[0],
            positions: ds[1],
            hidden: ds[2],
            channels: self.w_aggr.shape()[0],
            mask: self.mlp_w1.shape()[0],
        }
    }

    pub fn cast<U: Real>(&self) -> AggregatorParams<U> {
        AggregatorParams {
            mlp_w1: self.mlp_w1.cast(),
            mlp_b1: self.mlp_b1.cast(),
            mlp_w2: self.mlp_w2.cast(),
            mlp_b2: self.mlp_b2.cast(),
            decoder: self.decoder.cast(),
            decoder_bias: self.decoder_bias.cast(),
            w_aggr: self.w_aggr.cast(),
        }
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> AggregatorVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AggregatorVars {
            mlp_w1: put(&self.mlp_w1),
            mlp_b1: put(&self.mlp_b1),
            mlp_w2: put(&self.mlp_w2),
            mlp_b2: put(&self.mlp_b2),
            decoder: put(&self.decoder),
            decoder_bias: put(&self.decoder_bias),
            w_aggr: put(&self.w_aggr),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AggregatorVars {
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub decoder: Var,
    pub decoder_bias: Var,
    pub w_aggr: Var,
}

impl AggregatorVars {
    pub fn all(&self) -> Vec<Var> {
        alloc::vec![
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
            self.decoder,
            self.decoder_bias,
            self.w_aggr,
        ]
    }
}

/// Record the aggregator on scores `[n, B, 1]` and masks `[n, B, d_s]`;
/// returns `ĥ` of shape `[B, P, C]`.
pub fn aggregate_graph<T: Real>(tape: &mut Tape<T>, s: Var, m: Var, p: &AggregatorVars) -> Result<Var> {
    let (ss, ms) = (tape.shape(s).to_vec(), tape.shape(m).to_vec());
    let w1 = tape.shape(p.mlp_w1).to_vec();
    let dec = tape.shape(p.decoder).to_vec();
    if ss.len() != 3 || ms.len() != 3 || ss[..2] != ms[..2] || ss[2] != 1 || ms[2] != w1[0] || ms[0] != dec[0] {
        return Err(shape_err(
            "aggregate",
            format!("scores {ss:?}, masks {ms:?}, mlp input {}, concepts {}", w1[0], dec[0]),
        ));
    }
    let (n, b, ds) = (ms[0], ms[1], ms[2]);
    let gate = tape.mul(s, m)?;
    let flat = tape.reshape(gate, &[n * b, ds])?;
    let h1 = tape.matmul(flat, p.mlp_w1)?;
    let h1 = tape.add(h1, p.mlp_b1)?;
    let h1 = tape.relu(h1);
    let f = tape.matmul(h1, p.mlp_w2)?;
    let f = tape.add(f, p.mlp_b2)?;
    let f = tape.reshape(f, &[n, b, dec[2]])?;
    let q = tape.bmm(f, p.decoder, false, true)?; // [n, B, P]
    let q = tape.add(q, p.decoder_bias)?;
    let q = tape.permute(q, &[1, 2, 0])?; // [B, P, n]
    tape.bmm(q, p.w_aggr, false, true) // [B, P, C]
}

/// Evaluate the aggregator outside of training.
pub fn aggregate<T: Real>(s: &Tensor<T>, m: &Tensor<T>, params: &AggregatorParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let mv = tape.constant(m.clone());
    let pv = params.on_tape(&mut tape, false);
    let out = aggregate_graph(&mut tape, sv, mv, &pv)?;
    Ok(tape.value(out).clone())
}

/// Loss weights `(λ_recon, λ_align, λ_sparsity)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AggregatorLambdas {
    pub recon: f64,
    pub align: f64,
    pub aggr_l1: f64,
}

impl Default for AggregatorLambdas {
    fn default() -> Self {
        Self {
            recon: 1.0,
            align: 0.01,
            aggr_l1: 1.0,
        }
    }
}

/// `λ1·mean((h−ĥ)²) + λ2·KL(softmax(W_merge) ‖ softmax(W_aggrᵀ)) + λ3·mean|W_aggr|`,
/// with softmax over channels and KL averaged over concepts.
pub fn aggregator_loss_graph<T: Real>(
    tape: &mut Tape<T>,
    recon: Var,
    h: Var,
    w_merge: Var,
    w_aggr: Var,
    lambdas: &AggregatorLambdas,
) -> Result<Var> {
    let mse = tape.mse(recon, h)?;
    let wt = tape.permute(w_aggr, &[1, 0])?;
    let kl = tape.kl_rowwise(w_merge, wt)?;
    let l1 = tape.mean_abs(w_aggr);
    tape.weighted_sum(&[
        (T::from_f64(lambdas.recon), mse),
        (T::from_f64(lambdas.align), kl),
        (T::from_f64(lambdas.aggr_l1), l1),
    ])
}

/// Aggregator loss for fixed values.
pub fn aggregator_loss<T: Real>(
    recon: &Tensor<T>,
    h: &Tensor<T>,
    w_merge: &Tensor<T>,
    w_aggr: &Tensor<T>,
    lambdas: &AggregatorLambdas,
) -> Result<T> {
    let mut tape = Tape::new();
    let r = tape.constant(recon.clone());
    let hv = tape.constant(h.clone());
    let wm = tape.constant(w_merge.clone());
    let wa = tape.constant(w_aggr.clone());
    let l = aggregator_loss_graph(&mut tape, r, hv, wm, wa, lambdas)?;
    Ok(tape.value(l).item())
}
