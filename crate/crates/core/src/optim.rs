// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam and the step learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{Fingerprint, Tensor};

/// A fixed, ordered collection of parameter tensors.
pub trait Parameters<T: Real> {
    fn tensors(&self) -> Vec<&Tensor<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Bit-exact checksum over all tensors in order.
    fn fingerprint(&self) -> u64 {
        let mut h = Fingerprint::default();
        for t in self.tensors() {
            h.write_tensor(t);
        }
        h.finish()
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState<T: Real = f32> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: Parameters<T> + ?Sized>(params: &P) -> Self {
        Self::for_shapes(params.tensors().iter().map(|t| t.shape()))
    }

    pub fn for_shapes<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: T) -> Result<()> {
        if !(lr > T::ZERO) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err(
                "adam_step",
                format!("{} params, {} grads, {} accumulators", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(shape_err(
                    "adam_step",
                    format!("param {i}: {:?} vs grad {:?} vs state {:?}", p.shape(), g.shape(), self.m[i].shape()),
                ));
            }
        }
        self.t += 1;
        let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
        let eps = T::from_f64(ADAM_EPS);
        let bc1 = T::ONE - b1.powi(self.t as i32);
        let bc2 = T::ONE - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            for (j, &gj) in gd.iter().enumerate() {
                let mj = &mut m.data_mut()[j];
                *mj = b1 * *mj + (T::ONE - b1) * gj;
                let vj = &mut v.data_mut()[j];
                *vj = b2 * *vj + (T::ONE - b2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                pd[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr(e) = base_lr · gamma^floor(e / step_size)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLrSchedule {
    pub base_lr: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl StepLrSchedule {
    pub fn new(base_lr: f64, step_size: usize, gamma: f64) -> Result<Self> {
        if !(base_lr > 0.0) || step_size == 0 || !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Invalid(format!(
                "step schedule needs base_lr > 0, step_size >= 1, gamma in (0, 1]; got ({base_lr}, {step_size}, {gamma})"
            )));
        }
        Ok(Self {
            base_lr,
            step_size,
            gamma,
        })
    }

    /// Constant learning rate.
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            step_size: usize::MAX,
            gamma: 1.0,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        step_lr(epoch, self)
    }
}

pub fn step_lr(epoch: usize, schedule: &StepLrSchedule) -> f64 {
    let decays = (epoch / schedule.step_size) as i32;
    schedule.base_lr * libm::pow(schedule.gamma, decays as f64)
}
