//! Reverse-mode gradients over a [`Model`], a central finite-difference
//! oracle, and the SGD-momentum / Adam optimizers.
//!
//! Batch gradients are computed per sample (in parallel) and then summed in
//! sample order, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mode, Model, ParamId};
use crate::tensor::ChannelStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean negative log-likelihood of the true class.
    CrossEntropy,
    /// Mean over samples of the mean squared error against one-hot targets.
    Mse,
}

impl LossKind {
    fn sample_loss(self, probs: &[f64], label: usize) -> f64 {
        match self {
            LossKind::CrossEntropy => -probs[label].max(f64::MIN_POSITIVE).ln(),
            LossKind::Mse => {
                let c = probs.len() as f64;
                probs.iter().enumerate().map(|(i, p)| (p - if i == label { 1.0 } else { 0.0 }).powi(2)).sum::<f64>() / c
            }
        }
    }

    /// Gradient of the sample loss with respect to the head logits.
    fn grad_logits(self, probs: &[f64], label: usize) -> Vec<f64> {
        match self {
            LossKind::CrossEntropy => {
                probs.iter().enumerate().map(|(i, p)| p - if i == label { 1.0 } else { 0.0 }).collect()
            }
            LossKind::Mse => {
                let c = probs.len() as f64;
                let gp: Vec<f64> =
                    probs.iter().enumerate().map(|(i, p)| 2.0 * (p - if i == label { 1.0 } else { 0.0 }) / c).collect();
                let inner: f64 = gp.iter().zip(probs).map(|(g, p)| g * p).sum();
                probs.iter().zip(&gp).map(|(p, g)| p * (g - inner)).collect()
            }
        }
    }
}

/// Batch-mean loss and gradients for the trainable parameters of a model.
///
/// `grads` has one slot per parameter block in enumeration order; frozen
/// blocks hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub loss: f64,
    pub grads: Vec<Option<Vec<f64>>>,
}

impl GradientTape {
    pub fn grad(&self, id: ParamId) -> Option<f64> {
        self.grads.get(id.block)?.as_ref()?.get(id.index).copied()
    }
}

fn check_batch(model: &Model, inputs: &[ChannelStack], labels: &[usize]) -> Result<()> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::Dimension(format!("{} inputs for {} labels", inputs.len(), labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= model.classes()) {
        return Err(Error::Dimension(format!("label {l} out of range for {} classes", model.classes())));
    }
    Ok(())
}

fn zero_grads(model: &Model) -> Vec<Option<Vec<f64>>> {
    model.params().iter().map(|p| p.trainable.then(|| vec![0.0; p.len()])).collect()
}

/// Batch-mean loss without gradients.
pub fn loss_value(model: &Model, inputs: &[ChannelStack], labels: &[usize], loss: LossKind, mode: Mode) -> Result<f64> {
    check_batch(model, inputs, labels)?;
    let probs = model.forward(inputs, mode)?;
    let total: f64 = probs.iter().zip(labels).map(|(p, &l)| loss.sample_loss(p, l)).sum();
    finite(total / inputs.len() as f64)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("loss is {v}")))
    }
}

/// Loss and exact gradients for one batch.
pub fn backward(
    model: &Model,
    inputs: &[ChannelStack],
    labels: &[usize],
    loss: LossKind,
    mode: Mode,
) -> Result<GradientTape> {
    check_batch(model, inputs, labels)?;
    let per_sample = inputs
        .par_iter()
        .zip(labels)
        .enumerate()
        .map(|(s, (x, &label))| {
            let trace = model.trace(x, mode, s as u64)?;
            let probs = trace.probabilities();
            let l = loss.sample_loss(probs, label);
            let gl = loss.grad_logits(probs, label);
            let mut grads = zero_grads(model);
            model.backprop(&trace, &gl, &mut grads)?;
            Ok((l, grads))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = inputs.len() as f64;
    let mut total = 0.0;
    let mut grads = zero_grads(model);
    for (l, g) in per_sample {
        total += l;
        for (acc, gs) in grads.iter_mut().zip(g) {
            if let (Some(acc), Some(gs)) = (acc, gs) {
                acc.iter_mut().zip(gs).for_each(|(a, b)| *a += b);
            }
        }
    }
    for g in grads.iter_mut().flatten() {
        g.iter_mut().for_each(|v| *v /= n);
    }
    Ok(GradientTape { loss: finite(total / n)?, grads })
}

/// Central difference `(L(theta + eps) - L(theta - eps)) / (2 eps)` for one
/// scalar parameter. Works for frozen parameters too.
pub fn fd_gradient(
    model: &Model,
    inputs: &[ChannelStack],
    labels: &[usize],
    loss: LossKind,
    mode: Mode,
    param: ParamId,
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let theta = model.param(param).ok_or_else(|| Error::Dimension(format!("no parameter {param:?}")))?;
    let mut probe = model.clone();
    probe.set_param(param, theta + eps)?;
    let up = loss_value(&probe, inputs, labels, loss, mode)?;
    probe.set_param(param, theta - eps)?;
    let down = loss_value(&probe, inputs, labels, loss, mode)?;
    Ok((up - down) / (2.0 * eps))
}

/// Central difference of an arbitrary scalar function.
pub fn fd_scalar(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    /// Adam with lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-7.
    pub fn adam_default() -> Self {
        OptimizerKind::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-7 }
    }

    /// SGD with lr 1e-4 and momentum 0.9, the second-stage recipe.
    pub fn sgd_stage_two() -> Self {
        OptimizerKind::SgdMomentum { lr: 1e-4, momentum: 0.9 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    steps: u64,
    /// Velocity (SGD) or first moment (Adam), per block.
    first: Vec<Option<Vec<f64>>>,
    /// Second moment (Adam only), per block.
    second: Vec<Option<Vec<f64>>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState { kind, steps: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every trainable parameter that has a gradient in `tape`.
    /// Frozen parameters are never touched.
    pub fn step(&mut self, model: &mut Model, tape: &GradientTape) -> Result<()> {
        let mut params = model.params_mut();
        if tape.grads.len() != params.len() {
            return Err(Error::Dimension("gradient tape does not match the model".into()));
        }
        if self.first.len() != params.len() {
            self.first = vec![None; params.len()];
            self.second = vec![None; params.len()];
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (b, (p, g)) in params.iter_mut().zip(&tape.grads).enumerate() {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            if g.len() != p.len() {
                return Err(Error::Dimension(format!("gradient block {b} has the wrong length")));
            }
            let m = self.first[b].get_or_insert_with(|| vec![0.0; g.len()]);
            match self.kind {
                OptimizerKind::SgdMomentum { lr, momentum } => {
                    for ((w, v), gi) in p.values.iter_mut().zip(m.iter_mut()).zip(g) {
                        *v = momentum * *v - lr * gi;
                        *w += *v;
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let v = self.second[b].get_or_insert_with(|| vec![0.0; g.len()]);
                    let alpha = lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
                    for (((w, mi), vi), gi) in p.values.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= alpha * *mi / (vi.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
