//! Entropy objectives and the update rules that minimize them.
//!
//! [`esm_step`] is the two-pass sharpness-aware entropy update:
//!
//! 1. `g = ∇E(Θ)` on the batch,
//! 2. `ε̂ = ρ g / ‖g‖₂` (global norm over all trainable tensors),
//! 3. `g' = ∇E(Θ + ε̂)`,
//! 4. restore `Θ`, then take an Adam step along `g'`.
//!
//! [`em_step`] is the plain entropy-minimization update (`g' = g`).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{BnMode, Network};
use crate::params::{Grads, ParamSet};
use crate::tape::{GradScope, Tape};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment accumulators, created lazily per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }
}

/// Bias-corrected Adam: `θ ← θ - η m̂ / (√v̂ + ε)` for every entry of `grads`.
pub fn adam_update(
    params: &mut ParamSet,
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!("gradient for unknown parameter `{name}`"))
        })?;
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_update",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for (name, g) in grads.iter() {
        let m1 = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        let m2 = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        let theta = params.get_mut(name).expect("checked above").data_mut();
        for (((w, a), b), &gi) in theta
            .iter_mut()
            .zip(m1.iter_mut())
            .zip(m2.iter_mut())
            .zip(g.data())
        {
            *a = ADAM_BETA1 * *a + (1.0 - ADAM_BETA1) * gi;
            *b = ADAM_BETA2 * *b + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *a / bc1;
            let v_hat = *b / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsmConfig {
    /// Radius of the L2 ball the perturbation lives on.
    pub rho: f64,
    pub lr: f64,
    /// Below this gradient norm no perturbation is applied.
    pub grad_floor: f64,
    pub esm_enabled: bool,
}

impl Default for EsmConfig {
    fn default() -> Self {
        Self {
            rho: 0.05,
            lr: 0.001,
            grad_floor: 1e-12,
            esm_enabled: true,
        }
    }
}

impl EsmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rho must be >= 0, got {}",
                self.rho
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if !(self.grad_floor >= 0.0) {
            return Err(Error::InvalidArgument("grad_floor must be >= 0".into()));
        }
        Ok(())
    }
}

/// `ρ g / ‖g‖₂` with the norm taken jointly over every tensor; zero when
/// `‖g‖₂ < grad_floor`.
pub fn epsilon_hat(grads: &Grads, rho: f64, grad_floor: f64) -> Grads {
    let norm = grads.global_norm();
    if norm < grad_floor || norm == 0.0 {
        return grads.scale(0.0);
    }
    grads.scale(rho / norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Entropy at Θ.
    pub loss: f64,
    /// Entropy at Θ + ε̂ (equal to `loss` for the plain step).
    pub perturbed_loss: f64,
    /// ‖∇E(Θ)‖₂.
    pub grad_norm: f64,
    /// ‖∇E(Θ + ε̂)‖₂, the gradient actually applied.
    pub update_grad_norm: f64,
}

/// Mean batch entropy under running-statistic BN and its trainable gradients.
pub fn entropy_and_grads(net: &Network, batch: &Tensor) -> Result<(f64, Grads)> {
    entropy_and_grads_at(net, net.params(), batch)
}

/// As [`entropy_and_grads`], with `params` standing in for the network's own.
pub fn entropy_and_grads_at(
    net: &Network,
    params: &ParamSet,
    batch: &Tensor,
) -> Result<(f64, Grads)> {
    if batch.rows() == 0 {
        return Err(Error::NoSamples);
    }
    let mut tape = Tape::new();
    let vars = tape.register(params, GradScope::Trainable);
    let input = tape.constant(batch.clone());
    let (logits, _) = net.forward_on(&mut tape, &vars, input, BnMode::Running)?;
    let loss = tape.mean_entropy(logits)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?.for_params(params);
    Ok((value, grads))
}

fn add_in_place(params: &mut ParamSet, delta: &Grads) {
    for (name, d) in delta.iter() {
        let p = params
            .get_mut(name)
            .expect("perturbation names come from params");
        p.data_mut()
            .iter_mut()
            .zip(d.data())
            .for_each(|(w, e)| *w += e);
    }
}

/// The perturb / re-differentiate / restore / Adam sequence over any
/// differentiable objective of `params`.
///
/// `objective` returns the loss and gradients for the current values. The
/// restore step copies the saved tensors back, so Θ before the Adam update is
/// bit-identical to Θ on entry.
pub fn sharpness_aware_step(
    params: &mut ParamSet,
    mut objective: impl FnMut(&ParamSet) -> Result<(f64, Grads)>,
    cfg: &EsmConfig,
    adam: &mut AdamState,
) -> Result<StepReport> {
    let (loss, g) = objective(params)?;
    let eps = epsilon_hat(&g, cfg.rho, cfg.grad_floor);
    let saved: Vec<(String, Tensor)> = eps
        .iter()
        .map(|(n, _)| {
            (
                n.to_string(),
                params.get(n).expect("grad names come from params").clone(),
            )
        })
        .collect();
    add_in_place(params, &eps);
    let second = objective(params);
    for (name, t) in saved {
        *params.get_mut(&name).expect("saved above") = t;
    }
    let (perturbed_loss, g2) = second?;
    adam_update(params, &g2, adam, cfg.lr)?;
    Ok(StepReport {
        loss,
        perturbed_loss,
        grad_norm: g.global_norm(),
        update_grad_norm: g2.global_norm(),
    })
}

/// One entropy-sharpness update of the trainable (BN affine) parameters.
/// Running statistics are not touched.
pub fn esm_step(
    net: &mut Network,
    batch: &Tensor,
    cfg: &EsmConfig,
    adam: &mut AdamState,
) -> Result<StepReport> {
    if batch.rows() == 0 {
        return Err(Error::NoSamples);
    }
    let mut params = net.params().clone();
    let report = sharpness_aware_step(
        &mut params,
        |p| entropy_and_grads_at(net, p, batch),
        cfg,
        adam,
    )?;
    *net.params_mut() = params;
    Ok(report)
}

/// One plain entropy-minimization update.
pub fn em_step(
    net: &mut Network,
    batch: &Tensor,
    cfg: &EsmConfig,
    adam: &mut AdamState,
) -> Result<StepReport> {
    let (loss, g) = entropy_and_grads(net, batch)?;
    adam_update(net.params_mut(), &g, adam, cfg.lr)?;
    let n = g.global_norm();
    Ok(StepReport {
        loss,
        perturbed_loss: loss,
        grad_norm: n,
        update_grad_norm: n,
    })
}

/// [`esm_step`] or [`em_step`] according to `cfg.esm_enabled`.
pub fn adaptation_step(
    net: &mut Network,
    batch: &Tensor,
    cfg: &EsmConfig,
    adam: &mut AdamState,
) -> Result<StepReport> {
    if cfg.esm_enabled {
        esm_step(net, batch, cfg, adam)
    } else {
        em_step(net, batch, cfg, adam)
    }
}
