//! MAML-style learner with learnable per-layer per-step inner rates,
//! multi-step target loss and optional per-step batch-norm state.
//!
//! Inner step: `θ_s = θ_{s-1} − α_{·,s} ⊙ ∇ L_support(θ_{s-1})`, one rate per
//! parameter tensor and step. The outer loss is the target loss of `θ_T`, or
//! a weighted sum of the target losses of `θ_1..θ_T` when the multi-step loss
//! is on. Meta-gradients flow to `θ_0`, the rates and the per-step affine
//! batch-norm parameters.

use std::rc::Rc;

use aal_tensor::{grad, no_grad, Array, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, image_batch, BackboneConfig, BnMode, ConvBackboneParams, Head, RunningStats};
use crate::episode::Episode;
use crate::error::{ensure, Error, Result};
use crate::loss::{accuracy, cross_entropy};
use crate::optim::Adam;
use crate::protonet::EvalNorm;

/// Lower bound applied to the inner rates after every meta-update.
pub const ALPHA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MamlConfig {
    pub inner_steps: usize,
    /// Inner steps used when adapting on evaluation episodes.
    pub eval_inner_steps: usize,
    pub second_order: bool,
    pub msl: bool,
    /// Explicit multi-step weights; `None` means the annealed schedule.
    pub msl_weights: Option<Vec<f64>>,
    /// Epochs over which non-final weights decay; 0 keeps them uniform.
    pub msl_anneal_epochs: usize,
    pub meta_lr: f64,
    pub alpha_init: f64,
    /// Learn the inner rates in the outer loop.
    pub learn_alpha: bool,
    /// Separate running statistics per inner step.
    pub bnrs: bool,
    /// Separate batch-norm scale/shift per inner step, learned only in the outer loop.
    pub bnwb: bool,
    pub eval_norm: EvalNorm,
}

impl Default for MamlConfig {
    fn default() -> Self {
        Self {
            inner_steps: 5,
            eval_inner_steps: 5,
            second_order: true,
            msl: true,
            msl_weights: None,
            msl_anneal_epochs: 10,
            meta_lr: 1e-3,
            alpha_init: 0.1,
            learn_alpha: true,
            bnrs: true,
            bnwb: true,
            eval_norm: EvalNorm::Batch,
        }
    }
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.inner_steps >= 1, || "inner_steps must be at least 1".into())?;
        ensure(self.meta_lr >= 0.0 && self.meta_lr.is_finite(), || format!("meta_lr {} must be non-negative", self.meta_lr))?;
        ensure(self.alpha_init > 0.0, || format!("alpha_init {} must be positive", self.alpha_init))?;
        if self.bnrs || self.bnwb {
            ensure(self.eval_inner_steps <= self.inner_steps, || {
                "per-step batch-norm state cannot serve more evaluation steps than training steps".into()
            })?;
        }
        if let Some(w) = &self.msl_weights {
            ensure(w.len() == self.inner_steps, || format!("{} MSL weights for {} steps", w.len(), self.inner_steps))?;
            ensure(w.iter().all(|&x| x >= 0.0), || "MSL weights must be non-negative".into())?;
            let sum: f64 = w.iter().sum();
            ensure((sum - 1.0).abs() <= 1e-9, || format!("MSL weights sum to {sum}, expected 1"))?;
        }
        Ok(())
    }

    /// Per-step target-loss weights for `epoch`. Without MSL all weight sits on the last step.
    pub fn step_weights(&self, epoch: usize) -> Vec<f64> {
        let t = self.inner_steps;
        if !self.msl {
            let mut w = vec![0.0; t];
            w[t - 1] = 1.0;
            return w;
        }
        if let Some(w) = &self.msl_weights {
            return w.clone();
        }
        let uniform = 1.0 / t as f64;
        if self.msl_anneal_epochs == 0 || t == 1 {
            return vec![uniform; t];
        }
        let decay = uniform / self.msl_anneal_epochs as f64;
        let floor = 0.03 / t as f64;
        let mut w: Vec<f64> = (0..t - 1).map(|_| (uniform - epoch as f64 * decay).max(floor)).collect();
        w.push(1.0 - w.iter().sum::<f64>());
        w
    }
}

/// Learned initialization plus everything else the outer loop trains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    /// Initial weights; `theta.running` holds the shared running statistics.
    pub theta: ConvBackboneParams,
    /// Inner rates, `[parameter tensors, inner steps]`.
    pub alpha: Array,
    /// Per-step running statistics (empty unless per-step statistics are on).
    pub step_running: Vec<RunningStats>,
    /// Per-step `(γ, β)` for every block, flattened as `[step][block][γ, β]`
    /// (empty unless per-step affine parameters are on).
    pub step_affine: Vec<Array>,
}

impl MetaParams {
    pub fn new(theta: ConvBackboneParams, cfg: &MamlConfig) -> Result<Self> {
        cfg.validate()?;
        theta.check()?;
        ensure(matches!(theta.config.head, Head::Linear(_)), || "MAML needs a linear head".into())?;
        let layers = theta.tensors.len();
        let t = cfg.inner_steps;
        let alpha = Array::full(vec![layers, t], cfg.alpha_init);
        let step_running = if cfg.bnrs { vec![theta.running.clone(); t] } else { Vec::new() };
        let mut step_affine = Vec::new();
        if cfg.bnwb {
            for _ in 0..t {
                for b in 0..theta.config.blocks {
                    let (g, be) = BackboneConfig::bn_affine_indices(b);
                    step_affine.push(theta.tensors[g].clone());
                    step_affine.push(theta.tensors[be].clone());
                }
            }
        }
        Ok(Self { theta, alpha, step_running, step_affine })
    }

    pub fn inner_steps(&self) -> usize {
        self.alpha.shape[1]
    }

    fn check_against(&self, cfg: &MamlConfig) -> Result<()> {
        ensure(self.alpha.shape == [self.theta.tensors.len(), cfg.inner_steps], || {
            format!("alpha shape {:?} does not match {} tensors x {} steps", self.alpha.shape, self.theta.tensors.len(), cfg.inner_steps)
        })?;
        ensure(cfg.bnrs == !self.step_running.is_empty(), || "per-step statistics do not match the config".into())?;
        ensure(cfg.bnwb == !self.step_affine.is_empty(), || "per-step affine parameters do not match the config".into())
    }

    /// Differentiable leaves; the inner loop needs them even when no
    /// meta-gradient is taken.
    fn leaves(&self) -> MetaTensors {
        let mk = |a: &Array| Tensor::from_array(a, true);
        MetaTensors {
            theta: self.theta.tensors.iter().map(mk).collect(),
            alpha: mk(&self.alpha),
            affine: self.step_affine.iter().map(mk).collect(),
        }
    }

    fn arrays(&self) -> Vec<Array> {
        let mut v = self.theta.tensors.clone();
        v.push(self.alpha.clone());
        v.extend(self.step_affine.iter().cloned());
        v
    }

    fn set_arrays(&mut self, mut v: Vec<Array>) {
        let n = self.theta.tensors.len();
        self.step_affine = v.split_off(n + 1);
        self.alpha = v.pop().expect("alpha");
        self.theta.tensors = v;
    }
}

/// Graph leaves for one forward evaluation of the meta-parameters.
pub struct MetaTensors {
    pub theta: Vec<Tensor>,
    pub alpha: Tensor,
    pub affine: Vec<Tensor>,
}

impl MetaTensors {
    fn all(&self) -> Vec<&Tensor> {
        self.theta.iter().chain(std::iter::once(&self.alpha)).chain(&self.affine).collect()
    }

    /// Rate for tensor `l` at inner step `s` (1-based), as a scalar tensor.
    fn rate(&self, l: usize, s: usize) -> Tensor {
        let t = self.alpha.shape()[1];
        self.alpha.gather(Rc::from([l * t + s - 1]), &[])
    }

    /// `(γ, β)` pairs for step `s` (1-based), when per-step affine is on.
    fn affine_for(&self, blocks: usize, s: usize) -> Option<Vec<(Tensor, Tensor)>> {
        if self.affine.is_empty() {
            return None;
        }
        let base = (s.max(1) - 1) * blocks * 2;
        Some((0..blocks).map(|b| (self.affine[base + 2 * b].clone(), self.affine[base + 2 * b + 1].clone())).collect())
    }
}

/// Parameters after every inner step.
pub struct AdaptedTrajectory {
    /// `θ_0..θ_T`.
    pub params: Vec<Vec<Tensor>>,
    pub support_losses: Vec<f64>,
}

/// Generic unrolled inner loop.
///
/// `support_loss(s, θ)` gives the loss at step `s` (1-based) for parameters
/// `θ = θ_{s-1}`; `rate(l, s)` the rate for tensor `l`; tensors in `frozen`
/// are carried over unchanged. With `second_order` the returned parameters
/// stay differentiable through the inner gradients.
pub fn unroll(
    theta0: &[Tensor],
    steps: usize,
    second_order: bool,
    frozen: &[usize],
    mut rate: impl FnMut(usize, usize) -> Tensor,
    mut support_loss: impl FnMut(usize, &[Tensor]) -> Result<Tensor>,
) -> Result<AdaptedTrajectory> {
    let mut params = vec![theta0.to_vec()];
    let mut support_losses = Vec::with_capacity(steps);
    for s in 1..=steps {
        let prev = params.last().expect("θ_0");
        let loss = support_loss(s, prev)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("support loss is {value} at inner step {s}")));
        }
        support_losses.push(value);
        let grads = grad(&loss, &prev.iter().collect::<Vec<_>>(), second_order);
        let next = prev
            .iter()
            .zip(&grads)
            .enumerate()
            .map(|(l, (p, g))| if frozen.contains(&l) { p.clone() } else { p.sub(&g.mul(&rate(l, s))) })
            .collect();
        params.push(next);
    }
    Ok(AdaptedTrajectory { params, support_losses })
}

/// Mutable view of the statistics the inner loop updates.
struct Stats<'a> {
    shared: &'a mut RunningStats,
    per_step: &'a mut [RunningStats],
}

impl Stats<'_> {
    fn slot(&mut self, s: usize) -> &mut RunningStats {
        if self.per_step.is_empty() {
            self.shared
        } else {
            &mut self.per_step[s.max(1) - 1]
        }
    }
}

fn frozen_indices(bc: &BackboneConfig, bnwb: bool) -> Vec<usize> {
    if !bnwb {
        return Vec::new();
    }
    (0..bc.blocks)
        .flat_map(|b| {
            let (g, be) = BackboneConfig::bn_affine_indices(b);
            [g, be]
        })
        .collect()
}

fn check_episode(bc: &BackboneConfig, ep: &Episode) -> Result<()> {
    let Head::Linear(n) = bc.head else { unreachable!() };
    ensure(ep.n_way == n, || format!("{}-way episode for a {n}-output head", ep.n_way))?;
    ep.check()
}

/// Adapts on `support` and returns the trajectory; `stats` collects the
/// support-batch statistics when given.
fn adapt(
    bc: &BackboneConfig,
    mt: &MetaTensors,
    mc: &MamlConfig,
    steps: usize,
    support: &Tensor,
    labels: &[usize],
    mut stats: Option<Stats<'_>>,
    second_order: bool,
) -> Result<AdaptedTrajectory> {
    let frozen = frozen_indices(bc, mc.bnwb);
    unroll(&mt.theta, steps, second_order, &frozen, |l, s| mt.rate(l, s), |s, ps| {
        let bn = BnMode::Batch(stats.as_mut().map(|st| st.slot(s)));
        let logits = forward(bc, ps, support, bn, mt.affine_for(bc.blocks, s).as_deref())?;
        Ok(cross_entropy(&logits, labels))
    })
}

/// Target logits of the step-`s` parameters.
fn target_logits(
    bc: &BackboneConfig,
    mt: &MetaTensors,
    params: &[Tensor],
    s: usize,
    target: &Tensor,
    norm: BnMode<'_>,
) -> Result<Tensor> {
    forward(bc, params, target, norm, mt.affine_for(bc.blocks, s).as_deref())
}

/// Outer loss of one episode as a differentiable function of `mt`.
/// Returns the loss and the target accuracy of `θ_T`.
fn episode_outer_loss(
    bc: &BackboneConfig,
    mt: &MetaTensors,
    mc: &MamlConfig,
    ep: &Episode,
    weights: &[f64],
    stats: Option<Stats<'_>>,
) -> Result<(Tensor, f64)> {
    check_episode(bc, ep)?;
    let support = image_batch(bc, &ep.support_images)?;
    let target = image_batch(bc, &ep.target_images)?;
    let t = mc.inner_steps;
    let traj = adapt(bc, mt, mc, t, &support, &ep.support_labels, stats, mc.second_order)?;
    let mut total: Option<Tensor> = None;
    let mut final_acc = 0.0;
    for s in 1..=t {
        if weights[s - 1] == 0.0 && s < t {
            continue;
        }
        let logits = target_logits(bc, mt, &traj.params[s], s, &target, BnMode::Batch(None))?;
        if s == t {
            final_acc = accuracy(&logits, &ep.target_labels);
            if weights[s - 1] == 0.0 {
                continue;
            }
        }
        let l = cross_entropy(&logits, &ep.target_labels);
        let term = if weights[s - 1] == 1.0 { l } else { l.scale(weights[s - 1]) };
        total = Some(match total {
            Some(acc) => acc.add(&term),
            None => term,
        });
    }
    Ok((total.unwrap_or_else(|| Tensor::scalar(0.0)), final_acc))
}

/// Inner adaptation on `support` without touching `mp`.
pub fn inner_adapt(mp: &MetaParams, mc: &MamlConfig, support: &[crate::image::ImageTensor], labels: &[usize]) -> Result<AdaptedTrajectory> {
    mp.check_against(mc)?;
    let bc = &mp.theta.config;
    let mt = mp.leaves();
    adapt(bc, &mt, mc, mc.inner_steps, &image_batch(bc, support)?, labels, None, false)
}

/// Outer loss of one episode under explicit step `weights`.
pub fn outer_loss(mp: &MetaParams, mc: &MamlConfig, ep: &Episode, weights: &[f64]) -> Result<f64> {
    mp.check_against(mc)?;
    ensure(weights.len() == mc.inner_steps, || format!("{} weights for {} steps", weights.len(), mc.inner_steps))?;
    let mt = mp.leaves();
    Ok(episode_outer_loss(&mp.theta.config, &mt, mc, ep, weights, None)?.0.item())
}

/// Gradient of the mean outer loss over `batch` with respect to every
/// trainable array, in the order `θ_0 tensors, α, per-step affine`.
///
/// Updates the running statistics in `mp`. Returns (mean loss, mean
/// final-step target accuracy, gradients).
pub fn meta_gradient(mp: &mut MetaParams, mc: &MamlConfig, batch: &[Episode], epoch: usize) -> Result<(f64, f64, Vec<Array>)> {
    ensure(!batch.is_empty(), || "empty meta-batch".into())?;
    mp.check_against(mc)?;
    let weights = mc.step_weights(epoch);
    let mt = mp.leaves();
    let leaves = mt.all();
    let mut sum: Vec<Array> = leaves.iter().map(|t| Array::zeros(t.shape().to_vec())).collect();
    let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
    let bc = mp.theta.config.clone();
    for (i, ep) in batch.iter().enumerate() {
        let stats = Stats { shared: &mut mp.theta.running, per_step: &mut mp.step_running };
        let (loss, acc) = episode_outer_loss(&bc, &mt, mc, ep, &weights, Some(stats))?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("outer loss is {value} for episode {i} of the meta-batch")));
        }
        let grads = grad(&loss, &leaves, false);
        for (acc_g, g) in sum.iter_mut().zip(&grads) {
            if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("meta-gradient contains {bad} for episode {i} of the meta-batch")));
            }
            for (a, b) in acc_g.data.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        loss_sum += value;
        acc_sum += acc;
    }
    let n = batch.len() as f64;
    for g in &mut sum {
        g.data.iter_mut().for_each(|v| *v /= n);
    }
    if !mc.learn_alpha {
        let idx = mp.theta.tensors.len();
        sum[idx].data.fill(0.0);
    }
    Ok((loss_sum / n, acc_sum / n, sum))
}

/// Meta-learner state: parameters plus outer optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MamlLearner {
    pub meta: MetaParams,
    pub config: MamlConfig,
    pub optimizer: Adam,
}

impl MamlLearner {
    pub fn new(theta: ConvBackboneParams, config: MamlConfig) -> Result<Self> {
        let meta = MetaParams::new(theta, &config)?;
        let optimizer = Adam::new(config.meta_lr);
        Ok(Self { meta, config, optimizer })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaStep {
    pub loss: f64,
    pub accuracy: f64,
}

/// One outer step on `batch`. The rates are floored at [`ALPHA_FLOOR`].
pub fn meta_update(learner: &mut MamlLearner, batch: &[Episode], epoch: usize) -> Result<MetaStep> {
    let (loss, accuracy, grads) = meta_gradient(&mut learner.meta, &learner.config, batch, epoch)?;
    if learner.config.meta_lr == 0.0 {
        return Ok(MetaStep { loss, accuracy });
    }
    let mut arrays = learner.meta.arrays();
    learner.optimizer.lr = learner.config.meta_lr;
    learner.optimizer.step(&mut arrays, &grads);
    learner.meta.set_arrays(arrays);
    for a in &mut learner.meta.alpha.data {
        *a = a.max(ALPHA_FLOOR);
    }
    Ok(MetaStep { loss, accuracy })
}

/// Adapts on the episode's support set and returns target accuracy of the
/// adapted parameters. `mp` is left untouched.
pub fn maml_evaluate(mp: &MetaParams, mc: &MamlConfig, ep: &Episode) -> Result<f64> {
    mp.check_against(mc)?;
    let bc = &mp.theta.config;
    check_episode(bc, ep)?;
    let mt = mp.leaves();
    let support = image_batch(bc, &ep.support_images)?;
    let target = image_batch(bc, &ep.target_images)?;
    let steps = mc.eval_inner_steps;
    let traj = adapt(bc, &mt, mc, steps, &support, &ep.support_labels, None, false)?;
    let _guard = no_grad();
    let stored;
    let norm = match mc.eval_norm {
        EvalNorm::Batch => BnMode::Batch(None),
        EvalNorm::Stored => {
            stored = if mp.step_running.is_empty() { &mp.theta.running } else { &mp.step_running[steps.max(1) - 1] };
            BnMode::Stored(stored)
        }
    };
    let logits = target_logits(bc, &mt, &traj.params[steps], steps, &target, norm)?;
    Ok(accuracy(&logits, &ep.target_labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_inner_step_is_plain_sgd() {
        let theta = Tensor::variable(vec![1], vec![0.0]);
        let traj = unroll(&[theta], 1, true, &[], |_, _| Tensor::scalar(0.1), |_, ps| {
            Ok(ps[0].add_scalar(-3.0).square().sum().scale(0.5))
        })
        .unwrap();
        assert!((traj.params[1][0].item() - 0.3).abs() <= 1e-12);
    }

    #[test]
    fn msl_schedule() {
        let mut mc = MamlConfig { inner_steps: 4, msl_anneal_epochs: 10, ..MamlConfig::default() };
        let w0 = mc.step_weights(0);
        assert!(w0.iter().all(|&w| (w - 0.25).abs() < 1e-12));
        let late = mc.step_weights(100);
        assert!((late.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(late[3] > 0.9);
        mc.msl = false;
        assert_eq!(mc.step_weights(0), vec![0.0, 0.0, 0.0, 1.0]);
        mc.msl_weights = Some(vec![0.5, 0.5]);
        mc.msl = true;
        assert!(mc.validate().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MamlConfig { inner_steps: 0, ..MamlConfig::default() }.validate().is_err());
        assert!(MamlConfig { alpha_init: 0.0, ..MamlConfig::default() }.validate().is_err());
        assert!(MamlConfig { eval_inner_steps: 6, ..MamlConfig::default() }.validate().is_err());
        let vanilla = MamlConfig { eval_inner_steps: 0, bnrs: false, bnwb: false, ..MamlConfig::default() };
        vanilla.validate().unwrap();
    }
}
