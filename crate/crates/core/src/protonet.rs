//! Prototypical-network learner: class prototypes are mean support
//! embeddings, and queries are scored by a softmax over negative distances.

use std::rc::Rc;

use aal_tensor::{no_grad, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, gradient, image_batch, BnMode, ConvBackboneParams, Head};
use crate::episode::Episode;
use crate::error::{ensure, Error, Result};
use crate::loss::{accuracy, cross_entropy};
use crate::optim::Sgd;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    SquaredEuclidean,
    Cosine,
}

/// Batch-norm statistics used at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalNorm {
    /// Running statistics accumulated during training.
    #[default]
    Stored,
    /// Statistics of the episode's own support and target images.
    Batch,
}

#[derive(Clone, Debug)]
pub struct PrototypeSet {
    /// `[N, D]`, one row per episode-local class.
    pub prototypes: Tensor,
    pub metric: Metric,
}

/// Per-class mean of `embeddings` (`[S, D]`); every class must have the same count.
pub fn compute_prototypes(embeddings: &Tensor, labels: &[usize], n_way: usize, metric: Metric) -> Result<PrototypeSet> {
    let &[s, _] = embeddings.shape() else {
        return Err(Error::Validation(format!("embeddings must be [samples, dim], got {:?}", embeddings.shape())));
    };
    ensure(labels.len() == s, || format!("{} labels for {s} embeddings", labels.len()))?;
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        ensure(l < n_way, || format!("label {l} outside [0, {n_way})"))?;
        counts[l] += 1;
    }
    let k = counts[0];
    ensure(k > 0 && counts.iter().all(|&c| c == k), || format!("unbalanced support labels: counts {counts:?}"))?;
    let mut onehot = vec![0.0; n_way * s];
    for (i, &l) in labels.iter().enumerate() {
        onehot[l * s + i] = 1.0 / k as f64;
    }
    let prototypes = Tensor::constant(vec![n_way, s], onehot).matmul(embeddings);
    Ok(PrototypeSet { prototypes, metric })
}

fn l2_normalize_rows(x: &Tensor, what: &str) -> Result<Tensor> {
    let &[r, _] = x.shape() else { unreachable!() };
    let norms = x.square().sum_to(&[r, 1]).sqrt();
    if let Some(i) = norms.data().iter().position(|&n| n.is_nan() || n <= 0.0) {
        return Err(Error::Numerical(format!("{what} row {i} has zero norm under the cosine metric")));
    }
    Ok(x.div(&norms))
}

/// Query-to-prototype distances, `[Q, N]`.
pub fn distances(protos: &PrototypeSet, queries: &Tensor) -> Result<Tensor> {
    let (p, q) = (&protos.prototypes, queries);
    let (&[n, d], &[nq, dq]) = (p.shape(), q.shape()) else {
        return Err(Error::Validation("prototypes and queries must be 2-D".into()));
    };
    ensure(d == dq, || format!("query dim {dq} does not match prototype dim {d}"))?;
    Ok(match protos.metric {
        Metric::SquaredEuclidean => {
            let diff = q.reshape(&[nq, 1, d]).sub(&p.reshape(&[1, n, d]));
            diff.square().sum_to(&[nq, n, 1]).reshape(&[nq, n])
        }
        Metric::Cosine => {
            let sim = l2_normalize_rows(q, "query")?.matmul(&l2_normalize_rows(p, "prototype")?.t());
            sim.neg().add_scalar(1.0)
        }
    })
}

/// Class probabilities per query: softmax of negative distances.
pub fn classify(protos: &PrototypeSet, queries: &Tensor) -> Result<Tensor> {
    Ok(distances(protos, queries)?.neg().softmax())
}

/// Embeds support and target images of `ep` in one batch.
fn embed_episode(params: &[Tensor], pc: &ConvBackboneParams, ep: &Episode, bn: BnMode<'_>) -> Result<(Tensor, Tensor)> {
    let cfg = &pc.config;
    ensure(cfg.head == Head::Embedding, || "prototypical learner needs an embedding head".into())?;
    let images: Vec<_> = ep.support_images.iter().chain(&ep.target_images).cloned().collect();
    let emb = forward(cfg, params, &image_batch(cfg, &images)?, bn, None)?;
    let (ns, nt, d) = (ep.support_images.len(), ep.target_images.len(), cfg.embed_dim());
    let split = |from: usize, len: usize| -> Tensor {
        let idx: Rc<[usize]> = (from * d..(from + len) * d).collect();
        emb.gather(idx, &[len, d])
    };
    Ok((split(0, ns), split(ns, nt)))
}

/// Mean target cross-entropy and target accuracy for one episode.
pub fn protonet_episode_loss(
    params: &[Tensor],
    pc: &ConvBackboneParams,
    ep: &Episode,
    metric: Metric,
    bn: BnMode<'_>,
) -> Result<(Tensor, f64)> {
    let (support, target) = embed_episode(params, pc, ep, bn)?;
    let protos = compute_prototypes(&support, &ep.support_labels, ep.n_way, metric)?;
    let logits = distances(&protos, &target)?.neg();
    let acc = accuracy(&logits, &ep.target_labels);
    Ok((cross_entropy(&logits, &ep.target_labels), acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtoNetConfig {
    pub metric: Metric,
    pub lr: f64,
    pub momentum: f64,
    pub eval_norm: EvalNorm,
}

impl Default for ProtoNetConfig {
    fn default() -> Self {
        Self { metric: Metric::SquaredEuclidean, lr: 0.01, momentum: 0.9, eval_norm: EvalNorm::Stored }
    }
}

/// Backbone plus optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtoNetLearner {
    pub params: ConvBackboneParams,
    pub config: ProtoNetConfig,
    pub optimizer: Sgd,
}

impl ProtoNetLearner {
    pub fn new(params: ConvBackboneParams, config: ProtoNetConfig) -> Self {
        let optimizer = Sgd::new(config.lr, config.momentum);
        Self { params, config, optimizer }
    }
}

/// One SGD step on the mean episode loss over `batch`; returns that mean loss.
///
/// Batch-norm runs on batch statistics and folds them into the running ones.
pub fn protonet_meta_train_step(learner: &mut ProtoNetLearner, batch: &[Episode], lr: f64) -> Result<f64> {
    ensure(!batch.is_empty(), || "empty meta-batch".into())?;
    ensure(lr >= 0.0 && lr.is_finite(), || format!("learning rate {lr} must be non-negative"))?;
    let metric = learner.config.metric;
    let pc = learner.params.clone();
    let mut running = learner.params.running.clone();
    let (loss, grads) = gradient(&learner.params.tensors, |ps| {
        let mut total: Option<Tensor> = None;
        for (i, ep) in batch.iter().enumerate() {
            let (l, _) = protonet_episode_loss(ps, &pc, ep, metric, BnMode::Batch(Some(&mut running)))?;
            if !l.item().is_finite() {
                return Err(Error::Numerical(format!("episode {i} of the meta-batch has loss {}", l.item())));
            }
            total = Some(match total {
                Some(t) => t.add(&l),
                None => l,
            });
        }
        Ok(total.expect("non-empty batch").scale(1.0 / batch.len() as f64))
    })?;
    learner.optimizer.lr = lr;
    learner.optimizer.step(&mut learner.params.tensors, &grads);
    learner.params.running = running;
    Ok(loss)
}

/// Target accuracy on one episode, without changing the parameters.
pub fn protonet_evaluate(params: &ConvBackboneParams, ep: &Episode, metric: Metric, norm: EvalNorm) -> Result<f64> {
    let _guard = no_grad();
    let ps = params.constants();
    let bn = match norm {
        EvalNorm::Stored => BnMode::Stored(&params.running),
        EvalNorm::Batch => BnMode::Batch(None),
    };
    Ok(protonet_episode_loss(&ps, params, ep, metric, bn)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_shot_prototype_is_the_embedding() {
        let e = Tensor::constant(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = compute_prototypes(&e, &[2, 0, 1], 3, Metric::SquaredEuclidean).unwrap();
        assert_eq!(p.prototypes.data(), &[3.0, 4.0, 5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn opposite_embeddings_average_to_zero() {
        let e = Tensor::constant(vec![4, 2], vec![1.0, -2.0, -1.0, 2.0, 0.5, 0.5, 0.5, 0.5]);
        let p = compute_prototypes(&e, &[0, 0, 1, 1], 2, Metric::SquaredEuclidean).unwrap();
        assert_eq!(&p.prototypes.data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn unbalanced_labels_are_rejected() {
        let e = Tensor::zeros(&[3, 2]);
        assert!(matches!(compute_prototypes(&e, &[0, 0, 1], 2, Metric::SquaredEuclidean), Err(Error::Validation(_))));
    }

    #[test]
    fn equidistant_query_is_uniform() {
        let e = Tensor::constant(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let p = compute_prototypes(&e, &[0, 1, 2, 3], 4, Metric::SquaredEuclidean).unwrap();
        let probs = classify(&p, &Tensor::zeros(&[1, 2])).unwrap();
        assert!(probs.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn small_case_matches_hand_softmax() {
        let e = Tensor::constant(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0]);
        let p = compute_prototypes(&e, &[0, 1, 2], 3, Metric::SquaredEuclidean).unwrap();
        let probs = classify(&p, &Tensor::constant(vec![1, 2], vec![0.5, 0.5])).unwrap();
        let d = [0.5f64, 0.5, 2.5];
        let z: f64 = d.iter().map(|v| (-v).exp()).sum();
        for (got, di) in probs.data().iter().zip(d) {
            assert!((got - (-di).exp() / z).abs() < 1e-10);
        }
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let e = Tensor::constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let p = compute_prototypes(&e, &[0, 1], 2, Metric::Cosine).unwrap();
        assert!(matches!(classify(&p, &Tensor::zeros(&[1, 2])), Err(Error::Numerical(_))));
        let probs = classify(&p, &Tensor::constant(vec![1, 2], vec![2.0, 0.0])).unwrap();
        assert!(probs.data()[0] > probs.data()[1]);
    }
}
