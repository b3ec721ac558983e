//! Four-block convolutional feature extractor.
//!
//! Each block is conv3×3 (stride 1, padding 1) → batch norm → ReLU → 2×2
//! max-pool (floor on odd sides). The head is either the flattened final
//! feature map or an affine map from it to class logits.
//!
//! Parameters are plain arrays; [`forward`] is a function of a parameter
//! slice so learners can run it on adapted (graph-carrying) tensors.

use aal_tensor::{grad, Array, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{images_to_batch, ImageTensor};
use crate::rng::RngStream;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Affine classifier with this many outputs.
    Linear(usize),
    /// Flattened final feature map.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub side: usize,
    pub blocks: usize,
    pub filters: usize,
    pub head: Head,
}

impl BackboneConfig {
    /// The standard 4×64 network for square `side`×`side` inputs.
    pub fn standard(in_channels: usize, side: usize, head: Head) -> Self {
        Self { in_channels, side, blocks: 4, filters: 64, head }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(matches!(self.in_channels, 1 | 3), || format!("input channels must be 1 or 3, got {}", self.in_channels))?;
        ensure(self.blocks >= 1 && self.filters >= 1, || "backbone needs at least one block and one filter".into())?;
        ensure(self.side >> self.blocks >= 1, || {
            format!("{} pooling blocks reduce a side of {} to nothing", self.blocks, self.side)
        })?;
        if let Head::Linear(n) = self.head {
            ensure(n >= 1, || "linear head needs at least one output".into())?;
        }
        Ok(())
    }

    /// Spatial side after every block.
    pub fn feature_side(&self) -> usize {
        (0..self.blocks).fold(self.side, |s, _| s / 2)
    }

    pub fn embed_dim(&self) -> usize {
        self.filters * self.feature_side().pow(2)
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::Linear(n) => n,
            Head::Embedding => self.embed_dim(),
        }
    }

    /// Name and shape of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let f = self.filters;
        let mut out = Vec::new();
        for b in 0..self.blocks {
            let cin = if b == 0 { self.in_channels } else { f };
            out.push((format!("block{b}.conv.weight"), vec![f, cin, 3, 3]));
            out.push((format!("block{b}.conv.bias"), vec![f]));
            out.push((format!("block{b}.bn.gamma"), vec![f]));
            out.push((format!("block{b}.bn.beta"), vec![f]));
        }
        if let Head::Linear(n) = self.head {
            out.push(("head.weight".into(), vec![n, self.embed_dim()]));
            out.push(("head.bias".into(), vec![n]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Storage indices of the batch-norm scale and shift of block `b`.
    pub fn bn_affine_indices(b: usize) -> (usize, usize) {
        (4 * b + 2, 4 * b + 3)
    }
}

/// Running batch-norm statistics, one vector per block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl RunningStats {
    /// Zero mean, unit variance: stored-mode normalization starts as the identity.
    pub fn new(blocks: usize, filters: usize) -> Self {
        Self { mean: vec![vec![0.0; filters]; blocks], var: vec![vec![1.0; filters]; blocks] }
    }

    pub fn for_config(cfg: &BackboneConfig) -> Self {
        Self::new(cfg.blocks, cfg.filters)
    }
}

/// Which statistics batch norm normalizes with.
pub enum BnMode<'a> {
    /// Batch statistics; when given, they are folded into the running statistics.
    Batch(Option<&'a mut RunningStats>),
    /// Previously accumulated running statistics.
    Stored(&'a RunningStats),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBackboneParams {
    pub config: BackboneConfig,
    pub tensors: Vec<Array>,
    pub running: RunningStats,
}

impl ConvBackboneParams {
    /// Checks every array against the configured shapes.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.param_shapes();
        ensure(shapes.len() == self.tensors.len(), || {
            format!("expected {} parameter arrays, found {}", shapes.len(), self.tensors.len())
        })?;
        for ((name, shape), a) in shapes.iter().zip(&self.tensors) {
            ensure(&a.shape == shape, || format!("{name}: shape {:?}, expected {shape:?}", a.shape))?;
        }
        ensure(
            self.running.mean.len() == self.config.blocks && self.running.var.len() == self.config.blocks,
            || "running statistics do not match the block count".into(),
        )
    }

    /// Differentiable leaves holding the current values.
    pub fn variables(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|a| Tensor::from_array(a, true)).collect()
    }

    pub fn constants(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|a| Tensor::from_array(a, false)).collect()
    }
}

/// Fan-in uniform initialization: weights in ±1/√fan_in, biases and β zero, γ one.
pub fn init_backbone(config: BackboneConfig, rng: &mut RngStream) -> Result<ConvBackboneParams> {
    config.validate()?;
    let tensors = config
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else if name.ends_with(".gamma") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            Array::new(shape, data)
        })
        .collect();
    let running = RunningStats::for_config(&config);
    Ok(ConvBackboneParams { config, tensors, running })
}

/// Stacks images into an NCHW batch after checking them against `cfg`.
pub fn image_batch(cfg: &BackboneConfig, images: &[ImageTensor]) -> Result<Tensor> {
    ensure(!images.is_empty(), || "empty image batch".into())?;
    for img in images {
        ensure(img.height() == cfg.side && img.width() == cfg.side && img.channels() == cfg.in_channels, || {
            format!(
                "image {}x{}x{} does not match backbone input {}x{}x{}",
                img.height(),
                img.width(),
                img.channels(),
                cfg.side,
                cfg.side,
                cfg.in_channels
            )
        })?;
    }
    images_to_batch(&images.iter().collect::<Vec<_>>())
}

fn batch_norm(y: &Tensor, block: usize, gamma: &Tensor, beta: &Tensor, bn: &mut BnMode<'_>) -> Tensor {
    let &[b, c, h, w] = y.shape() else { unreachable!() };
    let stat_shape = [1, c, 1, 1];
    let xhat = match bn {
        BnMode::Batch(running) => {
            let n = (b * h * w) as f64;
            let mean = y.sum_to(&stat_shape).scale(1.0 / n);
            let centered = y.sub(&mean);
            let var = centered.square().sum_to(&stat_shape).scale(1.0 / n);
            if let Some(rs) = running.as_deref_mut() {
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for ch in 0..c {
                    let m = &mut rs.mean[block][ch];
                    *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * mean.data()[ch];
                    let v = &mut rs.var[block][ch];
                    *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * var.data()[ch] * unbias;
                }
            }
            centered.div(&var.add_scalar(BN_EPS).sqrt())
        }
        BnMode::Stored(rs) => {
            let mean = Tensor::constant(stat_shape.to_vec(), rs.mean[block].clone());
            let inv: Vec<f64> = rs.var[block].iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            y.sub(&mean).mul(&Tensor::constant(stat_shape.to_vec(), inv))
        }
    };
    xhat.mul(&gamma.reshape(&stat_shape)).add(&beta.reshape(&stat_shape))
}

/// Runs the network on an NCHW batch.
///
/// `params` follows [`BackboneConfig::param_shapes`]. When `affine` is given
/// it holds `(γ, β)` for every block and replaces the stored ones.
pub fn forward(
    cfg: &BackboneConfig,
    params: &[Tensor],
    x: &Tensor,
    mut bn: BnMode<'_>,
    affine: Option<&[(Tensor, Tensor)]>,
) -> Result<Tensor> {
    let expected = cfg.param_shapes();
    ensure(params.len() == expected.len(), || {
        format!("forward got {} parameter tensors, expected {}", params.len(), expected.len())
    })?;
    let want = [x.shape()[0], cfg.in_channels, cfg.side, cfg.side];
    ensure(x.shape().len() == 4 && x.shape()[1..] == want[1..], || {
        format!("input shape {:?} does not match backbone input {:?}", x.shape(), &want[1..])
    })?;
    if let Some(a) = affine {
        ensure(a.len() == cfg.blocks, || format!("{} affine pairs for {} blocks", a.len(), cfg.blocks))?;
    }
    let mut h = x.clone();
    for b in 0..cfg.blocks {
        let y = h.conv2d(&params[4 * b], 1).add(&params[4 * b + 1].reshape(&[1, cfg.filters, 1, 1]));
        let (gamma, beta) = match affine {
            Some(a) => (&a[b].0, &a[b].1),
            None => (&params[4 * b + 2], &params[4 * b + 3]),
        };
        h = batch_norm(&y, b, gamma, beta, &mut bn).relu().max_pool2x2();
    }
    let batch = h.shape()[0];
    let emb = h.reshape(&[batch, cfg.embed_dim()]);
    Ok(match cfg.head {
        Head::Embedding => emb,
        Head::Linear(_) => {
            let n = expected.len();
            emb.matmul(&params[n - 2].t()).add(&params[n - 1])
        }
    })
}

/// Loss value and its gradient with respect to every array in `params`.
pub fn gradient(params: &[Array], loss: impl FnOnce(&[Tensor]) -> Result<Tensor>) -> Result<(f64, Vec<Array>)> {
    let vars: Vec<Tensor> = params.iter().map(|a| Tensor::from_array(a, true)).collect();
    let l = loss(&vars)?;
    ensure(l.numel() == 1, || format!("loss must be a scalar, got shape {:?}", l.shape()))?;
    let value = l.item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value}")));
    }
    let grads = grad(&l, &vars.iter().collect::<Vec<_>>(), false);
    Ok((value, grads.iter().map(Tensor::to_array).collect()))
}
