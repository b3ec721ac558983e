//! Augmentation operators and named policies built from them.
//!
//! A policy name is a letter group drawn from `C H V R W G` (crop,
//! horizontal flip, vertical flip, rotation, warp, grayscale) followed by
//! optional `+DROP` (pixel dropout) and `+CUT` (cutout) suffixes, for example
//! `CHVR+DROP+CUT`. Parameters come from the per-dataset [`AugmentProfile`].

mod ops;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::ImageTensor;
use crate::rng::RngStream;

pub use ops::{
    crop_at, cutout, cutout_at, flip, grayscale, pixel_dropout, random_crop, random_flip, random_grayscale,
    random_rotation, rotate, warp, warp_with, FlipAxis, Hole, Interpolation, WarpField,
};

/// Fraction of the warp region side used as the peak displacement.
pub const DEFAULT_WARP_MAGNITUDE: f64 = 0.1;

/// Operator kinds in the order they are applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Crop,
    Hflip,
    Vflip,
    Rotate,
    Warp,
    PixelDropout,
    Cutout,
    Grayscale,
}

impl OpKind {
    pub fn token(self) -> &'static str {
        match self {
            OpKind::Crop => "C",
            OpKind::Hflip => "H",
            OpKind::Vflip => "V",
            OpKind::Rotate => "R",
            OpKind::Warp => "W",
            OpKind::PixelDropout => "DROP",
            OpKind::Cutout => "CUT",
            OpKind::Grayscale => "G",
        }
    }

    fn is_suffix(self) -> bool {
        matches!(self, OpKind::PixelDropout | OpKind::Cutout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationOp {
    Crop { padding: usize },
    Hflip { p: f64 },
    Vflip { p: f64 },
    Rotate { degrees_lo: f64, degrees_hi: f64 },
    Warp { region_base: usize, region_jitter: usize, magnitude: f64 },
    PixelDropout { p: f64 },
    Cutout { holes: usize, side_lo: usize, side_hi: usize },
    Grayscale { p: f64 },
}

impl AugmentationOp {
    pub fn kind(&self) -> OpKind {
        match self {
            AugmentationOp::Crop { .. } => OpKind::Crop,
            AugmentationOp::Hflip { .. } => OpKind::Hflip,
            AugmentationOp::Vflip { .. } => OpKind::Vflip,
            AugmentationOp::Rotate { .. } => OpKind::Rotate,
            AugmentationOp::Warp { .. } => OpKind::Warp,
            AugmentationOp::PixelDropout { .. } => OpKind::PixelDropout,
            AugmentationOp::Cutout { .. } => OpKind::Cutout,
            AugmentationOp::Grayscale { .. } => OpKind::Grayscale,
        }
    }

    /// Checks the parameters against an image of the given side and channel count.
    pub fn validate(&self, side: usize, channels: usize) -> Result<()> {
        let prob = |p: f64| ensure((0.0..=1.0).contains(&p), || format!("{:?}: probability {p} outside [0, 1]", self.kind()));
        match *self {
            AugmentationOp::Crop { padding } => {
                ensure(padding < side, || format!("crop padding {padding} must be smaller than side {side}"))
            }
            AugmentationOp::Hflip { p } | AugmentationOp::Vflip { p } | AugmentationOp::PixelDropout { p } => prob(p),
            AugmentationOp::Rotate { degrees_lo, degrees_hi } => {
                ensure(degrees_lo > 0.0 && degrees_lo <= degrees_hi && degrees_hi < 360.0, || {
                    format!("rotation range [{degrees_lo}, {degrees_hi}] must lie within (0, 360)")
                })
            }
            AugmentationOp::Warp { region_base, region_jitter, magnitude } => {
                ensure(region_base > 0 && region_base + region_jitter <= side, || {
                    format!("warp region {region_base}+U(0,{region_jitter}) exceeds side {side}")
                })?;
                ensure(magnitude >= 0.0 && magnitude.is_finite(), || format!("warp magnitude {magnitude} must be non-negative"))
            }
            AugmentationOp::Cutout { holes, side_lo, side_hi } => {
                ensure(holes >= 1, || "cutout needs at least one hole".into())?;
                ensure(side_lo > 0 && side_lo <= side_hi && side_hi <= side, || {
                    format!("cutout sides [{side_lo}, {side_hi}] must lie within [1, {side}]")
                })
            }
            AugmentationOp::Grayscale { p } => {
                prob(p)?;
                ensure(channels == 3, || format!("grayscale needs 3-channel images, got {channels}"))
            }
        }
    }

    pub fn apply(&self, img: &ImageTensor, rng: &mut RngStream) -> Result<ImageTensor> {
        match *self {
            AugmentationOp::Crop { padding } => random_crop(img, padding, rng),
            AugmentationOp::Hflip { p } => random_flip(img, FlipAxis::Horizontal, p, rng),
            AugmentationOp::Vflip { p } => random_flip(img, FlipAxis::Vertical, p, rng),
            AugmentationOp::Rotate { degrees_lo, degrees_hi } => {
                random_rotation(img, degrees_lo, degrees_hi, Interpolation::Bilinear, rng)
            }
            AugmentationOp::Warp { region_base, region_jitter, magnitude } => {
                warp(img, region_base, region_jitter, magnitude, rng)
            }
            AugmentationOp::PixelDropout { p } => pixel_dropout(img, p, rng),
            AugmentationOp::Cutout { holes, side_lo, side_hi } => cutout(img, holes, side_lo, side_hi, rng),
            AugmentationOp::Grayscale { p } => random_grayscale(img, p, rng),
        }
    }
}

/// Dataset whose hyperparameter column a policy name resolves against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentProfile {
    Omniglot,
    MiniImagenet,
}

impl AugmentProfile {
    pub fn op(self, kind: OpKind) -> Result<AugmentationOp> {
        use AugmentProfile::*;
        Ok(match (kind, self) {
            (OpKind::Crop, Omniglot) => AugmentationOp::Crop { padding: 7 },
            (OpKind::Crop, MiniImagenet) => AugmentationOp::Crop { padding: 21 },
            (OpKind::Hflip, _) => AugmentationOp::Hflip { p: 0.5 },
            (OpKind::Vflip, _) => AugmentationOp::Vflip { p: 0.5 },
            (OpKind::Rotate, Omniglot) => AugmentationOp::Rotate { degrees_lo: 1.0, degrees_hi: 30.0 },
            (OpKind::Rotate, MiniImagenet) => AugmentationOp::Rotate { degrees_lo: 1.0, degrees_hi: 270.0 },
            (OpKind::Warp, Omniglot) => {
                AugmentationOp::Warp { region_base: 14, region_jitter: 6, magnitude: DEFAULT_WARP_MAGNITUDE }
            }
            (OpKind::Warp, MiniImagenet) => {
                AugmentationOp::Warp { region_base: 42, region_jitter: 41, magnitude: DEFAULT_WARP_MAGNITUDE }
            }
            (OpKind::PixelDropout, Omniglot) => AugmentationOp::PixelDropout { p: 0.3 },
            (OpKind::PixelDropout, MiniImagenet) => AugmentationOp::PixelDropout { p: 0.7 },
            (OpKind::Cutout, Omniglot) => AugmentationOp::Cutout { holes: 5, side_lo: 4, side_hi: 14 },
            (OpKind::Cutout, MiniImagenet) => AugmentationOp::Cutout { holes: 5, side_lo: 11, side_hi: 42 },
            (OpKind::Grayscale, Omniglot) => {
                return Err(Error::Validation("grayscale is not available for Omniglot".into()))
            }
            (OpKind::Grayscale, MiniImagenet) => AugmentationOp::Grayscale { p: 0.5 },
        })
    }

    pub fn side(self) -> usize {
        match self {
            AugmentProfile::Omniglot => 28,
            AugmentProfile::MiniImagenet => 84,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            AugmentProfile::Omniglot => 1,
            AugmentProfile::MiniImagenet => 3,
        }
    }
}

impl fmt::Display for AugmentProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentProfile::Omniglot => "omniglot",
            AugmentProfile::MiniImagenet => "miniimagenet",
        })
    }
}

/// Operators held in application order, at most one per kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    ops: Vec<AugmentationOp>,
}

impl AugmentationPolicy {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Sorts `ops` into application order; a repeated kind is an error.
    pub fn new(mut ops: Vec<AugmentationOp>) -> Result<Self> {
        ops.sort_by_key(AugmentationOp::kind);
        if let Some(w) = ops.windows(2).find(|w| w[0].kind() == w[1].kind()) {
            return Err(Error::Validation(format!("operator {} appears twice", w[0].kind().token())));
        }
        Ok(Self { ops })
    }

    pub fn ops(&self) -> &[AugmentationOp] {
        &self.ops
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn contains(&self, kind: OpKind) -> bool {
        self.ops.iter().any(|o| o.kind() == kind)
    }

    /// True when crop and both flips are present.
    pub fn has_chv_base(&self) -> bool {
        [OpKind::Crop, OpKind::Hflip, OpKind::Vflip].iter().all(|&k| self.contains(k))
    }

    /// Canonical name, `NONE` for the empty policy.
    pub fn name(&self) -> String {
        if self.ops.is_empty() {
            return "NONE".into();
        }
        let mut name: String = self.ops.iter().map(|o| o.kind()).filter(|k| !k.is_suffix()).map(OpKind::token).collect();
        for k in self.ops.iter().map(|o| o.kind()).filter(|k| k.is_suffix()) {
            if !name.is_empty() {
                name.push('+');
            }
            name.push_str(k.token());
        }
        name
    }

    pub fn validate(&self, side: usize, channels: usize) -> Result<()> {
        self.ops.iter().try_for_each(|o| o.validate(side, channels))
    }

    pub fn apply(&self, img: &ImageTensor, rng: &mut RngStream) -> Result<ImageTensor> {
        let mut out = img.clone();
        for op in &self.ops {
            out = op.apply(&out, rng)?;
        }
        Ok(out)
    }
}

impl fmt::Display for AugmentationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

pub fn apply_policy(img: &ImageTensor, policy: &AugmentationPolicy, rng: &mut RngStream) -> Result<ImageTensor> {
    policy.apply(img, rng)
}

/// Operator kinds named by a policy string, in application order.
pub fn parse_policy_tokens(name: &str) -> Result<Vec<OpKind>> {
    let upper = name.trim().to_ascii_uppercase();
    if upper.is_empty() || upper == "NONE" {
        return Ok(Vec::new());
    }
    let mut kinds = Vec::new();
    for part in upper.split('+') {
        let part = part.trim();
        match part {
            "DROP" => kinds.push(OpKind::PixelDropout),
            "CUT" => kinds.push(OpKind::Cutout),
            "" => return Err(Error::parse("augmentation policy", format!("empty token in '{name}'"))),
            letters => {
                for ch in letters.chars() {
                    kinds.push(match ch {
                        'C' => OpKind::Crop,
                        'H' => OpKind::Hflip,
                        'V' => OpKind::Vflip,
                        'R' => OpKind::Rotate,
                        'W' => OpKind::Warp,
                        'G' => OpKind::Grayscale,
                        _ => {
                            return Err(Error::parse(
                                "augmentation policy",
                                format!("unknown token '{ch}' in '{name}'"),
                            ))
                        }
                    });
                }
            }
        }
    }
    kinds.sort();
    if let Some(w) = kinds.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::parse("augmentation policy", format!("token {} repeated in '{name}'", w[0].token())));
    }
    Ok(kinds)
}

pub fn policy_from_name(name: &str, profile: AugmentProfile) -> Result<AugmentationPolicy> {
    let ops = parse_policy_tokens(name)?.into_iter().map(|k| profile.op(k)).collect::<Result<Vec<_>>>()?;
    AugmentationPolicy::new(ops)
}

/// Canonical spelling of a policy name without resolving parameters.
pub fn canonical_policy_name(name: &str) -> Result<String> {
    let kinds = parse_policy_tokens(name)?;
    // Omniglot has every non-grayscale kind; build against a profile that accepts G.
    let profile = if kinds.contains(&OpKind::Grayscale) { AugmentProfile::MiniImagenet } else { AugmentProfile::Omniglot };
    Ok(policy_from_name(name, profile)?.name())
}

impl FromStr for AugmentProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "omniglot" => Ok(AugmentProfile::Omniglot),
            "miniimagenet" | "mini-imagenet" => Ok(AugmentProfile::MiniImagenet),
            other => Err(Error::parse("dataset", format!("unknown dataset '{other}'"))),
        }
    }
}
