//! Few-shot episodes: supervised ones drawn from labeled splits and
//! unsupervised ones built from an unlabeled pool by random labeling and
//! augmentation.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::data::{DatasetIndex, UnlabeledPool};
use crate::error::{ensure, Error, Result};
use crate::image::ImageTensor;
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    /// Targets per class (J). Unsupervised episodes need a multiple of `k_shot`.
    pub target_per_class: usize,
    /// Augmentation for unsupervised targets; ignored for labeled sources.
    pub policy: Option<AugmentationPolicy>,
}

impl EpisodeSpec {
    pub fn supervised(n_way: usize, k_shot: usize, target_per_class: usize) -> Self {
        Self { n_way, k_shot, target_per_class, policy: None }
    }

    /// Unsupervised spec with `multiplicity` augmented copies per support image.
    pub fn unsupervised(n_way: usize, k_shot: usize, multiplicity: usize, policy: AugmentationPolicy) -> Self {
        Self { n_way, k_shot, target_per_class: multiplicity * k_shot, policy: Some(policy) }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.n_way >= 2, || format!("n_way must be at least 2, got {}", self.n_way))?;
        ensure(self.k_shot >= 1, || "k_shot must be at least 1".into())?;
        ensure(self.target_per_class >= 1, || "target_per_class must be at least 1".into())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum EpisodeSource<'a> {
    Labeled(&'a DatasetIndex),
    Unlabeled(&'a UnlabeledPool),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub target_per_class: usize,
    pub support_images: Vec<ImageTensor>,
    pub support_labels: Vec<usize>,
    pub target_images: Vec<ImageTensor>,
    pub target_labels: Vec<usize>,
    /// Index of each support image in its source collection.
    pub support_sources: Vec<usize>,
    /// Source index of each target image (for unsupervised episodes, the
    /// source of the support image it was augmented from).
    pub target_sources: Vec<usize>,
}

impl Episode {
    /// Checks label balance and sizes.
    pub fn check(&self) -> Result<()> {
        let balanced = |labels: &[usize], per: usize| {
            let mut counts = vec![0usize; self.n_way];
            for &l in labels {
                if l >= self.n_way {
                    return false;
                }
                counts[l] += 1;
            }
            counts.iter().all(|&c| c == per)
        };
        ensure(self.support_images.len() == self.support_labels.len(), || "support size mismatch".into())?;
        ensure(self.target_images.len() == self.target_labels.len(), || "target size mismatch".into())?;
        ensure(balanced(&self.support_labels, self.k_shot), || "support labels are not balanced".into())?;
        ensure(balanced(&self.target_labels, self.target_per_class), || "target labels are not balanced".into())
    }
}

pub fn sample_supervised_episode(d: &DatasetIndex, spec: &EpisodeSpec, rng: &mut RngStream) -> Result<Episode> {
    spec.validate()?;
    let (n, k, j) = (spec.n_way, spec.k_shot, spec.target_per_class);
    if d.class_count() < n {
        return Err(Error::Sampling(format!("{n}-way episode needs {n} classes, split has {}", d.class_count())));
    }
    let classes = index::sample(rng, d.class_count(), n).into_vec();
    let mut relabel: Vec<usize> = (0..n).collect();
    relabel.shuffle(rng);

    let mut ep = Episode {
        n_way: n,
        k_shot: k,
        target_per_class: j,
        support_images: Vec::with_capacity(n * k),
        support_labels: Vec::with_capacity(n * k),
        target_images: Vec::with_capacity(n * j),
        target_labels: Vec::with_capacity(n * j),
        support_sources: Vec::with_capacity(n * k),
        target_sources: Vec::with_capacity(n * j),
    };
    for (slot, &c) in classes.iter().enumerate() {
        let members = d.class_members(c);
        if members.len() < k + j {
            return Err(Error::Sampling(format!(
                "class '{}' has {} instances, episode needs {} support + {} target",
                d.classes()[c].name,
                members.len(),
                k,
                j
            )));
        }
        let picked = index::sample(rng, members.len(), k + j).into_vec();
        let label = relabel[slot];
        for (i, &p) in picked.iter().enumerate() {
            let src = members[p];
            let (images, labels, sources) = if i < k {
                (&mut ep.support_images, &mut ep.support_labels, &mut ep.support_sources)
            } else {
                (&mut ep.target_images, &mut ep.target_labels, &mut ep.target_sources)
            };
            images.push(d.image(src));
            labels.push(label);
            sources.push(src);
        }
    }
    Ok(ep)
}

pub fn sample_unsupervised_episode(pool: &UnlabeledPool, spec: &EpisodeSpec, rng: &mut RngStream) -> Result<Episode> {
    spec.validate()?;
    let (n, k, j) = (spec.n_way, spec.k_shot, spec.target_per_class);
    let policy = spec
        .policy
        .as_ref()
        .ok_or_else(|| Error::Validation("unsupervised episodes need an augmentation policy".into()))?;
    ensure(j % k == 0, || format!("target_per_class {j} must be a multiple of k_shot {k}"))?;
    let need = n * k;
    if pool.size() < need {
        return Err(Error::Sampling(format!("pool has {} images, episode needs {need}", pool.size())));
    }
    let sources = index::sample(rng, pool.size(), need).into_vec();
    let mut labels: Vec<usize> = (0..n).flat_map(|l| std::iter::repeat_n(l, k)).collect();
    labels.shuffle(rng);
    let support_images: Vec<ImageTensor> = sources.iter().map(|&i| pool.image(i)).collect();

    let multiplicity = j / k;
    let mut target_images = Vec::with_capacity(need * multiplicity);
    for _ in 0..multiplicity {
        for img in &support_images {
            target_images.push(policy.apply(img, rng)?);
        }
    }
    let target_labels = labels.repeat(multiplicity);
    let target_sources = sources.repeat(multiplicity);
    Ok(Episode {
        n_way: n,
        k_shot: k,
        target_per_class: j,
        support_images,
        support_labels: labels,
        target_images,
        target_labels,
        support_sources: sources,
        target_sources,
    })
}

pub fn sample_episode(source: EpisodeSource<'_>, spec: &EpisodeSpec, rng: &mut RngStream) -> Result<Episode> {
    match source {
        EpisodeSource::Labeled(d) => sample_supervised_episode(d, spec, rng),
        EpisodeSource::Unlabeled(p) => sample_unsupervised_episode(p, spec, rng),
    }
}

/// `batch_size` episodes, each from its own substream of `rng`.
pub fn make_meta_batch(
    source: EpisodeSource<'_>,
    spec: &EpisodeSpec,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<Vec<Episode>> {
    ensure(batch_size >= 1, || "meta-batch size must be at least 1".into())?;
    rng.substreams(batch_size).iter_mut().map(|r| sample_episode(source, spec, r)).collect()
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    n_way: usize,
    k_shot: usize,
    target_per_class: usize,
    support_labels: Vec<usize>,
    target_labels: Vec<usize>,
    support_sources: Vec<usize>,
    target_sources: Vec<usize>,
}

/// Writes `support/NNN.png`, `target/NNN.png` and `labels.json` under `dir`.
pub fn dump_episode(ep: &Episode, dir: &Path) -> Result<()> {
    for (sub, images) in [("support", &ep.support_images), ("target", &ep.target_images)] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for (i, img) in images.iter().enumerate() {
            img.save_png(&d.join(format!("{i:03}.png")))?;
        }
    }
    let manifest = Manifest {
        n_way: ep.n_way,
        k_shot: ep.k_shot,
        target_per_class: ep.target_per_class,
        support_labels: ep.support_labels.clone(),
        target_labels: ep.target_labels.clone(),
        support_sources: ep.support_sources.clone(),
        target_sources: ep.target_sources.clone(),
    };
    let path = dir.join("labels.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
