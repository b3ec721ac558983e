//! Indexed image collections with meta-train/val/test splits, plus the
//! label-free view used for unsupervised meta-training.

mod miniimagenet;
mod omniglot;
mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::ImageTensor;

pub use miniimagenet::{load_miniimagenet, load_miniimagenet_with, MiniImagenetLayout};
pub use omniglot::{load_omniglot, load_omniglot_with, OmniglotLayout};
pub use synthetic::{make_synthetic, synthetic_splits};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::MetaTrain => "train",
            Split::MetaVal => "val",
            Split::MetaTest => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    /// Identifier unique across all splits of one corpus.
    pub global_id: usize,
    pub name: String,
}

/// Class-partitioned image collection for one split. Images are held as
/// quantized bytes (channels-last) and normalized to `[0, 1]` on access.
///
/// Immutable once built; clones share the pixel buffer.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    split: Split,
    side: usize,
    channels: usize,
    pixels: Arc<Vec<u8>>,
    labels: Vec<usize>,
    classes: Vec<ClassInfo>,
    members: Vec<Vec<usize>>,
}

impl DatasetIndex {
    pub fn new(
        split: Split,
        side: usize,
        channels: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
        classes: Vec<ClassInfo>,
    ) -> Result<Self> {
        ensure(side > 0 && channels > 0, || "image side and channels must be positive".into())?;
        let per_image = side * side * channels;
        ensure(pixels.len() == labels.len() * per_image, || {
            format!("{} pixel bytes for {} images of {per_image} bytes", pixels.len(), labels.len())
        })?;
        let mut members = vec![Vec::new(); classes.len()];
        for (i, &l) in labels.iter().enumerate() {
            let slot = members
                .get_mut(l)
                .ok_or_else(|| Error::Integrity(format!("label {l} outside [0, {})", classes.len())))?;
            slot.push(i);
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(Error::Integrity(format!("class '{}' has no samples", classes[c].name)));
        }
        Ok(Self { split, side, channels, pixels: Arc::new(pixels), labels, classes, members })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn global_class_ids(&self) -> HashSet<usize> {
        self.classes.iter().map(|c| c.global_id).collect()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Image indices belonging to class `c`.
    pub fn class_members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    /// Instances per class when every class has the same count.
    pub fn samples_per_class(&self) -> Option<usize> {
        let first = self.members.first()?.len();
        self.members.iter().all(|m| m.len() == first).then_some(first)
    }

    fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.side * self.side * self.channels;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> ImageTensor {
        ImageTensor::from_bytes(self.side, self.side, self.channels, self.image_bytes(i))
    }

    /// Splits by class position: the first `n_train` classes, the next
    /// `n_val`, and the rest. Class order is preserved within each split.
    pub fn partition_classes(&self, n_train: usize, n_val: usize) -> Result<(Self, Self, Self)> {
        ensure(n_train > 0 && n_val > 0 && n_train + n_val < self.class_count(), || {
            format!("cannot split {} classes into {n_train}/{n_val}/rest", self.class_count())
        })?;
        let ranges = [
            (Split::MetaTrain, 0..n_train),
            (Split::MetaVal, n_train..n_train + n_val),
            (Split::MetaTest, n_train + n_val..self.class_count()),
        ];
        let mut out = ranges.into_iter().map(|(split, range)| {
            let n = self.side * self.side * self.channels;
            let mut pixels = Vec::new();
            let mut labels = Vec::new();
            let mut classes = Vec::new();
            for (local, c) in range.enumerate() {
                classes.push(self.classes[c].clone());
                for &i in &self.members[c] {
                    pixels.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
                    labels.push(local);
                }
            }
            DatasetIndex::new(split, self.side, self.channels, pixels, labels, classes)
        });
        Ok((out.next().unwrap()?, out.next().unwrap()?, out.next().unwrap()?))
    }
}

/// Fails when any two splits share a global class identifier.
pub fn check_disjoint(splits: &[&DatasetIndex]) -> Result<()> {
    for (i, a) in splits.iter().enumerate() {
        for b in &splits[i + 1..] {
            let shared: Vec<_> = a.global_class_ids().intersection(&b.global_class_ids()).copied().collect();
            if !shared.is_empty() {
                return Err(Error::Integrity(format!(
                    "splits {} and {} share {} classes",
                    a.split(),
                    b.split(),
                    shared.len()
                )));
            }
        }
    }
    Ok(())
}

/// Label-free image collection. Exposes images only.
#[derive(Clone, Debug)]
pub struct UnlabeledPool {
    side: usize,
    channels: usize,
    pixels: Arc<Vec<u8>>,
    size: usize,
}

impl UnlabeledPool {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image(&self, i: usize) -> ImageTensor {
        let n = self.side * self.side * self.channels;
        ImageTensor::from_bytes(self.side, self.side, self.channels, &self.pixels[i * n..(i + 1) * n])
    }
}

/// Drops every label, keeping the images.
pub fn strip_labels(d: &DatasetIndex) -> Result<UnlabeledPool> {
    ensure(!d.is_empty(), || "cannot build a pool from an empty dataset".into())?;
    Ok(UnlabeledPool { side: d.side, channels: d.channels, pixels: Arc::clone(&d.pixels), size: d.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(classes: usize, per: usize) -> DatasetIndex {
        let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per)).collect();
        let pixels: Vec<u8> = labels.iter().flat_map(|&l| vec![l as u8; 4]).collect();
        let infos = (0..classes).map(|c| ClassInfo { global_id: c, name: format!("c{c}") }).collect();
        DatasetIndex::new(Split::MetaTrain, 2, 1, pixels, labels, infos).unwrap()
    }

    #[test]
    fn strip_counts_every_image() {
        let d = tiny(3, 4);
        let pool = strip_labels(&d).unwrap();
        assert_eq!(pool.size(), 12);
        assert_eq!(strip_labels(&tiny(1, 1)).unwrap().size(), 1);
    }

    #[test]
    fn empty_dataset_cannot_be_stripped() {
        let empty = DatasetIndex::new(Split::MetaTrain, 2, 1, vec![], vec![], vec![]).unwrap();
        assert!(matches!(strip_labels(&empty), Err(Error::Validation(_))));
    }

    #[test]
    fn class_without_samples_is_rejected() {
        let infos = vec![
            ClassInfo { global_id: 0, name: "a".into() },
            ClassInfo { global_id: 1, name: "b".into() },
        ];
        let err = DatasetIndex::new(Split::MetaTrain, 1, 1, vec![0], vec![0], infos).unwrap_err();
        assert!(err.to_string().contains("'b'"));
    }

    #[test]
    fn partition_is_disjoint_and_relabels_locally() {
        let d = tiny(6, 2);
        let (tr, va, te) = d.partition_classes(3, 1).unwrap();
        assert_eq!((tr.class_count(), va.class_count(), te.class_count()), (3, 1, 2));
        check_disjoint(&[&tr, &va, &te]).unwrap();
        assert_eq!(te.label(0), 0);
        assert_eq!(te.classes()[0].global_id, 4);
        assert_eq!(te.image(0).get(0, 0, 0), 4.0 / 255.0);
        assert!(check_disjoint(&[&tr, &tr]).is_err());
    }
}
