//! Mini-Imagenet loader for the standard split listing:
//!
//! ```text
//! <root>/train.csv   <root>/val.csv   <root>/test.csv   (header: filename,label)
//! <root>/images/<filename>
//! ```
//!
//! Classes inside a split are ordered by label name. Global class ids run
//! train, then val, then test. Images are decoded as RGB and resized to 84×84
//! when stored at another size.

use std::collections::BTreeMap;
use std::path::Path;

use image::imageops::FilterType;
use serde::Deserialize;

use super::{check_disjoint, ClassInfo, DatasetIndex, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniImagenetLayout {
    /// Required (train, val, test) class counts; `None` accepts any.
    pub class_counts: Option<[usize; 3]>,
    pub instances_per_class: Option<usize>,
    pub side: usize,
}

impl Default for MiniImagenetLayout {
    fn default() -> Self {
        Self { class_counts: Some([64, 12, 24]), instances_per_class: Some(600), side: 84 }
    }
}

#[derive(Deserialize)]
struct Row {
    filename: String,
    label: String,
}

pub fn load_miniimagenet(root: &Path) -> Result<(DatasetIndex, DatasetIndex, DatasetIndex)> {
    load_miniimagenet_with(root, &MiniImagenetLayout::default())
}

pub fn load_miniimagenet_with(
    root: &Path,
    layout: &MiniImagenetLayout,
) -> Result<(DatasetIndex, DatasetIndex, DatasetIndex)> {
    if !root.is_dir() {
        return Err(Error::Load { path: root.to_path_buf(), reason: "not a readable directory".into() });
    }
    let mut next_global = 0;
    let mut load = |name: &str, split: Split, idx: usize| -> Result<DatasetIndex> {
        let csv_path = root.join(format!("{name}.csv"));
        let mut reader = csv::Reader::from_path(&csv_path)
            .map_err(|e| Error::Load { path: csv_path.clone(), reason: e.to_string() })?;
        let mut by_label: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for row in reader.deserialize::<Row>() {
            let row = row.map_err(|e| Error::parse(csv_path.display().to_string(), e))?;
            by_label.entry(row.label).or_default().push(row.filename);
        }
        if let Some(counts) = layout.class_counts {
            if by_label.len() != counts[idx] {
                return Err(Error::Integrity(format!(
                    "{name} split has {} classes, expected {}",
                    by_label.len(),
                    counts[idx]
                )));
            }
        }
        let side = layout.side;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        let mut classes = Vec::new();
        for (local, (label, files)) in by_label.into_iter().enumerate() {
            if let Some(per) = layout.instances_per_class {
                if files.len() != per {
                    return Err(Error::Integrity(format!(
                        "class '{label}' has {} instances, expected {per}",
                        files.len()
                    )));
                }
            }
            for f in files {
                let path = root.join("images").join(&f);
                let img = image::open(&path)
                    .map_err(|e| Error::Integrity(format!("cannot decode {}: {e}", path.display())))?
                    .to_rgb8();
                let img = if img.dimensions() == (side as u32, side as u32) {
                    img
                } else {
                    image::imageops::resize(&img, side as u32, side as u32, FilterType::Triangle)
                };
                pixels.extend(img.into_raw());
                labels.push(local);
            }
            classes.push(ClassInfo { global_id: next_global, name: label });
            next_global += 1;
        }
        if classes.is_empty() {
            return Err(Error::Load { path: csv_path, reason: "split listing is empty".into() });
        }
        DatasetIndex::new(split, side, 3, pixels, labels, classes)
    };
    let train = load("train", Split::MetaTrain, 0)?;
    let val = load("val", Split::MetaVal, 1)?;
    let test = load("test", Split::MetaTest, 2)?;
    check_disjoint(&[&train, &val, &test])?;
    let mut seen = std::collections::HashSet::new();
    for c in [&train, &val, &test].iter().flat_map(|d| d.classes()) {
        if !seen.insert(c.name.as_str()) {
            return Err(Error::Integrity(format!("class '{}' appears in more than one split", c.name)));
        }
    }
    Ok((train, val, test))
}
