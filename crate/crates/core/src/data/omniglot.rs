//! Omniglot loader.
//!
//! Expected layout under the root (either form):
//!
//! ```text
//! <root>/<alphabet>/<character>/<instance>.png
//! <root>/images_background/<alphabet>/<character>/<instance>.png
//! <root>/images_evaluation/<alphabet>/<character>/<instance>.png
//! ```
//!
//! Character directories are ordered lexicographically by their
//! `alphabet/character` path; the first 1150 form meta-train, the next 50
//! meta-val and the remaining 423 meta-test. Images are converted to
//! grayscale, resized to 28×28 and inverted so strokes are bright on a zero
//! background (zero-filling augmentations then match the background).

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{check_disjoint, ClassInfo, DatasetIndex, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OmniglotLayout {
    pub train_classes: usize,
    pub val_classes: usize,
    /// Required total class count; `None` accepts any count above train+val.
    pub total_classes: Option<usize>,
    pub instances_per_class: usize,
    pub side: usize,
}

impl Default for OmniglotLayout {
    fn default() -> Self {
        Self { train_classes: 1150, val_classes: 50, total_classes: Some(1623), instances_per_class: 20, side: 28 }
    }
}

pub fn load_omniglot(root: &Path) -> Result<(DatasetIndex, DatasetIndex, DatasetIndex)> {
    load_omniglot_with(root, &OmniglotLayout::default())
}

pub fn load_omniglot_with(
    root: &Path,
    layout: &OmniglotLayout,
) -> Result<(DatasetIndex, DatasetIndex, DatasetIndex)> {
    let load_err = |reason: String| Error::Load { path: root.to_path_buf(), reason };
    if !root.is_dir() {
        return Err(load_err("not a readable directory".into()));
    }
    let characters = character_dirs(root)?;
    if characters.is_empty() {
        return Err(load_err("no alphabet/character directories found".into()));
    }
    if let Some(total) = layout.total_classes {
        if characters.len() != total {
            return Err(Error::Integrity(format!("expected {total} character classes, found {}", characters.len())));
        }
    }
    if characters.len() <= layout.train_classes + layout.val_classes {
        return Err(Error::Integrity(format!(
            "{} classes cannot fill a {}/{} train/val split plus a test split",
            characters.len(),
            layout.train_classes,
            layout.val_classes
        )));
    }

    let side = layout.side;
    let mut pixels = Vec::with_capacity(characters.len() * layout.instances_per_class * side * side);
    let mut labels = Vec::new();
    let mut classes = Vec::new();
    for (class, (name, dir)) in characters.iter().enumerate() {
        let files = png_files(dir)?;
        if files.len() != layout.instances_per_class {
            return Err(Error::Integrity(format!(
                "class '{name}' has {} instances, expected {}",
                files.len(),
                layout.instances_per_class
            )));
        }
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::Integrity(format!("cannot decode {}: {e}", file.display())))?
                .to_luma8();
            let img = if img.dimensions() == (side as u32, side as u32) {
                img
            } else {
                image::imageops::resize(&img, side as u32, side as u32, FilterType::Triangle)
            };
            pixels.extend(img.into_raw().into_iter().map(|v| 255 - v));
            labels.push(class);
        }
        classes.push(ClassInfo { global_id: class, name: name.clone() });
    }

    let all = DatasetIndex::new(Split::MetaTrain, side, 1, pixels, labels, classes)?;
    let (train, val, test) = all.partition_classes(layout.train_classes, layout.val_classes)?;
    check_disjoint(&[&train, &val, &test])?;
    Ok((train, val, test))
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// `(alphabet/character, path)` pairs in lexicographic order.
fn character_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let background = root.join("images_background");
    let evaluation = root.join("images_evaluation");
    let parents: Vec<PathBuf> = if background.is_dir() || evaluation.is_dir() {
        [background, evaluation].into_iter().filter(|p| p.is_dir()).collect()
    } else {
        vec![root.to_path_buf()]
    };
    let mut out = Vec::new();
    for parent in parents {
        for alphabet in sorted_subdirs(&parent)? {
            for character in sorted_subdirs(&alphabet)? {
                let name = format!("{}/{}", file_name(&alphabet), file_name(&character));
                out.push((name, character));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
