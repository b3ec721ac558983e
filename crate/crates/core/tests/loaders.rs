use std::fs;
use std::path::Path;

use aal_core::data::{
    load_miniimagenet_with, load_omniglot_with, strip_labels, MiniImagenetLayout, OmniglotLayout, Split,
};
use aal_core::Error;
use image::{GrayImage, Luma, Rgb, RgbImage};

fn omniglot_tree(root: &Path, alphabets: usize, chars: usize, per: usize, side: u32) {
    for a in 0..alphabets {
        for c in 0..chars {
            let dir = root.join(format!("alpha{a}")).join(format!("char{c:02}"));
            fs::create_dir_all(&dir).unwrap();
            for i in 0..per {
                let v = (10 * (a * chars + c) + i) as u8;
                GrayImage::from_pixel(side, side, Luma([v])).save(dir.join(format!("{i}.png"))).unwrap();
            }
        }
    }
}

fn small_layout() -> OmniglotLayout {
    OmniglotLayout { train_classes: 3, val_classes: 2, total_classes: Some(8), instances_per_class: 2, side: 28 }
}

#[test]
fn omniglot_fixture_splits_and_inverts() {
    let dir = tempfile::tempdir().unwrap();
    omniglot_tree(dir.path(), 2, 4, 2, 28);
    let (train, val, test) = load_omniglot_with(dir.path(), &small_layout()).unwrap();
    assert_eq!((train.class_count(), val.class_count(), test.class_count()), (3, 2, 3));
    assert_eq!(train.split(), Split::MetaTrain);
    assert_eq!(test.len(), 6);
    assert_eq!(train.classes()[0].name, "alpha0/char00");
    // stored value 0 becomes 255 after inversion, i.e. 1.0
    assert_eq!(train.image(0).pixels()[0], 1.0);
    let ids: Vec<_> = [&train, &val, &test].iter().flat_map(|d| d.global_class_ids()).collect();
    let unique: std::collections::HashSet<_> = ids.iter().collect();
    assert_eq!(unique.len(), ids.len());
    assert_eq!(strip_labels(&train).unwrap().size(), 6);
}

#[test]
fn omniglot_resizes_other_sizes() {
    let dir = tempfile::tempdir().unwrap();
    omniglot_tree(dir.path(), 2, 4, 2, 105);
    let (train, _, _) = load_omniglot_with(dir.path(), &small_layout()).unwrap();
    assert_eq!(train.side(), 28);
    assert_eq!(train.image(0).height(), 28);
}

#[test]
fn omniglot_integrity_failures() {
    let dir = tempfile::tempdir().unwrap();
    omniglot_tree(dir.path(), 2, 4, 2, 28);
    let wrong_total = OmniglotLayout { total_classes: Some(9), ..small_layout() };
    assert!(matches!(load_omniglot_with(dir.path(), &wrong_total), Err(Error::Integrity(_))));
    let wrong_per = OmniglotLayout { instances_per_class: 3, ..small_layout() };
    assert!(matches!(load_omniglot_with(dir.path(), &wrong_per), Err(Error::Integrity(_))));
    fs::write(dir.path().join("alpha0/char00/0.png"), b"not a png").unwrap();
    assert!(matches!(load_omniglot_with(dir.path(), &small_layout()), Err(Error::Integrity(_))));
    assert!(matches!(load_omniglot_with(&dir.path().join("missing"), &small_layout()), Err(Error::Load { .. })));
}

fn mini_tree(root: &Path, classes: [&[&str]; 3], per: usize) {
    fs::create_dir_all(root.join("images")).unwrap();
    for (split, names) in ["train", "val", "test"].iter().zip(classes) {
        let mut csv = String::from("filename,label\n");
        for (ci, name) in names.iter().enumerate() {
            for i in 0..per {
                let file = format!("{name}_{i}.png");
                RgbImage::from_pixel(84, 84, Rgb([ci as u8, i as u8, 7])).save(root.join("images").join(&file)).unwrap();
                csv.push_str(&format!("{file},{name}\n"));
            }
        }
        fs::write(root.join(format!("{split}.csv")), csv).unwrap();
    }
}

#[test]
fn miniimagenet_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    mini_tree(dir.path(), [&["n01", "n02", "n03"], &["n04", "n05"], &["n06", "n07"]], 3);
    let layout = MiniImagenetLayout { class_counts: Some([3, 2, 2]), instances_per_class: Some(3), side: 84 };
    let (train, val, test) = load_miniimagenet_with(dir.path(), &layout).unwrap();
    assert_eq!(train.channels(), 3);
    assert_eq!((train.len(), val.len(), test.len()), (9, 6, 6));
    assert_eq!(test.classes()[1].name, "n07");
    let px = train.image(4);
    assert_eq!(px.get(0, 0, 0), 1.0 / 255.0);
    assert_eq!(px.get(0, 0, 1), 1.0 / 255.0);
}

#[test]
fn miniimagenet_rejects_shared_classes_and_bad_counts() {
    let dir = tempfile::tempdir().unwrap();
    mini_tree(dir.path(), [&["n01", "n02"], &["n02"], &["n03"]], 2);
    let any = MiniImagenetLayout { class_counts: None, instances_per_class: None, side: 84 };
    assert!(matches!(load_miniimagenet_with(dir.path(), &any), Err(Error::Integrity(_))));
    let strict = MiniImagenetLayout { class_counts: Some([64, 12, 24]), ..any };
    assert!(matches!(load_miniimagenet_with(dir.path(), &strict), Err(Error::Integrity(_))));
}
