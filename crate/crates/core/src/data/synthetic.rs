//! Deterministic stroke-glyph dataset for fast tests.
//!
//! Each class is a motif of two or three thick line segments; instances jitter
//! the endpoints, translate the whole glyph by a pixel or two and vary the
//! stroke intensity. Everything derives from the seed.

use rand::Rng;

use super::{ClassInfo, DatasetIndex, Split};
use crate::error::{ensure, Result};
use crate::rng::RngStream;

type Segment = [(f64, f64); 2];

pub fn make_synthetic(n_classes: usize, n_per_class: usize, side: usize, seed: u64) -> Result<DatasetIndex> {
    ensure(n_classes > 0 && n_per_class > 0 && side > 0, || {
        format!("synthetic dataset needs positive sizes, got classes={n_classes} per_class={n_per_class} side={side}")
    })?;
    let mut rng = RngStream::new(seed);
    let s = side as f64;
    let radius = (s / 18.0).max(0.75);
    let jitter = (s / 28.0).max(0.5);
    let shift = (s / 14.0).round() as i64;

    let mut pixels = Vec::with_capacity(n_classes * n_per_class * side * side);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    let mut classes = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let strokes = rng.random_range(2..=3);
        let motif: Vec<Segment> = (0..strokes)
            .map(|_| {
                let mut p = || (rng.random_range(0.15 * s..0.85 * s), rng.random_range(0.15 * s..0.85 * s));
                [p(), p()]
            })
            .collect();
        for _ in 0..n_per_class {
            let dx = rng.random_range(-shift..=shift) as f64;
            let dy = rng.random_range(-shift..=shift) as f64;
            let intensity = rng.random_range(0.75..1.0);
            let segs: Vec<Segment> = motif
                .iter()
                .map(|seg| {
                    let mut j = |(x, y): (f64, f64)| {
                        (x + dx + rng.random_range(-jitter..jitter), y + dy + rng.random_range(-jitter..jitter))
                    };
                    [j(seg[0]), j(seg[1])]
                })
                .collect();
            render(&segs, side, radius, intensity, &mut pixels);
            labels.push(class);
        }
        classes.push(ClassInfo { global_id: class, name: format!("glyph-{class:04}") });
    }
    DatasetIndex::new(Split::MetaTrain, side, 1, pixels, labels, classes)
}

fn render(segs: &[Segment], side: usize, radius: f64, intensity: f64, out: &mut Vec<u8>) {
    for y in 0..side {
        for x in 0..side {
            let p = (x as f64, y as f64);
            let d = segs.iter().map(|s| dist_to_segment(p, s)).fold(f64::INFINITY, f64::min);
            // one-pixel linear falloff at the stroke edge
            let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
            out.push((cover * intensity * 255.0).round() as u8);
        }
    }
}

fn dist_to_segment((px, py): (f64, f64), [(ax, ay), (bx, by)]: &Segment) -> f64 {
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (ax + t * vx, ay + t * vy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Synthetic corpus split by class into meta-train/val/test.
pub fn synthetic_splits(
    train_classes: usize,
    val_classes: usize,
    test_classes: usize,
    n_per_class: usize,
    side: usize,
    seed: u64,
) -> Result<(DatasetIndex, DatasetIndex, DatasetIndex)> {
    let all = make_synthetic(train_classes + val_classes + test_classes, n_per_class, side, seed)?;
    all.partition_classes(train_classes, val_classes)
}
