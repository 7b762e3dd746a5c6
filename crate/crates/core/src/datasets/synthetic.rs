//! Small synthetic glyph corpus: jittered renderings of simple shapes on a dark
//! background, one shape per class.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledImageSet, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Cross,
    Bar,
    Ring,
    Triangle,
    Square,
}

/// Class `k` renders `SHAPE_KINDS[k]`.
pub const SHAPE_KINDS: [ShapeKind; 6] = [
    ShapeKind::Disk,
    ShapeKind::Cross,
    ShapeKind::Bar,
    ShapeKind::Ring,
    ShapeKind::Triangle,
    ShapeKind::Square,
];

fn inside(kind: ShapeKind, dy: f64, dx: f64, s: f64) -> bool {
    match kind {
        ShapeKind::Disk => dy * dy + dx * dx <= (8.0 * s).powi(2),
        ShapeKind::Cross => {
            let (t, l) = (2.0 * s, 10.0 * s);
            (dx.abs() <= t && dy.abs() <= l) || (dy.abs() <= t && dx.abs() <= l)
        }
        ShapeKind::Bar => dy.abs() <= 2.5 * s && dx.abs() <= 11.0 * s,
        ShapeKind::Ring => ((dy * dy + dx * dx).sqrt() - 8.0 * s).abs() <= 1.5 * s,
        ShapeKind::Triangle => {
            let h = 9.0 * s;
            dy.abs() <= h && dx.abs() <= (dy + h) / (2.0 * h) * 10.0 * s
        }
        ShapeKind::Square => {
            let m = dx.abs().max(dy.abs());
            (7.0 * s..=9.0 * s).contains(&m)
        }
    }
}

fn render(kind: ShapeKind, side: usize, rng: &mut impl Rng) -> Vec<f32> {
    let centre = (side as f64 - 1.0) / 2.0;
    let cy = centre + rng.random_range(-1.5..=1.5);
    let cx = centre + rng.random_range(-1.5..=1.5);
    let scale = rng.random_range(0.9..=1.1) * side as f64 / 32.0;
    let intensity = rng.random_range(0.75..=1.0);
    let mut out = vec![0.0f32; side * side];
    for r in 0..side {
        for c in 0..side {
            let noise: f64 = rng.random_range(0.0..0.05);
            let fg = if inside(kind, r as f64 - cy, c as f64 - cx, scale) { intensity } else { 0.0 };
            out[r * side + c] = (fg + noise).min(1.0) as f32;
        }
    }
    out
}

/// `n_per_class` training and `n_per_class` test images for each of the first `classes`
/// shape kinds, grayscale, `image_size`×`image_size`.
pub fn synthesize_shapes(
    n_per_class: usize,
    classes: usize,
    image_size: usize,
    rng: &mut impl Rng,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if image_size != 32 {
        return Err(Error::invalid(format!("synthetic shapes are rendered at 32×32, not {image_size}")));
    }
    if classes == 0 || classes > SHAPE_KINDS.len() {
        return Err(Error::invalid(format!(
            "synthetic corpus supports 1..={} classes, got {classes}",
            SHAPE_KINDS.len()
        )));
    }
    let shape = (1, image_size, image_size);
    let mut train = LabeledImageSet::new(Split::Train, shape);
    let mut test = LabeledImageSet::new(Split::Test, shape);
    for (set, prefix) in [(&mut train, "train"), (&mut test, "test")] {
        for (k, &kind) in SHAPE_KINDS.iter().enumerate().take(classes) {
            for i in 0..n_per_class {
                let name = format!("{kind:?}").to_lowercase();
                set.push(format!("synthetic/{prefix}/{name}/{i:05}"), k as u32, name, render(kind, image_size, rng));
            }
        }
    }
    Ok((train, test))
}
