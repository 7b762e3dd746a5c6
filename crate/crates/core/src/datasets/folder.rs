//! Category folders in the industrial-inspection layout:
//! `root/train/good/*` for training and `root/test/<subcategory>/*` for evaluation,
//! where `good` is normal and any other subcategory is a defect type.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledImageSet, OneClassTask, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::losses::Role;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FolderLayout {
    pub image_size: usize,
    pub channels: usize,
}

impl Default for FolderLayout {
    fn default() -> Self {
        Self {
            image_size: 256,
            channels: 3,
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "PNG"];

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e));
        if path.is_file() && is_image {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Decodes one image file, resized to the layout's side, as `[0, 1]` CHW values.
pub fn load_image(path: &Path, layout: &FolderLayout) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let side = layout.image_size as u32;
    let img = if img.width() != side || img.height() != side {
        img.resize_exact(side, side, FilterType::Triangle)
    } else {
        img
    };
    let plane = layout.image_size * layout.image_size;
    let mut out = vec![0.0f32; layout.channels * plane];
    match layout.channels {
        1 => {
            for (o, p) in out.iter_mut().zip(img.to_luma8().pixels()) {
                *o = p.0[0] as f32 / 255.0;
            }
        }
        3 => {
            for (i, p) in img.to_rgb8().pixels().enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = p.0[c] as f32 / 255.0;
                }
            }
        }
        c => return Err(Error::invalid(format!("unsupported channel count {c}"))),
    }
    Ok(out)
}

fn relative_id(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Reads one category folder. Files are visited in lexicographic path order; test
/// class ids are 0 for `good` and 1 + (sorted defect index) otherwise.
pub fn load_folder_dataset(root: &Path, layout: &FolderLayout) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let shape = (layout.channels, layout.image_size, layout.image_size);
    let good = root.join("train").join("good");
    if !good.is_dir() {
        return Err(Error::Structure(format!("missing {}", good.display())));
    }
    let mut train = LabeledImageSet::new(Split::Train, shape);
    for path in sorted_files(&good)? {
        train.push(relative_id(root, &path), 0, "good".into(), load_image(&path, layout)?);
    }
    if train.is_empty() {
        return Err(Error::Structure(format!("{} contains no images", good.display())));
    }

    let test_dir = root.join("test");
    if !test_dir.is_dir() {
        return Err(Error::Structure(format!("missing {}", test_dir.display())));
    }
    let mut test = LabeledImageSet::new(Split::Test, shape);
    let mut defect_index = 0;
    for sub in sorted_dirs(&test_dir)? {
        let name = sub.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let class = if name == "good" {
            0
        } else {
            defect_index += 1;
            defect_index
        };
        for path in sorted_files(&sub)? {
            test.push(relative_id(root, &path), class, name.clone(), load_image(&path, layout)?);
        }
    }
    if test.is_empty() {
        return Err(Error::Structure(format!("{} contains no images", test_dir.display())));
    }
    Ok((train, test))
}

/// Turns a loaded category into a one-class task: all training images are normal,
/// test `good` images are labelled 0 and every defect image 1. There is no separate
/// anomaly pool, so injection draws from the test defects.
pub fn folder_task(train: &LabeledImageSet, test: &LabeledImageSet, category: &str) -> Result<OneClassTask> {
    train.validate()?;
    test.validate()?;
    let mut task = OneClassTask {
        target_class: 0,
        image_shape: train.shape,
        train: Vec::new(),
        test: Vec::new(),
        pool: Vec::new(),
        augmentation: category_augmentation(category),
    };
    for i in 0..train.len() {
        task.train.push(train.record(i, Role::Normal, 0));
    }
    for i in 0..test.len() {
        let anomalous = test.class_ids[i] != 0;
        let role = if anomalous { Role::RealAnomaly } else { Role::Normal };
        task.test.push(test.record(i, role, anomalous as u8));
    }
    task.check_no_leakage()?;
    Ok(task)
}

/// Standard (label-preserving) training augmentation for a category.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rigid: bool,
    pub max_rotation_deg: f64,
    pub max_translation_frac: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            rigid: false,
            max_rotation_deg: 5.0,
            max_translation_frac: 0.02,
        }
    }
}

/// Static per-category table. Flips are disabled where orientation is part of what
/// makes an object normal (printed text, asymmetric parts, flipped-part defects).
pub fn category_augmentation(category: &str) -> Augmentation {
    let (flip_h, flip_v) = match category {
        "carpet" | "grid" | "leather" | "tile" | "wood" | "bottle" | "hazelnut" | "screw" | "zipper" => (true, true),
        "toothbrush" => (true, false),
        "cable" | "capsule" | "metal_nut" | "pill" | "transistor" => (false, false),
        _ => (false, false),
    };
    Augmentation {
        flip_h,
        flip_v,
        rigid: !category.is_empty(),
        ..Augmentation::default()
    }
}

/// Applies each enabled flip with probability ½, then a random rotation of at most
/// `max_rotation_deg` and a shift of at most `max_translation_frac` of the side, with
/// bilinear sampling and edge replication.
pub fn augment_image(pixels: &[f32], shape: (usize, usize, usize), aug: &Augmentation, rng: &mut impl Rng) -> Vec<f32> {
    let (c, h, w) = shape;
    let plane = h * w;
    let mut out = pixels.to_vec();
    if aug.flip_h && rng.random_bool(0.5) {
        for ch in out.chunks_mut(plane) {
            for row in ch.chunks_mut(w) {
                row.reverse();
            }
        }
    }
    if aug.flip_v && rng.random_bool(0.5) {
        let src = out.clone();
        for k in 0..c {
            for r in 0..h {
                let d = k * plane + r * w;
                let s = k * plane + (h - 1 - r) * w;
                out[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    if aug.rigid {
        let theta = rng.random_range(-aug.max_rotation_deg..=aug.max_rotation_deg).to_radians();
        let tx = rng.random_range(-aug.max_translation_frac..=aug.max_translation_frac) * w as f64;
        let ty = rng.random_range(-aug.max_translation_frac..=aug.max_translation_frac) * h as f64;
        let src = out.clone();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, co) = theta.sin_cos();
        let sample = |k: usize, y: f64, x: f64| -> f32 {
            let y = y.clamp(0.0, h as f64 - 1.0);
            let x = x.clamp(0.0, w as f64 - 1.0);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
            let at = |yy: usize, xx: usize| src[k * plane + yy * w + xx];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        };
        for k in 0..c {
            for r in 0..h {
                for col in 0..w {
                    // inverse map: output pixel -> source location
                    let (dy, dx) = (r as f64 - cy - ty, col as f64 - cx - tx);
                    let sy = co * dy - s * dx + cy;
                    let sx = s * dy + co * dx + cx;
                    out[k * plane + r * w + col] = sample(k, sy, sx);
                }
            }
        }
    }
    out
}

impl SampleRecord {
    pub fn augmented(&self, shape: (usize, usize, usize), aug: &Augmentation, rng: &mut impl Rng) -> SampleRecord {
        SampleRecord {
            pixels: augment_image(&self.pixels, shape, aug, rng),
            ..self.clone()
        }
    }
}
