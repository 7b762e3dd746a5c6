//! Image sets, the one-class split protocol, anomaly injection, and task manifests.

mod folder;
mod idx;
mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Role;
use crate::tensor::{Real, Tensor};

pub use folder::{augment_image, category_augmentation, folder_task, load_folder_dataset, load_image, Augmentation, FolderLayout};
pub use idx::{parse_idx, read_idx_file, serialize_idx, IdxDtype, IdxTensor};
pub use synthetic::{synthesize_shapes, ShapeKind, SHAPE_KINDS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images of one split with their class ids. Pixels are `[0, 1]` reals in CHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub split: Split,
    /// (channels, height, width)
    pub shape: (usize, usize, usize),
    pub ids: Vec<String>,
    pub class_ids: Vec<u32>,
    /// Human-readable class or defect-type name, e.g. `"7"` or `"crack"`.
    pub subcategories: Vec<String>,
    pub images: Vec<Vec<f32>>,
}

impl LabeledImageSet {
    pub fn new(split: Split, shape: (usize, usize, usize)) -> Self {
        Self {
            split,
            shape,
            ids: Vec::new(),
            class_ids: Vec::new(),
            subcategories: Vec::new(),
            images: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, id: String, class_id: u32, subcategory: String, image: Vec<f32>) {
        self.ids.push(id);
        self.class_ids.push(class_id);
        self.subcategories.push(subcategory);
        self.images.push(image);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if self.ids.len() != n || self.class_ids.len() != n || self.subcategories.len() != n {
            return Err(Error::invalid("image set columns have unequal lengths"));
        }
        let per = self.shape.0 * self.shape.1 * self.shape.2;
        if let Some(i) = self.images.iter().position(|im| im.len() != per) {
            return Err(Error::shape(format!(
                "image {} has {} values, expected {per}",
                self.ids[i],
                self.images[i].len()
            )));
        }
        Ok(())
    }

    /// Every image bilinearly resized to `side × side`.
    pub fn resized(&self, side: usize) -> Self {
        if (self.shape.1, self.shape.2) == (side, side) {
            return self.clone();
        }
        let mut out = self.clone();
        out.shape = (self.shape.0, side, side);
        out.images = self.images.iter().map(|im| resize_bilinear(im, self.shape, side)).collect();
        out
    }

    fn record(&self, i: usize, role: Role, label: u8) -> SampleRecord {
        SampleRecord {
            id: self.ids[i].clone(),
            role,
            label,
            class_id: self.class_ids[i],
            subcategory: self.subcategories[i].clone(),
            pixels: self.images[i].clone(),
        }
    }
}

/// Bilinear resampling of a CHW image with half-pixel centers (corners not aligned).
pub fn resize_bilinear(pixels: &[f32], shape: (usize, usize, usize), side: usize) -> Vec<f32> {
    let (c, h, w) = shape;
    let axis = |n_in: usize, i: usize| -> (usize, usize, f32) {
        let src = ((i as f32 + 0.5) * n_in as f32 / side as f32 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f32)
    };
    let ys: Vec<_> = (0..side).map(|i| axis(h, i)).collect();
    let xs: Vec<_> = (0..side).map(|i| axis(w, i)).collect();
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        let plane = &pixels[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Loads an image file and its label file, both IDX, into one split.
pub fn load_idx_pair(images: &Path, labels: &Path, split: Split) -> Result<LabeledImageSet> {
    let img = read_idx_file(images)?;
    let lab = read_idx_file(labels)?;
    if img.dtype != IdxDtype::U8 || lab.dtype != IdxDtype::U8 {
        return Err(Error::Structure(format!(
            "{} and {} must both hold unsigned bytes",
            images.display(),
            labels.display()
        )));
    }
    let (n, h, w) = match img.dims[..] {
        [n, h, w] => (n, h, w),
        [n, h, w, 1] => (n, h, w),
        _ => {
            return Err(Error::Structure(format!(
                "{}: expected rank-3 images, got dims {:?}",
                images.display(),
                img.dims
            )))
        }
    };
    if lab.dims != [n] {
        return Err(Error::Structure(format!(
            "{}: expected {n} labels, got dims {:?}",
            labels.display(),
            lab.dims
        )));
    }
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut set = LabeledImageSet::new(split, (1, h, w));
    let per = h * w;
    for i in 0..n {
        let class = (lab.data[i] * 255.0).round() as u32;
        let pixels = img.data[i * per..(i + 1) * per].iter().map(|&v| v as f32).collect();
        set.push(format!("{prefix}/{i:05}"), class, class.to_string(), pixels);
    }
    Ok(set)
}

/// Loads the standard four-file MNIST-style layout from `dir`.
pub fn load_idx_dir(dir: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let train = load_idx_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_idx_pair(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub role: Role,
    /// 0 for normal, 1 for anomalous.
    pub label: u8,
    pub class_id: u32,
    pub subcategory: String,
    #[serde(skip)]
    pub pixels: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneClassTask {
    pub target_class: u32,
    pub image_shape: (usize, usize, usize),
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    /// Held-out anomalous training images that mode-e injection draws from first.
    #[serde(skip)]
    pub pool: Vec<SampleRecord>,
    #[serde(default)]
    pub augmentation: Augmentation,
}

impl OneClassTask {
    pub fn check_no_leakage(&self) -> Result<()> {
        let train: HashSet<&str> = self.train.iter().map(|r| r.id.as_str()).collect();
        if let Some(r) = self.test.iter().find(|r| train.contains(r.id.as_str())) {
            return Err(Error::invalid(format!("sample {} appears in both train and test", r.id)));
        }
        Ok(())
    }

    pub fn train_anomaly_count(&self) -> usize {
        self.train.iter().filter(|r| r.role.is_anomalous()).count()
    }

    pub fn to_manifest_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(format!("manifest serialization: {e}")))
    }

    /// Keeps at most `max_train` training records and `max_test` test records, each a
    /// uniform random subset in original order. Injected anomalies are always kept.
    pub fn subsample(&mut self, max_train: Option<usize>, max_test: Option<usize>, rng: &mut impl Rng) {
        fn keep(records: &mut Vec<SampleRecord>, max: usize, rng: &mut impl Rng, pinned: impl Fn(&SampleRecord) -> bool) {
            let free: Vec<usize> = (0..records.len()).filter(|&i| !pinned(&records[i])).collect();
            let budget = max.saturating_sub(records.len() - free.len());
            if free.len() <= budget {
                return;
            }
            let mut chosen: Vec<usize> = sample_indices(rng, free.len(), budget).into_iter().map(|j| free[j]).collect();
            chosen.sort_unstable();
            let mut chosen = chosen.into_iter().peekable();
            let mut i = 0;
            records.retain(|r| {
                let keep = pinned(r) || chosen.next_if_eq(&i).is_some();
                i += 1;
                keep
            });
        }
        if let Some(m) = max_train {
            keep(&mut self.train, m, rng, |r| r.role.is_anomalous());
        }
        if let Some(m) = max_test {
            keep(&mut self.test, m, rng, |_| false);
        }
    }
}

/// Stacks the pixels of `records` into an `N×C×H×W` tensor.
pub fn batch_tensor<T: Real>(records: &[&SampleRecord], shape: (usize, usize, usize)) -> Result<Tensor<T>> {
    let (c, h, w) = shape;
    let mut data = Vec::with_capacity(records.len() * c * h * w);
    for r in records {
        if r.pixels.len() != c * h * w {
            return Err(Error::shape(format!("record {} has {} pixels", r.id, r.pixels.len())));
        }
        data.extend(r.pixels.iter().map(|&v| T::c(v as f64)));
    }
    Tensor::from_vec(&[records.len(), c, h, w], data)
}

/// One-class protocol: the target class of the training split is the normal training
/// set; the test split keeps every target image plus a uniform random half (rounded
/// down) of the non-target images as anomalies. Non-target training images form the
/// injection pool.
pub fn one_class_split(
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    target: u32,
    rng: &mut impl Rng,
) -> Result<OneClassTask> {
    train.validate()?;
    test.validate()?;
    if train.shape != test.shape {
        return Err(Error::invalid("train and test image shapes differ"));
    }
    let mut task = OneClassTask {
        target_class: target,
        image_shape: train.shape,
        train: Vec::new(),
        test: Vec::new(),
        pool: Vec::new(),
        augmentation: Augmentation::default(),
    };
    for i in 0..train.len() {
        if train.class_ids[i] == target {
            task.train.push(train.record(i, Role::Normal, 0));
        } else {
            task.pool.push(train.record(i, Role::RealAnomaly, 1));
        }
    }
    if task.train.is_empty() {
        return Err(Error::invalid(format!("target class {target} has no training images")));
    }
    let others: Vec<usize> = (0..test.len()).filter(|&i| test.class_ids[i] != target).collect();
    if others.len() == test.len() {
        return Err(Error::invalid(format!("target class {target} has no test images")));
    }
    let mut chosen = vec![false; test.len()];
    for j in sample_indices(rng, others.len(), others.len() / 2) {
        chosen[others[j]] = true;
    }
    for i in 0..test.len() {
        if test.class_ids[i] == target {
            task.test.push(test.record(i, Role::Normal, 0));
        } else if chosen[i] {
            task.test.push(test.record(i, Role::RealAnomaly, 1));
        }
    }
    task.check_no_leakage()?;
    Ok(task)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// `floor(fraction × normal training images)` anomalies.
    Fraction(f64),
    /// This many anomalies from every anomalous subcategory.
    PerSubcategory(usize),
}

/// Moves real anomalies into the training set with role [`Role::RealAnomaly`]. They come
/// from the held-out pool when it is non-empty, otherwise from the test anomalies, which
/// are then removed from the test set.
pub fn inject_anomalies(mut task: OneClassTask, how: Injection, rng: &mut impl Rng) -> Result<OneClassTask> {
    let from_pool = !task.pool.is_empty();
    let source: Vec<usize> = if from_pool {
        (0..task.pool.len()).collect()
    } else {
        (0..task.test.len()).filter(|&i| task.test[i].label == 1).collect()
    };
    let subcat = |i: usize| -> &str {
        if from_pool {
            &task.pool[i].subcategory
        } else {
            &task.test[i].subcategory
        }
    };
    let picked: Vec<usize> = match how {
        Injection::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("anomaly fraction {f} is outside [0, 1]")));
            }
            let normals = task.train.iter().filter(|r| r.role == Role::Normal).count();
            let n = (f * normals as f64 + 1e-9).floor() as usize;
            if n > source.len() {
                return Err(Error::invalid(format!(
                    "requested {n} anomalies but only {} are available",
                    source.len()
                )));
            }
            sample_indices(rng, source.len(), n).into_iter().map(|j| source[j]).collect()
        }
        Injection::PerSubcategory(k) => {
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for &i in &source {
                groups.entry(subcat(i)).or_default().push(i);
            }
            let mut out = Vec::new();
            for (name, members) in &groups {
                if members.len() < k {
                    return Err(Error::invalid(format!(
                        "subcategory {name} has {} anomalies, {k} requested",
                        members.len()
                    )));
                }
                out.extend(sample_indices(rng, members.len(), k).into_iter().map(|j| members[j]));
            }
            out
        }
    };
    if picked.is_empty() {
        return Ok(task);
    }
    let picked: HashSet<usize> = picked.into_iter().collect();
    let take = |records: &mut Vec<SampleRecord>| -> Vec<SampleRecord> {
        let mut moved = Vec::new();
        let mut kept = Vec::new();
        for (i, r) in records.drain(..).enumerate() {
            if picked.contains(&i) {
                moved.push(r);
            } else {
                kept.push(r);
            }
        }
        *records = kept;
        moved
    };
    let moved = if from_pool { take(&mut task.pool) } else { take(&mut task.test) };
    for mut r in moved {
        r.role = Role::RealAnomaly;
        r.label = 1;
        task.train.push(r);
    }
    task.check_no_leakage()?;
    Ok(task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy(classes: u32, per_train: usize, per_test: usize) -> (LabeledImageSet, LabeledImageSet) {
        let mut train = LabeledImageSet::new(Split::Train, (1, 2, 2));
        let mut test = LabeledImageSet::new(Split::Test, (1, 2, 2));
        for c in 0..classes {
            for k in 0..per_train {
                train.push(format!("train/{c}/{k:03}"), c, c.to_string(), vec![c as f32 / 10.0; 4]);
            }
            for k in 0..per_test {
                test.push(format!("test/{c}/{k:03}"), c, c.to_string(), vec![c as f32 / 10.0; 4]);
            }
        }
        (train, test)
    }

    #[test]
    fn counting_oracle() {
        let (train, test) = toy(10, 10, 4);
        let task = one_class_split(&train, &test, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(task.train.len(), 10);
        assert_eq!(task.test.iter().filter(|r| r.label == 0).count(), 4);
        assert_eq!(task.test.iter().filter(|r| r.label == 1).count(), 18);
        assert_eq!(task.pool.len(), 90);
        assert!(task.train.iter().all(|r| r.role == Role::Normal && r.class_id == 0));
    }

    #[test]
    fn split_errors_and_determinism() {
        let (train, test) = toy(3, 5, 3);
        assert!(one_class_split(&train, &test, 7, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut no_test = test.clone();
        for c in no_test.class_ids.iter_mut() {
            if *c == 0 {
                *c = 1;
            }
        }
        assert!(one_class_split(&train, &no_test, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let a = one_class_split(&train, &test, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = one_class_split(&train, &test, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn injection_counts_and_leakage() {
        let (train, test) = toy(2, 6000, 10);
        let task = one_class_split(&train, &test, 0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let same = inject_anomalies(task.clone(), Injection::Fraction(0.0), &mut rng).unwrap();
        assert_eq!(same, task);
        let e = inject_anomalies(task.clone(), Injection::Fraction(0.01), &mut rng).unwrap();
        assert_eq!(e.train_anomaly_count(), 60);
        assert_eq!(e.train.len(), 6060);
        e.check_no_leakage().unwrap();
        assert!(inject_anomalies(task, Injection::Fraction(1.0), &mut rng).is_ok());
    }

    #[test]
    fn injection_from_test_when_pool_is_empty() {
        let mut task = OneClassTask {
            target_class: 0,
            image_shape: (1, 1, 1),
            train: (0..5).map(|i| rec(&format!("train/good/{i}"), "good", 0)).collect(),
            test: vec![
                rec("test/good/0", "good", 0),
                rec("test/crack/0", "crack", 1),
                rec("test/crack/1", "crack", 1),
                rec("test/hole/0", "hole", 1),
            ],
            pool: vec![],
            augmentation: Augmentation::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = inject_anomalies(task.clone(), Injection::PerSubcategory(1), &mut rng).unwrap();
        assert_eq!(e.train_anomaly_count(), 2);
        assert_eq!(e.test.len(), 2);
        e.check_no_leakage().unwrap();
        assert!(inject_anomalies(task.clone(), Injection::PerSubcategory(2), &mut rng).is_err());
        task.train.truncate(1);
        assert!(inject_anomalies(task, Injection::Fraction(1.0), &mut rng).is_ok());
    }

    fn rec(id: &str, sub: &str, label: u8) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            role: if label == 0 { Role::Normal } else { Role::RealAnomaly },
            label,
            class_id: label as u32,
            subcategory: sub.into(),
            pixels: vec![0.0],
        }
    }

    #[test]
    fn manifest_lists_ids_roles_and_labels() {
        let (train, test) = toy(2, 2, 2);
        let task = one_class_split(&train, &test, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&task.to_manifest_json().unwrap()).unwrap();
        assert_eq!(v["train"].as_array().unwrap().len(), 2);
        assert_eq!(v["train"][0]["role"], "normal");
        let first_normal = task.test.iter().position(|r| r.class_id == 1).unwrap();
        assert_eq!(v["test"][first_normal]["label"], 0);
        assert_eq!(v["test"][0]["label"], 1);
        assert!(v["train"][0].get("pixels").is_none());
    }

    #[test]
    fn subsample_keeps_anomalies_and_order() {
        let (train, test) = toy(2, 50, 40);
        let task = one_class_split(&train, &test, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut e = inject_anomalies(task, Injection::Fraction(0.1), &mut rng).unwrap();
        e.subsample(Some(20), Some(30), &mut rng);
        assert_eq!(e.train.len(), 20);
        assert_eq!(e.train_anomaly_count(), 5);
        assert_eq!(e.test.len(), 30);
        let ids: Vec<&String> = e.test.iter().map(|r| &r.id).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn bilinear_resize() {
        let flat = vec![0.25f32; 28 * 28];
        assert!(resize_bilinear(&flat, (1, 28, 28), 32).iter().all(|&v| (v - 0.25).abs() < 1e-7));
        // 2x2 -> 4x4: interior samples sit at quarter offsets
        let up = resize_bilinear(&[0.0, 1.0, 0.0, 1.0], (1, 2, 2), 4);
        assert_eq!(&up[..4], &[0.0, 0.25, 0.75, 1.0]);
        let ramp: Vec<f32> = (0..16).map(|i| i as f32).collect();
        assert_eq!(resize_bilinear(&ramp, (1, 4, 4), 4), ramp);
        let (train, _) = toy(1, 2, 1);
        let r = train.resized(5);
        assert_eq!(r.shape, (1, 5, 5));
        assert_eq!(r.images[0].len(), 25);
    }

    #[test]
    fn idx_pair_loading() {
        let dir = tempfile::tempdir().unwrap();
        let images = IdxTensor {
            dtype: IdxDtype::U8,
            dims: vec![3, 2, 2],
            data: (0..12).map(|v| v as f64 / 255.0).collect(),
        };
        let labels = IdxTensor { dtype: IdxDtype::U8, dims: vec![3], data: vec![7.0 / 255.0, 0.0, 1.0 / 255.0] };
        std::fs::write(dir.path().join("i"), serialize_idx(&images).unwrap()).unwrap();
        std::fs::write(dir.path().join("l"), serialize_idx(&labels).unwrap()).unwrap();
        let set = load_idx_pair(&dir.path().join("i"), &dir.path().join("l"), Split::Test).unwrap();
        assert_eq!(set.class_ids, vec![7, 0, 1]);
        assert_eq!(set.shape, (1, 2, 2));
        assert_eq!(set.images[1], vec![4.0 / 255.0, 5.0 / 255.0, 6.0 / 255.0, 7.0 / 255.0]);
        assert_eq!(set.ids[2], "test/00002");
        assert!(load_idx_pair(&dir.path().join("i"), &dir.path().join("missing"), Split::Test).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_conserves_counts(counts in prop::collection::vec((1usize..6, 0usize..9), 2..6), target in 0usize..6, seed in any::<u64>()) {
                let target = (target % counts.len()) as u32;
                let mut train = LabeledImageSet::new(Split::Train, (1, 1, 1));
                let mut test = LabeledImageSet::new(Split::Test, (1, 1, 1));
                for (c, &(a, b)) in counts.iter().enumerate() {
                    for k in 0..a {
                        train.push(format!("train/{c}/{k}"), c as u32, c.to_string(), vec![0.5]);
                    }
                    for k in 0..b.max(usize::from(c as u32 == target)) {
                        test.push(format!("test/{c}/{k}"), c as u32, c.to_string(), vec![0.5]);
                    }
                }
                let task = one_class_split(&train, &test, target, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let others = test.class_ids.iter().filter(|&&c| c != target).count();
                prop_assert_eq!(task.test.iter().filter(|r| r.label == 1).count(), others / 2);
                prop_assert_eq!(task.train.len(), counts[target as usize].0);
                prop_assert_eq!(task.pool.len(), train.len() - task.train.len());
                prop_assert!(task.check_no_leakage().is_ok());
            }
        }
    }
}
