//! Datasets: class-per-directory image trees, ingested feature tables and
//! synthetic desk-scale imagery, plus stratified ratio splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureVec, ImageSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum Samples {
    Images(Vec<ImageSample>),
    Features(Vec<(FeatureVec, usize)>),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    pub class_names: Vec<String>,
    samples: Samples,
}

impl Dataset {
    /// Wrap samples, verifying labels are dense in `[0, c)` and every class
    /// appears at least twice. Imbalance is permitted.
    pub fn new(name: impl Into<String>, class_names: Vec<String>, samples: Samples) -> Result<Self> {
        let classes = class_names.len();
        if classes < 2 {
            return Err(Error::Data(format!(
                "dataset needs >= 2 classes, got {classes}"
            )));
        }
        let mut counts = vec![0usize; classes];
        let labels: Vec<usize> = match &samples {
            Samples::Images(v) => v.iter().map(|s| s.label).collect(),
            Samples::Features(v) => v.iter().map(|(_, l)| *l).collect(),
        };
        for l in labels {
            if l >= classes {
                return Err(Error::Data(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            counts[l] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n < 2) {
            return Err(Error::Data(format!(
                "class {c} ({}) has {} sample(s); every class needs at least 2",
                class_names[c], counts[c]
            )));
        }
        if let Samples::Features(v) = &samples {
            let w = v[0].0.width();
            if let Some((i, _)) = v.iter().enumerate().find(|(_, (f, _))| f.width() != w) {
                return Err(Error::Data(format!(
                    "feature width mismatch at sample {i}"
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            classes,
            class_names,
            samples,
        })
    }

    /// Internal constructor for split views; skips the per-class minimum.
    fn subset_unchecked(&self, indices: &[usize]) -> Dataset {
        let samples = match &self.samples {
            Samples::Images(v) => {
                Samples::Images(indices.iter().map(|&i| v[i].clone()).collect())
            }
            Samples::Features(v) => {
                Samples::Features(indices.iter().map(|&i| v[i].clone()).collect())
            }
        };
        Dataset {
            name: self.name.clone(),
            classes: self.classes,
            class_names: self.class_names.clone(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        match &self.samples {
            Samples::Images(v) => v.len(),
            Samples::Features(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, i: usize) -> usize {
        match &self.samples {
            Samples::Images(v) => v[i].label,
            Samples::Features(v) => v[i].1,
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    pub fn samples(&self) -> &Samples {
        &self.samples
    }

    pub fn is_images(&self) -> bool {
        matches!(self.samples, Samples::Images(_))
    }

    pub fn image(&self, i: usize) -> Option<&ImageSample> {
        match &self.samples {
            Samples::Images(v) => Some(&v[i]),
            Samples::Features(_) => None,
        }
    }

    pub fn feature(&self, i: usize) -> Option<&FeatureVec> {
        match &self.samples {
            Samples::Images(_) => None,
            Samples::Features(v) => Some(&v[i].0),
        }
    }

    /// Feature width for feature datasets.
    pub fn feature_width(&self) -> Option<usize> {
        match &self.samples {
            Samples::Images(_) => None,
            Samples::Features(v) => Some(v[0].0.width()),
        }
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for i in 0..self.len() {
            counts[self.label(i)] += 1;
        }
        counts
    }
}

/// Stratified ratio split specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub rng_seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_ratio: 0.8,
            rng_seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config(format!(
                "train_ratio must be in (0,1), got {}",
                self.train_ratio
            )));
        }
        if !self.stratified {
            return Err(Error::Config(
                "only stratified splits are supported".into(),
            ));
        }
        Ok(())
    }
}

/// Stratified, disjoint, exhaustive split. Per-class train count is
/// round-half-up(ratio × class size) clamped to [1, size-1].
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for i in 0..dataset.len() {
        per_class[dataset.label(i)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for members in per_class.iter_mut() {
        let n = members.len();
        let want = (spec.train_ratio * n as f64 + 0.5).floor() as usize;
        let take = want.clamp(1, n - 1);
        members.shuffle(&mut rng);
        train_idx.extend_from_slice(&members[..take]);
        test_idx.extend_from_slice(&members[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        dataset.subset_unchecked(&train_idx),
        dataset.subset_unchecked(&test_idx),
    ))
}

/// HSV-ish palette giving well-separated colors per class.
fn class_color(class: usize, classes: usize) -> [f32; 3] {
    let h = class as f32 / classes as f32 * 6.0;
    let sector = h.floor() as usize % 6;
    let frac = h - h.floor();
    let (r, g, b) = match sector {
        0 => (1.0, frac, 0.0),
        1 => (1.0 - frac, 1.0, 0.0),
        2 => (0.0, 1.0, frac),
        3 => (0.0, 1.0 - frac, 1.0),
        4 => (frac, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - frac),
    };
    [r, g, b]
}

/// Class-conditional blob imagery: each class has a distinct base color and
/// a distinct bright blob position, with additive noise. Reproducible from
/// the seed; learnable by a nearest-centroid classifier on raw pixels.
pub fn synth_dataset(
    classes: usize,
    per_class: usize,
    image_side: usize,
    rng_seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "synth dataset needs >= 2 classes, got {classes}"
        )));
    }
    if per_class < 4 {
        return Err(Error::Config(format!(
            "synth dataset needs >= 4 samples per class, got {per_class}"
        )));
    }
    if image_side < 8 {
        return Err(Error::Config(format!(
            "synth image side must be >= 8, got {image_side}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let side = image_side;
    let sigma = side as f32 / 6.0;
    let mut images = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let color = class_color(class, classes);
        // Blob centers on a circle, one angle per class.
        let angle = class as f32 / classes as f32 * std::f32::consts::TAU;
        let cx = side as f32 / 2.0 + angle.cos() * side as f32 / 4.0;
        let cy = side as f32 / 2.0 + angle.sin() * side as f32 / 4.0;
        for _ in 0..per_class {
            let jitter_x: f32 = rng.gen_range(-1.0..=1.0);
            let jitter_y: f32 = rng.gen_range(-1.0..=1.0);
            let mut data = vec![0.0f32; 3 * side * side];
            for ch in 0..3 {
                for y in 0..side {
                    for x in 0..side {
                        let dx = x as f32 - (cx + jitter_x);
                        let dy = y as f32 - (cy + jitter_y);
                        let bump = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        let v = 0.55 * color[ch] + 0.35 * bump;
                        data[ch * side * side + y * side + x] = v;
                    }
                }
            }
            for v in data.iter_mut() {
                *v = (*v + rng.gen_range(-0.04f32..=0.04)).clamp(0.0, 1.0);
            }
            images.push(ImageSample::new(
                Tensor::new(vec![3, side, side], data)?,
                class,
            )?);
        }
    }
    let class_names = (0..classes).map(|c| format!("class{c}")).collect();
    Dataset::new(
        format!("synth-{classes}x{per_class}"),
        class_names,
        Samples::Images(images),
    )
}

/// Load a class-per-directory image tree. Class indices follow sorted
/// directory names; images are bilinearly resized to `side` and scaled to
/// [0, 1] RGB.
pub fn load_dataset(root: &Path, side: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::Data(format!(
            "dataset root {} has {} class directories; need >= 2",
            root.display(),
            class_dirs.len()
        )));
    }
    let mut class_names = Vec::new();
    let mut images = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class directory {} is empty",
                dir.display()
            )));
        }
        for file in files {
            let img = image::open(&file).map_err(|e| {
                Error::Data(format!("cannot decode {}: {e}", file.display()))
            })?;
            let resized = img.resize_exact(
                side as u32,
                side as u32,
                image::imageops::FilterType::Triangle,
            );
            let rgb = resized.to_rgb8();
            let mut data = vec![0.0f32; 3 * side * side];
            for (x, y, p) in rgb.enumerate_pixels() {
                let (x, y) = (x as usize, y as usize);
                for ch in 0..3 {
                    data[ch * side * side + y * side + x] = p.0[ch] as f32 / 255.0;
                }
            }
            images.push(ImageSample::new(
                Tensor::new(vec![3, side, side], data)?,
                label,
            )?);
        }
        class_names.push(name);
    }
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Dataset::new(name, class_names, Samples::Images(images))
}

/// Build a feature dataset from an ingested table.
pub fn dataset_from_features(
    name: impl Into<String>,
    rows: Vec<(FeatureVec, usize)>,
) -> Result<Dataset> {
    let classes = rows
        .iter()
        .map(|(_, l)| *l)
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    if classes < 2 {
        return Err(Error::Data(format!(
            "feature table has {classes} classes; need >= 2"
        )));
    }
    let class_names = (0..classes).map(|c| format!("class{c}")).collect();
    Dataset::new(name, class_names, Samples::Features(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_balanced_and_seeded() {
        let d = synth_dataset(3, 20, 32, 7).unwrap();
        assert_eq!(d.len(), 60);
        assert_eq!(d.classes, 3);
        assert_eq!(d.per_class_counts(), vec![20, 20, 20]);

        let d2 = synth_dataset(3, 20, 32, 7).unwrap();
        for i in 0..d.len() {
            assert_eq!(
                d.image(i).unwrap().pixels.data(),
                d2.image(i).unwrap().pixels.data()
            );
        }
        assert!(synth_dataset(1, 20, 32, 7).is_err());
        assert!(synth_dataset(3, 3, 32, 7).is_err());
    }

    #[test]
    fn nearest_centroid_learns_synth() {
        // Centroid oracle: raw-pixel nearest-centroid on a held-out split.
        let d = synth_dataset(3, 20, 16, 11).unwrap();
        let (train, test) = split(
            &d,
            &SplitSpec {
                train_ratio: 0.8,
                rng_seed: 3,
                stratified: true,
            },
        )
        .unwrap();
        let dim = 3 * 16 * 16;
        let mut centroids = vec![vec![0.0f64; dim]; 3];
        let mut counts = vec![0usize; 3];
        for i in 0..train.len() {
            let img = train.image(i).unwrap();
            counts[img.label] += 1;
            for (a, &b) in centroids[img.label].iter_mut().zip(img.pixels.data()) {
                *a += b as f64;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *n as f64;
            }
        }
        let mut correct = 0;
        for i in 0..test.len() {
            let img = test.image(i).unwrap();
            let best = (0..3)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a]
                        .iter()
                        .zip(img.pixels.data())
                        .map(|(c, &p)| (c - p as f64).powi(2))
                        .sum();
                    let db: f64 = centroids[b]
                        .iter()
                        .zip(img.pixels.data())
                        .map(|(c, &p)| (c - p as f64).powi(2))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == img.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.9, "centroid accuracy {acc}");
    }

    #[test]
    fn split_is_stratified_disjoint_exhaustive() {
        let d = synth_dataset(3, 10, 8, 1).unwrap();
        let spec = SplitSpec {
            train_ratio: 0.8,
            rng_seed: 5,
            stratified: true,
        };
        let (train, test) = split(&d, &spec).unwrap();
        assert_eq!(train.per_class_counts(), vec![8, 8, 8]);
        assert_eq!(test.per_class_counts(), vec![2, 2, 2]);
        assert_eq!(train.len() + test.len(), d.len());

        let half = SplitSpec {
            train_ratio: 0.5,
            rng_seed: 5,
            stratified: true,
        };
        let d100 = synth_dataset(2, 100, 8, 2).unwrap();
        let (tr, te) = split(&d100, &half).unwrap();
        assert_eq!(tr.per_class_counts(), vec![50, 50]);
        assert_eq!(te.per_class_counts(), vec![50, 50]);
    }

    #[test]
    fn split_clamps_to_keep_both_sides_nonempty() {
        let d = synth_dataset(2, 4, 8, 1).unwrap();
        let spec = SplitSpec {
            train_ratio: 0.99,
            rng_seed: 0,
            stratified: true,
        };
        let (train, test) = split(&d, &spec).unwrap();
        assert_eq!(train.per_class_counts(), vec![3, 3]);
        assert_eq!(test.per_class_counts(), vec![1, 1]);
    }

    #[test]
    fn invalid_split_ratio_rejected() {
        let spec = SplitSpec {
            train_ratio: 1.0,
            rng_seed: 0,
            stratified: true,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn missing_root_is_a_data_error() {
        let err = load_dataset(Path::new("/nonexistent/dataset"), 16).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
