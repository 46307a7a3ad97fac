//! Patch extraction, labeling, normalization, and splitting.
//!
//! Scenes are cut into non-overlapping square patches (default 3x3, stride
//! equal to the window so no pixel repeats). Two labeling protocols exist:
//! multi-label keeps every patch containing at least one labeled pixel and
//! annotates it with all classes present (background included when mixed);
//! single-label keeps patches whose center pixel is labeled and uses that
//! class alone. Feature vectors are z-scored per band with statistics from
//! the training split only.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{labels as stream_labels, RngStream};
use crate::scene::{LabelMap, SceneCube};

/// One square window cut from a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Top-left corner in scene coordinates; a multiple of the patch size.
    pub origin_row: usize,
    pub origin_col: usize,
    /// Patch edge length in pixels.
    pub size: usize,
    /// `size * size * bands` values, band-interleaved by pixel.
    pub values: Vec<f32>,
    /// `size * size` class indices, row-major.
    pub pixel_labels: Vec<u16>,
}

impl Patch {
    /// Class of the center pixel.
    pub fn center_label(&self) -> u16 {
        let mid = self.size / 2;
        self.pixel_labels[mid * self.size + mid]
    }

    /// Sorted distinct classes among the pixel labels.
    pub fn distinct_classes(&self) -> Vec<u16> {
        let set: BTreeSet<u16> = self.pixel_labels.iter().copied().collect();
        set.into_iter().collect()
    }
}

/// Cuts the scene into non-overlapping `patch_size`-square patches in
/// row-major order. Remainder rows and columns that do not fill a whole
/// patch are discarded. A scene smaller than one patch yields an empty list.
pub fn extract_patches(scene: &SceneCube, labels: &LabelMap, patch_size: usize) -> Result<Vec<Patch>> {
    if patch_size == 0 {
        return Err(Error::Config("patch size must be at least 1".into()));
    }
    if labels.height != scene.height || labels.width != scene.width {
        return Err(Error::Input(format!(
            "label map is {}x{} but scene is {}x{}",
            labels.height, labels.width, scene.height, scene.width
        )));
    }
    let rows = scene.height / patch_size;
    let cols = scene.width / patch_size;
    let bands = scene.bands;
    let mut patches = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let origin_row = pr * patch_size;
            let origin_col = pc * patch_size;
            let mut values = Vec::with_capacity(patch_size * patch_size * bands);
            let mut pixel_labels = Vec::with_capacity(patch_size * patch_size);
            for dr in 0..patch_size {
                for dc in 0..patch_size {
                    let pixel = (origin_row + dr) * scene.width + (origin_col + dc);
                    values.extend_from_slice(&scene.values[pixel * bands..(pixel + 1) * bands]);
                    pixel_labels.push(labels.labels[pixel]);
                }
            }
            patches.push(Patch {
                origin_row,
                origin_col,
                size: patch_size,
                values,
                pixel_labels,
            });
        }
    }
    Ok(patches)
}

/// Patches annotated with every class present.
#[derive(Debug, Clone)]
pub struct MultiLabelPatchSet {
    pub patches: Vec<Patch>,
    /// Per-patch one-hot vector of length `class_count`, background included.
    pub annotations: Vec<Vec<u8>>,
    /// True when exactly one distinct class occurs in the patch.
    pub is_uniform: Vec<bool>,
    pub class_count: usize,
}

/// Drops all-background candidates and annotates the rest with a one-hot
/// vector over every class occurring among their pixels. A patch mixing
/// background with labeled pixels keeps the background bit set.
pub fn assign_multilabels(candidates: Vec<Patch>, class_count: usize) -> MultiLabelPatchSet {
    let mut patches = Vec::new();
    let mut annotations = Vec::new();
    let mut is_uniform = Vec::new();
    for patch in candidates {
        let distinct = patch.distinct_classes();
        if distinct == [0] {
            continue;
        }
        let mut one_hot = vec![0u8; class_count];
        for &c in &distinct {
            one_hot[usize::from(c)] = 1;
        }
        is_uniform.push(distinct.len() == 1);
        annotations.push(one_hot);
        patches.push(patch);
    }
    MultiLabelPatchSet {
        patches,
        annotations,
        is_uniform,
        class_count,
    }
}

impl MultiLabelPatchSet {
    /// Indices and single class labels of the uniform patches; the basis of
    /// the uniform-subset evaluation.
    pub fn uniform_single_labels(&self) -> (Vec<usize>, Vec<u16>) {
        let mut indices = Vec::new();
        let mut classes = Vec::new();
        for (i, (patch, &uniform)) in self.patches.iter().zip(&self.is_uniform).enumerate() {
            if uniform {
                indices.push(i);
                classes.push(patch.pixel_labels[0]);
            }
        }
        (indices, classes)
    }

    /// Annotations as an `n x class_count` 0/1 matrix.
    pub fn annotation_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.annotations.len(), self.class_count);
        for (i, hot) in self.annotations.iter().enumerate() {
            for (j, &bit) in hot.iter().enumerate() {
                m.set(i, j, f64::from(bit));
            }
        }
        m
    }
}

/// Patches labeled by their center pixel.
#[derive(Debug, Clone)]
pub struct SingleLabelPatchSet {
    pub patches: Vec<Patch>,
    /// Center-pixel class per patch; never 0.
    pub labels: Vec<u16>,
    /// True when every pixel in the patch shares the center's class.
    pub is_uniform: Vec<bool>,
}

/// Drops candidates whose center pixel is background; the rest take the
/// center pixel's class as their label.
pub fn assign_single_labels(candidates: Vec<Patch>) -> SingleLabelPatchSet {
    let mut patches = Vec::new();
    let mut labels = Vec::new();
    let mut is_uniform = Vec::new();
    for patch in candidates {
        let center = patch.center_label();
        if center == 0 {
            continue;
        }
        labels.push(center);
        is_uniform.push(patch.pixel_labels.iter().all(|&l| l == center));
        patches.push(patch);
    }
    SingleLabelPatchSet {
        patches,
        labels,
        is_uniform,
    }
}

/// Per-band standardization statistics from the training split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fits per-band mean and standard deviation over the training patches
/// (every pixel of every listed patch). Bands with standard deviation below
/// 1e-12 get 1 instead, so constant bands normalize to zero.
pub fn zscore_fit(patches: &[Patch], train_indices: &[usize], bands: usize) -> Result<NormStats> {
    if train_indices.is_empty() {
        return Err(Error::Config(
            "cannot fit normalization statistics on an empty training split".into(),
        ));
    }
    let mut mean = vec![0.0f64; bands];
    let mut count = 0usize;
    for &i in train_indices {
        for pixel in patches[i].values.chunks_exact(bands) {
            for (m, &v) in mean.iter_mut().zip(pixel) {
                *m += f64::from(v);
            }
        }
        count += patches[i].values.len() / bands;
    }
    let n = count as f64;
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0f64; bands];
    for &i in train_indices {
        for pixel in patches[i].values.chunks_exact(bands) {
            for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(pixel) {
                let d = f64::from(v) - m;
                *s += d * d;
            }
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd < 1e-12 {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

/// Normalized feature matrix: one row per patch, `size*size*bands` columns,
/// each value standardized with the fitted per-band statistics.
pub fn zscore_apply(patches: &[Patch], stats: &NormStats) -> Result<Matrix> {
    let bands = stats.mean.len();
    let Some(first) = patches.first() else {
        return Ok(Matrix::zeros(0, 0));
    };
    let width = first.values.len();
    if width % bands != 0 {
        return Err(Error::Input(format!(
            "patch holds {width} values, not divisible by {bands} bands"
        )));
    }
    let mut out = Matrix::zeros(patches.len(), width);
    for (i, patch) in patches.iter().enumerate() {
        if patch.values.len() != width {
            return Err(Error::Input(format!(
                "patch {i} holds {} values but patch 0 holds {width}",
                patch.values.len()
            )));
        }
        let row = out.row_mut(i);
        for (p, (slot, &v)) in row.iter_mut().zip(&patch.values).enumerate() {
            let band = p % bands;
            *slot = (f64::from(v) - stats.mean[band]) / stats.std[band];
        }
    }
    Ok(out)
}

/// Split membership of one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

/// Deterministic train/valid/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub tags: Vec<SplitTag>,
    pub seed: u64,
}

/// Split sizes for `n` patches: `test = ceil(n/10)`,
/// `valid = ceil((n - test)/10)`, `train` the remainder. Integer arithmetic
/// keeps the formula exact for every `n`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = n.div_ceil(10);
    let valid = (n - test).div_ceil(10);
    let train = n - test - valid;
    (train, valid, test)
}

/// Assigns each of `n` patches to train/valid/test by a seeded uniform
/// shuffle: the first `test` shuffled positions become test, the next
/// `valid` become validation, the rest training.
pub fn split(n: usize, seed: u64) -> Result<SplitAssignment> {
    if n == 0 {
        return Err(Error::Input("cannot split an empty patch set".into()));
    }
    let (train, valid, test) = split_sizes(n);
    debug_assert_eq!(train + valid + test, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::derive(seed, stream_labels::SPLIT);
    rng.shuffle(&mut order);
    let mut tags = vec![SplitTag::Train; n];
    for &i in &order[..test] {
        tags[i] = SplitTag::Test;
    }
    for &i in &order[test..test + valid] {
        tags[i] = SplitTag::Valid;
    }
    Ok(SplitAssignment { tags, seed })
}

impl SplitAssignment {
    pub fn indices_of(&self, tag: SplitTag) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tag)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for t in &self.tags {
            match t {
                SplitTag::Train => c.0 += 1,
                SplitTag::Valid => c.1 += 1,
                SplitTag::Test => c.2 += 1,
            }
        }
        c
    }
}

/// Which labeling protocol produced a patch set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Multi,
    Single,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<SamplingMode> {
        match s {
            "multi" => Ok(SamplingMode::Multi),
            "single" => Ok(SamplingMode::Single),
            other => Err(Error::Config(format!(
                "unknown sampling mode {other:?}; expected multi or single"
            ))),
        }
    }
}

impl SamplingMode {
    pub fn name(&self) -> &'static str {
        match self {
            SamplingMode::Multi => "multi",
            SamplingMode::Single => "single",
        }
    }
}

/// Serialized record of one sampling run: which scene, which patches
/// survived, their labels, and their split membership. Everything needed to
/// reproduce an evaluation without re-running the sampling decisions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PatchManifest {
    /// Path of the scene header this sampling ran on, as given at run time.
    pub scene: String,
    pub mode: SamplingMode,
    pub patch_size: usize,
    pub class_count: usize,
    pub split_seed: u64,
    /// Top-left corners of surviving patches, in set order.
    pub origins: Vec<[usize; 2]>,
    /// Multi mode: sorted classes present per patch. Single mode: one entry,
    /// the center class.
    pub labels: Vec<Vec<u16>>,
    pub is_uniform: Vec<bool>,
    pub split: Vec<SplitTag>,
}

impl PatchManifest {
    pub fn from_multi(
        scene: &str,
        set: &MultiLabelPatchSet,
        assignment: &SplitAssignment,
        patch_size: usize,
    ) -> Self {
        PatchManifest {
            scene: scene.to_string(),
            mode: SamplingMode::Multi,
            patch_size,
            class_count: set.class_count,
            split_seed: assignment.seed,
            origins: set
                .patches
                .iter()
                .map(|p| [p.origin_row, p.origin_col])
                .collect(),
            labels: set.patches.iter().map(|p| p.distinct_classes()).collect(),
            is_uniform: set.is_uniform.clone(),
            split: assignment.tags.clone(),
        }
    }

    pub fn from_single(
        scene: &str,
        set: &SingleLabelPatchSet,
        assignment: &SplitAssignment,
        patch_size: usize,
        class_count: usize,
    ) -> Self {
        PatchManifest {
            scene: scene.to_string(),
            mode: SamplingMode::Single,
            patch_size,
            class_count,
            split_seed: assignment.seed,
            origins: set
                .patches
                .iter()
                .map(|p| [p.origin_row, p.origin_col])
                .collect(),
            labels: set.labels.iter().map(|&l| vec![l]).collect(),
            is_uniform: set.is_uniform.clone(),
            split: assignment.tags.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        json.push(b'\n');
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::load(path, format!("missing or unreadable: {e}")))?;
        let manifest: PatchManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::load(path, format!("malformed manifest: {e}")))?;
        if manifest.origins.len() != manifest.labels.len()
            || manifest.origins.len() != manifest.split.len()
            || manifest.origins.len() != manifest.is_uniform.len()
        {
            return Err(Error::load(
                path,
                format!(
                    "inconsistent lengths: {} origins, {} labels, {} uniform flags, {} split tags",
                    manifest.origins.len(),
                    manifest.labels.len(),
                    manifest.is_uniform.len(),
                    manifest.split.len()
                ),
            ));
        }
        Ok(manifest)
    }

    /// Re-runs sampling on the given scene and checks that the surviving
    /// patches, labels, and uniform flags match this manifest exactly;
    /// returns the rebuilt patches in manifest order.
    pub fn rebuild(&self, scene: &SceneCube, labels: &LabelMap) -> Result<Vec<Patch>> {
        let candidates = extract_patches(scene, labels, self.patch_size)?;
        let mismatch = |what: &str| {
            Err(Error::Incompatible(format!(
                "scene {} does not reproduce the manifest: {what}",
                scene.name
            )))
        };
        match self.mode {
            SamplingMode::Multi => {
                let set = assign_multilabels(candidates, scene.class_count);
                if set.patches.len() != self.origins.len() {
                    return mismatch(&format!(
                        "{} surviving patches vs {} in manifest",
                        set.patches.len(),
                        self.origins.len()
                    ));
                }
                for (i, patch) in set.patches.iter().enumerate() {
                    if [patch.origin_row, patch.origin_col] != self.origins[i] {
                        return mismatch(&format!("origin of patch {i}"));
                    }
                    if patch.distinct_classes() != self.labels[i] {
                        return mismatch(&format!("labels of patch {i}"));
                    }
                    if set.is_uniform[i] != self.is_uniform[i] {
                        return mismatch(&format!("uniform flag of patch {i}"));
                    }
                }
                Ok(set.patches)
            }
            SamplingMode::Single => {
                let set = assign_single_labels(candidates);
                if set.patches.len() != self.origins.len() {
                    return mismatch(&format!(
                        "{} surviving patches vs {} in manifest",
                        set.patches.len(),
                        self.origins.len()
                    ));
                }
                for (i, patch) in set.patches.iter().enumerate() {
                    if [patch.origin_row, patch.origin_col] != self.origins[i] {
                        return mismatch(&format!("origin of patch {i}"));
                    }
                    if vec![set.labels[i]] != self.labels[i] {
                        return mismatch(&format!("label of patch {i}"));
                    }
                    if set.is_uniform[i] != self.is_uniform[i] {
                        return mismatch(&format!("uniform flag of patch {i}"));
                    }
                }
                Ok(set.patches)
            }
        }
    }
}
