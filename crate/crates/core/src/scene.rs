//! Scene storage and synthesis.
//!
//! A scene lives on disk as three sibling files sharing one stem:
//!
//! - `<name>.json` — header `{name, height, width, bands, class_count,
//!   class_names}`
//! - `<name>.cube` — 32-bit little-endian floats, band-interleaved by pixel
//!   (all bands of pixel (0,0), then all bands of pixel (0,1), ...)
//! - `<name>.labels` — unsigned 16-bit little-endian class indices,
//!   row-major; background is always class 0
//!
//! The raw layouts are trivial to emit from any scripting language, which is
//! the intended conversion path for the public PaviaU and Salinas `.mat`
//! scenes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Hyperspectral data cube plus its class vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCube {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// `height * width * bands` values, band-interleaved by pixel.
    pub values: Vec<f32>,
    /// Number of classes including background (index 0).
    pub class_count: usize,
    /// One name per class index.
    pub class_names: Vec<String>,
}

/// Per-pixel ground truth paired with a [`SceneCube`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    /// Row-major class indices; 0 is background.
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn label_at(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }
}

/// Recipe for a synthetic scene.
///
/// Real classes get smooth spectral signatures: a flat base of
/// `0.1 * amplitude` plus a Gaussian bump of height `amplitude` centered at a
/// class-specific band. Background pixels get a distinct flat signature of
/// `0.5 * amplitude`. Gaussian noise of `noise_sigma` is added to every
/// value. The label map is tiled from square regions of side `region_size`;
/// each region is background with probability `background_fraction`,
/// otherwise one uniformly drawn real class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Classes including background.
    pub class_count: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub background_fraction: f64,
    pub region_size: usize,
    pub seed: u64,
}

fn default_amplitude() -> f64 {
    1.0
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::Config(format!(
                "scene dimensions must be positive, got {}x{}x{}",
                self.height, self.width, self.bands
            )));
        }
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "class_count must be at least 2 (background plus one class), got {}",
                self.class_count
            )));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return Err(Error::Config(format!(
                "background_fraction must lie in [0, 1), got {}",
                self.background_fraction
            )));
        }
        if self.region_size == 0 {
            return Err(Error::Config("region_size must be at least 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Noise-free spectral value of `class` at `band`.
    pub fn signature(&self, class: u16, band: usize) -> f64 {
        if class == 0 {
            return 0.5 * self.amplitude;
        }
        let real_classes = (self.class_count - 1) as f64;
        let center = f64::from(class) / (real_classes + 1.0) * (self.bands.max(2) - 1) as f64;
        let sigma = (self.bands as f64 / (2.0 * real_classes)).max(0.75);
        let d = (band as f64 - center) / sigma;
        0.1 * self.amplitude + self.amplitude * (-0.5 * d * d).exp()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneHeader {
    name: String,
    height: usize,
    width: usize,
    bands: usize,
    class_count: usize,
    class_names: Vec<String>,
}

fn validate_scene(scene: &SceneCube, labels: &LabelMap, origin: &Path) -> Result<()> {
    let expect = scene.height * scene.width * scene.bands;
    if scene.values.len() != expect {
        return Err(Error::load(
            origin,
            format!(
                "cube holds {} values but header implies {expect} ({}x{}x{})",
                scene.values.len(),
                scene.height,
                scene.width,
                scene.bands
            ),
        ));
    }
    if scene.bands == 0 {
        return Err(Error::load(origin, "bands must be at least 1"));
    }
    if scene.class_count < 2 {
        return Err(Error::load(
            origin,
            format!("class_count must be at least 2, got {}", scene.class_count),
        ));
    }
    if scene.class_names.len() != scene.class_count {
        return Err(Error::load(
            origin,
            format!(
                "class_names lists {} entries for class_count {}",
                scene.class_names.len(),
                scene.class_count
            ),
        ));
    }
    if labels.height != scene.height || labels.width != scene.width {
        return Err(Error::load(
            origin,
            format!(
                "label map is {}x{} but cube is {}x{}",
                labels.height, labels.width, scene.height, scene.width
            ),
        ));
    }
    if labels.labels.len() != labels.height * labels.width {
        return Err(Error::load(
            origin,
            format!(
                "label payload holds {} entries but header implies {}",
                labels.labels.len(),
                labels.height * labels.width
            ),
        ));
    }
    if let Some((i, &bad)) = labels
        .labels
        .iter()
        .enumerate()
        .find(|(_, &l)| usize::from(l) >= scene.class_count)
    {
        return Err(Error::load(
            origin,
            format!(
                "label {bad} at pixel {i} is out of range for class_count {}",
                scene.class_count
            ),
        ));
    }
    if let Some((i, &bad)) = scene
        .values
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite())
    {
        return Err(Error::load(
            origin,
            format!("cube value {bad} at index {i} is not finite"),
        ));
    }
    Ok(())
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Loads a scene; `path` names the header file, with the `.cube` and
/// `.labels` payloads as siblings.
pub fn load_scene(path: &Path) -> Result<(SceneCube, LabelMap)> {
    let header_bytes =
        fs::read(path).map_err(|e| Error::load(path, format!("missing or unreadable: {e}")))?;
    let header: SceneHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::load(path, format!("malformed header: {e}")))?;

    let cube_path = sibling(path, "cube");
    let cube_bytes = fs::read(&cube_path)
        .map_err(|e| Error::load(&cube_path, format!("missing or unreadable: {e}")))?;
    if cube_bytes.len() % 4 != 0 {
        return Err(Error::load(
            &cube_path,
            format!("cube payload of {} bytes is not a whole number of 32-bit floats", cube_bytes.len()),
        ));
    }
    let expect_values = header.height * header.width * header.bands;
    if cube_bytes.len() != expect_values * 4 {
        return Err(Error::load(
            &cube_path,
            format!(
                "cube payload is {} bytes but header implies {} ({}x{}x{} floats)",
                cube_bytes.len(),
                expect_values * 4,
                header.height,
                header.width,
                header.bands
            ),
        ));
    }
    let values: Vec<f32> = cube_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let label_path = sibling(path, "labels");
    let label_bytes = fs::read(&label_path)
        .map_err(|e| Error::load(&label_path, format!("missing or unreadable: {e}")))?;
    let expect_labels = header.height * header.width;
    if label_bytes.len() != expect_labels * 2 {
        return Err(Error::load(
            &label_path,
            format!(
                "label payload is {} bytes but header implies {} ({}x{} entries)",
                label_bytes.len(),
                expect_labels * 2,
                header.height,
                header.width
            ),
        ));
    }
    let labels: Vec<u16> = label_bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();

    let scene = SceneCube {
        name: header.name,
        height: header.height,
        width: header.width,
        bands: header.bands,
        values,
        class_count: header.class_count,
        class_names: header.class_names,
    };
    let map = LabelMap {
        height: header.height,
        width: header.width,
        labels,
    };
    validate_scene(&scene, &map, path)?;
    Ok((scene, map))
}

/// Saves a scene; `path` names the header file and determines the payload
/// siblings. Output bytes are deterministic for identical input.
pub fn save_scene(scene: &SceneCube, labels: &LabelMap, path: &Path) -> Result<()> {
    validate_scene(scene, labels, path)?;
    let header = SceneHeader {
        name: scene.name.clone(),
        height: scene.height,
        width: scene.width,
        bands: scene.bands,
        class_count: scene.class_count,
        class_names: scene.class_names.clone(),
    };
    let mut header_json = serde_json::to_vec_pretty(&header).expect("header serializes");
    header_json.push(b'\n');
    fs::write(path, header_json).map_err(|e| Error::io(path, e))?;

    let mut cube_bytes = Vec::with_capacity(scene.values.len() * 4);
    for v in &scene.values {
        cube_bytes.extend_from_slice(&v.to_le_bytes());
    }
    let cube_path = sibling(path, "cube");
    fs::write(&cube_path, cube_bytes).map_err(|e| Error::io(&cube_path, e))?;

    let mut label_bytes = Vec::with_capacity(labels.labels.len() * 2);
    for l in &labels.labels {
        label_bytes.extend_from_slice(&l.to_le_bytes());
    }
    let label_path = sibling(path, "labels");
    fs::write(&label_path, label_bytes).map_err(|e| Error::io(&label_path, e))?;
    Ok(())
}

/// Generates a synthetic scene. Deterministic for a given spec: regions are
/// drawn in row-major order, then pixel values in row-major band-inner order,
/// all from a stream seeded by `spec.seed`.
pub fn synth_scene(spec: &SynthSpec) -> Result<(SceneCube, LabelMap)> {
    spec.validate()?;
    let mut rng = RngStream::from_seed(spec.seed);

    let regions_down = spec.height.div_ceil(spec.region_size);
    let regions_across = spec.width.div_ceil(spec.region_size);
    let mut region_class = vec![0u16; regions_down * regions_across];
    for rc in region_class.iter_mut() {
        *rc = if rng.next_f64() < spec.background_fraction {
            0
        } else {
            1 + rng.next_index(spec.class_count - 1) as u16
        };
    }

    let mut labels = vec![0u16; spec.height * spec.width];
    for r in 0..spec.height {
        for c in 0..spec.width {
            let region = (r / spec.region_size) * regions_across + c / spec.region_size;
            labels[r * spec.width + c] = region_class[region];
        }
    }

    let mut values = vec![0.0f32; spec.height * spec.width * spec.bands];
    for (pixel, chunk) in values.chunks_exact_mut(spec.bands).enumerate() {
        let class = labels[pixel];
        for (band, v) in chunk.iter_mut().enumerate() {
            let clean = spec.signature(class, band);
            let noisy = if spec.noise_sigma > 0.0 {
                clean + spec.noise_sigma * rng.normal()
            } else {
                clean
            };
            *v = noisy as f32;
        }
    }

    let class_names = (0..spec.class_count)
        .map(|c| {
            if c == 0 {
                "background".to_string()
            } else {
                format!("class_{c}")
            }
        })
        .collect();
    let scene = SceneCube {
        name: "synth".to_string(),
        height: spec.height,
        width: spec.width,
        bands: spec.bands,
        values,
        class_count: spec.class_count,
        class_names,
    };
    let map = LabelMap {
        height: spec.height,
        width: spec.width,
        labels,
    };
    Ok((scene, map))
}
