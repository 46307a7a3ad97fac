//! Experiment orchestration: config files, the end-to-end train/eval
//! pipeline, scheme sweeps, and the gradient verification suite.
//!
//! Every command is deterministic given its config and seed: artifacts are
//! byte-identical across runs. The one inherently nondeterministic value,
//! wall-clock time, is written to a `timing.json` sidecar so the run report
//! itself stays reproducible.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    multilabel_report, single_label_report, topk_extended_eval, KSource, MultiLabelReport,
    SingleLabelReport,
};
use crate::model::{
    ae_forward, ae_forward_cached, assign_layer_params, build_autoencoder, build_classifier,
    classify, classify_cached, flatten_grads, flatten_layer_params, layer_param_ranges,
    load_model, predict_multilabel_matrix, save_model, stack_backward, stack_forward, Autoencoder,
    Classifier, Model, ModelMeta, HIDDEN_CHANNELS,
};
use crate::nn::{
    bce_with_logits, cross_entropy, grad_check, grad_check_probed, l2_backward, l2_penalty,
    mse_loss, strided_probes, Activation, BceWeights, DenseLayer, Matrix, ScalarFn,
};
use crate::patch::{
    assign_multilabels, assign_single_labels, extract_patches, split, zscore_apply, zscore_fit,
    NormStats, PatchManifest, SamplingMode, SplitTag,
};
use crate::rng::{fnv1a64, RngStream};
use crate::scene::{load_scene, save_scene, synth_scene, LabelMap, SceneCube, SynthSpec};
use crate::train::{argmax, train, Scheme, TaskTargets, TrainConfig, TrainData};

/// Format tag of the run report JSON.
pub const RUN_REPORT_FORMAT: &str = "hyperpatch-run-v1";
/// Format tag of the evaluation report JSON.
pub const EVAL_REPORT_FORMAT: &str = "hyperpatch-eval-v1";
/// Maximum relative error any gradient check may show.
pub const GRAD_TOLERANCE: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Where the scene comes from: a file on disk or a synthesis recipe.
/// Exactly one of the two must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSource {
    /// Path of a scene header file (`.cube` and `.labels` siblings).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Recipe for an in-memory synthetic scene; the generated scene is also
    /// written into the output directory so later evaluation can reload it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

/// Patch sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Labeling protocol; also fixes the classifier task.
    pub mode: SamplingMode,
    pub patch_size: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            mode: SamplingMode::Multi,
            patch_size: 3,
        }
    }
}

/// Where artifacts go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// One experiment, fully described: scene, sampling, training, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSource,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.scene.path, &self.scene.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set either [scene] path or a [scene.synth] section, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "the config needs a scene: set [scene] path or a [scene.synth] section".into(),
                ))
            }
            _ => {}
        }
        if self.sampling.patch_size == 0 {
            return Err(Error::Config("patch_size must be at least 1".into()));
        }
        if self.train.task != self.sampling.mode {
            return Err(Error::Config(format!(
                "train task {} conflicts with sampling mode {}",
                self.train.task.name(),
                self.sampling.mode.name()
            )));
        }
        self.train.validate()
    }

    /// Command-line overrides, applied after loading.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        out: Option<PathBuf>,
        mode: Option<SamplingMode>,
    ) {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        if let Some(dir) = out {
            self.output.dir = dir;
        }
        if let Some(m) = mode {
            self.sampling.mode = m;
            self.train.task = m;
        }
    }

    /// FNV-1a 64 hash of the canonical JSON rendering; identifies a run.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// Parses an experiment config from TOML text.
///
/// The `[train]` table accepts an extra `preset` key naming a published
/// hyperparameter column (for example `paviau-multi`); the preset's values
/// become the defaults and explicit keys in the table override them. A
/// preset requires an explicit `scheme` key, since the published values
/// differ per scheme. The classifier task is owned by `[sampling] mode`, so
/// a `task` key in `[train]` is rejected.
pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig> {
    let mut root: toml::Value = toml::from_str(text)
        .map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
    let table = root
        .as_table_mut()
        .ok_or_else(|| Error::Config("config must be a TOML table".into()))?;
    let mut preset_task: Option<(String, SamplingMode)> = None;
    if let Some(train_value) = table.get_mut("train") {
        let train_table = train_value
            .as_table_mut()
            .ok_or_else(|| Error::Config("[train] must be a table".into()))?;
        if train_table.contains_key("task") {
            return Err(Error::Config(
                "the task is set by [sampling] mode, not by a [train] task key".into(),
            ));
        }
        if let Some(preset_value) = train_table.remove("preset") {
            let name = preset_value
                .as_str()
                .ok_or_else(|| Error::Config("[train] preset must be a string".into()))?
                .to_string();
            let scheme: Scheme = train_table
                .get("scheme")
                .and_then(|v| v.as_str())
                .ok_or_else(|| {
                    Error::Config(format!(
                        "preset {name:?} needs an explicit scheme key \
                         (iterative, joint, or cascade)"
                    ))
                })?
                .parse()?;
            let base = TrainConfig::preset(&name, scheme)?;
            preset_task = Some((name, base.task));
            let base_value = toml::Value::try_from(&base).expect("train config serializes");
            let mut merged = base_value
                .as_table()
                .cloned()
                .expect("train config serializes to a table");
            for (key, value) in train_table.iter() {
                merged.insert(key.clone(), value.clone());
            }
            *train_table = merged;
        }
    }
    let mut config: ExperimentConfig = root
        .try_into()
        .map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
    if let Some((name, task)) = preset_task {
        if task != config.sampling.mode {
            return Err(Error::Config(format!(
                "preset {name:?} is a {} preset but [sampling] mode is {}",
                task.name(),
                config.sampling.mode.name()
            )));
        }
    }
    config.train.task = config.sampling.mode;
    Ok(config)
}

/// Loads and parses an experiment config file.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::load(path, format!("missing or unreadable: {e}")))?;
    parse_experiment_config(&text).map_err(|e| Error::load(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// Dataset preparation
// ---------------------------------------------------------------------------

/// Patch counts and scene shape of one prepared dataset, in the layout of
/// the published sampling table: totals split into mixed and uniform.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub scene: String,
    pub scene_name: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub class_count: usize,
    pub mode: SamplingMode,
    pub patch_size: usize,
    /// Non-overlapping grid patches before any filtering.
    pub grid_patches: usize,
    pub kept_patches: usize,
    pub dropped_patches: usize,
    pub mixed_patches: usize,
    pub uniform_patches: usize,
    pub train_patches: usize,
    pub valid_patches: usize,
    pub test_patches: usize,
}

struct PreparedData {
    data: TrainData,
    manifest: PatchManifest,
    summary: DatasetSummary,
    norm: NormStats,
}

fn prepare_dataset(
    scene: &SceneCube,
    labels: &LabelMap,
    scene_ref: &str,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<PreparedData> {
    let candidates = extract_patches(scene, labels, sampling.patch_size)?;
    let grid_patches = candidates.len();
    if sampling.mode == SamplingMode::Single && scene.class_count < 3 {
        return Err(Error::Config(format!(
            "the single-label task needs at least two non-background classes; \
             the scene has {}",
            scene.class_count - 1
        )));
    }

    let (patches, is_uniform, targets, manifest) = match sampling.mode {
        SamplingMode::Multi => {
            let set = assign_multilabels(candidates, scene.class_count);
            if set.patches.is_empty() {
                return Err(Error::Input(format!(
                    "no patches survive multi-label sampling: all {grid_patches} grid \
                     patches are background-only"
                )));
            }
            let assignment = split(set.patches.len(), seed)?;
            let manifest =
                PatchManifest::from_multi(scene_ref, &set, &assignment, sampling.patch_size);
            let targets = TaskTargets::Multi(set.annotation_matrix());
            (set.patches, set.is_uniform, targets, manifest)
        }
        SamplingMode::Single => {
            let set = assign_single_labels(candidates);
            if set.patches.is_empty() {
                return Err(Error::Input(format!(
                    "no patches survive single-label sampling: all {grid_patches} grid \
                     patches have a background center pixel"
                )));
            }
            let assignment = split(set.patches.len(), seed)?;
            let manifest = PatchManifest::from_single(
                scene_ref,
                &set,
                &assignment,
                sampling.patch_size,
                scene.class_count,
            );
            let targets = TaskTargets::Single(
                set.labels.iter().map(|&l| usize::from(l) - 1).collect(),
            );
            (set.patches, set.is_uniform, targets, manifest)
        }
    };

    let train_idx = indices_with_tag(&manifest.split, SplitTag::Train);
    let valid_idx = indices_with_tag(&manifest.split, SplitTag::Valid);
    let test_idx = indices_with_tag(&manifest.split, SplitTag::Test);
    if train_idx.is_empty() || valid_idx.is_empty() {
        return Err(Error::Input(format!(
            "{} kept patches are too few to split into train/valid/test",
            patches.len()
        )));
    }
    let norm = zscore_fit(&patches, &train_idx, scene.bands)?;
    let features = zscore_apply(&patches, &norm)?;
    let uniform_patches = is_uniform.iter().filter(|&&u| u).count();
    let kept_patches = patches.len();
    let summary = DatasetSummary {
        scene: scene_ref.to_string(),
        scene_name: scene.name.clone(),
        height: scene.height,
        width: scene.width,
        bands: scene.bands,
        class_count: scene.class_count,
        mode: sampling.mode,
        patch_size: sampling.patch_size,
        grid_patches,
        kept_patches,
        dropped_patches: grid_patches - kept_patches,
        mixed_patches: kept_patches - uniform_patches,
        uniform_patches,
        train_patches: train_idx.len(),
        valid_patches: valid_idx.len(),
        test_patches: test_idx.len(),
    };
    Ok(PreparedData {
        data: TrainData {
            features,
            targets,
            train_idx,
            valid_idx,
            test_idx,
        },
        manifest,
        summary,
        norm,
    })
}

fn indices_with_tag(tags: &[SplitTag], wanted: SplitTag) -> Vec<usize> {
    tags.iter()
        .enumerate()
        .filter(|(_, &t)| t == wanted)
        .map(|(i, _)| i)
        .collect()
}

// ---------------------------------------------------------------------------
// Shared evaluation plumbing
// ---------------------------------------------------------------------------

/// Final metrics of one subset under one task.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum TaskMetrics {
    Multi(MultiLabelReport),
    Single(SingleLabelReport),
}

impl TaskMetrics {
    /// One-line human summary.
    pub fn headline(&self) -> String {
        match self {
            TaskMetrics::Multi(r) => format!(
                "accuracy {:.4} | hamming {:.4} | precision {:.4} | recall {:.4}",
                r.accuracy, r.hamming_loss, r.precision, r.recall
            ),
            TaskMetrics::Single(r) => format!("overall accuracy {:.4}", r.overall_accuracy),
        }
    }
}

/// Eval-mode logits for the selected feature rows.
fn forward_logits(model: &Model, features: &Matrix, idx: &[usize]) -> Result<Matrix> {
    let batch = features.gather_rows(idx);
    let mut rng = RngStream::from_seed(0);
    let (hidden, _) = ae_forward(&model.autoencoder, &batch, false, &mut rng)?;
    classify(&model.classifier, &hidden, false, &mut rng)
}

/// Standard metrics of `idx` under the model's own task.
fn standard_metrics(
    model: &Model,
    features: &Matrix,
    targets: &TaskTargets,
    idx: &[usize],
) -> Result<TaskMetrics> {
    let logits = forward_logits(model, features, idx)?;
    match targets {
        TaskTargets::Multi(truth) => {
            let pred = predict_multilabel_matrix(&logits);
            Ok(TaskMetrics::Multi(multilabel_report(
                &truth.gather_rows(idx),
                &pred,
            )?))
        }
        TaskTargets::Single(classes) => {
            let truth: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
            let pred: Vec<usize> = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
            Ok(TaskMetrics::Single(single_label_report(
                &truth,
                &pred,
                model.classifier.output_dim(),
            )?))
        }
    }
}

// ---------------------------------------------------------------------------
// Run reports and artifacts
// ---------------------------------------------------------------------------

/// Metrics of the three subsets at the end of training.
#[derive(Debug, Clone, Serialize)]
pub struct SplitMetricsSet {
    pub train: TaskMetrics,
    pub valid: TaskMetrics,
    pub test: TaskMetrics,
}

/// File names of a run's artifacts, relative to the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct ArtifactNames {
    /// Checkpoint stem; the files are `<stem>.manifest.json` and
    /// `<stem>.params`.
    pub checkpoint: String,
    pub history: String,
    pub manifest: String,
    /// Present when the run synthesized (and therefore wrote) its scene.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
}

/// Everything a finished training run reports. Byte-identical across runs
/// with the same config; wall-clock time lives in the `timing.json` sidecar
/// instead.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub weight_init: String,
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub model_parameters: usize,
    pub metrics: SplitMetricsSet,
    pub artifacts: ArtifactNames,
}

#[derive(Debug, Clone, Serialize)]
struct TimingSidecar {
    wall_clock_seconds: f64,
}

/// A finished [`cmd_train`] run: the report plus where everything went.
#[derive(Debug)]
pub struct TrainedRun {
    pub report: RunReport,
    pub out_dir: PathBuf,
    pub report_path: PathBuf,
    pub checkpoint_stem: PathBuf,
    pub history_path: PathBuf,
    pub manifest_path: PathBuf,
    pub timing_path: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text.as_bytes()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Generates a synthetic scene from a TOML recipe file and writes it under
/// `out_dir` as `scene.json` (+ `.cube`, `.labels`). Returns the header path.
pub fn cmd_synth(spec_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Error::load(spec_path, format!("missing or unreadable: {e}")))?;
    let spec: SynthSpec = toml::from_str(&text)
        .map_err(|e| Error::load(spec_path, format!("invalid synthesis recipe: {e}")))?;
    let (scene, labels) = synth_scene(&spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("scene.json");
    save_scene(&scene, &labels, &path)?;
    Ok(path)
}

/// What [`cmd_sample`] produced, in the layout of the published sampling
/// table: a total split into mixed and uniform patches.
#[derive(Debug, Clone, Serialize)]
pub struct SampleSummary {
    pub scene: String,
    pub scene_name: String,
    pub mode: SamplingMode,
    pub patch_size: usize,
    pub grid_patches: usize,
    pub total: usize,
    pub mixed: usize,
    pub uniform: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub manifest_path: String,
}

impl SampleSummary {
    /// Table-shaped stdout rendering.
    pub fn render(&self) -> String {
        format!(
            "patches sampled from {} ({} mode, patch size {})\n\
             {:>8} {:>8} {:>8}\n\
             {:>8} {:>8} {:>8}\n\
             split: train {} / valid {} / test {}\n\
             manifest: {}\n",
            self.scene_name,
            self.mode.name(),
            self.patch_size,
            "total",
            "mixed",
            "uniform",
            self.total,
            self.mixed,
            self.uniform,
            self.train,
            self.valid,
            self.test,
            self.manifest_path
        )
    }
}

/// Samples patches from a scene on disk and writes `patches.json` under
/// `out_dir`.
pub fn cmd_sample(
    scene_path: &Path,
    mode: SamplingMode,
    patch_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<SampleSummary> {
    let (scene, labels) = load_scene(scene_path)?;
    let sampling = SamplingConfig { mode, patch_size };
    let scene_ref = scene_path.display().to_string();
    let prepared = prepare_dataset(&scene, &labels, &scene_ref, &sampling, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = out_dir.join("patches.json");
    prepared.manifest.save(&manifest_path)?;
    let s = &prepared.summary;
    Ok(SampleSummary {
        scene: scene_ref,
        scene_name: s.scene_name.clone(),
        mode,
        patch_size,
        grid_patches: s.grid_patches,
        total: s.kept_patches,
        mixed: s.mixed_patches,
        uniform: s.uniform_patches,
        train: s.train_patches,
        valid: s.valid_patches,
        test: s.test_patches,
        manifest_path: manifest_path.display().to_string(),
    })
}

/// Runs the full pipeline: resolve the scene, sample and split patches,
/// normalize, train, evaluate every subset, and write all artifacts under
/// the configured output directory.
pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainedRun> {
    let started = Instant::now();
    config.validate()?;
    let out = config.output.dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let (scene, labels, scene_ref, scene_artifact) = match (&config.scene.path, &config.scene.synth)
    {
        (Some(path), None) => {
            let (scene, labels) = load_scene(path)?;
            (scene, labels, path.display().to_string(), None)
        }
        (None, Some(spec)) => {
            let (scene, labels) = synth_scene(spec)?;
            let path = out.join("scene.json");
            save_scene(&scene, &labels, &path)?;
            (
                scene,
                labels,
                path.display().to_string(),
                Some("scene.json".to_string()),
            )
        }
        _ => unreachable!("validated above"),
    };

    let prepared = prepare_dataset(
        &scene,
        &labels,
        &scene_ref,
        &config.sampling,
        config.train.seed,
    )?;
    let config_hash = config.hash();
    let output_dim = match config.sampling.mode {
        SamplingMode::Multi => scene.class_count,
        SamplingMode::Single => scene.class_count - 1,
    };
    let meta = ModelMeta {
        bands: scene.bands,
        class_count: scene.class_count,
        output_dim,
        task: config.sampling.mode,
        patch_size: config.sampling.patch_size,
        dropout_ae: config.train.dropout_ae,
        dropout_clf: config.train.dropout_clf,
        seed: config.train.seed,
        config_hash: config_hash.clone(),
    };
    let model = Model::build(meta, prepared.norm.clone())?;
    let model_parameters = model.param_count();

    let outcome = train(&config.train, &prepared.data, model, None)?;

    let data = &prepared.data;
    let metrics = SplitMetricsSet {
        train: standard_metrics(&outcome.model, &data.features, &data.targets, &data.train_idx)?,
        valid: standard_metrics(&outcome.model, &data.features, &data.targets, &data.valid_idx)?,
        test: standard_metrics(&outcome.model, &data.features, &data.targets, &data.test_idx)?,
    };

    let checkpoint_stem = out.join("model");
    save_model(&outcome.model, &checkpoint_stem)?;
    let history_path = out.join("history.csv");
    write_text(&history_path, &outcome.history.to_csv())?;
    let manifest_path = out.join("patches.json");
    prepared.manifest.save(&manifest_path)?;

    let report = RunReport {
        format: RUN_REPORT_FORMAT.to_string(),
        config_hash,
        seed: config.train.seed,
        weight_init: "xavier-uniform".to_string(),
        config: config.clone(),
        dataset: prepared.summary,
        model_parameters,
        metrics,
        artifacts: ArtifactNames {
            checkpoint: "model".to_string(),
            history: "history.csv".to_string(),
            manifest: "patches.json".to_string(),
            scene: scene_artifact,
        },
    };
    let report_path = out.join("report.json");
    write_json(&report_path, &report)?;
    let timing_path = out.join("timing.json");
    write_json(
        &timing_path,
        &TimingSidecar {
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        },
    )?;

    Ok(TrainedRun {
        report,
        out_dir: out,
        report_path,
        checkpoint_stem,
        history_path,
        manifest_path,
        timing_path,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Evaluation mode switches; all false means the standard protocol.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Restrict every subset to uniform patches. With a single-label
    /// checkpoint on a multi-label manifest this is the uniform-subset
    /// protocol: the patch's one occurring class becomes the label.
    pub filter_uniform: bool,
    /// Score a single-label checkpoint against multi-label truth by taking
    /// its top-k logits per patch, k being that patch's true label count
    /// with the background class removed.
    pub topk: bool,
    /// Drop the background class from multi-label truth and predictions;
    /// patches whose truth becomes empty are skipped and counted.
    pub exclude_background: bool,
}

/// Metrics of one evaluated subset.
#[derive(Debug, Clone, Serialize)]
pub struct SubsetEval {
    pub subset: String,
    pub n_evaluated: usize,
    /// Patches skipped because their truth was background-only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped_background_only: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standard: Option<TaskMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topk: Option<TopkEval>,
}

/// Top-k scoring outcome of one subset.
#[derive(Debug, Clone, Serialize)]
pub struct TopkEval {
    /// Where each patch's k came from (`truth`: its true label count).
    pub k_source: String,
    /// Patches that could not be scored (k = 0 or empty truth).
    pub skipped: usize,
    pub report: MultiLabelReport,
}

/// A full evaluation: the three split subsets plus their union.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub format: String,
    pub checkpoint: String,
    pub manifest: String,
    pub scene: String,
    pub checkpoint_task: SamplingMode,
    pub manifest_mode: SamplingMode,
    pub filter_uniform: bool,
    pub topk: bool,
    pub exclude_background: bool,
    pub subsets: Vec<SubsetEval>,
}

fn check_eval_compatibility(
    model: &Model,
    manifest: &PatchManifest,
    options: &EvalOptions,
) -> Result<()> {
    if model.meta.patch_size != manifest.patch_size {
        return Err(Error::Incompatible(format!(
            "checkpoint expects patch size {} but the manifest sampled {}",
            model.meta.patch_size, manifest.patch_size
        )));
    }
    if model.meta.class_count != manifest.class_count {
        return Err(Error::Incompatible(format!(
            "checkpoint was trained with {} scene classes but the manifest has {}",
            model.meta.class_count, manifest.class_count
        )));
    }
    match (model.meta.task, manifest.mode) {
        (SamplingMode::Multi, SamplingMode::Multi) => {
            if options.topk {
                return Err(Error::Config(
                    "top-k evaluation scores a single-label checkpoint against \
                     multi-label truth; this checkpoint is multi-label"
                        .into(),
                ));
            }
            Ok(())
        }
        (SamplingMode::Single, SamplingMode::Single) => {
            if options.topk {
                return Err(Error::Config(
                    "top-k evaluation needs a manifest sampled in multi mode".into(),
                ));
            }
            if options.exclude_background {
                return Err(Error::Config(
                    "the single-label task already excludes the background class".into(),
                ));
            }
            Ok(())
        }
        (SamplingMode::Single, SamplingMode::Multi) => {
            if options.topk || options.filter_uniform {
                Ok(())
            } else {
                Err(Error::Incompatible(
                    "a single-label checkpoint can be scored on a multi-label manifest \
                     only with --filter-uniform (uniform-subset protocol) or --topk \
                     (extended annotations)"
                        .into(),
                ))
            }
        }
        (SamplingMode::Multi, SamplingMode::Single) => Err(Error::Incompatible(
            "a multi-label checkpoint cannot be evaluated on a single-label manifest".into(),
        )),
    }
}

/// One-hot truth rows over every scene class for the selected patches.
fn one_hot_truth(manifest: &PatchManifest, idx: &[usize]) -> Matrix {
    let mut m = Matrix::zeros(idx.len(), manifest.class_count);
    for (row, &i) in idx.iter().enumerate() {
        for &class in &manifest.labels[i] {
            m.set(row, usize::from(class), 1.0);
        }
    }
    m
}

fn drop_first_column(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols() - 1);
    for i in 0..m.rows() {
        for j in 1..m.cols() {
            out.set(i, j - 1, m.get(i, j));
        }
    }
    out
}

fn eval_subset(
    model: &Model,
    manifest: &PatchManifest,
    features: &Matrix,
    mut idx: Vec<usize>,
    options: &EvalOptions,
    subset: &str,
) -> Result<SubsetEval> {
    if options.filter_uniform {
        idx.retain(|&i| manifest.is_uniform[i]);
        if idx.is_empty() {
            return Err(Error::Input(format!(
                "the {subset} subset contains no uniform patches"
            )));
        }
    }
    if idx.is_empty() {
        return Err(Error::Input(format!("the {subset} subset is empty")));
    }
    let logits = forward_logits(model, features, &idx)?;
    match (model.meta.task, manifest.mode) {
        (SamplingMode::Multi, SamplingMode::Multi) => {
            let truth = one_hot_truth(manifest, &idx);
            if options.exclude_background {
                let truth_nb = drop_first_column(&truth);
                let logits_nb = drop_first_column(&logits);
                let keep: Vec<usize> = (0..truth_nb.rows())
                    .filter(|&r| truth_nb.row(r).contains(&1.0))
                    .collect();
                let skipped = idx.len() - keep.len();
                if keep.is_empty() {
                    return Err(Error::Input(format!(
                        "every patch in the {subset} subset has background-only truth"
                    )));
                }
                let truth_kept = truth_nb.gather_rows(&keep);
                let logits_kept = logits_nb.gather_rows(&keep);
                let pred = predict_multilabel_matrix(&logits_kept);
                Ok(SubsetEval {
                    subset: subset.to_string(),
                    n_evaluated: keep.len(),
                    skipped_background_only: Some(skipped),
                    standard: Some(TaskMetrics::Multi(multilabel_report(&truth_kept, &pred)?)),
                    topk: None,
                })
            } else {
                let pred = predict_multilabel_matrix(&logits);
                Ok(SubsetEval {
                    subset: subset.to_string(),
                    n_evaluated: idx.len(),
                    skipped_background_only: None,
                    standard: Some(TaskMetrics::Multi(multilabel_report(&truth, &pred)?)),
                    topk: None,
                })
            }
        }
        (SamplingMode::Single, SamplingMode::Single) => {
            let truth: Vec<usize> = idx
                .iter()
                .map(|&i| usize::from(manifest.labels[i][0]) - 1)
                .collect();
            let pred: Vec<usize> = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
            Ok(SubsetEval {
                subset: subset.to_string(),
                n_evaluated: idx.len(),
                skipped_background_only: None,
                standard: Some(TaskMetrics::Single(single_label_report(
                    &truth,
                    &pred,
                    model.classifier.output_dim(),
                )?)),
                topk: None,
            })
        }
        (SamplingMode::Single, SamplingMode::Multi) => {
            if options.topk {
                // Extended annotations: the single-label model's top-k
                // logits against background-free multi-label truth.
                let truth = drop_first_column(&one_hot_truth(manifest, &idx));
                let (report, skipped) = topk_extended_eval(&truth, &logits, KSource::FromTruth)?;
                Ok(SubsetEval {
                    subset: subset.to_string(),
                    n_evaluated: idx.len() - skipped,
                    skipped_background_only: None,
                    standard: None,
                    topk: Some(TopkEval {
                        k_source: "truth".to_string(),
                        skipped,
                        report,
                    }),
                })
            } else {
                // Uniform-subset protocol: the patch's single occurring
                // class is the label (filter_uniform checked upstream).
                let truth: Vec<usize> = idx
                    .iter()
                    .map(|&i| usize::from(manifest.labels[i][0]) - 1)
                    .collect();
                let pred: Vec<usize> =
                    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
                Ok(SubsetEval {
                    subset: subset.to_string(),
                    n_evaluated: idx.len(),
                    skipped_background_only: None,
                    standard: Some(TaskMetrics::Single(single_label_report(
                        &truth,
                        &pred,
                        model.classifier.output_dim(),
                    )?)),
                    topk: None,
                })
            }
        }
        (SamplingMode::Multi, SamplingMode::Single) => {
            unreachable!("rejected by the compatibility check")
        }
    }
}

/// Evaluates a checkpoint against a patch manifest and writes `eval.json`
/// under `out_dir`. The scene is reloaded from the path recorded in the
/// manifest; patches are re-extracted and verified against it.
pub fn cmd_eval(
    checkpoint: &Path,
    manifest_path: &Path,
    options: &EvalOptions,
    out_dir: &Path,
) -> Result<(EvalReport, PathBuf)> {
    let model = load_model(checkpoint)?;
    let manifest = PatchManifest::load(manifest_path)?;
    check_eval_compatibility(&model, &manifest, options)?;

    let scene_path = PathBuf::from(&manifest.scene);
    let (scene, labels) = load_scene(&scene_path)?;
    if scene.bands != model.meta.bands {
        return Err(Error::Incompatible(format!(
            "checkpoint expects {} bands but the scene has {}",
            model.meta.bands, scene.bands
        )));
    }
    let patches = manifest.rebuild(&scene, &labels)?;
    let features = zscore_apply(&patches, &model.norm)?;

    let subsets = [
        ("train", indices_with_tag(&manifest.split, SplitTag::Train)),
        ("valid", indices_with_tag(&manifest.split, SplitTag::Valid)),
        ("test", indices_with_tag(&manifest.split, SplitTag::Test)),
        ("all", (0..manifest.split.len()).collect()),
    ];
    let mut evaluated = Vec::with_capacity(subsets.len());
    for (name, idx) in subsets {
        evaluated.push(eval_subset(
            &model, &manifest, &features, idx, options, name,
        )?);
    }

    let report = EvalReport {
        format: EVAL_REPORT_FORMAT.to_string(),
        checkpoint: checkpoint.display().to_string(),
        manifest: manifest_path.display().to_string(),
        scene: manifest.scene.clone(),
        checkpoint_task: model.meta.task,
        manifest_mode: manifest.mode,
        filter_uniform: options.filter_uniform,
        topk: options.topk,
        exclude_background: options.exclude_background,
        subsets: evaluated,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("eval.json");
    write_json(&path, &report)?;
    Ok((report, path))
}

// ---------------------------------------------------------------------------
// Scheme sweep
// ---------------------------------------------------------------------------

/// Status of one scheme's run inside a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRun {
    pub scheme: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
}

/// A finished sweep: the comparison table plus per-run status.
#[derive(Debug)]
pub struct SweepOutcome {
    pub csv: String,
    pub csv_path: PathBuf,
    pub status_path: PathBuf,
    pub runs: Vec<SweepRun>,
    pub failures: usize,
}

fn metric_rows(task: SamplingMode) -> &'static [&'static str] {
    match task {
        SamplingMode::Multi => &["accuracy", "hamming_loss", "precision", "recall"],
        SamplingMode::Single => &["overall_accuracy", "average_accuracy"],
    }
}

fn metric_value(metrics: &TaskMetrics, name: &str) -> f64 {
    match (metrics, name) {
        (TaskMetrics::Multi(r), "accuracy") => r.accuracy,
        (TaskMetrics::Multi(r), "hamming_loss") => r.hamming_loss,
        (TaskMetrics::Multi(r), "precision") => r.precision,
        (TaskMetrics::Multi(r), "recall") => r.recall,
        (TaskMetrics::Single(r), "overall_accuracy") => r.overall_accuracy,
        (TaskMetrics::Single(r), "average_accuracy") => {
            let present: Vec<f64> = r.per_class_accuracy.iter().flatten().copied().collect();
            present.iter().sum::<f64>() / present.len() as f64
        }
        _ => unreachable!("metric {name} does not belong to this task"),
    }
}

/// Trains every scheme on the same data (same scene, sampling, and seed, so
/// split membership is identical) and writes `comparison.csv`: one row per
/// metric, one column per scheme, test-subset values. Individual run
/// failures are recorded and the sweep continues.
pub fn cmd_sweep(base: &ExperimentConfig, schemes: &[Scheme]) -> Result<SweepOutcome> {
    base.validate()?;
    if schemes.is_empty() {
        return Err(Error::Config("the sweep needs at least one scheme".into()));
    }
    fs::create_dir_all(&base.output.dir).map_err(|e| Error::io(&base.output.dir, e))?;

    // A synthetic scene is generated once and shared by path, so every
    // scheme trains on literally the same scene file and the manifests the
    // runs write are identical.
    let mut shared = base.clone();
    if let Some(spec) = &base.scene.synth {
        let (scene, labels) = synth_scene(spec)?;
        let path = base.output.dir.join("scene.json");
        save_scene(&scene, &labels, &path)?;
        shared.scene = SceneSource {
            path: Some(path),
            synth: None,
        };
    }

    let mut runs = Vec::with_capacity(schemes.len());
    let mut columns: Vec<(String, Option<TaskMetrics>)> = Vec::with_capacity(schemes.len());
    for &scheme in schemes {
        let mut config = shared.clone();
        config.train.scheme = scheme;
        config.output.dir = base.output.dir.join(scheme.name());
        match cmd_train(&config) {
            Ok(run) => {
                runs.push(SweepRun {
                    scheme: scheme.name().to_string(),
                    ok: true,
                    error: None,
                    report: Some(run.report_path.display().to_string()),
                });
                columns.push((scheme.name().to_string(), Some(run.report.metrics.test)));
            }
            Err(e) => {
                runs.push(SweepRun {
                    scheme: scheme.name().to_string(),
                    ok: false,
                    error: Some(e.to_string()),
                    report: None,
                });
                columns.push((scheme.name().to_string(), None));
            }
        }
    }

    let mut csv = String::from("metric");
    for (name, _) in &columns {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for metric in metric_rows(base.sampling.mode) {
        csv.push_str(metric);
        for (_, metrics) in &columns {
            csv.push(',');
            if let Some(m) = metrics {
                csv.push_str(&metric_value(m, metric).to_string());
            }
        }
        csv.push('\n');
    }

    let csv_path = base.output.dir.join("comparison.csv");
    write_text(&csv_path, &csv)?;
    let status_path = base.output.dir.join("sweep.json");
    write_json(&status_path, &runs)?;
    let failures = runs.iter().filter(|r| !r.ok).count();
    Ok(SweepOutcome {
        csv,
        csv_path,
        status_path,
        runs,
        failures,
    })
}

// ---------------------------------------------------------------------------
// Gradient verification suite
// ---------------------------------------------------------------------------

/// One finite-difference check of the suite.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Outcome of the whole suite.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckOutcome {
    pub checks: Vec<GradCheckResult>,
    pub elapsed_seconds: f64,
}

impl GradCheckOutcome {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(GradCheckResult::passed)
    }

    /// One line per check plus a summary line.
    pub fn render(&self) -> String {
        let mut out = format!("gradient checks (tolerance {GRAD_TOLERANCE:e}):\n");
        for c in &self.checks {
            out.push_str(&format!(
                "  {:<36} {:>12.3e}  {}\n",
                c.name,
                c.max_rel_error,
                if c.passed() { "pass" } else { "FAIL" }
            ));
        }
        let failed = self.checks.iter().filter(|c| !c.passed()).count();
        if failed == 0 {
            out.push_str(&format!(
                "all {} checks passed in {:.2}s\n",
                self.checks.len(),
                self.elapsed_seconds
            ));
        } else {
            out.push_str(&format!(
                "{failed} of {} checks FAILED ({:.2}s)\n",
                self.checks.len(),
                self.elapsed_seconds
            ));
        }
        out
    }
}

/// Runs the finite-difference suite over every layer kind, every loss, and
/// the composed networks. All checks must come in at or under
/// [`GRAD_TOLERANCE`].
pub fn cmd_gradcheck() -> Result<GradCheckOutcome> {
    gradcheck_suite(false)
}

fn uniform_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::from_seed(seed);
    let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Matrix::from_vec(rows, cols, data)
}

fn binary_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::from_seed(seed);
    let data = (0..rows * cols)
        .map(|_| if rng.next_f64() < 0.5 { 0.0 } else { 1.0 })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Sets every bias slightly positive so that no pre-activation sits within
/// a finite-difference step of a ReLU kink at the probed points.
fn offset_biases(layers: &mut [DenseLayer]) {
    for layer in layers {
        for b in &mut layer.bias {
            *b = 0.05;
        }
    }
}

/// A layer stack feeding mean squared error, as a function of its
/// parameters. With `mask_seed` set, the stack runs in training mode and
/// re-seeds its dropout stream identically on every call, so the sampled
/// masks are fixed and the function stays deterministic.
struct StackMse {
    layers: Vec<DenseLayer>,
    input: Matrix,
    target: Matrix,
    mask_seed: Option<u64>,
}

impl StackMse {
    fn run(&mut self, point: &[f64]) -> (f64, Vec<f64>) {
        assign_layer_params(self.layers.iter_mut(), point).expect("point matches layer shapes");
        let mut rng = RngStream::from_seed(self.mask_seed.unwrap_or(0));
        let cache = stack_forward(
            &self.layers,
            self.input.clone(),
            self.mask_seed.is_some(),
            &mut rng,
        )
        .expect("forward");
        let (loss, grad) = mse_loss(cache.output(), &self.target).expect("loss");
        let (_, grads) = stack_backward(&self.layers, &cache, grad).expect("backward");
        (loss, flatten_grads(&grads))
    }
}

impl ScalarFn for StackMse {
    fn value(&mut self, point: &[f64]) -> f64 {
        self.run(point).0
    }

    fn gradient(&mut self, point: &[f64]) -> Vec<f64> {
        self.run(point).1
    }
}

/// The same stack-plus-MSE computation as a function of its input.
struct StackInputMse {
    layers: Vec<DenseLayer>,
    rows: usize,
    cols: usize,
    target: Matrix,
}

impl StackInputMse {
    fn run(&mut self, point: &[f64]) -> (f64, Vec<f64>) {
        let input = Matrix::from_vec(self.rows, self.cols, point.to_vec());
        let mut rng = RngStream::from_seed(0);
        let cache = stack_forward(&self.layers, input, false, &mut rng).expect("forward");
        let (loss, grad) = mse_loss(cache.output(), &self.target).expect("loss");
        let (grad_input, _) = stack_backward(&self.layers, &cache, grad).expect("backward");
        (loss, grad_input.as_slice().to_vec())
    }
}

impl ScalarFn for StackInputMse {
    fn value(&mut self, point: &[f64]) -> f64 {
        self.run(point).0
    }

    fn gradient(&mut self, point: &[f64]) -> Vec<f64> {
        self.run(point).1
    }
}

/// A loss applied directly to a matrix argument.
struct MatrixLoss<F: FnMut(&Matrix) -> (f64, Matrix)> {
    rows: usize,
    cols: usize,
    f: F,
}

impl<F: FnMut(&Matrix) -> (f64, Matrix)> ScalarFn for MatrixLoss<F> {
    fn value(&mut self, point: &[f64]) -> f64 {
        let m = Matrix::from_vec(self.rows, self.cols, point.to_vec());
        (self.f)(&m).0
    }

    fn gradient(&mut self, point: &[f64]) -> Vec<f64> {
        let m = Matrix::from_vec(self.rows, self.cols, point.to_vec());
        (self.f)(&m).1.as_slice().to_vec()
    }
}

/// The L2 penalty over a set of weight matrices.
struct L2Check {
    shapes: Vec<(usize, usize)>,
    lambda: f64,
}

impl L2Check {
    fn matrices(&self, point: &[f64]) -> Vec<Matrix> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut offset = 0;
        for &(r, c) in &self.shapes {
            out.push(Matrix::from_vec(r, c, point[offset..offset + r * c].to_vec()));
            offset += r * c;
        }
        out
    }
}

impl ScalarFn for L2Check {
    fn value(&mut self, point: &[f64]) -> f64 {
        let ms = self.matrices(point);
        let refs: Vec<&Matrix> = ms.iter().collect();
        l2_penalty(&refs, self.lambda)
    }

    fn gradient(&mut self, point: &[f64]) -> Vec<f64> {
        let mut flat = Vec::with_capacity(point.len());
        for m in self.matrices(point) {
            let mut grad = Matrix::zeros(m.rows(), m.cols());
            l2_backward(&m, self.lambda, &mut grad);
            flat.extend_from_slice(grad.as_slice());
        }
        flat
    }
}

/// The full autoencoder feeding MSE, as a function of all its parameters.
struct AeMse {
    ae: Autoencoder,
    batch: Matrix,
}

impl AeMse {
    fn run(&mut self, point: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        self.ae.assign_params(point).expect("point matches");
        let mut rng = RngStream::from_seed(0);
        let cache = ae_forward_cached(&self.ae, &self.batch, false, &mut rng).expect("forward");
        let rows = cache.batch_size * cache.pixels;
        let target = self.batch.clone().reshape(rows, self.ae.bands);
        let (loss, grad_recon) = mse_loss(cache.reconstruction(), &target).expect("loss");
        if !want_grad {
            return (loss, Vec::new());
        }
        let (grad_hidden, dec_grads) =
            stack_backward(&self.ae.decoder, &cache.decoder, grad_recon).expect("backward");
        let (_, enc_grads) =
            stack_backward(&self.ae.encoder, &cache.encoder, grad_hidden).expect("backward");
        let mut flat = flatten_grads(&enc_grads);
        flat.extend(flatten_grads(&dec_grads));
        (loss, flat)
    }
}

impl ScalarFn for AeMse {
    fn value(&mut self, point: &[f64]) -> f64 {
        self.run(point, false).0
    }

    fn gradient(&mut self, point: &[f64]) -> Vec<f64> {
        self.run(point, true).1
    }
}

/// The classification path of joint training — encoder into classifier into
/// weighted binary cross-entropy — as a function of the encoder parameters.
struct EncoderClassifierBce {
    ae: Autoencoder,
    clf: Classifier,
    batch: Matrix,
    targets: Matrix,
    lambda: f64,
}

impl EncoderClassifierBce {
    fn run(&mut self, point: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        assign_layer_params(self.ae.encoder.iter_mut(), point).expect("point matches encoder");
        let mut rng = RngStream::from_seed(0);
        let cache = ae_forward_cached(&self.ae, &self.batch, false, &mut rng).expect("forward");
        let hidden = cache.hidden_per_patch();
        let mut rng_clf = RngStream::from_seed(0);
        let clf_cache =
            classify_cached(&self.clf, &hidden, false, &mut rng_clf).expect("classify");
        let (task, grad_logits) =
            bce_with_logits(clf_cache.output(), &self.targets, BceWeights::default())
                .expect("loss");
        let loss = task + l2_penalty(&self.clf.weight_matrices(), self.lambda);
        if !want_grad {
            return (loss, Vec::new());
        }
        let (grad_hidden, _) =
            stack_backward(&self.clf.layers, &clf_cache, grad_logits).expect("backward");
        let grad_encoded =
            grad_hidden.reshape(cache.batch_size * cache.pixels, HIDDEN_CHANNELS);
        let (_, enc_grads) =
            stack_backward(&self.ae.encoder, &cache.encoder, grad_encoded).expect("backward");
        (loss, flatten_grads(&enc_grads))
    }
}

impl ScalarFn for EncoderClassifierBce {
    fn value(&mut self, point: &[f64]) -> f64 {
        self.run(point, false).0
    }

    fn gradient(&mut self, point: &[f64]) -> Vec<f64> {
        self.run(point, true).1
    }
}

/// The full classifier feeding binary cross-entropy plus its L2 penalty, as
/// a function of the classifier parameters.
struct ClassifierBceL2 {
    clf: Classifier,
    hidden: Matrix,
    targets: Matrix,
    lambda: f64,
}

impl ClassifierBceL2 {
    fn run(&mut self, point: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        self.clf.assign_params(point).expect("point matches");
        let mut rng = RngStream::from_seed(0);
        let cache = classify_cached(&self.clf, &self.hidden, false, &mut rng).expect("forward");
        let (task, grad_logits) =
            bce_with_logits(cache.output(), &self.targets, BceWeights::default()).expect("loss");
        let loss = task + l2_penalty(&self.clf.weight_matrices(), self.lambda);
        if !want_grad {
            return (loss, Vec::new());
        }
        let (_, mut grads) =
            stack_backward(&self.clf.layers, &cache, grad_logits).expect("backward");
        for (layer, g) in self.clf.layers.iter().zip(&mut grads) {
            l2_backward(&layer.weights, self.lambda, &mut g.weights);
        }
        (loss, flatten_grads(&grads))
    }
}

impl ScalarFn for ClassifierBceL2 {
    fn value(&mut self, point: &[f64]) -> f64 {
        self.run(point, false).0
    }

    fn gradient(&mut self, point: &[f64]) -> Vec<f64> {
        self.run(point, true).1
    }
}

/// The full classifier feeding cross-entropy, as a function of its
/// parameters — the single-label task loss path.
struct ClassifierCe {
    clf: Classifier,
    hidden: Matrix,
    classes: Vec<usize>,
}

impl ClassifierCe {
    fn run(&mut self, point: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        self.clf.assign_params(point).expect("point matches");
        let mut rng = RngStream::from_seed(0);
        let cache = classify_cached(&self.clf, &self.hidden, false, &mut rng).expect("forward");
        let (loss, grad_logits) = cross_entropy(cache.output(), &self.classes).expect("loss");
        if !want_grad {
            return (loss, Vec::new());
        }
        let (_, grads) = stack_backward(&self.clf.layers, &cache, grad_logits).expect("backward");
        (loss, flatten_grads(&grads))
    }
}

impl ScalarFn for ClassifierCe {
    fn value(&mut self, point: &[f64]) -> f64 {
        self.run(point, false).0
    }

    fn gradient(&mut self, point: &[f64]) -> Vec<f64> {
        self.run(point, true).1
    }
}

/// Wrapper that deliberately corrupts one gradient coordinate; the suite's
/// forced-failure fixture.
struct CorruptedGrad<'a> {
    inner: &'a mut dyn ScalarFn,
}

impl ScalarFn for CorruptedGrad<'_> {
    fn value(&mut self, point: &[f64]) -> f64 {
        self.inner.value(point)
    }

    fn gradient(&mut self, point: &[f64]) -> Vec<f64> {
        let mut g = self.inner.gradient(point);
        g[0] += 1e-3 * (g[0].abs() + 1.0);
        g
    }
}

/// Probe indices for the classifier's parameter vector: a global stride
/// plus a spread inside each layer so the small late layers are hit too.
fn classifier_probes(clf: &Classifier, global: usize, per_layer: usize) -> Vec<usize> {
    let total: usize = clf.param_count();
    let mut probes = strided_probes(total, global);
    for range in layer_param_ranges(clf.layers.iter()) {
        let len = range.end - range.start;
        probes.extend(
            strided_probes(len, per_layer)
                .into_iter()
                .map(|i| range.start + i),
        );
    }
    probes
}

/// Builds and runs every check. With `corrupt_fixture` set, the plain MSE
/// check gets a deliberately wrong gradient, which the suite must flag.
#[doc(hidden)]
pub fn gradcheck_suite(corrupt_fixture: bool) -> Result<GradCheckOutcome> {
    let started = Instant::now();
    let mut checks: Vec<GradCheckResult> = Vec::new();
    let mut record = |name: &str, max_rel_error: f64| {
        checks.push(GradCheckResult {
            name: name.to_string(),
            max_rel_error,
            tolerance: GRAD_TOLERANCE,
        });
    };

    // Single dense layers: parameters, input path, both activations, and a
    // dropout layer with a fixed mask.
    {
        let mut rng = RngStream::from_seed(301);
        let mut layers = vec![DenseLayer::init(5, 4, Activation::Relu, 0.0, &mut rng)];
        offset_biases(&mut layers);
        let point = flatten_layer_params(layers.iter());
        let mut f = StackMse {
            layers,
            input: uniform_matrix(3, 5, 302),
            target: uniform_matrix(3, 4, 303),
            mask_seed: None,
        };
        record("layer-relu-parameters", grad_check(&mut f, &point, 1e-4));
    }
    {
        let mut rng = RngStream::from_seed(304);
        let layers = vec![DenseLayer::init(5, 4, Activation::Linear, 0.0, &mut rng)];
        let point = flatten_layer_params(layers.iter());
        let mut f = StackMse {
            layers,
            input: uniform_matrix(3, 5, 302),
            target: uniform_matrix(3, 4, 303),
            mask_seed: None,
        };
        record("layer-linear-parameters", grad_check(&mut f, &point, 1e-4));
    }
    {
        let mut rng = RngStream::from_seed(301);
        let mut layers = vec![DenseLayer::init(5, 4, Activation::Relu, 0.0, &mut rng)];
        offset_biases(&mut layers);
        let input = uniform_matrix(3, 5, 302);
        let point = input.as_slice().to_vec();
        let mut f = StackInputMse {
            layers,
            rows: 3,
            cols: 5,
            target: uniform_matrix(3, 4, 303),
        };
        record(
            "layer-relu-input-gradient",
            grad_check(&mut f, &point, 1e-4),
        );
    }
    {
        let mut rng = RngStream::from_seed(305);
        let mut layers = vec![DenseLayer::init(6, 5, Activation::Relu, 0.4, &mut rng)];
        offset_biases(&mut layers);
        let point = flatten_layer_params(layers.iter());
        let mut f = StackMse {
            layers,
            input: uniform_matrix(4, 6, 306),
            target: uniform_matrix(4, 5, 307),
            mask_seed: Some(7),
        };
        record(
            "layer-dropout-fixed-mask",
            grad_check(&mut f, &point, 1e-4),
        );
    }

    // Losses, each as a direct function of its matrix argument.
    {
        let target = uniform_matrix(3, 4, 309);
        let point = uniform_matrix(3, 4, 308).as_slice().to_vec();
        let mut f = MatrixLoss {
            rows: 3,
            cols: 4,
            f: move |m: &Matrix| mse_loss(m, &target).expect("loss"),
        };
        let err = if corrupt_fixture {
            let mut corrupted = CorruptedGrad { inner: &mut f };
            grad_check(&mut corrupted, &point, 1e-4)
        } else {
            grad_check(&mut f, &point, 1e-4)
        };
        record("loss-mse", err);
    }
    {
        let targets = binary_matrix(3, 4, 311);
        let point = uniform_matrix(3, 4, 310).as_slice().to_vec();
        let mut f = MatrixLoss {
            rows: 3,
            cols: 4,
            f: move |m: &Matrix| {
                bce_with_logits(m, &targets, BceWeights::default()).expect("loss")
            },
        };
        record("loss-bce-logits", grad_check(&mut f, &point, 1e-4));
    }
    {
        let targets = binary_matrix(3, 4, 311);
        let pos_weight = vec![1.5, 0.5, 2.0, 1.0];
        let sample_weight = vec![0.7, 1.3, 1.0];
        let point = uniform_matrix(3, 4, 310).as_slice().to_vec();
        let mut f = MatrixLoss {
            rows: 3,
            cols: 4,
            f: move |m: &Matrix| {
                let weights = BceWeights {
                    pos_weight: Some(&pos_weight),
                    sample_weight: Some(&sample_weight),
                };
                bce_with_logits(m, &targets, weights).expect("loss")
            },
        };
        record("loss-bce-weighted", grad_check(&mut f, &point, 1e-4));
    }
    {
        let classes = vec![0usize, 2, 4, 1];
        let point = uniform_matrix(4, 5, 312).as_slice().to_vec();
        let mut f = MatrixLoss {
            rows: 4,
            cols: 5,
            f: move |m: &Matrix| cross_entropy(m, &classes).expect("loss"),
        };
        record("loss-cross-entropy", grad_check(&mut f, &point, 1e-4));
    }
    {
        let mut point = uniform_matrix(4, 3, 313).as_slice().to_vec();
        point.extend_from_slice(uniform_matrix(2, 6, 314).as_slice());
        let mut f = L2Check {
            shapes: vec![(4, 3), (2, 6)],
            lambda: 0.37,
        };
        record("loss-l2-penalty", grad_check(&mut f, &point, 1e-4));
    }

    // Composed networks. Seeds and step sizes are frozen values verified to
    // be roundoff-limited (no pre-activation within a step of a ReLU kink).
    {
        let mut init = RngStream::from_seed(38);
        let mut ae = build_autoencoder(6, 0.0, &mut init)?;
        for layer in ae.layers_mut() {
            for b in &mut layer.bias {
                *b = 0.05;
            }
        }
        let point = ae.flatten_params();
        let probes = strided_probes(point.len(), 200);
        let mut f = AeMse {
            ae,
            batch: uniform_matrix(4, 9 * 6, 15),
        };
        record(
            "network-autoencoder-mse",
            grad_check_probed(&mut f, &point, &probes, 2e-4),
        );
    }
    {
        let mut init_ae = RngStream::from_seed(38);
        let mut ae = build_autoencoder(6, 0.0, &mut init_ae)?;
        for layer in ae.layers_mut() {
            for b in &mut layer.bias {
                *b = 0.05;
            }
        }
        let mut init_clf = RngStream::from_seed(9);
        let mut clf = build_classifier(4, 0.0, &mut init_clf)?;
        offset_biases(&mut clf.layers);
        let point = flatten_layer_params(ae.encoder.iter());
        let probes = strided_probes(point.len(), 80);
        let mut f = EncoderClassifierBce {
            ae,
            clf,
            batch: uniform_matrix(3, 9 * 6, 324),
            targets: binary_matrix(3, 4, 325),
            lambda: 1e-3,
        };
        record(
            "network-encoder-classifier-bce",
            grad_check_probed(&mut f, &point, &probes, 2e-4),
        );
    }
    {
        let mut init = RngStream::from_seed(9);
        let mut clf = build_classifier(4, 0.0, &mut init)?;
        offset_biases(&mut clf.layers);
        let point = clf.flatten_params();
        let probes = classifier_probes(&clf, 20, 5);
        let mut f = ClassifierBceL2 {
            clf,
            hidden: uniform_matrix(2, 288, 318),
            targets: binary_matrix(2, 4, 319),
            lambda: 1e-3,
        };
        record(
            "network-classifier-bce-l2",
            grad_check_probed(&mut f, &point, &probes, 1e-4),
        );
    }
    {
        let mut init = RngStream::from_seed(9);
        let clf = build_classifier(4, 0.0, &mut init)?;
        let point = clf.flatten_params();
        let probes = classifier_probes(&clf, 20, 5);
        let mut f = ClassifierCe {
            clf,
            hidden: uniform_matrix(3, 288, 16),
            classes: vec![0, 3, 1],
        };
        record(
            "network-classifier-cross-entropy",
            grad_check_probed(&mut f, &point, &probes, 1e-4),
        );
    }

    Ok(GradCheckOutcome {
        checks,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    })
}
