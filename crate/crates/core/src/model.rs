//! The two-component network: a per-pixel spectral autoencoder feeding a
//! dense classifier, plus prediction rules and checkpoint persistence.
//!
//! Every autoencoder layer applies one shared affine map along the band axis
//! of each pixel independently: a batch of n patches (each `pixels` spectra
//! of `bands` values) is viewed as `n * pixels` rows of `bands` values, so
//! encoder weights are shared across pixel positions. The classifier then
//! consumes the concatenated hidden spectra (`pixels * 32` wide, 288 for
//! 3x3 patches).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    dense_backward, dense_forward, dropout, dropout_backward, Activation, DenseLayer, Matrix,
};
use crate::patch::{NormStats, SamplingMode};
use crate::rng::{labels as stream_labels, RngStream};

/// Channels per pixel in the hidden representation.
pub const HIDDEN_CHANNELS: usize = 32;
/// Encoder widths after the input layer.
pub const ENCODER_WIDTHS: [usize; 3] = [96, 64, HIDDEN_CHANNELS];
/// Decoder widths after the hidden layer (last entry replaced by `bands`).
pub const DECODER_WIDTHS: [usize; 2] = [64, 96];
/// Classifier hidden widths between the patch representation and the logits.
pub const CLASSIFIER_WIDTHS: [usize; 4] = [3000, 1512, 512, 28];

/// Spectral autoencoder; both halves act per pixel along the band axis.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    /// bands -> 96 -> 64 -> 32, ReLU throughout, dropout after layers 1-2.
    pub encoder: Vec<DenseLayer>,
    /// 32 -> 64 -> 96 -> bands, ReLU except the final linear layer,
    /// dropout after layers 1-2.
    pub decoder: Vec<DenseLayer>,
    pub bands: usize,
}

/// Dense classifier over the concatenated hidden spectra of one patch.
#[derive(Debug, Clone)]
pub struct Classifier {
    /// input -> 3000 -> 1512 -> 512 -> 28 -> classes; dropout + ReLU on the
    /// first four layers, raw logits out of the last.
    pub layers: Vec<DenseLayer>,
}

/// Flattens layer parameters in order (per layer: weights row-major, bias).
pub fn flatten_layer_params<'a>(layers: impl Iterator<Item = &'a DenseLayer>) -> Vec<f64> {
    let mut flat = Vec::new();
    for layer in layers {
        flat.extend_from_slice(layer.weights.as_slice());
        flat.extend_from_slice(&layer.bias);
    }
    flat
}

/// Writes a flat parameter vector back in `flatten_layer_params` order.
pub fn assign_layer_params<'a>(
    layers: impl Iterator<Item = &'a mut DenseLayer>,
    flat: &[f64],
) -> Result<()> {
    let mut offset = 0;
    for layer in layers {
        let w = layer.weights.as_mut_slice();
        if offset + w.len() + layer.bias.len() > flat.len() {
            return Err(Error::Input(format!(
                "parameter vector of {} values is too short",
                flat.len()
            )));
        }
        w.copy_from_slice(&flat[offset..offset + w.len()]);
        offset += w.len();
        let b = layer.bias.len();
        layer.bias.copy_from_slice(&flat[offset..offset + b]);
        offset += b;
    }
    if offset != flat.len() {
        return Err(Error::Input(format!(
            "parameter vector has {} values, layers hold {offset}",
            flat.len()
        )));
    }
    Ok(())
}

/// Flattens parameter gradients the same way `flatten_layer_params`
/// flattens parameters.
pub fn flatten_grads(grads: &[LayerGrads]) -> Vec<f64> {
    let mut flat = Vec::new();
    for g in grads {
        flat.extend_from_slice(g.weights.as_slice());
        flat.extend_from_slice(&g.bias);
    }
    flat
}

/// Half-open ranges each layer's parameters occupy in the flat vector.
pub fn layer_param_ranges<'a>(
    layers: impl Iterator<Item = &'a DenseLayer>,
) -> Vec<std::ops::Range<usize>> {
    let mut ranges = Vec::new();
    let mut offset = 0;
    for layer in layers {
        let len = layer.param_count();
        ranges.push(offset..offset + len);
        offset += len;
    }
    ranges
}

impl Autoencoder {
    pub fn param_count(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .map(DenseLayer::param_count)
            .sum()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        flatten_layer_params(self.layers())
    }

    pub fn assign_params(&mut self, flat: &[f64]) -> Result<()> {
        assign_layer_params(self.layers_mut(), flat)
    }

    /// Encoder and decoder layers in checkpoint order.
    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.encoder.iter().chain(&self.decoder)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    /// Marks every encoder layer as frozen (or trainable again).
    pub fn set_encoder_trainable(&mut self, trainable: bool) {
        for layer in &mut self.encoder {
            layer.trainable = trainable;
        }
    }
}

impl Classifier {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("classifier has layers").out_dim()
    }

    /// References to the weight matrices, for the L2 penalty.
    pub fn weight_matrices(&self) -> Vec<&Matrix> {
        self.layers.iter().map(|l| &l.weights).collect()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        flatten_layer_params(self.layers.iter())
    }

    pub fn assign_params(&mut self, flat: &[f64]) -> Result<()> {
        assign_layer_params(self.layers.iter_mut(), flat)
    }
}

/// Builds the spectral autoencoder with Xavier-uniform weights drawn from
/// `rng` in layer order.
pub fn build_autoencoder(bands: usize, dropout_rate: f64, rng: &mut RngStream) -> Result<Autoencoder> {
    if bands == 0 {
        return Err(Error::Config("band count must be at least 1".into()));
    }
    let mut encoder = Vec::with_capacity(3);
    let mut width = bands;
    for (i, &out) in ENCODER_WIDTHS.iter().enumerate() {
        let rate = if i < 2 { dropout_rate } else { 0.0 };
        encoder.push(DenseLayer::init(width, out, Activation::Relu, rate, rng));
        width = out;
    }
    let mut decoder = Vec::with_capacity(3);
    for (i, &out) in DECODER_WIDTHS.iter().enumerate() {
        let rate = if i < 2 { dropout_rate } else { 0.0 };
        decoder.push(DenseLayer::init(width, out, Activation::Relu, rate, rng));
        width = out;
    }
    decoder.push(DenseLayer::init(width, bands, Activation::Linear, 0.0, rng));
    Ok(Autoencoder {
        encoder,
        decoder,
        bands,
    })
}

/// Builds the classifier for a custom input width (`pixels * 32`).
pub fn build_classifier_sized(
    input_dim: usize,
    output_classes: usize,
    dropout_rate: f64,
    rng: &mut RngStream,
) -> Result<Classifier> {
    if output_classes < 2 {
        return Err(Error::Config(format!(
            "classifier needs at least 2 output classes, got {output_classes}"
        )));
    }
    if input_dim == 0 {
        return Err(Error::Config("classifier input width must be positive".into()));
    }
    let mut layers = Vec::with_capacity(5);
    let mut width = input_dim;
    for &out in &CLASSIFIER_WIDTHS {
        layers.push(DenseLayer::init(width, out, Activation::Relu, dropout_rate, rng));
        width = out;
    }
    layers.push(DenseLayer::init(width, output_classes, Activation::Linear, 0.0, rng));
    Ok(Classifier { layers })
}

/// Builds the classifier at its standard 288-wide input (3x3 patches).
pub fn build_classifier(
    output_classes: usize,
    dropout_rate: f64,
    rng: &mut RngStream,
) -> Result<Classifier> {
    build_classifier_sized(9 * HIDDEN_CHANNELS, output_classes, dropout_rate, rng)
}

/// Gradients of one dense layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Everything a backward pass needs from a forward pass through a layer
/// stack: per-layer inputs, pre-dropout activation outputs, dropout masks.
#[derive(Debug)]
pub struct StackCache {
    /// `states[0]` is the stack input; `states[i + 1]` is layer i's output
    /// after dropout — i.e. the input of layer i + 1.
    pub states: Vec<Matrix>,
    /// Activation outputs before dropout, one per layer.
    pub activations: Vec<Matrix>,
    pub masks: Vec<Option<Vec<f64>>>,
}

impl StackCache {
    pub fn output(&self) -> &Matrix {
        self.states.last().expect("cache holds the input state")
    }
}

/// Runs `input` through the layers, recording what backward needs. Dropout
/// draws come from `rng` only when `training` is true and a layer has a
/// nonzero rate, so evaluation consumes no randomness.
pub fn stack_forward(
    layers: &[DenseLayer],
    input: Matrix,
    training: bool,
    rng: &mut RngStream,
) -> Result<StackCache> {
    let mut states = Vec::with_capacity(layers.len() + 1);
    let mut activations = Vec::with_capacity(layers.len());
    let mut masks = Vec::with_capacity(layers.len());
    states.push(input);
    for layer in layers {
        let activated = dense_forward(layer, states.last().expect("state pushed"))?;
        let (dropped, mask) = dropout(&activated, layer.dropout, training, rng)?;
        activations.push(activated);
        masks.push(mask);
        states.push(dropped);
    }
    Ok(StackCache {
        states,
        activations,
        masks,
    })
}

/// Backpropagates `grad_output` through the stack, returning the gradient
/// with respect to the stack input and per-layer parameter gradients in
/// layer order.
pub fn stack_backward(
    layers: &[DenseLayer],
    cache: &StackCache,
    grad_output: Matrix,
) -> Result<(Matrix, Vec<LayerGrads>)> {
    let mut grad = grad_output;
    let mut grads_rev = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate().rev() {
        if let Some(mask) = &cache.masks[i] {
            grad = dropout_backward(&grad, mask);
        }
        let (grad_input, grad_weights, grad_bias) =
            dense_backward(layer, &cache.states[i], &cache.activations[i], &grad)?;
        grads_rev.push(LayerGrads {
            weights: grad_weights,
            bias: grad_bias,
        });
        grad = grad_input;
    }
    grads_rev.reverse();
    Ok((grad, grads_rev))
}

/// Forward caches of one autoencoder pass over a patch batch.
#[derive(Debug)]
pub struct AeCache {
    /// Patches in the batch.
    pub batch_size: usize,
    /// Pixels per patch (9 for 3x3 windows).
    pub pixels: usize,
    /// Encoder cache over `(batch_size * pixels) x bands` rows.
    pub encoder: StackCache,
    /// Decoder cache over the encoder output.
    pub decoder: StackCache,
}

impl AeCache {
    /// Hidden representation reshaped to one row per patch
    /// (`pixels * 32` wide).
    pub fn hidden_per_patch(&self) -> Matrix {
        self.encoder
            .output()
            .clone()
            .reshape(self.batch_size, self.pixels * HIDDEN_CHANNELS)
    }

    /// Reconstruction in per-pixel layout (`(batch * pixels) x bands`), the
    /// same layout the MSE target uses.
    pub fn reconstruction(&self) -> &Matrix {
        self.decoder.output()
    }
}

fn pixels_per_patch(ae: &Autoencoder, batch: &Matrix) -> Result<usize> {
    if batch.cols() == 0 || !batch.cols().is_multiple_of(ae.bands) {
        return Err(Error::Config(format!(
            "batch rows are {} wide, not a multiple of {} bands",
            batch.cols(),
            ae.bands
        )));
    }
    Ok(batch.cols() / ae.bands)
}

/// Full autoencoder pass with caches kept for training. The batch holds one
/// patch per row (`pixels * bands` wide, band-interleaved by pixel); the
/// per-pixel weight sharing falls out of reinterpreting it as
/// `(batch * pixels) x bands`.
pub fn ae_forward_cached(
    ae: &Autoencoder,
    batch: &Matrix,
    training: bool,
    rng: &mut RngStream,
) -> Result<AeCache> {
    let pixels = pixels_per_patch(ae, batch)?;
    let n = batch.rows();
    let per_pixel = batch.clone().reshape(n * pixels, ae.bands);
    let encoder = stack_forward(&ae.encoder, per_pixel, training, rng)?;
    let decoder = stack_forward(&ae.decoder, encoder.output().clone(), training, rng)?;
    Ok(AeCache {
        batch_size: n,
        pixels,
        encoder,
        decoder,
    })
}

/// Autoencoder inference: per-patch hidden representation and a
/// reconstruction with the input's shape.
pub fn ae_forward(
    ae: &Autoencoder,
    batch: &Matrix,
    training: bool,
    rng: &mut RngStream,
) -> Result<(Matrix, Matrix)> {
    let cache = ae_forward_cached(ae, batch, training, rng)?;
    let hidden = cache.hidden_per_patch();
    let recon = cache
        .decoder
        .output()
        .clone()
        .reshape(cache.batch_size, cache.pixels * ae.bands);
    Ok((hidden, recon))
}

/// Classifier pass with caches kept for training.
pub fn classify_cached(
    clf: &Classifier,
    hidden: &Matrix,
    training: bool,
    rng: &mut RngStream,
) -> Result<StackCache> {
    if hidden.cols() != clf.input_dim() {
        return Err(Error::Config(format!(
            "classifier expects {}-wide input, got {}",
            clf.input_dim(),
            hidden.cols()
        )));
    }
    stack_forward(&clf.layers, hidden.clone(), training, rng)
}

/// Classifier inference: raw logits, one row per patch.
pub fn classify(
    clf: &Classifier,
    hidden: &Matrix,
    training: bool,
    rng: &mut RngStream,
) -> Result<Matrix> {
    Ok(classify_cached(clf, hidden, training, rng)?.output().clone())
}

/// Multi-label decision rule: bit c set iff sigmoid(logit_c) > 0.5, i.e.
/// logit_c strictly positive. All-zero predictions are allowed.
pub fn predict_multilabel(logits: &[f64]) -> Vec<u8> {
    logits.iter().map(|&x| u8::from(x > 0.0)).collect()
}

/// `predict_multilabel` over every row.
pub fn predict_multilabel_matrix(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        for (j, &x) in logits.row(i).iter().enumerate() {
            out.set(i, j, f64::from(x > 0.0));
        }
    }
    out
}

/// Indices of the k largest logits, ascending; ties favor the lower index.
pub fn predict_topk(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(Error::Input(format!(
            "top-k size {k} out of range for {} classes",
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Identity of a trained model: everything needed to rebuild its
/// architecture and interpret its outputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelMeta {
    pub bands: usize,
    /// Scene classes including background.
    pub class_count: usize,
    /// Classifier output width: `class_count` for the multi-label task
    /// (background kept), `class_count - 1` for single-label (background
    /// dropped).
    pub output_dim: usize,
    pub task: SamplingMode,
    pub patch_size: usize,
    pub dropout_ae: f64,
    pub dropout_clf: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// The full two-component model plus the normalization statistics its
/// inputs must be standardized with.
#[derive(Debug, Clone)]
pub struct Model {
    pub autoencoder: Autoencoder,
    pub classifier: Classifier,
    pub norm: NormStats,
    pub meta: ModelMeta,
}

impl Model {
    /// Builds a freshly initialized model. Weight draws come from two
    /// labeled streams of the master seed (one per component), so either
    /// component's initialization is independent of the other's width.
    pub fn build(meta: ModelMeta, norm: NormStats) -> Result<Model> {
        if meta.class_count < 2 {
            return Err(Error::Config(format!(
                "scene must have at least 2 classes, got {}",
                meta.class_count
            )));
        }
        let expected_output = match meta.task {
            SamplingMode::Multi => meta.class_count,
            SamplingMode::Single => meta.class_count - 1,
        };
        if meta.output_dim != expected_output {
            return Err(Error::Config(format!(
                "output width {} does not match task {} with {} classes (expected {})",
                meta.output_dim,
                meta.task.name(),
                meta.class_count,
                expected_output
            )));
        }
        if meta.patch_size == 0 {
            return Err(Error::Config("patch size must be at least 1".into()));
        }
        if norm.mean.len() != meta.bands || norm.std.len() != meta.bands {
            return Err(Error::Config(format!(
                "normalization statistics cover {} bands but the model has {}",
                norm.mean.len(),
                meta.bands
            )));
        }
        let mut init_ae = RngStream::derive(meta.seed, stream_labels::INIT_AE);
        let autoencoder = build_autoencoder(meta.bands, meta.dropout_ae, &mut init_ae)?;
        let mut init_clf = RngStream::derive(meta.seed, stream_labels::INIT_CLF);
        let hidden_width = meta.patch_size * meta.patch_size * HIDDEN_CHANNELS;
        let classifier =
            build_classifier_sized(hidden_width, meta.output_dim, meta.dropout_clf, &mut init_clf)?;
        Ok(Model {
            autoencoder,
            classifier,
            norm,
            meta,
        })
    }

    pub fn param_count(&self) -> usize {
        self.autoencoder.param_count() + self.classifier.param_count()
    }

    /// All layers in checkpoint order: encoder 1-3, decoder 1-3,
    /// classifier 1-5.
    pub fn all_layers(&self) -> Vec<&DenseLayer> {
        self.autoencoder.layers().chain(self.classifier.layers.iter()).collect()
    }

    fn all_layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        self.autoencoder
            .layers_mut()
            .chain(self.classifier.layers.iter_mut())
            .collect()
    }

    /// Flattens every parameter in checkpoint order (per layer: weights
    /// row-major, then bias).
    pub fn flatten_params(&self) -> Vec<f64> {
        flatten_layer_params(self.all_layers().into_iter())
    }

    /// Writes a flat parameter vector back, in the same order as
    /// `flatten_params`.
    pub fn assign_params(&mut self, flat: &[f64]) -> Result<()> {
        assign_layer_params(self.all_layers_mut().into_iter(), flat)
    }
}

/// Checkpoint sidecar: architecture, data identity, normalization, and the
/// parameter payload's layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub format: String,
    pub meta: ModelMeta,
    pub norm: NormStats,
    pub encoder_shapes: Vec<[usize; 2]>,
    pub decoder_shapes: Vec<[usize; 2]>,
    pub classifier_shapes: Vec<[usize; 2]>,
    pub param_count: usize,
    /// Human-readable statement of the payload layout.
    pub param_order: String,
}

pub const CHECKPOINT_FORMAT: &str = "hyperpatch-checkpoint-v1";
const PARAM_ORDER: &str = "encoder layers 1-3, decoder layers 1-3, classifier layers 1-5; \
per layer: weights row-major (input-major), then bias; f64 little-endian";

fn shapes_of(layers: &[DenseLayer]) -> Vec<[usize; 2]> {
    layers.iter().map(|l| [l.in_dim(), l.out_dim()]).collect()
}

fn manifest_path(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn params_path(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(".params");
    PathBuf::from(s)
}

/// Saves `<stem>.manifest.json` and `<stem>.params`. The payload is every
/// parameter as little-endian f64 in the documented fixed order, so a
/// save/load/save round trip is byte-identical.
pub fn save_model(model: &Model, stem: &Path) -> Result<()> {
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        meta: model.meta.clone(),
        norm: model.norm.clone(),
        encoder_shapes: shapes_of(&model.autoencoder.encoder),
        decoder_shapes: shapes_of(&model.autoencoder.decoder),
        classifier_shapes: shapes_of(&model.classifier.layers),
        param_count: model.param_count(),
        param_order: PARAM_ORDER.to_string(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    let mpath = manifest_path(stem);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;

    let flat = model.flatten_params();
    let mut payload = Vec::with_capacity(flat.len() * 8);
    for v in flat {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let ppath = params_path(stem);
    fs::write(&ppath, payload).map_err(|e| Error::io(&ppath, e))
}

/// Loads a checkpoint saved by `save_model`, validating the manifest's
/// shapes against the architecture implied by its own metadata and the
/// payload length against the parameter count.
pub fn load_model(stem: &Path) -> Result<Model> {
    let mpath = manifest_path(stem);
    let bytes = fs::read(&mpath)
        .map_err(|e| Error::load(&mpath, format!("missing or unreadable: {e}")))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::load(&mpath, format!("malformed manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::load(
            &mpath,
            format!(
                "unsupported checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                manifest.format
            ),
        ));
    }

    let mut model = Model::build(manifest.meta.clone(), manifest.norm.clone())
        .map_err(|e| Error::load(&mpath, format!("manifest is self-inconsistent: {e}")))?;
    if shapes_of(&model.autoencoder.encoder) != manifest.encoder_shapes
        || shapes_of(&model.autoencoder.decoder) != manifest.decoder_shapes
        || shapes_of(&model.classifier.layers) != manifest.classifier_shapes
    {
        return Err(Error::load(
            &mpath,
            format!(
                "declared layer shapes do not match a {}-band, {}-output architecture",
                manifest.meta.bands, manifest.meta.output_dim
            ),
        ));
    }
    if manifest.param_count != model.param_count() {
        return Err(Error::load(
            &mpath,
            format!(
                "manifest declares {} parameters but the architecture holds {}",
                manifest.param_count,
                model.param_count()
            ),
        ));
    }

    let ppath = params_path(stem);
    let payload = fs::read(&ppath)
        .map_err(|e| Error::load(&ppath, format!("missing or unreadable: {e}")))?;
    if payload.len() != manifest.param_count * 8 {
        return Err(Error::load(
            &ppath,
            format!(
                "payload is {} bytes, expected {} for {} parameters",
                payload.len(),
                manifest.param_count * 8,
                manifest.param_count
            ),
        ));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::load(&ppath, "payload contains non-finite values"));
    }
    model.assign_params(&flat)?;
    Ok(model)
}
