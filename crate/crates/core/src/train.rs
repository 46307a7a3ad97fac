//! The three training procedures over the two-component network.
//!
//! Cascade trains the autoencoder to completion, freezes the encoder, and
//! then trains the classifier on the frozen hidden representations.
//! Iterative alternates fixed-size blocks of autoencoder and classifier
//! epochs until both budgets run out (classifier blocks run back-to-back
//! once the autoencoder budget is spent). Joint optimizes a weighted sum of
//! both objectives with one backward pass per batch.
//!
//! All three schemes share the same block runners and draw from the same
//! labeled random streams, which is what makes the degeneracy hold: an
//! iterative run whose first block covers the whole autoencoder budget is
//! bitwise-identical to a cascade run with the same seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{multilabel_report, single_label_report};
use crate::model::{
    ae_forward, ae_forward_cached, classify, classify_cached, predict_multilabel_matrix,
    stack_backward, LayerGrads, Model, HIDDEN_CHANNELS,
};
use crate::nn::{
    adam_step, bce_with_logits, cross_entropy, l2_backward, l2_penalty, mse_loss, AdamState,
    BceWeights, Matrix, StepLrSchedule,
};
use crate::patch::SamplingMode;
use crate::rng::{labels as stream_labels, RngStream};

/// Which training procedure to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Iterative,
    Joint,
    Cascade,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Iterative => "iterative",
            Scheme::Joint => "joint",
            Scheme::Cascade => "cascade",
        }
    }

    pub const ALL: [Scheme; 3] = [Scheme::Iterative, Scheme::Joint, Scheme::Cascade];
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scheme> {
        match s {
            "iterative" => Ok(Scheme::Iterative),
            "joint" => Ok(Scheme::Joint),
            "cascade" => Ok(Scheme::Cascade),
            other => Err(Error::Config(format!(
                "unknown scheme {other:?}; expected iterative, joint, or cascade"
            ))),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub task: SamplingMode,
    pub epochs_ae: usize,
    pub epochs_clf: usize,
    /// Block length of the iterative scheme; ignored by the others.
    pub iterative_block: usize,
    pub batch_size: usize,
    pub lr_ae: f64,
    pub lr_clf: f64,
    /// Epochs between learning-rate decays, per component.
    pub lr_step_ae: usize,
    pub lr_step_clf: usize,
    /// Multiplicative learning-rate decay factor.
    pub gamma: f64,
    pub dropout_ae: f64,
    pub dropout_clf: f64,
    /// L2 penalty weight on classifier weight matrices (never biases).
    pub lambda_l2: f64,
    /// Weight of the reconstruction loss in the joint objective.
    pub joint_weight_ae: f64,
    /// Weight of the classification loss (including its L2 term) in the
    /// joint objective.
    pub joint_weight_clf: f64,
    pub seed: u64,
    /// Reset Adam moments at every block boundary of the iterative scheme
    /// instead of continuing them (continuation is the default).
    pub reset_adam_between_blocks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::Cascade,
            task: SamplingMode::Multi,
            epochs_ae: 95,
            epochs_clf: 200,
            iterative_block: 20,
            batch_size: 200,
            lr_ae: 1e-2,
            lr_clf: 1e-2,
            lr_step_ae: 15,
            lr_step_clf: 15,
            gamma: 0.9,
            dropout_ae: 0.3,
            dropout_clf: 0.6,
            lambda_l2: 1e-4,
            joint_weight_ae: 1.0,
            joint_weight_clf: 0.3,
            seed: 0,
            reset_adam_between_blocks: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_count = |v: usize, name: &str| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be at least 1")))
            } else {
                Ok(())
            }
        };
        positive_count(self.epochs_ae, "epochs_ae")?;
        positive_count(self.epochs_clf, "epochs_clf")?;
        positive_count(self.iterative_block, "iterative_block")?;
        positive_count(self.batch_size, "batch_size")?;
        positive_count(self.lr_step_ae, "lr_step_ae")?;
        positive_count(self.lr_step_clf, "lr_step_clf")?;
        let positive_real = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive_real(self.lr_ae, "lr_ae")?;
        positive_real(self.lr_clf, "lr_clf")?;
        if !(self.gamma.is_finite() && self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        for (v, name) in [(self.dropout_ae, "dropout_ae"), (self.dropout_clf, "dropout_clf")] {
            if !(v.is_finite() && (0.0..1.0).contains(&v)) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        for (v, name) in [
            (self.lambda_l2, "lambda_l2"),
            (self.joint_weight_ae, "joint_weight_ae"),
            (self.joint_weight_clf, "joint_weight_clf"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.scheme == Scheme::Joint
            && self.joint_weight_ae == 0.0
            && self.joint_weight_clf == 0.0
        {
            return Err(Error::Config(
                "joint training needs at least one nonzero loss weight".into(),
            ));
        }
        Ok(())
    }

    /// Published defaults for one dataset/task preset under one scheme.
    /// Preset names: `paviau-multi`, `salinas-multi`, `paviau-single`,
    /// `salinas-single`.
    pub fn preset(name: &str, scheme: Scheme) -> Result<TrainConfig> {
        use Scheme::{Cascade, Iterative, Joint};
        let mut cfg = TrainConfig {
            scheme,
            ..TrainConfig::default()
        };
        match name {
            "paviau-multi" => {
                cfg.task = SamplingMode::Multi;
                cfg.batch_size = 200;
                cfg.epochs_clf = 200;
                cfg.lr_ae = 1e-2;
                cfg.lr_clf = 1e-2;
                cfg.lr_step_ae = if scheme == Iterative { 10 } else { 15 };
                cfg.lr_step_clf = 15;
                cfg.lambda_l2 = 1e-4;
            }
            "salinas-multi" => {
                cfg.task = SamplingMode::Multi;
                cfg.batch_size = 130;
                cfg.epochs_clf = if scheme == Cascade { 240 } else { 200 };
                cfg.lr_ae = 1e-2;
                cfg.lr_clf = match scheme {
                    Iterative => 1e-2,
                    Joint => 1e-3,
                    Cascade => 1e-5,
                };
                cfg.lr_step_ae = match scheme {
                    Iterative => 10,
                    Joint => 20,
                    Cascade => 15,
                };
                cfg.lr_step_clf = match scheme {
                    Iterative => 15,
                    Joint => 20,
                    Cascade => 15,
                };
                cfg.lambda_l2 = 1e-4;
            }
            "paviau-single" => {
                cfg.task = SamplingMode::Single;
                cfg.batch_size = match scheme {
                    Iterative => 240,
                    Joint => 164,
                    Cascade => 100,
                };
                cfg.epochs_clf = match scheme {
                    Iterative => 260,
                    Joint => 200,
                    Cascade => 240,
                };
                cfg.lr_ae = 1e-2;
                cfg.lr_clf = match scheme {
                    Iterative | Joint => 1e-3,
                    Cascade => 1e-5,
                };
                cfg.lr_step_ae = match scheme {
                    Iterative => 10,
                    Joint => 20,
                    Cascade => 15,
                };
                cfg.lr_step_clf = match scheme {
                    Iterative => 10,
                    Joint => 20,
                    Cascade => 15,
                };
                cfg.lambda_l2 = match scheme {
                    Iterative => 9e-4,
                    Joint => 1e-3,
                    Cascade => 1e-4,
                };
            }
            "salinas-single" => {
                cfg.task = SamplingMode::Single;
                cfg.batch_size = if scheme == Iterative { 240 } else { 200 };
                cfg.epochs_clf = 200;
                cfg.lr_ae = 1e-3;
                cfg.lr_clf = 1e-3;
                cfg.lr_step_ae = 10;
                cfg.lr_step_clf = 10;
                cfg.lambda_l2 = match scheme {
                    Iterative | Cascade => 9e-4,
                    Joint => 7e-4,
                };
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected paviau-multi, salinas-multi, \
                     paviau-single, or salinas-single"
                )));
            }
        }
        Ok(cfg)
    }
}

/// Which part of the network an epoch record describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Ae,
    Clf,
    Joint,
}

impl Component {
    pub fn name(&self) -> &'static str {
        match self {
            Component::Ae => "ae",
            Component::Clf => "clf",
            Component::Joint => "joint",
        }
    }
}

/// One logged epoch of one component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub component: Component,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Validation accuracy; absent for autoencoder and joint-total rows.
    pub valid_accuracy: Option<f64>,
    pub lr: f64,
}

/// Per-epoch training log.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// CSV rendering: `epoch,component,train_loss,valid_loss,valid_acc,lr`
    /// with an empty accuracy column where none applies.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,component,train_loss,valid_loss,valid_acc,lr\n");
        for r in &self.records {
            let acc = r.valid_accuracy.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                r.component.name(),
                r.train_loss,
                r.valid_loss,
                acc,
                r.lr
            ));
        }
        out
    }
}

/// Classification targets in the form the task's loss consumes.
#[derive(Debug, Clone)]
pub enum TaskTargets {
    /// One-hot rows over every scene class, background included.
    Multi(Matrix),
    /// Zero-based class indices with the background class removed
    /// (scene class c becomes c - 1).
    Single(Vec<usize>),
}

impl TaskTargets {
    pub fn len(&self) -> usize {
        match self {
            TaskTargets::Multi(m) => m.rows(),
            TaskTargets::Single(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> SamplingMode {
        match self {
            TaskTargets::Multi(_) => SamplingMode::Multi,
            TaskTargets::Single(_) => SamplingMode::Single,
        }
    }
}

/// A normalized, split dataset ready to train on.
#[derive(Debug, Clone)]
pub struct TrainData {
    /// One row per patch, z-scored, `pixels * bands` wide.
    pub features: Matrix,
    pub targets: TaskTargets,
    pub train_idx: Vec<usize>,
    pub valid_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl TrainData {
    pub fn validate_for(&self, model: &Model, config: &TrainConfig) -> Result<()> {
        let n = self.features.rows();
        if self.targets.len() != n {
            return Err(Error::Config(format!(
                "{} feature rows but {} targets",
                n,
                self.targets.len()
            )));
        }
        if self.targets.mode() != config.task {
            return Err(Error::Config(format!(
                "targets are {} but the configured task is {}",
                self.targets.mode().name(),
                config.task.name()
            )));
        }
        let expected_width =
            model.meta.patch_size * model.meta.patch_size * model.meta.bands;
        if self.features.cols() != expected_width {
            return Err(Error::Config(format!(
                "feature rows are {} wide but the model expects {expected_width}",
                self.features.cols()
            )));
        }
        match &self.targets {
            TaskTargets::Multi(t) => {
                if t.cols() != model.classifier.output_dim() {
                    return Err(Error::Config(format!(
                        "multi-label targets have {} classes but the classifier outputs {}",
                        t.cols(),
                        model.classifier.output_dim()
                    )));
                }
            }
            TaskTargets::Single(classes) => {
                let out = model.classifier.output_dim();
                if let Some(&bad) = classes.iter().find(|&&c| c >= out) {
                    return Err(Error::Config(format!(
                        "single-label target {bad} out of range for {out} classifier outputs"
                    )));
                }
            }
        }
        if self.train_idx.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        if self.valid_idx.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        for &i in self.train_idx.iter().chain(&self.valid_idx).chain(&self.test_idx) {
            if i >= n {
                return Err(Error::Config(format!(
                    "split index {i} out of range for {n} patches"
                )));
            }
        }
        Ok(())
    }
}

/// Callbacks emitted while training.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    /// One component finished one epoch.
    EpochEnd {
        record: &'a EpochRecord,
        model: &'a Model,
    },
    /// One scheduling block finished (every scheme emits these; cascade has
    /// exactly one per component).
    BlockEnd {
        component: Component,
        model: &'a Model,
    },
}

pub type TrainHook<'h> = dyn FnMut(TrainEvent<'_>) -> Result<()> + 'h;

/// A finished training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
}

/// Trains `model` on `data` under the configured scheme. The model must
/// have been built with a seed; training derives its own dropout and
/// shuffle streams from `config.seed`, so identical inputs give bitwise
/// identical outcomes.
pub fn train(
    config: &TrainConfig,
    data: &TrainData,
    model: Model,
    hook: Option<&mut TrainHook<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate_for(&model, config)?;
    let mut noop = |_: TrainEvent<'_>| Ok(());
    let hook: &mut TrainHook<'_> = match hook {
        Some(h) => h,
        None => &mut noop,
    };
    let mut trainer = Trainer::new(config, model);
    match config.scheme {
        Scheme::Cascade => {
            trainer.run_ae_block(data, config.epochs_ae, hook)?;
            trainer.run_clf_block(data, config.epochs_clf, hook)?;
        }
        Scheme::Iterative => {
            let mut ae_left = config.epochs_ae;
            let mut clf_left = config.epochs_clf;
            while ae_left > 0 || clf_left > 0 {
                let ae_chunk = ae_left.min(config.iterative_block);
                if ae_chunk > 0 {
                    trainer.run_ae_block(data, ae_chunk, hook)?;
                    ae_left -= ae_chunk;
                }
                let clf_chunk = clf_left.min(config.iterative_block);
                if clf_chunk > 0 {
                    trainer.run_clf_block(data, clf_chunk, hook)?;
                    clf_left -= clf_chunk;
                }
            }
        }
        Scheme::Joint => {
            trainer.run_joint(data, config.epochs_clf, hook)?;
        }
    }
    Ok(TrainOutcome {
        model: trainer.model,
        history: trainer.history,
    })
}

struct Trainer {
    model: Model,
    config: TrainConfig,
    adam_ae: Vec<AdamState>,
    adam_clf: Vec<AdamState>,
    sched_ae: StepLrSchedule,
    sched_clf: StepLrSchedule,
    epoch_ae: usize,
    epoch_clf: usize,
    shuffle: RngStream,
    dropout_ae: RngStream,
    dropout_clf: RngStream,
    history: TrainHistory,
}

impl Trainer {
    fn new(config: &TrainConfig, model: Model) -> Trainer {
        let adam_ae = model.autoencoder.layers().map(AdamState::new).collect();
        let adam_clf = model.classifier.layers.iter().map(AdamState::new).collect();
        Trainer {
            adam_ae,
            adam_clf,
            sched_ae: StepLrSchedule::new(config.lr_ae, config.lr_step_ae, config.gamma),
            sched_clf: StepLrSchedule::new(config.lr_clf, config.lr_step_clf, config.gamma),
            epoch_ae: 0,
            epoch_clf: 0,
            shuffle: RngStream::derive(config.seed, stream_labels::SHUFFLE),
            dropout_ae: RngStream::derive(config.seed, stream_labels::DROPOUT_AE),
            dropout_clf: RngStream::derive(config.seed, stream_labels::DROPOUT_CLF),
            history: TrainHistory::default(),
            config: config.clone(),
            model,
        }
    }

    fn shuffled_train_order(&mut self, data: &TrainData) -> Vec<usize> {
        let mut order = data.train_idx.clone();
        self.shuffle.shuffle(&mut order);
        order
    }

    fn finish_epoch(
        &mut self,
        record: EpochRecord,
        hook: &mut TrainHook<'_>,
    ) -> Result<()> {
        self.history.records.push(record);
        let record = self.history.records.last().expect("just pushed");
        hook(TrainEvent::EpochEnd {
            record,
            model: &self.model,
        })
    }

    /// Mean reconstruction loss over a subset, dropout disabled.
    fn eval_mse(&self, data: &TrainData, idx: &[usize]) -> Result<f64> {
        let batch = data.features.gather_rows(idx);
        let mut scratch = RngStream::from_seed(0);
        let cache = ae_forward_cached(&self.model.autoencoder, &batch, false, &mut scratch)?;
        let target = batch
            .clone()
            .reshape(cache.batch_size * cache.pixels, self.model.autoencoder.bands);
        Ok(mse_loss(cache.reconstruction(), &target)?.0)
    }

    /// Classifier loss (task + L2) and accuracy over pre-computed hidden
    /// rows, dropout disabled.
    fn eval_clf(&self, hidden_all: &Matrix, data: &TrainData, idx: &[usize]) -> Result<(f64, f64)> {
        let hidden = hidden_all.gather_rows(idx);
        let mut scratch = RngStream::from_seed(0);
        let logits = classify(&self.model.classifier, &hidden, false, &mut scratch)?;
        let (task, _) = task_loss(&data.targets, &logits, idx)?;
        let l2 = l2_penalty(&self.model.classifier.weight_matrices(), self.config.lambda_l2);
        let accuracy = match &data.targets {
            TaskTargets::Multi(truth) => {
                let pred = predict_multilabel_matrix(&logits);
                multilabel_report(&truth.gather_rows(idx), &pred)?.accuracy
            }
            TaskTargets::Single(classes) => {
                let truth: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
                let pred: Vec<usize> = (0..logits.rows())
                    .map(|i| argmax(logits.row(i)))
                    .collect();
                single_label_report(&truth, &pred, self.model.classifier.output_dim())?
                    .overall_accuracy
            }
        };
        Ok((task + l2, accuracy))
    }

    fn run_ae_block(
        &mut self,
        data: &TrainData,
        epochs: usize,
        hook: &mut TrainHook<'_>,
    ) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        if self.config.reset_adam_between_blocks {
            for s in &mut self.adam_ae {
                s.reset();
            }
        }
        for _ in 0..epochs {
            let lr = self.sched_ae.lr_at(self.epoch_ae);
            let order = self.shuffled_train_order(data);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch = data.features.gather_rows(chunk);
                let cache =
                    ae_forward_cached(&self.model.autoencoder, &batch, true, &mut self.dropout_ae)?;
                let target = batch
                    .clone()
                    .reshape(cache.batch_size * cache.pixels, self.model.autoencoder.bands);
                let (loss, grad_recon) = mse_loss(cache.reconstruction(), &target)?;
                let (grad_hidden, dec_grads) =
                    stack_backward(&self.model.autoencoder.decoder, &cache.decoder, grad_recon)?;
                let (_, enc_grads) =
                    stack_backward(&self.model.autoencoder.encoder, &cache.encoder, grad_hidden)?;
                self.step_autoencoder(&enc_grads, &dec_grads, lr);
                loss_sum += loss * chunk.len() as f64;
            }
            let train_loss = loss_sum / data.train_idx.len() as f64;
            let valid_loss = self.eval_mse(data, &data.valid_idx)?;
            let record = EpochRecord {
                epoch: self.epoch_ae,
                component: Component::Ae,
                train_loss,
                valid_loss,
                valid_accuracy: None,
                lr,
            };
            self.epoch_ae += 1;
            self.finish_epoch(record, hook)?;
        }
        hook(TrainEvent::BlockEnd {
            component: Component::Ae,
            model: &self.model,
        })
    }

    fn run_clf_block(
        &mut self,
        data: &TrainData,
        epochs: usize,
        hook: &mut TrainHook<'_>,
    ) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        if self.config.reset_adam_between_blocks {
            for s in &mut self.adam_clf {
                s.reset();
            }
        }
        // The encoder is frozen for the whole block, so its hidden
        // representations are fixed: compute them once, dropout disabled.
        self.model.autoencoder.set_encoder_trainable(false);
        let mut scratch = RngStream::from_seed(0);
        let (hidden_all, _) =
            ae_forward(&self.model.autoencoder, &data.features, false, &mut scratch)?;
        for _ in 0..epochs {
            let lr = self.sched_clf.lr_at(self.epoch_clf);
            let order = self.shuffled_train_order(data);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let hidden = hidden_all.gather_rows(chunk);
                let cache = classify_cached(
                    &self.model.classifier,
                    &hidden,
                    true,
                    &mut self.dropout_clf,
                )?;
                let (task, grad_logits) = task_loss(&data.targets, cache.output(), chunk)?;
                let l2 =
                    l2_penalty(&self.model.classifier.weight_matrices(), self.config.lambda_l2);
                let (_, mut grads) =
                    stack_backward(&self.model.classifier.layers, &cache, grad_logits)?;
                self.add_l2_grads(&mut grads, self.config.lambda_l2);
                self.step_classifier(&grads, lr);
                loss_sum += (task + l2) * chunk.len() as f64;
            }
            let train_loss = loss_sum / data.train_idx.len() as f64;
            let (valid_loss, valid_accuracy) = self.eval_clf(&hidden_all, data, &data.valid_idx)?;
            let record = EpochRecord {
                epoch: self.epoch_clf,
                component: Component::Clf,
                train_loss,
                valid_loss,
                valid_accuracy: Some(valid_accuracy),
                lr,
            };
            self.epoch_clf += 1;
            self.finish_epoch(record, hook)?;
        }
        self.model.autoencoder.set_encoder_trainable(true);
        hook(TrainEvent::BlockEnd {
            component: Component::Clf,
            model: &self.model,
        })
    }

    fn run_joint(
        &mut self,
        data: &TrainData,
        epochs: usize,
        hook: &mut TrainHook<'_>,
    ) -> Result<()> {
        let (w_ae, w_clf) = (self.config.joint_weight_ae, self.config.joint_weight_clf);
        let pixels = self.model.meta.patch_size * self.model.meta.patch_size;
        for _ in 0..epochs {
            let lr_ae = self.sched_ae.lr_at(self.epoch_ae);
            let lr_clf = self.sched_clf.lr_at(self.epoch_clf);
            let order = self.shuffled_train_order(data);
            let mut mse_sum = 0.0;
            let mut clf_sum = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch = data.features.gather_rows(chunk);
                let ae_cache =
                    ae_forward_cached(&self.model.autoencoder, &batch, true, &mut self.dropout_ae)?;
                let hidden = ae_cache.hidden_per_patch();
                let clf_cache = classify_cached(
                    &self.model.classifier,
                    &hidden,
                    true,
                    &mut self.dropout_clf,
                )?;
                let target = batch
                    .clone()
                    .reshape(ae_cache.batch_size * ae_cache.pixels, self.model.autoencoder.bands);
                let (mse, mut grad_recon) = mse_loss(ae_cache.reconstruction(), &target)?;
                let (task, mut grad_logits) =
                    task_loss(&data.targets, clf_cache.output(), chunk)?;
                let l2 =
                    l2_penalty(&self.model.classifier.weight_matrices(), self.config.lambda_l2);

                // One backward pass over the weighted total
                // w_ae * mse + w_clf * (task + l2).
                grad_logits.scale(w_clf);
                let (grad_hidden_clf, mut clf_grads) =
                    stack_backward(&self.model.classifier.layers, &clf_cache, grad_logits)?;
                self.add_l2_grads(&mut clf_grads, self.config.lambda_l2 * w_clf);
                grad_recon.scale(w_ae);
                let (mut grad_enc_out, dec_grads) =
                    stack_backward(&self.model.autoencoder.decoder, &ae_cache.decoder, grad_recon)?;
                let grad_hidden_clf = grad_hidden_clf
                    .reshape(ae_cache.batch_size * pixels, HIDDEN_CHANNELS);
                grad_enc_out.add_scaled(&grad_hidden_clf, 1.0);
                let (_, enc_grads) = stack_backward(
                    &self.model.autoencoder.encoder,
                    &ae_cache.encoder,
                    grad_enc_out,
                )?;
                self.step_autoencoder(&enc_grads, &dec_grads, lr_ae);
                self.step_classifier(&clf_grads, lr_clf);
                mse_sum += mse * chunk.len() as f64;
                clf_sum += (task + l2) * chunk.len() as f64;
            }
            let n = data.train_idx.len() as f64;
            let (mse_mean, clf_mean) = (mse_sum / n, clf_sum / n);
            let valid_mse = self.eval_mse(data, &data.valid_idx)?;
            let mut scratch = RngStream::from_seed(0);
            let (valid_hidden, _) = ae_forward(
                &self.model.autoencoder,
                &data.features.gather_rows(&data.valid_idx),
                false,
                &mut scratch,
            )?;
            let (valid_clf, valid_accuracy) =
                self.eval_joint_clf(&valid_hidden, data, &data.valid_idx)?;

            let ae_record = EpochRecord {
                epoch: self.epoch_ae,
                component: Component::Ae,
                train_loss: mse_mean,
                valid_loss: valid_mse,
                valid_accuracy: None,
                lr: lr_ae,
            };
            let clf_record = EpochRecord {
                epoch: self.epoch_clf,
                component: Component::Clf,
                train_loss: clf_mean,
                valid_loss: valid_clf,
                valid_accuracy: Some(valid_accuracy),
                lr: lr_clf,
            };
            let joint_record = EpochRecord {
                epoch: self.epoch_clf,
                component: Component::Joint,
                train_loss: w_ae * mse_mean + w_clf * clf_mean,
                valid_loss: w_ae * valid_mse + w_clf * valid_clf,
                valid_accuracy: None,
                lr: lr_clf,
            };
            self.epoch_ae += 1;
            self.epoch_clf += 1;
            self.finish_epoch(ae_record, hook)?;
            self.finish_epoch(clf_record, hook)?;
            self.finish_epoch(joint_record, hook)?;
        }
        hook(TrainEvent::BlockEnd {
            component: Component::Joint,
            model: &self.model,
        })
    }

    /// Like `eval_clf` but over hidden rows already restricted to the
    /// subset (the joint scheme computes them fresh since the encoder
    /// moves every epoch).
    fn eval_joint_clf(
        &self,
        hidden: &Matrix,
        data: &TrainData,
        idx: &[usize],
    ) -> Result<(f64, f64)> {
        let mut scratch = RngStream::from_seed(0);
        let logits = classify(&self.model.classifier, hidden, false, &mut scratch)?;
        let (task, _) = task_loss(&data.targets, &logits, idx)?;
        let l2 = l2_penalty(&self.model.classifier.weight_matrices(), self.config.lambda_l2);
        let accuracy = match &data.targets {
            TaskTargets::Multi(truth) => {
                let pred = predict_multilabel_matrix(&logits);
                multilabel_report(&truth.gather_rows(idx), &pred)?.accuracy
            }
            TaskTargets::Single(classes) => {
                let truth: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
                let pred: Vec<usize> = (0..logits.rows())
                    .map(|i| argmax(logits.row(i)))
                    .collect();
                single_label_report(&truth, &pred, self.model.classifier.output_dim())?
                    .overall_accuracy
            }
        };
        Ok((task + l2, accuracy))
    }

    fn add_l2_grads(&self, grads: &mut [LayerGrads], lambda: f64) {
        for (layer, g) in self.model.classifier.layers.iter().zip(grads) {
            l2_backward(&layer.weights, lambda, &mut g.weights);
        }
    }

    fn step_autoencoder(&mut self, enc_grads: &[LayerGrads], dec_grads: &[LayerGrads], lr: f64) {
        let enc_n = self.model.autoencoder.encoder.len();
        for (i, (layer, g)) in self
            .model
            .autoencoder
            .encoder
            .iter_mut()
            .zip(enc_grads)
            .enumerate()
        {
            adam_step(layer, &g.weights, &g.bias, &mut self.adam_ae[i], lr);
        }
        for (i, (layer, g)) in self
            .model
            .autoencoder
            .decoder
            .iter_mut()
            .zip(dec_grads)
            .enumerate()
        {
            adam_step(layer, &g.weights, &g.bias, &mut self.adam_ae[enc_n + i], lr);
        }
    }

    fn step_classifier(&mut self, grads: &[LayerGrads], lr: f64) {
        for ((layer, g), state) in self
            .model
            .classifier
            .layers
            .iter_mut()
            .zip(grads)
            .zip(&mut self.adam_clf)
        {
            adam_step(layer, &g.weights, &g.bias, state, lr);
        }
    }
}

/// Index of the largest value; the first wins on ties. This is the
/// single-label decision rule applied to a logit row.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Task loss and logit gradient for the subset `idx` of the dataset.
fn task_loss(targets: &TaskTargets, logits: &Matrix, idx: &[usize]) -> Result<(f64, Matrix)> {
    match targets {
        TaskTargets::Multi(t) => {
            bce_with_logits(logits, &t.gather_rows(idx), BceWeights::default())
        }
        TaskTargets::Single(classes) => {
            let subset: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
            cross_entropy(logits, &subset)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelMeta;
    use crate::patch::NormStats;

    const BANDS: usize = 4;
    const PATCH: usize = 3;

    fn toy_config(scheme: Scheme, task: SamplingMode) -> TrainConfig {
        TrainConfig {
            scheme,
            task,
            epochs_ae: 2,
            epochs_clf: 3,
            iterative_block: 2,
            batch_size: 8,
            lr_ae: 1e-2,
            lr_clf: 1e-2,
            lr_step_ae: 2,
            lr_step_clf: 2,
            gamma: 0.9,
            dropout_ae: 0.2,
            dropout_clf: 0.3,
            lambda_l2: 1e-4,
            joint_weight_ae: 1.0,
            joint_weight_clf: 0.3,
            seed: 11,
            reset_adam_between_blocks: false,
        }
    }

    fn toy_model(task: SamplingMode, seed: u64) -> Model {
        let class_count = 3;
        let output_dim = match task {
            SamplingMode::Multi => class_count,
            SamplingMode::Single => class_count - 1,
        };
        let meta = ModelMeta {
            bands: BANDS,
            class_count,
            output_dim,
            task,
            patch_size: PATCH,
            dropout_ae: 0.2,
            dropout_clf: 0.3,
            seed,
            config_hash: "test".into(),
        };
        let norm = NormStats {
            mean: vec![0.0; BANDS],
            std: vec![1.0; BANDS],
        };
        Model::build(meta, norm).unwrap()
    }

    /// Builds n patches in two spectral classes: class 0 pixels ramp up
    /// across bands, class 1 pixels ramp down, plus small per-value noise.
    fn toy_data(task: SamplingMode, n: usize, seed: u64) -> TrainData {
        let width = PATCH * PATCH * BANDS;
        let mut rng = RngStream::from_seed(seed);
        let mut values = Vec::with_capacity(n * width);
        let mut classes = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            classes.push(class);
            for _pixel in 0..PATCH * PATCH {
                for b in 0..BANDS {
                    let ramp = b as f64 / (BANDS - 1) as f64 * 2.0 - 1.0;
                    let base = if class == 0 { ramp } else { -ramp };
                    values.push(base + rng.uniform(-0.05, 0.05));
                }
            }
        }
        let features = Matrix::from_vec(n, width, values);
        let targets = match task {
            SamplingMode::Multi => {
                // Three one-hot columns: background plus the two classes.
                let mut t = Matrix::zeros(n, 3);
                for (i, &c) in classes.iter().enumerate() {
                    t.set(i, c + 1, 1.0);
                }
                TaskTargets::Multi(t)
            }
            SamplingMode::Single => TaskTargets::Single(classes),
        };
        let train_end = n * 8 / 10;
        let valid_end = n * 9 / 10;
        TrainData {
            features,
            targets,
            train_idx: (0..train_end).collect(),
            valid_idx: (train_end..valid_end).collect(),
            test_idx: (valid_end..n).collect(),
        }
    }

    fn run(config: &TrainConfig, data: &TrainData, model_seed: u64) -> TrainOutcome {
        let model = toy_model(config.task, model_seed);
        train(config, data, model, None).unwrap()
    }

    #[test]
    fn cascade_matches_iterative_with_covering_block() {
        // With the block at least as long as the autoencoder budget, the
        // iterative schedule degenerates to cascade: one full autoencoder
        // phase, then classifier blocks back to back. Back-to-back
        // classifier blocks are equivalent to one long block because the
        // frozen encoder yields the same hidden features and the optimizer
        // state carries over.
        let data = toy_data(SamplingMode::Multi, 30, 5);
        let mut cascade_cfg = toy_config(Scheme::Cascade, SamplingMode::Multi);
        cascade_cfg.epochs_ae = 2;
        cascade_cfg.epochs_clf = 5;
        let mut iter_cfg = cascade_cfg.clone();
        iter_cfg.scheme = Scheme::Iterative;
        iter_cfg.iterative_block = 2; // >= epochs_ae, < epochs_clf

        let cascade = run(&cascade_cfg, &data, 7);
        let iterative = run(&iter_cfg, &data, 7);
        assert_eq!(cascade.model.flatten_params(), iterative.model.flatten_params());
        assert_eq!(cascade.history.to_csv(), iterative.history.to_csv());

        // A block longer than both budgets degenerates the same way.
        let mut wide_cfg = iter_cfg.clone();
        wide_cfg.iterative_block = 100;
        let wide = run(&wide_cfg, &data, 7);
        assert_eq!(cascade.model.flatten_params(), wide.model.flatten_params());
        assert_eq!(cascade.history.to_csv(), wide.history.to_csv());
    }

    #[test]
    fn iterative_blocks_follow_the_schedule() {
        let data = toy_data(SamplingMode::Multi, 20, 3);
        let mut cfg = toy_config(Scheme::Iterative, SamplingMode::Multi);
        cfg.epochs_ae = 9;
        cfg.epochs_clf = 6;
        cfg.iterative_block = 4;
        let out = run(&cfg, &data, 1);
        let runs: Vec<(Component, usize)> = {
            let mut runs: Vec<(Component, usize)> = Vec::new();
            for r in &out.history.records {
                match runs.last_mut() {
                    Some((c, len)) if *c == r.component => *len += 1,
                    _ => runs.push((r.component, 1)),
                }
            }
            runs
        };
        assert_eq!(
            runs,
            vec![
                (Component::Ae, 4),
                (Component::Clf, 4),
                (Component::Ae, 4),
                (Component::Clf, 2),
                (Component::Ae, 1),
            ]
        );
        // Epoch numbering continues across blocks, per component.
        let ae_epochs: Vec<usize> = out
            .history
            .records
            .iter()
            .filter(|r| r.component == Component::Ae)
            .map(|r| r.epoch)
            .collect();
        assert_eq!(ae_epochs, (0..9).collect::<Vec<_>>());
        let clf_epochs: Vec<usize> = out
            .history
            .records
            .iter()
            .filter(|r| r.component == Component::Clf)
            .map(|r| r.epoch)
            .collect();
        assert_eq!(clf_epochs, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn encoder_stays_bitwise_frozen_during_classifier_epochs() {
        let data = toy_data(SamplingMode::Multi, 20, 9);
        let cfg = toy_config(Scheme::Cascade, SamplingMode::Multi);
        let model = toy_model(SamplingMode::Multi, 2);

        let mut frozen_encoder: Option<Vec<f64>> = None;
        let mut clf_epochs_seen = 0usize;
        let mut hook = |event: TrainEvent<'_>| -> Result<()> {
            match event {
                TrainEvent::BlockEnd {
                    component: Component::Ae,
                    model,
                } => {
                    frozen_encoder =
                        Some(crate::model::flatten_layer_params(model.autoencoder.encoder.iter()));
                }
                TrainEvent::EpochEnd { record, model } if record.component == Component::Clf => {
                    clf_epochs_seen += 1;
                    let now =
                        crate::model::flatten_layer_params(model.autoencoder.encoder.iter());
                    assert_eq!(
                        frozen_encoder.as_ref().expect("ae block finished first"),
                        &now,
                        "encoder moved during a classifier epoch"
                    );
                }
                _ => {}
            }
            Ok(())
        };
        train(&cfg, &data, model, Some(&mut hook)).unwrap();
        assert_eq!(clf_epochs_seen, cfg.epochs_clf);
    }

    #[test]
    fn training_is_deterministic_and_seed_sensitive() {
        let data = toy_data(SamplingMode::Multi, 24, 4);
        for scheme in Scheme::ALL {
            let cfg = toy_config(scheme, SamplingMode::Multi);
            let a = run(&cfg, &data, 3);
            let b = run(&cfg, &data, 3);
            assert_eq!(a.model.flatten_params(), b.model.flatten_params());
            assert_eq!(a.history.to_csv(), b.history.to_csv());

            let mut other = cfg.clone();
            other.seed ^= 0xdead_beef;
            let c = run(&other, &data, 3);
            assert_ne!(
                a.model.flatten_params(),
                c.model.flatten_params(),
                "{} run ignored the training seed",
                scheme.name()
            );
        }
    }

    #[test]
    fn joint_history_decomposes_exactly() {
        let data = toy_data(SamplingMode::Multi, 24, 8);
        let mut cfg = toy_config(Scheme::Joint, SamplingMode::Multi);
        cfg.epochs_clf = 4;
        let out = run(&cfg, &data, 5);
        assert_eq!(out.history.records.len(), 3 * cfg.epochs_clf);
        for triple in out.history.records.chunks(3) {
            let (ae, clf, joint) = (&triple[0], &triple[1], &triple[2]);
            assert_eq!(ae.component, Component::Ae);
            assert_eq!(clf.component, Component::Clf);
            assert_eq!(joint.component, Component::Joint);
            assert_eq!(ae.epoch, joint.epoch);
            assert_eq!(clf.epoch, joint.epoch);
            assert_eq!(
                joint.train_loss,
                cfg.joint_weight_ae * ae.train_loss + cfg.joint_weight_clf * clf.train_loss
            );
            assert_eq!(
                joint.valid_loss,
                cfg.joint_weight_ae * ae.valid_loss + cfg.joint_weight_clf * clf.valid_loss
            );
            assert!(ae.valid_accuracy.is_none());
            assert!(clf.valid_accuracy.is_some());
            assert!(joint.valid_accuracy.is_none());
            assert_eq!(ae.lr, cfg.lr_ae * cfg.gamma.powi((ae.epoch / cfg.lr_step_ae) as i32));
            assert_eq!(joint.lr, clf.lr);
        }
    }

    #[test]
    fn joint_with_zero_classifier_weight_reduces_to_autoencoder_training() {
        let data = toy_data(SamplingMode::Multi, 24, 6);
        let mut joint_cfg = toy_config(Scheme::Joint, SamplingMode::Multi);
        joint_cfg.epochs_clf = 3;
        joint_cfg.joint_weight_ae = 1.0;
        joint_cfg.joint_weight_clf = 0.0;
        let joint_out = run(&joint_cfg, &data, 13);

        // A cascade run with the same seed spends its autoencoder budget
        // identically; capture the autoencoder right after that phase.
        let mut cascade_cfg = joint_cfg.clone();
        cascade_cfg.scheme = Scheme::Cascade;
        cascade_cfg.epochs_ae = 3;
        cascade_cfg.epochs_clf = 1;
        let model = toy_model(SamplingMode::Multi, 13);
        let mut ae_params: Option<Vec<f64>> = None;
        let mut hook = |event: TrainEvent<'_>| -> Result<()> {
            if let TrainEvent::BlockEnd {
                component: Component::Ae,
                model,
            } = event
            {
                ae_params = Some(model.autoencoder.flatten_params());
            }
            Ok(())
        };
        train(&cascade_cfg, &data, model, Some(&mut hook)).unwrap();
        assert_eq!(
            ae_params.expect("cascade emitted an autoencoder block"),
            joint_out.model.autoencoder.flatten_params(),
            "a zero classification weight must leave the autoencoder path untouched"
        );
    }

    #[test]
    fn learning_rates_follow_the_step_schedule() {
        let data = toy_data(SamplingMode::Multi, 20, 2);
        let mut cfg = toy_config(Scheme::Cascade, SamplingMode::Multi);
        cfg.epochs_ae = 5;
        cfg.epochs_clf = 5;
        cfg.lr_step_ae = 2;
        cfg.lr_step_clf = 3;
        cfg.gamma = 0.5;
        let out = run(&cfg, &data, 21);
        for r in &out.history.records {
            let (base, step) = match r.component {
                Component::Ae => (cfg.lr_ae, cfg.lr_step_ae),
                Component::Clf => (cfg.lr_clf, cfg.lr_step_clf),
                Component::Joint => unreachable!("cascade emits no joint rows"),
            };
            assert_eq!(r.lr, base * cfg.gamma.powi((r.epoch / step) as i32));
        }
    }

    #[test]
    fn losses_fall_on_learnable_data() {
        let data = toy_data(SamplingMode::Multi, 40, 17);
        let mut cfg = toy_config(Scheme::Cascade, SamplingMode::Multi);
        cfg.epochs_ae = 8;
        cfg.epochs_clf = 12;
        let out = run(&cfg, &data, 31);
        let ae_rows: Vec<&EpochRecord> = out
            .history
            .records
            .iter()
            .filter(|r| r.component == Component::Ae)
            .collect();
        assert!(
            ae_rows.last().unwrap().train_loss < ae_rows[0].train_loss,
            "reconstruction loss did not fall: {} -> {}",
            ae_rows[0].train_loss,
            ae_rows.last().unwrap().train_loss
        );
        let final_acc = out
            .history
            .records
            .iter()
            .rev()
            .find(|r| r.component == Component::Clf)
            .and_then(|r| r.valid_accuracy)
            .unwrap();
        assert!(
            final_acc >= 0.8,
            "two cleanly separated classes should validate above 80%, got {final_acc}"
        );
    }

    #[test]
    fn single_label_training_runs_all_schemes() {
        let data = toy_data(SamplingMode::Single, 24, 12);
        for scheme in Scheme::ALL {
            let cfg = toy_config(scheme, SamplingMode::Single);
            let out = run(&cfg, &data, 19);
            assert!(out.model.flatten_params().iter().all(|p| p.is_finite()));
            for r in &out.history.records {
                assert!(r.train_loss.is_finite());
                assert!(r.valid_loss.is_finite());
                if r.component == Component::Clf {
                    let acc = r.valid_accuracy.unwrap();
                    assert!((0.0..=1.0).contains(&acc));
                }
            }
        }
    }

    #[test]
    fn history_csv_layout() {
        let data = toy_data(SamplingMode::Multi, 20, 1);
        let mut cfg = toy_config(Scheme::Cascade, SamplingMode::Multi);
        cfg.epochs_ae = 1;
        cfg.epochs_clf = 1;
        let out = run(&cfg, &data, 1);
        let csv = out.history.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,component,train_loss,valid_loss,valid_acc,lr");
        assert_eq!(lines.len(), 3);
        let ae_cols: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(ae_cols.len(), 6);
        assert_eq!(ae_cols[0], "0");
        assert_eq!(ae_cols[1], "ae");
        assert!(ae_cols[4].is_empty(), "autoencoder rows carry no accuracy");
        let clf_cols: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(clf_cols[1], "clf");
        assert!(clf_cols[4].parse::<f64>().is_ok());
    }

    #[test]
    fn hook_errors_abort_training() {
        let data = toy_data(SamplingMode::Multi, 20, 1);
        let cfg = toy_config(Scheme::Cascade, SamplingMode::Multi);
        let model = toy_model(SamplingMode::Multi, 1);
        let mut calls = 0usize;
        let mut hook = |_: TrainEvent<'_>| -> Result<()> {
            calls += 1;
            Err(Error::Config("stop".into()))
        };
        let err = train(&cfg, &data, model, Some(&mut hook)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(calls, 1);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let base = toy_config(Scheme::Cascade, SamplingMode::Multi);
        type Mutator = Box<dyn Fn(&mut TrainConfig)>;
        let cases: Vec<(&str, Mutator)> = vec![
            ("epochs_ae", Box::new(|c| c.epochs_ae = 0)),
            ("epochs_clf", Box::new(|c| c.epochs_clf = 0)),
            ("iterative_block", Box::new(|c| c.iterative_block = 0)),
            ("batch_size", Box::new(|c| c.batch_size = 0)),
            ("lr_step_ae", Box::new(|c| c.lr_step_ae = 0)),
            ("lr_step_clf", Box::new(|c| c.lr_step_clf = 0)),
            ("lr_ae", Box::new(|c| c.lr_ae = 0.0)),
            ("lr_clf", Box::new(|c| c.lr_clf = -1.0)),
            ("gamma zero", Box::new(|c| c.gamma = 0.0)),
            ("gamma above one", Box::new(|c| c.gamma = 1.01)),
            ("dropout_ae", Box::new(|c| c.dropout_ae = 1.0)),
            ("dropout_clf", Box::new(|c| c.dropout_clf = -0.1)),
            ("lambda_l2", Box::new(|c| c.lambda_l2 = -1e-4)),
            (
                "joint weights both zero",
                Box::new(|c| {
                    c.scheme = Scheme::Joint;
                    c.joint_weight_ae = 0.0;
                    c.joint_weight_clf = 0.0;
                }),
            ),
        ];
        for (name, mutate) in cases {
            let mut cfg = base.clone();
            mutate(&mut cfg);
            assert!(
                matches!(cfg.validate(), Err(Error::Config(_))),
                "{name} should fail validation"
            );
        }
        assert!(base.validate().is_ok());
        assert!("nonsense".parse::<Scheme>().is_err());
        assert_eq!("joint".parse::<Scheme>().unwrap(), Scheme::Joint);
    }

    #[test]
    fn data_validation_rejects_mismatches() {
        let cfg = toy_config(Scheme::Cascade, SamplingMode::Multi);
        let model = toy_model(SamplingMode::Multi, 1);
        let good = toy_data(SamplingMode::Multi, 20, 1);
        assert!(good.validate_for(&model, &cfg).is_ok());

        let mut short_targets = good.clone();
        short_targets.targets = TaskTargets::Multi(Matrix::zeros(5, 3));
        assert!(short_targets.validate_for(&model, &cfg).is_err());

        let mut wrong_mode = good.clone();
        wrong_mode.targets = TaskTargets::Single(vec![0; 20]);
        assert!(wrong_mode.validate_for(&model, &cfg).is_err());

        let mut no_train = good.clone();
        no_train.train_idx.clear();
        assert!(no_train.validate_for(&model, &cfg).is_err());

        let mut oob = good.clone();
        oob.test_idx.push(99);
        assert!(oob.validate_for(&model, &cfg).is_err());

        let single_cfg = toy_config(Scheme::Cascade, SamplingMode::Single);
        let single_model = toy_model(SamplingMode::Single, 1);
        let mut bad_class = toy_data(SamplingMode::Single, 20, 1);
        if let TaskTargets::Single(v) = &mut bad_class.targets {
            v[0] = 2; // classifier outputs only 2 classes: 0 and 1
        }
        assert!(bad_class.validate_for(&single_model, &single_cfg).is_err());
    }

    #[test]
    fn presets_match_published_values() {
        for name in ["paviau-multi", "salinas-multi", "paviau-single", "salinas-single"] {
            for scheme in Scheme::ALL {
                let cfg = TrainConfig::preset(name, scheme).unwrap();
                cfg.validate().unwrap();
                assert_eq!(cfg.epochs_ae, 95);
                assert_eq!(cfg.gamma, 0.9);
                assert_eq!(cfg.dropout_ae, 0.3);
                assert_eq!(cfg.dropout_clf, 0.6);
                assert_eq!(cfg.iterative_block, 20);
                assert_eq!(cfg.joint_weight_ae, 1.0);
                assert_eq!(cfg.joint_weight_clf, 0.3);
            }
        }

        let pm_iter = TrainConfig::preset("paviau-multi", Scheme::Iterative).unwrap();
        assert_eq!(pm_iter.batch_size, 200);
        assert_eq!(pm_iter.epochs_clf, 200);
        assert_eq!(pm_iter.lr_clf, 1e-2);
        assert_eq!(pm_iter.lr_step_ae, 10);
        assert_eq!(pm_iter.lr_step_clf, 15);
        assert_eq!(pm_iter.lambda_l2, 1e-4);
        let pm_casc = TrainConfig::preset("paviau-multi", Scheme::Cascade).unwrap();
        assert_eq!(pm_casc.lr_step_ae, 15);

        let sm_casc = TrainConfig::preset("salinas-multi", Scheme::Cascade).unwrap();
        assert_eq!(sm_casc.batch_size, 130);
        assert_eq!(sm_casc.epochs_clf, 240);
        assert_eq!(sm_casc.lr_clf, 1e-5);
        let sm_joint = TrainConfig::preset("salinas-multi", Scheme::Joint).unwrap();
        assert_eq!(sm_joint.lr_clf, 1e-3);
        assert_eq!(sm_joint.lr_step_ae, 20);

        let ps_joint = TrainConfig::preset("paviau-single", Scheme::Joint).unwrap();
        assert_eq!(ps_joint.batch_size, 164);
        assert_eq!(ps_joint.epochs_clf, 200);
        assert_eq!(ps_joint.lambda_l2, 1e-3);
        let ps_iter = TrainConfig::preset("paviau-single", Scheme::Iterative).unwrap();
        assert_eq!(ps_iter.batch_size, 240);
        assert_eq!(ps_iter.epochs_clf, 260);
        assert_eq!(ps_iter.lambda_l2, 9e-4);
        let ps_casc = TrainConfig::preset("paviau-single", Scheme::Cascade).unwrap();
        assert_eq!(ps_casc.batch_size, 100);
        assert_eq!(ps_casc.lr_clf, 1e-5);

        let ss_iter = TrainConfig::preset("salinas-single", Scheme::Iterative).unwrap();
        assert_eq!(ss_iter.batch_size, 240);
        assert_eq!(ss_iter.lr_ae, 1e-3);
        assert_eq!(ss_iter.lambda_l2, 9e-4);
        let ss_joint = TrainConfig::preset("salinas-single", Scheme::Joint).unwrap();
        assert_eq!(ss_joint.batch_size, 200);
        assert_eq!(ss_joint.lambda_l2, 7e-4);

        assert!(TrainConfig::preset("unknown", Scheme::Joint).is_err());
    }
}
