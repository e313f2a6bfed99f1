//! Mini-batch optimization, pixel metrics, and small-budget fine-tuning.
//!
//! [`train`] runs deterministic mini-batch gradient descent over a chip
//! set, evaluates on a validation set each epoch, and returns the model
//! snapshot with the best damaged-class F1 together with the full
//! [`History`]. [`finetune`] reuses the same loop at a tenth of the
//! learning rate for adapting a trained model to a new area with a handful
//! of freshly annotated chips, optionally freezing the encoder weights.
//!
//! Metrics follow the pixel-confusion convention: per-class precision,
//! recall, F1, and IoU, with the degenerate case of a class absent from
//! both truth and prediction scored 1.0 (correct absence).

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{class_weights, Chip, ChipSet, DatasetError};
use crate::net::{self, Gradients, Model, NetError, Tensor};
use crate::parallel;

/// Errors from training, evaluation, and fine-tuning.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} must not be empty")]
    EmptyChipSet(&'static str),
    #[error("chips must share one size, found both {first} and {other}")]
    MixedChipSizes { first: usize, other: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// First-order optimizer choice and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    SgdMomentum { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Hyperparameters for [`train`] and [`finetune`].
///
/// `class_weights` of `None` means inverse-frequency weights derived from
/// the training chips. `checkpoint_path`, when set, receives the
/// best-so-far weights every time validation F1 (damaged class) improves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: Optimizer,
    pub class_weights: Option<[f32; 3]>,
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            class_weights: None,
            seed: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: a short budget, otherwise like training.
    pub fn finetune_default() -> Self {
        TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        }
    }

    fn validate(&self, allow_zero_epochs: bool) -> Result<(), TrainError> {
        if self.epochs == 0 && !allow_zero_epochs {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(w) = self.class_weights {
            if !w.iter().all(|&v| v.is_finite() && v > 0.0) {
                return Err(TrainError::InvalidConfig(format!(
                    "class_weights must be finite and positive, got {w:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Pixel confusion counts over three classes with the derived per-class
/// scores. Indexing is `confusion[truth][predicted]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Metrics {
    confusion: [[u64; 3]; 3],
}

impl Metrics {
    pub fn new() -> Metrics {
        Metrics::default()
    }

    pub fn record(&mut self, truth: u8, predicted: u8) {
        self.confusion[truth as usize][predicted as usize] += 1;
    }

    pub fn merge(&mut self, other: &Metrics) {
        for t in 0..3 {
            for p in 0..3 {
                self.confusion[t][p] += other.confusion[t][p];
            }
        }
    }

    pub fn confusion(&self) -> &[[u64; 3]; 3] {
        &self.confusion
    }

    pub fn true_positives(&self, class: u8) -> u64 {
        self.confusion[class as usize][class as usize]
    }

    pub fn false_positives(&self, class: u8) -> u64 {
        let c = class as usize;
        (0..3).filter(|&t| t != c).map(|t| self.confusion[t][c]).sum()
    }

    pub fn false_negatives(&self, class: u8) -> u64 {
        let c = class as usize;
        (0..3).filter(|&p| p != c).map(|p| self.confusion[c][p]).sum()
    }

    /// `tp / (tp + fp)`; with no predictions of the class, 1.0 when the
    /// class is also absent from the truth, else 0.0.
    pub fn precision(&self, class: u8) -> f64 {
        let (tp, fp) = (self.true_positives(class), self.false_positives(class));
        if tp + fp == 0 {
            return if self.false_negatives(class) == 0 { 1.0 } else { 0.0 };
        }
        tp as f64 / (tp + fp) as f64
    }

    /// `tp / (tp + fn)`; with the class absent from the truth, 1.0 when it
    /// was never predicted, else 0.0.
    pub fn recall(&self, class: u8) -> f64 {
        let (tp, fnn) = (self.true_positives(class), self.false_negatives(class));
        if tp + fnn == 0 {
            return if self.false_positives(class) == 0 { 1.0 } else { 0.0 };
        }
        tp as f64 / (tp + fnn) as f64
    }

    /// Harmonic mean of precision and recall. A class absent from both
    /// truth and prediction scores 1.0 (correct absence).
    pub fn f1(&self, class: u8) -> f64 {
        let (p, r) = (self.precision(class), self.recall(class));
        if p + r == 0.0 {
            return 0.0;
        }
        2.0 * p * r / (p + r)
    }

    /// `tp / (tp + fp + fn)`, 1.0 when the class appears nowhere.
    pub fn iou(&self, class: u8) -> f64 {
        let denom =
            self.true_positives(class) + self.false_positives(class) + self.false_negatives(class);
        if denom == 0 {
            return 1.0;
        }
        self.true_positives(class) as f64 / denom as f64
    }

    /// Overall pixel accuracy; 1.0 for an empty tally.
    pub fn accuracy(&self) -> f64 {
        let total: u64 = self.confusion.iter().flatten().sum();
        if total == 0 {
            return 1.0;
        }
        let hits: u64 = (0..3).map(|c| self.confusion[c][c]).sum();
        hits as f64 / total as f64
    }
}

/// One completed epoch: mean training loss, validation F1 for both building
/// classes, and wall-clock duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1_damaged: f64,
    pub val_f1_intact: f64,
    pub wall_seconds: f64,
}

/// Per-epoch training records, in epoch order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// True when losses and validation scores match epoch for epoch
    /// (wall-clock seconds excluded — they are not deterministic).
    pub fn same_trajectory(&self, other: &History) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss == b.train_loss
                    && a.val_f1_damaged == b.val_f1_damaged
                    && a.val_f1_intact == b.val_f1_intact
            })
    }

    /// Serializes as CSV: `epoch,train_loss,val_f1_damaged,val_f1_intact,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_f1_damaged,val_f1_intact,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                r.epoch, r.train_loss, r.val_f1_damaged, r.val_f1_intact, r.wall_seconds
            ));
        }
        out
    }
}

/// Optimizer state: one slot pair (weights, bias) per layer, in layer order.
struct OptState {
    /// Adam first moment or SGD velocity.
    m: Vec<(Vec<f32>, Vec<f32>)>,
    /// Adam second moment (unused for SGD).
    v: Vec<(Vec<f32>, Vec<f32>)>,
    /// Update step counter for Adam bias correction.
    t: u64,
}

impl OptState {
    fn for_model(model: &Model) -> OptState {
        let zeros = |model: &Model| -> Vec<(Vec<f32>, Vec<f32>)> {
            model
                .layer_names()
                .iter()
                .map(|name| {
                    let (w, b) = model.layer_params(name).expect("layer exists");
                    (vec![0.0; w.len()], vec![0.0; b.len()])
                })
                .collect()
        };
        OptState {
            m: zeros(model),
            v: zeros(model),
            t: 0,
        }
    }
}

fn apply_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    optimizer: Optimizer,
    lr: f32,
    t: u64,
) {
    match optimizer {
        Optimizer::SgdMomentum { momentum } => {
            for i in 0..param.len() {
                m[i] = momentum * m[i] + grad[i];
                param[i] -= lr * m[i];
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            for i in 0..param.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn optimizer_step(
    model: &mut Model,
    grads: &Gradients,
    state: &mut OptState,
    cfg: &TrainConfig,
    lr: f32,
    update_layer: &dyn Fn(&str) -> bool,
) {
    state.t += 1;
    let names: Vec<String> = model.layer_names().iter().map(|s| s.to_string()).collect();
    for (li, name) in names.iter().enumerate() {
        if !update_layer(name) {
            continue;
        }
        let lg = &grads.by_layer[name];
        let (w, b) = model.layer_params_mut(name).expect("layer exists");
        let (mw, mb) = {
            let pair = &mut state.m[li];
            (&mut pair.0, &mut pair.1)
        };
        let (vw, vb) = {
            let pair = &mut state.v[li];
            (&mut pair.0, &mut pair.1)
        };
        apply_update(w.data_mut(), lg.dw.data(), mw, vw, cfg.optimizer, lr, state.t);
        apply_update(b.data_mut(), lg.db.data(), mb, vb, cfg.optimizer, lr, state.t);
    }
}

/// Chip size shared by every chip in the given sets.
fn uniform_chip_size(sets: &[&ChipSet]) -> Result<usize, TrainError> {
    let mut size = None;
    for set in sets {
        for chip in &set.chips {
            match size {
                None => size = Some(chip.size()),
                Some(s) if s != chip.size() => {
                    return Err(TrainError::MixedChipSizes {
                        first: s,
                        other: chip.size(),
                    })
                }
                _ => {}
            }
        }
    }
    size.ok_or(TrainError::EmptyChipSet("chip set"))
}

/// Stacks chips into batch tensors: pre `[n,3,h,w]`, post `[n,3,h,w]`, and
/// flat targets of length `n*h*w`.
fn stack_batch(chips: &[&Chip]) -> (Tensor, Tensor, Vec<u8>) {
    let n = chips.len();
    let size = chips[0].size();
    let plane = 3 * size * size;
    let mut pre = Vec::with_capacity(n * plane);
    let mut post = Vec::with_capacity(n * plane);
    let mut targets = Vec::with_capacity(n * size * size);
    for chip in chips {
        pre.extend_from_slice(chip.pre_patch.data());
        post.extend_from_slice(chip.post_patch.data());
        targets.extend_from_slice(&chip.mask_patch);
    }
    (
        Tensor::from_vec(&[n, 3, size, size], pre),
        Tensor::from_vec(&[n, 3, size, size], post),
        targets,
    )
}

/// Computes pixel confusion of the model's argmax predictions against the
/// chips' masks. Read-only on the model; chips are evaluated in parallel
/// when a thread pool is configured, with a deterministic merge order.
pub fn evaluate(model: &Model, cs: &ChipSet) -> Result<Metrics, TrainError> {
    if cs.is_empty() {
        return Err(TrainError::EmptyChipSet("evaluation chip set"));
    }
    let per_chip: Vec<Result<Metrics, NetError>> =
        parallel::map_indexed(cs.len(), |i| {
            let chip = &cs.chips[i];
            let size = chip.size();
            let pre = Tensor::from_vec(&[1, 3, size, size], chip.pre_patch.data().to_vec());
            let post = Tensor::from_vec(&[1, 3, size, size], chip.post_patch.data().to_vec());
            let logits = model.predict(&pre, &post)?;
            let classes = net::argmax_classes(&logits);
            let mut m = Metrics::new();
            for (&truth, &pred) in chip.mask_patch.iter().zip(&classes) {
                m.record(truth, pred);
            }
            Ok(m)
        });
    let mut total = Metrics::new();
    for m in per_chip {
        total.merge(&m?);
    }
    Ok(total)
}

fn snapshot_params(model: &Model) -> Vec<(Tensor, Tensor)> {
    model
        .layer_names()
        .iter()
        .map(|name| {
            let (w, b) = model.layer_params(name).expect("layer exists");
            (w.clone(), b.clone())
        })
        .collect()
}

fn restore_params(model: &mut Model, params: &[(Tensor, Tensor)]) {
    let names: Vec<String> = model.layer_names().iter().map(|s| s.to_string()).collect();
    for (name, (sw, sb)) in names.iter().zip(params) {
        let (w, b) = model.layer_params_mut(name).expect("layer exists");
        w.data_mut().copy_from_slice(sw.data());
        b.data_mut().copy_from_slice(sb.data());
    }
}

fn run_training(
    mut model: Model,
    train_cs: &ChipSet,
    val_cs: &ChipSet,
    cfg: &TrainConfig,
    lr: f32,
    update_layer: &dyn Fn(&str) -> bool,
) -> Result<(Model, History), TrainError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if train_cs.is_empty() {
        return Err(TrainError::EmptyChipSet("training chip set"));
    }
    if val_cs.is_empty() {
        return Err(TrainError::EmptyChipSet("validation chip set"));
    }
    uniform_chip_size(&[train_cs, val_cs])?;

    let weights = match cfg.class_weights {
        Some(w) => w,
        None => class_weights(train_cs)?,
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptState::for_model(&model);
    let mut history = History::default();
    let mut best: Option<(f64, Vec<(Tensor, Tensor)>)> = None;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_cs.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut chip_count = 0usize;
        for (step, batch_indices) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Chip> = batch_indices.iter().map(|&i| &train_cs.chips[i]).collect();
            let (pre, post, targets) = stack_batch(&batch);
            let logits = model.forward(&pre, &post, true)?;
            let (loss, dlogits) = net::softmax_cross_entropy(&logits, &targets, &weights)?;
            if !loss.is_finite() {
                // The best checkpoint written so far stays on disk.
                return Err(TrainError::Diverged {
                    epoch,
                    step: step + 1,
                });
            }
            let grads = model.backward(&dlogits)?;
            optimizer_step(&mut model, &grads, &mut state, cfg, lr, update_layer);
            loss_sum += loss * batch.len() as f64;
            chip_count += batch.len();
        }

        let metrics = evaluate(&model, val_cs)?;
        let (f1_damaged, f1_intact) = (metrics.f1(2), metrics.f1(1));
        if best.as_ref().is_none_or(|(b, _)| f1_damaged > *b) {
            best = Some((f1_damaged, snapshot_params(&model)));
            if let Some(path) = &cfg.checkpoint_path {
                net::save_weights(&model, path)?;
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / chip_count as f64,
            val_f1_damaged: f1_damaged,
            val_f1_intact: f1_intact,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }

    if let Some((_, params)) = &best {
        restore_params(&mut model, params);
        // The checkpoint file already holds exactly these parameters.
    }
    Ok((model, history))
}

/// Trains `model` on `train_cs`, validating each epoch on `val_cs`, and
/// returns the snapshot with the best damaged-class validation F1 plus the
/// full history. Deterministic for a given seed, config, and data.
pub fn train(
    model: Model,
    train_cs: &ChipSet,
    val_cs: &ChipSet,
    cfg: &TrainConfig,
) -> Result<(Model, History), TrainError> {
    cfg.validate(false)?;
    run_training(model, train_cs, val_cs, cfg, cfg.learning_rate, &|_| true)
}

/// Continues training a fitted model on a small newly annotated chip set at
/// a tenth of the configured learning rate. With `freeze_encoders` the
/// encoder parameters stay bit-identical and only the bottleneck, decoder,
/// and head adapt. The small set doubles as the validation set for best-F1
/// selection, since a separate hold-out rarely exists for fresh markup.
/// Zero epochs is allowed and returns the model unchanged.
pub fn finetune(
    model: Model,
    small_cs: &ChipSet,
    cfg: &TrainConfig,
    freeze_encoders: bool,
) -> Result<(Model, History), TrainError> {
    cfg.validate(true)?;
    if cfg.epochs == 0 {
        return Ok((model, History::default()));
    }
    let update = move |name: &str| !(freeze_encoders && name.starts_with("enc"));
    run_training(
        model,
        small_cs,
        small_cs,
        cfg,
        cfg.learning_rate * 0.1,
        &update,
    )
}
