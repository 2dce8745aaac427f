//! Teacher, baseline-student and privileged-information student training.
//!
//! The PI student minimizes
//! `alpha * CE(S(x), y) + (1 - alpha) * CE(S(x), T(x_bar))` where `T` is a
//! frozen teacher evaluated on the enhanced twin of each raw patch.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{EnhancedPatch, PatchRecord};
use crate::error::{Error, Result};
use crate::evaluation::{f1_score, predict_masks, F1Mode};
use crate::imaging::MaskImage;
use crate::nn::{BnMode, Precision, Scalar, Tape, Tensor, Var};
use crate::unet::{UNetConfig, UNetModel, DEPTH};

/// Something a UNet can consume: a `C x H x W` input and its ground truth.
pub trait ModelInput: Sync {
    fn channels(&self) -> usize;
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    /// Appends the planar `C x H x W` input.
    fn write_input(&self, out: &mut Vec<f64>);
    fn mask(&self) -> &MaskImage;
}

impl ModelInput for PatchRecord {
    fn channels(&self) -> usize {
        1
    }
    fn width(&self) -> usize {
        self.image.width()
    }
    fn height(&self) -> usize {
        self.image.height()
    }
    fn write_input(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.image.data());
    }
    fn mask(&self) -> &MaskImage {
        &self.mask
    }
}

impl ModelInput for EnhancedPatch {
    fn channels(&self) -> usize {
        3
    }
    fn width(&self) -> usize {
        self.mask.width()
    }
    fn height(&self) -> usize {
        self.mask.height()
    }
    fn write_input(&self, out: &mut Vec<f64>) {
        for c in &self.channels {
            out.extend_from_slice(c.data());
        }
    }
    fn mask(&self) -> &MaskImage {
        &self.mask
    }
}

/// Stacks `samples[idx]` into an `[N, C, H, W]` tensor.
pub fn batch_input<T: Scalar, S: ModelInput>(samples: &[S], idx: &[usize]) -> Result<Tensor<T>> {
    let first = &samples[idx[0]];
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(idx.len() * c * h * w);
    for &i in idx {
        let s = &samples[i];
        if (s.channels(), s.height(), s.width()) != (c, h, w) {
            return Err(Error::arg(format!(
                "sample {i} is {}x{}x{}, batch expects {c}x{h}x{w}",
                s.channels(),
                s.height(),
                s.width()
            )));
        }
        s.write_input(&mut data);
    }
    Tensor::from_f64(vec![idx.len(), c, h, w], &data)
}

/// One-hot `[N, 2, H, W]` targets, class order `[healthy, tumor]`.
pub fn one_hot<T: Scalar>(masks: &[&MaskImage]) -> Result<Tensor<T>> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let hw = h * w;
    let mut data = vec![T::zero(); masks.len() * 2 * hw];
    for (b, m) in masks.iter().enumerate() {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::arg("masks in a batch differ in size"));
        }
        for (p, &l) in m.labels().iter().enumerate() {
            data[b * 2 * hw + usize::from(l != 0) * hw + p] = T::one();
        }
    }
    Tensor::new(vec![masks.len(), 2, h, w], data)
}

/// Baseline loss: cross-entropy of the student against the one-hot mask.
pub fn student_loss<T: Scalar>(tape: &mut Tape<T>, student_probs: Var, target: &Tensor<T>) -> Result<Var> {
    same_shape(tape, student_probs, target, "target")?;
    tape.cross_entropy(student_probs, target)
}

fn same_shape<T: Scalar>(tape: &Tape<T>, probs: Var, other: &Tensor<T>, what: &str) -> Result<()> {
    let shape = tape.value(probs).shape();
    if other.shape() != shape {
        return Err(Error::arg(format!(
            "{what} shape {:?} differs from prediction {shape:?}",
            other.shape()
        )));
    }
    Ok(())
}

/// Alpha-blend of the ground-truth and teacher cross-entropies. The teacher
/// probabilities enter as a constant, so no gradient reaches the teacher.
pub fn pi_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student_probs: Var,
    teacher_probs: &Tensor<T>,
    target: &Tensor<T>,
    alpha: f64,
) -> Result<Var> {
    check_alpha(alpha)?;
    same_shape(tape, student_probs, target, "target")?;
    same_shape(tape, student_probs, teacher_probs, "teacher")?;
    let hard = tape.cross_entropy(student_probs, target)?;
    let soft = tape.cross_entropy(student_probs, teacher_probs)?;
    let hard = tape.scale(hard, T::from_f64(alpha));
    let soft = tape.scale(soft, T::from_f64(1.0 - alpha));
    tape.add(hard, soft)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub epochs: usize,
    /// Stops mid-epoch once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// SGD momentum coefficient; ignored by Adam.
    pub momentum: f64,
    pub seed: u64,
    pub precision: Precision,
    pub base_width: usize,
    /// Record a parameter digest after every step.
    pub trace_params: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            epochs: 10,
            max_steps: None,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            seed: 0,
            precision: Precision::F32,
            base_width: 16,
            trace_params: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.epochs == 0 || self.batch_size == 0 || self.base_width == 0 {
            return Err(Error::arg("epochs, batch_size and base_width must be >= 1"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::arg("max_steps must be >= 1 when set"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_f1: Option<f64>,
    /// Logged, but kept out of serialized history so reruns are byte-equal.
    #[serde(skip)]
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    /// SHA-256 of the parameters after each step (when traced).
    pub step_digests: Vec<String>,
}

impl History {
    pub fn steps(&self) -> usize {
        self.step_losses.len()
    }

    pub fn best_val_f1(&self) -> Option<f64> {
        self.epochs.iter().filter_map(|e| e.val_f1).reduce(f64::max)
    }

    pub fn last_val_f1(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_f1)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel<T> {
    pub model: UNetModel<T>,
    pub history: History,
    pub config: TrainConfig,
}

/// Hex SHA-256 over parameters and running statistics.
pub fn param_digest<T: Scalar>(model: &UNetModel<T>) -> String {
    let mut bytes = Vec::new();
    for p in model.params() {
        for &v in p.data() {
            v.write_le(&mut bytes);
        }
    }
    for s in model.running_stats() {
        for &v in s.mean.iter().chain(&s.var) {
            v.write_le(&mut bytes);
        }
    }
    hex::encode(Sha256::digest(&bytes))
}

enum Optimizer<T> {
    Sgd { momentum: T, velocity: Vec<Vec<T>> },
    Adam { m: Vec<Vec<T>>, v: Vec<Vec<T>>, t: i32 },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> Optimizer<T> {
    fn new(kind: OptimizerKind, momentum: f64, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        match kind {
            OptimizerKind::SgdMomentum => Self::Sgd {
                momentum: T::from_f64(momentum),
                velocity: zeros(),
            },
            OptimizerKind::Adam => Self::Adam {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], lr: f64) {
        let lr = T::from_f64(lr);
        match self {
            Self::Sgd { momentum, velocity } => {
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(velocity) {
                    for ((w, &g), v) in p.data_mut().iter_mut().zip(g).zip(vel) {
                        *v = *momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            Self::Adam { m, v, t } => {
                *t += 1;
                let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
                let c1 = T::one() - b1.powi(*t);
                let c2 = T::one() - b2.powi(*t);
                let eps = T::from_f64(ADAM_EPS);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
                    for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Consecutive chunks of `order`. A trailing chunk too small for
/// batch-norm statistics at the bottleneck joins the previous one.
fn batches(order: &[usize], batch_size: usize, bottleneck: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() >= 2 && out[out.len() - 1].len() * bottleneck < 2 {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().expect("nonempty") = &order[start..];
    }
    out
}

/// Frozen teacher plus the enhanced twins of the training patches.
struct Privileged<'a, T> {
    teacher: &'a UNetModel<T>,
    enhanced: &'a [EnhancedPatch],
    alpha: f64,
}

fn train_loop<T: Scalar, S: ModelInput>(
    mut model: UNetModel<T>,
    train: &[S],
    val: &[S],
    privileged: Option<Privileged<'_, T>>,
    cfg: &TrainConfig,
    label: &str,
) -> Result<TrainedModel<T>> {
    if train.is_empty() {
        return Err(Error::arg(format!("{label}: empty training set")));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.momentum, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    let bottleneck = (train[0].height() >> DEPTH) * (train[0].width() >> DEPTH);

    'epochs: for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for idx in batches(&order, cfg.batch_size, bottleneck) {
            if history.steps() >= budget {
                break;
            }
            let x = batch_input::<T, S>(train, idx)?;
            let masks: Vec<&MaskImage> = idx.iter().map(|&i| train[i].mask()).collect();
            let target = one_hot::<T>(&masks)?;

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let fwd = model.forward_on_tape(&mut tape, xv, BnMode::Train)?;
            let loss = match &privileged {
                None => student_loss(&mut tape, fwd.probs, &target)?,
                Some(pi) => {
                    let xbar = batch_input::<T, EnhancedPatch>(pi.enhanced, idx)?;
                    let teacher_probs = pi.teacher.predict(&xbar)?;
                    pi_loss(&mut tape, fwd.probs, &teacher_probs, &target, pi.alpha)?
                }
            };
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "{label}: non-finite loss at step {}",
                    history.steps() + 1
                )));
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Vec<T>> = fwd
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![T::zero(); p.numel()]))
                .collect();
            optimizer.step(model.params_mut(), &grads, cfg.learning_rate);
            model.set_running_stats(fwd.running);

            losses.push(value);
            history.step_losses.push(value);
            if cfg.trace_params {
                history.step_digests.push(param_digest(&model));
            }
        }
        if losses.is_empty() {
            break 'epochs;
        }
        let val_f1 = if val.is_empty() {
            None
        } else {
            let pred = predict_masks(&model, val, cfg.batch_size)?;
            let truth: Vec<MaskImage> = val.iter().map(|s| s.mask().clone()).collect();
            Some(f1_score(&pred, &truth, F1Mode::Micro)?)
        };
        let record = EpochRecord {
            epoch,
            steps: losses.len(),
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_f1,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "{label} epoch={} steps={} train_loss={:.6} val_f1={} wall={:.2}s",
            record.epoch,
            record.steps,
            record.train_loss,
            record.val_f1.map_or("-".to_string(), |f| format!("{f:.4}")),
            record.wall_secs
        );
        history.epochs.push(record);
    }
    Ok(TrainedModel {
        model,
        history,
        config: cfg.clone(),
    })
}

/// Trains a 3-channel teacher on enhanced patches.
pub fn train_teacher<T: Scalar>(
    train: &[EnhancedPatch],
    val: &[EnhancedPatch],
    cfg: &TrainConfig,
) -> Result<TrainedModel<T>> {
    cfg.validate()?;
    let model = UNetModel::init(UNetConfig::teacher(cfg.base_width), cfg.seed)?;
    train_loop(model, train, val, None, cfg, "teacher")
}

/// Trains the 1-channel baseline student on raw patches.
pub fn train_student<T: Scalar>(
    train: &[PatchRecord],
    val: &[PatchRecord],
    cfg: &TrainConfig,
) -> Result<TrainedModel<T>> {
    cfg.validate()?;
    let model = UNetModel::init(UNetConfig::student(cfg.base_width), cfg.seed)?;
    train_loop(model, train, val, None, cfg, "student")
}

/// Verifies that `enhanced[i]` is the enhancement of `raw[i]`.
pub fn check_pairing(raw: &[PatchRecord], enhanced: &[EnhancedPatch]) -> Result<()> {
    if raw.len() != enhanced.len() {
        return Err(Error::Pairing(format!(
            "{} raw patches vs {} enhanced patches",
            raw.len(),
            enhanced.len()
        )));
    }
    for (i, (r, e)) in raw.iter().zip(enhanced).enumerate() {
        let same = r.image.data().len() == e.channels[0].data().len()
            && r
                .image
                .data()
                .iter()
                .zip(e.channels[0].data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::Pairing(format!("pair {i}: channel 0 differs from the raw patch")));
        }
    }
    Ok(())
}

/// Trains a 1-channel student against ground truth and a frozen teacher's
/// probabilities on the enhanced twins. Only `raw` inputs reach the student.
pub fn train_pi_student<T: Scalar>(
    raw: &[PatchRecord],
    enhanced: &[EnhancedPatch],
    teacher: &UNetModel<T>,
    val: &[PatchRecord],
    cfg: &TrainConfig,
) -> Result<TrainedModel<T>> {
    cfg.validate()?;
    check_pairing(raw, enhanced)?;
    if teacher.config().in_channels != 3 {
        return Err(Error::arg("teacher must take 3-channel input"));
    }
    let model = UNetModel::init(UNetConfig::student(cfg.base_width), cfg.seed)?;
    let privileged = Privileged {
        teacher,
        enhanced,
        alpha: cfg.alpha,
    };
    train_loop(model, raw, val, Some(privileged), cfg, "pi-student")
}
