//! Losses, learning-rate schedules, the gradient-partitioned SGD step,
//! and the training loop.
//!
//! Two cross-entropy losses drive disjoint parameter sets: the
//! pre-attention loss updates the feature net and its heads, the
//! post-attention loss updates the projections and their heads. The
//! split is structural — branch features are detached before the
//! correlation net, so the second loss cannot reach feature parameters —
//! and the step asserts it numerically: a gradient arriving at a
//! foreign-tagged parameter is a hard failure, not a warning.

use rand::prelude::*;

use crate::data::{flip_w_in_place, Dataset, LabelMatrix};
use crate::eval::evaluate;
use crate::layers::Mode;
use crate::model::{component_rng, AttributeModel, ParamRegistry, ParamTag, Variant};
use crate::tensor::Tensor;
use crate::{Error, Result};

// ── Learning-rate schedules ──────────────────────────────────────────

/// `initial · (1 − step/max_steps)^power`, clamped to 0 past the end.
pub fn poly_decay_lr(step: usize, initial: f64, power: f64, max_steps: usize) -> f64 {
    if max_steps == 0 || step >= max_steps {
        return 0.0;
    }
    initial * (1.0 - step as f64 / max_steps as f64).powf(power)
}

/// Triangular cyclical schedule with period `2·stepsize`, ramping
/// `min_lr -> max_lr -> min_lr`.
pub fn cyclical_lr(step: usize, min_lr: f64, max_lr: f64, stepsize: usize) -> f64 {
    let cycle = (1 + step / (2 * stepsize)) as f64;
    let x = (step as f64 / stepsize as f64 - 2.0 * cycle + 1.0).abs();
    min_lr + (max_lr - min_lr) * (1.0 - x).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Poly { initial: f64, power: f64, end: f64 },
    Cyclical { min_lr: f64, max_lr: f64, stepsize: usize },
}

impl LrSchedule {
    pub fn at(&self, step: usize, max_steps: usize) -> f64 {
        match *self {
            LrSchedule::Poly { initial, power, end } => {
                end + poly_decay_lr(step, initial - end, power, max_steps)
            }
            LrSchedule::Cyclical { min_lr, max_lr, stepsize } => {
                cyclical_lr(step, min_lr, max_lr, stepsize)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Poly { initial, power, end } => {
                if initial <= 0.0 || power <= 0.0 || end < 0.0 || end > initial {
                    return Err(Error::Config(format!(
                        "lr_schedule: poly needs initial > 0, power > 0, 0 <= end <= initial; got poly({initial},{power},{end})"
                    )));
                }
            }
            LrSchedule::Cyclical { min_lr, max_lr, stepsize } => {
                if stepsize == 0 || min_lr < 0.0 || min_lr > max_lr {
                    return Err(Error::Config(format!(
                        "lr_schedule: cyclical needs stepsize >= 1 and 0 <= min <= max; got cyclical({min_lr},{max_lr},{stepsize})"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── Config ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub max_steps: usize,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// assert per-step that each loss only reaches its own parameters
    pub check_isolation: bool,
}

impl TrainConfig {
    /// Paper-style defaults at desk scale; weight decay 0.0005 for the
    /// baseline and 0.001 for the correlation variants.
    pub fn desk_default(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            batch_size: 16,
            max_steps: 400,
            lr_schedule: LrSchedule::Poly {
                initial: 0.005,
                power: 1.0,
                end: 0.0,
            },
            weight_decay: if variant == Variant::Baseline { 0.0005 } else { 0.001 },
            seed: 0,
            eval_every: 100,
            check_isolation: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size: batchnorm needs at least 2, got {}",
                self.batch_size
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every: must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay: must be non-negative, got {}",
                self.weight_decay
            )));
        }
        self.lr_schedule.validate()
    }
}

// ── Losses ───────────────────────────────────────────────────────────

/// Loss values of one step; the per-attribute vectors hold each
/// attribute's mean negative log-likelihood over the batch.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub l_f: f64,
    pub l_c: Option<f64>,
    pub per_attribute_f: Vec<f64>,
    pub per_attribute_c: Option<Vec<f64>>,
}

/// Softmax cross-entropy summed over attributes, averaged over the
/// batch: `−(1/B)·Σ_samples Σ_attributes log p(label)`.
/// Returns the scalar loss tensor (graph-linked) and the per-attribute
/// mean NLL tensor `[M]`.
pub fn attribute_ce_loss(logits: &Tensor, labels: &LabelMatrix) -> Result<(Tensor, Tensor)> {
    let s = logits.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::Dimension(format!(
            "attribute_ce_loss expects [B,M,2] logits, got {s:?}"
        )));
    }
    let (b, m) = (s[0], s[1]);
    if labels.rows != b || labels.cols != m {
        return Err(Error::Dimension(format!(
            "attribute_ce_loss: labels {}x{} do not match logits [{b},{m},2]",
            labels.rows, labels.cols
        )));
    }
    if let Some(&bad) = labels.values.iter().find(|&&v| v > 1) {
        return Err(Error::Contract(format!("labels must be 0 or 1, found {bad}")));
    }
    // one-hot pick of the true class per (sample, attribute)
    let mut pick = vec![0.0; b * m * 2];
    for (i, &lab) in labels.values.iter().enumerate() {
        pick[i * 2 + lab as usize] = 1.0;
    }
    let pick = Tensor::new(&[b * m, 2], pick)?;
    let log_p = logits.reshape(&[b * m, 2])?.softmax_rows()?.ln();
    let picked = log_p.mul(&pick)?.reduce_sum(&[1], false)?; // [B·M]
    let per_attr = picked
        .reshape(&[b, m])?
        .reduce_mean(&[0], false)?
        .mul_scalar(-1.0); // [M]
    let total = per_attr.reduce_sum(&[], false)?;
    Ok((total, per_attr))
}

// ── Partitioned optimization ─────────────────────────────────────────

fn updates_under(variant: Variant, tag: ParamTag) -> bool {
    match variant {
        Variant::Baseline => matches!(tag, ParamTag::Fln | ParamTag::HeadF),
        Variant::GalJ | Variant::GalP => true,
        Variant::GalC => matches!(tag, ParamTag::Cln | ParamTag::HeadC),
    }
}

fn grad_is_clean(t: &Tensor) -> bool {
    match t.grad() {
        None => true,
        Some(g) => g.iter().all(|&v| v == 0.0),
    }
}

/// One SGD step with gradient streams routed by parameter tag.
///
/// Routing: the baseline updates FLN+HEAD_F from the feature loss;
/// joint and prior variants additionally update CLN+HEAD_C from the
/// correlation loss; the frozen variant updates only CLN+HEAD_C.
/// Decoupled weight decay applies to every parameter updated this step.
#[allow(clippy::too_many_arguments)]
pub fn partitioned_step(
    model: &AttributeModel,
    registry: &ParamRegistry,
    batch: &Tensor,
    labels: &LabelMatrix,
    variant: Variant,
    lr: f64,
    weight_decay: f64,
    check_isolation: bool,
) -> Result<LossBreakdown> {
    step_with_labels(
        model,
        registry,
        batch,
        labels,
        labels,
        variant,
        lr,
        weight_decay,
        check_isolation,
    )
}

// Core step with separate label sets per loss; the public entry passes
// the same labels twice. Splitting them lets tests scale one loss
// arbitrarily and assert the other stream's updates are untouched.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_with_labels(
    model: &AttributeModel,
    registry: &ParamRegistry,
    batch: &Tensor,
    labels_f: &LabelMatrix,
    labels_c: &LabelMatrix,
    variant: Variant,
    lr: f64,
    weight_decay: f64,
    check_isolation: bool,
) -> Result<LossBreakdown> {
    if variant != model.config.variant {
        return Err(Error::Contract(format!(
            "partitioned_step: variant {:?} does not match model variant {:?}",
            variant, model.config.variant
        )));
    }
    registry.zero_grads();
    let out = model.forward(batch, Mode::Train)?;
    let (loss_f, per_f) = attribute_ce_loss(&out.logits_f, labels_f)?;
    let correlation = match &out.logits_c {
        Some(lc) => Some(attribute_ce_loss(lc, labels_c)?),
        None => None,
    };

    // Correlation stream first onto clean slots: any gradient it leaves
    // on a feature-side parameter is a routing bug.
    let mut cln_snapshot: Vec<Option<Vec<f64>>> = Vec::new();
    if let Some((loss_c, _)) = &correlation {
        loss_c.backward()?;
        if check_isolation {
            for e in registry.iter() {
                if matches!(e.tag, ParamTag::Fln | ParamTag::HeadF) {
                    assert!(
                        grad_is_clean(&e.tensor),
                        "gradient isolation violated: correlation loss reached '{}'",
                        e.name
                    );
                }
            }
            cln_snapshot = registry
                .iter()
                .map(|e| {
                    if matches!(e.tag, ParamTag::Cln | ParamTag::HeadC) {
                        e.tensor.grad()
                    } else {
                        None
                    }
                })
                .collect();
        }
    }

    // Feature stream; skipped entirely when the feature net is frozen.
    if variant != Variant::GalC {
        loss_f.backward()?;
        if check_isolation && correlation.is_some() {
            for (e, snap) in registry.iter().zip(&cln_snapshot) {
                if matches!(e.tag, ParamTag::Cln | ParamTag::HeadC) {
                    let now = e.tensor.grad();
                    let same = match (&now, snap) {
                        (Some(a), Some(b)) => {
                            a.len() == b.len()
                                && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                        }
                        (None, None) => true,
                        _ => false,
                    };
                    assert!(
                        same,
                        "gradient isolation violated: feature loss reached '{}'",
                        e.name
                    );
                }
            }
        }
    }

    for e in registry.iter() {
        if !updates_under(variant, e.tag) {
            continue;
        }
        let Some(g) = e.tensor.grad() else { continue };
        let mut v = e.tensor.values_mut();
        if weight_decay == 0.0 {
            for (vi, gi) in v.iter_mut().zip(&g) {
                *vi -= lr * gi;
            }
        } else {
            for (vi, gi) in v.iter_mut().zip(&g) {
                let v0 = *vi;
                *vi = v0 - lr * gi - lr * weight_decay * v0;
            }
        }
    }

    Ok(LossBreakdown {
        l_f: loss_f.item(),
        l_c: correlation.as_ref().map(|(l, _)| l.item()),
        per_attribute_f: per_f.to_vec(),
        per_attribute_c: correlation.as_ref().map(|(_, p)| p.to_vec()),
    })
}

// ── Training loop ────────────────────────────────────────────────────

/// One metrics-stream record; accuracy fields fill on eval steps.
#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub l_f: f64,
    pub l_c: Option<f64>,
    pub mean_acc_f: Option<f64>,
    pub mean_acc_c: Option<f64>,
}

impl StepMetrics {
    /// `step,lr,l_f,l_c,mean_acc_f,mean_acc_c` with empty absent fields.
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.l_f,
            opt(self.l_c),
            opt(self.mean_acc_f),
            opt(self.mean_acc_c)
        )
    }

    pub const HEADER: &'static str = "step,lr,l_f,l_c,mean_acc_f,mean_acc_c";
}

// Deterministic shuffled-index stream over the dataset; reshuffles at
// every epoch boundary and always yields full batches.
struct BatchSampler {
    deck: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize) -> BatchSampler {
        BatchSampler {
            deck: (0..n).collect(),
            pos: usize::MAX, // force initial shuffle
        }
    }

    fn next_batch<R: rand::Rng>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos >= self.deck.len() {
                self.deck.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.deck[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs the training loop: shuffled mini-batches with online flip
/// augmentation, schedule-driven SGD via `partitioned_step`, and
/// periodic evaluation on `eval_data` (the training set when absent).
/// `on_metrics` receives every record as it is produced; the full
/// history is also returned.
pub fn train(
    model: &AttributeModel,
    registry: &ParamRegistry,
    train_data: &Dataset,
    eval_data: Option<&Dataset>,
    config: &TrainConfig,
    mut on_metrics: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    config.validate()?;
    if train_data.m() != model.m() {
        return Err(Error::Config(format!(
            "dataset has {} attributes, model expects {}",
            train_data.m(),
            model.m()
        )));
    }
    if config.variant != model.config.variant {
        return Err(Error::Config(format!(
            "variant: config says {:?}, model is {:?}",
            config.variant, model.config.variant
        )));
    }
    let (h, w, c) = train_data.image_dims();
    if (h, w, c) != model.config.input {
        return Err(Error::Config(format!(
            "dataset images are {h}x{w}x{c}, model expects {:?}",
            model.config.input
        )));
    }

    let mut rng = component_rng(config.seed, "train-loop");
    let mut sampler = BatchSampler::new(train_data.n());
    let img_stride = h * w * c;
    let mut history = Vec::with_capacity(config.max_steps);
    let all_images = train_data.images.values().clone();

    for step in 0..config.max_steps {
        let lr = config.lr_schedule.at(step, config.max_steps);
        let indices = sampler.next_batch(config.batch_size, &mut rng);
        let mut batch_vals = Vec::with_capacity(config.batch_size * img_stride);
        for &idx in &indices {
            let start = idx * img_stride;
            let row_start = batch_vals.len();
            batch_vals.extend_from_slice(&all_images[start..start + img_stride]);
            if rng.random::<bool>() {
                flip_w_in_place(&mut batch_vals[row_start..], h, w, c);
            }
        }
        let batch = Tensor::new(&[config.batch_size, h, w, c], batch_vals)?;
        let labels = train_data.labels.gather_rows(&indices);

        let losses = partitioned_step(
            model,
            registry,
            &batch,
            &labels,
            config.variant,
            lr,
            config.weight_decay,
            config.check_isolation,
        )?;

        let mut metrics = StepMetrics {
            step,
            lr,
            l_f: losses.l_f,
            l_c: losses.l_c,
            mean_acc_f: None,
            mean_acc_c: None,
        };
        let last = step + 1 == config.max_steps;
        if (step + 1) % config.eval_every == 0 || last {
            let report = evaluate(model, eval_data.unwrap_or(train_data))?;
            metrics.mean_acc_f = Some(report.mean_acc_f);
            metrics.mean_acc_c = report.mean_acc_c;
        }
        on_metrics(&metrics);
        history.push(metrics);
    }
    Ok(history)
}
