//! Task loss and the cutout / cutmix consistency regularizers.
//!
//! Both regularizers have the same two-term shape per sample: the mean
//! pairwise squared distance between the softmax outputs of `K` augmented
//! views, plus the mean cross-entropy of those views against their targets.
//! Everything is recorded on one tape so a single backward pass yields the
//! gradient of the sum.

use serde::{Deserialize, Serialize};

use crate::augment::{apply_cutmix, sample_cutmix_event, AuditLog, AugmentRecord, ImageDims};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{epoch_sample, Purpose, RngStream};
use crate::tensor::Tensor;
use crate::uncertainty::cutout_views;

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// `(1 / C(K, 2)) * sum_{i<j} ||p_i - p_j||^2`.
pub fn pairwise_consistency(probs: &[&[f64]]) -> Result<f64> {
    let k = probs.len();
    if k < 2 {
        return Err(Error::config(format!(
            "pairwise consistency needs at least 2 vectors, got {k}"
        )));
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += probs[i]
                .iter()
                .zip(probs[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmLabelMode {
    /// `lambda * y_i + (1 - lambda) * y_partner`.
    #[default]
    Soft,
    /// `y_i` only.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub use_co: bool,
    pub use_cm: bool,
    pub k_co: usize,
    pub k_cm: usize,
    pub lambda_min: f64,
    pub cm_label_mode: CmLabelMode,
    /// Side of the square cutout box, in pixels.
    pub cutout_size: usize,
}

impl LossConfig {
    pub fn task_only(cutout_size: usize) -> Self {
        LossConfig {
            use_co: false,
            use_cm: false,
            k_co: 2,
            k_cm: 2,
            lambda_min: 0.5,
            cm_label_mode: CmLabelMode::Soft,
            cutout_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_co && self.k_co < 2 {
            return Err(Error::config(format!(
                "k_co must be >= 2, got {}",
                self.k_co
            )));
        }
        if self.use_cm && self.k_cm < 2 {
            return Err(Error::config(format!(
                "k_cm must be >= 2, got {}",
                self.k_cm
            )));
        }
        if !(0.0..1.0).contains(&self.lambda_min) {
            return Err(Error::config(format!(
                "lambda_min must lie in [0, 1), got {}",
                self.lambda_min
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_co: f64,
    pub l_cm: f64,
    pub l_total: f64,
}

/// A training mini-batch. `ids` are dataset indices and key the per-sample
/// augmentation streams.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn dims(&self) -> ImageDims {
        let s = self.images.shape();
        ImageDims::new(s[1], s[2], s[3])
    }
}

/// Stream keys for one epoch of training.
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    pub seed: u64,
    pub cycle: u64,
    pub epoch: usize,
    pub audit: Option<&'a AuditLog>,
}

impl LossContext<'_> {
    fn stream(&self, purpose: Purpose, id: usize) -> RngStream {
        RngStream::new(self.seed, purpose, self.cycle, epoch_sample(self.epoch, id))
    }
}

/// Targets as an `(M, classes)` matrix of hard (one-hot) or soft rows.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::usage(format!("class id {y} outside [0, {classes})")));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean over rows of `-sum_c target[c] * log_softmax(logits)[c]`.
pub fn cross_entropy_on(tape: &mut Tape, logits: Var, targets: Tensor) -> Result<Var> {
    if tape.shape(logits) != targets.shape() {
        return Err(Error::shape_mismatch(
            "cross_entropy",
            tape.shape(logits),
            targets.shape(),
        ));
    }
    let m = tape.shape(logits)[0];
    let log_p = tape.log_softmax(logits)?;
    let t = tape.constant(targets);
    let weighted = tape.mul(log_p, t)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / m as f64)
}

/// Plain-value cross-entropy of `(M, C)` logits against hard labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let classes = *logits.shape().last().unwrap_or(&0);
    let targets = one_hot(labels, classes)?;
    cross_entropy_soft(logits, &targets)
}

/// Plain-value cross-entropy against soft target rows.
pub fn cross_entropy_soft(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits);
    let loss = cross_entropy_on(&mut tape, z, targets.clone())?;
    Ok(tape.scalar(loss))
}

/// Tape version of [`pairwise_consistency`] summed over the rows of each
/// `(M, C)` probability matrix; the caller divides by `M`.
pub fn pairwise_on(tape: &mut Tape, probs: &[Var]) -> Result<Var> {
    let k = probs.len();
    if k < 2 {
        return Err(Error::config(format!(
            "pairwise consistency needs at least 2 views, got {k}"
        )));
    }
    let mut total: Option<Var> = None;
    for i in 0..k {
        for j in i + 1..k {
            let d = tape.sub(probs[i], probs[j])?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum(sq)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
    }
    tape.scale(total.expect("k >= 2"), 1.0 / (k * (k - 1) / 2) as f64)
}

/// Shared tail of both regularizers: pairwise term over the views' softmax
/// outputs plus the mean view cross-entropy.
fn consistency_on(
    tape: &mut Tape,
    model: &Model,
    params: &[Var],
    views: Vec<Tensor>,
    targets: Vec<Tensor>,
    m: usize,
) -> Result<Var> {
    let k = views.len();
    let mut probs = Vec::with_capacity(k);
    let mut ce_total: Option<Var> = None;
    for (view, target) in views.into_iter().zip(targets) {
        let x = tape.constant(view);
        let logits = model.forward_on(tape, params, x)?;
        probs.push(tape.softmax(logits)?);
        let ce = cross_entropy_on(tape, logits, target)?;
        ce_total = Some(match ce_total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let pair = pairwise_on(tape, &probs)?;
    let pair = tape.scale(pair, 1.0 / m as f64)?;
    let ce = tape.scale(ce_total.expect("k >= 2"), 1.0 / k as f64)?;
    tape.add(pair, ce)
}

/// Cutout consistency loss; `K_co` boxes per sample from its training stream.
pub fn cutout_consistency_on(
    tape: &mut Tape,
    model: &Model,
    params: &[Var],
    batch: &TrainBatch,
    config: &LossConfig,
    ctx: &LossContext<'_>,
) -> Result<Var> {
    if config.k_co < 2 {
        return Err(Error::config(format!(
            "k_co must be >= 2, got {}",
            config.k_co
        )));
    }
    let dims = batch.dims();
    let m = batch.len();
    let k = config.k_co;
    // per_sample[j][v] is view v of sample j
    let per_sample = batch
        .ids
        .iter()
        .enumerate()
        .map(|(j, &id)| {
            let mut s = ctx.stream(Purpose::CutoutTrain, id);
            cutout_views(
                batch.images.row(j),
                dims,
                k,
                config.cutout_size,
                &mut s,
                ctx.audit,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let targets = one_hot(&batch.labels, model.spec().classes)?;
    let mut views = Vec::with_capacity(k);
    for v in 0..k {
        let rows: Vec<&[f64]> = per_sample.iter().map(|s| s[v].as_slice()).collect();
        views.push(Tensor::stack(&dims.as_array(), &rows)?);
    }
    consistency_on(tape, model, params, views, vec![targets; k], m)
}

/// Cutmix consistency loss; `K_cm` events per sample, partners drawn from the
/// same mini-batch.
pub fn cutmix_consistency_on(
    tape: &mut Tape,
    model: &Model,
    params: &[Var],
    batch: &TrainBatch,
    config: &LossConfig,
    ctx: &LossContext<'_>,
) -> Result<Var> {
    if config.k_cm < 2 {
        return Err(Error::config(format!(
            "k_cm must be >= 2, got {}",
            config.k_cm
        )));
    }
    let dims = batch.dims();
    let m = batch.len();
    let k = config.k_cm;
    let classes = model.spec().classes;
    let positions: Vec<usize> = (0..m).collect();
    let mut view_rows = vec![Vec::with_capacity(m * dims.len()); k];
    let mut target_rows = vec![vec![0.0; m * classes]; k];
    for (j, &id) in batch.ids.iter().enumerate() {
        let mut s = ctx.stream(Purpose::CutmixTrain, id);
        for v in 0..k {
            let event = sample_cutmix_event(&mut s, dims, &positions, config.lambda_min);
            if let Some(log) = ctx.audit {
                let mut rec = AugmentRecord::cutmix(&s, &event);
                rec.partner = Some(batch.ids[event.partner]);
                log.record(&rec)?;
            }
            let (view, lambda) = apply_cutmix(
                batch.images.row(j),
                batch.images.row(event.partner),
                dims,
                &event.cut,
            )?;
            view_rows[v].extend_from_slice(&view);
            let (own, other) = (batch.labels[j], batch.labels[event.partner]);
            if own >= classes || other >= classes {
                return Err(Error::usage(format!("class id outside [0, {classes})")));
            }
            let row = &mut target_rows[v][j * classes..(j + 1) * classes];
            match config.cm_label_mode {
                CmLabelMode::Hard => row[own] = 1.0,
                CmLabelMode::Soft => {
                    row[own] += lambda;
                    row[other] += 1.0 - lambda;
                }
            }
        }
    }
    let [c, h, w] = dims.as_array();
    let views = view_rows
        .into_iter()
        .map(|d| Tensor::new(vec![m, c, h, w], d))
        .collect::<Result<Vec<_>>>()?;
    let targets = target_rows
        .into_iter()
        .map(|d| Tensor::new(vec![m, classes], d))
        .collect::<Result<Vec<_>>>()?;
    consistency_on(tape, model, params, views, targets, m)
}

/// Task cross-entropy on the (unaugmented-by-cutout) batch.
pub fn task_loss_on(
    tape: &mut Tape,
    model: &Model,
    params: &[Var],
    batch: &TrainBatch,
) -> Result<Var> {
    let x = tape.constant(batch.images.clone());
    let logits = model.forward_on(tape, params, x)?;
    let targets = one_hot(&batch.labels, model.spec().classes)?;
    cross_entropy_on(tape, logits, targets)
}

/// `L_total = L_ce + L_co + L_cm` on one tape; disabled terms contribute 0.
pub fn total_loss_on(
    tape: &mut Tape,
    model: &Model,
    params: &[Var],
    batch: &TrainBatch,
    config: &LossConfig,
    ctx: &LossContext<'_>,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::usage("empty training batch"));
    }
    let ce = task_loss_on(tape, model, params, batch)?;
    let mut total = ce;
    let mut out = LossBreakdown {
        l_ce: tape.scalar(ce),
        ..LossBreakdown::default()
    };
    if config.use_co {
        let co = cutout_consistency_on(tape, model, params, batch, config, ctx)?;
        out.l_co = tape.scalar(co);
        total = tape.add(total, co)?;
    }
    if config.use_cm {
        let cm = cutmix_consistency_on(tape, model, params, batch, config, ctx)?;
        out.l_cm = tape.scalar(cm);
        total = tape.add(total, cm)?;
    }
    out.l_total = tape.scalar(total);
    if !out.l_total.is_finite() {
        return Err(Error::Numeric {
            op: "total_loss",
            detail: format!("non-finite loss {out:?}"),
        });
    }
    Ok((total, out))
}

/// Evaluates the configured total loss and populates the model's gradients.
pub fn loss_and_grad(
    model: &mut Model,
    batch: &TrainBatch,
    config: &LossConfig,
    ctx: &LossContext<'_>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let (total, breakdown) = total_loss_on(&mut tape, model, &params, batch, config, ctx)?;
    tape.backward(total)?;
    model.collect_grads(&tape, &params)?;
    Ok(breakdown)
}
