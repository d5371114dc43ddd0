//! Acquisition scores. Every strategy follows the same convention: a higher
//! score means a more uncertain sample, selected sooner.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::augment::{
    apply_cutmix, apply_cutout, sample_cutmix_event, sample_cutout_box, AuditLog, AugmentRecord,
    ImageDims,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{entropy, pairwise_consistency};
use crate::model::Predictor;
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

/// Samples scored per forward batch when sweeping a pool.
const SCORE_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Entropy,
    Margin,
    #[serde(alias = "cutout")]
    KCutout,
    #[serde(alias = "cutmix")]
    CutmixEntropy,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Random,
        Strategy::Entropy,
        Strategy::Margin,
        Strategy::KCutout,
        Strategy::CutmixEntropy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Margin => "margin",
            Strategy::KCutout => "k_cutout",
            Strategy::CutmixEntropy => "cutmix_entropy",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub index: usize,
    pub strategy: Strategy,
    pub score: f64,
}

/// Which set supplies cutmix partners while scoring unlabeled samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartnerPoolKind {
    #[default]
    Unlabeled,
    Labeled,
}

/// Cutmix partner candidates: dataset indices into `images`.
#[derive(Clone, Copy)]
pub struct PartnerPool<'a> {
    pub images: &'a Dataset,
    pub indices: &'a [usize],
}

/// Augmentation settings shared by the scoring strategies.
#[derive(Clone, Copy, Debug)]
pub struct ScoringParams {
    pub seed: u64,
    pub cycle: u64,
    pub k_cutout: usize,
    pub k_cutmix: usize,
    pub cutout_size: usize,
    pub lambda_min: f64,
}

pub fn margin(p: &[f64]) -> f64 {
    let mut top1 = f64::NEG_INFINITY;
    let mut top2 = f64::NEG_INFINITY;
    for &v in p {
        if v > top1 {
            top2 = top1;
            top1 = v;
        } else if v > top2 {
            top2 = v;
        }
    }
    if top2 == f64::NEG_INFINITY {
        top2 = 0.0;
    }
    -(top1 - top2)
}

fn check_k(name: &str, k: usize, min: usize) -> Result<()> {
    if k < min {
        return Err(Error::config(format!("{name} must be >= {min}, got {k}")));
    }
    Ok(())
}

/// `K` cutout views of one image, each a fresh box from `stream`.
pub fn cutout_views(
    image: &[f64],
    dims: ImageDims,
    k: usize,
    size: usize,
    stream: &mut RngStream,
    audit: Option<&AuditLog>,
) -> Result<Vec<Vec<f64>>> {
    (0..k)
        .map(|_| {
            let cut = sample_cutout_box(stream, dims, size);
            if let Some(log) = audit {
                log.record(&AugmentRecord::cutout(stream, cut))?;
            }
            Ok(apply_cutout(image, dims, &cut))
        })
        .collect()
}

/// `K` cutmix views of one image with partners from `partners`.
pub fn cutmix_views(
    image: &[f64],
    dims: ImageDims,
    k: usize,
    partners: PartnerPool<'_>,
    lambda_min: f64,
    stream: &mut RngStream,
    audit: Option<&AuditLog>,
) -> Result<Vec<Vec<f64>>> {
    if partners.indices.is_empty() {
        return Err(Error::config("cutmix partner pool is empty"));
    }
    (0..k)
        .map(|_| {
            let event = sample_cutmix_event(stream, dims, partners.indices, lambda_min);
            if let Some(log) = audit {
                log.record(&AugmentRecord::cutmix(stream, &event))?;
            }
            let (view, _) = apply_cutmix(
                image,
                partners.images.image(event.partner),
                dims,
                &event.cut,
            )?;
            Ok(view)
        })
        .collect()
}

fn probabilities_of(model: &dyn Predictor, dims: ImageDims, views: &[Vec<f64>]) -> Result<Tensor> {
    let refs: Vec<&[f64]> = views.iter().map(Vec::as_slice).collect();
    let batch = Tensor::stack(&dims.as_array(), &refs)?;
    model.probabilities(&batch)
}

/// Mean pairwise squared L2 distance between softmax outputs of `k` cutout views.
pub fn k_cutout_score(
    model: &dyn Predictor,
    image: &[f64],
    dims: ImageDims,
    k: usize,
    cutout_size: usize,
    mut stream: RngStream,
) -> Result<f64> {
    check_k("K_co", k, 2)?;
    let views = cutout_views(image, dims, k, cutout_size, &mut stream, None)?;
    let probs = probabilities_of(model, dims, &views)?;
    let rows: Vec<&[f64]> = (0..k).map(|i| probs.row(i)).collect();
    pairwise_consistency(&rows)
}

/// Mean Shannon entropy of softmax outputs over `k` cutmix views.
pub fn cutmix_entropy_score(
    model: &dyn Predictor,
    image: &[f64],
    dims: ImageDims,
    k: usize,
    partners: PartnerPool<'_>,
    lambda_min: f64,
    mut stream: RngStream,
) -> Result<f64> {
    check_k("K_cm", k, 1)?;
    let views = cutmix_views(image, dims, k, partners, lambda_min, &mut stream, None)?;
    let probs = probabilities_of(model, dims, &views)?;
    Ok((0..k).map(|i| entropy(probs.row(i))).sum::<f64>() / k as f64)
}

pub fn entropy_score(model: &dyn Predictor, image: &[f64], dims: ImageDims) -> Result<f64> {
    let probs = probabilities_of(model, dims, &[image.to_vec()])?;
    Ok(entropy(probs.row(0)))
}

/// `-(p_top1 - p_top2)`.
pub fn margin_score(model: &dyn Predictor, image: &[f64], dims: ImageDims) -> Result<f64> {
    let probs = probabilities_of(model, dims, &[image.to_vec()])?;
    Ok(margin(probs.row(0)))
}

/// Uniform `[0, 1)` draw keyed by `(seed, cycle, index)`.
pub fn random_score(seed: u64, cycle: u64, index: usize) -> f64 {
    RngStream::new(seed, Purpose::RandomScore, cycle, index as u64).next_f64()
}

/// Scores every index in `pool` with `strategy`.
///
/// Each sample's augmentations come from its own stream keyed by
/// `(seed, purpose, cycle, index)`, so the result does not depend on how the
/// pool is chunked or ordered.
pub fn score_pool(
    model: &dyn Predictor,
    data: &Dataset,
    pool: &[usize],
    strategy: Strategy,
    params: &ScoringParams,
    partners: PartnerPool<'_>,
    audit: Option<&AuditLog>,
) -> Result<Vec<ScoreRecord>> {
    let dims = data.dims();
    let record = |index, score| ScoreRecord {
        index,
        strategy,
        score,
    };
    if strategy == Strategy::Random {
        return Ok(pool
            .iter()
            .map(|&i| record(i, random_score(params.seed, params.cycle, i)))
            .collect());
    }
    let views_per_sample = match strategy {
        Strategy::KCutout => {
            check_k("K_co", params.k_cutout, 2)?;
            params.k_cutout
        }
        Strategy::CutmixEntropy => {
            check_k("K_cm", params.k_cutmix, 1)?;
            params.k_cutmix
        }
        _ => 1,
    };
    let mut out = Vec::with_capacity(pool.len());
    for chunk in pool.chunks(SCORE_CHUNK) {
        let mut views = Vec::with_capacity(chunk.len() * views_per_sample);
        for &i in chunk {
            let image = data.image(i);
            match strategy {
                Strategy::KCutout => {
                    let mut s =
                        RngStream::new(params.seed, Purpose::CutoutScore, params.cycle, i as u64);
                    views.extend(cutout_views(
                        image,
                        dims,
                        params.k_cutout,
                        params.cutout_size,
                        &mut s,
                        audit,
                    )?);
                }
                Strategy::CutmixEntropy => {
                    let mut s =
                        RngStream::new(params.seed, Purpose::CutmixScore, params.cycle, i as u64);
                    views.extend(cutmix_views(
                        image,
                        dims,
                        params.k_cutmix,
                        partners,
                        params.lambda_min,
                        &mut s,
                        audit,
                    )?);
                }
                _ => views.push(image.to_vec()),
            }
        }
        let probs = probabilities_of(model, dims, &views)?;
        for (j, &i) in chunk.iter().enumerate() {
            let rows = (j * views_per_sample..(j + 1) * views_per_sample).map(|r| probs.row(r));
            let score = match strategy {
                Strategy::KCutout => pairwise_consistency(&rows.collect::<Vec<_>>())?,
                Strategy::CutmixEntropy => rows.map(entropy).sum::<f64>() / views_per_sample as f64,
                Strategy::Entropy => entropy(probs.row(j)),
                Strategy::Margin => margin(probs.row(j)),
                Strategy::Random => unreachable!(),
            };
            if !score.is_finite() {
                return Err(Error::Numeric {
                    op: "score",
                    detail: format!("{strategy} score {score} for sample {i}"),
                });
            }
            out.push(record(i, score));
        }
    }
    Ok(out)
}

/// Indices of the `b` highest scores, ties broken toward the lower index,
/// returned in ascending index order.
pub fn select_top_b(records: &[ScoreRecord], b: usize) -> Vec<usize> {
    let mut order: Vec<&ScoreRecord> = records.iter().collect();
    order.sort_by(|x, y| match y.score.total_cmp(&x.score) {
        Ordering::Equal => x.index.cmp(&y.index),
        other => other,
    });
    let mut picked: Vec<usize> = order.into_iter().take(b).map(|r| r.index).collect();
    picked.sort_unstable();
    picked
}
