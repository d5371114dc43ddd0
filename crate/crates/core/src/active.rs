//! Budgeted pool-based active learning.
//!
//! Cycle 0 trains on `b` uniformly drawn samples. Each later cycle scores the
//! unlabeled pool with the model from the previous cycle, moves the top `b`
//! into the labeled set, restores the initial weights `θ₀`, and retrains from
//! scratch on the enlarged set.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{pad_crop_flip, AuditLog, TrainTransform, TRAIN_PAD};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{loss_and_grad, LossBreakdown, LossConfig, LossContext, TrainBatch};
use crate::model::{Architecture, Model, ModelSpec, Predictor};
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::rng::{epoch_sample, Purpose, RngStream};
use crate::tensor::Tensor;
use crate::uncertainty::{
    score_pool, select_top_b, PartnerPool, PartnerPoolKind, ScoreRecord, ScoringParams, Strategy,
};

/// Everything that defines one active-learning run except the data and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Number of training images in the pool; a seeded subset when smaller
    /// than the training split.
    pub pool_size: usize,
    pub budget: usize,
    pub cycles: usize,
    pub strategy: Strategy,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub schedule: LrSchedule,
    pub arch: Architecture,
    pub partner_pool: PartnerPoolKind,
    pub train_transform: TrainTransform,
    pub eval_batch: usize,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::config("budget must be positive"));
        }
        if self.budget > self.pool_size {
            return Err(Error::config(format!(
                "budget {} exceeds pool_size {}",
                self.budget, self.pool_size
            )));
        }
        let needed = self.budget * (self.cycles + 1);
        if needed > self.pool_size {
            return Err(Error::config(format!(
                "budget * (cycles + 1) <= pool_size violated: {} * {} = {needed} > {}",
                self.budget,
                self.cycles + 1,
                self.pool_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn model_spec(&self, data: &Dataset, seed: u64) -> ModelSpec {
        ModelSpec::new(self.arch, data.dims().as_array(), data.classes(), seed)
    }

    fn scoring(&self, seed: u64, cycle: usize) -> ScoringParams {
        ScoringParams {
            seed,
            cycle: cycle as u64,
            k_cutout: self.loss.k_co,
            k_cutmix: self.loss.k_cm,
            cutout_size: self.loss.cutout_size,
            lambda_min: self.loss.lambda_min,
        }
    }
}

/// Partition of the pool into labeled and unlabeled dataset indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PoolState {
    pub cycle: usize,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl PoolState {
    /// Checks disjointness, sortedness, and that the union is `pool`.
    pub fn check(&self, pool: &[usize]) -> Result<()> {
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.labeled) || !sorted(&self.unlabeled) {
            return Err(Error::usage("pool sets must be sorted and duplicate-free"));
        }
        let mut union: Vec<usize> = self
            .labeled
            .iter()
            .chain(&self.unlabeled)
            .copied()
            .collect();
        union.sort_unstable();
        let mut want = pool.to_vec();
        want.sort_unstable();
        if union != want {
            return Err(Error::usage(
                "labeled and unlabeled sets do not partition the pool",
            ));
        }
        Ok(())
    }
}

/// Initial state of a run.
#[derive(Clone, Debug)]
pub struct ScenarioInit {
    /// Dataset indices making up the pool, ascending.
    pub pool: Vec<usize>,
    pub state: PoolState,
    /// Checkpoint of the initial weights `θ₀`.
    pub theta0: Vec<u8>,
}

pub fn init_scenario(config: &ScenarioConfig, train: &Dataset, seed: u64) -> Result<ScenarioInit> {
    config.validate()?;
    if config.pool_size > train.len() {
        return Err(Error::config(format!(
            "pool_size {} exceeds training set size {}",
            config.pool_size,
            train.len()
        )));
    }
    let all: Vec<usize> = (0..train.len()).collect();
    let mut pool = if config.pool_size < train.len() {
        RngStream::new(seed, Purpose::PoolSubset, 0, 0)
            .sample_without_replacement(&all, config.pool_size)
    } else {
        all
    };
    pool.sort_unstable();
    let mut labeled = RngStream::new(seed, Purpose::InitialPool, 0, 0)
        .sample_without_replacement(&pool, config.budget);
    labeled.sort_unstable();
    let unlabeled = difference(&pool, &labeled);
    let model = Model::build(&config.model_spec(train, seed))?;
    Ok(ScenarioInit {
        pool,
        state: PoolState {
            cycle: 0,
            labeled,
            unlabeled,
        },
        theta0: model.snapshot(),
    })
}

/// Elements of sorted `a` not in sorted `b`.
fn difference(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len().saturating_sub(b.len()));
    let mut j = 0;
    for &x in a {
        while j < b.len() && b[j] < x {
            j += 1;
        }
        if j >= b.len() || b[j] != x {
            out.push(x);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Sample-weighted mean loss breakdown per epoch.
    pub epochs: Vec<LossBreakdown>,
    pub steps: u64,
}

/// Restores `θ₀` and trains on the labeled set for `config.epochs` epochs.
pub fn train_cycle(
    state: &PoolState,
    theta0: &[u8],
    config: &ScenarioConfig,
    train: &Dataset,
    seed: u64,
    audit: Option<&AuditLog>,
) -> Result<TrainOutcome> {
    if state.labeled.is_empty() {
        return Err(Error::usage("cannot train on an empty labeled set"));
    }
    let mut model = Model::build(&config.model_spec(train, seed))?;
    model.restore(theta0)?;
    let mut sgd = Sgd::new(&config.optimizer)?;
    let dims = train.dims();
    let cycle = state.cycle as u64;
    let [c, h, w] = dims.as_array();
    let mut trajectory = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        config.schedule.apply(&mut sgd, epoch);
        let mut order = state.labeled.clone();
        RngStream::new(seed, Purpose::Shuffle, cycle, epoch as u64).shuffle(&mut order);
        let ctx = LossContext {
            seed,
            cycle,
            epoch,
            audit,
        };
        let mut sum = LossBreakdown::default();
        for (batch_no, ids) in order.chunks(config.batch_size).enumerate() {
            let mut data = Vec::with_capacity(ids.len() * dims.len());
            for &id in ids {
                match config.train_transform {
                    TrainTransform::PadCropFlip => {
                        let mut s = RngStream::new(
                            seed,
                            Purpose::PadCropFlip,
                            cycle,
                            epoch_sample(epoch, id),
                        );
                        data.extend(pad_crop_flip(&mut s, train.image(id), dims, TRAIN_PAD));
                    }
                    TrainTransform::None => data.extend_from_slice(train.image(id)),
                }
            }
            let batch = TrainBatch {
                images: Tensor::new(vec![ids.len(), c, h, w], data)?,
                labels: ids.iter().map(|&i| train.label(i)).collect(),
                ids: ids.to_vec(),
            };
            let run_err = |detail: String| Error::Run {
                epoch,
                batch: batch_no,
                detail,
            };
            let loss = match loss_and_grad(&mut model, &batch, &config.loss, &ctx) {
                Ok(l) => l,
                Err(e @ Error::Numeric { .. }) => return Err(run_err(e.to_string())),
                Err(e) => return Err(e),
            };
            sgd.step(model.params_mut())?;
            if model.params().iter().any(|p| !p.all_finite()) {
                return Err(run_err("parameters diverged".into()));
            }
            let n = ids.len() as f64;
            sum.l_ce += loss.l_ce * n;
            sum.l_co += loss.l_co * n;
            sum.l_cm += loss.l_cm * n;
            sum.l_total += loss.l_total * n;
        }
        let n = state.labeled.len() as f64;
        trajectory.push(LossBreakdown {
            l_ce: sum.l_ce / n,
            l_co: sum.l_co / n,
            l_cm: sum.l_cm / n,
            l_total: sum.l_total / n,
        });
    }
    Ok(TrainOutcome {
        model,
        epochs: trajectory,
        steps: sgd.steps(),
    })
}

#[derive(Clone, Debug)]
pub struct Advance {
    pub state: PoolState,
    pub selected: Vec<usize>,
    pub scores: Vec<ScoreRecord>,
}

/// Scores the unlabeled pool and moves the top `b` into the labeled set.
pub fn advance(
    state: &PoolState,
    model: &dyn Predictor,
    config: &ScenarioConfig,
    train: &Dataset,
    seed: u64,
    audit: Option<&AuditLog>,
) -> Result<Advance> {
    if state.unlabeled.is_empty() {
        return Err(Error::PoolExhausted);
    }
    let partner_indices = match config.partner_pool {
        PartnerPoolKind::Unlabeled => &state.unlabeled,
        PartnerPoolKind::Labeled => &state.labeled,
    };
    let partners = PartnerPool {
        images: train,
        indices: partner_indices,
    };
    let scores = score_pool(
        model,
        train,
        &state.unlabeled,
        config.strategy,
        &config.scoring(seed, state.cycle),
        partners,
        audit,
    )?;
    let selected = select_top_b(&scores, config.budget);
    let mut labeled: Vec<usize> = state.labeled.iter().chain(&selected).copied().collect();
    labeled.sort_unstable();
    let unlabeled = difference(&state.unlabeled, &selected);
    Ok(Advance {
        state: PoolState {
            cycle: state.cycle + 1,
            labeled,
            unlabeled,
        },
        selected,
        scores,
    })
}

/// Top-1 accuracy in percent. Ties in the logits resolve to the lowest class.
pub fn evaluate(model: &dyn Predictor, test: &Dataset, batch_size: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::usage("empty test set"));
    }
    let batch_size = batch_size.max(1);
    let indices: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let probs = model.probabilities(&test.batch(chunk))?;
        for (j, &i) in chunk.iter().enumerate() {
            let row = probs.row(j);
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == test.label(i));
        }
    }
    Ok(100.0 * correct as f64 / test.len() as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub labeled_count: usize,
    /// Indices added to the labeled set before this cycle's training (empty for cycle 0).
    pub selected: Vec<usize>,
    pub train_losses: Vec<LossBreakdown>,
    pub test_accuracy: f64,
    pub wall_time_s: f64,
}

impl CycleReport {
    /// Loss breakdown of the last training epoch.
    pub fn final_loss(&self) -> LossBreakdown {
        self.train_losses.last().copied().unwrap_or_default()
    }
}

/// Callbacks fired while a scenario runs.
pub trait RunObserver {
    fn on_cycle(&mut self, _report: &CycleReport) -> Result<()> {
        Ok(())
    }

    /// Scores computed at the start of `cycle` (before selection).
    fn on_scores(&mut self, _cycle: usize, _scores: &[ScoreRecord]) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

/// Runs cycle 0 plus `config.cycles` selection cycles.
pub fn run_scenario(
    config: &ScenarioConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    observer: &mut dyn RunObserver,
    audit: Option<&AuditLog>,
) -> Result<Vec<CycleReport>> {
    let init = init_scenario(config, train, seed)?;
    let mut state = init.state;
    let mut reports = Vec::with_capacity(config.cycles + 1);
    let mut model: Option<Model> = None;
    for t in 0..=config.cycles {
        let started = Instant::now();
        let mut selected = Vec::new();
        if let Some(prev) = &model {
            let step = advance(&state, prev, config, train, seed, audit)?;
            observer.on_scores(t, &step.scores)?;
            selected = step.selected;
            state = step.state;
        }
        state.check(&init.pool)?;
        let outcome = train_cycle(&state, &init.theta0, config, train, seed, audit)?;
        let test_accuracy = evaluate(&outcome.model, test, config.eval_batch)?;
        let report = CycleReport {
            cycle: t,
            labeled_count: state.labeled.len(),
            selected,
            train_losses: outcome.epochs,
            test_accuracy,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        observer.on_cycle(&report)?;
        reports.push(report);
        model = Some(outcome.model);
    }
    Ok(reports)
}
