//! Runtime self-checks: finite-difference gradient checks of every loss term
//! and quick invariant checks of scoring and selection. Backs `augal verify`.

use crate::active::run_scenario;
use crate::augment::{cutmix_lambda, CutoutBox, ImageDims, TrainTransform};
use crate::autograd::{Tape, Var};
use crate::data::{synth_blobs, BlobSpec, Split};
use crate::error::Result;
use crate::losses::{
    cutmix_consistency_on, cutout_consistency_on, entropy, pairwise_consistency, task_loss_on,
    total_loss_on, LossConfig, LossContext, TrainBatch,
};
use crate::model::{Architecture, Model, ModelSpec};
use crate::optim::{LrSchedule, SgdConfig};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;
use crate::uncertainty::{select_top_b, PartnerPoolKind, ScoreRecord, Strategy};

/// A single loss term, or their sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Ce,
    Co,
    Cm,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Ce, LossTerm::Co, LossTerm::Cm, LossTerm::Total];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossTerm::Ce => "L_ce",
            LossTerm::Co => "L_co",
            LossTerm::Cm => "L_cm",
            LossTerm::Total => "L_total",
        }
    }
}

fn term_on(
    tape: &mut Tape,
    model: &Model,
    params: &[Var],
    batch: &TrainBatch,
    config: &LossConfig,
    ctx: &LossContext<'_>,
    term: LossTerm,
) -> Result<Var> {
    match term {
        LossTerm::Ce => task_loss_on(tape, model, params, batch),
        LossTerm::Co => cutout_consistency_on(tape, model, params, batch, config, ctx),
        LossTerm::Cm => cutmix_consistency_on(tape, model, params, batch, config, ctx),
        LossTerm::Total => Ok(total_loss_on(tape, model, params, batch, config, ctx)?.0),
    }
}

/// Value of one loss term at the model's current parameters, with the
/// activation pattern of its tape.
pub fn term_value(
    model: &Model,
    batch: &TrainBatch,
    config: &LossConfig,
    ctx: &LossContext<'_>,
    term: LossTerm,
) -> Result<(f64, Vec<usize>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let v = term_on(&mut tape, model, &params, batch, config, ctx, term)?;
    Ok((tape.scalar(v), tape.activation_pattern()))
}

/// Value and analytic gradient (one vector per parameter tensor).
pub fn term_value_and_grads(
    model: &Model,
    batch: &TrainBatch,
    config: &LossConfig,
    ctx: &LossContext<'_>,
    term: LossTerm,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let v = term_on(&mut tape, model, &params, batch, config, ctx, term)?;
    tape.backward(v)?;
    let grads = params
        .iter()
        .zip(model.params())
        .map(|(&p, t)| {
            tape.grad(p)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    Ok((tape.scalar(v), grads))
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `name[index]` of the worst compared coordinate.
    pub worst: String,
    /// Coordinates compared.
    pub coordinates: usize,
    /// Coordinates skipped because `θ ± ε` changes the activation pattern,
    /// so the central difference straddles a ReLU or max-pool kink.
    pub kinked: usize,
}

impl GradCheck {
    pub fn summary(&self) -> String {
        format!(
            "max relative error {:.2e} at {} over {} coordinates ({} kink-straddling skipped)",
            self.max_rel_error, self.worst, self.coordinates, self.kinked
        )
    }
}

/// Relative error with a floor on the denominator, so coordinates whose true
/// gradient is numerically zero are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of `term` against central differences on every
/// parameter coordinate whose `±eps` probes stay on the same smooth piece.
pub fn gradcheck(
    model: &Model,
    batch: &TrainBatch,
    config: &LossConfig,
    ctx: &LossContext<'_>,
    term: LossTerm,
    eps: f64,
    floor: f64,
) -> Result<GradCheck> {
    let (_, analytic) = term_value_and_grads(model, batch, config, ctx, term)?;
    let (_, pattern) = term_value(model, batch, config, ctx, term)?;
    let names: Vec<String> = model.named_params().map(|(n, _)| n.to_string()).collect();
    let mut probe = model.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        coordinates: 0,
        kinked: 0,
    };
    for (p, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let original = probe.params()[p].data()[i];
            probe.params_mut()[p].data_mut()[i] = original + eps;
            let (up, up_pattern) = term_value(&probe, batch, config, ctx, term)?;
            probe.params_mut()[p].data_mut()[i] = original - eps;
            let (down, down_pattern) = term_value(&probe, batch, config, ctx, term)?;
            probe.params_mut()[p].data_mut()[i] = original;
            if up_pattern != pattern || down_pattern != pattern {
                out.kinked += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(a, numeric, floor);
            out.coordinates += 1;
            if err > out.max_rel_error || out.worst.is_empty() {
                out.max_rel_error = out.max_rel_error.max(err);
                out.worst = format!(
                    "{}[{i}] (analytic {a:.6e}, numeric {numeric:.6e})",
                    names[p]
                );
            }
        }
    }
    Ok(out)
}

/// A small batch of seeded Gaussian images for gradient checks.
pub fn probe_batch(dims: ImageDims, classes: usize, m: usize, seed: u64) -> Result<TrainBatch> {
    let mut s = RngStream::new(seed, Purpose::Synth, 99, 0);
    let data: Vec<f64> = (0..m * dims.len()).map(|_| s.normal()).collect();
    let [c, h, w] = dims.as_array();
    Ok(TrainBatch {
        images: Tensor::new(vec![m, c, h, w], data)?,
        labels: (0..m).map(|i| i % classes).collect(),
        ids: (0..m).map(|i| 10 + i).collect(),
    })
}

/// Adds seeded `N(0, scale²)` noise to every bias, moving the model off the
/// zero-bias initialization where ReLU pre-activations of blank (cutout or
/// padded) regions sit exactly on the kink.
pub fn jitter_biases(model: &mut Model, seed: u64, scale: f64) {
    let mut s = RngStream::new(seed, Purpose::Synth, 98, 0);
    let biases: Vec<bool> = model
        .named_params()
        .map(|(n, _)| n.ends_with("bias"))
        .collect();
    for (p, is_bias) in model.params_mut().iter_mut().zip(biases) {
        if is_bias {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v += scale * s.normal());
        }
    }
}

/// Reduced convolutional network used by the gradient checks.
pub const SMALL_CNN: Architecture = Architecture::DeskCnn {
    conv1: 2,
    conv2: 3,
    hidden: 8,
};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn gradient_checks(out: &mut Vec<Check>) -> Result<()> {
    let dims = ImageDims::new(1, 8, 8);
    let classes = 3;
    let config = LossConfig {
        use_co: true,
        use_cm: true,
        k_co: 3,
        k_cm: 2,
        ..LossConfig::task_only(4)
    };
    let ctx = LossContext {
        seed: 5,
        cycle: 0,
        epoch: 0,
        audit: None,
    };
    let batch = probe_batch(dims, classes, 4, 3)?;
    for (label, arch) in [("mlp", Architecture::Mlp { hidden: 6 }), ("cnn", SMALL_CNN)] {
        let mut model = Model::build(&ModelSpec::new(arch, dims.as_array(), classes, 21))?;
        jitter_biases(&mut model, 4, 0.1);
        for term in LossTerm::ALL {
            let g = gradcheck(&model, &batch, &config, &ctx, term, 1e-3, 1e-6)?;
            out.push(check(
                format!("gradcheck {label} {}", term.as_str()),
                g.max_rel_error < 1e-4 && g.kinked * 3 < g.coordinates,
                g.summary(),
            ));
        }
    }
    Ok(())
}

fn oracle_checks(out: &mut Vec<Check>) -> Result<()> {
    let h = entropy(&[0.1; 10]);
    out.push(check(
        "entropy of uniform over 10",
        (h - 10f64.ln()).abs() < 1e-12,
        format!("{h} vs ln 10 = {}", 10f64.ln()),
    ));

    let dims = ImageDims::new(3, 32, 32);
    let lambda = cutmix_lambda(&CutoutBox::new(8, 8, 16, 16), dims);
    out.push(check(
        "cutmix lambda for a 16x16 box in 32x32",
        lambda == 0.75,
        format!("{lambda}"),
    ));

    let a = [0.7, 0.2, 0.1];
    let b = [0.1, 0.6, 0.3];
    let c = [0.3, 0.3, 0.4];
    let got = pairwise_consistency(&[&a, &b, &c])?;
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    let want = (sq(&a, &b) + sq(&a, &c) + sq(&b, &c)) / 3.0;
    out.push(check(
        "pairwise consistency over three views",
        (got - want).abs() < 1e-12,
        format!("{got} vs {want}"),
    ));

    let mut s = RngStream::new(1, Purpose::Synth, 7, 0);
    let mut invariant = true;
    for _ in 0..200 {
        let n = 1 + s.below(40) as usize;
        let records: Vec<ScoreRecord> = (0..n)
            .map(|i| ScoreRecord {
                index: i,
                strategy: Strategy::Entropy,
                score: s.uniform(-3.0, 3.0),
            })
            .collect();
        let b = s.below(n as u64 + 1) as usize;
        let mapped: Vec<ScoreRecord> = records
            .iter()
            .map(|r| ScoreRecord {
                score: r.score.exp() * 2.0 + 1.0,
                ..r.clone()
            })
            .collect();
        invariant &= select_top_b(&records, b) == select_top_b(&mapped, b);
    }
    out.push(check(
        "top-b selection under increasing transforms",
        invariant,
        "200 random score vectors",
    ));
    Ok(())
}

fn determinism_check(out: &mut Vec<Check>) -> Result<()> {
    let spec = BlobSpec {
        per_class: 15,
        classes: 3,
        height: 4,
        width: 4,
        separation: 3.0,
        seed: 2,
    };
    let train = synth_blobs(&spec, Split::Train)?;
    let test = synth_blobs(&spec, Split::Test)?;
    let config = crate::active::ScenarioConfig {
        pool_size: train.len(),
        budget: 5,
        cycles: 2,
        strategy: Strategy::KCutout,
        loss: LossConfig {
            use_co: true,
            use_cm: true,
            ..LossConfig::task_only(2)
        },
        epochs: 2,
        batch_size: 4,
        optimizer: SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: None,
        },
        schedule: LrSchedule::constant(),
        arch: Architecture::Mlp { hidden: 8 },
        partner_pool: PartnerPoolKind::Unlabeled,
        train_transform: TrainTransform::None,
        eval_batch: 32,
    };
    let a = run_scenario(&config, &train, &test, 9, &mut (), None)?;
    let b = run_scenario(&config, &train, &test, 9, &mut (), None)?;
    let same = a.iter().zip(&b).all(|(x, y)| {
        x.selected == y.selected
            && x.test_accuracy == y.test_accuracy
            && x.train_losses == y.train_losses
    });
    out.push(check(
        "repeated scenario runs are identical",
        same && a.len() == 3,
        format!("{} cycles compared", a.len()),
    ));
    Ok(())
}

/// Runs every check. An `Err` means a check could not execute at all.
pub fn run_all() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    gradient_checks(&mut out)?;
    oracle_checks(&mut out)?;
    determinism_check(&mut out)?;
    Ok(out)
}
