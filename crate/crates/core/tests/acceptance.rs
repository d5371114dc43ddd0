//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line to stdout
//! (bypassing the test harness capture) and then asserts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use augal_core::active::{run_scenario, CycleReport, ScenarioConfig};
use augal_core::augment::{
    cutmix_lambda, sample_cutmix_event, sample_cutout_box, CutoutBox, ImageDims, TrainTransform,
};
use augal_core::data::{
    load_cifar, load_idx, synth_blobs, BlobSpec, CifarVariant, Dataset, NormSource, Normalization,
    Split,
};
use augal_core::harness::{self, GridSpec, LossId, RunOptions, CSV_HEADER};
use augal_core::losses::{entropy, LossBreakdown, LossConfig, LossContext, TrainBatch};
use augal_core::model::{Architecture, Model, ModelSpec};
use augal_core::optim::{LrSchedule, SgdConfig};
use augal_core::rng::{epoch_sample, Purpose, RngStream};
use augal_core::tensor::Tensor;
use augal_core::uncertainty::{
    k_cutout_score, select_top_b, PartnerPoolKind, ScoreRecord, Strategy,
};
use augal_core::verify::{term_value, term_value_and_grads, LossTerm};
use augal_core::Error;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "[acceptance] {status} criterion {id} ({name}): {detail}"
    );
    let _ = out.flush();
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// ---------------------------------------------------------------- oracles

/// Cutout computed directly from the box definition.
fn oracle_cutout(image: &[f64], dims: ImageDims, cut: &CutoutBox) -> Vec<f64> {
    let mut out = image.to_vec();
    for c in 0..dims.channels {
        for r in 0..dims.height {
            for col in 0..dims.width {
                let (ri, ci) = (r as i64, col as i64);
                let inside = ri >= cut.row0
                    && ri < cut.row0 + cut.height as i64
                    && ci >= cut.col0
                    && ci < cut.col0 + cut.width as i64;
                if inside {
                    out[(c * dims.height + r) * dims.width + col] = 0.0;
                }
            }
        }
    }
    out
}

/// Cutmix computed directly from the box definition; returns the view and the
/// surviving-area fraction of `a` counted pixel by pixel.
fn oracle_cutmix(a: &[f64], b: &[f64], dims: ImageDims, cut: &CutoutBox) -> (Vec<f64>, f64) {
    let mut out = a.to_vec();
    let mut pasted = 0usize;
    for r in 0..dims.height {
        for col in 0..dims.width {
            let (ri, ci) = (r as i64, col as i64);
            let inside = ri >= cut.row0
                && ri < cut.row0 + cut.height as i64
                && ci >= cut.col0
                && ci < cut.col0 + cut.width as i64;
            if inside {
                pasted += 1;
                for c in 0..dims.channels {
                    let i = (c * dims.height + r) * dims.width + col;
                    out[i] = b[i];
                }
            }
        }
    }
    let total = dims.height * dims.width;
    (out, (total - pasted) as f64 / total as f64)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Logits of one image through the single-sample path.
fn logits_of(model: &Model, image: &[f64], dims: ImageDims) -> Vec<f64> {
    let [c, h, w] = dims.as_array();
    let t = Tensor::new(vec![1, c, h, w], image.to_vec()).unwrap();
    model.logits(&t).unwrap().data().to_vec()
}

fn soft_ce(logits: &[f64], target: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    -target
        .iter()
        .zip(logits)
        .map(|(t, z)| t * (z - lse))
        .sum::<f64>()
}

/// Mean over all ordered pairs `i != j` of `||p_i - p_j||^2`.
fn brute_pairwise(probs: &[Vec<f64>]) -> f64 {
    let k = probs.len();
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                sum += probs[i]
                    .iter()
                    .zip(&probs[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>();
            }
        }
    }
    sum / (k * (k - 1)) as f64
}

/// Consistency loss from per-view logits and targets, by enumeration:
/// `sum_rows sum_{i<j} ||p_i - p_j||^2 / (C(K,2) * M) + mean_v mean_rows CE`.
fn oracle_consistency(logits: &[Vec<Vec<f64>>], targets: &[Vec<Vec<f64>>]) -> f64 {
    let k = logits.len();
    let m = logits[0].len();
    let mut pair = 0.0;
    for row in 0..m {
        let probs: Vec<Vec<f64>> = logits.iter().map(|view| softmax(&view[row])).collect();
        pair += brute_pairwise(&probs) * (k * (k - 1) / 2) as f64;
    }
    let pairs = (k * (k - 1) / 2) as f64;
    let mut ce = 0.0;
    for v in 0..k {
        ce += (0..m)
            .map(|r| soft_ce(&logits[v][r], &targets[v][r]))
            .sum::<f64>()
            / m as f64;
    }
    pair / (pairs * m as f64) + ce / k as f64
}

fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

fn probe_batch(dims: ImageDims, classes: usize, m: usize, seed: u64) -> TrainBatch {
    let mut s = RngStream::new(seed, Purpose::Synth, 1234, 0);
    let data: Vec<f64> = (0..m * dims.len()).map(|_| s.normal()).collect();
    let [c, h, w] = dims.as_array();
    TrainBatch {
        images: Tensor::new(vec![m, c, h, w], data).unwrap(),
        labels: (0..m).map(|i| (i * 2 + 1) % classes).collect(),
        ids: (0..m).map(|i| 40 + 3 * i).collect(),
    }
}

fn jitter_biases(model: &mut Model, seed: u64) {
    let mut s = RngStream::new(seed, Purpose::Synth, 4321, 0);
    let bias: Vec<bool> = model
        .named_params()
        .map(|(n, _)| n.ends_with("bias"))
        .collect();
    for (p, b) in model.params_mut().iter_mut().zip(bias) {
        if b {
            p.data_mut().iter_mut().for_each(|v| *v += 0.1 * s.normal());
        }
    }
}

// ---------------------------------------------------------------- criterion 1

struct FdResult {
    max_rel: f64,
    compared: usize,
    kinked: usize,
}

/// Central differences with step `eps` over every parameter coordinate.
/// Coordinates whose probes change the ReLU/max-pool pattern are counted but
/// not compared. Relative error is `|a - n| / max(|a|, |n|, floor)`.
fn finite_difference_check(
    model: &Model,
    batch: &TrainBatch,
    cfg: &LossConfig,
    ctx: &LossContext<'_>,
    term: LossTerm,
    eps: f64,
    floor: f64,
) -> FdResult {
    let (_, analytic) = term_value_and_grads(model, batch, cfg, ctx, term).unwrap();
    let (_, pattern) = term_value(model, batch, cfg, ctx, term).unwrap();
    let mut probe = model.clone();
    let mut out = FdResult {
        max_rel: 0.0,
        compared: 0,
        kinked: 0,
    };
    for (p, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let w = probe.params()[p].data()[i];
            probe.params_mut()[p].data_mut()[i] = w + eps;
            let (up, pu) = term_value(&probe, batch, cfg, ctx, term).unwrap();
            probe.params_mut()[p].data_mut()[i] = w - eps;
            let (down, pd) = term_value(&probe, batch, cfg, ctx, term).unwrap();
            probe.params_mut()[p].data_mut()[i] = w;
            if pu != pattern || pd != pattern {
                out.kinked += 1;
                continue;
            }
            let n = (up - down) / (2.0 * eps);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            out.max_rel = out.max_rel.max(rel);
            out.compared += 1;
        }
    }
    out
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let classes = 3;
    let cfg = LossConfig {
        use_co: true,
        use_cm: true,
        k_co: 3,
        k_cm: 2,
        lambda_min: 0.5,
        ..LossConfig::task_only(5)
    };
    let ctx = LossContext {
        seed: 17,
        cycle: 1,
        epoch: 2,
        audit: None,
    };
    let cases = [
        (
            "mlp",
            Architecture::Mlp { hidden: 10 },
            ImageDims::new(1, 8, 8),
        ),
        (
            "reduced desk_cnn",
            Architecture::DeskCnn {
                conv1: 4,
                conv2: 8,
                hidden: 16,
            },
            ImageDims::new(1, 12, 12),
        ),
    ];
    let mut lines = Vec::new();
    let mut pass = true;
    for (label, arch, dims) in cases {
        let mut model = Model::build(&ModelSpec::new(arch, dims.as_array(), classes, 8)).unwrap();
        assert!(
            model.parameter_count() <= 5000,
            "{label}: {}",
            model.parameter_count()
        );
        jitter_biases(&mut model, 3);
        let batch = probe_batch(dims, classes, 4, 5);
        for term in LossTerm::ALL {
            // eps 1e-3 with errors measured against max(|a|, |n|, 1e-3)
            let r = finite_difference_check(&model, &batch, &cfg, &ctx, term, 1e-3, 1e-3);
            // eps 1e-4 with errors measured against max(|a|, |n|, 1e-6)
            let fine = finite_difference_check(&model, &batch, &cfg, &ctx, term, 1e-4, 1e-6);
            let ok =
                r.max_rel < 1e-4 && fine.max_rel < 1e-4 && r.kinked * 3 < r.compared + r.kinked;
            pass &= ok;
            lines.push(format!(
                "{label} ({} params) {}: {:.1e} ({} compared, {} kinked), eps 1e-4 strict {:.1e}",
                model.parameter_count(),
                term.as_str(),
                r.max_rel,
                r.compared,
                r.kinked,
                fine.max_rel
            ));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    report(
        1,
        "gradient correctness",
        pass,
        &format!("max relative errors [{}] in {secs:.1}s", lines.join("; ")),
    );
    assert!(pass, "{lines:#?}");
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_pairwise_oracles() {
    let dims = ImageDims::new(1, 10, 10);
    let classes = 4;
    let mut model = Model::build(&ModelSpec::new(
        Architecture::DeskCnn {
            conv1: 3,
            conv2: 4,
            hidden: 8,
        },
        dims.as_array(),
        classes,
        2,
    ))
    .unwrap();
    jitter_biases(&mut model, 9);
    let batch = probe_batch(dims, classes, 5, 11);
    let mut worst: f64 = 0.0;

    // k-cutout score against enumeration of its own boxes
    for k in 2..=5 {
        for sample in 0..5 {
            let image = batch.images.row(sample);
            let stream = RngStream::new(4, Purpose::CutoutScore, 2, sample as u64);
            let got = k_cutout_score(&model, image, dims, k, 5, stream.clone()).unwrap();
            let mut s = stream;
            let probs: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let cut = sample_cutout_box(&mut s, dims, 5);
                    softmax(&logits_of(&model, &oracle_cutout(image, dims, &cut), dims))
                })
                .collect();
            worst = worst.max((got - brute_pairwise(&probs)).abs());
        }
    }

    // training consistency terms against enumeration of their views
    let ctx = LossContext {
        seed: 6,
        cycle: 3,
        epoch: 1,
        audit: None,
    };
    let m = batch.len();
    for k in 2..=5 {
        let cfg = LossConfig {
            use_co: true,
            use_cm: true,
            k_co: k,
            k_cm: k,
            lambda_min: 0.3,
            ..LossConfig::task_only(4)
        };
        // L_co
        let mut logits = vec![Vec::new(); k];
        let mut targets = vec![Vec::new(); k];
        for (j, &id) in batch.ids.iter().enumerate() {
            let mut s = RngStream::new(
                ctx.seed,
                Purpose::CutoutTrain,
                ctx.cycle,
                epoch_sample(ctx.epoch, id),
            );
            for v in 0..k {
                let cut = sample_cutout_box(&mut s, dims, cfg.cutout_size);
                logits[v].push(logits_of(
                    &model,
                    &oracle_cutout(batch.images.row(j), dims, &cut),
                    dims,
                ));
                targets[v].push(one_hot(batch.labels[j], classes));
            }
        }
        let want = oracle_consistency(&logits, &targets);
        let (got, _) = term_value(&model, &batch, &cfg, &ctx, LossTerm::Co).unwrap();
        worst = worst.max((got - want).abs());

        // L_cm with soft labels and in-batch partners
        let positions: Vec<usize> = (0..m).collect();
        let mut logits = vec![Vec::new(); k];
        let mut targets = vec![Vec::new(); k];
        for (j, &id) in batch.ids.iter().enumerate() {
            let mut s = RngStream::new(
                ctx.seed,
                Purpose::CutmixTrain,
                ctx.cycle,
                epoch_sample(ctx.epoch, id),
            );
            for v in 0..k {
                let ev = sample_cutmix_event(&mut s, dims, &positions, cfg.lambda_min);
                let (view, lambda) = oracle_cutmix(
                    batch.images.row(j),
                    batch.images.row(ev.partner),
                    dims,
                    &ev.cut,
                );
                let mut t = vec![0.0; classes];
                t[batch.labels[j]] += lambda;
                t[batch.labels[ev.partner]] += 1.0 - lambda;
                logits[v].push(logits_of(&model, &view, dims));
                targets[v].push(t);
            }
        }
        let want = oracle_consistency(&logits, &targets);
        let (got, _) = term_value(&model, &batch, &cfg, &ctx, LossTerm::Cm).unwrap();
        worst = worst.max((got - want).abs());
    }
    let pass = worst < 1e-12;
    report(
        2,
        "pairwise oracle equivalence",
        pass,
        &format!("k_cutout_score, L_co and L_cm for K in 2..=5: max |library - enumeration| = {worst:.2e}"),
    );
    assert!(pass, "{worst}");
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_analytic_anchors() {
    let h = entropy(&[0.1; 10]);
    let entropy_ok = (h - 10f64.ln()).abs() < 1e-12;

    // every box placement (including clipped ones) on a small grid
    let dims = ImageDims::new(2, 7, 9);
    let mut lambda_ok = true;
    let mut boxes = 0;
    for row0 in -4i64..9 {
        for col0 in -4i64..11 {
            for (bh, bw) in [(1, 1), (3, 2), (4, 5), (7, 9), (10, 12)] {
                let cut = CutoutBox::new(row0, col0, bh, bw);
                let mut area = 0usize;
                for r in 0..7i64 {
                    for c in 0..9i64 {
                        if r >= row0 && r < row0 + bh as i64 && c >= col0 && c < col0 + bw as i64 {
                            area += 1;
                        }
                    }
                }
                lambda_ok &= cutmix_lambda(&cut, dims) == 1.0 - area as f64 / 63.0;
                boxes += 1;
            }
        }
    }

    let dims = ImageDims::new(1, 8, 8);
    let model = Model::build(&ModelSpec::new(
        Architecture::Mlp { hidden: 6 },
        dims.as_array(),
        3,
        1,
    ))
    .unwrap();
    let batch = probe_batch(dims, 3, 6, 2);
    let mut additive = true;
    for (use_co, use_cm) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = LossConfig {
            use_co,
            use_cm,
            ..LossConfig::task_only(3)
        };
        let ctx = LossContext {
            seed: 1,
            cycle: 0,
            epoch: 0,
            audit: None,
        };
        let mut m = model.clone();
        let b: LossBreakdown =
            augal_core::losses::loss_and_grad(&mut m, &batch, &cfg, &ctx).unwrap();
        additive &= b.l_total == b.l_ce + b.l_co + b.l_cm;
        additive &= use_co || b.l_co == 0.0;
        additive &= use_cm || b.l_cm == 0.0;
    }
    let pass = entropy_ok && lambda_ok && additive;
    report(
        3,
        "analytic anchors",
        pass,
        &format!(
            "entropy(uniform 10) - ln 10 = {:.1e}; cutmix lambda exact on {boxes} boxes: {lambda_ok}; breakdown additivity exact: {additive}",
            h - 10f64.ln()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 4

fn toy_grid(strategies: Vec<Strategy>, seeds: Vec<u64>, cycles: usize) -> GridSpec {
    GridSpec {
        name: "toy".into(),
        dataset: harness::DatasetConfig::SynthBlobs {
            per_class: 30,
            classes: 3,
            height: 8,
            width: 8,
            separation: 3.0,
            seed: 5,
        },
        pool_size: 90,
        budget: 6,
        cycles,
        epochs: 3,
        batch_size: 8,
        eval_batch: 17,
        optimizer: SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: Some(1.0),
        },
        schedule: LrSchedule {
            milestones: vec![2],
            factor: 0.1,
        },
        model: Architecture::DeskCnn {
            conv1: 4,
            conv2: 8,
            hidden: 16,
        },
        augment: harness::AugmentConfig {
            cutout_size: Some(4),
            ..Default::default()
        },
        strategies,
        losses: vec![LossId::TaskCoCm],
        seeds,
    }
}

/// Every CSV under `root`, keyed by relative path, without the wall-time column.
fn metric_columns(root: &Path) -> Vec<(String, Vec<String>)> {
    let mut out = Vec::new();
    for s in std::fs::read_dir(root).unwrap() {
        let s = s.unwrap().path();
        if !s.is_dir() {
            continue;
        }
        for l in std::fs::read_dir(&s).unwrap() {
            let l = l.unwrap().path();
            for seed in std::fs::read_dir(&l).unwrap() {
                let file = seed.unwrap().path().join("cycles.csv");
                let text = std::fs::read_to_string(&file).unwrap();
                let rows = text
                    .lines()
                    .map(|line| line.rsplit_once(',').unwrap().0.to_string())
                    .collect();
                out.push((file.strip_prefix(root).unwrap().display().to_string(), rows));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_4_determinism() {
    let grid = toy_grid(Strategy::ALL.to_vec(), vec![3], 2);
    let data = harness::load_dataset(&grid.dataset, Path::new(".")).unwrap();
    let a = scratch("determinism-a");
    let b = scratch("determinism-b");
    for dir in [&a, &b] {
        let m = harness::run_grid_on(&grid, &data, &RunOptions::new(dir, "."), None).unwrap();
        assert_eq!(m.failures().count(), 0);
    }
    let cols_a = metric_columns(&a);
    let reruns_identical = cols_a == metric_columns(&b);

    // selected-index sets straight from the loop
    let dims = data.train.dims();
    let mut selections_identical = true;
    let mut cycle0: Vec<CycleReport> = Vec::new();
    for strategy in Strategy::ALL {
        let cfg = grid.scenario(strategy, LossId::TaskCoCm, dims.height, dims.width);
        let r1 = run_scenario(&cfg, &data.train, &data.test, 3, &mut (), None).unwrap();
        let r2 = run_scenario(&cfg, &data.train, &data.test, 3, &mut (), None).unwrap();
        for (x, y) in r1.iter().zip(&r2) {
            selections_identical &= x.selected == y.selected
                && x.test_accuracy == y.test_accuracy
                && x.train_losses == y.train_losses;
        }
        cycle0.push(r1[0].clone());
    }
    let cycle0_shared = cycle0.iter().all(|r| {
        r.test_accuracy == cycle0[0].test_accuracy
            && r.train_losses == cycle0[0].train_losses
            && r.labeled_count == cycle0[0].labeled_count
    });
    // same check on the CSV rows: cycle-0 columns other than strategy agree
    let strip = |row: &str| {
        let f: Vec<&str> = row.split(',').collect();
        [&f[..2], &f[3..]].concat().join(",")
    };
    let rows0: Vec<String> = cols_a.iter().map(|(_, rows)| strip(&rows[1])).collect();
    let csv_cycle0_shared = rows0.iter().all(|r| *r == rows0[0]) && rows0.len() == 5;

    let pass = reruns_identical && selections_identical && cycle0_shared && csv_cycle0_shared;
    report(
        4,
        "determinism",
        pass,
        &format!(
            "rerun CSV metrics identical: {reruns_identical}; selections identical: {selections_identical}; cycle 0 shared by all 5 strategies: {cycle0_shared} (accuracy {:.2}%)",
            cycle0[0].test_accuracy
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 5

fn fashion_dir() -> Option<PathBuf> {
    let root = std::env::var_os(harness::DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    root.join("fashion-mnist/train-images-idx3-ubyte")
        .is_file()
        .then_some(root)
}

#[test]
fn criterion_5_fashion_desk_trends() {
    let Some(data_dir) = fashion_dir() else {
        report(
            5,
            "fashion-desk trends",
            false,
            "FashionMNIST IDX files not found under $AUGAL_DATA_DIR or ./data/fashion-mnist",
        );
        panic!("FashionMNIST data missing");
    };
    let started = Instant::now();
    let base = GridSpec::load("fashion-desk").unwrap();
    assert_eq!(
        (
            base.pool_size,
            base.budget,
            base.cycles,
            base.epochs,
            base.batch_size
        ),
        (10000, 300, 3, 20, 128)
    );
    assert_eq!(base.seeds, vec![1, 2, 3]);
    let data = harness::load_dataset(&base.dataset, &data_dir).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (60000, 10000));
    let out = scratch("fashion-desk");
    let cells = [
        (Strategy::Margin, LossId::TaskCoCm),
        (Strategy::CutmixEntropy, LossId::TaskCoCm),
        (Strategy::Random, LossId::Task),
    ];
    let progress = |cell: &harness::Cell, r: &CycleReport| {
        let mut o = std::io::stdout().lock();
        let _ = writeln!(
            o,
            "  fashion-desk {cell} cycle {} labeled {} accuracy {:.2}% ({:.0}s)",
            r.cycle, r.labeled_count, r.test_accuracy, r.wall_time_s
        );
    };
    for (strategy, loss) in cells {
        let mut grid = base.clone();
        grid.strategies = vec![strategy];
        grid.losses = vec![loss];
        let manifest = harness::run_grid_on(
            &grid,
            &data,
            &RunOptions::new(&out, &data_dir),
            Some(&progress),
        )
        .unwrap();
        assert_eq!(manifest.failures().count(), 0, "{:?}", manifest.cells);
    }
    let curves = harness::aggregate(&out).unwrap();
    let final_mean = |s: &str, l: &str| {
        let c = curves
            .iter()
            .find(|c| c.strategy == s && c.loss == l)
            .unwrap();
        let p = c.points.last().unwrap();
        assert_eq!(p.cycle, base.cycles);
        assert_eq!(p.seeds, base.seeds.len());
        p.mean
    };
    let margin = final_mean("margin", "task+co+cm");
    let cutmix = final_mean("cutmix_entropy", "task+co+cm");
    let random = final_mean("random", "task");
    let pass = margin > random && cutmix >= random - 0.5;
    report(
        5,
        "fashion-desk trends",
        pass,
        &format!(
            "final-cycle mean accuracy over 3 seeds: margin/task+co+cm {margin:.2}, cutmix/task+co+cm {cutmix:.2}, random/task {random:.2} ({:.0}s)",
            started.elapsed().as_secs_f64()
        ),
    );
    assert!(margin > random, "margin {margin} <= random {random}");
    assert!(
        cutmix >= random - 0.5,
        "cutmix {cutmix} < random {random} - 0.5"
    );
}

// ---------------------------------------------------------------- criterion 6

fn transform(kind: u64, x: f64) -> f64 {
    match kind {
        0 => 3.0 * x - 7.0,
        1 => x.exp(),
        2 => x * x * x,
        3 => x.atan(),
        4 => 1.0 / (1.0 + (-x).exp()),
        5 => (x + 10.0).ln(),
        _ => 0.5 * x + 0.25 * x.tanh(),
    }
}

#[test]
fn criterion_6_selection_invariance() {
    let mut s = RngStream::new(2024, Purpose::Synth, 6, 0);
    let mut invariant = 0;
    let vectors = 1000;
    for case in 0..vectors {
        let n = 1 + s.below(60) as usize;
        // scores on a coarse grid in [-5, 5]: ties occur, and every transform
        // stays strictly increasing in floating point
        let mut indices: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        s.shuffle(&mut indices);
        let scores: Vec<f64> = (0..n).map(|_| (s.below(41) as f64 - 20.0) / 4.0).collect();
        let b = s.below(n as u64 + 2) as usize;
        let kind = case % 7;
        let records: Vec<ScoreRecord> = indices
            .iter()
            .zip(&scores)
            .map(|(&index, &score)| ScoreRecord {
                index,
                strategy: Strategy::KCutout,
                score,
            })
            .collect();
        let mapped: Vec<ScoreRecord> = records
            .iter()
            .map(|r| ScoreRecord {
                score: transform(kind, r.score),
                ..r.clone()
            })
            .collect();
        let base = select_top_b(&records, b);
        // oracle: sort by (score desc, index asc), take b, sort ascending
        let mut order: Vec<&ScoreRecord> = records.iter().collect();
        order.sort_by(|x, y| {
            y.score
                .partial_cmp(&x.score)
                .unwrap()
                .then(x.index.cmp(&y.index))
        });
        let mut want: Vec<usize> = order.iter().take(b).map(|r| r.index).collect();
        want.sort_unstable();
        if base == select_top_b(&mapped, b) && base == want {
            invariant += 1;
        }
    }
    let tied: Vec<ScoreRecord> = [9usize, 2, 7, 4, 0, 5]
        .iter()
        .map(|&index| ScoreRecord {
            index,
            strategy: Strategy::Entropy,
            score: 0.25,
        })
        .collect();
    let ties_ok = select_top_b(&tied, 3) == vec![0, 2, 4] && select_top_b(&tied, 0).is_empty();
    let pass = invariant == vectors && ties_ok;
    report(
        6,
        "selection invariance",
        pass,
        &format!("{invariant}/{vectors} random vectors unchanged under increasing transforms; all-equal scores pick lowest indices: {ties_ok}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_format_golden() {
    let identity = |c| NormSource::Given(Normalization::identity(c));
    // IDX fixture
    let idx = load_idx(
        &fixture("two-images-idx3-ubyte"),
        &fixture("two-labels-idx1-ubyte"),
        Split::Train,
        identity(1),
    )
    .unwrap();
    let expected: [[u8; 6]; 2] = [[0, 1, 127, 128, 254, 255], [17, 34, 51, 68, 85, 102]];
    let mut idx_ok =
        idx.len() == 2 && idx.labels() == [7, 2] && idx.dims() == ImageDims::new(1, 3, 2);
    for (i, want) in expected.iter().enumerate() {
        let got: Vec<f64> = idx.image(i).to_vec();
        idx_ok &= got == want.iter().map(|&v| v as f64 / 255.0).collect::<Vec<_>>();
        let back: Vec<u8> = got.iter().map(|v| (v * 255.0).round() as u8).collect();
        idx_ok &= back == want;
    }
    // the fitted normalization round-trips to the same pixels
    let fitted = load_idx(
        &fixture("two-images-idx3-ubyte"),
        &fixture("two-labels-idx1-ubyte"),
        Split::Train,
        NormSource::Fit,
    )
    .unwrap();
    for i in 0..2 {
        let back = fitted
            .normalization()
            .denormalize(fitted.image(i), fitted.dims());
        idx_ok &= back
            .iter()
            .zip(idx.image(i))
            .all(|(a, b)| (a - b).abs() < 1e-12);
    }

    // CIFAR fixtures
    let pixels: Vec<f64> = (0..3072)
        .map(|i| ((i * 7 + 3) % 256) as f64 / 255.0)
        .collect();
    let c10 = load_cifar(
        &[&fixture("one-record-cifar10.bin")],
        CifarVariant::Cifar10,
        Split::Test,
        identity(3),
    )
    .unwrap();
    let c100 = load_cifar(
        &[&fixture("one-record-cifar100.bin")],
        CifarVariant::Cifar100,
        Split::Test,
        identity(3),
    )
    .unwrap();
    let cifar_ok = c10.len() == 1
        && c10.labels() == [3]
        && c10.image(0) == pixels.as_slice()
        && c10.dims() == ImageDims::new(3, 32, 32)
        && c100.labels() == [87]
        && c100.classes() == 100
        && c100.image(0) == pixels.as_slice();

    // malformed inputs
    let bad_magic = load_idx(
        &fixture("two-images-idx3-ubyte"),
        &fixture("bad-magic-labels-idx1-ubyte"),
        Split::Train,
        identity(1),
    );
    let swapped = load_idx(
        &fixture("two-labels-idx1-ubyte"),
        &fixture("two-labels-idx1-ubyte"),
        Split::Train,
        identity(1),
    );
    let short = load_cifar(
        &[&fixture("short-cifar10.bin")],
        CifarVariant::Cifar10,
        Split::Test,
        identity(3),
    );
    let errors_ok = matches!(bad_magic, Err(Error::Format { offset: 0, .. }))
        && matches!(swapped, Err(Error::Format { offset: 0, .. }))
        && matches!(short, Err(Error::Format { .. }));

    // results CSV on a 1-cycle toy run
    let grid = toy_grid(vec![Strategy::Entropy], vec![4], 1);
    let out = scratch("csv-schema");
    let data = harness::load_dataset(&grid.dataset, Path::new(".")).unwrap();
    let dims = data.train.dims();
    harness::run_grid_on(&grid, &data, &RunOptions::new(&out, "."), None).unwrap();
    let text = std::fs::read_to_string(out.join("entropy/task+co+cm/4/cycles.csv")).unwrap();
    let reports = run_scenario(
        &grid.scenario(Strategy::Entropy, LossId::TaskCoCm, dims.height, dims.width),
        &data.train,
        &data.test,
        4,
        &mut (),
        None,
    )
    .unwrap();
    let lines: Vec<&str> = text.split_terminator('\n').collect();
    let mut csv_ok = text.ends_with('\n')
        && !text.contains('\r')
        && lines.len() == 3
        && lines[0]
            == "cycle,seed,strategy,loss,labeled_count,test_accuracy,l_ce,l_co,l_cm,wall_time_s"
        && lines[0] == CSV_HEADER;
    for (line, r) in lines[1..].iter().zip(&reports) {
        let (metrics, wall) = line.rsplit_once(',').unwrap();
        let l = r.final_loss();
        let want = format!(
            "{},4,entropy,task+co+cm,{},{},{},{},{}",
            r.cycle, r.labeled_count, r.test_accuracy, l.l_ce, l.l_co, l.l_cm
        );
        let (int, frac) = wall.split_once('.').unwrap_or(("", ""));
        csv_ok &= metrics == want
            && !int.is_empty()
            && int.bytes().all(|b| b.is_ascii_digit())
            && frac.len() == 3
            && frac.bytes().all(|b| b.is_ascii_digit());
    }

    let pass = idx_ok && cifar_ok && errors_ok && csv_ok;
    report(
        7,
        "format golden tests",
        pass,
        &format!("IDX fixture: {idx_ok}; CIFAR-10/100 fixtures: {cifar_ok}; malformed inputs rejected: {errors_ok}; CSV schema: {csv_ok}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 8

fn blob_scenario(strategy: Strategy, train: &Dataset) -> ScenarioConfig {
    ScenarioConfig {
        pool_size: train.len(),
        budget: 20,
        cycles: 2,
        strategy,
        loss: LossConfig::task_only(2),
        epochs: 20,
        batch_size: 16,
        optimizer: SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: None,
        },
        schedule: LrSchedule::constant(),
        arch: Architecture::Mlp { hidden: 32 },
        partner_pool: PartnerPoolKind::Unlabeled,
        train_transform: TrainTransform::None,
        eval_batch: 100,
    }
}

#[test]
fn criterion_8_synthetic_sanity() {
    let started = Instant::now();
    let spec = |separation| BlobSpec {
        per_class: 100,
        classes: 4,
        height: 8,
        width: 8,
        separation,
        seed: 12,
    };
    let mut lines = Vec::new();
    let mut pass = true;

    let far = spec(8.0);
    let (train, test) = (
        synth_blobs(&far, Split::Train).unwrap(),
        synth_blobs(&far, Split::Test).unwrap(),
    );
    for strategy in Strategy::ALL {
        let reports = run_scenario(
            &blob_scenario(strategy, &train),
            &train,
            &test,
            1,
            &mut (),
            None,
        )
        .unwrap();
        let best = reports.iter().map(|r| r.test_accuracy).fold(0.0, f64::max);
        pass &= best >= 95.0;
        lines.push(format!("{strategy} {best:.2}%"));
    }

    let chance = 100.0 / 4.0;
    let sigma = 100.0 * (0.25f64 * 0.75 / 400.0).sqrt();
    let flat = spec(0.0);
    let (train, test) = (
        synth_blobs(&flat, Split::Train).unwrap(),
        synth_blobs(&flat, Split::Test).unwrap(),
    );
    let mut extreme: f64 = 0.0;
    for strategy in Strategy::ALL {
        let reports = run_scenario(
            &blob_scenario(strategy, &train),
            &train,
            &test,
            1,
            &mut (),
            None,
        )
        .unwrap();
        for r in &reports {
            extreme = extreme.max((r.test_accuracy - chance).abs());
        }
    }
    pass &= extreme <= 3.0 * sigma;
    let secs = started.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    report(
        8,
        "synthetic sanity",
        pass,
        &format!(
            "separation 8, best accuracy by cycle 2: [{}]; separation 0: max |accuracy - 25| = {extreme:.2} (3 sigma = {:.2}); {secs:.1}s",
            lines.join(", "),
            3.0 * sigma
        ),
    );
    assert!(pass);
}
