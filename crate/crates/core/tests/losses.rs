//! Composite training losses: term additivity, label modes, and closed forms.

use augal_core::augment::{apply_cutmix, sample_cutmix_event, ImageDims};
use augal_core::losses::{loss_and_grad, CmLabelMode, LossConfig, LossContext, TrainBatch};
use augal_core::model::{Architecture, Model, ModelSpec};
use augal_core::rng::{epoch_sample, Purpose, RngStream};
use augal_core::tensor::Tensor;
use augal_core::verify::{term_value, term_value_and_grads, LossTerm};

const DIMS: [usize; 3] = [1, 6, 6];

fn batch(m: usize, classes: usize, seed: u64) -> TrainBatch {
    let mut s = RngStream::new(seed, Purpose::Synth, 55, 0);
    let n = m * 36;
    TrainBatch {
        images: Tensor::new(vec![m, 1, 6, 6], (0..n).map(|_| s.normal()).collect()).unwrap(),
        labels: (0..m).map(|i| i % classes).collect(),
        ids: (0..m).map(|i| 10 * i + 3).collect(),
    }
}

fn full_config() -> LossConfig {
    LossConfig {
        use_co: true,
        use_cm: true,
        k_co: 3,
        k_cm: 2,
        ..LossConfig::task_only(3)
    }
}

fn ctx() -> LossContext<'static> {
    LossContext {
        seed: 2,
        cycle: 1,
        epoch: 4,
        audit: None,
    }
}

#[test]
fn total_gradient_is_sum_of_term_gradients() {
    for arch in [
        Architecture::Mlp { hidden: 8 },
        Architecture::DeskCnn {
            conv1: 2,
            conv2: 3,
            hidden: 5,
        },
    ] {
        let model = Model::build(&ModelSpec::new(arch, DIMS, 3, 1)).unwrap();
        let b = batch(5, 3, 1);
        let cfg = full_config();
        let (_, total) = term_value_and_grads(&model, &b, &cfg, &ctx(), LossTerm::Total).unwrap();
        let parts: Vec<Vec<Vec<f64>>> = [LossTerm::Ce, LossTerm::Co, LossTerm::Cm]
            .iter()
            .map(|&t| term_value_and_grads(&model, &b, &cfg, &ctx(), t).unwrap().1)
            .collect();
        for (p, g) in total.iter().enumerate() {
            for (i, &v) in g.iter().enumerate() {
                let sum = parts[0][p][i] + parts[1][p][i] + parts[2][p][i];
                assert!(
                    (v - sum).abs() < 1e-10,
                    "{arch:?} param {p}[{i}]: {v} vs {sum}"
                );
            }
        }
    }
}

#[test]
fn zero_model_losses_equal_log_classes() {
    // all-zero parameters give uniform predictions on every view
    let classes = 4;
    let mut model = Model::build(&ModelSpec::new(
        Architecture::Mlp { hidden: 3 },
        DIMS,
        classes,
        1,
    ))
    .unwrap();
    for p in model.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let b = batch(2, classes, 3);
    let mut m = model.clone();
    let out = loss_and_grad(&mut m, &b, &full_config(), &ctx()).unwrap();
    let ln_c = (classes as f64).ln();
    assert!((out.l_ce - ln_c).abs() < 1e-12);
    assert!((out.l_co - ln_c).abs() < 1e-12);
    assert!((out.l_cm - ln_c).abs() < 1e-12);
    assert!((out.l_total - 3.0 * ln_c).abs() < 1e-12);
}

#[test]
fn hard_label_cutmix_uses_own_labels() {
    let classes = 3;
    let model = Model::build(&ModelSpec::new(
        Architecture::Mlp { hidden: 7 },
        DIMS,
        classes,
        4,
    ))
    .unwrap();
    let b = batch(4, classes, 9);
    let cfg = LossConfig {
        cm_label_mode: CmLabelMode::Hard,
        ..full_config()
    };
    let c = ctx();
    let dims = ImageDims::new(1, 6, 6);
    let positions: Vec<usize> = (0..b.len()).collect();

    // per view: logits of every row, then CE against y_i and pairwise distances
    let mut views: Vec<Vec<Vec<f64>>> = vec![Vec::new(); cfg.k_cm];
    for (j, &id) in b.ids.iter().enumerate() {
        let mut s = RngStream::new(
            c.seed,
            Purpose::CutmixTrain,
            c.cycle,
            epoch_sample(c.epoch, id),
        );
        for view in views.iter_mut() {
            let e = sample_cutmix_event(&mut s, dims, &positions, cfg.lambda_min);
            let (img, _) =
                apply_cutmix(b.images.row(j), b.images.row(e.partner), dims, &e.cut).unwrap();
            let t = Tensor::new(vec![1, 1, 6, 6], img).unwrap();
            view.push(model.logits(&t).unwrap().data().to_vec());
        }
    }
    let softmax = |z: &[f64]| {
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let m = b.len() as f64;
    let mut want = 0.0;
    for j in 0..b.len() {
        let p0 = softmax(&views[0][j]);
        let p1 = softmax(&views[1][j]);
        let pair: f64 = p0.iter().zip(&p1).map(|(a, q)| (a - q).powi(2)).sum();
        let ce = -(p0[b.labels[j]].ln() + p1[b.labels[j]].ln()) / 2.0;
        want += (pair + ce) / m;
    }
    let (got, _) = term_value(&model, &b, &cfg, &c, LossTerm::Cm).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}
