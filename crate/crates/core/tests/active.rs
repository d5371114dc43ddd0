//! The active learning loop on synthetic blobs.

use augal_core::active::{
    advance, evaluate, init_scenario, run_scenario, train_cycle, CycleReport, RunObserver,
    ScenarioConfig,
};
use augal_core::augment::TrainTransform;
use augal_core::data::{synth_blobs, BlobSpec, Dataset, Split};
use augal_core::losses::LossConfig;
use augal_core::model::{Architecture, Model};
use augal_core::optim::{LrSchedule, SgdConfig};
use augal_core::uncertainty::{PartnerPoolKind, Strategy};

fn blobs(separation: f64) -> (Dataset, Dataset) {
    let spec = BlobSpec {
        per_class: 60,
        classes: 4,
        height: 6,
        width: 6,
        separation,
        seed: 21,
    };
    (
        synth_blobs(&spec, Split::Train).unwrap(),
        synth_blobs(&spec, Split::Test).unwrap(),
    )
}

fn config(strategy: Strategy, cycles: usize) -> ScenarioConfig {
    ScenarioConfig {
        pool_size: 200,
        budget: 12,
        cycles,
        strategy,
        loss: LossConfig {
            use_co: true,
            use_cm: true,
            ..LossConfig::task_only(3)
        },
        epochs: 6,
        batch_size: 8,
        optimizer: SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: None,
        },
        schedule: LrSchedule::constant(),
        arch: Architecture::Mlp { hidden: 16 },
        partner_pool: PartnerPoolKind::Unlabeled,
        train_transform: TrainTransform::None,
        eval_batch: 64,
    }
}

#[test]
fn initial_labeled_set_is_class_balanced_across_seeds() {
    let (train, _) = blobs(3.0);
    let mut cfg = config(Strategy::Random, 1);
    cfg.pool_size = train.len();
    cfg.budget = 20;
    let mut hist = [0usize; 4];
    let seeds = 200;
    for seed in 0..seeds {
        let init = init_scenario(&cfg, &train, seed).unwrap();
        for &i in &init.state.labeled {
            hist[train.label(i)] += 1;
        }
    }
    let n = (seeds as usize * 20) as f64;
    let sigma = (n * 0.25 * 0.75).sqrt();
    for (c, &h) in hist.iter().enumerate() {
        assert!((h as f64 - n / 4.0).abs() < 4.0 * sigma, "class {c}: {h}");
    }
}

#[derive(Default)]
struct Recorder(Vec<CycleReport>, Vec<usize>);

impl RunObserver for Recorder {
    fn on_cycle(&mut self, report: &CycleReport) -> augal_core::Result<()> {
        self.0.push(report.clone());
        Ok(())
    }

    fn on_scores(
        &mut self,
        _cycle: usize,
        scores: &[augal_core::uncertainty::ScoreRecord],
    ) -> augal_core::Result<()> {
        self.1.push(scores.len());
        Ok(())
    }
}

#[test]
fn labeled_set_grows_by_disjoint_batches() {
    let (train, test) = blobs(3.0);
    for strategy in Strategy::ALL {
        let cfg = config(strategy, 3);
        let mut rec = Recorder::default();
        let reports = run_scenario(&cfg, &train, &test, 4, &mut rec, None).unwrap();
        assert_eq!(reports.len(), 4);
        assert_eq!(rec.0.len(), 4);
        let mut seen = std::collections::BTreeSet::new();
        for (t, r) in reports.iter().enumerate() {
            assert_eq!(r.cycle, t);
            assert_eq!(r.labeled_count, 12 * (t + 1));
            if t > 0 {
                assert_eq!(r.selected.len(), 12);
                assert!(r.selected.windows(2).all(|w| w[0] < w[1]));
                assert!(
                    r.selected.iter().all(|i| seen.insert(*i)),
                    "{strategy} reselected"
                );
            }
        }
        // the unlabeled pool shrinks by b before each scoring pass
        assert_eq!(rec.1, vec![200 - 12, 200 - 24, 200 - 36]);
    }
}

#[test]
fn zero_cycles_reports_only_the_initial_model() {
    let (train, test) = blobs(3.0);
    let reports = run_scenario(
        &config(Strategy::Margin, 0),
        &train,
        &test,
        1,
        &mut (),
        None,
    )
    .unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!((reports[0].cycle, reports[0].labeled_count), (0, 12));
    assert!(reports[0].selected.is_empty());
}

#[test]
fn accuracy_does_not_depend_on_eval_batch() {
    let (train, test) = blobs(2.0);
    let cfg = config(Strategy::Random, 1);
    let init = init_scenario(&cfg, &train, 2).unwrap();
    let out = train_cycle(&init.state, &init.theta0, &cfg, &train, 2, None).unwrap();
    let full = evaluate(&out.model, &test, test.len()).unwrap();
    for batch in [1, 7, 64, 1000] {
        assert_eq!(evaluate(&out.model, &test, batch).unwrap(), full);
    }
}

#[test]
fn training_lowers_cross_entropy_on_separable_blobs() {
    let (train, _) = blobs(6.0);
    let mut cfg = config(Strategy::Random, 1);
    cfg.loss = LossConfig::task_only(3);
    cfg.budget = 40;
    let init = init_scenario(&cfg, &train, 3).unwrap();
    let out = train_cycle(&init.state, &init.theta0, &cfg, &train, 3, None).unwrap();
    assert_eq!(out.epochs.len(), cfg.epochs);
    assert_eq!(
        out.steps,
        (cfg.epochs * 40_usize.div_ceil(cfg.batch_size)) as u64
    );
    assert!(out.epochs.last().unwrap().l_ce < 0.5 * out.epochs[0].l_ce);
}

#[test]
fn every_cycle_starts_from_the_same_weights() {
    let (train, _) = blobs(3.0);
    let cfg = config(Strategy::Entropy, 3);
    let init = init_scenario(&cfg, &train, 5).unwrap();
    assert_eq!(
        init.theta0,
        Model::build(&cfg.model_spec(&train, 5)).unwrap().snapshot()
    );
    let mut state = init.state.clone();
    for _ in 0..3 {
        let a = train_cycle(&state, &init.theta0, &cfg, &train, 5, None).unwrap();
        let b = train_cycle(&state, &init.theta0, &cfg, &train, 5, None).unwrap();
        assert_eq!(a.model.snapshot(), b.model.snapshot());
        assert_eq!(a.epochs, b.epochs);
        state = advance(&state, &a.model, &cfg, &train, 5, None)
            .unwrap()
            .state;
        state.check(&init.pool).unwrap();
    }
    assert_eq!(state.labeled.len(), 48);
}
