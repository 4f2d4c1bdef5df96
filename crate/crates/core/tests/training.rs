mod common;

use common::standard_data;
use lightcrl::checkpoint::Checkpoint;
use lightcrl::eval::train_linear_probe;
use lightcrl::model::init_parameters;
use lightcrl::train::{finetune, fit, validation_loss, HeadConfig};
use lightcrl::{FusionKind, ModelConfig, TrainConfig, Trainer};

fn desk(fusion: FusionKind) -> ModelConfig {
    ModelConfig::desk(32, 48, fusion)
}

#[test]
fn first_epoch_beats_random_init() {
    let (_, data, _) = standard_data(0);
    let (train, val) = data.split_validation(0.1, 0).unwrap();
    let params = init_parameters::<f32>(&desk(FusionKind::Add), 0).unwrap();
    let before = validation_loss(&params, &train, 64).unwrap();
    let mut trainer = Trainer::new(params, TrainConfig::default());
    trainer.step_epoch(&train, &val).unwrap();
    let after = validation_loss(&trainer.params, &train, 64).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn short_fit_halves_validation_loss() {
    let (_, data, _) = standard_data(1);
    let config = TrainConfig { max_epochs: 40, seed: 1, ..TrainConfig::default() };
    let params = init_parameters::<f32>(&desk(FusionKind::Add), 1).unwrap();
    let result = fit(params, &data, None, &config).unwrap();
    assert!(result.history.len() <= 40);
    assert!(
        result.best_val <= 0.5 * result.initial_val,
        "{} vs initial {}",
        result.best_val,
        result.initial_val
    );
}

#[test]
fn identical_runs_give_identical_histories() {
    let (_, data, _) = standard_data(2);
    let config = TrainConfig { max_epochs: 3, seed: 5, ..TrainConfig::default() };
    let run = || {
        let params = init_parameters::<f32>(&desk(FusionKind::Attention), 5).unwrap();
        fit(params, &data, None, &config).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
}

#[test]
fn resumed_training_is_bit_identical() {
    let (_, data, _) = standard_data(3);
    let (train, val) = data.split_validation(0.1, 3).unwrap();
    let model = ModelConfig { d_model: 16, ..desk(FusionKind::Add) };
    let config = TrainConfig { max_epochs: 4, seed: 3, precision: 64, ..TrainConfig::default() };
    let params = init_parameters::<f64>(&model, 3).unwrap();

    let mut straight = Trainer::new(params.clone(), config.clone());
    straight.run(&train, &val, |_| Ok(())).unwrap();

    let mut first = Trainer::new(params, config);
    for _ in 0..2 {
        first.step_epoch(&train, &val).unwrap();
    }
    let bytes = Checkpoint::from_trainer(&first).to_bytes();
    let mut resumed = Checkpoint::<f64>::from_bytes(&bytes, Some(&model))
        .unwrap()
        .into_trainer()
        .unwrap();
    resumed.run(&train, &val, |_| Ok(())).unwrap();

    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.optimizer, straight.optimizer);
}

#[test]
fn frozen_finetune_matches_the_probe_step_by_step() {
    let (_, train, test) = standard_data(4);
    let params = init_parameters::<f64>(&desk(FusionKind::Add), 4).unwrap();
    let cfg = HeadConfig { epochs: 30, ..HeadConfig::default() };
    let probe = train_linear_probe(&params, &train, &test, &cfg).unwrap();
    let frozen = finetune(&params, &train, &test, &cfg, true).unwrap();
    assert_eq!(probe.losses.len(), frozen.losses.len());
    for (a, b) in probe.losses.iter().zip(&frozen.losses) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    for (p, q) in probe.head.params.iter().zip(&frozen.head.params) {
        for (x, y) in p.data().iter().zip(q.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
    assert_eq!(frozen.params, params);
}

#[test]
fn finetune_fits_separable_training_data() {
    let (_, train, _) = standard_data(5);
    let params = init_parameters::<f32>(&desk(FusionKind::Add), 5).unwrap();
    let run = finetune(&params, &train, &train, &HeadConfig::default(), false).unwrap();
    assert!(run.final_accuracy >= 0.95, "train accuracy {}", run.final_accuracy);
}
