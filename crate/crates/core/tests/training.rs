use aia_core::model::{Model, ModelConfig};
use aia_core::train::{evaluate_map, TrainConfig, TrainMode, Trainer};
use aia_core::world::{generate_dataset, WorldConfig};

#[test]
fn loss_drops_below_chance_on_tiny_world() {
    let world = WorldConfig::tiny(7);
    let data = generate_dataset::<f64>(&world).unwrap();
    let model = Model::<f64>::new(ModelConfig::standard(world.d_in, 16, 3), 7).unwrap();
    let config = TrainConfig {
        mode: TrainMode::Amu,
        lr: 0.05,
        momentum: 0.9,
        iters: 200,
        batch: 4,
        window: 2,
        joint_max_window: 4,
        seed: 7,
    };
    let mut trainer = Trainer::new(config, model).unwrap();
    trainer.train(data.train_videos()).unwrap();
    let tail: f64 = trainer.log[180..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
    assert!(tail < std::f64::consts::LN_2, "late loss {tail}");
    assert!(trainer.log.iter().all(|r| r.loss.is_finite()));

    let report = evaluate_map(&trainer.model, data.eval_videos(), 2).unwrap();
    assert!(report.map > 0.0 && report.map <= 1.0);
}

#[test]
fn same_seed_same_trajectory() {
    let world = WorldConfig::tiny(8);
    let data = generate_dataset::<f64>(&world).unwrap();
    let run = || {
        let model = Model::<f64>::new(ModelConfig::standard(world.d_in, 8, 3), 8).unwrap();
        let config = TrainConfig {
            mode: TrainMode::Amu,
            lr: 0.05,
            momentum: 0.9,
            iters: 15,
            batch: 3,
            window: 1,
            joint_max_window: 4,
            seed: 8,
        };
        let mut t = Trainer::new(config, model).unwrap();
        t.train(data.train_videos()).unwrap();
        (t.model, t.log)
    };
    assert_eq!(run(), run());
}

#[test]
fn evaluation_without_persons_is_an_error() {
    let mut world = WorldConfig::tiny(9);
    world.eval_videos = 0;
    let data = generate_dataset::<f64>(&world).unwrap();
    let model = Model::<f64>::new(ModelConfig::standard(world.d_in, 8, 3), 9).unwrap();
    assert!(evaluate_map(&model, data.eval_videos(), 2).is_err());
}
