use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use taxposed::datagen::{generate_dataset, DatagenConfig};
use taxposed::nets::{Model, ModelConfig};
use taxposed::pipeline::{eval_scenes, prior_heatmap, Ablation, SampleConfig, TrainConfig, Trainer};

#[test]
fn frozen_batch_loss_decreases() {
    let dg = DatagenConfig::default();
    let records = generate_dataset(2, 4, 21, &dg).unwrap();
    let mut config = TrainConfig {
        learning_rate: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    config.sample.occlusion_prob = 0.0;
    let mut trainer = Trainer::new(config).unwrap();
    let batch = trainer.draw_batch(&records, &dg).unwrap();
    let mut history = Vec::new();
    for _ in 0..300 {
        history.push(trainer.step(&batch).unwrap().displacement);
    }
    let tail: f64 = history[history.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * history[0], "displacement {:.4} -> {tail:.4}", history[0]);
}

#[test]
fn uniform_prior_heatmap_is_flat() {
    let dg = DatagenConfig::default();
    let config = Ablation::SpatialZUniformPrior.apply(&ModelConfig::default());
    let model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(1));
    let records = generate_dataset(2, 1, 9, &dg).unwrap();
    let scene = &eval_scenes(&records, &SampleConfig::default(), 0).unwrap()[0];
    let heat = prior_heatmap(&model, &scene.cloud).unwrap();
    assert_eq!(heat.len(), scene.cloud.len());
    let na = 64.0;
    let nb = (scene.cloud.len() - 64) as f64;
    let (action, anchor) = heat.split_at(64);
    assert!(action.iter().all(|(_, p)| (p - 1.0 / na).abs() < 1e-12));
    assert!(anchor.iter().all(|(_, p)| (p - 1.0 / nb).abs() < 1e-12));
}

#[test]
fn learned_prior_heatmap_sums_to_one_per_object() {
    let dg = DatagenConfig::default();
    let model = Model::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(2));
    let records = generate_dataset(3, 1, 10, &dg).unwrap();
    let scene = &eval_scenes(&records, &SampleConfig::default(), 0).unwrap()[0];
    let heat = prior_heatmap(&model, &scene.cloud).unwrap();
    let (action, anchor) = heat.split_at(64);
    assert!((action.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-6);
    assert!((anchor.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-6);
}
