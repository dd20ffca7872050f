//! Shared fixtures for the acceptance suite: trains every model once and
//! evaluates the multimodal criteria.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use taxposed::datagen::{generate_dataset, DatagenConfig};
use taxposed::nets::Model;
use taxposed::pipeline::{eval_scenes, evaluate_model, Ablation, EvalReport, SampleConfig, SuccessCriterion, TrainConfig, Trainer};

/// Writes to the stdout handle directly so the line survives the harness's output capture.
pub fn report(criterion: usize, pass: bool, detail: &str) {
    let line = format!("criterion {criterion:>2}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

pub struct TrainingResults {
    pub criterion7: Outcome,
    pub criterion8: Outcome,
    pub criterion9: Outcome,
}

pub const TRAIN_DEMOS: usize = 10;
pub const EVAL_SCENES: usize = 20;
pub const DRAWS_PER_SCENE: usize = 100;
pub const TIME_BUDGET_SECS: f64 = 20.0 * 60.0;

/// Training configuration shared by every model in the suite: the default
/// configuration on the short schedule from `configs/fast.json`.
pub fn acceptance_config(ablation: Ablation) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        steps: 2000,
        seed: 17,
        ablation,
        ..TrainConfig::default()
    }
}

fn train_model(ablation: Ablation, records: &[taxposed::datagen::DemonstrationRecord], dg: &DatagenConfig) -> Model {
    let config = acceptance_config(ablation);
    let mut trainer = Trainer::new(config.clone()).expect("valid config");
    let history = trainer.train(records, dg, config.steps, None).expect("training runs");
    if let Some(last) = history.last() {
        eprintln!("{ablation}: {} steps, final loss {:.4}", config.steps, last.total);
    }
    trainer.model
}

fn summary(r: &EvalReport) -> String {
    format!(
        "success {:.3}, min-mode {:.3}, modes {:?}, median errors {:.1} deg / {:.3}",
        r.success_rate,
        r.mean_min_mode_frequency,
        r.mode_frequencies.iter().map(|f| (f * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        r.median_rotation_error_deg,
        r.median_translation_error
    )
}

fn run() -> TrainingResults {
    let dg = DatagenConfig::default();
    let sample = SampleConfig::default();
    let criterion = SuccessCriterion::default();
    let train_records = generate_dataset(2, TRAIN_DEMOS, 1, &dg).expect("datagen");
    let two = eval_scenes(&generate_dataset(2, EVAL_SCENES, 2, &dg).expect("datagen"), &sample, 2).expect("scenes");
    let three = eval_scenes(&generate_dataset(3, EVAL_SCENES, 3, &dg).expect("datagen"), &sample, 3).expect("scenes");
    let eval = |model: &Model, scenes| evaluate_model(model, scenes, DRAWS_PER_SCENE, &criterion, 99).expect("eval");

    let start = Instant::now();
    let learned = train_model(Ablation::SpatialZLearnedPrior, &train_records, &dg);
    let learned2 = eval(&learned, &two);
    let flat = train_model(Ablation::NoLatent, &train_records, &dg);
    let flat2 = eval(&flat, &two);
    let secs = start.elapsed().as_secs_f64();
    eprintln!("learned 2-site: {}", summary(&learned2));
    eprintln!("no_latent 2-site: {}", summary(&flat2));

    let gap = learned2.success_rate - flat2.success_rate;
    let criterion7 = Outcome {
        pass: learned2.success_rate >= 0.5 && learned2.mean_min_mode_frequency >= 0.2 && gap >= 0.3 && secs <= TIME_BUDGET_SECS,
        detail: format!(
            "success {:.3} (>= 0.5), per-scene min mode frequency {:.3} (>= 0.2), no_latent {:.3} (gap {:.3} >= 0.3), {:.0}s (<= 1200s)",
            learned2.success_rate, learned2.mean_min_mode_frequency, flat2.success_rate, gap, secs
        ),
    };

    let learned3 = eval(&learned, &three);
    eprintln!("learned 3-site: {}", summary(&learned3));
    let drop = learned2.success_rate - learned3.success_rate;
    let criterion8 = Outcome {
        pass: drop <= 0.2 && learned3.mean_min_mode_frequency >= 0.1,
        detail: format!(
            "3-site success {:.3} vs 2-site {:.3} (drop {:.3} <= 0.2), per-scene min mode frequency {:.3} (>= 0.1)",
            learned3.success_rate, learned2.success_rate, drop, learned3.mean_min_mode_frequency
        ),
    };

    let uniform3 = eval(&train_model(Ablation::SpatialZUniformPrior, &train_records, &dg), &three);
    let cont_learned2 = eval(&train_model(Ablation::ContinuousZLearnedPrior, &train_records, &dg), &two);
    let cont_normal2 = eval(&train_model(Ablation::ContinuousZNormalPrior, &train_records, &dg), &two);
    eprintln!("uniform prior 3-site: {}", summary(&uniform3));
    eprintln!("continuous learned 2-site: {}", summary(&cont_learned2));
    eprintln!("continuous normal 2-site: {}", summary(&cont_normal2));
    let criterion9 = Outcome {
        pass: learned3.success_rate >= uniform3.success_rate
            && learned2.success_rate >= cont_learned2.success_rate
            && learned2.success_rate >= cont_normal2.success_rate,
        detail: format!(
            "3-site learned {:.3} >= uniform {:.3}; 2-site learned {:.3} >= continuous learned {:.3} and continuous normal {:.3}",
            learned3.success_rate,
            uniform3.success_rate,
            learned2.success_rate,
            cont_learned2.success_rate,
            cont_normal2.success_rate
        ),
    };

    TrainingResults {
        criterion7,
        criterion8,
        criterion9,
    }
}

pub fn training_results() -> &'static TrainingResults {
    static RESULTS: OnceLock<TrainingResults> = OnceLock::new();
    RESULTS.get_or_init(run)
}
