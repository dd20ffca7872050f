//! Training, evaluation and export.

pub mod eval;
pub mod sample;
pub mod train;

pub use eval::{
    eval_scenes, evaluate, evaluate_model, EvalConfig, export_prior_heatmap, prior_heatmap, score_prediction, EvalReport, SampleScore,
    SceneReport, SuccessCriterion,
};
pub use sample::{make_eval_scene, make_training_sample, SampleConfig, TrainingSample};
pub use train::{sample_loss, train, Ablation, SampleLoss, TrainConfig, Trainer};
