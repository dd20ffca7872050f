//! Distributional evaluation and prior heatmaps.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{record_rng, record_seed, DemonstrationRecord, SceneObservation};
use crate::error::{Error, Result};
use crate::geometry::{centroid, PointCloud, RigidTransform, Segment};
use crate::nets::Model;

use super::sample::{make_eval_scene, SampleConfig};

/// Tolerances for counting a placement as successful.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriterion {
    pub tol_r_deg: f64,
    pub tol_t: f64,
}

impl Default for SuccessCriterion {
    fn default() -> Self {
        Self {
            tol_r_deg: 15.0,
            tol_t: 0.1,
        }
    }
}

impl SuccessCriterion {
    pub fn new(tol_r_deg: f64, tol_t: f64) -> Result<Self> {
        let c = Self { tol_r_deg, tol_t };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_r_deg > 0.0 && self.tol_t > 0.0) {
            return Err(Error::Config(format!(
                "tolerances must be positive, got tol_r {} and tol_t {}",
                self.tol_r_deg, self.tol_t
            )));
        }
        Ok(())
    }

    pub fn accepts(&self, rotation_error_deg: f64, translation_error: f64) -> bool {
        rotation_error_deg <= self.tol_r_deg && translation_error <= self.tol_t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub samples_per_scene: usize,
    pub criterion: SuccessCriterion,
    /// Point counts and observation motions of the evaluation scenes.
    pub sample: SampleConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_scene: 100,
            criterion: SuccessCriterion::default(),
            sample: SampleConfig::default(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_scene == 0 {
            return Err(Error::Config("samples_per_scene must be positive".into()));
        }
        self.criterion.validate()?;
        self.sample.validate()
    }
}

/// One observation per record; record `i` draws from the stream of
/// `(seed, i)`.
pub fn eval_scenes(records: &[DemonstrationRecord], sample: &SampleConfig, seed: u64) -> Result<Vec<SceneObservation>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| make_eval_scene(r, sample, &mut record_rng(record_seed(seed, i as u64))))
        .collect()
}

/// A prediction scored against its closest mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub mode: usize,
    pub rotation_error_deg: f64,
    /// Distance between the predicted and ground-truth placements of the
    /// action object's centroid.
    pub translation_error: f64,
    pub success: bool,
}

/// Scores `pred` against every mode of `scene`; the closest mode is the one
/// with the smallest translation error, rotation error breaking ties.
pub fn score_prediction(pred: &RigidTransform, scene: &SceneObservation, criterion: &SuccessCriterion) -> SampleScore {
    let c = centroid(&scene.cloud.segment_points(Segment::Action)).cast::<f64>();
    let placed = pred.apply(&c);
    let mut best: Option<SampleScore> = None;
    for (mode, gt) in scene.ground_truths().iter().enumerate() {
        let t = (placed - gt.apply(&c)).norm();
        let r = pred.rotation_distance(gt).to_degrees();
        let closer = match &best {
            None => true,
            Some(b) => t < b.translation_error || (t == b.translation_error && r < b.rotation_error_deg),
        };
        if closer {
            best = Some(SampleScore {
                mode,
                rotation_error_deg: r,
                translation_error: t,
                success: criterion.accepts(r, t),
            });
        }
    }
    best.expect("scene has at least one mode")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub record_seed: u64,
    pub success_rate: f64,
    pub best_of_s: bool,
    pub mode_frequencies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub samples_per_scene: usize,
    pub criterion: SuccessCriterion,
    /// Fraction of all samples that succeed.
    pub success_rate: f64,
    /// Fraction of scenes where at least one sample succeeds.
    pub best_of_s_success: f64,
    pub mean_rotation_error_deg: f64,
    pub mean_translation_error: f64,
    pub median_rotation_error_deg: f64,
    pub median_translation_error: f64,
    /// Share of samples assigned to each mode index, over all scenes.
    pub mode_frequencies: Vec<f64>,
    /// Mean over scenes of the least-sampled mode's frequency.
    pub mean_min_mode_frequency: f64,
    pub per_scene: Vec<SceneReport>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Draws `samples_per_scene` predictions per scene and scores each against
/// its closest mode. Scene `i` uses its own random stream derived from
/// `(seed, i)`.
pub fn evaluate<F>(
    mut predict: F,
    scenes: &[SceneObservation],
    samples_per_scene: usize,
    criterion: &SuccessCriterion,
    seed: u64,
) -> Result<EvalReport>
where
    F: FnMut(&SceneObservation, &mut ChaCha8Rng) -> Result<RigidTransform>,
{
    criterion.validate()?;
    if scenes.is_empty() || samples_per_scene == 0 {
        return Err(Error::Config("evaluation needs scenes and at least one sample".into()));
    }
    let max_modes = scenes.iter().map(|s| s.site_transforms.len()).max().unwrap_or(0);
    let mut counts = vec![0usize; max_modes];
    let mut rot = Vec::new();
    let mut trans = Vec::new();
    let mut successes = 0usize;
    let mut per_scene = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let mut rng = record_rng(record_seed(seed, i as u64));
        let modes = scene.site_transforms.len();
        let mut scene_counts = vec![0usize; modes];
        let mut scene_success = 0usize;
        for _ in 0..samples_per_scene {
            let pred = predict(scene, &mut rng)?;
            let s = score_prediction(&pred, scene, criterion);
            scene_counts[s.mode] += 1;
            counts[s.mode] += 1;
            rot.push(s.rotation_error_deg);
            trans.push(s.translation_error);
            scene_success += s.success as usize;
        }
        successes += scene_success;
        per_scene.push(SceneReport {
            record_seed: scene.record_seed,
            success_rate: scene_success as f64 / samples_per_scene as f64,
            best_of_s: scene_success > 0,
            mode_frequencies: scene_counts
                .iter()
                .map(|&c| c as f64 / samples_per_scene as f64)
                .collect(),
        });
    }
    let total = (scenes.len() * samples_per_scene) as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalReport {
        scenes: scenes.len(),
        samples_per_scene,
        criterion: *criterion,
        success_rate: successes as f64 / total,
        best_of_s_success: per_scene.iter().filter(|s| s.best_of_s).count() as f64 / scenes.len() as f64,
        mean_rotation_error_deg: mean(&rot),
        mean_translation_error: mean(&trans),
        median_rotation_error_deg: median(rot),
        median_translation_error: median(trans),
        mode_frequencies: counts.iter().map(|&c| c as f64 / total).collect(),
        mean_min_mode_frequency: per_scene
            .iter()
            .map(|s| s.mode_frequencies.iter().copied().fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / scenes.len() as f64,
        per_scene,
    })
}

/// [`evaluate`] with placements drawn from the model's prior.
pub fn evaluate_model(
    model: &Model,
    scenes: &[SceneObservation],
    samples_per_scene: usize,
    criterion: &SuccessCriterion,
    seed: u64,
) -> Result<EvalReport> {
    evaluate(
        |scene, rng| Ok(model.sample_placement(&scene.cloud, rng)?.transform),
        scenes,
        samples_per_scene,
        criterion,
        seed,
    )
}

/// Prior probability of every point in cloud order, normalized per object.
pub fn prior_heatmap(model: &Model, cloud: &PointCloud) -> Result<Vec<(Vector3<f32>, f64)>> {
    let (pa, pb) = model.prior_logits(cloud)?;
    let (pa, pb) = (pa.probabilities(), pb.probabilities());
    let (mut ia, mut ib) = (0, 0);
    Ok(cloud
        .points()
        .iter()
        .zip(cloud.segments())
        .map(|(p, s)| {
            let prob = match s {
                Segment::Action => {
                    ia += 1;
                    pa[ia - 1]
                }
                Segment::Anchor => {
                    ib += 1;
                    pb[ib - 1]
                }
            };
            (*p, prob)
        })
        .collect())
}

/// Writes `x y z prob` lines, one per point.
pub fn export_prior_heatmap(model: &Model, cloud: &PointCloud, path: &Path) -> Result<()> {
    let heat = prior_heatmap(model, cloud)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (p, prob) in heat {
        writeln!(f, "{} {} {} {}", p.x, p.y, p.z, prob)?;
    }
    f.flush()?;
    Ok(())
}
