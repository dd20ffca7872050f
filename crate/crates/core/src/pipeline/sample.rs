//! Training samples and evaluation scenes built from demonstration records.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    add_distractor, ball_occlusion, derive_observation, downsample_indices, observe_with, planar_occlusion,
    DatagenConfig, DemonstrationRecord, DownsampleMethod, ObservationConfig, SceneObservation,
};
use crate::error::{Error, Result};
use crate::geometry::{centroid, PointCloud, RigidTransform, Segment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    /// Sites per training scene; records with fewer receive valid distractor
    /// copies.
    pub sites: usize,
    pub action_points: usize,
    /// Points kept per site copy.
    pub site_points: usize,
    pub occlusion_prob: f64,
    pub ball_radius: (f32, f32),
    pub observation: ObservationConfig,
    /// Bound on the planar offset of each re-posed site in the prior's input.
    pub prior_shift: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            sites: 2,
            action_points: 64,
            site_points: 64,
            occlusion_prob: 0.5,
            ball_radius: (0.05, 0.15),
            observation: ObservationConfig::planar(),
            prior_shift: 0.3,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sites == 0 || self.action_points == 0 || self.site_points == 0 {
            return Err(Error::Config("sites and point counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config(format!("occlusion_prob {} outside [0, 1]", self.occlusion_prob)));
        }
        if self.ball_radius.0 <= 0.0 || self.ball_radius.1 < self.ball_radius.0 {
            return Err(Error::Config("ball_radius must be a positive range".into()));
        }
        if self.prior_shift < 0.0 {
            return Err(Error::Config("prior_shift must be non-negative".into()));
        }
        Ok(())
    }
}

/// One training example: the demonstration, the observation derived from it,
/// and the re-posed observation the prior is trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub demo: PointCloud,
    pub observation: SceneObservation,
    pub prior_input: PointCloud,
    pub ground_truth: RigidTransform,
}

/// Adds valid distractor sites until the record has `sites` of them.
pub fn with_sites<R: Rng + ?Sized>(
    record: &DemonstrationRecord,
    sites: usize,
    datagen: &DatagenConfig,
    rng: &mut R,
) -> Result<DemonstrationRecord> {
    let mut out = record.clone();
    while out.site_count() < sites {
        out = add_distractor(&out, true, datagen, rng)?;
    }
    Ok(out)
}

fn replace_points(record: &DemonstrationRecord, action: &[Vector3<f32>], parts: &[Vec<Vector3<f32>>]) -> Result<DemonstrationRecord> {
    let anchor: Vec<Vector3<f32>> = parts.iter().flatten().copied().collect();
    let mut out = record.clone();
    out.cloud = PointCloud::from_parts(action, &anchor)?;
    for (p, pts) in out.anchor_parts.iter_mut().zip(parts) {
        p.len = pts.len();
    }
    Ok(out)
}

/// With probability `prob`, a planar or ball occlusion (equally likely) of
/// the action object. An occlusion that leaves too few points is skipped.
pub fn occlude_action<R: Rng + ?Sized>(
    record: &DemonstrationRecord,
    config: &SampleConfig,
    rng: &mut R,
) -> Result<DemonstrationRecord> {
    if !rng.gen_bool(config.occlusion_prob) {
        return Ok(record.clone());
    }
    let action = PointCloud::uniform(record.action_points(), Segment::Action)?;
    let occluded = if rng.gen_bool(0.5) {
        planar_occlusion(&action, rng)
    } else {
        ball_occlusion(&action, config.ball_radius, rng)
    };
    match occluded {
        Ok(cloud) => replace_points(record, cloud.points(), &record.part_points()),
        Err(Error::OcclusionFailure(_)) => Ok(record.clone()),
        Err(e) => Err(e),
    }
}

fn pick_method<R: Rng + ?Sized>(rng: &mut R) -> DownsampleMethod {
    if rng.gen_bool(0.5) {
        DownsampleMethod::Random
    } else {
        DownsampleMethod::FarthestPoint
    }
}

fn downsample_points<R: Rng + ?Sized>(points: &[Vector3<f32>], n: usize, rng: &mut R) -> Result<Vec<Vector3<f32>>> {
    let method = pick_method(rng);
    Ok(downsample_indices(points, n, method, rng)?.into_iter().map(|i| points[i]).collect())
}

/// Downsamples the action object to at most `action_points` (occluded
/// objects may have fewer) and every site copy to exactly `site_points`.
pub fn downsample_record<R: Rng + ?Sized>(
    record: &DemonstrationRecord,
    action_points: usize,
    site_points: usize,
    rng: &mut R,
) -> Result<DemonstrationRecord> {
    let action = record.action_points();
    let action = downsample_points(&action, action_points.min(action.len()), rng)?;
    let parts = record
        .part_points()
        .iter()
        .map(|p| downsample_points(p, site_points, rng))
        .collect::<Result<Vec<_>>>()?;
    replace_points(record, &action, &parts)
}

/// Yaws every anchor part about its own centroid and shifts it in the plane
/// by up to `shift`, keeping site transforms consistent with the new layout.
pub fn repose_sites<R: Rng + ?Sized>(record: &DemonstrationRecord, shift: f64, rng: &mut R) -> Result<DemonstrationRecord> {
    let mut out = record.clone();
    let mut parts = record.part_points();
    for (part, meta) in parts.iter_mut().zip(&record.anchor_parts) {
        let c = centroid(part).cast::<f64>();
        let offset = if shift > 0.0 {
            Vector3::new(rng.gen_range(-shift..shift), rng.gen_range(-shift..shift), 0.0)
        } else {
            Vector3::zeros()
        };
        let motion = RigidTransform::from_translation(c + offset)
            .compose(&RigidTransform::rot_z(rng.gen_range(0.0..std::f64::consts::TAU)))
            .compose(&RigidTransform::from_translation(-c));
        for p in part.iter_mut() {
            *p = motion.apply_f32(p);
        }
        if let Some(s) = meta.site {
            out.site_transforms[s] = motion.compose(&record.site_transforms[s]);
        }
    }
    let moved = replace_points(&out, &record.action_points(), &parts)?;
    Ok(moved)
}

/// Record → distractors → action occlusion → downsampling → observation,
/// plus the prior's input: the same observation with every site re-posed.
pub fn make_training_sample<R: Rng + ?Sized>(
    record: &DemonstrationRecord,
    config: &SampleConfig,
    datagen: &DatagenConfig,
    rng: &mut R,
) -> Result<TrainingSample> {
    let scene = with_sites(record, config.sites, datagen, rng)?;
    let scene = occlude_action(&scene, config, rng)?;
    let scene = downsample_record(&scene, config.action_points, config.site_points, rng)?;
    let observation = derive_observation(&scene, &config.observation, rng);
    let reposed = repose_sites(&scene, config.prior_shift, rng)?;
    let prior_input = observe_with(&reposed, observation.t_applied_a, observation.t_applied_b).cloud;
    Ok(TrainingSample {
        demo: scene.cloud,
        ground_truth: observation.ground_truth(observation.mode_id),
        observation,
        prior_input,
    })
}

/// An unoccluded, downsampled observation of the record as-is.
pub fn make_eval_scene<R: Rng + ?Sized>(
    record: &DemonstrationRecord,
    config: &SampleConfig,
    rng: &mut R,
) -> Result<SceneObservation> {
    let scene = downsample_record(record, config.action_points, config.site_points, rng)?;
    Ok(derive_observation(&scene, &config.observation, rng))
}
