//! Procedural multimodal placement scenes: an asymmetric action object that
//! hangs on one of several identical sites.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    aabb_overlap_points, centroid, random_se3, Aabb, PointCloud, RigidTransform, RotationMode, Segment,
    TranslationBounds,
};

pub const DATASET_VERSION: &str = "taxposed-ds-v1";
pub const MIN_OCCLUSION_SURVIVORS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub action_points: usize,
    pub site_points: usize,
    /// Maximum relative scale/proportion jitter of shape parts.
    pub jitter: f64,
    /// Standard deviation of surface noise added to sampled points.
    pub noise: f64,
    /// Sites are laid out with centers in `[-extent, extent]²`.
    pub layout_extent: f64,
    pub margin: f32,
    pub max_attempts: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            action_points: 128,
            site_points: 128,
            jitter: 0.2,
            noise: 0.004,
            layout_extent: 1.0,
            margin: 0.05,
            max_attempts: 100,
        }
    }
}

/// Points sampled along line segments proportionally to their length.
fn scaffold_points<R: Rng + ?Sized>(
    segments: &[(Vector3<f64>, Vector3<f64>)],
    n: usize,
    noise: f64,
    rng: &mut R,
) -> Vec<Vector3<f32>> {
    let lengths: Vec<f64> = segments.iter().map(|(a, b)| (b - a).norm()).collect();
    let total: f64 = lengths.iter().sum();
    let normal = Normal::new(0.0, noise.max(0.0)).expect("valid noise");
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        // Stratified position along the concatenated scaffold.
        let s = (k as f64 + rng.gen::<f64>()) / n as f64 * total;
        let mut acc = 0.0;
        let mut idx = segments.len() - 1;
        for (i, l) in lengths.iter().enumerate() {
            if s <= acc + l {
                idx = i;
                break;
            }
            acc += l;
        }
        let (a, b) = segments[idx];
        let t = ((s - acc) / lengths[idx]).clamp(0.0, 1.0);
        let mut p = a + (b - a) * t;
        if noise > 0.0 {
            p += Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        }
        out.push(p.cast());
    }
    out
}

fn jittered<R: Rng + ?Sized>(base: f64, jitter: f64, rng: &mut R) -> f64 {
    base * (1.0 + rng.gen_range(-jitter..=jitter))
}

/// Fixed tilt of the bracket frame on top of each site post.
fn bracket_frame() -> Matrix3<f64> {
    let rz = RigidTransform::from_axis_angle(Vector3::z(), 0.4).rotation;
    let ry = RigidTransform::from_axis_angle(Vector3::y(), -0.6).rotation;
    let rx = RigidTransform::from_axis_angle(Vector3::x(), 0.5).rotation;
    rz * ry * rx
}

const ARM_LENGTHS: [f64; 3] = [0.3, 0.2, 0.12];

/// Canonical action object: three orthogonal arms of distinct length meeting
/// at the origin.
pub fn make_action_shape<R: Rng + ?Sized>(config: &DatagenConfig, rng: &mut R) -> Result<PointCloud> {
    let segs: Vec<_> = (0..3)
        .map(|k| {
            let mut end = Vector3::zeros();
            end[k] = jittered(ARM_LENGTHS[k], config.jitter, rng);
            (Vector3::zeros(), end)
        })
        .collect();
    PointCloud::uniform(scaffold_points(&segs, config.action_points, config.noise, rng), Segment::Action)
}

/// A site instance together with the pose, in the site frame, at which the
/// canonical action object counts as placed.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteTemplate {
    pub points: Vec<Vector3<f32>>,
    pub placement: RigidTransform,
}

/// Canonical site: a post with a foot and a tilted three-arm bracket on top
/// that cradles the action object.
pub fn make_site<R: Rng + ?Sized>(config: &DatagenConfig, rng: &mut R) -> SiteTemplate {
    let height = jittered(0.4, config.jitter, rng);
    let top = Vector3::new(0.0, 0.0, height);
    let frame = bracket_frame();
    let mut segs = vec![
        (Vector3::zeros(), top),
        (Vector3::zeros(), Vector3::new(jittered(0.25, config.jitter, rng), 0.0, 0.0)),
    ];
    for (k, len) in ARM_LENGTHS.iter().enumerate() {
        let dir: Vector3<f64> = frame.column(k).into();
        segs.push((top, top + dir * jittered(*len, config.jitter, rng)));
    }
    let placement = RigidTransform {
        rotation: frame,
        translation: top + frame * Vector3::new(0.03, 0.03, 0.03),
    };
    SiteTemplate {
        points: scaffold_points(&segs, config.site_points, config.noise, rng),
        placement,
    }
}

pub fn make_site_shape<R: Rng + ?Sized>(config: &DatagenConfig, rng: &mut R) -> Result<PointCloud> {
    PointCloud::uniform(make_site(config, rng).points, Segment::Anchor)
}

/// A contiguous run of anchor points belonging to one site copy. `site` is
/// the index into `site_transforms`, or `None` for a decoy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorPart {
    pub len: usize,
    pub site: Option<usize>,
}

/// A demonstration `Y`: the action object placed at one of the sites.
#[derive(Clone, Debug, PartialEq)]
pub struct DemonstrationRecord {
    pub cloud: PointCloud,
    pub mode_id: usize,
    /// Pose of the canonical action object when placed at each site.
    pub site_transforms: Vec<RigidTransform>,
    pub anchor_parts: Vec<AnchorPart>,
    pub seed: u64,
}

impl DemonstrationRecord {
    pub fn site_count(&self) -> usize {
        self.site_transforms.len()
    }

    pub fn action_points(&self) -> Vec<Vector3<f32>> {
        self.cloud.segment_points(Segment::Action)
    }

    pub fn anchor_points(&self) -> Vec<Vector3<f32>> {
        self.cloud.segment_points(Segment::Anchor)
    }

    /// Anchor points of each part, in order.
    pub fn part_points(&self) -> Vec<Vec<Vector3<f32>>> {
        let anchor = self.anchor_points();
        let mut out = Vec::with_capacity(self.anchor_parts.len());
        let mut start = 0;
        for part in &self.anchor_parts {
            out.push(anchor[start..start + part.len].to_vec());
            start += part.len;
        }
        out
    }

    /// Action points expressed in the canonical action frame.
    pub fn canonical_action(&self) -> Vec<Vector3<f32>> {
        let inv = self.site_transforms[self.mode_id].inverse();
        self.action_points().iter().map(|p| inv.apply_f32(p)).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.mode_id >= self.site_transforms.len() {
            return Err(Error::Config(format!(
                "mode {} out of range for {} sites",
                self.mode_id,
                self.site_transforms.len()
            )));
        }
        let total: usize = self.anchor_parts.iter().map(|p| p.len).sum();
        if total != self.cloud.segment_len(Segment::Anchor) {
            return Err(Error::SegmentMismatch {
                expected: self.cloud.segment_len(Segment::Anchor),
                actual: total,
            });
        }
        if self.cloud.segment_len(Segment::Action) == 0 {
            return Err(Error::EmptySegment(Segment::Action.name()));
        }
        Ok(())
    }
}

fn planar_pose<R: Rng + ?Sized>(extent: f64, rng: &mut R) -> RigidTransform {
    random_se3(
        RotationMode::AboutZ,
        &TranslationBounds {
            min: [-extent, -extent, 0.0],
            max: [extent, extent, 0.0],
        },
        rng,
    )
}

fn transform_points(t: &RigidTransform, points: &[Vector3<f32>]) -> Vec<Vector3<f32>> {
    points.iter().map(|p| t.apply_f32(p)).collect()
}

/// Footprint of a site copy including the action object hanging on it.
fn site_footprint(site_points: &[Vector3<f32>], placed_action: &[Vector3<f32>]) -> Vec<Vector3<f32>> {
    site_points.iter().chain(placed_action).copied().collect()
}

/// Lays out `k` copies of one site and hangs the action object on a uniformly
/// chosen one.
pub fn make_demonstration<R: Rng + ?Sized>(
    k: usize,
    config: &DatagenConfig,
    seed: u64,
    rng: &mut R,
) -> Result<DemonstrationRecord> {
    if k == 0 {
        return Err(Error::Config("site count must be at least 1".into()));
    }
    let action = make_action_shape(config, rng)?;
    let site = make_site(config, rng);
    let hung = transform_points(&site.placement, action.points());
    let footprint = site_footprint(&site.points, &hung);

    let mut poses: Option<Vec<RigidTransform>> = None;
    for _ in 0..config.max_attempts {
        let candidate: Vec<RigidTransform> = (0..k).map(|_| planar_pose(config.layout_extent, rng)).collect();
        let boxes: Vec<Vec<Vector3<f32>>> = candidate.iter().map(|p| transform_points(p, &footprint)).collect();
        let clear = (0..k).all(|i| (i + 1..k).all(|j| !aabb_overlap_points(&boxes[i], &boxes[j], config.margin)));
        if clear {
            poses = Some(candidate);
            break;
        }
    }
    let poses = poses.ok_or(Error::PlacementFailure(config.max_attempts))?;
    let mode_id = rng.gen_range(0..k);
    let site_transforms: Vec<RigidTransform> = poses.iter().map(|p| p.compose(&site.placement)).collect();
    let action_y = transform_points(&site_transforms[mode_id], action.points());
    let anchor_y: Vec<Vector3<f32>> = poses.iter().flat_map(|p| transform_points(p, &site.points)).collect();
    Ok(DemonstrationRecord {
        cloud: PointCloud::from_parts(&action_y, &anchor_y)?,
        mode_id,
        site_transforms,
        anchor_parts: (0..k)
            .map(|i| AnchorPart {
                len: site.points.len(),
                site: Some(i),
            })
            .collect(),
        seed,
    })
}

/// Adds a copy of the first site moved by `motion` (applied in the scene
/// frame). Returns `None` when the copy would collide with the scene.
pub fn try_add_distractor(
    record: &DemonstrationRecord,
    motion: &RigidTransform,
    valid: bool,
    margin: f32,
) -> Result<Option<DemonstrationRecord>> {
    record.validate()?;
    let parts = record.part_points();
    let (source_idx, source_part) = record
        .anchor_parts
        .iter()
        .enumerate()
        .find_map(|(i, p)| p.site.map(|s| (i, s)))
        .ok_or_else(|| Error::Config("record has no valid site to copy".into()))?;
    let copy = transform_points(motion, &parts[source_idx]);
    let new_site = motion.compose(&record.site_transforms[source_part]);
    let canonical = record.canonical_action();
    let hung_new = transform_points(&new_site, &canonical);
    let new_footprint = site_footprint(&copy, &hung_new);

    let action = record.action_points();
    if aabb_overlap_points(&new_footprint, &action, margin) {
        return Ok(None);
    }
    for (i, part) in parts.iter().enumerate() {
        let mut existing = part.clone();
        if let Some(s) = record.anchor_parts[i].site {
            existing.extend(transform_points(&record.site_transforms[s], &canonical));
        }
        if aabb_overlap_points(&new_footprint, &existing, margin) {
            return Ok(None);
        }
    }

    let mut anchor = record.anchor_points();
    anchor.extend_from_slice(&copy);
    let mut out = record.clone();
    out.cloud = PointCloud::from_parts(&action, &anchor)?;
    let site = if valid {
        out.site_transforms.push(new_site);
        Some(out.site_transforms.len() - 1)
    } else {
        None
    };
    out.anchor_parts.push(AnchorPart { len: copy.len(), site });
    Ok(Some(out))
}

/// Adds one site copy at a random collision-free planar pose. A `valid` copy
/// is a new placement mode; otherwise it is a decoy.
pub fn add_distractor<R: Rng + ?Sized>(
    record: &DemonstrationRecord,
    valid: bool,
    config: &DatagenConfig,
    rng: &mut R,
) -> Result<DemonstrationRecord> {
    let parts = record.part_points();
    let source = record
        .anchor_parts
        .iter()
        .position(|p| p.site.is_some())
        .ok_or_else(|| Error::Config("record has no valid site to copy".into()))?;
    let c = centroid(&parts[source]).cast::<f64>();
    for _ in 0..config.max_attempts {
        let pose = planar_pose(config.layout_extent, rng);
        // Rotate about the copied site's own centroid, then move it.
        let motion = RigidTransform::from_translation(pose.translation)
            .compose(&RigidTransform {
                rotation: pose.rotation,
                translation: Vector3::zeros(),
            })
            .compose(&RigidTransform::from_translation(-Vector3::new(c.x, c.y, 0.0)));
        if let Some(out) = try_add_distractor(record, &motion, valid, config.margin)? {
            return Ok(out);
        }
    }
    Err(Error::PlacementFailure(config.max_attempts))
}

/// Random rigid motions applied independently to the two objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationConfig {
    pub action_rotation: RotationMode,
    pub anchor_rotation: RotationMode,
    pub translation: TranslationBounds,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            action_rotation: RotationMode::Uniform,
            anchor_rotation: RotationMode::Uniform,
            translation: TranslationBounds::symmetric([1.0, 1.0, 1.0]),
        }
    }
}

impl ObservationConfig {
    /// Yaw-only motions with table-top translations.
    pub fn planar() -> Self {
        Self {
            action_rotation: RotationMode::AboutZ,
            anchor_rotation: RotationMode::AboutZ,
            translation: TranslationBounds::symmetric([1.0, 1.0, 0.3]),
        }
    }
}

/// An observation `X` derived from a demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObservation {
    pub cloud: PointCloud,
    pub t_applied_a: RigidTransform,
    pub t_applied_b: RigidTransform,
    pub mode_id: usize,
    pub site_transforms: Vec<RigidTransform>,
    pub anchor_parts: Vec<AnchorPart>,
    pub record_seed: u64,
}

impl SceneObservation {
    /// Cross-pose moving the observed action object onto site `i`:
    /// `T_B ∘ T*_i ∘ (T*_mode)⁻¹ ∘ T_A⁻¹`.
    pub fn ground_truth(&self, i: usize) -> RigidTransform {
        self.t_applied_b
            .compose(&self.site_transforms[i])
            .compose(&self.site_transforms[self.mode_id].inverse())
            .compose(&self.t_applied_a.inverse())
    }

    pub fn ground_truths(&self) -> Vec<RigidTransform> {
        (0..self.site_transforms.len()).map(|i| self.ground_truth(i)).collect()
    }

    /// Centers of the valid sites in the observation frame (the placed action
    /// centroid at each site).
    pub fn site_centers(&self) -> Vec<Vector3<f64>> {
        let c = centroid(&self.cloud.segment_points(Segment::Action)).cast::<f64>();
        self.ground_truths().iter().map(|t| t.apply(&c)).collect()
    }
}

/// Applies the given motions to the action and anchor segments.
pub fn observe_with(
    record: &DemonstrationRecord,
    t_a: RigidTransform,
    t_b: RigidTransform,
) -> SceneObservation {
    let cloud = record
        .cloud
        .transform_segment(Segment::Action, &t_a)
        .transform_segment(Segment::Anchor, &t_b);
    SceneObservation {
        cloud,
        t_applied_a: t_a,
        t_applied_b: t_b,
        mode_id: record.mode_id,
        site_transforms: record.site_transforms.clone(),
        anchor_parts: record.anchor_parts.clone(),
        record_seed: record.seed,
    }
}

pub fn derive_observation<R: Rng + ?Sized>(
    record: &DemonstrationRecord,
    config: &ObservationConfig,
    rng: &mut R,
) -> SceneObservation {
    let t_a = random_se3(config.action_rotation, &config.translation, rng);
    let t_b = random_se3(config.anchor_rotation, &config.translation, rng);
    observe_with(record, t_a, t_b)
}

fn check_survivors(kept: usize) -> bool {
    kept >= MIN_OCCLUSION_SURVIVORS
}

const OCCLUSION_RETRIES: usize = 20;

/// Keeps the points strictly on the negative side of the plane through
/// `point` with normal `normal`.
pub fn planar_occlusion_with(
    points: &[Vector3<f32>],
    point: &Vector3<f32>,
    normal: &Vector3<f32>,
) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| (points[i] - point).dot(normal) < 0.0)
        .collect()
}

/// Removes the points within `radius` of `center`.
pub fn ball_occlusion_with(points: &[Vector3<f32>], center: &Vector3<f32>, radius: f32) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| (points[i] - center).norm() > radius)
        .collect()
}

fn subset(cloud: &PointCloud, keep: &[usize]) -> Result<PointCloud> {
    cloud.select(keep)
}

/// Cuts the cloud with a plane placed between a random cloud point and the
/// centroid, removing the side containing the chosen point.
pub fn planar_occlusion<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::InvalidPointCloud("empty cloud".into()));
    }
    let pts = cloud.points();
    let c = cloud.centroid();
    for _ in 0..OCCLUSION_RETRIES {
        let q = pts[rng.gen_range(0..pts.len())];
        let dir = q - c;
        if dir.norm() < 1e-9 {
            continue;
        }
        let at = c + dir * rng.gen::<f32>();
        let keep = planar_occlusion_with(pts, &at, &dir.normalize());
        if check_survivors(keep.len()) {
            return subset(cloud, &keep);
        }
    }
    Err(Error::OcclusionFailure(OCCLUSION_RETRIES))
}

/// Removes a ball around a random cloud point; the radius is drawn from
/// `radius_range`.
pub fn ball_occlusion<R: Rng + ?Sized>(
    cloud: &PointCloud,
    radius_range: (f32, f32),
    rng: &mut R,
) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::InvalidPointCloud("empty cloud".into()));
    }
    let pts = cloud.points();
    for _ in 0..OCCLUSION_RETRIES {
        let center = pts[rng.gen_range(0..pts.len())];
        let radius = if radius_range.1 > radius_range.0 {
            rng.gen_range(radius_range.0..radius_range.1)
        } else {
            radius_range.0
        };
        let keep = ball_occlusion_with(pts, &center, radius);
        if check_survivors(keep.len()) {
            return subset(cloud, &keep);
        }
    }
    Err(Error::OcclusionFailure(OCCLUSION_RETRIES))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMethod {
    Random,
    FarthestPoint,
}

/// Greedy farthest-point order starting at `start`.
pub fn farthest_point_indices(points: &[Vector3<f32>], n: usize, start: usize) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(n);
    if n == 0 || points.is_empty() {
        return chosen;
    }
    let mut dist = vec![f32::INFINITY; points.len()];
    let mut current = start;
    for _ in 0..n {
        chosen.push(current);
        let pc = points[current];
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = (p - pc).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best_d {
                best_d = dist[i];
                best = i;
            }
        }
        current = best;
    }
    chosen
}

pub fn downsample_indices<R: Rng + ?Sized>(
    points: &[Vector3<f32>],
    n: usize,
    method: DownsampleMethod,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n > points.len() {
        return Err(Error::InsufficientPoints {
            requested: n,
            available: points.len(),
        });
    }
    Ok(match method {
        DownsampleMethod::Random => {
            let mut idx: Vec<usize> = (0..points.len()).collect();
            idx.shuffle(rng);
            idx.truncate(n);
            idx
        }
        DownsampleMethod::FarthestPoint => {
            if points.is_empty() {
                Vec::new()
            } else {
                let start = rng.gen_range(0..points.len());
                farthest_point_indices(points, n, start)
            }
        }
    })
}

/// Per-segment downsampling to `n` points each, random or farthest-point
/// with equal probability.
pub fn downsample<R: Rng + ?Sized>(cloud: &PointCloud, n: usize, rng: &mut R) -> Result<PointCloud> {
    downsample_segments(cloud, n, n, rng)
}

pub fn downsample_segments<R: Rng + ?Sized>(
    cloud: &PointCloud,
    n_action: usize,
    n_anchor: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    let mut keep = Vec::new();
    for (seg, n) in [(Segment::Action, n_action), (Segment::Anchor, n_anchor)] {
        let idx = cloud.segment_indices(seg);
        if idx.is_empty() {
            continue;
        }
        let pts: Vec<Vector3<f32>> = idx.iter().map(|&i| cloud.points()[i]).collect();
        let method = if rng.gen_bool(0.5) {
            DownsampleMethod::Random
        } else {
            DownsampleMethod::FarthestPoint
        };
        let local = downsample_indices(&pts, n, method, rng)?;
        keep.extend(local.into_iter().map(|j| idx[j]));
    }
    cloud.select(&keep)
}

/// Seed of record `index` in a dataset generated from `dataset_seed`.
pub fn record_seed(dataset_seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = dataset_seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn record_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` demonstrations with `k` sites each; every record draws from its own
/// stream so records can be generated independently.
pub fn generate_dataset(
    k: usize,
    n: usize,
    dataset_seed: u64,
    config: &DatagenConfig,
) -> Result<Vec<DemonstrationRecord>> {
    (0..n as u64)
        .map(|i| {
            let seed = record_seed(dataset_seed, i);
            make_demonstration(k, config, seed, &mut record_rng(seed))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestRecord {
    file: String,
    points: usize,
    mode_id: usize,
    seed: u64,
    site_transforms: Vec<[f64; 12]>,
    anchor_parts: Vec<AnchorPart>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: String,
    config: serde_json::Value,
    records: Vec<ManifestRecord>,
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 + cloud.len() * 13);
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for v in [p.x, p.y, p.z] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend(cloud.segments().iter().map(|s| s.code()));
    buf
}

fn decode_cloud(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let n = u32::from_le_bytes(
        bytes
            .get(..4)
            .ok_or_else(|| format_error(path, "truncated header"))?
            .try_into()
            .expect("four bytes"),
    ) as usize;
    if bytes.len() != 4 + n * 13 {
        return Err(format_error(path, format!("expected {} bytes, found {}", 4 + n * 13, bytes.len())));
    }
    let coords = &bytes[4..4 + n * 12];
    let points = coords
        .chunks_exact(12)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes(c[k * 4..k * 4 + 4].try_into().expect("four bytes"));
            Vector3::new(f(0), f(1), f(2))
        })
        .collect();
    let segments = bytes[4 + n * 12..]
        .iter()
        .map(|&b| Segment::from_code(b).ok_or_else(|| format_error(path, format!("bad segment code {b}"))))
        .collect::<Result<Vec<_>>>()?;
    PointCloud::new(points, segments)
}

/// Writes `manifest.json` and `records/{idx}.bin` under `dir`.
pub fn write_dataset(records: &[DemonstrationRecord], dir: &Path, config: &DatagenConfig) -> Result<()> {
    let rec_dir = dir.join("records");
    fs::create_dir_all(&rec_dir)?;
    let mut entries = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let file = format!("records/{i}.bin");
        let mut f = fs::File::create(dir.join(&file))?;
        f.write_all(&encode_cloud(&r.cloud))?;
        entries.push(ManifestRecord {
            file,
            points: r.cloud.len(),
            mode_id: r.mode_id,
            seed: r.seed,
            site_transforms: r.site_transforms.iter().map(|t| t.to_array()).collect(),
            anchor_parts: r.anchor_parts.clone(),
        });
    }
    let manifest = Manifest {
        version: DATASET_VERSION.to_string(),
        config: serde_json::to_value(config)?,
        records: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`], returning its records and
/// generation config.
pub fn read_dataset(dir: &Path) -> Result<(Vec<DemonstrationRecord>, DatagenConfig)> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw
        .get("version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| format_error(&manifest_path, "missing version"))?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    let config: DatagenConfig = serde_json::from_value(manifest.config)?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in manifest.records {
        let path: PathBuf = dir.join(&entry.file);
        let mut bytes = Vec::new();
        fs::File::open(&path)?.read_to_end(&mut bytes)?;
        let cloud = decode_cloud(&bytes, &path)?;
        if cloud.len() != entry.points {
            return Err(format_error(&path, "point count disagrees with manifest"));
        }
        let site_transforms = entry.site_transforms.iter().map(RigidTransform::from_array).collect();
        let record = DemonstrationRecord {
            cloud,
            mode_id: entry.mode_id,
            site_transforms,
            anchor_parts: entry.anchor_parts,
            seed: entry.seed,
        };
        record.validate().map_err(|e| format_error(&path, e.to_string()))?;
        records.push(record);
    }
    Ok((records, config))
}

/// Bounding box of each anchor part.
pub fn part_boxes(record: &DemonstrationRecord) -> Vec<Aabb> {
    record.part_points().iter().map(|p| Aabb::from_points(p)).collect()
}
