//! Rigid-body math and point-cloud containers.
//!
//! Transforms are kept in double precision; point coordinates are stored as
//! `f32`, which is what the dataset files and the networks consume.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3, Vector4, SVD};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Which object a point belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Action,
    Anchor,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::Action => "action",
            Segment::Anchor => "anchor",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Segment::Action => 0,
            Segment::Anchor => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Segment::Action),
            1 => Some(Segment::Anchor),
            _ => None,
        }
    }
}

/// An element of SE(3): `x -> rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, checking that `rotation` is proper and orthonormal.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_valid(ROTATION_TOLERANCE) {
            return Err(Error::InvalidPointCloud(format!(
                "rotation is not in SO(3): {rotation:?}"
            )));
        }
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about the z axis by `angle` radians.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        Self {
            rotation: *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix(),
            translation: Vector3::zeros(),
        }
    }

    pub fn with_translation(mut self, translation: Vector3<f64>) -> Self {
        self.translation = translation;
        self
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        let det = self.rotation.determinant();
        self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && ortho <= tol
            && (det - 1.0).abs() <= tol
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_f32(&self, p: &Vector3<f32>) -> Vector3<f32> {
        self.apply(&p.cast::<f64>()).cast::<f32>()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle of this transform, in radians.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Geodesic angle between the rotation parts of two transforms, in radians.
    pub fn rotation_distance(&self, other: &RigidTransform) -> f64 {
        RigidTransform {
            rotation: self.rotation * other.rotation.transpose(),
            translation: Vector3::zeros(),
        }
        .rotation_angle()
    }

    /// Row-major rotation followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[0],
            t[1],
            t[2],
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Self {
        Self {
            rotation: Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]),
            translation: Vector3::new(a[9], a[10], a[11]),
        }
    }
}

/// Free-function form of [`RigidTransform::compose`].
pub fn compose(first_applied_last: &RigidTransform, applied_first: &RigidTransform) -> RigidTransform {
    first_applied_last.compose(applied_first)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Optional dense per-point features, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub values: Vec<f32>,
}

/// Ordered points with a segment label per point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f32>>,
    segments: Vec<Segment>,
    features: Option<Features>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f32>>, segments: Vec<Segment>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidPointCloud("cloud has no points".into()));
        }
        if points.len() != segments.len() {
            return Err(Error::LengthMismatch(points.len(), segments.len()));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidPointCloud(format!(
                "non-finite coordinate at point {i}"
            )));
        }
        Ok(Self {
            points,
            segments,
            features: None,
        })
    }

    /// All points labelled with one segment.
    pub fn uniform(points: Vec<Vector3<f32>>, segment: Segment) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![segment; n])
    }

    /// Action points followed by anchor points.
    pub fn from_parts(action: &[Vector3<f32>], anchor: &[Vector3<f32>]) -> Result<Self> {
        let mut points = Vec::with_capacity(action.len() + anchor.len());
        points.extend_from_slice(action);
        points.extend_from_slice(anchor);
        let mut segments = vec![Segment::Action; action.len()];
        segments.resize(points.len(), Segment::Anchor);
        Self::new(points, segments)
    }

    pub fn with_features(mut self, features: Features) -> Result<Self> {
        if features.dim == 0 || features.values.len() != features.dim * self.len() {
            return Err(Error::LengthMismatch(
                features.values.len(),
                features.dim * self.len(),
            ));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f32>] {
        &self.points
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn features(&self) -> Option<&Features> {
        self.features.as_ref()
    }

    pub fn segment_indices(&self, segment: Segment) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.segments[i] == segment)
            .collect()
    }

    pub fn segment_len(&self, segment: Segment) -> usize {
        self.segments.iter().filter(|&&s| s == segment).count()
    }

    pub fn segment_points(&self, segment: Segment) -> Vec<Vector3<f32>> {
        self.points
            .iter()
            .zip(&self.segments)
            .filter(|(_, &s)| s == segment)
            .map(|(p, _)| *p)
            .collect()
    }

    /// Sub-cloud made of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let segments = indices.iter().map(|&i| self.segments[i]).collect();
        let mut out = Self::new(points, segments)?;
        if let Some(f) = &self.features {
            let mut values = Vec::with_capacity(indices.len() * f.dim);
            for &i in indices {
                values.extend_from_slice(&f.values[i * f.dim..(i + 1) * f.dim]);
            }
            out.features = Some(Features { dim: f.dim, values });
        }
        Ok(out)
    }

    pub fn centroid(&self) -> Vector3<f32> {
        centroid(&self.points)
    }

    pub fn translated(&self, offset: &Vector3<f32>) -> Self {
        let mut out = self.clone();
        for p in &mut out.points {
            *p += offset;
        }
        out
    }

    /// Applies `t` to the points of one segment only.
    pub fn transform_segment(&self, segment: Segment, t: &RigidTransform) -> Self {
        let mut out = self.clone();
        for (p, s) in out.points.iter_mut().zip(&self.segments) {
            if *s == segment {
                *p = t.apply_f32(p);
            }
        }
        out
    }
}

pub fn centroid(points: &[Vector3<f32>]) -> Vector3<f32> {
    let mut acc = Vector3::<f64>::zeros();
    for p in points {
        acc += p.cast::<f64>();
    }
    (acc / points.len().max(1) as f64).cast()
}

/// Applies `t` to every point; labels and features are carried over.
pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    let mut out = cloud.clone();
    for p in &mut out.points {
        *p = t.apply_f32(p);
    }
    out
}

/// Distance of every point to the latent point.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantFeatureField {
    pub values: Vec<f32>,
}

/// Per-point Euclidean distance to `latent_point`.
///
/// The field is unchanged when the same rigid motion is applied to the cloud
/// and to the latent point. The latent point may be a convex combination of
/// cloud points (soft sampling).
pub fn invariant_feature(cloud: &PointCloud, latent_point: &Vector3<f32>) -> InvariantFeatureField {
    InvariantFeatureField {
        values: distance_field(cloud.points(), latent_point),
    }
}

pub fn distance_field(points: &[Vector3<f32>], latent_point: &Vector3<f32>) -> Vec<f32> {
    points.iter().map(|p| (p - latent_point).norm()).collect()
}

/// Weighted least-squares rigid alignment of `source` onto `targets`.
///
/// Minimizes `Σ wᵢ ‖R sᵢ + t − yᵢ‖²` over proper rotations via the weighted
/// cross-covariance and an SVD with a sign correction on the smallest singular
/// direction.
pub fn weighted_rigid_fit(
    source: &[Vector3<f64>],
    targets: &[Vector3<f64>],
    weights: &[f64],
) -> Result<RigidTransform> {
    if source.len() != targets.len() {
        return Err(Error::LengthMismatch(source.len(), targets.len()));
    }
    if source.len() != weights.len() {
        return Err(Error::LengthMismatch(source.len(), weights.len()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::DegenerateConfiguration(
            "weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateConfiguration("weights sum to zero".into()));
    }

    let mut cs = Vector3::zeros();
    let mut ct = Vector3::zeros();
    for ((s, t), w) in source.iter().zip(targets).zip(weights) {
        cs += s * (w / total);
        ct += t * (w / total);
    }

    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for ((s, t), w) in source.iter().zip(targets).zip(weights) {
        let ds = s - cs;
        let dt = t - ct;
        let w = w / total;
        cov += ds * dt.transpose() * w;
        scatter += ds * ds.transpose() * w;
    }

    // The rotation is unique only if the weighted source spans at least a plane.
    let spread = scatter.symmetric_eigenvalues();
    let mut spread: Vec<f64> = spread.iter().copied().collect();
    spread.sort_by(|a, b| b.total_cmp(a));
    if !(spread[0] > 1e-18) || spread[1] <= 1e-10 * spread[0] {
        return Err(Error::DegenerateConfiguration(
            "weighted source points are collinear or coincident".into(),
        ));
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let translation = ct - rotation * cs;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Reverse-mode derivative of [`weighted_rigid_fit`].
#[derive(Clone, Debug)]
pub struct RigidFitVjp {
    pub source: Vec<Vector3<f64>>,
    pub targets: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

/// Pulls `(∂L/∂R, ∂L/∂t)` back to the inputs of [`weighted_rigid_fit`].
///
/// The optimal rotation maximizes `tr(R C)` for the weighted cross-covariance
/// `C`. Writing `R` through a unit quaternion `q`, that objective is the
/// Rayleigh quotient `qᵀ N q` of a symmetric 4×4 matrix linear in `C`, so the
/// derivative follows from first-order eigenvector perturbation.
/// `grad_rotation` is row-major.
pub fn weighted_rigid_fit_vjp(
    source: &[Vector3<f64>],
    targets: &[Vector3<f64>],
    weights: &[f64],
    grad_rotation: &[f64; 9],
    grad_translation: &Vector3<f64>,
) -> RigidFitVjp {
    let n = source.len();
    let total: f64 = weights.iter().sum();
    let what: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut cs = Vector3::zeros();
    let mut ct = Vector3::zeros();
    for i in 0..n {
        cs += source[i] * what[i];
        ct += targets[i] * what[i];
    }
    let mut cov = Matrix3::zeros();
    for i in 0..n {
        cov += (source[i] - cs) * (targets[i] - ct).transpose() * what[i];
    }

    let basis = quaternion_bases();
    let mut big_n = Matrix4::zeros();
    for a in 0..3 {
        for b in 0..3 {
            big_n += basis[a * 3 + b] * cov[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(big_n);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let q: Vector4<f64> = eig.eigenvectors.column(order[0]).into();
    let rotation = quaternion_to_matrix([q[0], q[1], q[2], q[3]]);

    let mut g_rot = Matrix3::from_row_slice(grad_rotation);
    g_rot -= grad_translation * cs.transpose();
    let g_cs_t = -(rotation.transpose() * grad_translation);
    let g_ct_t = *grad_translation;

    let mut g_q = Vector4::zeros();
    for a in 0..3 {
        for b in 0..3 {
            g_q += basis[a * 3 + b] * q * (2.0 * g_rot[(a, b)]);
        }
    }
    // ∂L/∂N = Σ_k c_k v_k qᵀ over the non-leading eigenvectors.
    let mut g_n = Matrix4::zeros();
    let lead = eig.eigenvalues[order[0]];
    for &k in &order[1..] {
        let v: Vector4<f64> = eig.eigenvectors.column(k).into();
        let gap = (lead - eig.eigenvalues[k]).max(1e-12);
        g_n += v * q.transpose() * (g_q.dot(&v) / gap);
    }
    let mut g_cov = Matrix3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            g_cov[(b, a)] = (g_n.component_mul(&basis[a * 3 + b])).sum();
        }
    }

    // cov = Σ ŵ s tᵀ − cs ctᵀ
    let mut g_source = vec![Vector3::zeros(); n];
    let mut g_targets = vec![Vector3::zeros(); n];
    let mut g_what = vec![0.0; n];
    let g_cs = g_cs_t - g_cov * ct;
    let g_ct = g_ct_t - g_cov.transpose() * cs;
    for i in 0..n {
        let (s, t) = (&source[i], &targets[i]);
        g_source[i] = (g_cov * t + g_cs) * what[i];
        g_targets[i] = (g_cov.transpose() * s + g_ct) * what[i];
        g_what[i] = s.dot(&(g_cov * t)) + g_cs.dot(s) + g_ct.dot(t);
    }
    let mean_g: f64 = g_what.iter().zip(&what).map(|(g, w)| g * w).sum();
    let g_weights = g_what.iter().map(|g| (g - mean_g) / total).collect();
    RigidFitVjp {
        source: g_source,
        targets: g_targets,
        weights: g_weights,
    }
}

/// Symmetric matrices `A_ab` with `R(q)_ab = qᵀ A_ab q` for the rotation of a
/// unit quaternion `q = [w, x, y, z]`; index `a * 3 + b`.
fn quaternion_bases() -> [Matrix4<f64>; 9] {
    let quad = |q: [f64; 4]| quaternion_to_matrix_unnormalized(q);
    let mut out = [Matrix4::zeros(); 9];
    for i in 0..4 {
        for j in i..4 {
            let mut qi = [0.0; 4];
            qi[i] = 1.0;
            let ri = quad(qi);
            let mut qj = [0.0; 4];
            qj[j] = 1.0;
            let rj = quad(qj);
            let mut qij = [0.0; 4];
            qij[i] += 1.0;
            qij[j] += 1.0;
            let rij = quad(qij);
            for k in 0..9 {
                let (a, b) = (k / 3, k % 3);
                if i == j {
                    out[k][(i, i)] = ri[(a, b)];
                } else {
                    let off = 0.5 * (rij[(a, b)] - ri[(a, b)] - rj[(a, b)]);
                    out[k][(i, j)] = off;
                    out[k][(j, i)] = off;
                }
            }
        }
    }
    out
}

/// How rotations are drawn by [`random_se3`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    Identity,
    /// Uniform yaw about the z axis (table-top layouts).
    AboutZ,
    /// Haar-uniform over SO(3).
    Uniform,
}

/// Axis-aligned box of allowed translations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl TranslationBounds {
    pub fn zero() -> Self {
        Self {
            min: [0.0; 3],
            max: [0.0; 3],
        }
    }

    pub fn symmetric(half: [f64; 3]) -> Self {
        Self {
            min: [-half[0], -half[1], -half[2]],
            max: half,
        }
    }
}

pub fn random_rotation<R: Rng + ?Sized>(mode: RotationMode, rng: &mut R) -> Matrix3<f64> {
    match mode {
        RotationMode::Identity => Matrix3::identity(),
        RotationMode::AboutZ => {
            RigidTransform::rot_z(rng.gen::<f64>() * std::f64::consts::TAU).rotation
        }
        RotationMode::Uniform => {
            // A normalized Gaussian 4-vector is uniform on S³, hence Haar on SO(3).
            let mut q = [0.0f64; 4];
            loop {
                for v in &mut q {
                    *v = rng.sample(StandardNormal);
                }
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-9 {
                    q.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
            quaternion_to_matrix(q)
        }
    }
}

pub(crate) fn quaternion_to_matrix([w, x, y, z]: [f64; 4]) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Homogeneous quadratic form of the quaternion rotation; equals
/// [`quaternion_to_matrix`] for unit quaternions.
fn quaternion_to_matrix_unnormalized([w, x, y, z]: [f64; 4]) -> Matrix3<f64> {
    Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        w * w - x * x - y * y + z * z,
    )
}

/// Random rigid transform; deterministic given the rng state.
pub fn random_se3<R: Rng + ?Sized>(
    rotation_mode: RotationMode,
    bounds: &TranslationBounds,
    rng: &mut R,
) -> RigidTransform {
    let rotation = random_rotation(rotation_mode, rng);
    let mut translation = Vector3::zeros();
    for k in 0..3 {
        let u: f64 = rng.gen();
        translation[k] = bounds.min[k] + u * (bounds.max[k] - bounds.min[k]);
    }
    RigidTransform {
        rotation,
        translation,
    }
}

/// Axis-aligned bounding box with closed intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f32>,
    pub max: Vector3<f32>,
}

impl Aabb {
    pub fn from_points(points: &[Vector3<f32>]) -> Self {
        let mut min = Vector3::repeat(f32::INFINITY);
        let mut max = Vector3::repeat(f32::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        Self { min, max }
    }

    pub fn inflate(&self, margin: f32) -> Self {
        Self {
            min: self.min.add_scalar(-margin),
            max: self.max.add_scalar(margin),
        }
    }

    /// Touching boxes count as intersecting.
    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.max[k] && other.min[k] <= self.max[k])
    }

    pub fn center(&self) -> Vector3<f32> {
        (self.min + self.max) * 0.5
    }

    pub fn half_diagonal(&self) -> f32 {
        ((self.max - self.min) * 0.5).norm()
    }
}

/// Whether the margin-inflated bounding boxes of two clouds intersect.
pub fn aabb_overlap(cloud1: &PointCloud, cloud2: &PointCloud, margin: f32) -> bool {
    aabb_overlap_points(cloud1.points(), cloud2.points(), margin)
}

pub fn aabb_overlap_points(a: &[Vector3<f32>], b: &[Vector3<f32>], margin: f32) -> bool {
    Aabb::from_points(a)
        .inflate(margin)
        .intersects(&Aabb::from_points(b).inflate(margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn v(x: f32, y: f32, z: f32) -> Vector3<f32> {
        Vector3::new(x, y, z)
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|_| v(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        PointCloud::uniform(pts, Segment::Anchor).unwrap()
    }

    fn bounds() -> TranslationBounds {
        TranslationBounds::symmetric([2.0, 2.0, 2.0])
    }

    #[test]
    fn identity_leaves_cloud_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 20);
        assert_eq!(apply_transform(&RigidTransform::identity(), &cloud), cloud);
    }

    #[test]
    fn pure_translation() {
        let cloud = PointCloud::uniform(vec![v(0.0, 0.0, 0.0)], Segment::Action).unwrap();
        let t = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(apply_transform(&t, &cloud).points()[0], v(1.0, 2.0, 3.0));
    }

    #[test]
    fn quarter_turn_about_z() {
        let cloud = PointCloud::uniform(vec![v(1.0, 0.0, 0.0)], Segment::Action).unwrap();
        let out = apply_transform(&RigidTransform::rot_z(FRAC_PI_2), &cloud);
        assert!((out.points()[0] - v(0.0, 1.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn apply_keeps_labels_and_features() {
        let cloud = PointCloud::from_parts(&[v(0.0, 0.0, 0.0)], &[v(1.0, 0.0, 0.0)])
            .unwrap()
            .with_features(Features {
                dim: 1,
                values: vec![3.0, 4.0],
            })
            .unwrap();
        let out = apply_transform(&RigidTransform::rot_z(0.3), &cloud);
        assert_eq!(out.segments(), cloud.segments());
        assert_eq!(out.features(), cloud.features());
    }

    #[test]
    fn group_axioms() {
        assert_eq!(RigidTransform::identity().inverse(), RigidTransform::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let t = random_se3(RotationMode::Uniform, &bounds(), &mut rng);
            let p = Vector3::new(rng.gen::<f64>(), rng.gen(), rng.gen());
            let back = invert(&t).compose(&t).apply(&p);
            assert!((back - p).norm() < 1e-9);
            let id = t.compose(&t.inverse());
            assert!((id.rotation - Matrix3::identity()).amax() < 1e-6);
            assert!(id.translation.norm() < 1e-6);
        }
        let half = compose(&RigidTransform::rot_z(FRAC_PI_2), &RigidTransform::rot_z(FRAC_PI_2));
        let expected = RigidTransform::rot_z(std::f64::consts::PI);
        assert!((half.rotation - expected.rotation).amax() < 1e-12);
    }

    #[test]
    fn invariant_feature_examples() {
        let cloud = PointCloud::uniform(vec![v(1.0, 0.0, 0.0), v(1.0, 2.0, 2.0)], Segment::Anchor)
            .unwrap();
        let f = invariant_feature(&cloud, &v(0.0, 0.0, 0.0));
        assert_eq!(f.values, vec![1.0, 3.0]);
    }

    #[test]
    fn invariant_feature_is_zero_only_at_the_latent_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(&mut rng, 50);
        let z = cloud.points()[7];
        let f = invariant_feature(&cloud, &z);
        assert_eq!(f.values[7], 0.0);
        assert!(f.values.iter().enumerate().all(|(i, &d)| i == 7 || d > 0.0));
    }

    #[test]
    fn raw_displacement_is_not_rotation_invariant() {
        let p = Vector3::new(1.0, 0.0, 0.0);
        let z = Vector3::zeros();
        let t = RigidTransform::rot_z(FRAC_PI_2);
        let before = p - z;
        let after = t.apply(&p) - t.apply(&z);
        assert!((before - after).norm() > 1.0);
        assert!((before.norm() - after.norm()).abs() < 1e-12);
    }

    #[test]
    fn rigid_fit_recovers_translation_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src: Vec<Vector3<f64>> = (0..10)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let w: Vec<f64> = (0..10).map(|_| rng.gen_range(0.1..2.0)).collect();
        let t = weighted_rigid_fit(&src, &src, &w).unwrap();
        assert!((t.rotation - Matrix3::identity()).amax() < 1e-6);
        assert!(t.translation.norm() < 1e-6);

        let shifted: Vec<_> = src.iter().map(|p| p + Vector3::new(1.0, 1.0, 1.0)).collect();
        let t = weighted_rigid_fit(&src, &shifted, &w).unwrap();
        assert!((t.rotation - Matrix3::identity()).amax() < 1e-6);
        assert!((t.translation - Vector3::new(1.0, 1.0, 1.0)).norm() < 1e-6);
    }

    #[test]
    fn rigid_fit_rejects_collinear_sources() {
        let src: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let err = weighted_rigid_fit(&src, &src, &[1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::DegenerateConfiguration(_)));

        let err = weighted_rigid_fit(&src, &src, &[0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::DegenerateConfiguration(_)));

        // Collinear once zero-weighted points are ignored.
        let mut src2 = src.clone();
        src2.push(Vector3::new(0.0, 1.0, 0.0));
        let w = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        assert!(weighted_rigid_fit(&src2, &src2, &w).is_err());
    }

    #[test]
    fn rigid_fit_rejects_length_mismatch() {
        let src = vec![Vector3::zeros(); 3];
        assert!(matches!(
            weighted_rigid_fit(&src, &src[..2], &[1.0; 3]),
            Err(Error::LengthMismatch(3, 2))
        ));
    }

    #[test]
    fn rigid_fit_beats_perturbed_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src: Vec<Vector3<f64>> = (0..12)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let dst: Vec<Vector3<f64>> = src
            .iter()
            .map(|p| p * 1.1 + Vector3::new(rng.gen(), rng.gen(), rng.gen()) * 0.2)
            .collect();
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let residual = |t: &RigidTransform| -> f64 {
            src.iter()
                .zip(&dst)
                .zip(&w)
                .map(|((s, d), w)| w * (t.apply(s) - d).norm_squared())
                .sum()
        };
        let best = weighted_rigid_fit(&src, &dst, &w).unwrap();
        let unweighted = weighted_rigid_fit(&src, &dst, &[1.0; 12]).unwrap();
        assert!(residual(&best) <= residual(&unweighted) + 1e-12);
        for _ in 0..100 {
            let small = RigidTransform::from_axis_angle(
                Vector3::new(rng.gen(), rng.gen(), rng.gen::<f64>() + 0.1),
                rng.gen_range(-0.05..0.05),
            )
            .with_translation(Vector3::new(rng.gen(), rng.gen(), rng.gen()) * 0.01);
            assert!(residual(&best) <= residual(&small.compose(&best)) + 1e-12);
        }
    }

    #[test]
    fn random_se3_is_deterministic_and_valid() {
        let a = random_se3(RotationMode::Uniform, &bounds(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = random_se3(RotationMode::Uniform, &bounds(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.is_valid(1e-9));
        let id = random_se3(
            RotationMode::Identity,
            &TranslationBounds::zero(),
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        assert_eq!(id, RigidTransform::identity());
    }

    #[test]
    fn about_z_keeps_the_z_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let t = random_se3(RotationMode::AboutZ, &bounds(), &mut rng);
            assert!((t.rotation * Vector3::z() - Vector3::z()).norm() < 1e-12);
            assert!(t.translation.iter().all(|c| c.abs() <= 2.0));
        }
    }

    #[test]
    fn aabb_cases() {
        let unit = |c: f32| {
            PointCloud::uniform(vec![v(c - 0.5, -0.5, -0.5), v(c + 0.5, 0.5, 0.5)], Segment::Anchor)
                .unwrap()
        };
        assert!(aabb_overlap(&unit(0.0), &unit(0.0), 0.0));
        assert!(!aabb_overlap(&unit(0.0), &unit(10.0), 0.0));
        // Faces touch at x = 0.5.
        assert!(aabb_overlap(&unit(0.0), &unit(1.0), 0.0));
        assert!(!aabb_overlap(&unit(0.0), &unit(1.2), 0.05));
        assert!(aabb_overlap(&unit(0.0), &unit(1.2), 0.1));
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::new(vec![], vec![]).is_err());
        assert!(PointCloud::new(vec![v(f32::NAN, 0.0, 0.0)], vec![Segment::Action]).is_err());
        assert!(PointCloud::new(vec![v(0.0, 0.0, 0.0)], vec![]).is_err());
    }
    #[test]
    fn rigid_fit_vjp_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 7;
        let source: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let t_star = random_se3(RotationMode::Uniform, &TranslationBounds::symmetric([1.0; 3]), &mut rng);
        let targets: Vec<Vector3<f64>> = source
            .iter()
            .map(|s| t_star.apply(s) + Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)))
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
        let gr: [f64; 9] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let gt = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let loss = |s: &[Vector3<f64>], t: &[Vector3<f64>], w: &[f64]| {
            let a = weighted_rigid_fit(s, t, w).unwrap().to_array();
            (0..9).map(|k| a[k] * gr[k]).sum::<f64>() + a[9] * gt.x + a[10] * gt.y + a[11] * gt.z
        };
        let vjp = weighted_rigid_fit_vjp(&source, &targets, &weights, &gr, &gt);
        let h = 1e-6;
        let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        for i in 0..n {
            for k in 0..3 {
                let (mut up, mut down) = (source.clone(), source.clone());
                up[i][k] += h;
                down[i][k] -= h;
                close(vjp.source[i][k], (loss(&up, &targets, &weights) - loss(&down, &targets, &weights)) / (2.0 * h));
                let (mut up, mut down) = (targets.clone(), targets.clone());
                up[i][k] += h;
                down[i][k] -= h;
                close(vjp.targets[i][k], (loss(&source, &up, &weights) - loss(&source, &down, &weights)) / (2.0 * h));
            }
            let (mut up, mut down) = (weights.clone(), weights.clone());
            up[i] += h;
            down[i] -= h;
            close(vjp.weights[i], (loss(&source, &targets, &up) - loss(&source, &targets, &down)) / (2.0 * h));
        }
    }
}
