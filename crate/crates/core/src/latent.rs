//! Spatially-grounded discrete latent: per-object categorical distributions
//! over points, Gumbel-softmax sampling and latent-centered clouds.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Segment};

/// Logits over the points of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalPointDistribution {
    pub logits: Vec<f64>,
    pub segment: Segment,
}

impl CategoricalPointDistribution {
    pub fn new(logits: Vec<f64>, segment: Segment) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::EmptySegment(segment.name()));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidPointCloud("non-finite logit".into()));
        }
        Ok(Self { logits, segment })
    }

    pub fn uniform(n: usize, segment: Segment) -> Self {
        Self {
            logits: vec![0.0; n],
            segment,
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        normalize(&self.logits)
    }
}

/// Softmax with max subtraction, so logits of any finite magnitude are safe.
pub fn normalize(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// i.i.d. standard Gumbel noise.
pub fn sample_gumbel<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((logits + noise) / tau)`.
pub fn relaxed_weights(logits: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / tau)
        .collect();
    normalize(&scaled)
}

/// Gradient with respect to the logits of `Σ grad_out · relaxed_weights`,
/// given the relaxed weights `soft` from the forward pass.
pub fn relaxed_weights_vjp(soft: &[f64], tau: f64, grad_out: &[f64]) -> Vec<f64> {
    let dot: f64 = soft.iter().zip(grad_out).map(|(y, g)| y * g).sum();
    soft.iter()
        .zip(grad_out)
        .map(|(y, g)| y * (g - dot) / tau)
        .collect()
}

/// Gumbel-softmax with caller-supplied noise. With `hard` the result is the
/// one-hot vector at the relaxed argmax.
pub fn gumbel_softmax_with_noise(logits: &[f64], noise: &[f64], tau: f64, hard: bool) -> Vec<f64> {
    let soft = relaxed_weights(logits, noise, tau);
    if hard {
        one_hot(soft.len(), argmax(&soft))
    } else {
        soft
    }
}

pub fn gumbel_softmax_sample<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    rng: &mut R,
    hard: bool,
) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let noise = sample_gumbel(logits.len(), rng);
    gumbel_softmax_with_noise(logits, &noise, temperature, hard)
}

/// Plain categorical draw from `probs`.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Convex combination of points.
pub fn weighted_point(points: &[Vector3<f32>], weights: &[f64]) -> Vector3<f32> {
    let mut acc = Vector3::<f64>::zeros();
    for (p, w) in points.iter().zip(weights) {
        if *w != 0.0 {
            acc += p.cast::<f64>() * *w;
        }
    }
    acc.cast()
}

/// Latent points chosen on both objects.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSelection {
    pub weights_a: Vec<f64>,
    pub weights_b: Vec<f64>,
    pub point_a: Vector3<f32>,
    pub point_b: Vector3<f32>,
    pub temperature: f64,
}

impl LatentSelection {
    pub fn from_weights(cloud: &PointCloud, weights_a: Vec<f64>, weights_b: Vec<f64>, temperature: f64) -> Result<Self> {
        let action = cloud.segment_points(Segment::Action);
        let anchor = cloud.segment_points(Segment::Anchor);
        if weights_a.len() != action.len() {
            return Err(Error::SegmentMismatch {
                expected: action.len(),
                actual: weights_a.len(),
            });
        }
        if weights_b.len() != anchor.len() {
            return Err(Error::SegmentMismatch {
                expected: anchor.len(),
                actual: weights_b.len(),
            });
        }
        Ok(Self {
            point_a: weighted_point(&action, &weights_a),
            point_b: weighted_point(&anchor, &weights_b),
            weights_a,
            weights_b,
            temperature,
        })
    }

    /// Hard selection of action point `a` and anchor point `b` (segment-local
    /// indices).
    pub fn from_indices(cloud: &PointCloud, a: usize, b: usize) -> Result<Self> {
        let na = cloud.segment_len(Segment::Action);
        let nb = cloud.segment_len(Segment::Anchor);
        if a >= na || b >= nb {
            return Err(Error::SegmentMismatch {
                expected: if a >= na { na } else { nb },
                actual: if a >= na { a } else { b },
            });
        }
        Self::from_weights(cloud, one_hot(na, a), one_hot(nb, b), 0.0)
    }
}

/// Samples one latent point per object from its distribution.
pub fn select_latent<R: Rng + ?Sized>(
    dist_a: &CategoricalPointDistribution,
    dist_b: &CategoricalPointDistribution,
    cloud: &PointCloud,
    temperature: f64,
    rng: &mut R,
    hard: bool,
) -> Result<LatentSelection> {
    for (dist, seg) in [(dist_a, Segment::Action), (dist_b, Segment::Anchor)] {
        let n = cloud.segment_len(seg);
        if dist.len() != n {
            return Err(Error::SegmentMismatch {
                expected: n,
                actual: dist.len(),
            });
        }
    }
    let wa = gumbel_softmax_sample(&dist_a.logits, temperature, rng, hard);
    let wb = gumbel_softmax_sample(&dist_b.logits, temperature, rng, hard);
    LatentSelection::from_weights(cloud, wa, wb, temperature)
}

/// Action cloud translated by `-point_a` and anchor cloud by `-point_b`.
pub fn center_on_latent(cloud: &PointCloud, selection: &LatentSelection) -> Result<(PointCloud, PointCloud)> {
    let shift = |seg: Segment, c: &Vector3<f32>| -> Result<PointCloud> {
        let pts: Vec<Vector3<f32>> = cloud.segment_points(seg).iter().map(|p| p - c).collect();
        PointCloud::uniform(pts, seg)
    };
    Ok((
        shift(Segment::Action, &selection.point_a)?,
        shift(Segment::Anchor, &selection.point_b)?,
    ))
}
