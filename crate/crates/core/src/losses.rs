//! Reconstruction losses, Jensen-Shannon prior matching and the total
//! objective.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::latent::CategoricalPointDistribution;

/// Floor applied inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Relative weights of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub displacement: f64,
    pub direct_corr: f64,
    pub consistency: f64,
    pub prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            displacement: 1.0,
            direct_corr: 0.1,
            consistency: 1.0,
            prior: 1.0,
        }
    }
}

/// Loss components for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub displacement: f64,
    pub direct_corr: f64,
    pub consistency: f64,
    pub prior_jsd: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(displacement: f64, direct_corr: f64, consistency: f64, prior_jsd: f64, weights: &LossWeights) -> Self {
        let total = weights.displacement * displacement
            + weights.direct_corr * direct_corr
            + weights.consistency * consistency
            + weights.prior * prior_jsd;
        Self {
            displacement,
            direct_corr,
            consistency,
            prior_jsd,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.displacement, self.direct_corr, self.consistency, self.prior_jsd, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub const CSV_HEADER: &'static str = "step,displacement,direct_corr,consistency,prior_jsd,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.displacement, self.direct_corr, self.consistency, self.prior_jsd, self.total
        )
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.displacement += r.displacement / n;
            out.direct_corr += r.direct_corr / n;
            out.consistency += r.consistency / n;
            out.prior_jsd += r.prior_jsd / n;
            out.total += r.total / n;
        }
        out
    }
}

fn mean_distance(a: impl Iterator<Item = Vector3<f64>>, b: impl Iterator<Item = Vector3<f64>>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.zip(b) {
        sum += (x - y).norm();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean of `‖T_pred pᵢ − T_gt pᵢ‖`.
pub fn displacement_loss(t_pred: &RigidTransform, t_gt: &RigidTransform, action: &[Vector3<f64>]) -> f64 {
    mean_distance(
        action.iter().map(|p| t_pred.apply(p)),
        action.iter().map(|p| t_gt.apply(p)),
    )
}

/// Mean of `‖ṽᵢ − T_gt pᵢ‖`.
pub fn direct_correspondence_loss(
    correspondences: &[Vector3<f64>],
    t_gt: &RigidTransform,
    action: &[Vector3<f64>],
) -> f64 {
    mean_distance(correspondences.iter().copied(), action.iter().map(|p| t_gt.apply(p)))
}

/// Mean of `‖ṽᵢ − T_pred pᵢ‖`.
pub fn consistency_loss(
    correspondences: &[Vector3<f64>],
    t_pred: &RigidTransform,
    action: &[Vector3<f64>],
) -> f64 {
    mean_distance(correspondences.iter().copied(), action.iter().map(|p| t_pred.apply(p)))
}

fn kl_to_mixture(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, _)| **x > 0.0)
        .map(|(x, y)| {
            let m = 0.5 * (x + y);
            x * (x.max(LOG_FLOOR).ln() - m.max(LOG_FLOOR).ln())
        })
        .sum()
}

/// Jensen-Shannon divergence in nats.
pub fn jsd(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::LengthMismatch(q.len(), p.len()));
    }
    Ok(jsd_unchecked(q, p))
}

pub(crate) fn jsd_unchecked(q: &[f64], p: &[f64]) -> f64 {
    0.5 * kl_to_mixture(q, p) + 0.5 * kl_to_mixture(p, q)
}

/// Partial derivatives of [`jsd`] with respect to each argument:
/// `∂/∂qᵢ = ½ ln(qᵢ / mᵢ)`.
pub fn jsd_gradients(q: &[f64], p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| 0.5 * (x.max(LOG_FLOOR).ln() - (0.5 * (x + y)).max(LOG_FLOOR).ln()))
            .collect()
    };
    (d(q, p), d(p, q))
}

/// `jsd(q_A, p_A) + jsd(q_B, p_B)` on normalized distributions. Training
/// builds the same quantity on the tape with `q` detached.
pub fn prior_loss(
    q: (&CategoricalPointDistribution, &CategoricalPointDistribution),
    p: (&CategoricalPointDistribution, &CategoricalPointDistribution),
) -> Result<f64> {
    let mut total = 0.0;
    for (qd, pd) in [(q.0, p.0), (q.1, p.1)] {
        if qd.len() != pd.len() {
            return Err(Error::SegmentMismatch {
                expected: qd.len(),
                actual: pd.len(),
            });
        }
        total += jsd_unchecked(&qd.probabilities(), &pd.probabilities());
    }
    Ok(total)
}
