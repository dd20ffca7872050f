use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use taxposed::geometry::{
    apply_transform, invariant_feature, random_se3, weighted_rigid_fit, PointCloud, RigidTransform, RotationMode,
    Segment, TranslationBounds,
};
use taxposed::latent::{gumbel_softmax_with_noise, normalize, sample_gumbel, weighted_point};
use taxposed::losses::jsd;
use taxposed::pipeline::SuccessCriterion;

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]
}

fn transform(seed: u64) -> RigidTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_se3(RotationMode::Uniform, &TranslationBounds::symmetric([2.0; 3]), &mut rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compose_with_inverse_is_identity(seed in any::<u64>(), p in point()) {
        let t = transform(seed);
        let p = Vector3::from(p);
        let back = t.inverse().compose(&t).apply(&p);
        prop_assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn rigid_fit_recovers_exact_motion(
        seed in any::<u64>(),
        pts in prop::collection::vec(point(), 4..40),
        wts in prop::collection::vec(0.05f64..5.0, 40),
    ) {
        let src: Vec<Vector3<f64>> = pts.iter().map(|p| Vector3::from(*p)).collect();
        // Skip near-collinear sets, where rotation is not identifiable.
        let c = src.iter().sum::<Vector3<f64>>() / src.len() as f64;
        let cov = src.iter().fold(nalgebra::Matrix3::zeros(), |m, p| m + (p - c) * (p - c).transpose());
        let eig = cov.symmetric_eigenvalues();
        let mut ev: Vec<f64> = eig.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assume!(ev[1] > 1e-2);
        let t = transform(seed);
        let tgt: Vec<_> = src.iter().map(|p| t.apply(p)).collect();
        let fit = weighted_rigid_fit(&src, &tgt, &wts[..src.len()]).unwrap();
        prop_assert!(fit.rotation_distance(&t) < 1e-6);
        prop_assert!((fit.translation - t.translation).norm() < 1e-6);
        prop_assert!(fit.is_valid(1e-9));
    }

    #[test]
    fn invariant_feature_ignores_rigid_motion(seed in any::<u64>(), pts in prop::collection::vec(point(), 2..50), pick in any::<prop::sample::Index>()) {
        let pts: Vec<Vector3<f32>> = pts.iter().map(|p| Vector3::from(*p).cast()).collect();
        let cloud = PointCloud::uniform(pts, Segment::Action).unwrap();
        let z = cloud.points()[pick.index(cloud.len())];
        let t = transform(seed);
        let a = invariant_feature(&cloud, &z);
        let b = invariant_feature(&apply_transform(&t, &cloud), &t.apply_f32(&z));
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn jsd_is_symmetric_and_bounded(
        a in prop::collection::vec(-6.0f64..6.0, 2..30),
        b in prop::collection::vec(-6.0f64..6.0, 30),
    ) {
        let q = normalize(&a);
        let p = normalize(&b[..a.len()]);
        let d = jsd(&q, &p).unwrap();
        prop_assert_eq!(d, jsd(&p, &q).unwrap());
        prop_assert!(d >= 0.0 && d <= std::f64::consts::LN_2 + 1e-12);
        prop_assert!(jsd(&q, &q).unwrap() <= 1e-12);
    }

    #[test]
    fn hard_gumbel_is_one_hot_at_relaxed_argmax(logits in prop::collection::vec(-5.0f64..5.0, 1..40), seed in any::<u64>(), tau in 0.05f64..5.0) {
        let noise = sample_gumbel(logits.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        let soft = gumbel_softmax_with_noise(&logits, &noise, tau, false);
        let hard = gumbel_softmax_with_noise(&logits, &noise, tau, true);
        prop_assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(hard.iter().filter(|&&v| v == 1.0).count(), 1);
        prop_assert_eq!(hard.iter().filter(|&&v| v == 0.0).count(), logits.len() - 1);
        let k = hard.iter().position(|&v| v == 1.0).unwrap();
        prop_assert!(soft.iter().all(|&v| v <= soft[k]));
    }

    #[test]
    fn weighted_point_lies_in_bounding_box(pts in prop::collection::vec(point(), 1..30), logits in prop::collection::vec(-3.0f64..3.0, 30)) {
        let pts: Vec<Vector3<f32>> = pts.iter().map(|p| Vector3::from(*p).cast()).collect();
        let w = normalize(&logits[..pts.len()]);
        let z = weighted_point(&pts, &w);
        for axis in 0..3 {
            let lo = pts.iter().map(|p| p[axis]).fold(f32::INFINITY, f32::min);
            let hi = pts.iter().map(|p| p[axis]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(z[axis] >= lo - 1e-5 && z[axis] <= hi + 1e-5);
        }
    }

    #[test]
    fn looser_tolerances_never_reject_more(r in 0.0f64..90.0, t in 0.0f64..0.5, tr in 1.0f64..30.0, tt in 0.01f64..0.3, extra in 0.0f64..10.0) {
        let tight = SuccessCriterion { tol_r_deg: tr, tol_t: tt };
        let loose = SuccessCriterion { tol_r_deg: tr + extra, tol_t: tt + extra / 10.0 };
        prop_assert!(!tight.accepts(r, t) || loose.accepts(r, t));
    }
}
