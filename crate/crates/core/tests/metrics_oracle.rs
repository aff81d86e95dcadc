mod common;

use common::{brute_auc, brute_rates};
use kws_core::evaluator::{auc, det_curve, frr_at_far, DetCurve};
use proptest::prelude::*;

/// Scores on a coarse grid so ties are common.
fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..250, 1usize..250).prop_flat_map(|(np, nn)| {
        (
            prop::collection::vec((0u32..60).prop_map(|v| f64::from(v) / 59.0), np),
            prop::collection::vec((0u32..60).prop_map(|v| f64::from(v) / 59.0), nn),
        )
    })
}

/// Lower envelope of the brute-force curve, interpolated at `target`.
fn brute_frr_at(pos: &[f64], neg: &[f64], target: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = pos
        .iter()
        .chain(neg)
        .map(|&t| brute_rates(pos, neg, t))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup_by(|b, a| a.0 == b.0);
    if let Some(p) = pts.iter().find(|p| p.0 == target) {
        return Some(p.1);
    }
    let hi = pts.iter().position(|p| p.0 > target)?;
    if hi == 0 {
        return None;
    }
    let (a, b) = (pts[hi - 1], pts[hi]);
    Some(a.1 + (b.1 - a.1) * (target - a.0) / (b.0 - a.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn det_points_match_recount((pos, neg) in scores()) {
        let curve = det_curve(&pos, &neg).unwrap();
        let mut thresholds: Vec<f64> = pos.iter().chain(&neg).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        prop_assert_eq!(curve.points.len(), thresholds.len());
        for (p, t) in curve.points.iter().zip(&thresholds) {
            prop_assert_eq!(p.threshold, *t);
            let (far, frr) = brute_rates(&pos, &neg, *t);
            prop_assert_eq!(p.far, far);
            prop_assert_eq!(p.frr, frr);
        }
    }

    #[test]
    fn auc_matches_pair_count((pos, neg) in scores()) {
        let a = auc(&pos, &neg).unwrap();
        prop_assert!((a - brute_auc(&pos, &neg)).abs() < 1e-12);
    }

    #[test]
    fn frr_at_far_matches_envelope((pos, neg) in scores(), target in 0.0f64..1.0) {
        let curve: DetCurve = det_curve(&pos, &neg).unwrap();
        let got = frr_at_far(&curve, target).unwrap();
        match brute_frr_at(&pos, &neg, target) {
            Some(frr) => {
                prop_assert!(got.reachable);
                prop_assert!((got.frr - frr).abs() < 1e-12);
            }
            None => prop_assert!(!got.reachable),
        }
    }

    #[test]
    fn det_is_monotone((pos, neg) in scores()) {
        let c = det_curve(&pos, &neg).unwrap();
        for w in c.points.windows(2) {
            prop_assert!(w[1].far <= w[0].far && w[1].frr >= w[0].frr);
        }
    }
}
