use aia_core::metrics::average_precision;
use proptest::prelude::*;

/// Interpolated AP computed by counting, threshold by threshold.
fn brute_force_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&s| {
            let admitted: Vec<bool> = scores.iter().zip(labels).filter(|(&x, _)| x >= s).map(|(_, &l)| l).collect();
            let tp = admitted.iter().filter(|&&l| l).count() as f64;
            (tp / positives as f64, tp / admitted.len() as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(recall, _) in &points {
        if recall > prev {
            let best = points.iter().filter(|(r, _)| *r >= recall).map(|(_, p)| *p).fold(0.0, f64::max);
            ap += (recall - prev) * best;
            prev = recall;
        }
    }
    Some(ap)
}

#[test]
fn inverted_ranking_scores_prevalence() {
    let labels = [false, false, false, true, true];
    let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
    let ap = average_precision(&scores, &labels).unwrap();
    assert!((ap - 0.4).abs() < 1e-12, "{ap}");
}

proptest! {
    #[test]
    fn matches_brute_force(items in prop::collection::vec((0u8..6, any::<bool>()), 1..30)) {
        // few distinct scores so ties are common
        let scores: Vec<f64> = items.iter().map(|(s, _)| *s as f64 / 5.0).collect();
        let labels: Vec<bool> = items.iter().map(|(_, l)| *l).collect();
        let got = average_precision(&scores, &labels);
        let want = brute_force_ap(&scores, &labels);
        match (got, want) {
            (Some(g), Some(w)) => prop_assert!((g - w).abs() < 1e-12, "{} vs {}", g, w),
            (g, w) => prop_assert_eq!(g, w),
        }
    }

    #[test]
    fn lies_between_zero_and_one(items in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..30)) {
        let scores: Vec<f64> = items.iter().map(|(s, _)| *s).collect();
        let labels: Vec<bool> = items.iter().map(|(_, l)| *l).collect();
        if let Some(ap) = average_precision(&scores, &labels) {
            prop_assert!(ap > 0.0 && ap <= 1.0 + 1e-12);
        }
    }
}
