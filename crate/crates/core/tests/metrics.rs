mod common;

use cmd_core::metrics::*;
use common::{oracle_bf1, oracle_dice, oracle_precision, random_mask};
use proptest::prelude::*;

fn mask_from(rows: &[&str]) -> BinaryMask {
    let h = rows.len();
    let w = rows[0].len();
    BinaryMask::new(h, w, rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect()).unwrap()
}

fn square(side: usize, y0: usize, x0: usize, len: usize) -> BinaryMask {
    BinaryMask::new(side, side, (0..side * side).map(|i| (y0..y0 + len).contains(&(i / side)) && (x0..x0 + len).contains(&(i % side))).collect()).unwrap()
}

#[test]
fn oracle_agreement_on_random_small_masks() {
    let mut rng = common::rng(2024);
    for _ in 0..1000 {
        let (p, g) = (random_mask(4, 4, &mut rng), random_mask(4, 4, &mut rng));
        assert_eq!(dice(&p, &g).unwrap(), oracle_dice(&p, &g));
        assert_eq!(precision(&p, &g).unwrap(), oracle_precision(&p, &g));
        for tol in [0.0, 1.0, 1.5, 2.0] {
            assert!((boundary_f1(&p, &g, tol).unwrap() - oracle_bf1(&p, &g, tol)).abs() <= 1e-9);
        }
    }
}

#[test]
fn dice_examples() {
    let a = square(8, 0, 0, 4);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&a, &square(8, 4, 4, 4)).unwrap(), 0.0);
    // 16 and 16 pixels overlapping in 8
    assert_eq!(dice(&a, &square(8, 2, 0, 4)).unwrap(), 0.5);
    let empty = BinaryMask::new(8, 8, vec![false; 64]).unwrap();
    assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    assert!(dice(&a, &BinaryMask::new(4, 16, vec![false; 64]).unwrap()).is_err());
}

#[test]
fn precision_examples() {
    let gt = square(8, 0, 0, 6);
    assert_eq!(precision(&square(8, 1, 1, 3), &gt).unwrap(), 1.0);
    assert_eq!(precision(&square(8, 6, 6, 2), &gt).unwrap(), 0.0);
    let p = mask_from(&["#######.", "...#####", "........", "........"]);
    let g = mask_from(&["#######.", "........", "........", "........"]);
    // 12 predicted, 7 of them true
    assert_eq!(p.count(), 12);
    assert!((precision(&p, &g).unwrap() - 7.0 / 12.0).abs() < 1e-15);
    let p10 = mask_from(&["##########", ".........."]);
    let g7 = mask_from(&["#######...", "##########"]);
    assert_eq!(precision(&p10, &g7).unwrap(), 0.7);
    let empty = BinaryMask::new(8, 8, vec![false; 64]).unwrap();
    assert_eq!(precision(&empty, &empty).unwrap(), 1.0);
    assert_eq!(precision(&empty, &gt).unwrap(), 0.0);
}

#[test]
fn boundary_f1_examples() {
    let gt = square(16, 4, 4, 8);
    assert_eq!(boundary_f1(&gt, &gt, 2.0).unwrap(), 1.0);
    assert_eq!(boundary_f1(&square(16, 5, 4, 8), &gt, 2.0).unwrap(), 1.0);
    let far = square(16, 4, 9, 7);
    let got = boundary_f1(&far, &gt, 2.0).unwrap();
    assert!(got < 1.0);
    assert!((got - oracle_bf1(&far, &gt, 2.0)).abs() < 1e-12);
    assert!(boundary_f1(&gt, &gt, -1.0).is_err());
    assert!(boundary_f1(&gt, &gt, f64::NAN).is_err());
    let empty = BinaryMask::new(16, 16, vec![false; 256]).unwrap();
    assert_eq!(boundary_f1(&empty, &empty, 2.0).unwrap(), 1.0);
    assert_eq!(boundary_f1(&empty, &gt, 2.0).unwrap(), 0.0);
}

#[test]
fn boundary_definition() {
    let m = mask_from(&["....", ".###", ".###", ".###"]);
    let b = m.boundary();
    // interior pixel (2,2) is the only non-boundary foreground pixel
    let expect = mask_from(&["....", ".###", ".#.#", ".###"]);
    assert_eq!(b, expect);
}

#[test]
fn bootstrap_examples() {
    let one = bootstrap_ci("dice", &[0.7], DEFAULT_RESAMPLES, 3).unwrap();
    assert_eq!((one.ci_low, one.mean, one.ci_high), (0.7, 0.7, 0.7));
    let flat = bootstrap_ci("dice", &[0.4; 25], DEFAULT_RESAMPLES, 3).unwrap();
    assert_eq!(flat.ci_low, flat.ci_high);
    let scores: Vec<f64> = (0..40).map(|i| 0.5 + 0.3 * ((i as f64) * 0.7).sin()).collect();
    let a = bootstrap_ci("dice", &scores, DEFAULT_RESAMPLES, 11).unwrap();
    assert_eq!(a, bootstrap_ci("dice", &scores, DEFAULT_RESAMPLES, 11).unwrap());
    assert_ne!(a, bootstrap_ci("dice", &scores, DEFAULT_RESAMPLES, 12).unwrap());
    assert_eq!(a.n_resamples, 1000);
    assert!(a.ci_low <= a.mean && a.mean <= a.ci_high && a.ci_low < a.ci_high);
    assert!(bootstrap_ci("dice", &[], 10, 0).is_err());
}

#[test]
fn percentile_interpolates() {
    let v = [1.0, 2.0, 4.0, 8.0];
    assert_eq!(percentile(&v, 0.0), 1.0);
    assert_eq!(percentile(&v, 1.0), 8.0);
    assert_eq!(percentile(&v, 0.5), 3.0);
    assert_eq!(percentile(&v, 0.025), 1.075);
}

#[test]
fn evaluation_report() {
    let mut rng = common::rng(8);
    let pairs: Vec<_> = (0..12).map(|i| (format!("img{i}"), random_mask(8, 8, &mut rng), random_mask(8, 8, &mut rng))).collect();
    let r = evaluate_masks(&pairs, DEFAULT_BF1_TOL, DEFAULT_RESAMPLES, 0).unwrap();
    assert_eq!(r.n_images, 12);
    assert_eq!(r.bf1_tolerance, 2.0);
    let names: Vec<&str> = r.metrics.iter().map(|m| m.metric_name.as_str()).collect();
    assert_eq!(names, ["dice", "precision", "boundary_f1"]);
    let mean_dice = pairs.iter().map(|(_, p, g)| oracle_dice(p, g)).sum::<f64>() / 12.0;
    assert!((r.metric("dice").unwrap().mean - mean_dice).abs() < 1e-12);
    assert!(r.metrics.iter().all(|m| m.n_resamples == 1000 && m.ci_low <= m.mean && m.mean <= m.ci_high));
    assert_eq!(r, evaluate_masks(&pairs, DEFAULT_BF1_TOL, DEFAULT_RESAMPLES, 0).unwrap());
}

fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
        (proptest::collection::vec(any::<bool>(), h * w), proptest::collection::vec(any::<bool>(), h * w))
            .prop_map(move |(a, b)| (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn symmetric_metrics((p, g) in arb_pair(), tol in 0.0f64..4.0) {
        prop_assert_eq!(dice(&p, &g).unwrap(), dice(&g, &p).unwrap());
        prop_assert_eq!(boundary_f1(&p, &g, tol).unwrap(), boundary_f1(&g, &p, tol).unwrap());
        // precision swaps into recall
        let inter = p.data.iter().zip(&g.data).filter(|(a, b)| **a && **b).count();
        if g.count() > 0 {
            prop_assert_eq!(precision(&g, &p).unwrap(), inter as f64 / g.count() as f64);
        }
    }

    #[test]
    fn transpose_invariance((p, g) in arb_pair(), tol in 0.0f64..4.0) {
        let (pt, gt) = (p.transpose(), g.transpose());
        prop_assert_eq!(dice(&p, &g).unwrap(), dice(&pt, &gt).unwrap());
        prop_assert_eq!(precision(&p, &g).unwrap(), precision(&pt, &gt).unwrap());
        prop_assert!((boundary_f1(&p, &g, tol).unwrap() - boundary_f1(&pt, &gt, tol).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn scores_lie_in_unit_interval((p, g) in arb_pair()) {
        for v in [dice(&p, &g).unwrap(), precision(&p, &g).unwrap(), boundary_f1(&p, &g, 2.0).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn ci_contains_mean(scores in proptest::collection::vec(0.0f64..1.0, 1..30), seed: u64) {
        let r = bootstrap_ci("m", &scores, 200, seed).unwrap();
        prop_assert!(r.ci_low <= r.ci_high);
        prop_assert!(r.ci_low >= scores.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-12);
        prop_assert!(r.ci_high <= scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-12);
    }
}
