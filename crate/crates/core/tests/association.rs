use dmtrack_core::association::{
    corners_to_cxcyah, cxcyah_to_corners, iou, match_score, solve_assignment, trend_sim, Assignment, ScoreMatrix,
    ScoreWeights, TrendSign,
};
use dmtrack_core::rng::SplitMix64;
use proptest::prelude::*;

/// Best total over every partial injection rows → cols, by exhaustive search.
fn brute_force(m: &ScoreMatrix) -> f64 {
    fn go(m: &ScoreMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == m.rows() {
            *best = best.max(acc);
            return;
        }
        go(m, row + 1, used, acc, best);
        for j in 0..m.cols() {
            if !used[j] {
                if let Some(s) = m.score(row, j) {
                    used[j] = true;
                    go(m, row + 1, used, acc + s, best);
                    used[j] = false;
                }
            }
        }
    }
    let mut best = 0.0;
    go(m, 0, &mut vec![false; m.cols()], 0.0, &mut best);
    best
}

fn check_partition(a: &Assignment, rows: usize, cols: usize) {
    let mut seen_r = vec![0; rows];
    let mut seen_c = vec![0; cols];
    for &(i, j) in &a.matched {
        seen_r[i] += 1;
        seen_c[j] += 1;
    }
    a.unmatched_rows.iter().for_each(|&i| seen_r[i] += 1);
    a.unmatched_cols.iter().for_each(|&j| seen_c[j] += 1);
    assert!(seen_r.iter().chain(&seen_c).all(|&c| c == 1));
}

#[test]
fn solver_matches_brute_force_on_random_matrices() {
    for seed in 0..500u64 {
        let mut rng = SplitMix64::new(seed);
        let rows = rng.below(8) as usize;
        let cols = rng.below(8) as usize;
        // dyadic scores keep every partial sum exact, so totals compare with ==
        let cells = (0..rows * cols)
            .map(|_| {
                let gated = rng.bernoulli(0.3);
                let s = (rng.below(2048) as f64 - 256.0) / 1024.0;
                (!gated).then_some(s)
            })
            .collect();
        let m = ScoreMatrix::from_cells(rows, cols, cells).unwrap();
        let a = solve_assignment(&m);
        check_partition(&a, rows, cols);
        assert!(a.matched.iter().all(|&(i, j)| m.score(i, j).is_some()));
        assert_eq!(a.total(&m), brute_force(&m), "seed {seed} ({rows}x{cols})");
    }
}

#[test]
fn gated_pairs_are_never_matched() {
    let mut rng = SplitMix64::new(77);
    for _ in 0..200 {
        let (r, c) = (1 + rng.below(6) as usize, 1 + rng.below(6) as usize);
        let ious: Vec<f64> = (0..r * c).map(|_| rng.uniform()).collect();
        let m = ScoreMatrix::build(r, c, 0.3, |i, j| Some((ious[i * c + j], 0.7 * ious[i * c + j] + 0.1)));
        for (i, j) in solve_assignment(&m).matched {
            assert!(m.iou(i, j) >= 0.3);
        }
    }
}

#[test]
fn cross_pairing_example() {
    let m = ScoreMatrix::from_cells(2, 2, vec![Some(0.9), Some(0.8), Some(0.8), Some(0.1)]).unwrap();
    let a = solve_assignment(&m);
    assert_eq!(a.matched, vec![(0, 1), (1, 0)]);
    assert_eq!(a.total(&m), 1.6);
}

fn boxes() -> impl Strategy<Value = [f64; 4]> {
    (-500.0f64..500.0, -500.0f64..500.0, 0.1f64..4.0, 1.0f64..200.0).prop_map(|(x, y, a, h)| [x, y, a, h])
}

proptest! {
    #[test]
    fn corner_roundtrip(b in boxes()) {
        let back = corners_to_cxcyah(cxcyah_to_corners(b).unwrap());
        let c1 = cxcyah_to_corners(b).unwrap();
        let c2 = cxcyah_to_corners(back).unwrap();
        for k in 0..4 {
            prop_assert!((c1[k] - c2[k]).abs() <= 1e-12 * (1.0 + c1[k].abs()));
        }
    }

    #[test]
    fn iou_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let (ca, cb) = (cxcyah_to_corners(a).unwrap(), cxcyah_to_corners(b).unwrap());
        let v = iou(&ca, &cb);
        prop_assert_eq!(v, iou(&cb, &ca));
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn score_is_monotone(i in 0.0f64..1.0, t in -1.0f64..1.0, p in 1e-6f64..1.0, d in 0.0f64..0.5) {
        let w = ScoreWeights::default();
        let s = match_score(i, t, p, &w);
        prop_assert!(match_score((i + d).min(1.0), t, p, &w) >= s);
        prop_assert!(match_score(i, (t + d).min(1.0), p, &w) >= s);
        prop_assert!(match_score(i, t, (p + d).min(1.0), &w) >= s);
    }

    #[test]
    fn trend_scale_invariant(
        px in -50.0f64..50.0, py in -50.0f64..50.0,
        tx in -5.0f64..5.0, ty in -5.0f64..5.0,
        dx in -5.0f64..5.0, dy in -5.0f64..5.0,
        k in 0.01f64..100.0,
    ) {
        let mk = |x: f64, y: f64| { let mut s = [0.0; 8]; s[0] = x; s[1] = y; s };
        let base = trend_sim(&mk(px, py), &mk(px - tx, py - ty), &[px - dx, py - dy, 1.0, 1.0], TrendSign::PredMinusDet);
        let scaled = trend_sim(&mk(px, py), &mk(px - k * tx, py - k * ty), &[px - k * dx, py - k * dy, 1.0, 1.0], TrendSign::PredMinusDet);
        prop_assert!((-1.0..=1.0).contains(&base));
        if (tx.hypot(ty) * k.min(1.0)) > 1e-6 && (dx.hypot(dy) * k.min(1.0)) > 1e-6 {
            prop_assert!((base - scaled).abs() < 1e-9, "{} vs {}", base, scaled);
        }
    }
}
