use dmtrack_core::metrics::{identity_scores, idf1, match_frames, mota, summarize};
use dmtrack_core::mot_io::MotRow;
use dmtrack_core::rng::SplitMix64;
use proptest::prelude::*;

/// Box of size 20x20 at slot `slot` (slots never overlap).
fn at(frame: u64, id: i64, slot: usize) -> MotRow {
    MotRow {
        frame,
        id,
        tlwh: [100.0 * slot as f64, 50.0, 20.0, 20.0],
        conf: 1.0,
    }
}

#[test]
fn perfect_tracking() {
    let gt: Vec<_> = (1..=10).flat_map(|f| (0..4).map(move |k| at(f, k as i64 + 1, k))).collect();
    let s = summarize(&gt, &gt, 0.5).unwrap();
    assert_eq!((s.mota, s.idf1, s.idsw, s.fp, s.fn_, s.tp), (1.0, 1.0, 0, 0, 0, 40));
}

#[test]
fn swapped_ids_count_two_switches() {
    // gt 1 in slot 0, gt 2 in slot 1; output ids swap from frame 6 on
    let gt: Vec<_> = (1..=10).flat_map(|f| [at(f, 1, 0), at(f, 2, 1)]).collect();
    let hyp: Vec<_> = (1..=10)
        .flat_map(|f| if f <= 5 { [at(f, 7, 0), at(f, 8, 1)] } else { [at(f, 8, 0), at(f, 7, 1)] })
        .collect();
    let m = match_frames(&gt, &hyp, 0.5);
    assert_eq!((m.tp(), m.fp(), m.fn_(), m.idsw()), (20, 0, 0, 2));
    assert_eq!(m.frames[5].idsw, 2);
    assert_eq!(mota(&m).unwrap(), 0.9);
    // best identity map keeps 5 of 10 frames per object
    assert_eq!(idf1(&gt, &hyp, 0.5).unwrap(), 0.5);
}

#[test]
fn counted_errors_give_068() {
    // 10 objects x 10 frames = 100 gt boxes
    let gt: Vec<_> = (1..=10).flat_map(|f| (0..10).map(move |k| at(f, k as i64 + 1, k))).collect();
    let mut hyp = Vec::new();
    for f in 1..=10u64 {
        for k in 0..10usize {
            let id = match k {
                // objects 3 and 4 are never reported: 20 misses
                2 | 3 => continue,
                // objects 1 and 2 change track id once each: 2 switches
                0 | 1 if f > 5 => 200 + k as i64,
                _ => 100 + k as i64,
            };
            hyp.push(at(f, id, k));
        }
        // one unmatched box per frame: 10 false positives
        hyp.push(at(f, 999, 20));
    }
    let m = match_frames(&gt, &hyp, 0.5);
    assert_eq!((m.gt_total(), m.fn_(), m.fp(), m.idsw()), (100, 20, 10, 2));
    assert_eq!(mota(&m).unwrap(), 0.68);
}

#[test]
fn half_split_track() {
    let n = 10;
    let gt: Vec<_> = (1..=n).map(|f| at(f, 1, 0)).collect();
    let hyp: Vec<_> = (1..=n).map(|f| at(f, if f <= n / 2 { 5 } else { 6 }, 0)).collect();
    let s = identity_scores(&gt, &hyp, 0.5).unwrap();
    assert_eq!((s.idtp, s.idfp, s.idfn), (5, 5, 5));
    assert_eq!(s.idf1, 0.5);
    let m = match_frames(&gt, &hyp, 0.5);
    assert_eq!(m.idsw(), 1);
}

#[test]
fn switch_counted_after_gap() {
    // matched to 5, unmatched for two frames, then matched to 6
    let gt: Vec<_> = (1..=6).map(|f| at(f, 1, 0)).collect();
    let hyp = vec![at(1, 5, 0), at(2, 5, 0), at(5, 6, 0), at(6, 6, 0)];
    let m = match_frames(&gt, &hyp, 0.5);
    assert_eq!((m.idsw(), m.fn_()), (1, 2));
}

#[test]
fn persistence_beats_better_overlap() {
    // track 5 keeps gt 1 while IoU stays above threshold even though track 6
    // overlaps gt 1 perfectly in frame 2
    let gt = vec![at(1, 1, 0), at(2, 1, 0)];
    let shifted = |f, id| MotRow {
        tlwh: [3.0, 50.0, 20.0, 20.0],
        ..at(f, id, 0)
    };
    let hyp = vec![at(1, 5, 0), shifted(2, 5), at(2, 6, 0)];
    let m = match_frames(&gt, &hyp, 0.5);
    assert_eq!(m.frames[1].pairs, vec![(1, 5)]);
    assert_eq!(m.idsw(), 0);
}

#[test]
fn each_false_positive_costs_one_over_gt() {
    let gt: Vec<_> = (1..=7).flat_map(|f| (0..3).map(move |k| at(f, k as i64 + 1, k))).collect();
    let total = gt.len();
    let mut hyp = gt.clone();
    for k in 0..15u64 {
        let m = match_frames(&gt, &hyp, 0.5);
        assert_eq!(m.fp(), k as usize);
        assert_eq!(mota(&m).unwrap(), (total - k as usize) as f64 / total as f64);
        hyp.push(at(k % 7 + 1, 500 + k as i64, 10 + k as usize));
    }
}

#[test]
fn empty_inputs() {
    let gt: Vec<_> = (1..=3).map(|f| at(f, 1, 0)).collect();
    let m = match_frames(&gt, &[], 0.5);
    assert_eq!((m.fn_(), m.fp(), m.idsw()), (3, 0, 0));
    assert_eq!(mota(&m).unwrap(), 0.0);
    assert_eq!(idf1(&gt, &[], 0.5).unwrap(), 0.0);
    assert!(idf1(&[], &[], 0.5).is_err());
    assert!(mota(&match_frames(&[], &gt, 0.5)).is_err());
}

/// IDTP by trying every partial injection from gt identities to hypothesis
/// identities.
fn brute_idtp(overlap: &[Vec<usize>]) -> usize {
    fn go(i: usize, used: &mut Vec<bool>, ov: &[Vec<usize>]) -> usize {
        if i == ov.len() {
            return 0;
        }
        let mut best = go(i + 1, used, ov);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(ov[i][j] + go(i + 1, used, ov));
                used[j] = false;
            }
        }
        best
    }
    let cols = overlap.first().map_or(0, |r| r.len());
    go(0, &mut vec![false; cols], overlap)
}

fn random_scene(seed: u64) -> (Vec<MotRow>, Vec<MotRow>, Vec<Vec<usize>>) {
    let mut rng = SplitMix64::new(seed);
    let ng = 1 + rng.below(6) as usize;
    let nh = 1 + rng.below(6) as usize;
    let frames = 12;
    let mut gt = Vec::new();
    let mut hyp = Vec::new();
    let mut overlap = vec![vec![0usize; nh]; ng];
    for f in 1..=frames {
        // each slot holds one gt object; hypotheses pick slots at random
        let mut taken = vec![false; ng];
        for g in 0..ng {
            if rng.bernoulli(0.85) {
                gt.push(at(f, g as i64 + 1, g));
            } else {
                taken[g] = true;
            }
        }
        let mut slot_used = vec![false; ng + 6];
        for h in 0..nh {
            if rng.bernoulli(0.2) {
                continue;
            }
            let slot = rng.below((ng + 6) as u64) as usize;
            if slot_used[slot] {
                continue;
            }
            slot_used[slot] = true;
            hyp.push(at(f, 100 + h as i64, slot));
            if slot < ng && !taken[slot] {
                overlap[slot][h] += 1;
            }
        }
    }
    (gt, hyp, overlap)
}

#[test]
fn idf1_matches_brute_force() {
    for seed in 0..300 {
        let (gt, hyp, overlap) = random_scene(seed);
        let s = identity_scores(&gt, &hyp, 0.5).unwrap();
        let idtp = brute_idtp(&overlap);
        assert_eq!(s.idtp, idtp, "seed {seed}");
        assert_eq!(s.idf1, (2 * idtp) as f64 / (gt.len() + hyp.len()) as f64);
    }
}

proptest! {
    #[test]
    fn per_frame_counts_balance(seed in 0u64..10_000) {
        let (gt, hyp, _) = random_scene(seed);
        let m = match_frames(&gt, &hyp, 0.5);
        for fs in &m.frames {
            prop_assert_eq!(fs.tp + fs.fn_, fs.gt);
            prop_assert_eq!(fs.tp + fs.fp, fs.hyp);
            prop_assert!(fs.idsw <= fs.tp);
        }
        prop_assert_eq!(m.gt_total(), gt.len());
        prop_assert_eq!(m.hyp_total(), hyp.len());
        let mota_v = mota(&m).unwrap();
        let want = (m.gt_total() as i64 - (m.fn_() + m.fp() + m.idsw()) as i64) as f64 / m.gt_total() as f64;
        prop_assert_eq!(mota_v, want);
        prop_assert!(mota_v <= 1.0);
        let f1 = idf1(&gt, &hyp, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
    }
}
