//! Oracle and property tests for the prosody metrics.

mod common;

use lpv::metrics::{
    dtw, duration_kl, kde, kl_divergence, pitch_dtw_distance, DurationTable, PitchContour,
    PitchCost,
};
use proptest::prelude::*;

use common::{dtw_enumeration_oracle, ternary_sequences};

#[test]
fn dtw_matches_enumeration_oracle_on_short_sequences() {
    // Exhaustive over lengths <= 4; the full <= 6 sweep lives in the
    // acceptance suite.
    let mut pool = Vec::new();
    for len in 1..=4 {
        pool.extend(ternary_sequences(len));
    }
    for a in &pool {
        for b in &pool {
            let got = dtw(a, b).unwrap().distance;
            let want = dtw_enumeration_oracle(a, b);
            assert_eq!(got, want, "a={a:?} b={b:?}");
        }
    }
}

#[test]
fn dtw_backtracking_prefers_diagonal_on_ties() {
    // All-zero inputs tie every path; the diagonal-first rule must pick
    // the pure diagonal.
    let r = dtw(&[0.0; 4], &[0.0; 4]).unwrap();
    assert_eq!(r.path, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
}

proptest! {
    #[test]
    fn dtw_is_symmetric(
        a in prop::collection::vec(-5.0..5.0f64, 1..8),
        b in prop::collection::vec(-5.0..5.0f64, 1..8),
    ) {
        let ab = dtw(&a, &b).unwrap().distance;
        let ba = dtw(&b, &a).unwrap().distance;
        prop_assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn dtw_beats_or_ties_the_diagonal(
        pairs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..8),
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let diag: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        prop_assert!(dtw(&a, &b).unwrap().distance <= diag + 1e-9);
    }

    #[test]
    fn dtw_path_is_well_formed(
        a in prop::collection::vec(-5.0..5.0f64, 1..8),
        b in prop::collection::vec(-5.0..5.0f64, 1..8),
    ) {
        let r = dtw(&a, &b).unwrap();
        prop_assert_eq!(r.path[0], (0, 0));
        prop_assert_eq!(*r.path.last().unwrap(), (a.len() - 1, b.len() - 1));
        prop_assert_eq!(r.path_length, r.path.len());
        for w in r.path.windows(2) {
            let di = w[1].0 - w[0].0;
            let dj = w[1].1 - w[0].1;
            prop_assert!(matches!((di, dj), (1, 0) | (0, 1) | (1, 1)));
        }
        let sum: f64 = r.path.iter().map(|&(i, j)| (a[i] - b[j]).abs()).sum();
        prop_assert!((sum - r.distance).abs() < 1e-9);
    }

    #[test]
    fn pitch_distance_unchanged_by_unvoiced_insertions(
        base in prop::collection::vec(80.0..300.0f64, 1..6),
        other in prop::collection::vec(80.0..300.0f64, 1..6),
        inserts in prop::collection::vec((0usize..6, 40.0..400.0f64), 0..4),
    ) {
        let plain = PitchContour::new(base.clone(), vec![true; base.len()]).unwrap();
        let mut values = base.clone();
        let mut voiced = vec![true; base.len()];
        for &(pos, junk) in &inserts {
            let at = pos.min(values.len());
            values.insert(at, junk);
            voiced.insert(at, false);
        }
        let padded = PitchContour::new(values, voiced).unwrap();
        let peer = PitchContour::new(other.clone(), vec![true; other.len()]).unwrap();
        let d1 = pitch_dtw_distance(&plain, &peer, PitchCost::Hz).unwrap();
        let d2 = pitch_dtw_distance(&padded, &peer, PitchCost::Hz).unwrap();
        prop_assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn kde_density_is_normalized(
        samples in prop::collection::vec(1.0..40.0f64, 1..30),
    ) {
        let e = kde(&samples).unwrap();
        let grid = e.grid();
        let dens = e.density();
        let mut integral = 0.0;
        for k in 1..grid.len() {
            integral += 0.5 * (dens[k] + dens[k - 1]) * (grid[k] - grid[k - 1]);
        }
        prop_assert!((integral - 1.0).abs() <= 1e-6);
        prop_assert!(dens.iter().all(|&d| d >= 0.0));
        prop_assert!(e.bandwidth() >= 0.5);
    }

    #[test]
    fn kl_is_nonnegative(
        s1 in prop::collection::vec(1.0..20.0f64, 1..12),
        s2 in prop::collection::vec(1.0..20.0f64, 1..12),
    ) {
        let p = kde(&s1).unwrap();
        let q = kde(&s2).unwrap();
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
    }

    #[test]
    fn duration_kl_is_order_invariant(
        d1 in prop::collection::vec(2u32..12, 1..6),
        d2 in prop::collection::vec(2u32..12, 1..6),
        e1 in prop::collection::vec(2u32..12, 1..6),
        e2 in prop::collection::vec(2u32..12, 1..6),
    ) {
        let fill = |pairs: &[(&str, &Vec<u32>, u8)]| {
            let mut t = DurationTable::new();
            for (w, ds, sys) in pairs {
                for &d in ds.iter() {
                    t.push(w, *sys, d).unwrap();
                }
            }
            t
        };
        let fwd = fill(&[("a", &d1, 1), ("a", &d2, 2), ("b", &e1, 1), ("b", &e2, 2)]);
        let mut r1 = d1.clone();
        r1.reverse();
        let mut r2 = d2.clone();
        r2.reverse();
        let rev = fill(&[("b", &e1, 1), ("b", &e2, 2), ("a", &r1, 1), ("a", &r2, 2)]);
        let kf = duration_kl(&fwd).unwrap();
        let kr = duration_kl(&rev).unwrap();
        prop_assert!((kf - kr).abs() < 1e-12);
    }
}
