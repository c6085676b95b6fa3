mod common;

use common::oracles;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbir_core::evaluation::{average_precision, mean_ap, pr_curve, tau_b, RankedResult};

fn random_query(rng: &mut impl Rng, id: usize) -> (RankedResult, Vec<bool>, usize) {
    let n = rng.random_range(1..=50);
    let p = rng.random_range(0.05..0.9);
    let rel: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
    let hits = rel.iter().filter(|&&r| r).count();
    let total = hits + rng.random_range(0..3) * usize::from(rng.random_bool(0.3));
    let ids = (0..n).map(|i| format!("q{id}_{i}")).collect();
    (RankedResult::new(format!("q{id}"), ids, rel.clone(), total).unwrap(), rel, total)
}

#[test]
fn ap_and_map_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let qs: Vec<_> = (0..rng.random_range(1..6)).map(|i| random_query(&mut rng, i)).collect();
        for (r, rel, total) in &qs {
            if *total > 0 {
                let got = average_precision(r, *total).unwrap();
                assert!((got - oracles::ap(rel, *total)).abs() <= 1e-12, "trial {trial}");
            }
        }
        let plain: Vec<_> = qs.iter().map(|q| (q.1.clone(), q.2)).collect();
        let results: Vec<_> = qs.into_iter().map(|q| q.0).collect();
        if plain.iter().any(|q| q.1 > 0) {
            assert!((mean_ap(&results).unwrap() - oracles::map(&plain)).abs() <= 1e-12, "trial {trial}");
        }
    }
}

#[test]
fn pr_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..1000 {
        let qs: Vec<_> = (0..rng.random_range(1..5)).map(|i| random_query(&mut rng, i)).collect();
        let plain: Vec<_> = qs.iter().map(|q| (q.1.clone(), q.2)).collect();
        if plain.iter().all(|q| q.1 == 0) {
            continue;
        }
        let results: Vec<_> = qs.into_iter().map(|q| q.0).collect();
        let points = rng.random_range(2..=100);
        let got = pr_curve(&results, points).unwrap();
        for (g, (r, p)) in got.iter().zip(oracles::pr(&plain, points)) {
            assert_eq!(g.recall, r);
            assert!((g.precision - p).abs() <= 1e-12, "trial {trial} recall {r}");
        }
    }
}

#[test]
fn tau_matches_pair_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..1000 {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(1..=n + 1) as u32;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        match (tau_b(&x, &y), oracles::tau_b(&x, &y)) {
            (Ok(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "trial {trial}: {a} vs {b}"),
            (Err(_), None) => {}
            (a, b) => panic!("trial {trial}: {a:?} vs {b:?}"),
        }
    }
}

proptest! {
    #[test]
    fn tau_antisymmetric_under_reversal(perm in Just((0..30).collect::<Vec<usize>>()).prop_shuffle(), n in 2usize..30) {
        let reference: Vec<f64> = perm.iter().filter(|&&v| v < n).map(|&v| v as f64).collect();
        let pred: Vec<f64> = (0..reference.len()).map(|i| i as f64).collect();
        let rev: Vec<f64> = pred.iter().rev().copied().collect();
        let (a, b) = (tau_b(&reference, &pred).unwrap(), tau_b(&reference, &rev).unwrap());
        prop_assert!((a + b).abs() <= 1e-12);
    }

    #[test]
    fn map_invariant_under_query_permutation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut results: Vec<_> = (0..8).map(|i| random_query(&mut rng, i).0).collect();
        prop_assume!(results.iter().any(|r| r.total_relevant > 0));
        let before = mean_ap(&results).unwrap();
        results.shuffle(&mut rng);
        prop_assert!((mean_ap(&results).unwrap() - before).abs() <= 1e-12);
    }

    #[test]
    fn pr_start_equals_mean_precision_at_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let results: Vec<_> = (0..6).map(|i| random_query(&mut rng, i).0).collect();
        let kept: Vec<_> = results.iter().filter(|r| r.total_relevant > 0).collect();
        prop_assume!(!kept.is_empty());
        let p1 = kept.iter().map(|r| f64::from(u8::from(r.relevant[0]))).sum::<f64>() / kept.len() as f64;
        let curve = pr_curve(&results, 100).unwrap();
        prop_assert!((curve[0].precision - p1).abs() <= 1e-12);
    }
}
