use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relroute::train::{map_at_k, roc_auc};

/// Fraction of (positive, negative) pairs ordered correctly, ties half.
fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// Precision at every cutoff re-counted from scratch.
fn average_precision(ranked: &[usize], truth: &[usize], k: usize) -> f64 {
    let gt: HashSet<usize> = truth.iter().copied().collect();
    let cut = ranked.len().min(k);
    let mut sum = 0.0;
    for i in 1..=cut {
        if gt.contains(&ranked[i - 1]) {
            let hits = ranked[..i].iter().filter(|id| gt.contains(id)).count();
            sum += hits as f64 / i as f64;
        }
    }
    sum / truth.len().min(k) as f64
}

#[test]
fn roc_auc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let n = rng.gen_range(2..60);
        let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        // a coarse grid forces ties
        let grid = rng.gen_range(2..20) as f64;
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(-1.0..1.0) * grid).round() / grid).collect();
        let fast = roc_auc(&scores, &labels).unwrap();
        assert!((fast - pairwise_auc(&scores, &labels)).abs() < 1e-12);
    }
}

#[test]
fn map_at_k_matches_per_query_average_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..1000 {
        let universe = rng.gen_range(1..40);
        let k = rng.gen_range(1..15);
        let queries = rng.gen_range(1..10);
        let mut ranked = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..queries {
            let mut ids: Vec<usize> = (0..universe).collect();
            ids.shuffle(&mut rng);
            ids.truncate(rng.gen_range(0..=universe));
            ranked.push(ids);
            let mut gt: Vec<usize> = (0..universe).filter(|_| rng.gen_bool(0.2)).collect();
            if gt.is_empty() {
                gt.push(rng.gen_range(0..universe));
            }
            truth.push(gt);
        }
        let fast = map_at_k(&ranked, &truth, k).unwrap();
        let slow = ranked.iter().zip(&truth).map(|(r, t)| average_precision(r, t, k)).sum::<f64>() / queries as f64;
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
    }
}

#[test]
fn metric_edge_cases() {
    assert_eq!(roc_auc(&[0.1, 0.9], &[0.0, 1.0]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), 0.5);
    assert!(roc_auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    assert_eq!(map_at_k(&[vec![3, 1, 2]], &[vec![1]], 3).unwrap(), 0.5);
    assert!(map_at_k(&[vec![1]], &[vec![1]], 0).is_err());
}
