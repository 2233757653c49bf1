//! Brute-force references for the ranking loss and the evaluation metrics.

use linkrec::evaluator::{hr_at_k, map_at_k, mrr_at_k, rank_by_score};
use linkrec::objective::{batch_warp, ScoredSlate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Loss of one slate, summed pair by pair.
pub fn warp_reference(pos: f64, negs: &[f64], margin: f64) -> f64 {
    let mut rank = 0usize;
    for &n in negs {
        if n > pos - margin {
            rank += 1;
        }
    }
    if rank == 0 {
        return 0.0;
    }
    let mut harmonic = 0.0;
    for j in 1..=rank {
        harmonic += 1.0 / j as f64;
    }
    let mut total = 0.0;
    for &n in negs {
        if n > pos - margin {
            total += harmonic / rank as f64 * (margin - pos + n);
        }
    }
    total
}

/// 1-based position of every candidate: one plus the number that outrank it.
pub fn positions(ids: &[String], scores: &[f64]) -> Vec<usize> {
    (0..ids.len())
        .map(|i| {
            1 + (0..ids.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && ids[j] < ids[i]))
                .count()
        })
        .collect()
}

pub fn metrics_reference(positive_positions: &[usize], k: usize) -> (f64, f64, f64) {
    let total = positive_positions.len();
    if total == 0 {
        return (0.0, 0.0, 0.0);
    }
    let within: Vec<usize> = positive_positions.iter().copied().filter(|&p| p <= k).collect();
    let hr = within.len() as f64 / total as f64;
    let mrr = within.iter().min().map_or(0.0, |&p| 1.0 / p as f64);
    let mut ap = 0.0;
    for &p in &within {
        let hits_up_to_p = positive_positions.iter().filter(|&&q| q <= p).count();
        ap += hits_up_to_p as f64 / p as f64;
    }
    (hr, mrr, ap / total.min(k) as f64)
}

pub struct SweepResult {
    pub configs: usize,
    pub warp_max_dev: f64,
    pub metric_max_dev: f64,
}

/// Randomised comparison of the library against the references.
pub fn sweep(configs: usize, seed: u64) -> SweepResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warp_max_dev = 0.0f64;
    let mut metric_max_dev = 0.0f64;
    for _ in 0..configs {
        let margin = rng.gen_range(0.01..0.99);
        let n_slates = rng.gen_range(1..8);
        let mut slates = Vec::new();
        let mut reference = 0.0;
        for _ in 0..n_slates {
            let pos = rng.gen_range(-1.0..1.0);
            let negs: Vec<f64> = (0..rng.gen_range(1..50)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            reference += warp_reference(pos, &negs, margin);
            slates.push(ScoredSlate::new(pos, negs, margin).unwrap());
        }
        reference /= n_slates as f64;
        warp_max_dev = warp_max_dev.max((batch_warp(&slates).unwrap() - reference).abs());

        let n = rng.gen_range(1..=50);
        let ids: Vec<String> = (0..n).map(|i| format!("r{:03}", rng.gen_range(0..1000) * 100 + i)).collect();
        // Coarse scores so ties are common and the id tie-break matters.
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-4i32..=4) as f64 / 4.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
        let items = ids.iter().zip(&scores).zip(&labels).map(|((id, &s), &l)| (id.clone(), s, l)).collect();
        let ranked: Vec<bool> = rank_by_score(items).into_iter().map(|r| r.2).collect();
        let pos = positions(&ids, &scores);
        let positive_positions: Vec<usize> = (0..n).filter(|&i| labels[i]).map(|i| pos[i]).collect();
        for k in 1..=n {
            let (hr, mrr, map) = metrics_reference(&positive_positions, k);
            for (got, want) in [(hr_at_k(&ranked, k), hr), (mrr_at_k(&ranked, k), mrr), (map_at_k(&ranked, k), map)] {
                metric_max_dev = metric_max_dev.max((got - want).abs());
            }
        }
    }
    SweepResult {
        configs,
        warp_max_dev,
        metric_max_dev,
    }
}
