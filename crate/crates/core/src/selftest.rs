//! Runtime cross-check of [`select_top_k_row`] against a brute-force ranker
//! that shares no code with it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::kde::select_top_k_row;

/// Brute-force top-k: Welford variance, full pairwise kernel table, then
/// `k` rounds of arg-max (first index wins ties).
pub fn brute_force_top_k(row: &[f32], k: usize) -> Vec<usize> {
    let m = row.len();
    let keep = k.min(m);
    let xs: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();

    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for (n, &x) in xs.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (n + 1) as f64;
        m2 += delta * (x - mean);
    }
    let sd = if m >= 2 {
        (m2 / (m - 1) as f64).sqrt()
    } else {
        0.0
    };

    let scores: Vec<f64> = if m < 2 || sd < 1e-12 {
        vec![0.0; m]
    } else {
        let h = 1.06 * sd / (m as f64).powf(0.2);
        let c = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * m as f64 * h);
        let table: Vec<Vec<f64>> = xs
            .iter()
            .map(|&a| {
                xs.iter()
                    .map(|&b| (-((a - b) / h).powi(2) / 2.0).exp())
                    .collect()
            })
            .collect();
        table.iter().map(|r| c * r.iter().sum::<f64>()).collect()
    };

    let mut taken = vec![false; m];
    let mut chosen = Vec::with_capacity(keep);
    for _ in 0..keep {
        let mut best: Option<usize> = None;
        for j in 0..m {
            if taken[j] {
                continue;
            }
            if best.is_none_or(|b| scores[j] > scores[b]) {
                best = Some(j);
            }
        }
        let b = best.expect("keep <= m");
        taken[b] = true;
        chosen.push(b);
    }
    chosen.sort_unstable();
    chosen
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelftestReport {
    pub rows: usize,
    pub comparisons: usize,
    pub mismatches: Vec<Mismatch>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub row: Vec<u32>,
    pub k: usize,
    pub got: Vec<usize>,
    pub expected: Vec<usize>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares both rankers on `rows` random N(0, 1) rows of length
/// `1..=max_len`, for every `k` in `0..=m`.
pub fn run_selftest(rows: usize, max_len: usize, seed: u64) -> SelftestReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comparisons = 0;
    let mut mismatches = Vec::new();
    for _ in 0..rows {
        let m = rng.random_range(1..=max_len.max(1));
        let row: Vec<f32> = (0..m)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        for k in 0..=m {
            comparisons += 1;
            let got = select_top_k_row(&row, k).indices;
            let expected = brute_force_top_k(&row, k);
            if got != expected {
                mismatches.push(Mismatch {
                    row: row.iter().map(|v| v.to_bits()).collect(),
                    k,
                    got,
                    expected,
                });
            }
        }
    }
    SelftestReport {
        rows,
        comparisons,
        mismatches,
    }
}
