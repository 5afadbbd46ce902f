//! Spearman correlation between bigram frequency rankings.

use super::symbols::BigramCounts;
use crate::env::VOCAB_SIZE;

/// Ranks `values` in descending order, 1 for the largest, ties sharing the
/// mean of the ranks they span.
pub fn descending_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman ρ between two bigram rankings over every bigram seen in either.
/// A bigram missing from one side ranks after all of that side's observed
/// bigrams, tied with the other missing ones.
pub fn bigram_spearman(a: &BigramCounts, b: &BigramCounts) -> Option<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..VOCAB_SIZE {
        for j in 0..VOCAB_SIZE {
            if a[i][j] > 0 || b[i][j] > 0 {
                xs.push(a[i][j] as f64);
                ys.push(b[i][j] as f64);
            }
        }
    }
    if xs.len() < 2 {
        return None;
    }
    pearson(&descending_ranks(&xs), &descending_ranks(&ys))
}

/// Symmetric matrix of pairwise ρ with unit diagonal.
pub fn bigram_rank_correlation(stats: &[BigramCounts]) -> Vec<Vec<Option<f64>>> {
    let n = stats.len();
    let mut m = vec![vec![None; n]; n];
    for i in 0..n {
        m[i][i] = Some(1.0);
        for j in i + 1..n {
            let rho = bigram_spearman(&stats[i], &stats[j]);
            m[i][j] = rho;
            m[j][i] = rho;
        }
    }
    m
}
