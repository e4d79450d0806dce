//! Stability of a ratio across the depth grid.

use serde::Serialize;

/// Average ranks, with ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = 0.5 * (i + j) as f64 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; zero when either coordinate is constant.
pub fn spearman(pairs: &[(f64, f64)]) -> f64 {
    if pairs.len() < 2 {
        return 0.0;
    }
    let rx = ranks(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let ry = ranks(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let n = pairs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stability {
    /// `(J, max over samples at J)` in increasing `J`.
    pub per_depth: Vec<(usize, f64)>,
    /// `max_J / min_J`; one when both vanish.
    pub spread: f64,
    /// Rank correlation between `J` and the per-sample values.
    pub trend: f64,
    pub finite: bool,
    pub stable: bool,
}

/// `samples` are `(J, value)` with one value per seed and depth. A rank
/// trend only counts once the per-depth maxima move by more than
/// `resolution` relative to each other.
pub fn assess(samples: &[(usize, f64)], factor: f64, trend_limit: f64, resolution: f64) -> Stability {
    let mut depths: Vec<usize> = samples.iter().map(|s| s.0).collect();
    depths.sort_unstable();
    depths.dedup();
    let per_depth: Vec<(usize, f64)> = depths
        .iter()
        .map(|&j| (j, samples.iter().filter(|s| s.0 == j).map(|s| s.1).fold(f64::NEG_INFINITY, f64::max)))
        .collect();
    let finite = samples.iter().all(|s| s.1.is_finite());
    let hi = per_depth.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = per_depth.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let spread = if hi == 0.0 && lo == 0.0 {
        1.0
    } else if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    };
    let pairs: Vec<(f64, f64)> = samples.iter().map(|&(j, v)| (j as f64, v)).collect();
    let trend = if finite { spearman(&pairs) } else { f64::NAN };
    let stable = finite && spread <= factor && (trend.abs() < trend_limit || spread <= 1.0 + resolution);
    Stability { per_depth, spread, trend, finite, stable }
}
