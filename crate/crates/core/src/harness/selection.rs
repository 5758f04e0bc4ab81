//! Omic feature selection by agreement of four dispersion statistics.
//!
//! Features are ranked by variance, coefficient of variation, median absolute
//! deviation and interquartile range. The shortlist size `m` grows until the
//! four top-`m` lists share at least `k` features; the `k` shared features with
//! the highest variance are kept. Quantiles use the inverse empirical CDF with
//! averaging at jumps, which makes every statistic invariant to duplicating
//! the sample rows.

use crate::error::{Error, Result};
use crate::numeric::exact_sum;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureStats {
    pub variance: f64,
    pub cv: f64,
    pub mad: f64,
    pub iqr: f64,
}

/// Quantile `p` of sorted data, inverse empirical CDF with averaging.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let np = n as f64 * p;
    let j = np.floor();
    if np == j {
        let j = j as usize;
        if j == 0 {
            return sorted[0];
        }
        if j >= n {
            return sorted[n - 1];
        }
        0.5 * (sorted[j - 1] + sorted[j])
    } else {
        sorted[(np.ceil() as usize).min(n) - 1]
    }
}

pub fn feature_stats(column: &[f64]) -> FeatureStats {
    let n = column.len() as f64;
    let mean = exact_sum(column.iter().copied()) / n;
    let variance = exact_sum(column.iter().map(|v| (v - mean) * (v - mean))) / n;
    let std = variance.sqrt();
    let cv = if std == 0.0 {
        0.0
    } else if mean == 0.0 {
        f64::INFINITY
    } else {
        std / mean.abs()
    };
    let mut sorted = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = quantile_sorted(&sorted, 0.5);
    let mut dev: Vec<f64> = column.iter().map(|v| (v - median).abs()).collect();
    dev.sort_by(f64::total_cmp);
    FeatureStats {
        variance,
        cv,
        mad: quantile_sorted(&dev, 0.5),
        iqr: quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25),
    }
}

/// Indices ordered by descending `score`, ties to the lower index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Selects `k` feature columns of a `samples × features` matrix. Returns the
/// chosen column indices in ascending order.
pub fn select_cpg_features(rows: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let features = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || features == 0 {
        return Err(Error::Selection("empty matrix".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != features) {
        return Err(Error::Selection(format!("ragged matrix: row of width {} vs {features}", r.len())));
    }
    if k == 0 || k > features {
        return Err(Error::Selection(format!("cannot select {k} of {features} features")));
    }

    let stats: Vec<FeatureStats> = (0..features)
        .map(|j| feature_stats(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect();
    let variance: Vec<f64> = stats.iter().map(|s| s.variance).collect();
    let lists = [
        ranking(&variance),
        ranking(&stats.iter().map(|s| s.cv).collect::<Vec<_>>()),
        ranking(&stats.iter().map(|s| s.mad).collect::<Vec<_>>()),
        ranking(&stats.iter().map(|s| s.iqr).collect::<Vec<_>>()),
    ];

    let mut hits = vec![0u8; features];
    let mut shared = 0;
    let mut m = 0;
    while shared < k {
        if m == features {
            return Err(Error::Selection(format!(
                "intersection reached only {shared} of {k} features"
            )));
        }
        for list in &lists {
            let f = list[m];
            hits[f] += 1;
            if hits[f] == 4 {
                shared += 1;
            }
        }
        m += 1;
    }

    let mut chosen: Vec<usize> = (0..features).filter(|&f| hits[f] == 4).collect();
    chosen.sort_by(|&a, &b| variance[b].total_cmp(&variance[a]).then(a.cmp(&b)));
    chosen.truncate(k);
    chosen.sort_unstable();
    Ok(chosen)
}

/// Keeps only the `selected` columns.
pub fn project(values: &[f64], selected: &[usize]) -> Vec<f64> {
    selected.iter().map(|&i| values[i]).collect()
}
