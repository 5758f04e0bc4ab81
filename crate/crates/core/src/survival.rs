//! Discrete-time survival: quantile binning, hazards, the censored
//! negative log-likelihood and the concordance index.
//!
//! Censorship follows the usual convention: `censored = false` is an observed
//! event, `censored = true` means only a lower bound on the time is known.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::graph::sigmoid;
use crate::numeric::{BinTarget, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub time: f64,
    pub censored: bool,
    pub bin: usize,
}

impl SurvivalLabel {
    pub fn target(&self) -> BinTarget {
        BinTarget {
            bin: self.bin,
            censored: self.censored,
        }
    }
}

/// Cut points between consecutive time bins, fitted on training data only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    pub edges: Vec<f64>,
    pub n_bins: usize,
}

impl BinEdges {
    /// Number of edges strictly below `time`; the last bin is right-open.
    pub fn assign(&self, time: f64) -> usize {
        self.edges.iter().filter(|&&e| e < time).count()
    }

    pub fn label(&self, time: f64, censored: bool) -> SurvivalLabel {
        SurvivalLabel {
            time,
            censored,
            bin: self.assign(time),
        }
    }
}

/// Quantile edges (nearest-rank) of the uncensored event times.
pub fn discretize_bins(times: &[f64], censored: &[bool], n_bins: usize) -> Result<BinEdges> {
    if times.len() != censored.len() {
        return Err(Error::shape(format!(
            "{} times but {} censorship flags",
            times.len(),
            censored.len()
        )));
    }
    if n_bins < 1 {
        return Err(Error::Parameter("need at least one survival bin".into()));
    }
    let mut events: Vec<f64> = times
        .iter()
        .zip(censored)
        .filter(|(_, c)| !**c)
        .map(|(t, _)| *t)
        .collect();
    if events.len() < n_bins {
        return Err(Error::Data(format!(
            "{} uncensored times, need at least {n_bins} to form bins",
            events.len()
        )));
    }
    if events.iter().any(|t| !t.is_finite()) {
        return Err(Error::Data("non-finite survival time".into()));
    }
    events.sort_by(f64::total_cmp);
    let n = events.len();
    let edges: Vec<f64> = (1..n_bins)
        .map(|k| {
            let rank = (k * n).div_ceil(n_bins).max(1);
            events[rank - 1]
        })
        .collect();
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Data(format!(
            "survival time quantiles are not strictly ascending: {edges:?}"
        )));
    }
    if n_bins > 1 && edges.len() == 1 && events.first() == events.last() {
        return Err(Error::Data("all uncensored survival times are identical".into()));
    }
    Ok(BinEdges { edges, n_bins })
}

/// Per-bin hazards `σ(l_k)` and survival `S_k = Π_{j≤k} (1 - h_j)`.
pub fn hazards_and_survival(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hazard: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let mut surv = Vec::with_capacity(hazard.len());
    let mut running = 1.0;
    for h in &hazard {
        running *= 1.0 - h;
        surv.push(running);
    }
    (hazard, surv)
}

/// Scalar risk used for ranking: higher means shorter expected survival.
pub fn risk_score(logits: &[f64]) -> f64 {
    -hazards_and_survival(logits).1.iter().sum::<f64>()
}

/// Batch of hazard logits with their labels.
#[derive(Clone, Debug)]
pub struct SurvivalBatch {
    /// `[B, n_bins]`
    pub logits: Tensor,
    pub labels: Vec<SurvivalLabel>,
}

/// Mean censored negative log-likelihood of a batch.
pub fn nll_loss(batch: &SurvivalBatch) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(batch.logits.clone());
    let targets: Vec<BinTarget> = batch.labels.iter().map(SurvivalLabel::target).collect();
    let loss = g.survival_nll(l, &targets)?;
    Ok(g.value(loss).item())
}

/// Harrell's concordance over comparable pairs `(i, j)` with
/// `time_i < time_j` and an observed event at `i`. Risk ties count one half.
pub fn concordance_index(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<f64> {
    if risks.len() != times.len() || times.len() != censored.len() {
        return Err(Error::shape(format!(
            "concordance inputs differ in length: {} risks, {} times, {} flags",
            risks.len(),
            times.len(),
            censored.len()
        )));
    }
    let mut comparable = 0u64;
    let mut concordant2 = 0u64;
    for i in 0..risks.len() {
        if censored[i] {
            continue;
        }
        for j in 0..risks.len() {
            if times[i] < times[j] {
                comparable += 1;
                if risks[i] > risks[j] {
                    concordant2 += 2;
                } else if risks[i] == risks[j] {
                    concordant2 += 1;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::Undefined("concordance index has no comparable pairs".into()));
    }
    Ok(concordant2 as f64 / (2 * comparable) as f64)
}
