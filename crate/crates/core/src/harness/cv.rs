//! Stratified k-fold cross-validation and the fusion ablation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::config::{FusionMode, RunConfig};
use super::dataset::{Dataset, Label};
use super::metrics::MetricsReport;
use super::train::{train, Evaluation, TrainLog, TrainedModel};
use crate::error::{Error, Result};
use crate::fusion::Aggregator;
use crate::numeric::SeededRng;

/// Fold index of every sample. Strata are classes for subtyping and the
/// censorship flag for survival.
pub fn stratified_folds(dataset: &Dataset, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if dataset.len() < folds {
        return Err(Error::Data(format!("{} samples cannot fill {folds} folds", dataset.len())));
    }
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let key = match s.label {
            Label::Class(c) => c,
            Label::Survival { censored, .. } => usize::from(censored),
        };
        strata.entry(key).or_default().push(i);
    }
    let mut rng = SeededRng::new(seed).split(7);
    let mut assignment = vec![0; dataset.len()];
    let mut next = 0;
    for (key, members) in &mut strata {
        if members.len() < folds {
            log::warn!(
                "stratum {key} has {} members for {folds} folds; stratification is best-effort",
                members.len()
            );
        }
        rng.shuffle(members);
        for &i in members.iter() {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    Ok(assignment)
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub model: TrainedModel,
    pub log: TrainLog,
    pub test: Vec<usize>,
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub report: MetricsReport,
    pub folds: Vec<FoldOutcome>,
}

pub fn run_cv(config: &RunConfig, dataset: &Dataset) -> Result<CvOutcome> {
    config.validate()?;
    let assignment = stratified_folds(dataset, config.folds, config.seed)?;
    let mut folds = Vec::with_capacity(config.folds);
    for k in 0..config.folds {
        let (test, train_idx): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| assignment[i] == k);
        log::info!("fold {k}: {} train / {} test", train_idx.len(), test.len());
        let (model, log) = train(config, dataset, &train_idx)?;
        let evaluation = model.evaluate(dataset, &test)?;
        folds.push(FoldOutcome {
            model,
            log,
            test,
            evaluation,
        });
    }
    let report = MetricsReport::from_folds(folds.iter().map(|f| f.evaluation.metrics.clone()).collect());
    Ok(CvOutcome { report, folds })
}

/// The ablation grid: early-only, then late-only and dual for every aggregator.
pub fn ablation_grid() -> Vec<(FusionMode, Aggregator)> {
    let mut grid = vec![(FusionMode::EarlyOnly, Aggregator::Moab)];
    for mode in [FusionMode::LateOnly, FusionMode::Dual] {
        grid.extend(Aggregator::ALL.iter().map(|&a| (mode, a)));
    }
    grid
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub fusion: FusionMode,
    pub aggregator: Option<Aggregator>,
    pub report: MetricsReport,
}

impl AblationRow {
    pub fn label(&self) -> String {
        match self.aggregator {
            Some(a) => format!("{}/{}", self.fusion.name(), a.name()),
            None => self.fusion.name().to_string(),
        }
    }
}

pub fn ablate(config: &RunConfig, dataset: &Dataset) -> Result<Vec<AblationRow>> {
    ablation_grid()
        .into_iter()
        .map(|(fusion, aggregator)| {
            let cfg = RunConfig {
                fusion,
                aggregator,
                ..config.clone()
            };
            let report = run_cv(&cfg, dataset)?.report;
            Ok(AblationRow {
                fusion,
                aggregator: fusion.uses_late_fusion().then_some(aggregator),
                report,
            })
        })
        .collect()
}

/// Fixed-width table of mean ± std for every metric.
pub fn format_table(rows: &[AblationRow]) -> String {
    let keys: Vec<String> = rows
        .first()
        .map(|r| r.report.mean.keys().cloned().collect())
        .unwrap_or_default();
    let mut out = format!("{:<16}", "model");
    for k in &keys {
        let _ = write!(out, " {k:>20}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<16}", r.label());
        for k in &keys {
            let cell = format!("{:.4} ± {:.4}", r.report.mean[k], r.report.std[k]);
            let _ = write!(out, " {cell:>20}");
        }
        out.push('\n');
    }
    out
}
