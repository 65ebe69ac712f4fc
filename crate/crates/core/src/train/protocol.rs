use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_std, train, Metrics, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{self, PairDataset, SplitMode};
use crate::model::PredictHead;
use crate::rng;
use crate::synthetic::{bias_of, make_dataset, SyntheticConfig};

/// Seed for job `index` of a protocol started with `seed`.
pub fn job_seed(seed: u64, index: usize) -> u64 {
    rng::stream(seed, &[0x4a4f42, index as u64]).random()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRun {
    pub fold: usize,
    pub repeat: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub test: Metrics,
    /// Primary test metric (RMSE or AUROC).
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub repeats: usize,
    pub metric: String,
    pub runs: Vec<CvRun>,
    pub mean: f64,
    pub std: f64,
}

/// Repeated k-fold cross-validation: one training run per held-out fold,
/// aggregated as population mean and standard deviation of the test metric.
pub fn cross_validate(dataset: &PairDataset, cfg: &TrainConfig, k: usize, repeats: usize, valid_fraction: f64) -> Result<CvReport> {
    cfg.validate()?;
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let plans = graph::kfold_splits(dataset.len(), k, repeats, valid_fraction, cfg.seed)?;
    let runs = plans
        .par_iter()
        .enumerate()
        .map(|(index, plan)| {
            let (fold, repeat) = match plan.mode {
                SplitMode::RandomKfold { fold, repeat, .. } => (fold, repeat),
                _ => unreachable!("kfold plans"),
            };
            let seed = job_seed(cfg.seed, index);
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            let outcome = train(dataset, plan, &run_cfg)?;
            let test = outcome
                .report
                .test
                .ok_or_else(|| Error::Split(format!("fold {fold} of repeat {repeat} has an empty test set")))?;
            log::info!("cv run {index}: fold {fold} repeat {repeat} test {:.5}", test.primary());
            Ok(CvRun {
                fold,
                repeat,
                seed,
                best_epoch: outcome.report.best_epoch,
                test,
                value: test.primary(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = runs.iter().map(|r| r.value).collect();
    let (mean, std) = mean_std(&values);
    Ok(CvReport {
        k,
        repeats,
        metric: Metrics::primary_name(dataset.task).to_string(),
        runs,
        mean,
        std,
    })
}

pub const SWEEP_LEVELS: [f64; 5] = [0.5, 0.4, 0.3, 0.2, 0.1];
pub const SWEEP_SEEDS: [u64; 3] = [0, 1, 2];
/// Epoch cap for sweep runs; keeps the 30-run sweep near an hour on one core.
pub const SWEEP_EPOCHS: usize = 8;

/// Training defaults for the synthetic bias sweep.
pub fn sweep_config() -> TrainConfig {
    TrainConfig {
        max_epochs: SWEEP_EPOCHS,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// No KL or intervention terms, predictions from the supervised head.
    NoCausal,
}

impl Ablation {
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        match self {
            Ablation::Full => cfg.clone(),
            Ablation::NoCausal => TrainConfig {
                lambda1: 0.0,
                lambda2: 0.0,
                predict_head: PredictHead::Sup,
                ..cfg.clone()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub bias: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub realized_bias: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test_accuracy: f64,
    pub test_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub bias: f64,
    pub full_mean: f64,
    pub full_std: f64,
    pub no_causal_mean: f64,
    pub no_causal_std: f64,
    /// `full_mean − no_causal_mean`
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub data: SyntheticConfig,
    pub cells: Vec<SweepCell>,
    pub summary: Vec<SweepSummary>,
}

impl SweepReport {
    pub fn gap(&self, bias: f64) -> Option<f64> {
        self.summary.iter().find(|s| s.bias == bias).map(|s| s.gap)
    }
}

/// Trains the full model and the no-causal ablation on a fresh synthetic
/// dataset per bias level and seed, each on a random 60/20/20 split, and
/// records test accuracy.
pub fn bias_sweep(levels: &[f64], cfg: &TrainConfig, data: &SyntheticConfig, seeds: &[u64]) -> Result<SweepReport> {
    cfg.validate()?;
    if levels.is_empty() || seeds.is_empty() {
        return Err(Error::Config("bias sweep needs at least one level and one seed".into()));
    }
    if let Some(b) = levels.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
        return Err(Error::Config(format!("bias level {b} outside (0, 1)")));
    }
    let jobs: Vec<(f64, u64, Ablation)> = levels
        .iter()
        .flat_map(|&b| seeds.iter().flat_map(move |&s| [Ablation::Full, Ablation::NoCausal].map(|a| (b, s, a))))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(bias, seed, ablation)| {
            let synth = make_dataset(&SyntheticConfig { bias, ..data.clone() }, seed)?;
            let dataset = synth.dataset;
            let plan = graph::random_split(dataset.len(), 0.6, 0.2, seed)?;
            let run_cfg = TrainConfig { seed, ..ablation.apply(cfg) };
            let outcome = train(&dataset, &plan, &run_cfg)?;
            let test = outcome.report.test.ok_or_else(|| Error::Split("empty test set".into()))?;
            let cell = SweepCell {
                bias,
                seed,
                ablation,
                realized_bias: bias_of(&dataset)?,
                best_epoch: outcome.report.best_epoch,
                epochs_run: outcome.report.epochs.len(),
                test_accuracy: test.accuracy.unwrap_or(f64::NAN),
                test_auroc: test.auroc,
            };
            log::info!(
                "sweep b={bias} seed={seed} {ablation:?}: accuracy {:.4} ({:.0}s)",
                cell.test_accuracy,
                outcome.report.wall_seconds
            );
            Ok(cell)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = levels
        .iter()
        .map(|&bias| {
            let acc = |a: Ablation| -> Vec<f64> {
                cells
                    .iter()
                    .filter(|c| c.bias == bias && c.ablation == a)
                    .map(|c| c.test_accuracy)
                    .collect()
            };
            let (full_mean, full_std) = mean_std(&acc(Ablation::Full));
            let (no_causal_mean, no_causal_std) = mean_std(&acc(Ablation::NoCausal));
            SweepSummary {
                bias,
                full_mean,
                full_std,
                no_causal_mean,
                no_causal_std,
                gap: full_mean - no_causal_mean,
            }
        })
        .collect();
    Ok(SweepReport {
        levels: levels.to_vec(),
        seeds: seeds.to_vec(),
        data: data.clone(),
        cells,
        summary,
    })
}
