//! Optimisation loop, evaluation and the experiment protocols built on it.

mod metrics;
mod optim;
mod protocol;

pub use metrics::{accuracy, auroc, mean_std, rmse, Metrics};
pub use optim::{Adam, Plateau};
pub use protocol::{
    bias_sweep, cross_validate, sweep_config, Ablation, CvReport, CvRun, SweepCell, SweepReport, SweepSummary, SWEEP_EPOCHS,
    SWEEP_LEVELS, SWEEP_SEEDS,
};

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::disentangle::{GumbelConfig, NoiseMode};
use crate::error::{Error, Result};
use crate::graph::{self, PairDataset, PairSample, SplitPlan, Task};
use crate::model::{CmrlModel, ModelConfig, PairBatch, PredictHead, StepNoise};
use crate::nn::ParamStore;
use crate::objectives::{self, LossBreakdown, LossWeights};
use crate::rng;
use crate::tensor::Tape;

/// How a single training run partitions its dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    Random { train: f64, valid: f64 },
    Scaffold { c: usize, valid_fraction: f64 },
    Kfold { k: usize, repeats: usize, valid_fraction: f64 },
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig::Random { train: 0.6, valid: 0.2 }
    }
}

impl SplitConfig {
    pub fn plans(&self, dataset: &PairDataset, seed: u64) -> Result<Vec<SplitPlan>> {
        match *self {
            SplitConfig::Random { train, valid } => Ok(vec![graph::random_split(dataset.len(), train, valid, seed)?]),
            SplitConfig::Scaffold { c, valid_fraction } => Ok(vec![graph::scaffold_ood_split(dataset, c, valid_fraction, seed)?]),
            SplitConfig::Kfold { k, repeats, valid_fraction } => graph::kfold_splits(dataset.len(), k, repeats, valid_fraction, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Must match the dataset when given.
    pub task: Option<Task>,
    pub model: ModelConfig,
    pub gumbel: GumbelConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Confounder bank entries per sample.
    pub k_int: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub predict_head: PredictHead,
    pub eval_batch_size: usize,
    /// Also evaluate the training set after every epoch.
    pub eval_train: bool,
    pub split: SplitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            task: None,
            model: ModelConfig::default(),
            gumbel: GumbelConfig::default(),
            batch_size: 128,
            max_epochs: 100,
            learning_rate: 1e-3,
            lambda1: 1e-2,
            lambda2: 1e-2,
            k_int: 1,
            plateau_factor: 0.1,
            plateau_patience: 20,
            early_stop_patience: 50,
            predict_head: PredictHead::Causal,
            eval_batch_size: 512,
            eval_train: false,
            split: SplitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1.is_finite() && self.lambda2.is_finite()) {
            return bad("lambda1 and lambda2 must be non-negative".into());
        }
        if self.k_int == 0 {
            return bad("k_int must be at least 1".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad(format!("plateau_factor {} outside (0, 1]", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive".into());
        }
        self.model.validate()?;
        self.gumbel.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    fn task_for(&self, dataset: &PairDataset) -> Result<Task> {
        match self.task {
            Some(t) if t != dataset.task => Err(Error::Config(format!(
                "config task {t} does not match dataset task {}",
                dataset.task
            ))),
            _ => Ok(dataset.task),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean of `L_final` over the epoch's steps.
    pub train_loss: f64,
    pub train: Option<Metrics>,
    pub valid: Metrics,
    pub improved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub task: Task,
    /// Train, validation and test sizes.
    pub split_sizes: [usize; 3],
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub valid_at_best: Metrics,
    /// Test metrics of the configured prediction head at the best epoch.
    pub test: Option<Metrics>,
    /// Test metrics of the other head, for comparison.
    pub test_other_head: Option<Metrics>,
    pub stopped_early: bool,
    pub steps: Vec<StepRecord>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl RunReport {
    /// Writes `epoch`, `step` and the loss terms, one line per step.
    pub fn write_loss_log(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,step,l_sup,l_causal,l_kl,l_int,l_final")?;
        for s in &self.steps {
            let l = &s.losses;
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.epoch, s.step, l.l_sup, l.l_causal, l.l_kl, l.l_int, l.l_final
            )?;
        }
        Ok(())
    }

    /// Flat `run,epoch,split,metric,value` rows.
    pub fn write_metrics_csv(&self, run: &str, mut w: impl Write, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "run,epoch,split,metric,value")?;
        }
        for e in &self.epochs {
            writeln!(w, "{run},{},train,loss,{}", e.epoch, e.train_loss)?;
            let mut rows = vec![("valid", e.valid)];
            if let Some(t) = e.train {
                rows.push(("train", t));
            }
            for (split, m) in rows {
                for (name, v) in [("rmse", m.rmse), ("auroc", m.auroc), ("accuracy", m.accuracy)] {
                    if let Some(v) = v {
                        writeln!(w, "{run},{},{split},{name},{v}", e.epoch)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// A finished run: its report and the model restored to the best epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: CmrlModel,
}

/// Scores `indices` of `dataset` with the deterministic model.
pub fn evaluate(model: &CmrlModel, dataset: &PairDataset, indices: &[usize], head: PredictHead, batch_size: usize) -> Result<Metrics> {
    let pairs: Vec<&PairSample> = indices.iter().map(|&i| &dataset.pairs[i]).collect();
    let scores = model.predict(&pairs, head, batch_size)?;
    let y: Vec<f64> = pairs.iter().map(|p| p.y).collect();
    Ok(Metrics::compute(model.task, &scores, &y))
}

const SHUFFLE: u64 = 0x5348;
const BANK: u64 = 0x424b;
const NOISE: u64 = 0x4e5a;

/// Losses and gradients for one batch of training pairs, with the step's
/// randomness derived from `(seed, epoch, step)` and the pairs' indices.
pub fn training_step(
    model: &CmrlModel,
    cfg: &TrainConfig,
    dataset: &PairDataset,
    indices: &[usize],
    epoch: usize,
    step: usize,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let pairs: Vec<&PairSample> = indices.iter().map(|&i| &dataset.pairs[i]).collect();
    let batch = PairBatch::new(&pairs, model.edge_channels)?;
    let bank = objectives::sample_bank(batch.len(), cfg.k_int, &mut rng::stream(cfg.seed, &[BANK, epoch as u64, step as u64]));
    let noise = StepNoise::draw(&batch, model.width(), NoiseMode::Stochastic, bank, |b| {
        rng::stream(cfg.seed, &[NOISE, indices[b] as u64, epoch as u64])
    });
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let diverged = |term: &'static str| Error::Diverged { term, epoch, step };
    let (losses, _) = model.losses(&mut tape, &p, &batch, &noise, cfg.weights()).map_err(|e| match e {
        Error::Loss { term, .. } => diverged(term),
        other => other,
    })?;
    let breakdown = losses.breakdown(&tape, cfg.weights());
    tape.backward(losses.total).map_err(|_| diverged("gradient"))?;
    let grads = model.params.gradients(&tape, &p);
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(diverged("gradient"));
    }
    Ok((breakdown, grads))
}

/// Trains on `plan.train`, selects the epoch with the best validation metric
/// and reports test metrics for that epoch.
pub fn train(dataset: &PairDataset, plan: &SplitPlan, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = cfg.task_for(dataset)?;
    if plan.train.is_empty() {
        return Err(Error::Split("empty training set".into()));
    }
    if plan.valid.is_empty() {
        return Err(Error::Split("empty validation set".into()));
    }
    let started = Instant::now();
    let mut model = CmrlModel::new(
        cfg.model.clone(),
        task,
        dataset.feature_width,
        dataset.edge_feature_width,
        cfg.gumbel,
        cfg.seed,
    )?;
    let mut adam = Adam::new(&model.params);
    let mut plateau = Plateau::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut lr = cfg.learning_rate;
    let mut best: Option<(usize, Metrics, ParamStore)> = None;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut stopped_early = false;
    let mut order = plan.train.clone();
    for epoch in 0..cfg.max_epochs {
        use rand::seq::SliceRandom;
        order.copy_from_slice(&plan.train);
        order.shuffle(&mut rng::stream(cfg.seed, &[SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut n_steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (breakdown, grads) = training_step(&model, cfg, dataset, chunk, epoch, step)?;
            adam.step(&mut model.params, &grads, lr);
            loss_sum += breakdown.l_final;
            n_steps += 1;
            steps.push(StepRecord {
                epoch,
                step,
                losses: breakdown,
            });
        }
        let valid = evaluate(&model, dataset, &plan.valid, cfg.predict_head, cfg.eval_batch_size)?;
        let train_metrics = if cfg.eval_train {
            Some(evaluate(&model, dataset, &plan.train, cfg.predict_head, cfg.eval_batch_size)?)
        } else {
            None
        };
        let improved = match &best {
            None => !valid.primary().is_nan(),
            Some((_, m, _)) => valid.better_than(m, task),
        };
        if improved {
            best = Some((epoch, valid, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        log::info!(
            "epoch {epoch}: loss {:.5} valid {} {:.5} lr {lr:e}",
            loss_sum / n_steps as f64,
            Metrics::primary_name(task),
            valid.primary()
        );
        epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / n_steps as f64,
            train: train_metrics,
            valid,
            improved,
        });
        lr = plateau.observe(improved, lr);
        if since_best >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, valid_at_best) = match best {
        Some((e, m, params)) => {
            model.params = params;
            (e, m)
        }
        None => (epochs.len().saturating_sub(1), epochs.last().map(|e| e.valid).unwrap_or(Metrics::compute(task, &[], &[]))),
    };
    let other = match cfg.predict_head {
        PredictHead::Causal => PredictHead::Sup,
        PredictHead::Sup => PredictHead::Causal,
    };
    let (test, test_other_head) = if plan.test.is_empty() {
        (None, None)
    } else {
        (
            Some(evaluate(&model, dataset, &plan.test, cfg.predict_head, cfg.eval_batch_size)?),
            Some(evaluate(&model, dataset, &plan.test, other, cfg.eval_batch_size)?),
        )
    };
    let report = RunReport {
        config: cfg.clone(),
        task,
        split_sizes: [plan.train.len(), plan.valid.len(), plan.test.len()],
        epochs,
        best_epoch,
        valid_at_best,
        test,
        test_other_head,
        stopped_early,
        steps,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { report, model })
}
