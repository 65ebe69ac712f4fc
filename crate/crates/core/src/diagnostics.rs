//! Finite-difference checks of the full training objective on a small
//! built-in batch.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::disentangle::{GumbelConfig, NoiseMode};
use crate::error::{Result, TensorError};
use crate::graph::{Graph, PairSample, Task};
use crate::model::{CmrlModel, ModelConfig, PairBatch, StepNoise};
use crate::objectives::{self, LossVars, LossWeights};
use crate::rng;
use crate::tensor::{gradcheck, Tape, Tensor, Var};

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        hidden: 4,
        encoder_layers: 2,
        head_hidden: vec![5, 3],
        importance_hidden: vec![3],
        ..ModelConfig::default()
    }
}

/// Small model whose biases are drawn from `[-0.1, 0.3)` and whose weights
/// are scaled by 1.5, so no loss term sits on a flat ReLU region.
pub fn toy_model(task: Task, width: usize, seed: u64) -> Result<CmrlModel> {
    let mut m = CmrlModel::new(toy_config(), task, width, 0, GumbelConfig::default(), seed)?;
    let mut r = rng::stream(seed, &[0xfeed]);
    let biases: Vec<bool> = m.params.iter().map(|(n, _)| n.ends_with("bias") || n.contains(".b_")).collect();
    for (t, is_bias) in m.params.tensors_mut().iter_mut().zip(biases) {
        for v in t.data_mut() {
            if is_bias {
                *v = r.random_range(-0.1..0.3);
            } else {
                *v *= 1.5;
            }
        }
    }
    Ok(m)
}

/// Two pairs of three-atom graphs (a path and a triangle per pair).
pub fn toy_pairs(task: Task, width: usize, seed: u64) -> Result<Vec<PairSample>> {
    let mut r = rng::stream(seed, &[0x70]);
    let mut graph = |id: &str, edges: Vec<(usize, usize)>| -> Result<Arc<Graph>> {
        let x = Tensor::new(vec![3, width], (0..3 * width).map(|_| r.random_range(-1.0..1.0)).collect())?;
        Ok(Arc::new(Graph::new(id, x, edges, None, None)?))
    };
    let path = vec![(0, 1), (1, 2)];
    let triangle = vec![(0, 1), (1, 2), (2, 0)];
    let ys = match task {
        Task::Regression => [0.6, -1.1],
        Task::Classification => [1.0, 0.0],
    };
    Ok(vec![
        PairSample {
            g1: graph("a", path.clone())?,
            g2: graph("b", triangle.clone())?,
            y: ys[0],
            id: "p0".into(),
        },
        PairSample {
            g1: graph("c", triangle)?,
            g2: graph("d", path)?,
            y: ys[1],
            id: "p1".into(),
        },
    ])
}

/// Stochastic noise with a full confounder bank, with the noise matrix frozen
/// so the loss is a smooth function of the parameters.
pub fn frozen_noise(model: &CmrlModel, batch: &PairBatch, seed: u64) -> Result<StepNoise> {
    let bank = objectives::enumerate_bank(batch.len());
    let mut noise = StepNoise::draw(batch, model.width(), NoiseMode::Stochastic, bank, |b| rng::stream(seed, &[b as u64]));
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    let (v1, v2) = (batch.g1.bind(&mut tape), batch.g2.bind(&mut tape));
    let fw = model.forward(&mut tape, &p, batch, &v1, &v2, &noise)?;
    noise.frozen_eps = Some(tape.value(fw.eps).clone());
    Ok(noise)
}

#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub max_rel_error: f64,
    /// Parameter tensor with the largest error.
    pub worst: String,
    /// Checked tensors with at least one non-zero analytic gradient entry.
    pub live: usize,
    pub checked: usize,
}

/// Gradcheck of one loss term against every parameter tensor whose name
/// passes `select`.
pub fn loss_gradcheck(
    model: &CmrlModel,
    batch: &PairBatch,
    noise: &StepNoise,
    w: LossWeights,
    select: impl Fn(&str) -> bool,
    pick: impl Fn(&LossVars) -> Var,
) -> Result<LossCheck> {
    let mut out = LossCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        live: 0,
        checked: 0,
    };
    for id in model.params.ids() {
        let name = model.params.name(id).to_string();
        if !select(&name) {
            continue;
        }
        let x = model.params.get(id).clone();
        let report = gradcheck(
            |tape: &mut Tape, v: Var| {
                let p = model.params.bind_substituted(tape, id, v);
                let (vars, _) = model.losses(tape, &p, batch, noise, w).map_err(|e| TensorError::Invalid {
                    op: "loss",
                    msg: e.to_string(),
                })?;
                Ok(pick(&vars))
            },
            &x,
            1e-6,
        )?;
        out.checked += 1;
        if report.analytic.iter().any(|&g| g != 0.0) {
            out.live += 1;
        }
        if report.max_rel_error > out.max_rel_error {
            out.max_rel_error = report.max_rel_error;
            out.worst = name;
        }
    }
    Ok(out)
}

/// `L_final` gradcheck over all parameters on the built-in toy batch.
pub fn toy_gradcheck(task: Task, weights: LossWeights, seed: u64) -> Result<LossCheck> {
    let width = 3;
    let model = toy_model(task, width, seed)?;
    let pairs = toy_pairs(task, width, seed)?;
    let refs: Vec<&PairSample> = pairs.iter().collect();
    let batch = PairBatch::new(&refs, 0)?;
    let noise = frozen_noise(&model, &batch, seed)?;
    loss_gradcheck(&model, &batch, &noise, weights, |_| true, |v| v.total)
}
