//! Relaxed atom masks and the split of `H1` into causal and shortcut parts.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::GraphBatch;
use crate::error::{Error, Result, TensorError};
use crate::tensor::{Tape, Tensor, Var};

/// Importances are clamped to `[P_CLAMP, 1 - P_CLAMP]` before taking logits.
pub const P_CLAMP: f64 = 1e-6;
/// Relaxed masks are kept at least this far from 0 and 1, where the sigmoid
/// would otherwise round at low temperature.
pub const LAMBDA_EDGE: f64 = f64::EPSILON / 2.0;
/// Floor on the per-dimension variance of `H1` used for the noise.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Stochastic,
    /// `u = 0.5` and noise fixed at the per-dimension mean.
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub temperature: f64,
    /// Divide the logistic noise by the temperature as well
    /// (`σ((logit p + logit u) / t)`), so that the relaxation tends to
    /// Bernoulli(p) as `t → 0`. When false the noise enters unscaled
    /// (`σ(logit p / t + logit u)`). Both agree at `t = 1` and at `u = 0.5`.
    #[serde(default = "yes")]
    pub scale_noise: bool,
}

fn yes() -> bool {
    true
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            temperature: 1.0,
            scale_noise: true,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)))
        }
    }

    fn combine(&self, logit_p: f64, logit_u: f64) -> f64 {
        if self.scale_noise {
            (logit_p + logit_u) / self.temperature
        } else {
            logit_p / self.temperature + logit_u
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Uniform draw from the open interval (0, 1).
pub fn open_uniform(rng: &mut impl Rng) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Relaxed Bernoulli samples for a vector of probabilities.
pub fn gumbel_sigmoid(p: &[f64], cfg: &GumbelConfig, mode: NoiseMode, rng: &mut impl Rng) -> Result<Vec<f64>> {
    cfg.validate()?;
    Ok(p.iter()
        .map(|&pi| {
            let u = match mode {
                NoiseMode::Stochastic => open_uniform(rng),
                NoiseMode::Deterministic => 0.5,
            };
            let z = cfg.combine(logit(pi.clamp(P_CLAMP, 1.0 - P_CLAMP)), logit(u));
            crate::tensor::sigmoid(z).clamp(LAMBDA_EDGE, 1.0 - LAMBDA_EDGE)
        })
        .collect())
}

/// The same relaxation on the tape; `u` has the shape of `p` and is treated
/// as a constant.
pub fn gumbel_sigmoid_var(tape: &mut Tape, p: Var, u: &Tensor, cfg: &GumbelConfig) -> Result<Var, TensorError> {
    if tape.shape(p) != u.shape() {
        return Err(TensorError::shape("gumbel_sigmoid", tape.shape(p), u.shape()));
    }
    let pc = tape.clamp(p, P_CLAMP, 1.0 - P_CLAMP)?;
    let lp = tape.log(pc)?;
    let q = tape.rsub_scalar(1.0, pc)?;
    let lq = tape.log(q)?;
    let lp = tape.sub(lp, lq)?;
    let lu = Tensor::new(u.shape().to_vec(), u.data().iter().map(|&v| logit(v)).collect())?;
    let lu = tape.constant(lu);
    let z = if cfg.scale_noise {
        let s = tape.add(lp, lu)?;
        tape.div_scalar(s, cfg.temperature)?
    } else {
        let s = tape.div_scalar(lp, cfg.temperature)?;
        tape.add(s, lu)?
    };
    let l = tape.sigmoid(z)?;
    tape.clamp(l, LAMBDA_EDGE, 1.0 - LAMBDA_EDGE)
}

/// Random numbers consumed by one pair's disentanglement: one uniform per
/// atom and one standard normal per atom and dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PairNoise {
    pub u: Vec<f64>,
    pub z: Vec<f64>,
}

impl PairNoise {
    pub fn sample(atoms: usize, width: usize, rng: &mut impl Rng) -> Self {
        let u = (0..atoms).map(|_| open_uniform(rng)).collect();
        let z = (0..atoms * width).map(|_| rng.sample(StandardNormal)).collect();
        PairNoise { u, z }
    }

    pub fn deterministic(atoms: usize, width: usize) -> Self {
        PairNoise {
            u: vec![0.5; atoms],
            z: vec![0.0; atoms * width],
        }
    }

    pub fn new(atoms: usize, width: usize, mode: NoiseMode, rng: &mut impl Rng) -> Self {
        match mode {
            NoiseMode::Stochastic => Self::sample(atoms, width, rng),
            NoiseMode::Deterministic => Self::deterministic(atoms, width),
        }
    }
}

/// Uniforms laid out as `[B, N, 1]`, padding filled with 0.5.
pub fn uniforms(batch: &GraphBatch, noise: &[PairNoise]) -> Tensor {
    let n = batch.max_nodes;
    let mut u = vec![0.5; batch.len() * n];
    for (b, pn) in noise.iter().enumerate() {
        u[b * n..b * n + pn.u.len()].copy_from_slice(&pn.u);
    }
    Tensor::from_parts(vec![batch.len(), n, 1], u)
}

/// Per-dimension mean and floored population variance over the real rows.
pub fn row_statistics(rows: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (rows.len() / width) as f64;
    let mut mean = vec![0.0; width];
    for r in rows.chunks(width) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for r in rows.chunks(width) {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s = (*s / n).max(VAR_FLOOR));
    (mean, var)
}

/// Noise `ε ~ N(μ_H1, σ²_H1)` built from the detached values of `h1`.
pub fn noise_matrix(batch: &GraphBatch, h1: &Tensor, noise: &[PairNoise]) -> Tensor {
    let (n, w) = (batch.max_nodes, h1.last_dim());
    let mut eps = vec![0.0; batch.len() * n * w];
    for (b, pn) in noise.iter().enumerate() {
        let (mean, var) = row_statistics(batch.real_rows(h1, b), w);
        let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let atoms = batch.counts[b];
        for i in 0..atoms {
            for k in 0..w {
                eps[(b * n + i) * w + k] = mean[k] + sd[k] * pn.z[i * w + k];
            }
        }
    }
    Tensor::from_parts(vec![batch.len(), n, w], eps)
}

#[derive(Debug, Clone, Copy)]
pub struct Masked {
    pub c1: Var,
    pub s1: Var,
    pub eps: Var,
}

/// `C1 = λ·H1 + (1 − λ)·ε`, `S1 = (1 − λ)·H1`.
pub fn disentangle(tape: &mut Tape, h1: Var, lambda: Var, eps: Tensor) -> Result<Masked, TensorError> {
    let eps = tape.constant(eps);
    let keep = tape.mul(lambda, h1)?;
    let drop = tape.rsub_scalar(1.0, lambda)?;
    let filled = tape.mul(drop, eps)?;
    let c1 = tape.add(keep, filled)?;
    let s1 = tape.mul(drop, h1)?;
    Ok(Masked { c1, s1, eps })
}

/// Lines of `graph_id atom_index p lambda`.
pub fn format_importance(graph_id: &str, p: &[f64], lambda: &[f64]) -> String {
    let mut out = String::new();
    for (i, (pi, li)) in p.iter().zip(lambda).enumerate() {
        let _ = writeln!(out, "{graph_id} {i} {pi} {li}");
    }
    out
}
