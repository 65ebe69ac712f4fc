//! The full pair model: shared encoder, interaction, disentangler, readout
//! and prediction heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disentangle::{self, GumbelConfig, NoiseMode, PairNoise};
use crate::encoder::{BatchVars, Encoder, EncoderVariant, GraphBatch, Set2Set};
use crate::error::{Error, Result, TensorError};
use crate::graph::{PairSample, Task};
use crate::interaction;
use crate::nn::{Activation, Bound, Mlp, ParamStore};
use crate::objectives::{self, LossVars, LossWeights};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Atom embedding width `d`.
    pub hidden: usize,
    pub encoder_layers: usize,
    pub variant: EncoderVariant,
    pub set2set_steps: usize,
    /// Hidden widths of the prediction and shortcut heads.
    pub head_hidden: Vec<usize>,
    /// Hidden widths of the atom-importance network.
    pub importance_hidden: Vec<usize>,
    /// Use one network for the supervised and causal heads (same input width).
    pub share_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 32,
            encoder_layers: 3,
            variant: EncoderVariant::EdgeConditioned,
            set2set_steps: 3,
            head_hidden: vec![64, 32],
            importance_hidden: vec![32],
            share_heads: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if self.set2set_steps == 0 {
            return Err(Error::Config("set2set_steps must be at least 1".into()));
        }
        if self.head_hidden.contains(&0) || self.importance_hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Which head produces reported predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictHead {
    #[default]
    Causal,
    Sup,
}

/// Pairs packed into two padded graph batches.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub g1: GraphBatch,
    pub g2: GraphBatch,
    pub y: Vec<f64>,
}

impl PairBatch {
    pub fn new(pairs: &[&PairSample], edge_channels: usize) -> Result<Self> {
        let g1: Vec<_> = pairs.iter().map(|p| p.g1.as_ref()).collect();
        let g2: Vec<_> = pairs.iter().map(|p| p.g2.as_ref()).collect();
        Ok(PairBatch {
            g1: GraphBatch::new(&g1, edge_channels)?,
            g2: GraphBatch::new(&g2, edge_channels)?,
            y: pairs.iter().map(|p| p.y).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Every random number one training step consumes, drawn up front so a step
/// can be replayed exactly.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub pairs: Vec<PairNoise>,
    /// `bank[b]` lists the partner indices of sample `b`.
    pub bank: Vec<Vec<usize>>,
    /// `bank_u[b][k]` holds one uniform per atom of partner `bank[b][k]`.
    pub bank_u: Vec<Vec<Vec<f64>>>,
    /// Overrides the noise matrix built from `pairs[..].z`.
    pub frozen_eps: Option<Tensor>,
}

impl StepNoise {
    /// Draws noise with one generator per sample (from `pair_rng(b)`) and
    /// uses `bank` as the confounder bank.
    pub fn draw(
        batch: &PairBatch,
        width: usize,
        mode: NoiseMode,
        bank: Vec<Vec<usize>>,
        mut pair_rng: impl FnMut(usize) -> ChaCha8Rng,
    ) -> Self {
        let mut pairs = Vec::with_capacity(batch.len());
        let mut bank_u = Vec::with_capacity(batch.len());
        for (b, js) in bank.iter().enumerate() {
            let mut rng = pair_rng(b);
            pairs.push(PairNoise::new(batch.g1.counts[b], width, mode, &mut rng));
            bank_u.push(
                js.iter()
                    .map(|&j| PairNoise::new(batch.g1.counts[j], 0, mode, &mut rng).u)
                    .collect(),
            );
        }
        StepNoise {
            pairs,
            bank,
            bank_u,
            frozen_eps: None,
        }
    }

    /// Midpoint uniforms, mean-valued noise, and no confounder bank.
    pub fn deterministic(batch: &PairBatch, width: usize) -> Self {
        Self::draw(batch, width, NoiseMode::Deterministic, vec![Vec::new(); batch.len()], |_| {
            ChaCha8Rng::seed_from_u64(0)
        })
    }

    fn bank_len(&self) -> usize {
        self.bank.first().map_or(0, Vec::len)
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub e1: Var,
    pub e2: Var,
    pub map: Var,
    pub h1: Var,
    pub h2: Var,
    pub zg1: Var,
    pub zg2: Var,
    pub p: Var,
    pub lambda: Var,
    pub c1: Var,
    pub s1: Var,
    pub eps: Var,
    pub zc1: Var,
    pub zs1: Var,
}

#[derive(Debug, Clone)]
pub struct CmrlModel {
    pub config: ModelConfig,
    pub task: Task,
    pub feature_width: usize,
    pub edge_channels: usize,
    pub gumbel: GumbelConfig,
    pub params: ParamStore,
    encoder: Encoder,
    readout: Set2Set,
    importance: Mlp,
    f_sup: Mlp,
    f_causal: Option<Mlp>,
    f_int: Mlp,
    g_shortcut: Mlp,
}

fn head_dims(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(out);
    dims
}

impl CmrlModel {
    pub fn new(
        config: ModelConfig,
        task: Task,
        feature_width: usize,
        edge_channels: usize,
        gumbel: GumbelConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        gumbel.validate()?;
        let mut rng = crate::rng::stream(seed, &[0x1417]);
        let mut params = ParamStore::new();
        let d = config.hidden;
        let encoder = Encoder::new(
            &mut params,
            config.variant,
            feature_width,
            edge_channels,
            d,
            config.encoder_layers,
            &mut rng,
        );
        let readout = Set2Set::new(&mut params, "readout", 2 * d, config.set2set_steps, &mut rng);
        let importance = Mlp::new(
            &mut params,
            "importance",
            &head_dims(2 * d, &config.importance_hidden, 1),
            Activation::Relu,
            false,
            &mut rng,
        );
        let mut head = |name: &str, input: usize, out: usize| {
            Mlp::new(&mut params, name, &head_dims(input, &config.head_hidden, out), Activation::Relu, false, &mut rng)
        };
        let f_sup = head("f_sup", 8 * d, 1);
        let f_causal = (!config.share_heads).then(|| head("f_causal", 8 * d, 1));
        let f_int = head("f_int", 12 * d, 1);
        let g_shortcut = head("g_shortcut", 4 * d, 2);
        Ok(CmrlModel {
            config,
            task,
            feature_width,
            edge_channels,
            gumbel,
            params,
            encoder,
            readout,
            importance,
            f_sup,
            f_causal,
            f_int,
            g_shortcut,
        })
    }

    pub fn width(&self) -> usize {
        2 * self.config.hidden
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn readout(&self) -> &Set2Set {
        &self.readout
    }

    fn causal_head(&self) -> &Mlp {
        self.f_causal.as_ref().unwrap_or(&self.f_sup)
    }

    /// Atom importances `p = σ(mlp(H1))`, shaped `[B, N, 1]`.
    pub fn importance(&self, tape: &mut Tape, p: &Bound, h1: Var) -> Result<Var, TensorError> {
        let logits = self.importance.forward(tape, p, h1)?;
        tape.sigmoid(logits)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &PairBatch,
        v1: &BatchVars,
        v2: &BatchVars,
        noise: &StepNoise,
    ) -> Result<Forward, TensorError> {
        let e1 = self.encoder.forward(tape, p, v1)?;
        let e2 = self.encoder.forward(tape, p, v2)?;
        let map = interaction::interaction_map(tape, e1, e2)?;
        let fused = interaction::fuse(tape, e1, e2, map)?;
        let zg1 = self.readout.forward(tape, p, fused.h1, v1.score_bias)?;
        let zg2 = self.readout.forward(tape, p, fused.h2, v2.score_bias)?;
        let imp = self.importance(tape, p, fused.h1)?;
        let u = disentangle::uniforms(&batch.g1, &noise.pairs);
        let lambda = disentangle::gumbel_sigmoid_var(tape, imp, &u, &self.gumbel)?;
        let eps = match &noise.frozen_eps {
            Some(e) => e.clone(),
            None => disentangle::noise_matrix(&batch.g1, tape.value(fused.h1), &noise.pairs),
        };
        let masked = disentangle::disentangle(tape, fused.h1, lambda, eps)?;
        let zc1 = self.readout.forward(tape, p, masked.c1, v1.score_bias)?;
        let zs1 = self.readout.forward(tape, p, masked.s1, v1.score_bias)?;
        Ok(Forward {
            e1,
            e2,
            map,
            h1: fused.h1,
            h2: fused.h2,
            zg1,
            zg2,
            p: imp,
            lambda,
            c1: masked.c1,
            s1: masked.s1,
            eps: masked.eps,
            zc1,
            zs1,
        })
    }

    /// Shortcut readout of partner graph `js[b]` after interacting with the
    /// second graph of sample `b`.
    #[allow(clippy::too_many_arguments)]
    pub fn confounder(
        &self,
        tape: &mut Tape,
        p: &Bound,
        fw: &Forward,
        batch: &PairBatch,
        v1: &BatchVars,
        js: &[usize],
        u_rows: &[&[f64]],
    ) -> Result<Var, TensorError> {
        let e1 = tape.index_select(fw.e1, js)?;
        let bias = tape.index_select(v1.score_bias, js)?;
        let map = interaction::interaction_map(tape, e1, fw.e2)?;
        let fused = interaction::fuse(tape, e1, fw.e2, map)?;
        let imp = self.importance(tape, p, fused.h1)?;
        let n = batch.g1.max_nodes;
        let mut u = vec![0.5; js.len() * n];
        for (b, rows) in u_rows.iter().enumerate() {
            u[b * n..b * n + rows.len()].copy_from_slice(rows);
        }
        let u = Tensor::from_parts(vec![js.len(), n, 1], u);
        let lambda = disentangle::gumbel_sigmoid_var(tape, imp, &u, &self.gumbel)?;
        let drop = tape.rsub_scalar(1.0, lambda)?;
        let s1 = tape.mul(drop, fused.h1)?;
        self.readout.forward(tape, p, s1, bias)
    }

    pub fn head_sup(&self, tape: &mut Tape, p: &Bound, fw: &Forward) -> Result<Var, TensorError> {
        let x = tape.concat(fw.zg1, fw.zg2)?;
        self.f_sup.forward(tape, p, x)
    }

    pub fn head_causal(&self, tape: &mut Tape, p: &Bound, fw: &Forward) -> Result<Var, TensorError> {
        let x = tape.concat(fw.zc1, fw.zg2)?;
        self.causal_head().forward(tape, p, x)
    }

    pub fn head_int(&self, tape: &mut Tape, p: &Bound, fw: &Forward, zs_tilde: Var) -> Result<Var, TensorError> {
        let x = tape.concat_all(&[fw.zc1, fw.zg2, zs_tilde])?;
        self.f_int.forward(tape, p, x)
    }

    pub fn head_shortcut(&self, tape: &mut Tape, p: &Bound, fw: &Forward) -> Result<Var, TensorError> {
        self.g_shortcut.forward(tape, p, fw.zs1)
    }

    /// Builds every loss term for one batch. Errors name the failing term.
    pub fn losses(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &PairBatch,
        noise: &StepNoise,
        weights: LossWeights,
    ) -> Result<(LossVars, Forward)> {
        let term = |term: &'static str| move |source: TensorError| Error::Loss { term, source };
        let v1 = batch.g1.bind(tape);
        let v2 = batch.g2.bind(tape);
        let fw = self.forward(tape, p, batch, &v1, &v2, noise).map_err(term("forward"))?;
        let sup = self
            .head_sup(tape, p, &fw)
            .and_then(|o| objectives::task_loss(tape, o, &batch.y, self.task))
            .map_err(term("L_sup"))?;
        let causal = self
            .head_causal(tape, p, &fw)
            .and_then(|o| objectives::task_loss(tape, o, &batch.y, self.task))
            .map_err(term("L_causal"))?;
        let kl = self
            .head_shortcut(tape, p, &fw)
            .and_then(|o| objectives::kl_loss(tape, o, self.task))
            .map_err(term("L_KL"))?;
        let int = if noise.bank_len() == 0 {
            if batch.len() == 1 {
                log::warn!("batch of one pair has no confounders; L_int set to 0");
            }
            tape.constant(Tensor::scalar(0.0))
        } else {
            let mut preds = Vec::with_capacity(noise.bank_len());
            for (slot, js) in objectives::bank_slots(&noise.bank).iter().enumerate() {
                let rows: Vec<&[f64]> = noise.bank_u.iter().map(|u| u[slot].as_slice()).collect();
                let pred = self
                    .confounder(tape, p, &fw, batch, &v1, js, &rows)
                    .and_then(|z| self.head_int(tape, p, &fw, z))
                    .map_err(term("L_int"))?;
                preds.push(pred);
            }
            objectives::intervention_loss(tape, &preds, &batch.y, self.task).map_err(term("L_int"))?
        };
        let vars = LossVars::combine(tape, sup, causal, kl, int, weights).map_err(term("L_final"))?;
        Ok((vars, fw))
    }

    /// Raw outputs (logits or values) of the chosen head, deterministic mode.
    pub fn predict_raw(&self, batch: &PairBatch, head: PredictHead) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let v1 = batch.g1.bind(&mut tape);
        let v2 = batch.g2.bind(&mut tape);
        let noise = StepNoise::deterministic(batch, self.width());
        let fw = self.forward(&mut tape, &p, batch, &v1, &v2, &noise)?;
        let out = match head {
            PredictHead::Causal => self.head_causal(&mut tape, &p, &fw)?,
            PredictHead::Sup => self.head_sup(&mut tape, &p, &fw)?,
        };
        Ok(tape.value(out).data().to_vec())
    }

    /// Scores for a list of pairs: probabilities for classification, values
    /// for regression.
    pub fn predict(&self, pairs: &[&PairSample], head: PredictHead, batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(batch_size.max(1)) {
            let batch = PairBatch::new(chunk, self.edge_channels)?;
            let raw = self.predict_raw(&batch, head)?;
            match self.task {
                Task::Classification => out.extend(raw.into_iter().map(crate::tensor::sigmoid)),
                Task::Regression => out.extend(raw),
            }
        }
        Ok(out)
    }

    /// Per-atom importance and deterministic mask of the first graph in each pair.
    pub fn atom_importance(&self, pairs: &[&PairSample]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let batch = PairBatch::new(pairs, self.edge_channels)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let v1 = batch.g1.bind(&mut tape);
        let v2 = batch.g2.bind(&mut tape);
        let noise = StepNoise::deterministic(&batch, self.width());
        let fw = self.forward(&mut tape, &p, &batch, &v1, &v2, &noise)?;
        Ok((0..batch.len())
            .map(|b| {
                (
                    batch.g1.real_rows(tape.value(fw.p), b).to_vec(),
                    batch.g1.real_rows(tape.value(fw.lambda), b).to_vec(),
                )
            })
            .collect())
    }

    /// Interaction maps without padding, one per pair.
    pub fn interaction_maps(&self, pairs: &[&PairSample]) -> Result<Vec<Tensor>> {
        let batch = PairBatch::new(pairs, self.edge_channels)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let v1 = batch.g1.bind(&mut tape);
        let v2 = batch.g2.bind(&mut tape);
        let e1 = self.encoder.forward(&mut tape, &p, &v1)?;
        let e2 = self.encoder.forward(&mut tape, &p, &v2)?;
        let map = interaction::interaction_map(&mut tape, e1, e2)?;
        (0..batch.len())
            .map(|b| {
                let (n1, n2) = (batch.g1.counts[b], batch.g2.counts[b]);
                let block = interaction::pair_block(tape.value(map), b, n1, n2);
                Ok(Tensor::new(vec![n1, n2], block)?)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use std::sync::Arc;

    pub(crate) fn toy_pairs(task: Task) -> Vec<PairSample> {
        let g = |id: &str, n: usize, seed: f64| {
            let x = Tensor::new(vec![n, 3], (0..3 * n).map(|k| ((k as f64 + seed) * 0.37).sin()).collect()).unwrap();
            Arc::new(Graph::new(id, x, (0..n - 1).map(|i| (i, i + 1)).collect(), None, None).unwrap())
        };
        let ys = match task {
            Task::Regression => [0.7, -0.4, 1.3],
            Task::Classification => [1.0, 0.0, 1.0],
        };
        vec![
            PairSample { g1: g("a", 3, 0.0), g2: g("b", 2, 1.0), y: ys[0], id: "0".into() },
            PairSample { g1: g("c", 2, 2.0), g2: g("d", 3, 3.0), y: ys[1], id: "1".into() },
            PairSample { g1: g("e", 4, 4.0), g2: g("f", 3, 5.0), y: ys[2], id: "2".into() },
        ]
    }

    fn small() -> ModelConfig {
        ModelConfig {
            hidden: 4,
            encoder_layers: 2,
            head_hidden: vec![6],
            importance_hidden: vec![3],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn predictions_have_one_score_per_pair() {
        let pairs = toy_pairs(Task::Classification);
        let refs: Vec<&PairSample> = pairs.iter().collect();
        let m = CmrlModel::new(small(), Task::Classification, 3, 0, GumbelConfig::default(), 1).unwrap();
        let s = m.predict(&refs, PredictHead::Causal, 2).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn batching_does_not_change_predictions() {
        let pairs = toy_pairs(Task::Regression);
        let refs: Vec<&PairSample> = pairs.iter().collect();
        let m = CmrlModel::new(small(), Task::Regression, 3, 0, GumbelConfig::default(), 2).unwrap();
        let all = m.predict(&refs, PredictHead::Causal, 3).unwrap();
        let one = m.predict(&refs, PredictHead::Causal, 1).unwrap();
        for (a, b) in all.iter().zip(&one) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_terms_are_non_negative_and_recombine() {
        let pairs = toy_pairs(Task::Classification);
        let refs: Vec<&PairSample> = pairs.iter().collect();
        let m = CmrlModel::new(small(), Task::Classification, 3, 0, GumbelConfig::default(), 3).unwrap();
        let batch = PairBatch::new(&refs, 0).unwrap();
        let bank = objectives::sample_bank(3, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let noise = StepNoise::draw(&batch, m.width(), NoiseMode::Stochastic, bank, |b| crate::rng::stream(9, &[b as u64]));
        let w = LossWeights { lambda1: 0.1, lambda2: 0.2 };
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let (l, _) = m.losses(&mut tape, &p, &batch, &noise, w).unwrap();
        let b = l.breakdown(&tape, w);
        assert!(b.l_sup >= 0.0 && b.l_causal >= 0.0 && b.l_kl >= 0.0 && b.l_int >= 0.0);
        assert_eq!(b.l_final.to_bits(), b.recombine().to_bits());
    }

    #[test]
    fn shared_heads_use_one_network() {
        let cfg = ModelConfig { share_heads: true, ..small() };
        let m = CmrlModel::new(cfg, Task::Regression, 3, 0, GumbelConfig::default(), 0).unwrap();
        assert!(m.params.by_name("f_causal.0.weight").is_none());
        let pairs = toy_pairs(Task::Regression);
        let refs: Vec<&PairSample> = pairs.iter().collect();
        assert!(m.predict(&refs, PredictHead::Causal, 4).is_ok());
    }

    #[test]
    fn mask_decomposition_identity() {
        let pairs = toy_pairs(Task::Regression);
        let refs: Vec<&PairSample> = pairs.iter().collect();
        let m = CmrlModel::new(small(), Task::Regression, 3, 0, GumbelConfig::default(), 4).unwrap();
        let batch = PairBatch::new(&refs, 0).unwrap();
        let noise = StepNoise::draw(&batch, m.width(), NoiseMode::Stochastic, vec![vec![]; 3], |b| {
            crate::rng::stream(1, &[b as u64])
        });
        let mut tape = Tape::new();
        let p = m.params.bind_frozen(&mut tape);
        let (v1, v2) = (batch.g1.bind(&mut tape), batch.g2.bind(&mut tape));
        let fw = m.forward(&mut tape, &p, &batch, &v1, &v2, &noise).unwrap();
        let w = m.width();
        let (h, c, s, e, l) = (
            tape.value(fw.h1).data(),
            tape.value(fw.c1).data(),
            tape.value(fw.s1).data(),
            tape.value(fw.eps).data(),
            tape.value(fw.lambda).data(),
        );
        for (k, hv) in h.iter().enumerate() {
            let lam = l[k / w];
            assert!((c[k] + s[k] - (1.0 - lam) * e[k] - hv).abs() < 1e-12);
        }
    }
}
