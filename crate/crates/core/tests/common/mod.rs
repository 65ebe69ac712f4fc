#![allow(dead_code)]

use std::collections::HashSet;
use std::sync::Arc;

use cmrl_core::diagnostics::{self, LossCheck};
use cmrl_core::disentangle::NoiseMode;
use cmrl_core::model::{PairBatch, StepNoise};
use cmrl_core::objectives::{self, LossWeights};
use cmrl_core::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Connected graph: a random spanning tree plus `extra` chords.
pub fn random_graph(id: &str, n: usize, width: usize, extra: usize, rng: &mut impl Rng) -> Graph {
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((rng.random_range(0..i), i));
    }
    for _ in 0..extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
            edges.push((a, b));
        }
    }
    Graph::new(id, random_tensor(&[n, width], rng), edges, None, None).unwrap()
}

pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn small_config() -> ModelConfig {
    diagnostics::toy_config()
}

/// Small model with random non-zero biases, so no term is trivially flat.
pub fn jittered_model(task: Task, width: usize, seed: u64) -> CmrlModel {
    diagnostics::toy_model(task, width, seed).unwrap()
}

/// Two pairs of three-atom graphs.
pub fn toy_pairs(task: Task, width: usize, seed: u64) -> Vec<PairSample> {
    let mut r = rng(seed);
    let mut g = |id: &str| Arc::new(random_graph(id, 3, width, 1, &mut r));
    let ys = match task {
        Task::Regression => [0.6, -1.1],
        Task::Classification => [1.0, 0.0],
    };
    vec![
        PairSample { g1: g("a"), g2: g("b"), y: ys[0], id: "p0".into() },
        PairSample { g1: g("c"), g2: g("d"), y: ys[1], id: "p1".into() },
    ]
}

pub fn frozen_noise(model: &CmrlModel, batch: &PairBatch, seed: u64) -> StepNoise {
    diagnostics::frozen_noise(model, batch, seed).unwrap()
}

pub fn loss_gradcheck(
    model: &CmrlModel,
    batch: &PairBatch,
    noise: &StepNoise,
    w: LossWeights,
    select: impl Fn(&str) -> bool,
    pick: impl Fn(&objectives::LossVars) -> Var,
) -> LossCheck {
    diagnostics::loss_gradcheck(model, batch, noise, w, select, pick).unwrap()
}

/// Eight copies of one regression pair.
pub fn duplicated_pairs(seed: u64) -> PairDataset {
    let mut r = rng(seed);
    let g1 = Arc::new(random_graph("m1", 5, 3, 1, &mut r));
    let g2 = Arc::new(random_graph("m2", 4, 3, 1, &mut r));
    let pairs = (0..8)
        .map(|k| PairSample {
            g1: Arc::clone(&g1),
            g2: Arc::clone(&g2),
            y: 0.75,
            id: format!("dup{k}"),
        })
        .collect();
    PairDataset::new(Task::Regression, 3, 0, pairs).unwrap()
}

/// Trains with both auxiliary weights off, evaluating on the training pairs,
/// and returns the training RMSE after every epoch.
pub fn memorization_curve(seed: u64) -> Vec<f64> {
    let data = duplicated_pairs(seed);
    let all: Vec<usize> = (0..data.len()).collect();
    let plan = SplitPlan {
        train: all.clone(),
        valid: all,
        test: vec![],
        mode: SplitMode::Random { train: 1.0, valid: 0.0 },
    };
    let cfg = TrainConfig {
        seed,
        lambda1: 0.0,
        lambda2: 0.0,
        batch_size: 8,
        max_epochs: 500,
        eval_train: true,
        early_stop_patience: 500,
        ..TrainConfig::default()
    };
    let out = train(&data, &plan, &cfg).unwrap();
    out.report.epochs.iter().map(|e| e.train.unwrap().rmse.unwrap()).collect()
}

pub fn single(model: &CmrlModel, g1: &Arc<Graph>, g2: &Arc<Graph>) -> (Tensor, Tensor, Tensor) {
    let pair = PairSample { g1: Arc::clone(g1), g2: Arc::clone(g2), y: 0.0, id: "x".into() };
    let batch = PairBatch::new(&[&pair], 0).unwrap();
    let noise = StepNoise::deterministic(&batch, model.width());
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    let (v1, v2) = (batch.g1.bind(&mut tape), batch.g2.bind(&mut tape));
    let fw = model.forward(&mut tape, &p, &batch, &v1, &v2, &noise).unwrap();
    (tape.value(fw.zc1).clone(), tape.value(fw.zg2).clone(), tape.value(fw.zs1).clone())
}

/// Prediction of `f_int` for sample `b` with confounder graph `j`, computed
/// from two independent single-pair forward passes.
pub fn brute_int_pred(model: &CmrlModel, pairs: &[PairSample], b: usize, j: usize) -> f64 {
    let (zc1, zg2, _) = single(model, &pairs[b].g1, &pairs[b].g2);
    let (_, _, zs_tilde) = single(model, &pairs[j].g1, &pairs[b].g2);
    let x: Vec<f64> = zc1.data().iter().chain(zg2.data()).chain(zs_tilde.data()).copied().collect();
    let pred = eval(|t| {
        let p = model.params.bind_frozen(t);
        let xv = t.constant(Tensor::new(vec![1, x.len()], x).unwrap());
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        let mut h = xv;
        let layers = names.iter().filter(|n| n.starts_with("f_int.") && n.ends_with(".weight")).count();
        for l in 0..layers {
            let id = model.params.ids().find(|&id| model.params.name(id) == format!("f_int.{l}.weight")).unwrap();
            let bid = model.params.ids().find(|&id| model.params.name(id) == format!("f_int.{l}.bias")).unwrap();
            h = t.matmul(h, p[id]).unwrap();
            h = t.add(h, p[bid]).unwrap();
            if l + 1 < layers {
                h = t.relu(h).unwrap();
            }
        }
        h
    });
    pred.item()
}

pub fn batch_pairs(task: Task, n: usize, seed: u64) -> Vec<PairSample> {
    let mut r = rng(seed);
    (0..n)
        .map(|k| {
            let g1 = Arc::new(random_graph(&format!("a{k}"), 2 + k % 3, 3, 1, &mut r));
            let g2 = Arc::new(random_graph(&format!("b{k}"), 3 + k % 2, 3, 1, &mut r));
            let y = match task {
                Task::Classification => (k % 2) as f64,
                Task::Regression => 0.3 * k as f64 - 0.5,
            };
            PairSample { g1, g2, y, id: k.to_string() }
        })
        .collect()
}

pub fn l_int(model: &CmrlModel, batch: &PairBatch, bank: Vec<Vec<usize>>) -> f64 {
    let noise = StepNoise::draw(batch, model.width(), NoiseMode::Deterministic, bank, |_| rng(0));
    let w = LossWeights { lambda1: 0.0, lambda2: 1.0 };
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    let (vars, _) = model.losses(&mut tape, &p, batch, &noise, w).unwrap();
    tape.item(vars.int)
}


/// Dataset over one-node graphs with the given scaffold classes.
pub fn scaffold_dataset(scaffolds: &[u64], pairs: &[(usize, usize)]) -> PairDataset {
    let graphs: Vec<Arc<Graph>> = scaffolds
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let x = Tensor::new(vec![1, 1], vec![i as f64]).unwrap();
            Arc::new(Graph::new(format!("g{i}"), x, vec![], None, Some(s)).unwrap())
        })
        .collect();
    let samples = pairs
        .iter()
        .enumerate()
        .map(|(k, &(a, b))| PairSample {
            g1: Arc::clone(&graphs[a]),
            g2: Arc::clone(&graphs[b]),
            y: (k % 2) as f64,
            id: format!("p{k}"),
        })
        .collect();
    PairDataset::new(Task::Classification, 1, 0, samples).unwrap()
}

/// Training and held-out pair indices straight from the set definitions, or
/// `None` when fewer than `c + 1` scaffold classes occur.
pub fn scaffold_brute_force(scaffolds: &[u64], pairs: &[(usize, usize)], c: usize) -> Option<(Vec<usize>, Vec<usize>)> {
    let mut used: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    used.sort_unstable();
    used.dedup();
    let mut classes: Vec<(u64, usize)> = Vec::new();
    for &g in &used {
        match classes.iter_mut().find(|(s, _)| *s == scaffolds[g]) {
            Some(e) => e.1 += 1,
            None => classes.push((scaffolds[g], 1)),
        }
    }
    if c >= classes.len() {
        return None;
    }
    classes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let in_dist: HashSet<u64> = classes[..c].iter().map(|e| e.0).collect();
    let id = |g: usize| in_dist.contains(&scaffolds[g]);
    let train = (0..pairs.len()).filter(|&k| id(pairs[k].0) && id(pairs[k].1)).collect();
    let held = (0..pairs.len())
        .filter(|&k| {
            let (a, b) = pairs[k];
            (id(a) && !id(b)) || (!id(a) && id(b)) || (!id(a) && !id(b))
        })
        .collect();
    Some((train, held))
}

pub fn eval(f: impl FnOnce(&mut Tape) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).clone()
}

