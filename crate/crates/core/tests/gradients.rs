mod common;

use cmrl_core::encoder::{Encoder, EncoderVariant, GraphBatch, Set2Set};
use cmrl_core::interaction::{fuse, interaction_map};
use cmrl_core::model::PairBatch;
use cmrl_core::nn::ParamStore;
use cmrl_core::objectives::LossWeights;
use cmrl_core::tensor::gradcheck;
use cmrl_core::*;
use common::*;

const VARIANTS: [EncoderVariant; 3] = [EncoderVariant::EdgeConditioned, EncoderVariant::SumMlp, EncoderVariant::MeanLinear];

/// Random weighted sum, so every output coordinate carries gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random_tensor(&shape, &mut rng(seed)));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

struct Readout {
    store: ParamStore,
    encoder: Encoder,
    s2s: Set2Set,
}

fn readout(variant: EncoderVariant, seed: u64) -> Readout {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let encoder = Encoder::new(&mut store, variant, 3, 0, 4, 2, &mut r);
    let s2s = Set2Set::new(&mut store, "s2s", 4, 3, &mut r);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng_value(&mut r);
        }
    }
    Readout { store, encoder, s2s }
}

fn rng_value(r: &mut impl rand::Rng) -> f64 {
    r.random_range(-1.0..1.0)
}

fn four_node_batch(seed: u64) -> GraphBatch {
    let mut r = rng(seed);
    let a = random_graph("a", 4, 3, 2, &mut r);
    let b = random_graph("b", 3, 3, 0, &mut r);
    GraphBatch::new(&[&a, &b], 0).unwrap()
}

#[test]
fn set2set_of_encoder_wrt_node_features() {
    for (k, variant) in VARIANTS.into_iter().enumerate() {
        let ro = readout(variant, 10 + k as u64);
        let batch = four_node_batch(k as u64);
        let f = |tape: &mut Tape, x: Var| {
            let p = ro.store.bind_frozen(tape);
            let mut vars = batch.bind(tape);
            let mask = tape.constant(batch.mask.clone());
            vars.x = tape.mul(x, mask)?;
            let e = ro.encoder.forward(tape, &p, &vars)?;
            let z = ro.s2s.forward(tape, &p, e, vars.score_bias)?;
            project(tape, z, 7)
        };
        let report = gradcheck(f, &batch.x, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-5, "{variant}: {}", report.max_rel_error);
    }
}

#[test]
fn set2set_of_encoder_wrt_parameters() {
    for (k, variant) in VARIANTS.into_iter().enumerate() {
        let ro = readout(variant, 20 + k as u64);
        let batch = four_node_batch(5 + k as u64);
        for id in ro.store.ids() {
            let f = |tape: &mut Tape, v: Var| {
                let p = ro.store.bind_substituted(tape, id, v);
                let vars = batch.bind(tape);
                let e = ro.encoder.forward(tape, &p, &vars)?;
                let z = ro.s2s.forward(tape, &p, e, vars.score_bias)?;
                project(tape, z, 8)
            };
            let report = gradcheck(f, ro.store.get(id), 1e-6).unwrap();
            assert!(
                report.max_rel_error < 1e-5,
                "{variant} {}: {}",
                ro.store.name(id),
                report.max_rel_error
            );
        }
    }
}

#[test]
fn fuse_wrt_both_embeddings() {
    let mut r = rng(3);
    let e1 = random_tensor(&[1, 3, 2], &mut r);
    let e2 = random_tensor(&[1, 2, 2], &mut r);
    let fused_sum = |tape: &mut Tape, a: Var, b: Var| {
        let i = interaction_map(tape, a, b)?;
        let f = fuse(tape, a, b, i)?;
        let s1 = project(tape, f.h1, 1)?;
        let s2 = project(tape, f.h2, 2)?;
        tape.add(s1, s2)
    };
    let wrt_e1 = gradcheck(
        |tape: &mut Tape, v: Var| {
            let b = tape.constant(e2.clone());
            fused_sum(tape, v, b)
        },
        &e1,
        1e-6,
    )
    .unwrap();
    let wrt_e2 = gradcheck(
        |tape: &mut Tape, v: Var| {
            let a = tape.constant(e1.clone());
            fused_sum(tape, a, v)
        },
        &e2,
        1e-6,
    )
    .unwrap();
    assert!(wrt_e1.max_rel_error < 1e-5, "{}", wrt_e1.max_rel_error);
    assert!(wrt_e2.max_rel_error < 1e-5, "{}", wrt_e2.max_rel_error);
}

#[test]
fn full_loss_classification() {
    let m = jittered_model(Task::Classification, 3, 1);
    let pairs = toy_pairs(Task::Classification, 3, 2);
    let refs: Vec<&PairSample> = pairs.iter().collect();
    let batch = PairBatch::new(&refs, 0).unwrap();
    let noise = frozen_noise(&m, &batch, 4);
    let w = LossWeights { lambda1: 0.3, lambda2: 0.7 };
    let check = loss_gradcheck(&m, &batch, &noise, w, |_| true, |v| v.total);
    assert!(check.max_rel_error < 1e-4, "{}: {}", check.worst, check.max_rel_error);
    assert!(check.live > m.params.len() / 2, "{} of {} tensors have gradient", check.live, m.params.len());
}

#[test]
fn full_loss_regression() {
    let m = jittered_model(Task::Regression, 3, 5);
    let pairs = toy_pairs(Task::Regression, 3, 6);
    let refs: Vec<&PairSample> = pairs.iter().collect();
    let batch = PairBatch::new(&refs, 0).unwrap();
    let noise = frozen_noise(&m, &batch, 7);
    let w = LossWeights { lambda1: 0.5, lambda2: 0.25 };
    let check = loss_gradcheck(&m, &batch, &noise, w, |_| true, |v| v.total);
    assert!(check.max_rel_error < 1e-4, "{}: {}", check.worst, check.max_rel_error);
    assert!(check.live > m.params.len() / 2, "{} of {} tensors have gradient", check.live, m.params.len());
}

#[test]
fn causal_loss_wrt_importance_weights() {
    for task in [Task::Classification, Task::Regression] {
        let m = jittered_model(task, 3, 11);
        let pairs = toy_pairs(task, 3, 12);
        let refs: Vec<&PairSample> = pairs.iter().collect();
        let batch = PairBatch::new(&refs, 0).unwrap();
        let noise = frozen_noise(&m, &batch, 13);
        let w = LossWeights { lambda1: 0.0, lambda2: 0.0 };
        let check = loss_gradcheck(&m, &batch, &noise, w, |n| n.starts_with("importance."), |v| v.causal);
        assert!(check.max_rel_error < 1e-4, "{task}: {}: {}", check.worst, check.max_rel_error);
        assert_eq!(check.live, check.checked, "{task}: dead importance tensors");
    }
}

#[test]
fn intervention_term_reaches_importance_weights() {
    let m = jittered_model(Task::Classification, 3, 21);
    let pairs = toy_pairs(Task::Classification, 3, 22);
    let refs: Vec<&PairSample> = pairs.iter().collect();
    let batch = PairBatch::new(&refs, 0).unwrap();
    let noise = frozen_noise(&m, &batch, 23);
    let w = LossWeights { lambda1: 0.0, lambda2: 1.0 };
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape);
    let (vars, _) = m.losses(&mut tape, &p, &batch, &noise, w).unwrap();
    tape.backward(vars.int).unwrap();
    let grads = m.params.gradients(&tape, &p);
    let imp: f64 = m
        .params
        .ids()
        .zip(&grads)
        .filter(|(id, _)| m.params.name(*id).starts_with("importance."))
        .flat_map(|(_, g)| g.iter().map(|v| v.abs()))
        .sum();
    assert!(imp > 0.0);
}
