//! Training losses and the in-batch confounder bank.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::graph::Task;
use crate::tensor::{Tape, Tensor, Var};

/// Root mean squared error (regression) or mean binary cross-entropy on
/// logits (classification). `pred` is `[B, 1]`.
pub fn task_loss(tape: &mut Tape, pred: Var, y: &[f64], task: Task) -> Result<Var, TensorError> {
    let s = tape.shape(pred).to_vec();
    if s != [y.len(), 1] {
        return Err(TensorError::shape("task_loss", &s, &[y.len(), 1]));
    }
    if task == Task::Classification && y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(TensorError::invalid("task_loss", "classification targets must be 0 or 1"));
    }
    let target = tape.constant(Tensor::from_parts(vec![y.len(), 1], y.to_vec()));
    match task {
        Task::Regression => {
            let diff = tape.sub(pred, target)?;
            let sq = tape.square(diff)?;
            let mse = tape.mean(sq)?;
            tape.sqrt(mse)
        }
        Task::Classification => {
            // −y·log σ(z) − (1−y)·log(1−σ(z)) = softplus(z) − y·z
            let sp = tape.softplus(pred)?;
            let yz = tape.mul(target, pred)?;
            let l = tape.sub(sp, yz)?;
            tape.mean(l)
        }
    }
}

/// Divergence of the shortcut head's output from an uninformative target.
/// `out` is `[B, 2]`: two class logits, or a mean and a log-variance.
pub fn kl_loss(tape: &mut Tape, out: Var, task: Task) -> Result<Var, TensorError> {
    let s = tape.shape(out).to_vec();
    if s.len() != 2 || s[1] != 2 {
        return Err(TensorError::invalid("kl_loss", format!("expected [B, 2], got {s:?}")));
    }
    match task {
        Task::Classification => {
            let ls = tape.log_softmax(out)?;
            let q = tape.exp(ls)?;
            let shifted = tape.add_scalar(ls, std::f64::consts::LN_2)?;
            let terms = tape.mul(q, shifted)?;
            let per = tape.sum_axis(terms, 1)?;
            tape.mean(per)
        }
        Task::Regression => {
            let mu = tape.narrow(out, 0, 1)?;
            let log_var = tape.narrow(out, 1, 1)?;
            let var = tape.exp(log_var)?;
            let mu2 = tape.square(mu)?;
            let a = tape.add(mu2, var)?;
            let a = tape.add_scalar(a, -1.0)?;
            let a = tape.sub(a, log_var)?;
            let a = tape.mul_scalar(a, 0.5)?;
            tape.mean(a)
        }
    }
}

/// Mean over bank slots of the task loss of each slot's predictions.
pub fn intervention_loss(tape: &mut Tape, slot_preds: &[Var], y: &[f64], task: Task) -> Result<Var, TensorError> {
    if slot_preds.is_empty() {
        return Err(TensorError::invalid("intervention_loss", "empty confounder bank"));
    }
    let mut total = task_loss(tape, slot_preds[0], y, task)?;
    for &p in &slot_preds[1..] {
        let l = task_loss(tape, p, y, task)?;
        total = tape.add(total, l)?;
    }
    tape.div_scalar(total, slot_preds.len() as f64)
}

/// For each sample `b`, `min(k, B − 1)` distinct partner indices `j ≠ b`,
/// drawn uniformly without replacement and listed in increasing order.
pub fn sample_bank(batch: usize, k: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    if batch < 2 {
        return vec![Vec::new(); batch];
    }
    let k = k.min(batch - 1);
    (0..batch)
        .map(|b| {
            let mut js: Vec<usize> = index::sample(rng, batch - 1, k)
                .into_iter()
                .map(|j| if j >= b { j + 1 } else { j })
                .collect();
            js.sort_unstable();
            js
        })
        .collect()
}

/// Every partner for every sample: the bank used when `k = B − 1`.
pub fn enumerate_bank(batch: usize) -> Vec<Vec<usize>> {
    (0..batch).map(|b| (0..batch).filter(|&j| j != b).collect()).collect()
}

/// Per-slot partner index lists: `slots[k][b] = bank[b][k]`.
pub fn bank_slots(bank: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let k = bank.first().map_or(0, Vec::len);
    (0..k).map(|s| bank.iter().map(|js| js[s]).collect()).collect()
}

/// Loss weights of the final objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Scalar values of every loss term for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_causal: f64,
    pub l_kl: f64,
    pub l_int: f64,
    pub l_final: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    /// `L_sup + L_causal + λ1·L_KL + λ2·L_int`, evaluated left to right.
    pub fn recombine(&self) -> f64 {
        self.l_sup + self.l_causal + self.lambda1 * self.l_kl + self.lambda2 * self.l_int
    }
}

/// Loss terms on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub sup: Var,
    pub causal: Var,
    pub kl: Var,
    pub int: Var,
    pub total: Var,
}

impl LossVars {
    /// Weighted sum in the same association order as [`LossBreakdown::recombine`].
    pub fn combine(tape: &mut Tape, sup: Var, causal: Var, kl: Var, int: Var, w: LossWeights) -> Result<Self, TensorError> {
        let a = tape.add(sup, causal)?;
        let b = tape.mul_scalar(kl, w.lambda1)?;
        let a = tape.add(a, b)?;
        let c = tape.mul_scalar(int, w.lambda2)?;
        let total = tape.add(a, c)?;
        Ok(LossVars {
            sup,
            causal,
            kl,
            int,
            total,
        })
    }

    pub fn breakdown(&self, tape: &Tape, w: LossWeights) -> LossBreakdown {
        LossBreakdown {
            l_sup: tape.item(self.sup),
            l_causal: tape.item(self.causal),
            l_kl: tape.item(self.kl),
            l_int: tape.item(self.int),
            l_final: tape.item(self.total),
            lambda1: w.lambda1,
            lambda2: w.lambda2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_loss(f: impl FnOnce(&mut Tape) -> Result<Var, TensorError>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.item(v)
    }

    fn col(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap())
    }

    #[test]
    fn regression_loss_cases() {
        assert_eq!(scalar_loss(|t| { let p = col(t, &[1.0, 2.0]); task_loss(t, p, &[1.0, 2.0], Task::Regression) }), 0.0);
        let l = scalar_loss(|t| { let p = col(t, &[1.0, 3.0]); task_loss(t, p, &[0.0, 3.0], Task::Regression) });
        assert!((l - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn classification_loss_at_zero_logit() {
        let l = scalar_loss(|t| { let p = col(t, &[0.0, 0.0]); task_loss(t, p, &[1.0, 1.0], Task::Classification) });
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn classification_rejects_soft_labels() {
        let mut t = Tape::new();
        let p = col(&mut t, &[0.0]);
        assert!(task_loss(&mut t, p, &[0.3], Task::Classification).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let two = |t: &mut Tape, v: [f64; 2]| t.constant(Tensor::new(vec![1, 2], v.to_vec()).unwrap());
        assert!(scalar_loss(|t| { let o = two(t, [0.3, 0.3]); kl_loss(t, o, Task::Classification) }).abs() < 1e-15);
        assert_eq!(scalar_loss(|t| { let o = two(t, [0.0, 0.0]); kl_loss(t, o, Task::Regression) }), 0.0);
        assert_eq!(scalar_loss(|t| { let o = two(t, [1.0, 0.0]); kl_loss(t, o, Task::Regression) }), 0.5);
    }

    #[test]
    fn kl_overflow_is_an_error() {
        let mut t = Tape::new();
        let o = t.constant(Tensor::new(vec![1, 2], vec![0.0, 1e4]).unwrap());
        assert!(kl_loss(&mut t, o, Task::Regression).is_err());
    }

    #[test]
    fn intervention_loss_averages_slots() {
        let y = [0.0, 1.0];
        let single = scalar_loss(|t| { let p = col(t, &[0.5, 0.2]); intervention_loss(t, &[p], &y, Task::Regression) });
        let direct = scalar_loss(|t| { let p = col(t, &[0.5, 0.2]); task_loss(t, p, &y, Task::Regression) });
        assert_eq!(single, direct);
        let repeated = scalar_loss(|t| { let p = col(t, &[0.5, 0.2]); intervention_loss(t, &[p, p, p], &y, Task::Regression) });
        assert!((repeated - single).abs() < 1e-15);
        let a = scalar_loss(|t| { let p = col(t, &[0.5, 0.2]); task_loss(t, p, &y, Task::Classification) });
        let b = scalar_loss(|t| { let p = col(t, &[-1.0, 3.0]); task_loss(t, p, &y, Task::Classification) });
        let both = scalar_loss(|t| {
            let p = col(t, &[0.5, 0.2]);
            let q = col(t, &[-1.0, 3.0]);
            intervention_loss(t, &[p, q], &y, Task::Classification)
        });
        assert!((both - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bank_of_two_swaps_partners() {
        let bank = sample_bank(2, 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(bank, vec![vec![1], vec![0]]);
    }

    #[test]
    fn bank_excludes_self_and_has_requested_length() {
        let bank = sample_bank(8, 3, &mut ChaCha8Rng::seed_from_u64(5));
        for (b, js) in bank.iter().enumerate() {
            assert_eq!(js.len(), 3);
            assert!(!js.contains(&b));
            assert!(js.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn full_bank_is_the_enumeration() {
        assert_eq!(sample_bank(6, 5, &mut ChaCha8Rng::seed_from_u64(1)), enumerate_bank(6));
        assert_eq!(bank_slots(&enumerate_bank(3)), vec![vec![1, 0, 0], vec![2, 2, 1]]);
    }

    #[test]
    fn zero_weights_leave_the_two_prediction_losses() {
        let mut t = Tape::new();
        let v: Vec<Var> = [0.7, 0.2, 5.0, 9.0].iter().map(|&x| t.constant(Tensor::scalar(x))).collect();
        let w = LossWeights { lambda1: 0.0, lambda2: 0.0 };
        let l = LossVars::combine(&mut t, v[0], v[1], v[2], v[3], w).unwrap();
        assert_eq!(t.item(l.total), 0.7 + 0.2);
        let w = LossWeights { lambda1: 0.01, lambda2: 0.3 };
        let l = LossVars::combine(&mut t, v[0], v[1], v[2], v[3], w).unwrap();
        let b = l.breakdown(&t, w);
        assert_eq!(b.l_final.to_bits(), b.recombine().to_bits());
    }
}
