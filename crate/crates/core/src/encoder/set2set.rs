use rand::Rng;

use crate::error::TensorError;
use crate::nn::{Bound, LstmCell, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Order-invariant readout: an LSTM-driven attention over the node set,
/// run for a fixed number of steps. Maps `[B, N, w]` to `[B, 2w]`.
#[derive(Debug, Clone)]
pub struct Set2Set {
    pub lstm: LstmCell,
    pub steps: usize,
    pub width: usize,
}

impl Set2Set {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, steps: usize, rng: &mut impl Rng) -> Self {
        Set2Set {
            lstm: LstmCell::new(store, &format!("{name}.lstm"), 2 * width, width, rng),
            steps,
            width,
        }
    }

    /// `score_bias: [B, 1, N]` masks padding nodes out of the attention.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var, score_bias: Var) -> Result<Var, TensorError> {
        let s = tape.shape(h).to_vec();
        if s.len() != 3 || s[2] != self.width {
            return Err(TensorError::invalid(
                "set2set",
                format!("expected [B, N, {}], got {s:?}", self.width),
            ));
        }
        let (b, n, w) = (s[0], s[1], s[2]);
        if tape.shape(score_bias) != [b, 1, n] {
            return Err(TensorError::shape("set2set", tape.shape(score_bias), &[b, 1, n]));
        }
        let mut q_star = tape.constant(Tensor::zeros(&[b, 2 * w]));
        let mut hidden = tape.constant(Tensor::zeros(&[b, w]));
        let mut cell = tape.constant(Tensor::zeros(&[b, w]));
        for _ in 0..self.steps {
            (hidden, cell) = self.lstm.forward(tape, p, q_star, hidden, cell)?;
            let q = tape.reshape(hidden, &[b, w, 1])?;
            let e = tape.bmm(h, q)?;
            let e = tape.reshape(e, &[b, 1, n])?;
            let e = tape.add(e, score_bias)?;
            let a = tape.softmax(e)?;
            let r = tape.bmm(a, h)?;
            let r = tape.reshape(r, &[b, w])?;
            q_star = tape.concat(hidden, r)?;
        }
        Ok(q_star)
    }
}
