//! Parameter storage and the small layers the model is assembled from.

use std::ops::Index;

use rand::Rng;

use crate::error::TensorError;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a gradient-tracking leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Constants for every parameter except `id`, which is replaced by `var`.
    pub fn bind_substituted(&self, tape: &mut Tape, id: ParamId, var: Var) -> Bound {
        Bound(
            self.tensors
                .iter()
                .enumerate()
                .map(|(i, t)| if i == id.0 { var } else { tape.constant(t.clone()) })
                .collect(),
        )
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Reads the gradients of a bound copy of this store after `backward`.
    pub fn gradients(&self, tape: &Tape, bound: &Bound) -> Vec<Vec<f64>> {
        bound
            .0
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    }

    /// Replaces values in place, keeping names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), TensorError> {
        if other.names != self.names {
            return Err(TensorError::invalid("load_values", "parameter names differ"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(TensorError::shape("load_values", dst.shape(), src.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        ParamStore { names, tensors }
    }
}

/// Parameter handles valid on one tape.
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Affine map over the last axis: `x · W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(in_dim, out_dim, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => tape.add(y, p[b]),
            None => Ok(y),
        }
    }
}

/// Stack of affine layers with an activation between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub activate_output: bool,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        activate_output: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp {
            layers,
            activation,
            activate_output,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let width = *tape.shape(x).last().unwrap();
        if width != self.in_dim() {
            return Err(TensorError::shape("mlp", tape.shape(x), &[self.in_dim()]));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i < last || self.activate_output {
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }
}

/// Gated recurrent cell with input, forget, candidate and output gates
/// (gate blocks laid out in that order along the 4·hidden axis).
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        LstmCell {
            w_ih: store.add(format!("{name}.w_ih"), xavier_uniform(input, 4 * hidden, rng)),
            w_hh: store.add(format!("{name}.w_hh"), xavier_uniform(hidden, 4 * hidden, rng)),
            b_ih: store.add(format!("{name}.b_ih"), Tensor::zeros(&[4 * hidden])),
            b_hh: store.add(format!("{name}.b_hh"), Tensor::zeros(&[4 * hidden])),
            input,
            hidden,
        }
    }

    /// One step for a batch: `x: [B, input]`, `h, c: [B, hidden]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var, c: Var) -> Result<(Var, Var), TensorError> {
        let (sx, sh, sc) = (tape.shape(x).to_vec(), tape.shape(h).to_vec(), tape.shape(c).to_vec());
        if sx.len() != 2 || sx[1] != self.input || sh != [sx[0], self.hidden] || sc != sh {
            return Err(TensorError::invalid(
                "lstm_cell",
                format!("x {sx:?}, h {sh:?}, c {sc:?} for input {} hidden {}", self.input, self.hidden),
            ));
        }
        let hd = self.hidden;
        let gx = tape.matmul(x, p[self.w_ih])?;
        let gx = tape.add(gx, p[self.b_ih])?;
        let gh = tape.matmul(h, p[self.w_hh])?;
        let gh = tape.add(gh, p[self.b_hh])?;
        let gates = tape.add(gx, gh)?;
        let i = tape.narrow(gates, 0, hd)?;
        let i = tape.sigmoid(i)?;
        let f = tape.narrow(gates, hd, hd)?;
        let f = tape.sigmoid(f)?;
        let g = tape.narrow(gates, 2 * hd, hd)?;
        let g = tape.tanh(g)?;
        let o = tape.narrow(gates, 3 * hd, hd)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next)?;
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 3, true, &mut rng);
        *store.get_mut(lin.weight) = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let mlp = Mlp {
            layers: vec![lin],
            activation: Activation::Relu,
            activate_output: false,
        };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0., -7.]).unwrap());
        let y = mlp.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[2, 4, 1], Activation::Relu, false, &mut rng);
        store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -0.9]).unwrap());
        let y = mlp.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn two_layer_mlp_matches_hand_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[2, 2, 1], Activation::Relu, false, &mut rng);
        let w0 = store.get(mlp.layers[0].weight).data().to_vec();
        let w1 = store.get(mlp.layers[1].weight).data().to_vec();
        *store.get_mut(mlp.layers[0].bias.unwrap()) = Tensor::vector(vec![0.1, -0.2]).unwrap();
        *store.get_mut(mlp.layers[1].bias.unwrap()) = Tensor::vector(vec![0.05]).unwrap();
        let x = [0.7, -1.3];
        let h0 = (x[0] * w0[0] + x[1] * w0[2] + 0.1).max(0.0);
        let h1 = (x[0] * w0[1] + x[1] * w0[3] - 0.2).max(0.0);
        let expected = h0 * w1[0] + h1 * w1[1] + 0.05;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(Tensor::new(vec![1, 2], x.to_vec()).unwrap());
        let y = mlp.forward(&mut tape, &p, xv).unwrap();
        assert!((tape.item(y) - expected).abs() < 1e-12);
    }

    #[test]
    fn mlp_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 1], Activation::Relu, false, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(mlp.forward(&mut tape, &p, x).is_err());
    }

    fn lstm_fixture(seed: u64, input: usize, hidden: usize) -> (ParamStore, LstmCell) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", input, hidden, &mut rng);
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        (store, cell)
    }

    #[test]
    fn lstm_with_zero_params_and_state_stays_zero() {
        let (mut store, cell) = lstm_fixture(4, 3, 2);
        store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, -1.0, 0.5]).unwrap());
        let h = tape.constant(Tensor::zeros(&[1, 2]));
        let c = tape.constant(Tensor::zeros(&[1, 2]));
        let (h2, c2) = cell.forward(&mut tape, &p, x, h, c).unwrap();
        assert_eq!(tape.value(h2).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(c2).data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_and_closed_input_keep_cell_state() {
        let (mut store, cell) = lstm_fixture(5, 2, 2);
        for id in [cell.w_ih, cell.w_hh, cell.b_hh] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        // input gate -> sigmoid(-100) ~ 0, forget gate -> sigmoid(100) ~ 1
        let mut b = vec![0.0; 8];
        b[..2].fill(-100.0);
        b[2..4].fill(100.0);
        *store.get_mut(cell.b_ih) = Tensor::vector(b).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![0.3, 0.4]).unwrap());
        let h = tape.constant(Tensor::new(vec![1, 2], vec![0.1, -0.2]).unwrap());
        let c = tape.constant(Tensor::new(vec![1, 2], vec![0.7, -1.1]).unwrap());
        let (_, c2) = cell.forward(&mut tape, &p, x, h, c).unwrap();
        assert!(tape.value(c2).max_abs_diff(tape.value(c)) < 1e-40);
    }

    #[test]
    fn lstm_matches_scalar_reference() {
        let (input, hidden) = (3, 2);
        let (store, cell) = lstm_fixture(6, input, hidden);
        let x = [0.4, -0.8, 1.2];
        let h = [0.3, -0.1];
        let c = [-0.5, 0.9];
        let w_ih = store.get(cell.w_ih).data();
        let w_hh = store.get(cell.w_hh).data();
        let b_ih = store.get(cell.b_ih).data();
        let b_hh = store.get(cell.b_hh).data();
        let gate = |col: usize| {
            let mut s = b_ih[col] + b_hh[col];
            for (k, xk) in x.iter().enumerate() {
                s += xk * w_ih[k * 4 * hidden + col];
            }
            for (k, hk) in h.iter().enumerate() {
                s += hk * w_hh[k * 4 * hidden + col];
            }
            s
        };
        let mut h_ref = [0.0; 2];
        let mut c_ref = [0.0; 2];
        for j in 0..hidden {
            let i = sig(gate(j));
            let f = sig(gate(hidden + j));
            let g = gate(2 * hidden + j).tanh();
            let o = sig(gate(3 * hidden + j));
            c_ref[j] = f * c[j] + i * g;
            h_ref[j] = o * c_ref[j].tanh();
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(Tensor::new(vec![1, 3], x.to_vec()).unwrap());
        let hv = tape.constant(Tensor::new(vec![1, 2], h.to_vec()).unwrap());
        let cv = tape.constant(Tensor::new(vec![1, 2], c.to_vec()).unwrap());
        let (h2, c2) = cell.forward(&mut tape, &p, xv, hv, cv).unwrap();
        for j in 0..hidden {
            assert!((tape.value(h2).data()[j] - h_ref[j]).abs() < 1e-10);
            assert!((tape.value(c2).data()[j] - c_ref[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn lstm_rejects_mismatched_batch() {
        let (store, cell) = lstm_fixture(7, 2, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let h = tape.constant(Tensor::zeros(&[1, 2]));
        let c = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(cell.forward(&mut tape, &p, x, h, c).is_err());
    }
}
