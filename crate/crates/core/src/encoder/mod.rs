//! Message-passing graph encoders and the Set2Set readout.

mod batch;
mod set2set;

pub use batch::{BatchVars, GraphBatch, PAD_SCORE};
pub use set2set::Set2Set;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::graph::Graph;
use crate::nn::{Activation, Bound, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    /// Messages transformed by a linear function of the edge features.
    #[default]
    EdgeConditioned,
    /// Sum aggregation followed by a two-layer MLP.
    SumMlp,
    /// Degree-normalised mean over the closed neighbourhood.
    MeanLinear,
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderVariant::EdgeConditioned => "edge-conditioned",
            EncoderVariant::SumMlp => "sum-mlp",
            EncoderVariant::MeanLinear => "mean-linear",
        })
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge-conditioned" | "mpnn" => Ok(EncoderVariant::EdgeConditioned),
            "sum-mlp" | "gin" => Ok(EncoderVariant::SumMlp),
            "mean-linear" | "gcn" => Ok(EncoderVariant::MeanLinear),
            other => Err(Error::Config(format!("unknown encoder variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
enum Layer {
    EdgeConditioned { root: Linear, channels: Vec<ParamId> },
    SumMlp(Mlp),
    MeanLinear(Linear),
}

/// Node-embedding network shared by both graphs of a pair.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub variant: EncoderVariant,
    pub hidden: usize,
    pub edge_channels: usize,
    input: Linear,
    layers: Vec<Layer>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        variant: EncoderVariant,
        in_dim: usize,
        edge_channels: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let input = Linear::new(store, "encoder.input", in_dim, hidden, true, rng);
        let layers = (0..num_layers)
            .map(|l| {
                let name = format!("encoder.layer{l}");
                match variant {
                    EncoderVariant::EdgeConditioned => Layer::EdgeConditioned {
                        root: Linear::new(store, &format!("{name}.root"), hidden, hidden, true, rng),
                        channels: (0..=edge_channels)
                            .map(|k| {
                                store.add(
                                    format!("{name}.edge{k}"),
                                    crate::nn::xavier_uniform(hidden, hidden, rng),
                                )
                            })
                            .collect(),
                    },
                    EncoderVariant::SumMlp => Layer::SumMlp(Mlp::new(
                        store,
                        &format!("{name}.mlp"),
                        &[hidden, hidden, hidden],
                        Activation::Relu,
                        true,
                        rng,
                    )),
                    EncoderVariant::MeanLinear => {
                        Layer::MeanLinear(Linear::new(store, &format!("{name}.lin"), hidden, hidden, true, rng))
                    }
                }
            })
            .collect();
        Encoder {
            variant,
            hidden,
            edge_channels,
            input,
            layers,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Node embeddings `[B, N, hidden]`; padding rows are zero.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, g: &BatchVars) -> Result<Var, TensorError> {
        if g.edge_adj.len() != self.edge_channels {
            return Err(TensorError::invalid(
                "encoder",
                format!("batch has {} edge channels, encoder expects {}", g.edge_adj.len(), self.edge_channels),
            ));
        }
        let mut h = self.input.forward(tape, p, g.x)?;
        for layer in &self.layers {
            h = match layer {
                Layer::EdgeConditioned { root, channels } => {
                    let mut out = root.forward(tape, p, h)?;
                    let plain = tape.bmm(g.adj, h)?;
                    let m = tape.matmul(plain, p[channels[0]])?;
                    out = tape.add(out, m)?;
                    for (k, &a) in g.edge_adj.iter().enumerate() {
                        let agg = tape.bmm(a, h)?;
                        let m = tape.matmul(agg, p[channels[k + 1]])?;
                        out = tape.add(out, m)?;
                    }
                    tape.relu(out)?
                }
                Layer::SumMlp(mlp) => {
                    let agg = tape.bmm(g.adj, h)?;
                    let z = tape.add(h, agg)?;
                    mlp.forward(tape, p, z)?
                }
                Layer::MeanLinear(lin) => {
                    let agg = tape.bmm(g.mean_adj, h)?;
                    let z = lin.forward(tape, p, agg)?;
                    tape.relu(z)?
                }
            };
        }
        tape.mul(h, g.mask)
    }

    /// Embeds one graph outside of any training loop.
    pub fn encode(&self, store: &ParamStore, graph: &Graph) -> Result<Tensor> {
        let batch = GraphBatch::new(&[graph], self.edge_channels)?;
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let vars = batch.bind(&mut tape);
        let e = self.forward(&mut tape, &p, &vars)?;
        let n = graph.num_nodes();
        Ok(Tensor::new(vec![n, self.hidden], tape.value(e).data().to_vec())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triangle_plus_isolated() -> Graph {
        let x = Tensor::new(vec![4, 2], vec![1., 0., 0., 1., 1., 1., 0.5, -0.5]).unwrap();
        Graph::new("t", x, vec![(0, 1), (1, 2), (0, 2)], None, None).unwrap()
    }

    #[test]
    fn every_variant_gives_one_row_per_node() {
        for variant in [EncoderVariant::EdgeConditioned, EncoderVariant::SumMlp, EncoderVariant::MeanLinear] {
            let mut store = ParamStore::new();
            let enc = Encoder::new(&mut store, variant, 2, 0, 5, 2, &mut ChaCha8Rng::seed_from_u64(1));
            let e = enc.encode(&store, &triangle_plus_isolated()).unwrap();
            assert_eq!(e.shape(), &[4, 5]);
            assert!(e.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn padding_rows_are_zero_and_do_not_leak() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, EncoderVariant::EdgeConditioned, 2, 0, 4, 3, &mut ChaCha8Rng::seed_from_u64(2));
        let small = Graph::new("s", Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap(), vec![(0, 1)], None, None).unwrap();
        let big = triangle_plus_isolated();
        let alone = enc.encode(&store, &small).unwrap();
        let batch = GraphBatch::new(&[&small, &big], 0).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let vars = batch.bind(&mut tape);
        let e = enc.forward(&mut tape, &p, &vars).unwrap();
        let v = tape.value(e);
        assert_eq!(batch.real_rows(v, 0), alone.data());
        assert!(v.data()[2 * 4..4 * 4].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn isolated_node_sees_only_itself() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, EncoderVariant::SumMlp, 2, 0, 3, 2, &mut ChaCha8Rng::seed_from_u64(3));
        let g = triangle_plus_isolated();
        let single = Graph::new("i", Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap(), vec![], None, None).unwrap();
        let e = enc.encode(&store, &g).unwrap();
        let s = enc.encode(&store, &single).unwrap();
        assert_eq!(e.row(3), s.row(0));
    }

    #[test]
    fn edge_channel_mismatch_is_reported() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, EncoderVariant::EdgeConditioned, 2, 1, 3, 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(enc.encode(&store, &triangle_plus_isolated()).is_ok());
        let batch = GraphBatch::new(&[&triangle_plus_isolated()], 0).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let vars = batch.bind(&mut tape);
        assert!(enc.forward(&mut tape, &p, &vars).is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in [EncoderVariant::EdgeConditioned, EncoderVariant::SumMlp, EncoderVariant::MeanLinear] {
            assert_eq!(v.to_string().parse::<EncoderVariant>().unwrap(), v);
        }
        assert!("transformer".parse::<EncoderVariant>().is_err());
    }
}
