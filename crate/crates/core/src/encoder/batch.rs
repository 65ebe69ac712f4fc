use crate::error::Result;
use crate::graph::Graph;
use crate::tensor::{Tape, Tensor, Var};

/// Bias added to attention scores of padding nodes; finite, but far enough
/// below any real score that its softmax weight is exactly zero.
pub const PAD_SCORE: f64 = -1e30;

/// Several graphs zero-padded to a common node count.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub counts: Vec<usize>,
    pub max_nodes: usize,
    /// `[B, N, F]`
    pub x: Tensor,
    /// `[B, N, N]`, symmetric 0/1.
    pub adj: Tensor,
    /// `[B, N, N]` per edge-feature channel.
    pub edge_adj: Vec<Tensor>,
    /// `[B, N, N]`, row-normalised `A + I` over real nodes.
    pub mean_adj: Tensor,
    /// `[B, N, 1]`, 1 for real nodes.
    pub mask: Tensor,
    /// `[B, 1, N]`, 0 for real nodes and [`PAD_SCORE`] for padding.
    pub score_bias: Tensor,
}

impl GraphBatch {
    pub fn new(graphs: &[&Graph], edge_channels: usize) -> Result<Self> {
        let b = graphs.len();
        assert!(b > 0, "empty graph batch");
        let f = graphs[0].feature_width();
        let n = graphs.iter().map(|g| g.num_nodes()).max().unwrap();
        let mut x = vec![0.0; b * n * f];
        let mut adj = vec![0.0; b * n * n];
        let mut mean_adj = vec![0.0; b * n * n];
        let mut edge_adj = vec![vec![0.0; b * n * n]; edge_channels];
        let mut mask = vec![0.0; b * n];
        let mut score_bias = vec![PAD_SCORE; b * n];
        for (gi, g) in graphs.iter().enumerate() {
            let gn = g.num_nodes();
            if g.feature_width() != f {
                return Err(crate::Error::Data(format!(
                    "graph '{}' has feature width {}, batch uses {f}",
                    g.id,
                    g.feature_width()
                )));
            }
            for i in 0..gn {
                x[(gi * n + i) * f..(gi * n + i + 1) * f].copy_from_slice(g.features().row(i));
                mask[gi * n + i] = 1.0;
                score_bias[gi * n + i] = 0.0;
            }
            let a = g.adjacency();
            for i in 0..gn {
                let deg: f64 = a[i * gn..(i + 1) * gn].iter().sum::<f64>() + 1.0;
                for j in 0..gn {
                    let v = a[i * gn + j];
                    adj[gi * n * n + i * n + j] = v;
                    let with_self = v + if i == j { 1.0 } else { 0.0 };
                    mean_adj[gi * n * n + i * n + j] = with_self / deg;
                }
            }
            for (k, channel) in edge_adj.iter_mut().enumerate() {
                let ak = g.channel_adjacency(k);
                for i in 0..gn {
                    for j in 0..gn {
                        channel[gi * n * n + i * n + j] = ak[i * gn + j];
                    }
                }
            }
        }
        Ok(GraphBatch {
            counts: graphs.iter().map(|g| g.num_nodes()).collect(),
            max_nodes: n,
            x: Tensor::from_parts(vec![b, n, f], x),
            adj: Tensor::from_parts(vec![b, n, n], adj),
            edge_adj: edge_adj
                .into_iter()
                .map(|a| Tensor::from_parts(vec![b, n, n], a))
                .collect(),
            mean_adj: Tensor::from_parts(vec![b, n, n], mean_adj),
            mask: Tensor::from_parts(vec![b, n, 1], mask),
            score_bias: Tensor::from_parts(vec![b, 1, n], score_bias),
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Puts the batch tensors on a tape as constants.
    pub fn bind(&self, tape: &mut Tape) -> BatchVars {
        BatchVars {
            x: tape.constant(self.x.clone()),
            adj: tape.constant(self.adj.clone()),
            edge_adj: self.edge_adj.iter().map(|a| tape.constant(a.clone())).collect(),
            mean_adj: tape.constant(self.mean_adj.clone()),
            mask: tape.constant(self.mask.clone()),
            score_bias: tape.constant(self.score_bias.clone()),
        }
    }

    /// Rows of a `[B, N, w]` value belonging to real nodes of graph `b`.
    pub fn real_rows<'a>(&self, t: &'a Tensor, b: usize) -> &'a [f64] {
        let w = t.last_dim();
        let n = self.max_nodes;
        &t.data()[b * n * w..(b * n + self.counts[b]) * w]
    }
}

/// Tape handles for a bound [`GraphBatch`].
#[derive(Debug, Clone)]
pub struct BatchVars {
    pub x: Var,
    pub adj: Var,
    pub edge_adj: Vec<Var>,
    pub mean_adj: Var,
    pub mask: Var,
    pub score_bias: Var,
}

impl BatchVars {
    /// Same graphs reordered along the batch axis.
    pub fn select(&self, tape: &mut Tape, indices: &[usize]) -> Result<BatchVars> {
        Ok(BatchVars {
            x: tape.index_select(self.x, indices)?,
            adj: tape.index_select(self.adj, indices)?,
            edge_adj: self
                .edge_adj
                .iter()
                .map(|&a| tape.index_select(a, indices))
                .collect::<std::result::Result<_, _>>()?,
            mean_adj: tape.index_select(self.mean_adj, indices)?,
            mask: tape.index_select(self.mask, indices)?,
            score_bias: tape.index_select(self.score_bias, indices)?,
        })
    }
}
