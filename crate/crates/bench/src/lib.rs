//! Fixtures shared by the benchmarks.

use cmrl_core::encoder::GraphBatch;
use cmrl_core::{make_dataset, PairDataset, PairSample, SyntheticConfig};

/// A synthetic dataset large enough to draw full batches from.
pub fn dataset() -> PairDataset {
    let cfg = SyntheticConfig {
        graphs_per_combo: 40,
        pos_pairs_per_base: 200,
        neg_pairs_per_base: 200,
        ..SyntheticConfig::default()
    };
    make_dataset(&cfg, 0).expect("valid synthetic config").dataset
}

pub fn pairs(data: &PairDataset, n: usize) -> Vec<&PairSample> {
    data.pairs.iter().take(n).collect()
}

/// First graphs of the first `n` pairs.
pub fn graph_batch(data: &PairDataset, n: usize) -> GraphBatch {
    let graphs: Vec<_> = data.pairs.iter().take(n).map(|p| p.g1.as_ref()).collect();
    GraphBatch::new(&graphs, data.edge_feature_width).expect("consistent widths")
}
