//! Synthetic motif graphs and biased pair datasets.
//!
//! Every graph is a shortcut base (balanced binary tree or preferential
//! attachment graph) with one causal motif bridged onto it by a single edge.
//! Pairs always share the base type; positives share the motif. The bias
//! level `b` is the fraction of positives built on the preferential
//! attachment base, while `1 − b` of the negatives are.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, PairDataset, PairSample, Task};
use crate::rng;
use crate::tensor::Tensor;

/// Degrees above this share the last one-hot slot.
pub const MAX_DEGREE: usize = 10;
pub const FEATURE_WIDTH: usize = MAX_DEGREE + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motif {
    House,
    Cycle,
    Grid,
    Diamond,
}

impl Motif {
    pub const ALL: [Motif; 4] = [Motif::House, Motif::Cycle, Motif::Grid, Motif::Diamond];

    pub fn num_nodes(self) -> usize {
        match self {
            Motif::House => 5,
            Motif::Cycle => 6,
            Motif::Grid => 9,
            Motif::Diamond => 6,
        }
    }

    pub fn edges(self) -> Vec<(usize, usize)> {
        match self {
            // square 0-1-2-3 with the roof apex 4 over the 0-1 side
            Motif::House => vec![(0, 1), (1, 2), (2, 3), (3, 0), (4, 0), (4, 1)],
            Motif::Cycle => (0..6).map(|i| (i, (i + 1) % 6)).collect(),
            Motif::Grid => {
                let mut e = Vec::new();
                for r in 0..3 {
                    for c in 0..3 {
                        let v = 3 * r + c;
                        if c < 2 {
                            e.push((v, v + 1));
                        }
                        if r < 2 {
                            e.push((v, v + 3));
                        }
                    }
                }
                e
            }
            // square 0-1-2-3 with apexes 4 and 5 each joined to all four corners
            Motif::Diamond => {
                let mut e = vec![(0, 1), (1, 2), (2, 3), (3, 0)];
                for apex in [4, 5] {
                    e.extend((0..4).map(|k| (apex, k)));
                }
                e
            }
        }
    }
}

impl fmt::Display for Motif {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Motif::House => "house",
            Motif::Cycle => "cycle",
            Motif::Grid => "grid",
            Motif::Diamond => "diamond",
        })
    }
}

impl FromStr for Motif {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Motif::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Data(format!("unknown motif '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Base {
    Tree,
    Ba,
}

impl Base {
    pub const ALL: [Base; 2] = [Base::Tree, Base::Ba];
}

impl fmt::Display for Base {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Base::Tree => "tree",
            Base::Ba => "ba",
        })
    }
}

impl FromStr for Base {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tree" => Ok(Base::Tree),
            "ba" => Ok(Base::Ba),
            other => Err(Error::Data(format!("unknown base graph '{other}'"))),
        }
    }
}

/// Balanced binary tree of depth 3: 15 nodes, 14 edges.
pub fn tree_edges() -> (usize, Vec<(usize, usize)>) {
    let n = 15;
    (n, (1..n).map(|v| ((v - 1) / 2, v)).collect())
}

pub const BA_NODES: usize = 15;
pub const BA_EDGES_PER_NODE: usize = 2;

/// Preferential attachment graph grown from a star on `m + 1` nodes; each new
/// node links to `m` distinct existing nodes picked proportionally to degree.
pub fn preferential_attachment(n: usize, m: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (1..=m).map(|v| (0, v)).collect();
    let mut repeated: Vec<usize> = Vec::new();
    for &(a, b) in &edges {
        repeated.push(a);
        repeated.push(b);
    }
    for source in m + 1..n {
        let mut targets = Vec::with_capacity(m);
        while targets.len() < m {
            let t = repeated[rng.random_range(0..repeated.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for &t in &targets {
            edges.push((t, source));
            repeated.push(t);
            repeated.push(source);
        }
    }
    edges
}

/// One-hot degree features, degrees capped at [`MAX_DEGREE`].
pub fn degree_features(n: usize, edges: &[(usize, usize)]) -> Tensor {
    let mut deg = vec![0usize; n];
    for &(a, b) in edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    let mut x = vec![0.0; n * FEATURE_WIDTH];
    for (i, d) in deg.into_iter().enumerate() {
        x[i * FEATURE_WIDTH + d.min(MAX_DEGREE)] = 1.0;
    }
    Tensor::new(vec![n, FEATURE_WIDTH], x).expect("valid feature matrix")
}

pub fn graph_id(motif: Motif, base: Base, index: usize) -> String {
    format!("{motif}-{base}-{index}")
}

/// Reads the motif and base back out of a generated graph id.
pub fn parse_graph_id(id: &str) -> Result<(Motif, Base)> {
    let mut parts = id.split('-');
    match (parts.next(), parts.next()) {
        (Some(m), Some(b)) => Ok((m.parse()?, b.parse()?)),
        _ => Err(Error::Data(format!("'{id}' is not a synthetic graph id"))),
    }
}

/// Base graph with `motif` attached by one edge between a uniformly chosen
/// motif node and a uniformly chosen base node. Base nodes come first.
pub fn make_graph(motif: Motif, base: Base, index: usize, rng: &mut impl Rng) -> Graph {
    let (nb, mut edges) = match base {
        Base::Tree => tree_edges(),
        Base::Ba => (BA_NODES, preferential_attachment(BA_NODES, BA_EDGES_PER_NODE, rng)),
    };
    edges.extend(motif.edges().into_iter().map(|(a, b)| (a + nb, b + nb)));
    let anchor = rng.random_range(0..nb);
    let inner = rng.random_range(0..motif.num_nodes());
    edges.push((anchor, nb + inner));
    let n = nb + motif.num_nodes();
    Graph::new(graph_id(motif, base, index), degree_features(n, &edges), edges, None, None)
        .expect("generated graphs are valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub bias: f64,
    pub graphs_per_combo: usize,
    pub pos_pairs_per_base: usize,
    pub neg_pairs_per_base: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            bias: 0.5,
            graphs_per_combo: 2000,
            pos_pairs_per_base: 10000,
            neg_pairs_per_base: 10000,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bias > 0.0 && self.bias <= 1.0) {
            return Err(Error::Config(format!("bias {} outside (0, 1]", self.bias)));
        }
        if self.graphs_per_combo == 0 {
            return Err(Error::Config("graphs_per_combo must be positive".into()));
        }
        Ok(())
    }

    /// Positive pairs on the preferential attachment base.
    pub fn ba_positives(&self) -> usize {
        (self.bias * (2 * self.pos_pairs_per_base) as f64).round() as usize
    }

    /// Negative pairs on the preferential attachment base.
    pub fn ba_negatives(&self) -> usize {
        ((1.0 - self.bias) * (2 * self.neg_pairs_per_base) as f64).round() as usize
    }
}

/// A generated benchmark: every graph (used by a pair or not) and the pairs.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub graphs: Vec<Arc<Graph>>,
    pub dataset: PairDataset,
}

/// Splits `total` as evenly as possible into `parts` counts.
fn spread(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// `count` ordered index pairs from `pool_a × pool_b` (excluding equal
/// indices when `same` is set), distinct while the pool allows it.
fn sample_pairs(
    a: usize,
    b: usize,
    same: bool,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    let pool = if same { a * a.saturating_sub(1) } else { a * b };
    if count > 0 && pool == 0 {
        return Err(Error::Data(format!("cannot draw {count} pairs from an empty pool")));
    }
    let distinct = count <= pool;
    let mut seen = HashSet::with_capacity(if distinct { count } else { 0 });
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = rng.random_range(0..a);
        let j = rng.random_range(0..b);
        if same && i == j {
            continue;
        }
        if distinct && !seen.insert((i, j)) {
            continue;
        }
        out.push((i, j));
    }
    Ok(out)
}

/// Generates graphs and biased pairs; deterministic in `seed`.
pub fn make_dataset(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let n = cfg.graphs_per_combo;
    let mut by_combo: Vec<Vec<Arc<Graph>>> = Vec::with_capacity(8);
    for (bi, &base) in Base::ALL.iter().enumerate() {
        for (mi, &motif) in Motif::ALL.iter().enumerate() {
            by_combo.push(
                (0..n)
                    .map(|k| {
                        let mut r = rng::stream(seed, &[0x67, bi as u64, mi as u64, k as u64]);
                        Arc::new(make_graph(motif, base, k, &mut r))
                    })
                    .collect(),
            );
        }
    }
    let combo = |base: usize, motif: usize| &by_combo[base * 4 + motif];
    let mut r = rng::stream(seed, &[0x70]);
    let mut pairs = Vec::with_capacity(2 * (cfg.pos_pairs_per_base + cfg.neg_pairs_per_base));
    let total_pos = 2 * cfg.pos_pairs_per_base;
    let total_neg = 2 * cfg.neg_pairs_per_base;
    for (bi, &base) in Base::ALL.iter().enumerate() {
        let (pos, neg) = match base {
            Base::Ba => (cfg.ba_positives(), cfg.ba_negatives()),
            Base::Tree => (total_pos - cfg.ba_positives(), total_neg - cfg.ba_negatives()),
        };
        for (mi, count) in spread(pos, 4).into_iter().enumerate() {
            let gs = combo(bi, mi);
            for (i, j) in sample_pairs(n, n, true, count, &mut r)? {
                pairs.push((gs[i].clone(), gs[j].clone(), 1.0));
            }
        }
        let ordered: Vec<(usize, usize)> = (0..4).flat_map(|a| (0..4).filter(move |&b| b != a).map(move |b| (a, b))).collect();
        for ((ma, mb), count) in ordered.into_iter().zip(spread(neg, 12)) {
            let (ga, gb) = (combo(bi, ma), combo(bi, mb));
            for (i, j) in sample_pairs(n, n, false, count, &mut r)? {
                pairs.push((ga[i].clone(), gb[j].clone(), 0.0));
            }
        }
    }
    pairs.shuffle(&mut r);
    let pairs = pairs
        .into_iter()
        .enumerate()
        .map(|(k, (g1, g2, y))| PairSample {
            g1,
            g2,
            y,
            id: format!("p{k}"),
        })
        .collect();
    Ok(SyntheticData {
        graphs: by_combo.into_iter().flatten().collect(),
        dataset: PairDataset::new(Task::Classification, FEATURE_WIDTH, 0, pairs)?,
    })
}

/// Fraction of positive pairs whose graphs are built on the preferential
/// attachment base.
pub fn bias_of(dataset: &PairDataset) -> Result<f64> {
    let mut positives = 0usize;
    let mut ba = 0usize;
    for p in dataset.pairs.iter().filter(|p| p.y == 1.0) {
        positives += 1;
        let (_, b1) = parse_graph_id(&p.g1.id)?;
        let (_, b2) = parse_graph_id(&p.g2.id)?;
        if b1 == Base::Ba && b2 == Base::Ba {
            ba += 1;
        }
    }
    if positives == 0 {
        return Err(Error::Data("dataset has no positive pairs".into()));
    }
    Ok(ba as f64 / positives as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn motif_edge_counts() {
        let counts: Vec<usize> = Motif::ALL.iter().map(|m| m.edges().len()).collect();
        assert_eq!(counts, vec![6, 6, 12, 12]);
    }

    #[test]
    fn cycle_nodes_have_degree_two() {
        let mut deg = [0; 6];
        for (a, b) in Motif::Cycle.edges() {
            deg[a] += 1;
            deg[b] += 1;
        }
        assert_eq!(deg, [2; 6]);
    }

    #[test]
    fn house_on_tree_sizes() {
        let g = make_graph(Motif::House, Base::Tree, 0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(g.num_nodes(), 20);
        assert_eq!(g.edges().len(), 21);
    }

    #[test]
    fn preferential_attachment_edge_count() {
        let e = preferential_attachment(15, 2, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(e.len(), 26);
        let g = make_graph(Motif::Grid, Base::Ba, 0, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(g.num_nodes(), 24);
        assert_eq!(g.edges().len(), 26 + 12 + 1);
    }

    #[test]
    fn same_seed_same_graph() {
        let a = make_graph(Motif::Diamond, Base::Ba, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = make_graph(Motif::Diamond, Base::Ba, 4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn features_are_one_hot_degrees() {
        let g = make_graph(Motif::Cycle, Base::Tree, 0, &mut ChaCha8Rng::seed_from_u64(1));
        let deg = g.degrees();
        for (i, d) in deg.into_iter().enumerate() {
            let row = g.features().row(i);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row[d.min(MAX_DEGREE)], 1.0);
        }
    }

    #[test]
    fn ids_round_trip() {
        assert_eq!(parse_graph_id(&graph_id(Motif::Grid, Base::Ba, 12)).unwrap(), (Motif::Grid, Base::Ba));
        assert!(parse_graph_id("benzene").is_err());
    }

    #[test]
    fn small_dataset_structure() {
        let cfg = SyntheticConfig {
            bias: 0.3,
            graphs_per_combo: 10,
            pos_pairs_per_base: 50,
            neg_pairs_per_base: 50,
        };
        let data = make_dataset(&cfg, 1).unwrap();
        assert_eq!(data.graphs.len(), 80);
        assert_eq!(data.dataset.len(), 200);
        assert!((bias_of(&data.dataset).unwrap() - 0.3).abs() < 1e-12);
        for p in &data.dataset.pairs {
            let (m1, b1) = parse_graph_id(&p.g1.id).unwrap();
            let (m2, b2) = parse_graph_id(&p.g2.id).unwrap();
            assert_eq!(b1, b2);
            assert_eq!(p.y == 1.0, m1 == m2);
            assert!(p.g1.id != p.g2.id);
        }
    }

    #[test]
    fn tiny_pools_fall_back_to_replacement() {
        let cfg = SyntheticConfig {
            bias: 0.5,
            graphs_per_combo: 2,
            pos_pairs_per_base: 20,
            neg_pairs_per_base: 20,
        };
        assert_eq!(make_dataset(&cfg, 0).unwrap().dataset.len(), 80);
    }

    #[test]
    fn single_graph_per_combo_cannot_form_positives() {
        let cfg = SyntheticConfig {
            graphs_per_combo: 1,
            pos_pairs_per_base: 4,
            neg_pairs_per_base: 4,
            ..SyntheticConfig::default()
        };
        assert!(make_dataset(&cfg, 0).is_err());
    }

    #[test]
    fn bias_outside_range_is_rejected() {
        let cfg = SyntheticConfig { bias: 0.0, ..SyntheticConfig::default() };
        assert!(make_dataset(&cfg, 0).is_err());
    }
}
