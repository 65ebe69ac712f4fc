//! Graphs, graph pairs and pair datasets.

mod io;
mod split;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use split::{kfold_splits, random_split, scaffold_ood_split, SplitMode, SplitPlan};

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// One molecule or synthetic graph. Each undirected edge is stored once.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub id: String,
    features: Tensor,
    edges: Vec<(usize, usize)>,
    edge_features: Option<Tensor>,
    pub scaffold: Option<u64>,
}

impl Graph {
    pub fn new(
        id: impl Into<String>,
        features: Tensor,
        edges: Vec<(usize, usize)>,
        edge_features: Option<Tensor>,
        scaffold: Option<u64>,
    ) -> Result<Self> {
        let id = id.into();
        if features.rank() != 2 {
            return Err(Error::Data(format!("graph '{id}': node features must be N×F, got {:?}", features.shape())));
        }
        let n = features.shape()[0];
        let mut seen = HashSet::with_capacity(edges.len());
        for &(i, j) in &edges {
            if i >= n || j >= n {
                return Err(Error::Data(format!("graph '{id}': edge ({i}, {j}) outside 0..{n}")));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(Error::Data(format!("graph '{id}': edge ({i}, {j}) stored twice")));
            }
        }
        if let Some(ef) = &edge_features {
            if ef.rank() != 2 || ef.shape()[0] != edges.len() {
                return Err(Error::Data(format!(
                    "graph '{id}': edge features {:?} do not match {} edges",
                    ef.shape(),
                    edges.len()
                )));
            }
        }
        Ok(Graph {
            id,
            features,
            edges,
            edge_features,
            scaffold,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feature_width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn edge_feature_width(&self) -> usize {
        self.edge_features.as_ref().map_or(0, |e| e.shape()[1])
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_features(&self) -> Option<&Tensor> {
        self.edge_features.as_ref()
    }

    /// Dense symmetric adjacency, row-major N×N.
    pub fn adjacency(&self) -> Vec<f64> {
        let n = self.num_nodes();
        let mut a = vec![0.0; n * n];
        for &(i, j) in &self.edges {
            a[i * n + j] = 1.0;
            a[j * n + i] = 1.0;
        }
        a
    }

    /// Dense symmetric adjacency weighted by edge-feature channel `k`.
    pub fn channel_adjacency(&self, k: usize) -> Vec<f64> {
        let n = self.num_nodes();
        let mut a = vec![0.0; n * n];
        if let Some(ef) = &self.edge_features {
            for (e, &(i, j)) in self.edges.iter().enumerate() {
                let w = ef.row(e)[k];
                a[i * n + j] = w;
                a[j * n + i] = w;
            }
        }
        a
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_nodes()];
        for &(i, j) in &self.edges {
            d[i] += 1;
            if i != j {
                d[j] += 1;
            }
        }
        d
    }

    /// Same graph with nodes relabelled: new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(Error::Data("permutation length differs from node count".into()));
        }
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::Data("not a permutation".into()));
            }
            inverse[old] = new;
        }
        let f = self.feature_width();
        let data = perm.iter().flat_map(|&old| self.features.row(old).to_vec()).collect();
        let features = Tensor::new(vec![n, f], data)?;
        let edges = self.edges.iter().map(|&(i, j)| (inverse[i], inverse[j])).collect();
        Graph::new(self.id.clone(), features, edges, self.edge_features.clone(), self.scaffold)
    }
}

/// The unit of supervision: an ordered graph pair and its target.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub g1: Arc<Graph>,
    pub g2: Arc<Graph>,
    pub y: f64,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub task: Task,
    pub feature_width: usize,
    pub edge_feature_width: usize,
    pub pairs: Vec<PairSample>,
}

impl PairDataset {
    /// Validates widths and targets.
    pub fn new(task: Task, feature_width: usize, edge_feature_width: usize, pairs: Vec<PairSample>) -> Result<Self> {
        for (index, p) in pairs.iter().enumerate() {
            for g in [&p.g1, &p.g2] {
                if g.feature_width() != feature_width {
                    return Err(Error::Record {
                        index,
                        msg: format!(
                            "graph '{}' has feature width {}, dataset declares {feature_width}",
                            g.id,
                            g.feature_width()
                        ),
                    });
                }
                if g.edge_features().is_some() && g.edge_feature_width() != edge_feature_width {
                    return Err(Error::Record {
                        index,
                        msg: format!(
                            "graph '{}' has edge feature width {}, dataset declares {edge_feature_width}",
                            g.id,
                            g.edge_feature_width()
                        ),
                    });
                }
            }
            if !p.y.is_finite() {
                return Err(Error::Record {
                    index,
                    msg: "target is not finite".into(),
                });
            }
            if task == Task::Classification && p.y != 0.0 && p.y != 1.0 {
                return Err(Error::Record {
                    index,
                    msg: format!("classification target {} is not 0 or 1", p.y),
                });
            }
        }
        Ok(PairDataset {
            task,
            feature_width,
            edge_feature_width,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct graphs in first-appearance order.
    pub fn unique_graphs(&self) -> Vec<Arc<Graph>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for p in &self.pairs {
            for g in [&p.g1, &p.g2] {
                if seen.insert(g.id.as_str()) {
                    out.push(Arc::clone(g));
                }
            }
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> PairDataset {
        PairDataset {
            task: self.task,
            feature_width: self.feature_width,
            edge_feature_width: self.edge_feature_width,
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> Graph {
        let x = Tensor::new(vec![n, 2], (0..2 * n).map(|v| v as f64).collect()).unwrap();
        Graph::new("p", x, (0..n - 1).map(|i| (i, i + 1)).collect(), None, None).unwrap()
    }

    #[test]
    fn adjacency_is_symmetric() {
        let g = path(3);
        assert_eq!(g.adjacency(), vec![0., 1., 0., 1., 0., 1., 0., 1., 0.]);
        assert_eq!(g.degrees(), vec![1, 2, 1]);
    }

    #[test]
    fn rejects_out_of_range_and_duplicate_edges() {
        let x = Tensor::zeros(&[2, 1]);
        assert!(Graph::new("g", x.clone(), vec![(0, 2)], None, None).is_err());
        assert!(Graph::new("g", x, vec![(0, 1), (1, 0)], None, None).is_err());
    }

    #[test]
    fn permutation_relabels_nodes() {
        let g = path(3);
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.features().row(0), g.features().row(2));
        assert_eq!(p.degrees(), vec![1, 1, 2]);
    }

    #[test]
    fn classification_targets_must_be_binary() {
        let g = Arc::new(path(2));
        let pair = PairSample {
            g1: g.clone(),
            g2: g,
            y: 0.5,
            id: "a".into(),
        };
        let err = PairDataset::new(Task::Classification, 2, 0, vec![pair]).unwrap_err();
        assert!(matches!(err, Error::Record { index: 0, .. }));
    }

    #[test]
    fn inconsistent_feature_width_is_rejected() {
        let g = Arc::new(path(2));
        let pair = PairSample {
            g1: g.clone(),
            g2: g,
            y: 0.5,
            id: "a".into(),
        };
        assert!(PairDataset::new(Task::Regression, 3, 0, vec![pair]).is_err());
    }
}
