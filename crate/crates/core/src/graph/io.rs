//! The pair-dataset JSON document.
//!
//! ```text
//! {"feature_width": F, "edge_feature_width": F_e, "task": "regression"|"classification",
//!  "graphs": {id: {"n": N, "x": [[..]], "edges": [[i, j]..], "edge_x": [[..]]|null, "scaffold": int|null}},
//!  "pairs": [{"g1": id, "g2": id, "y": number, "id": string}]}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Graph, PairDataset, PairSample, Task};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Deserialize)]
struct RawFile {
    feature_width: usize,
    edge_feature_width: usize,
    task: Task,
    graphs: BTreeMap<String, Value>,
    pairs: Vec<Value>,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    n: usize,
    x: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    edge_x: Option<Vec<Vec<f64>>>,
    scaffold: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    g1: String,
    g2: String,
    y: f64,
    id: String,
}

#[derive(Serialize)]
struct FileOut<'a> {
    feature_width: usize,
    edge_feature_width: usize,
    task: Task,
    graphs: BTreeMap<&'a str, GraphRecord>,
    pairs: Vec<PairRecord>,
}

fn matrix(rows: &[Vec<f64>], width: usize, what: &str) -> std::result::Result<Tensor, String> {
    if rows.iter().any(|r| r.len() != width) {
        return Err(format!("{what} rows must all have width {width}"));
    }
    Tensor::new(vec![rows.len(), width], rows.concat()).map_err(|e| format!("{what}: {e}"))
}

fn parse_graph(id: &str, rec: GraphRecord, f: usize, fe: usize) -> std::result::Result<Graph, String> {
    if rec.n == 0 || rec.x.len() != rec.n {
        return Err(format!("n = {} but {} feature rows", rec.n, rec.x.len()));
    }
    let x = matrix(&rec.x, f, "x")?;
    let edges: Vec<(usize, usize)> = rec.edges.iter().map(|e| (e[0], e[1])).collect();
    let edge_x = match rec.edge_x {
        Some(rows) if !rows.is_empty() => {
            if rows.len() != edges.len() {
                return Err(format!("{} edge feature rows for {} edges", rows.len(), edges.len()));
            }
            Some(matrix(&rows, fe, "edge_x")?)
        }
        _ => None,
    };
    Graph::new(id, x, edges, edge_x, rec.scaffold).map_err(|e| e.to_string())
}

/// Parses a dataset document from any reader.
pub fn read_dataset(reader: impl Read) -> Result<PairDataset> {
    let raw: RawFile = serde_json::from_reader(reader)?;
    let mut graphs = HashMap::with_capacity(raw.graphs.len());
    for (index, (id, value)) in raw.graphs.into_iter().enumerate() {
        let rec: GraphRecord = serde_json::from_value(value).map_err(|e| Error::Record {
            index,
            msg: format!("graph '{id}': {e}"),
        })?;
        let g = parse_graph(&id, rec, raw.feature_width, raw.edge_feature_width).map_err(|msg| Error::Record {
            index,
            msg: format!("graph '{id}': {msg}"),
        })?;
        graphs.insert(id, Arc::new(g));
    }
    let mut pairs = Vec::with_capacity(raw.pairs.len());
    for (index, value) in raw.pairs.into_iter().enumerate() {
        let rec: PairRecord = serde_json::from_value(value).map_err(|e| Error::Record {
            index,
            msg: format!("pair: {e}"),
        })?;
        let lookup = |id: &str| {
            graphs.get(id).cloned().ok_or_else(|| Error::Record {
                index,
                msg: format!("pair '{}' references unknown graph '{id}'", rec.id),
            })
        };
        pairs.push(PairSample {
            g1: lookup(&rec.g1)?,
            g2: lookup(&rec.g2)?,
            y: rec.y,
            id: rec.id.clone(),
        });
    }
    PairDataset::new(raw.task, raw.feature_width, raw.edge_feature_width, pairs)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<PairDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.last_dim()).map(<[f64]>::to_vec).collect()
}

/// Serializes a dataset; graphs are written once, keyed by id.
pub fn write_dataset(dataset: &PairDataset, mut writer: impl Write) -> Result<()> {
    let mut graphs: BTreeMap<&str, GraphRecord> = BTreeMap::new();
    let mut owners: HashMap<&str, &Arc<Graph>> = HashMap::new();
    for p in &dataset.pairs {
        for g in [&p.g1, &p.g2] {
            if let Some(prev) = owners.get(g.id.as_str()) {
                if !Arc::ptr_eq(prev, g) && ***prev != **g {
                    return Err(Error::Data(format!("two different graphs share id '{}'", g.id)));
                }
                continue;
            }
            owners.insert(&g.id, g);
            graphs.insert(
                &g.id,
                GraphRecord {
                    n: g.num_nodes(),
                    x: rows(g.features()),
                    edges: g.edges().iter().map(|&(i, j)| [i, j]).collect(),
                    edge_x: g.edge_features().map(rows),
                    scaffold: g.scaffold,
                },
            );
        }
    }
    let out = FileOut {
        feature_width: dataset.feature_width,
        edge_feature_width: dataset.edge_feature_width,
        task: dataset.task,
        graphs,
        pairs: dataset
            .pairs
            .iter()
            .map(|p| PairRecord {
                g1: p.g1.id.clone(),
                g2: p.g2.id.clone(),
                y: p.y,
                id: p.id.clone(),
            })
            .collect(),
    };
    serde_json::to_writer(&mut writer, &out)?;
    Ok(())
}

pub fn save_dataset(dataset: &PairDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(dataset, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}
