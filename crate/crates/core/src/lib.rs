//! Pairwise graph property prediction with a learned split of each first
//! graph into a causal substructure and a shortcut substructure.

pub mod checkpoint;
pub mod diagnostics;
pub mod disentangle;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod interaction;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
pub use graph::{Graph, PairDataset, PairSample, SplitMode, SplitPlan, Task};
pub use tensor::{Tape, Tensor, Var};
pub use model::{CmrlModel, ModelConfig, PredictHead};
pub use synthetic::{bias_of, make_dataset, SyntheticConfig};
pub use train::{train, RunReport, TrainConfig};
