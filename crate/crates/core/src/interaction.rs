//! Cross-graph interaction map and the fused atom matrices.

use std::fmt::Write as _;

use crate::error::TensorError;
use crate::tensor::{Tape, Tensor, Var};

/// Rows with an L2 norm below this have zero similarity to everything.
pub const NORM_EPS: f64 = 1e-8;

/// Cosine similarities `[B, N1, N2]` between atoms of the two graphs.
pub fn interaction_map(tape: &mut Tape, e1: Var, e2: Var) -> Result<Var, TensorError> {
    let (s1, s2) = (tape.shape(e1).to_vec(), tape.shape(e2).to_vec());
    if s1.len() != 3 || s2.len() != 3 || s1[0] != s2[0] || s1[2] != s2[2] {
        return Err(TensorError::shape("interaction_map", &s1, &s2));
    }
    let n1 = tape.normalize_rows(e1, NORM_EPS)?;
    let n2 = tape.normalize_rows(e2, NORM_EPS)?;
    let n2t = tape.transpose(n2)?;
    tape.bmm(n1, n2t)
}

/// Fused atom matrices of a pair.
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    /// `E1 ‖ I·E2`
    pub h1: Var,
    /// `E2 ‖ Iᵀ·E1`
    pub h2: Var,
}

pub fn fuse(tape: &mut Tape, e1: Var, e2: Var, i: Var) -> Result<Fused, TensorError> {
    let (s1, s2, si) = (tape.shape(e1).to_vec(), tape.shape(e2).to_vec(), tape.shape(i).to_vec());
    if si.len() != 3 || s1.len() != 3 || s2.len() != 3 || si != [s1[0], s1[1], s2[1]] || s1[2] != s2[2] {
        return Err(TensorError::shape("fuse", &si, &[s1[0], s1[1], s2[1]]));
    }
    let t1 = tape.bmm(i, e2)?;
    let it = tape.transpose(i)?;
    let t2 = tape.bmm(it, e1)?;
    Ok(Fused {
        h1: tape.concat(e1, t1)?,
        h2: tape.concat(e2, t2)?,
    })
}

/// Plain-text dump of one interaction map: a header line `rows cols`, then
/// one whitespace-separated row per line.
pub fn format_matrix(rows: usize, cols: usize, values: &[f64]) -> String {
    let mut out = format!("{rows} {cols}\n");
    for r in values.chunks(cols).take(rows) {
        let line: Vec<String> = r.iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// The `N1 × N2` block of a padded `[B, N1max, N2max]` map for pair `b`.
pub fn pair_block(map: &Tensor, b: usize, n1: usize, n2: usize) -> Vec<f64> {
    let (m1, m2) = (map.shape()[1], map.shape()[2]);
    let base = b * m1 * m2;
    (0..n1)
        .flat_map(|i| map.data()[base + i * m2..base + i * m2 + n2].iter().copied())
        .collect()
}
