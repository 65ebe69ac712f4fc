//! Raw numeric kernels shared by the forward and backward passes.

use crate::error::TensorError;

/// Row-major strided matrix view handed to the gemm kernel.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `out = beta * out + a · b` with `out` a dense row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(out.len(), a.rows * b.cols);
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches:
    // each view covers a dense rows×cols block of its backing slice, and `out`
    // is exactly m×n with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// How an operand of a broadcasting op maps onto the output.
pub(crate) enum Bcast {
    Same,
    /// Operand equals a trailing block repeated over the leading axes.
    Cycle(usize),
    Map(Vec<usize>),
}

impl Bcast {
    pub fn new(out: &[usize], input: &[usize]) -> Bcast {
        let n_out: usize = out.iter().product();
        let n_in: usize = input.iter().product();
        if out == input {
            return Bcast::Same;
        }
        // Strip leading ones from the operand and test for a suffix match.
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Bcast::Cycle(n_in.max(1));
        }
        let rank = out.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            let j = i as isize - (rank - input.len()) as isize;
            let d = if j >= 0 { input[j as usize] } else { 1 };
            strides[i] = if d == 1 { 0 } else { acc };
            acc *= d;
        }
        let mut map = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; rank];
        let mut pos = 0usize;
        for _ in 0..n_out {
            map.push(pos);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                pos += strides[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                pos -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Bcast::Map(map)
    }

    /// Operand indices for output positions `0..n`, in order.
    pub fn indices(&self, n: usize) -> BcastIter<'_> {
        BcastIter { map: self, k: 0, pos: 0, n }
    }
}

pub(crate) struct BcastIter<'a> {
    map: &'a Bcast,
    k: usize,
    pos: usize,
    n: usize,
}

impl Iterator for BcastIter<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.k == self.n {
            return None;
        }
        let i = match self.map {
            Bcast::Same => self.k,
            Bcast::Cycle(len) => {
                let i = self.pos;
                self.pos += 1;
                if self.pos == *len {
                    self.pos = 0;
                }
                i
            }
            Bcast::Map(m) => m[self.k],
        };
        self.k += 1;
        Some(i)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.n - self.k, Some(self.n - self.k))
    }
}

impl ExactSizeIterator for BcastIter<'_> {}

/// Splits a shape around `axis` into (outer, axis_len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Transposes the last two axes of a row-major buffer.
pub(crate) fn transpose_last2(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batch = data.len() / (rows * cols);
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let src = &data[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
