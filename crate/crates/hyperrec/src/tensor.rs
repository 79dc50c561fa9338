//! Dense row-major f64 tensors and the flat binary checkpoint format.
//!
//! Everything in this crate runs on 64-bit floats at desk scale, so the
//! tensor type stays deliberately simple: a shape vector plus a flat
//! `Vec<f64>`. Shapes are checked eagerly and mismatches surface as
//! [`TensorError::ShapeMismatch`] naming both operand shapes.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Magic header for the on-disk tensor format.
pub const TENSOR_MAGIC: &[u8; 8] = b"HRTNSR01";

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("shape mismatch: {left:?} vs {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("bad tensor file: {0}")]
    BadFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense tensor: `shape` extents, row-major `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length must equal product of extents"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// Row-major matrix constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            shape: vec![1, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() requires a rank-2 tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() requires a rank-2 tensor");
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() requires a single-element tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn checked_binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.checked_binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.checked_binary(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.checked_binary(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.cols() != other.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::matrix(m, n, out))
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Serialize as magic, rank (u64 LE), extents (u64 LE each), f64 LE payload.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), TensorError> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor, TensorError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(TensorError::BadFormat(format!(
                "bad magic {magic:?}, expected {TENSOR_MAGIC:?}"
            )));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let rank = u64::from_le_bytes(buf8) as usize;
        if rank > 8 {
            return Err(TensorError::BadFormat(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut buf8)?;
            shape.push(u64::from_le_bytes(buf8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf8)?;
            data.push(f64::from_le_bytes(buf8));
        }
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_from(&mut f)
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

/// Row-compressed sparse matrix used for the bipartite propagation operator.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Per-row list of (column, weight).
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        SparseMatrix {
            rows,
            cols,
            entries: vec![Vec::new(); rows],
        }
    }

    pub fn push(&mut self, row: usize, col: usize, w: f64) {
        self.entries[row].push((col, w));
    }

    /// out = A x, with x of shape cols x d.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        if x.rows() != self.cols {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                left: vec![self.rows, self.cols],
                right: x.shape().to_vec(),
            });
        }
        let d = x.cols();
        let mut out = Tensor::zeros(vec![self.rows, d]);
        for (r, row) in self.entries.iter().enumerate() {
            for &(c, w) in row {
                for j in 0..d {
                    out.data[r * d + j] += w * x.data[c * d + j];
                }
            }
        }
        Ok(out)
    }

    /// out = A^T x, with x of shape rows x d.
    pub fn apply_transpose(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        if x.rows() != self.rows {
            return Err(TensorError::ShapeMismatch {
                op: "spmm_t",
                left: vec![self.cols, self.rows],
                right: x.shape().to_vec(),
            });
        }
        let d = x.cols();
        let mut out = Tensor::zeros(vec![self.cols, d]);
        for (r, row) in self.entries.iter().enumerate() {
            for &(c, w) in row {
                for j in 0..d {
                    out.data[c * d + j] += w * x.data[r * d + j];
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(vec![self.rows, self.cols]);
        for (r, row) in self.entries.iter().enumerate() {
            for &(c, w) in row {
                t.data[r * self.cols + c] += w;
            }
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn add_zero() {
        let a = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]);
        let z = Tensor::zeros(vec![2, 2]);
        assert_eq!(a.add(&z).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        // Naive triple-loop oracle on a 2x3 * 3x2 product.
        let a = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.25, -0.75]);
        let b = Tensor::matrix(3, 2, vec![1.5, 2.0, -0.5, 0.1, 4.0, -3.0]);
        let c = a.matmul(&b).unwrap();
        let mut oracle = Tensor::zeros(vec![2, 2]);
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..3 {
                    s += a.at(i, p) * b.at(p, j);
                }
                oracle.set(i, j, s);
            }
        }
        assert!(c.max_abs_diff(&oracle) < 1e-15);
    }

    #[test]
    fn matmul_random_8x8_against_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::matrix(8, 8, (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = Tensor::matrix(8, 8, (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let c = a.matmul(&b).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for p in 0..8 {
                    s += a.at(i, p) * b.at(p, j);
                }
                let rel = (c.at(i, j) - s).abs() / s.abs().max(1.0);
                assert!(rel < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 4]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 4]"));
    }

    #[test]
    fn binary_roundtrip_is_bit_exact() {
        let t = Tensor::matrix(3, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(t.shape(), back.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOTMAGIC\x00\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(Tensor::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn sparse_apply_matches_dense() {
        let mut a = SparseMatrix::new(3, 2);
        a.push(0, 0, 0.5);
        a.push(0, 1, -1.0);
        a.push(2, 1, 2.0);
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let dense = a.to_dense().matmul(&x).unwrap();
        assert!(a.apply(&x).unwrap().max_abs_diff(&dense) < 1e-15);
        let y = Tensor::matrix(3, 2, vec![1.0, 0.0, -1.0, 2.0, 0.5, 0.5]);
        let dense_t = a.to_dense().transpose().matmul(&y).unwrap();
        assert!(a.apply_transpose(&y).unwrap().max_abs_diff(&dense_t) < 1e-15);
    }
}
