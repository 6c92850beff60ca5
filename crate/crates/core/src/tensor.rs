//! Dense row-major tensors, a handful of vector primitives, and the seeded
//! random stream shared by every other module.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense real tensor with shape metadata, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at index {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Row `i` of a matrix. Panics if `self` is not rank 2 or `i` is out of range.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(*self.shape.last().unwrap_or(&1))
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// `self · otherᵀ` for two matrices with the same column count.
    pub fn matmul_transposed(&self, other: &Tensor) -> Result<Self> {
        let (r1, c1) = self.dims2()?;
        let (r2, c2) = other.dims2()?;
        if c1 != c2 {
            return Err(Error::Dimension(format!("inner extents {c1} vs {c2}")));
        }
        let mut out = Vec::with_capacity(r1 * r2);
        for i in 0..r1 {
            for j in 0..r2 {
                out.push(dot_unchecked(self.row(i), other.row(j)));
            }
        }
        Ok(Self {
            shape: vec![r1, r2],
            data: out,
        })
    }

    /// Largest absolute entry; 0 for an empty tensor.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inner product of two equal-length vectors.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "dot of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_unchecked(a, b))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A residual that keeps at least this fraction of its norm through a
/// projection pass is accepted as numerically orthogonal.
const REORTH_KEEP: f64 = 0.7;
const MAX_EXTRA_PASSES: usize = 3;
const RANK_TOL: f64 = 1e-10;

/// Orthonormalizes the rows of `m` with modified Gram–Schmidt.
///
/// Every row gets one re-orthogonalization pass; up to three more are run
/// while a pass still removes a large share of the residual. A row whose
/// residual collapses below `1e-10` of its original norm is reported as
/// [`Error::Degenerate`].
pub fn gram_schmidt_rows(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.dims2()?;
    if rows > cols {
        return Err(Error::Dimension(format!(
            "cannot orthonormalize {rows} rows in {cols} dimensions"
        )));
    }
    let mut q: Vec<f64> = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let mut v = m.row(i).to_vec();
        let original = l2_norm(&v);
        if original == 0.0 {
            return Err(Error::Degenerate(format!("row {i} is zero")));
        }
        let mut passes = 0;
        loop {
            let before = l2_norm(&v);
            for j in 0..i {
                let qj = &q[j * cols..(j + 1) * cols];
                let proj = dot_unchecked(qj, &v);
                v.iter_mut().zip(qj).for_each(|(x, y)| *x -= proj * y);
            }
            passes += 1;
            let after = l2_norm(&v);
            if passes >= 2 && (after >= REORTH_KEEP * before || passes >= 2 + MAX_EXTRA_PASSES) {
                break;
            }
        }
        let norm = l2_norm(&v);
        if norm <= RANK_TOL * original {
            return Err(Error::Degenerate(format!(
                "row {i} is linearly dependent on the preceding rows"
            )));
        }
        q.extend(v.iter().map(|x| x / norm));
    }
    Tensor::new(vec![rows, cols], q)
}

/// Seeded ChaCha8 stream.
///
/// Sub-streams are derived with [`Rng::derive`]: the child seed is the first
/// eight bytes (little-endian) of `SHA-256(parent_seed_le || tag)`, so a
/// stream depends only on the master seed and the purpose tag path.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for `tag`, a pure function of this stream's seed.
    pub fn derive(&self, tag: &str) -> Rng {
        Rng::new(derive_seed(self.seed, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// I.i.d. normal samples of the given shape.
pub fn gaussian(rng: &mut Rng, shape: Vec<usize>, mean: f64, std: f64) -> Result<Tensor> {
    if !(std >= 0.0) {
        return Err(Error::Input(format!("std must be >= 0, got {std}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| mean + std * rng.normal()).collect();
    Tensor::new(shape, data)
}
