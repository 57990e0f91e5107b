//! Dense/sparse vector plumbing shared by every other module: dot products,
//! normalization, cosine distance on the unit sphere, SGD steps, seeded RNG
//! discipline, and a central-difference gradient checker used throughout the
//! test suites.
//!
//! All arithmetic is `f64`. Functions that require unit-norm inputs assert it
//! in debug builds (tolerance `1e-6`) and document it; nothing silently
//! renormalizes.

use crate::error::{Error, Result};

/// Sparse feature vector: strictly increasing indices paired with finite,
/// non-zero values. The feature dimension lives with the dataset, not the
/// vector; bounds are checked where vectors meet a model or a parser.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseVector {
    /// Builds a sparse vector from (index, value) pairs in any order.
    /// Rejects duplicate indices, non-finite values, and exact zeros.
    pub fn from_pairs(mut pairs: Vec<(u32, f64)>) -> Result<Self> {
        pairs.sort_by_key(|&(i, _)| i);
        let mut indices = Vec::with_capacity(pairs.len());
        let mut values = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            if let Some(&last) = indices.last() {
                if last == i {
                    return Err(Error::InvalidArgument(format!(
                        "duplicate feature index {i}"
                    )));
                }
            }
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite value at feature index {i}"
                )));
            }
            if v == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "zero value at feature index {i}; omit the pair instead"
                )));
            }
            indices.push(i);
            values.push(v);
        }
        Ok(Self { indices, values })
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_index(&self) -> Option<u32> {
        self.indices.last().copied()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Row-major dense matrix. Deliberately minimal: the model only needs row
/// access, matrix-vector products, and their transposed counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: rows * cols,
                context: "matrix storage",
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `y = A x + b`. `b` may be empty to skip the bias.
    pub fn matvec(&self, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: self.cols,
                context: "matvec input",
            });
        }
        if !b.is_empty() && b.len() != self.rows {
            return Err(Error::LengthMismatch {
                left: b.len(),
                right: self.rows,
                context: "matvec bias",
            });
        }
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            y[r] = acc + if b.is_empty() { 0.0 } else { b[r] };
        }
        Ok(y)
    }

    /// `x = Aᵀ g`: pull a gradient back through the same matrix.
    pub fn matvec_transposed(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.rows {
            return Err(Error::LengthMismatch {
                left: g.len(),
                right: self.rows,
                context: "transposed matvec input",
            });
        }
        let mut x = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let gr = g[r];
            for (xc, w) in x.iter_mut().zip(row) {
                *xc += w * gr;
            }
        }
        Ok(x)
    }
}

/// Dot product; errors on length mismatch, never truncates.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
            context: "dot",
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Projects onto the unit sphere. A norm at or below `1e-12` is treated as
/// degenerate rather than amplified into garbage.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if !n.is_finite() || n <= 1e-12 {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {n:e}"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub(crate) fn debug_assert_unit(v: &[f64], what: &str) {
    debug_assert!(
        (l2_norm(v) - 1.0).abs() <= 1e-6,
        "{what} must be unit-norm (norm = {})",
        l2_norm(v)
    );
}

/// Cosine distance `1 − xᵀy` for unit vectors, so the range is `[0, 2]`:
/// 0 means identical direction, 1 orthogonal, 2 antipodal. Unit norm is the
/// caller's job (debug-asserted here).
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    debug_assert_unit(x, "cosine_distance lhs");
    debug_assert_unit(y, "cosine_distance rhs");
    Ok(1.0 - dot(x, y)?)
}

/// One plain gradient step `param − lr · grad`, returned as a fresh vector.
pub fn sgd_step(param: &[f64], grad: &[f64], lr: f64) -> Result<Vec<f64>> {
    if param.len() != grad.len() {
        return Err(Error::LengthMismatch {
            left: param.len(),
            right: grad.len(),
            context: "sgd_step",
        });
    }
    Ok(param.iter().zip(grad).map(|(p, g)| p - lr * g).collect())
}

/// In-place variant used by the training hot loop; same arithmetic as
/// [`sgd_step`].
pub fn sgd_step_inplace(param: &mut [f64], grad: &[f64], lr: f64) {
    debug_assert_eq!(param.len(), grad.len());
    for (p, g) in param.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Central-difference gradient of a scalar function:
/// `(f(x + εeᵢ) − f(x − εeᵢ)) / (2ε)` per coordinate. This is the oracle the
/// analytic backward passes are checked against, so it must stay independent
/// of them — it only ever calls the supplied closure.
pub fn finite_diff_grad<F>(f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(eps > 0.0, "finite_diff_grad requires a positive step");
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// splitmix64 round, used to derive independent sub-seeds from one master
/// seed. Stable by construction: the constants are part of the on-disk
/// reproducibility contract.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fisher–Yates shuffle driven by explicit `next_u64` draws so the
/// permutation depends only on the RNG stream, not on `rand`'s distribution
/// internals. The modulo bias is ~2⁻⁵⁰ for any slice this crate shuffles.
pub fn seeded_shuffle<T, R: rand::RngCore>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}
