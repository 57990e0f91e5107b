//! The shared encoder network and the class embedding matrix.
//!
//! The encoder maps a sparse feature vector to a point on the unit sphere:
//! a value-weighted sum of embedding-table rows, two ReLU layers, a final
//! linear layer, then l2 normalization. Class scores are plain dot products
//! against unit-norm class embedding rows, so score ∈ [−1, 1] and ranking by
//! score is ranking by cosine similarity.
//!
//! The backward pass is written by hand and kept in lockstep with `forward`;
//! the test suites check it coordinate-by-coordinate against the
//! central-difference oracle in [`crate::numeric`].

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::{self, Matrix, SparseVector};

/// Layer widths. `features` is the sparse input dimension; everything else
/// is dense. Output dimension must match the class embedding dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimensionConfig {
    pub features: usize,
    pub embed_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub out_dim: usize,
}

impl DimensionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("features", self.features),
            ("embed_dim", self.embed_dim),
            ("hidden1", self.hidden1),
            ("hidden2", self.hidden2),
            ("out_dim", self.out_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!(
                    "dimension {name} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// All trainable encoder parameters. Biases start at zero; weights are
/// Gaussian with scale 1/√fan_in (the embedding table counts fan-in 1, since
/// each active feature contributes one row).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: DimensionConfig,
    pub embed: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w3: Matrix,
    pub b3: Vec<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng) * scale).collect();
    Matrix::from_vec(rows, cols, data).expect("consistent shape")
}

/// Deterministic initialization: one seed, one parameter vector.
pub fn init_model(seed: u64, dims: DimensionConfig) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed = gaussian_matrix(&mut rng, dims.features, dims.embed_dim, 1.0);
    let w1 = gaussian_matrix(
        &mut rng,
        dims.hidden1,
        dims.embed_dim,
        1.0 / (dims.embed_dim as f64).sqrt(),
    );
    let w2 = gaussian_matrix(
        &mut rng,
        dims.hidden2,
        dims.hidden1,
        1.0 / (dims.hidden1 as f64).sqrt(),
    );
    let w3 = gaussian_matrix(
        &mut rng,
        dims.out_dim,
        dims.hidden2,
        1.0 / (dims.hidden2 as f64).sqrt(),
    );
    Ok(ModelParams {
        dims,
        embed,
        w1,
        b1: vec![0.0; dims.hidden1],
        w2,
        b2: vec![0.0; dims.hidden2],
        w3,
        b3: vec![0.0; dims.out_dim],
    })
}

impl ModelParams {
    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.dims == other.dims
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &ModelParams) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::InvalidArgument(
                "cannot combine model parameters with different shapes".into(),
            ));
        }
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, factor: f64) {
        for tensor in self.tensors_mut() {
            for v in tensor {
                *v *= factor;
            }
        }
    }

    pub fn zeros_like(&self) -> ModelParams {
        let d = self.dims;
        ModelParams {
            dims: d,
            embed: Matrix::zeros(d.features, d.embed_dim),
            w1: Matrix::zeros(d.hidden1, d.embed_dim),
            b1: vec![0.0; d.hidden1],
            w2: Matrix::zeros(d.hidden2, d.hidden1),
            b2: vec![0.0; d.hidden2],
            w3: Matrix::zeros(d.out_dim, d.hidden2),
            b3: vec![0.0; d.out_dim],
        }
    }

    fn tensors(&self) -> [&[f64]; 7] {
        [
            self.embed.as_slice(),
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
            self.w3.as_slice(),
            &self.b3,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.embed.as_mut_slice(),
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            self.w3.as_mut_slice(),
            &mut self.b3,
        ]
    }

    /// One SGD step over every tensor touched by `grads`.
    pub fn apply_grads(&mut self, grads: &ModelGrads, lr: f64) -> Result<()> {
        if grads.dims != self.dims {
            return Err(Error::InvalidArgument(
                "gradient shape does not match parameters".into(),
            ));
        }
        for (&row, g) in &grads.embed_rows {
            let row = row as usize;
            if row >= self.dims.features {
                return Err(Error::IndexOutOfRange {
                    index: row,
                    bound: self.dims.features,
                    context: "embedding gradient row",
                });
            }
            numeric::sgd_step_inplace(self.embed.row_mut(row), g, lr);
        }
        numeric::sgd_step_inplace(self.w1.as_mut_slice(), grads.w1.as_slice(), lr);
        numeric::sgd_step_inplace(&mut self.b1, &grads.b1, lr);
        numeric::sgd_step_inplace(self.w2.as_mut_slice(), grads.w2.as_slice(), lr);
        numeric::sgd_step_inplace(&mut self.b2, &grads.b2, lr);
        numeric::sgd_step_inplace(self.w3.as_mut_slice(), grads.w3.as_slice(), lr);
        numeric::sgd_step_inplace(&mut self.b3, &grads.b3, lr);
        Ok(())
    }
}

/// Encoder gradients. The embedding table part is sparse — only rows of
/// features active in the batch appear — the dense layers are full tensors.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub dims: DimensionConfig,
    pub embed_rows: BTreeMap<u32, Vec<f64>>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w3: Matrix,
    pub b3: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros(dims: DimensionConfig) -> Self {
        Self {
            dims,
            embed_rows: BTreeMap::new(),
            w1: Matrix::zeros(dims.hidden1, dims.embed_dim),
            b1: vec![0.0; dims.hidden1],
            w2: Matrix::zeros(dims.hidden2, dims.hidden1),
            b2: vec![0.0; dims.hidden2],
            w3: Matrix::zeros(dims.out_dim, dims.hidden2),
            b3: vec![0.0; dims.out_dim],
        }
    }

    /// `self += weight · other`, merging sparse embedding rows.
    pub fn add_scaled(&mut self, other: &ModelGrads, weight: f64) {
        debug_assert_eq!(self.dims, other.dims);
        for (&row, g) in &other.embed_rows {
            let dst = self
                .embed_rows
                .entry(row)
                .or_insert_with(|| vec![0.0; self.dims.embed_dim]);
            for (d, s) in dst.iter_mut().zip(g) {
                *d += weight * s;
            }
        }
        let pairs: [(&mut [f64], &[f64]); 6] = [
            (self.w1.as_mut_slice(), other.w1.as_slice()),
            (&mut self.b1, &other.b1),
            (self.w2.as_mut_slice(), other.w2.as_slice()),
            (&mut self.b2, &other.b2),
            (self.w3.as_mut_slice(), other.w3.as_slice()),
            (&mut self.b3, &other.b3),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += weight * s;
            }
        }
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub embed_sum: Vec<f64>,
    pub pre1: Vec<f64>,
    pub post1: Vec<f64>,
    pub pre2: Vec<f64>,
    pub post2: Vec<f64>,
    pub pre_norm: Vec<f64>,
    pub norm: f64,
    pub output: Vec<f64>,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// Runs the encoder. Errors on an instance with no active features, on a
/// feature index outside the table, and on a zero pre-normalization vector.
pub fn forward(params: &ModelParams, x: &SparseVector) -> Result<(Vec<f64>, ForwardCache)> {
    if x.is_empty() {
        return Err(Error::Degenerate(
            "instance has no active features".into(),
        ));
    }
    if let Some(max) = x.max_index() {
        if max as usize >= params.dims.features {
            return Err(Error::IndexOutOfRange {
                index: max as usize,
                bound: params.dims.features,
                context: "feature index",
            });
        }
    }
    let mut embed_sum = vec![0.0; params.dims.embed_dim];
    for (idx, val) in x.iter() {
        let row = params.embed.row(idx as usize);
        for (acc, w) in embed_sum.iter_mut().zip(row) {
            *acc += val * w;
        }
    }
    let pre1 = params.w1.matvec(&embed_sum, &params.b1)?;
    let post1 = relu(&pre1);
    let pre2 = params.w2.matvec(&post1, &params.b2)?;
    let post2 = relu(&pre2);
    let pre_norm = params.w3.matvec(&post2, &params.b3)?;
    let norm = numeric::l2_norm(&pre_norm);
    let output = numeric::l2_normalize(&pre_norm)?;
    let cache = ForwardCache {
        embed_sum,
        pre1,
        post1,
        pre2,
        post2,
        pre_norm,
        norm,
        output: output.clone(),
    };
    Ok((output, cache))
}

/// Pulls a gradient w.r.t. the normalized output back to every parameter.
///
/// The l2 normalization contributes the Jacobian `(I − e eᵀ)/‖v‖` with
/// `e = v/‖v‖`; ReLU gates pass gradient only where the pre-activation was
/// strictly positive.
pub fn backward(
    params: &ModelParams,
    x: &SparseVector,
    cache: &ForwardCache,
    grad_output: &[f64],
) -> Result<ModelGrads> {
    let d = params.dims;
    let consistent = cache.embed_sum.len() == d.embed_dim
        && cache.pre1.len() == d.hidden1
        && cache.post1.len() == d.hidden1
        && cache.pre2.len() == d.hidden2
        && cache.post2.len() == d.hidden2
        && cache.pre_norm.len() == d.out_dim
        && cache.output.len() == d.out_dim;
    if !consistent {
        return Err(Error::InvalidArgument(
            "forward cache does not match parameter shapes".into(),
        ));
    }
    if grad_output.len() != d.out_dim {
        return Err(Error::LengthMismatch {
            left: grad_output.len(),
            right: d.out_dim,
            context: "output gradient",
        });
    }

    let mut grads = ModelGrads::zeros(d);

    // Through the normalization: g_v = (g_out − e (eᵀ g_out)) / ‖v‖.
    let along = numeric::dot(&cache.output, grad_output)?;
    let g_pre_norm: Vec<f64> = grad_output
        .iter()
        .zip(&cache.output)
        .map(|(g, e)| (g - e * along) / cache.norm)
        .collect();

    // Layer 3 (linear).
    for r in 0..d.out_dim {
        let gr = g_pre_norm[r];
        let row = grads.w3.row_mut(r);
        for (w, h) in row.iter_mut().zip(&cache.post2) {
            *w += gr * h;
        }
        grads.b3[r] += gr;
    }
    let g_post2 = params.w3.matvec_transposed(&g_pre_norm)?;

    // Layer 2 (ReLU gate on pre2).
    let g_pre2: Vec<f64> = g_post2
        .iter()
        .zip(&cache.pre2)
        .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
        .collect();
    for r in 0..d.hidden2 {
        let gr = g_pre2[r];
        if gr == 0.0 {
            continue;
        }
        let row = grads.w2.row_mut(r);
        for (w, h) in row.iter_mut().zip(&cache.post1) {
            *w += gr * h;
        }
        grads.b2[r] += gr;
    }
    let g_post1 = params.w2.matvec_transposed(&g_pre2)?;

    // Layer 1 (ReLU gate on pre1).
    let g_pre1: Vec<f64> = g_post1
        .iter()
        .zip(&cache.pre1)
        .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
        .collect();
    for r in 0..d.hidden1 {
        let gr = g_pre1[r];
        if gr == 0.0 {
            continue;
        }
        let row = grads.w1.row_mut(r);
        for (w, h) in row.iter_mut().zip(&cache.embed_sum) {
            *w += gr * h;
        }
        grads.b1[r] += gr;
    }
    let g_embed_sum = params.w1.matvec_transposed(&g_pre1)?;

    // Embedding table: only rows of active features receive gradient,
    // scaled by the feature value.
    for (idx, val) in x.iter() {
        let row = grads
            .embed_rows
            .entry(idx)
            .or_insert_with(|| vec![0.0; d.embed_dim]);
        for (r, g) in row.iter_mut().zip(&g_embed_sum) {
            *r += val * g;
        }
    }

    Ok(grads)
}

/// One unit-norm row per class. Rows stay within 1e-6 of unit norm; every
/// operation that moves them renormalizes before returning.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    rows: Matrix,
}

impl ClassEmbeddings {
    pub fn from_matrix(rows: Matrix) -> Result<Self> {
        for r in 0..rows.rows() {
            let n = numeric::l2_norm(rows.row(r));
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "class embedding row {r} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, u: usize) -> &[f64] {
        self.rows.row(u)
    }

    pub fn set_row(&mut self, u: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.dim() {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: self.dim(),
                context: "class embedding row",
            });
        }
        let n = numeric::l2_norm(values);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "refusing to store class embedding with norm {n}"
            )));
        }
        self.rows.row_mut(u).copy_from_slice(values);
        Ok(())
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.rows
    }

    /// Projects every row back onto the unit sphere after a gradient step.
    pub fn renormalize_rows(&mut self) -> Result<()> {
        for r in 0..self.rows.rows() {
            let normalized = numeric::l2_normalize(self.rows.row(r))?;
            self.rows.row_mut(r).copy_from_slice(&normalized);
        }
        Ok(())
    }
}

/// Random unit rows. In high dimension independent Gaussian directions are
/// near-orthogonal, so this starting matrix is already close to maximally
/// spread out — the baseline algorithms rely on that property.
pub fn init_class_embeddings(seed: u64, num_classes: usize, dim: usize) -> Result<ClassEmbeddings> {
    if num_classes == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "class embedding matrix needs at least one class and one dimension".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Matrix::zeros(num_classes, dim);
    for r in 0..num_classes {
        loop {
            let candidate: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            if let Ok(unit) = numeric::l2_normalize(&candidate) {
                rows.row_mut(r).copy_from_slice(&unit);
                break;
            }
        }
    }
    ClassEmbeddings::from_matrix(rows)
}

/// Scores every class for one encoded instance: `W · emb`.
pub fn predict_scores(class_embeddings: &ClassEmbeddings, embedding: &[f64]) -> Result<Vec<f64>> {
    if embedding.len() != class_embeddings.dim() {
        return Err(Error::LengthMismatch {
            left: embedding.len(),
            right: class_embeddings.dim(),
            context: "predict_scores embedding",
        });
    }
    (0..class_embeddings.num_classes())
        .map(|u| numeric::dot(class_embeddings.row(u), embedding))
        .collect()
}

/// Indices of the `k` highest scores, descending; equal scores rank the
/// lower index first, so the result is fully deterministic.
pub fn top_k_labels(scores: &[f64], k: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    order.truncate(k.min(scores.len()));
    order
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FLCK0001";

fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(input: &mut R, count: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn read_u32<R: Read>(input: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Writes a checkpoint with exact round-trip semantics.
///
/// Layout, all little-endian: the 8-byte magic `FLCK0001`; six u32 shape
/// fields (features, embed_dim, hidden1, hidden2, out_dim, num_classes);
/// then the raw f64 tensors in order embed, w1, b1, w2, b2, w3, b3, class
/// embedding rows.
pub fn save_checkpoint(
    params: &ModelParams,
    class_embeddings: &ClassEmbeddings,
    path: &Path,
) -> Result<()> {
    if params.dims.out_dim != class_embeddings.dim() {
        return Err(Error::InvalidArgument(
            "encoder output dimension does not match class embeddings".into(),
        ));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        params.dims.features,
        params.dims.embed_dim,
        params.dims.hidden1,
        params.dims.hidden2,
        params.dims.out_dim,
        class_embeddings.num_classes(),
    ] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for tensor in params.tensors() {
        write_f64s(&mut out, tensor)?;
    }
    write_f64s(&mut out, class_embeddings.matrix().as_slice())?;
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ClassEmbeddings)> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::MalformedFile(format!(
            "bad checkpoint magic {:?}; expected {:?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let dims = DimensionConfig {
        features: read_u32(&mut input)? as usize,
        embed_dim: read_u32(&mut input)? as usize,
        hidden1: read_u32(&mut input)? as usize,
        hidden2: read_u32(&mut input)? as usize,
        out_dim: read_u32(&mut input)? as usize,
    };
    dims.validate()?;
    let num_classes = read_u32(&mut input)? as usize;
    let embed = Matrix::from_vec(
        dims.features,
        dims.embed_dim,
        read_f64s(&mut input, dims.features * dims.embed_dim)?,
    )?;
    let w1 = Matrix::from_vec(
        dims.hidden1,
        dims.embed_dim,
        read_f64s(&mut input, dims.hidden1 * dims.embed_dim)?,
    )?;
    let b1 = read_f64s(&mut input, dims.hidden1)?;
    let w2 = Matrix::from_vec(
        dims.hidden2,
        dims.hidden1,
        read_f64s(&mut input, dims.hidden2 * dims.hidden1)?,
    )?;
    let b2 = read_f64s(&mut input, dims.hidden2)?;
    let w3 = Matrix::from_vec(
        dims.out_dim,
        dims.hidden2,
        read_f64s(&mut input, dims.out_dim * dims.hidden2)?,
    )?;
    let b3 = read_f64s(&mut input, dims.out_dim)?;
    let rows = Matrix::from_vec(
        num_classes,
        dims.out_dim,
        read_f64s(&mut input, num_classes * dims.out_dim)?,
    )?;
    let params = ModelParams {
        dims,
        embed,
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
    };
    let class_embeddings = ClassEmbeddings::from_matrix(rows)?;
    Ok((params, class_embeddings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_grad;
    use rand::Rng;

    fn tiny_dims() -> DimensionConfig {
        DimensionConfig {
            features: 12,
            embed_dim: 5,
            hidden1: 7,
            hidden2: 6,
            out_dim: 4,
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng, features: usize) -> SparseVector {
        let nnz = rng.gen_range(1..=features.min(6));
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < nnz {
            picked.insert(rng.gen_range(0..features as u32));
        }
        SparseVector::from_pairs(
            picked
                .into_iter()
                .map(|i| (i, rng.gen_range(-2.0..2.0f64) + 0.1))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_model(9, tiny_dims()).unwrap();
        let b = init_model(9, tiny_dims()).unwrap();
        assert_eq!(a, b);
        let c = init_model(10, tiny_dims()).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.embed.rows(), 12);
        assert_eq!(a.w1.rows(), 7);
        assert_eq!(a.b3.len(), 4);
        assert!(a.b1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_output_is_unit_norm() {
        let params = init_model(3, tiny_dims()).unwrap();
        let x = SparseVector::from_pairs(vec![(0, 1.0), (3, -0.5), (11, 2.0)]).unwrap();
        let (out, cache) = forward(&params, &x).unwrap();
        assert!((numeric::l2_norm(&out) - 1.0).abs() < 1e-9);
        assert_eq!(cache.output, out);
    }

    #[test]
    fn forward_rejects_empty_and_out_of_range() {
        let params = init_model(3, tiny_dims()).unwrap();
        let empty = SparseVector::from_pairs(vec![]).unwrap();
        assert!(matches!(forward(&params, &empty), Err(Error::Degenerate(_))));
        let oob = SparseVector::from_pairs(vec![(12, 1.0)]).unwrap();
        assert!(matches!(
            forward(&params, &oob),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn scaling_last_layer_does_not_change_output() {
        // The final normalization absorbs any positive rescaling of the
        // last linear layer, bit for bit (powers of two commute exactly).
        let params = init_model(5, tiny_dims()).unwrap();
        let mut scaled = params.clone();
        for v in scaled.w3.as_mut_slice() {
            *v *= 2.0;
        }
        for v in scaled.b3.iter_mut() {
            *v *= 2.0;
        }
        let x = SparseVector::from_pairs(vec![(1, 0.7), (4, -1.1)]).unwrap();
        let (a, _) = forward(&params, &x).unwrap();
        let (b, _) = forward(&scaled, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_zero_gradient_gives_zero_everywhere() {
        let params = init_model(5, tiny_dims()).unwrap();
        let x = SparseVector::from_pairs(vec![(2, 1.0), (7, 0.5)]).unwrap();
        let (_, cache) = forward(&params, &x).unwrap();
        let grads = backward(&params, &x, &cache, &vec![0.0; 4]).unwrap();
        assert!(grads.w1.as_slice().iter().all(|&v| v == 0.0));
        assert!(grads.w3.as_slice().iter().all(|&v| v == 0.0));
        for g in grads.embed_rows.values() {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_touches_only_active_embedding_rows() {
        let params = init_model(5, tiny_dims()).unwrap();
        let x = SparseVector::from_pairs(vec![(2, 1.0), (7, 0.5)]).unwrap();
        let (_, cache) = forward(&params, &x).unwrap();
        let grads = backward(&params, &x, &cache, &[0.3, -0.2, 0.1, 0.9]).unwrap();
        let rows: Vec<u32> = grads.embed_rows.keys().copied().collect();
        assert_eq!(rows, vec![2, 7]);
    }

    #[test]
    fn backward_matches_finite_differences_on_random_instances() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..10 {
            let params = init_model(100 + trial, dims).unwrap();
            let x = random_instance(&mut rng, dims.features);
            let grad_out: Vec<f64> = (0..dims.out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, cache) = forward(&params, &x).unwrap();
            let analytic = backward(&params, &x, &cache, &grad_out).unwrap();

            // Scalar function: project the fresh forward output onto the
            // fixed grad_out direction, then differentiate w.r.t. one
            // parameter tensor at a time. w3 stands in for the dense layers
            // here; the acceptance suite sweeps every tensor.
            let flat_w3: Vec<f64> = params.w3.as_slice().to_vec();
            let fd_w3 = finite_diff_grad(
                |w| {
                    let mut p = params.clone();
                    p.w3.as_mut_slice().copy_from_slice(w);
                    let (out, _) = forward(&p, &x).unwrap();
                    out.iter().zip(&grad_out).map(|(o, g)| o * g).sum()
                },
                &flat_w3,
                1e-5,
            );
            for (a, f) in analytic.w3.as_slice().iter().zip(&fd_w3) {
                assert!(
                    (a - f).abs() <= 1e-5 * a.abs().max(f.abs()).max(1.0),
                    "w3 grad mismatch: analytic {a}, fd {f}"
                );
            }

            for (&row, g) in &analytic.embed_rows {
                let base = params.embed.row(row as usize).to_vec();
                let fd = finite_diff_grad(
                    |r| {
                        let mut p = params.clone();
                        p.embed.row_mut(row as usize).copy_from_slice(r);
                        let (out, _) = forward(&p, &x).unwrap();
                        out.iter().zip(&grad_out).map(|(o, g)| o * g).sum()
                    },
                    &base,
                    1e-5,
                );
                for (a, f) in g.iter().zip(&fd) {
                    assert!(
                        (a - f).abs() <= 1e-5 * a.abs().max(f.abs()).max(1.0),
                        "embed row {row} grad mismatch: analytic {a}, fd {f}"
                    );
                }
            }
        }
    }

    #[test]
    fn class_embeddings_are_unit_and_near_orthogonal_in_high_dim() {
        let ce = init_class_embeddings(7, 100, 512).unwrap();
        let mut mean_abs_cos = 0.0;
        let mut pairs = 0usize;
        for u in 0..ce.num_classes() {
            assert!((numeric::l2_norm(ce.row(u)) - 1.0).abs() < 1e-9);
            for v in (u + 1)..ce.num_classes() {
                mean_abs_cos += numeric::dot(ce.row(u), ce.row(v)).unwrap().abs();
                pairs += 1;
            }
        }
        mean_abs_cos /= pairs as f64;
        assert!(
            mean_abs_cos < 0.1,
            "expected near-orthogonal rows, mean |cos| = {mean_abs_cos}"
        );
    }

    #[test]
    fn predict_scores_are_row_dots() {
        let ce = init_class_embeddings(1, 4, 3).unwrap();
        let emb = numeric::l2_normalize(&[0.3, -0.4, 0.8]).unwrap();
        let scores = predict_scores(&ce, &emb).unwrap();
        for (u, s) in scores.iter().enumerate() {
            assert_eq!(*s, numeric::dot(ce.row(u), &emb).unwrap());
            assert!(s.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn top_k_breaks_ties_toward_lower_index() {
        assert_eq!(top_k_labels(&[0.5, 0.9, 0.5, 0.1], 3), vec![1, 0, 2]);
        assert_eq!(top_k_labels(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(top_k_labels(&[0.2, 0.4], 10), vec![1, 0]);
    }

    #[test]
    fn top_k_is_invariant_under_monotone_transform() {
        let scores = [0.1, -0.3, 0.9, 0.4, 0.4];
        let transformed: Vec<f64> = scores.iter().map(|s| 2.0 * s + 1.0).collect();
        assert_eq!(top_k_labels(&scores, 5), top_k_labels(&transformed, 5));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dims = tiny_dims();
        let params = init_model(77, dims).unwrap();
        let ce = init_class_embeddings(78, 5, dims.out_dim).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &ce, &path).unwrap();
        let (p2, ce2) = load_checkpoint(&path).unwrap();
        assert_eq!(params, p2);
        assert_eq!(ce, ce2);
    }

    #[test]
    fn checkpoint_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::MalformedFile(_))
        ));
    }
}
