//! Client loss and server-side geometry regularizers.
//!
//! Everything here lives on the unit sphere and is built from the cosine
//! distance `d(x, y) = 1 − xᵀy`. Three families:
//!
//! * the **client loss** ([`positive_loss`]) — a squared hinge that pulls an
//!   instance embedding toward the one class embedding the client owns; with
//!   no negatives anywhere, minimizing it alone collapses all classes onto
//!   one direction;
//! * **unweighted repulsion** ([`spreadout_reg`], [`spreadout_reg_topk`]) —
//!   pushes every pair of class embeddings apart, either with a hinged
//!   square within margin `ν` or, in the mined top-K form, as `−d²` on the
//!   K nearest neighbors only;
//! * **correlation-aware repulsion** ([`correlation_reg`],
//!   [`correlation_reg_topk`], [`fixed_embedding_reg`]) — scales each
//!   ordered pair by how often the two classes actually disagree, so
//!   classes that co-occur are not forced apart.
//!
//! The functions evaluate the smooth extension of these expressions for
//! arbitrary rows (they never renormalize internally). That is deliberate:
//! gradient checking perturbs inputs off the sphere, and the analytic
//! gradients returned here are the unconstrained ones the trainer steps
//! along before projecting rows back to unit norm.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::labelsets::{LabelSetTable, SigmaWeights};
use crate::numeric::{dot, Matrix};

/// Scalar knobs shared across losses and training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    /// Attraction weight in the contrastive and fixed-embedding objectives.
    pub alpha: f64,
    /// Repulsion weight in the contrastive and fixed-embedding objectives.
    pub beta: f64,
    /// Repulsion margin: pairs closer than `nu` (cosine distance) repel.
    pub nu: f64,
    /// Server-side regularizer strength.
    pub lambda: f64,
    /// Client hinge margin: instances stop attracting once the score
    /// reaches this value.
    pub margin_pos: f64,
    /// Neighborhood size for the mined (top-K) regularizer variants.
    pub mining_k: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            nu: 0.9,
            lambda: 1.0,
            margin_pos: 0.9,
            mining_k: 5,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument("alpha must be ≥ 0".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument("beta must be ≥ 0".into()));
        }
        if !(self.nu > 0.0 && self.nu <= 2.0) {
            return Err(Error::InvalidArgument(
                "nu must lie in (0, 2]: it is a cosine-distance margin".into(),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument("lambda must be ≥ 0".into()));
        }
        if !(self.margin_pos > 0.0 && self.margin_pos <= 1.0) {
            return Err(Error::InvalidArgument(
                "margin_pos must lie in (0, 1]: it is a score target".into(),
            ));
        }
        if self.mining_k == 0 {
            return Err(Error::InvalidArgument("mining_k must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Loss value plus gradients for the tensors it touches. `grad_embedding`
/// is present only for losses that see an instance embedding; `grad_rows`
/// holds gradients for exactly the class rows that received a non-trivial
/// contribution.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad_embedding: Option<Vec<f64>>,
    pub grad_rows: BTreeMap<u32, Vec<f64>>,
}

impl LossResult {
    fn new(value: f64) -> Self {
        Self {
            value,
            grad_embedding: None,
            grad_rows: BTreeMap::new(),
        }
    }

    /// Row gradient, materializing zeros for untouched rows.
    pub fn grad_row_or_zero(&self, u: u32, dim: usize) -> Vec<f64> {
        self.grad_rows
            .get(&u)
            .cloned()
            .unwrap_or_else(|| vec![0.0; dim])
    }
}

/// Value and both gradients of the single-pair client loss.
#[derive(Debug, Clone)]
pub struct PairGrad {
    pub value: f64,
    /// Gradient w.r.t. the instance embedding.
    pub grad_embedding: Vec<f64>,
    /// Gradient w.r.t. the client's class embedding row.
    pub grad_class: Vec<f64>,
}

/// Cosine distance extended smoothly off the sphere. Rows handed to the
/// regularizers are unit-norm in the trained system; during gradient checks
/// they are deliberately not.
fn pair_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - dot(a, b)?)
}

/// The only loss a client ever sees: `max(0, margin − gᵀw)²` for its own
/// class row. Gradients are exactly zero once the score clears the margin.
pub fn positive_loss(embedding: &[f64], class_row: &[f64], margin_pos: f64) -> Result<PairGrad> {
    if !(margin_pos > 0.0 && margin_pos <= 1.0) {
        return Err(Error::InvalidArgument(
            "margin_pos must lie in (0, 1]".into(),
        ));
    }
    let score = dot(embedding, class_row)?;
    let gap = margin_pos - score;
    if gap <= 0.0 {
        return Ok(PairGrad {
            value: 0.0,
            grad_embedding: vec![0.0; embedding.len()],
            grad_class: vec![0.0; class_row.len()],
        });
    }
    let coeff = -2.0 * gap;
    Ok(PairGrad {
        value: gap * gap,
        grad_embedding: class_row.iter().map(|w| coeff * w).collect(),
        grad_class: embedding.iter().map(|g| coeff * g).collect(),
    })
}

/// Reference objective when one party can see the whole label space:
/// attract the true class, hinge-repel every other class within margin `ν`:
/// `α·d(g, w_y)² + β·Σ_{c≠y} max(0, ν − d(g, w_c))²`.
pub fn contrastive_loss(
    embedding: &[f64],
    y: u32,
    w: &Matrix,
    hp: &HyperParams,
) -> Result<LossResult> {
    hp.validate()?;
    if y as usize >= w.rows() {
        return Err(Error::IndexOutOfRange {
            index: y as usize,
            bound: w.rows(),
            context: "contrastive_loss label",
        });
    }
    if embedding.len() != w.cols() {
        return Err(Error::LengthMismatch {
            left: embedding.len(),
            right: w.cols(),
            context: "contrastive_loss embedding",
        });
    }
    let mut result = LossResult::new(0.0);
    let mut grad_emb = vec![0.0; embedding.len()];

    let d_pos = pair_distance(embedding, w.row(y as usize))?;
    result.value += hp.alpha * d_pos * d_pos;
    let attract = -2.0 * hp.alpha * d_pos;
    for (g, wv) in grad_emb.iter_mut().zip(w.row(y as usize)) {
        *g += attract * wv;
    }
    result
        .grad_rows
        .insert(y, embedding.iter().map(|g| attract * g).collect());

    for c in 0..w.rows() as u32 {
        if c == y {
            continue;
        }
        let d = pair_distance(embedding, w.row(c as usize))?;
        let t = hp.nu - d;
        if t <= 0.0 {
            continue;
        }
        result.value += hp.beta * t * t;
        let repel = 2.0 * hp.beta * t;
        for (g, wv) in grad_emb.iter_mut().zip(w.row(c as usize)) {
            *g += repel * wv;
        }
        result
            .grad_rows
            .insert(c, embedding.iter().map(|g| repel * g).collect());
    }
    result.grad_embedding = Some(grad_emb);
    Ok(result)
}

fn add_scaled_row(target: &mut BTreeMap<u32, Vec<f64>>, u: u32, coeff: f64, row: &[f64]) {
    let entry = target.entry(u).or_insert_with(|| vec![0.0; row.len()]);
    for (g, w) in entry.iter_mut().zip(row) {
        *g += coeff * w;
    }
}

/// Hinged repulsion over every ordered class pair:
/// `Σ_u Σ_{u′≠u} max(0, ν − d(w_u, w_{u′}))²`.
pub fn spreadout_reg(w: &Matrix, nu: f64) -> Result<LossResult> {
    if !(nu > 0.0 && nu <= 2.0) {
        return Err(Error::InvalidArgument("nu must lie in (0, 2]".into()));
    }
    let mut result = LossResult::new(0.0);
    for u in 0..w.rows() as u32 {
        for u2 in 0..w.rows() as u32 {
            if u == u2 {
                continue;
            }
            let d = pair_distance(w.row(u as usize), w.row(u2 as usize))?;
            let t = nu - d;
            if t <= 0.0 {
                continue;
            }
            result.value += t * t;
            let coeff = 2.0 * t;
            add_scaled_row(&mut result.grad_rows, u, coeff, w.row(u2 as usize));
            add_scaled_row(&mut result.grad_rows, u2, coeff, w.row(u as usize));
        }
    }
    Ok(result)
}

/// For each row, the indices of its `k` nearest other rows by cosine
/// distance (ties broken toward the lower index), returned in ascending
/// index order. `k` is clamped to the number of other rows.
pub fn k_nearest(w: &Matrix, k: usize) -> Result<Vec<Vec<u32>>> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "neighborhood size must be ≥ 1".into(),
        ));
    }
    let c = w.rows();
    let mut neighborhoods = Vec::with_capacity(c);
    for u in 0..c {
        let mut candidates: Vec<(f64, u32)> = Vec::with_capacity(c.saturating_sub(1));
        for u2 in 0..c {
            if u2 == u {
                continue;
            }
            candidates.push((pair_distance(w.row(u), w.row(u2))?, u2 as u32));
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut picked: Vec<u32> = candidates
            .into_iter()
            .take(k)
            .map(|(_, idx)| idx)
            .collect();
        picked.sort_unstable();
        neighborhoods.push(picked);
    }
    Ok(neighborhoods)
}

/// Mined repulsion: `Σ_u Σ_{u′ ∈ N_k(u)} −d(w_u, w_{u′})²`. No hinge — the
/// K nearest neighbors always repel, which is the point of mining them.
/// Neighborhoods are treated as constant during differentiation.
pub fn spreadout_reg_topk(w: &Matrix, k: usize) -> Result<LossResult> {
    let neighborhoods = k_nearest(w, k)?;
    let mut result = LossResult::new(0.0);
    for (u, neighbors) in neighborhoods.iter().enumerate() {
        for &u2 in neighbors {
            let d = pair_distance(w.row(u), w.row(u2 as usize))?;
            result.value -= d * d;
            let coeff = 2.0 * d;
            add_scaled_row(&mut result.grad_rows, u as u32, coeff, w.row(u2 as usize));
            add_scaled_row(&mut result.grad_rows, u2, coeff, w.row(u));
        }
    }
    Ok(result)
}

/// Correlation-weighted hinged repulsion over all ordered pairs:
/// `Σ_u Σ_{u′≠u} σ[u][u′] · max(0, ν − d(w_u, w_{u′}))²`.
///
/// Pass raw σ or its row-normalized form ([`normalize_weights`]) — the
/// function is linear in whatever weights it is given. Pairs with zero
/// weight contribute nothing, active hinge or not.
pub fn correlation_reg(w: &Matrix, sigma: &SigmaWeights, nu: f64) -> Result<LossResult> {
    if !(nu > 0.0 && nu <= 2.0) {
        return Err(Error::InvalidArgument("nu must lie in (0, 2]".into()));
    }
    if sigma.num_classes() as usize != w.rows() {
        return Err(Error::LengthMismatch {
            left: sigma.num_classes() as usize,
            right: w.rows(),
            context: "correlation weights",
        });
    }
    let mut result = LossResult::new(0.0);
    for u in 0..w.rows() as u32 {
        for u2 in 0..w.rows() as u32 {
            if u == u2 {
                continue;
            }
            let weight = sigma.get(u, u2);
            if weight == 0.0 {
                continue;
            }
            let d = pair_distance(w.row(u as usize), w.row(u2 as usize))?;
            let t = nu - d;
            if t <= 0.0 {
                continue;
            }
            result.value += weight * t * t;
            let coeff = 2.0 * weight * t;
            add_scaled_row(&mut result.grad_rows, u, coeff, w.row(u2 as usize));
            add_scaled_row(&mut result.grad_rows, u2, coeff, w.row(u as usize));
        }
    }
    Ok(result)
}

/// Correlation-weighted repulsion restricted to each row's `k` nearest
/// neighbors. Same hinged form as [`correlation_reg`] — with `k = C − 1`
/// the two are identical term for term.
pub fn correlation_reg_topk(
    w: &Matrix,
    sigma: &SigmaWeights,
    k: usize,
    nu: f64,
) -> Result<LossResult> {
    if !(nu > 0.0 && nu <= 2.0) {
        return Err(Error::InvalidArgument("nu must lie in (0, 2]".into()));
    }
    if sigma.num_classes() as usize != w.rows() {
        return Err(Error::LengthMismatch {
            left: sigma.num_classes() as usize,
            right: w.rows(),
            context: "correlation weights",
        });
    }
    let neighborhoods = k_nearest(w, k)?;
    let mut result = LossResult::new(0.0);
    for (u, neighbors) in neighborhoods.iter().enumerate() {
        let u = u as u32;
        for &u2 in neighbors {
            let weight = sigma.get(u, u2);
            if weight == 0.0 {
                continue;
            }
            let d = pair_distance(w.row(u as usize), w.row(u2 as usize))?;
            let t = nu - d;
            if t <= 0.0 {
                continue;
            }
            result.value += weight * t * t;
            let coeff = 2.0 * weight * t;
            add_scaled_row(&mut result.grad_rows, u, coeff, w.row(u2 as usize));
            add_scaled_row(&mut result.grad_rows, u2, coeff, w.row(u as usize));
        }
    }
    Ok(result)
}

/// Objective for pretraining class embeddings from label sets alone — no
/// encoder anywhere. Per merged instance: attract every ordered pair of
/// co-occurring classes, hinge-repel every (positive, negative) pair;
/// average over instances:
///
/// ```text
/// (1/n) Σⱼ [ α Σ_{y≠y′ ∈ Pⱼ} d(w_y, w_{y′})²
///          + β Σ_{y ∈ Pⱼ, y′ ∉ Pⱼ} max(0, ν − d(w_y, w_{y′}))² ]
/// ```
///
/// Negatives are complements of the stored positive sets, enumerated on the
/// fly against a transient membership mask.
pub fn fixed_embedding_reg(
    w: &Matrix,
    table: &LabelSetTable,
    hp: &HyperParams,
) -> Result<LossResult> {
    hp.validate()?;
    if table.num_classes() as usize != w.rows() {
        return Err(Error::LengthMismatch {
            left: table.num_classes() as usize,
            right: w.rows(),
            context: "fixed embedding label table",
        });
    }
    let n = table.num_instances();
    if n == 0 {
        return Err(Error::Degenerate(
            "cannot pretrain embeddings from an empty label set table".into(),
        ));
    }
    let c = w.rows();
    let mut result = LossResult::new(0.0);
    let mut is_positive = vec![false; c];
    for (_, positives) in table.entries() {
        if positives.is_empty() {
            return Err(Error::Degenerate(
                "label set table entry with no positive labels".into(),
            ));
        }
        for &y in positives {
            is_positive[y as usize] = true;
        }
        for &y in positives {
            // Attraction among co-occurring classes (ordered pairs). A zero
            // weight contributes nothing, so it must not touch any row.
            for &y2 in positives {
                if y2 == y || hp.alpha == 0.0 {
                    continue;
                }
                let d = pair_distance(w.row(y as usize), w.row(y2 as usize))?;
                result.value += hp.alpha * d * d;
                let coeff = -2.0 * hp.alpha * d;
                add_scaled_row(&mut result.grad_rows, y, coeff, w.row(y2 as usize));
                add_scaled_row(&mut result.grad_rows, y2, coeff, w.row(y as usize));
            }
            // Repulsion against this instance's negatives.
            for y2 in 0..c as u32 {
                if is_positive[y2 as usize] || hp.beta == 0.0 {
                    continue;
                }
                let d = pair_distance(w.row(y as usize), w.row(y2 as usize))?;
                let t = hp.nu - d;
                if t <= 0.0 {
                    continue;
                }
                result.value += hp.beta * t * t;
                let coeff = 2.0 * hp.beta * t;
                add_scaled_row(&mut result.grad_rows, y, coeff, w.row(y2 as usize));
                add_scaled_row(&mut result.grad_rows, y2, coeff, w.row(y as usize));
            }
        }
        for &y in positives {
            is_positive[y as usize] = false;
        }
    }
    // Means, not sums: one uniform rescale at the end.
    let inv_n = 1.0 / n as f64;
    result.value *= inv_n;
    for g in result.grad_rows.values_mut() {
        for v in g {
            *v *= inv_n;
        }
    }
    Ok(result)
}

/// Row-normalized correlation weights: each row rescaled to sum to one,
/// all-zero rows left untouched.
pub fn normalize_weights(sigma: &SigmaWeights) -> SigmaWeights {
    sigma.row_normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelsets::DIGEST_LEN;
    use crate::numeric::{finite_diff_grad, l2_normalize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(seed: u64, c: usize, d: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(c, d);
        for r in 0..c {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            m.row_mut(r).copy_from_slice(&l2_normalize(&v).unwrap());
        }
        m
    }

    fn flatten(m: &Matrix) -> Vec<f64> {
        m.as_slice().to_vec()
    }

    fn unflatten(template: &Matrix, flat: &[f64]) -> Matrix {
        Matrix::from_vec(template.rows(), template.cols(), flat.to_vec()).unwrap()
    }

    fn grads_as_flat(result: &LossResult, c: usize, d: usize) -> Vec<f64> {
        let mut flat = vec![0.0; c * d];
        for (&u, g) in &result.grad_rows {
            flat[u as usize * d..(u as usize + 1) * d].copy_from_slice(g);
        }
        flat
    }

    fn assert_close(analytic: &[f64], fd: &[f64], what: &str) {
        for (i, (a, f)) in analytic.iter().zip(fd).enumerate() {
            let tol = 1e-5 * a.abs().max(f.abs()).max(1.0);
            assert!(
                (a - f).abs() <= tol,
                "{what}[{i}]: analytic {a} vs finite difference {f}"
            );
        }
    }

    #[test]
    fn positive_loss_inactive_beyond_margin() {
        let e = [1.0, 0.0];
        let r = positive_loss(&e, &e, 0.9).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_embedding.iter().all(|&v| v == 0.0));
        assert!(r.grad_class.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positive_loss_orthogonal_pair_hand_value() {
        let g = [1.0, 0.0];
        let w = [0.0, 1.0];
        let r = positive_loss(&g, &w, 0.9).unwrap();
        assert!((r.value - 0.81).abs() < 1e-15);
        // −2(margin − s)·w with s = 0.
        assert!((r.grad_embedding[0] - 0.0).abs() < 1e-15);
        assert!((r.grad_embedding[1] + 1.8).abs() < 1e-15);
        assert!((r.grad_class[0] + 1.8).abs() < 1e-15);
    }

    #[test]
    fn positive_loss_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let g: Vec<f64> = l2_normalize(&(0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
            let w: Vec<f64> = l2_normalize(&(0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
            let r = positive_loss(&g, &w, 0.9).unwrap();
            let fd_g = finite_diff_grad(
                |x| positive_loss(x, &w, 0.9).unwrap().value,
                &g,
                1e-5,
            );
            let fd_w = finite_diff_grad(
                |x| positive_loss(&g, x, 0.9).unwrap().value,
                &w,
                1e-5,
            );
            assert_close(&r.grad_embedding, &fd_g, "grad_embedding");
            assert_close(&r.grad_class, &fd_w, "grad_class");
        }
    }

    #[test]
    fn contrastive_loss_splits_attraction_and_repulsion() {
        let hp = HyperParams::default();
        let w = unit_rows(3, 4, 5);
        let emb = l2_normalize(&[0.3, -0.2, 0.9, 0.1, -0.4]).unwrap();
        let r = contrastive_loss(&emb, 1, &w, &hp).unwrap();
        assert!(r.value >= 0.0);
        assert!(r.grad_rows.contains_key(&1));
        // alpha = 0 kills the attraction term entirely.
        let hp_repel_only = HyperParams { alpha: 0.0, ..hp };
        let r2 = contrastive_loss(&emb, 1, &w, &hp_repel_only).unwrap();
        let d1 = 1.0 - dot(&emb, w.row(1)).unwrap();
        assert!((r.value - r2.value - d1 * d1).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_matches_finite_differences() {
        let hp = HyperParams {
            nu: 1.2, // wide margin so several hinges are active
            ..HyperParams::default()
        };
        let w = unit_rows(11, 5, 4);
        let emb = l2_normalize(&[0.5, 0.1, -0.7, 0.2]).unwrap();
        let r = contrastive_loss(&emb, 2, &w, &hp).unwrap();
        let fd_emb = finite_diff_grad(
            |x| contrastive_loss(x, 2, &w, &hp).unwrap().value,
            &emb,
            1e-5,
        );
        assert_close(r.grad_embedding.as_ref().unwrap(), &fd_emb, "emb");
        let flat = flatten(&w);
        let fd_rows = finite_diff_grad(
            |x| contrastive_loss(&emb, 2, &unflatten(&w, x), &hp).unwrap().value,
            &flat,
            1e-5,
        );
        assert_close(&grads_as_flat(&r, 5, 4), &fd_rows, "rows");
    }

    #[test]
    fn spreadout_identical_rows_hand_value() {
        // Two identical rows: d = 0, both ordered pairs active.
        // Value = 2 · ν².
        let mut w = Matrix::zeros(2, 3);
        w.row_mut(0).copy_from_slice(&[1.0, 0.0, 0.0]);
        w.row_mut(1).copy_from_slice(&[1.0, 0.0, 0.0]);
        let r = spreadout_reg(&w, 0.9).unwrap();
        assert!((r.value - 2.0 * 0.81).abs() < 1e-15);
    }

    #[test]
    fn spreadout_inactive_for_well_separated_rows() {
        let mut w = Matrix::zeros(2, 2);
        w.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        w.row_mut(1).copy_from_slice(&[0.0, 1.0]); // d = 1 ≥ ν = 0.9
        let r = spreadout_reg(&w, 0.9).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_rows.is_empty());
    }

    #[test]
    fn spreadout_matches_finite_differences() {
        let w = unit_rows(17, 6, 4);
        let r = spreadout_reg(&w, 1.3).unwrap();
        let flat = flatten(&w);
        let fd = finite_diff_grad(
            |x| spreadout_reg(&unflatten(&w, x), 1.3).unwrap().value,
            &flat,
            1e-5,
        );
        assert_close(&grads_as_flat(&r, 6, 4), &fd, "spreadout rows");
    }

    #[test]
    fn k_nearest_prefers_small_distance_then_small_index() {
        let mut w = Matrix::zeros(4, 2);
        w.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        w.row_mut(1).copy_from_slice(&[0.0, 1.0]);
        w.row_mut(2).copy_from_slice(&[1.0, 0.0]); // coincides with row 0
        w.row_mut(3).copy_from_slice(&[-1.0, 0.0]);
        let n = k_nearest(&w, 2).unwrap();
        assert_eq!(n[0], vec![1, 2]); // d(0,2)=0 first, then tie 1 vs... d(0,1)=1 < d(0,3)=2
        assert_eq!(n[2], vec![0, 1]);
        // Ties: rows 1 and 3 are both at distance 1 from... row 1 sees 0 and
        // 2 both at distance 1 — lower index wins.
        assert_eq!(n[1], vec![0, 2]);
        // Clamp: more neighbors requested than exist.
        let all = k_nearest(&w, 99).unwrap();
        assert_eq!(all[0], vec![1, 2, 3]);
    }

    #[test]
    fn spreadout_topk_is_nonpositive_and_matches_fd() {
        let w = unit_rows(23, 6, 4);
        let r = spreadout_reg_topk(&w, 2).unwrap();
        assert!(r.value < 0.0);
        let flat = flatten(&w);
        let fd = finite_diff_grad(
            |x| spreadout_reg_topk(&unflatten(&w, x), 2).unwrap().value,
            &flat,
            1e-5,
        );
        assert_close(&grads_as_flat(&r, 6, 4), &fd, "topk rows");
    }

    #[test]
    fn spreadout_topk_zero_only_for_identical_rows() {
        let mut w = Matrix::zeros(3, 2);
        for r in 0..3 {
            w.row_mut(r).copy_from_slice(&[0.6, 0.8]);
        }
        let r = spreadout_reg_topk(&w, 1).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn correlation_with_uniform_weights_equals_spreadout_exactly() {
        let w = unit_rows(31, 7, 5);
        let sigma = SigmaWeights::uniform(7, 1.0);
        let plain = spreadout_reg(&w, 0.9).unwrap();
        let weighted = correlation_reg(&w, &sigma, 0.9).unwrap();
        assert_eq!(plain.value, weighted.value);
        assert_eq!(plain.grad_rows.len(), weighted.grad_rows.len());
        for (u, g) in &plain.grad_rows {
            assert_eq!(g, &weighted.grad_rows[u]);
        }
    }

    #[test]
    fn correlation_is_linear_in_sigma() {
        let w = unit_rows(37, 5, 4);
        let sigma = SigmaWeights::uniform(5, 0.3);
        let mut doubled = SigmaWeights::zeros(5);
        for u in 0..5 {
            for u2 in 0..5 {
                if u != u2 {
                    doubled.set(u, u2, 2.0 * sigma.get(u, u2));
                }
            }
        }
        let a = correlation_reg(&w, &sigma, 0.9).unwrap();
        let b = correlation_reg(&w, &doubled, 0.9).unwrap();
        assert!((b.value - 2.0 * a.value).abs() < 1e-15);
    }

    #[test]
    fn correlation_zero_sigma_is_inert() {
        let w = unit_rows(41, 4, 3);
        let sigma = SigmaWeights::zeros(4);
        let r = correlation_reg(&w, &sigma, 0.9).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_rows.is_empty());
        let rt = correlation_reg_topk(&w, &sigma, 2, 0.9).unwrap();
        assert_eq!(rt.value, 0.0);
        assert!(rt.grad_rows.is_empty());
    }

    #[test]
    fn correlation_matches_finite_differences() {
        let w = unit_rows(43, 5, 4);
        let mut sigma = SigmaWeights::zeros(5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for u in 0..5u32 {
            for u2 in 0..5u32 {
                if u != u2 && rng.gen_bool(0.7) {
                    sigma.set(u, u2, rng.gen_range(0.0..1.0));
                }
            }
        }
        for (name, f) in [
            (
                "full",
                Box::new(|x: &[f64]| correlation_reg(&unflatten(&unit_rows(43, 5, 4), x), &sigma, 1.1).unwrap())
                    as Box<dyn Fn(&[f64]) -> LossResult>,
            ),
            (
                "topk",
                Box::new(|x: &[f64]| {
                    correlation_reg_topk(&unflatten(&unit_rows(43, 5, 4), x), &sigma, 2, 1.1).unwrap()
                }),
            ),
        ] {
            let flat = flatten(&w);
            let r = f(&flat);
            let fd = finite_diff_grad(|x| f(x).value, &flat, 1e-5);
            assert_close(&grads_as_flat(&r, 5, 4), &fd, name);
        }
    }

    #[test]
    fn correlation_topk_full_neighborhood_equals_full_exactly() {
        let w = unit_rows(47, 6, 4);
        let mut sigma = SigmaWeights::zeros(6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for u in 0..6u32 {
            for u2 in 0..6u32 {
                if u != u2 {
                    sigma.set(u, u2, rng.gen_range(0.0..1.0));
                }
            }
        }
        let full = correlation_reg(&w, &sigma, 0.9).unwrap();
        let topk = correlation_reg_topk(&w, &sigma, 5, 0.9).unwrap();
        assert_eq!(full.value, topk.value);
        for (u, g) in &full.grad_rows {
            assert_eq!(g, &topk.grad_rows[u]);
        }
    }

    fn table_from(sets: &[&[u32]], c: u32) -> LabelSetTable {
        LabelSetTable::from_label_sets(
            c,
            sets.iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut digest = [0u8; DIGEST_LEN];
                    digest[0] = i as u8;
                    (digest, s.to_vec())
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fixed_embedding_reg_singleton_set_has_no_attraction() {
        let hp = HyperParams {
            beta: 0.0,
            ..HyperParams::default()
        };
        let w = unit_rows(53, 4, 3);
        let table = table_from(&[&[2]], 4);
        let r = fixed_embedding_reg(&w, &table, &hp).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_rows.is_empty());
    }

    #[test]
    fn fixed_embedding_reg_all_positive_has_no_repulsion() {
        let hp = HyperParams {
            alpha: 0.0,
            ..HyperParams::default()
        };
        let w = unit_rows(59, 3, 3);
        let table = table_from(&[&[0, 1, 2]], 3);
        let r = fixed_embedding_reg(&w, &table, &hp).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn fixed_embedding_reg_matches_finite_differences() {
        let hp = HyperParams {
            alpha: 0.7,
            beta: 1.3,
            nu: 1.1,
            ..HyperParams::default()
        };
        let w = unit_rows(61, 5, 4);
        let table = table_from(&[&[0, 1], &[2], &[1, 3, 4], &[0]], 5);
        let r = fixed_embedding_reg(&w, &table, &hp).unwrap();
        let flat = flatten(&w);
        let fd = finite_diff_grad(
            |x| fixed_embedding_reg(&unflatten(&w, x), &table, &hp).unwrap().value,
            &flat,
            1e-5,
        );
        assert_close(&grads_as_flat(&r, 5, 4), &fd, "fixed embedding rows");
    }

    #[test]
    fn fixed_embedding_reg_is_an_instance_mean() {
        // Duplicating every instance leaves the mean unchanged.
        let hp = HyperParams::default();
        let w = unit_rows(67, 4, 3);
        let once = table_from(&[&[0, 1], &[2, 3]], 4);
        let twice = table_from(&[&[0, 1], &[2, 3], &[0, 1], &[2, 3]], 4);
        let a = fixed_embedding_reg(&w, &once, &hp).unwrap();
        let b = fixed_embedding_reg(&w, &twice, &hp).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn normalize_weights_rows_sum_to_one() {
        let mut sigma = SigmaWeights::zeros(3);
        sigma.set(0, 1, 0.2);
        sigma.set(0, 2, 0.6);
        let gamma = normalize_weights(&sigma);
        assert!((gamma.get(0, 1) - 0.25).abs() < 1e-15);
        assert!((gamma.get(0, 2) - 0.75).abs() < 1e-15);
        assert_eq!(gamma.row_sum(1), 0.0);
    }

    #[test]
    fn hyperparams_validation_catches_bad_ranges() {
        let good = HyperParams::default();
        assert!(good.validate().is_ok());
        assert!(HyperParams { nu: 0.0, ..good }.validate().is_err());
        assert!(HyperParams { nu: 2.5, ..good }.validate().is_err());
        assert!(HyperParams { margin_pos: 0.0, ..good }.validate().is_err());
        assert!(HyperParams { margin_pos: 1.5, ..good }.validate().is_err());
        assert!(HyperParams { alpha: -0.1, ..good }.validate().is_err());
        assert!(HyperParams { mining_k: 0, ..good }.validate().is_err());
    }
}
