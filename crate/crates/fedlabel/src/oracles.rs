//! Independent verification oracles: finite-difference gradient suites,
//! brute-force re-implementations of σ and the ranking metrics, a naive
//! all-pairs repulsion reference, and the desk-scale collapse fixture.
//!
//! Everything here deliberately avoids the library's optimized code paths —
//! the brute-force routines are plain nested loops over the definitions, so
//! an agreement failure always means one side computed something else. The
//! suites power both `fedlabel verify --suite <name>` and the acceptance
//! tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{materialize_data, DataSource, RunSpec};
use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, precision_at_k, MapVariant, PredictionBatch};
use crate::federation::{run_experiment, Algorithm, TrainConfig};
use crate::labelsets::{
    compute_sigma, compute_sigma_per_instance, InstanceDigest, LabelSetTable,
};
use crate::losses::{
    contrastive_loss, correlation_reg, correlation_reg_topk, fixed_embedding_reg, normalize_weights,
    positive_loss, spreadout_reg, spreadout_reg_topk, HyperParams,
};
use crate::model::{backward, forward, init_model, DimensionConfig, ModelParams};
use crate::numeric::{finite_diff_grad, l2_normalize, Matrix, SparseVector};

/// Step used by every finite-difference probe.
pub const FD_EPS: f64 = 1e-5;
/// Gradient agreement threshold (relative, with a small-magnitude guard).
pub const GRAD_TOL: f64 = 1e-4;
/// Agreement threshold for value-level equivalences and metric oracles.
pub const EXACT_TOL: f64 = 1e-12;

/// One named verification check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

fn random_unit_rows(rng: &mut ChaCha8Rng, c: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(c, d);
    for r in 0..c {
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0) + 0.01).collect();
        let unit = l2_normalize(&row).expect("nonzero by construction");
        m.row_mut(r).copy_from_slice(&unit);
    }
    m
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_hp(rng: &mut ChaCha8Rng) -> HyperParams {
    HyperParams {
        alpha: rng.gen_range(0.2..2.0),
        beta: rng.gen_range(0.2..2.0),
        nu: rng.gen_range(0.4..1.6),
        margin_pos: rng.gen_range(0.5..1.0),
        ..HyperParams::default()
    }
}

/// Digest whose lexicographic order equals the instance index order, so the
/// merged table walks instances exactly as given.
fn indexed_digest(i: usize) -> InstanceDigest {
    let mut digest = [0u8; 32];
    digest[..8].copy_from_slice(&(i as u64).to_be_bytes());
    digest
}

fn random_label_sets(rng: &mut ChaCha8Rng, n: usize, c: u32) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            let mut set: Vec<u32> = (0..c).filter(|_| rng.gen_bool(0.4)).collect();
            if set.is_empty() {
                set.push(rng.gen_range(0..c));
            }
            set
        })
        .collect()
}

fn table_from_sets(sets: &[Vec<u32>], c: u32) -> LabelSetTable {
    let entries: Vec<(InstanceDigest, Vec<u32>)> = sets
        .iter()
        .enumerate()
        .map(|(i, s)| (indexed_digest(i), s.clone()))
        .collect();
    LabelSetTable::from_label_sets(c, entries).expect("synthetic sets are valid")
}

/// Flattens sparse per-row gradients into a dense row-major vector.
fn flatten_row_grads(grads: &std::collections::BTreeMap<u32, Vec<f64>>, c: usize, d: usize) -> Vec<f64> {
    let mut flat = vec![0.0; c * d];
    for (&u, g) in grads {
        flat[u as usize * d..(u as usize + 1) * d].copy_from_slice(g);
    }
    flat
}

/// Compares an analytic gradient against a central finite difference of
/// `f`, returning the worst relative error.
fn max_grad_err(analytic: &[f64], x0: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let fd = finite_diff_grad(f, x0, FD_EPS);
    analytic
        .iter()
        .zip(&fd)
        .map(|(a, g)| rel_err(*a, *g))
        .fold(0.0, f64::max)
}

fn outcome_from_err(name: &str, trials: usize, coords: usize, max_err: f64) -> CheckOutcome {
    CheckOutcome::new(
        name,
        max_err <= GRAD_TOL,
        format!("max rel err {max_err:.3e} over {trials} instances ({coords} coordinates), tol {GRAD_TOL:.0e}"),
    )
}

/// Finite-difference check of every loss and regularizer gradient plus the
/// encoder backward pass, on random small instances (C ≤ 8, D ≤ 8).
pub fn gradient_suite(seed: u64, trials: usize) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // positive_loss: gradient w.r.t. (embedding ‖ class row).
    let mut max_err = 0.0f64;
    let mut coords = 0;
    for _ in 0..trials {
        let d = rng.gen_range(2..=8);
        let g = random_vec(&mut rng, d);
        let w = random_vec(&mut rng, d);
        let margin = rng.gen_range(0.5..1.0);
        let pl = positive_loss(&g, &w, margin).unwrap();
        let analytic: Vec<f64> = pl.grad_embedding.iter().chain(&pl.grad_class).copied().collect();
        let x0: Vec<f64> = g.iter().chain(&w).copied().collect();
        let err = max_grad_err(&analytic, &x0, |x| {
            positive_loss(&x[..d], &x[d..], margin).unwrap().value
        });
        max_err = max_err.max(err);
        coords += 2 * d;
    }
    out.push(outcome_from_err("positive_loss gradient", trials, coords, max_err));

    // contrastive_loss: gradient w.r.t. (embedding ‖ class matrix).
    let mut max_err = 0.0f64;
    let mut coords = 0;
    for _ in 0..trials {
        let c = rng.gen_range(2..=8usize);
        let d = rng.gen_range(2..=8usize);
        let g = random_vec(&mut rng, d);
        let w = random_unit_rows(&mut rng, c, d);
        let y = rng.gen_range(0..c as u32);
        let hp = random_hp(&mut rng);
        let res = contrastive_loss(&g, y, &w, &hp).unwrap();
        let mut analytic = res.grad_embedding.clone().expect("embedding gradient present");
        analytic.extend(flatten_row_grads(&res.grad_rows, c, d));
        let x0: Vec<f64> = g.iter().chain(w.as_slice()).copied().collect();
        let err = max_grad_err(&analytic, &x0, |x| {
            let m = Matrix::from_vec(c, d, x[d..].to_vec()).unwrap();
            contrastive_loss(&x[..d], y, &m, &hp).unwrap().value
        });
        max_err = max_err.max(err);
        coords += d + c * d;
    }
    out.push(outcome_from_err("contrastive_loss gradient", trials, coords, max_err));

    // The four matrix regularizers share a driver.
    struct MatrixReg {
        name: &'static str,
        needs_sigma: bool,
        topk: bool,
    }
    for reg in [
        MatrixReg { name: "spreadout_reg gradient", needs_sigma: false, topk: false },
        MatrixReg { name: "spreadout_reg_topk gradient", needs_sigma: false, topk: true },
        MatrixReg { name: "correlation_reg gradient", needs_sigma: true, topk: false },
        MatrixReg { name: "correlation_reg_topk gradient", needs_sigma: true, topk: true },
    ] {
        let mut max_err = 0.0f64;
        let mut coords = 0;
        for _ in 0..trials {
            let c = rng.gen_range(2..=8usize);
            let d = rng.gen_range(2..=8usize);
            let w = random_unit_rows(&mut rng, c, d);
            let nu = rng.gen_range(0.4..1.6);
            let k = rng.gen_range(1..=c.saturating_sub(1).max(1));
            let mut sigma = crate::labelsets::SigmaWeights::zeros(c as u32);
            if reg.needs_sigma {
                for u in 0..c as u32 {
                    for v in 0..c as u32 {
                        if u != v && rng.gen_bool(0.7) {
                            sigma.set(u, v, rng.gen_range(0.0..1.5));
                        }
                    }
                }
            }
            let res = match (reg.needs_sigma, reg.topk) {
                (false, false) => spreadout_reg(&w, nu).unwrap(),
                (false, true) => spreadout_reg_topk(&w, k).unwrap(),
                (true, false) => correlation_reg(&w, &sigma, nu).unwrap(),
                (true, true) => correlation_reg_topk(&w, &sigma, k, nu).unwrap(),
            };
            let analytic = flatten_row_grads(&res.grad_rows, c, d);
            let err = max_grad_err(&analytic, w.as_slice(), |x| {
                let m = Matrix::from_vec(c, d, x.to_vec()).unwrap();
                match (reg.needs_sigma, reg.topk) {
                    (false, false) => spreadout_reg(&m, nu).unwrap().value,
                    (false, true) => spreadout_reg_topk(&m, k).unwrap().value,
                    (true, false) => correlation_reg(&m, &sigma, nu).unwrap().value,
                    (true, true) => correlation_reg_topk(&m, &sigma, k, nu).unwrap().value,
                }
            });
            max_err = max_err.max(err);
            coords += c * d;
        }
        out.push(outcome_from_err(reg.name, trials, coords, max_err));
    }

    // fixed_embedding_reg: gradient w.r.t. the class matrix under a random
    // label-set table.
    let mut max_err = 0.0f64;
    let mut coords = 0;
    for _ in 0..trials {
        let c = rng.gen_range(2..=8usize);
        let d = rng.gen_range(2..=8usize);
        let n = rng.gen_range(1..=12usize);
        let w = random_unit_rows(&mut rng, c, d);
        let table = table_from_sets(&random_label_sets(&mut rng, n, c as u32), c as u32);
        let hp = random_hp(&mut rng);
        let res = fixed_embedding_reg(&w, &table, &hp).unwrap();
        let analytic = flatten_row_grads(&res.grad_rows, c, d);
        let err = max_grad_err(&analytic, w.as_slice(), |x| {
            let m = Matrix::from_vec(c, d, x.to_vec()).unwrap();
            fixed_embedding_reg(&m, &table, &hp).unwrap().value
        });
        max_err = max_err.max(err);
        coords += c * d;
    }
    out.push(outcome_from_err("fixed_embedding_reg gradient", trials, coords, max_err));

    // Encoder backward: d/dθ of ⟨t, output⟩ for a fixed random direction t,
    // over every parameter tensor including the active embedding rows.
    // Tiny random nets can die completely on an instance (all hidden units
    // off ⇒ zero pre-normalization vector, a documented forward error), and
    // near-zero norms put the probe next to the normalization singularity;
    // both draws are resampled.
    let mut max_err = 0.0f64;
    let mut coords = 0;
    let mut completed = 0usize;
    let mut attempts = 0usize;
    while completed < trials {
        attempts += 1;
        assert!(attempts <= trials * 200, "too many degenerate encoder draws");
        let dims = DimensionConfig {
            features: rng.gen_range(2..=8),
            embed_dim: rng.gen_range(2..=6),
            hidden1: rng.gen_range(2..=6),
            hidden2: rng.gen_range(2..=6),
            out_dim: rng.gen_range(2..=6),
        };
        let params = init_model(seed ^ (attempts as u64), dims).unwrap();
        let nnz = rng.gen_range(1..=dims.features);
        let mut idx: Vec<u32> = (0..dims.features as u32).collect();
        crate::numeric::seeded_shuffle(&mut idx, &mut rng);
        let pairs: Vec<(u32, f64)> = idx[..nnz]
            .iter()
            .map(|&i| (i, rng.gen_range(0.25..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }))
            .collect();
        let x = SparseVector::from_pairs(pairs).unwrap();
        let t = random_vec(&mut rng, dims.out_dim);

        let cache = match forward(&params, &x) {
            Ok((_, cache)) if cache.norm >= 1e-2 => cache,
            _ => continue,
        };
        completed += 1;
        let grads = backward(&params, &x, &cache, &t).unwrap();

        let flatten_params = |p: &ModelParams| -> Vec<f64> {
            let mut flat = Vec::new();
            flat.extend_from_slice(p.embed.as_slice());
            flat.extend_from_slice(p.w1.as_slice());
            flat.extend_from_slice(&p.b1);
            flat.extend_from_slice(p.w2.as_slice());
            flat.extend_from_slice(&p.b2);
            flat.extend_from_slice(p.w3.as_slice());
            flat.extend_from_slice(&p.b3);
            flat
        };
        let mut analytic = Vec::new();
        let mut embed_flat = vec![0.0; dims.features * dims.embed_dim];
        for (&row, g) in &grads.embed_rows {
            embed_flat[row as usize * dims.embed_dim..(row as usize + 1) * dims.embed_dim]
                .copy_from_slice(g);
        }
        analytic.extend(embed_flat);
        analytic.extend_from_slice(grads.w1.as_slice());
        analytic.extend_from_slice(&grads.b1);
        analytic.extend_from_slice(grads.w2.as_slice());
        analytic.extend_from_slice(&grads.b2);
        analytic.extend_from_slice(grads.w3.as_slice());
        analytic.extend_from_slice(&grads.b3);

        let x0 = flatten_params(&params);
        let rebuild = |flat: &[f64]| -> ModelParams {
            let mut offset = 0usize;
            let mut take = |len: usize| -> Vec<f64> {
                let v = flat[offset..offset + len].to_vec();
                offset += len;
                v
            };
            let matrix = |rows: usize, cols: usize, data: Vec<f64>| {
                Matrix::from_vec(rows, cols, data).unwrap()
            };
            let embed = matrix(dims.features, dims.embed_dim, take(dims.features * dims.embed_dim));
            let w1 = matrix(dims.hidden1, dims.embed_dim, take(dims.hidden1 * dims.embed_dim));
            let b1 = take(dims.hidden1);
            let w2 = matrix(dims.hidden2, dims.hidden1, take(dims.hidden2 * dims.hidden1));
            let b2 = take(dims.hidden2);
            let w3 = matrix(dims.out_dim, dims.hidden2, take(dims.out_dim * dims.hidden2));
            let b3 = take(dims.out_dim);
            ModelParams { dims, embed, w1, b1, w2, b2, w3, b3 }
        };
        let err = max_grad_err(&analytic, &x0, |flat| {
            let p = rebuild(flat);
            let (output, _) = forward(&p, &x).unwrap();
            output.iter().zip(&t).map(|(o, ti)| o * ti).sum()
        });
        max_err = max_err.max(err);
        coords += x0.len();
    }
    out.push(outcome_from_err("encoder backward", trials, coords, max_err));

    out
}

// ---------------------------------------------------------------------------
// σ brute force
// ---------------------------------------------------------------------------

/// Definitionally-direct σ: for every instance and ordered label pair,
/// add weight when `u` is positive and `u'` is negative, then divide by the
/// instance count. `per_instance` swaps the weight 1 for `1/|P_j|`.
pub fn sigma_bruteforce(sets: &[Vec<u32>], num_classes: u32, per_instance: bool) -> Vec<Vec<f64>> {
    let c = num_classes as usize;
    let mut acc = vec![vec![0.0f64; c]; c];
    for set in sets {
        let weight = if per_instance { 1.0 / set.len() as f64 } else { 1.0 };
        for u in 0..num_classes {
            for v in 0..num_classes {
                if u == v {
                    continue;
                }
                if set.contains(&u) && !set.contains(&v) {
                    acc[u as usize][v as usize] += weight;
                }
            }
        }
    }
    for row in &mut acc {
        for x in row.iter_mut() {
            *x /= sets.len() as f64;
        }
    }
    acc
}

/// Exact (bitwise) agreement between `compute_sigma` and the brute force on
/// random label-set datasets, plus the row-normalization invariant.
pub fn sigma_suite(seed: u64, datasets: usize) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    let mut per_instance_mismatches = 0usize;
    let mut worst_row_sum_err = 0.0f64;
    let mut pairs_checked = 0usize;
    for _ in 0..datasets {
        let c = rng.gen_range(2..=8u32);
        let n = rng.gen_range(1..=30usize);
        let sets = random_label_sets(&mut rng, n, c);
        let table = table_from_sets(&sets, c);

        let fast = compute_sigma(&table).unwrap();
        let brute = sigma_bruteforce(&sets, c, false);
        let fast_pi = compute_sigma_per_instance(&table).unwrap();
        let brute_pi = sigma_bruteforce(&sets, c, true);
        for u in 0..c {
            for v in 0..c {
                pairs_checked += 1;
                if fast.get(u, v) != brute[u as usize][v as usize] {
                    mismatches += 1;
                }
                if fast_pi.get(u, v) != brute_pi[u as usize][v as usize] {
                    per_instance_mismatches += 1;
                }
            }
        }

        let normalized = normalize_weights(&fast);
        for u in 0..c {
            let sum = normalized.row_sum(u);
            if sum != 0.0 {
                worst_row_sum_err = worst_row_sum_err.max((sum - 1.0).abs());
            }
        }
    }
    vec![
        CheckOutcome::new(
            "sigma vs brute force (exact)",
            mismatches == 0,
            format!("{mismatches} mismatched of {pairs_checked} pairs over {datasets} datasets"),
        ),
        CheckOutcome::new(
            "per-instance sigma vs brute force (exact)",
            per_instance_mismatches == 0,
            format!("{per_instance_mismatches} mismatched of {pairs_checked} pairs"),
        ),
        CheckOutcome::new(
            "normalized sigma rows sum to 1",
            worst_row_sum_err <= 1e-9,
            format!("worst |row sum − 1| = {worst_row_sum_err:.3e}, tol 1e-9"),
        ),
    ]
}

// ---------------------------------------------------------------------------
// Metric brute force
// ---------------------------------------------------------------------------

/// Selection-sort ranking, scores descending with the earliest index
/// winning ties — a from-scratch restatement of the production tie rule.
pub fn rank_desc_bruteforce(scores: &[f64]) -> Vec<u32> {
    let mut remaining: Vec<u32> = (0..scores.len() as u32).collect();
    let mut out = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let mut best = 0usize;
        for i in 1..remaining.len() {
            if scores[remaining[i] as usize] > scores[remaining[best] as usize] {
                best = i;
            }
        }
        out.push(remaining.remove(best));
    }
    out
}

pub fn precision_at_k_bruteforce(scores: &[Vec<f64>], truth: &[Vec<u32>], k: usize) -> f64 {
    let mut total = 0.0;
    for (row, t) in scores.iter().zip(truth) {
        let ranking = rank_desc_bruteforce(row);
        let kk = k.min(ranking.len());
        let hits = ranking[..kk].iter().filter(|l| t.contains(l)).count();
        total += hits as f64 / k as f64;
    }
    total / scores.len() as f64
}

pub fn map_macro_bruteforce(scores: &[Vec<f64>], truth: &[Vec<u32>], num_classes: u32) -> Option<f64> {
    let mut ap_sum = 0.0;
    let mut counted = 0usize;
    for class in 0..num_classes {
        let positives: Vec<bool> = truth.iter().map(|t| t.contains(&class)).collect();
        let num_pos = positives.iter().filter(|p| **p).count();
        if num_pos == 0 {
            continue;
        }
        let column: Vec<f64> = scores.iter().map(|row| row[class as usize]).collect();
        let order = rank_desc_bruteforce(&column);
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if positives[i as usize] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += ap / num_pos as f64;
        counted += 1;
    }
    (counted > 0).then(|| ap_sum / counted as f64)
}

pub fn map_instance_bruteforce(scores: &[Vec<f64>], truth: &[Vec<u32>]) -> f64 {
    let mut total = 0.0;
    for (row, t) in scores.iter().zip(truth) {
        let order = rank_desc_bruteforce(row);
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, label) in order.iter().enumerate() {
            if t.contains(label) {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        total += ap / t.len() as f64;
    }
    total / scores.len() as f64
}

fn random_batch(rng: &mut ChaCha8Rng) -> (u32, Vec<Vec<f64>>, Vec<Vec<u32>>) {
    let c = rng.gen_range(2..=8u32);
    let n = rng.gen_range(1..=20usize);
    let scores: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let truth = random_label_sets(rng, n, c)
        .into_iter()
        .map(|mut s| {
            s.sort_unstable();
            s.dedup();
            s
        })
        .collect();
    (c, scores, truth)
}

/// Metric agreement with the brute-force definitions on random batches.
pub fn metrics_suite(seed: u64, batches: usize) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5]; // p@1, p@3, p@5, map macro, map instance
    for _ in 0..batches {
        let (c, scores, truth) = random_batch(&mut rng);
        let batch = PredictionBatch::new(c, scores.clone(), truth.clone()).unwrap();
        for (slot, k) in [(0usize, 1usize), (1, 3), (2, 5)] {
            let fast = precision_at_k(&batch, k).unwrap();
            let brute = precision_at_k_bruteforce(&scores, &truth, k);
            worst[slot] = worst[slot].max((fast - brute).abs());
        }
        let fast_macro = mean_average_precision(&batch, MapVariant::MacroByClass).unwrap();
        let brute_macro = map_macro_bruteforce(&scores, &truth, c).expect("truth sets non-empty");
        worst[3] = worst[3].max((fast_macro - brute_macro).abs());
        let fast_inst = mean_average_precision(&batch, MapVariant::ByInstance).unwrap();
        let brute_inst = map_instance_bruteforce(&scores, &truth);
        worst[4] = worst[4].max((fast_inst - brute_inst).abs());
    }
    let names = ["p@1", "p@3", "p@5", "map (macro)", "map (by instance)"];
    names
        .iter()
        .zip(worst)
        .map(|(name, err)| {
            CheckOutcome::new(
                format!("{name} vs brute force"),
                err <= EXACT_TOL,
                format!("max abs diff {err:.3e} over {batches} batches, tol {EXACT_TOL:.0e}"),
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// All-pairs repulsion reference
// ---------------------------------------------------------------------------

/// Naive all-pairs counterpart of the mined repulsion: `Σ_{u≠u'} −d²` with
/// its row gradients, via plain loops. The mined form with `k = C − 1` must
/// agree with this.
pub fn repulsion_allpairs_reference(w: &Matrix) -> (f64, Vec<Vec<f64>>) {
    let (c, d) = (w.rows(), w.cols());
    let mut value = 0.0;
    let mut grads = vec![vec![0.0; d]; c];
    for u in 0..c {
        for v in 0..c {
            if u == v {
                continue;
            }
            let mut dot = 0.0;
            for i in 0..d {
                dot += w.row(u)[i] * w.row(v)[i];
            }
            let dist = 1.0 - dot;
            value -= dist * dist;
            for i in 0..d {
                grads[u][i] += 2.0 * dist * w.row(v)[i];
            }
            for i in 0..d {
                grads[v][i] += 2.0 * dist * w.row(u)[i];
            }
        }
    }
    (value, grads)
}

// ---------------------------------------------------------------------------
// Collapse fixture
// ---------------------------------------------------------------------------

/// The desk-scale fixture every collapse/ordering check runs on: 16 labels
/// in 4 correlated clusters, 2000 training instances with 2.5 labels on
/// average, plus a 500-instance test split, trained for 100 rounds.
pub fn collapse_fixture_spec(algorithm: Algorithm, seed: u64) -> RunSpec {
    // The server step sizes are tuned per algorithm, mirroring how each
    // method would be tuned in practice. The spreadout step uses the raw
    // squared-distance pull on the mined neighbors, which overshoots past
    // orthogonality when stepped too hard, so it takes a small rate. The
    // correlation step scales every pair by a co-occurrence weight that is
    // well below one on this data, so it needs a much larger rate to exert
    // a comparable force. Plain averaging has no server step at all.
    let server_lr = match algorithm {
        Algorithm::FedAws => 0.05,
        Algorithm::FedAlc => 1.5,
        _ => 0.01,
    };
    let train = TrainConfig {
        algorithm,
        rounds: 100,
        pretrain_steps: 200,
        client_lr: 0.3,
        server_lr,
        local_epochs: 1,
        batch_size: 32,
        seed,
        embed_dim: 32,
        hidden1: 64,
        hidden2: 64,
        out_dim: 16,
        ..TrainConfig::default()
    };
    RunSpec {
        train,
        data: DataSource::Synth {
            classes: 16,
            features: 64,
            instances: 2000,
            avg_labels: 2.5,
            clusters: 4,
            test_instances: 500,
            val_frac: 0.05,
        },
    }
}

/// Collapse-relevant summary of one fixture run.
#[derive(Debug, Clone, Copy)]
pub struct FixtureOutcome {
    pub initial_gauge: f64,
    pub final_gauge: f64,
    pub test_p_at_1: f64,
}

/// Runs the fixture end to end for one algorithm and seed.
pub fn run_collapse_fixture(algorithm: Algorithm, seed: u64) -> Result<FixtureOutcome> {
    let spec = collapse_fixture_spec(algorithm, seed);
    let (train, val, test) = materialize_data(&spec)?;
    let result = run_experiment(&train, &val, test.as_ref(), &spec.train)?;
    let final_gauge = result
        .reports
        .last()
        .map(|r| r.collapse_gauge)
        .unwrap_or(result.initial_collapse_gauge);
    Ok(FixtureOutcome {
        initial_gauge: result.initial_collapse_gauge,
        final_gauge,
        test_p_at_1: result.test_metrics.map(|m| m.p_at_1).unwrap_or(0.0),
    })
}

/// The collapse demonstration: plain averaging must lose at least 80% of
/// its initial class-embedding spread, while the correlation-regularized
/// run (λ=1, K=5) must keep more than half of it.
pub fn collapse_suite() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    match run_collapse_fixture(Algorithm::FedAvg, 1) {
        Ok(r) => {
            let ratio = r.final_gauge / r.initial_gauge;
            out.push(CheckOutcome::new(
                "plain averaging collapses",
                ratio < 0.2,
                format!(
                    "gauge {:.4} → {:.4} (ratio {ratio:.3}, required < 0.2)",
                    r.initial_gauge, r.final_gauge
                ),
            ));
        }
        Err(e) => out.push(CheckOutcome::new("plain averaging collapses", false, e.to_string())),
    }
    match run_collapse_fixture(Algorithm::FedAlc, 1) {
        Ok(r) => {
            let ratio = r.final_gauge / r.initial_gauge;
            out.push(CheckOutcome::new(
                "correlation step resists collapse",
                ratio > 0.5,
                format!(
                    "gauge {:.4} → {:.4} (ratio {ratio:.3}, required > 0.5)",
                    r.initial_gauge, r.final_gauge
                ),
            ));
        }
        Err(e) => out.push(CheckOutcome::new(
            "correlation step resists collapse",
            false,
            e.to_string(),
        )),
    }
    out
}

/// Named suites behind `verify --suite`.
pub fn run_suite(name: &str) -> Result<Vec<CheckOutcome>> {
    match name {
        "gradients" => Ok(gradient_suite(0xFEDA, 50)),
        "sigma" => Ok(sigma_suite(0x516d4, 120)),
        "metrics" => Ok(metrics_suite(0x4d45, 100)),
        "collapse" => Ok(collapse_suite()),
        other => Err(Error::InvalidArgument(format!(
            "unknown suite `{other}` (expected gradients, sigma, metrics, or collapse)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes_on_a_small_sample() {
        for outcome in gradient_suite(0xABCD, 6) {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }

    #[test]
    fn sigma_suite_passes_on_a_small_sample() {
        for outcome in sigma_suite(0x5555, 15) {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }

    #[test]
    fn metrics_suite_passes_on_a_small_sample() {
        for outcome in metrics_suite(0x1234, 15) {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }

    #[test]
    fn brute_force_ranking_breaks_ties_towards_low_indices() {
        assert_eq!(rank_desc_bruteforce(&[0.5, 0.9, 0.5]), vec![1, 0, 2]);
        assert_eq!(rank_desc_bruteforce(&[0.7, 0.7, 0.7]), vec![0, 1, 2]);
    }

    #[test]
    fn mined_repulsion_with_full_neighborhood_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let c = rng.gen_range(2..=7usize);
            let d = rng.gen_range(2..=6usize);
            let w = random_unit_rows(&mut rng, c, d);
            let mined = spreadout_reg_topk(&w, c - 1).unwrap();
            let (value, grads) = repulsion_allpairs_reference(&w);
            assert!((mined.value - value).abs() <= EXACT_TOL);
            for u in 0..c as u32 {
                let got = mined.grad_rows.get(&u).cloned().unwrap_or_else(|| vec![0.0; d]);
                for (g, r) in got.iter().zip(&grads[u as usize]) {
                    assert!((g - r).abs() <= EXACT_TOL);
                }
            }
        }
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("everything").is_err());
        assert!(run_suite("gradients").is_ok());
    }
}
