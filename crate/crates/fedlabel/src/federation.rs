//! The round-based training loop: client updates, server aggregation, the
//! server-side embedding step, and the experiment driver.
//!
//! One client owns one class label and holds only instances positive for
//! that label. Every round the server broadcasts the model and each client's
//! class embedding row; clients run local SGD on the positive hinge loss;
//! the server averages the returned models, merges returned rows, and —
//! depending on the algorithm — takes one regularizer step on the class
//! embedding matrix.
//!
//! Determinism contract: for a fixed (seed, config, dataset) the full metric
//! history is bit-identical across runs and across worker-pool sizes. All
//! randomness flows from per-(client, round) seeds, clients are reduced in
//! client order, and parallelism only changes scheduling, never arithmetic.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::data::{build_roster, shard_by_label, ClientShard, LabelRemap, MultiLabelDataset};
use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, precision_at_k, MapVariant, PredictionBatch};
use crate::labelsets::{
    compute_sigma, compute_sigma_per_instance, decode_messages, encode_messages, hash_instance,
    merge_messages, CanonicalizeMode, LabelSetTable, SigmaWeights,
};
use crate::losses::{
    correlation_reg, correlation_reg_topk, fixed_embedding_reg, normalize_weights, positive_loss,
    spreadout_reg, spreadout_reg_topk, HyperParams,
};
use crate::model::{
    backward, forward, init_class_embeddings, init_model, predict_scores, ClassEmbeddings,
    DimensionConfig, ModelGrads, ModelParams,
};
use crate::numeric::{cosine_distance, l2_normalize, mix_seed, seeded_shuffle, sgd_step_inplace};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The five training algorithms. The `-fixed` variants freeze the class
/// embedding matrix for the whole run: clients update the encoder only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Plain parameter averaging; class embedding rows are trained on the
    /// clients and merged, with no server-side repulsion. Collapses.
    FedAvg,
    /// Parameter averaging against a frozen random class embedding matrix.
    FedAvgFixed,
    /// Averaging plus a server-side spreadout step on the class embeddings.
    FedAws,
    /// Averaging plus a server-side correlation-weighted repulsion step,
    /// with the weights estimated from collected label sets.
    FedAlc,
    /// Class embeddings pre-trained once from collected label sets, then
    /// frozen; only the encoder is trained federatedly.
    FedAlcFixed,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::FedAvg,
        Algorithm::FedAvgFixed,
        Algorithm::FedAws,
        Algorithm::FedAlc,
        Algorithm::FedAlcFixed,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedAvgFixed => "fedavg-fixed",
            Algorithm::FedAws => "fedaws",
            Algorithm::FedAlc => "fedalc",
            Algorithm::FedAlcFixed => "fedalc-fixed",
        }
    }

    /// Whether clients update and return their class embedding row.
    pub fn dynamic_class_embeddings(&self) -> bool {
        matches!(self, Algorithm::FedAvg | Algorithm::FedAws | Algorithm::FedAlc)
    }

    /// Whether the run starts with the label-set collection protocol.
    pub fn collects_label_sets(&self) -> bool {
        matches!(self, Algorithm::FedAlc | Algorithm::FedAlcFixed)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .iter()
            .find(|a| a.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown algorithm `{s}` (expected one of fedavg, fedavg-fixed, fedaws, fedalc, fedalc-fixed)"
                ))
            })
    }
}

/// How the collected co-occurrence weights enter the correlation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    /// Use the empirical frequencies as estimated.
    Raw,
    /// Row-normalize them first, so every class distributes one unit of
    /// repulsion over its negatives.
    Normalized,
}

impl std::str::FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(SigmaMode::Raw),
            "normalized" => Ok(SigmaMode::Normalized),
            other => Err(Error::InvalidArgument(format!(
                "unknown sigma mode `{other}` (expected `raw` or `normalized`)"
            ))),
        }
    }
}

/// Everything a run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Communication rounds T.
    pub rounds: usize,
    /// Full-gradient pre-training steps for the fixed-embedding variant.
    pub pretrain_steps: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    /// Local SGD epochs per round. 0 turns clients into pure evaluators.
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hp: HyperParams,
    pub sigma_mode: SigmaMode,
    /// Estimate σ with per-instance weights 1/|P_j| instead of 1.
    pub sigma_per_instance: bool,
    /// Use the all-pairs regularizer instead of the mined top-K form.
    pub full_pair_reg: bool,
    pub canonicalize: CanonicalizeMode,
    pub embed_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub out_dim: usize,
    pub map_variant: MapVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedAvg,
            rounds: 100,
            pretrain_steps: 100,
            client_lr: 0.1,
            server_lr: 1e-4,
            local_epochs: 1,
            batch_size: 32,
            seed: 7,
            hp: HyperParams::default(),
            sigma_mode: SigmaMode::Raw,
            sigma_per_instance: false,
            full_pair_reg: false,
            canonicalize: CanonicalizeMode::RawFeatures,
            embed_dim: 32,
            hidden1: 64,
            hidden2: 64,
            out_dim: 32,
            map_variant: MapVariant::MacroByClass,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(self.client_lr > 0.0 && self.client_lr.is_finite()) {
            return Err(Error::Config(format!(
                "client_lr must be positive, got {}",
                self.client_lr
            )));
        }
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) {
            return Err(Error::Config(format!(
                "server_lr must be positive, got {}",
                self.server_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.embed_dim == 0 || self.hidden1 == 0 || self.hidden2 == 0 || self.out_dim == 0 {
            return Err(Error::Config("model dimensions must all be positive".into()));
        }
        self.hp.validate()
    }

    pub fn dimension_config(&self, num_features: usize) -> DimensionConfig {
        DimensionConfig {
            features: num_features,
            embed_dim: self.embed_dim,
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            out_dim: self.out_dim,
        }
    }
}

// Arbitrary distinct tags so the model init, class-embedding init, and every
// (client, round) pair draw from independent streams of the master seed.
const SEED_MODEL_INIT: u64 = 0x4d4f_4445_4c30;
const SEED_CLASS_INIT: u64 = 0x434c_4153_5330;
const SEED_CLIENT: u64 = 0x434c_4945_4e54;

fn client_round_seed(seed: u64, label: u32, round: usize) -> u64 {
    mix_seed(mix_seed(mix_seed(seed, SEED_CLIENT), label as u64), round as u64)
}

/// What a client sends back after local training.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub params: ModelParams,
    pub class_row: Vec<f64>,
    /// Mean positive loss over every instance visit during this update.
    pub mean_loss: f64,
}

/// Local training on one client: `local_epochs` passes of mini-batch SGD on
/// the positive hinge loss, updating a copy of the encoder and — in the
/// dynamic algorithms — the client's own class embedding row, which is
/// re-projected onto the unit sphere after every step.
///
/// With `local_epochs = 0` nothing moves and the update just reports the
/// mean loss over the shard.
pub fn client_update(
    params: &ModelParams,
    class_row: &[f64],
    shard: &ClientShard,
    cfg: &TrainConfig,
    round: usize,
) -> Result<ClientUpdate> {
    if shard.instances.is_empty() {
        return Err(Error::Degenerate(format!(
            "client for label {} has an empty shard",
            shard.label
        )));
    }
    if class_row.len() != params.dims.out_dim {
        return Err(Error::LengthMismatch {
            left: class_row.len(),
            right: params.dims.out_dim,
            context: "class row vs model output",
        });
    }
    let dynamic = cfg.algorithm.dynamic_class_embeddings();
    let mut theta = params.clone();
    let mut w = class_row.to_vec();
    let mut loss_sum = 0.0;
    let mut visits = 0usize;

    if cfg.local_epochs == 0 {
        for x in &shard.instances {
            let (embedding, _) = forward(&theta, x)?;
            loss_sum += positive_loss(&embedding, &w, cfg.hp.margin_pos)?.value;
            visits += 1;
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(client_round_seed(cfg.seed, shard.label, round));
        let mut order: Vec<usize> = (0..shard.instances.len()).collect();
        for _ in 0..cfg.local_epochs {
            seeded_shuffle(&mut order, &mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let inv_b = 1.0 / batch.len() as f64;
                let mut grads = ModelGrads::zeros(theta.dims);
                let mut w_grad = vec![0.0; w.len()];
                let mut active = false;
                for &idx in batch {
                    let x = &shard.instances[idx];
                    let (embedding, cache) = forward(&theta, x)?;
                    let pl = positive_loss(&embedding, &w, cfg.hp.margin_pos)?;
                    loss_sum += pl.value;
                    visits += 1;
                    if pl.value != 0.0 {
                        let g = backward(&theta, x, &cache, &pl.grad_embedding)?;
                        grads.add_scaled(&g, inv_b);
                        for (acc, gj) in w_grad.iter_mut().zip(&pl.grad_class) {
                            *acc += inv_b * gj;
                        }
                        active = true;
                    }
                }
                theta.apply_grads(&grads, cfg.client_lr)?;
                // A zero step must be an exact no-op, so the projection is
                // skipped when nothing moved.
                if dynamic && active && cfg.client_lr != 0.0 {
                    sgd_step_inplace(&mut w, &w_grad, cfg.client_lr);
                    w = l2_normalize(&w)?;
                }
            }
        }
    }

    Ok(ClientUpdate {
        params: theta,
        class_row: w,
        mean_loss: loss_sum / visits as f64,
    })
}

/// Elementwise arithmetic mean of parameter sets, reduced in list order.
pub fn server_aggregate(thetas: &[ModelParams]) -> Result<ModelParams> {
    let first = thetas
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot aggregate zero models".into()))?;
    let mut acc = first.zeros_like();
    for theta in thetas {
        acc.add_assign(theta)?;
    }
    acc.scale_assign(1.0 / thetas.len() as f64);
    Ok(acc)
}

/// Replaces row `y` with the row client `y` returned; all other rows stay
/// bit-identical. Rejects duplicate class indices.
pub fn server_merge_embeddings(
    w: &mut ClassEmbeddings,
    returned: &[(u32, Vec<f64>)],
) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (label, row) in returned {
        if !seen.insert(*label) {
            return Err(Error::InvalidArgument(format!(
                "class {label} returned more than one embedding row"
            )));
        }
        w.set_row(*label as usize, row)?;
    }
    Ok(())
}

/// One repulsion step of size `λ · server_lr` on the class embedding matrix:
/// spreadout for `fedaws`, correlation-weighted for `fedalc` (mined top-K
/// forms by default), identity for the other algorithms. Touched rows are
/// re-projected onto the unit sphere; with λ = 0, or when no pair
/// contributes, the matrix is untouched bit for bit.
///
/// Returns the regularizer value before the step (0 when no regularizer
/// applies).
pub fn server_embedding_step(
    w: &mut ClassEmbeddings,
    cfg: &TrainConfig,
    sigma: Option<&SigmaWeights>,
) -> Result<f64> {
    let reg = match cfg.algorithm {
        Algorithm::FedAws => {
            if cfg.full_pair_reg {
                spreadout_reg(w.matrix(), cfg.hp.nu)?
            } else {
                spreadout_reg_topk(w.matrix(), cfg.hp.mining_k)?
            }
        }
        Algorithm::FedAlc => {
            let sigma = sigma.ok_or_else(|| {
                Error::InvalidArgument(
                    "the correlation step needs collected label-set weights".into(),
                )
            })?;
            if cfg.full_pair_reg {
                correlation_reg(w.matrix(), sigma, cfg.hp.nu)?
            } else {
                correlation_reg_topk(w.matrix(), sigma, cfg.hp.mining_k, cfg.hp.nu)?
            }
        }
        _ => return Ok(0.0),
    };
    let step = cfg.hp.lambda * cfg.server_lr;
    if step == 0.0 {
        return Ok(reg.value);
    }
    for (&u, g) in &reg.grad_rows {
        let row = w.matrix_mut().row_mut(u as usize);
        sgd_step_inplace(row, g, step);
        let projected = l2_normalize(row)?;
        row.copy_from_slice(&projected);
    }
    Ok(reg.value)
}

/// Pre-trains a class embedding matrix from collected label sets:
/// `pretrain_steps` full-gradient steps of size `λ · server_lr` on the
/// attraction/repulsion objective, rows re-projected after every step.
/// With zero steps the random initialization is returned as-is.
pub fn train_fixed_embeddings(
    table: &LabelSetTable,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ClassEmbeddings> {
    let mut w = init_class_embeddings(
        mix_seed(seed, SEED_CLASS_INIT),
        table.num_classes() as usize,
        cfg.out_dim,
    )?;
    let step = cfg.hp.lambda * cfg.server_lr;
    if step == 0.0 {
        return Ok(w);
    }
    for _ in 0..cfg.pretrain_steps {
        let reg = fixed_embedding_reg(w.matrix(), table, &cfg.hp)?;
        for (&u, g) in &reg.grad_rows {
            let row = w.matrix_mut().row_mut(u as usize);
            sgd_step_inplace(row, g, step);
            let projected = l2_normalize(row)?;
            row.copy_from_slice(&projected);
        }
    }
    Ok(w)
}

/// Mean cosine distance over unordered row pairs: 0 when every class
/// embedding has collapsed onto one point, 1 for an orthonormal set, 2 for
/// an antipodal pair. The run history tracks this as the collapse gauge.
pub fn collapse_gauge(w: &ClassEmbeddings) -> Result<f64> {
    let c = w.num_classes();
    if c < 2 {
        return Err(Error::Degenerate(
            "pairwise spread needs at least two classes".into(),
        ));
    }
    let mut sum = 0.0;
    for u in 0..c {
        for v in (u + 1)..c {
            sum += cosine_distance(w.row(u), w.row(v))?;
        }
    }
    Ok(sum / (c * (c - 1) / 2) as f64)
}

/// Runs the label-set collection protocol over every shard: clients hash
/// each instance, encode (digest, label) messages onto the wire, and the
/// server decodes and merges them into per-instance positive label sets.
pub fn collect_label_sets(
    shards: &[ClientShard],
    mode: CanonicalizeMode,
    initial_model: Option<&ModelParams>,
    num_classes: u32,
) -> Result<LabelSetTable> {
    let mut received = Vec::new();
    for shard in shards {
        let mut messages = Vec::with_capacity(shard.instances.len());
        for x in &shard.instances {
            messages.push(hash_instance(x, shard.label, mode, initial_model)?);
        }
        let wire = encode_messages(&messages);
        received.extend(decode_messages(&wire)?);
    }
    merge_messages(&received, num_classes)
}

/// An evaluation instance whose labels have already been remapped to the
/// client roster. Never empty-labeled — those are filtered out upstream.
#[derive(Debug, Clone)]
pub struct EvalInstance {
    pub features: crate::numeric::SparseVector,
    pub labels: Vec<u32>,
}

/// Remaps an evaluation split onto the roster, dropping instances whose
/// label set becomes empty. Returns the kept instances and the drop count.
pub fn remap_eval_instances(
    ds: &MultiLabelDataset,
    remap: &LabelRemap,
) -> (Vec<EvalInstance>, usize) {
    let mut kept = Vec::with_capacity(ds.len());
    let mut skipped = 0usize;
    for inst in &ds.instances {
        let labels = remap.map_set(&inst.labels);
        if labels.is_empty() {
            skipped += 1;
            continue;
        }
        kept.push(EvalInstance {
            features: inst.features.clone(),
            labels,
        });
    }
    (kept, skipped)
}

/// The fixed metric set reported every round and for the final test pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub p_at_1: f64,
    pub p_at_3: f64,
    pub p_at_5: f64,
    pub map: f64,
}

/// Scores every instance under the current encoder and class embeddings and
/// computes the ranking metrics.
pub fn evaluate_model(
    params: &ModelParams,
    w: &ClassEmbeddings,
    instances: &[EvalInstance],
    variant: MapVariant,
) -> Result<Metrics> {
    if instances.is_empty() {
        return Err(Error::Degenerate(
            "evaluation split is empty (after label remapping)".into(),
        ));
    }
    let scores: Vec<Vec<f64>> = instances
        .par_iter()
        .map(|inst| {
            let (embedding, _) = forward(params, &inst.features)?;
            predict_scores(w, &embedding)
        })
        .collect::<Result<_>>()?;
    let truth: Vec<Vec<u32>> = instances.iter().map(|i| i.labels.clone()).collect();
    let batch = PredictionBatch::new(w.num_classes() as u32, scores, truth)?;
    Ok(Metrics {
        p_at_1: precision_at_k(&batch, 1)?,
        p_at_3: precision_at_k(&batch, 3)?,
        p_at_5: precision_at_k(&batch, 5)?,
        map: mean_average_precision(&batch, variant)?,
    })
}

/// Everything the server carries between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub params: ModelParams,
    pub class_embeddings: ClassEmbeddings,
    pub sigma: Option<SigmaWeights>,
}

/// One row of the metric history.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based: report `t` describes the state after `t` rounds.
    pub round: usize,
    pub p_at_1: f64,
    pub p_at_3: f64,
    pub p_at_5: f64,
    pub map: f64,
    pub collapse_gauge: f64,
    pub mean_client_loss: f64,
}

/// One full-participation round: broadcast, parallel client updates,
/// in-order aggregation, embedding merge (dynamic algorithms), server
/// embedding step, and a validation pass.
pub fn run_round(
    state: &mut ServerState,
    shards: &[ClientShard],
    cfg: &TrainConfig,
    validation: &[EvalInstance],
) -> Result<RoundReport> {
    let n = shards.len();
    if n == 0 {
        return Err(Error::Degenerate("no client shards".into()));
    }
    if n != state.class_embeddings.num_classes() {
        return Err(Error::LengthMismatch {
            left: n,
            right: state.class_embeddings.num_classes(),
            context: "client shards vs class embedding rows",
        });
    }
    let round = state.round;
    let dynamic = cfg.algorithm.dynamic_class_embeddings();

    // Clients run on the worker pool in blocks; the reduction happens on
    // this thread in client order, so thread count never changes the sums.
    // Blocks bound how many returned models are alive at once.
    let block_len = (rayon::current_num_threads().max(1)) * 4;
    let mut acc = state.params.zeros_like();
    let mut merged: Vec<(u32, Vec<f64>)> = Vec::new();
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..n).collect();
    for block in indices.chunks(block_len) {
        let updates: Vec<ClientUpdate> = block
            .par_iter()
            .map(|&i| {
                let shard = &shards[i];
                let row = state.class_embeddings.row(shard.label as usize);
                client_update(&state.params, row, shard, cfg, round)
            })
            .collect::<Result<_>>()?;
        for (&i, update) in block.iter().zip(updates) {
            acc.add_assign(&update.params)?;
            loss_sum += update.mean_loss;
            if dynamic {
                merged.push((shards[i].label, update.class_row));
            }
        }
    }
    acc.scale_assign(1.0 / n as f64);
    state.params = acc;
    if dynamic {
        server_merge_embeddings(&mut state.class_embeddings, &merged)?;
    }
    server_embedding_step(&mut state.class_embeddings, cfg, state.sigma.as_ref())?;

    let metrics = evaluate_model(&state.params, &state.class_embeddings, validation, cfg.map_variant)?;
    let gauge = collapse_gauge(&state.class_embeddings)?;
    state.round += 1;
    Ok(RoundReport {
        round: state.round,
        p_at_1: metrics.p_at_1,
        p_at_3: metrics.p_at_3,
        p_at_5: metrics.p_at_5,
        map: metrics.map,
        collapse_gauge: gauge,
        mean_client_loss: loss_sum / n as f64,
    })
}

/// The full history plus everything needed to evaluate or resume the run.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub reports: Vec<RoundReport>,
    pub state: ServerState,
    pub remap: LabelRemap,
    /// Collapse gauge of the class embeddings before round 1.
    pub initial_collapse_gauge: f64,
    /// `(round, P@1)` of the best validation round.
    pub best_validation: Option<(usize, f64)>,
    /// Final-model metrics on the test split, when one was supplied.
    pub test_metrics: Option<Metrics>,
    pub skipped_val: usize,
    pub skipped_test: usize,
}

/// End-to-end driver: shards the training set (one client per label with
/// instances), runs label collection and fixed-embedding pre-training where
/// the algorithm calls for them, then executes `rounds` federated rounds,
/// evaluating on the validation split every round and on the test split
/// once at the end.
pub fn run_experiment(
    train: &MultiLabelDataset,
    val: &MultiLabelDataset,
    test: Option<&MultiLabelDataset>,
    cfg: &TrainConfig,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Degenerate("training split is empty".into()));
    }
    let (roster, remap) = build_roster(shard_by_label(train));
    let num_classes = remap.num_kept();
    if num_classes < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 labels with training instances, found {num_classes}"
        )));
    }
    let (val_instances, skipped_val) = remap_eval_instances(val, &remap);
    if skipped_val > 0 {
        log::info!("validation: excluded {skipped_val} instance(s) with no rostered label");
    }
    if val_instances.is_empty() {
        return Err(Error::Degenerate(
            "validation split is empty; per-round metrics need at least one instance".into(),
        ));
    }

    let dims = cfg.dimension_config(train.num_features);
    let params = init_model(mix_seed(cfg.seed, SEED_MODEL_INIT), dims)?;
    let mut class_embeddings = init_class_embeddings(
        mix_seed(cfg.seed, SEED_CLASS_INIT),
        num_classes as usize,
        cfg.out_dim,
    )?;

    // Label-set collection happens once, up front, against the initial
    // model when canonicalizing by embedding.
    let mut sigma = None;
    if cfg.algorithm.collects_label_sets() {
        let table = collect_label_sets(&roster, cfg.canonicalize, Some(&params), num_classes)?;
        log::info!(
            "label collection: {} distinct instances across {} clients",
            table.num_instances(),
            roster.len()
        );
        let raw = if cfg.sigma_per_instance {
            compute_sigma_per_instance(&table)?
        } else {
            compute_sigma(&table)?
        };
        sigma = Some(match cfg.sigma_mode {
            SigmaMode::Raw => raw,
            SigmaMode::Normalized => normalize_weights(&raw),
        });
        if cfg.algorithm == Algorithm::FedAlcFixed {
            class_embeddings = train_fixed_embeddings(&table, cfg, cfg.seed)?;
        }
    }

    let initial_collapse_gauge = collapse_gauge(&class_embeddings)?;
    let mut state = ServerState {
        round: 0,
        params,
        class_embeddings,
        sigma,
    };
    let mut reports = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        reports.push(run_round(&mut state, &roster, cfg, &val_instances)?);
    }

    let best_validation = reports
        .iter()
        .max_by(|a, b| a.p_at_1.total_cmp(&b.p_at_1))
        .map(|r| (r.round, r.p_at_1));
    if let Some((round, p1)) = best_validation {
        log::info!("best validation P@1 {p1:.4} at round {round} (final round reported)");
    }

    let mut test_metrics = None;
    let mut skipped_test = 0;
    if let Some(test_ds) = test {
        let (test_instances, skipped) = remap_eval_instances(test_ds, &remap);
        skipped_test = skipped;
        if skipped > 0 {
            log::info!("test: excluded {skipped} instance(s) with no rostered label");
        }
        if !test_instances.is_empty() {
            test_metrics = Some(evaluate_model(
                &state.params,
                &state.class_embeddings,
                &test_instances,
                cfg.map_variant,
            )?);
        }
    }

    Ok(ExperimentResult {
        reports,
        state,
        remap,
        initial_collapse_gauge,
        best_validation,
        test_metrics,
        skipped_val,
        skipped_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_multilabel, Instance, SynthConfig};
    use crate::numeric::SparseVector;

    fn tiny_dims() -> DimensionConfig {
        DimensionConfig {
            features: 6,
            embed_dim: 4,
            hidden1: 5,
            hidden2: 4,
            out_dim: 3,
        }
    }

    fn tiny_cfg(algorithm: Algorithm) -> TrainConfig {
        TrainConfig {
            algorithm,
            rounds: 2,
            pretrain_steps: 20,
            client_lr: 0.05,
            server_lr: 0.01,
            local_epochs: 1,
            batch_size: 2,
            seed: 11,
            embed_dim: 4,
            hidden1: 5,
            hidden2: 4,
            out_dim: 3,
            ..TrainConfig::default()
        }
    }

    fn x(pairs: &[(u32, f64)]) -> SparseVector {
        SparseVector::from_pairs(pairs.to_vec()).unwrap()
    }

    fn tiny_shard(label: u32) -> ClientShard {
        ClientShard {
            label,
            instances: vec![
                x(&[(0, 1.0), (2, -0.5)]),
                x(&[(1, 0.7), (4, 1.2)]),
                x(&[(3, -1.1), (5, 0.3)]),
            ],
        }
    }

    fn tiny_dataset() -> MultiLabelDataset {
        // Four labels in two perfectly correlated pairs.
        let mut instances = Vec::new();
        for (i, labels) in [(0u32, vec![0u32, 1]), (1, vec![0, 1]), (2, vec![2, 3]), (3, vec![2, 3])] {
            instances.push(Instance {
                features: x(&[(i % 6, 1.0), ((i + 2) % 6, 0.5 + i as f64)]),
                labels,
            });
        }
        MultiLabelDataset {
            num_features: 6,
            num_classes: 4,
            instances,
        }
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("fedprox".parse::<Algorithm>().is_err());
    }

    #[test]
    fn client_update_zero_lr_returns_inputs() {
        let params = init_model(3, tiny_dims()).unwrap();
        let w = init_class_embeddings(4, 2, 3).unwrap();
        let mut cfg = tiny_cfg(Algorithm::FedAvg);
        cfg.client_lr = 0.0;
        let up = client_update(&params, w.row(0), &tiny_shard(0), &cfg, 0).unwrap();
        assert_eq!(up.params, params);
        assert_eq!(up.class_row, w.row(0));
        assert!(up.mean_loss >= 0.0);
    }

    #[test]
    fn client_update_inactive_hinge_changes_nothing() {
        let params = init_model(5, tiny_dims()).unwrap();
        let shard = ClientShard {
            label: 0,
            instances: vec![x(&[(0, 1.0)])],
        };
        // Make the class row equal the instance's own embedding: the score
        // is 1 ≥ margin, so the hinge is inactive and nothing may move.
        let (embedding, _) = forward(&params, &shard.instances[0]).unwrap();
        let cfg = tiny_cfg(Algorithm::FedAvg);
        let up = client_update(&params, &embedding, &shard, &cfg, 0).unwrap();
        assert_eq!(up.params, params);
        assert_eq!(up.class_row, embedding);
        assert_eq!(up.mean_loss, 0.0);
    }

    #[test]
    fn client_update_descends_on_single_instance() {
        let params = init_model(6, tiny_dims()).unwrap();
        let w = init_class_embeddings(7, 2, 3).unwrap();
        let shard = ClientShard {
            label: 1,
            instances: vec![x(&[(2, 1.5), (3, -0.4)])],
        };
        let mut cfg = tiny_cfg(Algorithm::FedAvg);
        cfg.client_lr = 1e-3;
        let before = client_update(&params, w.row(1), &shard, &{
            let mut c = cfg.clone();
            c.local_epochs = 0;
            c
        }, 0)
        .unwrap()
        .mean_loss;
        let up = client_update(&params, w.row(1), &shard, &cfg, 0).unwrap();
        let after = client_update(&up.params, &up.class_row, &shard, &{
            let mut c = cfg;
            c.local_epochs = 0;
            c
        }, 0)
        .unwrap()
        .mean_loss;
        assert!(after <= before, "loss rose from {before} to {after}");
    }

    #[test]
    fn client_update_freezes_rows_in_fixed_modes() {
        let params = init_model(8, tiny_dims()).unwrap();
        let w = init_class_embeddings(9, 2, 3).unwrap();
        for alg in [Algorithm::FedAvgFixed, Algorithm::FedAlcFixed] {
            let cfg = tiny_cfg(alg);
            let up = client_update(&params, w.row(0), &tiny_shard(0), &cfg, 0).unwrap();
            assert_eq!(up.class_row, w.row(0), "{alg} must not move the class row");
            assert_ne!(up.params, params, "{alg} still trains the encoder");
        }
    }

    #[test]
    fn client_update_is_deterministic_and_round_sensitive() {
        let params = init_model(10, tiny_dims()).unwrap();
        let w = init_class_embeddings(11, 2, 3).unwrap();
        let cfg = tiny_cfg(Algorithm::FedAvg);
        let a = client_update(&params, w.row(0), &tiny_shard(0), &cfg, 3).unwrap();
        let b = client_update(&params, w.row(0), &tiny_shard(0), &cfg, 3).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.class_row, b.class_row);
        assert_eq!(a.mean_loss, b.mean_loss);
        // Other rounds shuffle differently; with three instances and B=2 a
        // few partitions coincide, but not across a whole range of rounds.
        let some_round_differs = (4..10).any(|round| {
            client_update(&params, w.row(0), &tiny_shard(0), &cfg, round)
                .unwrap()
                .params
                != a.params
        });
        assert!(some_round_differs);
    }

    #[test]
    fn aggregate_of_two_copies_is_exact() {
        let theta = init_model(12, tiny_dims()).unwrap();
        let mean = server_aggregate(&[theta.clone(), theta.clone()]).unwrap();
        assert_eq!(mean, theta);
    }

    #[test]
    fn aggregate_zero_and_double_recovers_theta() {
        let theta = init_model(13, tiny_dims()).unwrap();
        let mut doubled = theta.clone();
        doubled.scale_assign(2.0);
        let mean = server_aggregate(&[theta.zeros_like(), doubled]).unwrap();
        assert_eq!(mean, theta);
    }

    fn assert_params_close(a: &ModelParams, b: &ModelParams, tol: f64) {
        let pairs = [
            (a.embed.as_slice(), b.embed.as_slice()),
            (a.w1.as_slice(), b.w1.as_slice()),
            (a.w2.as_slice(), b.w2.as_slice()),
            (a.w3.as_slice(), b.w3.as_slice()),
            (&a.b1[..], &b.b1[..]),
            (&a.b2[..], &b.b2[..]),
            (&a.b3[..], &b.b3[..]),
        ];
        for (left, right) in pairs {
            for (l, r) in left.iter().zip(right) {
                assert!((l - r).abs() <= tol * l.abs().max(r.abs()).max(1.0));
            }
        }
    }

    #[test]
    fn aggregate_mean_of_means_matches_global_mean() {
        let thetas: Vec<ModelParams> = (0..4).map(|s| init_model(20 + s, tiny_dims()).unwrap()).collect();
        let global = server_aggregate(&thetas).unwrap();
        let m1 = server_aggregate(&thetas[..2]).unwrap();
        let m2 = server_aggregate(&thetas[2..]).unwrap();
        let of_means = server_aggregate(&[m1, m2]).unwrap();
        assert_params_close(&global, &of_means, 1e-12);
    }

    #[test]
    fn aggregate_is_permutation_invariant_within_tolerance() {
        let thetas: Vec<ModelParams> = (0..5).map(|s| init_model(30 + s, tiny_dims()).unwrap()).collect();
        let forward_order = server_aggregate(&thetas).unwrap();
        let reversed: Vec<ModelParams> = thetas.iter().rev().cloned().collect();
        let backward_order = server_aggregate(&reversed).unwrap();
        assert_params_close(&forward_order, &backward_order, 1e-12);
    }

    #[test]
    fn aggregate_rejects_empty_and_mismatched() {
        assert!(server_aggregate(&[]).is_err());
        let a = init_model(1, tiny_dims()).unwrap();
        let mut other_dims = tiny_dims();
        other_dims.hidden1 = 7;
        let b = init_model(1, other_dims).unwrap();
        assert!(server_aggregate(&[a, b]).is_err());
    }

    #[test]
    fn merge_replaces_exactly_the_returned_rows() {
        let mut w = init_class_embeddings(40, 4, 3).unwrap();
        let original = w.clone();
        server_merge_embeddings(&mut w, &[]).unwrap();
        assert_eq!(w, original);

        let new_row = l2_normalize(&[1.0, 2.0, 3.0]).unwrap();
        server_merge_embeddings(&mut w, &[(2, new_row.clone())]).unwrap();
        assert_eq!(w.row(2), &new_row[..]);
        for u in [0usize, 1, 3] {
            assert_eq!(w.row(u), original.row(u), "row {u} must be untouched");
        }

        let err = server_merge_embeddings(&mut w, &[(1, new_row.clone()), (1, new_row)]);
        assert!(err.is_err());
    }

    #[test]
    fn embedding_step_is_identity_for_averaging_modes() {
        for alg in [Algorithm::FedAvg, Algorithm::FedAvgFixed, Algorithm::FedAlcFixed] {
            let mut w = init_class_embeddings(41, 3, 3).unwrap();
            let before = w.clone();
            let value = server_embedding_step(&mut w, &tiny_cfg(alg), None).unwrap();
            assert_eq!(w, before);
            assert_eq!(value, 0.0);
        }
    }

    #[test]
    fn embedding_step_zero_lambda_is_bit_exact_noop() {
        let mut w = init_class_embeddings(42, 4, 3).unwrap();
        let before = w.clone();
        let mut cfg = tiny_cfg(Algorithm::FedAws);
        cfg.hp.lambda = 0.0;
        let value = server_embedding_step(&mut w, &cfg, None).unwrap();
        assert_eq!(w, before);
        assert!(value != 0.0, "regularizer value is still reported");
    }

    #[test]
    fn embedding_step_pushes_near_identical_rows_apart() {
        // Two nearly identical unit rows; one spreadout step must increase
        // their distance.
        let a = l2_normalize(&[1.0, 0.01, 0.0]).unwrap();
        let b = l2_normalize(&[1.0, 0.0, 0.01]).unwrap();
        let mut m = crate::numeric::Matrix::zeros(2, 3);
        m.row_mut(0).copy_from_slice(&a);
        m.row_mut(1).copy_from_slice(&b);
        let mut w = ClassEmbeddings::from_matrix(m).unwrap();
        let before = cosine_distance(w.row(0), w.row(1)).unwrap();
        let mut cfg = tiny_cfg(Algorithm::FedAws);
        cfg.hp.mining_k = 1;
        cfg.server_lr = 0.01;
        server_embedding_step(&mut w, &cfg, None).unwrap();
        let after = cosine_distance(w.row(0), w.row(1)).unwrap();
        assert!(after > before, "distance {before} did not grow ({after})");
    }

    #[test]
    fn embedding_step_requires_sigma_for_correlation() {
        let mut w = init_class_embeddings(43, 3, 3).unwrap();
        let cfg = tiny_cfg(Algorithm::FedAlc);
        assert!(server_embedding_step(&mut w, &cfg, None).is_err());
        let sigma = SigmaWeights::uniform(3, 1.0);
        assert!(server_embedding_step(&mut w, &cfg, Some(&sigma)).is_ok());
    }

    fn toy_table() -> LabelSetTable {
        let ds = tiny_dataset();
        let shards = shard_by_label(&ds);
        collect_label_sets(&shards, CanonicalizeMode::RawFeatures, None, ds.num_classes).unwrap()
    }

    #[test]
    fn fixed_training_zero_steps_returns_initialization() {
        let table = toy_table();
        let mut cfg = tiny_cfg(Algorithm::FedAlcFixed);
        cfg.pretrain_steps = 0;
        let w = train_fixed_embeddings(&table, &cfg, 5).unwrap();
        let init = init_class_embeddings(mix_seed(5, SEED_CLASS_INIT), 4, cfg.out_dim).unwrap();
        assert_eq!(w, init);
    }

    #[test]
    fn fixed_training_descends_with_small_step() {
        let table = toy_table();
        let mut cfg = tiny_cfg(Algorithm::FedAlcFixed);
        cfg.server_lr = 1e-3;
        let mut w = init_class_embeddings(mix_seed(6, SEED_CLASS_INIT), 4, cfg.out_dim).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let reg = fixed_embedding_reg(w.matrix(), &table, &cfg.hp).unwrap();
            assert!(
                reg.value <= last + 1e-9,
                "objective rose from {last} to {}",
                reg.value
            );
            last = reg.value;
            for (&u, g) in &reg.grad_rows {
                let row = w.matrix_mut().row_mut(u as usize);
                sgd_step_inplace(row, g, cfg.hp.lambda * cfg.server_lr);
                let projected = l2_normalize(row).unwrap();
                row.copy_from_slice(&projected);
            }
        }
    }

    #[test]
    fn fixed_training_with_disjoint_singles_ignores_alpha() {
        // Single-label instances: no positive pairs, so the attraction
        // weight cannot matter — trajectories must match bit for bit.
        let instances = vec![
            ([1u8; 32], vec![0u32]),
            ([2u8; 32], vec![1u32]),
            ([3u8; 32], vec![2u32]),
        ];
        let table = LabelSetTable::from_label_sets(3, instances).unwrap();
        let mut cfg = tiny_cfg(Algorithm::FedAlcFixed);
        cfg.pretrain_steps = 15;
        cfg.hp.alpha = 0.0;
        let w_zero = train_fixed_embeddings(&table, &cfg, 9).unwrap();
        cfg.hp.alpha = 7.5;
        let w_big = train_fixed_embeddings(&table, &cfg, 9).unwrap();
        assert_eq!(w_zero, w_big);
    }

    #[test]
    fn collapse_gauge_hand_values() {
        // Identical rows → 0.
        let mut m = crate::numeric::Matrix::zeros(3, 2);
        for r in 0..3 {
            m.row_mut(r).copy_from_slice(&[1.0, 0.0]);
        }
        let w = ClassEmbeddings::from_matrix(m).unwrap();
        assert_eq!(collapse_gauge(&w).unwrap(), 0.0);

        // Antipodal pair → 2.
        let mut m = crate::numeric::Matrix::zeros(2, 2);
        m.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        m.row_mut(1).copy_from_slice(&[-1.0, 0.0]);
        let w = ClassEmbeddings::from_matrix(m).unwrap();
        assert_eq!(collapse_gauge(&w).unwrap(), 2.0);

        // Orthonormal rows → 1.
        let mut m = crate::numeric::Matrix::zeros(3, 3);
        for r in 0..3 {
            m.row_mut(r)[r] = 1.0;
        }
        let w = ClassEmbeddings::from_matrix(m).unwrap();
        assert_eq!(collapse_gauge(&w).unwrap(), 1.0);

        let single = ClassEmbeddings::from_matrix({
            let mut m = crate::numeric::Matrix::zeros(1, 2);
            m.row_mut(0).copy_from_slice(&[1.0, 0.0]);
            m
        })
        .unwrap();
        assert!(collapse_gauge(&single).is_err());
    }

    fn synth_fixture(seed: u64) -> (MultiLabelDataset, MultiLabelDataset) {
        let ds = synth_multilabel(&SynthConfig {
            seed,
            num_classes: 6,
            num_features: 12,
            num_instances: 90,
            avg_labels: 1.5,
            num_clusters: 2,
        })
        .unwrap();
        crate::data::split(&ds, 0.2, seed ^ 1).unwrap()
    }

    #[test]
    fn run_round_increments_counter_and_is_deterministic() {
        let (train, val) = synth_fixture(50);
        let cfg = tiny_cfg(Algorithm::FedAws);
        let (roster, remap) = build_roster(shard_by_label(&train));
        let (val_insts, _) = remap_eval_instances(&val, &remap);
        let params = init_model(1, cfg.dimension_config(train.num_features)).unwrap();
        let w = init_class_embeddings(2, roster.len(), cfg.out_dim).unwrap();
        let mut state = ServerState {
            round: 0,
            params,
            class_embeddings: w,
            sigma: None,
        };
        let mut state2 = state.clone();
        let r1 = run_round(&mut state, &roster, &cfg, &val_insts).unwrap();
        assert_eq!(state.round, 1);
        assert_eq!(r1.round, 1);
        let r2 = run_round(&mut state2, &roster, &cfg, &val_insts).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(state.params, state2.params);
        assert_eq!(state.class_embeddings, state2.class_embeddings);
    }

    #[test]
    fn run_round_with_frozen_everything_only_ticks_the_counter() {
        // Two clients so the average of two identical models is exact.
        let ds = MultiLabelDataset {
            num_features: 6,
            num_classes: 2,
            instances: vec![
                Instance { features: x(&[(0, 1.0)]), labels: vec![0] },
                Instance { features: x(&[(1, 1.0)]), labels: vec![1] },
            ],
        };
        let (roster, remap) = build_roster(shard_by_label(&ds));
        let (val_insts, _) = remap_eval_instances(&ds, &remap);
        let mut cfg = tiny_cfg(Algorithm::FedAvg);
        cfg.local_epochs = 0;
        cfg.hp.lambda = 0.0;
        let params = init_model(3, cfg.dimension_config(ds.num_features)).unwrap();
        let w = init_class_embeddings(4, 2, cfg.out_dim).unwrap();
        let mut state = ServerState {
            round: 0,
            params: params.clone(),
            class_embeddings: w.clone(),
            sigma: None,
        };
        run_round(&mut state, &roster, &cfg, &val_insts).unwrap();
        assert_eq!(state.round, 1);
        assert_eq!(state.params, params);
        assert_eq!(state.class_embeddings, w);
    }

    #[test]
    fn experiment_history_is_a_prefix_stable_sequence() {
        let (train, val) = synth_fixture(60);
        let mut cfg = tiny_cfg(Algorithm::FedAlc);
        cfg.rounds = 1;
        let one = run_experiment(&train, &val, None, &cfg).unwrap();
        cfg.rounds = 3;
        let three = run_experiment(&train, &val, None, &cfg).unwrap();
        assert_eq!(one.reports[0], three.reports[0]);
        assert_eq!(three.reports.len(), 3);
        assert_eq!(three.reports[2].round, 3);
    }

    #[test]
    fn experiment_all_labels_everywhere_freezes_the_embedding_step() {
        // Every instance carries every label, so no label is ever negative
        // alongside a positive: σ ≡ 0 and the correlation step never moves.
        // The tiny untrained net can hit an all-dead activation on some
        // datasets (a legitimate error), so probe seeds until one evaluates.
        let cfg = {
            let mut cfg = tiny_cfg(Algorithm::FedAlc);
            cfg.rounds = 2;
            cfg.local_epochs = 0; // isolate the server step
            cfg
        };
        let mut run = None;
        for data_seed in 60..90 {
            let (mut ds, _) = synth_fixture(data_seed);
            let all_labels: Vec<u32> = (0..ds.num_classes).collect();
            for inst in &mut ds.instances {
                inst.labels = all_labels.clone();
            }
            if let Ok(result) = run_experiment(&ds, &ds, None, &cfg) {
                run = Some((result, ds.num_classes as usize));
                break;
            }
        }
        let (result, num_classes) = run.expect("every probe dataset degenerated");
        let init =
            init_class_embeddings(mix_seed(cfg.seed, SEED_CLASS_INIT), num_classes, cfg.out_dim)
                .unwrap();
        assert_eq!(result.state.class_embeddings, init);
        for report in &result.reports {
            assert_eq!(report.collapse_gauge, result.initial_collapse_gauge);
        }
    }

    #[test]
    fn experiment_fixed_variants_never_move_class_embeddings() {
        let (train, val) = synth_fixture(70);
        for alg in [Algorithm::FedAvgFixed, Algorithm::FedAlcFixed] {
            let mut cfg = tiny_cfg(alg);
            cfg.rounds = 1;
            let short = run_experiment(&train, &val, None, &cfg).unwrap();
            cfg.rounds = 3;
            let long = run_experiment(&train, &val, None, &cfg).unwrap();
            assert_eq!(
                short.state.class_embeddings, long.state.class_embeddings,
                "{alg}: class embeddings moved between rounds"
            );
            assert_ne!(short.state.params, long.state.params);
        }
    }

    #[test]
    fn experiment_reports_test_metrics_and_skips_unmapped() {
        let (train, val) = synth_fixture(80);
        let mut test = val.clone();
        let mut cfg = tiny_cfg(Algorithm::FedAws);
        cfg.rounds = 1;
        let result = run_experiment(&train, &val, Some(&test), &cfg).unwrap();
        assert!(result.test_metrics.is_some());
        assert_eq!(result.skipped_test, 0);
        let m = result.test_metrics.unwrap();
        for v in [m.p_at_1, m.p_at_3, m.p_at_5, m.map] {
            assert!((0.0..=1.0).contains(&v));
        }
        // Now poison the test split: drop label 0 from training so it loses
        // its client, and plant a test instance that carries only label 0.
        // Every test instance whose whole label set is {0} must be skipped.
        test.instances[0].labels = vec![0];
        let mut train2 = train.clone();
        for inst in &mut train2.instances {
            inst.labels.retain(|&l| l != 0);
        }
        train2.instances.retain(|i| !i.labels.is_empty());
        let expected_skips = test
            .instances
            .iter()
            .filter(|i| i.labels.iter().all(|&l| l == 0))
            .count();
        assert!(expected_skips >= 1);
        let result2 = run_experiment(&train2, &val, Some(&test), &cfg).unwrap();
        assert_eq!(result2.skipped_test, expected_skips);
        assert_eq!(result2.remap.map(0), None);
    }

    #[test]
    fn experiment_rejects_invalid_configs() {
        let (train, val) = synth_fixture(90);
        let breakages: [fn(&mut TrainConfig); 6] = [
            |c| c.rounds = 0,
            |c| c.client_lr = 0.0,
            |c| c.server_lr = -1.0,
            |c| c.batch_size = 0,
            |c| c.out_dim = 0,
            |c| c.hp.nu = 3.0,
        ];
        for breakage in breakages {
            let mut cfg = tiny_cfg(Algorithm::FedAvg);
            breakage(&mut cfg);
            assert!(run_experiment(&train, &val, None, &cfg).is_err());
        }
    }
}
