//! Sparse multi-label datasets: the plain-text interchange format, label
//! sharding, seeded splits, and a clustered synthetic generator.
//!
//! ## File format
//!
//! Line 1 is a header `N F L` (instances, feature dimension, label count);
//! each of the next `N` lines is one instance: a comma-separated list of
//! 0-based label indices, then whitespace-separated `index:value` feature
//! pairs, e.g.
//!
//! ```text
//! 2 4 3
//! 0,2 1:0.5 3:1.0
//! 1 0:2.0
//! ```
//!
//! Parsing is strict — out-of-range indices, non-numeric tokens, and
//! label-less instances are errors naming the 1-based file line — except
//! that explicitly written zero values are dropped, since a sparse vector
//! stores only structural non-zeros. `parse → serialize → parse` is the
//! identity.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::numeric::{seeded_shuffle, SparseVector};

/// One labeled instance: sparse features plus a sorted, duplicate-free,
/// non-empty set of positive labels. Negative labels are implicit — every
/// class not listed is negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub features: SparseVector,
    pub labels: Vec<u32>,
}

/// An in-memory dataset with its dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelDataset {
    pub num_features: usize,
    pub num_classes: u32,
    pub instances: Vec<Instance>,
}

impl MultiLabelDataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses the plain-text format described in the module docs.
pub fn parse_xmlc(text: &str) -> Result<MultiLabelDataset> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_error(1, "missing header line"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(parse_error(
            1,
            format!(
                "header must be `N F L` (three integers), found {} fields",
                fields.len()
            ),
        ));
    }
    let parse_dim = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| parse_error(1, format!("{what} `{s}` is not a non-negative integer")))
    };
    let n = parse_dim(fields[0], "instance count")?;
    let num_features = parse_dim(fields[1], "feature dimension")?;
    let num_classes = parse_dim(fields[2], "label count")? as u32;

    let mut instances = Vec::with_capacity(n);
    let mut line_no = 1usize;
    for raw in lines {
        line_no += 1;
        if instances.len() == n {
            if !raw.trim().is_empty() {
                return Err(parse_error(
                    line_no,
                    format!("unexpected content after {n} instances"),
                ));
            }
            continue;
        }
        let mut tokens = raw.split_whitespace();
        let label_field = tokens
            .next()
            .ok_or_else(|| parse_error(line_no, "blank line where an instance was expected"))?;
        if label_field.contains(':') {
            return Err(parse_error(
                line_no,
                "empty label field: the line starts with a feature pair",
            ));
        }
        let mut labels = BTreeSet::new();
        for tok in label_field.split(',') {
            if tok.is_empty() {
                return Err(parse_error(line_no, "empty label token"));
            }
            let label: u32 = tok
                .parse()
                .map_err(|_| parse_error(line_no, format!("label `{tok}` is not an integer")))?;
            if label >= num_classes {
                return Err(parse_error(
                    line_no,
                    format!("label {label} out of range (label count is {num_classes})"),
                ));
            }
            labels.insert(label);
        }
        let mut pairs = Vec::new();
        for tok in tokens {
            let (idx_str, val_str) = tok.split_once(':').ok_or_else(|| {
                parse_error(line_no, format!("feature token `{tok}` is missing `:`"))
            })?;
            let idx: u32 = idx_str.parse().map_err(|_| {
                parse_error(line_no, format!("feature index `{idx_str}` is not an integer"))
            })?;
            if idx as usize >= num_features {
                return Err(parse_error(
                    line_no,
                    format!("feature index {idx} out of range (dimension is {num_features})"),
                ));
            }
            let val: f64 = val_str.parse().map_err(|_| {
                parse_error(line_no, format!("feature value `{val_str}` is not a number"))
            })?;
            if !val.is_finite() {
                return Err(parse_error(
                    line_no,
                    format!("feature value `{val_str}` is not finite"),
                ));
            }
            if val == 0.0 {
                continue; // structural zeros are simply not stored
            }
            pairs.push((idx, val));
        }
        let features = SparseVector::from_pairs(pairs)
            .map_err(|e| parse_error(line_no, e.to_string()))?;
        instances.push(Instance {
            features,
            labels: labels.into_iter().collect(),
        });
    }
    if instances.len() != n {
        return Err(parse_error(
            line_no + 1,
            format!("header promised {n} instances, file has {}", instances.len()),
        ));
    }
    Ok(MultiLabelDataset {
        num_features,
        num_classes,
        instances,
    })
}

pub fn parse_xmlc_file(path: &Path) -> Result<MultiLabelDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_xmlc(&text)
}

/// Renders a dataset back into the interchange format. Feature values use
/// the shortest decimal form that round-trips, so parsing the output
/// reproduces the dataset exactly.
pub fn serialize_xmlc(ds: &MultiLabelDataset) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {}",
        ds.instances.len(),
        ds.num_features,
        ds.num_classes
    );
    for inst in &ds.instances {
        let labels: Vec<String> = inst.labels.iter().map(|l| l.to_string()).collect();
        out.push_str(&labels.join(","));
        for (idx, val) in inst.features.iter() {
            let _ = write!(out, " {idx}:{val}");
        }
        out.push('\n');
    }
    out
}

pub fn write_xmlc_file(ds: &MultiLabelDataset, path: &Path) -> Result<()> {
    std::fs::write(path, serialize_xmlc(ds))?;
    Ok(())
}

/// One client's local view: the label it owns and every training instance
/// carrying that label. Instances with several labels appear in several
/// shards — that is the point of the collection protocol.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub label: u32,
    pub instances: Vec<SparseVector>,
}

impl ClientShard {
    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Shards a dataset by label: one shard per class, in class order, empty
/// shards included so the caller can decide how to handle label gaps.
pub fn shard_by_label(ds: &MultiLabelDataset) -> Vec<ClientShard> {
    let mut shards: Vec<ClientShard> = (0..ds.num_classes)
        .map(|label| ClientShard {
            label,
            instances: Vec::new(),
        })
        .collect();
    for inst in &ds.instances {
        for &label in &inst.labels {
            shards[label as usize].instances.push(inst.features.clone());
        }
    }
    shards
}

/// Mapping from original label ids to the dense roster of labels that
/// actually have training instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRemap {
    old_to_new: Vec<Option<u32>>,
    kept_old: Vec<u32>,
}

impl LabelRemap {
    pub fn map(&self, old: u32) -> Option<u32> {
        self.old_to_new.get(old as usize).copied().flatten()
    }

    pub fn num_kept(&self) -> u32 {
        self.kept_old.len() as u32
    }

    pub fn num_dropped(&self) -> usize {
        self.old_to_new.len() - self.kept_old.len()
    }

    /// Original ids in roster order: `kept_old()[new] == old`.
    pub fn kept_old(&self) -> &[u32] {
        &self.kept_old
    }

    /// Remaps a label set, dropping labels without clients. May return an
    /// empty set — the evaluator excludes such instances with a count.
    pub fn map_set(&self, labels: &[u32]) -> Vec<u32> {
        labels.iter().filter_map(|&l| self.map(l)).collect()
    }
}

/// Drops empty shards and renumbers the rest densely. The remap table is
/// logged so runs on datasets with unused labels stay interpretable.
pub fn build_roster(shards: Vec<ClientShard>) -> (Vec<ClientShard>, LabelRemap) {
    let mut old_to_new = vec![None; shards.len()];
    let mut kept_old = Vec::new();
    let mut roster = Vec::new();
    for shard in shards {
        if shard.is_empty() {
            continue;
        }
        let new_label = kept_old.len() as u32;
        old_to_new[shard.label as usize] = Some(new_label);
        kept_old.push(shard.label);
        roster.push(ClientShard {
            label: new_label,
            instances: shard.instances,
        });
    }
    let remap = LabelRemap {
        old_to_new,
        kept_old,
    };
    if remap.num_dropped() > 0 {
        log::info!(
            "dropped {} label(s) with no training instances; roster keeps {} of {}: {:?}",
            remap.num_dropped(),
            remap.num_kept(),
            remap.old_to_new.len(),
            remap.kept_old()
        );
    }
    (roster, remap)
}

/// Seeded shuffle, then the first `⌊n · val_fraction⌋` instances become the
/// validation split and the rest the training split. Fraction 0 gives an
/// empty validation set.
pub fn split(
    ds: &MultiLabelDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(MultiLabelDataset, MultiLabelDataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must lie in [0, 1), got {val_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    seeded_shuffle(&mut order, &mut rng);
    let val_count = (ds.len() as f64 * val_fraction).floor() as usize;
    let pick = |idx: &[usize]| MultiLabelDataset {
        num_features: ds.num_features,
        num_classes: ds.num_classes,
        instances: idx.iter().map(|&i| ds.instances[i].clone()).collect(),
    };
    Ok((pick(&order[val_count..]), pick(&order[..val_count])))
}

/// Parameters for [`synth_multilabel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_classes: u32,
    pub num_features: usize,
    pub num_instances: usize,
    /// Target mean label-set size; realized as `1 + Poisson(avg_labels − 1)`
    /// truncated to the cluster size, so `avg_labels = 1` is exactly
    /// single-label.
    pub avg_labels: f64,
    pub num_clusters: usize,
}

/// Clustered synthetic generator.
///
/// Labels are partitioned into contiguous clusters. Every cluster has a
/// sparse feature prototype and every label a smaller signature; an
/// instance picks one cluster, draws its labels from that cluster only, and
/// emits prototype + signatures + Gaussian noise. Labels from one cluster
/// co-occur, labels from different clusters never do — which is exactly the
/// correlation structure the σ estimate is supposed to recover.
pub fn synth_multilabel(cfg: &SynthConfig) -> Result<MultiLabelDataset> {
    let c = cfg.num_classes as usize;
    if c == 0 || cfg.num_instances == 0 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs at least one class and one instance".into(),
        ));
    }
    if cfg.num_clusters == 0 || cfg.num_clusters > c {
        return Err(Error::InvalidArgument(format!(
            "cluster count {} must lie in 1..={c}",
            cfg.num_clusters
        )));
    }
    let min_cluster = c / cfg.num_clusters; // smallest block size
    if cfg.avg_labels < 1.0 || cfg.avg_labels > min_cluster as f64 {
        return Err(Error::InvalidArgument(format!(
            "avg_labels {} must lie in [1, {}] (smallest cluster size)",
            cfg.avg_labels, min_cluster
        )));
    }
    if cfg.num_features < 8 {
        return Err(Error::InvalidArgument(
            "synthetic generator needs at least 8 features".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Contiguous label blocks, sizes differing by at most one.
    let mut blocks: Vec<(u32, u32)> = Vec::with_capacity(cfg.num_clusters);
    let base = c / cfg.num_clusters;
    let extra = c % cfg.num_clusters;
    let mut start = 0u32;
    for g in 0..cfg.num_clusters {
        let size = (base + usize::from(g < extra)) as u32;
        blocks.push((start, start + size));
        start += size;
    }

    // Signal scales. Cluster prototypes are correlated variations on one
    // shared direction: the lazy solution — mapping every instance to the
    // same region — is always available and plain weight averaging drifts
    // towards it, while the per-label signatures stay strong enough that a
    // model whose class rows are kept apart can still rank labels well.
    // The noise keeps the scoring margin unattainable, so the pull on the
    // class embeddings never dies out.
    const PROTO_DELTA_SCALE: f64 = 0.35;
    const SIGNATURE_SCALE: f64 = 0.8;
    const NOISE_SCALE: f64 = 0.5;

    // Cluster prototypes: wide supports drawn from the full feature range,
    // so clusters share most features and the encoder cannot trivially
    // factor them apart.
    let support_size = (3 * cfg.num_features / 4).clamp(4, cfg.num_features);
    let pick_support = |rng: &mut ChaCha8Rng, size: usize| -> Vec<u32> {
        let mut all: Vec<u32> = (0..cfg.num_features as u32).collect();
        seeded_shuffle(&mut all, rng);
        let mut s = all[..size].to_vec();
        s.sort_unstable();
        s
    };
    let shared_base: Vec<f64> = (0..cfg.num_features).map(|_| normal.sample(&mut rng)).collect();
    let prototypes: Vec<Vec<(u32, f64)>> = (0..cfg.num_clusters)
        .map(|_| {
            pick_support(&mut rng, support_size)
                .into_iter()
                .map(|i| {
                    (
                        i,
                        shared_base[i as usize] + PROTO_DELTA_SCALE * normal.sample(&mut rng),
                    )
                })
                .collect()
        })
        .collect();

    // Per-label signatures: small, so the per-label signal rides on top of
    // the cluster signal without drowning it.
    let signature_size = (cfg.num_features / 8).max(2);
    let signatures: Vec<Vec<(u32, f64)>> = (0..c)
        .map(|_| {
            pick_support(&mut rng, signature_size)
                .into_iter()
                .map(|i| (i, normal.sample(&mut rng)))
                .collect()
        })
        .collect();

    let poisson = if cfg.avg_labels > 1.0 {
        Some(Poisson::new(cfg.avg_labels - 1.0).expect("positive rate"))
    } else {
        None
    };

    let mut instances = Vec::with_capacity(cfg.num_instances);
    let mut dense = vec![0.0f64; cfg.num_features];
    for _ in 0..cfg.num_instances {
        let g = rng.gen_range(0..cfg.num_clusters);
        let (lo, hi) = blocks[g];
        let block_size = (hi - lo) as usize;
        let raw_extra = poisson.as_ref().map_or(0.0, |p| p.sample(&mut rng));
        let count = (1 + raw_extra as usize).min(block_size);

        // `count` distinct labels from this cluster.
        let mut block: Vec<u32> = (lo..hi).collect();
        seeded_shuffle(&mut block, &mut rng);
        let mut labels: Vec<u32> = block[..count].to_vec();
        labels.sort_unstable();

        for v in dense.iter_mut() {
            *v = 0.0;
        }
        for &(i, v) in &prototypes[g] {
            dense[i as usize] += v;
        }
        for &label in &labels {
            for &(i, v) in &signatures[label as usize] {
                dense[i as usize] += SIGNATURE_SCALE * v;
            }
        }
        // Noise on every touched coordinate keeps instances distinct.
        for v in dense.iter_mut() {
            if *v != 0.0 {
                *v += NOISE_SCALE * normal.sample(&mut rng);
            }
        }
        let pairs: Vec<(u32, f64)> = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as u32, *v))
            .collect();
        if pairs.is_empty() {
            // Essentially impossible (all noisy sums cancelled), but never
            // emit an instance the encoder must reject.
            return Err(Error::Degenerate(
                "synthetic instance lost all features; try another seed".into(),
            ));
        }
        instances.push(Instance {
            features: SparseVector::from_pairs(pairs)?,
            labels,
        });
    }
    Ok(MultiLabelDataset {
        num_features: cfg.num_features,
        num_classes: cfg.num_classes,
        instances,
    })
}
