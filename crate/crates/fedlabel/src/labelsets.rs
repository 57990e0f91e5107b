//! Hash-based label-set collection and class correlation weights.
//!
//! Clients cannot reveal raw instances, but the server needs to know which
//! classes co-occur. Each client therefore sends one message per training
//! instance: a 32-byte digest of a canonical encoding of the instance plus
//! the client's own label index. The server merges messages by digest — two
//! clients holding the same instance produce the same digest — and the union
//! of labels per digest reconstructs each instance's positive label set
//! without anyone transmitting features or foreign labels.
//!
//! From the merged table the server estimates, for every ordered class pair
//! `(u, u′)`, how often `u` is positive while `u′` is negative:
//!
//! ```text
//! σ[u][u′] = (1/n) Σⱼ 𝟙(u ∈ Pⱼ and u′ ∉ Pⱼ)
//! ```
//!
//! Negative sets are complements of the stored positive sets and are never
//! materialized. σ drives the correlation-aware repulsion in
//! [`crate::losses`]: pairs that frequently co-occur get little or no
//! repulsion, pairs that never share an instance get the most.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::numeric::SparseVector;

/// Instance digest width in bytes (SHA-256).
pub const DIGEST_LEN: usize = 32;

pub type InstanceDigest = [u8; DIGEST_LEN];

/// One collection message: "I hold an instance with this digest, and my
/// class is `label`."
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashMessage {
    pub digest: InstanceDigest,
    pub label: u32,
}

/// How an instance is turned into canonical bytes before hashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanonicalizeMode {
    /// Little-endian `(index: u32, value: f64)` pairs in increasing index
    /// order. Matching feature vectors collide exactly; nothing else does
    /// (up to SHA-256). This is the default.
    RawFeatures,
    /// The instance's encoder output under a frozen initial model, each
    /// coordinate rounded to 6 decimal digits and serialized as a
    /// little-endian i64 of the scaled value. Lets clients agree on digests
    /// without exchanging feature encodings, at the cost of needing the same
    /// initial model.
    InitialEmbedding,
}

/// Canonical byte encoding of one instance under the chosen mode.
/// `InitialEmbedding` requires the shared frozen model.
pub fn canonicalize_instance(
    x: &SparseVector,
    mode: CanonicalizeMode,
    initial_model: Option<&ModelParams>,
) -> Result<Vec<u8>> {
    match mode {
        CanonicalizeMode::RawFeatures => {
            let mut bytes = Vec::with_capacity(x.nnz() * 12);
            for (idx, val) in x.iter() {
                bytes.extend_from_slice(&idx.to_le_bytes());
                bytes.extend_from_slice(&val.to_le_bytes());
            }
            Ok(bytes)
        }
        CanonicalizeMode::InitialEmbedding => {
            let params = initial_model.ok_or_else(|| {
                Error::InvalidArgument(
                    "embedding canonicalization needs the shared initial model".into(),
                )
            })?;
            let (out, _) = model::forward(params, x)?;
            let mut bytes = Vec::with_capacity(out.len() * 8);
            for v in out {
                let scaled = (v * 1e6).round() as i64;
                bytes.extend_from_slice(&scaled.to_le_bytes());
            }
            Ok(bytes)
        }
    }
}

/// Digest + label message for one instance held by the client of `label`.
pub fn hash_instance(
    x: &SparseVector,
    label: u32,
    mode: CanonicalizeMode,
    initial_model: Option<&ModelParams>,
) -> Result<HashMessage> {
    let bytes = canonicalize_instance(x, mode, initial_model)?;
    let digest: InstanceDigest = Sha256::digest(&bytes).into();
    Ok(HashMessage { digest, label })
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------
//
// A message batch is a little-endian u64 record count followed by fixed-width
// records: 32 digest bytes, then the label as a little-endian u32. The layout
// is bit-exact and covered by golden-byte tests; files written on any
// platform decode on any other.

const RECORD_LEN: usize = DIGEST_LEN + 4;

/// Serializes a message batch.
pub fn encode_messages(messages: &[HashMessage]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + messages.len() * RECORD_LEN);
    out.extend_from_slice(&(messages.len() as u64).to_le_bytes());
    for m in messages {
        out.extend_from_slice(&m.digest);
        out.extend_from_slice(&m.label.to_le_bytes());
    }
    out
}

/// Parses a message batch, rejecting truncated or oversized payloads.
pub fn decode_messages(bytes: &[u8]) -> Result<Vec<HashMessage>> {
    if bytes.len() < 8 {
        return Err(Error::MalformedFile(
            "message batch shorter than its count header".into(),
        ));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let expected = 8 + count * RECORD_LEN;
    if bytes.len() != expected {
        return Err(Error::MalformedFile(format!(
            "message batch length {} does not match count header ({} records need {} bytes)",
            bytes.len(),
            count,
            expected
        )));
    }
    let mut messages = Vec::with_capacity(count);
    for rec in bytes[8..].chunks_exact(RECORD_LEN) {
        let digest: InstanceDigest = rec[..DIGEST_LEN].try_into().expect("digest width");
        let label = u32::from_le_bytes(rec[DIGEST_LEN..].try_into().expect("label width"));
        messages.push(HashMessage { digest, label });
    }
    Ok(messages)
}

fn label_token(salt: u64, label: u32) -> u32 {
    let mut hasher = Sha256::new();
    hasher.update(salt.to_le_bytes());
    hasher.update(label.to_le_bytes());
    let digest = hasher.finalize();
    u32::from_le_bytes(digest[..4].try_into().expect("4 bytes"))
}

/// Privacy variant of [`encode_messages`]: the label field carries a keyed
/// hash token instead of the plain index. Same record layout.
pub fn encode_messages_hashed_labels(messages: &[HashMessage], salt: u64) -> Vec<u8> {
    let tokens: Vec<HashMessage> = messages
        .iter()
        .map(|m| HashMessage {
            digest: m.digest,
            label: label_token(salt, m.label),
        })
        .collect();
    encode_messages(&tokens)
}

/// Decodes a batch written by [`encode_messages_hashed_labels`]. The decoder
/// must know the salt and the class count to rebuild the token table; a
/// token collision between two classes is reported as an error.
pub fn decode_messages_hashed_labels(
    bytes: &[u8],
    salt: u64,
    num_classes: u32,
) -> Result<Vec<HashMessage>> {
    let mut token_to_label: BTreeMap<u32, u32> = BTreeMap::new();
    for label in 0..num_classes {
        if token_to_label.insert(label_token(salt, label), label).is_some() {
            return Err(Error::InvalidArgument(format!(
                "label token collision under salt {salt}; pick a different salt"
            )));
        }
    }
    decode_messages(bytes)?
        .into_iter()
        .map(|m| {
            let label = *token_to_label.get(&m.label).ok_or_else(|| {
                Error::MalformedFile(format!(
                    "unknown label token {:#010x} in hashed batch",
                    m.label
                ))
            })?;
            Ok(HashMessage {
                digest: m.digest,
                label,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Merged table and correlation weights
// ---------------------------------------------------------------------------

/// Server-side view after merging: one entry per distinct digest with the
/// union of labels attached to it, ordered by digest so every downstream
/// computation is deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSetTable {
    num_classes: u32,
    entries: Vec<(InstanceDigest, Vec<u32>)>,
}

impl LabelSetTable {
    /// Builds a table directly from per-instance positive sets. Used by
    /// tests and by the fixed-embedding pretraining path, which starts from
    /// an already-merged collection.
    pub fn from_label_sets(num_classes: u32, sets: Vec<(InstanceDigest, Vec<u32>)>) -> Result<Self> {
        let mut entries = Vec::with_capacity(sets.len());
        for (digest, labels) in sets {
            let set: BTreeSet<u32> = labels.into_iter().collect();
            if set.is_empty() {
                return Err(Error::Degenerate(
                    "label set table entry with no positive labels".into(),
                ));
            }
            if let Some(&max) = set.iter().next_back() {
                if max >= num_classes {
                    return Err(Error::IndexOutOfRange {
                        index: max as usize,
                        bound: num_classes as usize,
                        context: "label set table",
                    });
                }
            }
            entries.push((digest, set.into_iter().collect()));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::InvalidArgument(
                    "duplicate digest in label set table; merge the sets first".into(),
                ));
            }
        }
        Ok(Self {
            num_classes,
            entries,
        })
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    /// Number of distinct instances (digests).
    pub fn num_instances(&self) -> usize {
        self.entries.len()
    }

    /// Entries in digest order; label lists are sorted and duplicate-free.
    pub fn entries(&self) -> &[(InstanceDigest, Vec<u32>)] {
        &self.entries
    }
}

/// Merges client messages into per-digest positive label sets. Merging is
/// idempotent: replaying a message batch changes nothing.
pub fn merge_messages(messages: &[HashMessage], num_classes: u32) -> Result<LabelSetTable> {
    let mut by_digest: BTreeMap<InstanceDigest, BTreeSet<u32>> = BTreeMap::new();
    for m in messages {
        if m.label >= num_classes {
            return Err(Error::IndexOutOfRange {
                index: m.label as usize,
                bound: num_classes as usize,
                context: "collection message label",
            });
        }
        by_digest.entry(m.digest).or_default().insert(m.label);
    }
    let entries = by_digest
        .into_iter()
        .map(|(digest, set)| (digest, set.into_iter().collect()))
        .collect();
    Ok(LabelSetTable {
        num_classes,
        entries,
    })
}

/// Ordered-pair class correlation weights. `get(u, u′)` answers "what
/// fraction of instances have `u` positive and `u′` negative"; the diagonal
/// is identically zero. Storage is dense below [`SigmaWeights::DENSE_LIMIT`]
/// classes and a sorted sparse map above it.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaWeights {
    num_classes: u32,
    storage: SigmaStorage,
}

#[derive(Debug, Clone, PartialEq)]
enum SigmaStorage {
    Dense(Vec<f64>),
    Sparse(BTreeMap<(u32, u32), f64>),
}

impl SigmaWeights {
    /// Above this class count the dense C² buffer stops being reasonable.
    pub const DENSE_LIMIT: u32 = 4096;

    pub fn zeros(num_classes: u32) -> Self {
        let storage = if num_classes <= Self::DENSE_LIMIT {
            SigmaStorage::Dense(vec![0.0; (num_classes as usize).pow(2)])
        } else {
            SigmaStorage::Sparse(BTreeMap::new())
        };
        Self {
            num_classes,
            storage,
        }
    }

    /// Uniform off-diagonal weight; handy for tests and for reducing the
    /// correlation regularizer to its unweighted counterpart.
    pub fn uniform(num_classes: u32, weight: f64) -> Self {
        let mut w = Self::zeros(num_classes);
        for u in 0..num_classes {
            for u2 in 0..num_classes {
                if u != u2 {
                    w.set(u, u2, weight);
                }
            }
        }
        w
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn get(&self, u: u32, u2: u32) -> f64 {
        if u == u2 {
            return 0.0;
        }
        match &self.storage {
            SigmaStorage::Dense(v) => v[u as usize * self.num_classes as usize + u2 as usize],
            SigmaStorage::Sparse(m) => m.get(&(u, u2)).copied().unwrap_or(0.0),
        }
    }

    /// Sets one ordered-pair weight. Diagonal writes and negative weights
    /// are programming errors.
    pub fn set(&mut self, u: u32, u2: u32, weight: f64) {
        assert!(u != u2, "sigma diagonal is identically zero");
        assert!(
            weight >= 0.0 && weight.is_finite(),
            "sigma weights are non-negative and finite"
        );
        match &mut self.storage {
            SigmaStorage::Dense(v) => {
                v[u as usize * self.num_classes as usize + u2 as usize] = weight;
            }
            SigmaStorage::Sparse(m) => {
                if weight == 0.0 {
                    m.remove(&(u, u2));
                } else {
                    m.insert((u, u2), weight);
                }
            }
        }
    }

    pub fn row_sum(&self, u: u32) -> f64 {
        (0..self.num_classes).map(|u2| self.get(u, u2)).sum()
    }

    /// Row-normalized copy: each row scaled to sum to 1; all-zero rows stay
    /// all-zero.
    pub fn row_normalized(&self) -> SigmaWeights {
        let mut out = SigmaWeights::zeros(self.num_classes);
        for u in 0..self.num_classes {
            let total = self.row_sum(u);
            if total <= 0.0 {
                continue;
            }
            for u2 in 0..self.num_classes {
                if u == u2 {
                    continue;
                }
                let w = self.get(u, u2);
                if w != 0.0 {
                    out.set(u, u2, w / total);
                }
            }
        }
        out
    }
}

/// Estimates σ from the merged table: integer pair counts divided by the
/// number of distinct instances, in one division at the end so equal counts
/// give bit-equal weights. Negative sets are walked as complements of the
/// sorted positive lists, never stored.
pub fn compute_sigma(table: &LabelSetTable) -> Result<SigmaWeights> {
    compute_sigma_impl(table, false)
}

/// Variant behind the `sigma_per_instance` config flag: each instance's
/// contribution is additionally divided by its positive-set size, so large
/// label sets do not dominate the estimate.
pub fn compute_sigma_per_instance(table: &LabelSetTable) -> Result<SigmaWeights> {
    compute_sigma_impl(table, true)
}

fn compute_sigma_impl(table: &LabelSetTable, per_instance: bool) -> Result<SigmaWeights> {
    let c = table.num_classes() as usize;
    let n = table.num_instances();
    if n == 0 {
        return Err(Error::Degenerate(
            "cannot estimate correlations from an empty label set table".into(),
        ));
    }
    // Accumulate per ordered pair; one flat buffer keeps the loop tight and
    // the final division uniform.
    let mut acc = vec![0.0f64; c * c];
    let mut is_positive = vec![false; c];
    for (_, positives) in table.entries() {
        for &y in positives {
            is_positive[y as usize] = true;
        }
        let contribution = if per_instance {
            1.0 / positives.len() as f64
        } else {
            1.0
        };
        for &u in positives {
            let base = u as usize * c;
            for u2 in 0..c {
                if !is_positive[u2] {
                    acc[base + u2] += contribution;
                }
            }
        }
        for &y in positives {
            is_positive[y as usize] = false;
        }
    }
    let mut sigma = SigmaWeights::zeros(table.num_classes());
    let n = n as f64;
    for u in 0..c as u32 {
        for u2 in 0..c as u32 {
            if u == u2 {
                continue;
            }
            let v = acc[u as usize * c + u2 as usize] / n;
            if v != 0.0 {
                sigma.set(u, u2, v);
            }
        }
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, DimensionConfig};

    fn sv(pairs: &[(u32, f64)]) -> SparseVector {
        SparseVector::from_pairs(pairs.to_vec()).unwrap()
    }

    fn digest_of(byte: u8) -> InstanceDigest {
        [byte; DIGEST_LEN]
    }

    #[test]
    fn hashing_is_deterministic_and_input_sensitive() {
        let x = sv(&[(0, 1.0), (5, -2.5)]);
        let a = hash_instance(&x, 3, CanonicalizeMode::RawFeatures, None).unwrap();
        let b = hash_instance(&x, 3, CanonicalizeMode::RawFeatures, None).unwrap();
        assert_eq!(a, b);
        let y = sv(&[(0, 1.0), (5, -2.4)]);
        let c = hash_instance(&y, 3, CanonicalizeMode::RawFeatures, None).unwrap();
        assert_ne!(a.digest, c.digest);
        assert_eq!(a.digest.len(), DIGEST_LEN);
    }

    #[test]
    fn canonical_bytes_are_order_free() {
        // SparseVector sorts on construction, so permuted input pairs give
        // the same canonical bytes.
        let a = sv(&[(7, 0.25), (1, -1.5), (4, 3.0)]);
        let b = sv(&[(4, 3.0), (7, 0.25), (1, -1.5)]);
        assert_eq!(
            canonicalize_instance(&a, CanonicalizeMode::RawFeatures, None).unwrap(),
            canonicalize_instance(&b, CanonicalizeMode::RawFeatures, None).unwrap()
        );
    }

    #[test]
    fn raw_canonical_layout_is_pinned() {
        let x = sv(&[(1, 1.5)]);
        let bytes = canonicalize_instance(&x, CanonicalizeMode::RawFeatures, None).unwrap();
        let mut expected = vec![1u8, 0, 0, 0];
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn embedding_mode_requires_model_and_is_stable() {
        let dims = DimensionConfig {
            features: 8,
            embed_dim: 4,
            hidden1: 5,
            hidden2: 5,
            out_dim: 3,
        };
        let params = init_model(1, dims).unwrap();
        let x = sv(&[(0, 1.0), (3, 2.0)]);
        assert!(canonicalize_instance(&x, CanonicalizeMode::InitialEmbedding, None).is_err());
        let a = canonicalize_instance(&x, CanonicalizeMode::InitialEmbedding, Some(&params))
            .unwrap();
        let b = canonicalize_instance(&x, CanonicalizeMode::InitialEmbedding, Some(&params))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), dims.out_dim * 8);
    }

    #[test]
    fn wire_round_trip_and_golden_bytes() {
        let messages = vec![
            HashMessage {
                digest: digest_of(0xAB),
                label: 7,
            },
            HashMessage {
                digest: digest_of(0x01),
                label: 0,
            },
        ];
        let bytes = encode_messages(&messages);
        assert_eq!(bytes.len(), 8 + 2 * (DIGEST_LEN + 4));
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..40], &[0xAB; 32]);
        assert_eq!(&bytes[40..44], &7u32.to_le_bytes());
        let decoded = decode_messages(&bytes).unwrap();
        assert_eq!(decoded, messages);
    }

    #[test]
    fn decode_rejects_truncation_and_padding() {
        let bytes = encode_messages(&[HashMessage {
            digest: digest_of(9),
            label: 1,
        }]);
        assert!(decode_messages(&bytes[..bytes.len() - 1]).is_err());
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(decode_messages(&padded).is_err());
        assert!(decode_messages(&bytes[..4]).is_err());
    }

    #[test]
    fn hashed_label_wire_round_trips() {
        let messages = vec![
            HashMessage {
                digest: digest_of(3),
                label: 0,
            },
            HashMessage {
                digest: digest_of(4),
                label: 5,
            },
        ];
        let bytes = encode_messages_hashed_labels(&messages, 1234);
        // Tokens on the wire are not the plain indices.
        let raw = decode_messages(&bytes).unwrap();
        assert_ne!(raw[0].label, 0);
        let decoded = decode_messages_hashed_labels(&bytes, 1234, 6).unwrap();
        assert_eq!(decoded, messages);
        // Wrong salt produces unknown tokens.
        assert!(decode_messages_hashed_labels(&bytes, 99, 6).is_err());
    }

    #[test]
    fn merge_unions_labels_per_digest() {
        let msgs = vec![
            HashMessage {
                digest: digest_of(1),
                label: 0,
            },
            HashMessage {
                digest: digest_of(2),
                label: 1,
            },
            HashMessage {
                digest: digest_of(1),
                label: 2,
            },
            HashMessage {
                digest: digest_of(1),
                label: 0, // duplicate, must be absorbed
            },
        ];
        let table = merge_messages(&msgs, 3).unwrap();
        assert_eq!(table.num_instances(), 2);
        assert_eq!(table.entries()[0], (digest_of(1), vec![0, 2]));
        assert_eq!(table.entries()[1], (digest_of(2), vec![1]));
        // Idempotent: merging the concatenation with itself changes nothing.
        let doubled: Vec<_> = msgs.iter().chain(&msgs).copied().collect();
        assert_eq!(merge_messages(&doubled, 3).unwrap(), table);
    }

    #[test]
    fn merge_rejects_out_of_range_labels() {
        let msgs = [HashMessage {
            digest: digest_of(1),
            label: 3,
        }];
        assert!(merge_messages(&msgs, 3).is_err());
    }

    #[test]
    fn sigma_on_two_instances_matches_hand_count() {
        // P₁ = {0, 1}, P₂ = {0}, C = 3.
        let table = LabelSetTable::from_label_sets(
            3,
            vec![(digest_of(1), vec![0, 1]), (digest_of(2), vec![0])],
        )
        .unwrap();
        let sigma = compute_sigma(&table).unwrap();
        // Class 2 is negative everywhere class 0 is positive: both instances.
        assert_eq!(sigma.get(0, 2), 1.0);
        // Class 1 negative while 0 positive: only the second instance.
        assert_eq!(sigma.get(0, 1), 0.5);
        // Class 0 is never negative.
        assert_eq!(sigma.get(1, 0), 0.0);
        assert_eq!(sigma.get(2, 0), 0.0);
        assert_eq!(sigma.get(1, 2), 0.5);
        for u in 0..3 {
            assert_eq!(sigma.get(u, u), 0.0);
        }
    }

    #[test]
    fn sigma_is_invariant_to_message_batching() {
        // The same messages split across differently-shaped client batches
        // merge to the same table, hence the same sigma.
        let all: Vec<HashMessage> = (0..10u8)
            .flat_map(|i| {
                vec![
                    HashMessage {
                        digest: digest_of(i),
                        label: (i % 4) as u32,
                    },
                    HashMessage {
                        digest: digest_of(i),
                        label: ((i as u32) + 1) % 4,
                    },
                ]
            })
            .collect();
        let merged_once = merge_messages(&all, 4).unwrap();
        let (left, right) = all.split_at(7);
        let mut stitched: Vec<HashMessage> = right.to_vec();
        stitched.extend_from_slice(left);
        let merged_again = merge_messages(&stitched, 4).unwrap();
        assert_eq!(merged_once, merged_again);
        assert_eq!(
            compute_sigma(&merged_once).unwrap(),
            compute_sigma(&merged_again).unwrap()
        );
    }

    #[test]
    fn sigma_entries_stay_in_unit_interval() {
        let table = LabelSetTable::from_label_sets(
            4,
            vec![
                (digest_of(1), vec![0]),
                (digest_of(2), vec![1, 2]),
                (digest_of(3), vec![0, 3]),
                (digest_of(4), vec![2]),
            ],
        )
        .unwrap();
        let sigma = compute_sigma(&table).unwrap();
        for u in 0..4 {
            for u2 in 0..4 {
                let v = sigma.get(u, u2);
                assert!((0.0..=1.0).contains(&v), "sigma[{u}][{u2}] = {v}");
            }
        }
    }

    #[test]
    fn per_instance_variant_downweights_large_sets() {
        let table = LabelSetTable::from_label_sets(
            3,
            vec![(digest_of(1), vec![0, 1]), (digest_of(2), vec![0])],
        )
        .unwrap();
        let plain = compute_sigma(&table).unwrap();
        let weighted = compute_sigma_per_instance(&table).unwrap();
        // Instance 1 contributes 1/2 instead of 1 to (0→2) and (1→2).
        assert_eq!(weighted.get(0, 2), (0.5 + 1.0) / 2.0);
        assert_eq!(weighted.get(1, 2), 0.25);
        assert!(weighted.get(0, 2) < plain.get(0, 2));
    }

    #[test]
    fn row_normalization_sums_to_one_and_keeps_zero_rows() {
        let table = LabelSetTable::from_label_sets(
            3,
            vec![(digest_of(1), vec![0, 1, 2]), (digest_of(2), vec![0])],
        )
        .unwrap();
        let sigma = compute_sigma(&table).unwrap();
        let gamma = sigma.row_normalized();
        // Row 0 has mass: the {0}-only instance leaves 1 and 2 negative.
        let s0 = sigma.row_sum(0);
        assert!(s0 > 0.0);
        assert!((gamma.row_sum(0) - 1.0).abs() < 1e-9);
        // Rows 1 and 2: positive only in the all-labels instance, where no
        // class is negative, so the rows are all-zero and stay all-zero.
        assert_eq!(sigma.row_sum(1), 0.0);
        assert_eq!(gamma.row_sum(1), 0.0);
        assert_eq!(gamma.row_sum(2), 0.0);
    }

    #[test]
    fn sparse_storage_kicks_in_above_dense_limit() {
        let c = SigmaWeights::DENSE_LIMIT + 1;
        let mut w = SigmaWeights::zeros(c);
        w.set(0, c - 1, 0.5);
        w.set(c - 1, 0, 0.25);
        assert_eq!(w.get(0, c - 1), 0.5);
        assert_eq!(w.get(c - 1, 0), 0.25);
        assert_eq!(w.get(1, 2), 0.0);
        assert_eq!(w.get(5, 5), 0.0);
    }
}
