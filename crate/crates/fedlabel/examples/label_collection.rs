//! Walks the hash-based label collection protocol end to end: clients hash
//! their instances, the server merges equal digests into per-instance
//! positive label sets, and the co-occurrence weights σ fall out of the
//! merged table. No raw features ever cross the wire — only digests.
//!
//! ```bash
//! cargo run --example label_collection
//! ```

use fedlabel::data::{shard_by_label, synth_multilabel, SynthConfig};
use fedlabel::labelsets::{
    compute_sigma, decode_messages, encode_messages, hash_instance, merge_messages,
    CanonicalizeMode,
};
use fedlabel::losses::normalize_weights;

fn main() -> fedlabel::Result<()> {
    let ds = synth_multilabel(&SynthConfig {
        seed: 42,
        num_classes: 8,
        num_features: 20,
        num_instances: 120,
        avg_labels: 2.2,
        num_clusters: 2,
    })?;
    let shards = shard_by_label(&ds);
    println!(
        "{} instances, {} classes → {} single-label client shards",
        ds.instances.len(),
        ds.num_classes,
        shards.len()
    );

    // Each client hashes its own instances and ships digest+label messages.
    let mut wire_bytes = 0usize;
    let mut received = Vec::new();
    for shard in &shards {
        let mut messages = Vec::new();
        for x in &shard.instances {
            messages.push(hash_instance(x, shard.label, CanonicalizeMode::RawFeatures, None)?);
        }
        let wire = encode_messages(&messages);
        wire_bytes += wire.len();
        received.extend(decode_messages(&wire)?);
    }
    println!("{} messages, {wire_bytes} bytes on the wire", received.len());

    // The server merges equal digests; an instance held by several clients
    // reassembles its full positive set.
    let table = merge_messages(&received, ds.num_classes)?;
    println!("merged into {} distinct instances", table.num_instances());
    let multi = table.entries().iter().filter(|(_, s)| s.len() > 1).count();
    println!("{multi} of them carry more than one positive label");

    // σ_{uu'}: how often is u positive while u' is negative on the same
    // instance. Diagonal is zero by construction.
    let sigma = compute_sigma(&table)?;
    let gamma = normalize_weights(&sigma);
    println!("\nσ and row-normalized γ for class 0 against the rest:");
    for v in 1..ds.num_classes {
        println!("  σ(0,{v}) = {:.4}   γ(0,{v}) = {:.4}", sigma.get(0, v), gamma.get(0, v));
    }
    Ok(())
}
