//! Pretrains a fixed class embedding matrix from collected label sets and
//! inspects its geometry: labels that co-occur end up closer together than
//! labels that never do, and the matrix is then frozen for the whole run,
//! so it is transmitted to the clients exactly once.
//!
//! ```bash
//! cargo run --example fixed_embeddings
//! ```

use fedlabel::data::{shard_by_label, synth_multilabel, SynthConfig};
use fedlabel::federation::{
    collapse_gauge, collect_label_sets, run_experiment, train_fixed_embeddings, Algorithm,
    TrainConfig,
};
use fedlabel::labelsets::CanonicalizeMode;
use fedlabel::numeric::cosine_distance;

fn main() -> fedlabel::Result<()> {
    let ds = synth_multilabel(&SynthConfig {
        seed: 9,
        num_classes: 10,
        num_features: 40,
        num_instances: 800,
        avg_labels: 2.0,
        num_clusters: 2,
    })?;
    let shards = shard_by_label(&ds);
    let table = collect_label_sets(&shards, CanonicalizeMode::RawFeatures, None, ds.num_classes)?;

    let cfg = TrainConfig {
        pretrain_steps: 400,
        server_lr: 0.05,
        out_dim: 16,
        ..TrainConfig::default()
    };
    let w = train_fixed_embeddings(&table, &cfg, cfg.seed)?;
    println!("pretrained {}×{} class matrix, gauge {:.4}", w.num_classes(), w.dim(), collapse_gauge(&w)?);

    // Average distance between co-occurring and never-co-occurring pairs.
    let mut seen = vec![vec![false; 10]; 10];
    for (_, labels) in table.entries() {
        for &a in labels {
            for &b in labels {
                if a != b {
                    seen[a as usize][b as usize] = true;
                }
            }
        }
    }
    let (mut d_near, mut n_near, mut d_far, mut n_far) = (0.0, 0, 0.0, 0);
    for a in 0..10usize {
        for b in (a + 1)..10 {
            let d = cosine_distance(w.row(a), w.row(b))?;
            if seen[a][b] || seen[b][a] {
                d_near += d;
                n_near += 1;
            } else {
                d_far += d;
                n_far += 1;
            }
        }
    }
    println!("mean distance, co-occurring pairs:    {:.4} ({n_near} pairs)", d_near / n_near as f64);
    println!("mean distance, never-co-occurring:    {:.4} ({n_far} pairs)", d_far / n_far as f64);

    // The frozen-matrix variants train only the encoder against this fixed
    // geometry; the class rows never move again.
    let (train, val) = fedlabel::data::split(&ds, 0.15, 5)?;
    for algorithm in [Algorithm::FedAvgFixed, Algorithm::FedAlcFixed] {
        let run_cfg = TrainConfig {
            algorithm,
            rounds: 30,
            client_lr: 0.3,
            pretrain_steps: 400,
            server_lr: 0.05,
            out_dim: 16,
            ..TrainConfig::default()
        };
        let result = run_experiment(&train, &val, None, &run_cfg)?;
        let last = result.reports.last().expect("at least one round");
        println!("{algorithm}: final val P@1 {:.3}, gauge {:.4} (unchanged all run)", last.p_at_1, last.collapse_gauge);
    }
    Ok(())
}
