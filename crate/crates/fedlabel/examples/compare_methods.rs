//! Trains all five federation variants on one small synthetic task and
//! prints a final-quality table. The spreadout and correlation steps get
//! their own server rates: the mined spreadout repulsion overshoots when
//! stepped hard, while the correlation step scales each pair by a weight
//! well below one and needs a larger rate for the same force.
//!
//! ```bash
//! cargo run --example compare_methods
//! ```

use fedlabel::config::{materialize_data, DataSource, RunSpec};
use fedlabel::federation::{run_experiment, Algorithm, TrainConfig};

fn main() -> fedlabel::Result<()> {
    let algorithms = [
        Algorithm::FedAvg,
        Algorithm::FedAvgFixed,
        Algorithm::FedAws,
        Algorithm::FedAlc,
        Algorithm::FedAlcFixed,
    ];
    println!("{:<14} {:>8} {:>8} {:>8} {:>8}", "method", "val P@1", "test P@1", "MAP", "gauge");
    for algorithm in algorithms {
        let server_lr = match algorithm {
            Algorithm::FedAws => 0.05,
            Algorithm::FedAlc => 1.5,
            _ => 0.01,
        };
        let spec = RunSpec {
            train: TrainConfig {
                algorithm,
                rounds: 40,
                pretrain_steps: 200,
                client_lr: 0.3,
                server_lr,
                seed: 3,
                embed_dim: 32,
                hidden1: 64,
                hidden2: 64,
                out_dim: 16,
                ..TrainConfig::default()
            },
            data: DataSource::Synth {
                classes: 12,
                features: 48,
                instances: 900,
                avg_labels: 2.0,
                clusters: 3,
                test_instances: 300,
                val_frac: 0.1,
            },
        };
        let (train, val, test) = materialize_data(&spec)?;
        let result = run_experiment(&train, &val, test.as_ref(), &spec.train)?;
        let last = result.reports.last().expect("at least one round");
        let test_metrics = result.test_metrics.expect("test split supplied");
        println!(
            "{:<14} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            algorithm.to_string(),
            last.p_at_1,
            test_metrics.p_at_1,
            test_metrics.map,
            last.collapse_gauge
        );
    }
    Ok(())
}
