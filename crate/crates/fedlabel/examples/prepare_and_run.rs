//! The file-based workflow end to end, exactly what the CLI does: write a
//! sparse dataset in the text repository format, split it, describe the
//! run in a config file, execute it, and read back the round history and
//! the manifest.
//!
//! ```bash
//! cargo run --example prepare_and_run
//! ```

use std::fs;

use fedlabel::config::{load_config, materialize_data, render_history_csv, render_manifest};
use fedlabel::data::{parse_xmlc_file, split, synth_multilabel, write_xmlc_file, SynthConfig};
use fedlabel::federation::run_experiment;

fn main() -> fedlabel::Result<()> {
    let dir = std::env::temp_dir().join("fedlabel_prepare_and_run");
    fs::create_dir_all(&dir)?;

    // A corpus on disk: header "N F L", then one line per instance with
    // comma-separated labels followed by index:value feature pairs.
    let ds = synth_multilabel(&SynthConfig {
        seed: 21,
        num_classes: 10,
        num_features: 40,
        num_instances: 500,
        avg_labels: 2.0,
        num_clusters: 2,
    })?;
    let input = dir.join("corpus.txt");
    write_xmlc_file(&ds, &input)?;
    println!("wrote {} ({} instances)", input.display(), ds.instances.len());

    // Prepare: hold out a validation fraction, deterministically by seed.
    let full = parse_xmlc_file(&input)?;
    let (train, val) = split(&full, 0.1, 7)?;
    write_xmlc_file(&train, &dir.join("train.txt"))?;
    write_xmlc_file(&val, &dir.join("val.txt"))?;
    println!("split into {} train / {} val", train.instances.len(), val.instances.len());

    // A run is a flat key=value file; unknown keys are rejected, missing
    // ones take defaults. `train=`/`val=` point at the prepared splits.
    let config_text = format!(
        "algorithm=fedalc\n\
         rounds=25\n\
         client_lr=0.3\n\
         server_lr=1.5\n\
         seed=7\n\
         embed_dim=32\n\
         out_dim=16\n\
         train={}\n\
         val={}\n",
        dir.join("train.txt").display(),
        dir.join("val.txt").display()
    );
    let config_path = dir.join("run.cfg");
    fs::write(&config_path, &config_text)?;
    let spec = load_config(&config_path)?;

    let (train, val, test) = materialize_data(&spec)?;
    let result = run_experiment(&train, &val, test.as_ref(), &spec.train)?;

    // The CSV history and the manifest are the run's durable outputs; the
    // manifest echoes the full config, so it can be re-run as one.
    let csv = render_history_csv(&result.reports);
    fs::write(dir.join("history.csv"), &csv)?;
    println!("\nfirst rounds of {}:", dir.join("history.csv").display());
    for line in csv.lines().take(4) {
        println!("  {line}");
    }
    let manifest = render_manifest(
        &spec,
        &[],
        &result.reports,
        result.best_validation,
        result.test_metrics,
        "history.csv",
    );
    fs::write(dir.join("manifest.txt"), &manifest)?;
    println!("\nmanifest highlights:");
    for line in manifest.lines().filter(|l| l.starts_with("result.")) {
        println!("  {line}");
    }
    Ok(())
}
