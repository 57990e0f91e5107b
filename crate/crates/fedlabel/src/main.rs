//! Command-line front end: dataset preparation, experiment runs from flat
//! key=value config files, and the built-in verification suites.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedlabel::config::{
    load_config, render_history_csv, render_manifest, sha256_file, DataSource,
};
use fedlabel::data::{parse_xmlc_file, shard_by_label, split, write_xmlc_file};
use fedlabel::federation::run_experiment;
use fedlabel::model::save_checkpoint;
use fedlabel::oracles::run_suite;
use fedlabel::Result;

#[derive(Parser)]
#[command(name = "fedlabel", about = "Federated multi-label training simulator", version)]
struct Cli {
    /// Worker threads for client rounds and evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a dataset file into train/val (and pass through an optional
    /// test file), writing a per-label shard index alongside.
    Prepare {
        /// Input dataset in the sparse "header + label,label feat:val ..." format.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for train.txt, val.txt, test.txt, shards.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Fraction of instances moved into the validation file.
        #[arg(long, default_value_t = 0.05)]
        val_frac: f64,
        /// Shuffle seed for the split.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Optional test file, re-serialized unchanged into the output dir.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Execute an experiment from a config (or manifest) file.
    Run {
        /// key=value config file; a previous run's manifest.txt also works.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for history.csv, manifest.txt, model.ckpt.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run a built-in verification suite and report per-check results.
    Verify {
        /// One of: gradients, sigma, metrics, collapse.
        #[arg(long)]
        suite: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDLABEL_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Ignore failure: the pool may already exist in embedded use.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let outcome = match cli.command {
        Command::Prepare { input, out, val_frac, seed, test } => {
            cmd_prepare(&input, &out, val_frac, seed, test.as_deref()).map(|()| ExitCode::SUCCESS)
        }
        Command::Run { config, out_dir } => cmd_run(&config, &out_dir).map(|()| ExitCode::SUCCESS),
        Command::Verify { suite } => cmd_verify(&suite),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_prepare(
    input: &std::path::Path,
    out: &std::path::Path,
    val_frac: f64,
    seed: u64,
    test: Option<&std::path::Path>,
) -> Result<()> {
    let full = parse_xmlc_file(input)?;
    let (train, val) = split(&full, val_frac, seed)?;
    std::fs::create_dir_all(out)?;
    write_xmlc_file(&train, &out.join("train.txt"))?;
    write_xmlc_file(&val, &out.join("val.txt"))?;
    if let Some(test_path) = test {
        let test_ds = parse_xmlc_file(test_path)?;
        write_xmlc_file(&test_ds, &out.join("test.txt"))?;
        log::info!("test: {} instances", test_ds.len());
    }

    let shards = shard_by_label(&train);
    let mut tsv = String::from("label\tinstances\n");
    for shard in &shards {
        tsv.push_str(&format!("{}\t{}\n", shard.label, shard.instances.len()));
    }
    std::fs::write(out.join("shards.tsv"), tsv)?;
    log::info!(
        "prepared {}: {} train / {} val instances, {} labels",
        out.display(),
        train.len(),
        val.len(),
        full.num_classes
    );
    Ok(())
}

fn cmd_run(config: &std::path::Path, out_dir: &std::path::Path) -> Result<()> {
    let spec = load_config(config)?;
    let mut checksums = Vec::new();
    if let DataSource::Files { train, val, test, .. } = &spec.data {
        checksums.push(("train".to_string(), sha256_file(train)?));
        if let Some(p) = val {
            checksums.push(("val".to_string(), sha256_file(p)?));
        }
        if let Some(p) = test {
            checksums.push(("test".to_string(), sha256_file(p)?));
        }
    }
    let (train, val, test) = fedlabel::config::materialize_data(&spec)?;
    let result = run_experiment(&train, &val, test.as_ref(), &spec.train)?;

    std::fs::create_dir_all(out_dir)?;
    let history_name = "history.csv";
    std::fs::write(out_dir.join(history_name), render_history_csv(&result.reports))?;
    std::fs::write(
        out_dir.join("manifest.txt"),
        render_manifest(
            &spec,
            &checksums,
            &result.reports,
            result.best_validation,
            result.test_metrics,
            history_name,
        ),
    )?;
    save_checkpoint(
        &result.state.params,
        &result.state.class_embeddings,
        &out_dir.join("model.ckpt"),
    )?;

    if let Some(last) = result.reports.last() {
        log::info!(
            "finished {} rounds: val p@1 {:.4}, collapse gauge {:.4}",
            result.reports.len(),
            last.p_at_1,
            last.collapse_gauge
        );
    }
    if let Some(m) = result.test_metrics {
        log::info!("test: p@1 {:.4}, p@3 {:.4}, p@5 {:.4}, map {:.4}", m.p_at_1, m.p_at_3, m.p_at_5, m.map);
    }
    log::info!("wrote {}", out_dir.display());
    Ok(())
}

fn cmd_verify(suite: &str) -> Result<ExitCode> {
    let outcomes = match run_suite(suite) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    let mut failures = 0usize;
    for o in &outcomes {
        println!("{} {} ({})", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        if !o.passed {
            failures += 1;
        }
    }
    println!(
        "suite `{suite}`: {}/{} checks passed",
        outcomes.len() - failures,
        outcomes.len()
    );
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
