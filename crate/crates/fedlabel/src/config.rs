//! Experiment configuration files, run manifests, and the metric CSV.
//!
//! Configs are flat `key=value` text: blank lines and `#` comments are
//! skipped, keys may appear once, and validation reports *every* offending
//! key at once rather than stopping at the first. A run manifest embeds the
//! fully-resolved config under a `config.` prefix plus dataset checksums
//! and final metrics; feeding the manifest back to the runner reproduces
//! the run — and its CSV — byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::MapVariant;
use crate::federation::{Metrics, RoundReport, TrainConfig};
use crate::labelsets::CanonicalizeMode;

pub const MANIFEST_HEADER: &str = "# fedlabel-manifest-v1";
pub const HISTORY_HEADER: &str = "# fedlabel-history-v1";
pub const HISTORY_COLUMNS: &str = "round,p_at_1,p_at_3,p_at_5,map,collapse_gauge,mean_client_loss";

/// Sub-seed tag for the automatic train/validation split, so the split and
/// the training loop draw from independent streams of the one run seed.
pub const SPLIT_SEED_TAG: u64 = 0x7370_6c69_74; // "split"

/// Where the run gets its data.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Pre-materialized dataset files in the plain-text format.
    Files {
        train: PathBuf,
        /// Explicit validation file; when absent, `val_frac` of the training
        /// file is split off.
        val: Option<PathBuf>,
        test: Option<PathBuf>,
        val_frac: f64,
    },
    /// Generate the clustered synthetic dataset in-process. The generator
    /// seed is the training seed, so one `seed` key pins the whole run.
    Synth {
        classes: u32,
        features: usize,
        instances: usize,
        avg_labels: f64,
        clusters: usize,
        /// Extra instances generated (from a derived seed) as a test split.
        test_instances: usize,
        val_frac: f64,
    },
}

/// A fully-resolved run: training knobs plus data source.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub data: DataSource,
}

fn canonicalize_name(mode: CanonicalizeMode) -> &'static str {
    match mode {
        CanonicalizeMode::RawFeatures => "raw-features",
        CanonicalizeMode::InitialEmbedding => "initial-embedding",
    }
}

fn parse_canonicalize(s: &str) -> Result<CanonicalizeMode> {
    match s {
        "raw-features" => Ok(CanonicalizeMode::RawFeatures),
        "initial-embedding" => Ok(CanonicalizeMode::InitialEmbedding),
        other => Err(Error::InvalidArgument(format!(
            "unknown canonicalize mode `{other}` (expected `raw-features` or `initial-embedding`)"
        ))),
    }
}

fn sigma_mode_name(mode: crate::federation::SigmaMode) -> &'static str {
    match mode {
        crate::federation::SigmaMode::Raw => "raw",
        crate::federation::SigmaMode::Normalized => "normalized",
    }
}

fn map_variant_name(variant: MapVariant) -> &'static str {
    match variant {
        MapVariant::MacroByClass => "macro",
        MapVariant::ByInstance => "instance",
    }
}

/// Collects raw `key=value` pairs, reporting malformed and duplicate lines.
fn collect_pairs(text: &str, errors: &mut Vec<String>) -> BTreeMap<String, String> {
    let mut pairs = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            None => errors.push(format!("line {}: expected key=value, got `{line}`", idx + 1)),
            Some((k, v)) => {
                let key = k.trim().to_string();
                if pairs.insert(key.clone(), v.trim().to_string()).is_some() {
                    errors.push(format!("duplicate key `{key}`"));
                }
            }
        }
    }
    pairs
}

struct KeyReader {
    pairs: BTreeMap<String, String>,
    errors: Vec<String>,
}

impl KeyReader {
    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.pairs.remove(key)
    }

    /// Parses and removes `key`, recording a description of any failure.
    fn take<T>(&mut self, key: &str) -> Option<T>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        let raw = self.pairs.remove(key)?;
        match raw.parse::<T>() {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(format!("key `{key}`: cannot parse `{raw}`: {e}"));
                None
            }
        }
    }

    fn take_with<T>(&mut self, key: &str, parse: impl Fn(&str) -> Result<T>) -> Option<T> {
        let raw = self.pairs.remove(key)?;
        match parse(&raw) {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(format!("key `{key}`: {e}"));
                None
            }
        }
    }
}

/// Parses a config — or a run manifest, whose embedded `config.` block is
/// then read back — into a [`RunSpec`], applying documented defaults for
/// absent keys. Every unknown key, bad value, and structural problem is
/// listed in the single returned error.
pub fn parse_config(text: &str) -> Result<RunSpec> {
    let body;
    let effective = if text.lines().next().map(str::trim) == Some(MANIFEST_HEADER) {
        body = text
            .lines()
            .filter_map(|l| l.strip_prefix("config."))
            .collect::<Vec<_>>()
            .join("\n");
        body.as_str()
    } else {
        text
    };

    let mut errors = Vec::new();
    let pairs = collect_pairs(effective, &mut errors);
    let mut reader = KeyReader { pairs, errors };
    let mut cfg = TrainConfig::default();

    match reader.take::<crate::federation::Algorithm>("algorithm") {
        Some(a) => cfg.algorithm = a,
        None => {
            if !reader.errors.iter().any(|e| e.contains("`algorithm`")) {
                reader.errors.push("missing required key `algorithm`".into());
            }
        }
    }
    if let Some(v) = reader.take("rounds") {
        cfg.rounds = v;
    }
    if let Some(v) = reader.take("pretrain_steps") {
        cfg.pretrain_steps = v;
    }
    if let Some(v) = reader.take("client_lr") {
        cfg.client_lr = v;
    }
    if let Some(v) = reader.take("server_lr") {
        cfg.server_lr = v;
    }
    if let Some(v) = reader.take("local_epochs") {
        cfg.local_epochs = v;
    }
    if let Some(v) = reader.take("batch_size") {
        cfg.batch_size = v;
    }
    if let Some(v) = reader.take("seed") {
        cfg.seed = v;
    }
    if let Some(v) = reader.take("alpha") {
        cfg.hp.alpha = v;
    }
    if let Some(v) = reader.take("beta") {
        cfg.hp.beta = v;
    }
    if let Some(v) = reader.take("nu") {
        cfg.hp.nu = v;
    }
    if let Some(v) = reader.take("lambda") {
        cfg.hp.lambda = v;
    }
    if let Some(v) = reader.take("margin_pos") {
        cfg.hp.margin_pos = v;
    }
    if let Some(v) = reader.take("mining_k") {
        cfg.hp.mining_k = v;
    }
    if let Some(v) = reader.take("sigma_mode") {
        cfg.sigma_mode = v;
    }
    if let Some(v) = reader.take("sigma_per_instance") {
        cfg.sigma_per_instance = v;
    }
    if let Some(v) = reader.take("full_pair_reg") {
        cfg.full_pair_reg = v;
    }
    if let Some(v) = reader.take_with("canonicalize", parse_canonicalize) {
        cfg.canonicalize = v;
    }
    if let Some(v) = reader.take("map_variant") {
        cfg.map_variant = v;
    }
    if let Some(v) = reader.take("embed_dim") {
        cfg.embed_dim = v;
    }
    if let Some(v) = reader.take("hidden1") {
        cfg.hidden1 = v;
    }
    if let Some(v) = reader.take("hidden2") {
        cfg.hidden2 = v;
    }
    if let Some(v) = reader.take("out_dim") {
        cfg.out_dim = v;
    }

    let train_path = reader.take_raw("train").map(PathBuf::from);
    let val_path = reader.take_raw("val").map(PathBuf::from);
    let test_path = reader.take_raw("test").map(PathBuf::from);
    let val_frac_key: Option<f64> = reader.take("val_frac");
    let synth_classes: Option<u32> = reader.take("synth_classes");
    let synth_features: Option<usize> = reader.take("synth_features");
    let synth_instances: Option<usize> = reader.take("synth_instances");
    let synth_avg_labels: Option<f64> = reader.take("synth_avg_labels");
    let synth_clusters: Option<usize> = reader.take("synth_clusters");
    let synth_test: Option<usize> = reader.take("synth_test_instances");

    for key in reader.pairs.keys() {
        reader.errors.push(format!("unknown key `{key}`"));
    }
    let mut errors = reader.errors;

    let val_frac = val_frac_key.unwrap_or(0.05);
    if !(0.0..1.0).contains(&val_frac) {
        errors.push(format!("key `val_frac`: {val_frac} is not in [0, 1)"));
    }

    let synth_requested = synth_classes.is_some()
        || synth_features.is_some()
        || synth_instances.is_some()
        || synth_avg_labels.is_some()
        || synth_clusters.is_some()
        || synth_test.is_some();
    let data = match (train_path, synth_requested) {
        (Some(_), true) => {
            errors.push("`train` (file mode) conflicts with `synth_*` keys".into());
            None
        }
        (None, false) => {
            errors.push("no data source: set `train=<path>` or the `synth_*` keys".into());
            None
        }
        (Some(train), false) => {
            if val_path.is_some() && val_frac_key.is_some() {
                errors.push("`val_frac` conflicts with an explicit `val` file".into());
            }
            Some(DataSource::Files {
                train,
                val: val_path,
                test: test_path,
                val_frac,
            })
        }
        (None, true) => {
            if val_path.is_some() || test_path.is_some() {
                errors.push("`val`/`test` files conflict with synthetic data".into());
            }
            let mut missing = Vec::new();
            for (key, present) in [
                ("synth_classes", synth_classes.is_some()),
                ("synth_features", synth_features.is_some()),
                ("synth_instances", synth_instances.is_some()),
                ("synth_avg_labels", synth_avg_labels.is_some()),
                ("synth_clusters", synth_clusters.is_some()),
            ] {
                if !present {
                    missing.push(key);
                }
            }
            if missing.is_empty() {
                Some(DataSource::Synth {
                    classes: synth_classes.unwrap(),
                    features: synth_features.unwrap(),
                    instances: synth_instances.unwrap(),
                    avg_labels: synth_avg_labels.unwrap(),
                    clusters: synth_clusters.unwrap(),
                    test_instances: synth_test.unwrap_or(0),
                    val_frac,
                })
            } else {
                errors.push(format!("synthetic data needs keys: {}", missing.join(", ")));
                None
            }
        }
    };

    if let Err(e) = cfg.validate() {
        errors.push(e.to_string());
    }
    if errors.is_empty() {
        Ok(RunSpec {
            train: cfg,
            data: data.expect("no errors implies a data source"),
        })
    } else {
        Err(Error::Config(errors.join("; ")))
    }
}

pub fn load_config(path: &Path) -> Result<RunSpec> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Renders a spec with every key materialized, in a fixed order, so equal
/// specs produce identical bytes. `parse_config ∘ serialize_config` is the
/// identity.
pub fn serialize_config(spec: &RunSpec) -> String {
    let cfg = &spec.train;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k}={v}");
    };
    kv("algorithm", cfg.algorithm.name().into());
    kv("rounds", cfg.rounds.to_string());
    kv("pretrain_steps", cfg.pretrain_steps.to_string());
    kv("client_lr", cfg.client_lr.to_string());
    kv("server_lr", cfg.server_lr.to_string());
    kv("local_epochs", cfg.local_epochs.to_string());
    kv("batch_size", cfg.batch_size.to_string());
    kv("seed", cfg.seed.to_string());
    kv("alpha", cfg.hp.alpha.to_string());
    kv("beta", cfg.hp.beta.to_string());
    kv("nu", cfg.hp.nu.to_string());
    kv("lambda", cfg.hp.lambda.to_string());
    kv("margin_pos", cfg.hp.margin_pos.to_string());
    kv("mining_k", cfg.hp.mining_k.to_string());
    kv("sigma_mode", sigma_mode_name(cfg.sigma_mode).into());
    kv("sigma_per_instance", cfg.sigma_per_instance.to_string());
    kv("full_pair_reg", cfg.full_pair_reg.to_string());
    kv("canonicalize", canonicalize_name(cfg.canonicalize).into());
    kv("map_variant", map_variant_name(cfg.map_variant).into());
    kv("embed_dim", cfg.embed_dim.to_string());
    kv("hidden1", cfg.hidden1.to_string());
    kv("hidden2", cfg.hidden2.to_string());
    kv("out_dim", cfg.out_dim.to_string());
    match &spec.data {
        DataSource::Files {
            train,
            val,
            test,
            val_frac,
        } => {
            kv("train", train.display().to_string());
            if let Some(val) = val {
                kv("val", val.display().to_string());
            } else {
                kv("val_frac", val_frac.to_string());
            }
            if let Some(test) = test {
                kv("test", test.display().to_string());
            }
        }
        DataSource::Synth {
            classes,
            features,
            instances,
            avg_labels,
            clusters,
            test_instances,
            val_frac,
        } => {
            kv("synth_classes", classes.to_string());
            kv("synth_features", features.to_string());
            kv("synth_instances", instances.to_string());
            kv("synth_avg_labels", avg_labels.to_string());
            kv("synth_clusters", clusters.to_string());
            kv("synth_test_instances", test_instances.to_string());
            kv("val_frac", val_frac.to_string());
        }
    }
    out
}

/// Derives the synthetic generator settings for a spec: one generator draw
/// covers the training pool plus the trailing test block, so both splits
/// share identical cluster structure and differ only in which instances
/// they hold. Returns the combined config and the test block size.
pub fn synth_configs(spec: &RunSpec) -> Option<(SynthConfig, usize)> {
    match spec.data {
        DataSource::Synth {
            classes,
            features,
            instances,
            avg_labels,
            clusters,
            test_instances,
            ..
        } => Some((
            SynthConfig {
                seed: spec.train.seed,
                num_classes: classes,
                num_features: features,
                num_instances: instances + test_instances,
                avg_labels,
                num_clusters: clusters,
            },
            test_instances,
        )),
        DataSource::Files { .. } => None,
    }
}

/// Turns a spec's data source into concrete train/validation/test datasets:
/// parses files (splitting off validation when no file is given) or runs
/// the synthetic generator. This is the single path both the CLI and the
/// built-in fixtures go through.
pub fn materialize_data(
    spec: &RunSpec,
) -> Result<(
    crate::data::MultiLabelDataset,
    crate::data::MultiLabelDataset,
    Option<crate::data::MultiLabelDataset>,
)> {
    use crate::data::{parse_xmlc_file, split, synth_multilabel, MultiLabelDataset};
    match &spec.data {
        DataSource::Files {
            train,
            val,
            test,
            val_frac,
        } => {
            let full = parse_xmlc_file(train)?;
            let (train_ds, val_ds) = match val {
                Some(path) => (full, parse_xmlc_file(path)?),
                None => split(
                    &full,
                    *val_frac,
                    crate::numeric::mix_seed(spec.train.seed, SPLIT_SEED_TAG),
                )?,
            };
            let test_ds = match test {
                Some(path) => Some(parse_xmlc_file(path)?),
                None => None,
            };
            Ok((train_ds, val_ds, test_ds))
        }
        DataSource::Synth { val_frac, .. } => {
            let (gen_cfg, test_n) =
                synth_configs(spec).expect("synth source yields synth configs");
            let mut full = synth_multilabel(&gen_cfg)?;
            let test_ds = (test_n > 0).then(|| MultiLabelDataset {
                num_features: full.num_features,
                num_classes: full.num_classes,
                instances: full.instances.split_off(full.instances.len() - test_n),
            });
            let (train_ds, val_ds) = split(
                &full,
                *val_frac,
                crate::numeric::mix_seed(spec.train.seed, SPLIT_SEED_TAG),
            )?;
            Ok((train_ds, val_ds, test_ds))
        }
    }
}

/// Renders the metric CSV: a version comment, the fixed column
/// header, then one row per round with all floats at 6 decimals.
pub fn render_history_csv(reports: &[RoundReport]) -> String {
    let mut out = String::with_capacity(64 * (reports.len() + 2));
    out.push_str(HISTORY_HEADER);
    out.push('\n');
    out.push_str(HISTORY_COLUMNS);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.round, r.p_at_1, r.p_at_3, r.p_at_5, r.map, r.collapse_gauge, r.mean_client_loss
        );
    }
    out
}

/// Renders the run manifest: the full config under a `config.` prefix,
/// SHA-256 checksums of the dataset files consumed, and the headline
/// results. The manifest itself parses as a config (see [`parse_config`]).
pub fn render_manifest(
    spec: &RunSpec,
    checksums: &[(String, String)],
    reports: &[RoundReport],
    best_validation: Option<(usize, f64)>,
    test_metrics: Option<Metrics>,
    history_file: &str,
) -> String {
    let mut out = String::new();
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    for line in serialize_config(spec).lines() {
        let _ = writeln!(out, "config.{line}");
    }
    for (name, hex) in checksums {
        let _ = writeln!(out, "data.{name}.sha256={hex}");
    }
    let _ = writeln!(out, "result.history={history_file}");
    let _ = writeln!(out, "result.rounds={}", reports.len());
    if let Some(last) = reports.last() {
        let _ = writeln!(out, "result.final.p_at_1={:.6}", last.p_at_1);
        let _ = writeln!(out, "result.final.p_at_3={:.6}", last.p_at_3);
        let _ = writeln!(out, "result.final.p_at_5={:.6}", last.p_at_5);
        let _ = writeln!(out, "result.final.map={:.6}", last.map);
        let _ = writeln!(out, "result.final.collapse_gauge={:.6}", last.collapse_gauge);
    }
    if let Some((round, p1)) = best_validation {
        let _ = writeln!(out, "result.best_val.round={round}");
        let _ = writeln!(out, "result.best_val.p_at_1={p1:.6}");
    }
    if let Some(m) = test_metrics {
        let _ = writeln!(out, "result.test.p_at_1={:.6}", m.p_at_1);
        let _ = writeln!(out, "result.test.p_at_3={:.6}", m.p_at_3);
        let _ = writeln!(out, "result.test.p_at_5={:.6}", m.p_at_5);
        let _ = writeln!(out, "result.test.map={:.6}", m.map);
    }
    out
}

/// Streaming SHA-256 of a file, as lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}
