//! `ladi-flood` subcommands: prepare, sample, train, eval, audit.
//!
//! Exit codes: 0 success, 1 I/O, 2 validation or configuration, 3 runtime
//! abort.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;

use crate::catalog::{
    curate, load_annotations, load_annotations_with_metadata, read_index, write_index, AnnotationFormat,
    CatalogError, CuratedIndex, Label,
};
use crate::config::{ConfigError, Resolved, RunConfig, Source, KEYS};
use crate::dataset::{
    draw_balanced_with_reserve, fetch_all, fetch_image, read_samples, split, write_samples, DatasetError,
    ImageCache, LabeledSample, RgbImage, SampleDraw, CACHE_ENV_VAR,
};
use crate::evaluation::{
    audit, comparison_table, format_metric, predict, render_grid, EvalError, EvalReport, SeedProvenance,
};
use crate::models::{build_model, BuildOptions, ModelError, ModelSpec};
use crate::training::{
    load_checkpoint, train, CheckpointError, CheckpointMeta, CheckpointSink, DataProvenance, TrainError, TrainSet,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

fn err(code: i32, e: impl std::fmt::Display) -> CliError {
    CliError {
        code,
        message: e.to_string(),
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Io { .. } => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        err(code, e)
    }
}

impl From<CatalogError> for CliError {
    fn from(e: CatalogError) -> Self {
        let code = match e {
            CatalogError::Io { .. } => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        err(code, e)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let code = match e {
            DatasetError::Io { .. } | DatasetError::FetchError { .. } => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        err(code, e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::Io { .. } => EXIT_IO,
            ModelError::Torch(_) => EXIT_RUNTIME,
            _ => EXIT_VALIDATION,
        };
        err(code, e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io { .. } => EXIT_IO,
            CheckpointError::Corrupt { .. } => EXIT_VALIDATION,
        };
        err(code, e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(e) => e.into(),
            TrainError::Dataset(e) => e.into(),
            TrainError::Checkpoint(e) => e.into(),
            TrainError::Io { .. } => err(EXIT_IO, e),
            TrainError::InvalidConfig(_) | TrainError::ShapeMismatch(_) | TrainError::EmptyTrainSet => {
                err(EXIT_VALIDATION, e)
            }
            TrainError::NonFiniteLoss { .. } | TrainError::OutOfMemory { .. } | TrainError::Torch(_) => {
                err(EXIT_RUNTIME, e)
            }
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(e) => e.into(),
            EvalError::Dataset(e) => e.into(),
            EvalError::Io { .. } | EvalError::Encode { .. } => err(EXIT_IO, e),
            _ => err(EXIT_VALIDATION, e),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    err(EXIT_IO, format!("{}: {e}", path.display()))
}

const BOOL_KEYS: &[&str] = &["offline", "include_machine", "stratified", "pretrained", "save_best"];

const FETCH_KEYS: &[&str] = &["cache_dir", "offline", "parallelism"];
const DRAW_KEYS: &[&str] = &["index", "n", "ratio", "train_fraction", "stratified", "data_seed"];
const TRAIN_KEYS: &[&str] = &[
    "model_seed",
    "augment_seed",
    "model",
    "pretrained",
    "weights_dir",
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "lr_decay_every",
    "lr_decay_gamma",
    "device",
    "save_best",
    "resize",
    "resize_mode",
    "crop",
    "rotation",
    "hflip",
    "checkpoint",
];

fn subcommand_keys(name: &str) -> Vec<&'static str> {
    let mut keys: Vec<&'static str> = vec!["out_dir"];
    match name {
        "prepare" => keys.extend(["labels", "metadata", "index", "include_machine"]),
        "sample" => keys.extend(DRAW_KEYS),
        "train" => {
            keys.extend(DRAW_KEYS);
            keys.extend(FETCH_KEYS);
            keys.extend(TRAIN_KEYS);
        }
        "eval" => {
            keys.extend(["checkpoint", "index", "test_split", "data_seed", "grid_k"]);
            keys.extend(FETCH_KEYS);
        }
        "audit" => {
            keys.extend(["checkpoint", "index", "tau"]);
            keys.extend(FETCH_KEYS);
        }
        _ => {}
    }
    keys
}

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("prepare", "Clean an annotation table and write the curated flood index"),
    ("sample", "Draw a balanced sample from the index and write train/test split files"),
    ("train", "Draw, split, fetch and train a model; writes a checkpoint and training log"),
    ("eval", "Score a checkpoint on its test split; writes a report, comparison row and prediction grid"),
    ("audit", "List index images whose human label the model confidently contradicts"),
];

fn doc(key: &str) -> &'static str {
    KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d).unwrap_or("")
}

// The parser is built once per process, so leaking its strings is fine.
fn leak(s: String) -> &'static str {
    String::leak(s)
}

fn option_arg(key: &'static str, defaults: &RunConfig) -> Arg {
    let mut arg = Arg::new(key).long(leak(key.replace('_', "-"))).help(doc(key));
    if BOOL_KEYS.contains(&key) {
        arg = arg
            .num_args(0..=1)
            .value_name("BOOL")
            .default_missing_value("true")
            .action(ArgAction::Set);
    } else {
        arg = arg.value_name(leak(key.to_ascii_uppercase()));
    }
    match defaults.get(key) {
        Some(v) if !v.is_empty() => arg.default_value(leak(v)),
        _ => arg,
    }
}

/// The full argument parser; every flag's help shows its default.
pub fn command() -> Command {
    let defaults = RunConfig::default();
    let mut root = Command::new("ladi-flood")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Curate, train and evaluate flood / non-flood aerial image classifiers")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("Flat `key = value` config file; command-line flags override it"),
        );
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(*name).about(*about);
        for key in subcommand_keys(name) {
            sub = sub.arg(option_arg(key, &defaults));
        }
        root = root.subcommand(sub);
    }
    root
}

fn flags_from(matches: &ArgMatches, name: &str) -> Vec<(String, String)> {
    subcommand_keys(name)
        .into_iter()
        .filter(|k| matches.value_source(k) == Some(ValueSource::CommandLine))
        .filter_map(|k| matches.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect()
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    config: BTreeMap<String, String>,
    sources: BTreeMap<String, Source>,
    outputs: Vec<PathBuf>,
}

/// Parse `argv`, run the subcommand and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match dispatch(name, sub) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(name: &str, sub: &ArgMatches) -> Result<(), CliError> {
    let config_file = sub.get_one::<String>("config").map(PathBuf::from);
    let resolved = Resolved::build(config_file.as_deref(), &flags_from(sub, name))?;
    let keys = subcommand_keys(name);
    for (key, value, source) in resolved.effective() {
        if keys.contains(&key.as_str()) {
            log::info!("{key} = {value} ({source})");
        }
    }
    let cfg = &resolved.config;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let outputs = match name {
        "prepare" => cmd_prepare(cfg)?,
        "sample" => cmd_sample(cfg)?,
        "train" => cmd_train(cfg)?,
        "eval" => cmd_eval(cfg)?,
        "audit" => cmd_audit(cfg)?,
        other => return Err(CliError::usage(format!("unknown subcommand {other}"))),
    };
    let manifest = RunManifest {
        command: name,
        version: env!("CARGO_PKG_VERSION"),
        config: resolved
            .effective()
            .into_iter()
            .filter(|(k, _, _)| keys.contains(&k.as_str()))
            .map(|(k, v, _)| (k, v))
            .collect(),
        sources: resolved
            .sources
            .iter()
            .filter(|(k, _)| keys.contains(&k.as_str()))
            .map(|(k, s)| (k.clone(), *s))
            .collect(),
        outputs,
    };
    let path = cfg.out_dir.join(format!("run-manifest-{name}.json"));
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))
}

fn cache_for(cfg: &RunConfig) -> ImageCache {
    let cache = match &cfg.cache_dir {
        Some(dir) => ImageCache::new(dir),
        None => ImageCache::from_env_or(cfg.cache_path()),
    };
    log::info!(
        "image cache: {} (override with --cache-dir or {CACHE_ENV_VAR})",
        cache.dir().display()
    );
    cache.offline(cfg.offline)
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| io_err(p, e)),
        _ => Ok(()),
    }
}

fn cmd_prepare(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let labels = cfg
        .labels
        .as_ref()
        .ok_or_else(|| CliError::usage("prepare needs --labels"))?;
    let format = AnnotationFormat::from_path(labels).ok_or_else(|| CatalogError::UnknownFormat {
        path: labels.clone(),
    })?;
    let mut sources = vec![labels.display().to_string()];
    let rows = match &cfg.metadata {
        Some(meta) => {
            let meta_format =
                AnnotationFormat::from_path(meta).ok_or_else(|| CatalogError::UnknownFormat { path: meta.clone() })?;
            sources.push(meta.display().to_string());
            load_annotations_with_metadata(labels, format, meta, meta_format)?
        }
        None => load_annotations(labels, format)?,
    };
    let index = curate(rows, cfg.include_machine, sources);
    let out = cfg.index_path();
    create_parent(&out)?;
    write_index(&index, &out)?;

    let stats = serde_json::to_value(&index.provenance.stats).expect("stats serialize");
    if let Some(map) = stats.as_object() {
        for (k, v) in map {
            println!("{k}: {v}");
        }
    }
    println!(
        "index: {} images ({} flood, {} non-flood) -> {}",
        index.len(),
        index.count(Label::Flood),
        index.count(Label::NonFlood),
        out.display()
    );
    Ok(vec![out.clone(), crate::catalog::stats_path(&out)])
}

fn draw_and_split(
    cfg: &RunConfig,
    index: &CuratedIndex,
    cache: Option<&ImageCache>,
) -> Result<(SampleDraw, Vec<LabeledSample>, Vec<LabeledSample>, HashMap<String, RgbImage>), CliError> {
    let (mut draw, mut reserve) = draw_balanced_with_reserve(index, cfg.n, cfg.ratio, cfg.data_seed)?;
    let mut images = HashMap::new();
    if let Some(cache) = cache {
        let fetched = fetch_all(&draw.samples, cache, cfg.parallelism, Ok);
        for (i, result) in fetched.into_iter().enumerate() {
            let mut result = result;
            loop {
                match result {
                    Ok(img) => {
                        images.insert(draw.samples[i].image_id.clone(), img);
                        break;
                    }
                    Err(e) if e.is_per_sample() => {
                        let label = draw.samples[i].label;
                        let replacement = reserve.take(label).ok_or_else(|| {
                            CliError::from(DatasetError::InsufficientClass {
                                label: if label == Label::Flood { "flood" } else { "non-flood" },
                                required: cfg.n,
                                available: images.len(),
                            })
                        })?;
                        log::warn!("{e}; replacing {} with {}", draw.samples[i].image_id, replacement.image_id);
                        draw.samples[i] = replacement;
                        result = fetch_image(&draw.samples[i], cache);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    let (train_set, test_set) = split(&draw, &cfg.split_spec())?;
    Ok((draw, train_set, test_set, images))
}

fn cmd_sample(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let index = read_index(&cfg.index_path())?;
    let (draw, train_set, test_set, _) = draw_and_split(cfg, &index, None)?;
    let train_path = cfg.out_dir.join("train.csv");
    let test_path = cfg.out_dir.join("test.csv");
    write_samples(&train_path, &train_set)?;
    write_samples(&test_path, &test_set)?;
    let count = |s: &[LabeledSample], l: Label| s.iter().filter(|x| x.label == l).count();
    println!(
        "draw: {} samples ({} flood / {} non-flood), seed {}",
        draw.samples.len(),
        draw.count(Label::Flood),
        draw.count(Label::NonFlood),
        draw.seed
    );
    println!(
        "train: {} ({} / {}), test: {} ({} / {})",
        train_set.len(),
        count(&train_set, Label::Flood),
        count(&train_set, Label::NonFlood),
        test_set.len(),
        count(&test_set, Label::Flood),
        count(&test_set, Label::NonFlood)
    );
    Ok(vec![train_path, test_path])
}

fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let train_config = cfg.train_config();
    train_config.validate()?;
    let policy = cfg.policy();
    policy.validate()?;
    let index_path = cfg.index_path();
    let index = read_index(&index_path)?;
    let cache = cache_for(cfg);
    let (_, train_samples, test_samples, mut images) = draw_and_split(cfg, &index, Some(&cache))?;
    let train_path = cfg.out_dir.join("train.csv");
    let test_path = cfg.out_dir.join("test.csv");
    write_samples(&train_path, &train_samples)?;
    write_samples(&test_path, &test_samples)?;

    let examples = train_samples
        .iter()
        .map(|s| {
            let img = images.remove(&s.image_id).expect("every drawn sample was fetched");
            (s.image_id.clone(), img, s.label)
        })
        .collect();
    let set = TrainSet::new(examples, policy.clone())?;

    let pretrained = cfg.pretrained && cfg.model.has_pretrained_weights();
    let spec = ModelSpec::new(cfg.model)
        .pretrained(pretrained)
        .input_size(cfg.crop as i64);
    let options = BuildOptions {
        seed: cfg.model_seed,
        weights_dir: cfg.weights_dir.clone(),
        device: cfg.device.device(),
        ..Default::default()
    };
    let handle = build_model(&spec, &options)?;
    let mut meta = CheckpointMeta::new(spec, cfg.model_seed, &train_config, policy);
    meta.data = Some(DataProvenance {
        index: index_path.display().to_string(),
        data_seed: cfg.data_seed,
        n: cfg.n,
        ratio: cfg.ratio,
        split: cfg.split_spec(),
    });
    let weights = cfg.checkpoint_path();
    create_parent(&weights)?;
    let sink = CheckpointSink {
        weights: weights.clone(),
        meta,
    };
    let (_, log) = train(&handle, &set, &train_config, Some(&sink))?;
    let log_path = cfg.out_dir.join("train_log.jsonl");
    log.write_jsonl(&log_path)?;

    print!("{}", log.summary_table());
    if let Some(last) = log.epochs.last() {
        println!(
            "final: loss {:.5}, train accuracy {:.2}% ({} train / {} test images)",
            last.mean_loss,
            last.train_accuracy * 100.0,
            train_samples.len(),
            test_samples.len()
        );
    }
    println!("checkpoint: {}", weights.display());
    let mut outputs = vec![train_path, test_path, weights.clone(), crate::training::sidecar_path(&weights), log_path];
    if cfg.save_best {
        outputs.push(crate::training::best_path(&weights));
    }
    Ok(outputs)
}

fn test_samples_for(cfg: &RunConfig, meta: &CheckpointMeta, weights: &Path) -> Result<Vec<LabeledSample>, CliError> {
    if let Some(path) = &cfg.test_split {
        return Ok(read_samples(path)?);
    }
    let sibling = weights.with_file_name("test.csv");
    if sibling.is_file() {
        return Ok(read_samples(&sibling)?);
    }
    let data = meta
        .data
        .as_ref()
        .ok_or_else(|| CliError::usage("checkpoint records no data provenance; pass --test-split"))?;
    let index = read_index(cfg.index.as_deref().unwrap_or(Path::new(&data.index)))?;
    let mut derived = cfg.clone();
    derived.n = data.n;
    derived.ratio = data.ratio;
    derived.data_seed = data.data_seed;
    derived.train_fraction = data.split.train_fraction;
    derived.stratified = data.split.stratified;
    Ok(draw_and_split(&derived, &index, None)?.2)
}

fn cmd_eval(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let weights = cfg.checkpoint_path();
    let (handle, meta) = load_checkpoint(&weights)?;
    let test = test_samples_for(cfg, &meta, &weights)?;
    let cache = cache_for(cfg);
    let outcome = predict(&handle, &test, &cache, &meta.policy, cfg.parallelism)?;
    let size_mb = fs::metadata(&weights).map_err(|e| io_err(&weights, e))?.len() as f64 / 1e6;
    let seeds = SeedProvenance {
        data_seed: meta.data.as_ref().map_or(cfg.data_seed, |d| d.data_seed),
        model_seed: meta.seed,
        augment_seed: meta.train_config.seed,
    };
    let report = EvalReport::from_predictions(meta.spec.kind, &outcome, size_mb, Some(seeds))?;

    let report_path = cfg.out_dir.join("eval_report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&report_path, json + "\n").map_err(|e| io_err(&report_path, e))?;
    let table = comparison_table(std::slice::from_ref(&report));
    let table_path = cfg.out_dir.join("comparison.txt");
    fs::write(&table_path, &table).map_err(|e| io_err(&table_path, e))?;
    print!("{table}");
    println!(
        "accuracy {:.2}%, precision {}, recall {} on {} test images ({} skipped)",
        report.accuracy * 100.0,
        format_metric(report.precision),
        format_metric(report.recall),
        report.n_test,
        report.skipped
    );

    let mut outputs = vec![report_path, table_path];
    let k = cfg.grid_k.min(test.len());
    if k < cfg.grid_k {
        log::warn!("only {} test images; grid shows {k}", test.len());
    }
    if k > 0 {
        let grid = render_grid(&handle, &test, k, cfg.data_seed, &cache, &meta.policy)?;
        let png = cfg.out_dir.join("grid.png");
        let manifest = grid.write(&png)?;
        println!("grid: {} ({} x {})", png.display(), grid.rows, grid.cols);
        outputs.extend([png, manifest]);
    }
    Ok(outputs)
}

fn cmd_audit(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    if !(0.0..=1.0).contains(&cfg.tau) {
        return Err(CliError::usage(format!("--tau must lie in [0, 1], got {}", cfg.tau)));
    }
    let weights = cfg.checkpoint_path();
    let (handle, meta) = load_checkpoint(&weights)?;
    let index_path = cfg
        .index
        .clone()
        .or_else(|| meta.data.as_ref().map(|d| PathBuf::from(&d.index)))
        .unwrap_or_else(|| cfg.index_path());
    let index = read_index(&index_path)?;
    let cache = cache_for(cfg);
    let report = audit(&handle, &index, cfg.tau, &cache, &meta.policy, cfg.parallelism)?;
    let out = cfg.out_dir.join("audit.csv");
    report.write_csv(&out)?;
    println!("{}", report.summary());
    println!("audit: {}", out.display());
    Ok(vec![out])
}
