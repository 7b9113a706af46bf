//! Command-line surface: dataset generation, training runs, false-negative
//! counting, retrieval evaluation, label-shape analysis, and sweeps.
//!
//! Configuration layers, lowest precedence first: built-in defaults, the
//! `COSMO_LAB_SEED` environment variable (seed only), the TOML config file
//! (`[gen]` and `[train]` tables), `--set key=value` overrides (unprefixed
//! keys address the train table), and dedicated flags like `--seed`.
//! Unknown keys are rejected, never ignored.
//!
//! Every training run writes into a directory named by a hash of its
//! resolved configuration and ends with an atomically written manifest
//! sufficient to reproduce the run bit for bit on the same build.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ecm::ConDRecipe;
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::harness::{
    count_false_negatives, retrieval_eval, sweep, train_collecting_shapes, train_with,
    EpochMetrics, FnJudge, ItcMode, RelevanceMode, SweepAxis, TrainConfig,
};
use crate::labelkit::{onehot, shape_report, smooth};
use crate::synthdata::{generate, GenConfig, SyntheticDataset};

pub const SEED_ENV_VAR: &str = "COSMO_LAB_SEED";

#[derive(Parser)]
#[command(
    name = "cosmo-lab",
    version,
    about = "Desk-scale laboratory for false-negative handling in contrastive image-text training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Strict,
    Concept,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum JudgeArg {
    /// Planted ground truth.
    Truth,
    /// A freshly trained toy scorer thresholded on its matched probability.
    Trained,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Onehot,
    Sitc,
    Md,
    Cs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    M,
    Alpha,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted synthetic dataset and write it as JSONL.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Generation seed (overrides config and environment).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. --set gen.n_concepts=32.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a model and write metrics, stats, and checkpoints to a run
    /// directory named by the config hash.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset JSONL; generated from the [gen] config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override a config key, e.g. --set itc_mode=SITC --set alpha=0.5.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Also dump the next-epoch grouped schedule as JSONL.
        #[arg(long)]
        dump_schedule: bool,
    },
    /// Replay hard-negative selections under a trained checkpoint and
    /// count false negatives.
    CountFn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, value_enum, default_value_t = JudgeArg::Truth)]
        judge: JudgeArg,
        /// Matched-probability threshold for the trained judge.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Write the report JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump the replayed schedule as JSONL.
        #[arg(long)]
        dump_schedule: Option<PathBuf>,
    },
    /// Retrieval evaluation of a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, value_enum, default_value_t = ModeArg::Concept)]
        mode: ModeArg,
        #[arg(long)]
        k_rerank: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Soft-label shape analysis: bucket sums of the sorted target mass.
    LabelShape {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 96)]
        batch: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset for the trained methods (md/cs); generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One full train+eval run per value and seed along one axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values, e.g. 96,960,4800 or 0.1,0.5.
        #[arg(long)]
        values: String,
        /// Comma-separated seeds, e.g. 0,1,2,3,4.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
}

/// Entry point used by the binary: returns the process exit code.
/// 0 success, 1 runtime failure, 2 configuration error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::InvalidConfig(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, seed, out, set } => cmd_gen(config, seed, out, set),
        Command::Train { config, data, out_dir, seed, set, dump_schedule } => {
            cmd_train(config, data, out_dir, seed, set, dump_schedule)
        }
        Command::CountFn {
            data,
            checkpoint,
            config,
            seed,
            set,
            judge,
            threshold,
            out,
            dump_schedule,
        } => cmd_count_fn(data, checkpoint, config, seed, set, judge, threshold, out, dump_schedule),
        Command::Eval { data, checkpoint, config, set, mode, k_rerank, out } => {
            cmd_eval(data, checkpoint, config, set, mode, k_rerank, out)
        }
        Command::LabelShape { method, alpha, batch, config, data, seed, set, out } => {
            cmd_label_shape(method, alpha, batch, config, data, seed, set, out)
        }
        Command::Sweep { axis, values, seeds, config, set, out_dir } => {
            cmd_sweep(axis, values, seeds, config, set, out_dir)
        }
    }
}

/// The two config tables a TOML file may carry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    gen: GenConfig,
    train: TrainConfig,
}

/// Load, override, and resolve the configuration.
/// Precedence: defaults < COSMO_LAB_SEED < TOML < --set < --seed.
fn resolve_config(
    config_path: Option<&Path>,
    sets: &[String],
    seed_flag: Option<u64>,
) -> Result<FileConfig> {
    let mut table = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };

    // Environment seed, lowest-precedence source.
    if let Ok(env_seed) = std::env::var(SEED_ENV_VAR) {
        let value: i64 = env_seed.parse().map_err(|_| {
            Error::InvalidConfig(format!("{SEED_ENV_VAR}={env_seed} is not an integer"))
        })?;
        for section in ["gen", "train"] {
            let entry = table
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let toml::Value::Table(t) = entry {
                t.entry("seed").or_insert(toml::Value::Integer(value));
            }
        }
    }

    for raw in sets {
        apply_set(&mut table, raw)?;
    }
    if let Some(seed) = seed_flag {
        for section in ["gen", "train"] {
            set_path(
                &mut table,
                &[section, "seed"],
                toml::Value::Integer(seed as i64),
            )?;
        }
    }

    deserialize_table(table)
}

/// `--set key=value`. Unprefixed keys address the train table; `gen.` and
/// `train.` prefixes are explicit; deeper paths use dots.
fn apply_set(table: &mut toml::Table, raw: &str) -> Result<()> {
    let (key, value) = raw.split_once('=').ok_or_else(|| {
        Error::InvalidConfig(format!("--set needs KEY=VALUE, got '{raw}'"))
    })?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::InvalidConfig(format!("--set has an empty key: '{raw}'")));
    }
    let mut path: Vec<&str> = key.split('.').collect();
    if path[0] != "gen" && path[0] != "train" {
        path.insert(0, "train");
    }
    // Seed is a whole-run notion: an unprefixed seed override reaches both
    // the generator and the trainer.
    if path == ["train", "seed"] && !raw.trim_start().starts_with("train.") {
        set_path(table, &["gen", "seed"], parse_toml_value(value))?;
    }
    set_path(table, &path, parse_toml_value(value))
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    if raw == "true" || raw == "false" {
        return toml::Value::Boolean(raw == "true");
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) -> Result<()> {
    let mut current = table;
    for part in &path[..path.len() - 1] {
        let entry = current
            .entry(*part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = match entry {
            toml::Value::Table(t) => t,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "config key '{part}' is a {} and cannot hold nested keys",
                    other.type_str()
                )))
            }
        };
    }
    current.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

/// Deserialize through a JSON value so integer literals coerce into float
/// fields (`--set alpha=1`) while unknown keys are still rejected.
fn deserialize_table(table: toml::Table) -> Result<FileConfig> {
    let json = toml_to_json(toml::Value::Table(table));
    serde_json::from_value(json).map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn toml_to_json(value: toml::Value) -> serde_json::Value {
    match value {
        toml::Value::String(s) => serde_json::Value::String(s),
        toml::Value::Integer(i) => serde_json::Value::from(i),
        toml::Value::Float(f) => {
            serde_json::Number::from_f64(f).map_or(serde_json::Value::Null, serde_json::Value::Number)
        }
        toml::Value::Boolean(b) => serde_json::Value::Bool(b),
        toml::Value::Datetime(d) => serde_json::Value::String(d.to_string()),
        toml::Value::Array(items) => {
            serde_json::Value::Array(items.into_iter().map(toml_to_json).collect())
        }
        toml::Value::Table(table) => serde_json::Value::Object(
            table
                .into_iter()
                .map(|(k, v)| (k, toml_to_json(v)))
                .collect(),
        ),
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn config_hash(config: &FileConfig, data_source: &str) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config)?);
    hasher.update(data_source.as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::new();
    for byte in digest.iter().take(6) {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    version: String,
    seed: u64,
    started_at: u64,
    finished_at: u64,
    config: TrainConfig,
    gen: GenConfig,
    data_path: Option<String>,
    outputs: Vec<String>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_dataset(
    data: Option<&Path>,
    gen: &GenConfig,
) -> Result<(SyntheticDataset, Option<String>)> {
    match data {
        Some(path) => Ok((
            SyntheticDataset::load(path)?,
            Some(path.display().to_string()),
        )),
        None => Ok((generate(gen)?, None)),
    }
}

fn cmd_gen(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
    set: Vec<String>,
) -> Result<()> {
    let resolved = resolve_config(config.as_deref(), &set, seed)?;
    let dataset = generate(&resolved.gen)?;
    dataset.save(&out)?;
    println!(
        "wrote {} examples ({} concepts) to {}",
        dataset.len(),
        dataset.config().n_concepts,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out_dir: PathBuf,
    seed: Option<u64>,
    set: Vec<String>,
    dump_schedule: bool,
) -> Result<()> {
    let resolved = resolve_config(config.as_deref(), &set, seed)?;
    resolved.train.validate()?;
    let (dataset, data_path) = load_dataset(data.as_deref(), &resolved.gen)?;

    let run_dir = out_dir.join(format!(
        "run-{}",
        config_hash(&resolved, data_path.as_deref().unwrap_or("generated"))?
    ));
    std::fs::create_dir_all(&run_dir)?;
    let started_at = now_unix();

    let mut last_good: Option<ModelParams> = None;
    let result = train_with(&dataset, &resolved.train, |_, params| {
        last_good = Some(params.clone());
    });
    let run = match result {
        Ok(run) => run,
        Err(err) => {
            if let Some(params) = last_good {
                let path = run_dir.join("last_good.ckpt");
                params.save(&path)?;
                eprintln!(
                    "training aborted; last good parameters at {}",
                    path.display()
                );
            }
            return Err(err);
        }
    };

    let mut outputs = Vec::new();
    let mut metrics_csv = String::from(EpochMetrics::csv_header());
    metrics_csv.push('\n');
    for row in &run.metrics {
        metrics_csv.push_str(&row.csv_row());
        metrics_csv.push('\n');
    }
    std::fs::write(run_dir.join("metrics.csv"), metrics_csv)?;
    outputs.push("metrics.csv".into());

    let mut stats_csv = String::from("epoch,probes,conversions,neutrals,resamples\n");
    for (i, s) in run.ecm_stats.iter().enumerate() {
        stats_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            i + 1,
            s.probes,
            s.conversions,
            s.neutrals,
            s.resamples
        ));
    }
    std::fs::write(run_dir.join("ecm_stats.csv"), stats_csv)?;
    outputs.push("ecm_stats.csv".into());

    run.params.save(run_dir.join("params.ckpt"))?;
    outputs.push("params.ckpt".into());

    if dump_schedule {
        std::fs::write(run_dir.join("schedule.jsonl"), run.next_schedule.to_jsonl())?;
        outputs.push("schedule.jsonl".into());
    }

    // Final reports: replayed false negatives plus both retrieval modes.
    let (fn_report, _) = count_false_negatives(
        &dataset,
        &run.next_schedule,
        &run.params,
        &FnJudge::GroundTruth,
    )?;
    std::fs::write(
        run_dir.join("fn_report.json"),
        serde_json::to_vec_pretty(&fn_report)?,
    )?;
    outputs.push("fn_report.json".into());

    if run.eval_indices.len() >= 10 {
        let k = resolved.train.eval.k_rerank.min(run.eval_indices.len());
        let strict = retrieval_eval(
            &run.params,
            &dataset,
            &run.eval_indices,
            RelevanceMode::Strict,
            k,
        )?;
        let concept = retrieval_eval(
            &run.params,
            &dataset,
            &run.eval_indices,
            RelevanceMode::ConceptLevel,
            k,
        )?;
        let reports = serde_json::json!({ "strict": strict, "concept": concept });
        std::fs::write(
            run_dir.join("retrieval.json"),
            serde_json::to_vec_pretty(&reports)?,
        )?;
        outputs.push("retrieval.json".into());
    }

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: resolved.train.seed,
        started_at,
        finished_at: now_unix(),
        config: resolved.train.clone(),
        gen: resolved.gen.clone(),
        data_path,
        outputs,
    };
    write_atomic(
        &run_dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    println!("{}", run_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_count_fn(
    data: PathBuf,
    checkpoint: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    set: Vec<String>,
    judge: JudgeArg,
    threshold: f64,
    out: Option<PathBuf>,
    dump_schedule: Option<PathBuf>,
) -> Result<()> {
    let resolved = resolve_config(config.as_deref(), &set, seed)?;
    resolved.train.validate()?;
    let dataset = SyntheticDataset::load(&data)?;
    let params = ModelParams::load(&checkpoint)?;

    let schedule = build_grouped_schedule(&dataset, &params, &resolved.train)?;
    if let Some(path) = &dump_schedule {
        std::fs::write(path, schedule.to_jsonl())?;
    }

    let trained;
    let judge = match judge {
        JudgeArg::Truth => FnJudge::GroundTruth,
        JudgeArg::Trained => {
            trained = crate::ecm::train_con_d(
                &dataset,
                &ConDRecipe {
                    sampler: resolved.train.sampler,
                    model: resolved.train.model,
                    seed: resolved.train.seed ^ 0xC0D,
                    ..Default::default()
                },
            )?;
            FnJudge::Probe { probe: &trained, threshold }
        }
    };
    let (report, _) = count_false_negatives(&dataset, &schedule, &params, &judge)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

/// Collect embeddings for the train split in a seeded random order and
/// let the grouped sampler chain them into a replayable schedule.
fn build_grouped_schedule(
    dataset: &SyntheticDataset,
    params: &ModelParams,
    config: &TrainConfig,
) -> Result<crate::gritsampler::BatchSchedule> {
    use crate::gritsampler::{next_epoch_schedule, BatchSchedule, CollectQueue};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let (train_indices, _) = dataset.holdout_split(config.eval.holdout_frac);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = train_indices;
    order.shuffle(&mut rng);
    let feed = BatchSchedule::from_indices(order, config.sampler.batch_size)?;

    let mut queue = CollectQueue::new(config.sampler.search_space);
    let mut blocks = Vec::new();
    for batch_indices in feed.batches() {
        let mut image_features =
            ndarray::Array2::zeros((batch_indices.len(), dataset.config().d_img));
        let mut token_batch = Vec::with_capacity(batch_indices.len());
        for (row, &idx) in batch_indices.iter().enumerate() {
            image_features
                .row_mut(row)
                .assign(&ndarray::ArrayView1::from(dataset.image_features(idx)?));
            token_batch.push(dataset.text_tokens(idx)?.to_vec());
        }
        let img = crate::encoder::encode_images(params, image_features.view())?;
        let txt = crate::encoder::encode_texts(params, &token_batch)?;
        let batch = crate::encoder::EmbeddingBatch::new(img, txt, batch_indices.to_vec())?;
        blocks.extend(queue.feed(&batch));
    }
    if let Some(tail) = queue.flush() {
        blocks.push(tail);
    }
    next_epoch_schedule(&blocks, config.sampler.batch_size)
}

fn cmd_eval(
    data: PathBuf,
    checkpoint: PathBuf,
    config: Option<PathBuf>,
    set: Vec<String>,
    mode: ModeArg,
    k_rerank: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let resolved = resolve_config(config.as_deref(), &set, None)?;
    let dataset = SyntheticDataset::load(&data)?;
    let params = ModelParams::load(&checkpoint)?;
    let (_, eval_indices) = dataset.holdout_split(resolved.train.eval.holdout_frac);
    let mode = match mode {
        ModeArg::Strict => RelevanceMode::Strict,
        ModeArg::Concept => RelevanceMode::ConceptLevel,
    };
    let report = retrieval_eval(
        &params,
        &dataset,
        &eval_indices,
        mode,
        k_rerank.unwrap_or(resolved.train.eval.k_rerank),
    )?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_label_shape(
    method: MethodArg,
    alpha: f64,
    batch: usize,
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    seed: Option<u64>,
    set: Vec<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let resolved = resolve_config(config.as_deref(), &set, seed)?;
    let (name, report, queue) = match method {
        MethodArg::Onehot | MethodArg::Sitc => {
            let positions: Vec<usize> = (0..batch).collect();
            let labels = onehot(batch, batch, &positions)?;
            let labels = match method {
                MethodArg::Sitc => smooth(&labels, alpha, batch)?,
                _ => labels,
            };
            let name = if method == MethodArg::Sitc { "sitc" } else { "onehot" };
            (name, shape_report(&labels.row_vecs(), batch, 0)?, 0)
        }
        MethodArg::Md | MethodArg::Cs => {
            let mut train_cfg = resolved.train.clone();
            train_cfg.sampler.batch_size = batch;
            if train_cfg.sampler.search_space < batch
                || train_cfg.sampler.search_space % batch != 0
            {
                train_cfg.sampler.search_space = batch * 4;
            }
            train_cfg.alpha = alpha;
            train_cfg.itc_mode = if method == MethodArg::Md { ItcMode::Md } else { ItcMode::Cs };
            train_cfg.validate()?;
            let (dataset, _) = load_dataset(data.as_deref(), &resolved.gen)?;
            let (_, rows) = train_collecting_shapes(&dataset, &train_cfg)?;
            if rows.is_empty() {
                return Err(Error::InvalidInput(
                    "no label rows collected; train longer so the queue fills and \
                     the final epoch has full batches"
                        .into(),
                ));
            }
            let queue = match method {
                MethodArg::Md => train_cfg.model.queue_batches * batch,
                _ => 0,
            };
            let name = if method == MethodArg::Md { "md" } else { "cs" };
            (name, shape_report(&rows, batch, queue)?, queue)
        }
    };

    let mut csv = String::from("method,alpha,B,Q,bucket1,bucket2,bucket3\n");
    csv.push_str(&report.csv_row(name, alpha, batch, queue));
    csv.push('\n');
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidConfig(format!("bad {what} entry '{s}'")))
        })
        .collect()
}

fn cmd_sweep(
    axis: AxisArg,
    values: String,
    seeds: String,
    config: Option<PathBuf>,
    set: Vec<String>,
    out_dir: PathBuf,
) -> Result<()> {
    let resolved = resolve_config(config.as_deref(), &set, None)?;
    resolved.train.validate()?;
    let values: Vec<f64> = parse_list(&values, "value")?;
    let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
    let axis = match axis {
        AxisArg::M => SweepAxis::SearchSpace,
        AxisArg::Alpha => SweepAxis::Alpha,
    };

    std::fs::create_dir_all(&out_dir)?;
    let csv_path = out_dir.join("sweep.csv");
    let mut csv = std::fs::File::create(&csv_path)?;
    writeln!(csv, "{}", crate::harness::SweepRow::csv_header())?;

    let rows = sweep(
        &resolved.gen,
        &resolved.train,
        axis,
        &values,
        &seeds,
        &mut |row| {
            // Partial results land on disk as each run finishes.
            writeln!(csv, "{}", row.csv_row())?;
            csv.flush()?;
            Ok(())
        },
    )?;
    std::fs::write(out_dir.join("sweep.json"), serde_json::to_vec_pretty(&rows)?)?;
    println!("{}", csv_path.display());
    Ok(())
}
