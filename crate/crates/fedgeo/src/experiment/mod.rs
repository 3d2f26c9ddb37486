//! Experiment runner behind the CLI: dataset preparation, federated runs
//! across seed lists, the eight-variant mechanism grid, hyperparameter
//! sweeps, and report rendering.
//!
//! Every command is deterministic given (config, seeds): rerunning produces
//! byte-identical artifacts except for the wall-clock `seconds` column of the
//! round logs. Result files are written atomically, and no command touches an
//! existing output root unless `--force` is passed (`report` only rewrites
//! the derived summary tables it owns).
//!
//! Output layout under `[output].dir`:
//!
//! ```text
//! dataset/                      grid.toml, samples.csv, counts.csv   (synth/ingest)
//! audit/                        entropy.csv, location_frequency.csv,
//!                               heterogeneity.txt                    (synth/ingest)
//! run/config.toml               resolved config snapshot
//! run/seed_<s>/rounds.csv       one row per round
//! run/seed_<s>/model.ckpt       final global weights
//! run/seed_<s>/centralized.csv  per-epoch pooled baseline (optional)
//! run/summary.csv|.txt          per-seed bests + mean/std rows
//! run/centralized_summary.csv   pooled baseline bests (optional)
//! ablation/<V>/seed_<s>/...     V in A..H; ablation.csv|.txt on top
//! sweep/cell_<i>/cell.toml      swept values of that cell
//! sweep/cell_<i>/seed_<s>/...   round logs; sweep.csv|.txt on top
//! ```

mod config;

pub use config::{
    load_config, DatasetSection, ExperimentConfig, FederationSection, OutputSection, PltSource,
    SweepCell, SweepSection, SyntheticSource,
};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::federation::{
    self, Aggregator, FederationConfig, FederationError, RoundRecord, Sampler,
};
use crate::geogrid::{self, GridError, GridSpec, SpatialWeightMatrix};
use crate::metrics::{self, MetricsError, RunSummary};
use crate::mobility::{self, FederatedDataset, MobilityError};
use crate::model::{self, HyperParams, ModelError};

/// Errors split by exit code: config problems exit 1, runtime failures 2.
#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

impl From<MobilityError> for ExperimentError {
    fn from(e: MobilityError) -> Self {
        match e {
            MobilityError::Config(_) => ExperimentError::Config(e.to_string()),
            other => ExperimentError::Runtime(other.to_string()),
        }
    }
}

impl From<FederationError> for ExperimentError {
    fn from(e: FederationError) -> Self {
        match e {
            FederationError::InvalidConfig(_) => ExperimentError::Config(e.to_string()),
            other => ExperimentError::Runtime(other.to_string()),
        }
    }
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        ExperimentError::Runtime(e.to_string())
    }
}

impl From<GridError> for ExperimentError {
    fn from(e: GridError) -> Self {
        ExperimentError::Runtime(e.to_string())
    }
}

impl From<MetricsError> for ExperimentError {
    fn from(e: MetricsError) -> Self {
        ExperimentError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Runtime(e.to_string())
    }
}

/// One row of the mechanism grid: which of the three mechanisms sit on top
/// of the plain baseline.
#[derive(Debug, Clone, Copy)]
pub struct Variant {
    pub label: &'static str,
    pub sampler: Sampler,
    pub aggregator: Aggregator,
    pub gaa: bool,
}

/// The eight-variant grid: A is the plain baseline, B/C/D switch on exactly
/// one mechanism (alignment, layer-wise aggregation, entropy sampling),
/// E/F/G each pair, H all three.
pub const VARIANTS: [Variant; 8] = [
    Variant { label: "A", sampler: Sampler::Uniform, aggregator: Aggregator::FedAvg, gaa: false },
    Variant { label: "B", sampler: Sampler::Uniform, aggregator: Aggregator::FedAvg, gaa: true },
    Variant { label: "C", sampler: Sampler::Uniform, aggregator: Aggregator::Lwa, gaa: false },
    Variant { label: "D", sampler: Sampler::Ebs, aggregator: Aggregator::FedAvg, gaa: false },
    Variant { label: "E", sampler: Sampler::Uniform, aggregator: Aggregator::Lwa, gaa: true },
    Variant { label: "F", sampler: Sampler::Ebs, aggregator: Aggregator::FedAvg, gaa: true },
    Variant { label: "G", sampler: Sampler::Ebs, aggregator: Aggregator::Lwa, gaa: false },
    Variant { label: "H", sampler: Sampler::Ebs, aggregator: Aggregator::Lwa, gaa: true },
];

const ROUNDS_HEADER: &str = "round,sampler,aggregator,gaa,acc1,acc5,drift,seconds";

// ---------------------------------------------------------------------------
// Small IO helpers
// ---------------------------------------------------------------------------

fn write_atomic(path: &Path, text: &str) -> Result<(), ExperimentError> {
    crate::fsio::write_atomic(path, text)
        .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", path.display())))
}

fn read_to_string(path: &Path) -> Result<String, ExperimentError> {
    fs::read_to_string(path)
        .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", path.display())))
}

/// Refuses to touch existing output roots unless `--force`, in which case
/// they are removed for a clean slate.
fn guard_outputs(paths: &[PathBuf], force: bool) -> Result<(), ExperimentError> {
    for p in paths {
        if p.symlink_metadata().is_ok() {
            if !force {
                return Err(ExperimentError::Config(format!(
                    "{} already exists; pass --force to replace it",
                    p.display()
                )));
            }
            if p.is_dir() {
                fs::remove_dir_all(p)
                    .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", p.display())))?;
            } else {
                fs::remove_file(p)
                    .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", p.display())))?;
            }
        }
    }
    Ok(())
}

fn toml_string<T: serde::Serialize>(value: &T) -> Result<String, ExperimentError> {
    toml::to_string_pretty(value).map_err(|e| ExperimentError::Runtime(e.to_string()))
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

/// Builds the raw (unsplit) dataset from the configured source.
fn build_dataset(cfg: &ExperimentConfig) -> Result<FederatedDataset, ExperimentError> {
    match (&cfg.dataset.synthetic, &cfg.dataset.plt) {
        (Some(s), None) => {
            Ok(mobility::synth_generate(&cfg.dataset.grid, s.n_clients, &s.walk, s.seed)?)
        }
        (None, Some(p)) => build_plt_dataset(&cfg.dataset.grid, p),
        _ => Err(ExperimentError::Config(
            "dataset must configure exactly one of [dataset.synthetic] or [dataset.plt]".into(),
        )),
    }
}

fn build_plt_dataset(grid: &GridSpec, src: &PltSource) -> Result<FederatedDataset, ExperimentError> {
    let opts = src.options();
    let mut clients = Vec::with_capacity(src.client_dirs.len());
    for (i, dir) in src.client_dirs.iter().enumerate() {
        let entries = fs::read_dir(dir)
            .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", dir.display())))?;
        let mut files: Vec<PathBuf> = Vec::new();
        for entry in entries {
            let path = entry
                .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", dir.display())))?
                .path();
            let is_plt = path
                .extension()
                .is_some_and(|x| x.eq_ignore_ascii_case("plt"));
            if path.is_file() && is_plt {
                files.push(path);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(ExperimentError::Runtime(format!(
                "{}: no .plt files found",
                dir.display()
            )));
        }
        let client = mobility::build_client_from_plt(i as u32, &files, grid, &opts)?;
        if client.samples.is_empty() {
            return Err(ExperimentError::Runtime(format!(
                "client {i} ({}) produced no samples; trajectories may be shorter than \
                 min_records or window_len",
                dir.display()
            )));
        }
        clients.push(client);
    }
    Ok(FederatedDataset::new(grid.clone(), clients)?)
}

/// The window length the configured source produces.
fn configured_window_len(cfg: &ExperimentConfig) -> usize {
    match (&cfg.dataset.synthetic, &cfg.dataset.plt) {
        (Some(s), None) => s.walk.window_len,
        (None, Some(p)) => p.window_len,
        _ => 0,
    }
}

/// Loads the cache under `[output].dir/dataset` when present (verifying it
/// matches the configured grid and window length), otherwise builds the
/// dataset from its source; either way the chronological split is applied.
fn prepared_dataset(cfg: &ExperimentConfig) -> Result<FederatedDataset, ExperimentError> {
    let cache_dir = cfg.output.dir.join("dataset");
    let raw = if mobility::cache_exists(&cache_dir) {
        let ds = mobility::load_dataset(&cache_dir)?;
        if ds.grid != cfg.dataset.grid {
            return Err(ExperimentError::Runtime(format!(
                "dataset cache at {} was built for a different grid; regenerate it \
                 (synth/ingest --force) or change [output].dir",
                cache_dir.display()
            )));
        }
        let cached_t = ds
            .clients
            .first()
            .and_then(|c| c.samples.first())
            .map(|s| s.window.len());
        if cached_t != Some(configured_window_len(cfg)) {
            return Err(ExperimentError::Runtime(format!(
                "dataset cache at {} uses window length {:?} but the config asks for {}; \
                 regenerate it (synth/ingest --force)",
                cache_dir.display(),
                cached_t,
                configured_window_len(cfg)
            )));
        }
        ds
    } else {
        build_dataset(cfg)?
    };
    Ok(mobility::split_train_test(raw, cfg.dataset.test_frac)?)
}

fn spatial_matrix(
    grid: &GridSpec,
    threshold_m: f64,
    q: f64,
) -> Result<SpatialWeightMatrix, ExperimentError> {
    Ok(geogrid::row_normalize(&geogrid::build_spatial_weights(
        grid,
        threshold_m,
        q,
    ))?)
}

// ---------------------------------------------------------------------------
// Round-log CSV
// ---------------------------------------------------------------------------

fn rounds_csv(records: &[RoundRecord], cfg: &FederationConfig) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(ROUNDS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3}\n",
            r.round, cfg.sampler, cfg.aggregator, cfg.gaa_enabled, r.acc1, r.acc5, r.drift,
            r.seconds
        ));
    }
    out
}

/// Parses a round log back into records (participants and per-layer weights
/// are not stored in the CSV and come back empty).
fn parse_rounds_csv(text: &str, path: &Path) -> Result<Vec<RoundRecord>, ExperimentError> {
    let bad = |line: usize, msg: String| {
        ExperimentError::Runtime(format!("{}:{line}: {msg}", path.display()))
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == ROUNDS_HEADER => {}
        other => {
            return Err(bad(
                1,
                format!(
                    "expected round-log header {ROUNDS_HEADER:?}, found {:?}",
                    other.map(|(_, h)| h).unwrap_or("")
                ),
            ));
        }
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(bad(idx + 1, format!("expected 8 fields, found {}", fields.len())));
        }
        let round: usize = fields[0]
            .parse()
            .map_err(|e| bad(idx + 1, format!("round: {e}")))?;
        let parse_f = |pos: usize, name: &str| -> Result<f64, ExperimentError> {
            fields[pos]
                .parse::<f64>()
                .map_err(|e| bad(idx + 1, format!("{name}: {e}")))
        };
        records.push(RoundRecord {
            round,
            participants: Vec::new(),
            layer_alphas: Vec::new(),
            acc1: parse_f(4, "acc1")?,
            acc5: parse_f(5, "acc5")?,
            drift: parse_f(6, "drift")?,
            seconds: parse_f(7, "seconds")?,
        });
    }
    if records.is_empty() {
        return Err(bad(1, "round log has no data rows".into()));
    }
    Ok(records)
}

/// Runs one (config, seed) cell: full federation, round log, optional final
/// checkpoint; returns the per-run summary.
fn execute_seed_run(
    ds: &FederatedDataset,
    s: &SpatialWeightMatrix,
    fcfg: &FederationConfig,
    dir: &Path,
    write_checkpoint: bool,
) -> Result<RunSummary, ExperimentError> {
    let (records, weights) = federation::run_federation(ds, fcfg, s)?;
    write_atomic(&dir.join("rounds.csv"), &rounds_csv(&records, fcfg))?;
    if write_checkpoint {
        model::save_checkpoint(&weights, &dir.join("model.ckpt"))?;
    }
    Ok(metrics::summarize(&records))
}

// ---------------------------------------------------------------------------
// Aggregate tables
// ---------------------------------------------------------------------------

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

/// Per-seed summary rows plus mean/std aggregate rows over every numeric
/// column, as (csv, aligned text).
fn run_summary_tables(seeds: &[u64], summaries: &[RunSummary]) -> (String, String) {
    let headers = ["seed", "rounds", "best_acc1", "best_acc5", "tail_std_acc1", "tail_std_acc5"];
    let mut rows: Vec<Vec<String>> = Vec::with_capacity(summaries.len() + 2);
    let columns: Vec<Vec<f64>> = (0..5)
        .map(|c| {
            summaries
                .iter()
                .map(|s| match c {
                    0 => s.rounds as f64,
                    1 => s.best_acc1,
                    2 => s.best_acc5,
                    3 => s.tail_std_acc1,
                    _ => s.tail_std_acc5,
                })
                .collect()
        })
        .collect();
    for (seed, s) in seeds.iter().zip(summaries) {
        rows.push(vec![
            seed.to_string(),
            s.rounds.to_string(),
            fmt(s.best_acc1),
            fmt(s.best_acc5),
            fmt(s.tail_std_acc1),
            fmt(s.tail_std_acc5),
        ]);
    }
    for (label, agg) in [("mean", mean as fn(&[f64]) -> f64), ("std", metrics::sample_std)] {
        let mut row = vec![label.to_string()];
        row.extend(columns.iter().map(|col| fmt(agg(col))));
        rows.push(row);
    }
    let csv = to_csv(&headers, &rows);
    let txt = metrics::aligned_table(&headers, &rows);
    (csv, txt)
}

fn to_csv(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = headers.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Mean/std of best accuracies across seeds for one grid row.
fn best_acc_stats(summaries: &[RunSummary]) -> (f64, f64, f64, f64) {
    let b1: Vec<f64> = summaries.iter().map(|s| s.best_acc1).collect();
    let b5: Vec<f64> = summaries.iter().map(|s| s.best_acc5).collect();
    (mean(&b1), metrics::sample_std(&b1), mean(&b5), metrics::sample_std(&b5))
}

fn ablation_tables(rows: &[(&Variant, Vec<RunSummary>)]) -> (String, String) {
    let headers = [
        "variant", "sampler", "aggregator", "gaa", "mean_best_acc1", "std_best_acc1",
        "mean_best_acc5", "std_best_acc5",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(v, summaries)| {
            let (m1, s1, m5, s5) = best_acc_stats(summaries);
            vec![
                v.label.to_string(),
                v.sampler.to_string(),
                v.aggregator.to_string(),
                v.gaa.to_string(),
                fmt(m1),
                fmt(s1),
                fmt(m5),
                fmt(s5),
            ]
        })
        .collect();
    (to_csv(&headers, &body), metrics::aligned_table(&headers, &body))
}

fn sweep_tables(rows: &[(SweepCell, Vec<RunSummary>)]) -> (String, String) {
    let headers = [
        "fraction", "local_epochs", "q", "mean_best_acc1", "std_best_acc1", "mean_best_acc5",
        "std_best_acc5",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(cell, summaries)| {
            let (m1, s1, m5, s5) = best_acc_stats(summaries);
            vec![
                fmt(cell.fraction),
                cell.local_epochs.to_string(),
                fmt(cell.q),
                fmt(m1),
                fmt(s1),
                fmt(m5),
                fmt(s5),
            ]
        })
        .collect();
    (to_csv(&headers, &body), metrics::aligned_table(&headers, &body))
}

/// (seed, epochs, best_acc1, best_acc5) rows for the pooled baseline.
fn centralized_summary_csv(rows: &[(u64, usize, f64, f64)]) -> String {
    let headers = ["seed", "epochs", "best_acc1", "best_acc5"];
    let mut body: Vec<Vec<String>> = rows
        .iter()
        .map(|(seed, epochs, b1, b5)| {
            vec![seed.to_string(), epochs.to_string(), fmt(*b1), fmt(*b5)]
        })
        .collect();
    let b1: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let b5: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let epochs: Vec<f64> = rows.iter().map(|r| r.1 as f64).collect();
    for (label, agg) in [("mean", mean as fn(&[f64]) -> f64), ("std", metrics::sample_std)] {
        body.push(vec![
            label.to_string(),
            fmt(agg(&epochs)),
            fmt(agg(&b1)),
            fmt(agg(&b5)),
        ]);
    }
    to_csv(&headers, &body)
}

// ---------------------------------------------------------------------------
// Plan printing (--dry-run)
// ---------------------------------------------------------------------------

fn describe_dataset(cfg: &ExperimentConfig) -> String {
    let g = &cfg.dataset.grid;
    let geometry = format!(
        "{} x {} grid of {} m cells ({} locations)",
        g.n_rows,
        g.n_cols,
        g.cell_size_m,
        g.n_locations()
    );
    match (&cfg.dataset.synthetic, &cfg.dataset.plt) {
        (Some(s), None) => format!(
            "synthetic: {} clients on a {geometry}, walk seed {}, test fraction {}",
            s.n_clients, s.seed, cfg.dataset.test_frac
        ),
        (None, Some(p)) => format!(
            "plt: {} client directories on a {geometry}, test fraction {}",
            p.client_dirs.len(),
            cfg.dataset.test_frac
        ),
        _ => format!("invalid source on a {geometry}"),
    }
}

fn describe_federation(f: &FederationSection) -> String {
    format!(
        "rounds={} fraction={} sampler={} aggregator={} gaa={} lwa_layers={:?} q={} \
         neighbor_threshold_m={} prox_mu={} centralized_epochs={}",
        f.rounds,
        f.fraction,
        f.sampler,
        f.aggregator,
        f.gaa_enabled,
        f.lwa_layers,
        f.q,
        f.neighbor_threshold_m,
        f.prox_mu.map_or("none".to_string(), |m| m.to_string()),
        f.centralized_epochs
    )
}

fn describe_hp(hp: &HyperParams) -> String {
    format!(
        "embed_dim={} hidden_dim={} learning_rate={} momentum={} weight_decay={} batch_size={} \
         local_epochs={}",
        hp.embed_dim, hp.hidden_dim, hp.learning_rate, hp.momentum, hp.weight_decay,
        hp.batch_size, hp.local_epochs
    )
}

fn print_plan(command: &str, cfg: &ExperimentConfig, extra: &[String]) {
    let seeds: Vec<String> = cfg.output.seeds.iter().map(|s| s.to_string()).collect();
    println!("plan: {command}");
    println!("  dataset: {}", describe_dataset(cfg));
    println!("  hyperparams: {}", describe_hp(&cfg.hyperparams));
    println!("  federation: {}", describe_federation(&cfg.federation));
    println!("  seeds: {}", seeds.join(","));
    for line in extra {
        println!("  {line}");
    }
    println!("dry run: config valid; no files written");
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Audit tables: per-client entropy, per-client location frequencies, and
/// the dataset-level heterogeneity index.
fn write_audit(ds: &FederatedDataset, audit_dir: &Path) -> Result<f64, ExperimentError> {
    let mut entropy = String::from("client_id,n_samples,n_visits,n_distinct_locations,entropy\n");
    let mut freq = String::from("client_id,location,count\n");
    for c in &ds.clients {
        entropy.push_str(&format!(
            "{},{},{},{},{}\n",
            c.client_id,
            c.samples.len(),
            c.n_total_visits(),
            c.n_distinct_locations(),
            fmt(mobility::location_entropy(c))
        ));
        for (loc, count) in &c.location_counts {
            freq.push_str(&format!("{},{},{count}\n", c.client_id, loc.index()));
        }
    }
    let hi = mobility::heterogeneity_index(ds)?;
    let union: BTreeSet<_> = ds
        .clients
        .iter()
        .flat_map(|c| c.location_counts.keys().copied())
        .collect();
    let report = format!(
        "clients {}\nlocations {}\ndistinct_locations_union {}\nheterogeneity_index {}\n",
        ds.n_clients(),
        ds.grid.n_locations(),
        union.len(),
        fmt(hi)
    );
    write_atomic(&audit_dir.join("entropy.csv"), &entropy)?;
    write_atomic(&audit_dir.join("location_frequency.csv"), &freq)?;
    write_atomic(&audit_dir.join("heterogeneity.txt"), &report)?;
    Ok(hi)
}

fn cache_and_audit(
    cfg: &ExperimentConfig,
    ds: &FederatedDataset,
    force: bool,
) -> Result<(), ExperimentError> {
    let dataset_dir = cfg.output.dir.join("dataset");
    let audit_dir = cfg.output.dir.join("audit");
    guard_outputs(&[dataset_dir.clone(), audit_dir.clone()], force)?;
    mobility::save_dataset(ds, &dataset_dir)?;
    let hi = write_audit(ds, &audit_dir)?;
    let n_samples: usize = ds.clients.iter().map(|c| c.samples.len()).sum();
    println!(
        "dataset: {} clients, {} samples, heterogeneity_index {}",
        ds.n_clients(),
        n_samples,
        fmt(hi)
    );
    println!("cache: {}", dataset_dir.display());
    println!("audit: {}", audit_dir.display());
    Ok(())
}

/// Generates the synthetic dataset, caches it, and writes the audit tables.
pub fn cmd_synth(cfg: &ExperimentConfig, dry_run: bool, force: bool) -> Result<(), ExperimentError> {
    cfg.validate()?;
    let src = cfg.dataset.synthetic.as_ref().ok_or_else(|| {
        ExperimentError::Config("synth requires a [dataset.synthetic] section".into())
    })?;
    if dry_run {
        let out = cfg.output.dir.display();
        print_plan("synth", cfg, &[format!("writes: {out}/dataset, {out}/audit")]);
        return Ok(());
    }
    let ds = mobility::synth_generate(&cfg.dataset.grid, src.n_clients, &src.walk, src.seed)?;
    cache_and_audit(cfg, &ds, force)
}

/// Ingests PLT trajectory directories, caches the dataset, and writes the
/// audit tables.
pub fn cmd_ingest(
    cfg: &ExperimentConfig,
    dry_run: bool,
    force: bool,
) -> Result<(), ExperimentError> {
    cfg.validate()?;
    let src = cfg.dataset.plt.as_ref().ok_or_else(|| {
        ExperimentError::Config("ingest requires a [dataset.plt] section".into())
    })?;
    if dry_run {
        let out = cfg.output.dir.display();
        print_plan("ingest", cfg, &[format!("writes: {out}/dataset, {out}/audit")]);
        return Ok(());
    }
    let ds = build_plt_dataset(&cfg.dataset.grid, src)?;
    cache_and_audit(cfg, &ds, force)
}

/// Runs the configured federation once per seed and aggregates a summary;
/// optionally also trains the pooled centralized baseline.
pub fn cmd_run(cfg: &ExperimentConfig, dry_run: bool, force: bool) -> Result<(), ExperimentError> {
    cfg.validate()?;
    let run_dir = cfg.output.dir.join("run");
    if dry_run {
        print_plan(
            "run",
            cfg,
            &[format!(
                "writes: {} ({} seed runs -> rounds.csv + model.ckpt; summary.csv, summary.txt)",
                run_dir.display(),
                cfg.output.seeds.len()
            )],
        );
        return Ok(());
    }
    guard_outputs(&[run_dir.clone()], force)?;
    let ds = prepared_dataset(cfg)?;
    let s = spatial_matrix(&cfg.dataset.grid, cfg.federation.neighbor_threshold_m, cfg.federation.q)?;
    write_atomic(&run_dir.join("config.toml"), &toml_string(cfg)?)?;

    let results: Vec<(RunSummary, Option<(usize, f64, f64)>)> = cfg
        .output
        .seeds
        .par_iter()
        .map(|&seed| {
            let fcfg = cfg.federation_config(seed);
            let dir = run_dir.join(format!("seed_{seed}"));
            let summary = execute_seed_run(&ds, &s, &fcfg, &dir, true)?;
            let central = if cfg.federation.centralized_epochs > 0 {
                let hp = HyperParams {
                    local_epochs: cfg.federation.centralized_epochs,
                    ..cfg.hyperparams.clone()
                };
                let fitted = federation::train_centralized(&ds, &hp, seed)?;
                let mut csv = String::from("epoch,acc1,acc5\n");
                let mut best1 = f64::NEG_INFINITY;
                let mut best5 = f64::NEG_INFINITY;
                for e in &fitted.epoch_acc {
                    csv.push_str(&format!("{},{},{}\n", e.epoch, fmt(e.acc1), fmt(e.acc5)));
                    best1 = best1.max(e.acc1);
                    best5 = best5.max(e.acc5);
                }
                write_atomic(&dir.join("centralized.csv"), &csv)?;
                Some((fitted.epoch_acc.len(), best1, best5))
            } else {
                None
            };
            Ok((summary, central))
        })
        .collect::<Result<_, ExperimentError>>()?;

    let summaries: Vec<RunSummary> = results.iter().map(|(s, _)| s.clone()).collect();
    let (csv, txt) = run_summary_tables(&cfg.output.seeds, &summaries);
    write_atomic(&run_dir.join("summary.csv"), &csv)?;
    write_atomic(&run_dir.join("summary.txt"), &txt)?;
    if cfg.federation.centralized_epochs > 0 {
        let rows: Vec<(u64, usize, f64, f64)> = cfg
            .output
            .seeds
            .iter()
            .zip(&results)
            .map(|(&seed, (_, c))| {
                let (epochs, b1, b5) = c.expect("centralized enabled for every seed");
                (seed, epochs, b1, b5)
            })
            .collect();
        write_atomic(
            &run_dir.join("centralized_summary.csv"),
            &centralized_summary_csv(&rows),
        )?;
    }
    print!("{txt}");
    println!("run: {}", run_dir.display());
    Ok(())
}

/// Runs the eight-variant mechanism grid over the seed list and tabulates
/// mean/std of the best accuracies per variant.
pub fn cmd_ablate(cfg: &ExperimentConfig, dry_run: bool, force: bool) -> Result<(), ExperimentError> {
    cfg.validate()?;
    let dir = cfg.output.dir.join("ablation");
    if dry_run {
        let labels: Vec<&str> = VARIANTS.iter().map(|v| v.label).collect();
        print_plan(
            "ablate",
            cfg,
            &[
                format!(
                    "variants: {} ({} cells x {} seeds)",
                    labels.join(" "),
                    VARIANTS.len(),
                    cfg.output.seeds.len()
                ),
                format!("writes: {}", dir.display()),
            ],
        );
        return Ok(());
    }
    guard_outputs(&[dir.clone()], force)?;
    let ds = prepared_dataset(cfg)?;
    let s = spatial_matrix(&cfg.dataset.grid, cfg.federation.neighbor_threshold_m, cfg.federation.q)?;
    write_atomic(&dir.join("config.toml"), &toml_string(cfg)?)?;

    let jobs: Vec<(usize, u64)> = (0..VARIANTS.len())
        .flat_map(|vi| cfg.output.seeds.iter().map(move |&seed| (vi, seed)))
        .collect();
    let summaries: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(vi, seed)| {
            let v = &VARIANTS[vi];
            let mut fcfg = cfg.federation_config(seed);
            fcfg.sampler = v.sampler;
            fcfg.aggregator = v.aggregator;
            fcfg.gaa_enabled = v.gaa;
            let cell_dir = dir.join(v.label).join(format!("seed_{seed}"));
            execute_seed_run(&ds, &s, &fcfg, &cell_dir, false)
        })
        .collect::<Result<_, ExperimentError>>()?;

    let per_seed = cfg.output.seeds.len();
    let rows: Vec<(&Variant, Vec<RunSummary>)> = VARIANTS
        .iter()
        .enumerate()
        .map(|(vi, v)| (v, summaries[vi * per_seed..(vi + 1) * per_seed].to_vec()))
        .collect();
    let (csv, txt) = ablation_tables(&rows);
    write_atomic(&dir.join("ablation.csv"), &csv)?;
    write_atomic(&dir.join("ablation.txt"), &txt)?;
    print!("{txt}");
    println!("ablation: {}", dir.display());
    Ok(())
}

/// Runs the cartesian sweep over fraction / local_epochs / q.
pub fn cmd_sweep(cfg: &ExperimentConfig, dry_run: bool, force: bool) -> Result<(), ExperimentError> {
    cfg.validate()?;
    if cfg.sweep.is_empty() {
        return Err(ExperimentError::Config(
            "[sweep] must list at least one value on some axis (fraction, local_epochs, q)".into(),
        ));
    }
    let dir = cfg.output.dir.join("sweep");
    let cells = cfg.sweep_cells();
    if dry_run {
        print_plan(
            "sweep",
            cfg,
            &[
                format!(
                    "sweep cells: {} (fraction {:?} x local_epochs {:?} x q {:?})",
                    cells.len(),
                    cfg.sweep.fraction,
                    cfg.sweep.local_epochs,
                    cfg.sweep.q
                ),
                format!("writes: {}", dir.display()),
            ],
        );
        return Ok(());
    }
    guard_outputs(&[dir.clone()], force)?;
    let ds = prepared_dataset(cfg)?;
    write_atomic(&dir.join("config.toml"), &toml_string(cfg)?)?;

    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|ci| cfg.output.seeds.iter().map(move |&seed| (ci, seed)))
        .collect();
    let summaries: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(ci, seed)| {
            let cell = cells[ci];
            let mut fcfg = cfg.federation_config(seed);
            cell.apply(&mut fcfg);
            // q is a sweep axis, so the spatial matrix is cell-specific.
            let s = spatial_matrix(&cfg.dataset.grid, fcfg.neighbor_threshold_m, fcfg.q)?;
            let cell_dir = dir.join(format!("cell_{ci:03}")).join(format!("seed_{seed}"));
            execute_seed_run(&ds, &s, &fcfg, &cell_dir, false)
        })
        .collect::<Result<_, ExperimentError>>()?;
    for (ci, cell) in cells.iter().enumerate() {
        write_atomic(
            &dir.join(format!("cell_{ci:03}")).join("cell.toml"),
            &toml_string(cell)?,
        )?;
    }

    let per_seed = cfg.output.seeds.len();
    let rows: Vec<(SweepCell, Vec<RunSummary>)> = cells
        .iter()
        .enumerate()
        .map(|(ci, &cell)| (cell, summaries[ci * per_seed..(ci + 1) * per_seed].to_vec()))
        .collect();
    let (csv, txt) = sweep_tables(&rows);
    write_atomic(&dir.join("sweep.csv"), &csv)?;
    write_atomic(&dir.join("sweep.txt"), &txt)?;
    print!("{txt}");
    println!("sweep: {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Numerically sorted `seed_<n>` subdirectories.
fn seed_dirs(parent: &Path) -> Result<Vec<(u64, PathBuf)>, ExperimentError> {
    let mut found = Vec::new();
    for entry in
        fs::read_dir(parent).map_err(|e| ExperimentError::Runtime(format!("{}: {e}", parent.display())))?
    {
        let path = entry
            .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", parent.display())))?
            .path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(rest) = name.strip_prefix("seed_") {
            if let Ok(seed) = rest.parse::<u64>() {
                if path.is_dir() {
                    found.push((seed, path));
                }
            }
        }
    }
    found.sort_by_key(|(seed, _)| *seed);
    if found.is_empty() {
        return Err(ExperimentError::Runtime(format!(
            "{}: no seed_<n> run directories found",
            parent.display()
        )));
    }
    Ok(found)
}

/// Re-summarizes every per-seed round log under `parent`.
fn summaries_from_dir(parent: &Path) -> Result<(Vec<u64>, Vec<RunSummary>), ExperimentError> {
    let mut seeds = Vec::new();
    let mut summaries = Vec::new();
    for (seed, dir) in seed_dirs(parent)? {
        let path = dir.join("rounds.csv");
        let records = parse_rounds_csv(&read_to_string(&path)?, &path)?;
        seeds.push(seed);
        summaries.push(metrics::summarize(&records));
    }
    Ok((seeds, summaries))
}

fn parse_centralized_csv(path: &Path) -> Result<(usize, f64, f64), ExperimentError> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("epoch,acc1,acc5") {
        return Err(ExperimentError::Runtime(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    let mut n = 0usize;
    let mut best1 = f64::NEG_INFINITY;
    let mut best5 = f64::NEG_INFINITY;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(ExperimentError::Runtime(format!(
                "{}: expected 3 fields per row",
                path.display()
            )));
        }
        let a1: f64 = fields[1]
            .parse()
            .map_err(|e| ExperimentError::Runtime(format!("{}: acc1: {e}", path.display())))?;
        let a5: f64 = fields[2]
            .parse()
            .map_err(|e| ExperimentError::Runtime(format!("{}: acc5: {e}", path.display())))?;
        best1 = best1.max(a1);
        best5 = best5.max(a5);
        n += 1;
    }
    if n == 0 {
        return Err(ExperimentError::Runtime(format!("{}: no rows", path.display())));
    }
    Ok((n, best1, best5))
}

/// Rebuilds every derived summary table from the round logs already on disk.
/// Raw logs are never modified; only the tables are rewritten.
pub fn cmd_report(cfg: &ExperimentConfig, dry_run: bool) -> Result<(), ExperimentError> {
    let out = &cfg.output.dir;
    if !out.is_dir() {
        return Err(ExperimentError::Config(format!(
            "output directory {} does not exist",
            out.display()
        )));
    }
    let run_dir = out.join("run");
    let ablation_dir = out.join("ablation");
    let sweep_dir = out.join("sweep");
    if dry_run {
        let found: Vec<&str> = [
            (run_dir.is_dir(), "run"),
            (ablation_dir.is_dir(), "ablation"),
            (sweep_dir.is_dir(), "sweep"),
        ]
        .iter()
        .filter_map(|&(ok, name)| ok.then_some(name))
        .collect();
        println!("plan: report");
        println!("  reads: {} (subtrees: {})", out.display(), found.join(", "));
        println!("  rewrites: derived summary tables only");
        println!("dry run: no files written");
        return Ok(());
    }
    let mut rebuilt = Vec::new();

    if run_dir.is_dir() {
        let (seeds, summaries) = summaries_from_dir(&run_dir)?;
        let (csv, txt) = run_summary_tables(&seeds, &summaries);
        write_atomic(&run_dir.join("summary.csv"), &csv)?;
        write_atomic(&run_dir.join("summary.txt"), &txt)?;
        let centralized: Vec<PathBuf> = seed_dirs(&run_dir)?
            .into_iter()
            .map(|(_, d)| d.join("centralized.csv"))
            .collect();
        if centralized.iter().all(|p| p.is_file()) {
            let mut rows = Vec::new();
            for ((seed, _), path) in seed_dirs(&run_dir)?.into_iter().zip(&centralized) {
                let (epochs, b1, b5) = parse_centralized_csv(path)?;
                rows.push((seed, epochs, b1, b5));
            }
            write_atomic(
                &run_dir.join("centralized_summary.csv"),
                &centralized_summary_csv(&rows),
            )?;
        }
        rebuilt.push("run/summary.csv");
    }

    if ablation_dir.is_dir() {
        let mut rows: Vec<(&Variant, Vec<RunSummary>)> = Vec::new();
        for v in &VARIANTS {
            let vdir = ablation_dir.join(v.label);
            if vdir.is_dir() {
                let (_, summaries) = summaries_from_dir(&vdir)?;
                rows.push((v, summaries));
            }
        }
        if rows.is_empty() {
            return Err(ExperimentError::Runtime(format!(
                "{}: no variant directories found",
                ablation_dir.display()
            )));
        }
        let (csv, txt) = ablation_tables(&rows);
        write_atomic(&ablation_dir.join("ablation.csv"), &csv)?;
        write_atomic(&ablation_dir.join("ablation.txt"), &txt)?;
        rebuilt.push("ablation/ablation.csv");
    }

    if sweep_dir.is_dir() {
        let mut cell_dirs: Vec<PathBuf> = fs::read_dir(&sweep_dir)
            .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", sweep_dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_dir()
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("cell_"))
            })
            .collect();
        cell_dirs.sort();
        if cell_dirs.is_empty() {
            return Err(ExperimentError::Runtime(format!(
                "{}: no cell_<n> directories found",
                sweep_dir.display()
            )));
        }
        let mut rows: Vec<(SweepCell, Vec<RunSummary>)> = Vec::new();
        for cdir in &cell_dirs {
            let cell_path = cdir.join("cell.toml");
            let cell: SweepCell = toml::from_str(&read_to_string(&cell_path)?)
                .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", cell_path.display())))?;
            let (_, summaries) = summaries_from_dir(cdir)?;
            rows.push((cell, summaries));
        }
        let (csv, txt) = sweep_tables(&rows);
        write_atomic(&sweep_dir.join("sweep.csv"), &csv)?;
        write_atomic(&sweep_dir.join("sweep.txt"), &txt)?;
        rebuilt.push("sweep/sweep.csv");
    }

    if rebuilt.is_empty() {
        return Err(ExperimentError::Config(format!(
            "{}: nothing to report; run synth/run/ablate/sweep first",
            out.display()
        )));
    }
    for item in &rebuilt {
        println!("rebuilt {item}");
    }
    Ok(())
}
