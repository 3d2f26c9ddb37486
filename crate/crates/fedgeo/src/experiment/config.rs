//! Experiment configuration: one TOML file with `[dataset]`, `[hyperparams]`,
//! `[federation]`, `[sweep]`, and `[output]` sections. Every section (and
//! almost every field) has a default, so an empty file — or no file at all —
//! resolves to the built-in desk-scale fixture: a 20 x 20 grid (400
//! locations) with 10 synthetic clients, a 32/32 model, 50 rounds at
//! fraction 0.2, and seeds 1..=5.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::federation::{Aggregator, FederationConfig, FederationError, Sampler};
use crate::geogrid::GridSpec;
use crate::mobility::{PltOptions, SynthConfig};
use crate::model::HyperParams;

use super::ExperimentError;

/// Root of the config file. Missing sections take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub hyperparams: HyperParams,
    pub federation: FederationSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            hyperparams: HyperParams::default(),
            federation: FederationSection::default(),
            sweep: SweepSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// `[dataset]`: the grid, the train/test split, and exactly one source.
/// Omitting the whole section yields the synthetic fixture; when the section
/// is written explicitly, exactly one of `[dataset.synthetic]` /
/// `[dataset.plt]` must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Held-out fraction per client (chronological tail), in (0, 1).
    #[serde(default = "default_test_frac")]
    pub test_frac: f64,
    #[serde(default = "default_grid")]
    pub grid: GridSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plt: Option<PltSource>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            test_frac: default_test_frac(),
            grid: default_grid(),
            synthetic: Some(SyntheticSource::default()),
            plt: None,
        }
    }
}

fn default_test_frac() -> f64 {
    0.1
}

fn default_grid() -> GridSpec {
    GridSpec::new(37.5, 126.9, 100.0, 20, 20).expect("default grid is valid")
}

/// `[dataset.synthetic]`: commuter-walk generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub n_clients: usize,
    /// Dataset seed, independent of the run seeds.
    pub seed: u64,
    pub walk: SynthConfig,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            n_clients: 10,
            seed: 1,
            walk: SynthConfig::default(),
        }
    }
}

/// `[dataset.plt]`: trajectory-file ingestion. One directory per client,
/// scanned non-recursively for `*.plt` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PltSource {
    pub client_dirs: Vec<PathBuf>,
    #[serde(default = "default_resample_interval_s")]
    pub resample_interval_s: i64,
    #[serde(default = "default_gap_split_s")]
    pub gap_split_s: i64,
    #[serde(default = "default_min_records")]
    pub min_records: usize,
    #[serde(default = "default_window_len")]
    pub window_len: usize,
}

fn default_resample_interval_s() -> i64 {
    PltOptions::default().resample_interval_s
}

fn default_gap_split_s() -> i64 {
    PltOptions::default().gap_split_s
}

fn default_min_records() -> usize {
    PltOptions::default().min_records
}

fn default_window_len() -> usize {
    PltOptions::default().window_len
}

impl PltSource {
    pub fn options(&self) -> PltOptions {
        PltOptions {
            resample_interval_s: self.resample_interval_s,
            gap_split_s: self.gap_split_s,
            min_records: self.min_records,
            window_len: self.window_len,
        }
    }
}

/// `[federation]`: everything about the server loop except the model
/// hyperparameters (which live in `[hyperparams]`) and the seed (which comes
/// from `[output].seeds`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub rounds: usize,
    pub fraction: f64,
    pub sampler: Sampler,
    pub aggregator: Aggregator,
    pub gaa_enabled: bool,
    pub lwa_layers: Vec<usize>,
    pub q: f64,
    pub neighbor_threshold_m: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prox_mu: Option<f64>,
    /// When positive, `run` also trains a centralized model on the pooled
    /// training data for this many epochs as an upper-bound baseline.
    pub centralized_epochs: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        let f = FederationConfig::default();
        Self {
            rounds: f.rounds,
            fraction: f.fraction,
            sampler: f.sampler,
            aggregator: f.aggregator,
            gaa_enabled: f.gaa_enabled,
            lwa_layers: f.lwa_layers,
            q: f.q,
            neighbor_threshold_m: f.neighbor_threshold_m,
            prox_mu: f.prox_mu,
            centralized_epochs: 0,
        }
    }
}

/// `[sweep]`: value lists for the three swept knobs. An empty list keeps the
/// value from `[federation]` / `[hyperparams]` fixed on that axis.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub fraction: Vec<f64>,
    pub local_epochs: Vec<usize>,
    pub q: Vec<f64>,
}

impl SweepSection {
    pub fn is_empty(&self) -> bool {
        self.fraction.is_empty() && self.local_epochs.is_empty() && self.q.is_empty()
    }
}

/// `[output]`: destination directory and the seed list every run-style
/// command iterates over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

/// One sweep grid cell (axes defaulted from the base config where unswept).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub fraction: f64,
    pub local_epochs: usize,
    pub q: f64,
}

/// Reads a config file, or returns the built-in defaults when no path is
/// given. Parse problems are config errors (exit code 1).
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, ExperimentError> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                ExperimentError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| ExperimentError::Config(format!("config {}: {e}", p.display())))
        }
    }
}

/// Unwraps config-class federation errors to their bare message so callers
/// can prefix them with the config-file location.
fn cfg_msg(e: FederationError) -> String {
    match e {
        FederationError::InvalidConfig(m) => m,
        other => other.to_string(),
    }
}

impl ExperimentConfig {
    /// Applies command-line overrides on top of the file contents.
    pub fn apply_overrides(&mut self, out: Option<PathBuf>, seeds: Option<Vec<u64>>) {
        if let Some(dir) = out {
            self.output.dir = dir;
        }
        if let Some(s) = seeds {
            self.output.seeds = s;
        }
    }

    /// Full structural validation; every message names the offending field.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |m: String| Err(ExperimentError::Config(m));
        self.dataset
            .grid
            .validate()
            .map_err(|e| ExperimentError::Config(format!("dataset.grid: {e}")))?;
        if !(self.dataset.test_frac > 0.0 && self.dataset.test_frac < 1.0) {
            return fail(format!(
                "dataset.test_frac must lie in (0, 1), got {}",
                self.dataset.test_frac
            ));
        }
        match (&self.dataset.synthetic, &self.dataset.plt) {
            (Some(_), Some(_)) | (None, None) => {
                return fail(
                    "dataset must configure exactly one of [dataset.synthetic] or [dataset.plt]"
                        .into(),
                );
            }
            (Some(s), None) => {
                if s.n_clients == 0 {
                    return fail("dataset.synthetic.n_clients must be at least 1".into());
                }
            }
            (None, Some(p)) => {
                if p.client_dirs.is_empty() {
                    return fail("dataset.plt.client_dirs must list at least one directory".into());
                }
                if p.resample_interval_s < 1 {
                    return fail(format!(
                        "dataset.plt.resample_interval_s must be at least 1, got {}",
                        p.resample_interval_s
                    ));
                }
                if p.gap_split_s < 1 {
                    return fail(format!(
                        "dataset.plt.gap_split_s must be at least 1, got {}",
                        p.gap_split_s
                    ));
                }
                if p.window_len < 1 {
                    return fail("dataset.plt.window_len must be at least 1".into());
                }
            }
        }
        self.hyperparams
            .validate()
            .map_err(|m| ExperimentError::Config(format!("hyperparams: {m}")))?;
        self.federation_config(0)
            .validate()
            .map_err(|e| ExperimentError::Config(format!("federation: {}", cfg_msg(e))))?;
        for cell in self.sweep_cells() {
            let mut fc = self.federation_config(0);
            cell.apply(&mut fc);
            fc.validate()
                .map_err(|e| ExperimentError::Config(format!("sweep: {}", cfg_msg(e))))?;
        }
        if self.output.seeds.is_empty() {
            return fail("output.seeds must list at least one seed".into());
        }
        let mut sorted = self.output.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.output.seeds.len() {
            return fail("output.seeds contains duplicate seeds".into());
        }
        Ok(())
    }

    /// Assembles the runtime federation config for one seed.
    pub fn federation_config(&self, seed: u64) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            rounds: f.rounds,
            fraction: f.fraction,
            sampler: f.sampler,
            aggregator: f.aggregator,
            gaa_enabled: f.gaa_enabled,
            lwa_layers: f.lwa_layers.clone(),
            q: f.q,
            neighbor_threshold_m: f.neighbor_threshold_m,
            prox_mu: f.prox_mu,
            hp: self.hyperparams.clone(),
            seed,
        }
    }

    /// Cartesian sweep grid in (fraction, local_epochs, q) order, with empty
    /// axes pinned to the base config value.
    pub fn sweep_cells(&self) -> Vec<SweepCell> {
        let fractions = if self.sweep.fraction.is_empty() {
            vec![self.federation.fraction]
        } else {
            self.sweep.fraction.clone()
        };
        let epochs = if self.sweep.local_epochs.is_empty() {
            vec![self.hyperparams.local_epochs]
        } else {
            self.sweep.local_epochs.clone()
        };
        let qs = if self.sweep.q.is_empty() {
            vec![self.federation.q]
        } else {
            self.sweep.q.clone()
        };
        let mut cells = Vec::with_capacity(fractions.len() * epochs.len() * qs.len());
        for &fraction in &fractions {
            for &local_epochs in &epochs {
                for &q in &qs {
                    cells.push(SweepCell {
                        fraction,
                        local_epochs,
                        q,
                    });
                }
            }
        }
        cells
    }
}

impl SweepCell {
    pub fn apply(&self, cfg: &mut FederationConfig) {
        cfg.fraction = self.fraction;
        cfg.hp.local_epochs = self.local_epochs;
        cfg.q = self.q;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default_fixture() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.dataset.grid.n_locations(), 400);
        assert_eq!(cfg.output.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(cfg.federation.rounds, 50);
        assert!((cfg.federation.fraction - 0.2).abs() < 1e-15);
        assert!((cfg.federation.q - 1e4).abs() < 1e-9);
        assert_eq!(cfg.hyperparams.embed_dim, 32);
        assert_eq!(cfg.hyperparams.hidden_dim, 32);
        cfg.validate().unwrap();
    }

    #[test]
    fn serialization_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg: ExperimentConfig = toml::from_str(
            "[federation]\nrounds = 7\nsampler = \"ebs\"\n\n[output]\nseeds = [9]\n",
        )
        .unwrap();
        assert_eq!(cfg.federation.rounds, 7);
        assert_eq!(cfg.federation.sampler, Sampler::Ebs);
        assert_eq!(cfg.federation.aggregator, Aggregator::FedAvg);
        assert_eq!(cfg.output.seeds, vec![9]);
        assert_eq!(cfg.output.dir, PathBuf::from("out"));
        assert_eq!(cfg.hyperparams, HyperParams::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[federation]\nrouns = 7\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("typo = 1\n").is_err());
        assert!(
            toml::from_str::<ExperimentConfig>("[dataset.synthetic.walk]\nhome_rowz = 2\n")
                .is_err()
        );
    }

    #[test]
    fn dataset_source_must_be_exactly_one() {
        // Explicit [dataset] without a source.
        let cfg: ExperimentConfig = toml::from_str("[dataset]\ntest_frac = 0.2\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("exactly one"));

        // Both sources at once.
        let cfg: ExperimentConfig = toml::from_str(
            "[dataset.synthetic]\nn_clients = 3\n\n[dataset.plt]\nclient_dirs = [\"a\"]\n",
        )
        .unwrap();
        assert!(cfg.validate().is_err());

        // A lone plt source is fine.
        let cfg: ExperimentConfig =
            toml::from_str("[dataset.plt]\nclient_dirs = [\"a\", \"b\"]\n").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.dataset.plt.as_ref().unwrap().options().window_len, 32);
    }

    #[test]
    fn validation_names_offending_fields() {
        let cases: &[(&str, &str)] = &[
            ("[dataset]\ntest_frac = 1.0\n[dataset.synthetic]\n", "dataset.test_frac"),
            ("[dataset.synthetic]\nn_clients = 0\n", "dataset.synthetic.n_clients"),
            ("[federation]\nfraction = 1.5\n", "fraction"),
            ("[federation]\nq = -1.0\n", "q"),
            ("[federation]\nlwa_layers = [0]\n", "lwa_layers"),
            ("[hyperparams]\nbatch_size = 0\n", "batch_size"),
            ("[sweep]\nfraction = [0.1, 2.0]\n", "sweep"),
            ("[output]\nseeds = []\n", "seeds"),
            ("[output]\nseeds = [1, 1]\n", "duplicate"),
        ];
        for (text, needle) in cases {
            let cfg: ExperimentConfig = toml::from_str(text).unwrap();
            let err = cfg.validate().unwrap_err();
            assert!(
                err.to_string().contains(needle),
                "config {text:?} produced {err} (expected mention of {needle:?})"
            );
            assert!(err.is_config());
        }
    }

    #[test]
    fn overrides_replace_dir_and_seeds() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(Some(PathBuf::from("elsewhere")), Some(vec![3, 4]));
        assert_eq!(cfg.output.dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.output.seeds, vec![3, 4]);
        cfg.apply_overrides(None, None);
        assert_eq!(cfg.output.dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn sweep_cells_form_the_cartesian_grid() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.fraction = vec![0.1, 0.2, 0.4];
        cfg.sweep.q = vec![1.0, 100.0];
        let cells = cfg.sweep_cells();
        assert_eq!(cells.len(), 6);
        // Unswept axis pinned to the base value on every cell.
        assert!(cells.iter().all(|c| c.local_epochs == cfg.hyperparams.local_epochs));
        // fraction is the slowest axis, q the fastest.
        assert_eq!(cells[0], SweepCell { fraction: 0.1, local_epochs: 10, q: 1.0 });
        assert_eq!(cells[1], SweepCell { fraction: 0.1, local_epochs: 10, q: 100.0 });
        assert_eq!(cells[5], SweepCell { fraction: 0.4, local_epochs: 10, q: 100.0 });

        // Empty sweep: a single cell mirroring the base config.
        let base = ExperimentConfig::default();
        assert!(base.sweep.is_empty());
        let cells = base.sweep_cells();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].fraction, base.federation.fraction);
        assert_eq!(cells[0].q, base.federation.q);

        // Applying a cell rewrites exactly the three swept knobs.
        let mut fc = base.federation_config(3);
        SweepCell { fraction: 0.4, local_epochs: 2, q: 7.0 }.apply(&mut fc);
        assert_eq!(fc.fraction, 0.4);
        assert_eq!(fc.hp.local_epochs, 2);
        assert_eq!(fc.q, 7.0);
        assert_eq!(fc.seed, 3);
        assert_eq!(fc.rounds, base.federation.rounds);
    }

    #[test]
    fn missing_config_file_is_a_config_error() {
        let err = load_config(Some(Path::new("/nonexistent/config.toml"))).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("/nonexistent/config.toml"));
    }
}
