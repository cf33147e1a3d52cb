//! Experiment configuration, sweep orchestration, and result tables.
//!
//! Configs are TOML. A sweep takes a base experiment and varies
//! architecture fields (`h`, `n`, `n_in`, `n_out`, transition, activation)
//! either through an explicit cell list or through a Cartesian axes
//! product, mirroring the layout of the result tables it reproduces.
//!
//! Every execution derives its working seed as `mix(run.seed, config
//! hash)`, so a sweep cell and a direct run of the same config produce
//! identical results, and sweep parallelism cannot change any cell's
//! outcome.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationKind, ActivationVariant};
use crate::bptt::{grad_check, GradCheckReport};
use crate::data::{
    batch_from_records, load_dataset_with_manifest, synthetic_dataset, Split, SpikeBatch,
    SyntheticSpec, DEFAULT_NUM_BINS,
};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::neurons::TransitionKind;
use crate::training::{mix_seed, run_trials, OptimGroups, RunPlan, RunSummary};

/// Where the experiment's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Converted event containers (`train.sed` / `test.sed`) in `dir`,
    /// optionally restricted by subset manifests.
    Shd {
        dir: PathBuf,
        #[serde(default)]
        train_manifest: Option<PathBuf>,
        #[serde(default)]
        test_manifest: Option<PathBuf>,
        #[serde(default = "default_bins")]
        num_bins: usize,
    },
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
        #[serde(default)]
        seed: u64,
    },
}

fn default_bins() -> usize {
    DEFAULT_NUM_BINS
}

/// Optimizer overrides; anything left unset falls back to the
/// architecture-dependent defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    #[serde(default)]
    pub lr_ssm: Option<f64>,
    #[serde(default)]
    pub lr_others: Option<f64>,
    #[serde(default)]
    pub wd_ssm: Option<f64>,
    #[serde(default)]
    pub wd_others: Option<f64>,
    /// Dropout on hidden-layer spike outputs. Overrides the default that
    /// otherwise follows from the architecture.
    #[serde(default)]
    pub dropout: Option<f64>,
}

fn default_trials() -> usize {
    10
}

fn default_epochs() -> usize {
    50
}

fn default_batch_size() -> usize {
    128
}

fn default_eval_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub holdout_fraction: Option<f64>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            trials: default_trials(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            output_dir: None,
            holdout_fraction: None,
            eval_batch_size: default_eval_batch(),
        }
    }
}

/// A full experiment description. Serializable, and a persisted config
/// re-runs to identical results given identical binaries and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub network: NetworkSpec,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.run.batch_size < 2 {
            return Err(Error::Config(
                "run.batch_size must be at least 2 (batch statistics)".into(),
            ));
        }
        if let Some(f) = self.run.holdout_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "run.holdout_fraction must lie in [0, 1), got {f}"
                )));
            }
        }
        if let Some(d) = self.optim.dropout {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!(
                    "optim.dropout must lie in [0, 1), got {d}"
                )));
            }
        }
        Ok(())
    }

    /// Effective optimizer groups and dropout after applying defaults.
    pub fn resolve_optim(&self) -> (OptimGroups, f64) {
        let (mut groups, mut dropout) = OptimGroups::defaults_for(&self.network);
        if let Some(v) = self.optim.lr_ssm {
            groups.lr_ssm = v;
        }
        if let Some(v) = self.optim.lr_others {
            groups.lr_others = v;
        }
        if let Some(v) = self.optim.wd_ssm {
            groups.wd_ssm = v;
        }
        if let Some(v) = self.optim.wd_others {
            groups.wd_others = v;
        }
        if let Some(v) = self.optim.dropout {
            dropout = v;
        }
        (groups, dropout)
    }

    /// Build the training plan. The working seed mixes the configured seed
    /// with the config hash.
    pub fn to_plan(&self) -> RunPlan {
        let (groups, dropout) = self.resolve_optim();
        let mut spec = self.network.clone();
        spec.dropout_p = dropout;
        let mut plan = RunPlan::new(spec, groups);
        plan.epochs = self.run.epochs;
        plan.batch_size = self.run.batch_size;
        plan.trials = self.run.trials;
        plan.seed = mix_seed(self.run.seed, config_hash(self));
        plan.output_dir = self.run.output_dir.clone();
        plan.holdout_fraction = self.run.holdout_fraction;
        plan.eval_batch_size = self.run.eval_batch_size;
        plan
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parse a bare `NetworkSpec` from TOML (the `[network]` table contents).
pub fn parse_network_spec(text: &str) -> Result<NetworkSpec> {
    let spec: NetworkSpec =
        toml::from_str(text).map_err(|e| Error::Config(format!("network spec parse error: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text)
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}

/// FNV-1a over the canonical JSON encoding; stable for a given binary.
pub fn config_hash(cfg: &ExperimentConfig) -> u64 {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in json.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

/// Resolve the dataset into dense (train, test) batches.
pub fn load_data(ds: &DatasetConfig) -> Result<(SpikeBatch, SpikeBatch)> {
    match ds {
        DatasetConfig::Synthetic { spec, seed } => Ok(synthetic_dataset(spec, *seed)),
        DatasetConfig::Shd {
            dir,
            train_manifest,
            test_manifest,
            num_bins,
        } => {
            let train_ds =
                load_dataset_with_manifest(dir, Split::Train, train_manifest.as_deref())?;
            let test_ds = load_dataset_with_manifest(dir, Split::Test, test_manifest.as_deref())?;
            let channels = train_ds.channels as usize;
            let train = batch_from_records(&train_ds.records, *num_bins, channels);
            let test = batch_from_records(&test_ds.records, *num_bins, channels);
            Ok((train, test))
        }
    }
}

/// Execute one experiment end to end.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let (train, test) = load_data(&cfg.dataset)?;
    let plan = cfg.to_plan();
    if let Some(dir) = &plan.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, config_to_toml(cfg))
            .map_err(|e| Error::io(cfg_path.display().to_string(), e))?;
    }
    run_trials(&plan, &train, &test)
}

/// Architecture overrides applied to every layer of the base network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellOverride {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub h: Option<usize>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub n_in: Option<usize>,
    #[serde(default)]
    pub n_out: Option<usize>,
    #[serde(default)]
    pub transition: Option<TransitionKind>,
    #[serde(default)]
    pub activation: Option<ActivationVariant>,
}

impl CellOverride {
    fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        for layer in cfg.network.layers.iter_mut() {
            if let Some(h) = self.h {
                layer.h = h;
            }
            if let Some(n) = self.n {
                layer.n = n;
            }
            if let Some(n_in) = self.n_in {
                layer.n_in = n_in;
            }
            if let Some(n_out) = self.n_out {
                layer.n_out = n_out;
            }
            if let Some(kind) = self.transition {
                layer.transition = kind;
            }
            if let Some(variant) = self.activation {
                layer.activation = ActivationKind {
                    variant,
                    ..layer.activation
                };
            }
        }
        cfg
    }

    fn label(&self, idx: usize) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let mut parts = Vec::new();
        if let Some(h) = self.h {
            parts.push(format!("h{h}"));
        }
        if let Some(n) = self.n {
            parts.push(format!("n{n}"));
        }
        if let Some(v) = self.n_in {
            parts.push(format!("in{v}"));
        }
        if let Some(v) = self.n_out {
            parts.push(format!("out{v}"));
        }
        if let Some(k) = self.transition {
            parts.push(format!("{k:?}").to_lowercase());
        }
        if let Some(a) = self.activation {
            parts.push(format!("{a:?}").to_lowercase());
        }
        if parts.is_empty() {
            format!("cell{idx}")
        } else {
            parts.join("_")
        }
    }
}

/// Cartesian product axes; empty axes are skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    #[serde(default)]
    pub h: Vec<usize>,
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default)]
    pub n_in: Vec<usize>,
    #[serde(default)]
    pub n_out: Vec<usize>,
    #[serde(default)]
    pub transition: Vec<TransitionKind>,
    #[serde(default)]
    pub activation: Vec<ActivationVariant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub name: String,
    pub base: ExperimentConfig,
    #[serde(default)]
    pub cells: Vec<CellOverride>,
    #[serde(default)]
    pub axes: Option<SweepAxes>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.cells.is_empty() && self.axes.is_none() {
            return Err(Error::Config(
                "sweep needs either [[cells]] or [axes]".into(),
            ));
        }
        if !self.cells.is_empty() && self.axes.is_some() {
            return Err(Error::Config(
                "sweep accepts [[cells]] or [axes], not both".into(),
            ));
        }
        Ok(())
    }

    /// Expand to the concrete cell list.
    pub fn expand(&self) -> Vec<CellOverride> {
        if !self.cells.is_empty() {
            return self.cells.clone();
        }
        let axes = self.axes.clone().unwrap_or_default();
        fn cross<T: Clone>(cells: Vec<CellOverride>, values: &[T], apply: impl Fn(&mut CellOverride, T)) -> Vec<CellOverride> {
            if values.is_empty() {
                return cells;
            }
            let mut out = Vec::with_capacity(cells.len() * values.len());
            for cell in cells {
                for v in values {
                    let mut c = cell.clone();
                    apply(&mut c, v.clone());
                    out.push(c);
                }
            }
            out
        }
        let mut cells = vec![CellOverride::default()];
        cells = cross(cells, &axes.h, |c, v| c.h = Some(v));
        cells = cross(cells, &axes.n, |c, v| c.n = Some(v));
        cells = cross(cells, &axes.n_in, |c, v| c.n_in = Some(v));
        cells = cross(cells, &axes.n_out, |c, v| c.n_out = Some(v));
        cells = cross(cells, &axes.transition, |c, v| c.transition = Some(v));
        cells = cross(cells, &axes.activation, |c, v| c.activation = Some(v));
        cells
    }
}

pub fn parse_sweep(text: &str) -> Result<SweepConfig> {
    let cfg: SweepConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("sweep parse error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_sweep(path: &Path) -> Result<SweepConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_sweep(&text)
}

/// One row of a sweep's result table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub h: usize,
    pub n: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub transition: TransitionKind,
    pub activation: ActivationVariant,
    pub trials: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub accuracies: Vec<f64>,
    pub config_hash: String,
    #[serde(default)]
    pub error: Option<String>,
}

/// Run every cell of a sweep. Cells run in parallel; per-cell seeds derive
/// from (run seed, cell config hash), so execution order cannot change any
/// result. Cell failures are recorded and the sweep continues.
pub fn run_sweep(sweep: &SweepConfig, out_dir: Option<&Path>) -> Result<Vec<CellResult>> {
    sweep.validate()?;
    let (train, test) = load_data(&sweep.base.dataset)?;
    let cells = sweep.expand();
    let results: Vec<CellResult> = cells
        .par_iter()
        .enumerate()
        .map(|(idx, cell)| {
            let label = cell.label(idx);
            let cfg = cell.apply(&sweep.base);
            let first = &cfg.network.layers[0];
            let mut row = CellResult {
                cell: label.clone(),
                h: first.h,
                n: first.n,
                n_in: first.n_in,
                n_out: first.n_out,
                transition: first.transition,
                activation: first.activation.variant,
                trials: cfg.run.trials,
                mean_acc: f64::NAN,
                std_acc: f64::NAN,
                accuracies: Vec::new(),
                config_hash: format!("{:016x}", config_hash(&cfg)),
                error: None,
            };
            let outcome = cfg.validate().and_then(|_| {
                let mut plan = cfg.to_plan();
                if let Some(dir) = out_dir {
                    plan.output_dir = Some(dir.join("cells").join(&label));
                }
                run_trials(&plan, &train, &test)
            });
            match outcome {
                Ok(summary) => {
                    row.mean_acc = summary.mean_acc;
                    row.std_acc = summary.std_acc;
                    row.accuracies = summary.trials.iter().map(|t| t.test_accuracy).collect();
                    if !summary.failed.is_empty() {
                        row.error = Some(format!(
                            "{} of {} trials failed: {}",
                            summary.failed.len(),
                            cfg.run.trials,
                            summary.failed[0].1
                        ));
                    }
                }
                Err(err) => row.error = Some(err.to_string()),
            }
            row
        })
        .collect();

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let csv_path = dir.join(format!("{}.csv", sweep.name));
        fs::write(&csv_path, results_to_csv(&results))
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
        let json_path = dir.join(format!("{}.json", sweep.name));
        let json = serde_json::to_string_pretty(&results).expect("results serialize");
        fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    }
    Ok(results)
}

pub fn results_to_csv(results: &[CellResult]) -> String {
    let mut out = String::from(
        "cell,h,n,n_in,n_out,transition,activation,trials,mean_acc,std_acc,config_hash,error\n",
    );
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{:?},{:?},{},{:.6},{:.6},{},{}\n",
            r.cell,
            r.h,
            r.n,
            r.n_in,
            r.n_out,
            r.transition,
            r.activation,
            r.trials,
            r.mean_acc,
            r.std_acc,
            r.config_hash,
            r.error.as_deref().unwrap_or(""),
        ));
    }
    out
}

/// Convert sweep result JSON files into gnuplot-friendly `.dat` files
/// (`index mean std # label` per row).
pub fn emit_plots(results_json: &Path, out_dir: &Path) -> Result<PathBuf> {
    let text = fs::read_to_string(results_json)
        .map_err(|e| Error::io(results_json.display().to_string(), e))?;
    let results: Vec<CellResult> = serde_json::from_str(&text).map_err(|e| Error::DataFormat {
        path: results_json.display().to_string(),
        detail: e.to_string(),
    })?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let stem = results_json
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("results");
    let out_path = out_dir.join(format!("{stem}.dat"));
    let mut out = String::from("# index mean_acc std_acc  (one row per sweep cell)\n");
    for (idx, r) in results.iter().enumerate() {
        out.push_str(&format!(
            "{idx} {:.6} {:.6} # {}\n",
            r.mean_acc, r.std_acc, r.cell
        ));
    }
    fs::write(&out_path, out).map_err(|e| Error::io(out_path.display().to_string(), e))?;
    Ok(out_path)
}

/// Gradient checks for a config: the configured activations (through the
/// smoothed forward) plus a GELU copy of the same architecture.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, tolerance: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let (train, _) = load_data(&cfg.dataset)?;
    // small probe batch: a handful of samples, truncated in time
    let take = train.batch.clamp(2, 4);
    let indices: Vec<usize> = (0..take).collect();
    let mut probe = train.select(&indices);
    if probe.t_len > 8 {
        let t_keep = 8;
        let mut counts = Vec::with_capacity(probe.batch * t_keep * probe.channels);
        for s in 0..probe.batch {
            let start = s * probe.t_len * probe.channels;
            counts.extend_from_slice(&probe.counts[start..start + t_keep * probe.channels]);
        }
        probe = SpikeBatch {
            batch: probe.batch,
            t_len: t_keep,
            channels: probe.channels,
            counts,
            labels: probe.labels.clone(),
        };
    }

    let (_, dropout) = cfg.resolve_optim();
    let mut spec = cfg.network.clone();
    spec.dropout_p = dropout;
    let seed = mix_seed(cfg.run.seed, config_hash(cfg));

    let mut reports = Vec::new();
    let net = Network::init(spec.clone(), seed)?;
    reports.push(("configured".to_string(), grad_check(&net, &probe, tolerance)?));

    let mut gelu_spec = spec;
    for layer in gelu_spec.layers.iter_mut() {
        layer.activation = ActivationKind {
            variant: ActivationVariant::Gelu,
            ..layer.activation
        };
    }
    let gelu_net = Network::init(gelu_spec, seed)?;
    reports.push(("gelu".to_string(), grad_check(&gelu_net, &probe, tolerance)?));
    Ok(reports)
}
