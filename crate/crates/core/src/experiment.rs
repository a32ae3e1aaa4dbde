//! Experiment configuration and the run / ablate / sweep drivers behind the
//! command-line runner.
//!
//! Configs are sectioned TOML (`[dataset]`, `[training]`, `[variant]`,
//! `[eval]`) or the JSON manifest written by a previous run. Every key can be
//! overridden by its dotted name, and unknown keys are rejected with their
//! full path.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::{leave_one_out_split, load_dataset, DataFormat, HoldoutPolicy, InteractionDataset};
use crate::error::{Error, Result};
use crate::degradation::{empirical_heterogeneity_probe, ProbeReport};
use crate::evaluation::{fmt_sig6, metrics_csv, ClientEval, RoundMetrics, DEFAULT_CLIP};
use crate::federation::{fedmf_baseline, run_training, RunOptions, TrainingOutcome};
use crate::model::ClientState;
use crate::numerics::Real;
use crate::params::{
    AceInit, ComplementarityKind, EnhancementKind, HyperParams, Precision, TopOneMode, VariantConfig,
};
use crate::toy::{generate_toy, ToySpec};

pub const SEED_ENV: &str = "FED3CR_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// Generated in memory from `dataset.toy`.
    #[default]
    Toy,
    Csv,
    Tsv,
    MovielensDat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub format: DatasetFormat,
    pub min_interactions: usize,
    pub holdout: HoldoutPolicy,
    pub toy: ToySpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: None,
            format: DatasetFormat::Toy,
            min_interactions: 1,
            holdout: HoldoutPolicy::LatestTimestamp,
            toy: ToySpec::default(),
        }
    }
}

impl DatasetSection {
    /// Loads the interactions (before the split).
    pub fn load(&self) -> Result<InteractionDataset> {
        let file_format = match self.format {
            DatasetFormat::Toy => {
                return InteractionDataset::from_raw(&generate_toy(&self.toy)?, self.min_interactions);
            }
            DatasetFormat::Csv => DataFormat::Csv,
            DatasetFormat::Tsv => DataFormat::Tsv,
            DatasetFormat::MovielensDat => DataFormat::MovielensDat,
        };
        let path = self
            .path
            .as_ref()
            .ok_or_else(|| Error::Config("dataset.path is required unless dataset.format = \"toy\"".into()))?;
        load_dataset(path, file_format, self.min_interactions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub rounds: usize,
    pub local_iters: usize,
    pub dim: usize,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub client_fraction: f64,
    pub lr: f64,
    pub lr_gamma: f64,
    pub grad_clip: f64,
    pub beta_a: f64,
    pub beta_o: f64,
    pub ace_layers: usize,
    pub ace_init: AceInit,
    pub ace_scale: f64,
    pub eq12_mode: TopOneMode,
    pub consistency_sample: bool,
    pub init_std: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            rounds: hp.rounds,
            local_iters: hp.local_iters,
            dim: hp.dim,
            batch_size: hp.batch_size,
            negatives_per_positive: hp.negatives_per_positive,
            client_fraction: hp.client_fraction,
            lr: hp.lr,
            lr_gamma: hp.lr_gamma,
            grad_clip: hp.grad_clip,
            beta_a: hp.beta_a,
            beta_o: hp.beta_o,
            ace_layers: hp.ace_layers,
            ace_init: hp.ace_init,
            ace_scale: hp.ace_scale,
            eq12_mode: hp.eq12_mode,
            consistency_sample: hp.consistency_sample,
            init_std: hp.init_std,
            precision: hp.precision,
            seed: hp.seed,
        }
    }
}

/// Which federated model is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    Fed3cr,
    /// Plain federated matrix factorisation.
    Fedmf,
    /// Federated matrix factorisation with the enhancement plug-in.
    FedmfAce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantSection {
    pub model: ModelKind,
    /// Ablation label (`C0`..`C6`, `Fed3CR`, ...). Explicit flags below win.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ace_enabled: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency_enabled: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orthogonality_enabled: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enhancement_kind: Option<EnhancementKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complementarity_kind: Option<ComplementarityKind>,
}

impl Default for VariantSection {
    fn default() -> Self {
        Self {
            model: ModelKind::Fed3cr,
            label: None,
            ace_enabled: None,
            consistency_enabled: None,
            orthogonality_enabled: None,
            enhancement_kind: None,
            complementarity_kind: None,
        }
    }
}

impl VariantSection {
    pub fn resolve(&self) -> Result<VariantConfig> {
        let mut v = match &self.label {
            Some(l) => VariantConfig::from_label(l)?,
            None => VariantConfig::full(),
        };
        if let Some(k) = self.enhancement_kind {
            v = v.with_enhancement(k);
        }
        if let Some(a) = self.ace_enabled {
            v.ace_enabled = a;
            if self.enhancement_kind.is_none() {
                v.enhancement_kind = if a { EnhancementKind::Ace } else { EnhancementKind::None };
            }
        }
        if let Some(c) = self.consistency_enabled {
            v.consistency_enabled = c;
        }
        if let Some(o) = self.orthogonality_enabled {
            v.orthogonality_enabled = o;
        }
        if let Some(k) = self.complementarity_kind {
            v.complementarity_kind = k;
        }
        v.validate()?;
        Ok(v)
    }

    /// Same section with every flag written out explicitly.
    fn explicit(&self) -> Result<Self> {
        let v = self.resolve()?;
        Ok(Self {
            model: self.model,
            label: self.label.clone(),
            ace_enabled: Some(v.ace_enabled),
            consistency_enabled: Some(v.consistency_enabled),
            orthogonality_enabled: Some(v.orthogonality_enabled),
            enhancement_kind: Some(v.enhancement_kind),
            complementarity_kind: Some(v.complementarity_kind),
        })
    }

    /// Section for an ablation label, keeping the model kind.
    fn for_label(label: &str) -> Result<Self> {
        let model = match label {
            "FedMF" | "fedmf" => ModelKind::Fedmf,
            "FedMF+ACE" | "fedmf-ace" => ModelKind::FedmfAce,
            l => {
                VariantConfig::from_label(l)?;
                return Ok(Self {
                    label: Some(l.to_string()),
                    ..Default::default()
                });
            }
        };
        Ok(Self {
            model,
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Evaluate every this many rounds; the final round is always evaluated.
    pub interval: usize,
    pub negatives: usize,
    pub top_k: usize,
    pub rbo_k: usize,
    pub rbo_p: f64,
    pub full_ranking: bool,
    pub rbo: bool,
    /// Threshold for counting correlation entries; 0 disables the count.
    pub correlation_clip: f64,
    /// Write one checkpoint per client next to the server checkpoint.
    pub client_checkpoints: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            interval: 1,
            negatives: hp.eval_negatives,
            top_k: hp.top_k,
            rbo_k: hp.rbo_k,
            rbo_p: hp.rbo_p,
            full_ranking: false,
            rbo: true,
            correlation_clip: DEFAULT_CLIP,
            client_checkpoints: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub training: TrainingSection,
    pub variant: VariantSection,
    pub eval: EvalSection,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            training: TrainingSection::default(),
            variant: VariantSection::default(),
            eval: EvalSection::default(),
            output_dir: PathBuf::from("runs/fed3cr"),
        }
    }
}

impl ExperimentConfig {
    pub fn hyper_params(&self) -> HyperParams {
        let t = &self.training;
        let e = &self.eval;
        HyperParams {
            rounds: t.rounds,
            local_iters: t.local_iters,
            dim: t.dim,
            batch_size: t.batch_size,
            negatives_per_positive: t.negatives_per_positive,
            client_fraction: t.client_fraction,
            lr: t.lr,
            lr_gamma: t.lr_gamma,
            grad_clip: t.grad_clip,
            beta_a: t.beta_a,
            beta_o: t.beta_o,
            ace_layers: t.ace_layers,
            ace_init: t.ace_init,
            ace_scale: t.ace_scale,
            eq12_mode: t.eq12_mode,
            consistency_sample: t.consistency_sample,
            eval_negatives: e.negatives,
            top_k: e.top_k,
            rbo_k: e.rbo_k,
            rbo_p: e.rbo_p,
            init_std: t.init_std,
            holdout: self.dataset.holdout,
            precision: t.precision,
            seed: t.seed,
        }
    }

    pub fn run_options(&self, workers: Option<usize>) -> RunOptions {
        RunOptions {
            workers,
            eval_interval: self.eval.interval,
            full_ranking: self.eval.full_ranking,
            rbo: self.eval.rbo,
            correlation_clip: (self.eval.correlation_clip > 0.0).then_some(self.eval.correlation_clip),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper_params().validate()?;
        self.variant.resolve()?;
        if self.eval.interval < 1 {
            return Err(Error::Config("eval.interval must be >= 1".into()));
        }
        if !(self.eval.correlation_clip >= 0.0) {
            return Err(Error::Config("eval.correlation_clip must be >= 0".into()));
        }
        match self.dataset.format {
            DatasetFormat::Toy => self.dataset.toy.validate(),
            _ if self.dataset.path.is_none() => Err(Error::Config(
                "dataset.path is required unless dataset.format = \"toy\"".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Validated copy with the variant flags spelled out, as written to the manifest.
    pub fn resolved(&self) -> Result<Self> {
        self.validate()?;
        Ok(Self {
            variant: self.variant.explicit()?,
            ..self.clone()
        })
    }
}

fn parse_override_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t
            .remove("v")
            .and_then(|v| serde_json::to_value(v).ok())
            .unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}`: parent is not a section")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn from_value(mut root: Value, overrides: &[(String, String)], env_seed: bool) -> Result<ExperimentConfig> {
    if !root.is_object() {
        return Err(Error::Config("config must be a table of sections".into()));
    }
    if env_seed {
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{seed}` is not an unsigned integer")))?;
            set_dotted(&mut root, "training.seed", Value::from(seed))?;
        }
    }
    for (k, v) in overrides {
        set_dotted(&mut root, k, parse_override_value(v))?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Error::Config(inner.to_string())
        } else {
            Error::Config(format!("`{path}`: {inner}"))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a config document (TOML, or JSON when `json` is set), applies the
/// seed environment variable and then the dotted `key=value` overrides.
pub fn parse_config(text: &str, json: bool, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let root: Value = if json {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?
    } else {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config TOML: {e}")))?;
        serde_json::to_value(table)?
    };
    from_value(root, overrides, true)
}

impl ExperimentConfig {
    /// Copy with dotted `key=value` overrides applied (no environment lookup).
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        from_value(serde_json::to_value(self)?, overrides, false)
    }
}

/// Reads a config file; `.json` files are read as manifests.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let json = path.extension().is_some_and(|e| e == "json");
    parse_config(&text, json, overrides)
}

/// Best HR@10 / NDCG@10 over evaluated rounds and the final-round values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_hr: Option<f64>,
    pub best_hr_round: Option<usize>,
    pub best_ndcg: Option<f64>,
    pub best_ndcg_round: Option<usize>,
    pub final_hr: Option<f64>,
    pub final_ndcg: Option<f64>,
    pub final_rbo: Option<f64>,
    /// Mean per-client count of correlation entries above the clip.
    pub final_corr_above_clip: Option<f64>,
}

impl RunSummary {
    pub fn from_metrics(rows: &[RoundMetrics], final_eval: &[ClientEval]) -> Self {
        let best = |f: fn(&RoundMetrics) -> Option<f64>| {
            rows.iter()
                .filter_map(|m| f(m).map(|v| (v, m.round)))
                .fold(None, |acc: Option<(f64, usize)>, (v, r)| match acc {
                    Some((b, _)) if b >= v => acc,
                    _ => Some((v, r)),
                })
        };
        let hr = best(|m| m.hr);
        let ndcg = best(|m| m.ndcg);
        let last = rows.iter().rev().find(|m| m.hr.is_some());
        let counts: Vec<f64> = final_eval.iter().filter_map(|e| e.corr_above_clip.map(|c| c as f64)).collect();
        Self {
            best_hr: hr.map(|x| x.0),
            best_hr_round: hr.map(|x| x.1),
            best_ndcg: ndcg.map(|x| x.0),
            best_ndcg_round: ndcg.map(|x| x.1),
            final_hr: last.and_then(|m| m.hr),
            final_ndcg: last.and_then(|m| m.ndcg),
            final_rbo: last.and_then(|m| m.rbo),
            final_corr_above_clip: (!counts.is_empty()).then(|| counts.iter().sum::<f64>() / counts.len() as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub rounds: Vec<RoundMetrics>,
    pub summary: RunSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// In-memory result of one training run.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub metrics: Vec<RoundMetrics>,
    pub final_eval: Vec<ClientEval>,
    pub server_checkpoint: Vec<u8>,
    pub client_checkpoints: Vec<(usize, Vec<u8>)>,
}

fn package<T: Real, C>(
    out: TrainingOutcome<T, C>,
    seed: u64,
    clients: impl Fn(&C) -> Option<(usize, Result<Vec<u8>>)>,
) -> Result<TrainedRun> {
    let server_checkpoint = out.server.to_checkpoint(seed).encode()?;
    let client_checkpoints = out
        .clients
        .iter()
        .filter_map(|c| clients(c))
        .map(|(i, b)| b.map(|b| (i, b)))
        .collect::<Result<_>>()?;
    Ok(TrainedRun {
        metrics: out.metrics,
        final_eval: out.final_eval,
        server_checkpoint,
        client_checkpoints,
    })
}

fn train_typed<T: Real>(
    ds: &InteractionDataset,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    keep_clients: bool,
) -> Result<TrainedRun> {
    let hp = cfg.hyper_params();
    let round = hp.rounds as u64;
    match cfg.variant.model {
        ModelKind::Fed3cr => {
            let v = cfg.variant.resolve()?;
            let out = run_training::<T>(ds, &hp, &v, opts)?;
            package(out, hp.seed, |c: &ClientState<T>| {
                keep_clients.then(|| (c.client_id, c.to_checkpoint(hp.seed, round).encode()))
            })
        }
        ModelKind::Fedmf | ModelKind::FedmfAce => {
            let out = fedmf_baseline::<T>(ds, &hp, cfg.variant.model == ModelKind::FedmfAce, opts)?;
            package(out, hp.seed, |c| {
                keep_clients.then(|| (c.client_id, c.to_checkpoint(hp.seed, round).encode()))
            })
        }
    }
}

/// Trains on an already split dataset with the configured precision.
pub fn train(ds: &InteractionDataset, cfg: &ExperimentConfig, opts: &RunOptions, keep_clients: bool) -> Result<TrainedRun> {
    match cfg.training.precision {
        Precision::F32 => train_typed::<f32>(ds, cfg, opts, keep_clients),
        Precision::F64 => train_typed::<f64>(ds, cfg, opts, keep_clients),
    }
}

/// Loads and splits the configured dataset.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<InteractionDataset> {
    let ds = cfg.dataset.load()?;
    leave_one_out_split(&ds, cfg.training.seed, cfg.dataset.holdout)
}

/// Creates the output directory, refusing to reuse a non-empty one unless `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RECORD_FILE: &str = "record.json";
pub const SERVER_CHECKPOINT_FILE: &str = "server.ckpt";
pub const ERROR_FILE: &str = "error.json";

/// Full run: writes the manifest, metrics CSV, record and checkpoints under
/// `cfg.output_dir`. On failure the metrics gathered so far and an error
/// record are written before the error is returned.
pub fn run(cfg: &ExperimentConfig, workers: Option<usize>, force: bool) -> Result<ExperimentRecord> {
    let cfg = cfg.resolved()?;
    let dir = cfg.output_dir.clone();
    prepare_output_dir(&dir, force)?;
    write(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&cfg)? + "\n")?;

    let seen = Arc::new(Mutex::new(Vec::<RoundMetrics>::new()));
    let mut opts = cfg.run_options(workers);
    let sink = Arc::clone(&seen);
    opts.on_round = Some(Arc::new(move |m: &RoundMetrics| {
        sink.lock().expect("metrics sink").push(m.clone())
    }));

    let started = Instant::now();
    let result = prepare_dataset(&cfg).and_then(|ds| train(&ds, &cfg, &opts, cfg.eval.client_checkpoints));
    log::info!("run finished in {:.1}s", started.elapsed().as_secs_f64());
    match result {
        Ok(trained) => {
            write(&dir.join(METRICS_FILE), metrics_csv(&trained.metrics))?;
            write(&dir.join(SERVER_CHECKPOINT_FILE), &trained.server_checkpoint)?;
            if !trained.client_checkpoints.is_empty() {
                let cdir = dir.join("clients");
                fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
                for (i, bytes) in &trained.client_checkpoints {
                    write(&cdir.join(format!("client_{i}.ckpt")), bytes)?;
                }
            }
            let record = ExperimentRecord {
                summary: RunSummary::from_metrics(&trained.metrics, &trained.final_eval),
                config: cfg,
                rounds: trained.metrics,
                error: None,
            };
            write(&dir.join(RECORD_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
            Ok(record)
        }
        Err(e) => {
            let rounds = seen.lock().expect("metrics sink").clone();
            write(&dir.join(METRICS_FILE), metrics_csv(&rounds))?;
            let record = ExperimentRecord {
                summary: RunSummary::from_metrics(&rounds, &[]),
                config: cfg,
                rounds,
                error: Some(e.to_string()),
            };
            write(&dir.join(ERROR_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
            Err(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub hr: f64,
    pub ndcg: f64,
}

fn comparison_csv(first: &str, rows: &[ComparisonRow]) -> String {
    let mut s = format!("{first},hr10,ndcg10\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.label, r.hr, r.ndcg));
    }
    s
}

fn final_row(label: String, trained: &TrainedRun) -> Result<ComparisonRow> {
    let s = RunSummary::from_metrics(&trained.metrics, &trained.final_eval);
    match (s.final_hr, s.final_ndcg) {
        (Some(hr), Some(ndcg)) => Ok(ComparisonRow { label, hr, ndcg }),
        _ => Err(Error::Runtime(format!("{label}: no evaluated round"))),
    }
}

/// Trains every labelled variant on the same split.
pub fn ablate_rows(cfg: &ExperimentConfig, labels: &[String], workers: Option<usize>) -> Result<Vec<ComparisonRow>> {
    if labels.is_empty() {
        return Err(Error::Config("ablate needs at least one variant label".into()));
    }
    let sections = labels.iter().map(|l| VariantSection::for_label(l)).collect::<Result<Vec<_>>>()?;
    cfg.validate()?;
    let ds = prepare_dataset(cfg)?;
    let opts = cfg.run_options(workers);
    labels
        .iter()
        .zip(sections)
        .map(|(label, variant)| {
            let c = ExperimentConfig { variant, ..cfg.clone() };
            log::info!("ablation variant {label}");
            final_row(label.clone(), &train(&ds, &c, &opts, false)?)
        })
        .collect()
}

pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Writes `ablation.csv` (one row per label) and the base manifest.
pub fn ablate(cfg: &ExperimentConfig, labels: &[String], workers: Option<usize>, force: bool) -> Result<Vec<ComparisonRow>> {
    let cfg = cfg.resolved()?;
    prepare_output_dir(&cfg.output_dir, force)?;
    write(&cfg.output_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let rows = ablate_rows(&cfg, labels, workers)?;
    write(&cfg.output_dir.join(ABLATION_FILE), comparison_csv("variant", &rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    BetaA,
    BetaO,
    Layers,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta_a" => Ok(Self::BetaA),
            "beta_o" => Ok(Self::BetaO),
            "layers" | "ace_layers" => Ok(Self::Layers),
            other => Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (expected beta_a, beta_o or layers)"
            ))),
        }
    }
}

impl SweepParam {
    fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        match self {
            Self::BetaA => c.training.beta_a = value,
            Self::BetaO => c.training.beta_o = value,
            Self::Layers => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("layers value {value} is not a positive integer")));
                }
                c.training.ace_layers = value as usize;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// One run per value on the same split.
pub fn sweep_rows(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    workers: Option<usize>,
) -> Result<Vec<ComparisonRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values.iter().map(|&v| param.apply(cfg, v)).collect::<Result<Vec<_>>>()?;
    let ds = prepare_dataset(cfg)?;
    let opts = cfg.run_options(workers);
    values
        .iter()
        .zip(configs)
        .map(|(v, c)| final_row(v.to_string(), &train(&ds, &c, &opts, false)?))
        .collect()
}

/// Writes `sweep.csv` with `(value, HR@10, NDCG@10)` rows and the base manifest.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    workers: Option<usize>,
    force: bool,
) -> Result<Vec<ComparisonRow>> {
    let cfg = cfg.resolved()?;
    prepare_output_dir(&cfg.output_dir, force)?;
    write(&cfg.output_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let rows = sweep_rows(&cfg, param, values, workers)?;
    write(&cfg.output_dir.join(SWEEP_FILE), comparison_csv("value", &rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutput {
    pub report: ProbeReport,
    /// Mean gradient difference between clients of the same planted block (toy data only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub within_block_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub across_block_mean: Option<f64>,
}

fn probe_typed<T: Real>(ds: &InteractionDataset, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ProbeReport> {
    let hp = cfg.hyper_params();
    let v = cfg.variant.resolve()?;
    let out = run_training::<T>(ds, &hp, &v, opts)?;
    empirical_heterogeneity_probe(ds, &out.clients, &out.server.consensus, &out.server.transfer, &hp, &v)
}

/// Trains the configured model and probes per-client gradient heterogeneity
/// at the final consensus.
pub fn heterogeneity_probe(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<ProbeOutput> {
    if cfg.variant.model != ModelKind::Fed3cr {
        return Err(Error::Config("the heterogeneity probe needs variant.model = \"fed3cr\"".into()));
    }
    cfg.validate()?;
    let ds = prepare_dataset(cfg)?;
    let opts = cfg.run_options(workers);
    let report = match cfg.training.precision {
        Precision::F32 => probe_typed::<f32>(&ds, cfg, &opts)?,
        Precision::F64 => probe_typed::<f64>(&ds, cfg, &opts)?,
    };
    let (within, across) = if cfg.dataset.format == DatasetFormat::Toy {
        let spec = &cfg.dataset.toy;
        let block: Vec<Option<usize>> = (0..ds.num_clients())
            .map(|c| ds.external_user(c).parse().ok().map(|u| spec.user_block(u)))
            .collect();
        let same = |i: usize, j: usize| block[i].is_some() && block[i] == block[j];
        (
            report.mean_difference(|i, j| same(i, j)),
            report.mean_difference(|i, j| !same(i, j)),
        )
    } else {
        (None, None)
    };
    Ok(ProbeOutput {
        report,
        within_block_mean: within,
        across_block_mean: across,
    })
}

/// Square matrix as CSV without a header, `%.6g`-style numbers.
pub fn matrix_csv(rows: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for r in rows {
        let cells: Vec<String> = r.iter().map(|&x| fmt_sig6(x)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}
