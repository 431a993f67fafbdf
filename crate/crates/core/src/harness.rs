//! Config-driven experiment runner: dataset generation, strategy grids,
//! ablation sweeps and report emission.
//!
//! Output layout of `run` / `sweep`:
//!
//! ```text
//! <out>/config.json            resolved config and its hash
//! <out>/report.json            SweepReport (rows + every run's status)
//! <out>/summary.csv            plot-ready table, one line per row
//! <out>/run_info.json          wall-clock timestamp (not part of the report)
//! <out>/<point>/seed_<s>/data/ real.csv, synthetic_biased.csv, synthetic_balanced.csv, test.csv, manifest.json
//! <out>/<point>/seed_<s>/<strategy>/ model.json, mask.txt, record.json, report.json
//! ```
//!
//! `<point>` is `main` for `run` and `<axis>_<value>` for sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    derive_seed, digest_hex, generate_balanced_dataset, generate_triplet, load_csv_dataset,
    on_dims, write_csv_dataset, Dataset, DomainSpec, Triplet, TripletSpec, NUM_CELLS,
};
use crate::error::{Error, Result};
use crate::mask::{Criterion, SelectionMask};
use crate::metrics::{FairnessReport, FlatReport};
use crate::net::{self, Model, ModelArch};
use crate::train::{
    pretrain, run_strategy_from, RunConfigs, RunRecord, Strategy, StrategyData, TopK, TrainConfig,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable that overrides the output directory.
pub const OUTPUT_DIR_ENV: &str = "FAIRTUNE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub strategies: Vec<String>,
    pub output_dir: PathBuf,
    pub workers: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: (0..8).collect(),
            strategies: [
                "erm_real",
                "synthetic_only",
                "supplementation",
                "repairing",
                "linear_probe",
                "full_finetune",
                "random_finetune:0.55",
                "block_update:0",
                "block_freeze:0",
                "selective_finetune",
            ]
            .map(String::from)
            .to_vec(),
            output_dir: PathBuf::from("out"),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    /// One block per layer when empty.
    pub block_assignment: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            input_dim: 20,
            hidden_widths: vec![32, 16],
            block_assignment: Vec::new(),
        }
    }
}

/// Half-open coordinate range plus the per-coordinate value placed on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    pub start: usize,
    pub end: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dim: usize,
    pub n_per_target: usize,
    pub bias_ratio: f64,
    pub bias_ratio_s1: f64,
    pub syn_size_ratio: f64,
    pub signal: Band,
    pub spurious: Band,
    pub domain_shift: Band,
    pub noise_sigma: f64,
    /// Balanced real-domain test set size (split evenly over the four cells).
    pub n_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dim: 20,
            n_per_target: 2000,
            bias_ratio: 0.9,
            bias_ratio_s1: 0.9,
            syn_size_ratio: 1.0,
            signal: Band { start: 0, end: 5, magnitude: 1.0 },
            spurious: Band { start: 5, end: 10, magnitude: 1.2 },
            domain_shift: Band { start: 10, end: 20, magnitude: 0.8 },
            noise_sigma: 1.0,
            n_test: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub criterion: String,
    pub k: Option<usize>,
    pub k_fraction: Option<f64>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            criterion: "absolute_difference".into(),
            k: Some(5),
            k_fraction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `[epoch, multiplier]` pairs.
    pub schedule: Vec<(usize, f64)>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 15,
            batch_size: 128,
            schedule: vec![(10, 0.01)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    /// Upper bound; the effective batch is `min(batch_size, N / 10)`.
    pub batch_size: usize,
    pub val_fraction: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            lr_grid: vec![0.4, 0.5, 0.6],
            epochs: 10,
            batch_size: 128,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub topk: Vec<usize>,
    pub bias_ratio: Vec<f64>,
    pub syn_amount: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            topk: vec![2, 3, 4, 5, 6],
            bias_ratio: vec![0.6, 0.7, 0.8, 0.9],
            syn_amount: vec![0.5, 1.0, 1.5, 2.0],
        }
    }
}

/// Whole experiment description, read from a TOML file. Every section and
/// key is optional; missing values take the desk-scale defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub selection: SelectionSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form of the parsed config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        digest_hex(&[json.as_bytes()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        self.strategies()?;
        self.arch().validate()?;
        self.real_spec()?.validate()?;
        self.triplet_spec(self.data.bias_ratio_s1, self.data.syn_size_ratio)?
            .synthetic_spec(0.5)
            .validate()?;
        if self.data.dim != self.model.input_dim {
            return Err(Error::Config(format!(
                "data.dim {} differs from model.input_dim {}",
                self.data.dim, self.model.input_dim
            )));
        }
        if self.data.n_test < NUM_CELLS {
            return Err(Error::Config("data.n_test must be at least 4".into()));
        }
        self.criterion()?;
        self.top_k()?.resolve(self.arch().num_groups())?;
        if self.finetune.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) || self.finetune.lr_grid.is_empty() {
            return Err(Error::Config("finetune.lr_grid must hold positive rates".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> ModelArch {
        let arch = ModelArch::new(self.model.input_dim, self.model.hidden_widths.clone());
        if self.model.block_assignment.is_empty() {
            arch
        } else {
            arch.with_blocks(self.model.block_assignment.clone())
        }
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>> {
        if self.experiment.strategies.is_empty() {
            return Err(Error::Config("experiment.strategies must not be empty".into()));
        }
        self.experiment.strategies.iter().map(|s| s.parse()).collect()
    }

    pub fn criterion(&self) -> Result<Criterion> {
        self.selection.criterion.parse()
    }

    pub fn top_k(&self) -> Result<TopK> {
        match (self.selection.k, self.selection.k_fraction) {
            (Some(_), Some(_)) => Err(Error::Config("set selection.k or selection.k_fraction, not both".into())),
            (Some(k), None) => Ok(TopK::Count(k)),
            (None, Some(f)) => Ok(TopK::Fraction(f)),
            (None, None) => Err(Error::Config("selection.k or selection.k_fraction is required".into())),
        }
    }

    fn band(&self, band: &Band) -> Result<Vec<f64>> {
        if band.start > band.end || band.end > self.data.dim {
            return Err(Error::Config(format!(
                "band {}..{} does not fit {} dims",
                band.start, band.end, self.data.dim
            )));
        }
        Ok(on_dims(self.data.dim, band.start..band.end, band.magnitude))
    }

    pub fn real_spec(&self) -> Result<DomainSpec> {
        Ok(DomainSpec {
            domain: crate::data::Domain::Real,
            n_per_target: self.data.n_per_target,
            bias_ratio: self.data.bias_ratio,
            signal_mean: self.band(&self.data.signal)?,
            spurious_mean: self.band(&self.data.spurious)?,
            domain_shift: vec![0.0; self.data.dim],
            noise_sigma: self.data.noise_sigma,
        })
    }

    pub fn triplet_spec(&self, bias_ratio_s1: f64, syn_size_ratio: f64) -> Result<TripletSpec> {
        Ok(TripletSpec {
            real: self.real_spec()?,
            synthetic_shift: self.band(&self.data.domain_shift)?,
            bias_ratio_s1,
            syn_size_ratio,
        })
    }

    /// Train configs for one experiment seed. Pretraining and fine-tuning get
    /// independent child seeds.
    pub fn run_configs(&self, seed: u64) -> Result<RunConfigs> {
        Ok(RunConfigs {
            pretrain: TrainConfig::new(
                self.pretrain.learning_rate,
                self.pretrain.epochs,
                self.pretrain.batch_size,
                derive_seed(seed, "pretrain"),
            )
            .with_schedule(self.pretrain.schedule.clone()),
            finetune: TrainConfig::new(
                self.finetune.lr_grid[0],
                self.finetune.epochs,
                self.finetune.batch_size,
                derive_seed(seed, "finetune"),
            ),
            lr_grid: self.finetune.lr_grid.clone(),
            val_fraction: self.finetune.val_fraction,
            criterion: self.criterion()?,
            top_k: self.top_k()?,
        })
    }
}

/// One generated dataset as recorded in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub rows: usize,
    pub fingerprint: String,
    pub spec: DomainSpec,
    pub seed: u64,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub experiment_seed: u64,
    pub config_hash: String,
    pub datasets: Vec<ManifestEntry>,
}

/// Every dataset an experiment seed needs.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub triplet: Triplet,
    pub test: Dataset,
    pub repair_pool: Dataset,
    pub manifest: DataManifest,
}

/// Generates the triplet, the balanced test set and the repairing pool.
pub fn generate_seed_data(
    cfg: &ExperimentConfig,
    spec: &TripletSpec,
    seed: u64,
) -> Result<SeedData> {
    let data_seed = derive_seed(seed, "data");
    let triplet = generate_triplet(spec, data_seed)?;

    let test_seed = derive_seed(data_seed, "test");
    let test_per_cell = cfg.data.n_test / NUM_CELLS;
    let test = generate_balanced_dataset(&spec.real, test_per_cell, test_seed)?;

    let pool_seed = derive_seed(data_seed, "repair_pool");
    let pool_spec = spec.synthetic_spec(0.5);
    let pool_per_cell = triplet.real.cell_counts().into_iter().max().unwrap_or(1).max(1);
    let repair_pool = generate_balanced_dataset(&pool_spec, pool_per_cell, pool_seed)?;

    let entry = |file: &str, d: &Dataset, spec: &DomainSpec, seed: u64, role: String| ManifestEntry {
        file: file.into(),
        rows: d.len(),
        fingerprint: d.fingerprint.clone(),
        spec: spec.clone(),
        seed,
        role,
    };
    let manifest = DataManifest {
        experiment_seed: seed,
        config_hash: cfg.hash(),
        datasets: vec![
            entry("real.csv", &triplet.real, &spec.real, derive_seed(data_seed, "real"), "bernoulli".into()),
            entry(
                "synthetic_biased.csv",
                &triplet.synthetic_biased,
                &spec.synthetic_spec(spec.bias_ratio_s1),
                derive_seed(data_seed, "synthetic_biased"),
                "bernoulli".into(),
            ),
            entry(
                "synthetic_balanced.csv",
                &triplet.synthetic_balanced,
                &spec.synthetic_spec(0.5),
                derive_seed(data_seed, "synthetic_balanced"),
                format!("balanced:{}", spec.balanced_per_cell()),
            ),
            entry("test.csv", &test, &spec.real, test_seed, format!("balanced:{test_per_cell}")),
        ],
    };
    Ok(SeedData { triplet, test, repair_pool, manifest })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_seed_data(dir: &Path, data: &SeedData) -> Result<()> {
    create_dir(dir)?;
    let t = &data.triplet;
    for (file, d) in [
        ("real.csv", &t.real),
        ("synthetic_biased.csv", &t.synthetic_biased),
        ("synthetic_balanced.csv", &t.synthetic_balanced),
        ("test.csv", &data.test),
    ] {
        write_csv_dataset(&dir.join(file), d)?;
    }
    write_json(&dir.join("manifest.json"), &data.manifest)
}

/// Writes the four datasets and a manifest for one experiment seed.
pub fn cmd_gen_data(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<DataManifest> {
    cfg.validate()?;
    let spec = cfg.triplet_spec(cfg.data.bias_ratio_s1, cfg.data.syn_size_ratio)?;
    let data = generate_seed_data(cfg, &spec, seed)?;
    write_seed_data(out, &data)?;
    Ok(data.manifest)
}

/// Ablation axes of `sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Topk,
    BiasRatio,
    SynAmount,
    LayerFreeze,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Topk => "topk",
            SweepAxis::BiasRatio => "bias_ratio",
            SweepAxis::SynAmount => "syn_amount",
            SweepAxis::LayerFreeze => "layer_freeze",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(SweepAxis::Topk),
            "bias_ratio" => Ok(SweepAxis::BiasRatio),
            "syn_amount" => Ok(SweepAxis::SynAmount),
            "layer_freeze" => Ok(SweepAxis::LayerFreeze),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// One value along a sweep axis, or the single point of a plain run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: Option<SweepAxis>,
    pub value: f64,
    pub label: String,
    #[serde(skip)]
    strategies: Vec<Strategy>,
    #[serde(skip)]
    bias_ratio_s1: f64,
    #[serde(skip)]
    syn_size_ratio: f64,
    #[serde(skip)]
    top_k: Option<TopK>,
}

fn format_value(v: f64) -> String {
    format!("{v}")
}

fn sweep_points(cfg: &ExperimentConfig, axis: Option<SweepAxis>) -> Result<Vec<SweepPoint>> {
    let strategies = cfg.strategies()?;
    let base = SweepPoint {
        axis,
        value: 0.0,
        label: "main".into(),
        strategies: strategies.clone(),
        bias_ratio_s1: cfg.data.bias_ratio_s1,
        syn_size_ratio: cfg.data.syn_size_ratio,
        top_k: None,
    };
    let Some(axis) = axis else {
        return Ok(vec![base]);
    };
    let at = |value: f64| SweepPoint {
        value,
        label: format!("{}_{}", axis.as_str(), format_value(value)),
        ..base.clone()
    };
    let points: Vec<SweepPoint> = match axis {
        SweepAxis::Topk => cfg
            .sweep
            .topk
            .iter()
            .map(|&k| SweepPoint { top_k: Some(TopK::Count(k)), ..at(k as f64) })
            .collect(),
        SweepAxis::BiasRatio => cfg
            .sweep
            .bias_ratio
            .iter()
            .map(|&b| SweepPoint { bias_ratio_s1: b, ..at(b) })
            .collect(),
        SweepAxis::SynAmount => cfg
            .sweep
            .syn_amount
            .iter()
            .map(|&r| SweepPoint { syn_size_ratio: r, ..at(r) })
            .collect(),
        SweepAxis::LayerFreeze => (0..cfg.arch().num_blocks())
            .map(|b| SweepPoint {
                strategies: vec![Strategy::BlockFreeze { block: b }, Strategy::BlockUpdate { block: b }],
                ..at(b as f64)
            })
            .collect(),
    };
    if points.is_empty() {
        return Err(Error::Config(format!("sweep axis {} has no values", axis.as_str())));
    }
    if let SweepAxis::Topk = axis {
        let g = cfg.arch().num_groups();
        for p in &points {
            p.top_k.expect("topk points carry k").resolve(g)?;
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Ok {
        report: Box<FlatReport>,
        /// Groups selected by the fine-tune mask, when there is one.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        selected_groups: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parameter_fraction: Option<f64>,
    },
    Failed {
        error: String,
        hint: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub point: String,
    pub strategy: String,
    pub seed: u64,
    #[serde(flatten)]
    pub status: RunStatus,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub acc: f64,
    pub wst: f64,
    pub eo: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: String,
    pub axis_value: f64,
    pub strategy: String,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub mean: Option<MetricSummary>,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std_dev: Option<MetricSummary>,
    pub median: Option<MetricSummary>,
    /// Mean fraction of scalar parameters updated, for masked strategies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub config_hash: String,
    pub tool_version: String,
    pub axis: Option<SweepAxis>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunEntry>,
}

impl SweepReport {
    pub fn failures(&self) -> impl Iterator<Item = &RunEntry> {
        self.runs.iter().filter(|r| matches!(r.status, RunStatus::Failed { .. }))
    }

    pub fn has_failures(&self) -> bool {
        self.failures().next().is_some()
    }

    pub fn row(&self, point: &str, strategy: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.point == point && r.strategy == strategy)
    }

    /// `axis,x,strategy,acc_mean,acc_std,...,seeds_ok,seeds_failed`.
    pub fn to_csv(&self) -> String {
        let axis = self.metadata.axis.map_or("none", SweepAxis::as_str);
        let mut out = String::from(
            "axis,x,strategy,acc_mean,acc_std,wst_mean,wst_std,eo_mean,eo_std,std_mean,std_std,parameter_fraction,seeds_ok,seeds_failed\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let m = r.mean;
            let s = r.std_dev;
            let _ = writeln!(
                out,
                "{axis},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.axis_value,
                r.strategy,
                opt(m.map(|m| m.acc)),
                opt(s.map(|s| s.acc)),
                opt(m.map(|m| m.wst)),
                opt(s.map(|s| s.wst)),
                opt(m.map(|m| m.eo)),
                opt(s.map(|s| s.eo)),
                opt(m.map(|m| m.std)),
                opt(s.map(|s| s.std)),
                opt(r.parameter_fraction),
                r.seeds_ok,
                r.seeds_failed,
            );
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

fn summarize(reports: &[&FlatReport]) -> (MetricSummary, MetricSummary, MetricSummary) {
    let pick = |f: fn(&FlatReport) -> f64| -> Vec<f64> { reports.iter().map(|r| f(r)).collect() };
    let cols = [pick(|r| r.acc), pick(|r| r.wst), pick(|r| r.eo), pick(|r| r.std)];
    let stat = |g: &dyn Fn(&[f64]) -> f64| MetricSummary {
        acc: g(&cols[0]),
        wst: g(&cols[1]),
        eo: g(&cols[2]),
        std: g(&cols[3]),
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sd = |v: &[f64]| {
        if v.len() < 2 {
            return 0.0;
        }
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    (stat(&mean), stat(&sd), stat(&median))
}

/// Directory-safe strategy name.
fn strategy_dir(s: &Strategy) -> String {
    s.to_string().replace([':', '.'], "_")
}

fn failure_hint(err: &Error) -> Option<String> {
    match err {
        Error::EmptyMask { .. } => Some("raise k so the two top-k sets intersect".into()),
        Error::UndefinedStratum { .. } => Some("enlarge the test set so every (s, y) cell is populated".into()),
        _ => None,
    }
}

struct JobResult {
    entries: Vec<RunEntry>,
}

fn persist_run(
    dir: &Path,
    model: &Model,
    record: &RunRecord,
    report: &FairnessReport,
) -> Result<()> {
    create_dir(dir)?;
    model.save_json(&dir.join("model.json"))?;
    if let Some(mask) = &record.mask {
        mask.save(&dir.join("mask.txt"))?;
    }
    #[derive(Serialize)]
    struct Persisted<'a> {
        record: &'a RunRecord,
        report: FlatReport,
    }
    write_json(&dir.join("record.json"), &Persisted { record, report: report.to_flat() })?;
    write_json(&dir.join("report.json"), &report.to_flat())
}

/// Every strategy of one point for one seed; the pretrained model is shared.
fn run_job(
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    seed: u64,
    out: Option<&Path>,
) -> Result<JobResult> {
    let arch = cfg.arch();
    let spec = cfg.triplet_spec(point.bias_ratio_s1, point.syn_size_ratio)?;
    let data = generate_seed_data(cfg, &spec, seed)?;
    let seed_dir = out.map(|o| o.join(&point.label).join(format!("seed_{seed}")));
    if let Some(dir) = &seed_dir {
        write_seed_data(&dir.join("data"), &data)?;
    }
    let mut configs = cfg.run_configs(seed)?;
    if let Some(k) = point.top_k {
        configs.top_k = k;
    }
    let strategy_data = StrategyData {
        triplet: &data.triplet,
        test: &data.test,
        repair_pool: Some(&data.repair_pool),
    };
    let needs_pretrain = point.strategies.iter().any(Strategy::is_finetune);
    let pretrained = if needs_pretrain {
        Some(pretrain(&arch, &data.triplet.real, &configs.pretrain)?)
    } else {
        None
    };

    let group_sizes = arch
        .layer_dims()
        .iter()
        .flat_map(|&(i, o)| [i * o, o])
        .collect::<Vec<_>>();
    let mut entries = Vec::with_capacity(point.strategies.len());
    for strategy in &point.strategies {
        let outcome = run_strategy_from(
            pretrained.as_ref().map(|(m, r)| (m, r)),
            *strategy,
            &strategy_data,
            &arch,
            &configs,
        );
        let status = match outcome {
            Ok(mut o) => {
                if let Some(dir) = &seed_dir {
                    let run_dir = dir.join(strategy_dir(strategy));
                    o.record.final_model_ref = Some(format!(
                        "{}/seed_{seed}/{}/model.json",
                        point.label,
                        strategy_dir(strategy)
                    ));
                    o.report.fingerprint = Some(cfg.hash());
                    persist_run(&run_dir, &o.model, &o.record, &o.report)?;
                }
                let mask: Option<&SelectionMask> = o.record.mask.as_ref();
                RunStatus::Ok {
                    report: Box::new(o.report.to_flat()),
                    selected_groups: mask.map(SelectionMask::count_selected),
                    k: mask.and_then(|m| m.k),
                    parameter_fraction: mask.map(|m| m.parameter_fraction(&group_sizes)),
                }
            }
            Err(e) if e.is_config() && !matches!(e, Error::EmptyMask { .. }) => return Err(e),
            Err(e) => RunStatus::Failed {
                hint: failure_hint(&e),
                error: e.to_string(),
            },
        };
        entries.push(RunEntry {
            point: point.label.clone(),
            strategy: strategy.to_string(),
            seed,
            status,
        });
    }
    Ok(JobResult { entries })
}

fn aggregate(points: &[SweepPoint], runs: &[RunEntry]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for p in points {
        for s in &p.strategies {
            let name = s.to_string();
            let mine: Vec<&RunEntry> = runs
                .iter()
                .filter(|r| r.point == p.label && r.strategy == name)
                .collect();
            let mut ok = Vec::new();
            let mut fractions = Vec::new();
            for r in &mine {
                if let RunStatus::Ok { report, parameter_fraction, .. } = &r.status {
                    ok.push(&**report);
                    fractions.extend(parameter_fraction);
                }
            }
            let (mean, std_dev, med) = if ok.is_empty() {
                (None, None, None)
            } else {
                let (a, b, c) = summarize(&ok);
                (Some(a), Some(b), Some(c))
            };
            rows.push(SweepRow {
                point: p.label.clone(),
                axis_value: p.value,
                strategy: name,
                seeds_ok: ok.len(),
                seeds_failed: mine.len() - ok.len(),
                mean,
                std_dev,
                median: med,
                parameter_fraction: (!fractions.is_empty())
                    .then(|| fractions.iter().sum::<f64>() / fractions.len() as f64),
            });
        }
    }
    rows
}

fn execute(
    cfg: &ExperimentConfig,
    axis: Option<SweepAxis>,
    out: Option<&Path>,
) -> Result<SweepReport> {
    cfg.validate()?;
    let points = sweep_points(cfg, axis)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        #[derive(Serialize)]
        struct Resolved<'a> {
            config_hash: String,
            config: &'a ExperimentConfig,
        }
        write_json(&dir.join("config.json"), &Resolved { config_hash: cfg.hash(), config: cfg })?;
    }
    let jobs: Vec<(&SweepPoint, u64)> = points
        .iter()
        .flat_map(|p| cfg.experiment.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let run = || -> Vec<Result<JobResult>> {
        jobs.par_iter().map(|&(p, s)| run_job(cfg, p, s, out)).collect()
    };
    let results = if cfg.experiment.workers <= 1 {
        jobs.iter().map(|&(p, s)| run_job(cfg, p, s, out)).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.experiment.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(run)
    };
    let mut runs = Vec::new();
    for r in results {
        runs.extend(r?.entries);
    }
    let report = SweepReport {
        metadata: ReportMetadata {
            config_hash: cfg.hash(),
            tool_version: TOOL_VERSION.into(),
            axis,
            seeds: cfg.experiment.seeds.clone(),
        },
        rows: aggregate(&points, &runs),
        runs,
    };
    if let Some(dir) = out {
        write_json(&dir.join("report.json"), &report)?;
        fs::write(dir.join("summary.csv"), report.to_csv()).map_err(|e| Error::io(dir, e))?;
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        write_json(
            &dir.join("run_info.json"),
            &serde_json::json!({ "timestamp_unix": stamp, "tool_version": TOOL_VERSION }),
        )?;
    }
    Ok(report)
}

/// Runs every configured (strategy, seed) pair. Per-run failures are recorded
/// in the report; configuration errors abort.
pub fn cmd_run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SweepReport> {
    execute(cfg, None, out)
}

/// Repeats the run grid at every value of `axis`.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, out: Option<&Path>) -> Result<SweepReport> {
    execute(cfg, Some(axis), out)
}

/// Scores a serialized model on a CSV dataset.
pub fn cmd_eval(model_path: &Path, data_path: &Path) -> Result<FairnessReport> {
    let model = Model::load_json(model_path)?;
    let data = load_csv_dataset(data_path, None)?;
    let preds = net::predict(&model, &data.examples)?;
    let mut report = crate::metrics::evaluate(&preds, &data)?;
    report.fingerprint = Some(data.fingerprint);
    Ok(report)
}

/// Selection mask from a serialized model and the three reference datasets.
pub fn cmd_mask(
    model_path: &Path,
    real: &Path,
    synthetic_biased: &Path,
    synthetic_balanced: &Path,
    criterion: Criterion,
    top_k: TopK,
) -> Result<(SelectionMask, crate::mask::SensitivityScores)> {
    let model = Model::load_json(model_path)?;
    let load = |p: &Path| load_csv_dataset(p, None);
    let triplet = Triplet {
        real: load(real)?,
        synthetic_biased: load(synthetic_biased)?,
        synthetic_balanced: load(synthetic_balanced)?,
    };
    let k = top_k.resolve(model.num_groups())?;
    let (mask, scores) = crate::train::smg_mask(&model, &triplet, criterion, k)?;
    Ok((mask, scores))
}

/// Output directory: explicit flag, then the environment override, then the config.
pub fn resolve_output_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUTPUT_DIR_ENV) {
        return PathBuf::from(p);
    }
    cfg.experiment.output_dir.clone()
}

/// Collects every `(seed, strategy)` report of a point into a map, for tests and tools.
pub fn reports_by_strategy(report: &SweepReport, point: &str) -> BTreeMap<String, Vec<FlatReport>> {
    let mut out: BTreeMap<String, Vec<FlatReport>> = BTreeMap::new();
    for r in &report.runs {
        if r.point != point {
            continue;
        }
        if let RunStatus::Ok { report, .. } = &r.status {
            out.entry(r.strategy.clone()).or_default().push((**report).clone());
        }
    }
    out
}
