//! Pretraining, masked fine-tuning and the baseline training strategies.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{compose_training_set, derive_seed, ComposeMode, Dataset, Triplet};
use crate::error::{Error, Result};
use crate::mask::{
    random_mask, rank_scores, select_topk_intersection, sensitivity_scores, structural_mask,
    Criterion, SelectionMask, SensitivityScores, StructuralSelector,
};
use crate::metrics::{evaluate, FairnessReport};
use crate::net::{self, init_model, mean_gradient, DatasetTag, Model, ModelArch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `(epoch, multiplier)`: from `epoch` (0-based) on, the rate is further
    /// multiplied by `multiplier`.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(learning_rate: f64, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            epochs,
            batch_size,
            lr_schedule: Vec::new(),
            seed,
            shuffle: true,
        }
    }

    pub fn with_schedule(mut self, schedule: Vec<(usize, f64)>) -> Self {
        self.lr_schedule = schedule;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Five-epoch ERM probe used for error-set bias estimates.
    pub fn probe(seed: u64) -> Self {
        Self::new(0.1, 5, 64, seed)
    }

    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.batch_size > dataset_len {
            return Err(Error::Config(format!(
                "batch_size {} exceeds dataset size {dataset_len}",
                self.batch_size
            )));
        }
        for &(epoch, mult) in &self.lr_schedule {
            if epoch >= self.epochs {
                return Err(Error::Config(format!(
                    "schedule epoch {epoch} is outside 0..{}",
                    self.epochs
                )));
            }
            if !(mult >= 0.0 && mult.is_finite()) {
                return Err(Error::Config(format!("schedule multiplier {mult} is invalid")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.learning_rate, |lr, (_, m)| lr * m)
    }
}

/// Mini-batch SGD restricted to `mask`. Returns the mean training loss of
/// every epoch (averaged over examples, measured before each batch update).
pub fn train_masked(
    model: &mut Model,
    data: &Dataset,
    mask: &SelectionMask,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    config.validate(data.len())?;
    if mask.len() != model.num_groups() {
        return Err(Error::Shape(format!(
            "mask has {} entries for {} groups",
            mask.len(),
            model.num_groups()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let lr = config.lr_at(epoch);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let grads =
                net::mean_gradient_of(model, batch.iter().map(|&i| &data.examples[i]))?;
            total += grads.mean_loss * batch.len() as f64;
            if lr > 0.0 {
                model.update_in_place(&grads, lr, mask)?;
            }
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum Strategy {
    ErmReal,
    SyntheticOnly,
    Supplementation,
    Repairing,
    LinearProbe,
    FullFinetune,
    RandomFinetune { fraction: f64 },
    BlockUpdate { block: usize },
    BlockFreeze { block: usize },
    /// `k = None` defers to the run configuration.
    SelectiveFinetune { k: Option<usize> },
}

impl Strategy {
    pub fn kind(&self) -> &'static str {
        match self {
            Strategy::ErmReal => "erm_real",
            Strategy::SyntheticOnly => "synthetic_only",
            Strategy::Supplementation => "supplementation",
            Strategy::Repairing => "repairing",
            Strategy::LinearProbe => "linear_probe",
            Strategy::FullFinetune => "full_finetune",
            Strategy::RandomFinetune { .. } => "random_finetune",
            Strategy::BlockUpdate { .. } => "block_update",
            Strategy::BlockFreeze { .. } => "block_freeze",
            Strategy::SelectiveFinetune { .. } => "selective_finetune",
        }
    }

    pub fn is_finetune(&self) -> bool {
        matches!(
            self,
            Strategy::LinearProbe
                | Strategy::FullFinetune
                | Strategy::RandomFinetune { .. }
                | Strategy::BlockUpdate { .. }
                | Strategy::BlockFreeze { .. }
                | Strategy::SelectiveFinetune { .. }
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::RandomFinetune { fraction } => write!(f, "random_finetune:{fraction}"),
            Strategy::BlockUpdate { block } => write!(f, "block_update:{block}"),
            Strategy::BlockFreeze { block } => write!(f, "block_freeze:{block}"),
            Strategy::SelectiveFinetune { k: Some(k) } => write!(f, "selective_finetune:{k}"),
            other => f.write_str(other.kind()),
        }
    }
}

/// Parses `name` or `name:param`, e.g. `block_freeze:1`, `random_finetune:0.55`,
/// `selective_finetune:4`.
impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n.trim(), Some(p.trim())),
            None => (s.trim(), None),
        };
        let bad = |what: &str| Error::Config(format!("strategy {s:?}: {what}"));
        let int = |p: Option<&str>| -> Result<usize> {
            p.ok_or_else(|| bad("missing parameter"))?
                .parse()
                .map_err(|_| bad("expected an integer parameter"))
        };
        let no_param = |v: Strategy| if param.is_some() { Err(bad("takes no parameter")) } else { Ok(v) };
        match name {
            "erm_real" => no_param(Strategy::ErmReal),
            "synthetic_only" => no_param(Strategy::SyntheticOnly),
            "supplementation" => no_param(Strategy::Supplementation),
            "repairing" => no_param(Strategy::Repairing),
            "linear_probe" => no_param(Strategy::LinearProbe),
            "full_finetune" => no_param(Strategy::FullFinetune),
            "random_finetune" => {
                let fraction = param
                    .ok_or_else(|| bad("missing fraction"))?
                    .parse()
                    .map_err(|_| bad("expected a fraction"))?;
                Ok(Strategy::RandomFinetune { fraction })
            }
            "block_update" => Ok(Strategy::BlockUpdate { block: int(param)? }),
            "block_freeze" => Ok(Strategy::BlockFreeze { block: int(param)? }),
            "selective_finetune" => Ok(Strategy::SelectiveFinetune {
                k: param.map(|_| int(param)).transpose()?,
            }),
            _ => Err(bad("unknown strategy")),
        }
    }
}

/// How the selective strategy picks k when the strategy itself does not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum TopK {
    Count(usize),
    /// Fraction of parameter groups, rounded to the nearest count (at least 1).
    Fraction(f64),
}

impl TopK {
    pub fn resolve(self, num_groups: usize) -> Result<usize> {
        let k = match self {
            TopK::Count(k) => k,
            TopK::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!("k fraction must be in (0, 1], got {f}")));
                }
                ((f * num_groups as f64).round() as usize).max(1)
            }
        };
        if k == 0 || k > num_groups {
            return Err(Error::Config(format!("k must be in [1, {num_groups}], got {k}")));
        }
        Ok(k)
    }
}

/// Every knob a strategy run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfigs {
    pub pretrain: TrainConfig,
    /// Fine-tune settings; `learning_rate` is replaced by each `lr_grid` entry.
    pub finetune: TrainConfig,
    pub lr_grid: Vec<f64>,
    /// Fraction of each balanced-synthetic cell held out to score the lr grid.
    pub val_fraction: f64,
    pub criterion: Criterion,
    pub top_k: TopK,
}

impl RunConfigs {
    /// Pretrain 15 epochs at 0.1 (x0.01 from epoch 10), fine-tune 10 epochs
    /// with lr in {0.4, 0.5, 0.6}, 10% validation split, k = 5.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            pretrain: TrainConfig::new(0.1, 15, 128, derive_seed(seed, "pretrain"))
                .with_schedule(vec![(10, 0.01)]),
            finetune: TrainConfig::new(0.5, 10, 128, derive_seed(seed, "finetune")),
            lr_grid: vec![0.4, 0.5, 0.6],
            val_fraction: 0.1,
            criterion: Criterion::AbsoluteDifference,
            top_k: TopK::Count(5),
        }
    }
}

/// Datasets a strategy may draw on.
#[derive(Debug, Clone)]
pub struct StrategyData<'a> {
    pub triplet: &'a Triplet,
    /// Balanced real-domain evaluation set.
    pub test: &'a Dataset,
    /// Synthetic pool for the repairing baseline.
    pub repair_pool: Option<&'a Dataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub pretrain_config: Option<TrainConfig>,
    pub finetune_config: Option<TrainConfig>,
    pub mask: Option<SelectionMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<SensitivityScores>,
    /// Per-epoch loss of the pretraining stage, when there is one.
    #[serde(default)]
    pub pretrain_loss: Vec<f64>,
    /// Per-epoch loss of the last training stage.
    pub per_epoch_loss: Vec<f64>,
    /// Validation EO of each lr in the grid, in grid order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lr_search: Vec<(f64, Option<f64>)>,
    #[serde(default)]
    pub final_model_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunRecord {
    fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            pretrain_config: None,
            finetune_config: None,
            mask: None,
            scores: None,
            pretrain_loss: Vec::new(),
            per_epoch_loss: Vec::new(),
            lr_search: Vec::new(),
            final_model_ref: None,
            notes: Vec::new(),
        }
    }
}

/// ERM from a fresh initialization seeded by `config.seed`.
pub fn pretrain(arch: &ModelArch, data: &Dataset, config: &TrainConfig) -> Result<(Model, RunRecord)> {
    config.validate(data.len())?;
    let mut model = init_model(arch, derive_seed(config.seed, "init"))?;
    let all = SelectionMask::all(model.num_groups());
    let losses = train_masked(&mut model, data, &all, config)?;
    let mut record = RunRecord::new(Strategy::ErmReal);
    record.pretrain_config = Some(config.clone());
    record.per_epoch_loss = losses;
    Ok((model, record))
}

/// Fine-tunes only the groups selected by `mask`; the rest keep their exact
/// pretrained bits. An all-false mask is rejected.
pub fn selective_finetune(
    model: &Model,
    balanced: &Dataset,
    mask: &SelectionMask,
    config: &TrainConfig,
) -> Result<(Model, RunRecord)> {
    if !mask.any_selected() {
        return Err(Error::EmptyMask { k: mask.k.unwrap_or(0) });
    }
    let mut record = RunRecord::new(Strategy::SelectiveFinetune { k: mask.k });
    let counts = balanced.cell_counts();
    if counts.iter().any(|&c| c != counts[0]) {
        record
            .notes
            .push(format!("fine-tune set is not balanced: cell counts {counts:?}"));
    }
    let mut tuned = model.clone();
    record.per_epoch_loss = train_masked(&mut tuned, balanced, mask, config)?;
    record.finetune_config = Some(config.clone());
    record.mask = Some(mask.clone());
    Ok((tuned, record))
}

/// Three snapshots at the same parameters, then the top-k intersection mask.
pub fn smg_mask(
    model: &Model,
    triplet: &Triplet,
    criterion: Criterion,
    k: usize,
) -> Result<(SelectionMask, SensitivityScores)> {
    let g_r = mean_gradient(model, &triplet.real.examples)?.tagged(DatasetTag::RealBiased);
    let g_s1 =
        mean_gradient(model, &triplet.synthetic_biased.examples)?.tagged(DatasetTag::SyntheticBiased);
    let g_s2 = mean_gradient(model, &triplet.synthetic_balanced.examples)?
        .tagged(DatasetTag::SyntheticBalanced);
    let scores = sensitivity_scores(&g_r, &g_s1, &g_s2, criterion)?;
    let mask = select_topk_intersection(&rank_scores(&scores), k)?;
    Ok((mask, scores))
}

/// Batch size for a fine-tune set: the configured size capped at `N / 10`.
fn finetune_batch(config: &TrainConfig, n: usize) -> usize {
    config.batch_size.min(n / 10).max(1)
}

fn report_for(model: &Model, test: &Dataset) -> Result<FairnessReport> {
    evaluate(&net::predict(model, &test.examples)?, test)
}

/// Fine-tunes with each lr in the grid on the training part of the balanced
/// set and keeps the one with the lowest validation EO (first wins on ties).
fn finetune_with_search(
    pretrained: &Model,
    balanced: &Dataset,
    mask: &SelectionMask,
    configs: &RunConfigs,
) -> Result<(Model, RunRecord)> {
    if configs.lr_grid.is_empty() {
        return Err(Error::Config("lr_grid is empty".into()));
    }
    let (train, val) =
        balanced.split_stratified(configs.val_fraction, derive_seed(configs.finetune.seed, "val_split"))?;
    let mut config = configs.finetune.clone();
    config.batch_size = finetune_batch(&config, train.len());

    let mut best: Option<(f64, Model, RunRecord)> = None;
    let mut search = Vec::with_capacity(configs.lr_grid.len());
    for &lr in &configs.lr_grid {
        config.learning_rate = lr;
        let (model, record) = selective_finetune(pretrained, &train, mask, &config)?;
        let val_eo = if val.is_empty() {
            None
        } else {
            report_for(&model, &val).ok().map(|r| r.eo)
        };
        search.push((lr, val_eo));
        let key = val_eo.unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| key < *b) {
            best = Some((key, model, record));
        }
    }
    let (_, model, mut record) = best.expect("grid is non-empty");
    record.lr_search = search;
    Ok((model, record))
}

pub struct StrategyOutcome {
    pub model: Model,
    pub record: RunRecord,
    pub report: FairnessReport,
}

/// Runs a strategy end to end and scores it on the test set. Fine-tuning
/// strategies pretrain on the real data first.
pub fn run_strategy(
    strategy: Strategy,
    data: &StrategyData<'_>,
    arch: &ModelArch,
    configs: &RunConfigs,
) -> Result<StrategyOutcome> {
    run_strategy_from(None, strategy, data, arch, configs)
}

/// [`run_strategy`] with an optional pretrained model reused by fine-tuning
/// strategies. The model must come from `pretrain(arch, real, configs.pretrain)`.
pub fn run_strategy_from(
    pretrained: Option<(&Model, &RunRecord)>,
    strategy: Strategy,
    data: &StrategyData<'_>,
    arch: &ModelArch,
    configs: &RunConfigs,
) -> Result<StrategyOutcome> {
    let t = data.triplet;
    let (model, mut record) = match strategy {
        Strategy::ErmReal => pretrain(arch, &t.real, &configs.pretrain)?,
        Strategy::SyntheticOnly => pretrain(arch, &t.synthetic_balanced, &configs.pretrain)?,
        Strategy::Supplementation => {
            let mixed = compose_training_set(ComposeMode::Supplementation, &t.real, &t.synthetic_balanced)?;
            pretrain(arch, &mixed, &configs.pretrain)?
        }
        Strategy::Repairing => {
            let pool = data.repair_pool.ok_or_else(|| {
                Error::Config("repairing needs a synthetic repair pool".into())
            })?;
            let repaired = compose_training_set(ComposeMode::Repairing, &t.real, pool)?;
            pretrain(arch, &repaired, &configs.pretrain)?
        }
        _ => {
            let owned;
            let (base, base_record) = match pretrained {
                Some((m, r)) => (m, r),
                None => {
                    owned = pretrain(arch, &t.real, &configs.pretrain)?;
                    (&owned.0, &owned.1)
                }
            };
            let mut scores = None;
            let mask = match strategy {
                Strategy::LinearProbe => structural_mask(arch, StructuralSelector::LinearProbe)?,
                Strategy::FullFinetune => SelectionMask::all(arch.num_groups()),
                Strategy::RandomFinetune { fraction } => random_mask(
                    arch.num_groups(),
                    fraction,
                    derive_seed(configs.finetune.seed, "random_mask"),
                )?,
                Strategy::BlockUpdate { block } => {
                    structural_mask(arch, StructuralSelector::UpdateBlock(block))?
                }
                Strategy::BlockFreeze { block } => {
                    structural_mask(arch, StructuralSelector::FreezeBlock(block))?
                }
                Strategy::SelectiveFinetune { k } => {
                    let k = match k {
                        Some(k) => TopK::Count(k),
                        None => configs.top_k,
                    }
                    .resolve(arch.num_groups())?;
                    let (mask, s) = smg_mask(base, t, configs.criterion, k)?;
                    scores = Some(s);
                    mask
                }
                _ => unreachable!("non-finetune strategies handled above"),
            };
            if !mask.any_selected() {
                return Err(Error::EmptyMask { k: mask.k.unwrap_or(0) });
            }
            let (model, mut record) = finetune_with_search(base, &t.synthetic_balanced, &mask, configs)?;
            record.pretrain_config = base_record.pretrain_config.clone();
            record.pretrain_loss = base_record.per_epoch_loss.clone();
            record.scores = scores;
            (model, record)
        }
    };
    record.strategy = strategy;
    if !strategy.is_finetune() {
        record.pretrain_loss = record.per_epoch_loss.clone();
    }
    let report = report_for(&model, data.test)?;
    Ok(StrategyOutcome { model, record, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DomainSpec, TripletSpec, generate_balanced_dataset, generate_triplet};

    fn small_triplet(seed: u64) -> (Triplet, Dataset) {
        let real = DomainSpec {
            n_per_target: 200,
            ..DomainSpec::default_real(0.9)
        };
        let spec = TripletSpec::new(real.clone(), 0.9);
        let t = generate_triplet(&spec, seed).unwrap();
        let test = generate_balanced_dataset(&real, 50, derive_seed(seed, "test")).unwrap();
        (t, test)
    }

    fn quick_configs(seed: u64) -> RunConfigs {
        RunConfigs {
            pretrain: TrainConfig::new(0.1, 4, 32, derive_seed(seed, "pre")),
            finetune: TrainConfig::new(0.4, 2, 32, derive_seed(seed, "ft")),
            lr_grid: vec![0.2, 0.4],
            ..RunConfigs::desk_default(seed)
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::new(0.1, 0, 8, 1).validate(100).is_err());
        assert!(TrainConfig::new(0.1, 2, 0, 1).validate(100).is_err());
        assert!(TrainConfig::new(0.1, 2, 200, 1).validate(100).is_err());
        assert!(TrainConfig::new(-0.1, 2, 8, 1).validate(100).is_err());
        let c = TrainConfig::new(0.1, 2, 8, 1).with_schedule(vec![(2, 0.1)]);
        assert!(c.validate(100).is_err());
    }

    #[test]
    fn schedule_multipliers_compound() {
        let c = TrainConfig::new(0.01, 15, 8, 1).with_schedule(vec![(10, 0.01)]);
        assert_eq!(c.lr_at(9), 0.01);
        assert!((c.lr_at(10) - 1e-4).abs() < 1e-18);
        let c = TrainConfig::new(1.0, 5, 8, 1).with_schedule(vec![(1, 0.5), (3, 0.5)]);
        assert_eq!((c.lr_at(0), c.lr_at(2), c.lr_at(4)), (1.0, 0.5, 0.25));
    }

    #[test]
    fn strategy_parsing() {
        for s in [
            "erm_real",
            "synthetic_only",
            "supplementation",
            "repairing",
            "linear_probe",
            "full_finetune",
            "random_finetune:0.55",
            "block_update:1",
            "block_freeze:0",
            "selective_finetune",
            "selective_finetune:4",
        ] {
            let parsed: Strategy = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert!("erm_real:3".parse::<Strategy>().is_err());
        assert!("block_freeze".parse::<Strategy>().is_err());
        assert!("nope".parse::<Strategy>().is_err());
    }

    #[test]
    fn topk_resolution() {
        assert_eq!(TopK::Fraction(0.5).resolve(6).unwrap(), 3);
        assert_eq!(TopK::Fraction(0.01).resolve(6).unwrap(), 1);
        assert!(TopK::Count(7).resolve(6).is_err());
        assert!(TopK::Count(0).resolve(6).is_err());
    }

    #[test]
    fn zero_multiplier_leaves_model_unchanged() {
        let (t, _) = small_triplet(1);
        let (model, _) = pretrain(&ModelArch::default_desk(), &t.real, &TrainConfig::new(0.1, 2, 32, 3)).unwrap();
        let cfg = TrainConfig::new(0.5, 3, 32, 4).with_schedule(vec![(0, 0.0)]);
        let (tuned, rec) = selective_finetune(
            &model,
            &t.synthetic_balanced,
            &SelectionMask::all(model.num_groups()),
            &cfg,
        )
        .unwrap();
        assert_eq!(tuned, model);
        assert_eq!(rec.per_epoch_loss.len(), 3);
    }

    #[test]
    fn linear_probe_freezes_body() {
        let (t, _) = small_triplet(2);
        let arch = ModelArch::default_desk();
        let (model, _) = pretrain(&arch, &t.real, &TrainConfig::new(0.1, 2, 32, 3)).unwrap();
        let mask = structural_mask(&arch, StructuralSelector::LinearProbe).unwrap();
        let (tuned, _) =
            selective_finetune(&model, &t.synthetic_balanced, &mask, &TrainConfig::new(0.5, 10, 32, 4)).unwrap();
        assert_eq!(tuned.groups[..4], model.groups[..4]);
        assert_ne!(tuned.groups[4], model.groups[4]);
    }

    #[test]
    fn empty_mask_rejected() {
        let (t, _) = small_triplet(3);
        let model = init_model(&ModelArch::default_desk(), 1).unwrap();
        let err = selective_finetune(
            &model,
            &t.synthetic_balanced,
            &SelectionMask::none(6),
            &TrainConfig::new(0.5, 1, 32, 4),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyMask { .. }));
    }

    #[test]
    fn all_groups_selective_equals_full() {
        let (t, test) = small_triplet(4);
        let arch = ModelArch::default_desk();
        let configs = quick_configs(4);
        let data = StrategyData { triplet: &t, test: &test, repair_pool: None };
        let full = run_strategy(Strategy::FullFinetune, &data, &arch, &configs).unwrap();
        let sel = run_strategy(Strategy::SelectiveFinetune { k: Some(6) }, &data, &arch, &configs).unwrap();
        assert_eq!(full.model, sel.model);
        assert_eq!(full.report, sel.report);
        assert_eq!(sel.record.mask.unwrap().count_selected(), 6);
    }

    #[test]
    fn erm_real_is_pretrain_then_evaluate() {
        let (t, test) = small_triplet(5);
        let arch = ModelArch::default_desk();
        let configs = quick_configs(5);
        let data = StrategyData { triplet: &t, test: &test, repair_pool: None };
        let out = run_strategy(Strategy::ErmReal, &data, &arch, &configs).unwrap();
        let (model, _) = pretrain(&arch, &t.real, &configs.pretrain).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.report, report_for(&model, &test).unwrap());
        assert_eq!(out.record.per_epoch_loss.len(), configs.pretrain.epochs);
    }

    #[test]
    fn repairing_needs_pool() {
        let (t, test) = small_triplet(6);
        let data = StrategyData { triplet: &t, test: &test, repair_pool: None };
        let err = run_strategy(Strategy::Repairing, &data, &ModelArch::default_desk(), &quick_configs(6));
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
