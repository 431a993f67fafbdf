//! Gradient-sensitivity scoring and parameter-group selection masks.
//!
//! Each parameter group gets two scores from three mean-gradient snapshots
//! taken at the same parameters:
//!
//! * `delta1`: disagreement between real-biased and synthetic-biased gradients
//!   (domain sensitivity; small is preferred),
//! * `delta2`: disagreement between synthetic-biased and synthetic-balanced
//!   gradients (fairness sensitivity; large is preferred).
//!
//! The selected groups are the intersection of the top-k of both rankings.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{DatasetTag, GradientSnapshot, GroupRole, ModelArch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Mean element-wise absolute gradient difference per group.
    AbsoluteDifference,
    /// Cosine similarity of the flattened group gradients.
    CosineSimilarity,
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute_difference" => Ok(Criterion::AbsoluteDifference),
            "cosine_similarity" => Ok(Criterion::CosineSimilarity),
            other => Err(Error::Config(format!("unknown criterion {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityScores {
    pub delta1: Vec<f64>,
    pub delta2: Vec<f64>,
    pub criterion: Criterion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rankings {
    /// Group ids, least domain-sensitive first.
    pub r1: Vec<usize>,
    /// Group ids, most fairness-sensitive first.
    pub r2: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Smg,
    Random,
    BlockUpdate,
    BlockFreeze,
    LinearProbe,
    All,
    None,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Smg => "smg",
            Provenance::Random => "random",
            Provenance::BlockUpdate => "block_update",
            Provenance::BlockFreeze => "block_freeze",
            Provenance::LinearProbe => "linear_probe",
            Provenance::All => "all",
            Provenance::None => "none",
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "smg" => Provenance::Smg,
            "random" => Provenance::Random,
            "block_update" => Provenance::BlockUpdate,
            "block_freeze" => Provenance::BlockFreeze,
            "linear_probe" => Provenance::LinearProbe,
            "all" => Provenance::All,
            "none" => Provenance::None,
            other => return Err(Error::Serde(format!("unknown mask provenance {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub selected: Vec<bool>,
    pub k: Option<usize>,
    pub provenance: Provenance,
}

impl SelectionMask {
    pub fn all(num_groups: usize) -> Self {
        Self {
            selected: vec![true; num_groups],
            k: None,
            provenance: Provenance::All,
        }
    }

    pub fn none(num_groups: usize) -> Self {
        Self {
            selected: vec![false; num_groups],
            k: None,
            provenance: Provenance::None,
        }
    }

    pub fn from_selected(selected: Vec<bool>) -> Self {
        let provenance = if selected.iter().all(|&b| b) {
            Provenance::All
        } else if selected.iter().all(|&b| !b) {
            Provenance::None
        } else {
            Provenance::Random
        };
        Self {
            selected,
            k: None,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn count_selected(&self) -> usize {
        self.selected.iter().filter(|&&b| b).count()
    }

    pub fn any_selected(&self) -> bool {
        self.selected.iter().any(|&b| b)
    }

    pub fn selected_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.selected[j]).collect()
    }

    /// Fraction of scalar parameters covered by the selected groups.
    pub fn parameter_fraction(&self, group_sizes: &[usize]) -> f64 {
        let total: usize = group_sizes.iter().sum();
        let chosen: usize = group_sizes
            .iter()
            .zip(&self.selected)
            .filter(|(_, &s)| s)
            .map(|(n, _)| n)
            .sum();
        chosen as f64 / total.max(1) as f64
    }

    /// Line-oriented text: `provenance <p>`, `k <n|none>`, then one
    /// `<group_id> <true|false>` line per group.
    pub fn to_text(&self) -> String {
        let mut out = format!("provenance {}\n", self.provenance.as_str());
        match self.k {
            Some(k) => out.push_str(&format!("k {k}\n")),
            None => out.push_str("k none\n"),
        }
        for (j, s) in self.selected.iter().enumerate() {
            out.push_str(&format!("{j} {s}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Serde(format!("mask line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        let provenance = match lines.next() {
            Some((_, l)) => l
                .strip_prefix("provenance ")
                .ok_or_else(|| bad(1, "expected provenance"))?
                .parse()?,
            None => return Err(bad(1, "empty mask file")),
        };
        let k = match lines.next() {
            Some((_, l)) => match l.strip_prefix("k ") {
                Some("none") => None,
                Some(v) => Some(v.parse().map_err(|_| bad(2, "invalid k"))?),
                None => return Err(bad(2, "expected k")),
            },
            None => return Err(bad(2, "missing k")),
        };
        let mut selected = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (id, flag) = line.split_once(' ').ok_or_else(|| bad(i + 1, "expected `<id> <bool>`"))?;
            if id.parse::<usize>().ok() != Some(selected.len()) {
                return Err(bad(i + 1, "group ids must be consecutive from 0"));
            }
            selected.push(match flag {
                "true" => true,
                "false" => false,
                _ => return Err(bad(i + 1, "expected true or false")),
            });
        }
        Ok(Self { selected, k, provenance })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

impl fmt::Display for SelectionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bits: String = self.selected.iter().map(|&b| if b { '1' } else { '0' }).collect();
        write!(f, "{}[{bits}]", self.provenance.as_str())
    }
}

fn check_snapshot(snap: &GradientSnapshot, tag: DatasetTag, sizes: &[usize]) -> Result<()> {
    if snap.dataset_tag != tag {
        return Err(Error::Precondition(format!(
            "expected a {tag:?} snapshot, got {:?}",
            snap.dataset_tag
        )));
    }
    let got: Vec<usize> = snap.per_group.iter().map(Vec::len).collect();
    if got != sizes {
        return Err(Error::Precondition(format!(
            "snapshot group sizes {got:?} do not match {sizes:?}"
        )));
    }
    Ok(())
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Zero when either vector has zero norm.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn sensitivity_scores(
    real: &GradientSnapshot,
    synthetic_biased: &GradientSnapshot,
    synthetic_balanced: &GradientSnapshot,
    criterion: Criterion,
) -> Result<SensitivityScores> {
    let sizes: Vec<usize> = real.per_group.iter().map(Vec::len).collect();
    check_snapshot(real, DatasetTag::RealBiased, &sizes)?;
    check_snapshot(synthetic_biased, DatasetTag::SyntheticBiased, &sizes)?;
    check_snapshot(synthetic_balanced, DatasetTag::SyntheticBalanced, &sizes)?;
    let score: fn(&[f64], &[f64]) -> f64 = match criterion {
        Criterion::AbsoluteDifference => mean_abs_diff,
        Criterion::CosineSimilarity => cosine,
    };
    let delta1 = real
        .per_group
        .iter()
        .zip(&synthetic_biased.per_group)
        .map(|(a, b)| score(a, b))
        .collect();
    let delta2 = synthetic_biased
        .per_group
        .iter()
        .zip(&synthetic_balanced.per_group)
        .map(|(a, b)| score(a, b))
        .collect();
    Ok(SensitivityScores { delta1, delta2, criterion })
}

fn argsort(values: &[f64], descending: bool) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..values.len()).collect();
    // Stable sort keeps ascending group id among equal scores.
    ids.sort_by(|&a, &b| {
        let ord = values[a].total_cmp(&values[b]);
        if descending {
            ord.reverse()
        } else {
            ord
        }
    });
    ids
}

/// Ascending `delta1` / descending `delta2` for differences. Similarities
/// flip both directions: most aligned domain gradients first, least aligned
/// fairness gradients first. Ties resolve to the lower group id.
pub fn rank_scores(scores: &SensitivityScores) -> Rankings {
    let similarity = scores.criterion == Criterion::CosineSimilarity;
    Rankings {
        r1: argsort(&scores.delta1, similarity),
        r2: argsort(&scores.delta2, !similarity),
    }
}

/// Groups in both top-k sets. An empty intersection yields an all-false mask.
pub fn select_topk_intersection(rankings: &Rankings, k: usize) -> Result<SelectionMask> {
    let g = rankings.r1.len();
    if rankings.r2.len() != g {
        return Err(Error::Shape("rankings have different lengths".into()));
    }
    if k == 0 || k > g {
        return Err(Error::Config(format!("k must be in [1, {g}], got {k}")));
    }
    let mut in_k1 = vec![false; g];
    for &j in &rankings.r1[..k] {
        in_k1[j] = true;
    }
    let mut selected = vec![false; g];
    for &j in &rankings.r2[..k] {
        selected[j] = in_k1[j];
    }
    Ok(SelectionMask {
        selected,
        k: Some(k),
        provenance: Provenance::Smg,
    })
}

/// `round(fraction * num_groups)` distinct groups drawn uniformly.
pub fn random_mask(num_groups: usize, fraction: f64, seed: u64) -> Result<SelectionMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let count = (fraction * num_groups as f64).round() as usize;
    let mut ids: Vec<usize> = (0..num_groups).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut selected = vec![false; num_groups];
    for &j in &ids[..count.min(num_groups)] {
        selected[j] = true;
    }
    Ok(SelectionMask {
        selected,
        k: None,
        provenance: Provenance::Random,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "block")]
pub enum StructuralSelector {
    UpdateBlock(usize),
    FreezeBlock(usize),
    LinearProbe,
}

pub fn structural_mask(arch: &ModelArch, selector: StructuralSelector) -> Result<SelectionMask> {
    arch.validate()?;
    let groups: Vec<(usize, usize, GroupRole)> = (0..arch.num_layers())
        .flat_map(|l| {
            let b = arch.block_assignment[l];
            [(l, b, GroupRole::Weight), (l, b, GroupRole::Bias)]
        })
        .collect();
    let check_block = |b: usize| {
        if b >= arch.num_blocks() {
            Err(Error::Config(format!(
                "block {b} does not exist (model has {} blocks)",
                arch.num_blocks()
            )))
        } else {
            Ok(())
        }
    };
    let (selected, provenance) = match selector {
        StructuralSelector::UpdateBlock(b) => {
            check_block(b)?;
            (groups.iter().map(|g| g.1 == b).collect(), Provenance::BlockUpdate)
        }
        StructuralSelector::FreezeBlock(b) => {
            check_block(b)?;
            (groups.iter().map(|g| g.1 != b).collect(), Provenance::BlockFreeze)
        }
        StructuralSelector::LinearProbe => {
            let last = arch.num_layers() - 1;
            (groups.iter().map(|g| g.0 == last).collect(), Provenance::LinearProbe)
        }
    };
    Ok(SelectionMask { selected, k: None, provenance })
}
