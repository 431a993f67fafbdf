//! Planted-bias two-domain simulator, dataset composition and CSV ingestion.
//!
//! Features follow an additive subspace model:
//!
//! ```text
//! x = y * signal_mean + s * spurious_mean + domain_shift + N(0, sigma^2 I)
//! ```
//!
//! where `y` is the target label, `s` the protected attribute, and `s == y`
//! with probability `bias_ratio`. The signal, spurious and shift vectors live
//! on disjoint coordinates so each knob can be turned independently.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of (y, s) cells in a binary-target, binary-protected dataset.
pub const NUM_CELLS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Real,
    Synthetic,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Real => "real",
            Domain::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub target: u8,
    pub protected: u8,
    pub domain: Domain,
}

/// Cell index in `[y0s0, y0s1, y1s0, y1s1]` order.
pub fn cell_index(y: u8, s: u8) -> usize {
    2 * usize::from(y) + usize::from(s)
}

pub fn cell_of(index: usize) -> (u8, u8) {
    ((index / 2) as u8, (index % 2) as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    /// Hex digest of the generating spec and seed, or `file:<path>` for ingested data.
    pub fingerprint: String,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, fingerprint: impl Into<String>) -> Self {
        Self {
            examples,
            fingerprint: fingerprint.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.features.len())
    }

    /// Example counts per (y, s) cell, see [`cell_index`].
    pub fn cell_counts(&self) -> [usize; NUM_CELLS] {
        let mut counts = [0; NUM_CELLS];
        for e in &self.examples {
            counts[cell_index(e.target, e.protected)] += 1;
        }
        counts
    }

    /// Fraction of examples whose protected attribute equals the target.
    pub fn aligned_fraction(&self) -> f64 {
        let aligned = self
            .examples
            .iter()
            .filter(|e| e.target == e.protected)
            .count();
        aligned as f64 / self.len().max(1) as f64
    }

    pub fn mean_features(&self) -> Vec<f64> {
        let dim = self.feature_dim().unwrap_or(0);
        let mut mean = vec![0.0; dim];
        for e in &self.examples {
            for (m, x) in mean.iter_mut().zip(&e.features) {
                *m += x;
            }
        }
        let n = self.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Stratified split: `fraction` of every (y, s) cell (rounded) goes to the
    /// second dataset, drawn with `seed`. Relative order is preserved in both parts.
    pub fn split_stratified(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "split fraction must be in [0, 1), got {fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut held = vec![false; self.len()];
        for cell in 0..NUM_CELLS {
            let mut idx: Vec<usize> = self
                .examples
                .iter()
                .enumerate()
                .filter(|(_, e)| cell_index(e.target, e.protected) == cell)
                .map(|(i, _)| i)
                .collect();
            let take = (fraction * idx.len() as f64).round() as usize;
            idx.shuffle(&mut rng);
            for &i in &idx[..take] {
                held[i] = true;
            }
        }
        let (mut keep, mut out) = (Vec::new(), Vec::new());
        for (e, h) in self.examples.iter().zip(held) {
            if h {
                out.push(e.clone());
            } else {
                keep.push(e.clone());
            }
        }
        let fp = |part: &str| digest_hex(&[self.fingerprint.as_bytes(), part.as_bytes(), &seed.to_le_bytes()]);
        Ok((Dataset::new(keep, fp("train")), Dataset::new(out, fp("holdout"))))
    }

    pub fn concat(&self, other: &Dataset, fingerprint: impl Into<String>) -> Dataset {
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Dataset::new(examples, fingerprint)
    }
}

pub(crate) fn digest_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Independent child seed for a named stream.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: Domain,
    pub n_per_target: usize,
    /// Probability that the protected attribute equals the target.
    pub bias_ratio: f64,
    pub signal_mean: Vec<f64>,
    pub spurious_mean: Vec<f64>,
    pub domain_shift: Vec<f64>,
    pub noise_sigma: f64,
}

/// Dimension layout of the default simulator.
pub const DEFAULT_DIM: usize = 20;

pub(crate) fn on_dims(dim: usize, range: std::ops::Range<usize>, value: f64) -> Vec<f64> {
    (0..dim).map(|i| if range.contains(&i) { value } else { 0.0 }).collect()
}

impl DomainSpec {
    /// Default real domain: signal 1.0 on dims 0..5, spurious 1.2 on dims
    /// 5..10, no shift, unit noise, 2000 examples per target.
    pub fn default_real(bias_ratio: f64) -> Self {
        Self {
            domain: Domain::Real,
            n_per_target: 2000,
            bias_ratio,
            signal_mean: on_dims(DEFAULT_DIM, 0..5, 1.0),
            spurious_mean: on_dims(DEFAULT_DIM, 5..10, 1.2),
            domain_shift: vec![0.0; DEFAULT_DIM],
            noise_sigma: 1.0,
        }
    }

    /// Default synthetic offset: 0.8 on dims 10..20.
    pub fn default_synthetic_shift() -> Vec<f64> {
        on_dims(DEFAULT_DIM, 10..20, 0.8)
    }

    pub fn dim(&self) -> usize {
        self.signal_mean.len()
    }

    /// Same generative process moved to the synthetic domain.
    pub fn to_synthetic(&self, domain_shift: Vec<f64>, bias_ratio: f64) -> Self {
        Self {
            domain: Domain::Synthetic,
            bias_ratio,
            domain_shift,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if self.spurious_mean.len() != d || self.domain_shift.len() != d {
            return Err(Error::Config(format!(
                "signal/spurious/shift lengths differ: {}/{}/{}",
                d,
                self.spurious_mean.len(),
                self.domain_shift.len()
            )));
        }
        if self.n_per_target == 0 {
            return Err(Error::Config("n_per_target must be positive".into()));
        }
        if !(0.5..=1.0).contains(&self.bias_ratio) {
            return Err(Error::Config(format!(
                "bias_ratio must be in [0.5, 1.0], got {}",
                self.bias_ratio
            )));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be positive".into()));
        }
        let vectors = [&self.signal_mean, &self.spurious_mean, &self.domain_shift];
        if vectors.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Config("mean vectors must be finite".into()));
        }
        for i in 0..d {
            let used = vectors.iter().filter(|v| v[i] != 0.0).count();
            if used > 1 {
                return Err(Error::Config(format!(
                    "signal, spurious and shift supports overlap on dim {i}"
                )));
            }
        }
        Ok(())
    }

    /// Digest of the spec, seed and generation role (`bernoulli` or `balanced:<per_cell>`).
    pub fn fingerprint(&self, seed: u64, role: &str) -> String {
        let spec = serde_json::to_string(self).expect("spec serializes");
        digest_hex(&[spec.as_bytes(), &seed.to_le_bytes(), role.as_bytes()])
    }

    fn sample(&self, y: u8, s: u8, rng: &mut ChaCha8Rng) -> Example {
        let (yf, sf) = (f64::from(y), f64::from(s));
        let features = (0..self.dim())
            .map(|i| {
                let noise: f64 = rng.sample(StandardNormal);
                yf * self.signal_mean[i]
                    + sf * self.spurious_mean[i]
                    + self.domain_shift[i]
                    + self.noise_sigma * noise
            })
            .collect();
        Example {
            features,
            target: y,
            protected: s,
            domain: self.domain,
        }
    }
}

/// Draws `n_per_target` examples for each target; `s = y` with probability
/// `bias_ratio`. Targets alternate 0, 1, 0, 1, ...
pub fn generate_domain_dataset(spec: &DomainSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(2 * spec.n_per_target);
    for _ in 0..spec.n_per_target {
        for y in 0..2u8 {
            let aligned = rng.random_bool(spec.bias_ratio);
            let s = if aligned { y } else { 1 - y };
            examples.push(spec.sample(y, s, &mut rng));
        }
    }
    Ok(Dataset::new(examples, spec.fingerprint(seed, "bernoulli")))
}

/// Exactly `per_cell` examples in every (y, s) cell, interleaved in cell order.
/// The spec's `bias_ratio` and `n_per_target` are ignored.
pub fn generate_balanced_dataset(spec: &DomainSpec, per_cell: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if per_cell == 0 {
        return Err(Error::Precondition("balanced dataset needs per_cell > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(NUM_CELLS * per_cell);
    for _ in 0..per_cell {
        for cell in 0..NUM_CELLS {
            let (y, s) = cell_of(cell);
            examples.push(spec.sample(y, s, &mut rng));
        }
    }
    let role = format!("balanced:{per_cell}");
    Ok(Dataset::new(examples, spec.fingerprint(seed, &role)))
}

/// Inputs of [`generate_triplet`] beyond the real-domain spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletSpec {
    pub real: DomainSpec,
    /// Offset applied to every synthetic example.
    pub synthetic_shift: Vec<f64>,
    /// Bias ratio of the biased synthetic set.
    pub bias_ratio_s1: f64,
    /// Balanced synthetic size relative to `N_R`.
    pub syn_size_ratio: f64,
}

impl TripletSpec {
    pub fn new(real: DomainSpec, bias_ratio_s1: f64) -> Self {
        Self {
            real,
            synthetic_shift: DomainSpec::default_synthetic_shift(),
            bias_ratio_s1,
            syn_size_ratio: 1.0,
        }
    }

    pub fn synthetic_spec(&self, bias_ratio: f64) -> DomainSpec {
        self.real.to_synthetic(self.synthetic_shift.clone(), bias_ratio)
    }

    pub fn n_real(&self) -> usize {
        2 * self.real.n_per_target
    }

    /// `floor(ratio * N_R / G)`.
    pub fn balanced_per_cell(&self) -> usize {
        (self.syn_size_ratio * self.n_real() as f64 / NUM_CELLS as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub real: Dataset,
    pub synthetic_biased: Dataset,
    pub synthetic_balanced: Dataset,
}

/// Biased real, biased synthetic and balanced synthetic datasets from three
/// independent child seeds. The balanced set holds `floor(ratio * N_R / 4)`
/// examples per cell; the remainder is dropped.
pub fn generate_triplet(spec: &TripletSpec, seed: u64) -> Result<Triplet> {
    if spec.real.domain != Domain::Real {
        return Err(Error::Precondition("triplet real spec must be in the real domain".into()));
    }
    if !(spec.syn_size_ratio > 0.0 && spec.syn_size_ratio.is_finite()) {
        return Err(Error::Config("syn_size_ratio must be positive".into()));
    }
    let n_r = spec.n_real();
    if n_r < NUM_CELLS {
        return Err(Error::Precondition(format!(
            "N_R = {n_r} is smaller than the group count {NUM_CELLS}"
        )));
    }
    let real = generate_domain_dataset(&spec.real, derive_seed(seed, "real"))?;
    let s1 = generate_domain_dataset(
        &spec.synthetic_spec(spec.bias_ratio_s1),
        derive_seed(seed, "synthetic_biased"),
    )?;
    let per_cell = spec.balanced_per_cell();
    let s2 = generate_balanced_dataset(
        &spec.synthetic_spec(0.5),
        per_cell,
        derive_seed(seed, "synthetic_balanced"),
    )?;
    Ok(Triplet {
        real,
        synthetic_biased: s1,
        synthetic_balanced: s2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposeMode {
    Supplementation,
    Repairing,
}

/// Supplementation appends the whole pool. Repairing appends, per (y, s) cell,
/// the first pool examples of that cell until every cell reaches the largest
/// real cell count.
pub fn compose_training_set(mode: ComposeMode, real: &Dataset, pool: &Dataset) -> Result<Dataset> {
    if real.is_empty() || pool.is_empty() {
        return Err(Error::Precondition("composition needs non-empty datasets".into()));
    }
    match mode {
        ComposeMode::Supplementation => {
            let fp = digest_hex(&[b"supplementation", real.fingerprint.as_bytes(), pool.fingerprint.as_bytes()]);
            Ok(real.concat(pool, fp))
        }
        ComposeMode::Repairing => {
            let counts = real.cell_counts();
            let target = counts.iter().copied().max().unwrap_or(0);
            let deficits: Vec<usize> = counts.iter().map(|&c| target - c).collect();
            if deficits.iter().all(|&d| d == 0) {
                return Ok(real.clone());
            }
            let mut examples = real.examples.clone();
            for (cell, &need) in deficits.iter().enumerate() {
                if need == 0 {
                    continue;
                }
                let (y, s) = cell_of(cell);
                let available: Vec<&Example> = pool
                    .examples
                    .iter()
                    .filter(|e| e.target == y && e.protected == s)
                    .collect();
                if available.len() < need {
                    return Err(Error::PoolShortfall {
                        y,
                        s,
                        needed: need,
                        available: available.len(),
                    });
                }
                examples.extend(available[..need].iter().map(|&e| e.clone()));
            }
            let fp = digest_hex(&[b"repairing", real.fingerprint.as_bytes(), pool.fingerprint.as_bytes()]);
            Ok(Dataset::new(examples, fp))
        }
    }
}

/// Column names used when reading a CSV file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub target: String,
    pub protected: String,
    pub domain: Option<String>,
}

impl CsvSchema {
    /// `f0..f{d-1}`, `y`, `s`, and an optional `domain` column.
    pub fn standard(dim: usize) -> Self {
        Self {
            feature_columns: (0..dim).map(|i| format!("f{i}")).collect(),
            target: "y".into(),
            protected: "s".into(),
            domain: Some("domain".into()),
        }
    }

    /// Standard schema with every `f<digits>` header column as a feature.
    pub fn from_header(header: &[String]) -> Self {
        let dim = header
            .iter()
            .filter(|h| {
                h.strip_prefix('f')
                    .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
            })
            .count();
        Self::standard(dim)
    }
}

fn parse_binary(field: &str, column: &str, row: usize) -> Result<u8> {
    match field.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Parse {
            row,
            message: format!("column {column}: expected 0 or 1, got {other:?}"),
        }),
    }
}

/// Reads a dataset; `schema = None` infers the standard schema from the header.
/// Row numbers in errors count data rows from 1.
pub fn load_csv_dataset(path: &Path, schema: Option<&CsvSchema>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse { row: 0, message: e.to_string() })?
        .iter()
        .map(str::to_owned)
        .collect();
    let schema = match schema {
        Some(s) => s.clone(),
        None => CsvSchema::from_header(&header),
    };
    let column = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 0,
            message: format!("missing column {name:?}"),
        })
    };
    let feature_idx: Vec<usize> = schema
        .feature_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<_>>()?;
    if feature_idx.is_empty() {
        return Err(Error::Parse { row: 0, message: "no feature columns".into() });
    }
    let y_idx = column(&schema.target)?;
    let s_idx = column(&schema.protected)?;
    let d_idx = schema.domain.as_deref().and_then(|d| header.iter().position(|h| h == d));

    let mut examples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let field = |idx: usize| record.get(idx).unwrap_or("");
        let features = feature_idx
            .iter()
            .zip(&schema.feature_columns)
            .map(|(&idx, name)| {
                let raw = field(idx).trim();
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        row,
                        message: format!("column {name}: non-numeric feature {raw:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        let target = parse_binary(field(y_idx), &schema.target, row)?;
        let protected = parse_binary(field(s_idx), &schema.protected, row)?;
        let domain = match d_idx.map(|idx| field(idx).trim()) {
            None | Some("") | Some("real") => Domain::Real,
            Some("synthetic") => Domain::Synthetic,
            Some(other) => {
                return Err(Error::Parse {
                    row,
                    message: format!("unknown domain {other:?}"),
                })
            }
        };
        examples.push(Example { features, target, protected, domain });
    }
    Ok(Dataset::new(examples, format!("file:{}", path.display())))
}

/// Writes the standard schema. Floats use Rust's shortest round-trip form, so
/// reading the file back reproduces every value exactly.
pub fn write_csv_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let dim = dataset.feature_dim().unwrap_or(0);
    let mut out = String::new();
    let header: Vec<String> = (0..dim)
        .map(|i| format!("f{i}"))
        .chain(["y", "s", "domain"].map(String::from))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for e in &dataset.examples {
        for x in &e.features {
            out.push_str(&format!("{x},"));
        }
        out.push_str(&format!("{},{},{}\n", e.target, e.protected, e.domain));
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Dataset-specific wording of the LLM instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    CelebA,
    UtkFace,
}

const CELEBA_ATTRIBUTES: &str = "5 o\u{2019}clock shadow, arched eyebrows, attractive, bags under eyes, bald, bangs, big lips, big nose, black hair, blurry, brown hair, bushy eyebrows, chubby, double chin, eyeglasses, goatee, grey hair, heavy makeup, high cheekbones, mouth slightly open, moustache, narrow eyes, no beard, oval face, pale skin, pointy nose, receding hairline, rosy cheeks, sideburns, straight hair, wavy hair, wearing earrings, wearing a hat, wearing lipstick, wearing necklace, wearing necktie, and young";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstruction {
    pub task: String,
    pub number_of_prompts: usize,
    pub target_attribute: String,
    pub protected_attribute: String,
    /// Sentences inserted after the opening request.
    pub other_descriptions: Vec<String>,
    /// Everything following "The prompts should be for a ".
    pub prompt_format: String,
}

impl PromptInstruction {
    pub fn from_template(
        template: PromptTemplate,
        number_of_prompts: usize,
        target_attribute: &str,
        protected_attribute: &str,
    ) -> Self {
        let (other_descriptions, region) = match template {
            PromptTemplate::CelebA => (
                vec![
                    format!("Each prompt should also consider some of the following attributes: {CELEBA_ATTRIBUTES}."),
                    "Additionally, each prompt should include a variety of head poses, such as slight tilts, turns, and different head orientations (e.g., head turned slightly left, tilted upward, facing slightly downward) to ensure diversity in the generated image angles.".to_string(),
                ],
                "head",
            ),
            PromptTemplate::UtkFace => (
                vec![
                    "Include details about facial expressions, hairstyles, and any other distinguishing features that can help in generating a realistic image.".to_string(),
                    "And also contain age start from 1 and end at 100.".to_string(),
                ],
                "face",
            ),
        };
        Self {
            task: "human face attributes".into(),
            number_of_prompts,
            target_attribute: target_attribute.into(),
            protected_attribute: protected_attribute.into(),
            other_descriptions,
            prompt_format: format!(
                "\u{201c}Portrait face photo of a,\u{201d} ensuring the image only contains the {region} part."
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let empty = |s: &str| s.trim().is_empty();
        let bad = if empty(&self.task) {
            Some("task")
        } else if self.number_of_prompts == 0 {
            Some("number_of_prompts")
        } else if empty(&self.target_attribute) {
            Some("target_attribute")
        } else if empty(&self.protected_attribute) {
            Some("protected_attribute")
        } else if self.other_descriptions.is_empty() || self.other_descriptions.iter().any(|d| empty(d)) {
            Some("other_descriptions")
        } else if empty(&self.prompt_format) {
            Some("prompt_format")
        } else {
            None
        };
        match bad {
            Some(field) => Err(Error::Config(format!("prompt instruction field {field} is empty"))),
            None => Ok(()),
        }
    }
}

/// Renders the instruction text sent to the prompt-writing LLM.
pub fn assemble_instruction(instr: &PromptInstruction) -> Result<String> {
    instr.validate()?;
    let mut out = format!(
        "Generate {} diverse text prompts for {} that always include {} and {}.",
        instr.number_of_prompts, instr.task, instr.target_attribute, instr.protected_attribute
    );
    for sentence in &instr.other_descriptions {
        out.push(' ');
        out.push_str(sentence);
    }
    out.push_str(" The prompts should be for a ");
    out.push_str(&instr.prompt_format);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(bias: f64, n: usize) -> DomainSpec {
        DomainSpec {
            n_per_target: n,
            ..DomainSpec::default_real(bias)
        }
    }

    #[test]
    fn bias_ratio_is_planted() {
        for seed in 0..20 {
            let d = generate_domain_dataset(&small_spec(0.9, 500), seed).unwrap();
            assert_eq!(d.len(), 1000);
            let frac = d.aligned_fraction();
            assert!((0.86..=0.94).contains(&frac), "seed {seed}: {frac}");
        }
    }

    #[test]
    fn balanced_bias_fills_cells_evenly() {
        let d = generate_domain_dataset(&small_spec(0.5, 1000), 3).unwrap();
        // Each cell ~ Binomial(1000, 0.5): sd = sqrt(250).
        let sd = 250f64.sqrt();
        for c in d.cell_counts() {
            assert!((c as f64 - 500.0).abs() <= 3.0 * sd, "{c}");
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec(0.9, 10);
        s.bias_ratio = 0.4;
        assert!(s.validate().is_err());
        let mut s = small_spec(0.9, 10);
        s.domain_shift[0] = 1.0;
        assert!(s.validate().is_err());
        let mut s = small_spec(0.9, 10);
        s.noise_sigma = 0.0;
        assert!(s.validate().is_err());
        let mut s = small_spec(0.9, 10);
        s.spurious_mean.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn triplet_default_sizes() {
        let spec = TripletSpec::new(DomainSpec::default_real(0.9), 0.9);
        let t = generate_triplet(&spec, 17).unwrap();
        assert_eq!(t.real.len(), 4000);
        assert_eq!(t.synthetic_biased.len(), 4000);
        assert_eq!(t.synthetic_balanced.cell_counts(), [1000; 4]);
        assert!(t.synthetic_balanced.examples.iter().all(|e| e.domain == Domain::Synthetic));
        assert!(t.real.examples.iter().all(|e| e.domain == Domain::Real));
        let frac = t.synthetic_biased.aligned_fraction();
        assert!((frac - 0.9).abs() < 0.03, "{frac}");
    }

    #[test]
    fn triplet_rounds_cells_down() {
        let mut spec = TripletSpec::new(small_spec(0.9, 5), 0.9);
        assert_eq!(generate_triplet(&spec, 1).unwrap().synthetic_balanced.cell_counts(), [2; 4]);
        spec.syn_size_ratio = 1.5;
        assert_eq!(generate_triplet(&spec, 1).unwrap().synthetic_balanced.cell_counts(), [3; 4]);
    }

    #[test]
    fn triplet_twenty_thousand_real() {
        let spec = TripletSpec::new(small_spec(0.9, 10_000), 0.9);
        let t = generate_triplet(&spec, 2).unwrap();
        assert_eq!(t.synthetic_balanced.cell_counts(), [5000; 4]);
    }

    #[test]
    fn triplet_is_deterministic() {
        let spec = TripletSpec::new(small_spec(0.9, 50), 0.7);
        assert_eq!(generate_triplet(&spec, 5).unwrap(), generate_triplet(&spec, 5).unwrap());
        assert_ne!(generate_triplet(&spec, 5).unwrap().real, generate_triplet(&spec, 6).unwrap().real);
    }

    #[test]
    fn triplet_preconditions() {
        let mut spec = TripletSpec::new(small_spec(0.9, 1), 0.9);
        assert!(matches!(generate_triplet(&spec, 0), Err(Error::Precondition(_))));
        spec.real.n_per_target = 10;
        spec.real.domain = Domain::Synthetic;
        assert!(matches!(generate_triplet(&spec, 0), Err(Error::Precondition(_))));
    }

    fn planted(counts: [usize; 4]) -> Dataset {
        let mut ex = Vec::new();
        for (cell, &n) in counts.iter().enumerate() {
            let (y, s) = cell_of(cell);
            for i in 0..n {
                ex.push(Example {
                    features: vec![i as f64],
                    target: y,
                    protected: s,
                    domain: Domain::Real,
                });
            }
        }
        Dataset::new(ex, "planted")
    }

    #[test]
    fn repairing_fills_deficit_cells() {
        let real = planted([9000, 1000, 1000, 9000]);
        let pool_spec = small_spec(0.9, 1).to_synthetic(DomainSpec::default_synthetic_shift(), 0.5);
        let pool = generate_balanced_dataset(&pool_spec, 8000, 1).unwrap();
        let out = compose_training_set(ComposeMode::Repairing, &real, &pool).unwrap();
        assert_eq!(out.cell_counts(), [9000; 4]);
        let added = &out.examples[real.len()..];
        assert_eq!(added.len(), 16000);
        assert!(added.iter().all(|e| e.domain == Domain::Synthetic));
        assert_eq!(&out.examples[..real.len()], &real.examples[..]);
    }

    #[test]
    fn repairing_balanced_is_identity() {
        let real = planted([5, 5, 5, 5]);
        let pool = planted([1, 1, 1, 1]);
        assert_eq!(compose_training_set(ComposeMode::Repairing, &real, &pool).unwrap(), real);
    }

    #[test]
    fn repairing_shortfall_names_cell() {
        let real = planted([5, 2, 5, 5]);
        let pool = planted([9, 1, 9, 9]);
        let err = compose_training_set(ComposeMode::Repairing, &real, &pool).unwrap_err();
        match err {
            Error::PoolShortfall { y, s, needed, available } => {
                assert_eq!((y, s, needed, available), (0, 1, 3, 1));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn supplementation_concatenates() {
        let real = planted([5000, 5000, 5000, 5000]);
        let pool = planted([5000, 5000, 5000, 5000]);
        let out = compose_training_set(ComposeMode::Supplementation, &real, &pool).unwrap();
        assert_eq!(out.len(), 40000);
        assert_eq!(&out.examples[..20000], &real.examples[..]);
        assert_eq!(&out.examples[20000..], &pool.examples[..]);
    }

    #[test]
    fn csv_basic_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "f0,f1,y,s\n1,2,0,1\n3.5,-4,1,1\n0,0,1,0\n").unwrap();
        let d = load_csv_dataset(&path, None).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.feature_dim(), Some(2));
        assert_eq!(d.examples[1].features, vec![3.5, -4.0]);
        assert!(d.examples.iter().all(|e| e.domain == Domain::Real));

        std::fs::write(&path, "f0,f1,y,s\n1,2,0,1\n3,4,2,1\n").unwrap();
        match load_csv_dataset(&path, None).unwrap_err() {
            Error::Parse { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected {other}"),
        }
        std::fs::write(&path, "f0,f1,y,s\n1,abc,0,1\n").unwrap();
        assert!(matches!(load_csv_dataset(&path, None), Err(Error::Parse { row: 1, .. })));
        std::fs::write(&path, "f0,f1,y\n1,2,0\n").unwrap();
        assert!(matches!(load_csv_dataset(&path, None), Err(Error::Parse { row: 0, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let spec = small_spec(0.8, 40).to_synthetic(DomainSpec::default_synthetic_shift(), 0.8);
        let d = generate_domain_dataset(&spec, 9).unwrap();
        write_csv_dataset(&path, &d).unwrap();
        let back = load_csv_dataset(&path, None).unwrap();
        assert_eq!(back.examples, d.examples);
    }

    #[test]
    fn domain_shift_moves_mean_monotonically() {
        let mut prev = -1.0;
        for magnitude in [0.0, 0.5, 1.5] {
            let mut total = 0.0;
            for seed in 0..5 {
                let spec = TripletSpec {
                    synthetic_shift: on_dims(DEFAULT_DIM, 10..20, magnitude),
                    ..TripletSpec::new(small_spec(0.9, 300), 0.9)
                };
                let t = generate_triplet(&spec, seed).unwrap();
                let a = t.real.mean_features();
                let b = t.synthetic_biased.mean_features();
                total += a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            }
            assert!(total > prev, "{magnitude}: {total} <= {prev}");
            prev = total;
        }
    }

    #[test]
    fn zero_shift_domains_match() {
        // Two-sample z-test per coordinate with a Bonferroni-corrected alpha of 0.01.
        let real = small_spec(0.9, 1000);
        let syn = real.to_synthetic(vec![0.0; DEFAULT_DIM], 0.9);
        let a = generate_domain_dataset(&real, 100).unwrap();
        let b = generate_domain_dataset(&syn, 200).unwrap();
        let critical = 3.48; // two-sided z for alpha = 0.01 / 20
        for dim in 0..DEFAULT_DIM {
            let stats = |d: &Dataset| {
                let xs: Vec<f64> = d.examples.iter().map(|e| e.features[dim]).collect();
                let n = xs.len() as f64;
                let m = xs.iter().sum::<f64>() / n;
                let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
                (m, v, n)
            };
            let (ma, va, na) = stats(&a);
            let (mb, vb, nb) = stats(&b);
            let z = (ma - mb) / (va / na + vb / nb).sqrt();
            assert!(z.abs() < critical, "dim {dim}: z = {z}");
        }
    }

    #[test]
    fn stratified_split_keeps_balance() {
        let pool_spec = small_spec(0.9, 1).to_synthetic(DomainSpec::default_synthetic_shift(), 0.5);
        let d = generate_balanced_dataset(&pool_spec, 100, 1).unwrap();
        let (train, val) = d.split_stratified(0.1, 3).unwrap();
        assert_eq!(train.cell_counts(), [90; 4]);
        assert_eq!(val.cell_counts(), [10; 4]);
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
    }

    #[test]
    fn instruction_rendering() {
        let celeba = PromptInstruction::from_template(PromptTemplate::CelebA, 50, "smiling", "male");
        let text = assemble_instruction(&celeba).unwrap();
        assert!(text.starts_with(
            "Generate 50 diverse text prompts for human face attributes that always include smiling and male."
        ));
        assert!(text.ends_with("ensuring the image only contains the head part."));
        assert_eq!(text, assemble_instruction(&celeba).unwrap());

        let utk = PromptInstruction::from_template(PromptTemplate::UtkFace, 30, "female", "white");
        let text = assemble_instruction(&utk).unwrap();
        assert!(text.contains("age start from 1 and end at 100"));

        let mut broken = celeba.clone();
        broken.target_attribute = String::new();
        assert!(assemble_instruction(&broken).is_err());
        let mut broken = celeba;
        broken.other_descriptions.push(" ".into());
        assert!(assemble_instruction(&broken).is_err());
    }
}
