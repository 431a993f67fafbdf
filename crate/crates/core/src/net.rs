//! Fully-connected ReLU classifier with a two-way softmax head.
//!
//! Parameters are stored as an ordered list of [`ParameterGroup`]s, one per
//! weight matrix and one per bias vector, in layer order:
//! `layer 0 weight, layer 0 bias, layer 1 weight, ...`. Every selection mask in
//! the crate indexes this list.
//!
//! Gradients are exact (hand-written backprop) and reduced over examples in
//! ascending order so the same inputs always produce the same bits.

use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::mask::SelectionMask;

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    /// Block id of each linear layer (`hidden_widths.len() + 1` entries).
    pub block_assignment: Vec<usize>,
}

impl ModelArch {
    /// One block per linear layer.
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>) -> Self {
        let layers = hidden_widths.len() + 1;
        Self {
            input_dim,
            hidden_widths,
            num_classes: NUM_CLASSES,
            block_assignment: (0..layers).collect(),
        }
    }

    /// 20 inputs, hidden widths [32, 16], 3 blocks.
    pub fn default_desk() -> Self {
        Self::new(20, vec![32, 16])
    }

    pub fn with_blocks(mut self, block_assignment: Vec<usize>) -> Self {
        self.block_assignment = block_assignment;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        let layers = self.num_layers();
        if self.block_assignment.len() != layers {
            return Err(Error::Config(format!(
                "block_assignment has {} entries for {layers} layers",
                self.block_assignment.len()
            )));
        }
        // Blocks group consecutive layers and are numbered 0, 1, 2, ... in order.
        if self.block_assignment[0] != 0 {
            return Err(Error::Config("first layer must belong to block 0".into()));
        }
        for pair in self.block_assignment.windows(2) {
            if pair[1] != pair[0] && pair[1] != pair[0] + 1 {
                return Err(Error::Config(format!(
                    "block ids must be contiguous and non-decreasing, got {:?}",
                    self.block_assignment
                )));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    pub fn num_blocks(&self) -> usize {
        self.block_assignment.last().map_or(0, |&b| b + 1)
    }

    pub fn num_groups(&self) -> usize {
        2 * self.num_layers()
    }

    /// `(in_dim, out_dim)` of each linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.num_layers() + 1);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_widths);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| o * i + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRole {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterGroup {
    pub group_id: usize,
    pub layer_index: usize,
    pub role: GroupRole,
    pub block_id: usize,
    /// `[out, in]` for weights, `[out]` for biases.
    pub shape: Vec<usize>,
    /// Row-major values.
    pub values: Vec<f64>,
}

impl ParameterGroup {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: ModelArch,
    pub groups: Vec<ParameterGroup>,
    pub seed: u64,
}

/// Weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
pub fn init_model(arch: &ModelArch, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::with_capacity(arch.num_groups());
    for (layer, (fan_in, fan_out)) in arch.layer_dims().into_iter().enumerate() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new(-bound, bound)
            .map_err(|e| Error::Config(format!("init range for layer {layer}: {e}")))?;
        let weights = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
        let block_id = arch.block_assignment[layer];
        groups.push(ParameterGroup {
            group_id: 2 * layer,
            layer_index: layer,
            role: GroupRole::Weight,
            block_id,
            shape: vec![fan_out, fan_in],
            values: weights,
        });
        groups.push(ParameterGroup {
            group_id: 2 * layer + 1,
            layer_index: layer,
            role: GroupRole::Bias,
            block_id,
            shape: vec![fan_out],
            values: vec![0.0; fan_out],
        });
    }
    Ok(Model {
        arch: arch.clone(),
        groups,
        seed,
    })
}

/// Which reference dataset a gradient snapshot was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetTag {
    RealBiased,
    SyntheticBiased,
    SyntheticBalanced,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSnapshot {
    pub per_group: Vec<Vec<f64>>,
    pub dataset_tag: DatasetTag,
    pub mean_loss: f64,
    pub num_examples: usize,
}

impl GradientSnapshot {
    pub fn tagged(mut self, tag: DatasetTag) -> Self {
        self.dataset_tag = tag;
        self
    }
}

/// Per-example activations kept for the backward pass.
struct Trace {
    /// `inputs[l]` is the input to layer `l` (post-ReLU for l > 0).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last entry holds the logits.
    pre: Vec<Vec<f64>>,
}

impl Model {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        &self.groups[2 * layer].values
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.groups[2 * layer + 1].values
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(ParameterGroup::len).collect()
    }

    /// Checks group ids, shapes and finiteness against the architecture.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.groups.len() != self.arch.num_groups() {
            return Err(Error::Shape(format!(
                "model has {} groups, arch expects {}",
                self.groups.len(),
                self.arch.num_groups()
            )));
        }
        for (layer, (fan_in, fan_out)) in self.arch.layer_dims().into_iter().enumerate() {
            for (offset, role, shape) in [
                (0, GroupRole::Weight, vec![fan_out, fan_in]),
                (1, GroupRole::Bias, vec![fan_out]),
            ] {
                let id = 2 * layer + offset;
                let g = &self.groups[id];
                let expected_len: usize = shape.iter().product();
                if g.group_id != id
                    || g.layer_index != layer
                    || g.role != role
                    || g.block_id != self.arch.block_assignment[layer]
                    || g.shape != shape
                    || g.values.len() != expected_len
                {
                    return Err(Error::Shape(format!(
                        "group {id} does not match layer {layer} {role:?} with shape {shape:?}"
                    )));
                }
                if g.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Shape(format!("group {id} has non-finite values")));
                }
            }
        }
        Ok(())
    }

    fn check_features(&self, example: &Example, row: usize) -> Result<()> {
        if example.features.len() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "example {row} has {} features, model expects {}",
                example.features.len(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    fn trace(&self, features: &[f64]) -> Trace {
        let layers = self.arch.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut current = features.to_vec();
        for layer in 0..layers {
            let w = self.weight(layer);
            let b = self.bias(layer);
            let fan_in = current.len();
            let z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, &bias)| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    row.iter().zip(&current).fold(bias, |acc, (wi, xi)| acc + wi * xi)
                })
                .collect();
            let next = if layer + 1 < layers {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut current, next));
            pre.push(z);
        }
        Trace { inputs, pre }
    }

    fn logits(&self, features: &[f64]) -> [f64; 2] {
        let t = self.trace(features);
        let z = t.pre.last().expect("at least one layer");
        [z[0], z[1]]
    }

    /// Adds this example's gradient into `acc` and returns its loss.
    fn accumulate_gradient(&self, example: &Example, acc: &mut [Vec<f64>]) -> f64 {
        let t = self.trace(&example.features);
        let layers = self.arch.num_layers();
        let logits = &t.pre[layers - 1];
        let (probs, lse) = softmax2([logits[0], logits[1]]);
        let target = usize::from(example.target);
        let loss = lse - logits[target];

        let mut delta: Vec<f64> = probs.to_vec();
        delta[target] -= 1.0;

        for layer in (0..layers).rev() {
            let input = &t.inputs[layer];
            let fan_in = input.len();
            {
                let gw = &mut acc[2 * layer];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for (g, &x) in row.iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
            }
            for (g, &d) in acc[2 * layer + 1].iter_mut().zip(&delta) {
                *g += d;
            }
            if layer == 0 {
                break;
            }
            let w = self.weight(layer);
            let below = &t.pre[layer - 1];
            delta = (0..fan_in)
                .map(|i| {
                    if below[i] > 0.0 {
                        delta
                            .iter()
                            .enumerate()
                            .fold(0.0, |s, (o, &d)| s + w[o * fan_in + i] * d)
                    } else {
                        0.0
                    }
                })
                .collect();
        }
        loss
    }

    pub(crate) fn update_in_place(
        &mut self,
        grads: &GradientSnapshot,
        lr: f64,
        mask: &SelectionMask,
    ) -> Result<()> {
        check_update_inputs(self, grads, lr, mask)?;
        for ((group, grad), &selected) in self
            .groups
            .iter_mut()
            .zip(&grads.per_group)
            .zip(&mask.selected)
        {
            if !selected {
                continue;
            }
            for (theta, g) in group.values.iter_mut().zip(grad) {
                *theta -= lr * g;
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Model> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Model = serde_json::from_str(&text)
            .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        model.validate()?;
        Ok(model)
    }
}

/// Returns `(probabilities, log-sum-exp)` for two logits.
fn softmax2(z: [f64; 2]) -> ([f64; 2], f64) {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    ([e0 / s, e1 / s], m + s.ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub probabilities: Vec<[f64; 2]>,
    pub loss: f64,
}

/// Softmax probabilities and mean negative log-likelihood of the targets.
pub fn forward_loss(model: &Model, examples: &[Example]) -> Result<ForwardOutput> {
    if examples.is_empty() {
        return Err(Error::Precondition("forward pass over an empty slice".into()));
    }
    let mut probabilities = Vec::with_capacity(examples.len());
    let mut total = 0.0;
    for (row, ex) in examples.iter().enumerate() {
        model.check_features(ex, row)?;
        let z = model.logits(&ex.features);
        let (p, lse) = softmax2(z);
        total += lse - z[usize::from(ex.target)];
        probabilities.push(p);
    }
    Ok(ForwardOutput {
        probabilities,
        loss: total / examples.len() as f64,
    })
}

/// Mean per-example loss gradient, summed in ascending example order.
pub fn mean_gradient(model: &Model, examples: &[Example]) -> Result<GradientSnapshot> {
    mean_gradient_of(model, examples.iter())
}

pub(crate) fn mean_gradient_of<'a>(
    model: &Model,
    examples: impl ExactSizeIterator<Item = &'a Example>,
) -> Result<GradientSnapshot> {
    let count = examples.len();
    if count == 0 {
        return Err(Error::Precondition(
            "mean gradient needs a non-empty dataset".into(),
        ));
    }
    let mut acc: Vec<Vec<f64>> = model.groups.iter().map(|g| vec![0.0; g.len()]).collect();
    let mut total_loss = 0.0;
    for (row, ex) in examples.enumerate() {
        model.check_features(ex, row)?;
        total_loss += model.accumulate_gradient(ex, &mut acc);
    }
    let n = count as f64;
    for g in acc.iter_mut().flatten() {
        *g /= n;
    }
    Ok(GradientSnapshot {
        per_group: acc,
        dataset_tag: DatasetTag::Other,
        mean_loss: total_loss / n,
        num_examples: count,
    })
}

fn check_update_inputs(
    model: &Model,
    grads: &GradientSnapshot,
    lr: f64,
    mask: &SelectionMask,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if grads.per_group.len() != model.groups.len() || mask.selected.len() != model.groups.len() {
        return Err(Error::Shape(format!(
            "model has {} groups, gradients {}, mask {}",
            model.groups.len(),
            grads.per_group.len(),
            mask.selected.len()
        )));
    }
    for (g, grad) in model.groups.iter().zip(&grads.per_group) {
        if g.len() != grad.len() {
            return Err(Error::Shape(format!(
                "group {} has {} values, gradient has {}",
                g.group_id,
                g.len(),
                grad.len()
            )));
        }
    }
    Ok(())
}

/// Masked SGD step: selected groups move by `-lr * grad`, the rest are untouched.
pub fn apply_update(
    model: &Model,
    grads: &GradientSnapshot,
    lr: f64,
    mask: &SelectionMask,
) -> Result<Model> {
    let mut next = model.clone();
    next.update_in_place(grads, lr, mask)?;
    Ok(next)
}

/// Argmax labels; exact logit ties go to label 0.
pub fn predict(model: &Model, examples: &[Example]) -> Result<Vec<u8>> {
    examples
        .iter()
        .enumerate()
        .map(|(row, ex)| {
            model.check_features(ex, row)?;
            let z = model.logits(&ex.features);
            Ok(u8::from(z[1] > z[0]))
        })
        .collect()
}
