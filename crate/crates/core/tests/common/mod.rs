//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use fairtune::data::{Dataset, Domain, Example};
use fairtune::mask::Criterion;
use fairtune::net::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Plain forward pass: mean cross-entropy plus the sign pattern of every
/// hidden pre-activation (used to detect ReLU kinks).
pub fn reference_loss(model: &Model, examples: &[Example]) -> (f64, Vec<bool>) {
    let dims = model.arch.layer_dims();
    let last = dims.len() - 1;
    let mut total = 0.0;
    let mut pattern = Vec::new();
    for e in examples {
        let mut x = e.features.clone();
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = model.weight(l);
            let b = model.bias(l);
            let mut z = vec![0.0; fan_out];
            for o in 0..fan_out {
                let mut acc = b[o];
                for i in 0..fan_in {
                    acc += w[o * fan_in + i] * x[i];
                }
                z[o] = acc;
            }
            if l < last {
                pattern.extend(z.iter().map(|&v| v > 0.0));
                x = z.iter().map(|&v| v.max(0.0)).collect();
            } else {
                x = z;
            }
        }
        let m = x[0].max(x[1]);
        let lse = m + ((x[0] - m).exp() + (x[1] - m).exp()).ln();
        total += lse - x[usize::from(e.target)];
    }
    (total / examples.len() as f64, pattern)
}

pub fn random_examples(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<Example> {
    (0..n)
        .map(|_| Example {
            features: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            target: rng.random_range(0..2),
            protected: rng.random_range(0..2),
            domain: Domain::Real,
        })
        .collect()
}

pub fn dataset_from(rows: &[(u8, u8)]) -> Dataset {
    Dataset::new(
        rows.iter()
            .map(|&(y, s)| Example {
                features: vec![0.0],
                target: y,
                protected: s,
                domain: Domain::Real,
            })
            .collect(),
        "oracle",
    )
}

/// Brute-force metrics by scanning the examples once per cell:
/// `(acc, wst, eo, std)`, or `None` when some (s, y) cell is empty.
pub fn oracle_metrics(preds: &[u8], rows: &[(u8, u8)]) -> Option<(f64, f64, f64, f64)> {
    let acc = rows.iter().zip(preds).filter(|((y, _), p)| y == *p).count() as f64 / rows.len() as f64;
    // p_hat[s][y][yh]
    let mut p = [[[0.0; 2]; 2]; 2];
    for s in 0..2u8 {
        for y in 0..2u8 {
            let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i] == (y, s)).collect();
            if idx.is_empty() {
                return None;
            }
            for yh in 0..2u8 {
                let hits = idx.iter().filter(|&&i| preds[i] == yh).count();
                p[s as usize][y as usize][yh as usize] = hits as f64 / idx.len() as f64;
            }
        }
    }
    let cells = [p[0][0][0], p[1][0][0], p[0][1][1], p[1][1][1]];
    let wst = cells.iter().cloned().fold(1.0, f64::min);
    let mean = cells.iter().sum::<f64>() / 4.0;
    let std = (cells.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / 4.0).sqrt();
    let eo = p[0]
        .iter()
        .flatten()
        .zip(p[1].iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>();
    Some((acc, wst, eo / 4.0, std))
}

/// Top-k membership by counting how many groups outrank each one, then
/// intersecting.
pub fn oracle_mask(delta1: &[f64], delta2: &[f64], k: usize, criterion: Criterion) -> Vec<bool> {
    let similarity = criterion == Criterion::CosineSimilarity;
    // Group j outranks group i on a strictly better score, or an equal score and lower id.
    let in_top = |v: &[f64], descending: bool| -> Vec<bool> {
        (0..v.len())
            .map(|i| {
                let ahead = (0..v.len())
                    .filter(|&j| {
                        let better = if descending { v[j] > v[i] } else { v[j] < v[i] };
                        better || (v[j] == v[i] && j < i)
                    })
                    .count();
                ahead < k
            })
            .collect()
    };
    let a = in_top(delta1, similarity);
    let b = in_top(delta2, !similarity);
    a.iter().zip(&b).map(|(x, y)| *x && *y).collect()
}
