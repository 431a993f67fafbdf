mod common;

use fairtune::data::{
    derive_seed, load_csv_dataset, write_csv_dataset, Dataset, DomainSpec, Domain, Example,
};
use fairtune::mask::{
    random_mask, rank_scores, select_topk_intersection, structural_mask, Criterion, Provenance,
    SelectionMask, SensitivityScores, StructuralSelector,
};
use fairtune::metrics::{confusion_by_group, equalized_odds_from_rate_gaps, evaluate, fairness_report};
use fairtune::net::{apply_update, forward_loss, init_model, mean_gradient, ModelArch};
use fairtune::train::{train_masked, TrainConfig};
use proptest::prelude::*;

use common::{dataset_from, oracle_mask, oracle_metrics, reference_loss};

/// (y, s, y_hat) triples with every (y, s) cell present.
fn labelled() -> impl Strategy<Value = Vec<(u8, u8, u8)>> {
    (prop::collection::vec((0u8..2, 0u8..2, 0u8..2), 0..96), prop::array::uniform4(0u8..2)).prop_map(
        |(mut rows, heads)| {
            for (i, cell) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                rows.push((cell.0, cell.1, heads[i]));
            }
            rows
        },
    )
}

fn split(rows: &[(u8, u8, u8)]) -> (Vec<(u8, u8)>, Vec<u8>) {
    (rows.iter().map(|r| (r.0, r.1)).collect(), rows.iter().map(|r| r.2).collect())
}

fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=10).prop_flat_map(|g| {
        let value = prop_oneof![(0u8..3).prop_map(f64::from), 0.0f64..1.0];
        (prop::collection::vec(value.clone(), g), prop::collection::vec(value, g))
    })
}

fn criterion() -> impl Strategy<Value = Criterion> {
    prop_oneof![Just(Criterion::AbsoluteDifference), Just(Criterion::CosineSimilarity)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_oracle(rows in labelled()) {
        let (cells, preds) = split(&rows);
        let r = evaluate(&preds, &dataset_from(&cells)).unwrap();
        let (acc, wst, eo, std) = oracle_metrics(&preds, &cells).unwrap();
        prop_assert!((r.acc - acc).abs() <= 1e-12);
        prop_assert!((r.wst - wst).abs() <= 1e-12);
        prop_assert!((r.eo - eo).abs() <= 1e-12);
        prop_assert!((r.std - std).abs() <= 1e-12);
    }

    #[test]
    fn sandwich_bounds(rows in labelled()) {
        let (cells, preds) = split(&rows);
        let r = evaluate(&preds, &dataset_from(&cells)).unwrap();
        let all: Vec<f64> = r.cell_acc.iter().flatten().copied().collect();
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let balanced = all.iter().sum::<f64>() / 4.0;
        prop_assert_eq!(r.wst, lo);
        prop_assert!(r.wst <= balanced + 1e-15);
        prop_assert!(lo - 1e-12 <= r.acc && r.acc <= hi + 1e-12);
    }

    #[test]
    fn eo_symmetric_in_protected_attribute(rows in labelled()) {
        let (cells, preds) = split(&rows);
        let swapped: Vec<(u8, u8)> = cells.iter().map(|&(y, s)| (y, 1 - s)).collect();
        let a = evaluate(&preds, &dataset_from(&cells)).unwrap();
        let b = evaluate(&preds, &dataset_from(&swapped)).unwrap();
        prop_assert!((a.eo - b.eo).abs() <= 1e-15);
    }

    #[test]
    fn eo_two_paths_agree(rows in labelled()) {
        let (cells, preds) = split(&rows);
        let stats = confusion_by_group(&preds, &dataset_from(&cells)).unwrap();
        let four = fairness_report(&stats).unwrap().eo;
        prop_assert!((four - equalized_odds_from_rate_gaps(&stats).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn label_permutation_covariance(rows in labelled()) {
        let (cells, preds) = split(&rows);
        let flipped: Vec<(u8, u8)> = cells.iter().map(|&(y, s)| (1 - y, s)).collect();
        let flipped_preds: Vec<u8> = preds.iter().map(|p| 1 - p).collect();
        let a = evaluate(&preds, &dataset_from(&cells)).unwrap();
        let b = evaluate(&flipped_preds, &dataset_from(&flipped)).unwrap();
        prop_assert_eq!(a.cell_acc[0], b.cell_acc[1]);
        prop_assert_eq!(a.cell_acc[1], b.cell_acc[0]);
        prop_assert!((a.eo - b.eo).abs() <= 1e-15);
        prop_assert_eq!(a.wst, b.wst);
        prop_assert!((a.std - b.std).abs() <= 1e-15);
        prop_assert_eq!(a.acc, b.acc);
    }

    #[test]
    fn pct_fields_are_scaled_fractions(rows in labelled()) {
        let (cells, preds) = split(&rows);
        let f = evaluate(&preds, &dataset_from(&cells)).unwrap().to_flat();
        for (frac, pct) in [(f.acc, f.acc_pct), (f.wst, f.wst_pct), (f.eo, f.eo_pct), (f.std, f.std_pct),
                            (f.cell_acc_y0s0, f.cell_acc_y0s0_pct), (f.cell_acc_y1s1, f.cell_acc_y1s1_pct)] {
            prop_assert!((100.0 * frac - pct).abs() <= 1e-9);
        }
    }

    #[test]
    fn mask_matches_oracle((d1, d2) in scores(), c in criterion()) {
        let rankings = rank_scores(&SensitivityScores { delta1: d1.clone(), delta2: d2.clone(), criterion: c });
        for k in 1..=d1.len() {
            let got = select_topk_intersection(&rankings, k).unwrap();
            prop_assert_eq!(got.selected, oracle_mask(&d1, &d2, k, c));
        }
    }

    #[test]
    fn rankings_are_permutations_and_scale_invariant((d1, d2) in scores(), c in criterion(), scale in 1e-3f64..1e3) {
        let base = rank_scores(&SensitivityScores { delta1: d1.clone(), delta2: d2.clone(), criterion: c });
        let g = d1.len();
        for r in [&base.r1, &base.r2] {
            let mut sorted = r.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..g).collect::<Vec<_>>());
        }
        let scaled = rank_scores(&SensitivityScores {
            delta1: d1.iter().map(|v| v * scale).collect(),
            delta2: d2.iter().map(|v| v * scale).collect(),
            criterion: c,
        });
        prop_assert_eq!(base, scaled);
    }

    #[test]
    fn mask_monotone_in_k((d1, d2) in scores(), c in criterion()) {
        let rankings = rank_scores(&SensitivityScores { delta1: d1.clone(), delta2: d2, criterion: c });
        let mut previous = vec![false; d1.len()];
        for k in 1..=d1.len() {
            let m = select_topk_intersection(&rankings, k).unwrap();
            prop_assert!(m.count_selected() <= k);
            prop_assert!(previous.iter().zip(&m.selected).all(|(p, n)| !p || *n));
            previous = m.selected;
        }
        prop_assert!(previous.iter().all(|&b| b));
    }

    #[test]
    fn mask_text_round_trip(selected in prop::collection::vec(any::<bool>(), 1..12), k in prop::option::of(1usize..12)) {
        let mask = SelectionMask { selected, k, provenance: Provenance::Smg };
        prop_assert_eq!(SelectionMask::from_text(&mask.to_text()).unwrap(), mask);
    }

    #[test]
    fn random_mask_size(g in 1usize..40, fraction in 0.01f64..=1.0, seed in any::<u64>()) {
        let m = random_mask(g, fraction, seed).unwrap();
        prop_assert_eq!(m.count_selected(), (fraction * g as f64).round() as usize);
        prop_assert_eq!(m, random_mask(g, fraction, seed).unwrap());
    }
}

fn small_arch() -> impl Strategy<Value = ModelArch> {
    (1usize..=6, prop::collection::vec(1usize..=6, 1..=2)).prop_map(|(d, h)| ModelArch::new(d, h))
}

fn examples_for(dim: usize, seed: u64, n: usize) -> Vec<Example> {
    common::random_examples(&mut common::rng(seed), n, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_matches_reference(arch in small_arch(), seed in any::<u64>(), n in 1usize..20) {
        let model = init_model(&arch, seed).unwrap();
        let ex = examples_for(arch.input_dim, seed ^ 1, n);
        let out = forward_loss(&model, &ex).unwrap();
        let (reference, _) = reference_loss(&model, &ex);
        prop_assert!((out.loss - reference).abs() <= 1e-12);
        for p in &out.probabilities {
            prop_assert!((p[0] + p[1] - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_mean_is_linear(arch in small_arch(), seed in any::<u64>(), na in 1usize..10, nb in 1usize..10) {
        let model = init_model(&arch, seed).unwrap();
        let a = examples_for(arch.input_dim, seed ^ 2, na);
        let b = examples_for(arch.input_dim, seed ^ 3, nb);
        let joint: Vec<Example> = a.iter().chain(&b).cloned().collect();
        let (ga, gb, gj) = (
            mean_gradient(&model, &a).unwrap(),
            mean_gradient(&model, &b).unwrap(),
            mean_gradient(&model, &joint).unwrap(),
        );
        let (na, nb) = (na as f64, nb as f64);
        for g in 0..gj.per_group.len() {
            for i in 0..gj.per_group[g].len() {
                let expected = (na * ga.per_group[g][i] + nb * gb.per_group[g][i]) / (na + nb);
                prop_assert!((gj.per_group[g][i] - expected).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn masked_update_touches_only_selected(arch in small_arch(), seed in any::<u64>(), bits in any::<u16>(), lr in 1e-3f64..2.0) {
        let model = init_model(&arch, seed).unwrap();
        let g = model.num_groups();
        let mask = SelectionMask::from_selected((0..g).map(|j| bits >> j & 1 == 1).collect());
        let grads = mean_gradient(&model, &examples_for(arch.input_dim, seed ^ 4, 8)).unwrap();
        let next = apply_update(&model, &grads, lr, &mask).unwrap();
        for j in 0..g {
            for (i, (&before, &after)) in model.groups[j].values.iter().zip(&next.groups[j].values).enumerate() {
                if mask.selected[j] {
                    prop_assert_eq!(after, before - lr * grads.per_group[j][i]);
                } else {
                    prop_assert_eq!(after.to_bits(), before.to_bits());
                }
            }
        }
    }

    #[test]
    fn training_freezes_unselected_groups(seed in any::<u64>(), bits in 1u8..63) {
        let arch = ModelArch::new(3, vec![4, 3]);
        let mut model = init_model(&arch, seed).unwrap();
        let before = model.clone();
        let mask = SelectionMask::from_selected((0..6).map(|j| bits >> j & 1 == 1).collect());
        let data = Dataset::new(examples_for(3, seed, 40), "p");
        train_masked(&mut model, &data, &mask, &TrainConfig::new(0.3, 3, 8, seed)).unwrap();
        for j in 0..6 {
            if !mask.selected[j] {
                prop_assert_eq!(&model.groups[j].values, &before.groups[j].values);
            }
        }
    }

    #[test]
    fn structural_masks_complement(block in 0usize..3) {
        let arch = ModelArch::default_desk();
        let up = structural_mask(&arch, StructuralSelector::UpdateBlock(block)).unwrap();
        let down = structural_mask(&arch, StructuralSelector::FreezeBlock(block)).unwrap();
        for j in 0..arch.num_groups() {
            prop_assert!(up.selected[j] ^ down.selected[j]);
        }
    }

    #[test]
    fn seed_factorization(seed in any::<u64>(), a in "[a-z_]{1,12}", b in "[a-z_]{1,12}") {
        prop_assert_eq!(derive_seed(seed, &a), derive_seed(seed, &a));
        if a != b {
            prop_assert_ne!(derive_seed(seed, &a), derive_seed(seed, &b));
        }
        prop_assert_ne!(derive_seed(seed, &a), derive_seed(seed.wrapping_add(1), &a));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn csv_round_trip(seed in any::<u64>(), n in 1usize..40) {
        let spec = DomainSpec { n_per_target: n, ..DomainSpec::default_real(0.7) };
        let data = fairtune::data::generate_domain_dataset(&spec, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv_dataset(&path, &data).unwrap();
        let back = load_csv_dataset(&path, None).unwrap();
        prop_assert_eq!(back.len(), data.len());
        for (a, b) in back.examples.iter().zip(&data.examples) {
            prop_assert_eq!((a.target, a.protected, a.domain), (b.target, b.protected, b.domain));
            prop_assert_eq!(&a.features, &b.features);
        }
        prop_assert_eq!(Domain::Real, back.examples[0].domain);
    }
}
