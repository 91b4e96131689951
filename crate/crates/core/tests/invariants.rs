//! Randomized invariants, 100 cases each.

mod common;

use ansgt_core::bandit::{combined_distribution, probabilities_from_weights, BanditState};
use ansgt_core::coarsening::{coarsen, CoarsenMethod};
use ansgt_core::graph::{homophily, normalize_adjacency};
use ansgt_core::heuristics::{HeuristicKind, PprParams, QTable, SamplingRow};
use ansgt_core::model::{significance, AttentionRecord, InputSequence, TokenInput};
use ansgt_core::synthetic::{expected_homophily, generate_newman, NewmanConfig};
use common::{random_graph, tiny_case};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(100)
}

fn row_from(center: usize, kind: HeuristicKind, weights: &[(usize, f64)]) -> SamplingRow {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    SamplingRow {
        center,
        kind,
        support: weights.iter().map(|w| w.0).collect(),
        probs: weights.iter().map(|w| w.1 / total).collect(),
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn bandit_probs_sum_to_one_above_floor(
        weights in prop::collection::vec(0.0f64..5.0, 4),
        p_min in 0.001f64..0.249,
        rewards in prop::collection::vec(prop::collection::vec(-3.0f64..30.0, 4), 0..40),
    ) {
        prop_assume!(weights.iter().sum::<f64>() > 0.0);
        let p = probabilities_from_weights(&weights, p_min).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v >= p_min - 1e-12));
        let mut b = BanditState::new(4, p_min, 10, 20).unwrap();
        for r in &rewards {
            b.update(r).unwrap();
            prop_assert!((b.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(b.probs.iter().all(|&v| v >= p_min - 1e-12));
            prop_assert!(b.weights.iter().all(|w| w.is_finite()));
        }
    }

    #[test]
    fn mixture_is_a_distribution(
        rows in prop::collection::vec(prop::collection::btree_map(0usize..30, 0.01f64..1.0, 0..8), 4),
        weights in prop::collection::vec(0.01f64..1.0, 4),
    ) {
        let p = probabilities_from_weights(&weights, 0.1).unwrap();
        let rows: Vec<SamplingRow> = rows
            .iter()
            .zip(HeuristicKind::ALL)
            .map(|(m, k)| {
                let w: Vec<(usize, f64)> = m.iter().map(|(&j, &v)| (j, v)).collect();
                if w.is_empty() { SamplingRow::empty(0, k) } else { row_from(0, k, &w) }
            })
            .collect();
        match combined_distribution(&p, &rows) {
            Ok(psi) => {
                prop_assert!((psi.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(psi.support.windows(2).all(|w| w[0] < w[1]));
            }
            Err(_) => prop_assert!(rows.iter().all(SamplingRow::is_empty)),
        }
    }

    #[test]
    fn sampling_rows_are_normalized(seed in 0u64..1_000_000, n in 5usize..40, limit in 1usize..12) {
        let g = random_graph(n, 0.15, 3, 2, seed);
        let adj = normalize_adjacency(&g);
        let q = QTable::build(&g, &adj, &PprParams::default(), limit);
        for c in 0..n {
            for row in q.rows(c) {
                prop_assert!(row.support.len() <= limit);
                prop_assert!(!row.support.contains(&c));
                prop_assert!(row.probs.iter().all(|&v| v > 0.0));
                if !row.is_empty() {
                    prop_assert!((row.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn partition_columns_are_orthonormal(seed in 0u64..1_000_000, n in 2usize..60, rate in 0.05f64..1.0, merge in any::<bool>()) {
        let g = random_graph(n, 0.1, 1, 2, seed);
        let method = if merge { CoarsenMethod::NeighborhoodMerge } else { CoarsenMethod::EdgeMatch };
        let part = coarsen(&g, rate, method).unwrap();
        let p = part.dense_normalized();
        let ptp = p.t().dot(&p);
        for ((i, j), v) in ptp.indexed_iter() {
            let expected = if i == j { 1.0 } else { 0.0 };
            prop_assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_normalize_and_mask(seed in 0u64..1_000_000, fine in 0usize..4) {
        let mut case = tiny_case(seed, 0.5);
        case.seq = InputSequence { fine: [2, 1, 3][..fine.min(3)].to_vec(), ..case.seq.clone() };
        let input = TokenInput::new(&case.seq, case.proximity.clone(), &case.nodes, &case.supers);
        let pass = case.params.forward::<ChaCha8Rng>(&input, None).unwrap();
        for layer in 0..2 {
            for head in 0..2 {
                let a = pass.attention(layer, head);
                for row in a.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                    for (j, &v) in row.iter().enumerate() {
                        prop_assert!(v >= 0.0);
                        if !input.valid[j] {
                            prop_assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
        for layer in &pass.record.attention {
            for head in layer {
                prop_assert_eq!(head.len(), fine.min(3));
                prop_assert!(head.iter().sum::<f64>() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn significance_is_a_distribution(
        layers in 1usize..4,
        heads in 1usize..4,
        fine in 1usize..10,
        values in prop::collection::vec(0.0f64..1.0, 72..=72),
        norms in prop::collection::vec(0.0f64..3.0, 72..=72),
    ) {
        let mut idx = 0;
        let mut record = AttentionRecord { attention: vec![], value_norms: vec![] };
        for _ in 0..layers {
            let mut la = vec![];
            let mut lv = vec![];
            for _ in 0..heads {
                la.push((0..fine).map(|i| values[(idx + i) % 72] / fine as f64).collect());
                lv.push((0..fine).map(|i| norms[(idx + i) % 72]).collect());
                idx += fine;
            }
            record.attention.push(la);
            record.value_norms.push(lv);
        }
        let s = significance(&record);
        prop_assert_eq!(s.len(), fine);
        prop_assert!(s.iter().all(|&v| v >= 0.0));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn logits_ignore_fine_token_order(seed in 0u64..1_000_000) {
        let case = tiny_case(seed, 0.5);
        let input = TokenInput::new(&case.seq, case.proximity.clone(), &case.nodes, &case.supers);
        let swapped_seq = InputSequence { fine: vec![1, 2], ..case.seq.clone() };
        let mut prox = case.proximity.clone();
        let (r1, r2) = (prox.values.row(1).to_owned(), prox.values.row(2).to_owned());
        prox.values.row_mut(1).assign(&r2);
        prox.values.row_mut(2).assign(&r1);
        let swapped = TokenInput::new(&swapped_seq, prox, &case.nodes, &case.supers);
        let a = case.params.forward::<ChaCha8Rng>(&input, None).unwrap();
        let b = case.params.forward::<ChaCha8Rng>(&swapped, None).unwrap();
        for (x, y) in a.logits.iter().zip(b.logits.iter()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        // evaluation mode is deterministic
        let c = case.params.forward::<ChaCha8Rng>(&input, None).unwrap();
        prop_assert_eq!(a.logits, c.logits);
    }
}

#[test]
fn doubling_values_keeps_significance() {
    for seed in 0..20 {
        let case = tiny_case(seed, 0.0);
        let input = TokenInput::new(&case.seq, case.proximity.clone(), &case.nodes, &case.supers);
        let base = case.params.forward::<ChaCha8Rng>(&input, None).unwrap();
        // scaling only the last layer's values leaves its attention untouched
        let mut doubled = case.params.clone();
        let last = doubled.layers.last_mut().unwrap();
        last.value.weight *= 2.0;
        last.value.bias *= 2.0;
        let twice = doubled.forward::<ChaCha8Rng>(&input, None).unwrap();
        let rec_a = &base.record;
        let rec_b = &twice.record;
        for (a, b) in rec_a.value_norms[1].iter().zip(&rec_b.value_norms[1]) {
            for (x, y) in a.iter().zip(b) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
        // a record with every value norm doubled normalizes to the same scores
        let mut scaled = rec_a.clone();
        scaled.value_norms.iter_mut().flatten().flatten().for_each(|v| *v *= 2.0);
        let (s1, s2) = (significance(rec_a), significance(&scaled));
        for (x, y) in s1.iter().zip(&s2) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn newman_homophily_matches_expectation() {
    for (z_in, z_out) in [(12.0, 4.0), (4.0, 12.0), (0.8, 15.2)] {
        let cfg = NewmanConfig { z_in, z_out, ..NewmanConfig::default() };
        let mean: f64 = (0..20)
            .map(|seed| homophily(&generate_newman(&NewmanConfig { seed, ..cfg.clone() }).unwrap()).unwrap())
            .sum::<f64>()
            / 20.0;
        let expected = expected_homophily(&cfg).unwrap();
        assert!((mean - expected).abs() < 0.03, "z_in {z_in}: {mean} vs {expected}");
    }
}

#[test]
fn newman_attribute_densities() {
    let g = generate_newman(&NewmanConfig::default()).unwrap();
    let x = g.features();
    let labels = g.labels().unwrap();
    let (mut inside, mut in_count, mut outside, mut out_count) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..g.n() {
        for j in 0..200 {
            if j / 50 == labels[i] {
                inside += x[[i, j]];
                in_count += 1.0;
            } else {
                outside += x[[i, j]];
                out_count += 1.0;
            }
        }
    }
    assert!((inside / in_count - 12.0 / 50.0).abs() < 0.03);
    assert!((outside / out_count - 4.0 / 150.0).abs() < 0.01);
}
