//! Randomized invariants of the summary, scoring and data layers.

use cmflow::data::{center_columns, scatter_matrix, Dataset, Edge};
use cmflow::eval::{credible_intervals, edge_pairs, edge_set, f1_score};
use cmflow::flow::PrecisionSample;
use cmflow::target::{gen_normal_logprior, Condition};
use nalgebra::DMatrix;
use proptest::collection::{btree_set, vec};
use proptest::prelude::*;
use std::collections::BTreeSet;

const D: usize = 4;

fn samples_strategy() -> impl Strategy<Value = Vec<PrecisionSample>> {
    let packed = D * (D + 1) / 2;
    vec(vec(-3.0f64..3.0, packed), 5..80).prop_map(|rows| {
        rows.into_iter()
            .map(|v| PrecisionSample {
                omega: cmflow::linalg::unpack_symmetric(&v, D),
                cross: None,
                log_q: 0.0,
                z: Vec::new(),
            })
            .collect()
    })
}

fn pairs_strategy(d: usize) -> impl Strategy<Value = BTreeSet<Edge>> {
    btree_set((0..d, 0..d).prop_filter_map("off-diagonal", |(a, b)| (a != b).then(|| (a.min(b), a.max(b)))), 0..8)
}

fn relabel(edges: &BTreeSet<Edge>, perm: &[usize]) -> BTreeSet<Edge> {
    edges
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (perm[i], perm[j]);
            (a.min(b), a.max(b))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn intervals_nest_with_level(samples in samples_strategy(), g1 in 0.05f64..0.95, dg in 0.0f64..0.04) {
        let g2 = g1 + dg;
        let narrow = credible_intervals(&samples, g1, (1.0, 1.0, 1.0)).unwrap();
        let wide = credible_intervals(&samples, g2, (1.0, 1.0, 1.0)).unwrap();
        for e in 0..narrow.entries.len() {
            prop_assert!(wide.lower[e] <= narrow.lower[e]);
            prop_assert!(narrow.upper[e] <= wide.upper[e]);
        }
        let (edges_narrow, edges_wide) = (edge_pairs(&edge_set(&narrow)), edge_pairs(&edge_set(&wide)));
        prop_assert!(edges_wide.is_subset(&edges_narrow));
    }

    #[test]
    fn f1_is_invariant_under_relabeling(
        predicted in pairs_strategy(6),
        truth in pairs_strategy(6),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let base = f1_score(&predicted, &truth);
        let moved = f1_score(&relabel(&predicted, &perm), &relabel(&truth, &perm));
        prop_assert_eq!(base, moved);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn prior_is_continuous_in_q(
        v in vec(-2.0f64..2.0, 6),
        lambda in 0.1f64..10.0,
        q in 0.1f64..3.0,
    ) {
        let mut omega = cmflow::linalg::unpack_symmetric(&v, 3);
        for i in 0..3 {
            omega[(i, i)] = omega[(i, i)].abs() + 1.0;
        }
        let at = |qq: f64| gen_normal_logprior(&omega, &Condition::new(lambda, qq, 1.0).unwrap());
        let h = 1e-7;
        let step = (at((q + h).min(3.0)) - at(q)).abs();
        prop_assert!(step < 1e-4, "jump {step} at q={q}");
    }

    #[test]
    fn shifting_rows_leaves_the_scatter_unchanged(
        x in vec(-5.0f64..5.0, 24),
        shift in vec(-100.0f64..100.0, 4),
    ) {
        let x = DMatrix::from_row_slice(6, 4, &x);
        let moved = DMatrix::from_fn(6, 4, |r, c| x[(r, c)] + shift[c]);
        let names: Vec<String> = (0..4).map(|i| format!("x{i}")).collect();
        let (a, b) = (Dataset::new(x, names.clone()), Dataset::new(moved, names));
        prop_assert!((&a.scatter - &b.scatter).amax() < 1e-9);
        prop_assert!((center_columns(&a.x) - &a.x).amax() < 1e-12);
        // scatter of centered data is positive semidefinite
        let eig = a.scatter.clone().symmetric_eigenvalues();
        prop_assert!(eig.iter().all(|&l| l >= -1e-10));
        prop_assert!((scatter_matrix(&a.x) - &a.scatter).amax() < 1e-9);
    }

    #[test]
    fn block_parts_tile_the_scatter(x in vec(-5.0f64..5.0, 30), s in 1usize..5) {
        let ds = Dataset::new(DMatrix::from_row_slice(6, 5, &x), (0..5).map(|i| format!("x{i}")).collect());
        let (s11, s12, s22) = ds.block_parts(s);
        let mut whole = DMatrix::zeros(5, 5);
        whole.view_mut((0, 0), (s, s)).copy_from(&s11);
        whole.view_mut((0, s), (s, 5 - s)).copy_from(&s12);
        whole.view_mut((s, 0), (5 - s, s)).copy_from(&s12.transpose());
        whole.view_mut((s, s), (5 - s, 5 - s)).copy_from(&s22);
        prop_assert_eq!(whole, ds.scatter);
    }
}
