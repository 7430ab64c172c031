use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use logvig::graphkit::{
    bit_depth, build_grid, build_lsgc_adjacency, build_svga_adjacency, effective_offsets, Adjacency, GraphKind,
};
use logvig::graphstat::{avg_shortest_path, distance_totals};
use logvig::tensor::{Axis, Tensor};
use logvig::verify::{brute_force_fold, equivariance_case, oracle_case};
use logvig::vigblocks::{fold_tensor, GrapherKind, RelativeSign};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lsgc_symmetric_and_degree_bounded(h in 1usize..40, w in 1usize..40, k in 2usize..5) {
        let adj = build_lsgc_adjacency(h, w, k).unwrap();
        prop_assert!(adj.is_symmetric());
        adj.validate().unwrap();
        let bound = 2 * (bit_depth(h as i64).unwrap() + bit_depth(w as i64).unwrap()) as usize;
        let exact = effective_offsets(h, k).unwrap().len() + effective_offsets(w, k).unwrap().len();
        for p in 0..adj.node_count() {
            prop_assert!(!adj.neighbors[p].contains(&p));
            prop_assert_eq!(adj.degree(p), exact);
            prop_assert!(adj.degree(p) <= bound);
        }
    }

    #[test]
    fn svga_symmetric(h in 1usize..30, w in 1usize..30, k in 1usize..5) {
        let adj = build_svga_adjacency(h, w, k).unwrap();
        prop_assert!(adj.is_symmetric());
        prop_assert!((0..adj.node_count()).all(|p| !adj.neighbors[p].contains(&p)));
    }

    #[test]
    fn adjacency_json_round_trips(kind in prop::sample::select(vec![GraphKind::Lsgc, GraphKind::Svga, GraphKind::Lattice]),
                                  h in 1usize..10, w in 1usize..10) {
        let adj = build_grid(kind, h, w, 2).unwrap();
        prop_assert_eq!(Adjacency::from_json(&adj.to_json()).unwrap(), adj);
    }

    #[test]
    fn parallel_bfs_matches_sequential(h in 1usize..12, w in 1usize..12) {
        let adj = build_lsgc_adjacency(h, w, 2).unwrap();
        prop_assert_eq!(distance_totals(&adj, true), distance_totals(&adj, false));
    }

    #[test]
    fn shifts_compose(h in 1usize..9, w in 1usize..9, a in -20isize..20, b in -20isize..20, seed in 0u64..1000) {
        let x = Tensor::<f64>::randn([1, 2, h, w], &mut ChaCha8Rng::seed_from_u64(seed));
        for axis in [Axis::H, Axis::W] {
            let two = x.circular_shift(axis, a).circular_shift(axis, b);
            prop_assert_eq!(two, x.circular_shift(axis, a + b));
        }
        let dim = h as isize;
        prop_assert_eq!(x.circular_shift(Axis::H, dim), x.clone());
    }

    #[test]
    fn fold_is_nonnegative_and_matches_oracle(h in 1usize..10, w in 1usize..10, seed in 0u64..1000) {
        let x = Tensor::<f64>::randn([1, 2, h, w], &mut ChaCha8Rng::seed_from_u64(seed));
        let fold = fold_tensor(&x, GrapherKind::Lsgc, 2, RelativeSign::SelfMinusNeighbor).unwrap();
        prop_assert!(fold.data().iter().all(|&v| v >= 0.0));
        let want = brute_force_fold(&x, &build_lsgc_adjacency(h, w, 2).unwrap());
        prop_assert_eq!(fold, want);
    }
}

#[test]
fn oracle_holds_on_two_hundred_cases_per_kind() {
    for kind in [GrapherKind::Lsgc, GrapherKind::Svga] {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let (desc, ok) = oracle_case(kind, &mut rng).unwrap();
            assert!(ok, "{desc}");
        }
    }
}

#[test]
fn translation_equivariance_on_other_seeds() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let (desc, ok) = equivariance_case(&mut rng).unwrap();
        assert!(ok, "{desc}");
    }
}

#[test]
fn neighbor_minus_self_is_the_mirror_fold() {
    let x = Tensor::<f64>::randn([1, 3, 6, 5], &mut ChaCha8Rng::seed_from_u64(3));
    let neg = x.map(|v| -v);
    let a = fold_tensor(&x, GrapherKind::Lsgc, 2, RelativeSign::NeighborMinusSelf).unwrap();
    let b = fold_tensor(&neg, GrapherKind::Lsgc, 2, RelativeSign::SelfMinusNeighbor).unwrap();
    assert_eq!(a, b);
}

#[test]
fn lsgc_spans_faster_than_the_lattice() {
    for n in [5, 9, 16] {
        let l = avg_shortest_path(&build_lsgc_adjacency(n, n, 2).unwrap()).unwrap();
        let g = avg_shortest_path(&build_grid(GraphKind::Lattice, n, n, 2).unwrap()).unwrap();
        assert!(l < g, "n={n}: {l} vs {g}");
    }
}
