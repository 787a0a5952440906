use gridfactor::partition::{bisect, fiedler_vector, laplacian, partition, ConnectivityGraph};
use gridfactor::Error;
use proptest::prelude::*;
use std::f64::consts::PI;

fn path(n: usize) -> ConnectivityGraph {
    ConnectivityGraph::new(n, (1..n).map(|i| (i - 1, i))).unwrap()
}

#[test]
fn path_and_cycle_eigenvalues() {
    for n in [2usize, 4, 7, 12] {
        let (lambda, v) = fiedler_vector(&laplacian(&path(n))).unwrap();
        assert!(
            (lambda - (2.0 - 2.0 * (PI / n as f64).cos())).abs() < 1e-9,
            "path {n}: {lambda}"
        );
        assert!((v.norm() - 1.0).abs() < 1e-9 && v.sum().abs() < 1e-9);
        let cycle =
            ConnectivityGraph::new(n.max(3), (0..n.max(3)).map(|i| (i, (i + 1) % n.max(3))))
                .unwrap();
        let (lambda, _) = fiedler_vector(&laplacian(&cycle)).unwrap();
        assert!((lambda - (2.0 - 2.0 * (2.0 * PI / n.max(3) as f64).cos())).abs() < 1e-9);
    }
    let complete =
        ConnectivityGraph::new(5, (0..5).flat_map(|i| (i + 1..5).map(move |j| (i, j)))).unwrap();
    assert!((fiedler_vector(&laplacian(&complete)).unwrap().0 - 5.0).abs() < 1e-9);
}

#[test]
fn path_of_four_splits_in_the_middle() {
    assert_eq!(bisect(&path(4)).unwrap(), (vec![0, 1], vec![2, 3]));
}

#[test]
fn disconnected_graph_is_rejected() {
    let g = ConnectivityGraph::new(4, [(0, 1), (2, 3)]).unwrap();
    assert!(matches!(
        fiedler_vector(&laplacian(&g)),
        Err(Error::Connectivity { .. })
    ));
}

fn connected_graph() -> impl Strategy<Value = ConnectivityGraph> {
    (3usize..30).prop_flat_map(|n| {
        let tree = (1..n)
            .map(|i| (0..i).prop_map(move |p| (p, i)))
            .collect::<Vec<_>>();
        let extra = proptest::collection::vec((0..n, 0..n), 0..n);
        (tree, extra).prop_map(move |(tree, extra)| {
            let edges: Vec<_> = tree
                .into_iter()
                .chain(extra.into_iter().filter(|(a, b)| a != b))
                .collect();
            ConnectivityGraph::new(n, edges).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_covers_every_node_once(g in connected_graph(), depth in 0usize..4, min_size in 1usize..5) {
        let p = partition(&g, depth, min_size).unwrap();
        prop_assert_eq!(p.assignment.len(), g.n);
        prop_assert!(p.sections.len() <= 1 << depth);
        let mut seen = vec![false; g.n];
        for (s, nodes) in p.sections.iter().enumerate() {
            prop_assert!(!nodes.is_empty());
            for &v in nodes {
                prop_assert!(!seen[v]);
                seen[v] = true;
                prop_assert_eq!(p.assignment[v], s);
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        let crossing: usize = p.section_adjacency.iter().map(|t| t.2).sum();
        let cut = g.edges.iter().filter(|&&(a, b)| p.assignment[a] != p.assignment[b]).count();
        prop_assert_eq!(crossing, cut);
    }

    #[test]
    fn fiedler_vector_is_a_unit_eigenvector_orthogonal_to_ones(g in connected_graph()) {
        let l = laplacian(&g);
        let (lambda, v) = fiedler_vector(&l).unwrap();
        prop_assert!(lambda > 0.0);
        prop_assert!((&l * &v - &v * lambda).amax() < 1e-6);
        prop_assert!(v.sum().abs() < 1e-8);
        prop_assert!((v.norm() - 1.0).abs() < 1e-8);
    }
}
