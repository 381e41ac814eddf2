//! Shared fixtures for the integration tests.

use gust_core::rand_util::{seeded_rng, standard_normal_matrix};
use gust_core::Graph;

/// Deterministic 12-node, 3-class graph: three clusters with a few cross
/// edges, class-shifted Gaussian features, two labeled nodes per class.
pub fn twelve_node_fixture() -> (Graph, usize) {
    let num_classes = 3;
    let feature_dim = 6;
    let n = 12;
    let edges = vec![
        (0, 1),
        (1, 2),
        (2, 3),
        (0, 2),
        (4, 5),
        (5, 6),
        (6, 7),
        (4, 6),
        (8, 9),
        (9, 10),
        (10, 11),
        (8, 10),
        (3, 4),
        (7, 8),
        (0, 11),
    ];
    let mut rng = seeded_rng(99);
    let mut features = standard_normal_matrix(&mut rng, n, feature_dim);
    for i in 0..n {
        let class = i / 4;
        let v = features.get(i, class) + 1.5;
        features.set(i, class, v);
    }
    let labels: Vec<Option<usize>> = (0..n).map(|i| Some(i / 4)).collect();
    let train_mask = vec![0, 1, 4, 5, 8, 9];
    let val_mask = vec![2, 6, 10];
    let test_mask = vec![3, 7, 11];
    let graph = Graph::new(edges, features, labels, train_mask, val_mask, test_mask).unwrap();
    (graph, num_classes)
}
