#![allow(dead_code)]

pub mod reference;

use ansgt_core::graph::{normalize_adjacency, Graph};
use ansgt_core::model::{
    encode_proximity, InputSequence, ModelConfig, ModelParams, ProximityEncoding, SparseFeatures,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Owned pieces of one tiny sequence: node and super-node features plus the
/// proximity encoding.
pub struct TinyCase {
    pub params: ModelParams,
    pub seq: InputSequence,
    pub nodes: SparseFeatures,
    pub supers: SparseFeatures,
    pub proximity: ProximityEncoding,
}

pub fn tiny_config(dropout: f64) -> ModelConfig {
    ModelConfig {
        input_dim: 5,
        hidden: 8,
        heads: 2,
        layers: 2,
        classes: 3,
        proximity_order: 3,
        global_tokens: 1,
        dropout,
    }
}

/// Length-6 sequence: center, two fine nodes plus one padded slot, one
/// super-node, one global token.
pub fn tiny_case(seed: u64, dropout: f64) -> TinyCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new(tiny_config(dropout), &mut rng).unwrap();
    // move every tensor off its initial value so norms and biases are exercised
    let flat: Vec<f64> = params
        .flatten()
        .iter()
        .map(|v| v + rng.random_range(-0.3..0.3))
        .collect();
    params.assign_flat(&flat).unwrap();
    let features = Array2::from_shape_fn((4, 5), |_| {
        if rng.random::<f64>() < 0.6 {
            rng.random_range(-1.0..1.0)
        } else {
            0.0
        }
    });
    let graph = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3)], features.clone(), None)
        .unwrap()
        .0;
    let adj = normalize_adjacency(&graph);
    let seq = InputSequence {
        center: 0,
        fine: vec![2, 1],
        fine_slots: 3,
        supers: vec![1],
        global_count: 1,
    };
    let members = vec![vec![0, 1], vec![2, 3]];
    let proximity = encode_proximity(&adj, &members, &seq, 3);
    let super_features = Array2::from_shape_fn((2, 5), |_| rng.random_range(-1.0..1.0));
    TinyCase {
        params,
        seq,
        nodes: SparseFeatures::from_dense(&features),
        supers: SparseFeatures::from_dense(&super_features),
        proximity,
    }
}

/// Erdős–Rényi graph with Gaussian features and `classes` random labels.
pub fn random_graph(n: usize, p: f64, dim: usize, classes: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let features = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0));
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Graph::from_edges(n, &edges, features, Some(labels))
        .unwrap()
        .0
        .with_num_classes(classes)
        .unwrap()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(mut a: Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .unwrap();
        for k in 0..n {
            a.swap([col, k], [pivot, k]);
            inv.swap([col, k], [pivot, k]);
        }
        let d = a[[col, col]];
        for k in 0..n {
            a[[col, k]] /= d;
            inv[[col, k]] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[[r, col]];
                for k in 0..n {
                    a[[r, k]] -= f * a[[col, k]];
                    inv[[r, k]] -= f * inv[[col, k]];
                }
            }
        }
    }
    inv
}
