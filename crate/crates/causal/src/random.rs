//! Random graphs and query sets for property tests and oracles.

use rand::Rng;

use crate::graph::{CausalGraph, Role};

/// DAG on `n` observed nodes `V0..`; each forward pair `i < j` is an edge with
/// probability `p`.
pub fn random_dag(n: usize, p: f64, rng: &mut impl Rng) -> CausalGraph {
    let nodes = (0..n).map(|i| (format!("V{i}"), Role::Observed)).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((format!("V{i}"), format!("V{j}")));
            }
        }
    }
    CausalGraph::from_parts(nodes, edges).expect("forward edges are acyclic")
}

/// Disjoint node sets `(a, b, z)` with `a` and `b` nonempty; needs `n >= 2`.
pub fn random_query_sets(n: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let (mut a, mut b, mut z) = (vec![perm[0]], vec![perm[1]], Vec::new());
    for &v in &perm[2..] {
        match rng.random_range(0..4) {
            0 => a.push(v),
            1 => b.push(v),
            2 => z.push(v),
            _ => {}
        }
    }
    (a, b, z)
}
