use cib_causal::random::{random_dag, random_query_sets};
use cib_causal::{d_separated_by_paths, d_separated_idx, CausalGraph, Role};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_path_enumeration_on_random_dags() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut disagreements = 0;
    let mut separated = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=9);
        let p = rng.random_range(0.15..0.6);
        let g = random_dag(n, p, &mut rng);
        let (a, b, z) = random_query_sets(n, &mut rng);
        let fast = d_separated_idx(&g, &a, &b, &z).unwrap();
        let slow = d_separated_by_paths(&g, &a, &b, &z).unwrap();
        disagreements += (fast != slow) as usize;
        separated += fast as usize;
    }
    assert_eq!(disagreements, 0);
    // both outcomes must be well represented for the comparison to mean anything
    assert!((50..450).contains(&separated), "{separated}");
}

fn arb_graph() -> impl Strategy<Value = (CausalGraph, Vec<usize>, Vec<usize>)> {
    (2usize..8, any::<u64>(), 0.1f64..0.7).prop_map(|(n, seed, p)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_dag(n, p, &mut rng);
        let inc: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
        let out: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
        (g, inc, out)
    })
}

proptest! {
    #[test]
    fn surgery_keeps_graphs_acyclic_and_only_removes_edges((g, inc, out) in arb_graph()) {
        let name = |v: &usize| g.name(*v).to_string();
        let inc: Vec<String> = inc.iter().map(name).collect();
        let out: Vec<String> = out.iter().map(name).collect();
        let cut = g.surgery(&inc, &out).unwrap();
        prop_assert!(cut.topo_order().is_ok());
        let before = g.edges();
        for (a, b) in cut.edges() {
            prop_assert!(before.contains(&(a.clone(), b.clone())));
            prop_assert!(!inc.contains(&b) && !out.contains(&a));
        }
        prop_assert_eq!(cut.surgery(&inc, &out).unwrap(), cut);
    }

    #[test]
    fn d_separation_is_symmetric(seed in any::<u64>(), n in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_dag(n, 0.4, &mut rng);
        let (a, b, z) = random_query_sets(n, &mut rng);
        prop_assert_eq!(d_separated_idx(&g, &a, &b, &z).unwrap(), d_separated_idx(&g, &b, &a, &z).unwrap());
    }
}

#[test]
fn roles_do_not_change_separation() {
    let obs = CausalGraph::new(&[("A", Role::Observed), ("U", Role::Observed), ("B", Role::Observed)], &[("U", "A"), ("U", "B")]).unwrap();
    let lat = CausalGraph::new(&[("A", Role::Observed), ("U", Role::Latent), ("B", Role::Observed)], &[("U", "A"), ("U", "B")]).unwrap();
    for g in [obs, lat] {
        assert!(!d_separated_idx(&g, &[0], &[2], &[]).unwrap());
        assert!(d_separated_idx(&g, &[0], &[2], &[1]).unwrap());
    }
}
