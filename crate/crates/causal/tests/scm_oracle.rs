use cib_causal::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn factorisation_matches_intervention_on_random_models() {
    let results = check_eq1_random(20, 3, 100).unwrap();
    assert_eq!(results.len(), 20);
    for r in &results {
        assert!(r.passed(), "seed {} differs by {:e}", r.seed, r.max_abs_diff);
    }
}

#[test]
fn deterministic_models_agree_exactly() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scm = DiscreteSCM::random_deterministic(training_scm_graph(), 3, &mut rng);
        // only the realised configuration has positive probability
        let x = exact_query(&scm, &QuerySpec::new("X")).unwrap().iter().position(|&p| p == 1.0).unwrap();
        let dx = exact_query(&scm, &QuerySpec::new("D_X")).unwrap().iter().position(|&p| p == 1.0).unwrap();
        let dy = exact_query(&scm, &QuerySpec::new("D_Y")).unwrap().iter().position(|&p| p == 1.0).unwrap();
        let lhs = interventional_query(&scm, x, dx, dy).unwrap();
        let rhs = eq1_factorized_query(&scm, x, dx, dy).unwrap();
        assert_eq!(lhs, rhs);
    }
}

#[test]
fn inert_confounder_reduces_to_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scm = DiscreteSCM::random(training_scm_graph(), 3, &mut rng);
    let k = scm.card("U_XY").unwrap();
    let mut row = vec![0.0; k];
    row[0] = 1.0;
    let scm = scm.with_cpt("U_XY", row).unwrap();
    for x in 0..scm.card("X").unwrap() {
        for dx in 0..scm.card("D_X").unwrap() {
            for dy in 0..scm.card("D_Y").unwrap() {
                let rhs = eq1_factorized_query(&scm, x, dx, dy).unwrap();
                let q = QuerySpec::new("Y").observe("X", x).observe("D_X", dx).observe("D_Y", dy);
                let plain = exact_query(&scm, &q).unwrap();
                for (a, b) in rhs.iter().zip(&plain) {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn confounding_makes_intervention_differ_from_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scm = DiscreteSCM::random(training_scm_graph(), 3, &mut rng);
    let doq = interventional_query(&scm, 0, 0, 0).unwrap();
    let obs = exact_query(&scm, &QuerySpec::new("Y").observe("X", 0).observe("D_X", 0).observe("D_Y", 0)).unwrap();
    let gap = doq.iter().zip(&obs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-6, "{gap}");
}

#[test]
fn exact_query_matches_rejection_sampling() {
    let g = CausalGraph::new(
        &[("U", Role::Latent), ("X", Role::Observed), ("Y", Role::Observed)],
        &[("U", "X"), ("U", "Y"), ("X", "Y")],
    )
    .unwrap();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scm = DiscreteSCM::random(g.clone(), 3, &mut rng);
        let (x, y) = (g.index("X").unwrap(), g.index("Y").unwrap());
        let xv = rng.random_range(0..scm.cards()[x]);
        let samples = 100_000;
        for interventional in [true, false] {
            let q = if interventional { QuerySpec::new("Y").intervene("X", xv) } else { QuerySpec::new("Y").observe("X", xv) };
            let exact = exact_query(&scm, &q).unwrap();
            let clamp: Vec<(usize, usize)> = if interventional { vec![(x, xv)] } else { vec![] };
            let mut counts = vec![0usize; scm.cards()[y]];
            let mut kept = 0;
            for _ in 0..samples {
                let s = scm.sample(&clamp, &mut rng);
                if s[x] == xv {
                    kept += 1;
                    counts[s[y]] += 1;
                }
            }
            assert!(kept > 1000);
            for (p, &c) in exact.iter().zip(&counts) {
                let est = c as f64 / kept as f64;
                let se = (p * (1.0 - p) / kept as f64).sqrt();
                assert!((est - p).abs() <= 3.0 * se + 1e-12, "seed {seed}: {est} vs {p} (se {se})");
            }
        }
    }
}
