use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{CausalError, Result};
use crate::graph::CausalGraph;

/// Largest joint state space `exact_query` will enumerate.
pub const MAX_STATES: u128 = 10_000_000;

const ROW_TOL: f64 = 1e-12;

/// Discrete structural causal model: one conditional table per node.
///
/// `cpts[v]` holds P(v | parents) row-major: the row index is the parent
/// configuration in mixed radix over `graph.parents(v)` (first parent most
/// significant), and each row has `cards[v]` entries.
#[derive(Debug, Clone)]
pub struct DiscreteSCM {
    graph: CausalGraph,
    cards: Vec<usize>,
    cpts: Vec<Vec<f64>>,
}

impl DiscreteSCM {
    pub fn new(graph: CausalGraph, cards: Vec<usize>, cpts: Vec<Vec<f64>>) -> Result<Self> {
        if cards.len() != graph.len() || cpts.len() != graph.len() {
            return Err(CausalError::Model(format!(
                "{} nodes but {} cardinalities and {} tables",
                graph.len(),
                cards.len(),
                cpts.len()
            )));
        }
        for v in 0..graph.len() {
            if cards[v] < 2 {
                return Err(CausalError::Model(format!("{} has cardinality {}", graph.name(v), cards[v])));
            }
        }
        let scm = DiscreteSCM { graph, cards, cpts };
        for v in 0..scm.graph.len() {
            scm.check_table(v, &scm.cpts[v])?;
        }
        Ok(scm)
    }

    fn rows(&self, v: usize) -> usize {
        self.graph.parents(v).iter().map(|&p| self.cards[p]).product()
    }

    fn check_table(&self, v: usize, table: &[f64]) -> Result<()> {
        let name = self.graph.name(v);
        let want = self.rows(v) * self.cards[v];
        if table.len() != want {
            return Err(CausalError::Model(format!("table for {name} has {} entries, expected {want}", table.len())));
        }
        for (r, row) in table.chunks(self.cards[v]).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(CausalError::Model(format!("table for {name} row {r} has an entry outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(CausalError::Model(format!("table for {name} row {r} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// Random model on `graph`: cardinalities uniform in `2..=max_card`,
    /// table rows uniform on the simplex.
    pub fn random(graph: CausalGraph, max_card: usize, rng: &mut impl Rng) -> Self {
        Self::random_with(graph, max_card, rng, |k, rng| {
            let mut row: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            row
        })
    }

    /// Random model whose every table row puts all mass on one value.
    pub fn random_deterministic(graph: CausalGraph, max_card: usize, rng: &mut impl Rng) -> Self {
        Self::random_with(graph, max_card, rng, |k, rng| {
            let hot = rng.random_range(0..k);
            (0..k).map(|i| if i == hot { 1.0 } else { 0.0 }).collect()
        })
    }

    fn random_with<R: Rng>(graph: CausalGraph, max_card: usize, rng: &mut R, mut row: impl FnMut(usize, &mut R) -> Vec<f64>) -> Self {
        let max_card = max_card.max(2);
        let cards: Vec<usize> = (0..graph.len()).map(|_| rng.random_range(2..=max_card)).collect();
        let cpts = (0..graph.len())
            .map(|v| {
                let rows: usize = graph.parents(v).iter().map(|&p| cards[p]).product();
                (0..rows).flat_map(|_| row(cards[v], rng)).collect()
            })
            .collect();
        DiscreteSCM { graph, cards, cpts }
    }

    pub fn graph(&self) -> &CausalGraph {
        &self.graph
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn card(&self, name: &str) -> Result<usize> {
        Ok(self.cards[self.graph.index(name)?])
    }

    pub fn cpt(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.cpts[self.graph.index(name)?])
    }

    /// Replaces one node's table.
    pub fn with_cpt(&self, name: &str, table: Vec<f64>) -> Result<Self> {
        let v = self.graph.index(name)?;
        self.check_table(v, &table)?;
        let mut out = self.clone();
        out.cpts[v] = table;
        Ok(out)
    }

    pub fn state_space(&self) -> u128 {
        self.cards.iter().map(|&c| c as u128).product()
    }

    /// P(v = value | parents as in `assignment`).
    pub fn prob(&self, v: usize, assignment: &[usize]) -> f64 {
        let row = self.graph.parents(v).iter().fold(0, |acc, &p| acc * self.cards[p] + assignment[p]);
        self.cpts[v][row * self.cards[v] + assignment[v]]
    }

    /// Calls `visit(assignment, probability)` for every configuration with
    /// nonzero weight. `fixed[v] = Some((value, weighted))` pins a node; an
    /// unweighted pin is an intervention and contributes no factor.
    pub fn enumerate(&self, fixed: &[Option<(usize, bool)>], mut visit: impl FnMut(&[usize], f64)) -> Result<()> {
        if self.state_space() > MAX_STATES {
            return Err(CausalError::StateSpace(self.state_space()));
        }
        let order = self.graph.topo_order()?;
        let mut assignment = vec![0; self.graph.len()];
        self.walk(&order, fixed, 0, 1.0, &mut assignment, &mut visit);
        Ok(())
    }

    fn walk(&self, order: &[usize], fixed: &[Option<(usize, bool)>], depth: usize, weight: f64, a: &mut [usize], visit: &mut impl FnMut(&[usize], f64)) {
        if weight == 0.0 {
            return;
        }
        let Some(&v) = order.get(depth) else {
            visit(a, weight);
            return;
        };
        match fixed[v] {
            Some((value, weighted)) => {
                a[v] = value;
                let w = if weighted { weight * self.prob(v, a) } else { weight };
                self.walk(order, fixed, depth + 1, w, a, visit);
            }
            None => {
                for value in 0..self.cards[v] {
                    a[v] = value;
                    let w = weight * self.prob(v, a);
                    self.walk(order, fixed, depth + 1, w, a, visit);
                }
            }
        }
    }

    /// One forward sample with the given nodes clamped.
    pub fn sample(&self, interventions: &[(usize, usize)], rng: &mut impl Rng) -> Vec<usize> {
        let mut a = vec![0; self.graph.len()];
        for v in self.graph.topo_order().expect("validated acyclic") {
            if let Some(&(_, value)) = interventions.iter().find(|(n, _)| *n == v) {
                a[v] = value;
                continue;
            }
            let u: f64 = rng.random();
            let mut acc = 0.0;
            a[v] = self.cards[v] - 1;
            for value in 0..self.cards[v] {
                a[v] = value;
                acc += self.prob(v, &a);
                if u < acc {
                    break;
                }
            }
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySpec {
    pub target: String,
    pub interventions: Vec<(String, usize)>,
    pub observations: Vec<(String, usize)>,
}

impl QuerySpec {
    pub fn new(target: &str) -> Self {
        QuerySpec { target: target.to_string(), interventions: Vec::new(), observations: Vec::new() }
    }

    pub fn intervene(mut self, node: &str, value: usize) -> Self {
        self.interventions.push((node.to_string(), value));
        self
    }

    pub fn observe(mut self, node: &str, value: usize) -> Self {
        self.observations.push((node.to_string(), value));
        self
    }

    fn describe(&self) -> String {
        let mut parts: Vec<String> = self.interventions.iter().map(|(n, v)| format!("do({n}={v})")).collect();
        parts.extend(self.observations.iter().map(|(n, v)| format!("{n}={v}")));
        format!("P({} | {})", self.target, parts.join(", "))
    }

    /// Pins per node, checked against the model.
    fn resolve(&self, scm: &DiscreteSCM) -> Result<(usize, Vec<Option<(usize, bool)>>)> {
        let g = scm.graph();
        let target = g.index(&self.target)?;
        let mut fixed = vec![None; g.len()];
        let pins = self.interventions.iter().map(|p| (p, false)).chain(self.observations.iter().map(|p| (p, true)));
        for ((name, value), weighted) in pins {
            let v = g.index(name)?;
            if fixed[v].is_some() || v == target {
                return Err(CausalError::OverlappingSets(name.clone()));
            }
            if *value >= scm.cards[v] {
                return Err(CausalError::Model(format!("{name} has no value {value}")));
            }
            fixed[v] = Some((*value, weighted));
        }
        Ok((target, fixed))
    }
}

/// P(target | do(interventions), observations) by summing the mutilated
/// joint over every unpinned node.
pub fn exact_query(scm: &DiscreteSCM, q: &QuerySpec) -> Result<Vec<f64>> {
    let (target, fixed) = q.resolve(scm)?;
    let mut dist = vec![0.0; scm.cards[target]];
    scm.enumerate(&fixed, |a, p| dist[a[target]] += p)?;
    let total: f64 = dist.iter().sum();
    if total <= 0.0 {
        return Err(CausalError::ZeroProbability(q.describe()));
    }
    dist.iter_mut().for_each(|p| *p /= total);
    Ok(dist)
}

/// Observational joint of `nodes`, flattened in mixed radix with the first
/// node most significant.
pub fn marginal(scm: &DiscreteSCM, nodes: &[usize]) -> Result<Vec<f64>> {
    let size: usize = nodes.iter().map(|&v| scm.cards[v]).product();
    let mut table = vec![0.0; size];
    scm.enumerate(&vec![None; scm.graph.len()], |a, p| {
        let idx = nodes.iter().fold(0, |acc, &v| acc * scm.cards[v] + a[v]);
        table[idx] += p;
    })?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Role::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_coin() {
        let g = CausalGraph::new(&[("C", Observed)], &[]).unwrap();
        let scm = DiscreteSCM::new(g, vec![2], vec![vec![0.3, 0.7]]).unwrap();
        let p = exact_query(&scm, &QuerySpec::new("C")).unwrap();
        assert_eq!(p, vec![0.3, 0.7]);
    }

    #[test]
    fn unconfounded_do_equals_conditioning() {
        let g = CausalGraph::new(&[("X", Observed), ("Y", Observed)], &[("X", "Y")]).unwrap();
        let scm = DiscreteSCM::random(g, 3, &mut ChaCha8Rng::seed_from_u64(4));
        for x in 0..scm.card("X").unwrap() {
            let d = exact_query(&scm, &QuerySpec::new("Y").intervene("X", x)).unwrap();
            let c = exact_query(&scm, &QuerySpec::new("Y").observe("X", x)).unwrap();
            for (a, b) in d.iter().zip(&c) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn validation_errors() {
        let g = CausalGraph::new(&[("X", Observed), ("Y", Observed)], &[("X", "Y")]).unwrap();
        let bad_row = DiscreteSCM::new(g.clone(), vec![2, 2], vec![vec![0.5, 0.5], vec![0.5, 0.4, 0.5, 0.5]]);
        assert!(matches!(bad_row, Err(CausalError::Model(_))));
        let bad_len = DiscreteSCM::new(g.clone(), vec![2, 2], vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(matches!(bad_len, Err(CausalError::Model(_))));
        let scm = DiscreteSCM::new(g, vec![2, 2], vec![vec![1.0, 0.0], vec![0.5, 0.5, 0.5, 0.5]]).unwrap();
        let zero = exact_query(&scm, &QuerySpec::new("Y").observe("X", 1));
        assert!(matches!(zero, Err(CausalError::ZeroProbability(_))));
        let clash = exact_query(&scm, &QuerySpec::new("Y").observe("X", 0).intervene("X", 0));
        assert!(matches!(clash, Err(CausalError::OverlappingSets(_))));
        assert!(exact_query(&scm, &QuerySpec::new("Y").observe("X", 2)).is_err());
    }

    #[test]
    fn state_space_limit() {
        let nodes: Vec<(String, crate::graph::Role)> = (0..15).map(|i| (format!("V{i}"), Observed)).collect();
        let g = CausalGraph::from_parts(nodes, vec![]).unwrap();
        let cpts = vec![vec![1.0 / 3.0, 1.0 / 3.0, 1.0 - 2.0 / 3.0]; 15];
        let scm = DiscreteSCM::new(g, vec![3; 15], cpts).unwrap();
        assert!(matches!(exact_query(&scm, &QuerySpec::new("V0")), Err(CausalError::StateSpace(_))));
    }
}
