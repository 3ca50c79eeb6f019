use crate::dsep::d_separated_idx;
use crate::error::{CausalError, Result};
use crate::graph::{CausalGraph, Role};

/// One do-calculus rule instance: P(y | do(x), z, w) with `z` the variable
/// being removed or exchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    /// Deletion of an observation.
    One,
    /// Exchange of an intervention for an observation.
    Two,
    /// Deletion of an intervention.
    Three,
}

impl Rule {
    pub fn number(&self) -> u8 {
        match self {
            Rule::One => 1,
            Rule::Two => 2,
            Rule::Three => 3,
        }
    }
}

/// Surgered graph and the independence `(y ⊥ z | x, w)` tested in it.
#[derive(Debug, Clone)]
pub struct RuleTest {
    pub graph: CausalGraph,
    pub removed_incoming: Vec<String>,
    pub removed_outgoing: Vec<String>,
    pub holds: bool,
}

pub fn rule_test<S: AsRef<str>>(g: &CausalGraph, rule: Rule, y: &[S], x_do: &[S], z: &[S], w: &[S]) -> Result<RuleTest> {
    let (y, x, z, w) = (g.indices(y)?, g.indices(x_do)?, g.indices(z)?, g.indices(w)?);
    let (inc, out): (Vec<usize>, Vec<usize>) = match rule {
        Rule::One => (x.clone(), vec![]),
        Rule::Two => (x.clone(), z.clone()),
        Rule::Three => {
            let gx = g.surgery_idx(&x, &[]);
            let anc_w = gx.ancestors(&w);
            let zw: Vec<usize> = z.iter().copied().filter(|&v| !anc_w[v]).collect();
            (x.iter().copied().chain(zw).collect(), vec![])
        }
    };
    let graph = g.surgery_idx(&inc, &out);
    let cond: Vec<usize> = x.iter().chain(&w).copied().collect();
    let holds = d_separated_idx(&graph, &y, &z, &cond)?;
    let names = |s: &[usize]| s.iter().map(|&v| g.name(v).to_string()).collect();
    Ok(RuleTest { removed_incoming: names(&inc), removed_outgoing: names(&out), graph, holds })
}

pub fn rule1_applicable<S: AsRef<str>>(g: &CausalGraph, y: &[S], x_do: &[S], z: &[S], w: &[S]) -> Result<bool> {
    Ok(rule_test(g, Rule::One, y, x_do, z, w)?.holds)
}

pub fn rule2_applicable<S: AsRef<str>>(g: &CausalGraph, y: &[S], x_do: &[S], z: &[S], w: &[S]) -> Result<bool> {
    Ok(rule_test(g, Rule::Two, y, x_do, z, w)?.holds)
}

pub fn rule3_applicable<S: AsRef<str>>(g: &CausalGraph, y: &[S], x_do: &[S], z: &[S], w: &[S]) -> Result<bool> {
    Ok(rule_test(g, Rule::Three, y, x_do, z, w)?.holds)
}

/// Whether P(a | z) is unaffected by the selection variables `s`.
pub fn s_admissible<S: AsRef<str>>(g: &CausalGraph, a: &str, z: &[S], s: &[S]) -> Result<bool> {
    for name in s {
        if g.role_of(name.as_ref())? != Role::Selection {
            return Err(CausalError::NotSelection(name.as_ref().to_string()));
        }
    }
    d_separated_idx(g, &[g.index(a)?], &g.indices(s)?, &g.indices(z)?)
}
