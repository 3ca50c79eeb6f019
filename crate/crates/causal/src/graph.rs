use std::collections::HashMap;
use std::fmt;

use crate::error::{CausalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Observed,
    Latent,
    Selection,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Observed => "observed",
            Role::Latent => "latent",
            Role::Selection => "selection",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "observed" => Some(Role::Observed),
            "latent" => Some(Role::Latent),
            "selection" => Some(Role::Selection),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Directed acyclic graph over named nodes. Node order is insertion order and
/// is used as the index everywhere else in the crate.
#[derive(Debug, Clone)]
pub struct CausalGraph {
    names: Vec<String>,
    roles: Vec<Role>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
}

impl PartialEq for CausalGraph {
    /// Same node names, roles and edges, regardless of insertion order.
    fn eq(&self, other: &Self) -> bool {
        if self.len() != other.len() {
            return false;
        }
        let nodes_match = self.names.iter().zip(&self.roles).all(|(n, r)| other.role_of(n) == Ok(*r));
        nodes_match && self.edges() == other.edges()
    }
}

impl CausalGraph {
    pub fn new(nodes: &[(&str, Role)], edges: &[(&str, &str)]) -> Result<Self> {
        let nodes: Vec<(String, Role)> = nodes.iter().map(|(n, r)| (n.to_string(), *r)).collect();
        let edges: Vec<(String, String)> = edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        Self::from_parts(nodes, edges)
    }

    pub fn from_parts(nodes: Vec<(String, Role)>, edges: Vec<(String, String)>) -> Result<Self> {
        let mut g = CausalGraph {
            names: Vec::with_capacity(nodes.len()),
            roles: Vec::with_capacity(nodes.len()),
            parents: vec![Vec::new(); nodes.len()],
            children: vec![Vec::new(); nodes.len()],
            index: HashMap::new(),
        };
        for (i, (name, role)) in nodes.into_iter().enumerate() {
            if g.index.insert(name.clone(), i).is_some() {
                return Err(CausalError::DuplicateNode(name));
            }
            g.names.push(name);
            g.roles.push(role);
        }
        for (a, b) in edges {
            let (pa, ch) = (g.index(&a)?, g.index(&b)?);
            if !g.children[pa].contains(&ch) {
                g.children[pa].push(ch);
                g.parents[ch].push(pa);
            }
        }
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        for v in 0..self.len() {
            if self.roles[v] == Role::Selection && !self.parents[v].is_empty() {
                return Err(CausalError::SelectionWithParents(self.names[v].clone()));
            }
        }
        self.topo_order().map(|_| ())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, v: usize) -> &str {
        &self.names[v]
    }

    pub fn role(&self, v: usize) -> Role {
        self.roles[v]
    }

    pub fn role_of(&self, name: &str) -> Result<Role> {
        Ok(self.roles[self.index(name)?])
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| CausalError::UnknownNode(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn indices<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.index(n.as_ref())).collect()
    }

    pub fn parents(&self, v: usize) -> &[usize] {
        &self.parents[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn has_edge(&self, parent: &str, child: &str) -> bool {
        match (self.index(parent), self.index(child)) {
            (Ok(a), Ok(b)) => self.children[a].contains(&b),
            _ => false,
        }
    }

    /// Sorted `(parent, child)` name pairs.
    pub fn edges(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = (0..self.len())
            .flat_map(|a| self.children[a].iter().map(move |&b| (a, b)))
            .map(|(a, b)| (self.names[a].clone(), self.names[b].clone()))
            .collect();
        out.sort();
        out
    }

    fn parts(&self) -> (Vec<(String, Role)>, Vec<(String, String)>) {
        let nodes = self.names.iter().cloned().zip(self.roles.iter().copied()).collect();
        (nodes, self.edges())
    }

    pub fn with_edge(&self, parent: &str, child: &str) -> Result<Self> {
        let (nodes, mut edges) = self.parts();
        edges.push((parent.to_string(), child.to_string()));
        Self::from_parts(nodes, edges)
    }

    pub fn without_edge(&self, parent: &str, child: &str) -> Result<Self> {
        self.index(parent)?;
        self.index(child)?;
        let (nodes, mut edges) = self.parts();
        edges.retain(|(a, b)| !(a == parent && b == child));
        Self::from_parts(nodes, edges)
    }

    /// Kahn's algorithm; lowest index first among ready nodes.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: Vec<usize> = (0..self.len()).rev().filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(v) = ready.pop() {
            order.push(v);
            for &c in &self.children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.push(c);
                    ready.sort_unstable_by(|a, b| b.cmp(a));
                }
            }
        }
        if order.len() < self.len() {
            let stuck = (0..self.len()).find(|&v| indeg[v] > 0).unwrap_or(0);
            return Err(CausalError::Cycle(self.names[stuck].clone()));
        }
        Ok(order)
    }

    /// Membership mask of `set` and all its ancestors.
    pub fn ancestors(&self, set: &[usize]) -> Vec<bool> {
        self.closure(set, |v| &self.parents[v])
    }

    /// Membership mask of `set` and all its descendants.
    pub fn descendants(&self, set: &[usize]) -> Vec<bool> {
        self.closure(set, |v| &self.children[v])
    }

    fn closure<'a>(&'a self, set: &[usize], next: impl Fn(usize) -> &'a [usize]) -> Vec<bool> {
        let mut mark = vec![false; self.len()];
        let mut stack: Vec<usize> = set.to_vec();
        while let Some(v) = stack.pop() {
            if !mark[v] {
                mark[v] = true;
                stack.extend(next(v).iter().copied());
            }
        }
        mark
    }

    /// Deletes the incoming edges of `remove_incoming` and the outgoing edges
    /// of `remove_outgoing`.
    pub fn surgery<S: AsRef<str>>(&self, remove_incoming: &[S], remove_outgoing: &[S]) -> Result<Self> {
        let inc = self.indices(remove_incoming)?;
        let out = self.indices(remove_outgoing)?;
        Ok(self.surgery_idx(&inc, &out))
    }

    pub(crate) fn surgery_idx(&self, inc: &[usize], out: &[usize]) -> Self {
        let mut g = self.clone();
        for v in 0..g.len() {
            if inc.contains(&v) {
                g.parents[v].clear();
            }
            if out.contains(&v) {
                g.children[v].clear();
            }
        }
        for v in 0..g.len() {
            let (p, c) = (&g.parents[v], &g.children[v]);
            let keep_p: Vec<usize> = p.iter().copied().filter(|&a| !out.contains(&a)).collect();
            let keep_c: Vec<usize> = c.iter().copied().filter(|&b| !inc.contains(&b)).collect();
            g.parents[v] = keep_p;
            g.children[v] = keep_c;
        }
        g
    }
}

pub fn graph_surgery<S: AsRef<str>>(g: &CausalGraph, remove_incoming: &[S], remove_outgoing: &[S]) -> Result<CausalGraph> {
    g.surgery(remove_incoming, remove_outgoing)
}
