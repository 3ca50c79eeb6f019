//! Edge-list text format: `parent -> child` per line, `#role node kind`
//! lines for non-observed nodes, other `#` lines are comments.

use crate::error::{CausalError, Result};
use crate::graph::{CausalGraph, Role};

pub fn parse_edge_list(text: &str) -> Result<CausalGraph> {
    let mut nodes: Vec<(String, Role)> = Vec::new();
    let mut edges = Vec::new();
    let touch = |nodes: &mut Vec<(String, Role)>, name: &str| {
        if !nodes.iter().any(|(n, _)| n == name) {
            nodes.push((name.to_string(), Role::Observed));
        }
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |msg: String| CausalError::Parse { line: i + 1, msg };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#role") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let [name, kind] = parts[..] else {
                return Err(err(format!("expected `#role <node> <kind>`, got `{line}`")));
            };
            let role = Role::parse(kind).ok_or_else(|| err(format!("unknown role `{kind}`")))?;
            touch(&mut nodes, name);
            nodes.iter_mut().find(|(n, _)| n == name).expect("just added").1 = role;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let Some((a, b)) = line.split_once("->") else {
            return Err(err(format!("expected `parent -> child`, got `{line}`")));
        };
        let (a, b) = (a.trim(), b.trim());
        let valid = |s: &str| !s.is_empty() && !s.contains(char::is_whitespace);
        if !valid(a) || !valid(b) {
            return Err(err(format!("bad node name in `{line}`")));
        }
        touch(&mut nodes, a);
        touch(&mut nodes, b);
        edges.push((a.to_string(), b.to_string()));
    }
    CausalGraph::from_parts(nodes, edges)
}

pub fn to_edge_list(g: &CausalGraph) -> String {
    let mut out = String::new();
    for (i, name) in g.names().iter().enumerate() {
        out.push_str(&format!("#role {name} {}\n", g.role(i)));
    }
    for (a, b) in g.edges() {
        out.push_str(&format!("{a} -> {b}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::build_training_graph;

    #[test]
    fn round_trip() {
        let g = build_training_graph();
        let back = parse_edge_list(&to_edge_list(&g)).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn parses_roles_and_comments() {
        let g = parse_edge_list("# a graph\nU -> X\nX->Y\n\n#role U latent\n#role S selection\n").unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.role_of("U").unwrap(), Role::Latent);
        assert_eq!(g.role_of("Y").unwrap(), Role::Observed);
        assert!(g.has_edge("X", "Y"));
    }

    #[test]
    fn reports_line_numbers() {
        let e = parse_edge_list("A -> B\nB C\n").unwrap_err();
        assert!(matches!(e, CausalError::Parse { line: 2, .. }));
        let e = parse_edge_list("#role A weird\n").unwrap_err();
        assert!(matches!(e, CausalError::Parse { line: 1, .. }));
        assert!(matches!(parse_edge_list("A -> B\nB -> A\n"), Err(CausalError::Cycle(_))));
    }
}
