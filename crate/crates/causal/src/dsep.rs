use crate::error::{CausalError, Result};
use crate::graph::CausalGraph;

fn check_disjoint(g: &CausalGraph, sets: &[&[usize]]) -> Result<()> {
    let mut seen = vec![false; g.len()];
    for set in sets {
        let mut mine = vec![false; g.len()];
        for &v in *set {
            if seen[v] && !mine[v] {
                return Err(CausalError::OverlappingSets(g.name(v).to_string()));
            }
            mine[v] = true;
        }
        for (s, m) in seen.iter_mut().zip(mine) {
            *s |= m;
        }
    }
    Ok(())
}

/// True iff every path between `a` and `b` is blocked given `z`.
pub fn d_separated<S: AsRef<str>>(g: &CausalGraph, a: &[S], b: &[S], z: &[S]) -> Result<bool> {
    d_separated_idx(g, &g.indices(a)?, &g.indices(b)?, &g.indices(z)?)
}

/// Reachability over (node, direction) pairs: a trail may enter a node from
/// a child ("up") or from a parent ("down").
pub fn d_separated_idx(g: &CausalGraph, a: &[usize], b: &[usize], z: &[usize]) -> Result<bool> {
    check_disjoint(g, &[a, b, z])?;
    let n = g.len();
    let mut in_z = vec![false; n];
    for &v in z {
        in_z[v] = true;
    }
    let anc_z = g.ancestors(z);
    let mut in_b = vec![false; n];
    for &v in b {
        in_b[v] = true;
    }
    // visited[v][0] = reached going up, [1] = going down
    let mut visited = vec![[false; 2]; n];
    let mut stack: Vec<(usize, usize)> = a.iter().map(|&v| (v, 0)).collect();
    while let Some((v, dir)) = stack.pop() {
        if visited[v][dir] {
            continue;
        }
        visited[v][dir] = true;
        if in_b[v] && !in_z[v] {
            return Ok(false);
        }
        if dir == 0 && !in_z[v] {
            stack.extend(g.parents(v).iter().map(|&p| (p, 0)));
            stack.extend(g.children(v).iter().map(|&c| (c, 1)));
        } else if dir == 1 {
            if !in_z[v] {
                stack.extend(g.children(v).iter().map(|&c| (c, 1)));
            }
            if anc_z[v] {
                stack.extend(g.parents(v).iter().map(|&p| (p, 0)));
            }
        }
    }
    Ok(true)
}

/// Slow reference: enumerates every simple path in the skeleton between `a`
/// and `b` and tests each intermediate node with the collider rule.
pub fn d_separated_by_paths(g: &CausalGraph, a: &[usize], b: &[usize], z: &[usize]) -> Result<bool> {
    check_disjoint(g, &[a, b, z])?;
    let n = g.len();
    let desc: Vec<Vec<bool>> = (0..n).map(|v| g.descendants(&[v])).collect();
    let opens_collider = |v: usize| z.iter().any(|&w| desc[v][w]);
    let adjacent = |u: usize, v: usize| g.children(u).contains(&v) || g.children(v).contains(&u);

    fn walk(
        path: &mut Vec<usize>,
        on_path: &mut [bool],
        target: &[usize],
        n: usize,
        adjacent: &dyn Fn(usize, usize) -> bool,
        active: &dyn Fn(&[usize]) -> bool,
    ) -> bool {
        let last = *path.last().unwrap();
        if path.len() > 1 && target.contains(&last) {
            return active(path);
        }
        for next in 0..n {
            if on_path[next] || !adjacent(last, next) {
                continue;
            }
            path.push(next);
            on_path[next] = true;
            let found = walk(path, on_path, target, n, adjacent, active);
            path.pop();
            on_path[next] = false;
            if found {
                return true;
            }
        }
        false
    }

    let active = |path: &[usize]| {
        path.windows(3).all(|w| {
            let (prev, v, next) = (w[0], w[1], w[2]);
            let collider = g.children(prev).contains(&v) && g.children(next).contains(&v);
            if collider {
                opens_collider(v)
            } else {
                !z.contains(&v)
            }
        })
    };
    for &s in a {
        let mut on_path = vec![false; n];
        on_path[s] = true;
        if walk(&mut vec![s], &mut on_path, b, n, &adjacent, &active) {
            return Ok(false);
        }
    }
    Ok(true)
}
