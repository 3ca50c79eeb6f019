//! The CIB training graph, the frontdoor-derivation checks run on it and the
//! numerical check of the resulting factorisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::docalc::{rule_test, Rule};
use crate::dsep::d_separated;
use crate::error::{CausalError, Result};
use crate::graph::{CausalGraph, Role};
use crate::scm::{exact_query, marginal, DiscreteSCM, QuerySpec};

/// Agreement required between the factorised and interventional answers.
pub const EQ1_TOL: f64 = 1e-9;

const LATENT_EDGES: [(&str, &str); 11] = [
    ("Z", "X"),
    ("Z", "D_X"),
    ("U_XY", "X"),
    ("U_XY", "Y"),
    ("U_XY", "D_X"),
    ("U_XY", "D_Y"),
    ("U_W", "W"),
    ("U_R", "D_R"),
    ("U_R", "R"),
    ("S", "Z_S"),
    ("Z_S", "Z"),
];

const OBSERVED_EDGES: [(&str, &str); 6] =
    [("X", "R"), ("R", "Y"), ("D_X", "D_R"), ("D_R", "W"), ("D_Y", "W"), ("W", "Y")];

const OBSERVED: [&str; 7] = ["X", "Y", "R", "W", "D_X", "D_Y", "D_R"];

/// Graph of the training process. Z groups the domain-specific part Z_S
/// (reached by the selection node S) and the invariant part Z_R.
pub fn build_training_graph() -> CausalGraph {
    let mut nodes: Vec<(&str, Role)> = OBSERVED.iter().map(|&n| (n, Role::Observed)).collect();
    for n in ["Z", "Z_S", "Z_R", "U_XY", "U_R", "U_W"] {
        nodes.push((n, Role::Latent));
    }
    nodes.push(("S", Role::Selection));
    let mut edges: Vec<(&str, &str)> = LATENT_EDGES.to_vec();
    edges.push(("Z_R", "Z"));
    edges.extend(OBSERVED_EDGES);
    CausalGraph::new(&nodes, &edges).expect("training graph is a valid DAG")
}

/// The training graph with Z as a single root latent: the substrate for the
/// discrete models used to check the factorisation.
pub fn training_scm_graph() -> CausalGraph {
    let mut nodes: Vec<(&str, Role)> = OBSERVED.iter().map(|&n| (n, Role::Observed)).collect();
    for n in ["Z", "U_XY", "U_R", "U_W"] {
        nodes.push((n, Role::Latent));
    }
    let edges: Vec<(&str, &str)> = LATENT_EDGES[..9].iter().chain(&OBSERVED_EDGES).copied().collect();
    CausalGraph::new(&nodes, &edges).expect("grouped training graph is a valid DAG")
}

/// D_X -> A -> Y with a latent confounder of D_X and Y.
pub fn frontdoor_graph() -> CausalGraph {
    CausalGraph::new(
        &[("D_X", Role::Observed), ("A", Role::Observed), ("Y", Role::Observed), ("U_XY", Role::Latent)],
        &[("D_X", "A"), ("A", "Y"), ("U_XY", "D_X"), ("U_XY", "Y")],
    )
    .expect("frontdoor graph is a valid DAG")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivationStep {
    pub rule: u8,
    /// `(y indep z | x, w)` in readable form.
    pub statement: String,
    pub removed_incoming: Vec<String>,
    pub removed_outgoing: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivationReport {
    pub steps: Vec<DerivationStep>,
}

impl DerivationReport {
    pub fn passed(&self) -> bool {
        self.steps.iter().all(|s| s.passed)
    }

    pub fn passed_count(&self) -> usize {
        self.steps.iter().filter(|s| s.passed).count()
    }

    /// 1-based index of the first failing step.
    pub fn first_failure(&self) -> Option<usize> {
        self.steps.iter().position(|s| !s.passed).map(|i| i + 1)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&format!(
                "step {} rule {} {} in G[in: {{{}}} out: {{{}}}] {}\n",
                i + 1,
                s.rule,
                s.statement,
                s.removed_incoming.join(","),
                s.removed_outgoing.join(","),
                if s.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&format!("derivation.step{}={}\n", i + 1, if s.passed { "pass" } else { "fail" }));
        }
        out.push_str(&format!("derivation.passed={}/{}\n", self.passed_count(), self.steps.len()));
        out
    }
}

type StepSpec = (Rule, &'static [&'static str], &'static [&'static str], &'static [&'static str], &'static [&'static str]);

/// The rule applications that turn P(y | do(x), D_X, D_Y) into an
/// observational expression: (rule, y, do-set, z, w).
pub const DERIVATION_STEPS: [StepSpec; 7] = [
    (Rule::Three, &["W"], &[], &["X"], &["D_X", "D_Y"]),
    (Rule::Two, &["R"], &[], &["X"], &["D_X", "D_Y", "W"]),
    (Rule::Two, &["Y"], &["X"], &["R"], &["D_X", "D_Y", "W"]),
    (Rule::Three, &["Y"], &["R"], &["X"], &["D_X", "D_Y", "W"]),
    (Rule::Two, &["Y"], &[], &["R"], &["X", "D_X", "D_Y", "W"]),
    (Rule::Three, &["X"], &[], &["R"], &["D_X", "D_Y", "W"]),
    (Rule::One, &["X"], &[], &["W"], &["D_X", "D_Y"]),
];

pub fn verify_eq1_derivation() -> DerivationReport {
    verify_eq1_derivation_on(&build_training_graph()).expect("training graph has every node the derivation names")
}

/// Runs the derivation on an arbitrary graph; fails only if a node the
/// derivation names is missing.
pub fn verify_eq1_derivation_on(g: &CausalGraph) -> Result<DerivationReport> {
    let mut steps = Vec::with_capacity(DERIVATION_STEPS.len());
    for (rule, y, x, z, w) in DERIVATION_STEPS {
        let t = rule_test(g, rule, y, x, z, w)?;
        let cond: Vec<&str> = x.iter().chain(w).copied().collect();
        steps.push(DerivationStep {
            rule: rule.number(),
            statement: format!("({} indep {} | {})", y.join(","), z.join(","), cond.join(",")),
            removed_incoming: t.removed_incoming,
            removed_outgoing: t.removed_outgoing,
            passed: t.holds,
        });
    }
    Ok(DerivationReport { steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureCheck {
    pub name: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport {
    pub checks: Vec<StructureCheck>,
}

impl StructureReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        self.checks.iter().map(|c| format!("{} {}\n", c.name, if c.passed { "PASS" } else { "FAIL" })).collect()
    }

    pub fn to_kv(&self) -> String {
        let passed = self.checks.iter().filter(|c| c.passed).count();
        format!("structure.passed={}/{}\n", passed, self.checks.len())
    }
}

fn path_exists(g: &CausalGraph, edges: &[(&str, &str)]) -> bool {
    edges.iter().all(|(a, b)| g.has_edge(a, b))
}

/// Checks why P(y | do(x), do(D_X), D_Y) needs a sum over D_X.
pub fn verify_intractability_structure() -> StructureReport {
    let mut checks = Vec::new();
    let mut check = |name: &str, passed: bool| checks.push(StructureCheck { name: name.to_string(), passed });
    let none: &[&str] = &[];

    let f = frontdoor_graph();
    let sep = |g: &CausalGraph, a: &str, b: &str, z: &[&str]| d_separated(g, &[a], &[b], z).expect("nodes exist");
    check("frontdoor graph: backdoor D_X <- U_XY -> Y leaves D_X and Y dependent", !sep(&f, "D_X", "Y", none));
    let cut = f.surgery(&[] as &[&str], &["A"]).expect("A exists");
    let reach = cut.descendants(&[cut.index("D_X").expect("D_X exists")]);
    check("frontdoor graph: A intercepts every directed path D_X -> Y", !reach[cut.index("Y").expect("Y exists")]);
    let g_dx = f.surgery(&[] as &[&str], &["D_X"]).expect("D_X exists");
    check("frontdoor graph: no unblocked backdoor path D_X -> A", sep(&g_dx, "D_X", "A", none));
    let g_a = f.surgery(&[] as &[&str], &["A"]).expect("A exists");
    check("frontdoor graph: D_X blocks every backdoor path A -> Y", sep(&g_a, "A", "Y", &["D_X"]));
    let no_u = f.surgery(&[] as &[&str], &["U_XY"]).expect("U_XY exists");
    check("frontdoor graph without U_XY: D_X indep Y | A", sep(&no_u, "D_X", "Y", &["A"]));

    let g = build_training_graph();
    let direct = [("D_X", "D_R"), ("D_R", "W"), ("W", "Y")];
    let via_x = [("Z", "D_X"), ("Z", "X"), ("X", "R"), ("R", "Y")];
    let via_u = [("U_XY", "D_X"), ("U_XY", "Y")];
    check("training graph: directed path D_X -> D_R -> W -> Y", path_exists(&g, &direct));
    check("training graph: backdoor path D_X <- Z -> X -> R -> Y", path_exists(&g, &via_x));
    check("training graph: backdoor path D_X <- U_XY -> Y", path_exists(&g, &via_u));
    let gx = g.surgery(&["X"], &[]).expect("X exists");
    check("training graph under do(x): path through Z -> X is cut", !path_exists(&gx, &via_x));
    check("training graph under do(x): path through U_XY remains", path_exists(&gx, &via_u));
    // The remaining confounded path has no observed node on it, so no
    // observed set avoiding D_X separates D_X from Y once D_X's own
    // influence is kept.
    let candidates = ["X", "R", "W", "D_Y", "D_R"];
    let unblockable = (0..1u32 << candidates.len()).all(|mask| {
        let z: Vec<&str> = candidates.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, n)| *n).collect();
        !sep(&gx, "D_X", "Y", &z)
    });
    check("training graph under do(x): no observed set separates D_X from Y", unblockable);
    StructureReport { checks }
}

fn observed_indices(g: &CausalGraph) -> [usize; 6] {
    let idx = |n: &str| g.index(n).expect("checked graph");
    [idx("X"), idx("R"), idx("W"), idx("D_X"), idx("D_Y"), idx("Y")]
}

/// Right-hand side of the frontdoor factorisation:
/// sum_w P(w|dx,dy) sum_r P(r|x,w,dx,dy) sum_x' P(x'|dx,dy) P(y|x',r,w,dx,dy),
/// each factor read off the observational joint.
pub fn eq1_factorized_query(scm: &DiscreteSCM, x: usize, dx: usize, dy: usize) -> Result<Vec<f64>> {
    let g = scm.graph();
    if *g != training_scm_graph() {
        return Err(CausalError::Structure("expected the grouped training graph".into()));
    }
    let nodes = observed_indices(g);
    let [cx, cr, cw, cdx, cdy, cy] = nodes.map(|v| scm.cards()[v]);
    if x >= cx || dx >= cdx || dy >= cdy {
        return Err(CausalError::Model("query value out of range".into()));
    }
    let joint = marginal(scm, &nodes)?;
    let at = |x: usize, r: usize, w: usize, y: usize| joint[((((x * cr + r) * cw + w) * cdx + dx) * cdy + dy) * cy + y];
    let sum = |xs: &[usize], rs: &[usize], ws: &[usize]| -> f64 {
        let mut s = 0.0;
        for &x in xs {
            for &r in rs {
                for &w in ws {
                    s += (0..cy).map(|y| at(x, r, w, y)).sum::<f64>();
                }
            }
        }
        s
    };
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    let (xs, rs, ws) = (all(cx), all(cr), all(cw));
    let p_d = sum(&xs, &rs, &ws);
    if p_d <= 0.0 {
        return Err(CausalError::ZeroProbability(format!("D_X={dx}, D_Y={dy}")));
    }
    let mut out = vec![0.0; cy];
    for w in 0..cw {
        let p_w = sum(&xs, &rs, &[w]) / p_d;
        if p_w == 0.0 {
            continue;
        }
        let p_xw = sum(&[x], &rs, &[w]);
        if p_xw <= 0.0 {
            return Err(CausalError::ZeroProbability(format!("X={x}, W={w}, D_X={dx}, D_Y={dy}")));
        }
        for r in 0..cr {
            let p_r = sum(&[x], &[r], &[w]) / p_xw;
            if p_r == 0.0 {
                continue;
            }
            for x2 in 0..cx {
                let p_x2 = sum(&[x2], &rs, &ws) / p_d;
                if p_x2 == 0.0 {
                    continue;
                }
                let p_cond = sum(&[x2], &[r], &[w]);
                if p_cond <= 0.0 {
                    return Err(CausalError::ZeroProbability(format!("X={x2}, R={r}, W={w}, D_X={dx}, D_Y={dy}")));
                }
                for (y, o) in out.iter_mut().enumerate() {
                    *o += p_w * p_r * p_x2 * at(x2, r, w, y) / p_cond;
                }
            }
        }
    }
    Ok(out)
}

/// P(y | do(x), D_X = dx, D_Y = dy) by enumeration.
pub fn interventional_query(scm: &DiscreteSCM, x: usize, dx: usize, dy: usize) -> Result<Vec<f64>> {
    exact_query(scm, &QuerySpec::new("Y").intervene("X", x).observe("D_X", dx).observe("D_Y", dy))
}

/// Largest absolute difference between the two sides over every
/// (x, dx, dy, y).
pub fn eq1_discrepancy(scm: &DiscreteSCM) -> Result<f64> {
    let g = scm.graph();
    let card = |n: &str| scm.cards()[g.index(n).expect("checked graph")];
    let mut worst: f64 = 0.0;
    for x in 0..card("X") {
        for dx in 0..card("D_X") {
            for dy in 0..card("D_Y") {
                let lhs = interventional_query(scm, x, dx, dy)?;
                let rhs = eq1_factorized_query(scm, x, dx, dy)?;
                for (a, b) in lhs.iter().zip(&rhs) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScmAgreement {
    pub seed: u64,
    pub max_abs_diff: f64,
}

impl ScmAgreement {
    pub fn passed(&self) -> bool {
        self.max_abs_diff <= EQ1_TOL
    }
}

/// Compares both sides on `count` random models over the grouped training
/// graph; model `i` uses seed `seed + i`.
pub fn check_eq1_random(count: usize, max_card: usize, seed: u64) -> Result<Vec<ScmAgreement>> {
    (0..count as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
            let scm = DiscreteSCM::random(training_scm_graph(), max_card, &mut rng);
            Ok(ScmAgreement { seed: seed.wrapping_add(i), max_abs_diff: eq1_discrepancy(&scm)? })
        })
        .collect()
}
