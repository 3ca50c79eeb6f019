use cib_causal::*;

const NONE: &[&str] = &[];

#[test]
fn rule_examples_on_training_graph() {
    let g = build_training_graph();
    assert!(rule3_applicable(&g, &["W"], NONE, &["X"], &["D_X", "D_Y"]).unwrap());
    assert!(rule2_applicable(&g, &["Y"], &["X"], &["R"], &["D_X", "D_Y", "W"]).unwrap());
}

#[test]
fn selection_admissibility() {
    let g = build_training_graph();
    assert!(s_admissible(&g, "W", &["D_X", "D_Y"], &["S"]).unwrap());
    assert!(s_admissible(&g, "R", &["X", "W", "D_X", "D_Y"], &["S"]).unwrap());
    assert!(!s_admissible(&g, "X", &["D_X", "D_Y"], &["S"]).unwrap());
    assert!(!s_admissible(&g, "Y", &["X", "R", "W", "D_X", "D_Y"], &["S"]).unwrap());
    assert!(s_admissible(&g, "W", &["D_X"], &["Z"]).is_err());
}

#[test]
fn w_marginalisation_blocks_the_r_backdoor() {
    // R <- U_R -> D_R -> W -> Y is open until W is conditioned on.
    let g = build_training_graph().surgery(NONE, &["R"]).unwrap();
    assert!(!d_separated(&g, &["R"], &["Y"], &["X", "D_X", "D_Y"]).unwrap());
    assert!(d_separated(&g, &["R"], &["Y"], &["X", "D_X", "D_Y", "W"]).unwrap());
}

/// One added edge per derivation step that opens a path the step relies on
/// being blocked.
const MUTATIONS: [(&str, &str); 7] = [
    ("X", "W"),
    ("Z", "R"),
    ("U_R", "Y"),
    ("X", "Y"),
    ("U_R", "Y"),
    ("R", "W"),
    ("W", "X"),
];

#[test]
fn each_step_is_sensitive_to_one_edge() {
    let g = build_training_graph();
    for (i, (a, b)) in MUTATIONS.iter().enumerate() {
        let report = verify_eq1_derivation_on(&g.with_edge(a, b).unwrap()).unwrap();
        assert!(!report.steps[i].passed, "adding {a} -> {b} should break step {}", i + 1);
    }
}

#[test]
fn w_to_x_breaks_only_the_last_step() {
    // Rule 3 in step one deletes the incoming edges of X, W -> X included,
    // so the added edge surfaces in the plain-graph check of the last step.
    let report = verify_eq1_derivation_on(&build_training_graph().with_edge("W", "X").unwrap()).unwrap();
    assert_eq!(report.first_failure(), Some(7), "{}", report.to_text());
    assert_eq!(report.passed_count(), 6);
}

#[test]
fn derivation_needs_the_named_nodes() {
    let g = parse_edge_list("X -> Y\n").unwrap();
    assert!(matches!(verify_eq1_derivation_on(&g), Err(CausalError::UnknownNode(_))));
}
