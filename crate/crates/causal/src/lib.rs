//! Causal graphs with latent and selection nodes, d-separation, the
//! do-calculus rules and exact inference in small discrete models.

pub mod docalc;
pub mod dsep;
pub mod error;
pub mod graph;
pub mod io;
pub mod random;
pub mod scm;
pub mod training;

pub use docalc::{rule1_applicable, rule2_applicable, rule3_applicable, rule_test, s_admissible, Rule, RuleTest};
pub use dsep::{d_separated, d_separated_by_paths, d_separated_idx};
pub use error::{CausalError, Result};
pub use graph::{graph_surgery, CausalGraph, Role};
pub use io::{parse_edge_list, to_edge_list};
pub use scm::{exact_query, marginal, DiscreteSCM, QuerySpec, MAX_STATES};
pub use training::{
    build_training_graph, check_eq1_random, eq1_discrepancy, eq1_factorized_query, frontdoor_graph, interventional_query,
    training_scm_graph, verify_eq1_derivation, verify_eq1_derivation_on, verify_intractability_structure, DerivationReport,
    DerivationStep, ScmAgreement, StructureCheck, StructureReport, DERIVATION_STEPS, EQ1_TOL,
};
