//! Decision procedures for the subpower membership problem over finite
//! algebras with a cube (parallelogram) term: compact standardized
//! representations of subpowers, polynomial-size witness circuits for YES
//! instances, and the reduction pipeline through subdirectly irreducible
//! quotients down to an abelian-group sift in the residually small case.

pub mod algebra;
pub mod circuit;
pub mod congruence;
pub mod error;
pub mod rep;
pub mod samples;
pub mod solver;

pub use algebra::{
    check_identity, load_catalog, load_catalog_str, subalgebra_closure, AlgId, Catalog, Context,
    Elem, FiniteAlgebra, Signature, Tuple,
};
pub use circuit::{
    build_big_tn, build_big_tn_plus, build_tn, configure_terms, derive_auxiliary,
    find_fork_exponent, parse_term, search_parallelogram_term, term_to_json, verify_parallelogram,
    Circuit, TermKit,
};
pub use congruence::{
    check_residual_smallness, check_similarity, commutator, congruence_lattice,
    find_difference_term, induced_abelian_group, meet_irreducibles, si_profile, Congruence,
};
pub use error::{Error, Result};
pub use rep::{
    compact_rep_direct, compact_rep_via_smp, derived_forks, extract_witness_circuit, forks,
    is_representable, local_rep, query_membership, rep_to_json, saturation_generators,
    weak_transitivity_witness, Rep,
};
pub use solver::{
    abelian_sift, check_d_coherent, parse_instance_str, reduce_hs, resolve_instance, smp_brute,
    solve, solve_smpd_rs, structure_criterion_membership, Method, ReductionSession,
    ResolvedInstance, SmpAnswer, SmpInstance,
};
