//! Instance families shared by the criterion benchmarks and the CLI bench
//! subcommand.

use subpower_core::algebra::{Catalog, Context, Elem, Tuple};
use subpower_core::solver::ResolvedInstance;

/// The coset family over a single base algebra: unit-vector generators
/// e_1..e_n and a target of the requested parity (the odd coset of Z2^n when
/// the base is Z2).
pub fn coset_instance(cat: &Catalog, base: &str, n: usize, yes: bool) -> ResolvedInstance {
    let alg = cat.find(base).expect("base algebra");
    let ctx = Context::new(vec![alg; n]);
    let mut gens: Vec<Tuple> = Vec::with_capacity(n);
    for i in 0..n {
        let mut g = vec![0 as Elem; n];
        g[i] = 1;
        gens.push(g);
    }
    let mut target = vec![0 as Elem; n];
    target[0] = 1;
    if !yes {
        // even-weight tuples are outside the odd coset
        target[1] = 1;
    } else {
        target[1] = 1;
        target[2] = 1;
    }
    ResolvedInstance { ctx, gens, target }
}
