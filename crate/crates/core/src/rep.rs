//! Forks, derived forks, and (partial) standardized representations of
//! subpowers, with the representation-driven membership machinery: the
//! IsRepresentable chain, local-witness construction, saturation generating
//! sets, the direct and oracle-backed compact-representation builders, and
//! witness-circuit extraction.
//!
//! Coordinates are 0-based throughout; a fork at coordinate `i` is witnessed
//! by two tuples agreeing on all coordinates before `i`.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::algebra::{subalgebra_closure, Catalog, ClosureOpts, Context, Elem, Prov, Tuple};
use crate::circuit::{build_tn, subsets_lex, Circuit, CircuitBuilder, TermKit};
use crate::error::{Error, Result};

/// Relatedness of factor elements used for saturations: a partial partition
/// of a factor algebra (congruence classes on a subuniverse, or the identity
/// relation).
#[derive(Debug, Clone)]
pub struct FactorRel {
    /// Class leader per element; `None` for elements outside the domain.
    pub class: Vec<Option<Elem>>,
}

impl FactorRel {
    pub fn identity(size: usize) -> FactorRel {
        FactorRel {
            class: (0..size as Elem).map(Some).collect(),
        }
    }

    pub fn from_congruence(c: &crate::congruence::Congruence) -> FactorRel {
        FactorRel {
            class: c.leaders().iter().map(|&l| Some(l)).collect(),
        }
    }

    pub fn related(&self, a: Elem, b: Elem) -> bool {
        matches!(
            (self.class[a as usize], self.class[b as usize]),
            (Some(x), Some(y)) if x == y
        )
    }

    pub fn classmates(&self, a: Elem) -> Vec<Elem> {
        match self.class[a as usize] {
            None => vec![a],
            Some(l) => (0..self.class.len() as Elem)
                .filter(|&b| self.class[b as usize] == Some(l))
                .collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.class
            .iter()
            .enumerate()
            .all(|(e, c)| *c == Some(e as Elem))
    }
}

// ---------------------------------------------------------------------------
// Forks

/// All forks of `S` in coordinate `i`, each with its lexicographically first
/// witness pair in the order of `S`.
pub fn forks(s: &[Tuple], i: usize) -> BTreeMap<(Elem, Elem), (usize, usize)> {
    let mut out = BTreeMap::new();
    let mut by_prefix: HashMap<&[Elem], Vec<usize>> = HashMap::new();
    for (idx, t) in s.iter().enumerate() {
        by_prefix.entry(&t[..i]).or_default().push(idx);
    }
    let mut groups: Vec<&Vec<usize>> = by_prefix.values().collect();
    groups.sort_by_key(|g| g[0]);
    for group in groups {
        for &a in group {
            for &b in group {
                out.entry((s[a][i], s[b][i])).or_insert((a, b));
            }
        }
    }
    out
}

/// e-derived forks: the image of `forks` under (gamma, delta) ->
/// (gamma, delta^{gamma^e}).
pub fn derived_forks(
    cat: &Catalog,
    kit: &TermKit,
    alg: crate::algebra::AlgId,
    fk: &BTreeMap<(Elem, Elem), (usize, usize)>,
    e: usize,
) -> BTreeMap<(Elem, Elem), (usize, usize)> {
    let mut out = BTreeMap::new();
    for (&(gamma, delta), &w) in fk {
        let image = kit.xy_pow(cat, alg, delta, gamma, e);
        out.entry((gamma, image)).or_insert(w);
    }
    out
}

/// Weak transitivity: from witnesses (v, vhat) for (gamma, delta) and
/// (u, uhat) for (beta, delta) in coordinate `i`, produces a witness pair for
/// (gamma, beta^gamma).
pub fn weak_transitivity_witness(
    cat: &Catalog,
    kit: &TermKit,
    ctx: &Context,
    v: &Tuple,
    vhat: &Tuple,
    u: &Tuple,
    uhat: &Tuple,
    i: usize,
) -> Result<(Tuple, Tuple)> {
    if v[..i] != vhat[..i] || u[..i] != uhat[..i] || vhat[i] != uhat[i] {
        return Err(Error::InputContract(
            "weak transitivity needs fork witnesses sharing delta".into(),
        ));
    }
    let gamma = v[i];
    let beta = u[i];
    let inner = kit.p_apply(cat, ctx, v, vhat, uhat);
    let mid = kit.p_apply(cat, ctx, v, vhat, vhat);
    let first = kit.p_apply(cat, ctx, &inner, &mid, v);
    let second = kit.p_apply(cat, ctx, u, v, v);
    let expected = kit.xy_apply(cat, ctx.factors[i], beta, gamma);
    if first[..i] != second[..i] || first[i] != gamma || second[i] != expected {
        return Err(Error::IdentityFailed(
            "weak transitivity output is not a fork witness".into(),
        ));
    }
    Ok((first, second))
}

// ---------------------------------------------------------------------------
// Partial standardized representations

pub type LocalKey = (Vec<usize>, Tuple);
pub type ForkKey = (usize, Elem, Elem);

/// A partial standardized representation: tuples plus designation maps for
/// local witnesses and fork witnesses. Every tuple carries optional
/// provenance (an F-circuit over the generators) in a shared hash-consed
/// arena; the provenance is what witness extraction splices together.
pub struct Rep<'c> {
    pub cat: &'c Catalog,
    pub ctx: Context,
    pub gens: Vec<Tuple>,
    pub tuples: Vec<Tuple>,
    tuple_ids: HashMap<Tuple, usize>,
    prov: Vec<Option<u32>>,
    pub local: BTreeMap<LocalKey, usize>,
    pub forks: BTreeMap<ForkKey, (usize, usize)>,
    arena: CircuitBuilder,
    /// t-circuits per prefix length, e = 1.
    t_circ: Vec<Option<Circuit>>,
}

impl<'c> Rep<'c> {
    pub fn new(cat: &'c Catalog, ctx: Context, gens: Vec<Tuple>) -> Result<Rep<'c>> {
        let kit = cat
            .terms
            .as_ref()
            .ok_or_else(|| Error::InputContract("cube term not configured".into()))?;
        let n = ctx.len();
        let d = kit.d;
        if n < d {
            return Err(Error::InputContract(format!(
                "representations need n >= d (n={n}, d={d})"
            )));
        }
        let arities: Vec<usize> = cat.signature.symbols().iter().map(|(_, a)| *a).collect();
        let mut t_circ = vec![None; n + 1];
        for l in d..=n {
            t_circ[l] = Some(build_tn(l, d, 1)?);
        }
        Ok(Rep {
            cat,
            ctx,
            gens: gens.clone(),
            tuples: Vec::new(),
            tuple_ids: HashMap::new(),
            prov: Vec::new(),
            local: BTreeMap::new(),
            forks: BTreeMap::new(),
            arena: CircuitBuilder::new(gens.len(), arities),
            t_circ,
        })
    }

    pub fn kit(&self) -> &TermKit {
        self.cat.terms.as_ref().unwrap()
    }

    pub fn d(&self) -> usize {
        self.kit().d
    }

    pub fn n(&self) -> usize {
        self.ctx.len()
    }

    /// Inserts a tuple (deduplicated); earlier provenance is kept.
    pub fn add_tuple(&mut self, t: Tuple, prov: Option<u32>) -> usize {
        if let Some(&id) = self.tuple_ids.get(&t) {
            if self.prov[id].is_none() {
                self.prov[id] = prov;
            }
            return id;
        }
        let id = self.tuples.len();
        self.tuple_ids.insert(t.clone(), id);
        self.tuples.push(t);
        self.prov.push(prov);
        id
    }

    pub fn tuple_id(&self, t: &[Elem]) -> Option<usize> {
        self.tuple_ids.get(t).copied()
    }

    /// First designation wins; later attempts are ignored.
    pub fn designate_local(&mut self, i_set: Vec<usize>, proj: Tuple, tuple: usize) {
        self.local.entry((i_set, proj)).or_insert(tuple);
    }

    pub fn designate_fork(&mut self, key: ForkKey, pair: (usize, usize)) {
        self.forks.entry(key).or_insert(pair);
    }

    pub fn local_witness(&self, i_set: &[usize], proj: &[Elem]) -> Option<usize> {
        self.local
            .get(&(i_set.to_vec(), proj.to_vec()) as &LocalKey)
            .copied()
    }

    pub fn provenance_gate(&self, tuple: usize) -> Option<u32> {
        self.prov[tuple]
    }

    /// Gate id for a generator input.
    pub fn gen_gate(&self, j: usize) -> u32 {
        j as u32
    }

    /// Applies an operation symbol to tuples, composing provenance.
    fn apply_op(&mut self, sym: usize, args: &[usize]) -> (Tuple, Option<u32>) {
        let tuples: Vec<&Tuple> = args.iter().map(|&a| &self.tuples[a]).collect();
        let out = self.ctx.apply(self.cat, sym, &tuples);
        let gates: Option<Vec<u32>> = args.iter().map(|&a| self.prov[a]).collect();
        let g = gates.map(|gs| self.arena.app(sym, &gs));
        (out, g)
    }

    /// p(x,u,y) on tuples already in the rep, with provenance.
    fn p_apply_ids(&mut self, x: usize, u: usize, y: usize) -> (Tuple, Option<u32>) {
        let kit = self.kit();
        let out = kit.p_apply(
            self.cat,
            &self.ctx,
            &self.tuples[x],
            &self.tuples[u],
            &self.tuples[y],
        );
        let p_circ = kit.p.clone();
        let g = match (self.prov[x], self.prov[u], self.prov[y]) {
            (Some(a), Some(b), Some(c)) => Some(self.arena.inline(&p_circ, &[a, b, c])[0]),
            _ => None,
        };
        (out, g)
    }

    /// Extracts the F-circuit computing a tuple from the generators.
    pub fn witness_circuit(&self, tuple: usize) -> Result<Circuit> {
        let gate = self.prov[tuple].ok_or(Error::ProvenanceMissing(tuple))?;
        Ok(self.arena.clone_pruned(gate))
    }

    pub fn designated_fork_keys_at(&self, m: usize) -> Vec<ForkKey> {
        self.forks
            .keys()
            .filter(|k| k.0 == m)
            .cloned()
            .collect()
    }
}

// ---------------------------------------------------------------------------
// The IsRepresentable chain (Algorithm 1)

#[derive(Debug, Clone)]
pub struct ForkAddition {
    pub key: ForkKey,
    pub witness: (Tuple, Tuple),
}

#[derive(Debug)]
pub struct Alg1Output {
    pub representable: bool,
    /// Designated witnesses missing for derived forks (S').
    pub s_prime: Vec<ForkAddition>,
    /// Designated witnesses missing for the corresponding plain forks (S).
    pub s_plain: Vec<ForkAddition>,
    /// The chain values b^(d-1), .., b^(n); the last equals `b` when the
    /// required designations (plus S') exist.
    pub chain: Vec<Tuple>,
}

/// Runs Algorithm 1 without modifying the representation: walks the chain
/// b^(m) = t_m(b^(m-1), uhat, u, w), collecting the missing designated
/// witnesses for derived forks into S' and for plain forks into S. The
/// answer is YES iff S' is empty. Requires designated local witnesses for
/// every projection of `b`.
pub fn is_representable(rep: &Rep, b: &Tuple) -> Result<Alg1Output> {
    let d = rep.d();
    let n = rep.n();
    let kit = rep.kit();
    let mut locals: Vec<usize> = Vec::new();
    for i_set in subsets_lex(n, d - 1) {
        let proj: Tuple = i_set.iter().map(|&i| b[i]).collect();
        match rep.local_witness(&i_set, &proj) {
            Some(t) => locals.push(t),
            None => {
                return Err(Error::InputContract(format!(
                    "missing local witness for I = {i_set:?}"
                )))
            }
        }
    }
    let all_subsets = subsets_lex(n, d - 1);
    let first: Vec<usize> = (0..d - 1).collect();
    let first_rank = all_subsets.iter().position(|s| *s == first).unwrap();
    let mut cur = rep.tuples[locals[first_rank]].clone();
    let mut chain = vec![cur.clone()];
    let mut s_prime: Vec<ForkAddition> = Vec::new();
    let mut s_plain: Vec<ForkAddition> = Vec::new();
    // virtual designations added along the way (S' and S entries)
    let mut virt: HashMap<ForkKey, (Tuple, Tuple)> = HashMap::new();
    for m in (d - 1)..n {
        let l = m + 1; // prefix length
        let beta = cur[m];
        let gamma = b[m];
        let alg = rep.ctx.factors[m];
        let delta = kit.xy_apply(rep.cat, alg, beta, gamma);
        let derived_key = (m, gamma, delta);
        let plain_key = (m, gamma, beta);
        let have_derived = rep.forks.contains_key(&derived_key) || virt.contains_key(&derived_key);
        if !have_derived {
            let c = kit.p_apply(rep.cat, &rep.ctx, &cur, b, b);
            virt.insert(derived_key, (b.clone(), c.clone()));
            s_prime.push(ForkAddition {
                key: derived_key,
                witness: (b.clone(), c),
            });
        }
        let have_plain = rep.forks.contains_key(&plain_key) || virt.contains_key(&plain_key);
        if !have_plain {
            virt.insert(plain_key, (b.clone(), cur.clone()));
            s_plain.push(ForkAddition {
                key: plain_key,
                witness: (b.clone(), cur.clone()),
            });
        }
        let (u, uhat): (Tuple, Tuple) = match rep.forks.get(&derived_key) {
            Some(&(ui, uhi)) => (rep.tuples[ui].clone(), rep.tuples[uhi].clone()),
            None => virt[&derived_key].clone(),
        };
        cur = eval_t_level(rep, l, &cur, &uhat, &u, b, &locals)?;
        chain.push(cur.clone());
    }
    Ok(Alg1Output {
        representable: s_prime.is_empty(),
        s_prime,
        s_plain,
        chain,
    })
}

/// b^(m) = t_l(b^(m-1), uhat, u, (w_I)) for prefix length l, with w_I the
/// designated local witnesses of b's projections.
fn eval_t_level(
    rep: &Rep,
    l: usize,
    cur: &Tuple,
    uhat: &Tuple,
    u: &Tuple,
    _b: &Tuple,
    locals: &[usize],
) -> Result<Tuple> {
    let d = rep.d();
    let n = rep.n();
    let kit = rep.kit();
    let t = rep.t_circ[l].as_ref().unwrap();
    let all = subsets_lex(n, d - 1);
    let mut args: Vec<&Tuple> = vec![cur, uhat, u];
    for (rank, i_set) in all.iter().enumerate() {
        if i_set.iter().all(|&i| i < l) {
            args.push(&rep.tuples[locals[rank]]);
        }
    }
    kit.eval_p_product(rep.cat, &rep.ctx, t, &args)
}

/// Commits the output of Algorithm 1 into the representation: adds the S'
/// and S witnesses with designations, composing provenance for the chain.
/// `b_prov` is the provenance gate of `b` when known.
pub fn commit_alg1(rep: &mut Rep, b: &Tuple, b_prov: Option<u32>, out: &Alg1Output) {
    let tid_b = rep.add_tuple(b.clone(), b_prov);
    // chain provenance: replay the levels, composing t-circuits in the arena
    let d = rep.d();
    let n = rep.n();
    let all = subsets_lex(n, d - 1);
    let first: Vec<usize> = (0..d - 1).collect();
    let first_rank = all.iter().position(|s| *s == first).unwrap();
    let local_ids: Option<Vec<usize>> = all
        .iter()
        .map(|i_set| {
            let proj: Tuple = i_set.iter().map(|&i| b[i]).collect();
            rep.local_witness(i_set, &proj)
        })
        .collect();
    let local_ids = local_ids.expect("checked by is_representable");
    let mut cur_id = local_ids[first_rank];
    let mut cur_prov = rep.prov[cur_id];
    let sp: HashMap<ForkKey, &ForkAddition> = out.s_prime.iter().map(|a| (a.key, a)).collect();
    let sp_plain: HashMap<ForkKey, &ForkAddition> =
        out.s_plain.iter().map(|a| (a.key, a)).collect();
    for m in (d - 1)..n {
        let l = m + 1;
        let cur = rep.tuples[cur_id].clone();
        let beta = cur[m];
        let gamma = b[m];
        let delta = rep
            .kit()
            .xy_apply(rep.cat, rep.ctx.factors[m], beta, gamma);
        let derived_key = (m, gamma, delta);
        let plain_key = (m, gamma, beta);
        if let Some(add) = sp.get(&derived_key) {
            // witnesses are (b, p(b^(m-1), b, b))
            let (c, c_prov) = {
                let (val, g) = rep.p_apply_ids(cur_id, tid_b, tid_b);
                debug_assert_eq!(val, add.witness.1);
                (val, g)
            };
            let tid_c = rep.add_tuple(c, c_prov);
            rep.designate_fork(derived_key, (tid_b, tid_c));
        }
        if let Some(add) = sp_plain.get(&plain_key) {
            debug_assert_eq!(add.witness.1, cur);
            rep.designate_fork(plain_key, (tid_b, cur_id));
        }
        let (ui, uhi) = rep.forks[&derived_key];
        // value of the next level comes from the recorded chain
        let next = out.chain[l - (d - 1)].clone();
        let next_prov = compose_t_prov(rep, l, cur_prov, rep.prov[uhi], rep.prov[ui], &local_ids);
        cur_id = rep.add_tuple(next, next_prov);
        cur_prov = rep.prov[cur_id];
    }
}

fn compose_t_prov(
    rep: &mut Rep,
    l: usize,
    cur: Option<u32>,
    uhat: Option<u32>,
    u: Option<u32>,
    local_ids: &[usize],
) -> Option<u32> {
    let d = rep.d();
    let n = rep.n();
    let all = subsets_lex(n, d - 1);
    let mut bound: Vec<u32> = vec![cur?, uhat?, u?];
    for (rank, i_set) in all.iter().enumerate() {
        if i_set.iter().all(|&i| i < l) {
            bound.push(rep.prov[local_ids[rank]]?);
        }
    }
    let t = rep.t_circ[l].as_ref().unwrap().clone();
    let p_term = rep.kit().p_term.clone();
    Some(inline_p_as_f(&mut rep.arena, &t, &bound, &p_term))
}

/// Inlines a P-circuit into an F-arena, replacing every P-gate by the
/// F-circuit of the parallelogram term.
pub fn inline_p_as_f(
    arena: &mut CircuitBuilder,
    p_circ: &Circuit,
    bound: &[u32],
    p_term: &Circuit,
) -> u32 {
    let mut map: Vec<u32> = bound.to_vec();
    for g in &p_circ.gates {
        let args: Vec<u32> = g.args.iter().map(|&a| map[a as usize]).collect();
        map.push(arena.inline(p_term, &args)[0]);
    }
    map[p_circ.output() as usize]
}

/// Membership answer by representation (the core of the SMP reduction):
/// NO when some projection of `b` has no designated local witness, else the
/// Algorithm-1 answer.
pub fn query_membership(rep: &Rep, b: &Tuple) -> Result<bool> {
    let d = rep.d();
    let n = rep.n();
    for i_set in subsets_lex(n, d - 1) {
        let proj: Tuple = i_set.iter().map(|&i| b[i]).collect();
        if rep.local_witness(&i_set, &proj).is_none() {
            return Ok(false);
        }
    }
    Ok(is_representable(rep, b)?.representable)
}

/// Whether `b` is completely representable: designated locals everywhere and
/// designated witnesses for both the derived and the plain fork at every
/// level of the chain.
pub fn is_completely_representable(rep: &Rep, b: &Tuple) -> Result<bool> {
    let d = rep.d();
    let n = rep.n();
    let kit = rep.kit();
    let all = subsets_lex(n, d - 1);
    let mut locals: Vec<usize> = Vec::with_capacity(all.len());
    for i_set in &all {
        let proj: Tuple = i_set.iter().map(|&i| b[i]).collect();
        match rep.local_witness(i_set, &proj) {
            Some(t) => locals.push(t),
            None => return Ok(false),
        }
    }
    let first: Vec<usize> = (0..d - 1).collect();
    let first_rank = all.iter().position(|s| *s == first).unwrap();
    let mut cur = rep.tuples[locals[first_rank]].clone();
    for m in (d - 1)..n {
        let beta = cur[m];
        let gamma = b[m];
        let delta = kit.xy_apply(rep.cat, rep.ctx.factors[m], beta, gamma);
        let Some(&(ui, uhi)) = rep.forks.get(&(m, gamma, delta)) else {
            return Ok(false);
        };
        if !rep.forks.contains_key(&(m, gamma, beta)) {
            return Ok(false);
        }
        let (u, uhat) = (rep.tuples[ui].clone(), rep.tuples[uhi].clone());
        cur = eval_t_level(rep, m + 1, &cur, &uhat, &u, b, &locals)?;
    }
    Ok(&cur == b)
}

// ---------------------------------------------------------------------------
// LocalRep (Algorithm 2)

/// Builds a full set of designated local witnesses for the subalgebra
/// generated by `gens`, plus, for a nontrivial product relation theta, the
/// shifted witnesses that make the output a local-witness set for the
/// theta-saturation.
pub fn local_rep<'c>(
    cat: &'c Catalog,
    ctx: &Context,
    gens: &[Tuple],
    theta: &[FactorRel],
) -> Result<Rep<'c>> {
    let mut rep = Rep::new(cat, ctx.clone(), gens.to_vec())?;
    let d = rep.d();
    let n = ctx.len();
    if theta.len() != n {
        return Err(Error::InputContract("one factor relation per factor".into()));
    }
    for (j, g) in gens.iter().enumerate() {
        ctx.check_tuple(cat, g)?;
        let _ = j;
    }
    for i_set in subsets_lex(n, d - 1) {
        // generate B|_I with full-width preimages tracked alongside
        let proj_ctx = ctx.project(&i_set);
        let proj_gens: Vec<Tuple> = gens
            .iter()
            .map(|g| i_set.iter().map(|&i| g[i]).collect())
            .collect();
        let closure = subalgebra_closure(
            cat,
            &proj_ctx,
            &proj_gens,
            &ClosureOpts {
                cap: cat.closure_cap,
                provenance: true,
                force_generic: true,
                target: None,
            },
        )?;
        let prov = closure.prov.as_ref().unwrap();
        // full-width preimage and arena gate per closure element
        let mut full: Vec<usize> = Vec::with_capacity(closure.elems.len());
        for (idx, bbar) in closure.elems.iter().enumerate() {
            let tid = match &prov[idx] {
                Prov::Gen(j) => {
                    let g = rep.gen_gate(*j);
                    rep.add_tuple(gens[*j].clone(), Some(g))
                }
                Prov::App(sym, args) => {
                    let ids: Vec<usize> = args.iter().map(|&a| full[a as usize]).collect();
                    let (t, g) = rep.apply_op(*sym, &ids);
                    rep.add_tuple(t, g)
                }
            };
            full.push(tid);
            if rep.local_witness(&i_set, bbar).is_none() {
                rep.designate_local(i_set.clone(), bbar.clone(), tid);
                // theta-shifted designated witnesses (Steps 6-8)
                if !i_set.iter().all(|&i| theta[i].is_identity()) {
                    let base = rep.tuples[tid].clone();
                    let mates: Vec<Vec<Elem>> = i_set
                        .iter()
                        .enumerate()
                        .map(|(t, &i)| theta[i].classmates(bbar[t]))
                        .collect();
                    let mut pick = vec![0usize; i_set.len()];
                    loop {
                        let dbar: Tuple = pick
                            .iter()
                            .zip(mates.iter())
                            .map(|(&p, m)| m[p])
                            .collect();
                        if dbar != *bbar && rep.local_witness(&i_set, &dbar).is_none() {
                            let mut shifted = base.clone();
                            for (t, &i) in i_set.iter().enumerate() {
                                shifted[i] = dbar[t];
                            }
                            let sid = rep.add_tuple(shifted, None);
                            rep.designate_local(i_set.clone(), dbar, sid);
                        }
                        let mut j = pick.len();
                        let mut done = true;
                        while j > 0 {
                            j -= 1;
                            pick[j] += 1;
                            if pick[j] < mates[j].len() {
                                done = false;
                                break;
                            }
                            pick[j] = 0;
                        }
                        if done {
                            break;
                        }
                    }
                }
            }
        }
    }
    Ok(rep)
}

pub fn identity_rels(cat: &Catalog, ctx: &Context) -> Vec<FactorRel> {
    ctx.factors
        .iter()
        .map(|&f| FactorRel::identity(cat.alg(f).size))
        .collect()
}

// ---------------------------------------------------------------------------
// Saturation generators (Theorem-style: G, Lambda, Phi)

/// A generating set for the theta-saturation B[theta]: the input generators,
/// the local witnesses Lambda from `local_rep` run with theta, and the
/// single-coordinate shifts Phi. Falls back to the direct closure when
/// n < d.
pub fn saturation_generators(
    cat: &Catalog,
    ctx: &Context,
    gens: &[Tuple],
    theta: &[FactorRel],
) -> Result<Vec<Tuple>> {
    let kit = cat
        .terms
        .as_ref()
        .ok_or_else(|| Error::InputContract("cube term not configured".into()))?;
    let n = ctx.len();
    if n < kit.d {
        // direct closure, then expand by theta-classes
        let closure = subalgebra_closure(cat, ctx, gens, &ClosureOpts::default())?;
        let mut out: Vec<Tuple> = Vec::new();
        let mut seen = HashSet::new();
        for t in &closure.elems {
            let mates: Vec<Vec<Elem>> = (0..n).map(|i| theta[i].classmates(t[i])).collect();
            let mut pick = vec![0usize; n];
            loop {
                let cand: Tuple = pick.iter().zip(&mates).map(|(&p, m)| m[p]).collect();
                if seen.insert(cand.clone()) {
                    out.push(cand);
                }
                let mut j = n;
                let mut done = true;
                while j > 0 {
                    j -= 1;
                    pick[j] += 1;
                    if pick[j] < mates[j].len() {
                        done = false;
                        break;
                    }
                    pick[j] = 0;
                }
                if done {
                    break;
                }
            }
        }
        return Ok(out);
    }
    let lambda_rep = local_rep(cat, ctx, gens, theta)?;
    let mut out: Vec<Tuple> = Vec::new();
    let mut seen: HashSet<Tuple> = HashSet::new();
    for g in gens {
        if seen.insert(g.clone()) {
            out.push(g.clone());
        }
    }
    for t in &lambda_rep.tuples {
        if seen.insert(t.clone()) {
            out.push(t.clone());
        }
    }
    for phi in phi_shifts(cat, ctx, gens, theta)? {
        if seen.insert(phi.clone()) {
            out.push(phi);
        }
    }
    Ok(out)
}

/// The Phi set: for every coordinate i and every beta in B|_i with a
/// generated witness b, and every gamma theta_i-related to beta, the tuple
/// that agrees with b off i and has gamma at i.
pub fn phi_shifts(
    cat: &Catalog,
    ctx: &Context,
    gens: &[Tuple],
    theta: &[FactorRel],
) -> Result<Vec<Tuple>> {
    let n = ctx.len();
    let mut out = Vec::new();
    for i in 0..n {
        let proj_ctx = ctx.project(&[i]);
        let proj_gens: Vec<Tuple> = gens.iter().map(|g| vec![g[i]]).collect();
        let closure = subalgebra_closure(
            cat,
            &proj_ctx,
            &proj_gens,
            &ClosureOpts {
                cap: cat.closure_cap,
                provenance: true,
                force_generic: true,
                target: None,
            },
        )?;
        let prov = closure.prov.as_ref().unwrap();
        let mut full: Vec<Tuple> = Vec::with_capacity(closure.elems.len());
        for (idx, beta_t) in closure.elems.iter().enumerate() {
            let lifted: Tuple = match &prov[idx] {
                Prov::Gen(j) => gens[*j].clone(),
                Prov::App(sym, args) => {
                    let refs: Vec<&Tuple> = args.iter().map(|&a| &full[a as usize]).collect();
                    ctx.apply(cat, *sym, &refs)
                }
            };
            full.push(lifted.clone());
            let beta = beta_t[0];
            for gamma in theta[i].classmates(beta) {
                let mut c = lifted.clone();
                c[i] = gamma;
                out.push(c);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CompactRep, direct (Algorithm 4) with the FNP fork-witness oracle

pub struct CompactOpts {
    /// Cap on the brute closure that backs the oracle's enumeration of
    /// completely representable elements (the documented FNP gap).
    pub oracle_cap: usize,
}

impl Default for CompactOpts {
    fn default() -> Self {
        CompactOpts { oracle_cap: 20_000 }
    }
}

/// One YES answer of the NeedForkWitnesses oracle: an operation applied to
/// completely representable tuples whose image is not.
#[derive(Debug)]
pub struct ForkOracleYes {
    pub sym: usize,
    pub args: Vec<Tuple>,
    pub image: Tuple,
}

/// Desk-scale realization of the NeedForkWitnesses oracle. Enumerates the
/// set of completely representable elements inside the brute closure of the
/// generators, finds the first operation image escaping it, and commits the
/// Algorithm-1 augmentation for that image. Returns `None` when the set is
/// closed. The enumeration is capped; past the cap the FNP gap is a hard
/// error.
pub fn need_fork_witnesses(
    rep: &mut Rep,
    full: &crate::algebra::Closure,
    opts: &CompactOpts,
) -> Result<Option<ForkOracleYes>> {
    if full.len() > opts.oracle_cap {
        return Err(Error::Cap {
            what: "NeedForkWitnesses enumeration".into(),
            cap: opts.oracle_cap,
        });
    }
    let mut in_rep = vec![false; full.len()];
    let mut rep_elems: Vec<usize> = Vec::new();
    for (i, t) in full.elems.iter().enumerate() {
        if is_completely_representable(rep, t)? {
            in_rep[i] = true;
            rep_elems.push(i);
        }
    }
    if rep_elems.len() == full.len() {
        return Ok(None); // Rep(R) = B, closed under every operation
    }
    // find the first operation image leaving Rep(R)
    let nsym = rep.cat.signature.len();
    for sym in 0..nsym {
        let r = rep.cat.signature.arity(sym);
        let mut pick = vec![0usize; r];
        loop {
            let args: Vec<&Tuple> = pick.iter().map(|&p| &full.elems[rep_elems[p]]).collect();
            let image = rep.ctx.apply(rep.cat, sym, &args);
            let idx = full.index[&image] as usize;
            if !in_rep[idx] {
                let args_owned: Vec<Tuple> = args.into_iter().cloned().collect();
                // provenance of the image from the arguments' chains
                let arg_provs: Option<Vec<u32>> = args_owned
                    .iter()
                    .map(|a| provenance_of_representable(rep, a))
                    .collect::<Result<Vec<Option<u32>>>>()?
                    .into_iter()
                    .collect();
                let image_prov = arg_provs.map(|gs| rep.arena_app(sym, &gs));
                let out = is_representable(rep, &image)?;
                commit_alg1(rep, &image, image_prov, &out);
                return Ok(Some(ForkOracleYes {
                    sym,
                    args: args_owned,
                    image,
                }));
            }
            let mut j = r;
            let mut done = true;
            while j > 0 {
                j -= 1;
                pick[j] += 1;
                if pick[j] < rep_elems.len() {
                    done = false;
                    break;
                }
                pick[j] = 0;
            }
            if done {
                break;
            }
        }
    }
    // Rep(R) is a proper subset of the closure yet closed: impossible when
    // the generators are representable
    Err(Error::Invalid(
        "representable set not closed but no escaping image found".into(),
    ))
}

/// Provenance for a completely representable tuple: splices the t-level
/// circuits over the designated witnesses' provenance.
fn provenance_of_representable(rep: &mut Rep, b: &Tuple) -> Result<Option<u32>> {
    if let Some(id) = rep.tuple_id(b) {
        if let Some(g) = rep.provenance_gate(id) {
            return Ok(Some(g));
        }
    }
    let d = rep.d();
    let n = rep.n();
    let all = subsets_lex(n, d - 1);
    let mut local_ids = Vec::with_capacity(all.len());
    for i_set in &all {
        let proj: Tuple = i_set.iter().map(|&i| b[i]).collect();
        match rep.local_witness(i_set, &proj) {
            Some(t) => local_ids.push(t),
            None => return Ok(None),
        }
    }
    let first: Vec<usize> = (0..d - 1).collect();
    let first_rank = all.iter().position(|s| *s == first).unwrap();
    let mut cur_id = local_ids[first_rank];
    let mut cur_prov = rep.provenance_gate(cur_id);
    let kit_d = rep.kit().d;
    for m in (kit_d - 1)..n {
        let cur = rep.tuples[cur_id].clone();
        let beta = cur[m];
        let gamma = b[m];
        let delta = rep
            .kit()
            .xy_apply(rep.cat, rep.ctx.factors[m], beta, gamma);
        let Some(&(ui, uhi)) = rep.forks.get(&(m, gamma, delta)) else {
            return Ok(None);
        };
        let u = rep.tuples[ui].clone();
        let uhat = rep.tuples[uhi].clone();
        let next = eval_t_level(rep, m + 1, &cur, &uhat, &u, b, &local_ids)?;
        let next_prov = compose_t_prov(
            rep,
            m + 1,
            cur_prov,
            rep.provenance_gate(uhi),
            rep.provenance_gate(ui),
            &local_ids,
        );
        cur_id = rep.add_tuple(next, next_prov);
        cur_prov = rep.provenance_gate(cur_id);
    }
    Ok(cur_prov)
}

impl<'c> Rep<'c> {
    fn arena_app(&mut self, sym: usize, args: &[u32]) -> u32 {
        self.arena.app(sym, args)
    }
}

/// Algorithm-4 style construction of a standardized representation: local
/// witnesses, Algorithm 1 on every generator, the fork-witness oracle to a
/// fixpoint, and a weak-transitivity completion pass.
pub fn compact_rep_direct<'c>(
    cat: &'c Catalog,
    ctx: &Context,
    gens: &[Tuple],
    opts: &CompactOpts,
) -> Result<Rep<'c>> {
    let rels = identity_rels(cat, ctx);
    let mut rep = local_rep(cat, ctx, gens, &rels)?;
    for (j, g) in gens.iter().enumerate() {
        let out = is_representable(&rep, g)?;
        let gate = rep.gen_gate(j);
        commit_alg1(&mut rep, g, Some(gate), &out);
    }
    let full = subalgebra_closure(
        cat,
        ctx,
        gens,
        &ClosureOpts {
            cap: opts.oracle_cap,
            ..Default::default()
        },
    )
    .map_err(|e| match e {
        Error::ClosureCap(c) => Error::Cap {
            what: "NeedForkWitnesses enumeration".into(),
            cap: c,
        },
        other => other,
    })?;
    while need_fork_witnesses(&mut rep, &full, opts)?.is_some() {}
    weak_transitivity_pass(&mut rep)?;
    Ok(rep)
}

/// Steps 9-15 of the direct algorithm: close the designated forks under the
/// weak transitivity rule, one pass over the designations present at entry.
fn weak_transitivity_pass(rep: &mut Rep) -> Result<()> {
    let d = rep.d();
    let n = rep.n();
    for m in (d - 1)..n {
        let keys = rep.designated_fork_keys_at(m);
        for &(_, gamma, delta) in &keys {
            for &(_, beta, delta2) in &keys {
                if delta != delta2 {
                    continue;
                }
                let target = rep
                    .kit()
                    .xy_apply(rep.cat, rep.ctx.factors[m], beta, gamma);
                if rep.forks.contains_key(&(m, gamma, target)) {
                    continue;
                }
                let (vi, vhi) = rep.forks[&(m, gamma, delta)];
                let (ui, uhi) = rep.forks[&(m, beta, delta)];
                let kit = rep.kit();
                let (v, vh, u, uh) = (
                    rep.tuples[vi].clone(),
                    rep.tuples[vhi].clone(),
                    rep.tuples[ui].clone(),
                    rep.tuples[uhi].clone(),
                );
                let (first, second) =
                    weak_transitivity_witness(rep.cat, kit, &rep.ctx, &v, &vh, &u, &uh, m)?;
                // p(p(v,vh,uh), p(v,vh,vh), v) and p(u,v,v), with provenance
                let (inner, inner_g) = rep.p_apply_ids(vi, vhi, uhi);
                let iid = rep.add_tuple(inner, inner_g);
                let (mid, mid_g) = rep.p_apply_ids(vi, vhi, vhi);
                let mid_id = rep.add_tuple(mid, mid_g);
                let (f, f_g) = rep.p_apply_ids(iid, mid_id, vi);
                debug_assert_eq!(f, first);
                let fid = rep.add_tuple(f, f_g);
                let (s, s_g) = rep.p_apply_ids(ui, vi, vi);
                debug_assert_eq!(s, second);
                let sid = rep.add_tuple(s, s_g);
                rep.designate_fork((m, gamma, target), (fid, sid));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CompactRep via an SMP oracle (Algorithm 5)

/// Membership oracle: given a (prefix) context, generators, and a target,
/// decide whether the target lies in the generated subalgebra.
pub type SmpOracle<'a> = dyn FnMut(&Context, &[Tuple], &Tuple) -> Result<bool> + 'a;

/// Builds a standardized representation by testing each candidate derived
/// fork with an SMP oracle on prefix instances and extending witnesses
/// coordinate by coordinate.
pub fn compact_rep_via_smp<'c>(
    cat: &'c Catalog,
    ctx: &Context,
    gens: &[Tuple],
    oracle: &mut SmpOracle,
) -> Result<Rep<'c>> {
    let rels = identity_rels(cat, ctx);
    let mut rep = local_rep(cat, ctx, gens, &rels)?;
    let d = rep.d();
    let n = ctx.len();
    let r0: Vec<Tuple> = rep.tuples.clone();
    for i in (d - 1)..n {
        // B|_i in deterministic order
        let proj_ctx = ctx.project(&[i]);
        let proj_gens: Vec<Tuple> = gens.iter().map(|g| vec![g[i]]).collect();
        let bi = subalgebra_closure(
            cat,
            &proj_ctx,
            &proj_gens,
            &ClosureOpts {
                force_generic: true,
                ..Default::default()
            },
        )?;
        for gamma_t in &bi.elems {
            let gamma = gamma_t[0];
            let b = r0
                .iter()
                .find(|t| t[i] == gamma)
                .ok_or_else(|| Error::Invalid("local witnesses miss a projection".into()))?;
            for beta_t in &bi.elems {
                let beta = beta_t[0];
                let delta = rep.kit().xy_apply(cat, ctx.factors[i], beta, gamma);
                if rep.forks.contains_key(&(i, gamma, delta)) {
                    continue;
                }
                let prefix: Vec<usize> = (0..=i).collect();
                let pctx = ctx.project(&prefix);
                let pgens: Vec<Tuple> = gens.iter().map(|g| g[..=i].to_vec()).collect();
                let mut c: Tuple = b[..i].to_vec();
                c.push(delta);
                if !oracle(&pctx, &pgens, &c)? {
                    continue;
                }
                // extend c coordinate by coordinate
                for j in i + 1..n {
                    let jctx = ctx.project(&(0..=j).collect::<Vec<_>>());
                    let jgens: Vec<Tuple> = gens.iter().map(|g| g[..=j].to_vec()).collect();
                    let size = cat.alg(ctx.factors[j]).size as Elem;
                    let mut found = None;
                    for cand in 0..size {
                        let mut cj = c.clone();
                        cj.push(cand);
                        if oracle(&jctx, &jgens, &cj)? {
                            found = Some(cj);
                            break;
                        }
                    }
                    c = found.ok_or_else(|| {
                        Error::Invalid("oracle accepted a prefix with no extension".into())
                    })?;
                }
                let tid_b = rep.add_tuple(b.clone(), None);
                let tid_c = rep.add_tuple(c, None);
                rep.designate_fork((i, gamma, delta), (tid_b, tid_c));
            }
        }
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Witness circuits

/// Extracts an F-circuit over the generators that evaluates to `b`, either
/// straight from recorded provenance or by splicing the chain circuits over
/// the designated witnesses. The evaluation is re-checked.
pub fn extract_witness_circuit(rep: &mut Rep, b: &Tuple) -> Result<Circuit> {
    // a generator is its own witness
    if let Some(j) = rep.gens.iter().position(|g| g == b) {
        let circ = Circuit::identity(rep.gens.len(), j);
        return Ok(circ);
    }
    let gate = match rep.tuple_id(b).and_then(|id| rep.provenance_gate(id)) {
        Some(g) => g,
        None => provenance_of_representable(rep, b)?.ok_or(Error::ProvenanceMissing(0))?,
    };
    let circ = rep.arena.clone_pruned(gate);
    let args: Vec<&Tuple> = rep.gens.iter().collect();
    let value = crate::circuit::eval_circuit_product(rep.cat, &rep.ctx, &circ, &args)?;
    if &value != b {
        return Err(Error::Invalid("witness circuit evaluation mismatch".into()));
    }
    Ok(circ)
}

// ---------------------------------------------------------------------------
// Rep files

#[derive(Serialize, Deserialize)]
struct LocalEntry {
    #[serde(rename = "I")]
    i_set: Vec<usize>,
    proj: Vec<u8>,
    tuple: usize,
}

#[derive(Serialize, Deserialize)]
struct ForkEntry {
    m: usize,
    gamma: u8,
    delta: u8,
    pair: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct RepFile {
    tuples: Vec<Vec<u8>>,
    local: Vec<LocalEntry>,
    forks: Vec<ForkEntry>,
}

pub fn rep_to_json(rep: &Rep) -> Result<String> {
    let file = RepFile {
        tuples: rep.tuples.clone(),
        local: rep
            .local
            .iter()
            .map(|((i_set, proj), &tuple)| LocalEntry {
                i_set: i_set.clone(),
                proj: proj.clone(),
                tuple,
            })
            .collect(),
        forks: rep
            .forks
            .iter()
            .map(|(&(m, gamma, delta), &(u, uh))| ForkEntry {
                m,
                gamma,
                delta,
                pair: [u, uh],
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Structural validation of a rep file: designation indices in range and
/// projections consistent with the designated tuples.
pub fn validate_rep_json(text: &str) -> Result<()> {
    let file: RepFile = serde_json::from_str(text)?;
    for e in &file.local {
        let t = file
            .tuples
            .get(e.tuple)
            .ok_or_else(|| Error::Parse("local designation out of range".into()))?;
        for (k, &i) in e.i_set.iter().enumerate() {
            if t.get(i) != e.proj.get(k) {
                return Err(Error::Parse("local witness projection mismatch".into()));
            }
        }
    }
    for f in &file.forks {
        let u = file
            .tuples
            .get(f.pair[0])
            .ok_or_else(|| Error::Parse("fork designation out of range".into()))?;
        let uh = file
            .tuples
            .get(f.pair[1])
            .ok_or_else(|| Error::Parse("fork designation out of range".into()))?;
        if u[..f.m] != uh[..f.m] || u[f.m] != f.gamma || uh[f.m] != f.delta {
            return Err(Error::Parse("fork witness pair mismatch".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::Catalog;
    use crate::circuit::configure_terms;
    use crate::samples;
    use crate::solver::{smp_brute, ResolvedInstance};

    fn catalog(names: &[&str]) -> Catalog {
        let mut cat = samples::maltsev_catalog(names);
        let p = samples::maltsev_p(&cat.signature);
        configure_terms(&mut cat, p).unwrap();
        cat
    }

    fn odd_coset(cat: &Catalog) -> (Context, Vec<Tuple>, Vec<Tuple>) {
        let z2 = cat.find("Z2").unwrap();
        let ctx = Context::new(vec![z2, z2, z2]);
        let gens = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
        let closure = subalgebra_closure(cat, &ctx, &gens, &ClosureOpts::default()).unwrap();
        (ctx, gens, closure.elems)
    }

    #[test]
    fn forks_of_the_odd_coset() {
        let cat = catalog(&["Z2"]);
        let (_, _, b) = odd_coset(&cat);
        let f1 = forks(&b, 0);
        assert_eq!(f1.len(), 4); // all of {0,1}^2
        let f3 = forks(&b, 2);
        let keys: Vec<(Elem, Elem)> = f3.keys().cloned().collect();
        assert_eq!(keys, vec![(0, 0), (1, 1)]);
        // singleton: only the reflexive pair
        let single = vec![vec![1, 0, 1]];
        let fs = forks(&single, 1);
        assert_eq!(fs.keys().cloned().collect::<Vec<_>>(), vec![(0, 0)]);
    }

    #[test]
    fn derived_forks_on_z2_and_lattice() {
        let cat = catalog(&["Z2"]);
        let kit = cat.terms.as_ref().unwrap();
        let (_, _, b) = odd_coset(&cat);
        let z2 = cat.find("Z2").unwrap();
        let f = forks(&b, 0);
        // x^y = x makes the derived map the identity on fork pairs
        let df = derived_forks(&cat, kit, z2, &f, 1);
        assert_eq!(
            f.keys().collect::<Vec<_>>(),
            df.keys().collect::<Vec<_>>()
        );

        let mut lcat = samples::lattice_catalog();
        let p = samples::lattice_maj_p(&lcat.signature);
        configure_terms(&mut lcat, p).unwrap();
        let lkit = lcat.terms.as_ref().unwrap();
        let l = lcat.find("lattice2").unwrap();
        let lctx = Context::new(vec![l, l, l]);
        let lgens = vec![vec![0, 1, 1], vec![1, 0, 1], vec![1, 1, 0]];
        let lb = subalgebra_closure(&lcat, &lctx, &lgens, &ClosureOpts::default())
            .unwrap()
            .elems;
        let lf = forks(&lb, 1);
        // x^y = y collapses every (gamma, delta) to (gamma, gamma)
        let ldf = derived_forks(&lcat, lkit, l, &lf, 1);
        assert!(ldf.keys().all(|&(g, d)| g == d));
    }

    #[test]
    fn derived_fork_chain_shrinks() {
        // fork >= fork^1 >= fork^2 on a sampled subalgebra
        let cat = catalog(&["Z4"]);
        let kit = cat.terms.as_ref().unwrap();
        let z4 = cat.find("Z4").unwrap();
        let ctx = Context::new(vec![z4, z4, z4]);
        let gens = vec![vec![0, 1, 2], vec![1, 1, 0], vec![2, 3, 3]];
        let b = subalgebra_closure(&cat, &ctx, &gens, &ClosureOpts::default())
            .unwrap()
            .elems;
        for i in 0..3 {
            let f = forks(&b, i);
            let f1 = derived_forks(&cat, kit, z4, &f, 1);
            let f2 = derived_forks(&cat, kit, z4, &f, 2);
            assert!(f1.keys().all(|k| f.contains_key(k)));
            assert!(f2.keys().all(|k| f1.contains_key(k)));
        }
    }

    #[test]
    fn weak_transitivity_produces_verified_witnesses() {
        let cat = catalog(&["Z2"]);
        let kit = cat.terms.as_ref().unwrap();
        let (ctx, _, b) = odd_coset(&cat);
        // coordinate 1 (0-based): pick fork witnesses sharing delta
        let f = forks(&b, 1);
        for (&(gamma, delta), &(vi, vhi)) in &f {
            for (&(beta, delta2), &(ui, uhi)) in &f {
                if delta != delta2 {
                    continue;
                }
                let (first, second) = weak_transitivity_witness(
                    &cat, kit, &ctx, &b[vi], &b[vhi], &b[ui], &b[uhi], 1,
                )
                .unwrap();
                let z2 = ctx.factors[1];
                assert_eq!(first[1], gamma);
                assert_eq!(second[1], kit.xy_apply(&cat, z2, beta, gamma));
                assert_eq!(first[..1], second[..1]);
                // both outputs stay in the subalgebra
                assert!(b.contains(&first) && b.contains(&second));
            }
        }
    }

    #[test]
    fn weak_transitivity_specialization_and_contract() {
        let cat = catalog(&["Z2"]);
        let kit = cat.terms.as_ref().unwrap();
        let (ctx, _, b) = odd_coset(&cat);
        let f = forks(&b, 2);
        let (&(gamma, _), &(vi, vhi)) = f.iter().next().unwrap();
        // u = v, uhat = vhat specializes to a witness for (gamma, gamma^gamma)
        let (first, second) = weak_transitivity_witness(
            &cat, kit, &ctx, &b[vi], &b[vhi], &b[vi], &b[vhi], 2,
        )
        .unwrap();
        assert_eq!(first[2], gamma);
        assert_eq!(second[2], kit.xy_apply(&cat, ctx.factors[2], gamma, gamma));
        // mismatched delta violates the precondition
        let bad = weak_transitivity_witness(
            &cat,
            kit,
            &ctx,
            &vec![1, 0, 0],
            &vec![0, 1, 0],
            &vec![1, 0, 0],
            &vec![1, 0, 0],
            2,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn local_rep_covers_all_projections_of_the_odd_coset() {
        let cat = catalog(&["Z2"]);
        let (ctx, gens, b) = odd_coset(&cat);
        let rels = identity_rels(&cat, &ctx);
        let rep = local_rep(&cat, &ctx, &gens, &rels).unwrap();
        // six designations: each coordinate takes both values
        assert_eq!(rep.local.len(), 6);
        for ((i_set, proj), &tid) in &rep.local {
            assert_eq!(rep.tuples[tid][i_set[0]], proj[0]);
            assert!(b.contains(&rep.tuples[tid]));
        }
    }

    #[test]
    fn local_rep_adds_theta_shifted_witnesses() {
        let cat = catalog(&["Z4"]);
        let z4 = cat.find("Z4").unwrap();
        let ctx = Context::new(vec![z4, z4]);
        let gens = vec![vec![0, 0], vec![1, 1]];
        let theta = crate::congruence::Congruence::from_blocks(4, &[vec![0, 2], vec![1, 3]]);
        let rels: Vec<FactorRel> = vec![
            FactorRel::from_congruence(&theta),
            FactorRel::from_congruence(&theta),
        ];
        let rep = local_rep(&cat, &ctx, &gens, &rels).unwrap();
        // the diagonal projects onto everything, and each value also gets its
        // theta-classmate designated with a theta-related witness
        for v in 0..4u8 {
            let base = rep.local_witness(&[0], &[v]).expect("designated");
            let mate = v ^ 2; // the other member of v's mod-2 class
            let shifted = rep.local_witness(&[0], &[mate]).expect("shifted");
            let (bt, st) = (&rep.tuples[base], &rep.tuples[shifted]);
            assert!(theta.related(bt[0], st[0]) && theta.related(bt[1], st[1]));
        }
    }

    #[test]
    fn local_rep_single_generator_at_width_d() {
        let cat = catalog(&["Z2"]);
        let z2 = cat.find("Z2").unwrap();
        let ctx = Context::new(vec![z2, z2]);
        let gens = vec![vec![1, 0]];
        let rels = identity_rels(&cat, &ctx);
        let rep = local_rep(&cat, &ctx, &gens, &rels).unwrap();
        // every tuple is a projection witness of the generator's closure
        let closure = subalgebra_closure(&cat, &ctx, &gens, &ClosureOpts::default()).unwrap();
        assert!(rep.tuples.iter().all(|t| closure.contains(t)));
    }

    #[test]
    fn is_representable_on_the_odd_coset() {
        let cat = catalog(&["Z2"]);
        let (ctx, gens, b) = odd_coset(&cat);
        let rep = compact_rep_direct(&cat, &ctx, &gens, &CompactOpts::default()).unwrap();
        let out = is_representable(&rep, &vec![1, 1, 1]).unwrap();
        assert!(out.representable && out.s_prime.is_empty());
        // every member of B is representable with an empty S'
        for t in &b {
            assert!(is_representable(&rep, t).unwrap().representable);
        }
        // the chain prefix invariant: b^(m) agrees with b below each level
        let out = is_representable(&rep, &vec![1, 1, 1]).unwrap();
        for (level, val) in out.chain.iter().enumerate() {
            let upto = (rep.d() - 1) + level;
            assert_eq!(val[..upto], vec![1, 1, 1][..upto]);
        }
    }

    #[test]
    fn is_representable_rejects_outside_tuples() {
        let cat = catalog(&["Z2"]);
        let (ctx, gens, _) = odd_coset(&cat);
        let rep = compact_rep_direct(&cat, &ctx, &gens, &CompactOpts::default()).unwrap();
        let out = is_representable(&rep, &vec![1, 1, 0]).unwrap();
        assert!(!out.representable);
        // the missing derived fork is (0, 1) at the last coordinate
        assert_eq!(out.s_prime.len(), 1);
        assert_eq!(out.s_prime[0].key, (2, 0, 1));
    }

    #[test]
    fn is_representable_requires_local_witnesses() {
        let cat = catalog(&["Z4"]);
        let z4 = cat.find("Z4").unwrap();
        let ctx = Context::new(vec![z4, z4]);
        let gens = vec![vec![0, 0], vec![2, 2]];
        let rels = identity_rels(&cat, &ctx);
        let rep = local_rep(&cat, &ctx, &gens, &rels).unwrap();
        let err = is_representable(&rep, &vec![1, 1]);
        assert!(matches!(err, Err(Error::InputContract(_))));
        // but membership queries answer NO instead of erroring
        assert!(!query_membership(&rep, &vec![1, 1]).unwrap());
    }

    #[test]
    fn compact_rep_direct_matches_brute_forks() {
        let cat = catalog(&["Z2"]);
        let kit = cat.terms.as_ref().unwrap();
        let z2 = cat.find("Z2").unwrap();
        let (ctx, gens, b) = odd_coset(&cat);
        let rep = compact_rep_direct(&cat, &ctx, &gens, &CompactOpts::default()).unwrap();
        // fork keys at each coordinate >= d-1 cover the derived forks of B
        for m in 1..3 {
            let expected = derived_forks(&cat, kit, z2, &forks(&b, m), 1);
            for key in expected.keys() {
                assert!(
                    rep.forks.contains_key(&(m, key.0, key.1)),
                    "missing derived fork {key:?} at {m}"
                );
            }
        }
        // everything in the rep lies in B, and the rep generates B
        assert!(rep.tuples.iter().all(|t| b.contains(t)));
        let regen = subalgebra_closure(&cat, &ctx, &rep.tuples, &ClosureOpts::default()).unwrap();
        assert_eq!(regen.len(), b.len());
        // compactness bound
        let n = 3;
        let a_k = cat.max_size();
        let bound = crate::circuit::binomial(n, rep.d() - 1) * a_k.pow((rep.d() - 1) as u32)
            + 2 * n * a_k * a_k;
        assert!(rep.tuples.len() <= bound);
    }

    #[test]
    fn compact_rep_direct_single_generator() {
        let cat = catalog(&["Z3"]);
        let z3 = cat.find("Z3").unwrap();
        let ctx = Context::new(vec![z3, z3, z3]);
        let gens = vec![vec![1, 2, 0]];
        let rep = compact_rep_direct(&cat, &ctx, &gens, &CompactOpts::default()).unwrap();
        let b = subalgebra_closure(&cat, &ctx, &gens, &ClosureOpts::default()).unwrap();
        let regen = subalgebra_closure(&cat, &ctx, &rep.tuples, &ClosureOpts::default()).unwrap();
        assert_eq!(regen.len(), b.len());
        assert!(regen.elems.iter().all(|t| b.contains(t)));
    }

    #[test]
    fn need_fork_witnesses_is_no_on_standardized_reps() {
        let cat = catalog(&["Z2"]);
        let (ctx, gens, _) = odd_coset(&cat);
        let mut rep = compact_rep_direct(&cat, &ctx, &gens, &CompactOpts::default()).unwrap();
        let full = subalgebra_closure(&cat, &ctx, &gens, &ClosureOpts::default()).unwrap();
        assert!(need_fork_witnesses(&mut rep, &full, &CompactOpts::default())
            .unwrap()
            .is_none());
    }

    #[test]
    fn need_fork_witnesses_finds_missing_forks() {
        let cat = catalog(&["Z2"]);
        let (ctx, gens, _) = odd_coset(&cat);
        let rels = identity_rels(&cat, &ctx);
        // locals only, then make the generators representable
        let mut rep = local_rep(&cat, &ctx, &gens, &rels).unwrap();
        for (j, g) in gens.iter().enumerate() {
            let out = is_representable(&rep, g).unwrap();
            let gate = rep.gen_gate(j);
            commit_alg1(&mut rep, g, Some(gate), &out);
        }
        let full = subalgebra_closure(&cat, &ctx, &gens, &ClosureOpts::default()).unwrap();
        let before = rep.forks.len();
        let mut yes_count = 0;
        while need_fork_witnesses(&mut rep, &full, &CompactOpts::default())
            .unwrap()
            .is_some()
        {
            yes_count += 1;
            assert!(yes_count < 100);
        }
        assert!(rep.forks.len() >= before);
        // afterwards every element of B is completely representable
        for t in &full.elems {
            assert!(is_completely_representable(&rep, t).unwrap());
        }
    }

    #[test]
    fn via_smp_agrees_with_direct_on_key_sets() {
        let cat = catalog(&["Z2"]);
        let (ctx, gens, _) = odd_coset(&cat);
        let direct = compact_rep_direct(&cat, &ctx, &gens, &CompactOpts::default()).unwrap();
        let mut brute_oracle = |c: &Context, g: &[Tuple], t: &Tuple| -> Result<bool> {
            Ok(smp_brute(&cat, c, g, t, 1_000_000)?.verdict)
        };
        let via = compact_rep_via_smp(&cat, &ctx, &gens, &mut brute_oracle).unwrap();
        let dk: Vec<_> = direct.local.keys().collect();
        let vk: Vec<_> = via.local.keys().collect();
        assert_eq!(dk, vk);
        let df: Vec<_> = direct.forks.keys().collect();
        let vf: Vec<_> = via.forks.keys().collect();
        assert_eq!(df, vf);
        // the via-smp rep answers membership identically
        for t in [vec![1, 1, 1], vec![1, 1, 0], vec![0, 1, 0]] {
            assert_eq!(
                query_membership(&via, &t).unwrap(),
                query_membership(&direct, &t).unwrap()
            );
        }
    }

    #[test]
    fn via_smp_with_representation_backed_oracle() {
        // oracle answers through a direct rep per prefix: same key sets again
        let cat = catalog(&["Z2"]);
        let (ctx, gens, _) = odd_coset(&cat);
        let direct = compact_rep_direct(&cat, &ctx, &gens, &CompactOpts::default()).unwrap();
        let mut oracle = |c: &Context, g: &[Tuple], t: &Tuple| -> Result<bool> {
            if c.len() < 2 {
                return Ok(smp_brute(&cat, c, g, t, 1_000_000)?.verdict);
            }
            let rep = compact_rep_direct(&cat, c, g, &CompactOpts::default())?;
            query_membership(&rep, t)
        };
        let via = compact_rep_via_smp(&cat, &ctx, &gens, &mut oracle).unwrap();
        assert_eq!(
            direct.forks.keys().collect::<Vec<_>>(),
            via.forks.keys().collect::<Vec<_>>()
        );
    }

    #[test]
    fn full_product_admits_every_derived_fork() {
        let cat = catalog(&["Z2"]);
        let z2 = cat.find("Z2").unwrap();
        let ctx = Context::new(vec![z2, z2]);
        let gens = vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]];
        let mut brute_oracle = |c: &Context, g: &[Tuple], t: &Tuple| -> Result<bool> {
            Ok(smp_brute(&cat, c, g, t, 1_000_000)?.verdict)
        };
        let via = compact_rep_via_smp(&cat, &ctx, &gens, &mut brute_oracle).unwrap();
        for gamma in 0..2 {
            for beta in 0..2 {
                assert!(via.forks.contains_key(&(1, gamma, beta)));
            }
        }
    }

    #[test]
    fn witness_circuits_evaluate_to_their_targets() {
        let cat = catalog(&["Z2"]);
        let (ctx, gens, b) = odd_coset(&cat);
        let mut rep = compact_rep_direct(&cat, &ctx, &gens, &CompactOpts::default()).unwrap();
        // a generator's witness is the bare input node
        let w = extract_witness_circuit(&mut rep, &gens[0]).unwrap();
        assert_eq!(w.size(), 0);
        assert_eq!(w.output(), 0);
        for t in &b {
            let w = extract_witness_circuit(&mut rep, t).unwrap();
            let args: Vec<&Tuple> = gens.iter().collect();
            let val = crate::circuit::eval_circuit_product(&cat, &ctx, &w, &args).unwrap();
            assert_eq!(&val, t);
        }
    }

    #[test]
    fn witness_circuits_for_wide_random_yes_instances() {
        let cat = catalog(&["Z2"]);
        let z2 = cat.find("Z2").unwrap();
        let n = 10;
        let ctx = Context::new(vec![z2; n]);
        let mut seed = 77u64;
        let mut rand = || {
            seed = seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (seed >> 33) as usize
        };
        for _ in 0..20 {
            let k = 2 + rand() % 3;
            let gens: Vec<Tuple> = (0..k)
                .map(|_| (0..n).map(|_| (rand() % 2) as Elem).collect())
                .collect();
            // pick a target inside the subalgebra via a random term chain
            let mut t = gens[0].clone();
            for _ in 0..4 {
                let a = &gens[rand() % k];
                let b = &gens[rand() % k];
                t = ctx.apply(&cat, 0, &[&t, a, b]);
            }
            let mut rep = compact_rep_direct(&cat, &ctx, &gens, &CompactOpts::default()).unwrap();
            assert!(query_membership(&rep, &t).unwrap());
            let w = extract_witness_circuit(&mut rep, &t).unwrap();
            let args: Vec<&Tuple> = gens.iter().collect();
            assert_eq!(
                crate::circuit::eval_circuit_product(&cat, &ctx, &w, &args).unwrap(),
                t
            );
        }
    }

    #[test]
    fn transferability_of_derived_forks() {
        // every derived fork (gamma, delta) at i and every b in B with
        // b[i] = gamma admits a matching bhat in B
        let cats = [catalog(&["Z2"]), catalog(&["Z3"])];
        for cat in &cats {
            let kit = cat.terms.as_ref().unwrap();
            let a = cat.base()[0];
            for n in [3usize, 4] {
                let ctx = Context::new(vec![a; n]);
                let mut seed = (n as u64) * 31 + cat.alg(a).size as u64;
                let mut rand = || {
                    seed = seed
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    (seed >> 33) as usize
                };
                for _ in 0..10 {
                    let k = 1 + rand() % 3;
                    let size = cat.alg(a).size;
                    let gens: Vec<Tuple> = (0..k)
                        .map(|_| (0..n).map(|_| (rand() % size) as Elem).collect())
                        .collect();
                    let b = subalgebra_closure(cat, &ctx, &gens, &ClosureOpts::default())
                        .unwrap()
                        .elems;
                    for i in 0..n {
                        let df = derived_forks(cat, kit, a, &forks(&b, i), 1);
                        for &(gamma, delta) in df.keys() {
                            for t in b.iter().filter(|t| t[i] == gamma) {
                                let ok = b.iter().any(|u| {
                                    u[..i] == t[..i] && u[i] == delta
                                });
                                assert!(ok, "fork ({gamma},{delta}) not transferable at {i}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn saturation_of_the_diagonal_in_z4_squared() {
        let cat = catalog(&["Z4"]);
        let z4 = cat.find("Z4").unwrap();
        let ctx = Context::new(vec![z4, z4]);
        let gens = vec![vec![0, 0], vec![1, 1]];
        let theta = crate::congruence::Congruence::from_blocks(4, &[vec![0, 2], vec![1, 3]]);
        let rels = vec![
            FactorRel::from_congruence(&theta),
            FactorRel::from_congruence(&theta),
        ];
        let gen_set = saturation_generators(&cat, &ctx, &gens, &rels).unwrap();
        let sat = subalgebra_closure(&cat, &ctx, &gen_set, &ClosureOpts::default()).unwrap();
        // the saturation is the congruent-mod-2 subalgebra, 8 elements
        assert_eq!(sat.len(), 8);
        for t in &sat.elems {
            assert_eq!(t[0] % 2, t[1] % 2);
        }
        // theta = 0 keeps B
        let id = identity_rels(&cat, &ctx);
        let plain = saturation_generators(&cat, &ctx, &gens, &id).unwrap();
        let b = subalgebra_closure(&cat, &ctx, &plain, &ClosureOpts::default()).unwrap();
        assert_eq!(b.len(), 4);
        // theta = full reaches the whole product
        let full = Congruence::full(4);
        let rels = vec![
            FactorRel::from_congruence(&full),
            FactorRel::from_congruence(&full),
        ];
        let everything = saturation_generators(&cat, &ctx, &gens, &rels).unwrap();
        let all = subalgebra_closure(&cat, &ctx, &everything, &ClosureOpts::default()).unwrap();
        assert_eq!(all.len(), 16);
    }

    use crate::congruence::Congruence;

    #[test]
    fn rep_file_round_trips_and_validates() {
        let cat = catalog(&["Z2"]);
        let (ctx, gens, _) = odd_coset(&cat);
        let rep = compact_rep_direct(&cat, &ctx, &gens, &CompactOpts::default()).unwrap();
        let json = rep_to_json(&rep).unwrap();
        validate_rep_json(&json).unwrap();
    }
}
