//! Top-level SMP solving: the brute-force closure oracle, the reduction from
//! quotient-of-subalgebra factors to base factors, the d-coherent reduction
//! through subdirectly irreducible quotients, the residually small pipeline,
//! and the coordinate-echelon sift over induced abelian groups.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::algebra::{
    element_closure_with_order, is_isomorphism_graph, pair_closure, quotient_algebra, restrict,
    subalgebra_closure, AlgId, Catalog, ClosureOpts, Context, Elem, Prov, Tuple,
};
use crate::circuit::{subsets_lex, Circuit};
use crate::congruence::{
    check_residual_smallness, congruence_lattice_of, induced_abelian_group, si_profile, Congruence,
    InducedGroup,
};
use crate::error::{Error, Result};
use crate::rep::{
    compact_rep_direct, compact_rep_via_smp, extract_witness_circuit, local_rep, phi_shifts,
    query_membership, CompactOpts, FactorRel, SmpOracle,
};

// ---------------------------------------------------------------------------
// Instances

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmpInstance {
    pub factors: Vec<String>,
    pub generators: Vec<Vec<usize>>,
    pub target: Vec<usize>,
}

pub fn parse_instance_str(text: &str) -> Result<SmpInstance> {
    Ok(serde_json::from_str(text)?)
}

pub fn instance_to_json(inst: &SmpInstance) -> Result<String> {
    Ok(serde_json::to_string_pretty(inst)?)
}

#[derive(Debug, Clone)]
pub struct ResolvedInstance {
    pub ctx: Context,
    pub gens: Vec<Tuple>,
    pub target: Tuple,
}

pub fn resolve_instance(cat: &Catalog, inst: &SmpInstance) -> Result<ResolvedInstance> {
    if inst.factors.is_empty() {
        return Err(Error::Invalid("instance needs at least one factor".into()));
    }
    if inst.generators.is_empty() {
        return Err(Error::Invalid("instance needs at least one generator".into()));
    }
    let factors: Result<Vec<AlgId>> = inst.factors.iter().map(|n| cat.find(n)).collect();
    let ctx = Context::new(factors?);
    let to_tuple = |raw: &[usize]| -> Result<Tuple> {
        let t: Tuple = raw.iter().map(|&v| v as Elem).collect();
        if raw.iter().any(|&v| v > u8::MAX as usize) {
            return Err(Error::Invalid("element id out of range".into()));
        }
        ctx.check_tuple(cat, &t)?;
        Ok(t)
    };
    let gens: Result<Vec<Tuple>> = inst.generators.iter().map(|g| to_tuple(g)).collect();
    let target = to_tuple(&inst.target)?;
    Ok(ResolvedInstance {
        ctx,
        gens: gens?,
        target,
    })
}

// ---------------------------------------------------------------------------
// Brute force

#[derive(Debug, Clone)]
pub struct BruteOutcome {
    pub verdict: bool,
    /// Number of closure elements explored (the full closure size on a NO).
    pub explored: usize,
}

/// The naive oracle: computes and lists the whole subalgebra, then checks
/// membership. Everything else in the crate is tested against this.
pub fn smp_brute(
    cat: &Catalog,
    ctx: &Context,
    gens: &[Tuple],
    target: &Tuple,
    cap: usize,
) -> Result<BruteOutcome> {
    ctx.check_tuple(cat, target)?;
    let closure = subalgebra_closure(
        cat,
        ctx,
        gens,
        &ClosureOpts {
            cap,
            ..Default::default()
        },
    )?;
    Ok(BruteOutcome {
        verdict: closure.contains(target),
        explored: closure.len(),
    })
}

// ---------------------------------------------------------------------------
// Reduction from HS factors to base factors

/// Solves an instance whose factors are quotients of subalgebras of base
/// members by lifting it to the base product: the generators are lifted
/// through the quotient maps, the local witnesses and single-coordinate
/// shifts for the product congruence are added, and the base SMP question is
/// asked on the saturation's generating set.
pub fn reduce_hs(
    cat: &Catalog,
    inst: &ResolvedInstance,
    base: &mut SmpOracle,
) -> Result<bool> {
    let kit = cat
        .terms
        .as_ref()
        .ok_or_else(|| Error::InputContract("cube term not configured".into()))?;
    let entries = cat
        .hs_entries()
        .ok_or_else(|| Error::InputContract("hs catalog not built".into()))?;
    let n = inst.ctx.len();
    if n < kit.d {
        let out = smp_brute(cat, &inst.ctx, &inst.gens, &inst.target, cat.closure_cap)?;
        return Ok(out.verdict);
    }
    struct Lift {
        parent: AlgId,
        /// Representative in the parent per quotient element.
        reps: Vec<Elem>,
        rel: FactorRel,
    }
    let mut lifts = Vec::with_capacity(n);
    for &f in &inst.ctx.factors {
        let entry = entries
            .iter()
            .find(|e| e.alg == f)
            .ok_or_else(|| Error::InputContract("factor lacks hs provenance".into()))?;
        let (subalg, _) = restrict(cat, entry.parent, &entry.subuniverse);
        let (qalg, proj) = quotient_algebra(&cat.signature, &subalg, &entry.congruence)?;
        let mut reps = vec![u8::MAX; qalg.size];
        for (label, &q) in proj.iter().enumerate() {
            if reps[q as usize] == u8::MAX {
                reps[q as usize] = entry.subuniverse[label];
            }
        }
        let parent_size = cat.alg(entry.parent).size;
        let mut class = vec![None; parent_size];
        for (label, &q) in proj.iter().enumerate() {
            let p = entry.subuniverse[label];
            class[p as usize] = Some(reps[q as usize]);
        }
        lifts.push(Lift {
            parent: entry.parent,
            reps,
            rel: FactorRel { class },
        });
    }
    let pctx = Context::new(lifts.iter().map(|l| l.parent).collect());
    let lift_tuple = |t: &Tuple| -> Tuple {
        t.iter()
            .enumerate()
            .map(|(j, &v)| lifts[j].reps[v as usize])
            .collect()
    };
    let lifted_gens: Vec<Tuple> = inst.gens.iter().map(|g| lift_tuple(g)).collect();
    let lifted_target = lift_tuple(&inst.target);
    let rels: Vec<FactorRel> = lifts.iter().map(|l| l.rel.clone()).collect();
    let lambda = local_rep(cat, &pctx, &lifted_gens, &rels)?;
    let phi = phi_shifts(cat, &pctx, &lifted_gens, &rels)?;
    let mut all: Vec<Tuple> = Vec::new();
    let mut seen = HashSet::new();
    for t in lifted_gens
        .iter()
        .chain(lambda.tuples.iter())
        .chain(phi.iter())
    {
        if seen.insert(t.clone()) {
            all.push(t.clone());
        }
    }
    base(&pctx, &all, &lifted_target)
}

// ---------------------------------------------------------------------------
// d-coherence

/// Checks the five d-coherence conditions, returning the index (1-5) of the
/// first failing one, or `None` when the input is d-coherent.
pub fn check_d_coherent(
    cat: &Catalog,
    ctx: &Context,
    gens: &[Tuple],
    target: &Tuple,
) -> Result<Option<usize>> {
    let kit = cat
        .terms
        .as_ref()
        .ok_or_else(|| Error::InputContract("cube term not configured".into()))?;
    let n = ctx.len();
    let dmax = kit.d.max(3);
    if n < dmax {
        return Ok(Some(1));
    }
    for (j, &f) in ctx.factors.iter().enumerate() {
        let seed: Vec<Elem> = gens.iter().map(|g| g[j]).collect();
        let closed = crate::algebra::element_closure(&cat.signature, cat.alg(f), &seed);
        if closed.len() != cat.alg(f).size {
            return Ok(Some(2));
        }
    }
    let mut centralizers = Vec::with_capacity(n);
    for &f in &ctx.factors {
        let prof = si_profile(cat, f)?;
        if !prof.is_si || !prof.monolith_abelian {
            return Ok(Some(3));
        }
        centralizers.push(prof.centralizer.unwrap());
    }
    for i in 0..n {
        for j in i + 1..n {
            if ctx.factors[i] == ctx.factors[j] {
                continue;
            }
            if !crate::congruence::check_similarity(cat, ctx.factors[i], ctx.factors[j])? {
                return Ok(Some(3));
            }
        }
    }
    let psize = dmax - 1;
    for i_set in subsets_lex(n, psize.min(n)) {
        let pctx = ctx.project(&i_set);
        let pgens: Vec<Tuple> = gens
            .iter()
            .map(|g| i_set.iter().map(|&i| g[i]).collect())
            .collect();
        let ptarget: Tuple = i_set.iter().map(|&i| target[i]).collect();
        let out = smp_brute(cat, &pctx, &pgens, &ptarget, cat.closure_cap)?;
        if !out.verdict {
            return Ok(Some(4));
        }
    }
    let mut quotients = Vec::with_capacity(n);
    for (j, &f) in ctx.factors.iter().enumerate() {
        quotients.push(quotient_algebra(&cat.signature, cat.alg(f), &centralizers[j])?);
    }
    for i in 0..n {
        for j in i + 1..n {
            let pairs: Vec<(Elem, Elem)> = gens
                .iter()
                .map(|g| {
                    (
                        quotients[i].1[g[i] as usize],
                        quotients[j].1[g[j] as usize],
                    )
                })
                .collect();
            let graph = pair_closure(&cat.signature, &quotients[i].0, &quotients[j].0, &pairs);
            if !is_isomorphism_graph(quotients[i].0.size, quotients[j].0.size, &graph) {
                return Ok(Some(5));
            }
        }
    }
    Ok(None)
}

// ---------------------------------------------------------------------------
// The hat structure: subdirectly irreducible quotient coordinates and the
// similarity classes over them

pub struct HatCoord {
    /// Index of the originating coordinate (into the context handed in).
    pub coord: usize,
    /// HS-catalog representative of B_j / sigma.
    pub rep: AlgId,
    /// Factor element -> representative element; None off the subalgebra.
    pub map: Vec<Option<Elem>>,
}

pub struct HatStructure {
    pub coords: Vec<HatCoord>,
    /// All similarity classes (indices into `coords`), deterministic order.
    pub classes: Vec<Vec<usize>>,
}

/// Builds the hatted picture of the subalgebra generated by `gens`: one
/// coordinate per completely meet irreducible congruence of each projection
/// B_j, mapped into HS-catalog representatives, with the similarity relation
/// computed from the generator images mod the monolith centralizers.
pub fn hat_structure(cat: &Catalog, ctx: &Context, gens: &[Tuple]) -> Result<HatStructure> {
    let n = ctx.len();
    let mut coords: Vec<HatCoord> = Vec::new();
    for (j, &f) in ctx.factors.iter().enumerate() {
        let seed: Vec<Elem> = gens.iter().map(|g| g[j]).collect();
        let sub = crate::algebra::element_closure(&cat.signature, cat.alg(f), &seed);
        let (subalg, _) = restrict(cat, f, &sub);
        let lat = congruence_lattice_of(cat, &subalg)?;
        // completely meet irreducible congruences of the subalgebra
        for sigma in &lat {
            if sigma.is_full() {
                continue;
            }
            let mut above = Congruence::full(sigma.size());
            let mut any = false;
            for g in &lat {
                if sigma.leq(g) && sigma != g {
                    above = above.meet(g);
                    any = true;
                }
            }
            if !any || &above == sigma {
                continue;
            }
            let (rep, iso) = cat.hs_class_of(f, &sub, sigma)?;
            let (_, proj) = quotient_algebra(&cat.signature, &subalg, sigma)?;
            let mut map = vec![None; cat.alg(f).size];
            for (label, &e) in sub.iter().enumerate() {
                map[e as usize] = Some(iso[proj[label] as usize]);
            }
            coords.push(HatCoord { coord: j, rep, map });
        }
    }
    // similarity relation on the hatted coordinates
    let m = coords.len();
    let mut uf: Vec<usize> = (0..m).collect();
    fn find(uf: &mut Vec<usize>, mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    let mut rho_quots: Vec<Option<(crate::algebra::FiniteAlgebra, Vec<Elem>)>> = Vec::new();
    for c in &coords {
        let prof = si_profile(cat, c.rep)?;
        if prof.is_si && prof.monolith_abelian {
            let rho = prof.centralizer.unwrap();
            rho_quots.push(Some(quotient_algebra(&cat.signature, cat.alg(c.rep), &rho)?));
        } else {
            rho_quots.push(None);
        }
    }
    for v in 0..m {
        for w in v + 1..m {
            let (Some(qv), Some(qw)) = (&rho_quots[v], &rho_quots[w]) else {
                continue;
            };
            if !crate::congruence::check_similarity(cat, coords[v].rep, coords[w].rep)? {
                continue;
            }
            let pairs: Vec<(Elem, Elem)> = gens
                .iter()
                .map(|g| {
                    let ev = coords[v].map[g[coords[v].coord] as usize].unwrap();
                    let ew = coords[w].map[g[coords[w].coord] as usize].unwrap();
                    (qv.1[ev as usize], qw.1[ew as usize])
                })
                .collect();
            let graph = pair_closure(&cat.signature, &qv.0, &qw.0, &pairs);
            if is_isomorphism_graph(qv.0.size, qw.0.size, &graph) {
                let (rv, rw) = (find(&mut uf, v), find(&mut uf, w));
                if rv != rw {
                    let (lo, hi) = if rv < rw { (rv, rw) } else { (rw, rv) };
                    uf[hi] = lo;
                }
            }
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for v in 0..m {
        let r = find(&mut uf, v);
        by_root.entry(r).or_default().push(v);
    }
    let _ = n;
    Ok(HatStructure {
        coords,
        classes: by_root.into_values().collect(),
    })
}

/// Membership via the subdirect-representation criterion: a tuple of the
/// full product lies in the subdirect subalgebra iff all its small
/// projections do and its hatted projections onto every large similarity
/// class do (both sides checked by brute closure here).
pub fn structure_criterion_membership(
    cat: &Catalog,
    ctx: &Context,
    gens: &[Tuple],
    c: &Tuple,
) -> Result<bool> {
    let kit = cat
        .terms
        .as_ref()
        .ok_or_else(|| Error::InputContract("cube term not configured".into()))?;
    let n = ctx.len();
    for (j, &f) in ctx.factors.iter().enumerate() {
        let seed: Vec<Elem> = gens.iter().map(|g| g[j]).collect();
        let closed = crate::algebra::element_closure(&cat.signature, cat.alg(f), &seed);
        if closed.len() != cat.alg(f).size {
            return Err(Error::InputContract(
                "structure criterion needs a subdirect subalgebra".into(),
            ));
        }
    }
    let dmax = kit.d.max(3);
    let psize = (dmax - 1).min(n);
    for i_set in subsets_lex(n, psize) {
        let pctx = ctx.project(&i_set);
        let pgens: Vec<Tuple> = gens
            .iter()
            .map(|g| i_set.iter().map(|&i| g[i]).collect())
            .collect();
        let pt: Tuple = i_set.iter().map(|&i| c[i]).collect();
        if !smp_brute(cat, &pctx, &pgens, &pt, cat.closure_cap)?.verdict {
            return Ok(false);
        }
    }
    let hat = hat_structure(cat, ctx, gens)?;
    for class in &hat.classes {
        if class.len() < dmax {
            continue;
        }
        let hctx = Context::new(class.iter().map(|&v| hat.coords[v].rep).collect());
        let hgens: Vec<Tuple> = gens
            .iter()
            .map(|g| {
                class
                    .iter()
                    .map(|&v| hat.coords[v].map[g[hat.coords[v].coord] as usize].unwrap())
                    .collect()
            })
            .collect();
        let htarget: Tuple = class
            .iter()
            .map(|&v| hat.coords[v].map[c[hat.coords[v].coord] as usize].unwrap())
            .collect();
        if !smp_brute(cat, &hctx, &hgens, &htarget, cat.closure_cap)?.verdict {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// The abelian sift

/// Coordinate-echelon membership tables for a product of finite abelian
/// groups, built from a generating set by scheduling all pivot sums.
pub struct SiftTables {
    groups: Vec<InducedGroup>,
    levels: Vec<BTreeMap<usize, Vec<usize>>>,
}

impl SiftTables {
    pub fn build(groups: Vec<InducedGroup>, gens: Vec<Vec<usize>>) -> SiftTables {
        let n = groups.len();
        let mut t = SiftTables {
            groups,
            levels: vec![BTreeMap::new(); n],
        };
        let mut work: VecDeque<Vec<usize>> = gens.into();
        while let Some(g) = work.pop_front() {
            t.insert(g, &mut work);
        }
        t
    }

    fn add_tuples(&self, a: &[usize], b: &[usize]) -> Vec<usize> {
        (0..a.len()).map(|j| self.groups[j].add(a[j], b[j])).collect()
    }

    fn sub_tuples(&self, a: &[usize], b: &[usize]) -> Vec<usize> {
        (0..a.len()).map(|j| self.groups[j].sub(a[j], b[j])).collect()
    }

    fn insert(&mut self, mut g: Vec<usize>, work: &mut VecDeque<Vec<usize>>) {
        for j in 0..self.groups.len() {
            let u = g[j];
            if u == self.groups[j].zero {
                continue;
            }
            if let Some(rep) = self.levels[j].get(&u) {
                g = self.sub_tuples(&g, &rep.clone());
                continue;
            }
            // new pivot: schedule its sums with every pivot at this level
            let mut sums: Vec<Vec<usize>> = vec![self.add_tuples(&g, &g)];
            for rep in self.levels[j].values() {
                sums.push(self.add_tuples(&g, rep));
            }
            self.levels[j].insert(u, g);
            work.extend(sums);
            return;
        }
    }

    pub fn contains(&self, b: &[usize]) -> bool {
        let mut cur = b.to_vec();
        for j in 0..self.groups.len() {
            let u = cur[j];
            if u == self.groups[j].zero {
                continue;
            }
            match self.levels[j].get(&u) {
                Some(rep) => cur = self.sub_tuples(&cur, &rep.clone()),
                None => return false,
            }
        }
        true
    }
}

/// Membership of `b` in the subgroup of `G_1 x .. x G_n` generated by `h`,
/// with elements given as block elements of the induced groups.
pub fn abelian_sift(groups: &[InducedGroup], h: &[Tuple], b: &Tuple) -> Result<bool> {
    let to_idx = |t: &Tuple| -> Result<Vec<usize>> {
        t.iter()
            .enumerate()
            .map(|(j, &e)| {
                groups[j]
                    .index_of(e)
                    .ok_or_else(|| Error::Invalid(format!("element {e} not in block {j}")))
            })
            .collect()
    };
    let gens: Result<Vec<Vec<usize>>> = h.iter().map(|t| to_idx(t)).collect();
    let tables = SiftTables::build(groups.to_vec(), gens?);
    Ok(tables.contains(&to_idx(b)?))
}

// ---------------------------------------------------------------------------
// The residually small pipeline (per similarity-class subinstance)

/// Session for one d-coherent instance over similar subdirectly irreducible
/// factors in a residually small setting: precomputes the transversal, the
/// unary polynomial set, and per-class sift tables, answering many targets.
pub struct RsSession {
    factors: Vec<AlgId>,
    gens: Vec<Tuple>,
    rho: Vec<Congruence>,
    o_set: Vec<Tuple>,
    /// Position in the transversal for each coordinate.
    coord_rep: Vec<usize>,
    /// Transversal coordinate indices.
    transversal: Vec<usize>,
    /// Per polynomial: per transversal position, a unary map.
    p_maps: Vec<Vec<Vec<Elem>>>,
    per_o: Vec<Option<SiftTables>>,
}

impl RsSession {
    pub fn new(cat: &Catalog, factors: Vec<AlgId>, gens: Vec<Tuple>) -> Result<RsSession> {
        let n = factors.len();
        let mut rho = Vec::with_capacity(n);
        for &f in &factors {
            let prof = si_profile(cat, f)?;
            if !prof.is_si || !prof.monolith_abelian {
                return Err(Error::InputContract(
                    "residually small pipeline needs SI factors with abelian monoliths".into(),
                ));
            }
            if !prof.centralizer_abelian {
                return Err(Error::NotResiduallySmall {
                    offender: cat.alg(f).name.clone(),
                });
            }
            rho.push(prof.centralizer.unwrap());
        }
        // transversal O of the rho-classes of B, seeded by generators with
        // distinct first-coordinate classes
        let mut chosen: Vec<usize> = Vec::new();
        let mut seen_classes: Vec<Elem> = Vec::new();
        for (i, g) in gens.iter().enumerate() {
            let cls = rho[0].class_of(g[0]);
            if !seen_classes.contains(&cls) {
                seen_classes.push(cls);
                chosen.push(i);
            }
        }
        let (q0, proj0) = quotient_algebra(&cat.signature, cat.alg(factors[0]), &rho[0])?;
        let seed: Vec<Elem> = chosen.iter().map(|&i| proj0[gens[i][0] as usize]).collect();
        let (order, prov) = element_closure_with_order(&cat.signature, &q0, &seed);
        let ctx = Context::new(factors.clone());
        let mut o_set: Vec<Tuple> = Vec::with_capacity(order.len());
        for (idx, _) in order.iter().enumerate() {
            let t = match &prov[idx] {
                Prov::Gen(j) => gens[chosen[*j]].clone(),
                Prov::App(sym, args) => {
                    let refs: Vec<&Tuple> = args.iter().map(|&a| &o_set[a as usize]).collect();
                    ctx.apply(cat, *sym, &refs)
                }
            };
            o_set.push(t);
        }
        // coordinate equivalence: same factor and same O column
        let mut transversal: Vec<usize> = Vec::new();
        let mut coord_rep = vec![0usize; n];
        let mut keys: Vec<(AlgId, Vec<Elem>)> = Vec::new();
        for j in 0..n {
            let key = (factors[j], o_set.iter().map(|o| o[j]).collect::<Vec<_>>());
            match keys.iter().position(|k| *k == key) {
                Some(t) => coord_rep[j] = t,
                None => {
                    keys.push(key);
                    coord_rep[j] = transversal.len();
                    transversal.push(j);
                }
            }
        }
        // the polynomial set P in the function power of A_T: coordinates are
        // (transversal position, argument value)
        let mut pctx_factors = Vec::new();
        let mut offsets = Vec::new();
        for &t in &transversal {
            offsets.push(pctx_factors.len());
            let sz = cat.alg(factors[t]).size;
            pctx_factors.extend(std::iter::repeat(factors[t]).take(sz));
        }
        let pctx = Context::new(pctx_factors);
        let mut id_fn = vec![0 as Elem; pctx.len()];
        for (ti, &t) in transversal.iter().enumerate() {
            let sz = cat.alg(factors[t]).size;
            for x in 0..sz {
                id_fn[offsets[ti] + x] = x as Elem;
            }
        }
        let mut pgens = vec![id_fn];
        for o in &o_set {
            let mut c = vec![0 as Elem; pctx.len()];
            for (ti, &t) in transversal.iter().enumerate() {
                let sz = cat.alg(factors[t]).size;
                for x in 0..sz {
                    c[offsets[ti] + x] = o[t];
                }
            }
            pgens.push(c);
        }
        let pclo = subalgebra_closure(
            cat,
            &pctx,
            &pgens,
            &ClosureOpts {
                cap: 500_000,
                ..Default::default()
            },
        )
        .map_err(|_| Error::Cap {
            what: "polynomial set enumeration".into(),
            cap: 500_000,
        })?;
        let mut p_maps = Vec::with_capacity(pclo.len());
        for f in &pclo.elems {
            let mut maps = Vec::with_capacity(transversal.len());
            for (ti, &t) in transversal.iter().enumerate() {
                let sz = cat.alg(factors[t]).size;
                maps.push(f[offsets[ti]..offsets[ti] + sz].to_vec());
            }
            p_maps.push(maps);
        }
        let per_o = vec![];
        let mut s = RsSession {
            factors,
            gens,
            rho,
            o_set,
            coord_rep,
            transversal,
            p_maps,
            per_o,
        };
        s.per_o = (0..s.o_set.len()).map(|_| None).collect();
        Ok(s)
    }

    fn tables_for(&mut self, cat: &Catalog, oi: usize) -> Result<&SiftTables> {
        if self.per_o[oi].is_none() {
            let o = self.o_set[oi].clone();
            let n = self.factors.len();
            let mut groups = Vec::with_capacity(n);
            for j in 0..n {
                groups.push(induced_abelian_group(
                    cat,
                    self.factors[j],
                    &self.rho[j],
                    o[j],
                )?);
            }
            // H: polynomial images of the generators landing in o's class
            let mut h: Vec<Vec<usize>> = Vec::new();
            for maps in &self.p_maps {
                for c in &self.gens {
                    let mut d = Vec::with_capacity(n);
                    let mut inside = true;
                    for j in 0..n {
                        let v = maps[self.coord_rep[j]][c[j] as usize];
                        if !self.rho[j].related(v, o[j]) {
                            inside = false;
                            break;
                        }
                        d.push(v);
                    }
                    if inside {
                        h.push(
                            d.iter()
                                .enumerate()
                                .map(|(j, &v)| groups[j].index_of(v).unwrap())
                                .collect(),
                        );
                    }
                }
            }
            self.per_o[oi] = Some(SiftTables::build(groups, h));
        }
        Ok(self.per_o[oi].as_ref().unwrap())
    }

    pub fn answer(&mut self, cat: &Catalog, b: &Tuple) -> Result<bool> {
        let _ = &self.transversal;
        let n = self.factors.len();
        let oi = match self
            .o_set
            .iter()
            .position(|o| self.rho[0].related(o[0], b[0]))
        {
            Some(i) => i,
            None => return Ok(false),
        };
        let o = self.o_set[oi].clone();
        for j in 0..n {
            if !self.rho[j].related(o[j], b[j]) {
                // target escapes the rho-saturation of B
                return Ok(false);
            }
        }
        let groups_idx: Result<Vec<usize>> = (0..n)
            .map(|j| {
                induced_abelian_group(cat, self.factors[j], &self.rho[j], o[j])?
                    .index_of(b[j])
                    .ok_or_else(|| Error::Invalid("target not in block".into()))
            })
            .collect();
        let idx = groups_idx?;
        let tables = self.tables_for(cat, oi)?;
        Ok(tables.contains(&idx))
    }
}

/// Standalone Algorithm-7 entry point: verifies the preconditions and
/// answers one d-coherent instance over a residually small catalog.
pub fn solve_smpd_rs(cat: &Catalog, inst: &ResolvedInstance) -> Result<bool> {
    let (rs, offender) = check_residual_smallness(cat)?;
    if !rs {
        return Err(Error::NotResiduallySmall {
            offender: offender.unwrap_or_default(),
        });
    }
    if let Some(cond) = check_d_coherent(cat, &inst.ctx, &inst.gens, &inst.target)? {
        return Err(Error::InputContract(format!(
            "input is not d-coherent (condition {cond} fails)"
        )));
    }
    let mut session = RsSession::new(cat, inst.ctx.factors.clone(), inst.gens.clone())?;
    session.answer(cat, &inst.target)
}

// ---------------------------------------------------------------------------
// The d-coherent reduction (per-instance session)

enum Backend {
    Rs(RsSession),
    Brute,
}

struct BigClass {
    factors: Vec<AlgId>,
    gens: Vec<Tuple>,
    /// (original coordinate, map) per class member.
    maps: Vec<(usize, Vec<Option<Elem>>)>,
    backend: Backend,
}

/// Session for the reduction of a general instance to d-coherent
/// subinstances over the HS catalog: projection tests, removal of trivial
/// coordinates, the hatted coordinates with their similarity classes, and
/// one solver per large class.
pub struct ReductionSession<'c> {
    cat: &'c Catalog,
    dminus: usize,
    proj_sets: Vec<(Vec<usize>, HashSet<Tuple>)>,
    trivially_yes: bool,
    big: Vec<BigClass>,
}

impl<'c> ReductionSession<'c> {
    pub fn new(
        cat: &'c Catalog,
        ctx: &Context,
        gens: &[Tuple],
        strict_rs: bool,
    ) -> Result<ReductionSession<'c>> {
        let kit = cat
            .terms
            .as_ref()
            .ok_or_else(|| Error::InputContract("cube term not configured".into()))?;
        let n = ctx.len();
        let dminus = (kit.d - 1).max(2);
        let mut proj_sets = Vec::new();
        for i_set in subsets_lex(n, dminus.min(n)) {
            let pctx = ctx.project(&i_set);
            let pgens: Vec<Tuple> = gens
                .iter()
                .map(|g| i_set.iter().map(|&i| g[i]).collect())
                .collect();
            let closure = subalgebra_closure(cat, &pctx, &pgens, &ClosureOpts::default())?;
            let set: HashSet<Tuple> = closure.elems.iter().cloned().collect();
            proj_sets.push((i_set, set));
        }
        // drop coordinates whose projection is a one-element subalgebra
        let mut keep = Vec::new();
        for (j, &f) in ctx.factors.iter().enumerate() {
            let seed: Vec<Elem> = gens.iter().map(|g| g[j]).collect();
            let closed = crate::algebra::element_closure(&cat.signature, cat.alg(f), &seed);
            if closed.len() > 1 {
                keep.push(j);
            }
        }
        if keep.len() <= dminus {
            return Ok(ReductionSession {
                cat,
                dminus,
                proj_sets,
                trivially_yes: true,
                big: Vec::new(),
            });
        }
        let kctx = ctx.project(&keep);
        let kgens: Vec<Tuple> = gens
            .iter()
            .map(|g| keep.iter().map(|&i| g[i]).collect())
            .collect();
        let hat = hat_structure(cat, &kctx, &kgens)?;
        let mut big = Vec::new();
        for class in &hat.classes {
            if class.len() <= dminus {
                continue;
            }
            let factors: Vec<AlgId> = class.iter().map(|&v| hat.coords[v].rep).collect();
            let maps: Vec<(usize, Vec<Option<Elem>>)> = class
                .iter()
                .map(|&v| (keep[hat.coords[v].coord], hat.coords[v].map.clone()))
                .collect();
            let cgens: Vec<Tuple> = gens
                .iter()
                .map(|g| {
                    maps.iter()
                        .map(|(orig, map)| map[g[*orig] as usize].unwrap())
                        .collect()
                })
                .collect();
            let backend = match RsSession::new(cat, factors.clone(), cgens.clone()) {
                Ok(s) => Backend::Rs(s),
                Err(e) => {
                    if strict_rs {
                        return Err(e);
                    }
                    Backend::Brute
                }
            };
            big.push(BigClass {
                factors,
                gens: cgens,
                maps,
                backend,
            });
        }
        Ok(ReductionSession {
            cat,
            dminus,
            proj_sets,
            trivially_yes: false,
            big,
        })
    }

    pub fn answer(&mut self, target: &Tuple) -> Result<bool> {
        let _ = self.dminus;
        for (i_set, set) in &self.proj_sets {
            let pt: Tuple = i_set.iter().map(|&i| target[i]).collect();
            if !set.contains(&pt) {
                return Ok(false);
            }
        }
        if self.trivially_yes {
            return Ok(true);
        }
        for class in &mut self.big {
            let ht: Tuple = class
                .maps
                .iter()
                .map(|(orig, map)| map[target[*orig] as usize].unwrap())
                .collect();
            let verdict = match &mut class.backend {
                Backend::Rs(session) => session.answer(self.cat, &ht)?,
                Backend::Brute => {
                    let hctx = Context::new(class.factors.clone());
                    smp_brute(self.cat, &hctx, &class.gens, &ht, self.cat.closure_cap)?.verdict
                }
            };
            if !verdict {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

// ---------------------------------------------------------------------------
// Dispatcher

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Auto,
    Compact,
    Reduction,
    Rs,
    Brute,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s {
            "auto" => Ok(Method::Auto),
            "compact" => Ok(Method::Compact),
            "reduction" => Ok(Method::Reduction),
            "rs" => Ok(Method::Rs),
            "brute" => Ok(Method::Brute),
            other => Err(Error::MethodUnavailable(other.to_string())),
        }
    }
}

#[derive(Debug)]
pub struct SmpAnswer {
    pub verdict: bool,
    pub method: String,
    pub micros: u128,
    pub witness: Option<Circuit>,
    pub closure_explored: Option<usize>,
}

#[derive(Serialize)]
pub struct AnswerFile<'a> {
    pub verdict: &'a str,
    pub method: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness_file: Option<String>,
    pub micros: u128,
}

/// Solves an SMP instance with the requested method. `auto` answers small
/// widths by closure and everything else through the compact-representation
/// path, which falls back to the oracle-backed construction when the
/// enumeration cap trips.
pub fn solve(
    cat: &Catalog,
    inst: &ResolvedInstance,
    method: Method,
    want_witness: bool,
) -> Result<SmpAnswer> {
    let start = Instant::now();
    let finish = |verdict: bool,
                  method: &str,
                  witness: Option<Circuit>,
                  explored: Option<usize>| SmpAnswer {
        verdict,
        method: method.to_string(),
        micros: start.elapsed().as_micros(),
        witness,
        closure_explored: explored,
    };
    if method == Method::Brute {
        let out = smp_brute(cat, &inst.ctx, &inst.gens, &inst.target, cat.closure_cap)?;
        return Ok(finish(out.verdict, "brute", None, Some(out.explored)));
    }
    let kit = cat
        .terms
        .as_ref()
        .ok_or_else(|| Error::InputContract("cube term not configured".into()))?;
    let n = inst.ctx.len();
    if n < kit.d {
        let out = smp_brute(cat, &inst.ctx, &inst.gens, &inst.target, cat.closure_cap)?;
        return Ok(finish(out.verdict, "brute", None, Some(out.explored)));
    }
    match method {
        Method::Auto | Method::Compact => {
            match compact_rep_direct(cat, &inst.ctx, &inst.gens, &CompactOpts::default()) {
                Ok(mut rep) => {
                    let verdict = query_membership(&rep, &inst.target)?;
                    let witness = if verdict && want_witness {
                        Some(extract_witness_circuit(&mut rep, &inst.target)?)
                    } else {
                        None
                    };
                    Ok(finish(verdict, "compact", witness, None))
                }
                Err(Error::Cap { .. }) => {
                    // beyond the oracle cap: build the representation through
                    // the SMP oracle given by the d-coherent reduction
                    let mut rep = {
                        let mut sessions: HashMap<usize, ReductionSession> = HashMap::new();
                        let mut oracle = |lctx: &Context,
                                          lgens: &[Tuple],
                                          t: &Tuple|
                         -> Result<bool> {
                            let ln = lctx.len();
                            if ln <= (kit.d - 1).max(2) {
                                return Ok(smp_brute(cat, lctx, lgens, t, cat.closure_cap)?.verdict);
                            }
                            if let std::collections::hash_map::Entry::Vacant(e) =
                                sessions.entry(ln)
                            {
                                e.insert(ReductionSession::new(cat, lctx, lgens, false)?);
                            }
                            sessions.get_mut(&ln).unwrap().answer(t)
                        };
                        compact_rep_via_smp(cat, &inst.ctx, &inst.gens, &mut oracle)?
                    };
                    let verdict = query_membership(&rep, &inst.target)?;
                    let witness = if verdict && want_witness {
                        Some(extract_witness_circuit(&mut rep, &inst.target)?)
                    } else {
                        None
                    };
                    Ok(finish(verdict, "compact", witness, None))
                }
                Err(e) => Err(e),
            }
        }
        Method::Reduction => {
            let mut session = ReductionSession::new(cat, &inst.ctx, &inst.gens, false)?;
            let verdict = session.answer(&inst.target)?;
            Ok(finish(verdict, "reduction", None, None))
        }
        Method::Rs => {
            let (rs, offender) = check_residual_smallness(cat)?;
            if !rs {
                return Err(Error::NotResiduallySmall {
                    offender: offender.unwrap_or_default(),
                });
            }
            let mut session = ReductionSession::new(cat, &inst.ctx, &inst.gens, true)?;
            let verdict = session.answer(&inst.target)?;
            Ok(finish(verdict, "rs", None, None))
        }
        Method::Brute => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::configure_terms;
    use crate::samples;

    fn catalog(names: &[&str]) -> Catalog {
        let mut cat = samples::maltsev_catalog(names);
        let p = samples::maltsev_p(&cat.signature);
        configure_terms(&mut cat, p).unwrap();
        cat.ensure_hs().unwrap();
        cat
    }

    fn odd_coset(cat: &Catalog) -> ResolvedInstance {
        let z2 = cat.find("Z2").unwrap();
        ResolvedInstance {
            ctx: Context::new(vec![z2, z2, z2]),
            gens: vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]],
            target: vec![1, 1, 1],
        }
    }

    #[test]
    fn brute_on_odd_coset() {
        let cat = catalog(&["Z2"]);
        let inst = odd_coset(&cat);
        assert!(smp_brute(&cat, &inst.ctx, &inst.gens, &inst.target, 1000)
            .unwrap()
            .verdict);
        let no = smp_brute(&cat, &inst.ctx, &inst.gens, &vec![1, 1, 0], 1000).unwrap();
        assert!(!no.verdict);
        assert_eq!(no.explored, 4);
        // a generator is always a member
        assert!(smp_brute(&cat, &inst.ctx, &inst.gens, &vec![1, 0, 0], 1000)
            .unwrap()
            .verdict);
    }

    #[test]
    fn d_coherence_of_odd_coset() {
        let cat = catalog(&["Z2"]);
        let inst = odd_coset(&cat);
        assert_eq!(
            check_d_coherent(&cat, &inst.ctx, &inst.gens, &inst.target).unwrap(),
            None
        );
        // width two fails condition 1
        let z2 = cat.find("Z2").unwrap();
        let short = ResolvedInstance {
            ctx: Context::new(vec![z2, z2]),
            gens: vec![vec![1, 0], vec![0, 1]],
            target: vec![1, 1],
        };
        assert_eq!(
            check_d_coherent(&cat, &short.ctx, &short.gens, &short.target).unwrap(),
            Some(1)
        );
        // non-subdirect generators fail condition 2
        let flat = ResolvedInstance {
            ctx: Context::new(vec![z2, z2, z2]),
            gens: vec![vec![0, 0, 0], vec![0, 1, 0], vec![0, 0, 1]],
            target: vec![0, 1, 1],
        };
        assert_eq!(
            check_d_coherent(&cat, &flat.ctx, &flat.gens, &flat.target).unwrap(),
            Some(2)
        );
    }

    #[test]
    fn reduction_matches_brute_on_odd_coset() {
        let cat = catalog(&["Z2"]);
        let inst = odd_coset(&cat);
        let mut s = ReductionSession::new(&cat, &inst.ctx, &inst.gens, false).unwrap();
        assert!(s.answer(&inst.target).unwrap());
        assert!(!s.answer(&vec![1, 1, 0]).unwrap());
    }

    #[test]
    fn rs_pipeline_on_odd_coset() {
        let cat = catalog(&["Z2"]);
        let inst = odd_coset(&cat);
        assert!(solve_smpd_rs(&cat, &inst).unwrap());
        let no = ResolvedInstance {
            target: vec![1, 1, 0],
            ..inst
        };
        assert!(!solve_smpd_rs(&cat, &no).unwrap());
    }

    #[test]
    fn rs_full_product_accepts_everything() {
        let cat = catalog(&["Z2"]);
        let z2 = cat.find("Z2").unwrap();
        // generators spanning the full product
        let inst = ResolvedInstance {
            ctx: Context::new(vec![z2, z2, z2]),
            gens: vec![
                vec![0, 0, 0],
                vec![1, 0, 0],
                vec![0, 1, 0],
                vec![0, 0, 1],
                vec![1, 1, 1],
            ],
            target: vec![0, 1, 1],
        };
        for t in 0..8u8 {
            let target = vec![t & 1, (t >> 1) & 1, (t >> 2) & 1];
            let inst = ResolvedInstance {
                target: target.clone(),
                ..inst.clone()
            };
            assert!(solve_smpd_rs(&cat, &inst).unwrap(), "target {target:?}");
        }
    }

    #[test]
    fn rs_errors_on_non_residually_small_catalog() {
        let cat = catalog(&["Q8"]);
        let q8 = cat.find("Q8").unwrap();
        let inst = ResolvedInstance {
            ctx: Context::new(vec![q8, q8, q8]),
            gens: vec![vec![2, 0, 0], vec![0, 4, 0], vec![0, 0, 2], vec![2, 4, 2]],
            target: vec![0, 0, 0],
        };
        let err = solve(&cat, &inst, Method::Rs, false).unwrap_err();
        assert!(matches!(err, Error::NotResiduallySmall { .. }));
    }

    #[test]
    fn sift_on_z2_times_z4() {
        let cat = catalog(&["Z2", "Z4"]);
        let z2 = cat.find("Z2").unwrap();
        let z4 = cat.find("Z4").unwrap();
        let full2 = Congruence::full(2);
        let full4 = Congruence::full(4);
        let g1 = induced_abelian_group(&cat, z2, &full2, 0).unwrap();
        let g2 = induced_abelian_group(&cat, z4, &full4, 0).unwrap();
        let groups = vec![g1, g2];
        let h = vec![vec![1, 2]];
        // subgroup generated by (1,2) is {(0,0),(1,2)}
        assert!(!abelian_sift(&groups, &h, &vec![1, 1]).unwrap());
        assert!(abelian_sift(&groups, &h, &vec![1, 2]).unwrap());
        assert!(abelian_sift(&groups, &h, &vec![0, 0]).unwrap());
        // identity alone
        let e = vec![vec![0, 0]];
        assert!(abelian_sift(&groups, &e, &vec![0, 0]).unwrap());
        assert!(!abelian_sift(&groups, &e, &vec![0, 2]).unwrap());
    }

    #[test]
    fn sift_agrees_with_brute_subgroup_enumeration() {
        // random generator sets in Z2 x Z4 x Z4: compare the sift against
        // exhaustive subgroup closure
        let cat = catalog(&["Z2", "Z4"]);
        let z2 = cat.find("Z2").unwrap();
        let z4 = cat.find("Z4").unwrap();
        let g1 = induced_abelian_group(&cat, z2, &Congruence::full(2), 0).unwrap();
        let g2 = induced_abelian_group(&cat, z4, &Congruence::full(4), 0).unwrap();
        let g3 = induced_abelian_group(&cat, z4, &Congruence::full(4), 1).unwrap();
        let groups = vec![g1, g2, g3];
        let sizes = [2usize, 4, 4];
        let all: Vec<Vec<usize>> = (0..sizes.iter().product::<usize>())
            .map(|mut i| {
                let mut t = Vec::new();
                for &s in &sizes {
                    t.push(i % s);
                    i /= s;
                }
                t
            })
            .collect();
        let mut seed = 9u64;
        let mut rand = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 33) as usize
        };
        for _ in 0..30 {
            let k = 1 + rand() % 3;
            let gens: Vec<Vec<usize>> = (0..k)
                .map(|_| (0..3).map(|j| rand() % sizes[j]).collect())
                .collect();
            // brute subgroup closure under coordinatewise addition
            let mut set: HashSet<Vec<usize>> = HashSet::new();
            set.insert(vec![groups[0].zero, groups[1].zero, groups[2].zero]);
            let mut frontier: Vec<Vec<usize>> = set.iter().cloned().collect();
            while let Some(x) = frontier.pop() {
                for g in &gens {
                    let y: Vec<usize> = (0..3).map(|j| groups[j].add(x[j], g[j])).collect();
                    if set.insert(y.clone()) {
                        frontier.push(y);
                    }
                }
            }
            let tables = SiftTables::build(groups.clone(), gens.clone());
            for t in &all {
                assert_eq!(tables.contains(t), set.contains(t), "gens {gens:?}, t {t:?}");
            }
        }
    }

    #[test]
    fn dispatcher_agrees_across_methods_on_small_instances() {
        let cat = catalog(&["Z2"]);
        let inst = odd_coset(&cat);
        for target in [vec![1, 1, 1], vec![1, 1, 0], vec![0, 0, 1]] {
            let inst = ResolvedInstance {
                target,
                ..inst.clone()
            };
            let brute = solve(&cat, &inst, Method::Brute, false).unwrap().verdict;
            for m in [Method::Compact, Method::Reduction, Method::Rs, Method::Auto] {
                assert_eq!(solve(&cat, &inst, m, false).unwrap().verdict, brute);
            }
        }
    }

    #[test]
    fn narrow_instances_fall_back_to_closure() {
        let cat = catalog(&["Z4"]);
        let z4 = cat.find("Z4").unwrap();
        let inst = ResolvedInstance {
            ctx: Context::new(vec![z4]),
            gens: vec![vec![0], vec![1]],
            target: vec![3],
        };
        let ans = solve(&cat, &inst, Method::Auto, false).unwrap();
        assert_eq!(ans.method, "brute");
        assert!(ans.verdict);
        // m is idempotent, so a singleton generates itself only
        let lone = ResolvedInstance {
            ctx: Context::new(vec![z4]),
            gens: vec![vec![1]],
            target: vec![3],
        };
        assert!(!solve(&cat, &lone, Method::Auto, false).unwrap().verdict);
    }

    #[test]
    fn reduce_hs_on_quotient_factors() {
        // factors Z4:0123:02.13 (the Z2-like quotient of Z4); verdicts must
        // match brute force on the quotient instance
        let cat = catalog(&["Z4"]);
        let entries = cat.hs_entries().unwrap();
        let q = entries
            .iter()
            .find(|e| {
                e.parent == cat.find("Z4").unwrap()
                    && e.subuniverse.len() == 4
                    && e.congruence.num_blocks() == 2
            })
            .expect("Z4 has a two-block quotient");
        let qid = q.alg;
        let ctx = Context::new(vec![qid, qid, qid]);
        let gens = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
        for target in [vec![1, 1, 1], vec![1, 1, 0]] {
            let inst = ResolvedInstance {
                ctx: ctx.clone(),
                gens: gens.clone(),
                target: target.clone(),
            };
            let mut oracle = |c: &Context, g: &[Tuple], t: &Tuple| -> Result<bool> {
                Ok(smp_brute(&cat, c, g, t, cat.closure_cap)?.verdict)
            };
            let lifted = reduce_hs(&cat, &inst, &mut oracle).unwrap();
            let direct = smp_brute(&cat, &ctx, &gens, &target, cat.closure_cap)
                .unwrap()
                .verdict;
            assert_eq!(lifted, direct);
        }
    }

    #[test]
    fn reduce_hs_degenerates_to_plain_smp_on_base_factors() {
        let cat = catalog(&["Z2"]);
        let inst = odd_coset(&cat);
        let mut oracle = |c: &Context, g: &[Tuple], t: &Tuple| -> Result<bool> {
            Ok(smp_brute(&cat, c, g, t, cat.closure_cap)?.verdict)
        };
        assert!(reduce_hs(&cat, &inst, &mut oracle).unwrap());
        let no = ResolvedInstance {
            target: vec![1, 1, 0],
            ..inst
        };
        let mut oracle = |c: &Context, g: &[Tuple], t: &Tuple| -> Result<bool> {
            Ok(smp_brute(&cat, c, g, t, cat.closure_cap)?.verdict)
        };
        assert!(!reduce_hs(&cat, &no, &mut oracle).unwrap());
    }

    #[test]
    fn structure_criterion_on_odd_coset() {
        let cat = catalog(&["Z2"]);
        let inst = odd_coset(&cat);
        assert!(structure_criterion_membership(&cat, &inst.ctx, &inst.gens, &vec![1, 1, 1]).unwrap());
        assert!(!structure_criterion_membership(&cat, &inst.ctx, &inst.gens, &vec![1, 1, 0]).unwrap());
    }
}
