//! Finite algebras over a shared signature: operation tables, products,
//! quotients, subalgebra closure, and the HS catalog used by the reductions.
//!
//! Elements of an algebra of size `m` are the ids `0..m-1`. Operation tables
//! are flat, row-major with the first argument most significant, so the index
//! of `f(a_1,...,a_r)` is `sum a_i * m^(r-i)`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::circuit::Circuit;
use crate::congruence::Congruence;
use crate::error::{Error, Result};

pub type Elem = u8;
pub type AlgId = usize;
pub type Tuple = Vec<Elem>;

pub const MAX_ARITY: usize = 8;
pub const MAX_SIZE: usize = 250;
pub const DEFAULT_CLOSURE_CAP: usize = 10_000_000;

/// Ordered list of operation symbols with arities, shared by every algebra
/// in a catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    symbols: Vec<(String, usize)>,
}

impl Signature {
    pub fn new(symbols: Vec<(String, usize)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (name, arity) in &symbols {
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name.clone()));
            }
            if *arity > MAX_ARITY {
                return Err(Error::Parse(format!(
                    "arity {arity} of `{name}` exceeds cap {MAX_ARITY}"
                )));
            }
        }
        Ok(Signature { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn arity(&self, sym: usize) -> usize {
        self.symbols[sym].1
    }

    pub fn name(&self, sym: usize) -> &str {
        &self.symbols[sym].0
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.symbols.iter().position(|(n, _)| n == name)
    }

    pub fn symbols(&self) -> &[(String, usize)] {
        &self.symbols
    }
}

/// A finite algebra: universe `0..size-1` plus one flat table per symbol.
#[derive(Debug, Clone)]
pub struct FiniteAlgebra {
    pub name: String,
    pub size: usize,
    tables: Vec<Vec<Elem>>,
    /// True when the signature is a single ternary operation satisfying the
    /// Mal'tsev and heap (para-associativity) identities; enables the coset
    /// shortcut in `subalgebra_closure`.
    heap_op: bool,
}

impl FiniteAlgebra {
    pub fn new(sig: &Signature, name: String, size: usize, tables: Vec<Vec<Elem>>) -> Result<Self> {
        if size == 0 || size > MAX_SIZE {
            return Err(Error::Parse(format!(
                "algebra `{name}` has unsupported size {size}"
            )));
        }
        if tables.len() != sig.len() {
            return Err(Error::Parse(format!(
                "algebra `{name}` has {} tables for {} symbols",
                tables.len(),
                sig.len()
            )));
        }
        for (sym, table) in tables.iter().enumerate() {
            let expected = size.pow(sig.arity(sym) as u32);
            if table.len() != expected {
                return Err(Error::TableLength {
                    symbol: sig.name(sym).to_string(),
                    algebra: name,
                    expected,
                    got: table.len(),
                });
            }
            for (index, &value) in table.iter().enumerate() {
                if value as usize >= size {
                    return Err(Error::EntryOutOfRange {
                        symbol: sig.name(sym).to_string(),
                        algebra: name,
                        index,
                        value: value as usize,
                        size,
                    });
                }
            }
        }
        let mut alg = FiniteAlgebra {
            name,
            size,
            tables,
            heap_op: false,
        };
        alg.heap_op = alg.detect_heap(sig);
        Ok(alg)
    }

    #[inline]
    pub fn apply(&self, sym: usize, args: &[Elem]) -> Elem {
        let mut idx = 0usize;
        for &a in args {
            idx = idx * self.size + a as usize;
        }
        self.tables[sym][idx]
    }

    pub fn table(&self, sym: usize) -> &[Elem] {
        &self.tables[sym]
    }

    pub fn elements(&self) -> impl Iterator<Item = Elem> {
        (0..self.size as Elem).chain(std::iter::empty())
    }

    pub fn is_heap_op(&self) -> bool {
        self.heap_op
    }

    fn detect_heap(&self, sig: &Signature) -> bool {
        if sig.len() != 1 || sig.arity(0) != 3 || self.size > 16 {
            return false;
        }
        let m = |x: Elem, y: Elem, z: Elem| self.apply(0, &[x, y, z]);
        let n = self.size as Elem;
        for x in 0..n {
            for y in 0..n {
                if m(x, y, y) != x || m(y, y, x) != x {
                    return false;
                }
            }
        }
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    for u in 0..n {
                        for v in 0..n {
                            if m(m(x, y, z), u, v) != m(x, y, m(z, u, v)) {
                                return false;
                            }
                        }
                    }
                }
            }
        }
        true
    }
}

/// How a member of the HS catalog arises from a base algebra.
#[derive(Debug, Clone)]
pub struct HsEntry {
    pub alg: AlgId,
    pub parent: AlgId,
    /// Sorted subuniverse of the parent; the embedding sends element `i` of
    /// the subalgebra to `subuniverse[i]`.
    pub subuniverse: Vec<Elem>,
    /// Congruence on the (relabeled) subalgebra whose quotient this entry is.
    pub congruence: Congruence,
}

#[derive(Default)]
pub(crate) struct Caches {
    pub lattices: HashMap<AlgId, Vec<Congruence>>,
    pub similarity: HashMap<(AlgId, AlgId), bool>,
    pub hs_lookup: HashMap<(AlgId, Vec<Elem>, Vec<Elem>), (AlgId, Vec<Elem>)>,
    pub commutators: HashMap<(AlgId, Vec<Elem>, Vec<Elem>), Congruence>,
}

/// A set of algebras over one signature, closed on demand under H and S,
/// together with the derived term circuits once `configure_terms` has run.
pub struct Catalog {
    pub signature: Signature,
    algebras: Vec<FiniteAlgebra>,
    by_name: HashMap<String, AlgId>,
    base: Vec<AlgId>,
    hs: Option<Vec<HsEntry>>,
    pub terms: Option<crate::circuit::TermKit>,
    pub closure_cap: usize,
    pub(crate) caches: Mutex<Caches>,
}

impl Catalog {
    pub fn new(signature: Signature) -> Self {
        Catalog {
            signature,
            algebras: Vec::new(),
            by_name: HashMap::new(),
            base: Vec::new(),
            hs: None,
            terms: None,
            closure_cap: DEFAULT_CLOSURE_CAP,
            caches: Mutex::new(Caches::default()),
        }
    }

    pub fn add_base(&mut self, alg: FiniteAlgebra) -> Result<AlgId> {
        let id = self.register(alg)?;
        self.base.push(id);
        Ok(id)
    }

    pub(crate) fn register(&mut self, alg: FiniteAlgebra) -> Result<AlgId> {
        if self.by_name.contains_key(&alg.name) {
            return Err(Error::DuplicateName(alg.name.clone()));
        }
        let id = self.algebras.len();
        self.by_name.insert(alg.name.clone(), id);
        self.algebras.push(alg);
        Ok(id)
    }

    pub fn alg(&self, id: AlgId) -> &FiniteAlgebra {
        &self.algebras[id]
    }

    pub fn find(&self, name: &str) -> Result<AlgId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownAlgebra(name.to_string()))
    }

    pub fn base(&self) -> &[AlgId] {
        &self.base
    }

    pub fn algebra_count(&self) -> usize {
        self.algebras.len()
    }

    /// Largest universe among the base algebras (the constant `a_K`).
    pub fn max_size(&self) -> usize {
        self.base
            .iter()
            .map(|&id| self.algebras[id].size)
            .max()
            .unwrap_or(1)
    }

    pub fn hs_entries(&self) -> Option<&[HsEntry]> {
        self.hs.as_deref()
    }

    /// Extends the catalog with every subalgebra and every quotient of a
    /// subalgebra of a base member, deduplicated up to isomorphism. Each
    /// entry records the subuniverse and congruence it arises from; base
    /// members appear as their own entries.
    pub fn ensure_hs(&mut self) -> Result<()> {
        if self.hs.is_some() {
            return Ok(());
        }
        let mut entries: Vec<HsEntry> = Vec::new();
        let base = self.base.clone();
        for &parent in &base {
            let size = self.algebras[parent].size;
            let known = entries.iter().any(|e| {
                self.algebras[e.alg].size == size
                    && find_isomorphism(
                        &self.signature,
                        &self.algebras[e.alg],
                        &self.algebras[parent],
                    )
                    .is_some()
            });
            if !known {
                entries.push(HsEntry {
                    alg: parent,
                    parent,
                    subuniverse: (0..size as Elem).collect(),
                    congruence: Congruence::identity(size),
                });
            }
        }
        for parent in base {
            for sub in subuniverses(self, parent, 100_000)? {
                let (subalg, _emb) = restrict(self, parent, &sub);
                let lattice = crate::congruence::congruence_lattice_of(self, &subalg)?;
                for cong in lattice {
                    let (qalg, _proj) = quotient_algebra(&self.signature, &subalg, &cong)?;
                    let known = entries.iter().any(|e| {
                        self.algebras[e.alg].size == qalg.size
                            && find_isomorphism(&self.signature, &self.algebras[e.alg], &qalg)
                                .is_some()
                    });
                    if !known {
                        let name = hs_name(&self.algebras[parent].name, &sub, &cong);
                        let named = FiniteAlgebra { name, ..qalg };
                        let id = self.register(named)?;
                        entries.push(HsEntry {
                            alg: id,
                            parent,
                            subuniverse: sub.clone(),
                            congruence: cong,
                        });
                    }
                }
            }
        }
        self.hs = Some(entries);
        Ok(())
    }

    /// Finds the HS entry isomorphic to the quotient of the given subalgebra,
    /// returning its id and the isomorphism from the literal quotient onto it.
    pub fn hs_class_of(
        &self,
        parent: AlgId,
        subuniverse: &[Elem],
        cong: &Congruence,
    ) -> Result<(AlgId, Vec<Elem>)> {
        let key = (parent, subuniverse.to_vec(), cong.leaders().to_vec());
        if let Some(hit) = self.caches.lock().unwrap().hs_lookup.get(&key) {
            return Ok(hit.clone());
        }
        let (subalg, _) = restrict(self, parent, subuniverse);
        let (qalg, _) = quotient_algebra(&self.signature, &subalg, cong)?;
        let entries = self
            .hs
            .as_ref()
            .ok_or_else(|| Error::InputContract("hs catalog not built".into()))?;
        for e in entries {
            let cand = &self.algebras[e.alg];
            if cand.size == qalg.size {
                if let Some(iso) = find_isomorphism(&self.signature, &qalg, cand) {
                    self.caches
                        .lock()
                        .unwrap()
                        .hs_lookup
                        .insert(key, (e.alg, iso.clone()));
                    return Ok((e.alg, iso));
                }
            }
        }
        Err(Error::InputContract(
            "quotient not found in hs catalog".into(),
        ))
    }
}

fn hs_name(parent: &str, sub: &[Elem], cong: &Congruence) -> String {
    let elems: Vec<String> = sub.iter().map(|e| e.to_string()).collect();
    let blocks: Vec<String> = cong
        .blocks()
        .iter()
        .map(|b| {
            b.iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join("")
        })
        .collect();
    format!("{}:{}:{}", parent, elems.join(""), blocks.join("."))
}

/// A product context: the list of factor algebras a tuple ranges over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub factors: Vec<AlgId>,
}

impl Context {
    pub fn new(factors: Vec<AlgId>) -> Self {
        Context { factors }
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn check_tuple(&self, cat: &Catalog, t: &[Elem]) -> Result<()> {
        if t.len() != self.factors.len() {
            return Err(Error::ArityMismatch {
                expected: self.factors.len(),
                got: t.len(),
            });
        }
        for (i, &v) in t.iter().enumerate() {
            if v as usize >= cat.alg(self.factors[i]).size {
                return Err(Error::Invalid(format!(
                    "coordinate {i} value {v} out of range for `{}`",
                    cat.alg(self.factors[i]).name
                )));
            }
        }
        Ok(())
    }

    pub fn project(&self, coords: &[usize]) -> Context {
        Context {
            factors: coords.iter().map(|&i| self.factors[i]).collect(),
        }
    }

    /// Applies an operation symbol coordinatewise.
    pub fn apply(&self, cat: &Catalog, sym: usize, args: &[&Tuple]) -> Tuple {
        let mut out = Vec::with_capacity(self.factors.len());
        let mut buf = [0u8; MAX_ARITY];
        for (i, &f) in self.factors.iter().enumerate() {
            for (j, a) in args.iter().enumerate() {
                buf[j] = a[i];
            }
            out.push(cat.alg(f).apply(sym, &buf[..args.len()]));
        }
        out
    }
}

/// Provenance of a closure element: an input generator or an operation
/// applied to earlier elements.
#[derive(Debug, Clone)]
pub enum Prov {
    Gen(usize),
    App(usize, Vec<u32>),
}

pub struct Closure {
    pub elems: Vec<Tuple>,
    pub index: HashMap<Tuple, u32>,
    pub prov: Option<Vec<Prov>>,
    pub capped: bool,
}

impl Closure {
    pub fn contains(&self, t: &[Elem]) -> bool {
        self.index.contains_key(t)
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }
}

pub struct ClosureOpts {
    pub cap: usize,
    pub provenance: bool,
    /// Disables the heap shortcut; use for closures whose discovery order
    /// feeds designation tie-breaking.
    pub force_generic: bool,
    /// Stop early once this tuple is found (used by the term search).
    pub target: Option<Tuple>,
}

impl Default for ClosureOpts {
    fn default() -> Self {
        ClosureOpts {
            cap: DEFAULT_CLOSURE_CAP,
            provenance: false,
            force_generic: false,
            target: None,
        }
    }
}

/// Least subset of the product containing `gens` and closed under all
/// coordinatewise operations. Deterministic BFS by generation wave,
/// generators first in input order.
pub fn subalgebra_closure(
    cat: &Catalog,
    ctx: &Context,
    gens: &[Tuple],
    opts: &ClosureOpts,
) -> Result<Closure> {
    if gens.is_empty() {
        return Err(Error::InputContract("empty generator set".into()));
    }
    for g in gens {
        ctx.check_tuple(cat, g)?;
    }
    let heap_ok = !opts.force_generic
        && !opts.provenance
        && opts.target.is_none()
        && cat.signature.len() == 1
        && cat.signature.arity(0) == 3
        && ctx.factors.iter().all(|&f| cat.alg(f).is_heap_op());
    if heap_ok {
        return heap_closure(cat, ctx, gens, opts.cap);
    }

    let mut elems: Vec<Tuple> = Vec::new();
    let mut index: HashMap<Tuple, u32> = HashMap::new();
    let mut prov: Vec<Prov> = Vec::new();
    for (gi, g) in gens.iter().enumerate() {
        if !index.contains_key(g) {
            index.insert(g.clone(), elems.len() as u32);
            elems.push(g.clone());
            prov.push(Prov::Gen(gi));
            if opts.target.as_deref() == Some(g.as_slice()) {
                return Ok(done(elems, index, prov, opts));
            }
        }
    }

    let nsym = cat.signature.len();
    let mut wave_start = 0usize;
    loop {
        let known = elems.len();
        if wave_start == known {
            break;
        }
        let mut discovered: Vec<(Tuple, Prov)> = Vec::new();
        let mut seen_new: HashMap<Tuple, ()> = HashMap::new();
        for sym in 0..nsym {
            let r = cat.signature.arity(sym);
            if r == 0 {
                continue;
            }
            // every combination with at least one argument from the last wave
            let mut ids = vec![0u32; r];
            for x in wave_start..known {
                for pos in 0..r {
                    // x sits at `pos`; earlier positions range over all known
                    // ids, later positions only over ids < wave_start to avoid
                    // revisiting combinations (any combo with >=1 new arg is
                    // hit exactly once via its first new position).
                    enumerate_combos(
                        &mut ids,
                        pos,
                        x as u32,
                        known as u32,
                        wave_start as u32,
                        &mut |ids| {
                            let args: Vec<&Tuple> =
                                ids.iter().map(|&i| &elems[i as usize]).collect();
                            let val = ctx.apply(cat, sym, &args);
                            if !index.contains_key(&val) && !seen_new.contains_key(&val) {
                                seen_new.insert(val.clone(), ());
                                discovered.push((val, Prov::App(sym, ids.to_vec())));
                            }
                        },
                    );
                }
            }
        }
        wave_start = known;
        for (val, p) in discovered {
            if elems.len() >= opts.cap {
                return Err(Error::ClosureCap(opts.cap));
            }
            index.insert(val.clone(), elems.len() as u32);
            elems.push(val.clone());
            prov.push(p);
            if opts.target.as_deref() == Some(val.as_slice()) {
                return Ok(done(elems, index, prov, opts));
            }
        }
    }
    Ok(done(elems, index, prov, opts))
}

fn done(
    elems: Vec<Tuple>,
    index: HashMap<Tuple, u32>,
    prov: Vec<Prov>,
    opts: &ClosureOpts,
) -> Closure {
    Closure {
        elems,
        index,
        prov: if opts.provenance { Some(prov) } else { None },
        capped: false,
    }
}

fn enumerate_combos(
    ids: &mut [u32],
    pos: usize,
    fixed: u32,
    known: u32,
    wave_start: u32,
    f: &mut impl FnMut(&[u32]),
) {
    fn rec(
        ids: &mut [u32],
        slot: usize,
        pos: usize,
        fixed: u32,
        known: u32,
        wave_start: u32,
        f: &mut impl FnMut(&[u32]),
    ) {
        if slot == ids.len() {
            f(ids);
            return;
        }
        if slot == pos {
            ids[slot] = fixed;
            rec(ids, slot + 1, pos, fixed, known, wave_start, f);
        } else {
            let limit = if slot > pos { wave_start } else { known };
            for v in 0..limit {
                ids[slot] = v;
                rec(ids, slot + 1, pos, fixed, known, wave_start, f);
            }
        }
    }
    rec(ids, 0, pos, fixed, known, wave_start, f);
}

/// Coset shortcut for single-heap-operation contexts: the closure of `S`
/// under `m(x,y,z)` equals the subgroup of `(A, x*y := m(x,s0,y))` generated
/// by `S`, for any `s0 in S`.
fn heap_closure(cat: &Catalog, ctx: &Context, gens: &[Tuple], cap: usize) -> Result<Closure> {
    let s0 = gens[0].clone();
    let mul = |x: &Tuple, y: &Tuple| -> Tuple {
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            out.push(cat.alg(ctx.factors[i]).apply(0, &[x[i], s0[i], y[i]]));
        }
        out
    };
    let inv = |x: &Tuple| -> Tuple {
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            out.push(cat.alg(ctx.factors[i]).apply(0, &[s0[i], x[i], s0[i]]));
        }
        out
    };
    let step: Vec<Tuple> = gens
        .iter()
        .flat_map(|g| [g.clone(), inv(g)])
        .collect();
    let mut elems: Vec<Tuple> = Vec::new();
    let mut index: HashMap<Tuple, u32> = HashMap::new();
    let mut queue: VecDeque<usize> = VecDeque::new();
    for g in gens {
        if !index.contains_key(g) {
            index.insert(g.clone(), elems.len() as u32);
            queue.push_back(elems.len());
            elems.push(g.clone());
        }
    }
    while let Some(i) = queue.pop_front() {
        let x = elems[i].clone();
        for s in &step {
            let y = mul(&x, s);
            if !index.contains_key(&y) {
                if elems.len() >= cap {
                    return Err(Error::ClosureCap(cap));
                }
                index.insert(y.clone(), elems.len() as u32);
                queue.push_back(elems.len());
                elems.push(y);
            }
        }
    }
    Ok(Closure {
        elems,
        index,
        prov: None,
        capped: false,
    })
}

/// Restricts an algebra to a subuniverse, relabeling elements to
/// `0..sub.len()-1` in the sorted order of `sub`.
pub fn restrict_algebra(
    sig: &Signature,
    p: &FiniteAlgebra,
    sub: &[Elem],
) -> (FiniteAlgebra, Vec<Elem>) {
    let mut back = vec![0 as Elem; p.size];
    for (i, &e) in sub.iter().enumerate() {
        back[e as usize] = i as Elem;
    }
    let mut tables = Vec::with_capacity(sig.len());
    for sym in 0..sig.len() {
        let r = sig.arity(sym);
        let mut table = vec![0 as Elem; sub.len().pow(r as u32)];
        let mut args = vec![0usize; r];
        for (idx, slot) in table.iter_mut().enumerate() {
            let mut rem = idx;
            for j in (0..r).rev() {
                args[j] = rem % sub.len();
                rem /= sub.len();
            }
            let mapped: Vec<Elem> = args.iter().map(|&a| sub[a]).collect();
            *slot = back[p.apply(sym, &mapped) as usize];
        }
        tables.push(table);
    }
    let alg = FiniteAlgebra {
        name: format!("{}|sub", p.name),
        size: sub.len(),
        tables,
        heap_op: p.heap_op,
    };
    (alg, sub.to_vec())
}

pub fn restrict(cat: &Catalog, parent: AlgId, sub: &[Elem]) -> (FiniteAlgebra, Vec<Elem>) {
    restrict_algebra(&cat.signature, cat.alg(parent), sub)
}

/// Direct product of two algebras; element (x, y) is encoded as
/// `x * b.size + y`. Heap structure is inherited from the factors.
pub fn product_algebra(sig: &Signature, a: &FiniteAlgebra, b: &FiniteAlgebra) -> FiniteAlgebra {
    let size = a.size * b.size;
    let mut tables = Vec::with_capacity(sig.len());
    for sym in 0..sig.len() {
        let r = sig.arity(sym);
        let mut table = vec![0 as Elem; size.pow(r as u32)];
        let mut args = vec![0usize; r];
        let mut xa = vec![0 as Elem; r];
        let mut xb = vec![0 as Elem; r];
        for (idx, slot) in table.iter_mut().enumerate() {
            let mut rem = idx;
            for j in (0..r).rev() {
                args[j] = rem % size;
                rem /= size;
            }
            for j in 0..r {
                xa[j] = (args[j] / b.size) as Elem;
                xb[j] = (args[j] % b.size) as Elem;
            }
            *slot = a.apply(sym, &xa) * b.size as Elem + b.apply(sym, &xb);
        }
        tables.push(table);
    }
    FiniteAlgebra {
        name: format!("{}x{}", a.name, b.name),
        size,
        tables,
        heap_op: a.heap_op && b.heap_op,
    }
}

/// Closure of a set of elements of a single algebra under all operations,
/// returned sorted.
pub fn element_closure(sig: &Signature, alg: &FiniteAlgebra, seed: &[Elem]) -> Vec<Elem> {
    if alg.heap_op && sig.len() == 1 && sig.arity(0) == 3 && !seed.is_empty() {
        let s0 = seed[0];
        let mul = |x: Elem, y: Elem| alg.apply(0, &[x, s0, y]);
        let inv = |x: Elem| alg.apply(0, &[s0, x, s0]);
        let mut step: Vec<Elem> = Vec::with_capacity(seed.len() * 2);
        for &g in seed {
            step.push(g);
            step.push(inv(g));
        }
        let mut present = vec![false; alg.size];
        let mut queue: Vec<Elem> = Vec::new();
        for &g in seed {
            if !present[g as usize] {
                present[g as usize] = true;
                queue.push(g);
            }
        }
        let mut qi = 0;
        while qi < queue.len() {
            let x = queue[qi];
            qi += 1;
            for &s in &step {
                let y = mul(x, s);
                if !present[y as usize] {
                    present[y as usize] = true;
                    queue.push(y);
                }
            }
        }
        let mut out: Vec<Elem> = queue;
        out.sort_unstable();
        return out;
    }
    let (order, _) = element_closure_with_order(sig, alg, seed);
    let mut out = order;
    out.sort_unstable();
    out
}

/// Single-algebra closure in deterministic BFS order with per-element
/// provenance.
pub fn element_closure_with_order(
    sig: &Signature,
    alg: &FiniteAlgebra,
    seed: &[Elem],
) -> (Vec<Elem>, Vec<Prov>) {
    let mut elems: Vec<Elem> = Vec::new();
    let mut prov: Vec<Prov> = Vec::new();
    let mut pos = vec![u32::MAX; alg.size];
    for (j, &e) in seed.iter().enumerate() {
        if pos[e as usize] == u32::MAX {
            pos[e as usize] = elems.len() as u32;
            elems.push(e);
            prov.push(Prov::Gen(j));
        }
    }
    let mut wave_start = 0usize;
    loop {
        let known = elems.len();
        if wave_start == known {
            break;
        }
        let mut discovered: Vec<(Elem, Prov)> = Vec::new();
        let mut seen_new = vec![false; alg.size];
        for sym in 0..sig.len() {
            let r = sig.arity(sym);
            if r == 0 {
                continue;
            }
            let mut ids = vec![0u32; r];
            for x in wave_start..known {
                for p in 0..r {
                    enumerate_combos(
                        &mut ids,
                        p,
                        x as u32,
                        known as u32,
                        wave_start as u32,
                        &mut |ids| {
                            let args: Vec<Elem> = ids.iter().map(|&i| elems[i as usize]).collect();
                            let v = alg.apply(sym, &args);
                            if pos[v as usize] == u32::MAX && !seen_new[v as usize] {
                                seen_new[v as usize] = true;
                                discovered.push((v, Prov::App(sym, ids.to_vec())));
                            }
                        },
                    );
                }
            }
        }
        wave_start = known;
        for (v, p) in discovered {
            pos[v as usize] = elems.len() as u32;
            elems.push(v);
            prov.push(p);
        }
    }
    (elems, prov)
}

/// Closure of a set of pairs under the coordinatewise operations of two
/// algebras of the same signature.
pub fn pair_closure(
    sig: &Signature,
    a: &FiniteAlgebra,
    b: &FiniteAlgebra,
    pairs: &[(Elem, Elem)],
) -> Vec<(Elem, Elem)> {
    let prod = |x: (Elem, Elem)| x.0 as usize * b.size + x.1 as usize;
    let mut present = vec![false; a.size * b.size];
    let mut list: Vec<(Elem, Elem)> = Vec::new();
    for &p in pairs {
        if !present[prod(p)] {
            present[prod(p)] = true;
            list.push(p);
        }
    }
    let mut wave_start = 0usize;
    loop {
        let known = list.len();
        if wave_start == known {
            break;
        }
        let mut discovered = Vec::new();
        for sym in 0..sig.len() {
            let r = sig.arity(sym);
            if r == 0 {
                continue;
            }
            let mut ids = vec![0u32; r];
            for x in wave_start..known {
                for p in 0..r {
                    enumerate_combos(
                        &mut ids,
                        p,
                        x as u32,
                        known as u32,
                        wave_start as u32,
                        &mut |ids| {
                            let xa: Vec<Elem> = ids.iter().map(|&i| list[i as usize].0).collect();
                            let xb: Vec<Elem> = ids.iter().map(|&i| list[i as usize].1).collect();
                            let v = (a.apply(sym, &xa), b.apply(sym, &xb));
                            if !present[prod(v)] {
                                present[prod(v)] = true;
                                discovered.push(v);
                            }
                        },
                    );
                }
            }
        }
        wave_start = known;
        list.extend(discovered);
    }
    list
}

/// Whether a set of pairs is the graph of an isomorphism between the two
/// algebras: total, single-valued in both directions, and onto both sides.
pub fn is_isomorphism_graph(a_size: usize, b_size: usize, pairs: &[(Elem, Elem)]) -> bool {
    if a_size != b_size || pairs.len() != a_size {
        return false;
    }
    let mut fwd = vec![u8::MAX; a_size];
    let mut bwd = vec![u8::MAX; b_size];
    for &(x, y) in pairs {
        if fwd[x as usize] != u8::MAX || bwd[y as usize] != u8::MAX {
            return false;
        }
        fwd[x as usize] = y;
        bwd[y as usize] = x;
    }
    fwd.iter().all(|&v| v != u8::MAX)
}

/// Quotient by a congruence; blocks are relabeled `0..k-1` ordered by least
/// representative. Returns the quotient and the projection map.
pub fn quotient_algebra(
    sig: &Signature,
    alg: &FiniteAlgebra,
    theta: &Congruence,
) -> Result<(FiniteAlgebra, Vec<Elem>)> {
    if !theta.is_congruence_of(sig, alg) {
        return Err(Error::NotACongruence(format!(
            "partition on `{}`",
            alg.name
        )));
    }
    let leaders = theta.leaders();
    let mut reps: Vec<Elem> = leaders.to_vec();
    reps.sort_unstable();
    reps.dedup();
    let mut proj = vec![0 as Elem; alg.size];
    for (e, &l) in leaders.iter().enumerate() {
        proj[e] = reps.binary_search(&l).unwrap() as Elem;
    }
    let qsize = reps.len();
    let mut tables = Vec::with_capacity(sig.len());
    for sym in 0..sig.len() {
        let r = sig.arity(sym);
        let mut table = vec![0 as Elem; qsize.pow(r as u32)];
        let mut args = vec![0usize; r];
        for (idx, slot) in table.iter_mut().enumerate() {
            let mut rem = idx;
            for j in (0..r).rev() {
                args[j] = rem % qsize;
                rem /= qsize;
            }
            let lifted: Vec<Elem> = args.iter().map(|&a| reps[a]).collect();
            *slot = proj[alg.apply(sym, &lifted) as usize];
        }
        tables.push(table);
    }
    let mut q = FiniteAlgebra {
        name: format!("{}/q", alg.name),
        size: qsize,
        tables,
        heap_op: false,
    };
    q.heap_op = q.detect_heap(sig);
    Ok((q, proj))
}

/// All subuniverses (nonempty closed subsets) of an algebra, as sorted
/// element lists.
pub fn subuniverses_of(
    sig: &Signature,
    alg: &FiniteAlgebra,
    cap: usize,
) -> Result<Vec<Vec<Elem>>> {
    let size = alg.size;
    let mut found: Vec<Vec<Elem>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut queue: VecDeque<Vec<Elem>> = VecDeque::new();
    for e in 0..size as Elem {
        let u = element_closure(sig, alg, &[e]);
        if seen.insert(u.clone()) {
            queue.push_back(u.clone());
            found.push(u);
        }
    }
    while let Some(u) = queue.pop_front() {
        for x in 0..size as Elem {
            if u.binary_search(&x).is_err() {
                let mut seed = u.clone();
                seed.push(x);
                let v = element_closure(sig, alg, &seed);
                if seen.insert(v.clone()) {
                    if found.len() >= cap {
                        return Err(Error::Cap {
                            what: "subuniverse enumeration".into(),
                            cap,
                        });
                    }
                    queue.push_back(v.clone());
                    found.push(v);
                }
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn subuniverses(cat: &Catalog, alg: AlgId, cap: usize) -> Result<Vec<Vec<Elem>>> {
    subuniverses_of(&cat.signature, cat.alg(alg), cap)
}

/// Backtracking search for an isomorphism between two algebras of the same
/// signature; returns the image map when one exists.
pub fn find_isomorphism(
    sig: &Signature,
    a: &FiniteAlgebra,
    b: &FiniteAlgebra,
) -> Option<Vec<Elem>> {
    if a.size != b.size {
        return None;
    }
    let n = a.size;
    let mut map = vec![u8::MAX; n];
    let mut used = vec![false; n];
    fn compatible(sig: &Signature, a: &FiniteAlgebra, b: &FiniteAlgebra, map: &[Elem]) -> bool {
        let n = a.size;
        for sym in 0..sig.len() {
            let r = sig.arity(sym);
            let mut args = vec![0usize; r];
            'outer: loop {
                let mut all_mapped = true;
                for &x in &args {
                    if map[x] == u8::MAX {
                        all_mapped = false;
                        break;
                    }
                }
                if all_mapped {
                    let av = a.apply(sym, &args.iter().map(|&x| x as Elem).collect::<Vec<_>>());
                    if map[av as usize] != u8::MAX {
                        let mapped: Vec<Elem> = args.iter().map(|&x| map[x]).collect();
                        if b.apply(sym, &mapped) != map[av as usize] {
                            return false;
                        }
                    }
                }
                for j in (0..r).rev() {
                    args[j] += 1;
                    if args[j] < n {
                        continue 'outer;
                    }
                    args[j] = 0;
                }
                break;
            }
        }
        true
    }
    fn rec(
        sig: &Signature,
        a: &FiniteAlgebra,
        b: &FiniteAlgebra,
        map: &mut Vec<Elem>,
        used: &mut Vec<bool>,
        i: usize,
    ) -> bool {
        if i == a.size {
            return true;
        }
        for y in 0..b.size as Elem {
            if !used[y as usize] {
                map[i] = y;
                used[y as usize] = true;
                if compatible(sig, a, b, map) && rec(sig, a, b, map, used, i + 1) {
                    return true;
                }
                used[y as usize] = false;
                map[i] = u8::MAX;
            }
        }
        false
    }
    if rec(sig, a, b, &mut map, &mut used, 0) {
        Some(map)
    } else {
        None
    }
}

/// Exhaustively checks that two circuits induce the same term operation.
pub fn check_identity(
    cat: &Catalog,
    alg: AlgId,
    lhs: &Circuit,
    rhs: &Circuit,
    cap: usize,
) -> Result<bool> {
    if lhs.inputs != rhs.inputs {
        return Err(Error::ArityMismatch {
            expected: lhs.inputs,
            got: rhs.inputs,
        });
    }
    let a = cat.alg(alg);
    let v = lhs.inputs;
    let total = a.size.checked_pow(v as u32).unwrap_or(usize::MAX);
    if total > cap {
        return Err(Error::Cap {
            what: format!("identity check over {total} assignments"),
            cap,
        });
    }
    let mut args = vec![0 as Elem; v];
    loop {
        if lhs.eval(a, &args)? != rhs.eval(a, &args)? {
            return Ok(false);
        }
        let mut j = v;
        loop {
            if j == 0 {
                return Ok(true);
            }
            j -= 1;
            args[j] += 1;
            if (args[j] as usize) < a.size {
                break;
            }
            args[j] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Algebra files

#[derive(Serialize, Deserialize)]
struct SymbolDecl {
    symbol: String,
    arity: usize,
}

#[derive(Serialize, Deserialize)]
struct AlgebraDecl {
    name: String,
    size: usize,
    ops: BTreeMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct AlgebraFile {
    signature: Vec<SymbolDecl>,
    algebras: Vec<AlgebraDecl>,
}

/// Loads a catalog from the JSON algebra-file format.
pub fn load_catalog_str(text: &str) -> Result<Catalog> {
    let file: AlgebraFile = serde_json::from_str(text)?;
    let sig = Signature::new(
        file.signature
            .into_iter()
            .map(|s| (s.symbol, s.arity))
            .collect(),
    )?;
    let mut cat = Catalog::new(sig);
    for decl in file.algebras {
        let mut tables = Vec::with_capacity(cat.signature.len());
        for sym in 0..cat.signature.len() {
            let name = cat.signature.name(sym);
            let raw = decl
                .ops
                .get(name)
                .ok_or_else(|| Error::UnknownSymbol(format!("{name} missing in `{}`", decl.name)))?;
            let mut table = Vec::with_capacity(raw.len());
            for (index, &value) in raw.iter().enumerate() {
                if value >= decl.size {
                    return Err(Error::EntryOutOfRange {
                        symbol: name.to_string(),
                        algebra: decl.name.clone(),
                        index,
                        value,
                        size: decl.size,
                    });
                }
                table.push(value as Elem);
            }
            tables.push(table);
        }
        for key in decl.ops.keys() {
            if cat.signature.find(key).is_none() {
                return Err(Error::UnknownSymbol(format!(
                    "{key} not in signature (algebra `{}`)",
                    decl.name
                )));
            }
        }
        let alg = FiniteAlgebra::new(&cat.signature, decl.name, decl.size, tables)?;
        cat.add_base(alg)?;
    }
    if cat.base().is_empty() {
        return Err(Error::Parse("no algebras in file".into()));
    }
    Ok(cat)
}

pub fn load_catalog(path: &std::path::Path) -> Result<Catalog> {
    let text = std::fs::read_to_string(path)?;
    load_catalog_str(&text)
}

/// Serializes the base algebras of a catalog in the algebra-file format.
pub fn catalog_to_json(cat: &Catalog) -> Result<String> {
    let file = AlgebraFile {
        signature: cat
            .signature
            .symbols()
            .iter()
            .map(|(name, arity)| SymbolDecl {
                symbol: name.clone(),
                arity: *arity,
            })
            .collect(),
        algebras: cat
            .base()
            .iter()
            .map(|&id| {
                let a = cat.alg(id);
                AlgebraDecl {
                    name: a.name.clone(),
                    size: a.size,
                    ops: (0..cat.signature.len())
                        .map(|sym| {
                            (
                                cat.signature.name(sym).to_string(),
                                a.table(sym).iter().map(|&v| v as usize).collect(),
                            )
                        })
                        .collect(),
                }
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samples;

    #[test]
    fn loads_z2_from_json() {
        let cat = load_catalog_str(
            r#"{"signature":[{"symbol":"m","arity":3}],
                "algebras":[{"name":"Z2","size":2,"ops":{"m":[0,1,1,0,1,0,0,1]}}]}"#,
        )
        .unwrap();
        let id = cat.find("Z2").unwrap();
        let a = cat.alg(id);
        assert_eq!(a.apply(0, &[1, 1, 0]), 0);
        assert_eq!(a.apply(0, &[1, 0, 0]), 1);
    }

    fn load_error(text: &str) -> Error {
        match load_catalog_str(text) {
            Err(e) => e,
            Ok(_) => panic!("expected a load failure"),
        }
    }

    #[test]
    fn rejects_bad_table_length() {
        let err = load_error(
            r#"{"signature":[{"symbol":"m","arity":3}],
                "algebras":[{"name":"A","size":2,"ops":{"m":[0,1,1,0,1,0,0]}}]}"#,
        );
        assert!(err.to_string().contains("table length"));
    }

    #[test]
    fn rejects_entry_out_of_range() {
        let err = load_error(
            r#"{"signature":[{"symbol":"m","arity":3}],
                "algebras":[{"name":"A","size":2,"ops":{"m":[0,1,1,0,1,0,0,2]}}]}"#,
        );
        assert!(err.to_string().contains("entry out of range"));
    }

    #[test]
    fn rejects_duplicate_names() {
        let err = load_error(
            r#"{"signature":[{"symbol":"m","arity":3}],
                "algebras":[{"name":"A","size":2,"ops":{"m":[0,1,1,0,1,0,0,1]}},
                            {"name":"A","size":2,"ops":{"m":[0,1,1,0,1,0,0,1]}}]}"#,
        );
        assert!(matches!(err, Error::DuplicateName(_)));
    }

    #[test]
    fn odd_coset_closure_in_z2_cubed() {
        let cat = samples::maltsev_catalog(&["Z2"]);
        let z2 = cat.find("Z2").unwrap();
        let ctx = Context::new(vec![z2, z2, z2]);
        let gens = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
        let c = subalgebra_closure(&cat, &ctx, &gens, &ClosureOpts::default()).unwrap();
        let mut got: Vec<Tuple> = c.elems.clone();
        got.sort();
        assert_eq!(
            got,
            vec![vec![0, 0, 1], vec![0, 1, 0], vec![1, 0, 0], vec![1, 1, 1]]
        );
    }

    #[test]
    fn singleton_closure_of_idempotent_generator() {
        let cat = samples::maltsev_catalog(&["Z2"]);
        let z2 = cat.find("Z2").unwrap();
        let ctx = Context::new(vec![z2, z2]);
        let c = subalgebra_closure(&cat, &ctx, &[vec![0, 0]], &ClosureOpts::default()).unwrap();
        assert_eq!(c.elems, vec![vec![0, 0]]);
    }

    #[test]
    fn diagonal_closure_in_z4_squared() {
        let cat = samples::maltsev_catalog(&["Z4"]);
        let z4 = cat.find("Z4").unwrap();
        let ctx = Context::new(vec![z4, z4]);
        let gens = vec![vec![0, 0], vec![1, 1]];
        let c = subalgebra_closure(&cat, &ctx, &gens, &ClosureOpts::default()).unwrap();
        let mut got = c.elems.clone();
        got.sort();
        assert_eq!(
            got,
            vec![vec![0, 0], vec![1, 1], vec![2, 2], vec![3, 3]]
        );
    }

    #[test]
    fn heap_and_generic_paths_agree() {
        let cat = samples::maltsev_catalog(&["S3"]);
        let s3 = cat.find("S3").unwrap();
        let ctx = Context::new(vec![s3, s3, s3]);
        let gens = vec![vec![1, 0, 3], vec![0, 2, 2], vec![5, 5, 0]];
        let fast = subalgebra_closure(&cat, &ctx, &gens, &ClosureOpts::default()).unwrap();
        let slow = subalgebra_closure(
            &cat,
            &ctx,
            &gens,
            &ClosureOpts {
                force_generic: true,
                ..Default::default()
            },
        )
        .unwrap();
        let mut a: Vec<_> = fast.elems.clone();
        let mut b: Vec<_> = slow.elems.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_generator_set_is_rejected() {
        let cat = samples::maltsev_catalog(&["Z2"]);
        let z2 = cat.find("Z2").unwrap();
        let ctx = Context::new(vec![z2]);
        assert!(subalgebra_closure(&cat, &ctx, &[], &ClosureOpts::default()).is_err());
    }

    #[test]
    fn quotient_of_z4_by_mod2_is_z2() {
        let cat = samples::maltsev_catalog(&["Z4", "Z2"]);
        let z4 = cat.find("Z4").unwrap();
        let theta = Congruence::from_blocks(4, &[vec![0, 2], vec![1, 3]]);
        let (q, proj) = quotient_algebra(&cat.signature, cat.alg(z4), &theta).unwrap();
        assert_eq!(q.size, 2);
        assert_eq!(proj, vec![0, 1, 0, 1]);
        let z2 = cat.find("Z2").unwrap();
        assert!(find_isomorphism(&cat.signature, &q, cat.alg(z2)).is_some());
    }

    #[test]
    fn quotient_by_identity_and_full() {
        let cat = samples::maltsev_catalog(&["Z4"]);
        let z4 = cat.find("Z4").unwrap();
        let id = Congruence::identity(4);
        let (q, _) = quotient_algebra(&cat.signature, cat.alg(z4), &id).unwrap();
        assert_eq!(q.size, 4);
        assert!(find_isomorphism(&cat.signature, &q, cat.alg(z4)).is_some());
        let full = Congruence::full(4);
        let (q1, _) = quotient_algebra(&cat.signature, cat.alg(z4), &full).unwrap();
        assert_eq!(q1.size, 1);
    }

    #[test]
    fn quotient_rejects_non_congruence() {
        let cat = samples::maltsev_catalog(&["Z4"]);
        let z4 = cat.find("Z4").unwrap();
        let bad = Congruence::from_blocks(4, &[vec![0, 1], vec![2], vec![3]]);
        assert!(quotient_algebra(&cat.signature, cat.alg(z4), &bad).is_err());
    }

    #[test]
    fn hs_catalog_of_z2() {
        let mut cat = samples::maltsev_catalog(&["Z2"]);
        cat.ensure_hs().unwrap();
        let sizes: Vec<usize> = cat
            .hs_entries()
            .unwrap()
            .iter()
            .map(|e| cat.alg(e.alg).size)
            .collect();
        // Z2 itself and the one-element algebra, up to isomorphism.
        let mut sorted = sizes.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 2]);
    }

    #[test]
    fn hs_catalog_of_z4_contains_z2_quotient() {
        let mut cat = samples::maltsev_catalog(&["Z4"]);
        cat.ensure_hs().unwrap();
        let mut sizes: Vec<usize> = cat
            .hs_entries()
            .unwrap()
            .iter()
            .map(|e| cat.alg(e.alg).size)
            .collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 2, 4]);
    }

    #[test]
    fn hs_catalog_of_trivial_algebra() {
        let mut cat = samples::trivial_catalog();
        cat.ensure_hs().unwrap();
        assert_eq!(cat.hs_entries().unwrap().len(), 1);
    }

    #[test]
    fn closure_idempotent_and_monotone() {
        let cat = samples::maltsev_catalog(&["Z3"]);
        let z3 = cat.find("Z3").unwrap();
        let ctx = Context::new(vec![z3, z3]);
        let g = vec![vec![1, 2], vec![0, 1]];
        let c1 = subalgebra_closure(&cat, &ctx, &g, &ClosureOpts::default()).unwrap();
        let c2 = subalgebra_closure(&cat, &ctx, &c1.elems, &ClosureOpts::default()).unwrap();
        let mut a = c1.elems.clone();
        let mut b = c2.elems.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        let bigger = vec![vec![1, 2], vec![0, 1], vec![2, 2]];
        let c3 = subalgebra_closure(&cat, &ctx, &bigger, &ClosureOpts::default()).unwrap();
        assert!(c1.elems.iter().all(|t| c3.contains(t)));
    }
}
