//! Hash-consed term circuits over a signature, parallelogram-identity
//! verification, the derived terms s, p, x^y and the iterates of s, and the
//! t_n / T_n circuit families with their gate-count bounds.
//!
//! A circuit is a DAG of gates over node ids: ids `0..inputs-1` are the
//! inputs, and gate `k` has id `inputs + k`. No two gates share the same
//! (symbol, operands) pair.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::algebra::{AlgId, Catalog, Context, Elem, FiniteAlgebra, Tuple};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Gate {
    pub sym: usize,
    pub args: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Circuit {
    pub inputs: usize,
    pub gates: Vec<Gate>,
    pub outputs: Vec<u32>,
}

impl Circuit {
    /// Number of gates (circuit size in the sense used for all bounds; inputs
    /// are free).
    pub fn size(&self) -> usize {
        self.gates.len()
    }

    pub fn output(&self) -> u32 {
        self.outputs[0]
    }

    /// The identity circuit on input `i` of `inputs`.
    pub fn identity(inputs: usize, i: usize) -> Circuit {
        Circuit {
            inputs,
            gates: Vec::new(),
            outputs: vec![i as u32],
        }
    }

    pub fn eval<T: Ops + ?Sized>(&self, ops: &T, args: &[Elem]) -> Result<Elem> {
        Ok(self.eval_all(ops, args)?[0])
    }

    pub fn eval_all<T: Ops + ?Sized>(&self, ops: &T, args: &[Elem]) -> Result<Vec<Elem>> {
        if args.len() != self.inputs {
            return Err(Error::ArityMismatch {
                expected: self.inputs,
                got: args.len(),
            });
        }
        let mut vals = Vec::with_capacity(self.inputs + self.gates.len());
        vals.extend_from_slice(args);
        let mut buf = [0 as Elem; 16];
        for g in &self.gates {
            for (j, &a) in g.args.iter().enumerate() {
                buf[j] = vals[a as usize];
            }
            vals.push(ops.apply_op(g.sym, &buf[..g.args.len()]));
        }
        Ok(self.outputs.iter().map(|&o| vals[o as usize]).collect())
    }
}

/// Anything that can interpret gate symbols: a finite algebra interprets its
/// own signature, a `PTable` interprets the single symbol of a P-circuit.
pub trait Ops {
    fn apply_op(&self, sym: usize, args: &[Elem]) -> Elem;
}

impl Ops for FiniteAlgebra {
    #[inline]
    fn apply_op(&self, sym: usize, args: &[Elem]) -> Elem {
        self.apply(sym, args)
    }
}

/// The table of the parallelogram term on one algebra; interprets the single
/// gate symbol of a P-circuit.
pub struct PTable {
    pub size: usize,
    pub arity: usize,
    pub table: Arc<Vec<Elem>>,
}

impl Ops for PTable {
    #[inline]
    fn apply_op(&self, _sym: usize, args: &[Elem]) -> Elem {
        let mut idx = 0usize;
        for &a in args {
            idx = idx * self.size + a as usize;
        }
        self.table[idx]
    }
}

/// Coordinatewise evaluation of an F-circuit on product tuples.
pub fn eval_circuit_product(
    cat: &Catalog,
    ctx: &Context,
    circ: &Circuit,
    args: &[&Tuple],
) -> Result<Tuple> {
    if args.len() != circ.inputs {
        return Err(Error::ArityMismatch {
            expected: circ.inputs,
            got: args.len(),
        });
    }
    let mut out = Vec::with_capacity(ctx.len());
    let mut scalar = vec![0 as Elem; circ.inputs];
    for (i, &f) in ctx.factors.iter().enumerate() {
        for (j, a) in args.iter().enumerate() {
            scalar[j] = a[i];
        }
        out.push(circ.eval(cat.alg(f), &scalar)?);
    }
    Ok(out)
}

/// Hash-consing circuit builder: identical (symbol, operands) pairs always
/// return the same gate id.
pub struct CircuitBuilder {
    inputs: usize,
    arities: Vec<usize>,
    gates: Vec<Gate>,
    memo: HashMap<Gate, u32>,
}

impl CircuitBuilder {
    pub fn new(inputs: usize, arities: Vec<usize>) -> Self {
        CircuitBuilder {
            inputs,
            arities,
            gates: Vec::new(),
            memo: HashMap::new(),
        }
    }

    /// Builder for P-circuits: one symbol of the given arity.
    pub fn single(inputs: usize, arity: usize) -> Self {
        CircuitBuilder::new(inputs, vec![arity])
    }

    pub fn input(&self, i: usize) -> u32 {
        debug_assert!(i < self.inputs);
        i as u32
    }

    pub fn app(&mut self, sym: usize, args: &[u32]) -> u32 {
        debug_assert_eq!(self.arities[sym], args.len());
        let gate = Gate {
            sym,
            args: args.to_vec(),
        };
        if let Some(&id) = self.memo.get(&gate) {
            return id;
        }
        let id = (self.inputs + self.gates.len()) as u32;
        self.memo.insert(gate.clone(), id);
        self.gates.push(gate);
        id
    }

    /// Splices another circuit in, with its inputs bound to the given ids.
    /// Returns the ids of its outputs.
    pub fn inline(&mut self, circ: &Circuit, bound: &[u32]) -> Vec<u32> {
        assert_eq!(bound.len(), circ.inputs);
        let mut map: Vec<u32> = bound.to_vec();
        for g in &circ.gates {
            let args: Vec<u32> = g.args.iter().map(|&a| map[a as usize]).collect();
            map.push(self.app(g.sym, &args));
        }
        circ.outputs.iter().map(|&o| map[o as usize]).collect()
    }

    pub fn finish(self, outputs: Vec<u32>) -> Circuit {
        Circuit {
            inputs: self.inputs,
            gates: self.gates,
            outputs,
        }
    }

    /// Finishes keeping only gates reachable from the outputs.
    pub fn finish_pruned(self, outputs: Vec<u32>) -> Circuit {
        self.prune(&outputs)
    }

    /// Extracts the subcircuit rooted at one gate without consuming the
    /// builder.
    pub fn clone_pruned(&self, output: u32) -> Circuit {
        self.prune(&[output])
    }

    fn prune(&self, outputs: &[u32]) -> Circuit {
        let n = self.inputs;
        let mut live = vec![false; n + self.gates.len()];
        let mut stack: Vec<u32> = outputs.to_vec();
        while let Some(id) = stack.pop() {
            if live[id as usize] {
                continue;
            }
            live[id as usize] = true;
            if id as usize >= n {
                for &a in &self.gates[id as usize - n].args {
                    stack.push(a);
                }
            }
        }
        let mut remap = vec![u32::MAX; n + self.gates.len()];
        for i in 0..n {
            remap[i] = i as u32;
        }
        let mut gates = Vec::new();
        for (k, g) in self.gates.iter().enumerate() {
            if live[n + k] {
                let args: Vec<u32> = g.args.iter().map(|&a| remap[a as usize]).collect();
                remap[n + k] = (n + gates.len()) as u32;
                gates.push(Gate { sym: g.sym, args });
            }
        }
        Circuit {
            inputs: n,
            gates,
            outputs: outputs.iter().map(|&o| remap[o as usize]).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Parallelogram identities

pub struct ParallelogramFailure {
    pub algebra: String,
    pub row: usize,
    pub x: Elem,
    pub y: Elem,
    pub z: Elem,
}

/// Checks all `m + n` rows of the (m,n)-parallelogram identity on every base
/// algebra, exhaustively over (x, y, z).
pub fn verify_parallelogram(cat: &Catalog, p: &Circuit, m: usize, n: usize) -> Result<bool> {
    Ok(verify_parallelogram_detailed(cat, p, m, n)?.is_none())
}

pub fn verify_parallelogram_detailed(
    cat: &Catalog,
    p: &Circuit,
    m: usize,
    n: usize,
) -> Result<Option<ParallelogramFailure>> {
    let d = m + n;
    if m == 0 || n == 0 {
        return Err(Error::InputContract("need m, n >= 1".into()));
    }
    if p.inputs != d + 3 {
        return Err(Error::ArityMismatch {
            expected: d + 3,
            got: p.inputs,
        });
    }
    let mut args = vec![0 as Elem; d + 3];
    for &aid in cat.base() {
        let alg = cat.alg(aid);
        let sz = alg.size as Elem;
        for row in 0..d {
            for x in 0..sz {
                for y in 0..sz {
                    for z in 0..sz {
                        if row < m {
                            args[0] = x;
                            args[1] = x;
                            args[2] = y;
                        } else {
                            args[0] = y;
                            args[1] = x;
                            args[2] = x;
                        }
                        for t in 0..d {
                            args[3 + t] = if t == row { z } else { y };
                        }
                        if p.eval(alg, &args)? != y {
                            return Ok(Some(ParallelogramFailure {
                                algebra: alg.name.clone(),
                                row,
                                x,
                                y,
                                z,
                            }));
                        }
                    }
                }
            }
        }
    }
    Ok(None)
}

// ---------------------------------------------------------------------------
// Derived terms

/// The configured cube machinery of a catalog: the (1,d-1)-parallelogram
/// term P and the terms derived from it.
pub struct TermKit {
    pub d: usize,
    pub e: usize,
    /// P as an F-circuit with d+3 inputs.
    pub p_term: Circuit,
    /// s(x_1..x_d) = P(x_1,x_2,x_2,x_1,x_2..x_d), as an F-circuit.
    pub s: Circuit,
    /// p(x,u,y) = P(x,u,y,x,y..y), as an F-circuit.
    pub p: Circuit,
    /// x^y = p(x,y,y), as an F-circuit.
    pub xy: Circuit,
    /// Difference term, found on demand by `find_difference_term`.
    pub diff: Mutex<Option<Arc<Circuit>>>,
    arities: Vec<usize>,
    p_tables: Mutex<HashMap<AlgId, Arc<Vec<Elem>>>>,
}

impl TermKit {
    /// Table of P on one algebra, for interpreting P-circuits.
    pub fn p_table(&self, cat: &Catalog, alg: AlgId) -> PTable {
        let mut cache = self.p_tables.lock().unwrap();
        let table = cache
            .entry(alg)
            .or_insert_with(|| {
                let a = cat.alg(alg);
                let r = self.d + 3;
                let total = a.size.pow(r as u32);
                let mut t = Vec::with_capacity(total);
                let mut args = vec![0 as Elem; r];
                for idx in 0..total {
                    let mut rem = idx;
                    for j in (0..r).rev() {
                        args[j] = (rem % a.size) as Elem;
                        rem /= a.size;
                    }
                    t.push(self.p_term.eval(a, &args).expect("arity checked"));
                }
                Arc::new(t)
            })
            .clone();
        PTable {
            size: cat.alg(alg).size,
            arity: self.d + 3,
            table,
        }
    }

    /// Coordinatewise evaluation of a P-circuit on product tuples.
    pub fn eval_p_product(
        &self,
        cat: &Catalog,
        ctx: &Context,
        circ: &Circuit,
        args: &[&Tuple],
    ) -> Result<Tuple> {
        self.eval_p_product_all(cat, ctx, circ, args)
            .map(|mut v| v.pop().unwrap())
    }

    pub fn eval_p_product_all(
        &self,
        cat: &Catalog,
        ctx: &Context,
        circ: &Circuit,
        args: &[&Tuple],
    ) -> Result<Vec<Tuple>> {
        if args.len() != circ.inputs {
            return Err(Error::ArityMismatch {
                expected: circ.inputs,
                got: args.len(),
            });
        }
        let mut outs = vec![vec![0 as Elem; ctx.len()]; circ.outputs.len()];
        let mut scalar = vec![0 as Elem; circ.inputs];
        for (i, &f) in ctx.factors.iter().enumerate() {
            let table = self.p_table(cat, f);
            for (j, a) in args.iter().enumerate() {
                scalar[j] = a[i];
            }
            for (o, v) in circ.eval_all(&table, &scalar)?.into_iter().enumerate() {
                outs[o][i] = v;
            }
        }
        Ok(outs)
    }

    /// x^y on one algebra, as a binary table lookup.
    pub fn xy_apply(&self, cat: &Catalog, alg: AlgId, x: Elem, y: Elem) -> Elem {
        self.xy.eval(cat.alg(alg), &[x, y]).expect("binary")
    }

    /// x^{y^e}: e-fold application of x^y in the first argument.
    pub fn xy_pow(&self, cat: &Catalog, alg: AlgId, x: Elem, y: Elem, e: usize) -> Elem {
        let mut v = x;
        for _ in 0..e {
            v = self.xy_apply(cat, alg, v, y);
        }
        v
    }

    /// p(x,u,y) applied coordinatewise to tuples.
    pub fn p_apply(&self, cat: &Catalog, ctx: &Context, x: &Tuple, u: &Tuple, y: &Tuple) -> Tuple {
        let mut out = Vec::with_capacity(ctx.len());
        for (i, &f) in ctx.factors.iter().enumerate() {
            out.push(self.p.eval(cat.alg(f), &[x[i], u[i], y[i]]).expect("ternary"));
        }
        out
    }

    /// The l-th iterate of s in its first variable, as an F-circuit.
    pub fn s_pow(&self, l: usize) -> Circuit {
        let d = self.d;
        let mut b = CircuitBuilder::new(d, self.arities.clone());
        let mut cur = b.input(0);
        for _ in 0..l {
            let mut bound = vec![cur];
            for j in 1..d {
                bound.push(b.input(j));
            }
            cur = b.inline(&self.s, &bound)[0];
        }
        b.finish(vec![cur])
    }
}

/// Derives s, p, and x^y from a verified (1,d-1)-parallelogram term, checking
/// the p/s identity suite on every base algebra.
pub fn derive_auxiliary(cat: &Catalog, p_term: &Circuit) -> Result<TermKit> {
    let d = p_term
        .inputs
        .checked_sub(3)
        .filter(|&d| d >= 2)
        .ok_or_else(|| Error::InputContract("P needs at least 5 inputs".into()))?;
    if !verify_parallelogram(cat, p_term, 1, d - 1)? {
        return Err(Error::IdentityFailed(
            "P is not a (1,d-1)-parallelogram term for this catalog".into(),
        ));
    }
    let arities: Vec<usize> = cat.signature.symbols().iter().map(|(_, a)| *a).collect();

    // s(x_1..x_d) = P(x_1, x_2, x_2, x_1, x_2, .., x_d)
    let s = {
        let mut b = CircuitBuilder::new(d, arities.clone());
        let mut bound = vec![b.input(0), b.input(1), b.input(1), b.input(0)];
        for j in 1..d {
            bound.push(b.input(j));
        }
        let out = b.inline(p_term, &bound)[0];
        b.finish(vec![out])
    };
    // p(x,u,y) = P(x, u, y, x, y, .., y)
    let p = {
        let mut b = CircuitBuilder::new(3, arities.clone());
        let mut bound = vec![b.input(0), b.input(1), b.input(2), b.input(0)];
        for _ in 1..d {
            bound.push(b.input(2));
        }
        let out = b.inline(p_term, &bound)[0];
        b.finish(vec![out])
    };
    // x^y = p(x,y,y)
    let xy = {
        let mut b = CircuitBuilder::new(2, arities.clone());
        let bound = vec![b.input(0), b.input(1), b.input(1)];
        let out = b.inline(&p, &bound)[0];
        b.finish(vec![out])
    };

    let kit = TermKit {
        d,
        e: 1,
        p_term: p_term.clone(),
        s,
        p,
        xy,
        diff: Mutex::new(None),
        arities,
        p_tables: Mutex::new(HashMap::new()),
    };
    verify_derived_identities(cat, &kit)?;
    Ok(kit)
}

/// The identity suite for the derived terms: p(x,x,y) = y,
/// p(x,y,y) = s(x,y,..,y), and s(y,..,x,..,y) = y for x in any position >= 2.
fn verify_derived_identities(cat: &Catalog, kit: &TermKit) -> Result<()> {
    let d = kit.d;
    for &aid in cat.base() {
        let alg = cat.alg(aid);
        let sz = alg.size as Elem;
        for x in 0..sz {
            for y in 0..sz {
                if kit.p.eval(alg, &[x, x, y])? != y {
                    return Err(Error::IdentityFailed(format!(
                        "p(x,x,y)=y fails in `{}` at x={x}, y={y}",
                        alg.name
                    )));
                }
                let mut sargs = vec![y; d];
                sargs[0] = x;
                if kit.p.eval(alg, &[x, y, y])? != kit.s.eval(alg, &sargs)? {
                    return Err(Error::IdentityFailed(format!(
                        "p(x,y,y)=s(x,y,..,y) fails in `{}` at x={x}, y={y}",
                        alg.name
                    )));
                }
                for pos in 1..d {
                    let mut args = vec![y; d];
                    args[pos] = x;
                    if kit.s.eval(alg, &args)? != y {
                        return Err(Error::IdentityFailed(format!(
                            "s(y,..,x,..,y)=y fails in `{}` at position {pos}, x={x}, y={y}",
                            alg.name
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Least e >= 1 with (x^{y^e})^{y^e} = x^{y^e} in every base algebra.
pub fn find_fork_exponent(cat: &Catalog, kit: &TermKit) -> Result<usize> {
    let a_k = cat.max_size();
    let cap = (a_k * a_k).max(1);
    'outer: for e in 1..=cap {
        for &aid in cat.base() {
            let alg = cat.alg(aid);
            let sz = alg.size as Elem;
            for x in 0..sz {
                for y in 0..sz {
                    let v = kit.xy_pow(cat, aid, x, y, e);
                    if kit.xy_pow(cat, aid, v, y, e) != v {
                        continue 'outer;
                    }
                }
            }
        }
        return Ok(e);
    }
    Err(Error::Cap {
        what: "fork exponent search".into(),
        cap,
    })
}

/// Verifies P, derives the auxiliary terms, and fixes the fork exponent,
/// storing the kit in the catalog.
pub fn configure_terms(cat: &mut Catalog, p_term: Circuit) -> Result<()> {
    let mut kit = derive_auxiliary(cat, &p_term)?;
    kit.e = find_fork_exponent(cat, &kit)?;
    cat.terms = Some(kit);
    Ok(())
}

// ---------------------------------------------------------------------------
// The t_n and T_n circuit families

/// All (d-1)-element subsets of 0..n in lexicographic order.
pub fn subsets_lex(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for v in start..n {
            cur.push(v);
            rec(n, k, v + 1, cur, out);
            cur.pop();
        }
    }
    rec(n, k, 0, &mut cur, &mut out);
    out
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r = 1usize;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

struct TnBuilder<'a> {
    b: &'a mut CircuitBuilder,
    d: usize,
    e: usize,
    memo: HashMap<(usize, Vec<usize>), u32>,
}

impl<'a> TnBuilder<'a> {
    /// s(q_1..q_d) as a single P-gate: P(q1, q2, q2, q1, q2, .., qd).
    fn s_gate(&mut self, q: &[u32]) -> u32 {
        let mut args = vec![q[0], q[1], q[1], q[0]];
        args.extend_from_slice(&q[1..]);
        self.b.app(0, &args)
    }

    /// p(a,u,c) as a single P-gate: P(a, u, c, a, c, .., c).
    fn p_gate(&mut self, a: u32, u: u32, c: u32) -> u32 {
        let mut args = vec![a, u, c, a];
        for _ in 1..self.d {
            args.push(c);
        }
        self.b.app(0, &args)
    }

    /// t_{l,V'} for prefix length `l` and V' a (d-1)-subset of 0..l; the
    /// terminal level `n` maps straight to the w_{V'} input.
    fn node(
        &mut self,
        n: usize,
        l: usize,
        vprime: &[usize],
        x: u32,
        y: u32,
        z: u32,
        w: &dyn Fn(&[usize]) -> u32,
    ) -> u32 {
        if l == n {
            return w(vprime);
        }
        let key = (l, vprime.to_vec());
        if let Some(&id) = self.memo.get(&key) {
            return id;
        }
        let dm1 = self.d - 1;
        let mut children = Vec::with_capacity(dm1);
        for j in 0..dm1 {
            let mut vj: Vec<usize> = vprime
                .iter()
                .enumerate()
                .filter(|&(t, _)| t != j)
                .map(|(_, &v)| v)
                .collect();
            vj.push(l);
            vj.sort_unstable();
            children.push(self.node(n, l + 1, &vj, x, y, z, w));
        }
        // s^{e+1}(x, D_1, .., D_{d-1})
        let mut acc = x;
        for _ in 0..=self.e {
            let mut q = vec![acc];
            q.extend_from_slice(&children);
            acc = self.s_gate(&q);
        }
        let pb = self.p_gate(y, z, children[0]);
        let mut args = vec![acc, pb, children[0], x];
        args.extend_from_slice(&children);
        let id = self.b.app(0, &args);
        self.memo.insert(key, id);
        id
    }
}

/// The P-circuit t_n(x, y, z, (w_I)) with inputs ordered x, y, z, then w_I
/// for I in lexicographic order over (d-1)-subsets of 0..n. Gate count is at
/// most (e+3) * C(n,d).
pub fn build_tn(n: usize, d: usize, e: usize) -> Result<Circuit> {
    if d < 2 || n < d || e < 1 {
        return Err(Error::InputContract(format!(
            "build_tn needs n >= d >= 2 and e >= 1, got n={n}, d={d}, e={e}"
        )));
    }
    let subsets = subsets_lex(n, d - 1);
    let rank: HashMap<Vec<usize>, usize> = subsets
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    let mut b = CircuitBuilder::single(3 + subsets.len(), d + 3);
    let (x, y, z) = (b.input(0), b.input(1), b.input(2));
    let out = {
        let mut tb = TnBuilder {
            b: &mut b,
            d,
            e,
            memo: HashMap::new(),
        };
        let base: Vec<usize> = (0..d - 1).collect();
        let w = |i: &[usize]| (3 + rank[i]) as u32;
        tb.node(n, d - 1, &base, x, y, z, &w)
    };
    Ok(b.finish(vec![out]))
}

/// The P-circuit T_n with inputs u^(d), uhat^(d), .., u^(n), uhat^(n) (fork
/// witness pairs per prefix length) followed by the w_I inputs. Evaluating it
/// on the designated witnesses reproduces the chain b^(d-1), b^(d), .., b^(n)
/// of Algorithm 1: level m applies t_m as t_m(T_{m-1}, uhat^(m), u^(m), w).
pub fn build_big_tn(n: usize, d: usize, e: usize) -> Result<Circuit> {
    build_big_tn_inner(n, d, e, false)
}

/// The expanded variant: one extra input b, and one extra P-gate per level
/// computing p(b^(m-1), b, b). Outputs are the main output followed by the
/// per-level p-gates.
pub fn build_big_tn_plus(n: usize, d: usize, e: usize) -> Result<Circuit> {
    build_big_tn_inner(n, d, e, true)
}

fn build_big_tn_inner(n: usize, d: usize, e: usize, plus: bool) -> Result<Circuit> {
    if d < 2 || n + 1 < d || e < 1 {
        return Err(Error::InputContract(format!(
            "build_big_tn needs n >= d-1 >= 1 and e >= 1, got n={n}, d={d}, e={e}"
        )));
    }
    let pairs = if n >= d { n - d + 1 } else { 0 };
    let subsets = subsets_lex(n, d - 1);
    let rank: HashMap<Vec<usize>, usize> = subsets
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    let winputs = subsets.len();
    let total = 2 * pairs + winputs + if plus { 1 } else { 0 };
    let mut b = CircuitBuilder::single(total, d + 3);
    let w_base = 2 * pairs;
    let b_input = if plus { Some((total - 1) as u32) } else { None };
    // T_{d-1} is the w input for the first d-1 coordinates
    let first: Vec<usize> = (0..d - 1).collect();
    let mut cur = (w_base + rank[&first]) as u32;
    let mut extra = Vec::new();
    for m in d..=n {
        let u = (2 * (m - d)) as u32;
        let uhat = u + 1;
        if let Some(bi) = b_input {
            let mut tb = TnBuilder {
                b: &mut b,
                d,
                e,
                memo: HashMap::new(),
            };
            extra.push(tb.p_gate(cur, bi, bi));
        }
        let mut tb = TnBuilder {
            b: &mut b,
            d,
            e,
            memo: HashMap::new(),
        };
        let base: Vec<usize> = (0..d - 1).collect();
        let w = |i: &[usize]| (w_base + rank[i]) as u32;
        cur = tb.node(m, d - 1, &base, cur, uhat, u, &w);
    }
    let mut outputs = vec![cur];
    outputs.extend(extra);
    Ok(b.finish(outputs))
}

// ---------------------------------------------------------------------------
// Desk-scale parallelogram-term search

/// Searches for a (1,d-1)-parallelogram term for one algebra by generating
/// the subpower of A^(d*|A|^3) spanned by the argument-pattern projections
/// and testing for the all-y target. `Ok(None)` means the closure exhausted
/// without the target, so no such term exists for this algebra.
pub fn search_parallelogram_term(
    cat: &Catalog,
    alg: AlgId,
    d: usize,
    cap: usize,
) -> Result<Option<Circuit>> {
    search_parallelogram_term_joint(cat, &[alg], d, cap)
}

/// Joint search over every base algebra of the catalog: a single term whose
/// identities hold everywhere.
pub fn search_parallelogram_term_catalog(
    cat: &Catalog,
    d: usize,
    cap: usize,
) -> Result<Option<Circuit>> {
    search_parallelogram_term_joint(cat, cat.base(), d, cap)
}

fn search_parallelogram_term_joint(
    cat: &Catalog,
    algs: &[AlgId],
    d: usize,
    cap: usize,
) -> Result<Option<Circuit>> {
    if d < 2 {
        return Err(Error::InputContract("need d >= 2".into()));
    }
    let mut factors = Vec::new();
    let mut layouts = Vec::new(); // (offset, size) per algebra
    for &aid in algs {
        let sz = cat.alg(aid).size;
        layouts.push((factors.len(), sz));
        factors.extend(std::iter::repeat(aid).take(d * sz * sz * sz));
    }
    let coords = factors.len();
    if coords > 8192 {
        return Err(Error::Undecided(format!(
            "search context has {coords} coordinates"
        )));
    }
    let ctx = Context::new(factors);
    let mut gens: Vec<Tuple> = vec![vec![0 as Elem; coords]; d + 3];
    let mut target = vec![0 as Elem; coords];
    for &(off, sz) in &layouts {
        let coord =
            |row: usize, x: usize, y: usize, z: usize| off + ((row * sz + x) * sz + y) * sz + z;
        for row in 0..d {
            for x in 0..sz {
                for y in 0..sz {
                    for z in 0..sz {
                        let c = coord(row, x, y, z);
                        target[c] = y as Elem;
                        for (j, g) in gens.iter_mut().enumerate() {
                            g[c] = match j {
                                0 => {
                                    if row < 1 {
                                        x as Elem
                                    } else {
                                        y as Elem
                                    }
                                }
                                1 => x as Elem,
                                2 => {
                                    if row < 1 {
                                        y as Elem
                                    } else {
                                        x as Elem
                                    }
                                }
                                t => {
                                    if t - 3 == row {
                                        z as Elem
                                    } else {
                                        y as Elem
                                    }
                                }
                            };
                        }
                    }
                }
            }
        }
    }
    let opts = crate::algebra::ClosureOpts {
        cap,
        provenance: true,
        force_generic: true,
        target: Some(target.clone()),
    };
    let closure = match crate::algebra::subalgebra_closure(cat, &ctx, &gens, &opts) {
        Ok(c) => c,
        Err(Error::ClosureCap(c)) => {
            return Err(Error::Undecided(format!("closure cap {c} reached")))
        }
        Err(e) => return Err(e),
    };
    let Some(&hit) = closure.index.get(&target) else {
        return Ok(None);
    };
    let prov = closure.prov.as_ref().expect("provenance requested");
    let arities: Vec<usize> = cat.signature.symbols().iter().map(|(_, a)| *a).collect();
    let mut b = CircuitBuilder::new(d + 3, arities);
    let mut map: HashMap<u32, u32> = HashMap::new();
    let root = build_from_prov(&mut b, prov, hit, &mut map);
    Ok(Some(b.finish_pruned(vec![root])))
}

/// Rebuilds a circuit from closure provenance: generator entries become
/// inputs, operation applications become gates.
pub fn build_from_prov(
    b: &mut CircuitBuilder,
    prov: &[crate::algebra::Prov],
    id: u32,
    map: &mut HashMap<u32, u32>,
) -> u32 {
    if let Some(&g) = map.get(&id) {
        return g;
    }
    let g = match &prov[id as usize] {
        crate::algebra::Prov::Gen(j) => b.input(*j),
        crate::algebra::Prov::App(sym, args) => {
            let ids: Vec<u32> = args
                .iter()
                .map(|&a| build_from_prov(b, prov, a, map))
                .collect();
            b.app(*sym, &ids)
        }
    };
    map.insert(id, g);
    g
}

// ---------------------------------------------------------------------------
// Term files

#[derive(Serialize, Deserialize)]
struct TermGate {
    op: String,
    args: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct TermFile {
    inputs: usize,
    gates: Vec<TermGate>,
    output: u32,
}

/// Parses the JSON term-file format against a signature. Gate ids number the
/// inputs 0..inputs-1 and then the gates in order.
pub fn parse_term(sig: &crate::algebra::Signature, text: &str) -> Result<Circuit> {
    let file: TermFile = serde_json::from_str(text)?;
    let mut gates = Vec::with_capacity(file.gates.len());
    for (k, g) in file.gates.iter().enumerate() {
        let sym = sig
            .find(&g.op)
            .ok_or_else(|| Error::UnknownSymbol(g.op.clone()))?;
        if g.args.len() != sig.arity(sym) {
            return Err(Error::ArityMismatch {
                expected: sig.arity(sym),
                got: g.args.len(),
            });
        }
        let limit = (file.inputs + k) as u32;
        if g.args.iter().any(|&a| a >= limit) {
            return Err(Error::Parse(format!("gate {k} references a later node")));
        }
        gates.push(Gate {
            sym,
            args: g.args.clone(),
        });
    }
    let total = (file.inputs + gates.len()) as u32;
    if file.output >= total {
        return Err(Error::Parse("output id out of range".into()));
    }
    Ok(Circuit {
        inputs: file.inputs,
        gates,
        outputs: vec![file.output],
    })
}

pub fn term_to_json(sig: &crate::algebra::Signature, circ: &Circuit) -> Result<String> {
    let file = TermFile {
        inputs: circ.inputs,
        gates: circ
            .gates
            .iter()
            .map(|g| TermGate {
                op: sig.name(g.sym).to_string(),
                args: g.args.clone(),
            })
            .collect(),
        output: circ.output(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}
