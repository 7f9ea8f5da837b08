//! Command-line surface: congruence/commutator analysis reports, term
//! verification, SMP solving with optional witness circuits, compact
//! representation construction, and the benchmark harness contrasting the
//! polynomial paths with the brute-force oracle.
//!
//! Exit codes: 0 for YES/pass, 1 for NO/fail, 2 for errors, so shell
//! pipelines can consume verdicts directly.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use subpower_core::algebra::{load_catalog, Catalog, Context};
use subpower_core::circuit::{
    configure_terms, parse_term, search_parallelogram_term_catalog, term_to_json,
    verify_parallelogram_detailed,
};
use subpower_core::congruence::{
    check_residual_smallness, congruence_lattice, meet_irreducibles, si_profile,
};
use subpower_core::error::{Error, Result};
use subpower_core::rep::{compact_rep_direct, compact_rep_via_smp, rep_to_json, CompactOpts};
use subpower_core::solver::{
    parse_instance_str, resolve_instance, smp_brute, solve, Method, ResolvedInstance,
};

#[derive(Parser)]
#[command(name = "subpower", version, about = "Subpower membership toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Congruence lattices, irreducibles, SI profiles, similarity, and the
    /// residual-smallness verdict, as a JSON report.
    Analyze {
        #[arg(long)]
        algebras: PathBuf,
        /// Restrict the per-algebra section to one algebra.
        #[arg(long)]
        algebra: Option<String>,
    },
    /// Check a term file against the parallelogram identities.
    VerifyTerm {
        #[arg(long)]
        algebras: PathBuf,
        #[arg(long)]
        term: PathBuf,
        #[arg(long, value_enum, default_value = "parallelogram")]
        role: Role,
        #[arg(long)]
        rows_upper: usize,
        #[arg(long)]
        rows_lower: usize,
    },
    /// Decide a subpower membership instance.
    Smp {
        #[arg(long)]
        algebras: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value = "auto")]
        method: String,
        /// Write a witness circuit here on YES answers.
        #[arg(long)]
        witness: Option<PathBuf>,
        /// Parallelogram term file; searched for when omitted.
        #[arg(long)]
        term: Option<PathBuf>,
    },
    /// Compute a standardized representation for the generated subpower.
    CompactRep {
        #[arg(long)]
        algebras: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum, default_value = "direct")]
        method: RepMethod,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        term: Option<PathBuf>,
    },
    /// Timing table (CSV) for a family of instances across methods.
    Bench {
        #[arg(long)]
        algebras: PathBuf,
        #[arg(long, value_enum)]
        family: Family,
        #[arg(long)]
        n_max: usize,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(long)]
        term: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Parallelogram,
}

#[derive(Clone, Copy, ValueEnum)]
enum RepMethod {
    Direct,
    ViaSmp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Coset,
    Random,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<u8> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Analyze { algebras, algebra } => cmd_analyze(&algebras, algebra.as_deref()),
        Cmd::VerifyTerm {
            algebras,
            term,
            role: _,
            rows_upper,
            rows_lower,
        } => cmd_verify_term(&algebras, &term, rows_upper, rows_lower),
        Cmd::Smp {
            algebras,
            instance,
            method,
            witness,
            term,
        } => cmd_smp(&algebras, &instance, &method, witness, term.as_deref()),
        Cmd::CompactRep {
            algebras,
            instance,
            method,
            out,
            term,
        } => cmd_compact_rep(&algebras, &instance, method, out, term.as_deref()),
        Cmd::Bench {
            algebras,
            family,
            n_max,
            seed,
            term,
        } => cmd_bench(&algebras, family, n_max, seed, term.as_deref()),
    }
}

/// Loads the catalog and configures its parallelogram term, either from a
/// file or by the desk-scale joint search over d = 2 then 3.
fn load_configured(algebras: &PathBuf, term: Option<&std::path::Path>) -> Result<Catalog> {
    let mut cat = load_catalog(algebras)?;
    let p = match term {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            parse_term(&cat.signature, &text)?
        }
        None => {
            let mut found = None;
            for d in 2..=3 {
                if let Some(p) = search_parallelogram_term_catalog(&cat, d, 2_000_000)? {
                    found = Some(p);
                    break;
                }
            }
            found.ok_or_else(|| {
                Error::Undecided(
                    "no parallelogram term found for d <= 3; pass one with --term".into(),
                )
            })?
        }
    };
    configure_terms(&mut cat, p)?;
    cat.ensure_hs()?;
    Ok(cat)
}

fn cmd_analyze(algebras: &PathBuf, only: Option<&str>) -> Result<u8> {
    let mut cat = load_catalog(algebras)?;
    cat.ensure_hs()?;
    let mut algs = Vec::new();
    for &id in cat.base() {
        let a = cat.alg(id);
        if let Some(name) = only {
            if a.name != name {
                continue;
            }
        }
        let lat = congruence_lattice(&cat, id)?;
        let blocks: Vec<Vec<Vec<u8>>> = lat.iter().map(|c| c.blocks()).collect();
        let index_of = |c: &subpower_core::Congruence| lat.iter().position(|x| x == c).unwrap();
        // cover edges of the lattice
        let mut edges = Vec::new();
        for (i, lo) in lat.iter().enumerate() {
            for (j, hi) in lat.iter().enumerate() {
                if i == j || !lo.leq(hi) {
                    continue;
                }
                let covered = lat
                    .iter()
                    .any(|mid| mid != lo && mid != hi && lo.leq(mid) && mid.leq(hi));
                if !covered {
                    edges.push(vec![i, j]);
                }
            }
        }
        let irr: Vec<_> = meet_irreducibles(&cat, id)?
            .into_iter()
            .map(|(sigma, cover)| json!({"congruence": index_of(&sigma), "cover": index_of(&cover)}))
            .collect();
        let prof = si_profile(&cat, id)?;
        algs.push(json!({
            "name": a.name,
            "size": a.size,
            "congruence_count": lat.len(),
            "congruences": blocks,
            "lattice_edges": edges,
            "irr": irr,
            "si": {
                "is_si": prof.is_si,
                "monolith": prof.monolith.as_ref().map(&index_of),
                "monolith_abelian": prof.monolith_abelian,
                "centralizer": prof.centralizer.as_ref().map(&index_of),
                "centralizer_abelian": prof.centralizer_abelian,
            },
        }));
    }
    // similarity matrix over the SIs of the HS catalog
    let mut si_members = Vec::new();
    for e in cat.hs_entries().unwrap() {
        if si_profile(&cat, e.alg)?.is_si {
            si_members.push(e.alg);
        }
    }
    let mut matrix = Vec::new();
    for &b in &si_members {
        let mut row = Vec::new();
        for &c in &si_members {
            row.push(subpower_core::check_similarity(&cat, b, c)?);
        }
        matrix.push(row);
    }
    let (rs, offender) = check_residual_smallness(&cat)?;
    let report = json!({
        "algebras": algs,
        "si_similarity": {
            "members": si_members.iter().map(|&id| cat.alg(id).name.clone()).collect::<Vec<_>>(),
            "matrix": matrix,
        },
        "residually_small": rs,
        "offender": offender,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}

fn cmd_verify_term(
    algebras: &PathBuf,
    term: &PathBuf,
    rows_upper: usize,
    rows_lower: usize,
) -> Result<u8> {
    let cat = load_catalog(algebras)?;
    let text = std::fs::read_to_string(term)?;
    let p = parse_term(&cat.signature, &text)?;
    match verify_parallelogram_detailed(&cat, &p, rows_upper, rows_lower)? {
        None => {
            println!(
                "pass: ({rows_upper},{rows_lower})-parallelogram identities hold on every algebra"
            );
            Ok(0)
        }
        Some(fail) => {
            println!(
                "fail: row {} in `{}` at x={}, y={}, z={}",
                fail.row, fail.algebra, fail.x, fail.y, fail.z
            );
            Ok(1)
        }
    }
}

fn cmd_smp(
    algebras: &PathBuf,
    instance: &PathBuf,
    method: &str,
    witness: Option<PathBuf>,
    term: Option<&std::path::Path>,
) -> Result<u8> {
    let method: Method = method.parse()?;
    let cat = if method == Method::Brute {
        load_catalog(algebras)?
    } else {
        load_configured(algebras, term)?
    };
    let inst = parse_instance_str(&std::fs::read_to_string(instance)?)?;
    let resolved = resolve_instance(&cat, &inst)?;
    let ans = solve(&cat, &resolved, method, witness.is_some())?;
    let witness_file = match (&witness, &ans.witness) {
        (Some(path), Some(circ)) => {
            std::fs::write(path, term_to_json(&cat.signature, circ)? + "\n")?;
            Some(path.display().to_string())
        }
        _ => None,
    };
    let out = json!({
        "verdict": if ans.verdict { "YES" } else { "NO" },
        "method": ans.method,
        "witness_file": witness_file,
        "micros": ans.micros,
    });
    println!("{}", serde_json::to_string(&out)?);
    Ok(if ans.verdict { 0 } else { 1 })
}

fn cmd_compact_rep(
    algebras: &PathBuf,
    instance: &PathBuf,
    method: RepMethod,
    out: Option<PathBuf>,
    term: Option<&std::path::Path>,
) -> Result<u8> {
    let cat = load_configured(algebras, term)?;
    let inst = parse_instance_str(&std::fs::read_to_string(instance)?)?;
    let resolved = resolve_instance(&cat, &inst)?;
    let d = cat.terms.as_ref().unwrap().d;
    if resolved.ctx.len() < d {
        return Err(Error::InputContract(format!(
            "representations need n >= d (n={}, d={d}); narrow instances are answered by closure",
            resolved.ctx.len()
        )));
    }
    let rep = match method {
        RepMethod::Direct => {
            compact_rep_direct(&cat, &resolved.ctx, &resolved.gens, &CompactOpts::default())?
        }
        RepMethod::ViaSmp => {
            let mut oracle =
                |c: &Context, g: &[subpower_core::Tuple], t: &subpower_core::Tuple| -> Result<bool> {
                    Ok(smp_brute(&cat, c, g, t, cat.closure_cap)?.verdict)
                };
            compact_rep_via_smp(&cat, &resolved.ctx, &resolved.gens, &mut oracle)?
        }
    };
    let text = rep_to_json(&rep)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(0)
}

struct SplitMix(u64);

impl SplitMix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    fn below(&mut self, n: usize) -> usize {
        (self.next() % n as u64) as usize
    }
}

fn cmd_bench(
    algebras: &PathBuf,
    family: Family,
    n_max: usize,
    seed: u64,
    term: Option<&std::path::Path>,
) -> Result<u8> {
    let cat = load_configured(algebras, term)?;
    let d = cat.terms.as_ref().unwrap().d;
    let base = cat.base()[0];
    println!("n,method,verdict,micros,closure_size_or_dash");
    let emit = |n: usize, method: &str, verdict: &str, micros: u128, closure: String| {
        println!("{n},{method},{verdict},{micros},{closure}");
    };
    let run_both = |inst: &ResolvedInstance, n: usize| -> Result<()> {
        let ans = solve(&cat, inst, Method::Compact, false)?;
        emit(
            n,
            &ans.method,
            if ans.verdict { "YES" } else { "NO" },
            ans.micros,
            "-".into(),
        );
        let start = Instant::now();
        match smp_brute(&cat, &inst.ctx, &inst.gens, &inst.target, cat.closure_cap) {
            Ok(out) => emit(
                n,
                "brute",
                if out.verdict { "YES" } else { "NO" },
                start.elapsed().as_micros(),
                out.explored.to_string(),
            ),
            Err(Error::ClosureCap(_)) => {
                emit(n, "brute", "cap", start.elapsed().as_micros(), "cap".into())
            }
            Err(e) => return Err(e),
        }
        Ok(())
    };
    match family {
        Family::Coset => {
            let sz = cat.alg(base).size;
            if sz < 2 {
                return Err(Error::Invalid("coset family needs a base of size >= 2".into()));
            }
            for n in d.max(3)..=n_max {
                let ctx = Context::new(vec![base; n]);
                let mut gens = Vec::with_capacity(n);
                for i in 0..n {
                    let mut g = vec![0u8; n];
                    g[i] = 1;
                    gens.push(g);
                }
                let mut target = vec![0u8; n];
                for slot in target.iter_mut().take(3) {
                    *slot = 1;
                }
                let inst = ResolvedInstance { ctx, gens, target };
                run_both(&inst, n)?;
            }
        }
        Family::Random => {
            let sz = cat.alg(base).size;
            let mut rng = SplitMix(seed ^ 0xabcdef);
            for n in d.max(2)..=n_max {
                let ctx = Context::new(vec![base; n]);
                // column-patterned generators keep the closure desk-sized
                let patterns = 2 + rng.below(2);
                let k = 1 + rng.below(4);
                let cols: Vec<Vec<u8>> = (0..patterns)
                    .map(|_| (0..k).map(|_| rng.below(sz) as u8).collect())
                    .collect();
                let assign: Vec<usize> = (0..n).map(|_| rng.below(patterns)).collect();
                let gens: Vec<Vec<u8>> = (0..k)
                    .map(|g| (0..n).map(|j| cols[assign[j]][g]).collect())
                    .collect();
                let target: Vec<u8> = if rng.below(2) == 0 {
                    // inside the subalgebra: a short random term over the
                    // generators
                    let mut t = gens[0].clone();
                    for _ in 0..3 {
                        let sym = rng.below(cat.signature.len());
                        let r = cat.signature.arity(sym);
                        let mut args: Vec<Vec<u8>> = vec![t.clone()];
                        for _ in 1..r {
                            args.push(gens[rng.below(k)].clone());
                        }
                        let refs: Vec<&Vec<u8>> = args.iter().collect();
                        t = ctx.apply(&cat, sym, &refs);
                    }
                    t
                } else {
                    (0..n).map(|_| rng.below(sz) as u8).collect()
                };
                let inst = ResolvedInstance { ctx, gens, target };
                run_both(&inst, n)?;
            }
        }
    }
    Ok(0)
}
