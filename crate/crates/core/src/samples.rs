//! Ready-made catalogs: cyclic groups and small groups in the Mal'tsev
//! signature `m(x,y,z) = x*y^-1*z`, the two-element lattice, the majority
//! algebra, and a meet semilattice. These back the shipped catalog files and
//! the test suites.

use crate::algebra::{Catalog, Elem, FiniteAlgebra, Signature};
use crate::circuit::{Circuit, CircuitBuilder};

fn ternary_table(size: usize, f: impl Fn(usize, usize, usize) -> usize) -> Vec<Elem> {
    let mut t = Vec::with_capacity(size * size * size);
    for x in 0..size {
        for y in 0..size {
            for z in 0..size {
                t.push(f(x, y, z) as Elem);
            }
        }
    }
    t
}

fn binary_table(size: usize, f: impl Fn(usize, usize) -> usize) -> Vec<Elem> {
    let mut t = Vec::with_capacity(size * size);
    for x in 0..size {
        for y in 0..size {
            t.push(f(x, y) as Elem);
        }
    }
    t
}

fn group_maltsev(size: usize, mul: &dyn Fn(usize, usize) -> usize) -> Vec<Elem> {
    let inv = |y: usize| (0..size).find(|&i| mul(y, i) == mul(i, y) && mul(y, i) == identity_of(size, mul)).unwrap();
    ternary_table(size, |x, y, z| mul(mul(x, inv(y)), z))
}

fn identity_of(size: usize, mul: &dyn Fn(usize, usize) -> usize) -> usize {
    (0..size)
        .find(|&e| (0..size).all(|x| mul(e, x) == x && mul(x, e) == x))
        .unwrap()
}

/// Permutations of three points, indexed 0..5 in lexicographic one-line
/// order: 012, 021, 102, 120, 201, 210.
const S3_PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

fn s3_mul(a: usize, b: usize) -> usize {
    let p = S3_PERMS[a];
    let q = S3_PERMS[b];
    let c = [p[q[0]], p[q[1]], p[q[2]]];
    S3_PERMS.iter().position(|&x| x == c).unwrap()
}

/// Quaternion units 1, -1, i, -i, j, -j, k, -k indexed 0..7.
fn q8_mul(a: usize, b: usize) -> usize {
    // (sign, axis) with axis 0 = scalar, 1 = i, 2 = j, 3 = k
    let dec = |v: usize| (v % 2, v / 2);
    let enc = |s: usize, ax: usize| ax * 2 + s;
    let (sa, xa) = dec(a);
    let (sb, xb) = dec(b);
    let mut sign = sa ^ sb;
    let axis;
    if xa == 0 {
        axis = xb;
    } else if xb == 0 {
        axis = xa;
    } else if xa == xb {
        axis = 0;
        sign ^= 1; // i*i = j*j = k*k = -1
    } else {
        axis = 6 - xa - xb; // {i,j,k} = {1,2,3}, product hits the third axis
        let cyclic = matches!((xa, xb), (1, 2) | (2, 3) | (3, 1));
        if !cyclic {
            sign ^= 1;
        }
    }
    enc(sign, axis)
}

pub fn make_algebra(sig: &Signature, name: &str) -> FiniteAlgebra {
    let (size, table) = match name {
        "Z2" => (2, ternary_table(2, |x, y, z| (x + 2 - y + z) % 2)),
        "Z3" => (3, ternary_table(3, |x, y, z| (x + 3 - y + z) % 3)),
        "Z4" => (4, ternary_table(4, |x, y, z| (x + 4 - y + z) % 4)),
        "Z2xZ2" => (
            4,
            ternary_table(4, |x, y, z| {
                let f = |v: usize| (v / 2, v % 2);
                let (x1, x2) = f(x);
                let (y1, y2) = f(y);
                let (z1, z2) = f(z);
                (x1 ^ y1 ^ z1) * 2 + (x2 ^ y2 ^ z2)
            }),
        ),
        "S3" => (6, group_maltsev(6, &s3_mul)),
        "Q8" => (8, group_maltsev(8, &q8_mul)),
        "T1" => (1, ternary_table(1, |_, _, _| 0)),
        _ => panic!("unknown sample algebra `{name}`"),
    };
    FiniteAlgebra::new(sig, name.to_string(), size, vec![table]).unwrap()
}

/// Catalog over the single ternary symbol `m` containing the named sample
/// algebras.
pub fn maltsev_catalog(names: &[&str]) -> Catalog {
    let sig = Signature::new(vec![("m".to_string(), 3)]).unwrap();
    let mut cat = Catalog::new(sig);
    for name in names {
        let alg = make_algebra(&cat.signature, name);
        cat.add_base(alg).unwrap();
    }
    cat
}

pub fn trivial_catalog() -> Catalog {
    maltsev_catalog(&["T1"])
}

/// The two-element lattice over meet and join.
pub fn lattice_catalog() -> Catalog {
    let sig = Signature::new(vec![("and".to_string(), 2), ("or".to_string(), 2)]).unwrap();
    let mut cat = Catalog::new(sig);
    let and = binary_table(2, |x, y| x & y);
    let or = binary_table(2, |x, y| x | y);
    let alg = FiniteAlgebra::new(&cat.signature, "lattice2".to_string(), 2, vec![and, or]).unwrap();
    cat.add_base(alg).unwrap();
    cat
}

/// The two-element majority algebra: a single ternary majority operation.
pub fn majority_catalog() -> Catalog {
    let sig = Signature::new(vec![("maj".to_string(), 3)]).unwrap();
    let mut cat = Catalog::new(sig);
    let maj = ternary_table(2, |x, y, z| (x & y) | (y & z) | (x & z));
    let alg = FiniteAlgebra::new(&cat.signature, "maj2".to_string(), 2, vec![maj]).unwrap();
    cat.add_base(alg).unwrap();
    cat
}

/// The two-element meet semilattice; has no cube term of any dimension.
pub fn semilattice_catalog() -> Catalog {
    let sig = Signature::new(vec![("and".to_string(), 2)]).unwrap();
    let mut cat = Catalog::new(sig);
    let and = binary_table(2, |x, y| x & y);
    let alg =
        FiniteAlgebra::new(&cat.signature, "semilattice2".to_string(), 2, vec![and]).unwrap();
    cat.add_base(alg).unwrap();
    cat
}

/// P(x,u,y,z1,z2) := m(x,u,y) — a (1,1)-parallelogram term for any catalog
/// whose `m` is a Mal'tsev operation.
pub fn maltsev_p(sig: &Signature) -> Circuit {
    let m = sig.find("m").expect("signature has m");
    let mut b = CircuitBuilder::new(5, sig.symbols().iter().map(|(_, a)| *a).collect());
    let g = b.app(m, &[0, 1, 2]);
    b.finish(vec![g])
}

/// P(x,u,y,z1,z2,z3) := maj(z1,z2,z3) over the majority signature — a
/// (1,2)-parallelogram term.
pub fn majority_p(sig: &Signature) -> Circuit {
    let maj = sig.find("maj").expect("signature has maj");
    let mut b = CircuitBuilder::new(6, sig.symbols().iter().map(|(_, a)| *a).collect());
    let g = b.app(maj, &[3, 4, 5]);
    b.finish(vec![g])
}

/// P(x,u,y,z1,z2,z3) := (z1^z2) v (z2^z3) v (z1^z3) over the lattice
/// signature — a (1,2)-parallelogram term.
pub fn lattice_maj_p(sig: &Signature) -> Circuit {
    let and = sig.find("and").expect("signature has and");
    let or = sig.find("or").expect("signature has or");
    let mut b = CircuitBuilder::new(6, sig.symbols().iter().map(|(_, a)| *a).collect());
    let ab = b.app(and, &[3, 4]);
    let bc = b.app(and, &[4, 5]);
    let ac = b.app(and, &[3, 5]);
    let j1 = b.app(or, &[ab, bc]);
    let j2 = b.app(or, &[j1, ac]);
    b.finish(vec![j2])
}

/// The parallelogram term that fits a sample catalog's signature.
pub fn default_p(cat: &Catalog) -> Circuit {
    if cat.signature.find("m").is_some() {
        maltsev_p(&cat.signature)
    } else if cat.signature.find("maj").is_some() {
        majority_p(&cat.signature)
    } else {
        lattice_maj_p(&cat.signature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn s3_is_a_group() {
        let e = identity_of(6, &s3_mul);
        assert_eq!(e, 0);
        for a in 0..6 {
            for b in 0..6 {
                for c in 0..6 {
                    assert_eq!(s3_mul(s3_mul(a, b), c), s3_mul(a, s3_mul(b, c)));
                }
            }
        }
    }

    #[test]
    fn q8_is_a_group_with_center_of_order_two() {
        let e = identity_of(8, &q8_mul);
        assert_eq!(e, 0);
        for a in 0..8 {
            for b in 0..8 {
                for c in 0..8 {
                    assert_eq!(q8_mul(q8_mul(a, b), c), q8_mul(a, q8_mul(b, c)));
                }
            }
        }
        let central: Vec<usize> = (0..8)
            .filter(|&z| (0..8).all(|x| q8_mul(z, x) == q8_mul(x, z)))
            .collect();
        assert_eq!(central, vec![0, 1]);
    }

    #[test]
    fn xor_table_matches_spec_example() {
        let cat = maltsev_catalog(&["Z2"]);
        let z2 = cat.alg(cat.find("Z2").unwrap());
        assert_eq!(z2.table(0), &[0, 1, 1, 0, 1, 0, 0, 1]);
    }
}
