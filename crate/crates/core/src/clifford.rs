//! Clifford tableaux, uniform sampling, nearest-neighbour synthesis, the
//! measurement-feedforward teleportation compiler, and a symbolic-sign
//! stabilizer checker that proves a measuring circuit correct on every branch.

use crate::circuit::{mats, Circuit, Gate, Layout, Model, Pauli};
use crate::fields::rng_for;
use crate::linalg::{Mat, C64};
use rand::Rng;
use serde_json::Value;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliffordError {
    #[error("not a Clifford gate: {0}")]
    NotClifford(String),
    #[error("invalid tableau: {0}")]
    InvalidTableau(String),
    #[error("lowering unsupported: {0}")]
    Unsupported(String),
    #[error("qubit cap exceeded: need {needed}, cap {cap}")]
    CapExceeded { needed: usize, cap: usize },
}

/// i^e X^x Z^z with every X to the left of every Z.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PauliString {
    pub x: Vec<bool>,
    pub z: Vec<bool>,
    pub e: u8,
}

impl PauliString {
    pub fn identity(n: usize) -> PauliString {
        PauliString {
            x: vec![false; n],
            z: vec![false; n],
            e: 0,
        }
    }

    /// Hermitian Pauli with the given bits and sign.
    pub fn hermitian(x: Vec<bool>, z: Vec<bool>, negative: bool) -> PauliString {
        let y = x.iter().zip(&z).filter(|(a, b)| **a && **b).count();
        PauliString {
            x,
            z,
            e: ((y + 2 * negative as usize) % 4) as u8,
        }
    }

    pub fn single(n: usize, q: usize, p: char) -> PauliString {
        let mut x = vec![false; n];
        let mut z = vec![false; n];
        match p {
            'X' => x[q] = true,
            'Z' => z[q] = true,
            'Y' => {
                x[q] = true;
                z[q] = true
            }
            _ => {}
        }
        PauliString::hermitian(x, z, false)
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    fn ycount(&self) -> usize {
        self.x.iter().zip(&self.z).filter(|(a, b)| **a && **b).count()
    }

    pub fn is_hermitian(&self) -> bool {
        (self.e as usize + self.ycount()) % 2 == 0
    }

    /// Sign of a Hermitian Pauli: true for -P.
    pub fn negative(&self) -> bool {
        debug_assert!(self.is_hermitian());
        (self.e as usize + 4 - self.ycount() % 4) % 4 == 2
    }

    pub fn mul(&self, o: &PauliString) -> PauliString {
        let cross = self.z.iter().zip(&o.x).filter(|(a, b)| **a && **b).count();
        PauliString {
            x: self.x.iter().zip(&o.x).map(|(a, b)| a ^ b).collect(),
            z: self.z.iter().zip(&o.z).map(|(a, b)| a ^ b).collect(),
            e: ((self.e as usize + o.e as usize + 2 * cross) % 4) as u8,
        }
    }

    pub fn commutes(&self, o: &PauliString) -> bool {
        let s = (0..self.n())
            .filter(|&i| (self.x[i] && o.z[i]) ^ (self.z[i] && o.x[i]))
            .count();
        s % 2 == 0
    }

    pub fn is_identity_up_to_phase(&self) -> bool {
        !self.x.iter().chain(&self.z).any(|&b| b)
    }

    pub fn matrix(&self) -> Mat {
        let i = crate::linalg::I;
        let mut m = Mat::from_element(1, 1, i.powu(self.e as u32));
        for q in 0..self.n() {
            let mut f = crate::linalg::identity(2);
            if self.x[q] {
                f = Mat::from_row_slice(2, 2, &mats::X);
            }
            if self.z[q] {
                f *= Mat::from_row_slice(2, 2, &mats::Z);
            }
            m = m.kronecker(&f);
        }
        m
    }
}

/// Gate action on at most two qubits, packed as bit masks so that
/// conjugating a long Pauli string does not allocate.
struct LocalMap {
    qs: [usize; 2],
    k: usize,
    // (x mask, z mask, phase) per image: X_0, X_1, Z_0, Z_1
    img: [(u8, u8, u8); 4],
}

impl LocalMap {
    fn new(qs: &[usize], img: &[PauliString]) -> LocalMap {
        let k = qs.len();
        assert!(k <= 2 && img.len() == 2 * k);
        let pack = |p: &PauliString| {
            let m = |b: &[bool]| b.iter().enumerate().fold(0u8, |acc, (i, &v)| acc | ((v as u8) << i));
            (m(&p.x), m(&p.z), p.e)
        };
        let mut packed = [(0, 0, 0); 4];
        for j in 0..k {
            packed[j] = pack(&img[j]);
            packed[2 + j] = pack(&img[k + j]);
        }
        let mut q = [0; 2];
        q[..k].copy_from_slice(qs);
        LocalMap { qs: q, k, img: packed }
    }

    fn apply(&self, p: &mut PauliString) {
        let mul = |a: (u8, u8, u8), b: (u8, u8, u8)| {
            let cross = (a.1 & b.0).count_ones() as u8;
            (a.0 ^ b.0, a.1 ^ b.1, (a.2 + b.2 + 2 * cross) % 4)
        };
        let mut r = (0u8, 0u8, 0u8);
        for j in 0..self.k {
            if p.x[self.qs[j]] {
                r = mul(r, self.img[j]);
            }
        }
        for j in 0..self.k {
            if p.z[self.qs[j]] {
                r = mul(r, self.img[2 + j]);
            }
        }
        for j in 0..self.k {
            p.x[self.qs[j]] = r.0 >> j & 1 == 1;
            p.z[self.qs[j]] = r.1 >> j & 1 == 1;
        }
        p.e = (p.e + r.2) % 4;
    }
}

/// Elementary Clifford gates on qubit indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CliffordGate {
    H(usize),
    S(usize),
    Sdg(usize),
    X(usize),
    Z(usize),
    Cx(usize, usize),
    Cz(usize, usize),
}

impl CliffordGate {
    pub fn inverse(self) -> CliffordGate {
        match self {
            CliffordGate::S(q) => CliffordGate::Sdg(q),
            CliffordGate::Sdg(q) => CliffordGate::S(q),
            g => g,
        }
    }

    fn local(self) -> (Vec<usize>, Vec<PauliString>) {
        let h = |x: Vec<bool>, z: Vec<bool>, neg: bool| PauliString::hermitian(x, z, neg);
        let (t, f) = (true, false);
        match self {
            CliffordGate::H(q) => (vec![q], vec![h(vec![f], vec![t], f), h(vec![t], vec![f], f)]),
            CliffordGate::S(q) => (vec![q], vec![h(vec![t], vec![t], f), h(vec![f], vec![t], f)]),
            CliffordGate::Sdg(q) => (vec![q], vec![h(vec![t], vec![t], t), h(vec![f], vec![t], f)]),
            CliffordGate::X(q) => (vec![q], vec![h(vec![t], vec![f], f), h(vec![f], vec![t], t)]),
            CliffordGate::Z(q) => (vec![q], vec![h(vec![t], vec![f], t), h(vec![f], vec![t], f)]),
            CliffordGate::Cx(c, tq) => (
                vec![c, tq],
                vec![
                    h(vec![t, t], vec![f, f], f),
                    h(vec![f, t], vec![f, f], f),
                    h(vec![f, f], vec![t, f], f),
                    h(vec![f, f], vec![t, t], f),
                ],
            ),
            CliffordGate::Cz(a, b) => (
                vec![a, b],
                vec![
                    h(vec![t, f], vec![f, t], f),
                    h(vec![f, t], vec![t, f], f),
                    h(vec![f, f], vec![t, f], f),
                    h(vec![f, f], vec![f, t], f),
                ],
            ),
        }
    }

    fn to_ir(self) -> Vec<Gate> {
        match self {
            CliffordGate::H(q) => vec![Gate::h(q)],
            CliffordGate::S(q) => vec![Gate::s(q)],
            CliffordGate::Sdg(q) => vec![Gate::u1(q, mats::SDG)],
            CliffordGate::X(q) => vec![Gate::x(q)],
            CliffordGate::Z(q) => vec![Gate::z(q)],
            CliffordGate::Cx(c, t) => vec![Gate::cnot(c, t)],
            CliffordGate::Cz(a, b) => vec![Gate::h(b), Gate::cnot(a, b), Gate::h(b)],
        }
    }
}

/// Images of X and Z under a single-qubit unitary if it is Clifford
/// (global phase ignored).
pub fn single_qubit_images(m: &[C64; 4]) -> Option<[PauliString; 2]> {
    let u = Mat::from_row_slice(2, 2, m);
    let candidates = ['X', 'Y', 'Z'];
    let mut out = Vec::new();
    for p in ['X', 'Z'] {
        let img = &u * PauliString::single(1, 0, p).matrix() * u.adjoint();
        let mut found = None;
        for cnd in candidates {
            let pm = PauliString::single(1, 0, cnd).matrix();
            let coef = crate::linalg::trace(&(&pm * &img)) / 2.0;
            if (coef.re.abs() - 1.0).abs() < 1e-9 && coef.im.abs() < 1e-9 {
                let base = PauliString::single(1, 0, cnd);
                found = Some(PauliString::hermitian(base.x, base.z, coef.re < 0.0));
            }
        }
        out.push(found?);
    }
    Some([out[0].clone(), out[1].clone()])
}

/// Rows 0..n are the images of X_q, rows n..2n the images of Z_q.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CliffordTableau {
    n: usize,
    rows: Vec<PauliString>,
}

impl CliffordTableau {
    pub fn identity(n: usize) -> CliffordTableau {
        let mut rows = Vec::with_capacity(2 * n);
        for q in 0..n {
            rows.push(PauliString::single(n, q, 'X'));
        }
        for q in 0..n {
            rows.push(PauliString::single(n, q, 'Z'));
        }
        CliffordTableau { n, rows }
    }

    pub fn from_rows(n: usize, rows: Vec<PauliString>) -> Result<CliffordTableau, CliffordError> {
        if rows.len() != 2 * n || rows.iter().any(|r| r.n() != n) {
            return Err(CliffordError::InvalidTableau("shape".into()));
        }
        if rows.iter().any(|r| !r.is_hermitian()) {
            return Err(CliffordError::InvalidTableau("non-Hermitian row".into()));
        }
        let t = CliffordTableau { n, rows };
        if !t.is_symplectic() {
            return Err(CliffordError::InvalidTableau("symplectic condition fails".into()));
        }
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> &[PauliString] {
        &self.rows
    }

    pub fn image_x(&self, q: usize) -> &PauliString {
        &self.rows[q]
    }

    pub fn image_z(&self, q: usize) -> &PauliString {
        &self.rows[self.n + q]
    }

    /// Binary 2n x 2n matrix with rows (x | z).
    pub fn symplectic_matrix(&self) -> Vec<Vec<bool>> {
        self.rows
            .iter()
            .map(|r| r.x.iter().chain(&r.z).copied().collect())
            .collect()
    }

    pub fn is_symplectic(&self) -> bool {
        let n = self.n;
        for i in 0..2 * n {
            for j in 0..2 * n {
                let want = i + n == j || j + n == i;
                if self.rows[i].commutes(&self.rows[j]) == want {
                    return false;
                }
            }
        }
        true
    }

    /// U P U†.
    pub fn conjugate(&self, p: &PauliString) -> PauliString {
        let mut r = PauliString::identity(self.n);
        r.e = p.e;
        for q in 0..self.n {
            if p.x[q] {
                r = r.mul(&self.rows[q]);
            }
        }
        for q in 0..self.n {
            if p.z[q] {
                r = r.mul(&self.rows[self.n + q]);
            }
        }
        r
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &CliffordTableau) -> CliffordTableau {
        assert_eq!(self.n, next.n);
        CliffordTableau {
            n: self.n,
            rows: self.rows.iter().map(|r| next.conjugate(r)).collect(),
        }
    }

    pub fn inverse(&self) -> CliffordTableau {
        let n = self.n;
        // M^{-1} = Λ M^T Λ for symplectic M
        let m = self.symplectic_matrix();
        let mut rows = Vec::with_capacity(2 * n);
        for i in 0..2 * n {
            let col = (i + n) % (2 * n);
            let bits: Vec<bool> = (0..2 * n).map(|j| m[(j + n) % (2 * n)][col]).collect();
            let cand = PauliString::hermitian(bits[..n].to_vec(), bits[n..].to_vec(), false);
            let img = self.conjugate(&cand);
            let neg = img.negative();
            rows.push(PauliString::hermitian(cand.x, cand.z, neg));
        }
        CliffordTableau { n, rows }
    }

    pub fn apply(&mut self, g: CliffordGate) {
        let (qs, img) = g.local();
        let map = LocalMap::new(&qs, &img);
        for r in &mut self.rows {
            map.apply(r);
        }
    }

    pub fn apply_local(&mut self, q: usize, images: &[PauliString; 2]) {
        let map = LocalMap::new(&[q], images);
        for r in &mut self.rows {
            map.apply(r);
        }
    }

    /// Relabel qubits: qubit k becomes `perm[k]`.
    pub fn permute(&mut self, perm: &[usize]) {
        for r in &mut self.rows {
            let (x, z) = (r.x.clone(), r.z.clone());
            for k in 0..self.n {
                r.x[perm[k]] = x[k];
                r.z[perm[k]] = z[k];
            }
        }
    }

    /// Tableau of an ancilla-free unitary Clifford circuit.
    pub fn from_circuit(c: &Circuit) -> Result<CliffordTableau, CliffordError> {
        if c.n_anc != 0 {
            return Err(CliffordError::NotClifford("circuit has ancillae".into()));
        }
        let mut t = CliffordTableau::identity(c.n_in);
        for g in c.gates() {
            match g {
                Gate::U1 { q, matrix } => {
                    let img = single_qubit_images(matrix).ok_or_else(|| CliffordError::NotClifford("u1".into()))?;
                    t.apply_local(*q, &img);
                }
                Gate::Toffoli { controls, target } if controls.len() <= 1 => match controls.first() {
                    Some(&ctl) => t.apply(CliffordGate::Cx(ctl, *target)),
                    None => t.apply(CliffordGate::X(*target)),
                },
                Gate::Fanout { source, targets } => {
                    for &tq in targets {
                        t.apply(CliffordGate::Cx(*source, tq));
                    }
                }
                other => return Err(CliffordError::NotClifford(other.kind().into())),
            }
        }
        Ok(t)
    }

    /// Dense unitary (up to global phase) via the nearest-neighbour circuit.
    pub fn unitary(&self) -> Mat {
        crate::sim::circuit_unitary(&tableau_to_nn_circuit(self)).expect("Clifford circuit within cap")
    }
}

// ---------------------------------------------------------------- GF(2) helpers

type Bits = Vec<Vec<bool>>;

fn bits_identity(n: usize) -> Bits {
    (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect()
}

fn bits_mul(a: &Bits, b: &Bits) -> Bits {
    let (r, k, c) = (a.len(), b.len(), b.first().map_or(0, |x| x.len()));
    (0..r)
        .map(|i| {
            (0..c)
                .map(|j| (0..k).fold(false, |acc, t| acc ^ (a[i][t] && b[t][j])))
                .collect()
        })
        .collect()
}

fn bits_transpose(a: &Bits) -> Bits {
    let c = a.first().map_or(0, |x| x.len());
    (0..c).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

fn bits_inverse(a: &Bits) -> Option<Bits> {
    let n = a.len();
    let mut m = a.clone();
    let mut inv = bits_identity(n);
    for col in 0..n {
        let p = (col..n).find(|&r| m[r][col])?;
        m.swap(col, p);
        inv.swap(col, p);
        for r in 0..n {
            if r != col && m[r][col] {
                let (src, src_inv) = (m[col].clone(), inv[col].clone());
                m[r].iter_mut().zip(&src).for_each(|(x, y)| *x ^= y);
                inv[r].iter_mut().zip(&src_inv).for_each(|(x, y)| *x ^= y);
            }
        }
    }
    Some(inv)
}

/// Row-reduce: returns (E, rank) with E·a having its first `rank` rows
/// independent and the rest zero.
fn row_echelon_transform(a: &Bits) -> (Bits, usize) {
    let n = a.len();
    let cols = a.first().map_or(0, |x| x.len());
    let mut m = a.clone();
    let mut e = bits_identity(n);
    let mut rank = 0;
    for col in 0..cols {
        let Some(p) = (rank..n).find(|&r| m[r][col]) else {
            continue;
        };
        m.swap(rank, p);
        e.swap(rank, p);
        for r in 0..n {
            if r != rank && m[r][col] {
                let (src, src_e) = (m[rank].clone(), e[rank].clone());
                m[r].iter_mut().zip(&src).for_each(|(x, y)| *x ^= y);
                e[r].iter_mut().zip(&src_e).for_each(|(x, y)| *x ^= y);
            }
        }
        rank += 1;
    }
    (e, rank)
}

/// W = P·L·U with L lower and U upper unitriangular; P as `perm` with
/// row k of L·U equal to row perm[k] of W.
fn plu(w: &Bits) -> (Vec<usize>, Bits, Bits) {
    let n = w.len();
    let mut a = w.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut l = bits_identity(n);
    for k in 0..n {
        let p = (k..n).find(|&r| a[r][k]).expect("invertible");
        if p != k {
            a.swap(k, p);
            perm.swap(k, p);
            for j in 0..k {
                let t = l[k][j];
                l[k][j] = l[p][j];
                l[p][j] = t;
            }
        }
        for i in k + 1..n {
            if a[i][k] {
                let src = a[k].clone();
                a[i].iter_mut().zip(&src).for_each(|(x, y)| *x ^= y);
                l[i][k] = true;
            }
        }
    }
    (perm, l, a)
}

// ---------------------------------------------------------------- random Cliffords

/// Uniformly random Clifford (Bravyi-Maslov canonical form, as in Qiskit),
/// with uniformly random row signs.
pub fn random_clifford(n: usize, seed: u64) -> CliffordTableau {
    assert!(n >= 1);
    let mut rng = rng_for(seed, &[0xC11F, n as u64]);
    let (had, perm) = sample_qmallows(n, &mut rng);
    let mut gamma1 = vec![vec![false; n]; n];
    let mut gamma2 = vec![vec![false; n]; n];
    for i in 0..n {
        gamma1[i][i] = rng.random();
        gamma2[i][i] = rng.random();
    }
    let mut delta1 = bits_identity(n);
    let mut delta2 = bits_identity(n);
    fill_lower(&mut gamma1, &mut rng, true);
    fill_lower(&mut gamma2, &mut rng, true);
    fill_lower(&mut delta1, &mut rng, false);
    fill_lower(&mut delta2, &mut rng, false);
    let block = |delta: &Bits, gamma: &Bits| -> Bits {
        let prod = bits_mul(gamma, delta);
        let inv_t = bits_transpose(&bits_inverse(delta).expect("unitriangular"));
        let mut t = vec![vec![false; 2 * n]; 2 * n];
        for i in 0..n {
            for j in 0..n {
                t[i][j] = delta[i][j];
                t[n + i][j] = prod[i][j];
                t[n + i][n + j] = inv_t[i][j];
            }
        }
        t
    };
    let table1 = block(&delta1, &gamma1);
    let table2 = block(&delta2, &gamma2);
    let mut table: Bits = (0..2 * n)
        .map(|r| {
            if r < n {
                table2[perm[r]].clone()
            } else {
                table2[n + perm[r - n]].clone()
            }
        })
        .collect();
    for i in 0..n {
        if had[i] {
            table.swap(i, n + i);
        }
    }
    let full = bits_mul(&table1, &table);
    let rows = full
        .into_iter()
        .map(|r| {
            let neg: bool = rng.random();
            PauliString::hermitian(r[..n].to_vec(), r[n..].to_vec(), neg)
        })
        .collect();
    CliffordTableau { n, rows }
}

fn sample_qmallows<R: Rng>(n: usize, rng: &mut R) -> (Vec<bool>, Vec<usize>) {
    let mut had = vec![false; n];
    let mut perm = vec![0; n];
    let mut inds: Vec<usize> = (0..n).collect();
    for i in 0..n {
        let m = n - i;
        let eps = 4f64.powi(-(m as i32));
        let r: f64 = rng.random();
        let index = (-((r + (1.0 - r) * eps).log2().ceil()) as i64).clamp(0, 2 * m as i64 - 1) as usize;
        had[i] = index < m;
        let k = if index < m { index } else { 2 * m - index - 1 };
        perm[i] = inds.remove(k);
    }
    (had, perm)
}

fn fill_lower<R: Rng>(m: &mut Bits, rng: &mut R, symmetric: bool) {
    let n = m.len();
    for i in 0..n {
        for j in 0..i {
            let v: bool = rng.random();
            m[i][j] = v;
            if symmetric {
                m[j][i] = v;
            }
        }
    }
}

// ---------------------------------------------------------------- nearest-neighbour synthesis

/// Gate emitter that tracks which logical qubit sits at each physical
/// position of a line, and mirrors every logical gate on a tableau.
struct LineSynth {
    n: usize,
    layout: Vec<usize>,
    phys: Vec<usize>,
    ops: Vec<CliffordGate>,
    tab: CliffordTableau,
}

impl LineSynth {
    fn gate(&mut self, g: CliffordGate) {
        self.tab.apply(g);
        let p = |q: usize| self.phys[q];
        self.ops.push(match g {
            CliffordGate::H(q) => CliffordGate::H(p(q)),
            CliffordGate::S(q) => CliffordGate::S(p(q)),
            CliffordGate::Sdg(q) => CliffordGate::Sdg(p(q)),
            CliffordGate::X(q) => CliffordGate::X(p(q)),
            CliffordGate::Z(q) => CliffordGate::Z(p(q)),
            CliffordGate::Cx(a, b) => CliffordGate::Cx(p(a), p(b)),
            CliffordGate::Cz(a, b) => CliffordGate::Cz(p(a), p(b)),
        });
    }

    fn swap_positions(&mut self, pa: usize) {
        let pb = pa + 1;
        self.ops.extend([
            CliffordGate::Cx(pa, pb),
            CliffordGate::Cx(pb, pa),
            CliffordGate::Cx(pa, pb),
        ]);
        self.layout.swap(pa, pb);
        self.phys[self.layout[pa]] = pa;
        self.phys[self.layout[pb]] = pb;
    }

    fn relabel(&mut self, perm: &[usize]) {
        self.tab.permute(perm);
        for p in 0..self.n {
            self.layout[p] = perm[self.layout[p]];
            self.phys[self.layout[p]] = p;
        }
    }

    /// Logical pairs in meeting order for one reversal pass from the
    /// current layout (every pair meets exactly once).
    fn reversal_meetings(&self) -> Vec<Vec<(usize, usize)>> {
        let mut lay = self.layout.clone();
        let mut rounds = Vec::new();
        for r in 0..self.n {
            let mut pairs = Vec::new();
            let mut p = r % 2;
            while p + 1 < self.n {
                pairs.push((lay[p], lay[p + 1]));
                lay.swap(p, p + 1);
                p += 2;
            }
            rounds.push(pairs);
        }
        rounds
    }

    /// Reversal pass realising the unitriangular wire map `target`
    /// (upper: wires take from higher-index wires).
    fn triangular_pass(&mut self, target: &Bits, upper: bool) {
        let n = self.n;
        let rounds = self.reversal_meetings();
        let flat: Vec<(usize, usize)> = rounds
            .iter()
            .flatten()
            .map(|&(a, b)| {
                let (lo, hi) = (a.min(b), a.max(b));
                if upper {
                    (lo, hi) // (target wire, control wire)
                } else {
                    (hi, lo)
                }
            })
            .collect();
        // Solve the CNOT bits by root height: entries of height h depend
        // on their own bit plus products of strictly lower heights.
        let mut bits = vec![false; flat.len()];
        for h in 1..n {
            let mut cur = bits_identity(n);
            for (s, &(t, c)) in flat.iter().enumerate() {
                if bits[s] {
                    let src = cur[c].clone();
                    cur[t].iter_mut().zip(&src).for_each(|(x, y)| *x ^= y);
                }
            }
            for (s, &(t, c)) in flat.iter().enumerate() {
                if t.abs_diff(c) == h {
                    bits[s] = target[t][c] ^ cur[t][c];
                }
            }
        }
        let mut s = 0;
        for (r, pairs) in rounds.iter().enumerate() {
            let mut p = r % 2;
            for _ in pairs {
                let (t, c) = flat[s];
                if bits[s] {
                    self.tab.apply(CliffordGate::Cx(c, t));
                    // CX then SWAP collapses to two CNOTs
                    let (pc, pt) = (self.phys[c], self.phys[t]);
                    self.ops.extend([CliffordGate::Cx(pt, pc), CliffordGate::Cx(pc, pt)]);
                    self.layout.swap(p, p + 1);
                    self.phys[self.layout[p]] = p;
                    self.phys[self.layout[p + 1]] = p + 1;
                } else {
                    self.swap_positions(p);
                }
                s += 1;
                p += 2;
            }
        }
    }

    /// Realise the invertible wire map `w` (wire i ends holding row i of w).
    fn linear(&mut self, w: &Bits) {
        if *w == bits_identity(self.n) {
            return;
        }
        let (perm, l, u) = plu(w);
        if u != bits_identity(self.n) {
            self.triangular_pass(&u, true);
        }
        if l != bits_identity(self.n) {
            self.triangular_pass(&l, false);
        }
        self.relabel(&perm);
    }

    /// Diagonal phase layer z += Γ x with Γ symmetric.
    fn phase_layer(&mut self, gamma: &Bits) {
        for q in 0..self.n {
            if gamma[q][q] {
                self.gate(CliffordGate::S(q));
            }
        }
        if !(0..self.n).any(|a| (0..a).any(|b| gamma[a][b])) {
            return;
        }
        let rounds = self.reversal_meetings();
        for (r, pairs) in rounds.iter().enumerate() {
            let mut p = r % 2;
            for &(a, b) in pairs {
                if gamma[a][b] {
                    self.gate(CliffordGate::Cz(a, b));
                }
                self.swap_positions(p);
                p += 2;
            }
        }
    }

    fn sort_layout(&mut self) {
        for r in 0..=self.n {
            let mut p = r % 2;
            while p + 1 < self.n {
                if self.layout[p] > self.layout[p + 1] {
                    self.swap_positions(p);
                }
                p += 2;
            }
        }
        debug_assert!(self.layout.iter().enumerate().all(|(p, &q)| p == q));
    }

    fn blocks(&self) -> (Bits, Bits, Bits, Bits) {
        let n = self.n;
        let a = (0..n).map(|i| self.tab.rows[i].x.clone()).collect();
        let b = (0..n).map(|i| self.tab.rows[i].z.clone()).collect();
        let c = (0..n).map(|i| self.tab.rows[n + i].x.clone()).collect();
        let d = (0..n).map(|i| self.tab.rows[n + i].z.clone()).collect();
        (a, b, c, d)
    }
}

/// Gate list on a line whose product (in order) equals `t` up to global phase.
pub fn tableau_to_nn_gates(t: &CliffordTableau) -> Vec<CliffordGate> {
    let n = t.n;
    let mut s = LineSynth {
        n,
        layout: (0..n).collect(),
        phys: (0..n).collect(),
        ops: Vec::new(),
        tab: t.clone(),
    };
    // Reduce t to the identity by appending gates, then invert.
    let (_, _, c, _) = s.blocks();
    let (e, r) = row_echelon_transform(&bits_transpose(&c));
    s.linear(&e);
    let (_, _, c, d) = s.blocks();
    debug_assert!(c.iter().all(|row| row[r..].iter().all(|&b| !b)));
    if r > 0 {
        // C1 X = D_K on the pivot rows of C1
        let c1: Bits = c.iter().map(|row| row[..r].to_vec()).collect();
        let (rows_e, _) = row_echelon_transform(&c1);
        let red = bits_mul(&rows_e, &c1);
        let dk: Bits = d.iter().map(|row| row[..r].to_vec()).collect();
        let red_d = bits_mul(&rows_e, &dk);
        // rows_e·C1 is [R; 0] with R invertible (full column rank)
        let rtop: Bits = red[..r].to_vec();
        let x = bits_mul(&bits_inverse(&rtop).expect("full column rank"), &red_d[..r].to_vec());
        let mut gamma = vec![vec![false; n]; n];
        for i in 0..r {
            for j in 0..r {
                gamma[i][j] = x[i][j];
            }
        }
        debug_assert!((0..r).all(|i| (0..r).all(|j| x[i][j] == x[j][i])));
        s.phase_layer(&gamma);
        for q in 0..r {
            s.gate(CliffordGate::H(q));
        }
    }
    let (_, _, c, d) = s.blocks();
    debug_assert!(c.iter().flatten().all(|&b| !b));
    s.linear(&d);
    let (a, b, c, d) = s.blocks();
    debug_assert!(a == bits_identity(n) && d == bits_identity(n) && c.iter().flatten().all(|&x| !x));
    s.phase_layer(&b);
    for q in 0..n {
        if s.tab.rows[q].negative() {
            s.gate(CliffordGate::Z(q));
        }
        if s.tab.rows[n + q].negative() {
            s.gate(CliffordGate::X(q));
        }
    }
    debug_assert_eq!(s.tab, CliffordTableau::identity(n));
    s.sort_layout();
    let mut ops: Vec<CliffordGate> = s.ops.into_iter().rev().map(CliffordGate::inverse).collect();
    ops = peephole(n, ops);
    ops
}

/// Cancel adjacent self-inverse pairs (CX·CX, CZ·CZ, H·H, X·X, Z·Z, S·S†).
fn peephole(n: usize, ops: Vec<CliffordGate>) -> Vec<CliffordGate> {
    let qubits = |g: &CliffordGate| -> Vec<usize> {
        match *g {
            CliffordGate::Cx(a, b) | CliffordGate::Cz(a, b) => vec![a, b],
            CliffordGate::H(q)
            | CliffordGate::S(q)
            | CliffordGate::Sdg(q)
            | CliffordGate::X(q)
            | CliffordGate::Z(q) => {
                vec![q]
            }
        }
    };
    let cancels = |a: &CliffordGate, b: &CliffordGate| -> bool {
        match (a, b) {
            (CliffordGate::Cz(p, q), CliffordGate::Cz(r, s)) => (p, q) == (r, s) || (p, q) == (s, r),
            (CliffordGate::S(p), CliffordGate::Sdg(q)) | (CliffordGate::Sdg(p), CliffordGate::S(q)) => p == q,
            (CliffordGate::S(_), _) | (CliffordGate::Sdg(_), _) => false,
            _ => a == b,
        }
    };
    let mut out: Vec<Option<CliffordGate>> = Vec::with_capacity(ops.len());
    let mut stacks: Vec<Vec<usize>> = vec![Vec::new(); n];
    for g in ops {
        let qs = qubits(&g);
        let prev = stacks[qs[0]].last().copied();
        let same_prev = prev.is_some_and(|i| qs.iter().all(|&q| stacks[q].last() == Some(&i)));
        if let (true, Some(i)) = (same_prev, prev) {
            if let Some(pg) = out[i] {
                if qubits(&pg).len() == qs.len() && cancels(&pg, &g) {
                    out[i] = None;
                    for &q in &qs {
                        stacks[q].pop();
                    }
                    continue;
                }
            }
        }
        for &q in &qs {
            stacks[q].push(out.len());
        }
        out.push(Some(g));
    }
    out.into_iter().flatten().collect()
}

/// Nearest-neighbour circuit on a line (H, S, S†, Paulis, adjacent CNOT,
/// CZ written as H·CNOT·H) implementing `t` up to global phase. Runs of
/// single-qubit gates are merged; the depth is at most about 30n.
pub fn tableau_to_nn_circuit(t: &CliffordTableau) -> Circuit {
    gates_to_circuit(t.n, &tableau_to_nn_gates(t))
}

fn gates_to_circuit(n: usize, gates: &[CliffordGate]) -> Circuit {
    let mut c = Circuit::new(Model::Qac0, n, 0);
    // merge single-qubit runs into one u1 per run
    let mut pending: Vec<Option<[C64; 4]>> = vec![None; n];
    let mut flat: Vec<Gate> = Vec::new();
    let flush = |q: usize, pending: &mut Vec<Option<[C64; 4]>>, flat: &mut Vec<Gate>| {
        if let Some(m) = pending[q].take() {
            let is_id =
                crate::linalg::phase_distance(&Mat::from_row_slice(2, 2, &m), &crate::linalg::identity(2)) < 1e-12;
            if !is_id {
                flat.push(Gate::u1(q, m));
            }
        }
    };
    for g in gates {
        for ir in g.to_ir() {
            match ir {
                Gate::U1 { q, matrix } => {
                    let cur = pending[q].unwrap_or(mats::ID);
                    pending[q] = Some(mats::mul(&matrix, &cur));
                }
                other => {
                    for q in other.qubits() {
                        flush(q, &mut pending, &mut flat);
                    }
                    flat.push(other);
                }
            }
        }
    }
    for q in 0..n {
        flush(q, &mut pending, &mut flat);
    }
    c.layers = vec![flat];
    // one gate per layer, then ASAP
    c.layers = c.layers[0].iter().map(|g| vec![g.clone()]).collect();
    c.compact()
}

// ---------------------------------------------------------------- teleportation compiler

/// Layers of the compiled circuit; constant for every input size.
pub const TELEPORT_DEPTH: usize = 11;

#[derive(Clone, Copy, Debug)]
pub struct TeleportOptions {
    /// Largest total qubit count the compiler may emit.
    pub cap: usize,
}

impl Default for TeleportOptions {
    fn default() -> Self {
        TeleportOptions { cap: 1 << 16 }
    }
}

/// One time slice of a nearest-neighbour circuit: single-qubit unitaries
/// followed by disjoint adjacent CNOTs.
#[derive(Clone, Debug)]
struct Segment {
    single: BTreeMap<usize, [C64; 4]>,
    cnots: Vec<(usize, usize)>,
}

fn segments(c: &Circuit) -> Vec<Segment> {
    let n = c.n_in;
    let mut segs: Vec<Segment> = Vec::new();
    // per qubit: (segment of last use, last use was a CNOT)
    let mut last: Vec<Option<(usize, bool)>> = vec![None; n];
    let ensure = |segs: &mut Vec<Segment>, s: usize| {
        while segs.len() <= s {
            segs.push(Segment {
                single: BTreeMap::new(),
                cnots: Vec::new(),
            });
        }
    };
    for g in c.gates() {
        match g {
            Gate::U1 { q, matrix } => {
                let s = match last[*q] {
                    None => 0,
                    Some((s, true)) => s + 1,
                    Some((s, false)) => s,
                };
                ensure(&mut segs, s);
                let cur = segs[s].single.get(q).copied().unwrap_or(mats::ID);
                segs[s].single.insert(*q, mats::mul(matrix, &cur));
                last[*q] = Some((s, false));
            }
            Gate::Toffoli { controls, target } if controls.len() == 1 => {
                let ctl = controls[0];
                let s = [ctl, *target]
                    .iter()
                    .map(|&q| match last[q] {
                        None => 0,
                        Some((s, true)) => s + 1,
                        Some((s, false)) => s,
                    })
                    .max()
                    .unwrap_or(0);
                ensure(&mut segs, s);
                segs[s].cnots.push((ctl, *target));
                last[ctl] = Some((s, true));
                last[*target] = Some((s, true));
            }
            other => panic!("unexpected gate {} in nearest-neighbour circuit", other.kind()),
        }
    }
    segs
}

fn segment_tableau(n: usize, seg: &Segment) -> CliffordTableau {
    let mut t = CliffordTableau::identity(n);
    for (&q, m) in &seg.single {
        t.apply_local(q, &single_qubit_images(m).expect("Clifford segment"));
    }
    for &(a, b) in &seg.cnots {
        t.apply(CliffordGate::Cx(a, b));
    }
    t
}

/// Constant-depth measurement-feedforward implementation of `t`.
///
/// The nearest-neighbour circuit is cut into k slices G_1..G_k. Column j
/// holds Bell pairs (a_j, b_j) per row with G_j applied to the b side; the
/// state hops data -> b_1 -> ... -> b_k through Bell measurements, the
/// Pauli byproducts are pushed through the remaining slices by tableau
/// conjugation into parity masks, and the result is moved back onto the
/// input qubits. Every measured qubit is reset by a Pauli conditioned on its
/// own outcome, so all ancillae end in |0⟩ on every branch.
///
/// Layout: grid of n rows by 2k+1 columns (data, a_1, b_1, ..., a_k, b_k).
/// All gates are between horizontal or vertical neighbours except the final
/// move from column 2k back to column 0, which assumes the columns close
/// into a cylinder.
pub fn teleport_compile(t: &CliffordTableau) -> Result<Circuit, CliffordError> {
    teleport_compile_with(t, TeleportOptions::default())
}

pub fn teleport_compile_with(t: &CliffordTableau, opts: TeleportOptions) -> Result<Circuit, CliffordError> {
    let n = t.n;
    let nn = tableau_to_nn_circuit(t);
    let segs = segments(&nn);
    let k = segs.len();
    let n_anc = 2 * n * k;
    if n + n_anc > opts.cap {
        return Err(CliffordError::CapExceeded {
            needed: n + n_anc,
            cap: opts.cap,
        });
    }
    let mut c = Circuit::new(Model::Measff, n, n_anc);
    c.meta.insert("nn_depth".into(), Value::from(nn.depth()));
    c.meta.insert("columns".into(), Value::from(k));
    c.meta.insert("ancillas".into(), Value::from(n_anc));
    c.meta.insert("measurements".into(), Value::from(n_anc));
    if k == 0 {
        c.layout = Some(Layout {
            grid: [n, 1],
            positions: (0..n).map(|i| (i, [i, 0])).collect(),
        });
        return Ok(c);
    }
    c.n_cbits = 2 * n * k;
    let a = |j: usize, i: usize| n + j * 2 * n + i;
    let b = |j: usize, i: usize| n + j * 2 * n + n + i;
    let prev = |j: usize, i: usize| if j == 0 { i } else { b(j - 1, i) };
    let m_prev = |j: usize, i: usize| j * 2 * n + i;
    let m_a = |j: usize, i: usize| j * 2 * n + n + i;

    let mut layers: Vec<Vec<Gate>> = vec![Vec::new(); TELEPORT_DEPTH];
    for j in 0..k {
        for i in 0..n {
            layers[0].push(Gate::h(a(j, i)));
            layers[1].push(Gate::cnot(a(j, i), b(j, i)));
            layers[4].push(Gate::cnot(prev(j, i), a(j, i)));
            layers[5].push(Gate::h(prev(j, i)));
            layers[6].push(Gate::Measure {
                q: prev(j, i),
                cbit: m_prev(j, i),
            });
            layers[6].push(Gate::Measure {
                q: a(j, i),
                cbit: m_a(j, i),
            });
        }
        for (&q, m) in &segs[j].single {
            layers[2].push(Gate::u1(b(j, q), *m));
        }
        for &(ctl, tq) in &segs[j].cnots {
            layers[3].push(Gate::cnot(b(j, ctl), b(j, tq)));
        }
    }
    // suffix Cliffords: suffix[j] = G_k ... G_j
    let seg_tabs: Vec<CliffordTableau> = segs.iter().map(|s| segment_tableau(n, s)).collect();
    let mut suffix = vec![CliffordTableau::identity(n); k + 1];
    for j in (0..k).rev() {
        suffix[j] = seg_tabs[j].then(&suffix[j + 1]);
    }
    let mut xmask: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut zmask: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..k {
        for i in 0..n {
            // outcome m_a contributes X_i, outcome m_prev contributes Z_i
            for (bit, p) in [(m_a(j, i), 'X'), (m_prev(j, i), 'Z')] {
                let img = suffix[j].conjugate(&PauliString::single(n, i, p));
                for q in 0..n {
                    if img.x[q] {
                        xmask[q].push(bit);
                    }
                    if img.z[q] {
                        zmask[q].push(bit);
                    }
                }
            }
        }
    }
    let last = k - 1;
    for q in 0..n {
        if !xmask[q].is_empty() {
            xmask[q].sort_unstable();
            layers[7].push(Gate::Cpauli {
                pauli: Pauli::X,
                q: b(last, q),
                cbits: xmask[q].clone(),
            });
        }
        if !zmask[q].is_empty() {
            zmask[q].sort_unstable();
            layers[8].push(Gate::Cpauli {
                pauli: Pauli::Z,
                q: b(last, q),
                cbits: zmask[q].clone(),
            });
        }
    }
    for j in 0..k {
        for i in 0..n {
            layers[7].push(Gate::Cpauli {
                pauli: Pauli::X,
                q: prev(j, i),
                cbits: vec![m_prev(j, i)],
            });
            layers[7].push(Gate::Cpauli {
                pauli: Pauli::X,
                q: a(j, i),
                cbits: vec![m_a(j, i)],
            });
        }
    }
    // move the output from b_k back onto the (now |0⟩) data qubits
    for i in 0..n {
        layers[9].push(Gate::cnot(b(last, i), i));
        layers[10].push(Gate::cnot(i, b(last, i)));
    }
    c.layers = layers;
    let mut positions = BTreeMap::new();
    for i in 0..n {
        positions.insert(i, [i, 0]);
        for j in 0..k {
            positions.insert(a(j, i), [i, 2 * j + 1]);
            positions.insert(b(j, i), [i, 2 * j + 2]);
        }
    }
    c.layout = Some(Layout {
        grid: [n, 2 * k + 1],
        positions,
    });
    c.meta.insert("layout_wraps".into(), Value::Bool(true));
    Ok(c)
}

/// Replace every FANOUT layer by the teleport-compiled CNOT product it
/// implements. Ancillae are shared across layers since each gadget returns
/// them to |0⟩ on every branch.
pub fn fanout_layer_lower(c: &Circuit) -> Result<Circuit, CliffordError> {
    for g in c.gates() {
        match g {
            Gate::Toffoli { .. } => {
                return Err(CliffordError::Unsupported(
                    "TOFFOLI cannot be lowered to measurement feedforward".into(),
                ))
            }
            Gate::Unitary { .. } => return Err(CliffordError::Unsupported("dense unitary block".into())),
            _ => {}
        }
    }
    if !c.gates().any(|g| matches!(g, Gate::Fanout { .. })) {
        return Ok(c.clone());
    }
    let base = c.total_qubits();
    let mut gadgets: Vec<(usize, Circuit, Vec<usize>)> = Vec::new();
    let mut pool = 0usize;
    for (li, layer) in c.layers.iter().enumerate() {
        let fan: Vec<&Gate> = layer.iter().filter(|g| matches!(g, Gate::Fanout { .. })).collect();
        if fan.is_empty() {
            continue;
        }
        let mut qs: Vec<usize> = fan.iter().flat_map(|g| g.qubits()).collect();
        qs.sort_unstable();
        let local = |q: usize| qs.binary_search(&q).expect("fanout qubit");
        let mut t = CliffordTableau::identity(qs.len());
        for g in &fan {
            if let Gate::Fanout { source, targets } = g {
                for &tq in targets {
                    t.apply(CliffordGate::Cx(local(*source), local(tq)));
                }
            }
        }
        let gadget = teleport_compile(&t)?;
        pool = pool.max(gadget.n_anc);
        gadgets.push((li, gadget, qs));
    }
    let mut out = Circuit::new(Model::Measff, c.n_in, c.n_anc + pool);
    out.meta = c.meta.clone();
    out.n_cbits = c.n_cbits;
    let mut gi = gadgets.into_iter().peekable();
    for (li, layer) in c.layers.iter().enumerate() {
        let rest: Vec<Gate> = layer
            .iter()
            .filter(|g| !matches!(g, Gate::Fanout { .. }))
            .cloned()
            .collect();
        match gi.peek() {
            Some((gl, _, _)) if *gl == li => {
                let (_, gadget, qs) = gi.next().expect("peeked");
                let map: Vec<usize> = (0..gadget.total_qubits())
                    .map(|q| if q < qs.len() { qs[q] } else { base + q - qs.len() })
                    .collect();
                let cb = out.n_cbits;
                let mut emb = gadget.embed(&map, out.n_in, out.n_anc, cb);
                emb.n_cbits = cb + gadget.n_cbits;
                if emb.layers.is_empty() {
                    emb.layers.push(Vec::new());
                }
                emb.layers[0].extend(rest);
                out.n_cbits = emb.n_cbits;
                out.layers.extend(emb.layers);
            }
            _ => out.layers.push(rest),
        }
    }
    out.meta.insert("lowered_from".into(), Value::from(c.model.name()));
    out.meta.insert("ancillas".into(), Value::from(out.n_anc));
    Ok(out)
}

// ---------------------------------------------------------------- symbolic branch checker

/// Affine GF(2) function of the random measurement outcomes.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Affine {
    constant: bool,
    vars: Vec<u64>,
}

impl Affine {
    fn zero() -> Affine {
        Affine {
            constant: false,
            vars: Vec::new(),
        }
    }
    fn var(v: usize) -> Affine {
        let mut vars = vec![0u64; v / 64 + 1];
        vars[v / 64] |= 1 << (v % 64);
        Affine { constant: false, vars }
    }
    fn add(&mut self, o: &Affine) {
        self.constant ^= o.constant;
        if self.vars.len() < o.vars.len() {
            self.vars.resize(o.vars.len(), 0);
        }
        for (a, b) in self.vars.iter_mut().zip(&o.vars) {
            *a ^= b;
        }
    }
    fn is_constant(&self) -> bool {
        self.vars.iter().all(|&w| w == 0)
    }
}

/// Bit-packed Pauli string, same convention as [`PauliString`].
#[derive(Clone, Debug, PartialEq, Eq)]
struct Packed {
    x: Vec<u64>,
    z: Vec<u64>,
    e: u8,
}

impl Packed {
    fn identity(n: usize) -> Packed {
        let w = n.div_ceil(64);
        Packed {
            x: vec![0; w],
            z: vec![0; w],
            e: 0,
        }
    }
    fn single(n: usize, q: usize, p: char) -> Packed {
        let mut r = Packed::identity(n);
        match p {
            'X' => r.set(q, true, false),
            _ => r.set(q, false, true),
        }
        r
    }
    fn from_pauli(p: &PauliString) -> Packed {
        let mut r = Packed::identity(p.n());
        for q in 0..p.n() {
            r.set(q, p.x[q], p.z[q]);
        }
        r.e = p.e;
        r
    }
    fn xbit(&self, q: usize) -> bool {
        self.x[q / 64] >> (q % 64) & 1 == 1
    }
    fn zbit(&self, q: usize) -> bool {
        self.z[q / 64] >> (q % 64) & 1 == 1
    }
    fn set(&mut self, q: usize, x: bool, z: bool) {
        let m = 1u64 << (q % 64);
        let w = q / 64;
        self.x[w] = (self.x[w] & !m) | if x { m } else { 0 };
        self.z[w] = (self.z[w] & !m) | if z { m } else { 0 };
    }
    fn mul_assign(&mut self, o: &Packed) {
        let mut cross = 0u32;
        for w in 0..self.x.len() {
            cross += (self.z[w] & o.x[w]).count_ones();
            self.x[w] ^= o.x[w];
            self.z[w] ^= o.z[w];
        }
        self.e = ((self.e as u32 + o.e as u32 + 2 * cross) % 4) as u8;
    }
    fn commutes(&self, o: &Packed) -> bool {
        let s: u32 = (0..self.x.len())
            .map(|w| ((self.x[w] & o.z[w]) ^ (self.z[w] & o.x[w])).count_ones())
            .sum();
        s % 2 == 0
    }
    fn negative(&self) -> bool {
        let y: u32 = self.x.iter().zip(&self.z).map(|(a, b)| (a & b).count_ones()).sum();
        (self.e as u32 + 4 - y % 4) % 4 == 2
    }
    fn same_bits(&self, o: &Packed) -> bool {
        self.x == o.x && self.z == o.z
    }
    fn conj(&mut self, map: &LocalMap) {
        let mut p = PauliString {
            x: vec![false; map.k],
            z: vec![false; map.k],
            e: 0,
        };
        for j in 0..map.k {
            p.x[j] = self.xbit(map.qs[j]);
            p.z[j] = self.zbit(map.qs[j]);
        }
        let local = LocalMap {
            qs: [0, 1],
            k: map.k,
            img: map.img,
        };
        local.apply(&mut p);
        for j in 0..map.k {
            self.set(map.qs[j], p.x[j], p.z[j]);
        }
        self.e = (self.e + p.e) % 4;
    }
}

/// Stabilizer state whose signs are affine in the outcome variables,
/// run on the circuit qubits plus an n_in-qubit reference holding the
/// other halves of Bell pairs with the inputs.
struct SymbolicState {
    nq: usize,
    destab: Vec<Packed>,
    stab: Vec<Packed>,
    signs: Vec<Affine>,
    cbits: Vec<Affine>,
    n_vars: usize,
}

impl SymbolicState {
    fn new(c: &Circuit) -> SymbolicState {
        let total = c.total_qubits();
        let nq = total + c.n_in;
        let mut destab = Vec::new();
        let mut stab = Vec::new();
        for i in 0..c.n_in {
            let r = total + i;
            let mut xx = Packed::identity(nq);
            xx.set(i, true, false);
            xx.set(r, true, false);
            let mut zz = Packed::identity(nq);
            zz.set(i, false, true);
            zz.set(r, false, true);
            stab.push(xx);
            destab.push(Packed::single(nq, r, 'Z'));
            stab.push(zz);
            destab.push(Packed::single(nq, i, 'X'));
        }
        for q in c.n_in..total {
            stab.push(Packed::single(nq, q, 'Z'));
            destab.push(Packed::single(nq, q, 'X'));
        }
        let m = stab.len();
        SymbolicState {
            nq,
            destab,
            stab,
            signs: vec![Affine::zero(); m],
            cbits: vec![Affine::zero(); c.n_cbits],
            n_vars: 0,
        }
    }

    fn conj(&mut self, qs: &[usize], img: &[PauliString]) {
        let map = LocalMap::new(qs, img);
        for p in self.destab.iter_mut().chain(self.stab.iter_mut()) {
            p.conj(&map);
        }
    }

    fn gate(&mut self, g: CliffordGate) {
        let (qs, img) = g.local();
        self.conj(&qs, &img);
    }

    /// X_q or Z_q conditioned on `cond`: flips the signs of generators
    /// that anticommute with it.
    fn conditional_pauli(&mut self, q: usize, pauli: Pauli, cond: &Affine) {
        for (s, sign) in self.stab.iter().zip(self.signs.iter_mut()) {
            let anti = match pauli {
                Pauli::X => s.zbit(q),
                Pauli::Z => s.xbit(q),
            };
            if anti {
                sign.add(cond);
            }
        }
    }

    fn measure_z(&mut self, q: usize) -> Affine {
        let anti: Vec<usize> = (0..self.stab.len()).filter(|&i| self.stab[i].xbit(q)).collect();
        if let Some(&p) = anti.first() {
            let sp = self.stab[p].clone();
            let sign_p = self.signs[p].clone();
            for &i in &anti[1..] {
                self.stab[i].mul_assign(&sp);
                self.signs[i].add(&sign_p);
            }
            for i in 0..self.destab.len() {
                if i != p && self.destab[i].xbit(q) {
                    self.destab[i].mul_assign(&sp);
                }
            }
            self.destab[p] = sp;
            self.stab[p] = Packed::single(self.nq, q, 'Z');
            let v = Affine::var(self.n_vars);
            self.n_vars += 1;
            self.signs[p] = v.clone();
            v
        } else {
            let zq = Packed::single(self.nq, q, 'Z');
            let (prod, sign) = self.express(&zq).expect("Z commutes with the group");
            // prod = ±Z_q; outcome bit = sign of the eigenvalue
            let mut out = sign;
            out.constant ^= prod.negative();
            out
        }
    }

    /// Write a group element as ±Π stab_i; returns the product and the
    /// accumulated sign function, or None if `p` is not in the group.
    fn express(&self, p: &Packed) -> Option<(Packed, Affine)> {
        if self.stab.iter().any(|s| !s.commutes(p)) {
            return None;
        }
        let mut prod = Packed::identity(self.nq);
        let mut sign = Affine::zero();
        for i in 0..self.stab.len() {
            if !self.destab[i].commutes(p) {
                prod.mul_assign(&self.stab[i]);
                sign.add(&self.signs[i]);
            }
        }
        if !prod.same_bits(p) {
            return None;
        }
        Some((prod, sign))
    }
}

fn symbolic_run(c: &Circuit) -> Result<SymbolicState, CliffordError> {
    crate::circuit::validate(c).map_err(|e| CliffordError::NotClifford(e.to_string()))?;
    let mut st = SymbolicState::new(c);
    for g in c.gates() {
        match g {
            Gate::U1 { q, matrix } => {
                let img = single_qubit_images(matrix).ok_or_else(|| CliffordError::NotClifford("u1".into()))?;
                st.conj(&[*q], &img);
            }
            Gate::Toffoli { controls, target } if controls.len() <= 1 => match controls.first() {
                Some(&ctl) => st.gate(CliffordGate::Cx(ctl, *target)),
                None => st.gate(CliffordGate::X(*target)),
            },
            Gate::Fanout { source, targets } => {
                for &tq in targets {
                    st.gate(CliffordGate::Cx(*source, tq));
                }
            }
            Gate::Measure { q, cbit } => {
                let v = st.measure_z(*q);
                st.cbits[*cbit] = v;
            }
            Gate::Cpauli { pauli, q, cbits } => {
                let mut cond = Affine::zero();
                for &b in cbits {
                    cond.add(&st.cbits[b]);
                }
                st.conditional_pauli(*q, *pauli, &cond);
            }
            other => return Err(CliffordError::NotClifford(other.kind().into())),
        }
    }
    Ok(st)
}

/// True when every measurement branch of `c` applies the same linear map
/// up to a phase (all final stabilizer signs are outcome-independent).
/// False for non-Clifford circuits.
pub fn branch_independent(c: &Circuit) -> bool {
    match symbolic_run(c) {
        Ok(st) => st.signs.iter().all(Affine::is_constant),
        Err(_) => false,
    }
}

/// Symbolic proof that on every measurement branch `c` maps each input ψ
/// to t|ψ⟩ (up to phase) with all ancillae in |0⟩.
pub fn certify_implements(c: &Circuit, t: &CliffordTableau) -> Result<(), String> {
    if t.n != c.n_in {
        return Err(format!("tableau on {} qubits, circuit has {} inputs", t.n, c.n_in));
    }
    let st = symbolic_run(c).map_err(|e| e.to_string())?;
    let total = c.total_qubits();
    let n = c.n_in;
    let lift = |img: &PauliString, refp: char, i: usize| -> Packed {
        let mut x = vec![false; st.nq];
        let mut z = vec![false; st.nq];
        x[..n].copy_from_slice(&img.x);
        z[..n].copy_from_slice(&img.z);
        if refp == 'X' {
            x[total + i] = true;
        } else {
            z[total + i] = true;
        }
        Packed::from_pauli(&PauliString::hermitian(x, z, img.negative()))
    };
    let mut targets = Vec::new();
    for i in 0..n {
        targets.push(lift(t.image_x(i), 'X', i));
        targets.push(lift(t.image_z(i), 'Z', i));
    }
    for q in n..total {
        targets.push(Packed::single(st.nq, q, 'Z'));
    }
    for (k, tp) in targets.iter().enumerate() {
        let (prod, sign) = st
            .express(tp)
            .ok_or_else(|| format!("target stabilizer {k} not in the final group"))?;
        if !sign.is_constant() {
            return Err(format!("target stabilizer {k} has an outcome-dependent sign"));
        }
        if prod.negative() ^ sign.constant != tp.negative() {
            return Err(format!("target stabilizer {k} has the wrong sign"));
        }
    }
    Ok(())
}
