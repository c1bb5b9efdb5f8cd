//! Seeded builders for the unitary ensembles: Haar, Clifford, Pauli,
//! Clifford-permutation-phase-Clifford (CPFC), glued brickworks and the
//! PRF-keyed glued CPFC.
//!
//! Every builder is a pure function of its spec (seed included). Each
//! sample comes in two forms: the abstract circuit, made of dense
//! `unitary` blocks, and a lowered circuit using only the five native gate
//! kinds. [`sample_unitary`] is the fast dense path used by Monte Carlo.

use crate::circuit::{Circuit, Gate, IrError, Model};
use crate::clifford::{random_clifford, tableau_to_nn_circuit, teleport_compile, CliffordError, PauliString};
use crate::fields::{
    bpr_prf_bit, bpr_prf_eval, derive_seed, int_to_bits, rng_for, sample_twise_family, BprKey, BprParams, FieldError,
    PolyFn,
};
use crate::linalg::{haar_unitary, identity, Mat, C64, ONE, ZERO};
use crate::sim::{circuit_unitary, SimError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("n must be even (got {0})")]
    OddN(usize),
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error("lowering unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Clifford(#[from] CliffordError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Haar,
    Clifford,
    Pauli,
    Cpfc,
    Glued,
    Pru,
    Singleton,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Haar => "haar",
            Kind::Clifford => "clifford",
            Kind::Pauli => "pauli",
            Kind::Cpfc => "cpfc",
            Kind::Glued => "glued",
            Kind::Pru => "pru",
            Kind::Singleton => "singleton",
        }
    }
}

impl std::str::FromStr for Kind {
    type Err = String;
    fn from_str(s: &str) -> Result<Kind, String> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown ensemble kind {s:?}"))
    }
}

/// Where the random functions behind F and P come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// Polynomials over GF(2^s), 2t-wise independent.
    Twise,
    /// Rounded subset-product PRF at toy parameters.
    Prf,
    /// Explicit uniformly random table.
    Table,
}

impl std::str::FromStr for SourceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<SourceKind, String> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown source {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub kind: Kind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub kind: Kind,
    pub n: usize,
    /// Moment target; sets the independence (2t) of twise sources.
    pub t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<PatchSpec>,
    pub source: SourceKind,
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn new(kind: Kind, n: usize, t: usize, seed: u64) -> EnsembleSpec {
        EnsembleSpec {
            kind,
            n,
            t,
            patch: None,
            source: if kind == Kind::Pru {
                SourceKind::Prf
            } else {
                SourceKind::Twise
            },
            seed,
        }
    }

    pub fn with_patch(mut self, size: usize, kind: Kind) -> EnsembleSpec {
        self.patch = Some(PatchSpec { size, kind });
        self
    }

    pub fn with_source(mut self, source: SourceKind) -> EnsembleSpec {
        self.source = source;
        self
    }

    pub fn with_seed(&self, seed: u64) -> EnsembleSpec {
        EnsembleSpec { seed, ..self.clone() }
    }

    /// The spec of the i-th Monte Carlo draw.
    pub fn draw(&self, i: u64) -> EnsembleSpec {
        self.with_seed(derive_seed(self.seed, &[0xD7A3, i]))
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.n == 0 {
            return Err(EnsembleError::Invalid("n must be at least 1".into()));
        }
        if self.t == 0 {
            return Err(EnsembleError::Invalid("t must be at least 1".into()));
        }
        match self.kind {
            Kind::Cpfc | Kind::Pru if self.n % 2 == 1 => return Err(EnsembleError::OddN(self.n)),
            Kind::Glued => {
                let p = self
                    .patch
                    .ok_or_else(|| EnsembleError::Invalid("glued ensemble needs a patch".into()))?;
                check_patch(self.n, p.size)?;
                if matches!(p.kind, Kind::Glued | Kind::Pru) {
                    return Err(EnsembleError::Invalid("patch kind must not itself be glued".into()));
                }
            }
            Kind::Pru => {
                if let Some(p) = self.patch {
                    check_patch(self.n, p.size)?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn check_patch(n: usize, size: usize) -> Result<(), EnsembleError> {
    if size < 2 || size % 2 == 1 {
        return Err(EnsembleError::Invalid(format!(
            "patch size must be even and at least 2 (got {size})"
        )));
    }
    if size > n {
        return Err(EnsembleError::Invalid(format!("patch size {size} exceeds n = {n}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lowering {
    None,
    Qac0f,
    Measff,
}

impl std::str::FromStr for Lowering {
    type Err = String;
    fn from_str(s: &str) -> Result<Lowering, String> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown lowering {s:?}"))
    }
}

// ---------------------------------------------------------------- random functions

/// A function from `in_bits`-bit to `out_bits`-bit integers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum BoolFn {
    Const {
        in_bits: u32,
        out_bits: u32,
        value: u64,
    },
    Twise {
        in_bits: u32,
        poly: PolyFn,
    },
    Prf {
        in_bits: u32,
        out_bits: u32,
        key: BprKey,
    },
    Table {
        in_bits: u32,
        out_bits: u32,
        table: Vec<u64>,
    },
}

/// Field degree for a k-wise family on `in_bits` inputs with `out_bits`
/// outputs: inputs must embed, outputs must fit, and k coefficients need
/// k < 2^s.
pub fn twise_degree(in_bits: u32, out_bits: u32, k: usize) -> u32 {
    let mut s = 1;
    while (1u128 << s) <= k as u128 {
        s += 1;
    }
    s.max(in_bits).max(out_bits)
}

impl BoolFn {
    /// Draw a function. `k` is the independence level of a twise source.
    pub fn sample(
        source: SourceKind,
        k: usize,
        in_bits: u32,
        out_bits: u32,
        seed: u64,
    ) -> Result<BoolFn, EnsembleError> {
        match source {
            SourceKind::Twise => {
                let s = twise_degree(in_bits, out_bits, k);
                Ok(BoolFn::Twise {
                    in_bits,
                    poly: sample_twise_family(s, k, out_bits, seed)?,
                })
            }
            SourceKind::Prf => {
                if out_bits as usize > 16 {
                    return Err(EnsembleError::Invalid(
                        "PRF source yields at most 16 output bits".into(),
                    ));
                }
                let params = BprParams {
                    l: in_bits as usize,
                    ..BprParams::default()
                };
                Ok(BoolFn::Prf {
                    in_bits,
                    out_bits,
                    key: BprKey::sample(params, seed)?,
                })
            }
            SourceKind::Table => {
                let mut rng = rng_for(seed, &[0x7AB1E, in_bits as u64, out_bits as u64]);
                let mask = (1u64 << out_bits) - 1;
                let table = (0..1u64 << in_bits).map(|_| rng.random::<u64>() & mask).collect();
                Ok(BoolFn::Table {
                    in_bits,
                    out_bits,
                    table,
                })
            }
        }
    }

    pub fn constant(in_bits: u32, out_bits: u32, value: u64) -> BoolFn {
        BoolFn::Const {
            in_bits,
            out_bits,
            value,
        }
    }

    pub fn in_bits(&self) -> u32 {
        match self {
            BoolFn::Const { in_bits, .. }
            | BoolFn::Twise { in_bits, .. }
            | BoolFn::Prf { in_bits, .. }
            | BoolFn::Table { in_bits, .. } => *in_bits,
        }
    }

    pub fn out_bits(&self) -> u32 {
        match self {
            BoolFn::Twise { poly, .. } => poly.out_bits(),
            BoolFn::Const { out_bits, .. } | BoolFn::Prf { out_bits, .. } | BoolFn::Table { out_bits, .. } => *out_bits,
        }
    }

    pub fn eval(&self, x: u64) -> u64 {
        match self {
            BoolFn::Const { value, .. } => *value,
            BoolFn::Twise { poly, .. } => poly.eval_bits(x),
            BoolFn::Table { table, .. } => table[x as usize],
            BoolFn::Prf { in_bits, out_bits, key } => {
                let input = int_to_bits(x, *in_bits as usize);
                if *out_bits == 1 {
                    bpr_prf_bit(key, &input).expect("key sized for input") as u64
                } else {
                    let out = bpr_prf_eval(key, &input).expect("key sized for input");
                    out.iter()
                        .flatten()
                        .take(*out_bits as usize)
                        .enumerate()
                        .fold(0, |acc, (j, v)| acc | ((v & 1) << j))
                }
            }
        }
    }

    pub fn table(&self) -> Vec<u64> {
        (0..1u64 << self.in_bits()).map(|x| self.eval(x)).collect()
    }
}

// ---------------------------------------------------------------- phase oracle

/// |x⟩ -> (-1)^{f(x)} |x⟩ for a one-bit f.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseOracle {
    pub n: usize,
    pub f: BoolFn,
}

/// Phase oracle from a k-wise (twise), PRF or table source.
pub fn phase_oracle_f(n: usize, source: SourceKind, k: usize, seed: u64) -> Result<PhaseOracle, EnsembleError> {
    Ok(PhaseOracle {
        n,
        f: BoolFn::sample(source, k, n as u32, 1, seed)?,
    })
}

impl PhaseOracle {
    pub fn from_fn(n: usize, f: BoolFn) -> Result<PhaseOracle, EnsembleError> {
        if f.in_bits() as usize != n || f.out_bits() != 1 {
            return Err(EnsembleError::Invalid(
                "phase oracle needs an n-bit to 1-bit function".into(),
            ));
        }
        Ok(PhaseOracle { n, f })
    }

    pub fn signs(&self) -> Vec<f64> {
        self.f
            .table()
            .iter()
            .map(|&b| if b & 1 == 1 { -1.0 } else { 1.0 })
            .collect()
    }

    pub fn matrix(&self) -> Mat {
        let s = self.signs();
        Mat::from_fn(s.len(), s.len(), |i, j| if i == j { C64::new(s[i], 0.0) } else { ZERO })
    }

    pub fn abstract_circuit(&self) -> Circuit {
        let mut c = Circuit::new(Model::Qac0, self.n, 0);
        c.push(vec![dense_gate((0..self.n).collect(), &self.matrix())]);
        c.meta.insert("component".into(), Value::from("phase_oracle"));
        c.meta
            .insert("function".into(), serde_json::to_value(&self.f).expect("serializes"));
        c
    }

    /// One multi-controlled Z per marked input, with X conjugation toggled
    /// between consecutive marked inputs.
    pub fn lowered_circuit(&self) -> Circuit {
        let n = self.n;
        let mut c = Circuit::new(Model::Qac0, n, 0);
        let marked: Vec<usize> = self
            .signs()
            .iter()
            .enumerate()
            .filter(|(_, &s)| s < 0.0)
            .map(|(x, _)| x)
            .collect();
        if n == 1 {
            let neg = C64::new(-1.0, 0.0);
            let m = match marked.as_slice() {
                [] => return c,
                [0] => [neg, ZERO, ZERO, ONE],
                [1] => [ONE, ZERO, ZERO, neg],
                _ => [neg, ZERO, ZERO, neg],
            };
            c.push(vec![Gate::u1(0, m)]);
            return c;
        }
        let mut flips = 0usize;
        let all = (1usize << n) - 1;
        let target = n - 1;
        for x in marked {
            flip_layer(&mut c, n, flips ^ (!x & all));
            flips = !x & all;
            c.push(vec![Gate::h(target)]);
            c.push(vec![Gate::Toffoli {
                controls: (0..n - 1).collect(),
                target,
            }]);
            c.push(vec![Gate::h(target)]);
        }
        flip_layer(&mut c, n, flips);
        c.compact()
    }
}

/// X on every qubit whose bit (MSB = qubit 0) is set in `mask`.
fn flip_layer(c: &mut Circuit, width: usize, mask: usize) {
    flip_layer_at(c, 0, width, mask);
}

fn flip_layer_at(c: &mut Circuit, base: usize, width: usize, mask: usize) {
    let layer: Vec<Gate> = (0..width)
        .filter(|j| mask >> (width - 1 - j) & 1 == 1)
        .map(|j| Gate::x(base + j))
        .collect();
    if !layer.is_empty() {
        c.push(layer);
    }
}

fn dense_gate(qubits: Vec<usize>, m: &Mat) -> Gate {
    let d = m.nrows();
    Gate::Unitary {
        qubits,
        matrix: (0..d * d).map(|k| m[(k / d, k % d)]).collect(),
    }
}

// ---------------------------------------------------------------- Feistel permutation

/// Two-round Feistel permutation on n = 2h qubits. The high half is x1
/// (qubits 0..h), the low half x2. Applies
/// S_R: (x1, x2) -> (x1, x2 ^ f_R(x1)), then S_L: (x1, x2) -> (x1 ^ f_L(x2), x2).
#[derive(Clone, Debug, PartialEq)]
pub struct Feistel {
    pub n: usize,
    pub f_left: BoolFn,
    pub f_right: BoolFn,
}

pub fn permutation_p(n: usize, source: SourceKind, k: usize, seed: u64) -> Result<Feistel, EnsembleError> {
    if n % 2 == 1 {
        return Err(EnsembleError::OddN(n));
    }
    let h = (n / 2) as u32;
    Feistel::from_fns(
        n,
        BoolFn::sample(source, k, h, h, derive_seed(seed, &[0x1EF7]))?,
        BoolFn::sample(source, k, h, h, derive_seed(seed, &[0x5167]))?,
    )
}

impl Feistel {
    pub fn from_fns(n: usize, f_left: BoolFn, f_right: BoolFn) -> Result<Feistel, EnsembleError> {
        if n % 2 == 1 {
            return Err(EnsembleError::OddN(n));
        }
        let h = (n / 2) as u32;
        for f in [&f_left, &f_right] {
            if f.in_bits() != h || f.out_bits() != h {
                return Err(EnsembleError::Invalid(format!(
                    "round functions must map {h} bits to {h} bits"
                )));
            }
        }
        Ok(Feistel { n, f_left, f_right })
    }

    pub fn apply(&self, x: u64) -> u64 {
        let h = self.n / 2;
        let lo = (1u64 << h) - 1;
        let (x1, x2) = (x >> h, x & lo);
        let x2 = x2 ^ self.f_right.eval(x1);
        let x1 = x1 ^ self.f_left.eval(x2);
        (x1 << h) | x2
    }

    pub fn table(&self) -> Vec<u64> {
        (0..1u64 << self.n).map(|x| self.apply(x)).collect()
    }

    pub fn matrix(&self) -> Mat {
        let d = 1usize << self.n;
        let mut m = Mat::zeros(d, d);
        for (x, y) in self.table().into_iter().enumerate() {
            m[(y as usize, x)] = ONE;
        }
        m
    }

    pub fn abstract_circuit(&self) -> Circuit {
        let mut c = Circuit::new(Model::Qac0, self.n, 0);
        c.push(vec![dense_gate((0..self.n).collect(), &self.matrix())]);
        c.meta.insert("component".into(), Value::from("feistel"));
        c.meta
            .insert("f_left".into(), serde_json::to_value(&self.f_left).expect("serializes"));
        c.meta.insert(
            "f_right".into(),
            serde_json::to_value(&self.f_right).expect("serializes"),
        );
        c
    }

    /// Per round and per control value v with f(v) != 0: TOFFOLI from the
    /// control half onto one ancilla, FANOUT onto the set bits of f(v),
    /// TOFFOLI again to clear the ancilla.
    pub fn lowered_circuit(&self) -> Circuit {
        let n = self.n;
        let h = n / 2;
        let anc = n;
        let mut c = Circuit::new(Model::Qac0f, n, 1);
        // (control base, target base, function)
        for (cb, tb, f) in [(0, h, &self.f_right), (h, 0, &self.f_left)] {
            let all = (1usize << h) - 1;
            let mut flips = 0usize;
            for v in 0..1usize << h {
                let out = f.eval(v as u64) as usize;
                if out == 0 {
                    continue;
                }
                flip_layer_at(&mut c, cb, h, flips ^ (!v & all));
                flips = !v & all;
                let toffoli = Gate::Toffoli {
                    controls: (cb..cb + h).collect(),
                    target: anc,
                };
                c.push(vec![toffoli.clone()]);
                let targets: Vec<usize> = (0..h).filter(|j| out >> (h - 1 - j) & 1 == 1).map(|j| tb + j).collect();
                c.push(vec![Gate::Fanout { source: anc, targets }]);
                c.push(vec![toffoli]);
            }
            flip_layer_at(&mut c, cb, h, flips);
        }
        c.compact()
    }
}

// ---------------------------------------------------------------- CPFC

/// Components of one CPFC draw, applied C1, F, P, C2 (matrix C2·P·F·C1).
#[derive(Clone, Debug)]
pub struct Cpfc {
    pub n: usize,
    pub c1: crate::clifford::CliffordTableau,
    pub phase: PhaseOracle,
    pub perm: Feistel,
    pub c2: crate::clifford::CliffordTableau,
}

pub fn sample_cpfc(n: usize, t: usize, source: SourceKind, seed: u64) -> Result<Cpfc, EnsembleError> {
    if n % 2 == 1 {
        return Err(EnsembleError::OddN(n));
    }
    let k = 2 * t;
    Ok(Cpfc {
        n,
        c1: random_clifford(n, derive_seed(seed, &[0xC1])),
        phase: phase_oracle_f(n, source, k, derive_seed(seed, &[0xF0]))?,
        perm: permutation_p(n, source, k, derive_seed(seed, &[0x90]))?,
        c2: random_clifford(n, derive_seed(seed, &[0xC2])),
    })
}

impl Cpfc {
    pub fn matrix(&self) -> Mat {
        let u1 = self.c1.unitary();
        let signs = self.phase.signs();
        let perm = self.perm.table();
        let d = 1usize << self.n;
        let mut mid = Mat::zeros(d, d);
        for x in 0..d {
            let y = perm[x] as usize;
            for j in 0..d {
                mid[(y, j)] = u1[(x, j)] * signs[x];
            }
        }
        self.c2.unitary() * mid
    }

    pub fn circuit(&self, lower: Lowering) -> Result<Circuit, EnsembleError> {
        let parts = match lower {
            Lowering::None => {
                let cl = |t: &crate::clifford::CliffordTableau| {
                    let mut c = Circuit::new(Model::Qac0, self.n, 0);
                    c.push(vec![dense_gate((0..self.n).collect(), &t.unitary())]);
                    c
                };
                [
                    cl(&self.c1),
                    self.phase.abstract_circuit(),
                    self.perm.abstract_circuit(),
                    cl(&self.c2),
                ]
            }
            _ => [
                lower_clifford(&self.c1, lower)?,
                self.phase.lowered_circuit(),
                self.perm.lowered_circuit(),
                lower_clifford(&self.c2, lower)?,
            ],
        };
        let mut c = parts[0].clone();
        for p in &parts[1..] {
            c = c.then(p)?;
        }
        c.meta.clear();
        c.meta.insert("component".into(), Value::from("cpfc"));
        c.meta.insert("order".into(), Value::from("C1,F,P,C2"));
        c.meta.insert(
            "phase_function".into(),
            serde_json::to_value(&self.phase.f).expect("serializes"),
        );
        c.meta.insert(
            "f_left".into(),
            serde_json::to_value(&self.perm.f_left).expect("serializes"),
        );
        c.meta.insert(
            "f_right".into(),
            serde_json::to_value(&self.perm.f_right).expect("serializes"),
        );
        Ok(c)
    }
}

fn lower_clifford(t: &crate::clifford::CliffordTableau, lower: Lowering) -> Result<Circuit, EnsembleError> {
    match lower {
        Lowering::Measff => Ok(teleport_compile(t)?),
        _ => Ok(tableau_to_nn_circuit(t)),
    }
}

// ---------------------------------------------------------------- gluing

/// One patch of a glued brickwork: patch qubit j sits on `qubits[j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    pub layer: usize,
    pub pos: usize,
    pub qubits: Vec<usize>,
    pub seed: u64,
}

/// Patch placements for n qubits and patch size l. Layer 0 tiles [0, l),
/// [l, 2l), ... and layer 1 is offset by l/2. When l divides n the two
/// half-size end segments of layer 1 form one wrapped patch; otherwise
/// the last patch of a layer is truncated to the qubits that remain.
pub fn glue_plan(n: usize, l: usize, seed: u64) -> Result<Vec<Placement>, EnsembleError> {
    check_patch(n, l)?;
    let mut segs: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut start = 0;
    while start < n {
        segs.push((0, (start..(start + l).min(n)).collect()));
        start += l;
    }
    let half = l / 2;
    if n % l == 0 {
        let mut start = half;
        while start + l <= n {
            segs.push((1, (start..start + l).collect()));
            start += l;
        }
        segs.push((1, (n - half..n).chain(0..half).collect()));
    } else {
        segs.push((1, (0..half).collect()));
        let mut start = half;
        while start < n {
            segs.push((1, (start..(start + l).min(n)).collect()));
            start += l;
        }
    }
    let mut pos = [0usize; 2];
    Ok(segs
        .into_iter()
        .map(|(layer, qubits)| {
            let p = pos[layer];
            pos[layer] += 1;
            Placement {
                layer,
                pos: p,
                qubits,
                seed: derive_seed(seed, &[0x61DE, layer as u64, p as u64]),
            }
        })
        .collect())
}

/// Abstract glued circuit: one dense block per placement.
pub fn glue(patch: &EnsembleSpec, n: usize, l: usize, seed: u64) -> Result<Circuit, EnsembleError> {
    glue_placements(patch, n, &glue_plan(n, l, seed)?, Lowering::None)
}

fn patch_spec(patch: &EnsembleSpec, size: usize, seed: u64) -> EnsembleSpec {
    EnsembleSpec {
        n: size,
        seed,
        ..patch.clone()
    }
}

/// Dense matrix of one placed patch (on its own qubits).
pub fn patch_unitary(patch: &EnsembleSpec, pl: &Placement) -> Result<Mat, EnsembleError> {
    sample_unitary(&patch_spec(patch, pl.qubits.len(), pl.seed))
}

/// Glued circuit for explicit placements (lets callers alter one seed).
pub fn glue_placements(
    patch: &EnsembleSpec,
    n: usize,
    plan: &[Placement],
    lower: Lowering,
) -> Result<Circuit, EnsembleError> {
    if lower == Lowering::None {
        let mut c = Circuit::new(Model::Qac0, n, 0);
        for layer in 0..2 {
            let gates = plan
                .iter()
                .filter(|p| p.layer == layer)
                .map(|p| Ok(dense_gate(p.qubits.clone(), &patch_unitary(patch, p)?)))
                .collect::<Result<Vec<_>, EnsembleError>>()?;
            c.push(gates);
        }
        c.meta.insert("component".into(), Value::from("glued"));
        return Ok(c);
    }
    let lowered: Vec<Circuit> = plan
        .iter()
        .map(|p| build(&patch_spec(patch, p.qubits.len(), p.seed), lower))
        .collect::<Result<_, _>>()?;
    // parallel patches get disjoint ancillae; the second layer reuses them
    let mut n_anc = 0;
    for layer in 0..2 {
        let used: usize = plan
            .iter()
            .zip(&lowered)
            .filter(|(p, _)| p.layer == layer)
            .map(|(_, c)| c.n_anc)
            .sum();
        n_anc = n_anc.max(used);
    }
    let mut out = Circuit::new(Model::Qac0, n, n_anc);
    let mut cbits = 0;
    for layer in 0..2 {
        let mut anc = 0;
        let mut block = Circuit::new(Model::Qac0, n, n_anc);
        for (p, c) in plan.iter().zip(&lowered).filter(|(p, _)| p.layer == layer) {
            let map: Vec<usize> = p
                .qubits
                .iter()
                .copied()
                .chain((0..c.n_anc).map(|j| n + anc + j))
                .collect();
            let mut placed = c.embed(&map, n, n_anc, cbits);
            placed.meta.clear();
            block.merge_parallel(&placed);
            anc += c.n_anc;
            cbits += c.n_cbits;
        }
        out.model = out.model.max(block.model);
        out.layers.extend(block.layers);
    }
    out.n_cbits = cbits;
    out.meta.insert("component".into(), Value::from("glued"));
    Ok(out)
}

// ---------------------------------------------------------------- entry points

fn patch_of(spec: &EnsembleSpec) -> Result<(EnsembleSpec, usize), EnsembleError> {
    match spec.kind {
        Kind::Glued => {
            let p = spec.patch.expect("validated");
            Ok((
                EnsembleSpec {
                    kind: p.kind,
                    patch: None,
                    ..spec.clone()
                },
                p.size,
            ))
        }
        Kind::Pru => {
            let size = spec.patch.map_or(spec.n, |p| p.size);
            Ok((
                EnsembleSpec {
                    kind: Kind::Cpfc,
                    patch: None,
                    source: SourceKind::Prf,
                    ..spec.clone()
                },
                size,
            ))
        }
        _ => unreachable!(),
    }
}

fn random_pauli(n: usize, seed: u64) -> PauliString {
    let mut rng = rng_for(seed, &[0x9A11]);
    let x = (0..n).map(|_| rng.random::<bool>()).collect();
    let z = (0..n).map(|_| rng.random::<bool>()).collect();
    PauliString::hermitian(x, z, false)
}

/// Glued CPFC with PRF-keyed phase and permutation functions.
pub fn sample_pru(n: usize, l: usize, seed: u64) -> Result<Circuit, EnsembleError> {
    build(
        &EnsembleSpec::new(Kind::Pru, n, 1, seed).with_patch(l, Kind::Cpfc),
        Lowering::None,
    )
}

/// Dense unitary of the draw `spec.seed`.
pub fn sample_unitary(spec: &EnsembleSpec) -> Result<Mat, EnsembleError> {
    spec.validate()?;
    let n = spec.n;
    let d = 1usize << n;
    match spec.kind {
        Kind::Haar => Ok(haar_unitary(d, &mut rng_for(spec.seed, &[0x4A42]))),
        Kind::Clifford => Ok(random_clifford(n, spec.seed).unitary()),
        Kind::Pauli => Ok(random_pauli(n, spec.seed).matrix()),
        Kind::Singleton => Ok(identity(d)),
        Kind::Cpfc => Ok(sample_cpfc(n, spec.t, spec.source, spec.seed)?.matrix()),
        Kind::Glued | Kind::Pru => {
            let (patch, l) = patch_of(spec)?;
            Ok(circuit_unitary(&glue(&patch, n, l, spec.seed)?)?)
        }
    }
}

/// Circuit for the draw `spec.seed`, abstract or lowered.
pub fn build(spec: &EnsembleSpec, lower: Lowering) -> Result<Circuit, EnsembleError> {
    spec.validate()?;
    let n = spec.n;
    let mut c = match (spec.kind, lower) {
        (Kind::Singleton, _) => Circuit::new(Model::Qac0, n, 0),
        (Kind::Haar, Lowering::None) | (Kind::Clifford, Lowering::None) | (Kind::Pauli, Lowering::None) => {
            let mut c = Circuit::new(Model::Qac0, n, 0);
            c.push(vec![dense_gate((0..n).collect(), &sample_unitary(spec)?)]);
            c
        }
        (Kind::Haar, _) => {
            return Err(EnsembleError::Unsupported(
                "Haar unitaries have no native-gate lowering".into(),
            ))
        }
        (Kind::Clifford, _) => lower_clifford(&random_clifford(n, spec.seed), lower)?,
        (Kind::Pauli, _) => {
            let p = random_pauli(n, spec.seed);
            let mut c = Circuit::new(Model::Qac0, n, 0);
            let layer: Vec<Gate> = (0..n)
                .filter_map(|q| {
                    let m = PauliString::single(
                        1,
                        0,
                        match (p.x[q], p.z[q]) {
                            (false, false) => return None,
                            (true, false) => 'X',
                            (false, true) => 'Z',
                            (true, true) => 'Y',
                        },
                    )
                    .matrix();
                    Some(Gate::u1(q, [m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]))
                })
                .collect();
            if !layer.is_empty() {
                c.push(layer);
            }
            c
        }
        (Kind::Cpfc, _) => sample_cpfc(n, spec.t, spec.source, spec.seed)?.circuit(lower)?,
        (Kind::Glued, _) | (Kind::Pru, _) => {
            let (patch, l) = patch_of(spec)?;
            glue_placements(&patch, n, &glue_plan(n, l, spec.seed)?, lower)?
        }
    };
    if lower == Lowering::Measff {
        c.model = Model::Measff;
    } else if lower == Lowering::Qac0f && c.model == Model::Qac0 {
        c.model = Model::Qac0f;
    }
    c.meta
        .insert("ensemble".into(), serde_json::to_value(spec).expect("serializes"));
    c.meta
        .insert("lowering".into(), serde_json::to_value(lower).expect("serializes"));
    Ok(c)
}
