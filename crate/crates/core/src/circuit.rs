//! Layered circuit IR over single-qubit unitaries, TOFFOLI, FANOUT,
//! mid-circuit measurement and parity-controlled Paulis.
//!
//! Qubits `0..n_in` are inputs, `n_in..n_in+n_anc` ancillae. Basis states
//! are big-endian: qubit 0 is the leftmost tensor factor.

use crate::linalg::{c, is_unitary, Mat, C64, ONE, ZERO};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

pub const SCHEMA_VERSION: u64 = 1;
const U1_TOL: f64 = 1e-12;
const DENSE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Qac0,
    Qac0f,
    Measff,
}

impl Model {
    pub fn is_unitary(self) -> bool {
        self != Model::Measff
    }
    pub fn name(self) -> &'static str {
        match self {
            Model::Qac0 => "qac0",
            Model::Qac0f => "qac0f",
            Model::Measff => "measff",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pauli {
    X,
    Z,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Gate {
    #[serde(rename = "u1")]
    U1 {
        q: usize,
        matrix: [C64; 4],
    },
    Toffoli {
        controls: Vec<usize>,
        target: usize,
    },
    Fanout {
        source: usize,
        targets: Vec<usize>,
    },
    Measure {
        q: usize,
        cbit: usize,
    },
    Cpauli {
        pauli: Pauli,
        q: usize,
        cbits: Vec<usize>,
    },
    /// Abstract dense block (row-major). Used for the unlowered form of
    /// ensemble components.
    Unitary {
        qubits: Vec<usize>,
        matrix: Vec<C64>,
    },
}

pub mod mats {
    use super::*;
    const R: f64 = std::f64::consts::FRAC_1_SQRT_2;
    pub const H: [C64; 4] = [c_(R, 0.0), c_(R, 0.0), c_(R, 0.0), c_(-R, 0.0)];
    pub const S: [C64; 4] = [ONE, ZERO, ZERO, c_(0.0, 1.0)];
    pub const SDG: [C64; 4] = [ONE, ZERO, ZERO, c_(0.0, -1.0)];
    pub const X: [C64; 4] = [ZERO, ONE, ONE, ZERO];
    pub const Z: [C64; 4] = [ONE, ZERO, ZERO, c_(-1.0, 0.0)];
    pub const Y: [C64; 4] = [ZERO, c_(0.0, -1.0), c_(0.0, 1.0), ZERO];
    pub const ID: [C64; 4] = [ONE, ZERO, ZERO, ONE];

    const fn c_(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    /// exp(-i theta X / 2)
    pub fn rx(theta: f64) -> [C64; 4] {
        let (s, co) = (theta / 2.0).sin_cos();
        [c(co, 0.0), c(0.0, -s), c(0.0, -s), c(co, 0.0)]
    }

    pub fn ry(theta: f64) -> [C64; 4] {
        let (s, co) = (theta / 2.0).sin_cos();
        [c(co, 0.0), c(-s, 0.0), c(s, 0.0), c(co, 0.0)]
    }

    pub fn rz(theta: f64) -> [C64; 4] {
        let (s, co) = (theta / 2.0).sin_cos();
        [c(co, -s), ZERO, ZERO, c(co, s)]
    }

    pub fn mul(a: &[C64; 4], b: &[C64; 4]) -> [C64; 4] {
        [
            a[0] * b[0] + a[1] * b[2],
            a[0] * b[1] + a[1] * b[3],
            a[2] * b[0] + a[3] * b[2],
            a[2] * b[1] + a[3] * b[3],
        ]
    }

    pub fn adjoint(a: &[C64; 4]) -> [C64; 4] {
        [a[0].conj(), a[2].conj(), a[1].conj(), a[3].conj()]
    }
}

impl Gate {
    pub fn u1(q: usize, matrix: [C64; 4]) -> Gate {
        Gate::U1 { q, matrix }
    }
    pub fn h(q: usize) -> Gate {
        Gate::u1(q, mats::H)
    }
    pub fn s(q: usize) -> Gate {
        Gate::u1(q, mats::S)
    }
    pub fn x(q: usize) -> Gate {
        Gate::u1(q, mats::X)
    }
    pub fn z(q: usize) -> Gate {
        Gate::u1(q, mats::Z)
    }
    pub fn cnot(control: usize, target: usize) -> Gate {
        Gate::Toffoli {
            controls: vec![control],
            target,
        }
    }

    pub fn qubits(&self) -> Vec<usize> {
        match self {
            Gate::U1 { q, .. } | Gate::Measure { q, .. } | Gate::Cpauli { q, .. } => vec![*q],
            Gate::Toffoli { controls, target } => {
                let mut v = controls.clone();
                v.push(*target);
                v
            }
            Gate::Fanout { source, targets } => {
                let mut v = vec![*source];
                v.extend(targets);
                v
            }
            Gate::Unitary { qubits, .. } => qubits.clone(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Gate::U1 { .. } => "u1",
            Gate::Toffoli { .. } => "toffoli",
            Gate::Fanout { .. } => "fanout",
            Gate::Measure { .. } => "measure",
            Gate::Cpauli { .. } => "cpauli",
            Gate::Unitary { .. } => "unitary",
        }
    }

    pub fn is_unitary(&self) -> bool {
        !matches!(self, Gate::Measure { .. } | Gate::Cpauli { .. })
    }

    /// Two-or-more-qubit gate.
    pub fn is_multi(&self) -> bool {
        self.qubits().len() > 1
    }

    pub fn inverse(&self) -> Option<Gate> {
        Some(match self {
            Gate::U1 { q, matrix } => Gate::U1 {
                q: *q,
                matrix: mats::adjoint(matrix),
            },
            Gate::Toffoli { .. } | Gate::Fanout { .. } => self.clone(),
            Gate::Unitary { qubits, matrix } => {
                let d = 1usize << qubits.len();
                let m: Vec<C64> = (0..d * d).map(|k| matrix[(k % d) * d + k / d].conj()).collect();
                Gate::Unitary {
                    qubits: qubits.clone(),
                    matrix: m,
                }
            }
            Gate::Measure { .. } | Gate::Cpauli { .. } => return None,
        })
    }

    pub fn remap(&self, f: &dyn Fn(usize) -> usize, cb: &dyn Fn(usize) -> usize) -> Gate {
        match self {
            Gate::U1 { q, matrix } => Gate::U1 {
                q: f(*q),
                matrix: *matrix,
            },
            Gate::Toffoli { controls, target } => Gate::Toffoli {
                controls: controls.iter().map(|&x| f(x)).collect(),
                target: f(*target),
            },
            Gate::Fanout { source, targets } => Gate::Fanout {
                source: f(*source),
                targets: targets.iter().map(|&x| f(x)).collect(),
            },
            Gate::Measure { q, cbit } => Gate::Measure {
                q: f(*q),
                cbit: cb(*cbit),
            },
            Gate::Cpauli { pauli, q, cbits } => Gate::Cpauli {
                pauli: *pauli,
                q: f(*q),
                cbits: cbits.iter().map(|&x| cb(x)).collect(),
            },
            Gate::Unitary { qubits, matrix } => Gate::Unitary {
                qubits: qubits.iter().map(|&x| f(x)).collect(),
                matrix: matrix.clone(),
            },
        }
    }

    pub fn dense_matrix(&self) -> Option<Mat> {
        match self {
            Gate::U1 { matrix, .. } => Some(Mat::from_row_slice(2, 2, matrix)),
            Gate::Unitary { qubits, matrix } => {
                let d = 1usize << qubits.len();
                Some(Mat::from_row_slice(d, d, matrix))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub grid: [usize; 2],
    pub positions: BTreeMap<usize, [usize; 2]>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("overlap: qubit {qubit} used twice in layer {layer}")]
    Overlap { layer: usize, qubit: usize },
    #[error("out of range: qubit {qubit} in layer {layer} (circuit has {total})")]
    OutOfRange { layer: usize, qubit: usize, total: usize },
    #[error("out of range: cbit {cbit} in layer {layer} (circuit has {total})")]
    CbitOutOfRange { layer: usize, cbit: usize, total: usize },
    #[error("non-unitary matrix in layer {layer}")]
    NonUnitary { layer: usize },
    #[error("dangling classical control: cbit {cbit} read in layer {layer} before being written")]
    DanglingCbit { layer: usize, cbit: usize },
    #[error("gate kind {kind} not allowed under model {model} (layer {layer})")]
    ModelViolation {
        layer: usize,
        kind: &'static str,
        model: &'static str,
    },
    #[error("index collision: {0}")]
    IndexCollision(String),
    #[error("unsupported version {0}")]
    UnsupportedVersion(String),
    #[error("malformed circuit JSON: {0}")]
    Malformed(String),
    #[error("incompatible circuits: {0}")]
    Incompatible(String),
}

/// Validation failure carrying every violation found.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationErrors(pub Vec<IrError>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|e| e.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

impl std::error::Error for ValidationErrors {}

#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    pub model: Model,
    pub n_in: usize,
    pub n_anc: usize,
    pub n_cbits: usize,
    pub layers: Vec<Vec<Gate>>,
    pub layout: Option<Layout>,
    /// Free-form annotations (node counts, ancilla reports, function handles).
    pub meta: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct CircuitFile {
    version: u64,
    model: Model,
    n_in: usize,
    n_anc: usize,
    n_cbits: usize,
    layers: Vec<Vec<Gate>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    layout: Option<Layout>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    meta: BTreeMap<String, Value>,
}

impl Circuit {
    pub fn new(model: Model, n_in: usize, n_anc: usize) -> Circuit {
        Circuit {
            model,
            n_in,
            n_anc,
            n_cbits: 0,
            layers: Vec::new(),
            layout: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn total_qubits(&self) -> usize {
        self.n_in + self.n_anc
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn size(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    pub fn push(&mut self, layer: Vec<Gate>) {
        self.layers.push(layer);
    }

    pub fn gates(&self) -> impl Iterator<Item = &Gate> {
        self.layers.iter().flatten()
    }

    pub fn has_measurement(&self) -> bool {
        self.gates().any(|g| !g.is_unitary())
    }

    /// Run `other` after `self`. Classical registers are concatenated.
    pub fn then(&self, other: &Circuit) -> Result<Circuit, IrError> {
        if self.n_in != other.n_in {
            return Err(IrError::Incompatible(format!("n_in {} vs {}", self.n_in, other.n_in)));
        }
        let off = self.n_cbits;
        let mut out = self.clone();
        out.model = self.model.max(other.model);
        out.n_anc = self.n_anc.max(other.n_anc);
        out.n_cbits = self.n_cbits + other.n_cbits;
        out.layout = None;
        out.layers.extend(
            other
                .layers
                .iter()
                .map(|l| l.iter().map(|g| g.remap(&|q| q, &|b| b + off)).collect()),
        );
        Ok(out)
    }

    /// Adjoint circuit; `None` if it contains measurements.
    pub fn inverse(&self) -> Option<Circuit> {
        let mut out = self.clone();
        out.layers = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter().rev() {
            out.layers
                .push(layer.iter().map(|g| g.inverse()).collect::<Option<Vec<_>>>()?);
        }
        Some(out)
    }

    /// Relocate onto a bigger register: qubit q goes to `map[q]`, cbit b to `b + cbit_offset`.
    pub fn embed(&self, map: &[usize], n_in: usize, n_anc: usize, cbit_offset: usize) -> Circuit {
        assert_eq!(map.len(), self.total_qubits());
        let mut out = Circuit::new(self.model, n_in, n_anc);
        out.n_cbits = self.n_cbits + cbit_offset;
        out.layers = self
            .layers
            .iter()
            .map(|l| l.iter().map(|g| g.remap(&|q| map[q], &|b| b + cbit_offset)).collect())
            .collect();
        out.meta = self.meta.clone();
        out
    }

    /// Overlay `other` onto the same time steps (gates must act on disjoint qubits).
    pub fn merge_parallel(&mut self, other: &Circuit) {
        self.model = self.model.max(other.model);
        self.n_cbits = self.n_cbits.max(other.n_cbits);
        for (i, layer) in other.layers.iter().enumerate() {
            if i < self.layers.len() {
                self.layers[i].extend(layer.iter().cloned());
            } else {
                self.layers.push(layer.clone());
            }
        }
    }

    /// As-soon-as-possible rescheduling; preserves gate order on every
    /// qubit and classical bit.
    pub fn compact(&self) -> Circuit {
        let mut qfree = vec![0usize; self.total_qubits()];
        let mut cwrite = vec![0usize; self.n_cbits];
        let mut cread = vec![0usize; self.n_cbits];
        let mut layers: Vec<Vec<Gate>> = Vec::new();
        for g in self.gates() {
            let mut at = g.qubits().iter().map(|&q| qfree[q]).max().unwrap_or(0);
            match g {
                Gate::Cpauli { cbits, .. } => {
                    at = cbits.iter().map(|&b| cwrite[b]).fold(at, usize::max);
                }
                Gate::Measure { cbit, .. } => {
                    at = at.max(cwrite[*cbit]).max(cread[*cbit]);
                }
                _ => {}
            }
            if layers.len() <= at {
                layers.resize(at + 1, Vec::new());
            }
            layers[at].push(g.clone());
            for q in g.qubits() {
                qfree[q] = at + 1;
            }
            match g {
                Gate::Cpauli { cbits, .. } => cbits.iter().for_each(|&b| cread[b] = cread[b].max(at)),
                Gate::Measure { cbit, .. } => cwrite[*cbit] = at + 1,
                _ => {}
            }
        }
        let mut out = self.clone();
        out.layers = layers;
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_value()).expect("circuit serializes")
    }

    pub fn to_value(&self) -> Value {
        let file = CircuitFile {
            version: SCHEMA_VERSION,
            model: self.model,
            n_in: self.n_in,
            n_anc: self.n_anc,
            n_cbits: self.n_cbits,
            layers: self.layers.clone(),
            layout: self.layout.clone(),
            meta: self.meta.clone(),
        };
        serde_json::to_value(file).expect("circuit serializes")
    }

    pub fn from_json(s: &str) -> Result<Circuit, IrError> {
        let v: Value = serde_json::from_str(s).map_err(|e| IrError::Malformed(e.to_string()))?;
        Circuit::from_value(v)
    }

    pub fn from_value(v: Value) -> Result<Circuit, IrError> {
        match v.get("version") {
            Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION) => {}
            Some(other) => return Err(IrError::UnsupportedVersion(other.to_string())),
            None => return Err(IrError::Malformed("missing version".into())),
        }
        let f: CircuitFile = serde_json::from_value(v).map_err(|e| IrError::Malformed(e.to_string()))?;
        Ok(Circuit {
            model: f.model,
            n_in: f.n_in,
            n_anc: f.n_anc,
            n_cbits: f.n_cbits,
            layers: f.layers,
            layout: f.layout,
            meta: f.meta,
        })
    }
}

/// Check every structural invariant and report all violations.
pub fn validate(c: &Circuit) -> Result<(), ValidationErrors> {
    let total = c.total_qubits();
    let mut errs = Vec::new();
    let mut written: BTreeSet<usize> = BTreeSet::new();
    for (li, layer) in c.layers.iter().enumerate() {
        let mut used = BTreeSet::new();
        let mut newly_written = Vec::new();
        for g in layer {
            for q in g.qubits() {
                if q >= total {
                    errs.push(IrError::OutOfRange {
                        layer: li,
                        qubit: q,
                        total,
                    });
                } else if !used.insert(q) {
                    errs.push(IrError::Overlap { layer: li, qubit: q });
                }
            }
            match g {
                Gate::U1 { matrix, .. } => {
                    if !is_unitary(&Mat::from_row_slice(2, 2, matrix), U1_TOL) {
                        errs.push(IrError::NonUnitary { layer: li });
                    }
                }
                Gate::Unitary { qubits, matrix } => {
                    let d = 1usize.checked_shl(qubits.len() as u32).unwrap_or(0);
                    if d == 0 || matrix.len() != d * d || !is_unitary(&Mat::from_row_slice(d, d, matrix), DENSE_TOL) {
                        errs.push(IrError::NonUnitary { layer: li });
                    }
                }
                Gate::Fanout { .. } if c.model == Model::Qac0 => {
                    errs.push(IrError::ModelViolation {
                        layer: li,
                        kind: "fanout",
                        model: c.model.name(),
                    });
                }
                Gate::Measure { cbit, .. } => {
                    if c.model.is_unitary() {
                        errs.push(IrError::ModelViolation {
                            layer: li,
                            kind: "measure",
                            model: c.model.name(),
                        });
                    }
                    if *cbit >= c.n_cbits {
                        errs.push(IrError::CbitOutOfRange {
                            layer: li,
                            cbit: *cbit,
                            total: c.n_cbits,
                        });
                    }
                    newly_written.push(*cbit);
                }
                Gate::Cpauli { cbits, .. } => {
                    if c.model.is_unitary() {
                        errs.push(IrError::ModelViolation {
                            layer: li,
                            kind: "cpauli",
                            model: c.model.name(),
                        });
                    }
                    for &b in cbits {
                        if b >= c.n_cbits {
                            errs.push(IrError::CbitOutOfRange {
                                layer: li,
                                cbit: b,
                                total: c.n_cbits,
                            });
                        } else if !written.contains(&b) {
                            errs.push(IrError::DanglingCbit { layer: li, cbit: b });
                        }
                    }
                }
                _ => {}
            }
        }
        written.extend(newly_written);
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(ValidationErrors(errs))
    }
}

/// H on every wire, FANOUT from the target, H again: target ^= parity(qubits).
pub fn parity_block(qubits: &[usize], target: usize) -> Result<Circuit, IrError> {
    let set: BTreeSet<usize> = qubits.iter().copied().collect();
    if set.len() != qubits.len() || set.contains(&target) {
        return Err(IrError::IndexCollision(format!("qubits {qubits:?}, target {target}")));
    }
    let n = qubits.iter().copied().chain([target]).max().unwrap_or(0) + 1;
    let mut c = Circuit::new(Model::Qac0f, n, 0);
    for layer in parity_layers(qubits, target) {
        c.push(layer);
    }
    Ok(c)
}

fn parity_layers(qubits: &[usize], target: usize) -> Vec<Vec<Gate>> {
    let wires: Vec<usize> = qubits.iter().copied().chain([target]).collect();
    vec![
        wires.iter().map(|&q| Gate::h(q)).collect(),
        vec![Gate::Fanout {
            source: target,
            targets: qubits.to_vec(),
        }],
        wires.iter().map(|&q| Gate::h(q)).collect(),
    ]
}

/// Pluggable width-limited parity implementation used by [`parity_tree`].
pub trait ParityGadget {
    fn max_width(&self) -> usize;
    /// Layers writing `target ^= parity(inputs)`, possibly approximately.
    fn compute(&self, inputs: &[usize], target: usize) -> Vec<Vec<Gate>>;
    /// Layers used to clear an internal node during uncomputation.
    fn uncompute(&self, inputs: &[usize], target: usize) -> Vec<Vec<Gate>> {
        self.compute(inputs, target)
            .iter()
            .rev()
            .map(|l| l.iter().map(|g| g.inverse().expect("unitary gadget")).collect())
            .collect()
    }
}

pub struct ExactParity {
    pub width: usize,
}

impl ParityGadget for ExactParity {
    fn max_width(&self) -> usize {
        self.width
    }
    fn compute(&self, inputs: &[usize], target: usize) -> Vec<Vec<Gate>> {
        parity_layers(inputs, target)
    }
}

/// Exact parity followed by exp(-i theta X/2) on the target, with theta
/// chosen so the gadget's implementation error is exactly `mu`.
/// `noisy_uncompute = false` clears internal nodes with an exact block.
pub struct NoisyParity {
    pub width: usize,
    pub mu: f64,
    pub noisy_uncompute: bool,
}

impl NoisyParity {
    pub fn angle(&self) -> f64 {
        2.0 * self.mu.sqrt().asin()
    }
}

impl ParityGadget for NoisyParity {
    fn max_width(&self) -> usize {
        self.width
    }
    fn compute(&self, inputs: &[usize], target: usize) -> Vec<Vec<Gate>> {
        let mut layers = parity_layers(inputs, target);
        layers.push(vec![Gate::u1(target, mats::rx(self.angle()))]);
        layers
    }
    fn uncompute(&self, inputs: &[usize], target: usize) -> Vec<Vec<Gate>> {
        if !self.noisy_uncompute {
            return parity_layers(inputs, target);
        }
        let mut layers = vec![vec![Gate::u1(target, mats::rx(-self.angle()))]];
        layers.extend(parity_layers(inputs, target));
        layers
    }
}

/// Width-w^d parity via a depth-d tree of gadgets. Inputs are qubits
/// `0..w^d`, the target is qubit `w^d`, internal nodes live on ancillae and
/// are uncomputed after the root fires.
pub fn parity_tree(w: usize, d: usize, gadget: &dyn ParityGadget) -> Result<Circuit, IrError> {
    if w < 2 || d < 1 {
        return Err(IrError::Incompatible(format!(
            "need w >= 2 and d >= 1 (got w={w}, d={d})"
        )));
    }
    if gadget.max_width() < w {
        return Err(IrError::Incompatible(format!(
            "gadget width {} < {w}",
            gadget.max_width()
        )));
    }
    let leaves = w.pow(d as u32);
    let target = leaves;
    let nodes = (leaves - 1) / (w - 1);
    let mut c = Circuit::new(Model::Qac0f, leaves + 1, nodes - 1);
    let mut next_anc = leaves + 1;
    // levels[k] = (node register, children) for tree level k (root = level 0)
    let mut below: Vec<usize> = (0..leaves).collect();
    let mut levels: Vec<Vec<(usize, Vec<usize>)>> = Vec::new();
    for level in (0..d).rev() {
        let mut here = Vec::new();
        for chunk in below.chunks(w) {
            let reg = if level == 0 {
                target
            } else {
                next_anc += 1;
                next_anc - 1
            };
            here.push((reg, chunk.to_vec()));
        }
        below = here.iter().map(|(r, _)| *r).collect();
        levels.push(here);
    }
    let mut calls = 0usize;
    let mut add_level = |c: &mut Circuit, nodes: &[(usize, Vec<usize>)], uncompute: bool| {
        let mut block = Circuit::new(Model::Qac0f, c.n_in, c.n_anc);
        for (reg, kids) in nodes {
            let layers = if uncompute {
                gadget.uncompute(kids, *reg)
            } else {
                gadget.compute(kids, *reg)
            };
            let mut part = Circuit::new(Model::Qac0f, c.n_in, c.n_anc);
            part.layers = layers;
            block.merge_parallel(&part);
            calls += 1;
        }
        c.layers.extend(block.layers);
    };
    for lvl in &levels {
        add_level(&mut c, lvl, false);
    }
    for lvl in levels.iter().rev().skip(1) {
        add_level(&mut c, lvl, true);
    }
    c.meta.insert("nodes".into(), Value::from(nodes));
    c.meta.insert("gadget_calls".into(), Value::from(calls));
    c.meta.insert("w".into(), Value::from(w));
    c.meta.insert("d".into(), Value::from(d));
    Ok(c)
}

#[allow(dead_code)]
fn _assert_send_sync() {
    fn is<T: Send + Sync>() {}
    is::<Circuit>();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_circuit_validates() {
        assert!(validate(&Circuit::new(Model::Qac0, 3, 0)).is_ok());
    }

    #[test]
    fn overlap_detected() {
        let mut c = Circuit::new(Model::Qac0, 2, 0);
        c.push(vec![Gate::h(0), Gate::cnot(0, 1)]);
        let errs = validate(&c).unwrap_err();
        assert!(errs.0.iter().any(|e| matches!(e, IrError::Overlap { qubit: 0, .. })));
        assert!(errs.to_string().contains("overlap"));
    }

    #[test]
    fn disjoint_layers_ok() {
        let mut c = Circuit::new(Model::Qac0f, 3, 0);
        c.push(vec![Gate::Fanout {
            source: 0,
            targets: vec![1, 2],
        }]);
        c.push(vec![Gate::h(0)]);
        assert!(validate(&c).is_ok());
    }

    #[test]
    fn reports_every_violation() {
        let mut c = Circuit::new(Model::Qac0, 2, 0);
        c.push(vec![
            Gate::u1(0, [ONE, ONE, ZERO, ONE]),
            Gate::Fanout {
                source: 1,
                targets: vec![5],
            },
            Gate::Measure { q: 1, cbit: 0 },
        ]);
        c.push(vec![Gate::Cpauli {
            pauli: Pauli::X,
            q: 0,
            cbits: vec![3],
        }]);
        let errs = validate(&c).unwrap_err().0;
        assert!(errs.iter().any(|e| matches!(e, IrError::NonUnitary { .. })));
        assert!(errs.iter().any(|e| matches!(e, IrError::OutOfRange { qubit: 5, .. })));
        assert!(errs.iter().any(|e| matches!(e, IrError::Overlap { qubit: 1, .. })));
        assert!(errs
            .iter()
            .any(|e| matches!(e, IrError::ModelViolation { kind: "fanout", .. })));
        assert!(errs
            .iter()
            .any(|e| matches!(e, IrError::ModelViolation { kind: "measure", .. })));
        assert!(errs
            .iter()
            .any(|e| matches!(e, IrError::CbitOutOfRange { cbit: 3, .. })));
    }

    #[test]
    fn dangling_cbit() {
        let mut c = Circuit::new(Model::Measff, 2, 0);
        c.n_cbits = 1;
        c.push(vec![
            Gate::Measure { q: 0, cbit: 0 },
            Gate::Cpauli {
                pauli: Pauli::Z,
                q: 1,
                cbits: vec![0],
            },
        ]);
        assert!(matches!(
            validate(&c).unwrap_err().0[..],
            [IrError::DanglingCbit { cbit: 0, .. }]
        ));
        let mut ok = Circuit::new(Model::Measff, 2, 0);
        ok.n_cbits = 1;
        ok.push(vec![Gate::Measure { q: 0, cbit: 0 }]);
        ok.push(vec![Gate::Cpauli {
            pauli: Pauli::Z,
            q: 1,
            cbits: vec![0],
        }]);
        assert!(validate(&ok).is_ok());
    }

    #[test]
    fn parity_block_shape() {
        let c = parity_block(&[0, 1, 2], 3).unwrap();
        assert_eq!(c.depth(), 3);
        assert_eq!(c.n_in, 4);
        assert!(validate(&c).is_ok());
        assert!(parity_block(&[0, 1], 1).is_err());
        assert!(parity_block(&[0, 0], 2).is_err());
    }

    #[test]
    fn version_mismatch() {
        let mut v = Circuit::new(Model::Qac0, 1, 0).to_value();
        v["version"] = Value::from(2);
        let err = Circuit::from_value(v).unwrap_err();
        assert!(err.to_string().contains("unsupported version"));
    }

    #[test]
    fn tree_metadata() {
        let c = parity_tree(3, 2, &ExactParity { width: 3 }).unwrap();
        assert_eq!(c.meta["nodes"], 4);
        assert_eq!(c.n_in, 10);
        assert_eq!(c.n_anc, 3);
        assert!(validate(&c).is_ok());
    }

    #[test]
    fn compact_keeps_classical_order() {
        let mut c = Circuit::new(Model::Measff, 2, 0);
        c.n_cbits = 1;
        c.push(vec![Gate::h(0)]);
        c.push(vec![Gate::Measure { q: 0, cbit: 0 }]);
        c.push(vec![Gate::h(1)]);
        c.push(vec![Gate::Cpauli {
            pauli: Pauli::X,
            q: 1,
            cbits: vec![0],
        }]);
        let k = c.compact();
        assert_eq!(k.depth(), 3);
        assert!(validate(&k).is_ok());
    }
}
