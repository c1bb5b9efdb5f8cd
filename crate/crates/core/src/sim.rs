//! Dense state-vector simulation of IR circuits.
//!
//! Two executors share one kernel set: a dense one that keeps every qubit
//! live in layer order, and a streamed one that allocates qubits on first
//! touch and drops them after measurement. The streamed executor is what
//! makes wide measurement-feedforward circuits (hundreds of mostly idle
//! ancillae) tractable.

use crate::circuit::{validate, Circuit, Gate, Model, Pauli, ValidationErrors};
use crate::fields::{derive_seed, rng_for};
use crate::linalg::{c, hermitian_eigen, identity, mat_vec, vdot, Mat, C64, ONE, ZERO};
use rand::Rng;
use thiserror::Error;

pub const DEFAULT_CAP: usize = 22;
/// Branches lighter than this are pruned during enumeration.
const BRANCH_FLOOR: f64 = 1e-14;
/// Largest measurement count enumerated branch by branch.
const MAX_ENUM_MEASUREMENTS: usize = 14;
const DENSE_EIGEN_MAX: usize = 128;
const LANCZOS_STEPS: usize = 80;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("qubit cap exceeded: need {needed}, cap {cap}")]
    CapExceeded { needed: usize, cap: usize },
    #[error("invalid circuit: {0}")]
    Invalid(ValidationErrors),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    n: usize,
    amps: Vec<C64>,
}

impl StateVector {
    pub fn new(amps: Vec<C64>) -> Result<StateVector, SimError> {
        let n = amps.len().trailing_zeros() as usize;
        if amps.is_empty() || amps.len() != 1 << n {
            return Err(SimError::Dimension(format!(
                "length {} is not a power of two",
                amps.len()
            )));
        }
        let s = StateVector { n, amps };
        if (s.norm() - 1.0).abs() > 1e-10 {
            return Err(SimError::Dimension(format!("norm {} != 1", s.norm())));
        }
        Ok(s)
    }

    pub fn basis(n: usize, index: usize) -> StateVector {
        let mut amps = vec![ZERO; 1 << n];
        amps[index] = ONE;
        StateVector { n, amps }
    }

    pub fn zero(n: usize) -> StateVector {
        StateVector::basis(n, 0)
    }

    pub fn n_qubits(&self) -> usize {
        self.n
    }

    pub fn amps(&self) -> &[C64] {
        &self.amps
    }

    pub fn into_amps(self) -> Vec<C64> {
        self.amps
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.amps)
    }

    pub fn inner(&self, other: &StateVector) -> C64 {
        vdot(&self.amps, &other.amps)
    }

    pub fn fidelity(&self, other: &StateVector) -> f64 {
        self.inner(other).norm_sqr()
    }

    pub fn to_density(&self) -> DensityOp {
        DensityOp {
            n: self.n,
            mat: crate::linalg::outer(&self.amps),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DensityOp {
    n: usize,
    mat: Mat,
}

impl DensityOp {
    pub fn new(mat: Mat) -> Result<DensityOp, SimError> {
        let d = mat.nrows();
        let n = d.trailing_zeros() as usize;
        if !mat.is_square() || d != 1 << n {
            return Err(SimError::Dimension(format!(
                "{}x{} is not a qubit operator",
                d,
                mat.ncols()
            )));
        }
        if crate::linalg::max_abs_diff(&mat, &mat.adjoint()) > 1e-10 {
            return Err(SimError::Dimension("not Hermitian".into()));
        }
        if (crate::linalg::trace(&mat).re - 1.0).abs() > 1e-10 {
            return Err(SimError::Dimension("trace != 1".into()));
        }
        let (vals, _) = hermitian_eigen(&mat);
        if vals[0] < -1e-9 {
            return Err(SimError::Dimension(format!("eigenvalue {} < 0", vals[0])));
        }
        Ok(DensityOp { n, mat })
    }

    pub fn maximally_mixed(n: usize) -> DensityOp {
        let d = 1 << n;
        DensityOp {
            n,
            mat: identity(d).map(|x| x / d as f64),
        }
    }

    pub fn n_qubits(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &Mat {
        &self.mat
    }

    pub fn into_matrix(self) -> Mat {
        self.mat
    }
}

#[derive(Clone, Debug)]
pub struct BranchRun {
    /// Classical register after the run (unwritten bits are false).
    pub outcomes: Vec<bool>,
    pub probability: f64,
    /// Full register, inputs then ancillae.
    pub state: StateVector,
}

// ---------------------------------------------------------------- kernels
// Position p in a k-qubit register is bit k-1-p of the index.

fn bit_of(k: usize, p: usize) -> usize {
    1usize << (k - 1 - p)
}

fn apply_1q(amps: &mut [C64], k: usize, p: usize, m: &[C64; 4]) {
    let b = bit_of(k, p);
    for base in (0..amps.len()).filter(|i| i & b == 0) {
        let (a0, a1) = (amps[base], amps[base | b]);
        amps[base] = m[0] * a0 + m[1] * a1;
        amps[base | b] = m[2] * a0 + m[3] * a1;
    }
}

fn apply_mcx(amps: &mut [C64], k: usize, controls: &[usize], target: usize) {
    let cmask: usize = controls.iter().map(|&p| bit_of(k, p)).sum();
    let t = bit_of(k, target);
    for i in 0..amps.len() {
        if i & t == 0 && i & cmask == cmask {
            amps.swap(i, i | t);
        }
    }
}

fn apply_fanout(amps: &mut [C64], k: usize, source: usize, targets: &[usize]) {
    let s = bit_of(k, source);
    let tmask: usize = targets.iter().map(|&p| bit_of(k, p)).sum();
    for i in 0..amps.len() {
        // visit each swapped pair once, from the member with the lowest target bit clear
        if i & s != 0 && (i ^ tmask) > i {
            amps.swap(i, i ^ tmask);
        }
    }
}

fn apply_dense(amps: &mut [C64], k: usize, positions: &[usize], m: &[C64]) {
    let bits: Vec<usize> = positions.iter().map(|&p| bit_of(k, p)).collect();
    let mask: usize = bits.iter().sum();
    let d = 1usize << bits.len();
    let offsets: Vec<usize> = (0..d)
        .map(|j| {
            bits.iter()
                .enumerate()
                .filter(|(r, _)| j >> (bits.len() - 1 - r) & 1 == 1)
                .map(|(_, b)| b)
                .sum()
        })
        .collect();
    let mut buf = vec![ZERO; d];
    for base in (0..amps.len()).filter(|i| i & mask == 0) {
        for (j, o) in offsets.iter().enumerate() {
            buf[j] = amps[base | o];
        }
        for (r, o) in offsets.iter().enumerate() {
            amps[base | o] = (0..d).map(|col| m[r * d + col] * buf[col]).sum();
        }
    }
}

fn prob_one(amps: &[C64], k: usize, p: usize) -> f64 {
    let b = bit_of(k, p);
    amps.iter()
        .enumerate()
        .filter(|(i, _)| i & b != 0)
        .map(|(_, a)| a.norm_sqr())
        .sum()
}

// ---------------------------------------------------------------- executor

#[derive(Clone)]
struct Exec {
    /// qubit -> position, for circuit qubits followed by reference qubits
    pos: Vec<Option<usize>>,
    live: Vec<usize>,
    classical: Vec<bool>,
    amps: Vec<C64>,
    cbits: Vec<bool>,
    prob: f64,
    release: bool,
    cap: usize,
}

impl Exec {
    fn dense(c: &Circuit, input: &[C64], cap: usize) -> Result<Exec, SimError> {
        let total = c.total_qubits();
        if total > cap {
            return Err(SimError::CapExceeded { needed: total, cap });
        }
        check_input(c, input)?;
        let mut amps = vec![ZERO; 1 << total];
        for (i, a) in input.iter().enumerate() {
            amps[i << c.n_anc] = *a;
        }
        Ok(Exec {
            pos: (0..total).map(Some).collect(),
            live: (0..total).collect(),
            classical: vec![false; total],
            amps,
            cbits: vec![false; c.n_cbits],
            prob: 1.0,
            release: false,
            cap,
        })
    }

    /// Streamed start: `n_ref` untouched reference qubits (indices after
    /// the circuit's) followed by the inputs, jointly in `joint`.
    fn streamed(c: &Circuit, n_ref: usize, joint: Vec<C64>, cap: usize) -> Result<Exec, SimError> {
        let total = c.total_qubits();
        if joint.len() != 1 << (n_ref + c.n_in) {
            return Err(SimError::Dimension("joint input length".into()));
        }
        if n_ref + c.n_in > cap {
            return Err(SimError::CapExceeded {
                needed: n_ref + c.n_in,
                cap,
            });
        }
        let mut pos = vec![None; total + n_ref];
        let mut live = Vec::new();
        for r in 0..n_ref {
            pos[total + r] = Some(live.len());
            live.push(total + r);
        }
        for q in 0..c.n_in {
            pos[q] = Some(live.len());
            live.push(q);
        }
        Ok(Exec {
            pos,
            live,
            classical: vec![false; total + n_ref],
            amps: joint,
            cbits: vec![false; c.n_cbits],
            prob: 1.0,
            release: true,
            cap,
        })
    }

    fn k(&self) -> usize {
        self.live.len()
    }

    fn ensure_live(&mut self, q: usize) -> Result<usize, SimError> {
        if let Some(p) = self.pos[q] {
            return Ok(p);
        }
        if self.live.len() + 1 > self.cap {
            return Err(SimError::CapExceeded {
                needed: self.live.len() + 1,
                cap: self.cap,
            });
        }
        let b = self.classical[q] as usize;
        let mut amps = vec![ZERO; self.amps.len() * 2];
        for (i, a) in self.amps.iter().enumerate() {
            amps[2 * i + b] = *a;
        }
        self.amps = amps;
        self.pos[q] = Some(self.live.len());
        self.live.push(q);
        Ok(self.live.len() - 1)
    }

    fn positions(&mut self, qs: &[usize]) -> Result<Vec<usize>, SimError> {
        qs.iter().map(|&q| self.ensure_live(q)).collect()
    }

    fn parity(&self, cbits: &[usize]) -> bool {
        cbits.iter().fold(false, |acc, &b| acc ^ self.cbits[b])
    }

    /// Apply a non-measurement gate.
    fn apply(&mut self, g: &Gate) -> Result<(), SimError> {
        match g {
            Gate::Cpauli { pauli, q, cbits } => {
                if !self.parity(cbits) {
                    return Ok(());
                }
                match (self.pos[*q], pauli) {
                    (None, Pauli::X) => self.classical[*q] ^= true,
                    (None, Pauli::Z) => {
                        if self.classical[*q] {
                            self.amps.iter_mut().for_each(|a| *a = -*a);
                        }
                    }
                    (Some(p), Pauli::X) => {
                        let k = self.k();
                        apply_1q(&mut self.amps, k, p, &crate::circuit::mats::X)
                    }
                    (Some(p), Pauli::Z) => {
                        let k = self.k();
                        apply_1q(&mut self.amps, k, p, &crate::circuit::mats::Z)
                    }
                }
            }
            Gate::U1 { q, matrix } => {
                let p = self.ensure_live(*q)?;
                let k = self.k();
                apply_1q(&mut self.amps, k, p, matrix);
            }
            Gate::Toffoli { controls, target } => {
                let cp = self.positions(controls)?;
                let tp = self.ensure_live(*target)?;
                let k = self.k();
                apply_mcx(&mut self.amps, k, &cp, tp);
            }
            Gate::Fanout { source, targets } => {
                let sp = self.ensure_live(*source)?;
                let tp = self.positions(targets)?;
                let k = self.k();
                apply_fanout(&mut self.amps, k, sp, &tp);
            }
            Gate::Unitary { qubits, matrix } => {
                let ps = self.positions(qubits)?;
                let k = self.k();
                apply_dense(&mut self.amps, k, &ps, matrix);
            }
            Gate::Measure { .. } => unreachable!("measurements go through measure_split"),
        }
        Ok(())
    }

    /// Probability of outcome 1 for a measurement gate.
    fn p1(&mut self, q: usize) -> Result<f64, SimError> {
        match self.pos[q] {
            None => Ok(self.classical[q] as u8 as f64),
            Some(p) => Ok(prob_one(&self.amps, self.k(), p)),
        }
    }

    fn commit(&mut self, q: usize, cbit: usize, outcome: bool, p_outcome: f64) {
        self.cbits[cbit] = outcome;
        self.prob *= p_outcome;
        let Some(p) = self.pos[q] else { return };
        let k = self.k();
        let b = bit_of(k, p);
        let want = if outcome { b } else { 0 };
        let scale = 1.0 / p_outcome.sqrt();
        if self.release {
            let lo = b - 1;
            let mut amps = vec![ZERO; self.amps.len() / 2];
            for (i, a) in self.amps.iter().enumerate() {
                if i & b == want {
                    amps[(i & lo) | ((i >> 1) & !lo)] = a * scale;
                }
            }
            self.amps = amps;
            self.live.remove(p);
            self.pos[q] = None;
            for (np, &lq) in self.live.iter().enumerate().skip(p) {
                self.pos[lq] = Some(np);
            }
            self.classical[q] = outcome;
        } else {
            for (i, a) in self.amps.iter_mut().enumerate() {
                *a = if i & b == want { *a * scale } else { ZERO };
            }
        }
    }

    fn finish_dense(self) -> BranchRun {
        BranchRun {
            outcomes: self.cbits,
            probability: self.prob,
            state: StateVector {
                n: self.live.len(),
                amps: self.amps,
            },
        }
    }
}

fn check_input(c: &Circuit, input: &[C64]) -> Result<(), SimError> {
    if input.len() != 1 << c.n_in {
        return Err(SimError::Dimension(format!(
            "input has {} amplitudes, circuit expects 2^{}",
            input.len(),
            c.n_in
        )));
    }
    Ok(())
}

fn checked(c: &Circuit) -> Result<Vec<&Gate>, SimError> {
    validate(c).map_err(SimError::Invalid)?;
    Ok(c.gates().collect())
}

/// Seeded outcome choice keyed by the path so far.
struct PathRng {
    key: u64,
}

impl PathRng {
    fn new(seed: u64) -> PathRng {
        PathRng {
            key: derive_seed(seed, &[0x5111]),
        }
    }
    fn choose(&mut self, p1: f64) -> bool {
        let u: f64 = rng_for(self.key, &[]).random();
        let b = u < p1;
        self.key = derive_seed(self.key, &[b as u64]);
        b
    }
}

fn run_sampled(mut ex: Exec, gates: &[&Gate], seed: u64) -> Result<Exec, SimError> {
    let mut path = PathRng::new(seed);
    for g in gates {
        if let Gate::Measure { q, cbit } = g {
            let p1 = ex.p1(*q)?.clamp(0.0, 1.0);
            let b = path.choose(p1);
            ex.commit(*q, *cbit, b, if b { p1 } else { 1.0 - p1 });
        } else {
            ex.apply(g)?;
        }
    }
    Ok(ex)
}

fn run_dfs(mut ex: Exec, gates: &[&Gate], start: usize, out: &mut Vec<Exec>) -> Result<(), SimError> {
    for (i, g) in gates.iter().enumerate().skip(start) {
        if let Gate::Measure { q, cbit } = g {
            let p1 = ex.p1(*q)?.clamp(0.0, 1.0);
            let p0 = 1.0 - p1;
            if p1 > BRANCH_FLOOR && p0 > BRANCH_FLOOR {
                let mut other = ex.clone();
                other.commit(*q, *cbit, true, p1);
                ex.commit(*q, *cbit, false, p0);
                run_dfs(ex, gates, i + 1, out)?;
                return run_dfs(other, gates, i + 1, out);
            }
            let b = p1 > p0;
            ex.commit(*q, *cbit, b, if b { p1 } else { p0 });
        } else {
            ex.apply(g)?;
        }
    }
    out.push(ex);
    Ok(())
}

/// Simulation entry points with a configurable qubit cap.
#[derive(Clone, Copy, Debug)]
pub struct Simulator {
    pub cap: usize,
}

impl Default for Simulator {
    fn default() -> Self {
        Simulator { cap: DEFAULT_CAP }
    }
}

impl Simulator {
    pub fn new(cap: usize) -> Simulator {
        Simulator { cap }
    }

    /// One measurement branch, sampled with an RNG keyed by (seed, path).
    pub fn run(&self, c: &Circuit, input: &StateVector, seed: u64) -> Result<StateVector, SimError> {
        let gates = checked(c)?;
        let ex = run_sampled(Exec::dense(c, &input.amps, self.cap)?, &gates, seed)?;
        Ok(ex.finish_dense().state)
    }

    /// Same as [`Simulator::run`] but also returns outcomes and branch probability.
    pub fn run_branch(&self, c: &Circuit, input: &StateVector, seed: u64) -> Result<BranchRun, SimError> {
        let gates = checked(c)?;
        Ok(run_sampled(Exec::dense(c, &input.amps, self.cap)?, &gates, seed)?.finish_dense())
    }

    pub fn run_all_branches(&self, c: &Circuit, input: &StateVector) -> Result<Vec<BranchRun>, SimError> {
        let gates = checked(c)?;
        let mut out = Vec::new();
        run_dfs(Exec::dense(c, &input.amps, self.cap)?, &gates, 0, &mut out)?;
        Ok(out.into_iter().map(Exec::finish_dense).collect())
    }

    /// Sampled branch with lazy qubit allocation; see [`StreamedRun`].
    pub fn run_streamed(&self, c: &Circuit, input: &StateVector, seed: u64) -> Result<StreamedRun, SimError> {
        check_input(c, &input.amps)?;
        let gates = checked(c)?;
        let order = stream_order(c, &gates);
        let ex = Exec::streamed(c, 0, input.amps.clone(), self.cap)?;
        let ex = run_sampled(ex, &order, seed)?;
        StreamedRun::from_exec(ex, c, 0)
    }

    /// Unitary of an ancilla-free unitary-model circuit.
    pub fn unitary(&self, c: &Circuit) -> Result<Mat, SimError> {
        if c.n_anc != 0 || !c.model.is_unitary() {
            return Err(SimError::Unsupported(
                "unitary() needs an ancilla-free unitary-model circuit".into(),
            ));
        }
        self.isometry(c)
    }

    /// C (I ⊗ |0^a⟩): a 2^(n+a) x 2^n isometry, rows in register order.
    pub fn isometry(&self, c: &Circuit) -> Result<Mat, SimError> {
        if !c.model.is_unitary() {
            return Err(SimError::Unsupported("isometry of a measuring circuit".into()));
        }
        let gates = checked(c)?;
        let d = 1usize << c.n_in;
        let mut v = Mat::zeros(1 << c.total_qubits(), d);
        for i in 0..d {
            let mut ex = Exec::dense(c, &StateVector::basis(c.n_in, i).amps, self.cap)?;
            for g in &gates {
                ex.apply(g)?;
            }
            v.set_column(i, &nalgebra::DVector::from_vec(ex.amps));
        }
        Ok(v)
    }

    /// Per-branch operators K_b with Σ_b K_b† K_b = I. Each maps the input
    /// register to (inputs ⊗ live ancillae).
    pub fn branch_operators(&self, c: &Circuit) -> Result<Vec<BranchOperator>, SimError> {
        if c.model.is_unitary() {
            return Ok(vec![BranchOperator {
                kraus: self.isometry(c)?,
                n_anc_live: c.n_anc,
                clean: true,
                outcomes: vec![],
            }]);
        }
        let gates = checked(c)?;
        let order = stream_order(c, &gates);
        let n = c.n_in;
        let d = 1usize << n;
        let amp = C64::new(1.0 / (d as f64).sqrt(), 0.0);
        let choi: Vec<C64> = (0..d * d).map(|i| if i / d == i % d { amp } else { ZERO }).collect();
        let start = Exec::streamed(c, n, choi, self.cap)?;
        let n_meas = gates.iter().filter(|g| matches!(g, Gate::Measure { .. })).count();
        let runs = if n_meas <= MAX_ENUM_MEASUREMENTS {
            let mut out = Vec::new();
            run_dfs(start, &order, 0, &mut out)?;
            out
        } else if crate::clifford::branch_independent(c) {
            // every branch applies the same map up to phase
            let mut ex = run_sampled(start, &order, 0)?;
            ex.prob = 1.0;
            vec![ex]
        } else {
            return Err(SimError::Unsupported(format!(
                "{n_meas} measurements and no branch-independence certificate"
            )));
        };
        runs.into_iter()
            .map(|ex| {
                let run = StreamedRun::from_exec(ex, c, n)?;
                let kraus = run.kraus(n);
                Ok(BranchOperator {
                    kraus,
                    n_anc_live: run.live.len() - n - n,
                    clean: run.clean_dropped,
                    outcomes: run.outcomes,
                })
            })
            .collect()
    }

    /// Φ_C(ρ) = tr_anc(C(ρ ⊗ |0^a⟩⟨0^a|)C†), measurement outcomes averaged.
    pub fn channel_apply(&self, c: &Circuit, rho: &DensityOp) -> Result<DensityOp, SimError> {
        if rho.n != c.n_in {
            return Err(SimError::Dimension(format!(
                "state on {} qubits, circuit has {} inputs",
                rho.n, c.n_in
            )));
        }
        let ops = self.branch_operators(c)?;
        let d = 1usize << c.n_in;
        let mut out = Mat::zeros(d, d);
        for op in &ops {
            for k in op.blocks(c.n_in) {
                out += &k * &rho.mat * k.adjoint();
            }
        }
        Ok(DensityOp { n: c.n_in, mat: out })
    }

    /// Implementation error of `c` against `u`.
    pub fn impl_error(&self, c: &Circuit, u: &Mat) -> Result<ImplError, SimError> {
        let d = 1usize << c.n_in;
        if u.nrows() != d || u.ncols() != d {
            return Err(SimError::Dimension(format!(
                "U is {}x{}, expected {d}x{d}",
                u.nrows(),
                u.ncols()
            )));
        }
        let ops = self.branch_operators(c)?;
        let ms: Vec<Mat> = ops
            .iter()
            .filter(|o| o.clean)
            .map(|o| o.ancilla_zero_block(c.n_in).adjoint() * u)
            .collect();
        Ok(fidelity_floor(&ms, derive_seed(0x1E, &[c.n_in as u64])))
    }
}

/// One measurement branch as a linear map.
#[derive(Clone, Debug)]
pub struct BranchOperator {
    /// rows: inputs ⊗ live ancillae; columns: inputs
    pub kraus: Mat,
    pub n_anc_live: usize,
    /// dropped ancillae all ended in |0⟩
    pub clean: bool,
    pub outcomes: Vec<bool>,
}

impl BranchOperator {
    /// Split into d x d blocks, one per live-ancilla basis value.
    pub fn blocks(&self, n_in: usize) -> Vec<Mat> {
        let d = 1usize << n_in;
        let a = 1usize << self.n_anc_live;
        (0..a)
            .map(|x| Mat::from_fn(d, d, |o, i| self.kraus[(o * a + x, i)]))
            .collect()
    }

    pub fn ancilla_zero_block(&self, n_in: usize) -> Mat {
        let d = 1usize << n_in;
        if !self.clean {
            return Mat::zeros(d, d);
        }
        let a = 1usize << self.n_anc_live;
        Mat::from_fn(d, d, |o, i| self.kraus[(o * a, i)])
    }
}

/// Result of a streamed run: only `live` qubits are held in `state`, every
/// other qubit is a classical basis value in `classical`.
#[derive(Clone, Debug)]
pub struct StreamedRun {
    pub outcomes: Vec<bool>,
    pub probability: f64,
    /// live qubits, in amplitude order
    pub live: Vec<usize>,
    pub state: Vec<C64>,
    pub classical: Vec<bool>,
    /// every dropped circuit qubit ended in |0⟩
    pub clean_dropped: bool,
}

impl StreamedRun {
    fn from_exec(mut ex: Exec, c: &Circuit, n_ref: usize) -> Result<StreamedRun, SimError> {
        for q in 0..c.n_in {
            ex.ensure_live(q)?;
        }
        let total = c.total_qubits();
        let clean = (c.n_in..total).all(|q| ex.pos[q].is_some() || !ex.classical[q]);
        let _ = n_ref;
        Ok(StreamedRun {
            outcomes: ex.cbits,
            probability: ex.prob,
            live: ex.live,
            state: ex.amps,
            classical: ex.classical,
            clean_dropped: clean,
        })
    }

    /// Reorder into (keep ⊗ rest) and return the |keep| x |rest| matrix.
    fn split(&self, keep: &[usize]) -> (Mat, Vec<usize>) {
        let k = self.live.len();
        let rest: Vec<usize> = self.live.iter().copied().filter(|q| !keep.contains(q)).collect();
        let pos_of = |q: usize| self.live.iter().position(|&x| x == q).expect("live qubit");
        let kb: Vec<usize> = keep.iter().map(|&q| bit_of(k, pos_of(q))).collect();
        let rb: Vec<usize> = rest.iter().map(|&q| bit_of(k, pos_of(q))).collect();
        let mut m = Mat::zeros(1 << kb.len(), 1 << rb.len());
        for (idx, a) in self.state.iter().enumerate() {
            let i = kb.iter().fold(0, |acc, b| (acc << 1) | (idx & b != 0) as usize);
            let j = rb.iter().fold(0, |acc, b| (acc << 1) | (idx & b != 0) as usize);
            m[(i, j)] = *a;
        }
        (m, rest)
    }

    /// State of `qubits` (in that order) with all other live qubits
    /// projected onto |0⟩, plus the norm of that projection.
    pub fn project_rest_zero(&self, qubits: &[usize]) -> (Vec<C64>, f64) {
        let (m, _) = self.split(qubits);
        let v: Vec<C64> = m.column(0).iter().copied().collect();
        let nrm = crate::linalg::norm(&v);
        (v, nrm)
    }

    /// Reduced density matrix of `qubits`.
    pub fn reduced(&self, qubits: &[usize]) -> Mat {
        let (m, _) = self.split(qubits);
        &m * m.adjoint()
    }

    /// Branch operator from a Choi-state run with `n` reference qubits.
    fn kraus(&self, n: usize) -> Mat {
        let total = self.classical.len() - n;
        let refs: Vec<usize> = (total..total + n).collect();
        let mut outs: Vec<usize> = (0..n).collect();
        let mut anc: Vec<usize> = self.live.iter().copied().filter(|&q| q >= n && q < total).collect();
        anc.sort_unstable();
        outs.extend(anc);
        let mut keep = outs.clone();
        keep.extend(&refs);
        let (m, _) = self.split(&keep);
        let d = 1usize << n;
        let rows = 1usize << outs.len();
        let scale = ((d as f64) * self.probability).sqrt();
        Mat::from_fn(rows, d, |o, i| m[(o * d + i, 0)] * scale)
    }
}

/// Greedy topological order that keeps few qubits live: prefer gates that
/// need no new qubit, measurements first, then the lowest-index allocation.
fn stream_order<'a>(c: &Circuit, gates: &[&'a Gate]) -> Vec<&'a Gate> {
    let nq = c.total_qubits();
    let n = gates.len();
    let mut indeg = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut last_q: Vec<Option<usize>> = vec![None; nq];
    let mut writer: Vec<Option<usize>> = vec![None; c.n_cbits];
    let mut readers: Vec<Vec<usize>> = vec![Vec::new(); c.n_cbits];
    let edge = |a: usize, b: usize, indeg: &mut Vec<usize>, succ: &mut Vec<Vec<usize>>| {
        succ[a].push(b);
        indeg[b] += 1;
    };
    for (i, g) in gates.iter().enumerate() {
        let mut preds: Vec<usize> = g.qubits().iter().filter_map(|&q| last_q[q]).collect();
        match g {
            Gate::Cpauli { cbits, .. } => {
                preds.extend(cbits.iter().filter_map(|&b| writer[b]));
                cbits.iter().for_each(|&b| readers[b].push(i));
            }
            Gate::Measure { cbit, .. } => {
                preds.extend(writer[*cbit]);
                preds.extend(readers[*cbit].drain(..));
                writer[*cbit] = Some(i);
            }
            _ => {}
        }
        preds.sort_unstable();
        preds.dedup();
        for p in preds {
            edge(p, i, &mut indeg, &mut succ);
        }
        for q in g.qubits() {
            last_q[q] = Some(i);
        }
    }
    let mut live = vec![false; nq];
    (0..c.n_in).for_each(|q| live[q] = true);
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while !ready.is_empty() {
        let key = |i: usize| {
            let g = gates[i];
            let new: Vec<usize> = if matches!(g, Gate::Cpauli { .. }) {
                vec![]
            } else {
                g.qubits().into_iter().filter(|&q| !live[q]).collect()
            };
            let is_meas = matches!(g, Gate::Measure { .. });
            (new.len(), !is_meas, new.iter().min().copied().unwrap_or(0), i)
        };
        let (slot, &pick) = ready
            .iter()
            .enumerate()
            .min_by_key(|(_, &i)| key(i))
            .expect("non-empty");
        ready.swap_remove(slot);
        let g = gates[pick];
        match g {
            Gate::Measure { q, .. } => live[*q] = false,
            Gate::Cpauli { .. } => {}
            _ => g.qubits().into_iter().for_each(|q| live[q] = true),
        }
        order.push(g);
        for &s in &succ[pick] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.push(s);
            }
        }
    }
    order
}

// ---------------------------------------------------------------- impl error

#[derive(Clone, Debug)]
pub struct ImplError {
    /// Certified upper bound on the true error (numerical-range bound).
    pub epsilon: f64,
    /// Error at the worst input found by local search (a lower bound).
    pub epsilon_found: f64,
    pub witness: Vec<C64>,
}

/// min over unit ψ of Σ_b |⟨ψ|M_b|ψ⟩|², bracketed from both sides.
fn fidelity_floor(ms: &[Mat], seed: u64) -> ImplError {
    let d = ms.first().map(|m| m.nrows()).unwrap_or(1);
    if ms.is_empty() {
        return ImplError {
            epsilon: 1.0,
            epsilon_found: 1.0,
            witness: StateVector::zero(d.trailing_zeros() as usize).amps,
        };
    }
    // Each term is at least dist(0, W(M_b))², and that distance is the
    // best support-function value max_θ λ_min(Re(e^{-iθ} M_b)).
    let mut lower = 0.0;
    let mut starts: Vec<Vec<C64>> = Vec::new();
    for m in ms {
        let (dist, v) = numerical_range_distance(m);
        lower += dist * dist;
        starts.push(v);
    }
    let objective = |psi: &[C64]| -> f64 { ms.iter().map(|m| vdot(psi, &mat_vec(m, psi)).norm_sqr()).sum() };
    let mut rng = rng_for(seed, &[]);
    let mut best = f64::INFINITY;
    let mut witness = starts[0].clone();
    const RESTARTS: usize = 64;
    for r in 0..RESTARTS {
        let start = if r < starts.len() {
            starts[r].clone()
        } else {
            crate::linalg::haar_state(d, &mut rng)
        };
        let (val, psi) = descend(ms, start, &objective);
        if val < best {
            best = val;
            witness = psi;
        }
    }
    let upper_eps = (1.0 - lower).clamp(0.0, 1.0);
    let found_eps = (1.0 - best).clamp(0.0, 1.0);
    ImplError {
        epsilon: upper_eps.max(found_eps),
        epsilon_found: found_eps,
        witness,
    }
}

/// Projected gradient descent with backtracking on the unit sphere.
fn descend(ms: &[Mat], mut psi: Vec<C64>, f: &dyn Fn(&[C64]) -> f64) -> (f64, Vec<C64>) {
    let mut val = f(&psi);
    let mut step = 0.5;
    for _ in 0..200 {
        let mut grad = vec![ZERO; psi.len()];
        for m in ms {
            let mpsi = mat_vec(m, &psi);
            let mdpsi = mat_vec(&m.adjoint(), &psi);
            let z = vdot(&psi, &mpsi);
            for k in 0..psi.len() {
                grad[k] += z.conj() * mpsi[k] + z * mdpsi[k];
            }
        }
        let radial = vdot(&psi, &grad);
        grad.iter_mut().zip(&psi).for_each(|(g, p)| *g -= radial * p);
        let gn = crate::linalg::norm(&grad);
        if gn < 1e-13 {
            break;
        }
        let mut improved = false;
        while step > 1e-12 {
            let mut cand: Vec<C64> = psi.iter().zip(&grad).map(|(p, g)| p - g * step).collect();
            let cn = crate::linalg::norm(&cand);
            cand.iter_mut().for_each(|x| *x /= cn);
            let cv = f(&cand);
            if cv < val - 1e-4 * step * gn * gn {
                psi = cand;
                let gain = val - cv;
                val = cv;
                step *= 2.0;
                improved = gain > 1e-15;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (val, psi)
}

/// Distance from 0 to the numerical range of `m`, found by maximising the
/// support function over θ; any θ certifies a lower bound. Also returns the
/// eigenvector attaining the bound, a good starting point for local search.
fn numerical_range_distance(m: &Mat) -> (f64, Vec<C64>) {
    let d = m.nrows();
    let md = m.adjoint();
    let herm = |theta: f64| -> Mat {
        let ph = c(theta.cos(), -theta.sin());
        (m.map(|x| x * ph) + md.map(|x| x * ph.conj())).map(|x| x * 0.5)
    };
    let mut start = vec![c(1.0, 0.0); d];
    let mut lam = |theta: f64| -> (f64, Vec<C64>) {
        if d <= DENSE_EIGEN_MAX {
            let (vals, vecs) = hermitian_eigen(&herm(theta));
            return (vals[0], vecs.column(0).iter().copied().collect());
        }
        let ph = c(theta.cos(), -theta.sin());
        let apply = |v: &[C64]| -> Vec<C64> {
            let a = mat_vec(m, v);
            let b = mat_vec(&md, v);
            a.iter().zip(&b).map(|(x, y)| (x * ph + y * ph.conj()) * 0.5).collect()
        };
        let (l, v) = crate::linalg::lowest_eigpair(d, LANCZOS_STEPS, &start, apply);
        start.clone_from(&v);
        (l, v)
    };
    let tr = crate::linalg::trace(m);
    let theta0 = if tr.norm() > 1e-300 { tr.arg() } else { 0.0 };
    const GRID: usize = 16;
    let mut best = (f64::NEG_INFINITY, 0.0, Vec::new());
    for g in 0..GRID {
        let th = theta0 + 2.0 * std::f64::consts::PI * g as f64 / GRID as f64;
        let (l, v) = lam(th);
        if l > best.0 {
            best = (l, th, v);
        }
    }
    // golden-section refinement around the best grid point
    let h = 2.0 * std::f64::consts::PI / GRID as f64;
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (best.1 - h, best.1 + h);
    let (mut x1, mut x2) = (b - gr * (b - a), a + gr * (b - a));
    let (mut f1, v1) = lam(x1);
    let (mut f2, v2) = lam(x2);
    for (f, x, v) in [(f1, x1, v1), (f2, x2, v2)] {
        if f > best.0 {
            best = (f, x, v);
        }
    }
    while b - a > 1e-7 {
        if f1 > f2 {
            b = x2;
            (x2, f2) = (x1, f1);
            x1 = b - gr * (b - a);
            let (f, v) = lam(x1);
            f1 = f;
            if f > best.0 {
                best = (f, x1, v);
            }
        } else {
            a = x1;
            (x1, f1) = (x2, f2);
            x2 = a + gr * (b - a);
            let (f, v) = lam(x2);
            f2 = f;
            if f > best.0 {
                best = (f, x2, v);
            }
        }
    }
    let (mut dist, theta, vec) = best;
    if d > DENSE_EIGEN_MAX && dist > 0.0 {
        // Ritz values sit above the true minimum; certify by factoring
        // H - (λ - δ)I, and fall back to a dense solve if that fails.
        let hm = herm(theta);
        let delta = 1e-9 * (1.0 + dist.abs());
        let shifted = &hm - identity(d).map(|x| x * (dist - delta));
        if nalgebra::Cholesky::new(shifted).is_some() {
            dist -= delta;
        } else {
            dist = hermitian_eigen(&hm).0[0];
        }
    }
    (dist.max(0.0), vec)
}

// ---------------------------------------------------------------- distances

fn check_same(a: &Mat, b: &Mat) -> Result<(), SimError> {
    if a.shape() != b.shape() {
        return Err(SimError::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn trace_distance(rho: &DensityOp, sigma: &DensityOp) -> Result<f64, SimError> {
    check_same(&rho.mat, &sigma.mat)?;
    let td = trace_distance_raw(&rho.mat, &sigma.mat);
    debug_assert!(td <= (1.0 - fidelity_raw(&rho.mat, &sigma.mat)).max(0.0).sqrt() + 1e-7);
    Ok(td)
}

pub fn fidelity(rho: &DensityOp, sigma: &DensityOp) -> Result<f64, SimError> {
    check_same(&rho.mat, &sigma.mat)?;
    Ok(fidelity_raw(&rho.mat, &sigma.mat))
}

pub(crate) fn trace_distance_raw(a: &Mat, b: &Mat) -> f64 {
    let (vals, _) = hermitian_eigen(&(a - b));
    0.5 * vals.iter().map(|x| x.abs()).sum::<f64>()
}

/// Eigenvalues within solver accuracy of zero are treated as zero, so
/// rank-deficient inputs do not pick up √(rounding noise) terms.
fn psd_sqrt(m: &Mat) -> Mat {
    let (vals, vecs) = hermitian_eigen(m);
    let floor = 1e-14 * vals.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let d = nalgebra::DVector::from_iterator(
        vals.len(),
        vals.iter().map(|&x| c(if x > floor { x.sqrt() } else { 0.0 }, 0.0)),
    );
    &vecs * Mat::from_diagonal(&d) * vecs.adjoint()
}

/// (tr|√a √b|)², via singular values so small terms stay linear.
pub(crate) fn fidelity_raw(a: &Mat, b: &Mat) -> f64 {
    let prod = psd_sqrt(a) * psd_sqrt(b);
    let t: f64 = prod.singular_values().iter().sum();
    (t * t).min(1.0)
}

// ---------------------------------------------------------------- query adversaries

#[derive(Clone, Debug)]
pub enum AdversaryStep {
    /// Unitary on the whole adversary register (query qubits first).
    Unitary(Mat),
    Forward,
    Inverse,
}

#[derive(Clone, Debug)]
pub struct Adversary {
    pub n_work: usize,
    pub steps: Vec<AdversaryStep>,
}

impl Adversary {
    pub fn queries(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| !matches!(s, AdversaryStep::Unitary(_)))
            .count()
    }

    /// Haar unitaries interleaved with `t` queries, each forward or inverse at random.
    pub fn random<R: Rng + ?Sized>(n_in: usize, n_work: usize, t: usize, rng: &mut R) -> Adversary {
        let d = 1 << (n_in + n_work);
        let mut steps = vec![AdversaryStep::Unitary(crate::linalg::haar_unitary(d, rng))];
        for _ in 0..t {
            steps.push(if rng.random::<bool>() {
                AdversaryStep::Forward
            } else {
                AdversaryStep::Inverse
            });
            steps.push(AdversaryStep::Unitary(crate::linalg::haar_unitary(d, rng)));
        }
        Adversary { n_work, steps }
    }
}

fn kraus_on_register(ops: &[BranchOperator], n_in: usize, n_work: usize) -> Vec<Mat> {
    let w = identity(1 << n_work);
    ops.iter()
        .flat_map(|op| op.blocks(n_in))
        .map(|k| k.kronecker(&w))
        .collect()
}

impl Simulator {
    /// Trace distance between the adversary's final states when its
    /// queries go to Φ_C / Φ_{C†} versus U / U†.
    pub fn query_adversary_gap(&self, c: &Circuit, u: &Mat, adv: &Adversary) -> Result<f64, SimError> {
        let n = c.n_in;
        let d = 1usize << n;
        if u.nrows() != d {
            return Err(SimError::Dimension(format!(
                "U has dimension {}, expected {d}",
                u.nrows()
            )));
        }
        let inv = c
            .inverse()
            .ok_or_else(|| SimError::Unsupported("adversary queries need a unitary circuit".into()))?;
        let fwd = kraus_on_register(&self.branch_operators(c)?, n, adv.n_work);
        let bwd = kraus_on_register(&self.branch_operators(&inv)?, n, adv.n_work);
        let w = identity(1 << adv.n_work);
        let uf = u.kronecker(&w);
        let ub = u.adjoint().kronecker(&w);
        let dim = d << adv.n_work;
        let mut rho_c = Mat::zeros(dim, dim);
        rho_c[(0, 0)] = ONE;
        let mut rho_u = rho_c.clone();
        for step in &adv.steps {
            match step {
                AdversaryStep::Unitary(v) => {
                    rho_c = v * &rho_c * v.adjoint();
                    rho_u = v * &rho_u * v.adjoint();
                }
                AdversaryStep::Forward | AdversaryStep::Inverse => {
                    let (ks, uq) = if matches!(step, AdversaryStep::Forward) {
                        (&fwd, &uf)
                    } else {
                        (&bwd, &ub)
                    };
                    rho_c = ks
                        .iter()
                        .fold(Mat::zeros(dim, dim), |acc, k| acc + k * &rho_c * k.adjoint());
                    rho_u = uq * &rho_u * uq.adjoint();
                }
            }
        }
        Ok(trace_distance_raw(&rho_c, &rho_u))
    }
}

/// Unitary of a model-agnostic circuit on its inputs when it has no ancillae.
pub fn circuit_unitary(c: &Circuit) -> Result<Mat, SimError> {
    Simulator::default().unitary(c)
}

pub fn is_measuring(c: &Circuit) -> bool {
    c.model == Model::Measff && c.has_measurement()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::mats;

    #[test]
    fn fanout_kernel_matches_definition() {
        let mut c = Circuit::new(Model::Qac0f, 4, 0);
        c.push(vec![Gate::Fanout {
            source: 1,
            targets: vec![0, 3],
        }]);
        let u = circuit_unitary(&c).unwrap();
        for x in 0..16usize {
            let s = (x >> 2) & 1;
            let y = if s == 1 { x ^ 0b1001 } else { x };
            assert_eq!(u[(y, x)], ONE);
        }
    }

    #[test]
    fn dense_kernel_matches_kron() {
        let mut rng = rng_for(5, &[]);
        let g = crate::linalg::haar_unitary(4, &mut rng);
        let mut c = Circuit::new(Model::Qac0, 3, 0);
        c.push(vec![Gate::Unitary {
            qubits: vec![2, 0],
            matrix: g.transpose().iter().copied().collect(),
        }]);
        let u = circuit_unitary(&c).unwrap();
        // build the reference with an explicit basis map
        for x in 0..8usize {
            for y in 0..8usize {
                let (x0, x1, x2) = (x >> 2 & 1, x >> 1 & 1, x & 1);
                let (y0, y1, y2) = (y >> 2 & 1, y >> 1 & 1, y & 1);
                let want = if x1 == y1 { g[(y2 * 2 + y0, x2 * 2 + x0)] } else { ZERO };
                assert!((u[(y, x)] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn streamed_release_and_reallocate() {
        let mut c = Circuit::new(Model::Measff, 1, 2);
        c.n_cbits = 1;
        c.push(vec![Gate::h(1)]);
        c.push(vec![Gate::Measure { q: 1, cbit: 0 }]);
        c.push(vec![Gate::Cpauli {
            pauli: Pauli::X,
            q: 1,
            cbits: vec![0],
        }]);
        c.push(vec![Gate::cnot(0, 1)]);
        let sim = Simulator::default();
        let run = sim.run_streamed(&c, &StateVector::basis(1, 1), 3).unwrap();
        assert!(run.live.contains(&1));
        let (v, nrm) = run.project_rest_zero(&[0]);
        assert!(nrm < 1e-12 || (v[1].norm() - 1.0).abs() < 1e-12);
        assert!(!run.live.contains(&2));
    }

    #[test]
    fn rotation_error_is_sin_squared() {
        let mut c = Circuit::new(Model::Qac0, 1, 0);
        c.push(vec![Gate::u1(0, mats::rx(0.3))]);
        let e = Simulator::default().impl_error(&c, &identity(2)).unwrap();
        let want = (0.15f64).sin().powi(2);
        assert!((e.epsilon - want).abs() < 1e-9, "{} vs {want}", e.epsilon);
        assert!((e.epsilon_found - want).abs() < 1e-9);
    }
}
