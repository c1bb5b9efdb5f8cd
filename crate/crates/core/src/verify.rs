//! Statistical and exact checks: frame potentials, moment operators,
//! swap-test and average-case distance identities, Bell-basis Pauli
//! sampling, collision probability, subsystem purity, nekomata fidelity,
//! t-wise independence, and the concrete distinguisher suite.
//!
//! Passing these checks is necessary for closeness to Haar, not sufficient.

use crate::circuit::Circuit;
use crate::ensembles::{sample_unitary, BoolFn, EnsembleError, EnsembleSpec, Kind, SourceKind};
use crate::fields::{derive_seed, rng_for, FieldElement, PolyFn};
use crate::linalg::{
    haar_state, haar_unitary, identity, inner, kron, mat_vec, spectral_norm, vdot, Mat, C64, ONE, ZERO,
};
use crate::sim::{SimError, Simulator, StateVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand_distr::Binomial;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeMap;
use thiserror::Error;

/// Statistical verdicts use this many standard errors.
pub const SIGMA_BAND: f64 = 3.0;
/// Largest moment-operator dimension d^(2t) built densely.
pub const MOMENT_DIM_CAP: usize = 1024;
const MOMENT_BATCHES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("resource cap: {0}")]
    Cap(String),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Info,
}

/// Machine-readable result of one test. Non-finite numbers serialize as null.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub test: String,
    pub params: Map<String, Value>,
    pub value: f64,
    pub stderr: f64,
    pub reference: f64,
    pub sigma: f64,
    pub verdict: Verdict,
    pub seed: u64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.verdict != Verdict::Fail
    }
}

/// Distance from the reference in units of the combined standard error.
/// Zero error gives 0 for an exact match and infinity otherwise.
pub fn sigma_distance(value: f64, se: f64, reference: f64, ref_se: f64) -> f64 {
    let se = (se * se + ref_se * ref_se).sqrt();
    let diff = (value - reference).abs();
    if se > 0.0 {
        diff / se
    } else if diff <= 1e-9 * reference.abs().max(1.0) {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Leave-one-out jackknife for the mean: (estimate, standard error).
pub fn jackknife_mean(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let total: f64 = xs.iter().sum();
    let mean = total / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let loo: Vec<f64> = xs.iter().map(|x| (total - x) / (n - 1) as f64).collect();
    let bar = loo.iter().sum::<f64>() / n as f64;
    let var = (n - 1) as f64 / n as f64 * loo.iter().map(|v| (v - bar) * (v - bar)).sum::<f64>();
    (mean, var.sqrt())
}

/// Rerun a failing statistical test once with a derived seed; the second
/// result stands.
pub fn with_rerun<F>(seed: u64, run: F) -> Result<Report, VerifyError>
where
    F: Fn(u64) -> Result<Report, VerifyError>,
{
    let first = run(seed)?;
    if first.verdict != Verdict::Fail {
        return Ok(first);
    }
    let mut second = run(derive_seed(seed, &[0x2E2A]))?;
    second.params.insert("rerun".into(), Value::from(true));
    second.params.insert("first_sigma".into(), json_f64(first.sigma));
    Ok(second)
}

fn json_f64(x: f64) -> Value {
    if x.is_finite() {
        Value::from(x)
    } else {
        Value::from(x.to_string())
    }
}

fn spec_params(spec: &EnsembleSpec) -> Map<String, Value> {
    match serde_json::to_value(spec).expect("serializes") {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------- frame potentials

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "frame-potential-mc")]
    FramePotentialMc,
    #[serde(rename = "frame-potential-exact")]
    FramePotentialExact,
    #[serde(rename = "moment-operator-exact")]
    MomentOperatorExact,
    #[serde(rename = "moment-operator-mc")]
    MomentOperatorMc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub t: usize,
    pub estimator: Estimator,
    pub value: f64,
    pub stderr: f64,
    pub reference: f64,
    pub reference_stderr: f64,
    pub samples: usize,
    pub seed: u64,
}

impl MomentReport {
    pub fn sigma(&self) -> f64 {
        sigma_distance(self.value, self.stderr, self.reference, self.reference_stderr)
    }

    pub fn to_report(&self, test: &str, spec: &EnsembleSpec) -> Report {
        let sigma = self.sigma();
        let mut params = spec_params(spec);
        params.insert("t".into(), Value::from(self.t));
        params.insert("samples".into(), Value::from(self.samples));
        params.insert(
            "estimator".into(),
            serde_json::to_value(self.estimator).expect("serializes"),
        );
        params.insert("reference_stderr".into(), Value::from(self.reference_stderr));
        Report {
            test: test.into(),
            params,
            value: self.value,
            stderr: self.stderr,
            reference: self.reference,
            sigma,
            verdict: if sigma <= SIGMA_BAND {
                Verdict::Pass
            } else {
                Verdict::Fail
            },
            seed: self.seed,
        }
    }
}

/// Haar value of E|tr U|^(2t) in dimension d: the number of permutations
/// of t elements whose longest increasing subsequence is at most d.
/// Equals t! once d >= t.
pub fn haar_frame_potential_exact(d: usize, t: usize) -> f64 {
    assert!(t <= 10, "enumeration over S_t");
    let mut perm: Vec<usize> = (0..t).collect();
    let mut count = 0u64;
    loop {
        if longest_increasing(&perm) <= d {
            count += 1;
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    count as f64
}

fn longest_increasing(p: &[usize]) -> usize {
    let mut tails: Vec<usize> = Vec::new();
    for &x in p {
        match tails.binary_search(&x) {
            Ok(_) => {}
            Err(i) if i == tails.len() => tails.push(x),
            Err(i) => tails[i] = x,
        }
    }
    tails.len()
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Monte Carlo E|tr W|^(2t) over Haar W (Gaussian QR), with jackknife error.
pub fn haar_reference(n: usize, t: usize, samples: usize, seed: u64) -> (f64, f64) {
    let d = 1usize << n;
    let xs: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let w = haar_unitary(d, &mut rng_for(seed, &[0x4AA2, i as u64]));
            w.trace().norm_sqr().powi(t as i32)
        })
        .collect();
    jackknife_mean(&xs)
}

/// Monte Carlo E|tr(U†V)|^(2t) over independent pairs from `spec`, with the
/// Haar Monte Carlo reference at the same sample count.
pub fn frame_potential(spec: &EnsembleSpec, t: usize, samples: usize, seed: u64) -> Result<MomentReport, VerifyError> {
    if samples < 2 {
        return Err(VerifyError::Invalid("frame potential needs at least 2 samples".into()));
    }
    spec.validate()?;
    let base = spec.with_seed(seed);
    let xs: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let u = sample_unitary(&base.draw(2 * i))?;
            let v = sample_unitary(&base.draw(2 * i + 1))?;
            Ok(inner(&u, &v).norm_sqr().powi(t as i32))
        })
        .collect::<Result<_, EnsembleError>>()?;
    let (value, stderr) = jackknife_mean(&xs);
    let (reference, reference_stderr) = haar_reference(spec.n, t, samples, derive_seed(seed, &[0x4AA3]));
    Ok(MomentReport {
        t,
        estimator: Estimator::FramePotentialMc,
        value,
        stderr,
        reference,
        reference_stderr,
        samples,
        seed,
    })
}

/// Every element (up to phase) of a small finite ensemble, or `None` when
/// the ensemble is continuous or too large to list.
pub fn enumerate_ensemble(spec: &EnsembleSpec) -> Option<Vec<Mat>> {
    let n = spec.n;
    match spec.kind {
        Kind::Singleton => Some(vec![identity(1 << n)]),
        Kind::Pauli if n <= 3 => Some((0..1usize << (2 * n)).map(|k| pauli_matrix(n, k)).collect()),
        Kind::Clifford if n == 1 => Some(single_qubit_cliffords()),
        _ => None,
    }
}

/// Pauli string with base-4 digits (qubit 0 most significant): 0=I 1=X 2=Y 3=Z.
pub fn pauli_label(n: usize, k: usize) -> String {
    (0..n)
        .map(|q| ['I', 'X', 'Y', 'Z'][(k >> (2 * (n - 1 - q))) & 3])
        .collect()
}

fn pauli_masks(n: usize, k: usize) -> (usize, usize) {
    let (mut x, mut z) = (0, 0);
    for q in 0..n {
        let digit = (k >> (2 * (n - 1 - q))) & 3;
        let bit = 1 << (n - 1 - q);
        if digit == 1 || digit == 2 {
            x |= bit;
        }
        if digit == 2 || digit == 3 {
            z |= bit;
        }
    }
    (x, z)
}

/// Dense Pauli matrix for index `k` (see [`pauli_label`]).
pub fn pauli_matrix(n: usize, k: usize) -> Mat {
    let d = 1usize << n;
    let (x, z) = pauli_masks(n, k);
    let mut m = Mat::zeros(d, d);
    for col in 0..d {
        m[(col ^ x, col)] = pauli_entry(x, z, col);
    }
    m
}

/// P[c ^ x, c] = i^{|x & z|} (-1)^{|z & c|}.
fn pauli_entry(x: usize, z: usize, col: usize) -> C64 {
    let ph = [ONE, C64::new(0.0, 1.0), C64::new(-1.0, 0.0), C64::new(0.0, -1.0)][(x & z).count_ones() as usize % 4];
    if (z & col).count_ones() % 2 == 1 {
        -ph
    } else {
        ph
    }
}

fn single_qubit_cliffords() -> Vec<Mat> {
    let h = Mat::from_row_slice(2, 2, &crate::circuit::mats::H);
    let s = Mat::from_row_slice(2, 2, &crate::circuit::mats::S);
    let mut found: Vec<Mat> = vec![identity(2)];
    let mut frontier = vec![identity(2)];
    while let Some(m) = frontier.pop() {
        for g in [&h, &s] {
            let next = g * &m;
            if !found.iter().any(|f| inner(f, &next).norm() > 2.0 - 1e-9) {
                found.push(next.clone());
                frontier.push(next);
            }
        }
    }
    found
}

/// Exact frame potential by enumerating all ordered pairs.
pub fn frame_potential_exact(spec: &EnsembleSpec, t: usize) -> Option<MomentReport> {
    let us = enumerate_ensemble(spec)?;
    let mut total = 0.0;
    for u in &us {
        for v in &us {
            total += inner(u, v).norm_sqr().powi(t as i32);
        }
    }
    Some(MomentReport {
        t,
        estimator: Estimator::FramePotentialExact,
        value: total / (us.len() * us.len()) as f64,
        stderr: 0.0,
        reference: haar_frame_potential_exact(1 << spec.n, t),
        reference_stderr: 0.0,
        samples: us.len() * us.len(),
        seed: spec.seed,
    })
}

// ---------------------------------------------------------------- moment operators

fn tensor_moment(u: &Mat, t: usize) -> Mat {
    let mut w = u.clone();
    for _ in 1..t {
        w = kron(&w, u);
    }
    kron(&w, &w.map(|x| x.conj()))
}

/// Exact Haar t-th moment E[U^{⊗t} ⊗ conj(U)^{⊗t}] for t <= 2 via the
/// Weingarten formula; rows are (i, j), columns (k, l).
pub fn haar_moment_operator(d: usize, t: usize) -> Result<Mat, VerifyError> {
    let df = d as f64;
    match t {
        1 => Ok(Mat::from_fn(d * d, d * d, |r, c| {
            let (i, j, k, l) = (r / d, r % d, c / d, c % d);
            if i == j && k == l {
                C64::new(1.0 / df, 0.0)
            } else {
                ZERO
            }
        })),
        2 => {
            let wg_id = 1.0 / (df * df - 1.0);
            let wg_swap = -1.0 / (df * (df * df - 1.0));
            let dd = d * d;
            Ok(Mat::from_fn(dd * dd, dd * dd, |r, c| {
                let (i, j) = (r / dd, r % dd);
                let (k, l) = (c / dd, c % dd);
                let (i1, i2, j1, j2) = (i / d, i % d, j / d, j % d);
                let (k1, k2, l1, l2) = (k / d, k % d, l / d, l % d);
                let mut v = 0.0;
                for sigma in [false, true] {
                    let row_ok = if sigma {
                        i1 == j2 && i2 == j1
                    } else {
                        i1 == j1 && i2 == j2
                    };
                    if !row_ok {
                        continue;
                    }
                    for tau in [false, true] {
                        let col_ok = if tau {
                            k1 == l2 && k2 == l1
                        } else {
                            k1 == l1 && k2 == l2
                        };
                        if col_ok {
                            v += if sigma == tau { wg_id } else { wg_swap };
                        }
                    }
                }
                C64::new(v, 0.0)
            }))
        }
        _ => Err(VerifyError::Invalid(format!(
            "moment operators are only built for t <= 2 (got {t})"
        ))),
    }
}

/// Spectral-norm distance between an ensemble's t-th moment operator and
/// the Haar one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub t: usize,
    pub estimator: Estimator,
    pub gap: f64,
    /// Batch-means estimate of the spectral norm of the sampling error
    /// (0 when exact).
    pub stderr: f64,
    pub samples: usize,
    pub seed: u64,
}

impl GapReport {
    pub fn to_report(&self, spec: &EnsembleSpec) -> Report {
        let pass = match self.estimator {
            Estimator::MomentOperatorExact => self.gap <= 1e-10,
            _ => self.gap <= SIGMA_BAND * self.stderr,
        };
        let mut params = spec_params(spec);
        params.insert("t".into(), Value::from(self.t));
        params.insert("samples".into(), Value::from(self.samples));
        params.insert(
            "estimator".into(),
            serde_json::to_value(self.estimator).expect("serializes"),
        );
        Report {
            test: "moment_operator_gap".into(),
            params,
            value: self.gap,
            stderr: self.stderr,
            reference: 0.0,
            sigma: sigma_distance(self.gap, self.stderr, 0.0, 0.0),
            verdict: if pass { Verdict::Pass } else { Verdict::Fail },
            seed: self.seed,
        }
    }
}

fn check_moment_dims(n: usize, t: usize) -> Result<usize, VerifyError> {
    if !(1..=2).contains(&t) {
        return Err(VerifyError::Invalid(format!(
            "moment_operator_gap supports t in {{1,2}} (got {t})"
        )));
    }
    let dim = 1usize.checked_shl((2 * t * n) as u32).unwrap_or(usize::MAX);
    if n > 8 || dim > MOMENT_DIM_CAP {
        return Err(VerifyError::Cap(format!(
            "moment operator of dimension 2^{} exceeds {MOMENT_DIM_CAP}",
            2 * t * n
        )));
    }
    Ok(1 << n)
}

/// Exact gap when the ensemble can be enumerated, otherwise Monte Carlo
/// with 10^4 draws seeded by `spec.seed`.
pub fn moment_operator_gap(spec: &EnsembleSpec, t: usize) -> Result<GapReport, VerifyError> {
    let d = check_moment_dims(spec.n, t)?;
    match enumerate_ensemble(spec) {
        Some(us) => {
            let mut m = Mat::zeros(d.pow(2 * t as u32), d.pow(2 * t as u32));
            for u in &us {
                m += tensor_moment(u, t);
            }
            m /= C64::new(us.len() as f64, 0.0);
            Ok(GapReport {
                t,
                estimator: Estimator::MomentOperatorExact,
                gap: spectral_norm(&(m - haar_moment_operator(d, t)?)),
                stderr: 0.0,
                samples: us.len(),
                seed: spec.seed,
            })
        }
        None => moment_operator_gap_mc(spec, t, 10_000, spec.seed),
    }
}

/// Sampled moment operator, accumulated in batches. The returned error is
/// sqrt(Σ_b ||M_b - M||² / (B(B-1))), the batch-means scale of the
/// sampling noise in spectral norm.
pub fn moment_operator_mc(spec: &EnsembleSpec, t: usize, samples: usize, seed: u64) -> Result<(Mat, f64), VerifyError> {
    let d = check_moment_dims(spec.n, t)?;
    spec.validate()?;
    if samples < 2 {
        return Err(VerifyError::Invalid("need at least 2 samples".into()));
    }
    let batches = MOMENT_BATCHES.min(samples);
    let base = spec.with_seed(seed);
    let dim = d.pow(2 * t as u32);
    let sums: Vec<(Mat, usize)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let lo = b * samples / batches;
            let hi = (b + 1) * samples / batches;
            let mut m = Mat::zeros(dim, dim);
            for i in lo..hi {
                m += tensor_moment(&sample_unitary(&base.draw(i as u64))?, t);
            }
            Ok((m, hi - lo))
        })
        .collect::<Result<_, EnsembleError>>()?;
    let mut total = Mat::zeros(dim, dim);
    for (m, _) in &sums {
        total += m;
    }
    let mean = total / C64::new(samples as f64, 0.0);
    let spread: f64 = sums
        .iter()
        .map(|(m, k)| spectral_norm(&(m / C64::new(*k as f64, 0.0) - &mean)).powi(2))
        .sum();
    Ok((mean, (spread / (batches * (batches - 1)) as f64).sqrt()))
}

pub fn moment_operator_gap_mc(
    spec: &EnsembleSpec,
    t: usize,
    samples: usize,
    seed: u64,
) -> Result<GapReport, VerifyError> {
    let (mean, stderr) = moment_operator_mc(spec, t, samples, seed)?;
    Ok(GapReport {
        t,
        estimator: Estimator::MomentOperatorMc,
        gap: spectral_norm(&(mean - haar_moment_operator(1 << spec.n, t)?)),
        stderr,
        samples,
        seed,
    })
}

// ---------------------------------------------------------------- unitary-pair tests

fn same_dims(u: &Mat, v: &Mat) -> Result<usize, VerifyError> {
    if !u.is_square() || u.shape() != v.shape() {
        return Err(VerifyError::Dimension(format!("{:?} vs {:?}", u.shape(), v.shape())));
    }
    Ok(u.nrows())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub exact: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub shots: u64,
}

/// Swap test between the Choi states of `u` and `u_tilde`:
/// P₀ = ½(1 + |tr(Ũ†U)|²/d²), plus a binomial shot estimate.
pub fn choi_swap_test(u: &Mat, u_tilde: &Mat, shots: u64, seed: u64) -> Result<SwapReport, VerifyError> {
    let d = same_dims(u, u_tilde)? as f64;
    let exact = 0.5 * (1.0 + inner(u_tilde, u).norm_sqr() / (d * d));
    let exact = exact.min(1.0);
    let (estimate, stderr) = if shots == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let hits = Binomial::new(shots, exact)
            .expect("probability in [0,1]")
            .sample(&mut rng_for(seed, &[0x5A9]));
        let p = hits as f64 / shots as f64;
        (p, (p * (1.0 - p) / shots as f64).sqrt())
    };
    Ok(SwapReport {
        exact,
        estimate,
        stderr,
        shots,
    })
}

/// (d/(d+1))(1 - |tr(U†Ũ)|²/d²).
pub fn avg_case_distance(u: &Mat, u_tilde: &Mat) -> Result<f64, VerifyError> {
    let d = same_dims(u, u_tilde)? as f64;
    Ok(d / (d + 1.0) * (1.0 - inner(u, u_tilde).norm_sqr() / (d * d)))
}

/// Monte Carlo of E_ψ[1 - |⟨Uψ|Ũψ⟩|²] over Haar inputs.
pub fn avg_case_distance_mc(u: &Mat, u_tilde: &Mat, samples: usize, seed: u64) -> Result<(f64, f64), VerifyError> {
    let d = same_dims(u, u_tilde)?;
    let xs: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let psi = haar_state(d, &mut rng_for(seed, &[0xAC, i as u64]));
            1.0 - vdot(&mat_vec(u, &psi), &mat_vec(u_tilde, &psi)).norm_sqr()
        })
        .collect();
    Ok(jackknife_mean(&xs))
}

// ---------------------------------------------------------------- circuit-level tests

/// Unitary of a unitary-model circuit on its inputs. With ancillae, the
/// ancilla-zero block must itself be unitary (ancillae returned clean).
pub fn circuit_matrix(c: &Circuit, sim: &Simulator) -> Result<Mat, VerifyError> {
    if !c.model.is_unitary() {
        return Err(VerifyError::Invalid("test needs a unitary-model circuit".into()));
    }
    if c.n_anc == 0 {
        return Ok(sim.unitary(c)?);
    }
    let iso = sim.isometry(c)?;
    let d = 1usize << c.n_in;
    let a = 1usize << c.n_anc;
    let block = Mat::from_fn(d, d, |o, i| iso[(o * a, i)]);
    if !crate::linalg::is_unitary(&block, 1e-9) {
        return Err(VerifyError::Invalid("ancillae are not returned to |0⟩".into()));
    }
    Ok(block)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BellReport {
    /// Exact mass of every Pauli string, indexed as in [`pauli_label`].
    pub exact: Vec<f64>,
    pub histogram: BTreeMap<String, u64>,
    pub shots: u64,
    /// Probability that two independent samples coincide: Σ p².
    pub agreement_exact: f64,
    /// Unbiased sample estimate Σ c(c-1) / (N(N-1)).
    pub agreement_sampled: f64,
    pub max_mass: f64,
}

/// Exact Bell-basis Pauli distribution p(P) = |tr(U O₀ U† P)/d|² for O
/// acting on qubit 0.
pub fn bell_pauli_distribution(u: &Mat, o: &Mat) -> Result<Vec<f64>, VerifyError> {
    let d = u.nrows();
    let n = d.trailing_zeros() as usize;
    if !u.is_square() || 1 << n != d {
        return Err(VerifyError::Dimension(format!("U is {:?}", u.shape())));
    }
    if o.shape() != (2, 2) {
        return Err(VerifyError::Dimension("O must be a single-qubit operator".into()));
    }
    let herm = crate::linalg::max_abs_diff(o, &o.adjoint()) <= 1e-9;
    let tr = o[(0, 0)] + o[(1, 1)];
    let norm = (o * o).trace().re / 2.0;
    if !herm || tr.norm() > 1e-9 || (norm - 1.0).abs() > 1e-9 {
        return Err(VerifyError::Invalid(
            "O must be Hermitian, traceless and normalised so tr(O²)/2 = 1".into(),
        ));
    }
    let big = kron(o, &identity(d / 2));
    let a = u * big * u.adjoint();
    let dist: Vec<f64> = (0..d * d)
        .map(|k| {
            let (x, z) = pauli_masks(n, k);
            let tr: C64 = (0..d).map(|col| a[(col, col ^ x)] * pauli_entry(x, z, col)).sum();
            (tr / d as f64).norm_sqr()
        })
        .collect();
    Ok(dist)
}

/// Bell-basis Pauli sampling on a circuit, with O = Z on qubit 0 by default.
pub fn bell_pauli_sample(
    c: &Circuit,
    o: Option<&Mat>,
    shots: u64,
    seed: u64,
    sim: &Simulator,
) -> Result<BellReport, VerifyError> {
    let u = circuit_matrix(c, sim)?;
    bell_pauli_sample_matrix(&u, o, shots, seed)
}

pub fn bell_pauli_sample_matrix(u: &Mat, o: Option<&Mat>, shots: u64, seed: u64) -> Result<BellReport, VerifyError> {
    let z = Mat::from_row_slice(2, 2, &crate::circuit::mats::Z);
    let exact = bell_pauli_distribution(u, o.unwrap_or(&z))?;
    let n = u.nrows().trailing_zeros() as usize;
    let mut counts = vec![0u64; exact.len()];
    if shots > 0 {
        let w = WeightedIndex::new(&exact).map_err(|e| VerifyError::Invalid(e.to_string()))?;
        let mut rng = rng_for(seed, &[0xBE11]);
        for _ in 0..shots {
            counts[w.sample(&mut rng)] += 1;
        }
    }
    let histogram = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, &c)| (pauli_label(n, k), c))
        .collect();
    let agreement_sampled = if shots > 1 {
        counts.iter().map(|&c| (c * c.saturating_sub(1)) as f64).sum::<f64>() / (shots * (shots - 1)) as f64
    } else {
        f64::NAN
    };
    Ok(BellReport {
        agreement_exact: exact.iter().map(|p| p * p).sum(),
        max_mass: exact.iter().cloned().fold(0.0, f64::max),
        exact,
        histogram,
        shots,
        agreement_sampled,
    })
}

/// Σ_x |ψ_x|⁴.
pub fn collision_exact(amps: &[C64]) -> f64 {
    amps.iter().map(|a| a.norm_sqr().powi(2)).sum()
}

/// tr(ρ_A²) for A = the first `cut` qubits.
pub fn purity_exact(amps: &[C64], cut: usize) -> Result<f64, VerifyError> {
    let n = amps.len().trailing_zeros() as usize;
    if cut > n {
        return Err(VerifyError::Invalid(format!("cut {cut} exceeds {n} qubits")));
    }
    let rest = 1usize << (n - cut);
    let dim_a = 1usize << cut;
    // ρ_A = ΨΨ†, and tr(ρ_A²) = ||Ψ†Ψ||_F² is cheaper when A is larger
    let psi = Mat::from_fn(dim_a, rest, |i, j| amps[i * rest + j]);
    let g = if dim_a <= rest {
        &psi * psi.adjoint()
    } else {
        psi.adjoint() * &psi
    };
    Ok(g.iter().map(|x| x.norm_sqr()).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub exact: f64,
    pub estimate: f64,
    pub shots: u64,
}

fn output_state(c: &Circuit, input: &StateVector, sim: &Simulator) -> Result<Vec<C64>, VerifyError> {
    if !c.model.is_unitary() {
        return Err(VerifyError::Invalid("test needs a unitary-model circuit".into()));
    }
    Ok(sim.run(c, input, 0)?.into_amps())
}

/// Collision probability of the full output register, exact and from
/// `shots` pairs of computational-basis samples.
pub fn collision_probability(
    c: &Circuit,
    input: &StateVector,
    shots: u64,
    seed: u64,
    sim: &Simulator,
) -> Result<CollisionReport, VerifyError> {
    let amps = output_state(c, input, sim)?;
    let exact = collision_exact(&amps);
    let probs: Vec<f64> = amps.iter().map(|a| a.norm_sqr()).collect();
    let estimate = if shots > 0 {
        let w = WeightedIndex::new(&probs).map_err(|e| VerifyError::Invalid(e.to_string()))?;
        let mut rng = rng_for(seed, &[0xC011]);
        let hits = (0..shots).filter(|_| w.sample(&mut rng) == w.sample(&mut rng)).count();
        hits as f64 / shots as f64
    } else {
        f64::NAN
    };
    Ok(CollisionReport { exact, estimate, shots })
}

pub fn subsystem_purity(c: &Circuit, input: &StateVector, cut: usize, sim: &Simulator) -> Result<f64, VerifyError> {
    purity_exact(&output_state(c, input, sim)?, cut)
}

/// Best fidelity with any state (|0^r,ψ₀⟩ + |1^r,ψ₁⟩)/√2:
/// (||Π₀ψ|| + ||Π₁ψ||)²/2. The optimum takes ψ_b along the normalised
/// projection Π_bψ, with the two overlaps phase-aligned.
pub fn nekomata_fidelity(psi: &StateVector, r: usize) -> Result<f64, VerifyError> {
    let n = psi.n_qubits();
    if r == 0 || r > n {
        return Err(VerifyError::Invalid(format!("marker width {r} out of range 1..={n}")));
    }
    let tail = 1usize << (n - r);
    let ones = ((1usize << r) - 1) * tail;
    let amps = psi.amps();
    let n0 = amps[..tail].iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    let n1 = amps[ones..ones + tail].iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    Ok((n0 + n1).powi(2) / 2.0)
}

// ---------------------------------------------------------------- t-wise independence

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwiseReport {
    pub level: usize,
    pub tuples: usize,
    pub keys: usize,
    pub chi2: f64,
    pub dof: f64,
    pub p_value: f64,
}

impl TwiseReport {
    pub fn passes(&self, significance: f64) -> bool {
        self.p_value >= significance
    }
}

/// Chi-square test that one-bit outputs on random distinct input tuples
/// of size `level` are uniform over keys. `independence` is the k of a
/// twise source (ignored for other sources).
pub fn twise_test(
    source: SourceKind,
    n: usize,
    independence: usize,
    level: usize,
    tuples: usize,
    seed: u64,
) -> Result<TwiseReport, VerifyError> {
    if level == 0 || level > 12 || level > 1 << n {
        return Err(VerifyError::Invalid(format!("level {level} out of range for n = {n}")));
    }
    let cells = 1usize << level;
    let keys = 50 * cells;
    let mut rng = rng_for(seed, &[0x7715E]);
    let inputs: Vec<u64> = (0..1u64 << n).collect();
    let mut chi2 = 0.0;
    for tuple_idx in 0..tuples {
        let xs: Vec<u64> = inputs.choose_multiple(&mut rng, level).copied().collect();
        let mut counts = vec![0usize; cells];
        for key in 0..keys {
            let f = BoolFn::sample(
                source,
                independence,
                n as u32,
                1,
                derive_seed(seed, &[0x7E5, tuple_idx as u64, key as u64]),
            )?;
            let cell = xs.iter().fold(0usize, |acc, &x| (acc << 1) | f.eval(x) as usize);
            counts[cell] += 1;
        }
        let expect = keys as f64 / cells as f64;
        chi2 += counts
            .iter()
            .map(|&c| (c as f64 - expect).powi(2) / expect)
            .sum::<f64>();
    }
    let dof = (tuples * (cells - 1)) as f64;
    let p_value = ChiSquared::new(dof).expect("positive dof").sf(chi2);
    Ok(TwiseReport {
        level,
        tuples,
        keys,
        chi2,
        dof,
        p_value,
    })
}

/// Brute force over the whole key space of degree-(k-1) polynomials over
/// GF(2^s): true iff every tuple of `level` distinct inputs maps to every
/// output tuple (full s-bit outputs) for exactly the same number of keys.
pub fn twise_exact(s: u32, k: usize, level: usize) -> Result<bool, VerifyError> {
    if s > 4 {
        return Err(VerifyError::Cap("exhaustive twise check is limited to s <= 4".into()));
    }
    let q = 1u64 << s;
    if level as u64 > q || k == 0 {
        return Err(VerifyError::Invalid("level exceeds the field size".into()));
    }
    let n_keys = q.pow(k as u32);
    // evaluation table: key -> value at every point
    let table: Vec<Vec<u64>> = (0..n_keys)
        .map(|key| {
            let coeffs = (0..k)
                .map(|i| FieldElement::new((key >> (s as usize * i)) & (q - 1), s).expect("in range"))
                .collect();
            let f = PolyFn::new(coeffs, s).expect("valid");
            (0..q).map(|x| f.eval_bits(x)).collect()
        })
        .collect();
    let cells = q.pow(level as u32) as usize;
    let mut tuple: Vec<u64> = (0..level as u64).collect();
    loop {
        let mut counts = vec![0u64; cells];
        for row in &table {
            let cell = tuple
                .iter()
                .fold(0usize, |acc, &x| acc * q as usize + row[x as usize] as usize);
            counts[cell] += 1;
        }
        if counts.iter().any(|&c| c != counts[0]) {
            return Ok(false);
        }
        if !next_combination(&mut tuple, q) {
            return Ok(true);
        }
    }
}

fn next_combination(c: &mut [u64], n: u64) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - (k - i) as u64 {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

// ---------------------------------------------------------------- distinguishers

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distinguisher {
    /// Σ_x |⟨x|U|0⟩|⁴.
    Collision,
    /// Purity of the first n/2 qubits of U|0⟩.
    Purity,
    /// Choi swap test between two independent draws.
    Swap,
    /// Bell-basis Pauli sampling agreement Σ p² with O = Z₀. Needs U†.
    Bell,
    /// Collision probability of U†|0⟩.
    CollisionInverse,
    /// Half the spectral distance between the two t-th moment operators.
    Moments,
}

impl Distinguisher {
    pub const FORWARD: [Distinguisher; 3] = [Distinguisher::Collision, Distinguisher::Purity, Distinguisher::Swap];

    pub fn name(self) -> &'static str {
        match self {
            Distinguisher::Collision => "collision",
            Distinguisher::Purity => "purity",
            Distinguisher::Swap => "swap",
            Distinguisher::Bell => "bell",
            Distinguisher::CollisionInverse => "collision_inverse",
            Distinguisher::Moments => "moments",
        }
    }

    pub fn access(self) -> &'static str {
        match self {
            // Bell sampling applies C and then C† to the Bell pair
            Distinguisher::CollisionInverse | Distinguisher::Bell => "forward+inverse",
            Distinguisher::Moments => "moments",
            _ => "forward",
        }
    }
}

impl std::str::FromStr for Distinguisher {
    type Err = String;
    fn from_str(s: &str) -> Result<Distinguisher, String> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown test {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinguisherReport {
    pub test: String,
    pub access: String,
    pub value_a: f64,
    pub stderr_a: f64,
    pub value_b: f64,
    pub stderr_b: f64,
    pub advantage: f64,
    pub stderr: f64,
    /// SIGMA_BAND standard errors
    pub threshold: f64,
    pub flagged: bool,
}

fn draw_statistic(test: Distinguisher, spec: &EnsembleSpec, i: u64) -> Result<f64, VerifyError> {
    let n = spec.n;
    let u = sample_unitary(&spec.draw(i))?;
    let first_col: Vec<C64> = u.column(0).iter().copied().collect();
    Ok(match test {
        Distinguisher::Collision => collision_exact(&first_col),
        Distinguisher::CollisionInverse => {
            let row: Vec<C64> = u.row(0).iter().map(|x| x.conj()).collect();
            collision_exact(&row)
        }
        Distinguisher::Purity => purity_exact(&first_col, n / 2)?,
        Distinguisher::Swap => {
            let v = sample_unitary(&spec.draw(i ^ (1 << 62)))?;
            choi_swap_test(&u, &v, 0, 0)?.exact
        }
        Distinguisher::Bell => bell_pauli_sample_matrix(&u, None, 0, 0)?.agreement_exact,
        Distinguisher::Moments => unreachable!(),
    })
}

/// Run each test against draws from `a` and `b` (independent seeds) and
/// report the difference of the mean statistics.
pub fn distinguish(
    a: &EnsembleSpec,
    b: &EnsembleSpec,
    tests: &[Distinguisher],
    samples: usize,
    seed: u64,
) -> Result<Vec<DistinguisherReport>, VerifyError> {
    if a.n != b.n {
        return Err(VerifyError::Dimension(format!(
            "ensembles act on {} and {} qubits",
            a.n, b.n
        )));
    }
    a.validate()?;
    b.validate()?;
    if samples < 2 {
        return Err(VerifyError::Invalid("need at least 2 samples".into()));
    }
    let sa = a.with_seed(derive_seed(seed, &[0xA]));
    let sb = b.with_seed(derive_seed(seed, &[0xB]));
    tests
        .iter()
        .map(|&test| {
            if test == Distinguisher::Moments {
                let t = a.t.min(2);
                let (ma, ea) = moment_operator_mc(&sa, t, samples, sa.seed)?;
                let (mb, eb) = moment_operator_mc(&sb, t, samples, sb.seed)?;
                let haar = haar_moment_operator(1 << a.n, t)?;
                let adv = 0.5 * spectral_norm(&(&ma - &mb));
                let se = 0.5 * (ea * ea + eb * eb).sqrt();
                return Ok(DistinguisherReport {
                    test: test.name().into(),
                    access: test.access().into(),
                    value_a: spectral_norm(&(ma - &haar)),
                    stderr_a: ea,
                    value_b: spectral_norm(&(mb - &haar)),
                    stderr_b: eb,
                    advantage: adv.min(1.0),
                    stderr: se,
                    threshold: SIGMA_BAND * se,
                    flagged: adv > SIGMA_BAND * se,
                });
            }
            let stats = |spec: &EnsembleSpec| -> Result<(f64, f64), VerifyError> {
                let xs: Vec<f64> = (0..samples as u64)
                    .into_par_iter()
                    .map(|i| draw_statistic(test, spec, i))
                    .collect::<Result<_, _>>()?;
                Ok(jackknife_mean(&xs))
            };
            let (va, ea) = stats(&sa)?;
            let (vb, eb) = stats(&sb)?;
            let adv = (va - vb).abs();
            let se = (ea * ea + eb * eb).sqrt();
            Ok(DistinguisherReport {
                test: test.name().into(),
                access: test.access().into(),
                value_a: va,
                stderr_a: ea,
                value_b: vb,
                stderr_b: eb,
                advantage: adv.min(1.0),
                stderr: se,
                threshold: SIGMA_BAND * se,
                flagged: if se > 0.0 { adv > SIGMA_BAND * se } else { adv > 1e-12 },
            })
        })
        .collect()
}

/// Distinguisher report in the common JSON form; "pass" means not flagged.
/// Tests needing inverse access are informational, since the ensembles
/// only claim forward-query security.
pub fn distinguisher_to_report(
    r: &DistinguisherReport,
    a: &EnsembleSpec,
    b: &EnsembleSpec,
    samples: usize,
    seed: u64,
) -> Report {
    let mut params = Map::new();
    params.insert("a".into(), serde_json::to_value(a).expect("serializes"));
    params.insert("b".into(), serde_json::to_value(b).expect("serializes"));
    params.insert("access".into(), Value::from(r.access.clone()));
    params.insert("samples".into(), Value::from(samples));
    params.insert("value_a".into(), Value::from(r.value_a));
    params.insert("value_b".into(), Value::from(r.value_b));
    params.insert("threshold".into(), Value::from(r.threshold));
    params.insert("flagged".into(), Value::from(r.flagged));
    Report {
        test: format!("distinguish_{}", r.test),
        params,
        value: r.advantage,
        stderr: r.stderr,
        reference: 0.0,
        sigma: sigma_distance(r.advantage, r.stderr, 0.0, 0.0),
        verdict: if r.access == "forward+inverse" {
            Verdict::Info
        } else if r.flagged {
            Verdict::Fail
        } else {
            Verdict::Pass
        },
        seed,
    }
}

// ---------------------------------------------------------------- suites

/// Frame potential (exact when the ensemble is enumerable) and, when the
/// operator fits, the moment-operator gap, for every t' in 1..=t.
pub fn moments_suite(spec: &EnsembleSpec, samples: usize, seed: u64) -> Result<Vec<Report>, VerifyError> {
    let mut out = Vec::new();
    for t in 1..=spec.t {
        let fp = match frame_potential_exact(spec, t) {
            Some(r) => r.to_report("frame_potential", spec),
            None => with_rerun(seed, |s| {
                Ok(frame_potential(spec, t, samples, derive_seed(s, &[t as u64]))?.to_report("frame_potential", spec))
            })?,
        };
        out.push(fp);
        if t <= 2 && check_moment_dims(spec.n, t).is_ok() {
            let gap = if enumerate_ensemble(spec).is_some() {
                moment_operator_gap(spec, t)?.to_report(spec)
            } else {
                with_rerun(seed, |s| {
                    Ok(moment_operator_gap_mc(spec, t, samples, derive_seed(s, &[0x6A9, t as u64]))?.to_report(spec))
                })?
            };
            out.push(gap);
        }
    }
    Ok(out)
}

/// All distinguishers against Haar; a flagged test fails.
pub fn distinguishers_suite(spec: &EnsembleSpec, samples: usize, seed: u64) -> Result<Vec<Report>, VerifyError> {
    let haar = EnsembleSpec::new(Kind::Haar, spec.n, spec.t, 0);
    let mut tests = Distinguisher::FORWARD.to_vec();
    tests.push(Distinguisher::Bell);
    tests.push(Distinguisher::CollisionInverse);
    tests
        .iter()
        .map(|&test| {
            with_rerun(seed, |s| {
                let r = distinguish(spec, &haar, &[test], samples, s)?;
                Ok(distinguisher_to_report(&r[0], spec, &haar, samples, s))
            })
        })
        .collect()
}

/// Implementation error of a circuit against a reference unitary; passes
/// at ε <= `tol`.
pub fn implementation_report(
    c: &Circuit,
    u: &Mat,
    tol: f64,
    sim: &Simulator,
    params: Map<String, Value>,
) -> Result<Report, VerifyError> {
    let err = sim.impl_error(c, u)?;
    let mut params = params;
    params.insert("epsilon_found".into(), Value::from(err.epsilon_found));
    params.insert("tolerance".into(), Value::from(tol));
    params.insert("depth".into(), Value::from(c.depth()));
    params.insert("ancillas".into(), Value::from(c.n_anc));
    Ok(Report {
        test: "implementation".into(),
        params,
        value: err.epsilon,
        stderr: 0.0,
        reference: 0.0,
        sigma: 0.0,
        verdict: if err.epsilon <= tol {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        seed: 0,
    })
}

/// Canonical JSON for a list of reports.
pub fn reports_json(reports: &[Report]) -> String {
    let v = json!({ "reports": reports });
    serde_json::to_string_pretty(&v).expect("serializes")
}
