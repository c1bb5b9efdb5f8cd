#![allow(dead_code)]

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use shallow_core::circuit::{mats, Circuit, Gate, Model, Pauli};
use shallow_core::linalg::{haar_unitary, Mat, C64};

pub fn random_u1<R: Rng>(rng: &mut R) -> [C64; 4] {
    let u = haar_unitary(2, rng);
    [u[(0, 0)], u[(0, 1)], u[(1, 0)], u[(1, 1)]]
}

/// Random valid circuit: u1, TOFFOLI, FANOUT, and for measff also
/// MEASURE / CPAULI on already written bits.
pub fn random_circuit<R: Rng>(rng: &mut R, model: Model, n_in: usize, n_anc: usize, depth: usize) -> Circuit {
    let total = n_in + n_anc;
    let mut c = Circuit::new(model, n_in, n_anc);
    let mut written = Vec::new();
    for _ in 0..depth {
        let mut free: Vec<usize> = (0..total).collect();
        free.shuffle(rng);
        let mut layer = Vec::new();
        let mut new_bits = Vec::new();
        while !free.is_empty() {
            let kind = rng.random_range(0..5);
            match kind {
                1 if free.len() >= 2 => {
                    let k = rng.random_range(2..=free.len().min(3));
                    let qs: Vec<usize> = free.drain(..k).collect();
                    layer.push(Gate::Toffoli {
                        controls: qs[1..].to_vec(),
                        target: qs[0],
                    });
                }
                2 if free.len() >= 2 && model != Model::Qac0 => {
                    let k = rng.random_range(2..=free.len().min(4));
                    let qs: Vec<usize> = free.drain(..k).collect();
                    layer.push(Gate::Fanout {
                        source: qs[0],
                        targets: qs[1..].to_vec(),
                    });
                }
                3 if model == Model::Measff => {
                    let q = free.pop().unwrap();
                    let cbit = c.n_cbits;
                    c.n_cbits += 1;
                    layer.push(Gate::Measure { q, cbit });
                    new_bits.push(cbit);
                }
                4 if model == Model::Measff && !written.is_empty() => {
                    let q = free.pop().unwrap();
                    let k = rng.random_range(1..=written.len().min(3));
                    let mut cbits: Vec<usize> = written.choose_multiple(rng, k).copied().collect();
                    cbits.sort_unstable();
                    let pauli = if rng.random() { Pauli::X } else { Pauli::Z };
                    layer.push(Gate::Cpauli { pauli, q, cbits });
                }
                _ => {
                    let q = free.pop().unwrap();
                    if rng.random_bool(0.7) {
                        layer.push(Gate::u1(q, random_u1(rng)));
                    }
                }
            }
        }
        written.extend(new_bits);
        c.push(layer);
    }
    c
}

/// Circuit made of one dense block U followed by exp(-iθX/2) on `noisy`.
pub fn noisy_unitary(u: &Mat, noisy: usize, theta: f64) -> Circuit {
    let n = u.nrows().trailing_zeros() as usize;
    let mut c = Circuit::new(Model::Qac0, n, 0);
    c.push(vec![Gate::Unitary {
        qubits: (0..n).collect(),
        matrix: u.transpose().iter().copied().collect(),
    }]);
    c.push(vec![Gate::u1(noisy, mats::rx(theta))]);
    c
}

/// Reduced state of the first `n_keep` qubits.
pub fn reduce_front(amps: &[C64], n_keep: usize) -> Mat {
    let total = amps.len().trailing_zeros() as usize;
    let rest = 1usize << (total - n_keep);
    let m = Mat::from_fn(1 << n_keep, rest, |i, j| amps[i * rest + j]);
    &m * m.adjoint()
}
