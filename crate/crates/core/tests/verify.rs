use proptest::prelude::*;
use rand::Rng;
use shallow_core::circuit::{Circuit, Gate, Model};
use shallow_core::clifford::{random_clifford, PauliString};
use shallow_core::ensembles::{EnsembleSpec, Kind, SourceKind};
use shallow_core::fields::rng_for;
use shallow_core::linalg::{haar_state, haar_unitary, identity, kron, mat_vec, vdot, Mat, C64};
use shallow_core::sim::{Simulator, StateVector};
use shallow_core::verify::*;

fn x_gate() -> Mat {
    Mat::from_row_slice(2, 2, &shallow_core::circuit::mats::X)
}

#[test]
fn jackknife_of_mean_is_standard_error() {
    let xs: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let (m, se) = jackknife_mean(&xs);
    assert!((m - mean).abs() < 1e-12);
    assert!((se - (var / n).sqrt()).abs() < 1e-12);
}

#[test]
fn haar_frame_potential_counts() {
    for t in 1..=5 {
        let fact: f64 = (1..=t).map(|k| k as f64).product();
        assert_eq!(haar_frame_potential_exact(8, t), fact);
    }
    // permutations of 3 with no decreasing run of length 3: Catalan(3)
    assert_eq!(haar_frame_potential_exact(2, 3), 5.0);
    assert_eq!(haar_frame_potential_exact(2, 4), 14.0);
    assert_eq!(haar_frame_potential_exact(1, 4), 1.0);
}

#[test]
fn singleton_frame_potential() {
    for (n, t) in [(1usize, 1usize), (2, 2), (3, 1)] {
        let spec = EnsembleSpec::new(Kind::Singleton, n, t, 0);
        let expect = 2f64.powi((2 * t * n) as i32);
        let exact = frame_potential_exact(&spec, t).unwrap();
        assert_eq!(exact.value, expect);
        let mc = frame_potential(&spec, t, 10, 1).unwrap();
        assert_eq!(mc.value, expect);
        assert_eq!(mc.stderr, 0.0);
    }
}

#[test]
fn finite_group_frame_potentials() {
    assert_eq!(
        enumerate_ensemble(&EnsembleSpec::new(Kind::Clifford, 1, 1, 0))
            .unwrap()
            .len(),
        24
    );
    let p = frame_potential_exact(&EnsembleSpec::new(Kind::Pauli, 1, 1, 0), 1).unwrap();
    assert_eq!(p.samples, 16);
    assert!((p.value - 1.0).abs() < 1e-12);
    let c = frame_potential_exact(&EnsembleSpec::new(Kind::Clifford, 1, 2, 0), 2).unwrap();
    assert_eq!(c.samples, 576);
    assert!((c.value - 2.0).abs() < 1e-12);
    assert_eq!(c.reference, 2.0);
    // Paulis are not a 2-design
    let p2 = frame_potential_exact(&EnsembleSpec::new(Kind::Pauli, 1, 2, 0), 2).unwrap();
    assert!((p2.value - 4.0).abs() < 1e-12);
}

#[test]
fn haar_reference_brackets_known_values() {
    let (v, se) = haar_reference(2, 1, 20_000, 1);
    assert!((v - 1.0).abs() <= 3.0 * se, "{v} {se}");
    let (v, se) = haar_reference(2, 2, 20_000, 2);
    assert!((v - 2.0).abs() <= 3.0 * se, "{v} {se}");
}

// With d = 2 < t = 3 the Haar value is 5, not 3! = 6.
#[test]
fn haar_reference_below_dimension() {
    let (v, se) = haar_reference(1, 3, 100_000, 3);
    assert!((v - 5.0).abs() <= 3.0 * se, "{v} {se}");
    assert!((v - 6.0).abs() > 10.0 * se, "{v} {se}");
}

#[test]
fn haar_moment_operators_are_projectors() {
    for (d, t, rank) in [(2usize, 1usize, 1.0), (4, 1, 1.0), (2, 2, 2.0), (4, 2, 2.0)] {
        let m = haar_moment_operator(d, t).unwrap();
        assert!(shallow_core::linalg::max_abs_diff(&(&m * &m), &m) < 1e-12);
        assert!(shallow_core::linalg::max_abs_diff(&m.adjoint(), &m) < 1e-12);
        assert!((m.trace().re - rank).abs() < 1e-12);
    }
    assert!(haar_moment_operator(2, 3).is_err());
}

#[test]
fn haar_moment_operator_matches_monte_carlo() {
    let (m, se) = moment_operator_mc(&EnsembleSpec::new(Kind::Haar, 1, 2, 0), 2, 20_000, 4).unwrap();
    let gap = shallow_core::linalg::spectral_norm(&(m - haar_moment_operator(2, 2).unwrap()));
    assert!(gap <= 3.0 * se, "{gap} {se}");
}

#[test]
fn exact_moment_gaps() {
    let g = moment_operator_gap(&EnsembleSpec::new(Kind::Clifford, 1, 2, 0), 2).unwrap();
    assert_eq!(g.estimator, Estimator::MomentOperatorExact);
    assert!(g.gap <= 1e-10, "{}", g.gap);
    assert!(
        moment_operator_gap(&EnsembleSpec::new(Kind::Clifford, 1, 1, 0), 1)
            .unwrap()
            .gap
            <= 1e-10
    );
    assert!(
        moment_operator_gap(&EnsembleSpec::new(Kind::Pauli, 1, 2, 0), 2)
            .unwrap()
            .gap
            > 0.1
    );
    assert!(
        moment_operator_gap(&EnsembleSpec::new(Kind::Pauli, 2, 1, 0), 1)
            .unwrap()
            .gap
            <= 1e-10
    );
    // identity against the projector onto the maximally entangled vector
    for n in 1..=3 {
        let g = moment_operator_gap(&EnsembleSpec::new(Kind::Singleton, n, 1, 0), 1).unwrap();
        assert!((g.gap - 1.0).abs() < 1e-10, "n={n}: {}", g.gap);
    }
}

#[test]
fn moment_gap_errors() {
    let spec = EnsembleSpec::new(Kind::Clifford, 1, 3, 0);
    assert!(matches!(moment_operator_gap(&spec, 3), Err(VerifyError::Invalid(_))));
    let big = EnsembleSpec::new(Kind::Haar, 3, 2, 0);
    assert!(matches!(moment_operator_gap(&big, 2), Err(VerifyError::Cap(_))));
}

#[test]
fn sampled_clifford_gap_within_noise() {
    let spec = EnsembleSpec::new(Kind::Clifford, 2, 2, 0);
    let g = moment_operator_gap_mc(&spec, 2, 20_000, 5).unwrap();
    assert!(g.gap <= 3.0 * g.stderr, "{g:?}");
    let p = moment_operator_gap_mc(&EnsembleSpec::new(Kind::Pauli, 2, 2, 0), 2, 2_000, 5).unwrap();
    assert!(p.gap > 10.0 * p.stderr, "{p:?}");
}

#[test]
fn swap_test_examples() {
    let mut rng = rng_for(1, &[]);
    let u = haar_unitary(4, &mut rng);
    assert!((choi_swap_test(&u, &u, 0, 0).unwrap().exact - 1.0).abs() < 1e-12);
    let r = choi_swap_test(&identity(2), &x_gate(), 10_000, 3).unwrap();
    assert!((r.exact - 0.5).abs() < 1e-15);
    assert!((r.estimate - 0.5).abs() <= 4.0 * r.stderr);
    assert!(choi_swap_test(&identity(2), &identity(4), 0, 0).is_err());
}

#[test]
fn swap_test_matches_choi_states() {
    let mut rng = rng_for(2, &[]);
    for n in 1..=3 {
        let d = 1usize << n;
        for _ in 0..5 {
            let u = haar_unitary(d, &mut rng);
            let v = haar_unitary(d, &mut rng);
            // |ψ_U⟩ = (U ⊗ I)|Φ⟩
            let phi: Vec<C64> = (0..d * d)
                .map(|k| {
                    if k / d == k % d {
                        C64::new(1.0 / (d as f64).sqrt(), 0.0)
                    } else {
                        C64::new(0.0, 0.0)
                    }
                })
                .collect();
            let pu = mat_vec(&kron(&u, &identity(d)), &phi);
            let pv = mat_vec(&kron(&v, &identity(d)), &phi);
            let expect = 0.5 * (1.0 + vdot(&pv, &pu).norm_sqr());
            assert!((choi_swap_test(&u, &v, 0, 0).unwrap().exact - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn haar_swap_average() {
    let fixed = haar_unitary(8, &mut rng_for(3, &[]));
    let xs: Vec<f64> = (0..5000u64)
        .map(|i| {
            let u = haar_unitary(8, &mut rng_for(4, &[i]));
            choi_swap_test(&u, &fixed, 0, 0).unwrap().exact
        })
        .collect();
    let (m, se) = jackknife_mean(&xs);
    assert!((m - 0.5078125).abs() <= 3.0 * se, "{m} {se}");
}

#[test]
fn average_case_distance_examples() {
    let u = haar_unitary(4, &mut rng_for(5, &[]));
    assert!(avg_case_distance(&u, &u).unwrap().abs() < 1e-12);
    assert!((avg_case_distance(&identity(2), &x_gate()).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!(avg_case_distance(&identity(2), &identity(4)).is_err());
    for n in 1..=3 {
        let d = 1usize << n;
        let a = haar_unitary(d, &mut rng_for(6, &[n as u64]));
        let b = haar_unitary(d, &mut rng_for(7, &[n as u64]));
        let exact = avg_case_distance(&a, &b).unwrap();
        let (mc, se) = avg_case_distance_mc(&a, &b, 10_000, 8).unwrap();
        assert!((mc - exact).abs() <= 3.0 * se, "n={n}: {mc} vs {exact} ± {se}");
    }
    let (mc, se) = avg_case_distance_mc(&identity(2), &x_gate(), 10_000, 9).unwrap();
    assert!((mc - 2.0 / 3.0).abs() <= 3.0 * se);
}

#[test]
fn bell_identity_is_peaked() {
    for n in 1..=4 {
        let c = Circuit::new(Model::Qac0, n, 0);
        let r = bell_pauli_sample(&c, None, 200, 1, &Simulator::default()).unwrap();
        let label = format!("Z{}", "I".repeat(n - 1));
        let k = (0..1usize << (2 * n)).find(|&k| pauli_label(n, k) == label).unwrap();
        assert!((r.exact[k] - 1.0).abs() < 1e-12);
        assert_eq!(r.histogram.get(&label), Some(&200));
        assert!((r.agreement_exact - 1.0).abs() < 1e-12);
        assert_eq!(r.agreement_sampled, 1.0);
    }
}

#[test]
fn bell_masses_sum_to_one() {
    let mut rng = rng_for(10, &[]);
    for n in 1..=4 {
        let u = haar_unitary(1 << n, &mut rng);
        let r = bell_pauli_sample_matrix(&u, None, 1000, 2).unwrap();
        assert!((r.exact.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r.exact[0] < 1e-12, "identity component must vanish");
        assert_eq!(r.histogram.values().sum::<u64>(), 1000);
    }
}

#[test]
fn bell_rejects_bad_observables() {
    let u = identity(4);
    let bad = identity(2);
    assert!(bell_pauli_sample_matrix(&u, Some(&bad), 0, 0).is_err());
    let scaled = x_gate() * C64::new(2.0, 0.0);
    assert!(bell_pauli_sample_matrix(&u, Some(&scaled), 0, 0).is_err());
    assert!(bell_pauli_sample_matrix(&u, Some(&x_gate()), 0, 0).is_ok());
}

#[test]
fn bell_distribution_matches_pauli_matrices() {
    let u = haar_unitary(8, &mut rng_for(11, &[]));
    let dist = bell_pauli_distribution(&u, &Mat::from_row_slice(2, 2, &shallow_core::circuit::mats::Z)).unwrap();
    let a =
        &u * kron(
            &Mat::from_row_slice(2, 2, &shallow_core::circuit::mats::Z),
            &identity(4),
        ) * u.adjoint();
    for k in 0..64 {
        let p = PauliString::hermitian(
            pauli_label(3, k).chars().map(|c| c == 'X' || c == 'Y').collect(),
            pauli_label(3, k).chars().map(|c| c == 'Z' || c == 'Y').collect(),
            false,
        );
        let direct = ((&a * p.matrix()).trace() / 8.0).norm_sqr();
        assert!((direct - dist[k]).abs() < 1e-12, "{}", pauli_label(3, k));
    }
}

// Conjugating the circuit by a Clifford K (U -> K U) relabels every Pauli
// P by K† P K.
#[test]
fn bell_clifford_conjugation_permutes_masses() {
    let n = 3;
    let u = haar_unitary(8, &mut rng_for(12, &[]));
    let k = random_clifford(n, 13);
    let base = bell_pauli_sample_matrix(&u, None, 0, 0).unwrap().exact;
    let moved = bell_pauli_sample_matrix(&(k.unitary() * &u), None, 0, 0).unwrap().exact;
    let inv = k.inverse();
    let index = |p: &PauliString| {
        (0..n).fold(0usize, |acc, q| {
            acc * 4
                + match (p.x[q], p.z[q]) {
                    (false, false) => 0,
                    (true, false) => 1,
                    (true, true) => 2,
                    (false, true) => 3,
                }
        })
    };
    for j in 0..64 {
        let label = pauli_label(n, j);
        let p = PauliString::hermitian(
            label.chars().map(|c| c == 'X' || c == 'Y').collect(),
            label.chars().map(|c| c == 'Z' || c == 'Y').collect(),
            false,
        );
        let pulled = inv.conjugate(&p);
        assert!((moved[j] - base[index(&pulled)]).abs() < 1e-10, "{label}");
    }
    let mut a = base.clone();
    let mut b = moved.clone();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-10));
}

#[test]
fn bell_haar_mean_mass_is_flat() {
    // every non-identity Pauli carries 1/(4^n - 1) on average
    let n = 3;
    let draws: Vec<Vec<f64>> = (0..400u64)
        .map(|i| {
            bell_pauli_sample_matrix(&haar_unitary(8, &mut rng_for(14, &[i])), None, 0, 0)
                .unwrap()
                .exact
        })
        .collect();
    for k in [1usize, 17, 63] {
        let xs: Vec<f64> = draws.iter().map(|d| d[k]).collect();
        let (m, se) = jackknife_mean(&xs);
        assert!((m - 1.0 / 63.0).abs() <= 3.0 * se, "{}: {m} {se}", pauli_label(n, k));
    }
}

#[test]
fn collision_and_purity_examples() {
    let sim = Simulator::default();
    for n in 1..=4 {
        let id = Circuit::new(Model::Qac0, n, 0);
        let zero = StateVector::zero(n);
        let r = collision_probability(&id, &zero, 100, 1, &sim).unwrap();
        assert_eq!(r.exact, 1.0);
        assert_eq!(r.estimate, 1.0);
        assert!((subsystem_purity(&id, &zero, n / 2, &sim).unwrap() - 1.0).abs() < 1e-12);
        let mut h = Circuit::new(Model::Qac0, n, 0);
        h.push((0..n).map(Gate::h).collect());
        let r = collision_probability(&h, &zero, 20_000, 2, &sim).unwrap();
        assert!((r.exact - 0.5f64.powi(n as i32)).abs() < 1e-12);
        let p = r.exact;
        assert!((r.estimate - p).abs() <= 4.0 * (p * (1.0 - p) / 20_000.0).sqrt());
    }
    // Bell pair: each half maximally mixed
    let mut bell = Circuit::new(Model::Qac0, 2, 0);
    bell.push(vec![Gate::h(0)]);
    bell.push(vec![Gate::cnot(0, 1)]);
    assert!((subsystem_purity(&bell, &StateVector::zero(2), 1, &sim).unwrap() - 0.5).abs() < 1e-12);
    assert!(subsystem_purity(&bell, &StateVector::zero(2), 3, &sim).is_err());
}

#[test]
fn haar_collision_mean() {
    let xs: Vec<f64> = (0..2000u64)
        .map(|i| collision_exact(&haar_state(16, &mut rng_for(15, &[i]))))
        .collect();
    let (m, se) = jackknife_mean(&xs);
    assert!((m - 2.0 / 17.0).abs() <= 3.0 * se, "{m} {se}");
}

fn ghz(r: usize) -> StateVector {
    let d = 1usize << r;
    let mut a = vec![C64::new(0.0, 0.0); d];
    a[0] = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    a[d - 1] = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    StateVector::new(a).unwrap()
}

#[test]
fn nekomata_examples() {
    for r in 1..=4 {
        assert!((nekomata_fidelity(&ghz(r), r).unwrap() - 1.0).abs() < 1e-12);
        assert!((nekomata_fidelity(&StateVector::zero(r), r).unwrap() - 0.5).abs() < 1e-12);
    }
    assert!(nekomata_fidelity(&StateVector::zero(3), 0).is_err());
    assert!(nekomata_fidelity(&StateVector::zero(3), 4).is_err());
}

/// max over unit ψ₀, ψ₁ of |⟨nekomata|ψ⟩|², by finite-difference gradient
/// ascent on unconstrained parameters with restarts.
fn brute_force_nekomata(psi: &[C64], r: usize, n: usize, seed: u64) -> f64 {
    let tail = 1usize << (n - r);
    let ones = ((1usize << r) - 1) * tail;
    let objective = |p: &[f64]| -> f64 {
        let v0: Vec<C64> = (0..tail).map(|i| C64::new(p[2 * i], p[2 * i + 1])).collect();
        let v1: Vec<C64> = (0..tail)
            .map(|i| C64::new(p[2 * (tail + i)], p[2 * (tail + i) + 1]))
            .collect();
        let n0 = v0.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        let n1 = v1.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        let mut ov = C64::new(0.0, 0.0);
        for i in 0..tail {
            ov += v0[i].conj() / n0 * psi[i] + v1[i].conj() / n1 * psi[ones + i];
        }
        ov.norm_sqr() / 2.0
    };
    let dim = 4 * tail;
    let mut rng = rng_for(seed, &[]);
    let mut best: f64 = 0.0;
    for _ in 0..4 {
        let mut p: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut val = objective(&p);
        let mut step = 0.5;
        for _ in 0..4000 {
            let h = 1e-7;
            let grad: Vec<f64> = (0..dim)
                .map(|j| {
                    let mut a = p.clone();
                    let mut b = p.clone();
                    a[j] += h;
                    b[j] -= h;
                    (objective(&a) - objective(&b)) / (2.0 * h)
                })
                .collect();
            loop {
                let trial: Vec<f64> = p.iter().zip(&grad).map(|(x, g)| x + step * g).collect();
                let tv = objective(&trial);
                if tv > val {
                    p = trial;
                    val = tv;
                    step *= 1.5;
                    break;
                }
                step *= 0.5;
                if step < 1e-14 {
                    break;
                }
            }
            if step < 1e-14 {
                break;
            }
        }
        best = best.max(val);
    }
    best
}

#[test]
fn nekomata_matches_numerical_maximum() {
    for seed in 0..3 {
        let amps = haar_state(64, &mut rng_for(16, &[seed]));
        let closed = nekomata_fidelity(&StateVector::new(amps.clone()).unwrap(), 3).unwrap();
        let brute = brute_force_nekomata(&amps, 3, 6, seed);
        assert!((closed - brute).abs() < 1e-6, "{closed} vs {brute}");
    }
}

#[test]
fn twise_statistical_tests() {
    let t = twise_test(SourceKind::Table, 4, 0, 3, 10, 1).unwrap();
    assert!(t.passes(0.01), "{t:?}");
    let t = twise_test(SourceKind::Twise, 4, 4, 4, 10, 2).unwrap();
    assert!(t.passes(0.01), "{t:?}");
    // beyond the guaranteed level the outcome is recorded, not asserted
    let beyond = twise_test(SourceKind::Twise, 3, 2, 3, 10, 3).unwrap();
    eprintln!("degree-1 family at level 3: p = {:.3e}", beyond.p_value);
}

#[test]
fn twise_exact_uniformity() {
    for s in 1..=4u32 {
        for k in 1..=3usize {
            if k as u64 > 1 << s {
                continue;
            }
            for level in 1..=k {
                assert!(twise_exact(s, k, level).unwrap(), "s={s} k={k} level={level}");
            }
        }
    }
    // a degree-1 family is not 3-wise independent
    assert!(!twise_exact(3, 2, 3).unwrap());
    assert!(twise_exact(5, 2, 2).is_err());
}

#[test]
fn distinguisher_sanity() {
    let haar = EnsembleSpec::new(Kind::Haar, 4, 2, 0);
    let id = EnsembleSpec::new(Kind::Singleton, 4, 2, 0);
    let r = distinguish(&id, &haar, &[Distinguisher::Collision], 400, 1).unwrap();
    assert!(r[0].advantage > 0.5 && r[0].flagged, "{:?}", r[0]);
    let cpfc = EnsembleSpec::new(Kind::Cpfc, 4, 2, 0);
    let r = distinguish(&cpfc, &haar, &[Distinguisher::Collision], 1000, 2).unwrap();
    assert!(r[0].advantage <= 3.0 * r[0].stderr, "{:?}", r[0]);
    let pauli = EnsembleSpec::new(Kind::Pauli, 1, 2, 0);
    let r = distinguish(
        &pauli,
        &EnsembleSpec::new(Kind::Haar, 1, 2, 0),
        &[Distinguisher::Moments],
        2000,
        3,
    )
    .unwrap();
    assert!(r[0].flagged && r[0].advantage > 0.05, "{:?}", r[0]);
    assert!(distinguish(&pauli, &haar, &[Distinguisher::Collision], 10, 0).is_err());
}

#[test]
fn frame_potential_never_below_haar() {
    let specs = [
        EnsembleSpec::new(Kind::Haar, 2, 2, 0),
        EnsembleSpec::new(Kind::Clifford, 2, 2, 0),
        EnsembleSpec::new(Kind::Pauli, 2, 2, 0),
        EnsembleSpec::new(Kind::Singleton, 2, 2, 0),
        EnsembleSpec::new(Kind::Cpfc, 2, 2, 0),
        EnsembleSpec::new(Kind::Glued, 4, 2, 0).with_patch(2, Kind::Clifford),
        EnsembleSpec::new(Kind::Pru, 4, 2, 0).with_patch(2, Kind::Cpfc),
    ];
    for spec in specs {
        for t in 1..=2 {
            let r = frame_potential(&spec, t, 600, 17).unwrap();
            let se = (r.stderr.powi(2) + r.reference_stderr.powi(2)).sqrt();
            assert!(r.value >= r.reference - 3.0 * se, "{:?} t={t}: {r:?}", spec.kind);
        }
    }
}

#[test]
fn report_json_shape() {
    let spec = EnsembleSpec::new(Kind::Clifford, 1, 2, 0);
    let reports = moments_suite(&spec, 200, 5).unwrap();
    assert!(reports.iter().all(|r| r.passed()), "{reports:?}");
    let v: serde_json::Value = serde_json::from_str(&reports_json(&reports)).unwrap();
    let first = &v["reports"][0];
    for key in [
        "test",
        "params",
        "value",
        "stderr",
        "reference",
        "sigma",
        "verdict",
        "seed",
    ] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(first["verdict"], "pass");
    let single = moments_suite(&EnsembleSpec::new(Kind::Singleton, 1, 1, 0), 200, 5).unwrap();
    assert!(single.iter().all(|r| r.verdict == Verdict::Fail));
}

#[test]
fn rerun_policy() {
    use std::cell::Cell;
    let calls = Cell::new(0);
    let fail_once = |s: u64| {
        calls.set(calls.get() + 1);
        let verdict = if calls.get() == 1 { Verdict::Fail } else { Verdict::Pass };
        Ok(Report {
            test: "x".into(),
            params: Default::default(),
            value: 0.0,
            stderr: 1.0,
            reference: 0.0,
            sigma: 0.0,
            verdict,
            seed: s,
        })
    };
    let r = with_rerun(7, fail_once).unwrap();
    assert_eq!(calls.get(), 2);
    assert_eq!(r.verdict, Verdict::Pass);
    assert_ne!(r.seed, 7);
    assert_eq!(r.params["rerun"], true);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn swap_probability_in_range(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = rng_for(seed, &[]);
        let u = haar_unitary(1 << n, &mut rng);
        let v = haar_unitary(1 << n, &mut rng);
        let p = choi_swap_test(&u, &v, 0, 0).unwrap().exact;
        prop_assert!((0.5..=1.0).contains(&p));
        let d = avg_case_distance(&u, &v).unwrap();
        let dd = (1 << n) as f64;
        prop_assert!(d >= -1e-15 && d <= dd / (dd + 1.0) + 1e-15);
    }

    #[test]
    fn bell_normalised_for_random_unitaries(seed in any::<u64>(), n in 1usize..4) {
        let u = haar_unitary(1 << n, &mut rng_for(seed, &[]));
        let r = bell_pauli_sample_matrix(&u, None, 0, 0).unwrap();
        prop_assert!((r.exact.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(r.agreement_exact <= r.max_mass + 1e-12);
    }
}
