use proptest::prelude::*;
use shallow_core::circuit::{parity_block, validate, Circuit, Gate, Model};
use shallow_core::clifford::*;
use shallow_core::fields::rng_for;
use shallow_core::linalg::{haar_state, identity, max_abs_diff, phase_distance, Mat, C64};
use shallow_core::sim::{circuit_unitary, DensityOp, Simulator, StateVector};
use std::collections::HashMap;

// U P U† = T(P) for every generator, checked densely.
fn matches_tableau(u: &Mat, t: &CliffordTableau) -> f64 {
    let n = t.n();
    let mut worst: f64 = 0.0;
    for q in 0..n {
        for p in ['X', 'Z'] {
            let gen = PauliString::single(n, q, p);
            let lhs = u * gen.matrix() * u.adjoint();
            worst = worst.max(max_abs_diff(&lhs, &t.conjugate(&gen).matrix()));
        }
    }
    worst
}

// The image of |x⟩ must be stabilized by (-1)^{x_i} T(Z_i).
fn basis_images_ok(u: &Mat, t: &CliffordTableau) -> bool {
    let n = t.n();
    let d = 1 << n;
    (0..d).all(|x| {
        let col: Vec<C64> = u.column(x).iter().copied().collect();
        (0..n).all(|i| {
            let bit = (x >> (n - 1 - i)) & 1 == 1;
            let s = t.image_z(i).matrix();
            let v = &s * nalgebra::DVector::from_vec(col.clone());
            let sign = if bit { -1.0 } else { 1.0 };
            v.iter().zip(&col).all(|(a, b)| (a - b * sign).norm() < 1e-10)
        })
    })
}

#[test]
fn single_qubit_sampling_is_uniform_over_24() {
    let samples = 24_000;
    let mut counts: HashMap<Vec<PauliString>, usize> = HashMap::new();
    for seed in 0..samples {
        let t = random_clifford(1, seed);
        *counts.entry(t.rows().to_vec()).or_default() += 1;
    }
    assert_eq!(counts.len(), 24);
    let mean = samples as f64 / 24.0;
    let sigma = (mean * (23.0 / 24.0)).sqrt();
    for (k, &c) in &counts {
        assert!((c as f64 - mean).abs() <= 5.0 * sigma, "{k:?}: {c}");
    }
}

#[test]
fn two_qubit_sampling_covers_group() {
    // |C_2| / phases = 11520; a few samples per element should hit most.
    let mut seen = std::collections::HashSet::new();
    for seed in 0..60_000u64 {
        seen.insert(random_clifford(2, seed));
    }
    // coupon collector: expected unseen ≈ 11520·e^{-60000/11520} ≈ 63
    assert!(seen.len() > 11_300 && seen.len() <= 11_520, "{}", seen.len());
}

#[test]
fn cnot_synthesis_matches_matrix() {
    let mut c = Circuit::new(Model::Qac0, 2, 0);
    c.push(vec![Gate::cnot(0, 1)]);
    let t = CliffordTableau::from_circuit(&c).unwrap();
    let nn = tableau_to_nn_circuit(&t);
    let u = circuit_unitary(&nn).unwrap();
    assert!(phase_distance(&u, &circuit_unitary(&c).unwrap()) < 1e-12);
}

#[test]
fn random_four_qubit_synthesis_exact() {
    for seed in 0..100 {
        let t = random_clifford(4, seed);
        let c = tableau_to_nn_circuit(&t);
        validate(&c).unwrap();
        let u = circuit_unitary(&c).unwrap();
        assert!(matches_tableau(&u, &t) < 1e-10, "seed {seed}");
        assert!(basis_images_ok(&u, &t), "seed {seed}");
        assert_eq!(CliffordTableau::from_circuit(&c).unwrap(), t);
    }
}

#[test]
fn synthesis_is_nearest_neighbour_and_linear_depth() {
    for n in 1..=10 {
        for seed in 0..10 {
            let t = random_clifford(n, seed);
            let c = tableau_to_nn_circuit(&t);
            for g in c.gates() {
                let qs = g.qubits();
                if qs.len() == 2 {
                    assert_eq!(qs[0].abs_diff(qs[1]), 1, "{g:?}");
                }
                assert!(qs.len() <= 2);
            }
            assert!(c.depth() <= 30 * n, "n={n} depth {}", c.depth());
            assert_eq!(CliffordTableau::from_circuit(&c).unwrap(), t);
        }
    }
}

#[test]
fn teleported_cnot_gives_bell_state_on_every_branch() {
    let mut cx = Circuit::new(Model::Qac0, 2, 0);
    cx.push(vec![Gate::cnot(0, 1)]);
    let t = CliffordTableau::from_circuit(&cx).unwrap();
    let tc = teleport_compile(&t).unwrap();
    validate(&tc).unwrap();
    let total = tc.total_qubits();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut plus0 = vec![C64::new(0.0, 0.0); 4];
    plus0[0] = C64::new(h, 0.0);
    plus0[2] = C64::new(h, 0.0);
    let branches = Simulator::default()
        .run_all_branches(&tc, &StateVector::new(plus0).unwrap())
        .unwrap();
    assert!(branches.len() > 1);
    let mut bell = vec![C64::new(0.0, 0.0); 1 << total];
    bell[0] = C64::new(h, 0.0);
    bell[3 << (total - 2)] = C64::new(h, 0.0);
    let total_p: f64 = branches.iter().map(|b| b.probability).sum();
    assert!((total_p - 1.0).abs() < 1e-9);
    for b in &branches {
        let ov: C64 = b.state.amps().iter().zip(&bell).map(|(a, e)| a.conj() * e).sum();
        assert!((ov.norm() - 1.0).abs() < 1e-9, "outcomes {:?}", b.outcomes);
    }
}

#[test]
fn teleported_identity_is_empty() {
    let tc = teleport_compile(&CliffordTableau::identity(3)).unwrap();
    let psi = haar_state(8, &mut rng_for(4, &[]));
    let out = Simulator::default()
        .run(&tc, &StateVector::new(psi.clone()).unwrap(), 1)
        .unwrap();
    let f = StateVector::new(psi).unwrap().fidelity(&out);
    assert!((f - 1.0).abs() < 1e-12);
}

#[test]
fn teleported_random_cliffords_implement_channel() {
    let sim = Simulator::default();
    for seed in 0..20 {
        let t = random_clifford(4, 100 + seed);
        let tc = teleport_compile(&t).unwrap();
        validate(&tc).unwrap();
        certify_implements(&tc, &t).unwrap();
        let u = t.unitary();
        let mut rng = rng_for(seed, &[9]);
        for _ in 0..10 {
            let psi = haar_state(16, &mut rng);
            let rho = StateVector::new(psi.clone()).unwrap().to_density();
            let out = sim.channel_apply(&tc, &rho).unwrap();
            let v = nalgebra::DVector::from_vec(psi);
            let expect = &u * &v * (&u * &v).adjoint();
            assert!(max_abs_diff(out.matrix(), &expect) < 1e-9, "seed {seed}");
        }
    }
}

#[test]
fn teleported_branches_sampled_directly() {
    // independent of the Choi construction: sample branches on a pure input
    let t = random_clifford(3, 77);
    let tc = teleport_compile(&t).unwrap();
    let u = t.unitary();
    let psi = haar_state(8, &mut rng_for(1, &[2]));
    let expect: Vec<C64> = (&u * nalgebra::DVector::from_vec(psi.clone()))
        .iter()
        .copied()
        .collect();
    let sim = Simulator::default();
    for shot in 0..8 {
        let run = sim
            .run_streamed(&tc, &StateVector::new(psi.clone()).unwrap(), shot)
            .unwrap();
        assert!(run.clean_dropped);
        let (v, nrm) = run.project_rest_zero(&[0, 1, 2]);
        assert!((nrm - 1.0).abs() < 1e-9);
        let ov: C64 = v.iter().zip(&expect).map(|(a, b)| a.conj() * b).sum();
        assert!((ov.norm() - 1.0).abs() < 1e-9, "shot {shot}");
    }
}

#[test]
fn teleport_depth_constant_in_n() {
    for n in 2..=6 {
        for seed in 0..3 {
            let t = random_clifford(n, seed);
            let tc = teleport_compile(&t).unwrap();
            assert_eq!(tc.depth(), TELEPORT_DEPTH, "n={n}");
        }
    }
}

#[test]
fn teleport_layout_is_attached_and_local() {
    let t = random_clifford(4, 5);
    let tc = teleport_compile(&t).unwrap();
    let layout = tc.layout.as_ref().expect("layout");
    let cols = layout.grid[1];
    assert_eq!(layout.positions.len(), tc.total_qubits());
    let last_layer = tc.layers.len() - 2;
    for (li, layer) in tc.layers.iter().enumerate() {
        for g in layer {
            let qs = g.qubits();
            if qs.len() == 2 {
                let (a, b) = (layout.positions[&qs[0]], layout.positions[&qs[1]]);
                let dr = a[0].abs_diff(b[0]);
                let dc = a[1].abs_diff(b[1]);
                let wraps = li >= last_layer && dr == 0 && dc == cols - 1;
                assert!(dr + dc == 1 || wraps, "layer {li}: {g:?}");
            }
        }
    }
    assert!(tc.meta.contains_key("ancillas"));
}

#[test]
fn measured_circuits_are_branch_independent() {
    for seed in 0..5 {
        let tc = teleport_compile(&random_clifford(3, seed)).unwrap();
        assert!(branch_independent(&tc));
    }
    // dropping one correction breaks it
    let tc = teleport_compile(&random_clifford(3, 1)).unwrap();
    let mut broken = tc.clone();
    let li = 8;
    assert!(!broken.layers[li].is_empty());
    broken.layers[li].pop();
    let ok = branch_independent(&broken) && certify_implements(&broken, &random_clifford(3, 1)).is_ok();
    assert!(!ok);
}

#[test]
fn fanout_lowering_single_gate() {
    let mut c = Circuit::new(Model::Qac0f, 3, 0);
    c.push(vec![Gate::Fanout {
        source: 0,
        targets: vec![1, 2],
    }]);
    let low = fanout_layer_lower(&c).unwrap();
    validate(&low).unwrap();
    assert_eq!(low.model, Model::Measff);
    let err = Simulator::default()
        .impl_error(&low, &circuit_unitary(&c).unwrap())
        .unwrap();
    assert!(err.epsilon <= 1e-10, "{}", err.epsilon);
}

#[test]
fn fanout_lowering_leaves_single_qubit_circuits() {
    let mut c = Circuit::new(Model::Qac0f, 2, 0);
    c.push(vec![Gate::h(0), Gate::s(1)]);
    assert_eq!(fanout_layer_lower(&c).unwrap(), c);
}

#[test]
fn fanout_lowering_parity_block_on_basis() {
    let c = parity_block(&[0, 1, 2], 3).unwrap();
    let low = fanout_layer_lower(&c).unwrap();
    let sim = Simulator::default();
    for x in 0..16 {
        let expect = x ^ ((x >> 3 & 1 ^ x >> 2 & 1 ^ x >> 1 & 1) & 1);
        let input = StateVector::basis(4, x);
        let rho = sim.channel_apply(&low, &input.to_density()).unwrap();
        assert!((rho.matrix()[(expect, expect)].re - 1.0).abs() < 1e-9, "x={x:04b}");
    }
}

#[test]
fn fanout_lowering_rejects_toffoli() {
    let mut c = Circuit::new(Model::Qac0f, 3, 0);
    c.push(vec![Gate::Toffoli {
        controls: vec![0, 1],
        target: 2,
    }]);
    assert!(matches!(fanout_layer_lower(&c), Err(CliffordError::Unsupported(_))));
}

#[test]
fn tableau_roundtrip_through_unitary() {
    let t = random_clifford(3, 42);
    let u = t.unitary();
    assert!(matches_tableau(&u, &t) < 1e-10);
    assert!(max_abs_diff(&(u.adjoint() * &u), &identity(8)) < 1e-10);
    let rho = DensityOp::maximally_mixed(3);
    assert_eq!(rho.n_qubits(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_tableaux_are_symplectic(n in 1usize..8, seed in any::<u64>()) {
        let t = random_clifford(n, seed);
        prop_assert!(t.is_symplectic());
        prop_assert!(CliffordTableau::from_rows(n, t.rows().to_vec()).is_ok());
    }

    #[test]
    fn synthesis_reproduces_tableau(n in 1usize..7, seed in any::<u64>()) {
        let t = random_clifford(n, seed);
        let c = tableau_to_nn_circuit(&t);
        prop_assert_eq!(CliffordTableau::from_circuit(&c).unwrap(), t);
    }

    #[test]
    fn composition_matches_circuit_concatenation(seed in any::<u64>()) {
        let a = random_clifford(3, seed);
        let b = random_clifford(3, seed ^ 1);
        let ca = tableau_to_nn_circuit(&a);
        let cb = tableau_to_nn_circuit(&b);
        let both = ca.then(&cb).unwrap();
        prop_assert_eq!(CliffordTableau::from_circuit(&both).unwrap(), a.then(&b));
    }

    #[test]
    fn teleport_certified(n in 1usize..6, seed in any::<u64>()) {
        let t = random_clifford(n, seed);
        let tc = teleport_compile(&t).unwrap();
        prop_assert!(certify_implements(&tc, &t).is_ok());
    }
}
