use num_complex::Complex;
use proptest::prelude::*;
use qfed::qstate::oracle::{dense_unitary_oracle, DenseMatrix};
use qfed::qstate::{self, AnsatzSpec, Gate, GateAngles, QuantumState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_beta(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-4.0..4.0)).collect()
}

/// Applies the ansatz gate by gate through the public state API, checking
/// the norm after every gate.
fn stepwise(spec: &AnsatzSpec, beta: &[f64]) -> (QuantumState<f64>, f64) {
    let mut state = QuantumState::zero_state(spec.n_qubits).unwrap();
    let mut worst = 0.0f64;
    for (k, gate) in spec.layout().into_iter().enumerate() {
        let g = GateAngles::from_slice(&beta[3 * k..3 * k + 3]);
        match gate {
            Gate::U3 { qubit } => state.apply_u3(qubit, g).unwrap(),
            Gate::Cu3 { control, target } => state.apply_cu3(control, target, g).unwrap(),
        }
        worst = worst.max((state.norm_sqr() - 1.0).abs());
    }
    (state, worst)
}

#[test]
fn bitmask_simulator_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..200 {
        let n = 1 + case % 5;
        let blocks = 1 + rng.random_range(0..3);
        let spec = AnsatzSpec::new(n, blocks).unwrap();
        let beta = random_beta(&mut rng, spec.n_params());
        let psi = qstate::run_ansatz(&spec, &beta).unwrap();
        let u = dense_unitary_oracle(&spec, &beta).unwrap();
        // first column of U is U|0…0⟩
        for (i, a) in psi.amplitudes().iter().enumerate() {
            assert!((a - u.get(i, 0)).norm() < 1e-12, "case {case} n={n} amplitude {i}");
        }
        let (stepped, worst) = stepwise(&spec, &beta);
        assert!(worst < 1e-12, "case {case}: norm drift {worst}");
        assert_eq!(stepped.amplitudes(), psi.amplitudes());
    }
}

#[test]
fn oracle_unitary_is_unitary() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 1..=4 {
        let spec = AnsatzSpec::new(n, 2).unwrap();
        let u = dense_unitary_oracle(&spec, &random_beta(&mut rng, spec.n_params())).unwrap();
        assert!(u.adjoint().matmul(&u).max_identity_deviation() < 1e-12);
    }
}

#[test]
fn u3_is_unitary_over_random_angles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let g = GateAngles::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        );
        let m = qstate::u3_matrix(g);
        let d = qstate::dagger(&m);
        for r in 0..2 {
            for c in 0..2 {
                let v = d[r][0] * m[0][c] + d[r][1] * m[1][c];
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((v - Complex::new(want, 0.0)).norm() < 1e-13);
            }
        }
    }
}

#[test]
fn pauli_x_squared_is_identity() {
    let pi = std::f64::consts::PI;
    let x = GateAngles::new(pi, 0.0, pi);
    let m = qstate::u3_matrix(x);
    assert!((m[0][1] - Complex::new(1.0, 0.0)).norm() < 1e-15);
    assert!((m[1][0] - Complex::new(1.0, 0.0)).norm() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = AnsatzSpec::new(3, 1).unwrap();
    let start = qstate::run_ansatz(&spec, &random_beta(&mut rng, spec.n_params())).unwrap();
    let mut s = start.clone();
    s.apply_u3(1, x).unwrap();
    s.apply_u3(1, x).unwrap();
    for (a, b) in s.amplitudes().iter().zip(start.amplitudes()) {
        assert!((a - b).norm() < 1e-14);
    }
}

#[test]
fn controlled_gate_leaves_control_zero_subspace_alone() {
    let spec = AnsatzSpec::new(1, 1).unwrap();
    let one_qubit = qstate::run_ansatz(&spec, &[0.7, 0.2, -0.4, 1.1, 0.3, 0.9]).unwrap();
    // embed on qubit 1 with the control qubit 0 in |0⟩
    let amps = vec![
        one_qubit.amplitudes()[0],
        Complex::new(0.0, 0.0),
        one_qubit.amplitudes()[1],
        Complex::new(0.0, 0.0),
    ];
    let mut s = QuantumState::from_amplitudes(2, amps.clone()).unwrap();
    s.apply_cu3(0, 1, GateAngles::new(1.3, 0.4, -2.0)).unwrap();
    assert_eq!(s.amplitudes(), &amps[..]);
}

#[test]
fn cu3_rejects_equal_control_and_target() {
    let mut s = QuantumState::<f64>::zero_state(3).unwrap();
    assert!(s.apply_cu3(2, 2, GateAngles::new(1.0, 0.0, 0.0)).is_err());
}

#[test]
fn oracle_refuses_large_registers() {
    let spec = AnsatzSpec::new(6, 1).unwrap();
    assert!(dense_unitary_oracle(&spec, &vec![0.0; spec.n_params()]).is_err());
}

#[test]
fn kron_identity_is_identity() {
    let a = DenseMatrix::<f64>::identity(2).kron(&DenseMatrix::identity(4));
    assert_eq!(a, DenseMatrix::identity(8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ansatz_preserves_norm(n in 1usize..=8, blocks in 1usize..=3, seed in any::<u64>()) {
        let spec = AnsatzSpec::new(n, blocks).unwrap();
        let beta = random_beta(&mut ChaCha8Rng::seed_from_u64(seed), spec.n_params());
        let p = qstate::ansatz_probabilities(&spec, &beta).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn single_gates_preserve_norm(
        n in 2usize..=6,
        seed in any::<u64>(),
        angles in prop::array::uniform3(-7.0f64..7.0),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = AnsatzSpec::new(n, 1).unwrap();
        let mut s = qstate::run_ansatz(&spec, &random_beta(&mut rng, spec.n_params())).unwrap();
        let g = GateAngles::from_slice(&angles);
        let t = rng.random_range(0..n);
        let c = (t + 1 + rng.random_range(0..n - 1)) % n;
        s.apply_u3(t, g).unwrap();
        prop_assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
        s.apply_cu3(c, t, g).unwrap();
        prop_assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_angle_count_is_rejected(n in 1usize..=5, blocks in 1usize..=3, delta in 1usize..4) {
        let spec = AnsatzSpec::new(n, blocks).unwrap();
        let beta = vec![0.0f64; spec.n_params() + delta];
        prop_assert!(qstate::run_ansatz(&spec, &beta).is_err());
    }
}
