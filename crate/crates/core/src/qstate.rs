//! Exact statevector simulation of the U3 / ring-CU3 variational ansatz.
//!
//! Qubit `q` is bit `q` of the amplitude index (qubit 0 is the least
//! significant bit). Gates mutate a [`QuantumState`] in place; the reverse
//! sweep in [`ansatz_backward`] uncomputes the forward state gate by gate
//! with the inverse gates, so memory stays at two statevectors regardless of
//! circuit depth.

use std::cell::Cell;

use num_complex::Complex;

use crate::error::{config_err, invariant_err, Result};
use crate::scalar::Real;

pub mod oracle;

/// Largest register the simulator will allocate (2^24 amplitudes).
pub const MAX_QUBITS: usize = 24;

/// Row-major 2x2 complex matrix.
pub type Mat2<T> = [[Complex<T>; 2]; 2];

/// Angles of one U3 (or CU3) gate, in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateAngles<T> {
    pub alpha: T,
    pub phi: T,
    pub lambda: T,
}

impl<T: Real> GateAngles<T> {
    pub fn new(alpha: T, phi: T, lambda: T) -> Self {
        Self { alpha, phi, lambda }
    }

    /// Reads `(alpha, phi, lambda)` from a three-element slice.
    pub fn from_slice(s: &[T]) -> Self {
        Self::new(s[0], s[1], s[2])
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.phi.is_finite() && self.lambda.is_finite()
    }
}

#[inline]
fn cis<T: Real>(x: T) -> Complex<T> {
    Complex::new(x.cos(), x.sin())
}

/// `U3(α, φ, λ) = [[cos(α/2), −e^{iλ} sin(α/2)], [e^{iφ} sin(α/2), e^{i(φ+λ)} cos(α/2)]]`.
pub fn u3_matrix<T: Real>(g: GateAngles<T>) -> Mat2<T> {
    let half = g.alpha * T::lit(0.5);
    let (s, c) = half.sin_cos();
    let e_l = cis(g.lambda);
    let e_p = cis(g.phi);
    let e_pl = cis(g.phi + g.lambda);
    [[Complex::new(c, T::zero()), -e_l * s], [e_p * s, e_pl * c]]
}

/// Partial derivatives of [`u3_matrix`] with respect to alpha, phi and lambda.
pub fn u3_partials<T: Real>(g: GateAngles<T>) -> [Mat2<T>; 3] {
    let half = g.alpha * T::lit(0.5);
    let (s, c) = half.sin_cos();
    let h = T::lit(0.5);
    let zero = Complex::new(T::zero(), T::zero());
    let i = Complex::new(T::zero(), T::one());
    let e_l = cis(g.lambda);
    let e_p = cis(g.phi);
    let e_pl = cis(g.phi + g.lambda);
    let d_alpha = [
        [Complex::new(-s * h, T::zero()), -e_l * (c * h)],
        [e_p * (c * h), -e_pl * (s * h)],
    ];
    let d_phi = [[zero, zero], [i * e_p * s, i * e_pl * c]];
    let d_lambda = [[zero, -i * e_l * s], [zero, i * e_pl * c]];
    [d_alpha, d_phi, d_lambda]
}

/// Conjugate transpose.
pub fn dagger<T: Real>(m: &Mat2<T>) -> Mat2<T> {
    [[m[0][0].conj(), m[1][0].conj()], [m[0][1].conj(), m[1][1].conj()]]
}

/// Pure state of `n_qubits` qubits.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantumState<T> {
    n_qubits: usize,
    amplitudes: Vec<Complex<T>>,
}

impl<T: Real> QuantumState<T> {
    /// |0…0⟩.
    pub fn zero_state(n_qubits: usize) -> Result<Self> {
        check_qubit_count(n_qubits)?;
        let mut amplitudes = vec![Complex::new(T::zero(), T::zero()); 1 << n_qubits];
        amplitudes[0] = Complex::new(T::one(), T::zero());
        Ok(Self { n_qubits, amplitudes })
    }

    /// Wraps an explicit amplitude vector. The vector must have length
    /// `2^n_qubits` and unit norm (to within `1e-9`).
    pub fn from_amplitudes(n_qubits: usize, amplitudes: Vec<Complex<T>>) -> Result<Self> {
        check_qubit_count(n_qubits)?;
        if amplitudes.len() != 1 << n_qubits {
            return Err(config_err!(
                "expected {} amplitudes for {} qubits, got {}",
                1usize << n_qubits,
                n_qubits,
                amplitudes.len()
            ));
        }
        let state = Self { n_qubits, amplitudes };
        let err = (state.norm_sqr() - T::one()).abs();
        if !(err < T::lit(1e-9)) {
            return Err(invariant_err!("amplitudes are not normalised (|norm^2 - 1| = {err})"));
        }
        Ok(state)
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[Complex<T>] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> T {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Computational-basis measurement probabilities `|a_i|^2`.
    pub fn probabilities(&self) -> Vec<T> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn apply_u3(&mut self, qubit: usize, g: GateAngles<T>) -> Result<()> {
        self.check_qubit(qubit)?;
        self.apply_mat2(&u3_matrix(g), qubit, None);
        Ok(())
    }

    pub fn apply_cu3(&mut self, control: usize, target: usize, g: GateAngles<T>) -> Result<()> {
        self.check_qubit(control)?;
        self.check_qubit(target)?;
        if control == target {
            return Err(invariant_err!("CU3 control and target are both qubit {control}"));
        }
        self.apply_mat2(&u3_matrix(g), target, Some(control));
        Ok(())
    }

    fn check_qubit(&self, q: usize) -> Result<()> {
        if q >= self.n_qubits {
            return Err(invariant_err!(
                "qubit index {q} out of range for a {}-qubit state",
                self.n_qubits
            ));
        }
        Ok(())
    }

    /// Left-multiplies every amplitude pair differing only in bit `target`
    /// by `m`, restricted to indices whose `control` bit is set.
    pub(crate) fn apply_mat2(&mut self, m: &Mat2<T>, target: usize, control: Option<usize>) {
        let [[m00, m01], [m10, m11]] = *m;
        for_each_pair(self.dim(), target, control, |i0, i1| {
            let a0 = self.amplitudes[i0];
            let a1 = self.amplitudes[i1];
            self.amplitudes[i0] = m00 * a0 + m01 * a1;
            self.amplitudes[i1] = m10 * a0 + m11 * a1;
        });
    }
}

fn check_qubit_count(n: usize) -> Result<()> {
    if n == 0 || n > MAX_QUBITS {
        return Err(config_err!("qubit count must be in 1..={MAX_QUBITS}, got {n}"));
    }
    Ok(())
}

/// Visits `(i0, i1)` index pairs with bit `target` clear/set, optionally
/// only those where bit `control` is set.
#[inline]
fn for_each_pair(dim: usize, target: usize, control: Option<usize>, mut f: impl FnMut(usize, usize)) {
    let stride = 1usize << target;
    let cmask = control.map_or(0, |c| 1usize << c);
    let mut base = 0;
    while base < dim {
        for i0 in base..base + stride {
            if i0 & cmask == cmask {
                f(i0, i0 + stride);
            }
        }
        base += stride << 1;
    }
}

/// One gate of the ansatz layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    U3 { qubit: usize },
    Cu3 { control: usize, target: usize },
}

impl Gate {
    fn target_control(self) -> (usize, Option<usize>) {
        match self {
            Gate::U3 { qubit } => (qubit, None),
            Gate::Cu3 { control, target } => (target, Some(control)),
        }
    }
}

/// Repeated blocks of a U3 on every qubit followed by ring CU3s
/// `q -> (q + 1) mod n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnsatzSpec {
    pub n_qubits: usize,
    pub n_blocks: usize,
}

impl AnsatzSpec {
    pub fn new(n_qubits: usize, n_blocks: usize) -> Result<Self> {
        check_qubit_count(n_qubits)?;
        if n_blocks == 0 {
            return Err(config_err!("ansatz needs at least one block"));
        }
        Ok(Self { n_qubits, n_blocks })
    }

    /// Number of trainable angles: `n_blocks * n_qubits * 6`.
    pub fn n_params(&self) -> usize {
        self.n_blocks * self.n_qubits * 6
    }

    pub fn n_gates(&self) -> usize {
        self.n_blocks * self.n_qubits * 2
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }

    /// Gates in application order; gate `k` owns `beta[3k..3k+3]`.
    ///
    /// With a single qubit the ring pair would be `0 -> 0`, which is not a
    /// valid CU3, so the one-qubit ansatz applies a second U3 instead; the
    /// angle count is unchanged.
    pub fn layout(&self) -> Vec<Gate> {
        let n = self.n_qubits;
        let mut gates = Vec::with_capacity(self.n_gates());
        for _ in 0..self.n_blocks {
            gates.extend((0..n).map(|qubit| Gate::U3 { qubit }));
            gates.extend((0..n).map(|q| {
                if n == 1 {
                    Gate::U3 { qubit: 0 }
                } else {
                    Gate::Cu3 {
                        control: q,
                        target: (q + 1) % n,
                    }
                }
            }));
        }
        gates
    }

    fn check_beta<T: Real>(&self, beta: &[T]) -> Result<()> {
        if beta.len() != self.n_params() {
            return Err(config_err!(
                "angle vector length mismatch: expected {} ({} blocks x {} qubits x 6), got {}",
                self.n_params(),
                self.n_blocks,
                self.n_qubits,
                beta.len()
            ));
        }
        if let Some(i) = beta.iter().position(|b| !b.is_finite()) {
            return Err(config_err!("angle {i} is not finite"));
        }
        Ok(())
    }
}

thread_local! {
    static FORWARD_RUNS: Cell<u64> = const { Cell::new(0) };
    static BACKWARD_RUNS: Cell<u64> = const { Cell::new(0) };
}

/// Per-thread count of full circuit simulations and reverse sweeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimCounts {
    pub forward: u64,
    pub backward: u64,
}

pub fn sim_counts() -> SimCounts {
    SimCounts {
        forward: FORWARD_RUNS.with(Cell::get),
        backward: BACKWARD_RUNS.with(Cell::get),
    }
}

fn simulate<T: Real>(spec: &AnsatzSpec, beta: &[T]) -> Result<QuantumState<T>> {
    spec.check_beta(beta)?;
    let mut state = QuantumState::zero_state(spec.n_qubits)?;
    for (k, gate) in spec.layout().into_iter().enumerate() {
        let m = u3_matrix(GateAngles::from_slice(&beta[3 * k..3 * k + 3]));
        let (target, control) = gate.target_control();
        state.apply_mat2(&m, target, control);
    }
    Ok(state)
}

/// Runs the full ansatz from |0…0⟩.
pub fn run_ansatz<T: Real>(spec: &AnsatzSpec, beta: &[T]) -> Result<QuantumState<T>> {
    let state = simulate(spec, beta)?;
    FORWARD_RUNS.with(|c| c.set(c.get() + 1));
    Ok(state)
}

/// Convenience wrapper: `probabilities(run_ansatz(spec, beta))`.
pub fn ansatz_probabilities<T: Real>(spec: &AnsatzSpec, beta: &[T]) -> Result<Vec<T>> {
    Ok(run_ansatz(spec, beta)?.probabilities())
}

/// Gradient of `L` with respect to `beta`, given `dL/dp` for the output
/// probabilities. Re-simulates the circuit; see [`ansatz_backward_from_state`]
/// when the forward state is already at hand.
pub fn ansatz_backward<T: Real>(spec: &AnsatzSpec, beta: &[T], grad_p: &[T]) -> Result<Vec<T>> {
    let state = simulate(spec, beta)?;
    ansatz_backward_from_state(spec, beta, state, grad_p)
}

/// Adjoint sweep starting from the final state `psi` of `run_ansatz(spec, beta)`.
///
/// With `λ_i = (dL/dp_i) ψ_i`, each angle gets `2 Re⟨λ_k| ∂U_k |φ_{k-1}⟩`,
/// where `φ` and `λ` are walked back through the circuit with `U_k†`.
pub fn ansatz_backward_from_state<T: Real>(
    spec: &AnsatzSpec,
    beta: &[T],
    psi: QuantumState<T>,
    grad_p: &[T],
) -> Result<Vec<T>> {
    spec.check_beta(beta)?;
    if grad_p.len() != spec.dim() {
        return Err(config_err!(
            "probability gradient length mismatch: expected {}, got {}",
            spec.dim(),
            grad_p.len()
        ));
    }
    if psi.n_qubits != spec.n_qubits {
        return Err(config_err!(
            "state has {} qubits but the ansatz has {}",
            psi.n_qubits,
            spec.n_qubits
        ));
    }
    let mut phi = psi;
    let mut lambda = QuantumState {
        n_qubits: phi.n_qubits,
        amplitudes: phi.amplitudes.iter().zip(grad_p).map(|(a, &g)| a * g).collect(),
    };
    let mut grad = vec![T::zero(); beta.len()];
    let two = T::lit(2.0);
    for (k, gate) in spec.layout().into_iter().enumerate().rev() {
        let angles = GateAngles::from_slice(&beta[3 * k..3 * k + 3]);
        let inv = dagger(&u3_matrix(angles));
        let (target, control) = gate.target_control();
        phi.apply_mat2(&inv, target, control);

        let partials = u3_partials(angles);
        let mut acc = [Complex::new(T::zero(), T::zero()); 3];
        for_each_pair(phi.dim(), target, control, |i0, i1| {
            let p0 = phi.amplitudes[i0];
            let p1 = phi.amplitudes[i1];
            let l0 = lambda.amplitudes[i0].conj();
            let l1 = lambda.amplitudes[i1].conj();
            for (a, d) in acc.iter_mut().zip(&partials) {
                *a = *a + l0 * (d[0][0] * p0 + d[0][1] * p1) + l1 * (d[1][0] * p0 + d[1][1] * p1);
            }
        });
        for (j, a) in acc.iter().enumerate() {
            grad[3 * k + j] = two * a.re;
        }

        lambda.apply_mat2(&inv, target, control);
    }
    BACKWARD_RUNS.with(|c| c.set(c.get() + 1));
    Ok(grad)
}
