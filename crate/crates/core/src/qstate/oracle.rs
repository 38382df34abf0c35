//! Dense-matrix reference for the ansatz, used only to cross-check the
//! bitmask simulator. Every gate is expanded to a full `2^n x 2^n` operator
//! by Kronecker products and the circuit unitary is their ordered product.

use num_complex::Complex;

use super::{u3_matrix, AnsatzSpec, Gate, GateAngles};
use crate::error::{config_err, QfedError, Result};
use crate::scalar::Real;

/// Register size above which the oracle refuses to build a matrix.
pub const ORACLE_MAX_QUBITS: usize = 5;

/// Square complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    pub dim: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![Complex::new(T::zero(), T::zero()); dim * dim];
        for i in 0..dim {
            data[i * dim + i] = Complex::new(T::one(), T::zero());
        }
        Self { dim, data }
    }

    fn from_mat2(m: &[[Complex<T>; 2]; 2]) -> Self {
        Self {
            dim: 2,
            data: vec![m[0][0], m[0][1], m[1][0], m[1][1]],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> Complex<T> {
        self.data[r * self.dim + c]
    }

    /// `self ⊗ other`.
    pub fn kron(&self, other: &Self) -> Self {
        let dim = self.dim * other.dim;
        let mut data = vec![Complex::new(T::zero(), T::zero()); dim * dim];
        for ar in 0..self.dim {
            for ac in 0..self.dim {
                let a = self.get(ar, ac);
                for br in 0..other.dim {
                    for bc in 0..other.dim {
                        data[(ar * other.dim + br) * dim + ac * other.dim + bc] = a * other.get(br, bc);
                    }
                }
            }
        }
        Self { dim, data }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let n = self.dim;
        let mut data = vec![Complex::new(T::zero(), T::zero()); n * n];
        for r in 0..n {
            for k in 0..n {
                let a = self.get(r, k);
                for c in 0..n {
                    data[r * n + c] = data[r * n + c] + a * other.get(k, c);
                }
            }
        }
        Self { dim: n, data }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn adjoint(&self) -> Self {
        let n = self.dim;
        let mut data = self.data.clone();
        for r in 0..n {
            for c in 0..n {
                data[c * n + r] = self.get(r, c).conj();
            }
        }
        Self { dim: n, data }
    }

    pub fn apply(&self, v: &[Complex<T>]) -> Vec<Complex<T>> {
        (0..self.dim)
            .map(|r| (0..self.dim).fold(Complex::new(T::zero(), T::zero()), |acc, c| acc + self.get(r, c) * v[c]))
            .collect()
    }

    /// Largest elementwise distance from the identity.
    pub fn max_identity_deviation(&self) -> T {
        let id = Self::identity(self.dim);
        self.data
            .iter()
            .zip(&id.data)
            .map(|(a, b)| (a - b).norm())
            .fold(T::zero(), T::max)
    }
}

/// Full operator acting with `per_qubit[q]` on qubit `q` (qubit 0 = LSB).
fn tensor_product<T: Real>(per_qubit: &[DenseMatrix<T>]) -> DenseMatrix<T> {
    // the most significant qubit is the leftmost Kronecker factor
    let mut acc = per_qubit[per_qubit.len() - 1].clone();
    for m in per_qubit.iter().rev().skip(1) {
        acc = acc.kron(m);
    }
    acc
}

fn gate_operator<T: Real>(n: usize, gate: Gate, u: &DenseMatrix<T>) -> DenseMatrix<T> {
    let id = DenseMatrix::identity(2);
    match gate {
        Gate::U3 { qubit } => {
            let mut factors = vec![id; n];
            factors[qubit] = u.clone();
            tensor_product(&factors)
        }
        Gate::Cu3 { control, target } => {
            let zero = Complex::new(T::zero(), T::zero());
            let one = Complex::new(T::one(), T::zero());
            let p0 = DenseMatrix {
                dim: 2,
                data: vec![one, zero, zero, zero],
            };
            let p1 = DenseMatrix {
                dim: 2,
                data: vec![zero, zero, zero, one],
            };
            let mut off = vec![id.clone(); n];
            off[control] = p0;
            let mut on = vec![id; n];
            on[control] = p1;
            on[target] = u.clone();
            tensor_product(&off).add(&tensor_product(&on))
        }
    }
}

/// Circuit unitary `G_K … G_1` for the ansatz at angles `beta`.
pub fn dense_unitary_oracle<T: Real>(spec: &AnsatzSpec, beta: &[T]) -> Result<DenseMatrix<T>> {
    if spec.n_qubits > ORACLE_MAX_QUBITS {
        return Err(QfedError::Config(format!(
            "dense oracle refuses {} qubits (test-only, limit {ORACLE_MAX_QUBITS})",
            spec.n_qubits
        )));
    }
    if beta.len() != spec.n_params() {
        return Err(config_err!(
            "angle vector length mismatch: expected {}, got {}",
            spec.n_params(),
            beta.len()
        ));
    }
    let mut total = DenseMatrix::identity(spec.dim());
    for (k, gate) in spec.layout().into_iter().enumerate() {
        let u = DenseMatrix::from_mat2(&u3_matrix(GateAngles::from_slice(&beta[3 * k..3 * k + 3])));
        total = gate_operator(spec.n_qubits, gate, &u).matmul(&total);
    }
    Ok(total)
}
