//! Quantum-Train weight generation: a small shared tanh MLP turns each
//! basis state's (bit pattern, probability) pair into one classical weight.

use rand::Rng;

use crate::error::{config_err, invariant_err, Result};
use crate::scalar::Real;

/// Default width of the mapping model's hidden layer.
pub const DEFAULT_HIDDEN: usize = 15;

/// Fraction of the Glorot range used for the output weights at init.
pub const OUTPUT_INIT_SCALE: f64 = 0.5;

/// Mapping MLP `θ_i = tanh(W2 · tanh(W1 · x_i + c1) + c2)`.
///
/// `x_i` has `n_qubits + 1` entries: the ±1 bits of basis index `i`
/// (most significant first) followed by `p_i · 2^n_qubits`.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingModel<T> {
    pub n_qubits: usize,
    pub hidden: usize,
    /// `hidden x (n_qubits + 1)`, row-major.
    pub w1: Vec<T>,
    pub c1: Vec<T>,
    pub w2: Vec<T>,
    pub c2: T,
}

impl<T: Real> MappingModel<T> {
    pub fn zeros(n_qubits: usize, hidden: usize) -> Self {
        Self {
            n_qubits,
            hidden,
            w1: vec![T::zero(); hidden * (n_qubits + 1)],
            c1: vec![T::zero(); hidden],
            w2: vec![T::zero(); hidden],
            c2: T::zero(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(n_qubits: usize, hidden: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(n_qubits, hidden);
        let b1 = (6.0 / (n_qubits + 1 + hidden) as f64).sqrt();
        for w in &mut m.w1 {
            *w = T::lit(rng.random_range(-b1..b1));
        }
        let b2 = (6.0 / (hidden + 1) as f64).sqrt();
        for w in &mut m.w2 {
            *w = T::lit(rng.random_range(-b2..b2));
        }
        m
    }

    /// Training initialisation. Only the probability column of `W1` is
    /// drawn (Glorot); the bit columns start at zero so the initial weights
    /// depend on the index only through `p_i`, which under a random circuit
    /// is an i.i.d.-like draw per index. Plain Glorot lets the high bits act
    /// as a shared per-layer offset, which kills the ReLUs of whole layers
    /// within a few steps. `W2` is drawn at [`OUTPUT_INIT_SCALE`] of its
    /// Glorot range to keep `θ` near the scale of a fan-in initialised CNN.
    pub fn init<R: Rng + ?Sized>(n_qubits: usize, hidden: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(n_qubits, hidden);
        let d = m.input_dim();
        let b1 = (6.0 / (d + hidden) as f64).sqrt();
        for j in 0..hidden {
            m.w1[j * d + n_qubits] = T::lit(rng.random_range(-b1..b1));
        }
        let b2 = OUTPUT_INIT_SCALE * (6.0 / (hidden + 1) as f64).sqrt();
        for w in &mut m.w2 {
            *w = T::lit(rng.random_range(-b2..b2));
        }
        m
    }

    /// Shifts `c2` so the output pre-activation averages zero over the first
    /// `m` generated weights.
    pub fn center_output(&mut self, probs: &[T], m: usize) -> Result<()> {
        let (theta, _) = generate_theta(probs, self, m)?;
        let mean = theta.iter().map(|t| t.atanh()).sum::<T>() / T::from_usize_lossy(m.max(1));
        self.c2 -= mean;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.n_qubits + 1
    }

    pub fn n_params(&self) -> usize {
        mapping_param_count(self.n_qubits, self.hidden)
    }

    /// Flat order: `W1`, `c1`, `W2`, `c2`.
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.c1);
        v.extend_from_slice(&self.w2);
        v.push(self.c2);
        v
    }

    pub fn from_flat(n_qubits: usize, hidden: usize, flat: &[T]) -> Result<Self> {
        let expected = mapping_param_count(n_qubits, hidden);
        if flat.len() != expected {
            return Err(config_err!(
                "mapping parameter length mismatch: expected {expected}, got {}",
                flat.len()
            ));
        }
        let n1 = hidden * (n_qubits + 1);
        Ok(Self {
            n_qubits,
            hidden,
            w1: flat[..n1].to_vec(),
            c1: flat[n1..n1 + hidden].to_vec(),
            w2: flat[n1 + hidden..n1 + 2 * hidden].to_vec(),
            c2: flat[n1 + 2 * hidden],
        })
    }
}

/// `hidden * (n_qubits + 1) + hidden + hidden + 1`.
pub fn mapping_param_count(n_qubits: usize, hidden: usize) -> usize {
    hidden * (n_qubits + 2) + hidden + 1
}

/// Circuit angles plus mapping-model parameters.
pub fn qt_param_count(n_qubits: usize, n_blocks: usize, hidden: usize) -> usize {
    n_blocks * n_qubits * 6 + mapping_param_count(n_qubits, hidden)
}

/// Smallest `N` with `2^N >= m` (at least 1).
pub fn required_qubits(m: usize) -> usize {
    if m <= 2 {
        1
    } else {
        (usize::BITS - (m - 1).leading_zeros()) as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasisFeature<T> {
    pub bits: Vec<T>,
    pub scaled_prob: T,
}

pub fn basis_features<T: Real>(index: usize, n_qubits: usize, prob: T) -> Result<BasisFeature<T>> {
    if n_qubits >= usize::BITS as usize || index >= 1usize << n_qubits {
        return Err(invariant_err!("basis index {index} out of range for {n_qubits} qubits"));
    }
    let mut bits = Vec::with_capacity(n_qubits);
    write_bits(index, n_qubits, &mut bits);
    Ok(BasisFeature {
        bits,
        scaled_prob: prob * T::from_usize_lossy(1 << n_qubits),
    })
}

fn write_bits<T: Real>(index: usize, n_qubits: usize, out: &mut Vec<T>) {
    out.clear();
    out.extend((0..n_qubits).map(|k| {
        if (index >> (n_qubits - 1 - k)) & 1 == 1 {
            T::one()
        } else {
            -T::one()
        }
    }));
}

/// Forward activations kept for [`mapping_backward`].
#[derive(Clone, Debug)]
pub struct MappingCache<T> {
    gamma: MappingModel<T>,
    /// `m x hidden` hidden-layer outputs.
    hidden_out: Vec<T>,
    scaled_probs: Vec<T>,
    theta: Vec<T>,
    n_probs: usize,
}

impl<T: Real> MappingCache<T> {
    pub fn theta(&self) -> &[T] {
        &self.theta
    }
}

/// Generates `m` classical weights from the first `m` probabilities.
pub fn generate_theta<T: Real>(probs: &[T], gamma: &MappingModel<T>, m: usize) -> Result<(Vec<T>, MappingCache<T>)> {
    let n = gamma.n_qubits;
    let dim = 1usize << n;
    if probs.len() != dim {
        return Err(config_err!(
            "probability vector has {} entries but the mapping model expects 2^{n} = {dim}",
            probs.len()
        ));
    }
    if m > dim {
        return Err(config_err!(
            "{m} classical parameters need ceil(log2 {m}) = {} qubits, only {n} configured",
            required_qubits(m)
        ));
    }
    let h = gamma.hidden;
    let in_dim = gamma.input_dim();
    let scale = T::from_usize_lossy(dim);
    let mut hidden_out = vec![T::zero(); m * h];
    let mut scaled_probs = Vec::with_capacity(m);
    let mut theta = Vec::with_capacity(m);
    let mut x = Vec::with_capacity(in_dim);
    for i in 0..m {
        write_bits(i, n, &mut x);
        let sp = probs[i] * scale;
        x.push(sp);
        scaled_probs.push(sp);
        let hrow = &mut hidden_out[i * h..(i + 1) * h];
        let mut out = gamma.c2;
        for j in 0..h {
            let w = &gamma.w1[j * in_dim..(j + 1) * in_dim];
            let z = w.iter().zip(&x).fold(gamma.c1[j], |acc, (&a, &b)| acc + a * b);
            let a = z.tanh();
            hrow[j] = a;
            out += gamma.w2[j] * a;
        }
        theta.push(out.tanh());
    }
    let cache = MappingCache {
        gamma: gamma.clone(),
        hidden_out,
        scaled_probs,
        theta: theta.clone(),
        n_probs: dim,
    };
    Ok((theta, cache))
}

/// Reverse pass for `Σ_i grad_theta_i · θ_i`; returns gradients with respect
/// to the mapping parameters (same shape as the model) and to all `2^N`
/// probabilities (zero beyond index `m`).
pub fn mapping_backward<T: Real>(cache: &MappingCache<T>, grad_theta: &[T]) -> Result<(MappingModel<T>, Vec<T>)> {
    let m = cache.theta.len();
    if grad_theta.len() != m {
        return Err(invariant_err!(
            "theta gradient has {} entries, forward pass produced {m}",
            grad_theta.len()
        ));
    }
    let gamma = &cache.gamma;
    let n = gamma.n_qubits;
    let h = gamma.hidden;
    let in_dim = gamma.input_dim();
    let scale = T::from_usize_lossy(cache.n_probs);
    let mut grad = MappingModel::zeros(n, h);
    let mut grad_probs = vec![T::zero(); cache.n_probs];
    let mut x = Vec::with_capacity(in_dim);
    for i in 0..m {
        let g = grad_theta[i];
        if g == T::zero() {
            continue;
        }
        let t = cache.theta[i];
        let d_out = g * (T::one() - t * t);
        grad.c2 += d_out;
        write_bits(i, n, &mut x);
        x.push(cache.scaled_probs[i]);
        let hrow = &cache.hidden_out[i * h..(i + 1) * h];
        let mut d_sp = T::zero();
        for j in 0..h {
            let a = hrow[j];
            grad.w2[j] += d_out * a;
            let dz = d_out * gamma.w2[j] * (T::one() - a * a);
            grad.c1[j] += dz;
            let row = &mut grad.w1[j * in_dim..(j + 1) * in_dim];
            for (r, &xv) in row.iter_mut().zip(&x) {
                *r += dz * xv;
            }
            d_sp += dz * gamma.w1[j * in_dim + n];
        }
        grad_probs[i] = d_sp * scale;
    }
    Ok((grad, grad_probs))
}
