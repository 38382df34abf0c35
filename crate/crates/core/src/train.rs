//! Optimisation engines: Adam, the classical and Quantum-Train objectives,
//! the epoch loop, and the finite-difference gradient oracle.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cnn::{self, Architecture, ClassicalModel};
use crate::data::Dataset;
use crate::error::{config_err, invariant_err, QfedError, Result};
use crate::qstate::{self, AnsatzSpec};
use crate::qtmap::{self, MappingModel};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Parameters can be split into contiguous groups with
/// their own learning rate; all other hyperparameters are shared.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    /// `(end, lr)`: entries from the previous group's end up to `end` use `lr`.
    groups: Vec<(usize, f64)>,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            groups: vec![(n, config.lr)],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    /// One group per `(len, lr)` pair, in order. `config.lr` is ignored.
    pub fn with_groups(config: AdamConfig, groups: &[(usize, f64)]) -> Self {
        let mut end = 0;
        let bounds = groups
            .iter()
            .map(|&(len, lr)| {
                end += len;
                (end, lr)
            })
            .collect();
        Self {
            config,
            step: 0,
            groups: bounds,
            m: vec![T::zero(); end],
            v: vec![T::zero(); end],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Learning rate applied to entry `i`.
    pub fn lr_at(&self, i: usize) -> Option<f64> {
        self.groups.iter().find(|g| i < g.0).map(|g| g.1)
    }

    pub fn second_moments(&self) -> &[T] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invariant_err!(
                "Adam state has {} entries, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let t = self.step as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let eps = T::lit(c.eps);
        let mut start = 0;
        for &(end, lr) in &self.groups {
            let lr_t = T::lit(lr) / bc1;
            let ps = params[start..end].iter_mut().zip(&grads[start..end]);
            let ms = self.m[start..end].iter_mut().zip(self.v[start..end].iter_mut());
            for ((p, &g), (m, v)) in ps.zip(ms) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= lr_t * *m / ((*v / bc2).sqrt() + eps);
            }
            start = end;
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Real>(state: &mut AdamState<T>, params: &mut [T], grads: &[T]) -> Result<()> {
    state.step(params, grads)
}

/// A trainable parameterisation of the classical network.
pub trait Objective<T: Real>: Send + Sync {
    /// Length of the optimised vector.
    fn n_params(&self) -> usize;

    fn arch(&self) -> &Arc<Architecture>;

    /// Seeded initial parameter vector.
    fn init_params(&self, seed: u64) -> Vec<T>;

    /// Fresh optimiser state for the vector.
    fn optimizer(&self, adam: AdamConfig) -> AdamState<T> {
        AdamState::new(self.n_params(), adam)
    }

    /// Mean cross-entropy on a batch and its gradient with respect to `params`.
    fn loss_and_grad(&self, params: &[T], xs: &[T], ys: &[usize]) -> Result<(T, Vec<T>)>;

    /// The classical model used for inference.
    fn materialize(&self, params: &[T]) -> Result<ClassicalModel<T>>;
}

/// Trains `θ` directly.
#[derive(Clone, Debug)]
pub struct ClassicalObjective {
    arch: Arc<Architecture>,
}

impl ClassicalObjective {
    pub fn new(arch: Arc<Architecture>) -> Self {
        Self { arch }
    }
}

impl<T: Real> Objective<T> for ClassicalObjective {
    fn n_params(&self) -> usize {
        self.arch.n_params()
    }

    fn arch(&self) -> &Arc<Architecture> {
        &self.arch
    }

    fn init_params(&self, seed: u64) -> Vec<T> {
        self.arch.init_theta(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn loss_and_grad(&self, params: &[T], xs: &[T], ys: &[usize]) -> Result<(T, Vec<T>)> {
        let model = ClassicalModel::new(self.arch.clone(), params.to_vec())?;
        model_loss_and_grad(&model, xs, ys)
    }

    fn materialize(&self, params: &[T]) -> Result<ClassicalModel<T>> {
        ClassicalModel::new(self.arch.clone(), params.to_vec())
    }
}

fn model_loss_and_grad<T: Real>(model: &ClassicalModel<T>, xs: &[T], ys: &[usize]) -> Result<(T, Vec<T>)> {
    let (logits, cache) = cnn::forward(model, xs, ys.len())?;
    let (loss, dlogits) = cnn::loss_and_grad(&logits, ys, model.arch().n_classes())?;
    Ok((loss, cnn::backward(model, &cache, &dlogits)?))
}

/// Default Adam learning rate for the circuit angles `β` in QT modes.
pub const QT_CIRCUIT_LR: f64 = 3e-3;

/// Default Adam learning rate for the mapping parameters `γ` in QT modes.
/// Every `γ` entry moves all generated weights at once, so it tolerates a
/// much smaller step than the angles.
pub const QT_MAPPING_LR: f64 = 3e-4;

/// Trains circuit angles `β` and mapping parameters `γ`; `θ` is regenerated
/// from them on every evaluation. The optimised vector is `β ‖ γ`.
#[derive(Clone, Debug)]
pub struct QtObjective {
    arch: Arc<Architecture>,
    spec: AnsatzSpec,
    hidden: usize,
    circuit_lr: Option<f64>,
}

impl QtObjective {
    pub fn new(arch: Arc<Architecture>, spec: AnsatzSpec, hidden: usize) -> Result<Self> {
        let m = arch.n_params();
        if m > spec.dim() {
            return Err(config_err!(
                "{m} classical parameters need N = ceil(log2 {m}) = {} qubits, got {}",
                qtmap::required_qubits(m),
                spec.n_qubits
            ));
        }
        if hidden == 0 {
            return Err(config_err!("mapping model needs a hidden width >= 1"));
        }
        Ok(Self {
            arch,
            spec,
            hidden,
            circuit_lr: None,
        })
    }

    /// Gives `β` its own learning rate; `γ` keeps the optimiser's base rate.
    pub fn with_circuit_lr(mut self, lr: f64) -> Self {
        self.circuit_lr = Some(lr);
        self
    }

    pub fn spec(&self) -> &AnsatzSpec {
        &self.spec
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn split<'a, T: Real>(&self, params: &'a [T]) -> Result<(&'a [T], MappingModel<T>)> {
        let nb = self.spec.n_params();
        if params.len() != qtmap::qt_param_count(self.spec.n_qubits, self.spec.n_blocks, self.hidden) {
            return Err(config_err!(
                "QT vector length mismatch: expected {}, got {}",
                qtmap::qt_param_count(self.spec.n_qubits, self.spec.n_blocks, self.hidden),
                params.len()
            ));
        }
        let gamma = MappingModel::from_flat(self.spec.n_qubits, self.hidden, &params[nb..])?;
        Ok((&params[..nb], gamma))
    }

    /// Generated classical parameters for `β ‖ γ`.
    pub fn generate_theta<T: Real>(&self, params: &[T]) -> Result<Vec<T>> {
        let (beta, gamma) = self.split(params)?;
        let probs = qstate::ansatz_probabilities(&self.spec, beta)?;
        Ok(qtmap::generate_theta(&probs, &gamma, self.arch.n_params())?.0)
    }
}

impl<T: Real> Objective<T> for QtObjective {
    fn n_params(&self) -> usize {
        qtmap::qt_param_count(self.spec.n_qubits, self.spec.n_blocks, self.hidden)
    }

    fn arch(&self) -> &Arc<Architecture> {
        &self.arch
    }

    /// `β ~ U(−π, π)`: a random circuit spreads probability over all basis
    /// states, so every index gets an informative `p_i · 2^N` near one.
    /// `γ` follows [`MappingModel::init`], then `c2` centres the initial
    /// weights at zero.
    fn init_params(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = std::f64::consts::PI;
        let mut params: Vec<T> = (0..self.spec.n_params())
            .map(|_| T::lit(rng.random_range(-pi..pi)))
            .collect();
        let mut gamma = MappingModel::<T>::init(self.spec.n_qubits, self.hidden, &mut rng);
        let probs = qstate::run_ansatz(&self.spec, &params)
            .expect("freshly drawn angles are finite and correctly sized")
            .probabilities();
        gamma
            .center_output(&probs, self.arch.n_params())
            .expect("constructor checked that the register covers the model");
        params.extend(gamma.to_flat());
        params
    }

    fn optimizer(&self, adam: AdamConfig) -> AdamState<T> {
        let nb = self.spec.n_params();
        let groups = [
            (nb, self.circuit_lr.unwrap_or(adam.lr)),
            (Objective::<T>::n_params(self) - nb, adam.lr),
        ];
        AdamState::with_groups(adam, &groups)
    }

    fn loss_and_grad(&self, params: &[T], xs: &[T], ys: &[usize]) -> Result<(T, Vec<T>)> {
        let (beta, gamma) = self.split(params)?;
        let psi = qstate::run_ansatz(&self.spec, beta)?;
        let probs = psi.probabilities();
        let (theta, map_cache) = qtmap::generate_theta(&probs, &gamma, self.arch.n_params())?;
        let model = ClassicalModel::new(self.arch.clone(), theta)?;
        let (loss, grad_theta) = model_loss_and_grad(&model, xs, ys)?;
        let (grad_gamma, grad_probs) = qtmap::mapping_backward(&map_cache, &grad_theta)?;
        let mut grad = qstate::ansatz_backward_from_state(&self.spec, beta, psi, &grad_probs)?;
        grad.extend(grad_gamma.to_flat());
        Ok((loss, grad))
    }

    fn materialize(&self, params: &[T]) -> Result<ClassicalModel<T>> {
        ClassicalModel::new(self.arch.clone(), self.generate_theta(params)?)
    }
}

/// Loss and gradient norm of one optimiser step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One forward/backward pass and one Adam update on `params`.
pub fn train_step<T: Real, O: Objective<T> + ?Sized>(
    objective: &O,
    params: &mut [T],
    opt: &mut AdamState<T>,
    xs: &[T],
    ys: &[usize],
) -> Result<StepStats> {
    let (loss, grad) = objective.loss_and_grad(params, xs, ys)?;
    let grad_norm = grad.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    opt.step(params, &grad)?;
    Ok(StepStats {
        loss: loss.to_f64_lossy(),
        grad_norm,
    })
}

/// Classical-baseline step on `θ`.
pub fn classical_train_step<T: Real>(
    theta: &mut [T],
    arch: &Arc<Architecture>,
    xs: &[T],
    ys: &[usize],
    opt: &mut AdamState<T>,
) -> Result<StepStats> {
    train_step(&ClassicalObjective::new(arch.clone()), theta, opt, xs, ys)
}

/// Quantum-Train step on `β ‖ γ`: exactly one circuit simulation and one
/// adjoint sweep.
pub fn qt_train_step<T: Real>(
    trainable: &mut [T],
    objective: &QtObjective,
    xs: &[T],
    ys: &[usize],
    opt: &mut AdamState<T>,
) -> Result<StepStats> {
    train_step(objective, trainable, opt, xs, ys)
}

/// Mixes a base seed with stream coordinates (SplitMix64 finaliser), giving
/// independent RNG streams per client, round and epoch.
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Shuffle seed for epoch `epoch` of the learner identified by `client`.
/// Centralised training uses client 0, so a one-client federation replays it.
pub fn epoch_seed(seed: u64, client: u64, epoch: u64) -> u64 {
    stream_seed(seed, &[client, epoch])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
    pub steps: usize,
}

/// One shuffled pass over `data` in mini-batches (the last may be short).
pub fn run_epoch<T: Real, O: Objective<T> + ?Sized>(
    objective: &O,
    params: &mut [T],
    opt: &mut AdamState<T>,
    data: &Dataset<T>,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(config_err!("cannot train on an empty dataset"));
    }
    if batch_size == 0 {
        return Err(config_err!("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    let (mut loss, mut norm, mut steps) = (0.0, 0.0, 0);
    for chunk in order.chunks(batch_size) {
        let (xs, ys) = data.gather(chunk);
        let s = train_step(objective, params, opt, &xs, &ys)?;
        loss += s.loss;
        norm += s.grad_norm;
        steps += 1;
    }
    Ok(EpochStats {
        mean_loss: loss / steps as f64,
        mean_grad_norm: norm / steps as f64,
        steps,
    })
}

/// Central finite differences `(f(x + h e_i) − f(x − h e_i)) / 2h`, over all
/// coordinates or only `coords`. Entries outside `coords` are left at zero.
pub fn finite_difference_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
    coords: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for &i in coords {
        if i >= x.len() {
            return Err(invariant_err!("coordinate {i} out of range for length {}", x.len()));
        }
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(QfedError::Oracle(format!(
                "function not finite around coordinate {i} (f+ = {up}, f- = {down})"
            )));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Richardson-extrapolated central differences, `(4 D(h/2) − D(h)) / 3`,
/// accurate to `O(h⁴)`. The higher order allows a larger step, which keeps
/// cancellation error near `1e-13` instead of the `1e-11` of a plain central
/// difference at `h = 1e-5`; use it when small components must be resolved.
pub fn richardson_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
    coords: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let coarse = finite_difference_grad(&mut f, x, h, coords)?;
    let fine = finite_difference_grad(&mut f, x, h / 2.0, coords)?;
    Ok(fine.iter().zip(&coarse).map(|(a, b)| (4.0 * a - b) / 3.0).collect())
}
