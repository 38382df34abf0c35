//! In-process federated orchestration: IID sharding, client-side local
//! training, FedAvg over the trained vector, and per-round evaluation.
//!
//! Clients are persistent: each keeps its shard and optimiser state across
//! rounds and only receives the global vector at the start of a round. With a
//! single client the whole pipeline reduces exactly to [`run_centralized`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::{self, Confusion, Evaluation};
use crate::data::Dataset;
use crate::error::{config_err, invariant_err, Result};
use crate::scalar::Real;
use crate::train::{epoch_seed, run_epoch, stream_seed, AdamConfig, AdamState, EpochStats, Objective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Run clients on the rayon pool. Results do not depend on this.
    pub parallel: bool,
}

impl FedConfig {
    /// `r{rounds}-e{epochs}-c{clients}`.
    pub fn label(&self) -> String {
        run_label(self.rounds, self.local_epochs, self.n_clients)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(config_err!("at least one client is required"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be positive"));
        }
        Ok(())
    }
}

pub fn run_label(rounds: usize, epochs: usize, clients: usize) -> String {
    format!("r{rounds}-e{epochs}-c{clients}")
}

/// Seeded IID split into `n_clients` disjoint shards whose sizes differ by at
/// most one. Each shard keeps the dataset's original sample order.
pub fn partition_indices(len: usize, n_clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 || n_clients > len {
        return Err(config_err!("cannot split {len} samples across {n_clients} clients"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, &[u64::MAX])));
    let base = len / n_clients;
    let extra = len % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut start = 0;
    for k in 0..n_clients {
        let size = base + usize::from(k < extra);
        let mut shard = order[start..start + size].to_vec();
        shard.sort_unstable();
        shards.push(shard);
        start += size;
    }
    Ok(shards)
}

pub fn partition<T: Real>(dataset: &Dataset<T>, n_clients: usize, seed: u64) -> Result<Vec<Dataset<T>>> {
    Ok(partition_indices(dataset.len(), n_clients, seed)?
        .iter()
        .map(|idx| dataset.select(idx))
        .collect())
}

/// What a client sends back after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate<T> {
    pub client_id: usize,
    pub vector: Vec<T>,
    pub n_samples: usize,
    pub local_loss: f64,
    pub local_accuracy: f64,
    /// Optimiser steps taken and the sums of their batch losses and gradient norms.
    pub training: StepTotals,
}

/// Running sums over optimiser steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepTotals {
    pub steps: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

impl StepTotals {
    fn add(&mut self, e: &EpochStats) {
        self.steps += e.steps;
        self.loss += e.mean_loss * e.steps as f64;
        self.grad_norm += e.mean_grad_norm * e.steps as f64;
    }

    fn merge(&mut self, other: &StepTotals) {
        self.steps += other.steps;
        self.loss += other.loss;
        self.grad_norm += other.grad_norm;
    }

    pub fn mean_loss(&self) -> f64 {
        if self.steps == 0 {
            f64::NAN
        } else {
            self.loss / self.steps as f64
        }
    }

    pub fn mean_grad_norm(&self) -> f64 {
        if self.steps == 0 {
            f64::NAN
        } else {
            self.grad_norm / self.steps as f64
        }
    }
}

/// A federation member with its private shard and optimiser state.
#[derive(Clone, Debug)]
pub struct Client<T> {
    pub id: usize,
    pub shard: Dataset<T>,
    pub opt: AdamState<T>,
}

impl<T: Real> Client<T> {
    pub fn new(id: usize, shard: Dataset<T>, n_params: usize, adam: AdamConfig) -> Self {
        Self {
            id,
            shard,
            opt: AdamState::new(n_params, adam),
        }
    }

    pub fn with_optimizer(id: usize, shard: Dataset<T>, opt: AdamState<T>) -> Self {
        Self { id, shard, opt }
    }

    /// Copies the global vector, runs `local_epochs` shuffled passes over the
    /// shard, and reports the result. Epoch `j` of round `round` draws its
    /// shuffle from `epoch_seed(seed, id, round * local_epochs + j)`.
    pub fn local_train<O: Objective<T> + ?Sized>(
        &mut self,
        objective: &O,
        global: &[T],
        round: usize,
        local_epochs: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<ClientUpdate<T>> {
        if self.shard.is_empty() {
            return Err(config_err!("client {} has an empty shard", self.id));
        }
        if global.len() != objective.n_params() {
            return Err(config_err!(
                "global vector length {} does not match the trained model ({})",
                global.len(),
                objective.n_params()
            ));
        }
        let mut params = global.to_vec();
        let mut training = StepTotals::default();
        for j in 0..local_epochs {
            let epoch = (round * local_epochs + j) as u64;
            let stats = run_epoch(
                objective,
                &mut params,
                &mut self.opt,
                &self.shard,
                batch_size,
                epoch_seed(seed, self.id as u64, epoch),
            )?;
            training.add(&stats);
        }
        let eval = cnn::evaluate(
            &objective.materialize(&params)?,
            self.shard.pixels(),
            &self.shard.labels(),
        )?;
        Ok(ClientUpdate {
            client_id: self.id,
            vector: params,
            n_samples: self.shard.len(),
            local_loss: eval.loss,
            local_accuracy: eval.accuracy,
            training,
        })
    }
}

/// Sample-weighted FedAvg, `Σ_k (n_k / Σn) u_k`, summed in ascending client
/// id order. Computed as an offset from the first update so that identical
/// updates aggregate to themselves exactly; results are clamped to the
/// per-coordinate client range.
pub fn aggregate<T: Real>(updates: &[ClientUpdate<T>]) -> Result<Vec<T>> {
    let first = updates
        .first()
        .ok_or_else(|| invariant_err!("no client updates to aggregate"))?;
    let len = first.vector.len();
    if let Some(u) = updates.iter().find(|u| u.vector.len() != len) {
        return Err(invariant_err!(
            "client {} sent {} values, expected {len}",
            u.client_id,
            u.vector.len()
        ));
    }
    if let Some(u) = updates.iter().find(|u| u.n_samples == 0) {
        return Err(invariant_err!("client {} reported zero samples", u.client_id));
    }
    let mut ordered: Vec<&ClientUpdate<T>> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let reference = &ordered[0].vector;
    let total: usize = ordered.iter().map(|u| u.n_samples).sum();
    let total = T::from_usize_lossy(total);
    let mut out = reference.clone();
    for u in &ordered {
        let w = T::from_usize_lossy(u.n_samples) / total;
        for ((o, &v), &r) in out.iter_mut().zip(&u.vector).zip(reference) {
            *o += w * (v - r);
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        let (lo, hi) = ordered
            .iter()
            .map(|u| u.vector[i])
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), v| (lo.min(v), hi.max(v)));
        *o = o.max(lo).min(hi);
    }
    Ok(out)
}

/// Global and local metrics after one round (or one centralised epoch).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub global_accuracy: f64,
    pub global_loss: f64,
    pub client_accuracies: Vec<f64>,
    pub client_losses: Vec<f64>,
    /// Bytes one client uploads per round (vector length × scalar size).
    pub update_bytes: usize,
    /// Optimiser steps of the round, summed over clients.
    pub training: StepTotals,
}

/// Full history of a training run.
#[derive(Clone, Debug)]
pub struct RunHistory<T> {
    /// Evaluation of the initial global model.
    pub initial: RoundMetrics,
    pub rounds: Vec<RoundMetrics>,
    pub final_params: Vec<T>,
    pub final_confusion: Confusion,
}

impl<T> RunHistory<T> {
    /// Per-round rows, or just the initial evaluation when no round ran.
    pub fn rows(&self) -> Vec<&RoundMetrics> {
        if self.rounds.is_empty() {
            vec![&self.initial]
        } else {
            self.rounds.iter().collect()
        }
    }
}

fn evaluate_global<T: Real, O: Objective<T> + ?Sized>(
    objective: &O,
    params: &[T],
    test: &Dataset<T>,
) -> Result<Evaluation> {
    cnn::evaluate(&objective.materialize(params)?, test.pixels(), &test.labels())
}

fn metrics_row(
    round: usize,
    eval: &Evaluation,
    updates: &[(f64, f64)],
    update_bytes: usize,
    training: StepTotals,
) -> RoundMetrics {
    RoundMetrics {
        round,
        global_accuracy: eval.accuracy,
        global_loss: eval.loss,
        client_accuracies: updates.iter().map(|u| u.0).collect(),
        client_losses: updates.iter().map(|u| u.1).collect(),
        update_bytes,
        training,
    }
}

/// Broadcast → local training on every client → FedAvg → evaluation of the
/// aggregated (inference-only, classical) model on `test`, `rounds` times.
pub fn run_federated<T: Real, O: Objective<T> + ?Sized>(
    objective: &O,
    config: &FedConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
) -> Result<RunHistory<T>> {
    config.validate()?;
    let n_params = objective.n_params();
    let update_bytes = n_params * std::mem::size_of::<T>();
    let mut clients: Vec<Client<T>> = partition(train, config.n_clients, config.seed)?
        .into_iter()
        .enumerate()
        .map(|(id, shard)| Client::with_optimizer(id, shard, objective.optimizer(config.adam)))
        .collect();

    let mut global = objective.init_params(config.seed);
    let mut eval = evaluate_global(objective, &global, test)?;
    let initial = metrics_row(0, &eval, &[], update_bytes, StepTotals::default());
    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let work = |c: &mut Client<T>| {
            c.local_train(
                objective,
                &global,
                round,
                config.local_epochs,
                config.batch_size,
                config.seed,
            )
        };
        let updates: Vec<ClientUpdate<T>> = if config.parallel {
            clients.par_iter_mut().map(work).collect::<Result<_>>()?
        } else {
            clients.iter_mut().map(work).collect::<Result<_>>()?
        };
        global = aggregate(&updates)?;
        eval = evaluate_global(objective, &global, test)?;
        let local: Vec<(f64, f64)> = updates.iter().map(|u| (u.local_accuracy, u.local_loss)).collect();
        let mut training = StepTotals::default();
        for u in &updates {
            training.merge(&u.training);
        }
        rounds.push(metrics_row(round + 1, &eval, &local, update_bytes, training));
    }
    Ok(RunHistory {
        initial,
        rounds,
        final_params: global,
        final_confusion: eval.confusion,
    })
}

/// Plain (non-federated) training: one learner, the whole training set,
/// `epochs` passes, evaluation after each epoch.
pub fn run_centralized<T: Real, O: Objective<T> + ?Sized>(
    objective: &O,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    adam: AdamConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
) -> Result<RunHistory<T>> {
    let mut params = objective.init_params(seed);
    let mut opt = objective.optimizer(adam);
    let mut eval = evaluate_global(objective, &params, test)?;
    let initial = metrics_row(0, &eval, &[], 0, StepTotals::default());
    let mut rounds = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let stats = run_epoch(
            objective,
            &mut params,
            &mut opt,
            train,
            batch_size,
            epoch_seed(seed, 0, epoch as u64),
        )?;
        let mut training = StepTotals::default();
        training.add(&stats);
        eval = evaluate_global(objective, &params, test)?;
        rounds.push(metrics_row(epoch + 1, &eval, &[], 0, training));
    }
    Ok(RunHistory {
        initial,
        rounds,
        final_params: params,
        final_confusion: eval.confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn update(id: usize, v: Vec<f64>, n: usize) -> ClientUpdate<f64> {
        ClientUpdate {
            client_id: id,
            vector: v,
            n_samples: n,
            local_loss: 0.0,
            local_accuracy: 0.0,
            training: StepTotals::default(),
        }
    }

    #[test]
    fn partition_examples() {
        let s = partition_indices(100, 5, 1).unwrap();
        assert!(s.iter().all(|x| x.len() == 20));
        let s = partition_indices(60_000, 60, 1).unwrap();
        assert!(s.iter().all(|x| x.len() == 1000));
        assert_eq!(
            partition_indices(103, 5, 9).unwrap(),
            partition_indices(103, 5, 9).unwrap()
        );
        assert_eq!(partition_indices(10, 1, 3).unwrap()[0], (0..10).collect::<Vec<_>>());
        assert!(partition_indices(4, 5, 0).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let v = vec![0.1, -3.3, 7.0];
        let out = aggregate(&[
            update(0, v.clone(), 3),
            update(1, v.clone(), 5),
            update(2, v.clone(), 7),
        ])
        .unwrap();
        assert_eq!(out, v);
        let out = aggregate(&[update(1, vec![2.0], 4), update(0, vec![0.0], 4)]).unwrap();
        assert_eq!(out, vec![1.0]);
        let out = aggregate(&[update(0, vec![0.0], 1), update(1, vec![4.0], 3)]).unwrap();
        assert_eq!(out, vec![3.0]);
        assert!(aggregate::<f64>(&[]).is_err());
        assert!(aggregate(&[update(0, vec![0.0], 1), update(1, vec![0.0, 1.0], 1)]).is_err());
    }

    #[test]
    fn label_format() {
        assert_eq!(run_label(70, 10, 10), "r70-e10-c10");
    }

    proptest! {
        #[test]
        fn partition_conserves_samples(len in 1usize..400, clients in 1usize..40, seed: u64) {
            prop_assume!(clients <= len);
            let shards = partition_indices(len, clients, seed).unwrap();
            let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut all: Vec<usize> = shards.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        }

        #[test]
        fn aggregate_is_convex(
            rows in prop::collection::vec((prop::collection::vec(-1e3f64..1e3, 6), 1usize..500), 1..12)
        ) {
            let updates: Vec<_> = rows.iter().enumerate().map(|(i, (v, n))| update(i, v.clone(), *n)).collect();
            let out = aggregate(&updates).unwrap();
            for (j, o) in out.iter().enumerate() {
                let lo = rows.iter().map(|r| r.0[j]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r.0[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*o >= lo && *o <= hi);
            }
            let total: usize = rows.iter().map(|r| r.1).sum();
            let wsum: f64 = rows.iter().map(|r| r.1 as f64 / total as f64).sum();
            prop_assert!((wsum - 1.0).abs() < 1e-12);
        }
    }
}
