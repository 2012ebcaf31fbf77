//! The training loop.
//!
//! The loop itself only ever sees the example slice of the training split.
//! Group ids are read by the rank-trajectory bookkeeping in [`train`], which
//! observes batch losses from the outside, so removing them cannot change
//! the parameters.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Method, OuterOptimizer, TrainConfig};
use super::metrics::{evaluate_with, RankAccumulator};
use super::record::RunRecord;
use crate::affinity::{resat_batch_grad, weighted_grad, AffinityConfig, SampleAffinityReport};
use crate::baselines::{
    erm_grad, jtt_identify, jtt_weights, reloss_batch_grad, ErrorSet, LossRankReport,
};
use crate::datagen::GroupedDataset;
use crate::diffmodel::{batch_losses, Example, ModelSpec, ParamVector};
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// JTT stage 1: plain ERM up to the identification epoch.
    Identification,
    Main,
}

/// Method-specific outcome of one batch.
#[derive(Debug, Clone, Copy)]
pub enum StepDetail<'a> {
    Erm,
    Jtt {
        weights: &'a [f64],
        error_set: &'a ErrorSet,
    },
    ReLoss(&'a LossRankReport),
    ReSat(&'a SampleAffinityReport),
}

#[derive(Debug, Clone, Copy)]
pub struct BatchEvent<'a> {
    pub phase: Phase,
    /// 1-based epoch within the phase.
    pub epoch: usize,
    pub batch: usize,
    /// Dataset indices of the batch members, in batch order.
    pub indices: &'a [usize],
    pub params_before: &'a ParamVector,
    pub params_after: &'a ParamVector,
    /// Per-example losses at `params_before`.
    pub losses: &'a [f64],
    pub detail: StepDetail<'a>,
}

/// Hook for instrumentation; sees every batch after its update.
pub trait TrainObserver {
    fn on_batch(&mut self, event: &BatchEvent<'_>);
}

impl TrainObserver for () {
    fn on_batch(&mut self, _: &BatchEvent<'_>) {}
}

impl<F: FnMut(&BatchEvent<'_>)> TrainObserver for F {
    fn on_batch(&mut self, event: &BatchEvent<'_>) {
        self(event)
    }
}

/// State of the outer optimizer.
#[derive(Debug, Clone)]
pub struct OuterState {
    kind: OuterOptimizer,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl OuterState {
    pub fn new(kind: OuterOptimizer, len: usize) -> Self {
        OuterState {
            kind,
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }

    /// Applies one update with gradient `grad`. AdamW weight decay is
    /// decoupled and scaled by the learning rate.
    pub fn apply(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64) {
        match self.kind {
            OuterOptimizer::Sgd => *params = params.stepped(lr, grad),
            OuterOptimizer::AdamW {
                beta1,
                beta2,
                weight_decay,
                eps,
            } => {
                self.steps += 1;
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                let p = params.as_mut_slice();
                for i in 0..p.len() {
                    let g = grad[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    p[i] -= lr * weight_decay * p[i];
                    let m_hat = self.first[i] / c1;
                    let v_hat = self.second[i] / c2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Seeded permutation of `0..n` for one epoch: stream `epoch` of a ChaCha
/// generator keyed by `shuffle_seed`.
pub fn epoch_permutation(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Group-blind trainer over a bare example slice.
struct Loop<'a> {
    config: &'a TrainConfig,
    examples: &'a [Example],
    exec: Execution,
}

impl Loop<'_> {
    fn epoch(
        &self,
        phase: Phase,
        epoch: usize,
        params: &mut ParamVector,
        outer: &mut OuterState,
        error_set: Option<&ErrorSet>,
        observer: &mut dyn TrainObserver,
    ) -> Result<()> {
        let model: &ModelSpec = &self.config.model;
        let order = epoch_permutation(self.examples.len(), self.config.shuffle_seed, epoch - 1);
        let lr = self.config.learning_rate();
        let method = match phase {
            Phase::Identification => Method::Erm,
            Phase::Main => self.config.method,
        };

        for (b, indices) in order.chunks(self.config.batch_size).enumerate() {
            let wrap = |e: Error| Error::Train {
                epoch,
                batch: b,
                source: Box::new(e),
            };
            let batch: Vec<Example> = indices.iter().map(|&i| self.examples[i].clone()).collect();
            let losses = batch_losses(model, params, &batch).map_err(wrap)?;

            // a short final batch may hold fewer than K examples
            let affinity = AffinityConfig {
                k_conflicting: self.config.affinity.k_conflicting.min(batch.len()),
                ..self.config.affinity.clone()
            };
            let jtt_w;
            let resat;
            let reloss;
            let (grad, detail) = match method {
                Method::Erm => (
                    erm_grad(model, params, &batch, self.exec).map_err(wrap)?,
                    StepDetail::Erm,
                ),
                Method::Jtt => {
                    let set = error_set.expect("jtt main phase has an error set");
                    jtt_w = jtt_weights(set, indices, &self.config.jtt);
                    let g =
                        weighted_grad(model, params, &batch, &jtt_w, self.exec).map_err(wrap)?;
                    (
                        g,
                        StepDetail::Jtt {
                            weights: &jtt_w,
                            error_set: set,
                        },
                    )
                }
                Method::ReLoss => {
                    let (g, r) = reloss_batch_grad(model, params, &batch, &affinity, self.exec)
                        .map_err(wrap)?;
                    reloss = r;
                    (g, StepDetail::ReLoss(&reloss))
                }
                Method::ReSat => {
                    let (g, r) = resat_batch_grad(model, params, &batch, &affinity, self.exec)
                        .map_err(wrap)?;
                    resat = r;
                    (g, StepDetail::ReSat(&resat))
                }
            };

            let before = params.clone();
            outer.apply(params, &grad, lr);
            if !params.is_finite() {
                return Err(wrap(Error::NonFinite("parameters after update".into())));
            }
            observer.on_batch(&BatchEvent {
                phase,
                epoch,
                batch: b,
                indices,
                params_before: &before,
                params_after: params,
                losses: &losses,
                detail,
            });
        }
        Ok(())
    }
}

/// Trains one run and evaluates on `eval_data` after every epoch.
pub fn train(
    config: &TrainConfig,
    train_data: &GroupedDataset,
    eval_data: &GroupedDataset,
    seed: u64,
) -> Result<RunRecord> {
    train_observed(
        config,
        train_data,
        eval_data,
        seed,
        &mut (),
        Execution::default(),
    )
}

pub fn train_observed(
    config: &TrainConfig,
    train_data: &GroupedDataset,
    eval_data: &GroupedDataset,
    seed: u64,
    observer: &mut dyn TrainObserver,
    exec: Execution,
) -> Result<RunRecord> {
    config.validate()?;
    if train_data.is_empty() || eval_data.is_empty() {
        return Err(Error::Data(
            "training and evaluation data must be non-empty".into(),
        ));
    }
    let started = Instant::now();
    let model = &config.model;
    let runner = Loop {
        config,
        examples: &train_data.examples,
        exec,
    };

    let mut error_set = None;
    if config.method == Method::Jtt && config.epochs > 0 {
        let mut params = model.init_params(seed);
        let mut outer = OuterState::new(config.outer_optimizer, params.len());
        for epoch in 1..=config.jtt.identification_epoch {
            runner.epoch(
                Phase::Identification,
                epoch,
                &mut params,
                &mut outer,
                None,
                observer,
            )?;
        }
        error_set = Some(jtt_identify(model, &params, &train_data.examples, exec)?);
    }

    // stage 2 of JTT restarts from the same initialization
    let mut params = model.init_params(seed);
    let mut outer = OuterState::new(config.outer_optimizer, params.len());
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut ranks = RankAccumulator::default();
        let mut tracker = |e: &BatchEvent<'_>| {
            let groups: Vec<usize> = e.indices.iter().map(|&i| train_data.group_ids[i]).collect();
            ranks.add_batch(e.losses, &groups);
            observer.on_batch(e);
        };
        runner.epoch(
            Phase::Main,
            epoch,
            &mut params,
            &mut outer,
            error_set.as_ref(),
            &mut tracker,
        )?;
        let mut metrics = evaluate_with(model, &params, eval_data, exec)?;
        metrics.epoch = epoch;
        metrics.per_group_mean_rank = ranks.finish();
        epochs.push(metrics);
    }

    Ok(RunRecord {
        config: config.clone(),
        seed,
        epochs,
        final_params: params,
        wall_time: started.elapsed().as_secs_f64(),
        eval_fingerprint: eval_data.fingerprint(),
        jtt_error_set: error_set,
    })
}
