//! Comparison methods: plain ERM, Just-Train-Twice upweighting and loss-rank
//! reweighting (the affinity pipeline with losses in place of affinities).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::affinity::{
    combine, per_example_grads, rank_descending, rank_weights, weights_by_batch_index,
    AffinityConfig,
};
use crate::diffmodel::{batch_losses, Example, Model, ModelSpec, ParamVector};
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JttConfig {
    /// Constant factor applied to every member of the error set.
    pub upweight: f64,
    /// Number of stage-1 ERM epochs before the error set is frozen.
    pub identification_epoch: usize,
}

impl Default for JttConfig {
    fn default() -> Self {
        JttConfig {
            upweight: 25.0,
            identification_epoch: 3,
        }
    }
}

impl JttConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.upweight >= 1.0 && self.upweight.is_finite()) {
            return Err(Error::Config("jtt upweight must be finite and >= 1".into()));
        }
        if self.identification_epoch == 0 {
            return Err(Error::Config(
                "jtt identification epoch must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Dataset indices misclassified by the identification-stage model. There
/// is no way to modify the set once built.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ErrorSet(BTreeSet<usize>);

impl ErrorSet {
    pub fn contains(&self, index: usize) -> bool {
        self.0.contains(&index)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

impl FromIterator<usize> for ErrorSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        ErrorSet(iter.into_iter().collect())
    }
}

/// Mean gradient of the unweighted batch loss.
pub fn erm_grad<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    batch: &[Example],
    exec: Execution,
) -> Result<ParamVector> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let grads = per_example_grads(model, params, batch, exec)?;
    Ok(combine(
        &grads,
        &vec![1.0; batch.len()],
        model.param_count(),
    ))
}

pub fn erm_step<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    batch: &[Example],
    eta: f64,
) -> Result<ParamVector> {
    let g = erm_grad(model, params, batch, Execution::default())?;
    Ok(params.stepped(eta, &g))
}

/// Every training index whose arg-max prediction differs from its label.
pub fn jtt_identify(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &[Example],
    exec: Execution,
) -> Result<ErrorSet> {
    let wrong = exec.try_map(data, |_, ex| {
        spec.check_example(ex)?;
        Ok::<_, Error>(spec.predict(params, &ex.features) != ex.label)
    })?;
    Ok(wrong
        .into_iter()
        .enumerate()
        .filter_map(|(i, w)| w.then_some(i))
        .collect())
}

/// `upweight` for batch members in the error set, 1 otherwise.
pub fn jtt_weights(error_set: &ErrorSet, batch_indices: &[usize], config: &JttConfig) -> Vec<f64> {
    batch_indices
        .iter()
        .map(|&i| {
            if error_set.contains(i) {
                config.upweight
            } else {
                1.0
            }
        })
        .collect()
}

/// Loss-rank weights for one batch, in batch order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRankReport {
    pub losses: Vec<f64>,
    pub ranks: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Weighted gradient where the largest loss gets rank 1 and so the
/// largest weight. No lookahead; `epsilon_loss_floor` is unused.
pub fn reloss_batch_grad<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    batch: &[Example],
    config: &AffinityConfig,
    exec: Execution,
) -> Result<(ParamVector, LossRankReport)> {
    let losses = batch_losses(model, params, batch)?;
    if config.k_conflicting == 0 || config.k_conflicting > batch.len() {
        return Err(Error::InvalidK {
            k: config.k_conflicting,
            n: batch.len(),
        });
    }
    if !losses.iter().all(|l| l.is_finite()) {
        return Err(Error::NonFinite("batch losses".into()));
    }
    let ranks = rank_descending(&losses);
    let by_rank = rank_weights(batch.len(), config.rank_sharpness, config.weight_scale);
    let weights = weights_by_batch_index(&ranks, &by_rank);
    let grads = per_example_grads(model, params, batch, exec)?;
    let grad = combine(&grads, &weights, model.param_count());
    Ok((
        grad,
        LossRankReport {
            losses,
            ranks,
            weights,
        },
    ))
}

pub fn reloss_batch_step<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    batch: &[Example],
    config: &AffinityConfig,
) -> Result<(ParamVector, LossRankReport)> {
    let (grad, report) = reloss_batch_grad(model, params, batch, config, Execution::default())?;
    Ok((params.stepped(config.learning_rate, &grad), report))
}
