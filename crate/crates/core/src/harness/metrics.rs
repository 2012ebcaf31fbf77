use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::affinity::rank_descending;
use crate::datagen::GroupedDataset;
use crate::diffmodel::{Model, ModelSpec, ParamVector};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Evaluation of one epoch's parameters. Group maps are keyed by group id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based epoch number; 0 for an evaluation outside training.
    pub epoch: usize,
    pub per_group_loss: BTreeMap<usize, f64>,
    pub per_group_accuracy: BTreeMap<usize, f64>,
    pub worst_group_accuracy: f64,
    pub overall_accuracy: f64,
    pub overall_loss: f64,
    /// Batch-averaged descending loss rank on the training data. Empty when
    /// the metrics come from a plain evaluation.
    pub per_group_mean_rank: BTreeMap<usize, f64>,
    /// Group ids below the largest id that had no examples.
    pub omitted_groups: Vec<usize>,
}

/// Per-group mean loss and accuracy on `data`. Groups without examples are
/// left out and listed in `omitted_groups`.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &GroupedDataset,
) -> Result<EpochMetrics> {
    evaluate_with(spec, params, data, Execution::default())
}

pub fn evaluate_with(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &GroupedDataset,
    exec: Execution,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let scored = exec.try_map(&data.examples, |_, ex| {
        let loss = spec.per_example_loss(params, ex)?;
        Ok::<_, Error>((loss, spec.predict(params, &ex.features) == ex.label))
    })?;

    let groups = data.num_groups();
    let mut loss_sum = vec![0.0; groups];
    let mut correct = vec![0usize; groups];
    let mut count = vec![0usize; groups];
    for ((loss, ok), &g) in scored.iter().zip(&data.group_ids) {
        loss_sum[g] += loss;
        correct[g] += usize::from(*ok);
        count[g] += 1;
    }

    let mut metrics = EpochMetrics {
        epoch: 0,
        per_group_loss: BTreeMap::new(),
        per_group_accuracy: BTreeMap::new(),
        worst_group_accuracy: f64::INFINITY,
        overall_accuracy: correct.iter().sum::<usize>() as f64 / data.len() as f64,
        overall_loss: loss_sum.iter().sum::<f64>() / data.len() as f64,
        per_group_mean_rank: BTreeMap::new(),
        omitted_groups: Vec::new(),
    };
    for g in 0..groups {
        if count[g] == 0 {
            metrics.omitted_groups.push(g);
            continue;
        }
        let acc = correct[g] as f64 / count[g] as f64;
        metrics
            .per_group_loss
            .insert(g, loss_sum[g] / count[g] as f64);
        metrics.per_group_accuracy.insert(g, acc);
        metrics.worst_group_accuracy = metrics.worst_group_accuracy.min(acc);
    }
    if !metrics.overall_loss.is_finite() {
        return Err(Error::NonFinite("evaluation loss".into()));
    }
    Ok(metrics)
}

/// Mean descending loss rank per group within one batch (rank 1 = largest
/// loss). A rising rank for a group means its losses shrink relative to the
/// rest of the batch.
pub fn rank_trajectory(batch_losses: &[f64], batch_groups: &[usize]) -> BTreeMap<usize, f64> {
    assert_eq!(batch_losses.len(), batch_groups.len());
    let ranks = rank_descending(batch_losses);
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&r, &g) in ranks.iter().zip(batch_groups) {
        let e = sums.entry(g).or_default();
        e.0 += r as f64;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(g, (s, n))| (g, s / n as f64))
        .collect()
}

/// Averages per-batch group ranks over an epoch.
#[derive(Debug, Default)]
pub(crate) struct RankAccumulator {
    sums: BTreeMap<usize, (f64, usize)>,
}

impl RankAccumulator {
    pub fn add_batch(&mut self, losses: &[f64], groups: &[usize]) {
        for (g, mean) in rank_trajectory(losses, groups) {
            let e = self.sums.entry(g).or_default();
            e.0 += mean;
            e.1 += 1;
        }
    }

    pub fn finish(&mut self) -> BTreeMap<usize, f64> {
        std::mem::take(&mut self.sums)
            .into_iter()
            .map(|(g, (s, n))| (g, s / n as f64))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Split;
    use crate::diffmodel::Example;

    fn sign_classifier() -> (ModelSpec, ParamVector) {
        // predicts class 1 when the feature is positive
        let spec = ModelSpec::logistic(1, 2);
        (spec, ParamVector::from_vec(vec![-5.0, 5.0, 0.0, 0.0]))
    }

    fn data(features: &[f64], labels: &[usize], groups: &[usize]) -> GroupedDataset {
        GroupedDataset::new(
            features
                .iter()
                .zip(labels)
                .map(|(&f, &y)| Example::new(vec![f], y))
                .collect(),
            groups.to_vec(),
            Split::Test,
        )
        .unwrap()
    }

    #[test]
    fn hand_fixture() {
        let (spec, params) = sign_classifier();
        // group 0: one right, one wrong; group 1: both right
        let d = data(&[1.0, 1.0, -1.0, 2.0], &[1, 0, 0, 1], &[0, 0, 1, 1]);
        let m = evaluate(&spec, &params, &d).unwrap();
        assert_eq!(m.per_group_accuracy[&0], 0.5);
        assert_eq!(m.per_group_accuracy[&1], 1.0);
        assert_eq!(m.worst_group_accuracy, 0.5);
        assert_eq!(m.overall_accuracy, 0.75);
        assert!(m.omitted_groups.is_empty());
        assert!(m.per_group_loss[&0] > m.per_group_loss[&1]);
    }

    #[test]
    fn perfect_and_single_group() {
        let (spec, params) = sign_classifier();
        let d = data(&[1.0, -1.0, 3.0], &[1, 0, 1], &[0, 0, 0]);
        let m = evaluate(&spec, &params, &d).unwrap();
        assert_eq!(m.overall_accuracy, 1.0);
        assert_eq!(m.worst_group_accuracy, 1.0);

        let d = data(&[1.0, -1.0, -3.0], &[1, 1, 0], &[0, 0, 0]);
        let m = evaluate(&spec, &params, &d).unwrap();
        assert_eq!(m.worst_group_accuracy, m.overall_accuracy);
    }

    #[test]
    fn empty_group_is_flagged() {
        let (spec, params) = sign_classifier();
        let d = data(&[1.0, -1.0], &[1, 0], &[0, 2]);
        let m = evaluate(&spec, &params, &d).unwrap();
        assert_eq!(m.omitted_groups, vec![1]);
        assert_eq!(m.per_group_accuracy.len(), 2);
    }

    #[test]
    fn rank_trajectory_examples() {
        let r = rank_trajectory(&[5.0, 1.0, 2.0], &[0, 1, 1]);
        assert_eq!(r[&0], 1.0);
        assert_eq!(r[&1], 2.5);

        let r = rank_trajectory(&[0.3, 0.1, 0.7, 0.2, 0.9], &[3; 5]);
        assert_eq!(r[&3], 3.0);

        // equal losses rank by index: ranks 1,2,3,4
        let r = rank_trajectory(&[1.0; 4], &[0, 1, 0, 1]);
        assert_eq!(r[&0], 2.0);
        assert_eq!(r[&1], 3.0);
    }

    #[test]
    fn accumulator_averages_batches() {
        let mut acc = RankAccumulator::default();
        acc.add_batch(&[5.0, 1.0], &[0, 1]);
        acc.add_batch(&[1.0, 5.0], &[0, 1]);
        acc.add_batch(&[1.0, 2.0], &[1, 1]);
        let m = acc.finish();
        assert_eq!(m[&0], 1.5);
        assert_eq!(m[&1], (2.0 + 1.0 + 1.5) / 3.0);
        assert!(acc.finish().is_empty());
    }
}
