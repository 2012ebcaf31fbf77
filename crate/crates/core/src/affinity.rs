//! Sample reweighting by lookahead affinity testing.
//!
//! One reweighted step runs four stages on a mini-batch of `N` examples:
//!
//! 1. the `K` highest-loss examples are taken as the current estimate of the
//!    bias-conflicting set (recomputed every batch, nothing is cached);
//! 2. for every example `x_i`, a one-step lookahead `θ - η ∇L(x_i)` is taken
//!    from the same `θ` and its affinity is the mean relative loss reduction
//!    it causes on the bias-conflicting set;
//! 3. examples are ranked by descending affinity and the rank is mapped to a
//!    softmax-shaped weight;
//! 4. a single gradient step is taken on the weighted mean loss.
//!
//! Stage 2 is embarrassingly parallel and fans out through [`Execution`];
//! ranking, weighting and the step are reduced sequentially in batch order.

use serde::{Deserialize, Serialize};

use crate::diffmodel::{batch_losses, Example, Model, ParamVector};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// How rank weights are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScale {
    /// Weights sum to 1, so the weighted mean loss is about `N` times
    /// smaller than the plain mean.
    Verbatim,
    /// Weights sum to `N`; uniform weights are exactly 1.
    MeanOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    LowestIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityConfig {
    /// Size `K` of the estimated bias-conflicting set.
    pub k_conflicting: usize,
    /// Sharpness `s` of the rank softmax; 0 gives uniform weights.
    pub rank_sharpness: f64,
    /// Step size `η`, shared by the lookahead and the weighted step.
    pub learning_rate: f64,
    /// Floor on the pre-lookahead loss in the affinity ratio.
    pub epsilon_loss_floor: f64,
    pub weight_scale: WeightScale,
    pub tie_break: TieBreak,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        AffinityConfig {
            k_conflicting: 4,
            rank_sharpness: 4.0,
            learning_rate: 1e-2,
            epsilon_loss_floor: 1e-12,
            weight_scale: WeightScale::MeanOne,
            tie_break: TieBreak::LowestIndex,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_conflicting == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.rank_sharpness >= 0.0 && self.rank_sharpness.is_finite()) {
            return Err(Error::Config(
                "rank sharpness s must be finite and >= 0".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and > 0".into()));
        }
        if self.epsilon_loss_floor.is_nan() || self.epsilon_loss_floor < 0.0 {
            return Err(Error::Config("epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// Outcome of the affinity stage for one batch. Vectors are in batch order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAffinityReport {
    /// Estimated bias-conflicting batch indices, ascending.
    pub conflicting_indices: Vec<usize>,
    pub affinities: Vec<f64>,
    /// Descending-affinity rank of each example, 1-based.
    pub ranks: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Indices of the `k` largest losses, returned in ascending index order.
/// Equal losses favour the lower index.
pub fn estimate_bias_conflicting(losses: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > losses.len() {
        return Err(Error::InvalidK { k, n: losses.len() });
    }
    if !losses.iter().all(|l| l.is_finite()) {
        return Err(Error::NonFinite("batch losses".into()));
    }
    let mut order = descending_order(losses);
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Batch indices sorted by descending value, stable in index.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// Rank of every value under descending order: 1 for the largest. Equal
/// values are ranked by original index.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut ranks = vec![0; values.len()];
    for (r, i) in descending_order(values).into_iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Weight of each rank `1..=n` (index 0 holds rank 1):
/// `w(r) ∝ exp(s (n - r) / (n - 1))`, normalized to sum to 1, or to `n` under
/// [`WeightScale::MeanOne`]. A single-element batch gets weight 1.
pub fn rank_weights(n: usize, s: f64, scale: WeightScale) -> Vec<f64> {
    assert!(n >= 1, "rank_weights needs at least one rank");
    if n == 1 {
        return vec![1.0];
    }
    let span = (n - 1) as f64;
    let exponents: Vec<f64> = (1..=n).map(|r| s * (n - r) as f64 / span).collect();
    let top = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = exponents.iter().map(|e| (e - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    let numerator = match scale {
        WeightScale::Verbatim => 1.0,
        WeightScale::MeanOne => n as f64,
    };
    raw.into_iter().map(|v| v * numerator / total).collect()
}

/// Maps rank-indexed weights back onto batch order.
pub fn weights_by_batch_index(ranks: &[usize], by_rank: &[f64]) -> Vec<f64> {
    ranks.iter().map(|&r| by_rank[r - 1]).collect()
}

/// One plain gradient step on a single example: `θ - η ∇L(ex; θ)`.
pub fn lookahead_params<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    ex: &Example,
    eta: f64,
) -> Result<ParamVector> {
    let g = model.per_example_grad(params, ex)?;
    Ok(params.stepped(eta, &g))
}

/// `(1/K) Σ_k (1 - after_k / max(before_k, eps))`.
pub fn affinity_from_losses(before: &[f64], after: &[f64], eps: f64) -> f64 {
    debug_assert_eq!(before.len(), after.len());
    let total: f64 = before
        .iter()
        .zip(after)
        .map(|(b, a)| 1.0 - a / b.max(eps))
        .sum();
    total / before.len() as f64
}

/// Affinity of `x` toward the bias-conflicting examples: the mean relative
/// loss reduction on them after a lookahead step on `x`. Positive values
/// mean the step helps the conflicting set.
pub fn sample_affinity<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    x: &Example,
    conflicting: &[Example],
    eta: f64,
    eps: f64,
) -> Result<f64> {
    if conflicting.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let before = batch_losses(model, params, conflicting)?;
    let targets: Vec<&Example> = conflicting.iter().collect();
    let grad = model.per_example_grad(params, x)?;
    affinity_with_base(model, params, &grad, &targets, &before, eta, eps)
}

fn affinity_with_base<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    grad: &ParamVector,
    targets: &[&Example],
    before: &[f64],
    eta: f64,
    eps: f64,
) -> Result<f64> {
    let ahead = params.stepped(eta, grad);
    let after = targets
        .iter()
        .map(|b| model.per_example_loss(&ahead, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(affinity_from_losses(before, &after, eps))
}

fn check_weights(batch: &[Example], weights: &[f64]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if weights.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            what: "weights",
            expected: batch.len(),
            got: weights.len(),
        });
    }
    if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
        return Err(Error::NonFinite(
            "weights must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

/// `(1/N) Σ w_i g_i`, accumulated in batch order.
pub(crate) fn combine(grads: &[ParamVector], weights: &[f64], len: usize) -> ParamVector {
    let mut acc = ParamVector::zeros(len);
    for (g, &w) in grads.iter().zip(weights) {
        acc.axpy(w, g);
    }
    acc.scale(1.0 / grads.len() as f64);
    acc
}

pub(crate) fn per_example_grads<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    batch: &[Example],
    exec: Execution,
) -> Result<Vec<ParamVector>> {
    exec.try_map(batch, |_, ex| model.per_example_grad(params, ex))
}

/// Gradient of the weighted mean loss `(1/N) Σ w_i L(x_i)`.
pub fn weighted_grad<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    batch: &[Example],
    weights: &[f64],
    exec: Execution,
) -> Result<ParamVector> {
    check_weights(batch, weights)?;
    let grads = per_example_grads(model, params, batch, exec)?;
    Ok(combine(&grads, weights, model.param_count()))
}

/// One plain gradient step on the weighted mean loss.
pub fn weighted_step<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    batch: &[Example],
    weights: &[f64],
    eta: f64,
) -> Result<ParamVector> {
    let g = weighted_grad(model, params, batch, weights, Execution::default())?;
    Ok(params.stepped(eta, &g))
}

/// Runs the estimation, affinity and weighting stages and returns the
/// report together with the weighted gradient. No parameters are changed.
pub fn resat_batch_grad<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    batch: &[Example],
    config: &AffinityConfig,
    exec: Execution,
) -> Result<(ParamVector, SampleAffinityReport)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let losses = batch_losses(model, params, batch)?;
    let conflicting_indices = estimate_bias_conflicting(&losses, config.k_conflicting)?;
    let targets: Vec<&Example> = conflicting_indices.iter().map(|&i| &batch[i]).collect();
    let before: Vec<f64> = conflicting_indices.iter().map(|&i| losses[i]).collect();

    // every lookahead restarts from the same θ
    let eta = config.learning_rate;
    let per_sample = exec.try_map(batch, |_, x| {
        let grad = model.per_example_grad(params, x)?;
        let sa = affinity_with_base(
            model,
            params,
            &grad,
            &targets,
            &before,
            eta,
            config.epsilon_loss_floor,
        )?;
        Ok::<_, Error>((grad, sa))
    })?;
    let (grads, affinities): (Vec<ParamVector>, Vec<f64>) = per_sample.into_iter().unzip();
    if !affinities.iter().all(|a| a.is_finite()) {
        return Err(Error::NonFinite("sample affinities".into()));
    }

    let ranks = rank_descending(&affinities);
    let by_rank = rank_weights(batch.len(), config.rank_sharpness, config.weight_scale);
    let weights = weights_by_batch_index(&ranks, &by_rank);
    let grad = combine(&grads, &weights, model.param_count());
    Ok((
        grad,
        SampleAffinityReport {
            conflicting_indices,
            affinities,
            ranks,
            weights,
        },
    ))
}

/// A full reweighted step with the default execution mode.
pub fn resat_batch_step<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    batch: &[Example],
    config: &AffinityConfig,
) -> Result<(ParamVector, SampleAffinityReport)> {
    resat_batch_step_with(model, params, batch, config, Execution::default())
}

pub fn resat_batch_step_with<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    batch: &[Example],
    config: &AffinityConfig,
    exec: Execution,
) -> Result<(ParamVector, SampleAffinityReport)> {
    let (grad, report) = resat_batch_grad(model, params, batch, config, exec)?;
    Ok((params.stepped(config.learning_rate, &grad), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmodel::{finite_diff_grad, Activation, ModelSpec};
    use crate::oracle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `L(θ; x) = ½ (θ - x₀)²` on a single parameter.
    struct Quadratic;

    impl Model for Quadratic {
        fn param_count(&self) -> usize {
            1
        }
        fn per_example_loss(&self, p: &ParamVector, ex: &Example) -> Result<f64> {
            Ok(0.5 * (p[0] - ex.features[0]).powi(2))
        }
        fn per_example_grad(&self, p: &ParamVector, ex: &Example) -> Result<ParamVector> {
            Ok(ParamVector::from_vec(vec![p[0] - ex.features[0]]))
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Vec<Example> {
        (0..n)
            .map(|_| {
                let f = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                Example::new(f, rng.random_range(0..classes))
            })
            .collect()
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(
            estimate_bias_conflicting(&[0.1, 5.0, 3.0, 0.2], 2).unwrap(),
            vec![1, 2]
        );
        assert_eq!(
            estimate_bias_conflicting(&[0.3, 0.1, 0.2], 3).unwrap(),
            vec![0, 1, 2]
        );
        assert_eq!(
            estimate_bias_conflicting(&[1.0, 1.0, 0.5], 1).unwrap(),
            vec![0]
        );
        assert!(matches!(
            estimate_bias_conflicting(&[1.0], 2),
            Err(Error::InvalidK { k: 2, n: 1 })
        ));
        assert!(estimate_bias_conflicting(&[1.0], 0).is_err());
        assert!(estimate_bias_conflicting(&[f64::NAN, 1.0], 1).is_err());
    }

    #[test]
    fn lookahead_on_quadratic() {
        let p = ParamVector::from_vec(vec![1.0]);
        let ex = Example::new(vec![3.0], 0);
        let ahead = lookahead_params(&Quadratic, &p, &ex, 0.1).unwrap();
        assert!((ahead[0] - 1.2).abs() < 1e-15);
        assert_eq!(lookahead_params(&Quadratic, &p, &ex, 0.0).unwrap(), p);
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn lookahead_matches_finite_differences() {
        let spec = ModelSpec::mlp(3, vec![5], 3, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..10 {
            let params = spec.init_params(seed);
            let ex = random_batch(&mut rng, 1, 3, 3).remove(0);
            let eta = 0.3;
            let ahead = lookahead_params(&spec, &params, &ex, eta).unwrap();
            let fd = finite_diff_grad(&spec, &params, &ex, 1e-5).unwrap();
            let expected = params.stepped(eta, &fd);
            assert!(ahead.max_abs_diff(&expected) <= 1e-5 * fd.norm().max(1e-12));
        }
    }

    #[test]
    fn affinity_arithmetic() {
        assert_eq!(affinity_from_losses(&[2.0, 4.0], &[1.0, 2.0], 1e-12), 0.5);
        let sa = affinity_from_losses(&[1.0, 1.0], &[0.8, 1.2], 1e-12);
        assert!(sa.abs() < 1e-15);
        // zero pre-loss is floored rather than dividing by zero
        let sa = affinity_from_losses(&[0.0], &[1e-13], 1e-12);
        assert!((sa - 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_step_gives_zero_affinity() {
        let spec = ModelSpec::mlp(2, vec![8], 3, Activation::Relu);
        let params = spec.init_params(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = random_batch(&mut rng, 4, 2, 3);
        for x in &batch {
            let sa = sample_affinity(&spec, &params, x, &batch[..2], 0.0, 1e-12).unwrap();
            assert_eq!(sa, 0.0);
        }
    }

    #[test]
    fn affinity_matches_reference() {
        let spec = ModelSpec::mlp(2, vec![8], 3, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..20 {
            let params = spec.init_params(seed);
            let batch = random_batch(&mut rng, 8, 2, 3);
            for x in &batch {
                let fast = sample_affinity(&spec, &params, x, &batch[..2], 0.5, 1e-12).unwrap();
                let slow =
                    oracle::sample_affinity(&spec, params.as_slice(), x, &batch[..2], 0.5, 1e-12);
                assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
            }
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_descending(&[0.3, 0.9, -0.1]), vec![2, 1, 3]);
        assert_eq!(rank_descending(&[2.0; 5]), vec![1, 2, 3, 4, 5]);
        assert_eq!(rank_descending(&[-0.1, 0.9, 0.3]), vec![3, 1, 2]);
        assert_eq!(rank_descending(&[]), Vec::<usize>::new());
    }

    #[test]
    fn weight_examples() {
        let w = rank_weights(2, 4.0, WeightScale::Verbatim);
        let e4 = 4f64.exp();
        assert!((w[0] - e4 / (e4 + 1.0)).abs() < 1e-15);
        assert!((w[1] - 1.0 / (e4 + 1.0)).abs() < 1e-15);
        assert!((w[0] - 0.982014).abs() < 1e-6);

        assert_eq!(rank_weights(5, 0.0, WeightScale::Verbatim), vec![0.2; 5]);
        assert_eq!(rank_weights(5, 0.0, WeightScale::MeanOne), vec![1.0; 5]);
        assert_eq!(rank_weights(1, 4.0, WeightScale::Verbatim), vec![1.0]);
        assert_eq!(rank_weights(1, 4.0, WeightScale::MeanOne), vec![1.0]);

        let w = rank_weights(32, 4.0, WeightScale::Verbatim);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[0] / w[31] - 54.598_150_033_144_24).abs() < 1e-9);
        let m = rank_weights(32, 4.0, WeightScale::MeanOne);
        assert!((m.iter().sum::<f64>() - 32.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_step_degenerate_cases() {
        let spec = ModelSpec::logistic(2, 2);
        let params = spec.init_params(4);
        let ex = Example::new(vec![0.3, -1.2], 1);
        let single = weighted_step(&spec, &params, std::slice::from_ref(&ex), &[1.0], 0.2).unwrap();
        let ahead = lookahead_params(&spec, &params, &ex, 0.2).unwrap();
        assert!(single.max_abs_diff(&ahead) < 1e-15);

        // every example at a saturated minimum contributes nothing
        let flat = ParamVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, -800.0, 800.0]);
        let batch = vec![Example::new(vec![1.0, 1.0], 1); 3];
        let out = weighted_step(&spec, &flat, &batch, &[1.0, 2.0, 3.0], 1.0).unwrap();
        assert_eq!(out, flat);

        assert!(
            weighted_step(&spec, &params, std::slice::from_ref(&ex), &[1.0, 1.0], 0.1).is_err()
        );
        assert!(weighted_step(&spec, &params, &[ex], &[-1.0], 0.1).is_err());
    }

    #[test]
    fn report_invariants_hold() {
        let spec = ModelSpec::mlp(2, vec![8], 3, Activation::Tanh);
        let params = spec.init_params(9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = random_batch(&mut rng, 8, 2, 3);
        for scale in [WeightScale::Verbatim, WeightScale::MeanOne] {
            let config = AffinityConfig {
                k_conflicting: 3,
                learning_rate: 0.5,
                weight_scale: scale,
                ..AffinityConfig::default()
            };
            let (_, r) = resat_batch_step(&spec, &params, &batch, &config).unwrap();
            assert_eq!(r.conflicting_indices.len(), 3);
            assert!(r.conflicting_indices.windows(2).all(|w| w[0] < w[1]));
            let mut sorted = r.ranks.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (1..=8).collect::<Vec<_>>());
            let mut by_rank = [0.0; 8];
            for (i, &rank) in r.ranks.iter().enumerate() {
                by_rank[rank - 1] = r.affinities[i];
            }
            assert!(by_rank.windows(2).all(|w| w[0] >= w[1]));
            let expected = match scale {
                WeightScale::Verbatim => 1.0,
                WeightScale::MeanOne => 8.0,
            };
            assert!((r.weights.iter().sum::<f64>() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn execution_modes_agree_bitwise() {
        let spec = ModelSpec::mlp(2, vec![8], 3, Activation::Tanh);
        let params = spec.init_params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, 32, 2, 3);
        let config = AffinityConfig::default();
        let seq =
            resat_batch_step_with(&spec, &params, &batch, &config, Execution::Sequential).unwrap();
        let par =
            resat_batch_step_with(&spec, &params, &batch, &config, Execution::Parallel).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn self_affinity_is_non_negative_on_logistic() {
        let spec = ModelSpec::logistic(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..50 {
            let params = spec.init_params(seed);
            let x = random_batch(&mut rng, 1, 3, 3).remove(0);
            let sa =
                sample_affinity(&spec, &params, &x, std::slice::from_ref(&x), 1e-3, 1e-12).unwrap();
            assert!(sa >= -1e-12, "self affinity {sa}");
        }
    }

    proptest! {
        #[test]
        fn weights_follow_affinity_order(
            values in proptest::collection::vec(-5.0f64..5.0, 2..40),
            s in 0.0f64..8.0,
            scale in 0.1f64..10.0,
            shift in -3.0f64..3.0,
        ) {
            let n = values.len();
            let w = rank_weights(n, s, WeightScale::MeanOne);
            prop_assert!(w.windows(2).all(|p| p[0] >= p[1]));
            let batch_w = weights_by_batch_index(&rank_descending(&values), &w);
            let argmax_w = crate::diffmodel::argmax(&batch_w);
            let argmax_v = rank_descending(&values).iter().position(|&r| r == 1).unwrap();
            prop_assert_eq!(argmax_w, argmax_v);

            // ranks survive any positive affine rescaling, up to float rounding ties
            let moved: Vec<f64> = values.iter().map(|v| v * scale + shift).collect();
            let mut distinct = values.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            if distinct.windows(2).all(|p| p[1] - p[0] > 1e-9) {
                prop_assert_eq!(rank_descending(&values), rank_descending(&moved));
            }
        }

        #[test]
        fn top_k_agrees_with_selection_oracle(
            values in proptest::collection::vec(prop_oneof![Just(1.0f64), -3.0f64..3.0], 1..30),
            k_frac in 0.0f64..1.0,
        ) {
            let k = 1 + ((values.len() - 1) as f64 * k_frac) as usize;
            prop_assert_eq!(estimate_bias_conflicting(&values, k).unwrap(), oracle::top_k(&values, k));
            prop_assert_eq!(rank_descending(&values), oracle::ranks(&values));
        }
    }
}
