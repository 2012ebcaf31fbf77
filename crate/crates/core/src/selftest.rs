//! Runtime verification suites behind the `selftest` command: analytic
//! gradients against finite differences, and the affinity pipeline against
//! the brute-force reference in [`crate::oracle`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affinity::{
    rank_weights, resat_batch_step, sample_affinity, AffinityConfig, WeightScale,
};
use crate::diffmodel::{finite_diff_grad, Activation, Example, Model, ModelSpec, ParamVector};
use crate::error::Result;
use crate::oracle;

/// Outcome of one suite: the worst observed error against its bound.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub worst: f64,
    pub bound: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst < self.bound
    }
}

/// Model families exercised by the gradient check.
pub fn gradient_families() -> Vec<ModelSpec> {
    vec![
        ModelSpec::logistic(3, 3),
        ModelSpec::mlp(3, vec![5], 3, Activation::Tanh),
        ModelSpec::mlp(3, vec![6, 4], 2, Activation::Relu),
    ]
}

pub fn random_params(spec: &ModelSpec, rng: &mut impl Rng) -> ParamVector {
    ParamVector::from_vec(
        (0..spec.param_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

pub fn random_example(spec: &ModelSpec, rng: &mut impl Rng) -> Example {
    Example::new(
        (0..spec.input_dim)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
        rng.random_range(0..spec.num_classes),
    )
}

/// `max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|)`.
pub fn relative_error(analytic: &ParamVector, estimate: &ParamVector) -> f64 {
    let scale = analytic
        .as_slice()
        .iter()
        .chain(estimate.as_slice())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        0.0
    } else {
        analytic.max_abs_diff(estimate) / scale
    }
}

/// Worst relative error of the analytic gradient against central
/// differences with step 1e-5 over `draws` random (params, example) pairs.
/// Draws within 1e-4 of a relu kink are redrawn.
pub fn gradient_check(spec: &ModelSpec, draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < draws {
        let params = random_params(spec, &mut rng);
        let ex = random_example(spec, &mut rng);
        if spec.activation == Activation::Relu
            && spec
                .min_abs_hidden_preactivation(&params, &ex.features)
                .is_some_and(|z| z < 1e-4)
        {
            continue;
        }
        let analytic = spec.per_example_grad(&params, &ex)?;
        let fd = finite_diff_grad(spec, &params, &ex, 1e-5)?;
        worst = worst.max(relative_error(&analytic, &fd));
        done += 1;
    }
    Ok(worst)
}

/// Worst absolute deviation between the optimized affinity pipeline and the
/// reference on random mlp 2-8-3 instances with N = 8, K = 2. Covers each
/// sample affinity, the stepped parameters and the weights; ranks and the
/// conflicting set must match exactly (a mismatch reports infinity).
pub fn affinity_oracle_check(instances: usize, seed: u64) -> Result<f64> {
    let spec = ModelSpec::mlp(2, vec![8], 3, Activation::Tanh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let params = random_params(&spec, &mut rng);
        let batch: Vec<Example> = (0..8).map(|_| random_example(&spec, &mut rng)).collect();
        let scale = if i % 2 == 0 {
            WeightScale::MeanOne
        } else {
            WeightScale::Verbatim
        };
        let config = AffinityConfig {
            k_conflicting: 2,
            rank_sharpness: 4.0,
            learning_rate: 0.5,
            epsilon_loss_floor: 1e-12,
            weight_scale: scale,
            ..AffinityConfig::default()
        };
        let reference = oracle::resat_step(
            &spec,
            params.as_slice(),
            &batch,
            2,
            4.0,
            0.5,
            1e-12,
            scale == WeightScale::MeanOne,
        );
        let (stepped, report) = resat_batch_step(&spec, &params, &batch, &config)?;
        if report.ranks != reference.ranks || report.conflicting_indices != reference.conflicting {
            return Ok(f64::INFINITY);
        }
        let targets: Vec<Example> = reference
            .conflicting
            .iter()
            .map(|&j| batch[j].clone())
            .collect();
        for (j, x) in batch.iter().enumerate() {
            let sa = sample_affinity(&spec, &params, x, &targets, 0.5, 1e-12)?;
            worst = worst.max((sa - reference.scores[j]).abs());
            worst = worst.max((report.affinities[j] - reference.scores[j]).abs());
            worst = worst.max((report.weights[j] - reference.weights[j]).abs());
        }
        for (a, b) in stepped.as_slice().iter().zip(&reference.params) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Worst deviation from the closed-form properties of the rank weights for
/// N ∈ {1, 2, 8, 32} and s ∈ {0, 1, 4}: unit sum, monotonicity, the
/// first/last ratio e^s and exact uniformity at s = 0.
pub fn weight_property_check() -> f64 {
    let mut worst = 0.0f64;
    for n in [1usize, 2, 8, 32] {
        for s in [0.0f64, 1.0, 4.0] {
            let w = rank_weights(n, s, WeightScale::Verbatim);
            worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
            if w.windows(2).any(|p| p[1] > p[0]) {
                return f64::INFINITY;
            }
            if n >= 2 {
                worst = worst.max((w[0] / w[n - 1] - s.exp()).abs());
            }
            if s == 0.0 && w.iter().any(|&v| v != 1.0 / n as f64) {
                return f64::INFINITY;
            }
            let reference = oracle::rank_weights(n, s, false);
            for (a, b) in w.iter().zip(&reference) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

pub fn run_all() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut grad_worst = 0.0f64;
    for (i, spec) in gradient_families().iter().enumerate() {
        grad_worst = grad_worst.max(gradient_check(spec, 100, 1000 + i as u64)?);
    }
    checks.push(Check {
        name: "gradient vs finite differences (relative)",
        worst: grad_worst,
        bound: 1e-6,
    });
    checks.push(Check {
        name: "affinity pipeline vs brute force (absolute)",
        worst: affinity_oracle_check(50, 2024)?,
        bound: 1e-9,
    });
    checks.push(Check {
        name: "rank weight properties (absolute)",
        worst: weight_property_check(),
        bound: 1e-9,
    });
    Ok(checks)
}
