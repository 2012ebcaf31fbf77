//! Straightforward reference implementations used as verification oracles.
//!
//! Nothing here calls into [`crate::diffmodel`] or [`crate::affinity`]
//! beyond reading the public fields of a [`ModelSpec`]. The code favours
//! obviousness over speed: nested `Vec` matrices, direct softmax, counting
//! ranks, repeated arg-max selection. The test-suites and the `selftest`
//! command compare the optimized paths against these.

use crate::diffmodel::{Activation, Example, ModelSpec};

struct Dense {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

fn unpack(spec: &ModelSpec, params: &[f64]) -> Vec<Dense> {
    let mut dims = vec![spec.input_dim];
    dims.extend(spec.hidden_dims.iter().copied());
    dims.push(spec.num_classes);
    let mut cursor = 0;
    let mut layers = Vec::new();
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let mut weights = vec![vec![0.0; fan_in]; fan_out];
        for row in weights.iter_mut() {
            for w in row.iter_mut() {
                *w = params[cursor];
                cursor += 1;
            }
        }
        let mut bias = vec![0.0; fan_out];
        for b in bias.iter_mut() {
            *b = params[cursor];
            cursor += 1;
        }
        layers.push(Dense { weights, bias });
    }
    assert_eq!(cursor, params.len(), "parameter count mismatch");
    layers
}

fn act(spec: &ModelSpec, z: f64) -> f64 {
    match spec.activation {
        Activation::Tanh => z.tanh(),
        Activation::Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
    }
}

fn act_slope(spec: &ModelSpec, z: f64) -> f64 {
    match spec.activation {
        Activation::Tanh => {
            let c = z.cosh();
            1.0 / (c * c)
        }
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Returns (inputs to each layer, pre-activations of each layer).
fn run(spec: &ModelSpec, layers: &[Dense], x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut inputs = vec![x.to_vec()];
    let mut zs = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let a = inputs.last().unwrap().clone();
        let mut z = layer.bias.clone();
        for (o, row) in layer.weights.iter().enumerate() {
            for (i, w) in row.iter().enumerate() {
                z[o] += w * a[i];
            }
        }
        if l + 1 < layers.len() {
            inputs.push(z.iter().map(|&v| act(spec, v)).collect());
        }
        zs.push(z);
    }
    (inputs, zs)
}

fn probabilities(logits: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
    let mut total = 0.0;
    for v in &e {
        total += v;
    }
    e.iter().map(|v| v / total).collect()
}

pub fn loss(spec: &ModelSpec, params: &[f64], ex: &Example) -> f64 {
    let layers = unpack(spec, params);
    let (_, zs) = run(spec, &layers, &ex.features);
    -probabilities(zs.last().unwrap())[ex.label].ln()
}

pub fn grad(spec: &ModelSpec, params: &[f64], ex: &Example) -> Vec<f64> {
    let layers = unpack(spec, params);
    let (inputs, zs) = run(spec, &layers, &ex.features);
    let mut delta = probabilities(zs.last().unwrap());
    delta[ex.label] -= 1.0;

    let mut per_layer: Vec<(Vec<Vec<f64>>, Vec<f64>)> = Vec::new();
    for l in (0..layers.len()).rev() {
        let a = &inputs[l];
        let dw: Vec<Vec<f64>> = delta
            .iter()
            .map(|d| a.iter().map(|x| d * x).collect())
            .collect();
        per_layer.push((dw, delta.clone()));
        if l > 0 {
            let mut next = vec![0.0; a.len()];
            for (o, d) in delta.iter().enumerate() {
                for (i, slot) in next.iter_mut().enumerate() {
                    *slot += layers[l].weights[o][i] * d;
                }
            }
            for (i, slot) in next.iter_mut().enumerate() {
                *slot *= act_slope(spec, zs[l - 1][i]);
            }
            delta = next;
        }
    }
    per_layer.reverse();
    let mut flat = Vec::with_capacity(params.len());
    for (dw, db) in per_layer {
        for row in dw {
            flat.extend(row);
        }
        flat.extend(db);
    }
    flat
}

fn step(params: &[f64], eta: f64, g: &[f64]) -> Vec<f64> {
    params.iter().zip(g).map(|(p, d)| p - eta * d).collect()
}

/// Sample affinity of `x` toward `targets`, with explicit lookahead and
/// explicit loss ratios. Denominators are floored at `eps`.
pub fn sample_affinity(
    spec: &ModelSpec,
    params: &[f64],
    x: &Example,
    targets: &[Example],
    eta: f64,
    eps: f64,
) -> f64 {
    let ahead = step(params, eta, &grad(spec, params, x));
    let mut total = 0.0;
    for b in targets {
        let before = loss(spec, params, b);
        let after = loss(spec, &ahead, b);
        total += 1.0 - after / before.max(eps);
    }
    total / targets.len() as f64
}

/// Indices of the `k` largest values by repeated arg-max; earlier index wins
/// ties. Returned in ascending index order.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; values.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..values.len() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if values[i] <= values[b] => {}
                _ => best = Some(i),
            }
        }
        taken[best.unwrap()] = true;
    }
    (0..values.len()).filter(|&i| taken[i]).collect()
}

/// Descending rank of each value (1 = largest), counting strictly larger
/// values and equal values at lower indices.
pub fn ranks(values: &[f64]) -> Vec<usize> {
    (0..values.len())
        .map(|i| {
            1 + (0..values.len())
                .filter(|&j| values[j] > values[i] || (values[j] == values[i] && j < i))
                .count()
        })
        .collect()
}

/// Rank-softmax weight of every rank `1..=n`, computed literally.
pub fn rank_weights(n: usize, s: f64, mean_one: bool) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let raw: Vec<f64> = (1..=n)
        .map(|r| (s * (n - r) as f64 / (n - 1) as f64).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let scale = if mean_one { n as f64 } else { 1.0 };
    raw.iter().map(|v| scale * v / total).collect()
}

/// Gradient step on `(1/N) Σ w_i L(x_i)`.
pub fn weighted_step(
    spec: &ModelSpec,
    params: &[f64],
    batch: &[Example],
    weights: &[f64],
    eta: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; params.len()];
    for (ex, w) in batch.iter().zip(weights) {
        for (acc, v) in g.iter_mut().zip(grad(spec, params, ex)) {
            *acc += w * v;
        }
    }
    let n = batch.len() as f64;
    let mean: Vec<f64> = g.iter().map(|v| v / n).collect();
    step(params, eta, &mean)
}

/// Everything a reweighted step produces, in batch order.
#[derive(Debug, Clone)]
pub struct ReferenceStep {
    pub params: Vec<f64>,
    pub conflicting: Vec<usize>,
    pub scores: Vec<f64>,
    pub ranks: Vec<usize>,
    pub weights: Vec<f64>,
}

/// One full affinity-reweighted step, end to end.
#[allow(clippy::too_many_arguments)]
pub fn resat_step(
    spec: &ModelSpec,
    params: &[f64],
    batch: &[Example],
    k: usize,
    s: f64,
    eta: f64,
    eps: f64,
    mean_one: bool,
) -> ReferenceStep {
    let losses: Vec<f64> = batch.iter().map(|ex| loss(spec, params, ex)).collect();
    let conflicting = top_k(&losses, k);
    let targets: Vec<Example> = conflicting.iter().map(|&i| batch[i].clone()).collect();
    let scores: Vec<f64> = batch
        .iter()
        .map(|x| sample_affinity(spec, params, x, &targets, eta, eps))
        .collect();
    finish(spec, params, batch, conflicting, scores, s, eta, mean_one)
}

/// One loss-rank reweighted step, end to end.
pub fn reloss_step(
    spec: &ModelSpec,
    params: &[f64],
    batch: &[Example],
    s: f64,
    eta: f64,
    mean_one: bool,
) -> ReferenceStep {
    let losses: Vec<f64> = batch.iter().map(|ex| loss(spec, params, ex)).collect();
    finish(spec, params, batch, Vec::new(), losses, s, eta, mean_one)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    spec: &ModelSpec,
    params: &[f64],
    batch: &[Example],
    conflicting: Vec<usize>,
    scores: Vec<f64>,
    s: f64,
    eta: f64,
    mean_one: bool,
) -> ReferenceStep {
    let ranks = ranks(&scores);
    let by_rank = rank_weights(batch.len(), s, mean_one);
    let weights: Vec<f64> = ranks.iter().map(|&r| by_rank[r - 1]).collect();
    let params = weighted_step(spec, params, batch, &weights, eta);
    ReferenceStep {
        params,
        conflicting,
        scores,
        ranks,
        weights,
    }
}

/// Indices whose arg-max prediction differs from the label.
pub fn misclassified(spec: &ModelSpec, params: &[f64], data: &[Example]) -> Vec<usize> {
    let layers = unpack(spec, params);
    let mut out = Vec::new();
    for (i, ex) in data.iter().enumerate() {
        let (_, zs) = run(spec, &layers, &ex.features);
        let logits = zs.last().unwrap();
        let mut best = 0;
        for c in 1..logits.len() {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        if best != ex.label {
            out.push(i);
        }
    }
    out
}
