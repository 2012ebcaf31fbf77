//! Synthetic group-biased datasets and CSV ingestion.
//!
//! Every generated example has two feature blocks. The *core* block is the
//! class prototype plus Gaussian noise whose scale depends on the group, so
//! some groups are intrinsically harder. The *spurious* block is the
//! prototype of a "shortcut" class that equals the true label with the
//! group's `spurious_strength`. In the default benchmark a large majority
//! group has a reliable shortcut and low noise while four small minority
//! groups have an unreliable shortcut and graded noise.
//!
//! Group ids ride along for evaluation only; training code receives the bare
//! example slice.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmodel::Example;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub num_groups: usize,
    pub group_proportions: Vec<f64>,
    /// Per group: probability that the spurious block encodes the label.
    pub spurious_strength: Vec<f64>,
    /// Base standard deviation of the core-block noise.
    pub core_noise: f64,
    /// Per group multiplier on `core_noise`.
    pub group_noise_scale: Vec<f64>,
    /// Standard deviation of the spurious-block noise.
    pub spurious_noise: f64,
    /// Magnitude of the spurious prototype; the core prototype has unit
    /// magnitude.
    pub spurious_scale: f64,
    pub input_dim: usize,
    pub num_classes: usize,
    pub size: usize,
}

impl Default for BiasSpec {
    /// Groups 0..=3 are the minorities from noisiest to cleanest core, group
    /// 4 the majority. The spurious block is three times the core magnitude,
    /// agrees with the label 95% of the time in the majority and 20% in the
    /// minorities, so a linear model picks it up before the core.
    fn default() -> Self {
        BiasSpec {
            num_groups: 5,
            group_proportions: vec![0.05, 0.05, 0.05, 0.05, 0.8],
            spurious_strength: vec![0.2, 0.2, 0.2, 0.2, 0.95],
            core_noise: 0.5,
            group_noise_scale: vec![2.5, 2.0, 1.6, 1.3, 1.0],
            spurious_noise: 0.1,
            spurious_scale: 3.0,
            input_dim: 2,
            num_classes: 2,
            size: 20000,
        }
    }
}

impl BiasSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidBiasSpec(msg));
        if self.num_groups < 2 {
            return bad("num_groups must be at least 2".into());
        }
        for (name, len) in [
            ("group_proportions", self.group_proportions.len()),
            ("spurious_strength", self.spurious_strength.len()),
            ("group_noise_scale", self.group_noise_scale.len()),
        ] {
            if len != self.num_groups {
                return bad(format!(
                    "{name} has {len} entries, expected {}",
                    self.num_groups
                ));
            }
        }
        if self
            .group_proportions
            .iter()
            .any(|p| p.is_nan() || *p < 0.0)
        {
            return bad("group proportions must be non-negative".into());
        }
        let total: f64 = self.group_proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("group proportions sum to {total}, expected 1"));
        }
        if self
            .spurious_strength
            .iter()
            .any(|s| !(0.0..=1.0).contains(s))
        {
            return bad("spurious strengths must lie in [0, 1]".into());
        }
        if self.core_noise.is_nan()
            || self.core_noise < 0.0
            || self.spurious_noise.is_nan()
            || self.spurious_noise < 0.0
            || !self.spurious_scale.is_finite()
            || self.spurious_scale <= 0.0
            || self
                .group_noise_scale
                .iter()
                .any(|s| s.is_nan() || *s < 0.0)
        {
            return bad("noise scales must be non-negative, spurious_scale positive".into());
        }
        if self.input_dim < 2 {
            return bad("input_dim must be at least 2".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        Ok(())
    }

    /// Width of the core block; the spurious block takes the rest.
    pub fn core_dim(&self) -> usize {
        self.input_dim / 2
    }
}

/// Prototype of `class` over a block of `width` features: +1 where
/// `j % num_classes == class`, -1 elsewhere. For two classes these are
/// opposite vectors; in general classes are distinct once
/// `width >= num_classes`.
pub fn prototype(class: usize, num_classes: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| if j % num_classes == class { 1.0 } else { -1.0 })
        .collect()
}

/// Class whose prototype has the largest inner product with `block`; lowest
/// class wins ties.
pub fn nearest_prototype(block: &[f64], num_classes: usize) -> usize {
    let scores: Vec<f64> = (0..num_classes)
        .map(|c| {
            prototype(c, num_classes, block.len())
                .iter()
                .zip(block)
                .map(|(p, x)| p * x)
                .sum()
        })
        .collect();
    crate::diffmodel::argmax(&scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Full,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedDataset {
    pub examples: Vec<Example>,
    pub group_ids: Vec<usize>,
    pub split: Split,
    /// False when the source had no group column; all ids are then 0.
    pub groups_available: bool,
}

impl GroupedDataset {
    pub fn new(examples: Vec<Example>, group_ids: Vec<usize>, split: Split) -> Result<Self> {
        if examples.len() != group_ids.len() {
            return Err(Error::Data(format!(
                "{} examples but {} group ids",
                examples.len(),
                group_ids.len()
            )));
        }
        Ok(GroupedDataset {
            examples,
            group_ids,
            split,
            groups_available: true,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// One past the largest group id.
    pub fn num_groups(&self) -> usize {
        self.group_ids.iter().max().map_or(0, |g| g + 1)
    }

    pub fn input_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.len())
    }

    /// One past the largest label, but at least 2.
    pub fn num_classes(&self) -> usize {
        self.examples
            .iter()
            .map(|e| e.label + 1)
            .max()
            .unwrap_or(0)
            .max(2)
    }

    /// Same examples with all group information dropped.
    pub fn without_groups(&self) -> GroupedDataset {
        GroupedDataset {
            examples: self.examples.clone(),
            group_ids: vec![0; self.len()],
            split: self.split,
            groups_available: false,
        }
    }

    pub fn to_csv_string(&self) -> String {
        let dim = self.input_dim();
        let mut out = String::new();
        let mut header: Vec<String> = (0..dim).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        if self.groups_available {
            header.push("group".into());
        }
        out.push_str(&header.join(","));
        out.push('\n');
        for (ex, g) in self.examples.iter().zip(&self.group_ids) {
            let mut row: Vec<String> = ex.features.iter().map(|v| format!("{v:?}")).collect();
            row.push(ex.label.to_string());
            if self.groups_available {
                row.push(g.to_string());
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the CSV serialization.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_csv_string().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Draws a dataset from `spec`. Deterministic in `(spec, seed)`.
pub fn generate_spurious(spec: &BiasSpec, seed: u64) -> Result<GroupedDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = WeightedIndex::new(&spec.group_proportions)
        .map_err(|e| Error::InvalidBiasSpec(e.to_string()))?;
    let core_dim = spec.core_dim();
    let spur_dim = spec.input_dim - core_dim;
    let classes = spec.num_classes;

    let mut examples = Vec::with_capacity(spec.size);
    let mut group_ids = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let g = groups.sample(&mut rng);
        let label = rng.random_range(0..classes);
        let shortcut = if rng.random_bool(spec.spurious_strength[g]) {
            label
        } else {
            // uniform over the other classes
            let other = rng.random_range(0..classes - 1);
            if other >= label {
                other + 1
            } else {
                other
            }
        };
        let sigma = spec.core_noise * spec.group_noise_scale[g];
        let mut features = Vec::with_capacity(spec.input_dim);
        for p in prototype(label, classes, core_dim) {
            let z: f64 = rng.sample(StandardNormal);
            features.push(p + sigma * z);
        }
        for p in prototype(shortcut, classes, spur_dim) {
            let z: f64 = rng.sample(StandardNormal);
            features.push(spec.spurious_scale * p + spec.spurious_noise * z);
        }
        examples.push(Example::new(features, label));
        group_ids.push(g);
    }
    GroupedDataset::new(examples, group_ids, Split::Full)
}

/// Fraction of examples whose spurious block decodes to the true label.
pub fn spurious_agreement(spec: &BiasSpec, data: &GroupedDataset) -> f64 {
    let core_dim = spec.core_dim();
    let agree = data
        .examples
        .iter()
        .filter(|e| nearest_prototype(&e.features[core_dim..], spec.num_classes) == e.label)
        .count();
    agree as f64 / data.len().max(1) as f64
}

/// Reads `f0,...,f{d-1},label[,group]`. Without a `group` column every
/// example lands in group 0 and `groups_available` is false.
pub fn load_csv(path: &Path) -> Result<GroupedDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let malformed = |row: usize, msg: String| Error::MalformedRow {
        path: path.to_path_buf(),
        row,
        msg,
    };

    let header = reader
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .clone();
    let label_col = header
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| malformed(1, "missing `label` column".into()))?;
    let group_col = header.iter().position(|h| h == "group");
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&i| i != label_col && Some(i) != group_col)
        .collect();
    for (j, &col) in feature_cols.iter().enumerate() {
        if header[col] != *format!("f{j}") {
            return Err(malformed(
                1,
                format!("expected feature column f{j}, found `{}`", &header[col]),
            ));
        }
    }
    if feature_cols.is_empty() {
        return Err(malformed(1, "no feature columns".into()));
    }

    let mut examples = Vec::new();
    let mut group_ids = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let record = record.map_err(|e| malformed(row, e.to_string()))?;
        if record.len() != header.len() {
            return Err(malformed(
                row,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let features = feature_cols
            .iter()
            .map(|&c| {
                let v: f64 = record[c]
                    .parse()
                    .map_err(|_| malformed(row, format!("bad real `{}`", &record[c])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(malformed(
                        row,
                        format!("non-finite feature `{}`", &record[c]),
                    ))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let label: usize = record[label_col]
            .parse()
            .map_err(|_| malformed(row, format!("bad label `{}`", &record[label_col])))?;
        let group = match group_col {
            Some(c) => record[c]
                .parse()
                .map_err(|_| malformed(row, format!("bad group `{}`", &record[c])))?,
            None => 0,
        };
        examples.push(Example::new(features, label));
        group_ids.push(group);
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    let mut data = GroupedDataset::new(examples, group_ids, Split::Full)?;
    data.groups_available = group_col.is_some();
    Ok(data)
}

/// Stratified split: within every group, `round(train_fraction * n_g)`
/// randomly chosen examples go to train and the rest to test. Both halves
/// keep the original relative order.
pub fn split(
    data: &GroupedDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(GroupedDataset, GroupedDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; data.len()];
    for g in 0..data.num_groups() {
        let mut members: Vec<usize> = (0..data.len())
            .filter(|&i| data.group_ids[i] == g)
            .collect();
        members.shuffle(&mut rng);
        let take = (train_fraction * members.len() as f64).round() as usize;
        for &i in &members[..take] {
            in_train[i] = true;
        }
    }
    let pick = |want: bool, split: Split| GroupedDataset {
        examples: (0..data.len())
            .filter(|&i| in_train[i] == want)
            .map(|i| data.examples[i].clone())
            .collect(),
        group_ids: (0..data.len())
            .filter(|&i| in_train[i] == want)
            .map(|i| data.group_ids[i])
            .collect(),
        split,
        groups_available: data.groups_available,
    };
    Ok((pick(true, Split::Train), pick(false, Split::Test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_spec(strength: f64, size: usize) -> BiasSpec {
        BiasSpec {
            num_groups: 2,
            group_proportions: vec![0.5, 0.5],
            spurious_strength: vec![strength, strength],
            group_noise_scale: vec![1.0, 1.0],
            size,
            ..BiasSpec::default()
        }
    }

    #[test]
    fn full_strength_always_agrees() {
        let spec = binary_spec(1.0, 2000);
        let data = generate_spurious(&spec, 3).unwrap();
        assert_eq!(spurious_agreement(&spec, &data), 1.0);
    }

    #[test]
    fn half_strength_agreement_is_binomial() {
        let spec = binary_spec(0.5, 10_000);
        let data = generate_spurious(&spec, 4).unwrap();
        let rate = spurious_agreement(&spec, &data);
        let sigma = (0.25f64 / 10_000.0).sqrt();
        assert!((rate - 0.5).abs() < 3.0 * sigma, "rate {rate}");
    }

    #[test]
    fn group_counts_are_multinomial() {
        let spec = BiasSpec {
            num_groups: 2,
            group_proportions: vec![0.9, 0.1],
            spurious_strength: vec![0.9, 0.5],
            group_noise_scale: vec![1.0, 2.0],
            size: 1000,
            ..BiasSpec::default()
        };
        let data = generate_spurious(&spec, 5).unwrap();
        let minority = data.group_ids.iter().filter(|&&g| g == 1).count() as f64;
        let sigma = (1000.0f64 * 0.9 * 0.1).sqrt();
        assert!((minority - 100.0).abs() < 3.0 * sigma, "{minority}");
        assert_eq!(data.num_groups(), 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = BiasSpec::default();
        assert_eq!(
            generate_spurious(&spec, 9).unwrap(),
            generate_spurious(&spec, 9).unwrap()
        );
        assert_ne!(
            generate_spurious(&spec, 9).unwrap(),
            generate_spurious(&spec, 10).unwrap()
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = BiasSpec::default();
        s.group_proportions[0] = 0.5;
        assert!(generate_spurious(&s, 0).is_err());
        let mut s = BiasSpec::default();
        s.spurious_strength[1] = 1.5;
        assert!(s.validate().is_err());
        let s = BiasSpec {
            input_dim: 1,
            ..BiasSpec::default()
        };
        assert!(s.validate().is_err());
        let s = BiasSpec {
            group_noise_scale: vec![1.0],
            ..BiasSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn prototypes() {
        assert_eq!(prototype(0, 2, 1), vec![1.0]);
        assert_eq!(prototype(1, 2, 1), vec![-1.0]);
        assert_eq!(prototype(1, 3, 4), vec![-1.0, 1.0, -1.0, -1.0]);
        assert_eq!(nearest_prototype(&[0.2, 0.9, -0.4], 3), 1);
    }

    #[test]
    fn split_is_stratified_and_exhaustive() {
        let data = generate_spurious(&BiasSpec::default(), 1).unwrap();
        let (train, test) = split(&data, 0.7, 2).unwrap();
        assert_eq!(train.len() + test.len(), data.len());
        assert_eq!(train.split, Split::Train);
        for g in 0..data.num_groups() {
            let total = data.group_ids.iter().filter(|&&x| x == g).count() as f64;
            let got = train.group_ids.iter().filter(|&&x| x == g).count() as f64;
            assert!((got - 0.7 * total).abs() <= 1.0);
        }
        let (again, _) = split(&data, 0.7, 2).unwrap();
        assert_eq!(train, again);
        assert!(split(&data, 1.0, 2).is_err());
        assert!(split(&data, 0.0, 2).is_err());
    }
}
