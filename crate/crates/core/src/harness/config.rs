//! Training configuration and the flat `key = value` config file format.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Unknown keys are rejected so typos do not pass silently.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::affinity::{AffinityConfig, TieBreak, WeightScale};
use crate::baselines::JttConfig;
use crate::datagen::BiasSpec;
use crate::diffmodel::{Activation, ModelKind, ModelSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Erm,
    Jtt,
    ReLoss,
    ReSat,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Jtt => "jtt",
            Method::ReLoss => "re-loss",
            Method::ReSat => "re-sat",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "erm" => Ok(Method::Erm),
            "jtt" => Ok(Method::Jtt),
            "re-loss" | "reloss" => Ok(Method::ReLoss),
            "re-sat" | "resat" => Ok(Method::ReSat),
            _ => Err(format!("unknown method `{s}`")),
        }
    }
}

/// Optimizer used for the outer (real) parameter update. The lookahead
/// inside the affinity test is always a plain gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterOptimizer {
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
        eps: f64,
    },
}

impl OuterOptimizer {
    pub fn adamw_default() -> Self {
        OuterOptimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.1,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub model: ModelSpec,
    pub affinity: AffinityConfig,
    pub jtt: JttConfig,
    pub outer_optimizer: OuterOptimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: SGD at 1e-2, batch 32, 30 epochs, K = 4, s = 4.
    pub fn new(method: Method, model: ModelSpec) -> Self {
        TrainConfig {
            method,
            model,
            affinity: AffinityConfig::default(),
            jtt: JttConfig::default(),
            outer_optimizer: OuterOptimizer::Sgd,
            epochs: 30,
            batch_size: 32,
            shuffle_seed: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.affinity.learning_rate
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.affinity.validate()?;
        self.jtt.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.method == Method::ReSat && self.affinity.k_conflicting > self.batch_size {
            return Err(Error::InvalidK {
                k: self.affinity.k_conflicting,
                n: self.batch_size,
            });
        }
        if let OuterOptimizer::AdamW {
            beta1,
            beta2,
            weight_decay,
            eps,
        } = self.outer_optimizer
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::Config("adamw betas must lie in [0, 1)".into()));
            }
            if weight_decay.is_nan() || weight_decay < 0.0 || eps.is_nan() || eps <= 0.0 {
                return Err(Error::Config(
                    "adamw weight decay must be >= 0 and eps > 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Row label used in reports, e.g. `re-sat(K=4)`.
    pub fn label(&self) -> String {
        match self.method {
            Method::ReSat => format!("re-sat(K={})", self.affinity.k_conflicting),
            m => m.name().to_string(),
        }
    }

    /// Builds a config from a parsed file. `input_dim` and `num_classes`
    /// fill in model dimensions the file leaves out.
    pub fn from_key_values(kv: &KeyValues, input_dim: usize, num_classes: usize) -> Result<Self> {
        let kind = match kv.get::<String>("model")?.as_deref() {
            None | Some("logistic") | Some("logistic-regression") => ModelKind::LogisticRegression,
            Some("mlp") => ModelKind::Mlp,
            Some(other) => return Err(kv.invalid("model", format!("unknown model `{other}`"))),
        };
        let activation = match kv.get::<String>("activation")?.as_deref() {
            None | Some("tanh") => Activation::Tanh,
            Some("relu") => Activation::Relu,
            Some(other) => {
                return Err(kv.invalid("activation", format!("unknown activation `{other}`")))
            }
        };
        let hidden: Vec<usize> = kv.get_list("hidden")?.unwrap_or_default();
        let model = ModelSpec {
            kind,
            input_dim: kv.get("input_dim")?.unwrap_or(input_dim),
            hidden_dims: if kind == ModelKind::Mlp && hidden.is_empty() {
                vec![8]
            } else {
                hidden
            },
            num_classes: kv.get("num_classes")?.unwrap_or(num_classes),
            activation,
            loss: crate::diffmodel::LossKind::CrossEntropy,
        };

        let method = match kv.get::<String>("method")? {
            Some(m) => m.parse().map_err(|e| kv.invalid("method", e))?,
            None => Method::ReSat,
        };
        let mut config = TrainConfig::new(method, model);
        let a = &mut config.affinity;
        a.k_conflicting = kv.get("k")?.unwrap_or(a.k_conflicting);
        a.rank_sharpness = kv.get("s")?.unwrap_or(a.rank_sharpness);
        a.learning_rate = kv.get("learning_rate")?.unwrap_or(a.learning_rate);
        a.epsilon_loss_floor = kv.get("epsilon")?.unwrap_or(a.epsilon_loss_floor);
        a.weight_scale = match kv.get::<String>("weight_scale")?.as_deref() {
            None | Some("mean-one") => WeightScale::MeanOne,
            Some("verbatim") => WeightScale::Verbatim,
            Some(other) => {
                return Err(kv.invalid("weight_scale", format!("unknown scale `{other}`")))
            }
        };
        a.tie_break = match kv.get::<String>("tie_break")?.as_deref() {
            None | Some("lowest-index") => TieBreak::LowestIndex,
            Some(other) => {
                return Err(kv.invalid("tie_break", format!("unknown tie break `{other}`")))
            }
        };
        config.jtt.upweight = kv.get("jtt_upweight")?.unwrap_or(config.jtt.upweight);
        config.jtt.identification_epoch = kv
            .get("jtt_identification_epoch")?
            .unwrap_or(config.jtt.identification_epoch);
        config.outer_optimizer = match kv.get::<String>("optimizer")?.as_deref() {
            None | Some("sgd") => OuterOptimizer::Sgd,
            Some("adamw") => {
                let OuterOptimizer::AdamW {
                    beta1,
                    beta2,
                    weight_decay,
                    eps,
                } = OuterOptimizer::adamw_default()
                else {
                    unreachable!()
                };
                OuterOptimizer::AdamW {
                    beta1: kv.get("adamw_beta1")?.unwrap_or(beta1),
                    beta2: kv.get("adamw_beta2")?.unwrap_or(beta2),
                    weight_decay: kv.get("weight_decay")?.unwrap_or(weight_decay),
                    eps: kv.get("adamw_eps")?.unwrap_or(eps),
                }
            }
            Some(other) => {
                return Err(kv.invalid("optimizer", format!("unknown optimizer `{other}`")))
            }
        };
        config.epochs = kv.get("epochs")?.unwrap_or(config.epochs);
        config.batch_size = kv.get("batch_size")?.unwrap_or(config.batch_size);
        config.shuffle_seed = kv.get("shuffle_seed")?.unwrap_or(config.shuffle_seed);
        kv.reject_unused(TRAIN_KEYS)?;
        config.validate()?;
        Ok(config)
    }
}

/// Keys accepted in a training config file.
pub const TRAIN_KEYS: &[&str] = &[
    "method",
    "model",
    "hidden",
    "activation",
    "input_dim",
    "num_classes",
    "k",
    "s",
    "learning_rate",
    "epsilon",
    "weight_scale",
    "tie_break",
    "jtt_upweight",
    "jtt_identification_epoch",
    "optimizer",
    "adamw_beta1",
    "adamw_beta2",
    "weight_decay",
    "adamw_eps",
    "epochs",
    "batch_size",
    "shuffle_seed",
];

/// Keys accepted in a dataset spec file.
pub const BIAS_KEYS: &[&str] = &[
    "num_groups",
    "group_proportions",
    "spurious_strength",
    "core_noise",
    "group_noise_scale",
    "spurious_noise",
    "spurious_scale",
    "input_dim",
    "num_classes",
    "size",
];

pub fn bias_spec_from_key_values(kv: &KeyValues) -> Result<BiasSpec> {
    let d = BiasSpec::default();
    let spec = BiasSpec {
        num_groups: kv.get("num_groups")?.unwrap_or(d.num_groups),
        group_proportions: kv
            .get_list("group_proportions")?
            .unwrap_or(d.group_proportions),
        spurious_strength: kv
            .get_list("spurious_strength")?
            .unwrap_or(d.spurious_strength),
        core_noise: kv.get("core_noise")?.unwrap_or(d.core_noise),
        group_noise_scale: kv
            .get_list("group_noise_scale")?
            .unwrap_or(d.group_noise_scale),
        spurious_noise: kv.get("spurious_noise")?.unwrap_or(d.spurious_noise),
        spurious_scale: kv.get("spurious_scale")?.unwrap_or(d.spurious_scale),
        input_dim: kv.get("input_dim")?.unwrap_or(d.input_dim),
        num_classes: kv.get("num_classes")?.unwrap_or(d.num_classes),
        size: kv.get("size")?.unwrap_or(d.size),
    };
    kv.reject_unused(BIAS_KEYS)?;
    spec.validate()?;
    Ok(spec)
}

/// Parsed `key = value` file.
#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    read: RefCell<BTreeSet<String>>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                )));
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries
                .insert(key.clone(), (i + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
        }
        Ok(KeyValues {
            entries,
            read: RefCell::default(),
        })
    }

    fn invalid(&self, key: &str, msg: impl Display) -> Error {
        let line = self.entries.get(key).map_or(0, |(l, _)| *l);
        Error::Config(format!("line {line}: `{key}`: {msg}"))
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.read.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| self.invalid(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|e| self.invalid(key, format!("cannot parse `{s}`: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn reject_unused(&self, allowed: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_train_config() {
        let text = "\
# desk-scale run
method = re-sat
model = mlp
hidden = 8, 4
activation = relu
k = 2
s = 4
learning_rate = 0.05
weight_scale = verbatim
optimizer = adamw
weight_decay = 0.1
epochs = 3
batch_size = 16
shuffle_seed = 9
";
        let kv = KeyValues::parse(text).unwrap();
        let c = TrainConfig::from_key_values(&kv, 2, 2).unwrap();
        assert_eq!(c.method, Method::ReSat);
        assert_eq!(c.model.hidden_dims, vec![8, 4]);
        assert_eq!(c.model.activation, Activation::Relu);
        assert_eq!(c.affinity.k_conflicting, 2);
        assert_eq!(c.affinity.weight_scale, WeightScale::Verbatim);
        assert_eq!(c.learning_rate(), 0.05);
        assert!(
            matches!(c.outer_optimizer, OuterOptimizer::AdamW { weight_decay, .. } if weight_decay == 0.1)
        );
        assert_eq!((c.epochs, c.batch_size, c.shuffle_seed), (3, 16, 9));
        assert_eq!(c.label(), "re-sat(K=2)");
    }

    #[test]
    fn defaults_and_errors() {
        let c = TrainConfig::from_key_values(&KeyValues::parse("").unwrap(), 3, 4).unwrap();
        assert_eq!(c.model, ModelSpec::logistic(3, 4));
        assert_eq!(c.epochs, 30);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.learning_rate(), 1e-2);
        assert_eq!(c.outer_optimizer, OuterOptimizer::Sgd);

        for bad in [
            "bogus = 1",
            "k = two",
            "method = lff",
            "no equals sign",
            "k = 1\nk = 2",
            "k = 64\nbatch_size = 32",
        ] {
            let err = KeyValues::parse(bad)
                .and_then(|kv| TrainConfig::from_key_values(&kv, 2, 2))
                .unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad}: {err}");
        }
    }

    #[test]
    fn bias_spec_keys() {
        let kv = KeyValues::parse(
            "num_groups = 2\ngroup_proportions = 0.7,0.3\nspurious_strength = 0.9, 0.2\ngroup_noise_scale = 1,2\nsize = 50",
        )
        .unwrap();
        let s = bias_spec_from_key_values(&kv).unwrap();
        assert_eq!(s.group_proportions, vec![0.7, 0.3]);
        assert_eq!(s.size, 50);
        let kv = KeyValues::parse("num_groups = 2").unwrap();
        assert!(bias_spec_from_key_values(&kv).is_err());
        assert_eq!(
            bias_spec_from_key_values(&KeyValues::parse("").unwrap()).unwrap(),
            BiasSpec::default()
        );
    }
}
