//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregationConfig, Scheme};
use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::model::train::TrainConfig;
use crate::model::LossWeights;
use crate::optim::AdamWConfig;
use crate::router::Strategy;

/// Keys a config file must spell out; everything else has a default.
pub const REQUIRED_KEYS: [&str; 5] = [
    "seed",
    "model.n_specific",
    "router.strategy",
    "aggregation.scheme",
    "data.source",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_vocab")]
    pub vocab_size: usize,
    #[serde(default = "d_seq")]
    pub max_seq_len: usize,
    #[serde(default = "d_dim")]
    pub d_model: usize,
    #[serde(default = "d_layers")]
    pub n_layers: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    pub n_specific: usize,
}

fn d_vocab() -> usize {
    64
}
fn d_seq() -> usize {
    64
}
fn d_dim() -> usize {
    64
}
fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    4
}

impl ModelSection {
    pub fn lm_config(&self, has_lm_head: bool) -> LmConfig {
        LmConfig {
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            has_lm_head,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterSection {
    pub strategy: Strategy,
    #[serde(default = "d_nu")]
    pub nu: f64,
    #[serde(default = "d_temp")]
    pub temperature: f64,
    /// Projection dimension for k-means routing.
    #[serde(default = "d_mds")]
    pub mds_dim: usize,
}

fn d_nu() -> f64 {
    0.25
}
fn d_temp() -> f64 {
    1.0
}
fn d_mds() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationSection {
    pub scheme: Scheme,
    /// Required for the logit- and prob-space schemes.
    pub w_inv: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            epsilon: w.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 3,
            batch_size: 16,
        }
    }
}

/// Pretraining of the shared base model on a rule-free corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub corpus_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            corpus_size: 2000,
            epochs: 1,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synth,
    Jsonl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(default)]
    pub synth: SynthConfig,
    /// Second training phase; presence switches training to sequential.
    pub phase_b: Option<SynthConfig>,
    /// JSONL with training instances (`source = "jsonl"`).
    pub train_path: Option<PathBuf>,
    /// JSONL files with evaluation instances (`source = "jsonl"`).
    #[serde(default)]
    pub eval_paths: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub router: RouterSection,
    pub aggregation: AggregationSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    pub data: DataSection,
}

fn lookup<'a>(v: &'a toml::Value, dotted: &str) -> Option<&'a toml::Value> {
    dotted.split('.').try_fold(v, |node, key| node.get(key))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let raw: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for key in REQUIRED_KEYS {
            if lookup(&raw, key).is_none() {
                return Err(Error::Config(format!("missing required key `{key}`")));
            }
        }
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.lm_config(true).validate()?;
        if self.model.n_specific == 0 {
            return Err(Error::Config("model.n_specific must be at least 1".into()));
        }
        if self.router.mds_dim == 0 || self.router.mds_dim > self.model.d_model {
            return Err(Error::Config(format!(
                "router.mds_dim must be in 1..={}",
                self.model.d_model
            )));
        }
        if !(self.router.temperature > 0.0) {
            return Err(Error::Config("router.temperature must be positive".into()));
        }
        if self.aggregation.scheme != Scheme::SharedHead && self.aggregation.w_inv.is_none() {
            return Err(Error::Config(
                "missing required key `aggregation.w_inv`".into(),
            ));
        }
        self.aggregation_config().validate()?;
        self.loss_weights().validate()?;
        self.train_config().validate()?;
        if self.train.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if self.data.source == DataSource::Jsonl && self.data.train_path.is_none() {
            return Err(Error::Config(
                "missing required key `data.train_path`".into(),
            ));
        }
        Ok(())
    }

    pub fn aggregation_config(&self) -> AggregationConfig {
        AggregationConfig {
            scheme: self.aggregation.scheme,
            w_inv: self
                .aggregation
                .w_inv
                .unwrap_or(AggregationConfig::default().w_inv),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            gamma: self.loss.gamma,
            epsilon: self.loss.epsilon,
            nu: self.router.nu,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            seed: self.seed,
            optimizer: AdamWConfig {
                lr: self.pretrain.lr,
                ..self.optimizer.clone()
            },
        }
    }

    /// The synthetic-data config with the run seed applied.
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.data.synth.clone()
        }
    }

    /// Desk-scale defaults with the given strategy and specific-module count.
    pub fn desk(strategy: Strategy, n_specific: usize) -> RunConfig {
        RunConfig {
            seed: crate::rng::DEFAULT_SEED,
            model: ModelSection {
                vocab_size: d_vocab(),
                max_seq_len: d_seq(),
                d_model: d_dim(),
                n_layers: d_layers(),
                n_heads: d_heads(),
                n_specific,
            },
            router: RouterSection {
                strategy,
                nu: d_nu(),
                temperature: d_temp(),
                mds_dim: d_mds(),
            },
            aggregation: AggregationSection {
                scheme: Scheme::SharedHead,
                w_inv: None,
            },
            loss: LossSection::default(),
            optimizer: AdamWConfig::default(),
            train: TrainSection::default(),
            pretrain: PretrainSection::default(),
            data: DataSection {
                source: DataSource::Synth,
                synth: SynthConfig::default(),
                phase_b: None,
                train_path: None,
                eval_paths: Vec::new(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
[model]
n_specific = 2
[router]
strategy = "kmeans"
[aggregation]
scheme = "shared-head"
[data]
source = "synth"
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.loss_weights(), LossWeights::default());
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.synth().seed, 7);
    }

    #[test]
    fn missing_key_is_named() {
        let text = MINIMAL.replace("scheme = \"shared-head\"", "");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("aggregation.scheme"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let text = MINIMAL.replace("n_specific = 2", "n_specific = 2\nwidth = 3");
        assert!(matches!(RunConfig::parse(&text), Err(Error::Config(_))));
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::desk(Strategy::Vq, 2);
        let again = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn non_shared_scheme_needs_weight() {
        let text = MINIMAL.replace("shared-head", "logit-space");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("aggregation.w_inv"), "{err}");
    }
}
