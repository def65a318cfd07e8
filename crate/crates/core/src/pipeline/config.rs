//! Run configuration: a TOML key-value file. Relative paths resolve against
//! the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abduction::LlmConfig;
use crate::error::{Error, Result};
use crate::event::{default_epoch, Schema};
use crate::intensity::{AttentiveConfig, EncoderSpec, TrainConfig, TypeSpace};
use crate::ranker::{RankerConfig, RankerTrainConfig};
use crate::retrieval::{RetrievalConfig, SimKind};
use crate::synthetic::{Rule, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Whole sequences go to train, dev or test.
    Sequence,
    /// Every sequence is cut at `train_end` and `dev_end`.
    Date,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub schema: Schema,
    /// JSONL events; unused when a `[synthetic]` section is present.
    pub events: Option<PathBuf>,
    pub epoch: NaiveDate,
    pub split: SplitMode,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub train_end: Option<NaiveDate>,
    pub dev_end: Option<NaiveDate>,
    /// Queries need at least this many earlier events.
    pub min_history: usize,
    pub max_train_queries: usize,
    pub max_eval_queries: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            schema: Schema::Categorical,
            events: None,
            epoch: default_epoch(),
            split: SplitMode::Sequence,
            dev_fraction: 0.1,
            test_fraction: 0.2,
            train_end: None,
            dev_end: None,
            min_history: 1,
            max_train_queries: 3000,
            max_eval_queries: 2000,
        }
    }
}

/// Synthetic data: the ten-type preset, optionally with custom types and rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub sequences: usize,
    pub seed: Option<u64>,
    pub horizon: Option<f64>,
    pub types: Option<Vec<String>>,
    pub base_rates: Option<Vec<f64>>,
    pub rules: Option<Vec<Rule>>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sequences: 1000,
            seed: None,
            horizon: None,
            types: None,
            base_rates: None,
            rules: None,
        }
    }
}

impl SyntheticConfig {
    pub fn spec(&self, run_seed: u64) -> Result<SyntheticSpec> {
        let mut spec = SyntheticSpec::ten_type_benchmark(self.sequences, self.seed.unwrap_or(run_seed));
        if let Some(h) = self.horizon {
            spec.horizon = h;
        }
        match (&self.types, &self.base_rates, &self.rules) {
            (None, None, None) => {}
            (Some(t), Some(b), Some(r)) => {
                spec.types = t.clone();
                spec.base_rates = b.clone();
                spec.rules = r.clone();
            }
            _ => {
                return Err(Error::Config(
                    "synthetic types, base_rates and rules must be given together".into(),
                ))
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Hawkes,
    Attentive,
}

/// Encoder shape shared by the base model and the ranker sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub time_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub time_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let e = EncoderSpec::new(TypeSpace::Categorical { categories: 1 });
        Self {
            embed_dim: e.embed_dim,
            time_dim: e.time_dim,
            layers: e.layers,
            heads: e.heads,
            key_dim: e.key_dim,
            time_scale: e.time_scale,
        }
    }
}

impl EncoderConfig {
    pub fn spec(&self, space: TypeSpace) -> EncoderSpec {
        EncoderSpec {
            space,
            embed_dim: self.embed_dim,
            time_dim: self.time_dim,
            layers: self.layers,
            heads: self.heads,
            key_dim: self.key_dim,
            time_scale: self.time_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub kind: BaseKind,
    pub encoder: EncoderConfig,
    pub survival_negatives: usize,
    pub enumerate_limit: u64,
    pub bound_lookahead: f64,
    pub init_scale: f64,
    pub train: TrainConfig,
}

impl Default for BaseConfig {
    fn default() -> Self {
        let a = AttentiveConfig::new(TypeSpace::Categorical { categories: 1 });
        Self {
            kind: BaseKind::Attentive,
            encoder: EncoderConfig::default(),
            survival_negatives: a.survival_negatives,
            enumerate_limit: a.enumerate_limit,
            bound_lookahead: a.bound_lookahead,
            init_scale: a.init_scale,
            train: TrainConfig::default(),
        }
    }
}

impl BaseConfig {
    pub fn attentive(&self, space: TypeSpace) -> AttentiveConfig {
        AttentiveConfig {
            encoder: self.encoder.spec(space),
            survival_negatives: self.survival_negatives,
            enumerate_limit: self.enumerate_limit,
            bound_lookahead: self.bound_lookahead,
            init_scale: self.init_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposeConfig {
    /// Proposals per query.
    pub m: usize,
    /// Type sub-proposals per time proposal.
    pub m_prime: usize,
    /// Negatives per ranker training item.
    pub negatives: usize,
    /// Noise times per ranker training item.
    pub noise_times: usize,
    /// Dev/test queries that also get next-time proposals.
    pub time_queries: usize,
    pub mbr_samples: usize,
}

impl Default for ProposeConfig {
    fn default() -> Self {
        Self {
            m: 5,
            m_prime: 5,
            negatives: 5,
            noise_times: 1,
            time_queries: 50,
            mbr_samples: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Answers from the synthetic rule table.
    Oracle,
    /// Replays one fixture file for every prompt.
    Mock,
    /// Chat-completions endpoint from `[llm]`.
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbduceConfig {
    pub backend: BackendKind,
    /// Prompt template TOML; the built-in template for the schema when unset.
    pub template: Option<PathBuf>,
    pub demonstrations: Option<PathBuf>,
    /// Rule table for the oracle; the synthetic run's own table when unset.
    pub rules: Option<PathBuf>,
    pub fixture: Option<PathBuf>,
    /// Number the type vocabulary in the prompt.
    pub list_vocabulary: bool,
}

impl Default for AbduceConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Oracle,
            template: None,
            demonstrations: None,
            rules: None,
            fixture: None,
            list_vocabulary: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieveConfig {
    pub sim: SimKind,
    /// Matches kept per hypothesis; 2 for structured and 4 for categorical data when unset.
    pub per_cause: Option<usize>,
    pub total_cap: Option<usize>,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        Self {
            sim: SimKind::Edit,
            per_cause: None,
            total_cap: None,
        }
    }
}

impl RetrieveConfig {
    pub fn retrieval(&self, schema: Schema) -> RetrievalConfig {
        let mut r = RetrievalConfig::for_schema(schema);
        if let Some(d) = self.per_cause {
            r.per_cause = d;
        }
        r.total_cap = self.total_cap;
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerSection {
    pub encoder: EncoderConfig,
    pub hidden: usize,
    pub init_scale: f64,
    pub train: RankerTrainConfig,
}

impl Default for RankerSection {
    fn default() -> Self {
        let r = RankerConfig::new(TypeSpace::Categorical { categories: 1 });
        Self {
            encoder: EncoderConfig {
                layers: r.encoder.layers,
                ..EncoderConfig::default()
            },
            hidden: r.hidden,
            init_scale: r.init_scale,
            train: RankerTrainConfig::default(),
        }
    }
}

impl RankerSection {
    pub fn ranker(&self, space: TypeSpace, seed: u64) -> RankerConfig {
        RankerConfig {
            encoder: self.encoder.spec(space),
            hidden: self.hidden,
            init_scale: self.init_scale,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub synthetic: Option<SyntheticConfig>,
    pub base: BaseConfig,
    pub propose: ProposeConfig,
    pub abduce: AbduceConfig,
    pub llm: LlmConfig,
    pub retrieve: RetrieveConfig,
    pub ranker: RankerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            data: DataConfig::default(),
            synthetic: None,
            base: BaseConfig::default(),
            propose: ProposeConfig::default(),
            abduce: AbduceConfig::default(),
            llm: LlmConfig::default(),
            retrieve: RetrieveConfig::default(),
            ranker: RankerSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.resolve(base_dir);
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, dir).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = dir.join(&*path);
                }
            }
        };
        fix(&mut self.out);
        fix(&mut self.data.events);
        fix(&mut self.abduce.template);
        fix(&mut self.abduce.demonstrations);
        fix(&mut self.abduce.rules);
        fix(&mut self.abduce.fixture);
        fix(&mut self.llm.cache_dir);
    }

    /// Checks values and that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        let exists = |what: &str, p: &Option<PathBuf>| -> Result<()> {
            match p {
                Some(p) if !p.exists() => Err(Error::Config(format!("{what} {} does not exist", p.display()))),
                _ => Ok(()),
            }
        };
        match &self.synthetic {
            Some(s) => {
                s.spec(self.seed)?;
                if self.data.schema != Schema::Categorical {
                    return Err(Error::Config("synthetic data is categorical".into()));
                }
            }
            None if self.data.events.is_none() => {
                return Err(Error::Config("set data.events or add a [synthetic] section".into()))
            }
            None => exists("data.events", &self.data.events)?,
        }
        if self.data.split == SplitMode::Date && (self.data.train_end.is_none() || self.data.dev_end.is_none()) {
            return Err(Error::Config("date split needs data.train_end and data.dev_end".into()));
        }
        exists("abduce.template", &self.abduce.template)?;
        exists("abduce.demonstrations", &self.abduce.demonstrations)?;
        exists("abduce.rules", &self.abduce.rules)?;
        exists("abduce.fixture", &self.abduce.fixture)?;
        match self.abduce.backend {
            BackendKind::Oracle if self.synthetic.is_none() && self.abduce.rules.is_none() => {
                return Err(Error::Config("the oracle backend needs abduce.rules or synthetic data".into()))
            }
            BackendKind::Mock if self.abduce.fixture.is_none() => {
                return Err(Error::Config("the mock backend needs abduce.fixture".into()))
            }
            _ => {}
        }
        let p = &self.propose;
        if p.m == 0 || p.m_prime == 0 || p.negatives == 0 || p.mbr_samples == 0 {
            return Err(Error::Config("propose.m, m_prime, negatives and mbr_samples must be >= 1".into()));
        }
        if self.retrieve.per_cause == Some(0) {
            return Err(Error::Config("retrieve.per_cause must be >= 1".into()));
        }
        self.llm.validate()
    }

    /// Hex SHA-256 of the canonical JSON form, recorded in the run manifest.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory: set `out` or pass --out".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_synthetic_config() {
        let c = RunConfig::from_toml_str("out = \"run\"\n[synthetic]\nsequences = 20\n", Path::new("/tmp/x")).unwrap();
        c.validate().unwrap();
        assert_eq!(c.out.as_deref(), Some(Path::new("/tmp/x/run")));
        assert_eq!(c.propose.m, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("sed = 3\n", Path::new(".")).is_err());
    }

    #[test]
    fn missing_input_reported() {
        let c = RunConfig::from_toml_str("[data]\nevents = \"nope.jsonl\"\n", Path::new("/nonexistent")).unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("nope.jsonl"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::default().hash());
    }
}
