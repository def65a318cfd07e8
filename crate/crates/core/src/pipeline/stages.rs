//! File-backed pipeline stages. Each stage reads its inputs from the run
//! directory, writes its outputs there, and fails with the name of the stage
//! to run first when an input is missing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{BackendKind, BaseKind, RunConfig, SplitMode};
use super::report;
use super::tasks::{
    effect_prompt, effects_for, predict, propose_split, rank_queries, retrieve_all, split_sequences, train_items,
    EffectKey, EvidenceIndex, EvidenceRecord, PredictionRecord, ProposalRecord, ProposeSettings, QueryKind, Split,
};
use crate::abduction::{
    cache_key, load_demonstrations, parse_causes, AbductionClient, CauseHypothesis, ChatBackend, MockBackend,
    PromptTemplate,
};
use crate::error::{Error, Result};
use crate::event::{load_dataset, split_by_date, Dataset, Schema, TypeKey};
use crate::intensity::{AttentiveModel, BaseModel, HawkesModel, IntensityModel, TypeSpace};
use crate::metrics::{report as metric_report, MetricKind, MetricReport};
use crate::ranker::{train_ranker, Ranker};
use crate::retrieval::{HashedNgramEmbedder, SimKind, Similarity};
use crate::synthetic::{generate_synthetic, OracleBackend, RuleTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    TrainBase,
    Propose,
    Abduce,
    Retrieve,
    TrainRanker,
    Predict,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::TrainBase,
        Stage::Propose,
        Stage::Abduce,
        Stage::Retrieve,
        Stage::TrainRanker,
        Stage::Predict,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainBase => "train-base",
            Stage::Propose => "propose",
            Stage::Abduce => "abduce",
            Stage::Retrieve => "retrieve",
            Stage::TrainRanker => "train-ranker",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Bumped whenever a stage's output format changes.
    pub fn version(self) -> u32 {
        1
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Where each artifact lives inside the run directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn events(&self) -> PathBuf {
        self.root.join("data/events.jsonl")
    }
    pub fn rules(&self) -> PathBuf {
        self.root.join("data/rules.json")
    }
    pub fn base_model(&self) -> PathBuf {
        self.root.join("base/model.json")
    }
    pub fn base_log(&self) -> PathBuf {
        self.root.join("base/train_log.csv")
    }
    pub fn proposals(&self) -> PathBuf {
        self.root.join("proposals.jsonl")
    }
    pub fn hypotheses(&self) -> PathBuf {
        self.root.join("hypotheses.jsonl")
    }
    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }
    pub fn evidence(&self) -> PathBuf {
        self.root.join("evidence.jsonl")
    }
    pub fn ranker(&self) -> PathBuf {
        self.root.join("ranker/model.json")
    }
    pub fn ranker_log(&self) -> PathBuf {
        self.root.join("ranker/train_log.csv")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, u32>,
}

impl Manifest {
    fn for_config(config: &RunConfig) -> Self {
        Self {
            config_hash: config.hash(),
            seed: config.seed,
            stages: Stage::ALL.iter().map(|s| (s.name().to_string(), s.version())).collect(),
        }
    }
}

/// Writes the manifest on first use and afterwards checks that the run
/// directory belongs to this exact configuration.
pub fn ensure_manifest(config: &RunConfig, layout: &Layout) -> Result<Manifest> {
    let expected = Manifest::for_config(config);
    let path = layout.manifest();
    if path.exists() {
        let found: Manifest = read_json(&path, "train-base")?;
        if found != expected {
            return Err(Error::Config(format!(
                "{} was written for config {} (seed {}); this run is config {} (seed {}). Use a fresh output directory",
                path.display(),
                found.config_hash,
                found.seed,
                expected.config_hash,
                expected.seed
            )));
        }
        return Ok(found);
    }
    write_text(&path, &(serde_json::to_string_pretty(&expected)? + "\n"))?;
    Ok(expected)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage: stage.into(),
        })
    }
}

fn read_json<T: DeserializeOwned>(path: &Path, stage: &str) -> Result<T> {
    require(path, stage)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it)?);
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, stage: &str) -> Result<Vec<T>> {
    require(path, stage)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// The dataset and, for synthetic runs, its rule table.
pub fn load_data(config: &RunConfig) -> Result<(Dataset, Option<RuleTable>)> {
    match &config.synthetic {
        Some(s) => {
            let (d, r) = generate_synthetic(&s.spec(config.seed)?)?;
            Ok((d, Some(r)))
        }
        None => {
            let path = config
                .data
                .events
                .as_ref()
                .ok_or_else(|| Error::Config("data.events is not set".into()))?;
            Ok((load_dataset(path, config.data.schema, config.data.epoch)?, None))
        }
    }
}

pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, s: Split) -> &Dataset {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

pub fn load_splits(config: &RunConfig) -> Result<(Splits, Option<RuleTable>)> {
    let (data, rules) = load_data(config)?;
    let (train, dev, test) = match config.data.split {
        SplitMode::Sequence => split_sequences(&data, config.data.dev_fraction, config.data.test_fraction)?,
        SplitMode::Date => {
            let (a, b) = config
                .data
                .train_end
                .zip(config.data.dev_end)
                .ok_or_else(|| Error::Config("date split needs data.train_end and data.dev_end".into()))?;
            split_by_date(&data, a, b)?
        }
    };
    Ok((Splits { train, dev, test }, rules))
}

pub fn type_space(d: &Dataset) -> TypeSpace {
    match d.schema {
        Schema::Structured => TypeSpace::Structured {
            entities: d.vocab.entities.len() as u32,
            predicates: d.vocab.predicates.len() as u32,
        },
        Schema::Categorical => TypeSpace::Categorical {
            categories: d.vocab.categories.len() as u32,
        },
    }
}

/// What a stage did, for the CLI and tests.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageSummary {
    pub artifacts: Vec<PathBuf>,
    /// Requests that reached the chat backend (abduce only).
    pub backend_calls: Option<usize>,
    pub notes: Vec<String>,
}

pub fn run_stage(config: &RunConfig, stage: Stage) -> Result<StageSummary> {
    config.validate()?;
    let layout = Layout::new(config.out_dir()?);
    ensure_manifest(config, &layout)?;
    match stage {
        Stage::TrainBase => train_base(config, &layout),
        Stage::Propose => propose(config, &layout),
        Stage::Abduce => abduce(config, &layout),
        Stage::Retrieve => retrieve(config, &layout),
        Stage::TrainRanker => train_ranker_stage(config, &layout),
        Stage::Predict => predict_stage(config, &layout),
        Stage::Evaluate => evaluate(config, &layout),
        Stage::Report => report_stage(&layout),
    }
}

/// Runs every stage in order.
pub fn run_all(config: &RunConfig) -> Result<Vec<(Stage, StageSummary)>> {
    Stage::ALL
        .into_iter()
        .map(|s| Ok((s, run_stage(config, s).map_err(|e| scoped(s, e))?)))
        .collect()
}

fn scoped(stage: Stage, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("[{stage}] {m}")),
        other => other,
    }
}

fn train_base(config: &RunConfig, layout: &Layout) -> Result<StageSummary> {
    let (splits, rules) = load_splits(config)?;
    let mut summary = StageSummary::default();
    if let Some(r) = &rules {
        let (all, _) = load_data(config)?;
        ensure_parent(&layout.events())?;
        all.write_jsonl(&layout.events())?;
        r.write_json(&layout.rules())?;
        summary.artifacts.extend([layout.events(), layout.rules()]);
    }
    let space = type_space(&splits.train);
    let train = splits.train.timelines();
    let dev = splits.dev.timelines();
    let events: usize = train.iter().map(|t| t.observed().count()).sum();
    let span: f64 = train.iter().map(|t| t.window_end - t.window_start).sum();
    let rate = (events as f64 / span.max(f64::MIN_POSITIVE)).max(1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = match config.base.kind {
        BaseKind::Attentive => BaseModel::Attentive(AttentiveModel::new(config.base.attentive(space), rate, &mut rng)?),
        BaseKind::Hawkes => {
            let k = match space {
                TypeSpace::Categorical { categories } => categories as usize,
                TypeSpace::Structured { .. } => {
                    return Err(Error::Config("the Hawkes base model needs categorical data".into()))
                }
            };
            BaseModel::Hawkes(HawkesModel::init(k, rate, &mut rng)?)
        }
    };
    let (model, log) = model.train(&train, &dev, &config.base.train)?;
    ensure_parent(&layout.base_model())?;
    model.save(&layout.base_model())?;
    log.write_csv(&layout.base_log())?;
    summary.notes.push(format!(
        "best epoch {} of {}",
        log.best_epoch,
        log.records.len().saturating_sub(1)
    ));
    summary.artifacts.extend([layout.base_model(), layout.base_log()]);
    Ok(summary)
}

fn propose(config: &RunConfig, layout: &Layout) -> Result<StageSummary> {
    require(&layout.base_model(), "train-base")?;
    let model = BaseModel::load(&layout.base_model())?;
    let (splits, _) = load_splits(config)?;
    let p = &config.propose;
    let mut all = Vec::new();
    for split in [Split::Train, Split::Dev, Split::Test] {
        let settings = ProposeSettings {
            m: p.m,
            m_prime: p.m_prime,
            negatives: p.negatives,
            noise_times: p.noise_times,
            time_queries: p.time_queries,
            mbr_samples: p.mbr_samples,
            min_history: config.data.min_history,
            max_queries: if split == Split::Train {
                config.data.max_train_queries
            } else {
                config.data.max_eval_queries
            },
            seed: config.seed,
        };
        all.extend(propose_split(&model, splits.get(split), split, &settings)?);
    }
    write_jsonl(&layout.proposals(), &all)?;
    Ok(StageSummary {
        artifacts: vec![layout.proposals()],
        notes: vec![format!("{} proposal records", all.len())],
        ..Default::default()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub split: Split,
    pub key: TypeKey,
    pub date: chrono::NaiveDate,
    pub effect: String,
    pub prompt_sha256: String,
    pub causes: Vec<CauseHypothesis>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

pub fn load_template(config: &RunConfig, dataset: &Dataset) -> Result<PromptTemplate> {
    let mut t = match &config.abduce.template {
        Some(p) => PromptTemplate::load(p)?,
        None => PromptTemplate::from_toml_str(match dataset.schema {
            Schema::Structured => include_str!("../../assets/templates/structured.toml"),
            Schema::Categorical => include_str!("../../assets/templates/categorical.toml"),
        })?,
    };
    if t.schema != dataset.schema {
        return Err(Error::Config(format!(
            "prompt template is for {} data but the dataset is {}",
            t.schema, dataset.schema
        )));
    }
    if let Some(d) = &config.abduce.demonstrations {
        t = t.with_demonstrations(load_demonstrations(d)?)?;
    }
    if config.abduce.list_vocabulary {
        let names = match dataset.schema {
            Schema::Structured => dataset.vocab.predicates.clone(),
            Schema::Categorical => dataset.vocab.categories.clone(),
        };
        t = t.with_vocabulary(names);
    }
    Ok(t)
}

fn backend(config: &RunConfig, rules: Option<RuleTable>) -> Result<Box<dyn ChatBackend>> {
    Ok(match config.abduce.backend {
        BackendKind::Oracle => match (&config.abduce.rules, rules) {
            (Some(p), _) => Box::new(OracleBackend::load(p)?),
            (None, Some(r)) => Box::new(OracleBackend::new(r)),
            (None, None) => return Err(Error::Config("the oracle backend needs a rule table".into())),
        },
        BackendKind::Mock => {
            let p = config
                .abduce
                .fixture
                .as_ref()
                .ok_or_else(|| Error::Config("the mock backend needs abduce.fixture".into()))?;
            Box::new(MockBackend::from_fixture(p)?)
        }
        #[cfg(feature = "remote")]
        BackendKind::Http => Box::new(crate::abduction::HttpBackend::new(&config.llm)),
        #[cfg(not(feature = "remote"))]
        BackendKind::Http => return Err(Error::Config("built without the `remote` feature".into())),
    })
}

fn by_split(records: Vec<ProposalRecord>) -> BTreeMap<Split, Vec<ProposalRecord>> {
    let mut out: BTreeMap<Split, Vec<ProposalRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.split).or_default().push(r);
    }
    out
}

fn abduce(config: &RunConfig, layout: &Layout) -> Result<StageSummary> {
    let proposals: Vec<ProposalRecord> = read_jsonl(&layout.proposals(), "propose")?;
    let (splits, rules) = load_splits(config)?;
    let template = load_template(config, &splits.train)?;
    let mut llm = config.llm.clone();
    if llm.cache_dir.is_none() {
        llm.cache_dir = Some(layout.cache());
    }
    let client = AbductionClient::new(backend(config, rules)?, &llm)?;
    let mut out = Vec::new();
    for (split, recs) in by_split(proposals) {
        let d = splits.get(split);
        let effects: Vec<EffectKey> = effects_for(d, &recs).into_iter().collect();
        let prompts = effects
            .iter()
            .map(|e| effect_prompt(&template, d, *e))
            .collect::<Result<Vec<_>>>()?;
        let completions = client.generate_all(&prompts);
        for ((e, prompt), completion) in effects.iter().zip(&prompts).zip(completions) {
            let parsed = parse_causes(&completion?, d.schema);
            out.push(HypothesisRecord {
                split,
                key: e.key,
                date: e.date,
                effect: super::tasks::key_text(d, e.key),
                prompt_sha256: cache_key(&llm.model, llm.temperature, prompt),
                causes: parsed.causes,
                diagnostics: parsed.diagnostics,
            });
        }
    }
    write_jsonl(&layout.hypotheses(), &out)?;
    let calls = client.backend_calls();
    let empty = out.iter().filter(|h| h.causes.is_empty()).count();
    Ok(StageSummary {
        artifacts: vec![layout.hypotheses()],
        backend_calls: Some(calls),
        notes: vec![format!(
            "{} effects, {calls} backend calls, {empty} completions without parseable causes",
            out.len()
        )],
    })
}

fn similarity(config: &RunConfig) -> Similarity {
    match config.retrieve.sim {
        SimKind::Edit => Similarity::edit(),
        SimKind::Embedding => Similarity::embedding(Box::new(HashedNgramEmbedder::default())),
    }
}

fn retrieve(config: &RunConfig, layout: &Layout) -> Result<StageSummary> {
    let proposals: Vec<ProposalRecord> = read_jsonl(&layout.proposals(), "propose")?;
    let hyps: Vec<HypothesisRecord> = read_jsonl(&layout.hypotheses(), "abduce")?;
    let (splits, _) = load_splits(config)?;
    let sim = similarity(config);
    let rc = config.retrieve.retrieval(config.data.schema);
    let mut out: Vec<EvidenceRecord> = Vec::new();
    for (split, recs) in by_split(proposals) {
        let table: HashMap<EffectKey, Vec<CauseHypothesis>> = hyps
            .iter()
            .filter(|h| h.split == split)
            .map(|h| (EffectKey { key: h.key, date: h.date }, h.causes.clone()))
            .collect();
        out.extend(retrieve_all(&sim, splits.get(split), &recs, &table, rc)?);
    }
    write_jsonl(&layout.evidence(), &out)?;
    Ok(StageSummary {
        artifacts: vec![layout.evidence()],
        notes: vec![format!("{} evidence sets", out.len())],
        ..Default::default()
    })
}

/// Proposals and evidence of one split, indexed for candidate lookup.
fn split_inputs(
    layout: &Layout,
    splits: &Splits,
    split: Split,
) -> Result<(Vec<ProposalRecord>, EvidenceIndex)> {
    let proposals: Vec<ProposalRecord> = read_jsonl::<ProposalRecord>(&layout.proposals(), "propose")?
        .into_iter()
        .filter(|r| r.split == split)
        .collect();
    let evidence: Vec<EvidenceRecord> = read_jsonl(&layout.evidence(), "retrieve")?;
    let ids: std::collections::HashSet<&str> = proposals.iter().map(|r| r.query_id.as_str()).collect();
    let evidence: Vec<EvidenceRecord> = evidence.into_iter().filter(|e| ids.contains(e.query_id.as_str())).collect();
    let index = EvidenceIndex::new(splits.get(split), &proposals, &evidence);
    Ok((proposals, index))
}

fn train_ranker_stage(config: &RunConfig, layout: &Layout) -> Result<StageSummary> {
    let (splits, _) = load_splits(config)?;
    let (train, train_ev) = split_inputs(layout, &splits, Split::Train)?;
    let (dev, dev_ev) = split_inputs(layout, &splits, Split::Dev)?;
    let items = train_items(&train, &train_ev, config.propose.negatives)?;
    let queries = rank_queries(&dev, &dev_ev, config.propose.m)?;
    let ranker = Ranker::new(config.ranker.ranker(type_space(&splits.train), config.seed))?;
    let (ranker, log) = train_ranker(ranker, &items, &queries, &config.ranker.train)?;
    ensure_parent(&layout.ranker())?;
    ranker.save(&layout.ranker())?;
    write_text(&layout.ranker_log(), &log.to_csv())?;
    Ok(StageSummary {
        artifacts: vec![layout.ranker(), layout.ranker_log()],
        notes: vec![format!("{} items, best epoch {}", items.len(), log.best_epoch)],
        ..Default::default()
    })
}

fn predict_stage(config: &RunConfig, layout: &Layout) -> Result<StageSummary> {
    require(&layout.ranker(), "train-ranker")?;
    let ranker = Ranker::load(&layout.ranker())?;
    let (splits, _) = load_splits(config)?;
    let (test, test_ev) = split_inputs(layout, &splits, Split::Test)?;
    let preds = predict(&ranker, &splits.test, &test, &test_ev)?;
    write_jsonl(&layout.predictions(), &preds)?;
    Ok(StageSummary {
        artifacts: vec![layout.predictions()],
        notes: vec![format!("{} predictions", preds.len())],
        ..Default::default()
    })
}

pub const METHODS: [&str; 2] = ["base", "reranked"];

/// Metric reports for both methods at every list length up to `m`; metrics
/// with no covered query are left out.
pub fn evaluate_predictions(preds: &[PredictionRecord], m: usize, seed: u64) -> Result<Vec<MetricReport>> {
    let types: Vec<&PredictionRecord> = preds.iter().filter(|p| p.kind == QueryKind::Type).collect();
    let times: Vec<&PredictionRecord> = preds.iter().filter(|p| p.kind == QueryKind::Time).collect();
    let mut out = Vec::new();
    for (mi, method) in METHODS.iter().enumerate() {
        let reranked = mi == 1;
        if !types.is_empty() {
            for k in 1..=m {
                let recs: Vec<_> = types.iter().map(|p| p.eval_record(reranked, k)).collect();
                for kind in [MetricKind::MeanRank, MetricKind::Map, MetricKind::Mar] {
                    match metric_report(kind, &recs, k, seed) {
                        Ok(mut r) => {
                            r.method = Some(method.to_string());
                            out.push(r);
                        }
                        Err(Error::NoCoverage) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        if !times.is_empty() {
            let recs: Vec<_> = times.iter().map(|p| p.eval_record(reranked, m)).collect();
            let mut r = metric_report(MetricKind::Rmse, &recs, m, seed)?;
            r.method = Some(method.to_string());
            out.push(r);
        }
    }
    Ok(out)
}

fn evaluate(config: &RunConfig, layout: &Layout) -> Result<StageSummary> {
    let preds: Vec<PredictionRecord> = read_jsonl(&layout.predictions(), "predict")?;
    let reports = evaluate_predictions(&preds, config.propose.m, config.seed)?;
    write_text(&layout.metrics(), &(serde_json::to_string_pretty(&reports)? + "\n"))?;
    let notes = reports
        .iter()
        .filter(|r| r.m == config.propose.m)
        .map(|r| {
            format!(
                "{} {}@{}: {:.4} [{:.4}, {:.4}]",
                r.method.as_deref().unwrap_or("-"),
                r.metric,
                r.m,
                r.value,
                r.ci_low,
                r.ci_high
            )
        })
        .collect();
    Ok(StageSummary {
        artifacts: vec![layout.metrics()],
        notes,
        ..Default::default()
    })
}

fn report_stage(layout: &Layout) -> Result<StageSummary> {
    let reports: Vec<MetricReport> = read_json(&layout.metrics(), "evaluate")?;
    let artifacts = report::write_report(&reports, &layout.report_dir())?;
    Ok(StageSummary {
        artifacts,
        ..Default::default()
    })
}

/// Loads the trained base model of a run directory.
pub fn load_base_model(layout: &Layout) -> Result<impl IntensityModel> {
    require(&layout.base_model(), "train-base")?;
    BaseModel::load(&layout.base_model())
}
