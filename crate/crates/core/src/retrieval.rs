//! Evidence retrieval: match generated cause hypotheses against real past
//! events by text similarity and keep the best matches.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::abduction::{hypothesis_text, CauseHypothesis};
use crate::error::{Error, Result};
use crate::event::{Event, Schema};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    /// Dot product of unit-norm text embeddings.
    Embedding,
    /// `1 / (1 + levenshtein)`.
    Edit,
}

impl FromStr for SimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "embedding" => Ok(SimKind::Embedding),
            "edit" => Ok(SimKind::Edit),
            other => Err(Error::Config(format!("unknown sim_kind {other:?}"))),
        }
    }
}

/// Maps texts to unit-norm vectors of a fixed dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Offline embedder: signed feature hashing of character n-grams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashedNgramEmbedder {
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self {
            n: 3,
            dim: 256,
            seed: 0x5eed,
        }
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashedNgramEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut chars: Vec<char> = Vec::with_capacity(text.len() + 2);
        chars.push('\u{2}');
        chars.extend(text.to_lowercase().chars());
        chars.push('\u{3}');
        let n = self.n.max(1).min(chars.len());
        let mut buf = String::new();
        for w in chars.windows(n) {
            buf.clear();
            buf.extend(w);
            let h = fnv1a(self.seed, buf.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v[0] = 1.0;
        }
        v
    }
}

impl EmbeddingProvider for HashedNgramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

pub fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::NonFinite(format!("cannot normalize vector of norm {norm}")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

#[cfg(feature = "remote")]
pub use remote::RemoteEmbedder;

#[cfg(feature = "remote")]
mod remote {
    use std::time::Duration;

    use serde_json::{json, Value};

    use super::{normalize, EmbeddingProvider};
    use crate::error::{Error, Result};

    /// Embedding endpoint taking `{"model", "input": [texts]}` and answering
    /// `{"data": [{"embedding": [...]}, ...]}`.
    pub struct RemoteEmbedder {
        agent: ureq::Agent,
        endpoint: String,
        model: String,
        dim: usize,
        api_key: Option<String>,
    }

    impl RemoteEmbedder {
        pub fn new(endpoint: &str, model: &str, dim: usize, api_key_env: &str) -> Self {
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .http_status_as_error(false)
                .timeout_global(Some(Duration::from_secs(120)))
                .build()
                .into();
            Self {
                agent,
                endpoint: endpoint.to_string(),
                model: model.to_string(),
                dim,
                api_key: std::env::var(api_key_env).ok(),
            }
        }
    }

    impl EmbeddingProvider for RemoteEmbedder {
        fn dim(&self) -> usize {
            self.dim
        }

        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            let mut req = self.agent.post(&self.endpoint);
            if let Some(k) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {k}"));
            }
            let mut resp = req
                .send_json(json!({"model": self.model, "input": texts}))
                .map_err(|e| Error::Backend(format!("embedding transport: {e}")))?;
            let status = resp.status().as_u16();
            let body = resp
                .body_mut()
                .read_to_string()
                .map_err(|e| Error::Backend(format!("embedding body: {e}")))?;
            if !(200..300).contains(&status) {
                return Err(Error::Backend(format!("embedding HTTP {status}: {body}")));
            }
            let v: Value = serde_json::from_str(&body)?;
            let data = v
                .get("data")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Backend("embedding response lacks data".into()))?;
            if data.len() != texts.len() {
                return Err(Error::Backend(format!(
                    "asked for {} embeddings, got {}",
                    texts.len(),
                    data.len()
                )));
            }
            data.iter()
                .map(|d| {
                    let vec: Vec<f64> = d
                        .get("embedding")
                        .and_then(Value::as_array)
                        .ok_or_else(|| Error::Backend("embedding entry lacks vector".into()))?
                        .iter()
                        .map(|x| x.as_f64().unwrap_or(f64::NAN))
                        .collect();
                    if vec.len() != self.dim {
                        return Err(Error::Dimension(format!(
                            "embedding of width {} where {} was configured",
                            vec.len(),
                            self.dim
                        )));
                    }
                    normalize(vec)
                })
                .collect()
        }
    }
}

pub fn edit_similarity(a: &str, b: &str) -> f64 {
    1.0 / (1.0 + strsim::levenshtein(a, b) as f64)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pairwise text similarity of either kind.
pub struct Similarity {
    kind: SimKind,
    provider: Box<dyn EmbeddingProvider>,
}

impl Similarity {
    pub fn edit() -> Self {
        Self {
            kind: SimKind::Edit,
            provider: Box::new(HashedNgramEmbedder::default()),
        }
    }

    pub fn embedding(provider: Box<dyn EmbeddingProvider>) -> Self {
        Self {
            kind: SimKind::Embedding,
            provider,
        }
    }

    pub fn new(kind: SimKind, provider: Box<dyn EmbeddingProvider>) -> Self {
        Self { kind, provider }
    }

    pub fn kind(&self) -> SimKind {
        self.kind
    }

    pub fn score(&self, a: &str, b: &str) -> Result<f64> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::InvalidArgument("similarity of an empty text".into()));
        }
        match self.kind {
            SimKind::Edit => Ok(edit_similarity(a, b)),
            SimKind::Embedding => {
                let v = self.provider.embed(&[a.to_string(), b.to_string()])?;
                Ok(dot(&v[0], &v[1]))
            }
        }
    }

    /// Texts of a history, pre-embedded when needed, for repeated searches.
    pub fn index(&self, history: &[Event]) -> Result<HistoryIndex> {
        let texts: Vec<String> = history.iter().map(Event::text).collect();
        let vectors = match self.kind {
            SimKind::Embedding if !texts.is_empty() => self.provider.embed(&texts)?,
            _ => Vec::new(),
        };
        Ok(HistoryIndex {
            times: history.iter().map(|e| e.time).collect(),
            texts,
            vectors,
        })
    }

    fn scores(&self, index: &HistoryIndex, query: &str, upto: usize) -> Result<Vec<f64>> {
        match self.kind {
            SimKind::Edit => Ok(index.texts[..upto]
                .iter()
                .map(|t| edit_similarity(query, t))
                .collect()),
            SimKind::Embedding => {
                let q = self.provider.embed(&[query.to_string()])?.remove(0);
                Ok(index.vectors[..upto].iter().map(|v| dot(&q, v)).collect())
            }
        }
    }
}

/// A history prepared for similarity search; events must be sorted by time.
#[derive(Clone, Debug)]
pub struct HistoryIndex {
    times: Vec<f64>,
    texts: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl HistoryIndex {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    /// Position in the searched history.
    pub index: usize,
    pub time: f64,
    pub text: String,
    /// First hypothesis that selected this event and its similarity.
    pub hypothesis: usize,
    pub score: f64,
}

/// Retrieved events, duplicate-free and in chronological order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub items: Vec<EvidenceItem>,
}

impl EvidenceSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.index).collect()
    }
}

/// Retrieval knobs: matches per hypothesis and an optional cap on the union.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub per_cause: usize,
    pub total_cap: Option<usize>,
}

impl RetrievalConfig {
    pub fn for_schema(schema: Schema) -> Self {
        Self {
            per_cause: match schema {
                Schema::Structured => 2,
                Schema::Categorical => 4,
            },
            total_cap: None,
        }
    }
}

/// For each query text, the `per_cause` most similar events strictly before
/// `proposal_time` (ties go to the later event), merged without duplicates.
pub fn retrieve(
    sim: &Similarity,
    index: &HistoryIndex,
    queries: &[String],
    config: RetrievalConfig,
    proposal_time: f64,
) -> Result<EvidenceSet> {
    if config.per_cause == 0 {
        return Err(Error::InvalidArgument("D must be >= 1".into()));
    }
    let upto = index.times.partition_point(|&t| t < proposal_time);
    let mut chosen: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    if upto > 0 {
        for (h, q) in queries.iter().enumerate() {
            if q.is_empty() {
                continue;
            }
            let scores = sim.scores(index, q, upto)?;
            let mut order: Vec<usize> = (0..upto).collect();
            order.sort_by(|&a, &b| {
                scores[b]
                    .total_cmp(&scores[a])
                    .then(index.times[b].total_cmp(&index.times[a]))
                    .then(b.cmp(&a))
            });
            for &i in order.iter().take(config.per_cause) {
                chosen.entry(i).or_insert((h, scores[i]));
            }
        }
    }
    let mut items: Vec<EvidenceItem> = chosen
        .into_iter()
        .map(|(i, (h, s))| EvidenceItem {
            index: i,
            time: index.times[i],
            text: index.texts[i].clone(),
            hypothesis: h,
            score: s,
        })
        .collect();
    if let Some(cap) = config.total_cap {
        if items.len() > cap {
            items.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then(b.time.total_cmp(&a.time))
                    .then(b.index.cmp(&a.index))
            });
            items.truncate(cap);
            items.sort_by_key(|i| i.index);
        }
    }
    Ok(EvidenceSet { items })
}

/// [`retrieve`] over parsed hypotheses, rendered like real events.
pub fn retrieve_evidence(
    sim: &Similarity,
    history: &[Event],
    hypotheses: &[CauseHypothesis],
    schema: Schema,
    config: RetrievalConfig,
    proposal_time: f64,
) -> Result<EvidenceSet> {
    let index = sim.index(history)?;
    let queries: Vec<String> = hypotheses.iter().map(|h| hypothesis_text(h, schema)).collect();
    retrieve(sim, &index, &queries, config, proposal_time)
}
