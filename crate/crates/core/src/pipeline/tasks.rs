//! In-memory building blocks shared by the stages: query selection, proposals,
//! prompts, evidence lookup, ranker items and predictions.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abduction::{CauseHypothesis, EventBlock, PromptTemplate};
use crate::error::{Error, Result};
use crate::event::{render_type_text, Dataset, Event, Occurrence, Timeline, TypeKey};
use crate::intensity::IntensityModel;
use crate::metrics::EvalRecord;
use crate::proposer::{propose_times, propose_types, TimeSource};
use crate::ranker::{rerank, Candidate, RankQuery, RankTrainItem, Ranker};
use crate::retrieval::{retrieve, EvidenceItem, RetrievalConfig, Similarity};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    /// Which type happens at a known time.
    Type,
    /// When the next event happens.
    Time,
    /// Types sampled at a uniformly drawn time, for the no-event objective.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub key: TypeKey,
    pub text: String,
    pub base_intensity: f64,
    pub rank_in_base: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeCandidateRecord {
    pub time: f64,
    pub source: TimeSource,
    /// The highest-intensity types at this time.
    pub types: Vec<CandidateRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub query_id: String,
    pub kind: QueryKind,
    pub split: Split,
    /// Position of the sequence in its split.
    pub seq: usize,
    /// Query time; for time queries the time of the last observed event.
    pub time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub truths: Vec<TypeKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_time: Option<f64>,
    pub candidates: Vec<CandidateRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub times: Vec<TimeCandidateRecord>,
}

/// A real event time to predict: its sequence, the time and every type observed then.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPoint {
    pub seq: usize,
    pub time: f64,
    pub truths: Vec<TypeKey>,
}

/// Distinct observed event times with at least `min_history` earlier events,
/// subsampled to at most `max` with a seeded shuffle (then restored to order).
pub fn query_points(timelines: &[Timeline], min_history: usize, max: usize, seed: u64) -> Vec<QueryPoint> {
    let mut points = Vec::new();
    for (s, tl) in timelines.iter().enumerate() {
        let mut last = None;
        for (_, e) in tl.observed() {
            if last == Some(e.time) {
                continue;
            }
            last = Some(e.time);
            let p = tl.prefix_len(e.time);
            if p < min_history {
                continue;
            }
            let mut truths: Vec<TypeKey> = tl.events[p..]
                .iter()
                .take_while(|o| o.time == e.time)
                .map(|o| o.key)
                .collect();
            truths.sort();
            truths.dedup();
            points.push(QueryPoint {
                seq: s,
                time: e.time,
                truths,
            });
        }
    }
    if points.len() > max {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(max);
        idx.sort_unstable();
        points = idx.into_iter().map(|i| points[i].clone()).collect();
    }
    points
}

pub fn key_text(dataset: &Dataset, key: TypeKey) -> String {
    render_type_text(&dataset.vocab.decode(key), None)
}

fn candidate_records<M: IntensityModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    history: &[Occurrence],
    t: f64,
    m: usize,
) -> Result<Vec<CandidateRecord>> {
    Ok(propose_types(model, history, t, m, None)?
        .into_iter()
        .map(|p| CandidateRecord {
            key: p.key,
            text: key_text(dataset, p.key),
            base_intensity: p.base_intensity,
            rank_in_base: p.rank_in_base,
        })
        .collect())
}

/// Knobs for [`propose_split`].
#[derive(Clone, Copy, Debug)]
pub struct ProposeSettings {
    pub m: usize,
    pub m_prime: usize,
    pub negatives: usize,
    pub noise_times: usize,
    pub time_queries: usize,
    pub mbr_samples: usize,
    pub min_history: usize,
    pub max_queries: usize,
    pub seed: u64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(feature = "parallel")]
fn par_map<T: Sync, U: Send, F: Fn(usize, &T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, U, F: Fn(usize, &T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Base-model proposals for one split. Training queries carry enough
/// alternatives for the negatives plus their noise draws; dev and test carry
/// the top `m` and, for the first `time_queries` points, next-time proposals.
pub fn propose_split<M: IntensityModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    split: Split,
    s: &ProposeSettings,
) -> Result<Vec<ProposalRecord>> {
    if s.m == 0 || s.m_prime == 0 {
        return Err(Error::InvalidArgument("M and M' must be >= 1".into()));
    }
    let timelines = dataset.timelines();
    let split_seed = mix(s.seed, split as u64 + 1, 0);
    let points = query_points(&timelines, s.min_history, s.max_queries, split_seed);
    let per_point = par_map(&points, |i, q| -> Result<Vec<ProposalRecord>> {
        let tl = &timelines[q.seq];
        let history = &tl.events[..tl.prefix_len(q.time)];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(split_seed, i as u64, 1));
        let query_id = format!("{}-{}-{i}", split.name(), dataset.sequences[q.seq].id);
        let width = if split == Split::Train {
            s.m.max(s.negatives + q.truths.len())
        } else {
            s.m
        };
        let mut out = vec![ProposalRecord {
            query_id: query_id.clone(),
            kind: QueryKind::Type,
            split,
            seq: q.seq,
            time: q.time,
            parent: None,
            truths: q.truths.clone(),
            true_time: None,
            candidates: candidate_records(model, dataset, history, q.time, width)?,
            times: Vec::new(),
        }];
        if split == Split::Train {
            for n in 0..s.noise_times {
                let u = tl.window_start + (tl.window_end - tl.window_start) * rng.random::<f64>();
                let h = &tl.events[..tl.prefix_len(u)];
                if h.last().is_some_and(|e| e.time >= u) {
                    continue;
                }
                let top = candidate_records(model, dataset, h, u, s.m)?;
                let total: f64 = top.iter().map(|c| c.base_intensity).sum();
                let mut drawn = Vec::with_capacity(s.m);
                for _ in 0..s.m {
                    let mut v = rng.random::<f64>() * total;
                    let mut pick = top.len() - 1;
                    for (j, c) in top.iter().enumerate() {
                        if v < c.base_intensity {
                            pick = j;
                            break;
                        }
                        v -= c.base_intensity;
                    }
                    drawn.push(top[pick].clone());
                }
                out.push(ProposalRecord {
                    query_id: format!("{query_id}-noise{n}"),
                    kind: QueryKind::Noise,
                    split,
                    seq: q.seq,
                    time: u,
                    parent: Some(query_id.clone()),
                    truths: Vec::new(),
                    true_time: None,
                    candidates: drawn,
                    times: Vec::new(),
                });
            }
        } else if i < s.time_queries && !history.is_empty() {
            let from = history.last().map(|e| e.time).unwrap_or(tl.window_start);
            let proposals = propose_times(model, history, from, s.m, s.mbr_samples, &mut rng)?;
            let mut times = Vec::with_capacity(proposals.len());
            for p in proposals {
                times.push(TimeCandidateRecord {
                    time: p.time,
                    source: p.source,
                    types: candidate_records(model, dataset, history, p.time, s.m_prime)?,
                });
            }
            out.push(ProposalRecord {
                query_id: format!("{query_id}-time"),
                kind: QueryKind::Time,
                split,
                seq: q.seq,
                time: from,
                parent: Some(query_id),
                truths: q.truths.clone(),
                true_time: Some(q.time),
                candidates: Vec::new(),
                times,
            });
        }
        Ok(out)
    });
    let mut records = Vec::new();
    for r in per_point {
        records.extend(r?);
    }
    Ok(records)
}

/// An effect to explain: a type on a calendar day.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EffectKey {
    pub key: TypeKey,
    pub date: NaiveDate,
}

/// Every (candidate, time) pair that needs evidence, with its query.
pub fn evidence_requests(records: &[ProposalRecord]) -> Vec<(String, usize, TypeKey, f64)> {
    let mut out = Vec::new();
    for r in records {
        for c in &r.candidates {
            out.push((r.query_id.clone(), r.seq, c.key, r.time));
        }
        if r.kind == QueryKind::Type && r.split == Split::Train {
            for &k in &r.truths {
                out.push((r.query_id.clone(), r.seq, k, r.time));
            }
        }
        for tc in &r.times {
            for c in &tc.types {
                out.push((r.query_id.clone(), r.seq, c.key, tc.time));
            }
        }
    }
    out
}

pub fn effects_for(dataset: &Dataset, records: &[ProposalRecord]) -> BTreeSet<EffectKey> {
    evidence_requests(records)
        .into_iter()
        .map(|(_, _, key, t)| EffectKey {
            key,
            date: dataset.date_of(t),
        })
        .collect()
}

pub fn effect_prompt(template: &PromptTemplate, dataset: &Dataset, effect: EffectKey) -> Result<String> {
    let mut block = EventBlock::from_event(&Event::new(0.0, dataset.vocab.decode(effect.key)), dataset.epoch);
    block.time = effect.date;
    block.text = None;
    template.build(&block)
}

/// Evidence for one candidate at one time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub query_id: String,
    pub key: TypeKey,
    pub time: f64,
    pub items: Vec<EvidenceItem>,
}

/// Retrieves evidence for every request, reusing one history index per sequence.
pub fn retrieve_all(
    sim: &Similarity,
    dataset: &Dataset,
    records: &[ProposalRecord],
    hypotheses: &HashMap<EffectKey, Vec<CauseHypothesis>>,
    config: RetrievalConfig,
) -> Result<Vec<EvidenceRecord>> {
    let mut by_seq: BTreeMap<usize, Vec<(String, TypeKey, f64)>> = BTreeMap::new();
    for (q, s, k, t) in evidence_requests(records) {
        by_seq.entry(s).or_default().push((q, k, t));
    }
    let groups: Vec<(usize, Vec<(String, TypeKey, f64)>)> = by_seq.into_iter().collect();
    let schema = dataset.schema;
    let parts = par_map(&groups, |_, (s, reqs)| -> Result<Vec<EvidenceRecord>> {
        let events: Vec<Event> = dataset.sequences[*s].events.clone();
        let index = sim.index(&events)?;
        let mut out = Vec::with_capacity(reqs.len());
        let mut seen = BTreeSet::new();
        for (q, k, t) in reqs {
            if !seen.insert((q.clone(), *k, t.to_bits())) {
                continue;
            }
            let effect = EffectKey {
                key: *k,
                date: dataset.date_of(*t),
            };
            let hyps = hypotheses.get(&effect).ok_or_else(|| Error::MissingArtifact {
                path: format!("hypotheses for {} on {}", key_text(dataset, *k), effect.date).into(),
                stage: "abduce".into(),
            })?;
            let queries: Vec<String> = hyps
                .iter()
                .map(|h| crate::abduction::hypothesis_text(h, schema))
                .collect();
            let set = retrieve(sim, &index, &queries, config, *t)?;
            out.push(EvidenceRecord {
                query_id: q.clone(),
                key: *k,
                time: *t,
                items: set.items,
            });
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for p in parts {
        all.extend(p?);
    }
    Ok(all)
}

/// Evidence lookup keyed by query, type and exact time.
pub struct EvidenceIndex {
    map: HashMap<(String, TypeKey, u64), Vec<Occurrence>>,
}

impl EvidenceIndex {
    pub fn new(dataset: &Dataset, records: &[ProposalRecord], evidence: &[EvidenceRecord]) -> Self {
        let seq_of: HashMap<&str, usize> = records.iter().map(|r| (r.query_id.as_str(), r.seq)).collect();
        let timelines: HashMap<usize, Timeline> = seq_of
            .values()
            .map(|&s| (s, dataset.timeline(&dataset.sequences[s])))
            .collect();
        let map = evidence
            .iter()
            .filter_map(|e| {
                let tl = timelines.get(seq_of.get(e.query_id.as_str())?)?;
                let occ = e.items.iter().map(|i| tl.events[i.index]).collect();
                Some(((e.query_id.clone(), e.key, e.time.to_bits()), occ))
            })
            .collect();
        Self { map }
    }

    pub fn candidate(&self, query_id: &str, key: TypeKey, time: f64) -> Result<Candidate> {
        let evidence = self
            .map
            .get(&(query_id.to_string(), key, time.to_bits()))
            .cloned()
            .ok_or_else(|| Error::MissingArtifact {
                path: format!("evidence for {query_id}").into(),
                stage: "retrieve".into(),
            })?;
        Ok(Candidate { time, key, evidence })
    }
}

/// One training item per training type query: its first truth against the top
/// non-truth proposals, with the noise draws attached to it.
pub fn train_items(records: &[ProposalRecord], evidence: &EvidenceIndex, negatives: usize) -> Result<Vec<RankTrainItem>> {
    let mut noise: HashMap<&str, Vec<&ProposalRecord>> = HashMap::new();
    for r in records.iter().filter(|r| r.kind == QueryKind::Noise) {
        if let Some(p) = &r.parent {
            noise.entry(p.as_str()).or_default().push(r);
        }
    }
    let mut items = Vec::new();
    for r in records.iter().filter(|r| r.kind == QueryKind::Type && r.split == Split::Train) {
        let Some(&truth) = r.truths.first() else { continue };
        let positive = evidence.candidate(&r.query_id, truth, r.time)?;
        let negs = r
            .candidates
            .iter()
            .filter(|c| !r.truths.contains(&c.key))
            .take(negatives)
            .map(|c| evidence.candidate(&r.query_id, c.key, r.time))
            .collect::<Result<Vec<_>>>()?;
        let noise_groups = noise
            .get(r.query_id.as_str())
            .map(|ns| {
                ns.iter()
                    .map(|n| {
                        n.candidates
                            .iter()
                            .map(|c| evidence.candidate(&n.query_id, c.key, n.time))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?
            .unwrap_or_default();
        items.push(RankTrainItem {
            positive,
            negatives: negs,
            noise: noise_groups,
        });
    }
    Ok(items)
}

/// Dev type queries as ranking problems over the top-`m` proposals.
pub fn rank_queries(records: &[ProposalRecord], evidence: &EvidenceIndex, m: usize) -> Result<Vec<RankQuery>> {
    records
        .iter()
        .filter(|r| r.kind == QueryKind::Type)
        .map(|r| {
            let cands = &r.candidates[..m.min(r.candidates.len())];
            let candidates = cands
                .iter()
                .map(|c| evidence.candidate(&r.query_id, c.key, r.time))
                .collect::<Result<Vec<_>>>()?;
            let truths = cands
                .iter()
                .enumerate()
                .filter(|(_, c)| r.truths.contains(&c.key))
                .map(|(i, _)| i)
                .collect();
            Ok(RankQuery { candidates, truths })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub kind: QueryKind,
    pub truths: Vec<String>,
    /// Base-model order.
    pub base: Vec<String>,
    /// Compatibility of each base candidate, in base order.
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reranked_time: Option<f64>,
}

impl PredictionRecord {
    /// The first `m` base candidates reordered by compatibility.
    pub fn reranked(&self, m: usize) -> Vec<String> {
        let n = m.min(self.base.len());
        let scored: Vec<(String, f64)> = self.base[..n]
            .iter()
            .cloned()
            .zip(self.scores[..n].iter().copied())
            .collect();
        rerank(scored).into_iter().map(|(s, _)| s).collect()
    }

    pub fn eval_record(&self, reranked: bool, m: usize) -> EvalRecord {
        let ranked = if reranked {
            self.reranked(m)
        } else {
            self.base[..m.min(self.base.len())].to_vec()
        };
        EvalRecord {
            query_id: self.query_id.clone(),
            ranked,
            truths: self.truths.clone(),
            true_time: self.true_time,
            predicted_time: if reranked { self.reranked_time } else { self.base_time },
        }
    }
}

/// Scores the test proposals with the ranker.
pub fn predict(
    ranker: &Ranker,
    dataset: &Dataset,
    records: &[ProposalRecord],
    evidence: &EvidenceIndex,
) -> Result<Vec<PredictionRecord>> {
    let selected: Vec<&ProposalRecord> = records
        .iter()
        .filter(|r| matches!(r.kind, QueryKind::Type | QueryKind::Time))
        .collect();
    let out = par_map(&selected, |_, r| -> Result<PredictionRecord> {
        let truths = r.truths.iter().map(|&k| key_text(dataset, k)).collect();
        match r.kind {
            QueryKind::Time => {
                let mut best: Option<(f64, f64)> = None;
                for tc in &r.times {
                    let subs = tc
                        .types
                        .iter()
                        .map(|c| evidence.candidate(&r.query_id, c.key, tc.time))
                        .collect::<Result<Vec<_>>>()?;
                    let s = ranker.score_time(&subs)?;
                    if best.is_none_or(|(b, _)| s > b) {
                        best = Some((s, tc.time));
                    }
                }
                let base_time = r.times.iter().find(|t| t.source == TimeSource::Mbr).map(|t| t.time);
                Ok(PredictionRecord {
                    query_id: r.query_id.clone(),
                    kind: r.kind,
                    truths,
                    base: Vec::new(),
                    scores: Vec::new(),
                    true_time: r.true_time,
                    base_time,
                    reranked_time: best.map(|b| b.1),
                })
            }
            _ => {
                let mut scores = Vec::with_capacity(r.candidates.len());
                for c in &r.candidates {
                    scores.push(ranker.compatibility(&evidence.candidate(&r.query_id, c.key, r.time)?)?);
                }
                Ok(PredictionRecord {
                    query_id: r.query_id.clone(),
                    kind: r.kind,
                    truths,
                    base: r.candidates.iter().map(|c| c.text.clone()).collect(),
                    scores,
                    true_time: None,
                    base_time: None,
                    reranked_time: None,
                })
            }
        }
    });
    out.into_iter().collect()
}

/// Splits whole sequences: the first share trains, the next validates, the rest tests.
pub fn split_sequences(dataset: &Dataset, dev_fraction: f64, test_fraction: f64) -> Result<(Dataset, Dataset, Dataset)> {
    if !(dev_fraction >= 0.0 && test_fraction > 0.0 && dev_fraction + test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "dev_fraction {dev_fraction} and test_fraction {test_fraction} must leave room for training"
        )));
    }
    let n = dataset.sequences.len();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let n_dev = ((n as f64) * dev_fraction).round() as usize;
    let n_train = n.saturating_sub(n_test + n_dev);
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config(format!("{n} sequences are too few to split")));
    }
    let part = |lo: usize, hi: usize| Dataset {
        schema: dataset.schema,
        sequences: dataset.sequences[lo..hi].to_vec(),
        vocab: dataset.vocab.clone(),
        epoch: dataset.epoch,
    };
    Ok((part(0, n_train), part(n_train, n_train + n_dev), part(n_train + n_dev, n)))
}
