//! Learned compatibility between a proposal and its retrieved evidence, the
//! scores built on it, and contrastive training.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::event::{Occurrence, TypeKey};
use crate::intensity::{Encoder, EncoderSpec, TypeSpace};
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankerConfig {
    pub encoder: EncoderSpec,
    /// Width of the two hidden layers of the scoring head.
    pub hidden: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl RankerConfig {
    pub fn new(space: TypeSpace) -> Self {
        let mut encoder = EncoderSpec::new(space);
        encoder.layers = 2;
        Self {
            encoder,
            hidden: 16,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

/// A candidate event with the evidence retrieved for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub time: f64,
    pub key: TypeKey,
    pub evidence: Vec<Occurrence>,
}

/// One observed event against base-model alternatives, plus noise draws at
/// sampled times: `noise[n]` holds the types sampled at the n-th time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTrainItem {
    pub positive: Candidate,
    pub negatives: Vec<Candidate>,
    #[serde(default)]
    pub noise: Vec<Vec<Candidate>>,
}

/// Proposals for one held-out query with the positions of its true answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankQuery {
    pub candidates: Vec<Candidate>,
    pub truths: Vec<usize>,
}

/// `c(t, k, e)`: a continuous-time attention encoder over `[evidence…, proposal]`
/// followed by a three-layer perceptron at the proposal position.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ranker {
    config: RankerConfig,
    params: ParamSet,
    encoder: Encoder,
    mlp: [(ParamId, ParamId); 3],
}

impl Ranker {
    pub fn new(config: RankerConfig) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::Dimension("ranker hidden width must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::default();
        let s = config.init_scale;
        let encoder = Encoder::new(config.encoder.clone(), &mut params, s, &mut rng)?;
        let widths = [config.encoder.output_width(), config.hidden, config.hidden, 1];
        let mut layer = |i: usize, params: &mut ParamSet| {
            let w = params.add(
                format!("mlp{i}.w"),
                Tensor::uniform(widths[i + 1], widths[i], s, &mut rng),
            );
            let b = params.add(format!("mlp{i}.b"), Tensor::uniform(widths[i + 1], 1, s, &mut rng));
            (w, b)
        };
        let mlp = [layer(0, &mut params), layer(1, &mut params), layer(2, &mut params)];
        Ok(Self {
            config,
            params,
            encoder,
            mlp,
        })
    }

    pub fn config(&self) -> &RankerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_causal(c: &Candidate) -> Result<()> {
        if let Some(bad) = c.evidence.iter().find(|e| !(e.time < c.time)) {
            return Err(Error::NotAfterHistory {
                t: c.time,
                last: bad.time,
            });
        }
        Ok(())
    }

    fn build(&self, g: &mut Graph, c: &Candidate) -> Result<Var> {
        Self::check_causal(c)?;
        let mut evidence = c.evidence.clone();
        // times are taken relative to the proposal, so scores do not depend on
        // where the window sits on the calendar
        for e in &mut evidence {
            e.time -= c.time;
        }
        evidence.sort_by(|a, b| a.time.total_cmp(&b.time));
        let ctx = self.encoder.context(g, &evidence)?;
        let mut h = self.encoder.embed(g, &ctx, evidence.len(), c.key, 0.0)?;
        for (i, (w, b)) in self.mlp.iter().enumerate() {
            let z = g.linear(*w, h);
            let z = g.bias(z, *b);
            h = if i < 2 { g.tanh(z) } else { z };
        }
        Ok(h)
    }

    pub fn compatibility(&self, c: &Candidate) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let v = self.build(&mut g, c)?;
        Ok(g.scalar(v))
    }

    pub fn compatibility_grad(&self, c: &Candidate) -> Result<(f64, Grads)> {
        let mut g = Graph::new(&self.params);
        let v = self.build(&mut g, c)?;
        Ok((g.scalar(v), g.backward(v)))
    }

    pub fn score_type(&self, c: &Candidate) -> Result<f64> {
        Ok(self.compatibility(c)?.exp())
    }

    /// Sum of the type scores of the sub-proposals at one candidate time.
    pub fn score_time(&self, subs: &[Candidate]) -> Result<f64> {
        if subs.is_empty() {
            return Err(Error::InvalidArgument("a time proposal needs >= 1 type".into()));
        }
        let cs = subs
            .iter()
            .map(|c| self.compatibility(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(score_time_from(&cs))
    }

    fn scores(&self, g: &mut Graph, cands: &[Candidate]) -> Result<Vec<Var>> {
        cands.iter().map(|c| self.build(g, c)).collect()
    }

    /// `J_actual + β·J_no` for one item and its gradient; with `β = 0` the
    /// noise term is not evaluated at all.
    pub fn objective(&self, item: &RankTrainItem, beta: f64) -> Result<Objective> {
        if item.negatives.is_empty() {
            return Err(Error::InvalidArgument("training item needs >= 1 negative".into()));
        }
        let mut g = Graph::new(&self.params);
        let pos = self.build(&mut g, &item.positive)?;
        let mut all = vec![pos];
        all.extend(self.scores(&mut g, &item.negatives)?);
        if let Some(v) = all.iter().map(|v| g.scalar(*v)).find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("compatibility score {v}")));
        }
        let lse = g.logsumexp(&all);
        let j_actual = g.weighted_sum(&[(pos, 1.0), (lse, -1.0)]);
        let ja = g.scalar(j_actual);
        let mut terms = vec![(j_actual, 1.0)];
        let mut jn = 0.0;
        if beta != 0.0 {
            for group in item.noise.iter().filter(|g| !g.is_empty()) {
                let cs = self.scores(&mut g, group)?;
                let l = g.logsumexp(&cs);
                jn -= g.scalar(l);
                terms.push((l, -beta));
            }
        }
        let total = g.weighted_sum(&terms);
        Ok(Objective {
            j_actual: ja,
            j_no: jn,
            value: g.scalar(total),
            grads: g.backward(total),
        })
    }

    /// Scores every candidate of a query and returns them best first.
    pub fn rank(&self, candidates: &[Candidate]) -> Result<Vec<(usize, f64)>> {
        let scored = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| Ok((i, self.compatibility(c)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(rerank(scored))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = RankerCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            ranker: self.clone(),
        };
        fs::write(path, serde_json::to_string(&ck)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: RankerCheckpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != 1 {
            return Err(Error::Config(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck.ranker)
    }
}

const CHECKPOINT_FORMAT: &str = "causeway-ranker";

#[derive(Serialize, Deserialize)]
struct RankerCheckpoint {
    format: String,
    version: u32,
    ranker: Ranker,
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub j_actual: f64,
    pub j_no: f64,
    pub value: f64,
    pub grads: Grads,
}

/// `c_pos − log Σ exp c` over the positive and its negatives.
pub fn j_actual_from(positive: f64, negatives: &[f64]) -> f64 {
    let m = negatives.iter().copied().fold(positive, f64::max);
    let s: f64 = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|c| (c - m).exp())
        .sum();
    positive - (m + s.ln())
}

/// `−Σ_n log Σ_m exp c[n][m]`.
pub fn j_no_from(groups: &[Vec<f64>]) -> f64 {
    -groups
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            let m = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + g.iter().map(|c| (c - m).exp()).sum::<f64>().ln()
        })
        .sum::<f64>()
}

pub fn score_time_from(compatibilities: &[f64]) -> f64 {
    compatibilities.iter().map(|c| c.exp()).sum()
}

/// Sorts by descending score; equal scores keep their input order.
pub fn rerank<T>(mut scored: Vec<(T, f64)>) -> Vec<(T, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerTrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for RankerTrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lr: 0.005,
            epochs: 20,
            batch_size: 16,
            patience: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankerEpoch {
    pub epoch: usize,
    /// Mean over items.
    pub j_actual: f64,
    pub j_no: f64,
    /// NaN when there is no dev set or no dev truth is covered.
    pub dev_mean_rank: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankerLog {
    pub epochs: Vec<RankerEpoch>,
    pub best_epoch: usize,
    pub beta: f64,
}

impl RankerLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# beta={}\nepoch,j_actual,j_no,dev_mean_rank\n", self.beta);
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.j_actual, e.j_no, e.dev_mean_rank);
        }
        s
    }
}

/// Mean rank of covered truths after reranking each query's candidates.
pub fn dev_mean_rank(ranker: &Ranker, queries: &[RankQuery]) -> Result<Option<f64>> {
    let mut total = 0usize;
    let mut n = 0usize;
    for q in queries {
        let order = ranker.rank(&q.candidates)?;
        for &t in &q.truths {
            if let Some(pos) = order.iter().position(|(i, _)| *i == t) {
                total += pos + 1;
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| total as f64 / n as f64))
}

#[cfg(feature = "parallel")]
fn map_items<T: Send, F: Fn(&RankTrainItem) -> T + Sync + Send>(items: &[&RankTrainItem], f: F) -> Vec<T> {
    use rayon::prelude::*;
    items.par_iter().map(|i| f(i)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_items<T, F: Fn(&RankTrainItem) -> T>(items: &[&RankTrainItem], f: F) -> Vec<T> {
    items.iter().map(|i| f(i)).collect()
}

/// Gradient ascent on `Σ J_actual + β·J_no`, keeping the epoch with the lowest
/// dev mean rank (the untrained ranker is epoch 0).
pub fn train_ranker(
    mut ranker: Ranker,
    items: &[RankTrainItem],
    dev: &[RankQuery],
    config: &RankerTrainConfig,
) -> Result<(Ranker, RankerLog)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("no ranker training items".into()));
    }
    if !config.beta.is_finite() || config.beta < 0.0 {
        return Err(Error::InvalidArgument(format!("beta must be finite and >= 0, got {}", config.beta)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.lr);
    let mut log = RankerLog {
        beta: config.beta,
        ..Default::default()
    };
    let initial = dev_mean_rank(&ranker, dev)?;
    log.epochs.push(RankerEpoch {
        epoch: 0,
        j_actual: f64::NAN,
        j_no: f64::NAN,
        dev_mean_rank: initial.unwrap_or(f64::NAN),
    });
    let mut best = (initial, ranker.clone());
    let mut stale = 0;
    let batch = config.batch_size.max(1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut sum_a, mut sum_n) = (0.0, 0.0);
        for chunk in order.chunks(batch) {
            let refs: Vec<&RankTrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let results = map_items(&refs, |it| ranker.objective(it, config.beta));
            let mut grads = ranker.params.zero_grads();
            for (&i, r) in chunk.iter().zip(results) {
                let o = r.map_err(|e| Error::NonFinite(format!("item {i}: {e}")))?;
                if !o.value.is_finite() || !o.grads.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch}, item {i}: objective {}",
                        o.value
                    )));
                }
                sum_a += o.j_actual;
                sum_n += o.j_no;
                grads.add_assign(&o.grads);
            }
            grads.scale(-1.0 / chunk.len() as f64);
            opt.step(&mut ranker.params, &grads);
        }
        let dev_rank = dev_mean_rank(&ranker, dev)?;
        let n = items.len() as f64;
        log.epochs.push(RankerEpoch {
            epoch,
            j_actual: sum_a / n,
            j_no: sum_n / n,
            dev_mean_rank: dev_rank.unwrap_or(f64::NAN),
        });
        log::info!(
            "ranker epoch {epoch}: J_actual {:.5}, J_no {:.5}, dev mean rank {:?}",
            sum_a / n,
            sum_n / n,
            dev_rank
        );
        let improved = match (dev_rank, best.0) {
            (Some(r), Some(b)) => r < b,
            (Some(_), None) => true,
            // without a dev signal the latest parameters win
            (None, _) => true,
        };
        if improved {
            best = (dev_rank, ranker.clone());
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }
    Ok((best.1, log))
}
