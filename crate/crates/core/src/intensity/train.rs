use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{log_likelihood, AttentiveModel, BaseModel, HawkesModel, IntensityModel};
use crate::autodiff::{Grads, ParamSet};
use crate::error::{Error, Result};
use crate::event::Timeline;
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Sequences per gradient step; 0 means the whole training split.
    pub batch_size: usize,
    pub mc_samples_per_interval: usize,
    /// Epochs without dev improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 30,
            batch_size: 16,
            mc_samples_per_interval: 1,
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-event log-likelihood; NaN for the initialization row.
    pub train_ll: f64,
    pub dev_ll: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_ll,dev_ll\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{}", r.epoch, r.train_ll, r.dev_ll);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }
}

/// A model trainable by gradient ascent on its log-likelihood.
pub trait MleModel: IntensityModel + Clone + Sized {
    fn param_set(&self) -> &ParamSet;
    fn param_set_mut(&mut self) -> &mut ParamSet;

    fn ll_grad(&self, timeline: &Timeline, mc_samples: usize, rng: &mut ChaCha8Rng)
        -> Result<(f64, Grads)>;

    fn evaluate(&self, timeline: &Timeline, mc_samples: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        log_likelihood(self, timeline, mc_samples, rng)
    }
}

impl MleModel for HawkesModel {
    fn param_set(&self) -> &ParamSet {
        HawkesModel::param_set(self)
    }

    fn param_set_mut(&mut self) -> &mut ParamSet {
        HawkesModel::param_set_mut(self)
    }

    /// Exact: the compensator of an exponential kernel has a closed form.
    fn ll_grad(&self, timeline: &Timeline, _: usize, _: &mut ChaCha8Rng) -> Result<(f64, Grads)> {
        let (ll, mut g) = self.exact_log_likelihood(timeline)?;
        if !self.excites() {
            g.0[1].iter_mut().for_each(|v| *v = 0.0);
            g.0[2].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok((ll, g))
    }

    fn evaluate(&self, timeline: &Timeline, _: usize, _: &mut ChaCha8Rng) -> Result<f64> {
        Ok(self.exact_log_likelihood(timeline)?.0)
    }
}

impl MleModel for AttentiveModel {
    fn param_set(&self) -> &ParamSet {
        AttentiveModel::param_set(self)
    }

    fn param_set_mut(&mut self) -> &mut ParamSet {
        AttentiveModel::param_set_mut(self)
    }

    fn ll_grad(&self, timeline: &Timeline, mc: usize, rng: &mut ChaCha8Rng) -> Result<(f64, Grads)> {
        AttentiveModel::ll_grad(self, timeline, mc, rng)
    }
}

impl BaseModel {
    pub fn train(
        self,
        train: &[Timeline],
        dev: &[Timeline],
        config: &TrainConfig,
    ) -> Result<(BaseModel, TrainLog)> {
        Ok(match self {
            BaseModel::Hawkes(m) => {
                let (m, log) = train_mle(m, train, dev, config)?;
                (BaseModel::Hawkes(m), log)
            }
            BaseModel::Attentive(m) => {
                let (m, log) = train_mle(m, train, dev, config)?;
                (BaseModel::Attentive(m), log)
            }
        })
    }
}

fn sequence_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    // splitmix-style mixing keeps per-sequence streams independent
    let mut z = seed
        .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn observed_count(timelines: &[Timeline]) -> usize {
    timelines.iter().map(|t| t.observed().count()).sum()
}

#[cfg(feature = "parallel")]
fn map_indices<T: Send, F: Fn(usize) -> T + Sync + Send>(idx: &[usize], f: F) -> Vec<T> {
    use rayon::prelude::*;
    idx.par_iter().map(|&i| f(i)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_indices<T, F: Fn(usize) -> T>(idx: &[usize], f: F) -> Vec<T> {
    idx.iter().map(|&i| f(i)).collect()
}

/// Mean per-event log-likelihood over `timelines`, using a fixed random stream
/// so successive evaluations are comparable.
pub(crate) fn mean_ll<M: MleModel>(model: &M, timelines: &[Timeline], mc: usize, seed: u64) -> Result<f64> {
    let idx: Vec<usize> = (0..timelines.len()).collect();
    let parts = map_indices(&idx, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(seed, usize::MAX, i));
        model.evaluate(&timelines[i], mc, &mut rng)
    });
    let mut total = 0.0;
    for (i, p) in parts.into_iter().enumerate() {
        let v = p?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("log-likelihood of sequence {i} is {v}")));
        }
        total += v;
    }
    Ok(total / observed_count(timelines).max(1) as f64)
}

/// Maximizes the log-likelihood with Adam and returns the parameters of the
/// epoch with the best dev log-likelihood (the initialization counts as epoch 0).
pub fn train_mle<M: MleModel>(
    mut model: M,
    train: &[Timeline],
    dev: &[Timeline],
    config: &TrainConfig,
) -> Result<(M, TrainLog)> {
    let n_events = observed_count(train);
    if train.is_empty() || n_events == 0 {
        return Err(Error::EmptyDataset("training split has no observed events".into()));
    }
    if config.mc_samples_per_interval == 0 {
        return Err(Error::InvalidArgument("mc_samples_per_interval must be >= 1".into()));
    }
    if !(config.lr > 0.0) {
        return Err(Error::InvalidArgument("learning rate must be > 0".into()));
    }
    let mc = config.mc_samples_per_interval;
    let select: &[Timeline] = if dev.is_empty() { train } else { dev };
    let eval_seed = config.seed ^ 0xD1B5_4A32_D192_ED03;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.lr);
    let mut log = TrainLog::default();
    let init_dev = mean_ll(&model, select, mc, eval_seed)?;
    log.records.push(EpochRecord {
        epoch: 0,
        train_ll: f64::NAN,
        dev_ll: init_dev,
    });
    let mut best = (init_dev, model.clone());
    let mut stale = 0;
    let batch = if config.batch_size == 0 {
        train.len()
    } else {
        config.batch_size
    };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_ll = 0.0;
        for chunk in order.chunks(batch) {
            let results = map_indices(chunk, |i| {
                let mut r = ChaCha8Rng::seed_from_u64(sequence_seed(config.seed, epoch, i));
                model.ll_grad(&train[i], mc, &mut r)
            });
            let mut grads = model.param_set().zero_grads();
            let mut batch_events = 0;
            for (&i, res) in chunk.iter().zip(results) {
                let (ll, g) = res.map_err(|e| match e {
                    Error::ZeroIntensity { t, value } => Error::NonFinite(format!(
                        "sequence {i}: intensity {value} at observed event t={t}"
                    )),
                    other => other,
                })?;
                if !ll.is_finite() || !g.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch}, sequence {i}: log-likelihood {ll}"
                    )));
                }
                epoch_ll += ll;
                batch_events += train[i].observed().count();
                grads.add_assign(&g);
            }
            grads.scale(-1.0 / batch_events.max(1) as f64);
            opt.step(model.param_set_mut(), &grads);
            if !model.param_set().all_finite() {
                return Err(Error::NonFinite(format!("parameters diverged in epoch {epoch}")));
            }
        }
        let dev_ll = mean_ll(&model, select, mc, eval_seed)?;
        let train_ll = epoch_ll / n_events as f64;
        log::info!("epoch {epoch}: train ll {train_ll:.5}, dev ll {dev_ll:.5}");
        log.records.push(EpochRecord {
            epoch,
            train_ll,
            dev_ll,
        });
        if dev_ll > best.0 {
            best = (dev_ll, model.clone());
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok((best.1, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Occurrence, TypeKey};

    #[test]
    fn poisson_rate_converges_to_count_over_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = HawkesModel::poisson(&[2.0]).unwrap();
        let train: Vec<Timeline> = (0..20)
            .map(|_| Timeline::new(truth.simulate(10.0, &mut rng), 0.0, 10.0))
            .collect();
        let count: usize = train.iter().map(|t| t.events.len()).sum();
        let cfg = TrainConfig {
            lr: 0.05,
            epochs: 400,
            batch_size: 0,
            patience: 0,
            ..Default::default()
        };
        let start = HawkesModel::poisson(&[0.5]).unwrap();
        let (m, log) = train_mle(start, &train, &[], &cfg).unwrap();
        let mle = count as f64 / 200.0;
        assert!((m.params().mu[0] - mle).abs() < 1e-3 * mle);
        assert!(log.best().unwrap().dev_ll >= log.records[0].dev_ll);
    }

    #[test]
    fn empty_training_split_rejected() {
        let m = HawkesModel::poisson(&[1.0]).unwrap();
        let res = train_mle(m, &[], &[], &TrainConfig::default());
        assert!(matches!(res, Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn csv_log_has_header() {
        let m = HawkesModel::poisson(&[1.0]).unwrap();
        let tl = Timeline::new(vec![Occurrence::new(0.5, TypeKey::Categorical(0))], 0.0, 2.0);
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let (_, log) = train_mle(m, std::slice::from_ref(&tl), std::slice::from_ref(&tl), &cfg).unwrap();
        let csv = log.to_csv();
        assert!(csv.starts_with("epoch,train_ll,dev_ll\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
