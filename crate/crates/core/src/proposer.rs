//! Candidate generation from a base intensity model: the highest-intensity
//! types at a known time, and next-event times drawn by Ogata thinning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Occurrence, TypeKey};
use crate::intensity::{IntensityModel, Restriction};

/// Relative slack allowed when checking a candidate against its bound.
const BOUND_SLACK: f64 = 1e-9;
const MAX_THINNING_STEPS: usize = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeProposal {
    pub key: TypeKey,
    pub at_time: f64,
    pub base_intensity: f64,
    /// 1-based position in the base model's ordering.
    pub rank_in_base: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSource {
    Mbr,
    ThinningSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeProposal {
    pub time: f64,
    pub source: TimeSource,
}

/// The `m` types with the highest intensity at `t`, ties broken by ascending key.
pub fn propose_types<M: IntensityModel + ?Sized>(
    model: &M,
    history: &[Occurrence],
    t: f64,
    m: usize,
    restriction: Option<&Restriction>,
) -> Result<Vec<TypeProposal>> {
    if m == 0 {
        return Err(Error::InvalidArgument("M must be >= 1".into()));
    }
    let candidates = model
        .type_space()
        .matching(restriction.unwrap_or(&Restriction::default()))?;
    if candidates.is_empty() {
        return Err(Error::EmptyRestriction);
    }
    let rates = model.intensities(history, &candidates, t)?;
    let mut scored: Vec<(TypeKey, f64)> = candidates.into_iter().zip(rates).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(m)
        .enumerate()
        .map(|(i, (key, base_intensity))| TypeProposal {
            key,
            at_time: t,
            base_intensity,
            rank_in_base: i + 1,
        })
        .collect())
}

/// Draws the next event time after `from` given `history` (no events in between).
pub fn sample_next_time<M: IntensityModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    history: &[Occurrence],
    from: f64,
    rng: &mut R,
) -> Result<f64> {
    if let Some(last) = history.last() {
        if from < last.time {
            return Err(Error::NotAfterHistory { t: from, last: last.time });
        }
    }
    let mut t = from;
    for _ in 0..MAX_THINNING_STEPS {
        let bound = model.thinning_bound(history, t)?;
        if !(bound.rate > 0.0) || !bound.rate.is_finite() {
            if bound.until.is_finite() && bound.rate == 0.0 {
                t = bound.until;
                continue;
            }
            return Err(Error::NonFinite(format!(
                "thinning bound {} at t={t}: no next event can be drawn",
                bound.rate
            )));
        }
        let gap = -(1.0 - rng.random::<f64>()).ln() / bound.rate;
        let cand = t + gap;
        if cand > bound.until {
            t = bound.until;
            continue;
        }
        if cand <= t {
            // the gap underflowed; nudge past t
            t = f64::from_bits(t.to_bits() + 1);
            continue;
        }
        let lam = model.total_intensity(history, cand)?;
        if lam > bound.rate * (1.0 + BOUND_SLACK) {
            return Err(Error::BoundViolated {
                t: cand,
                intensity: lam,
                bound: bound.rate,
            });
        }
        if rng.random::<f64>() * bound.rate < lam {
            return Ok(cand);
        }
        t = cand;
    }
    Err(Error::NonFinite(format!(
        "thinning made no acceptance in {MAX_THINNING_STEPS} steps after t={from}"
    )))
}

/// Monte Carlo estimate of the expected next event time.
pub fn mbr_time<M: IntensityModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    history: &[Occurrence],
    from: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let mut sum = 0.0;
    for _ in 0..n_samples {
        sum += sample_next_time(model, history, from, rng)?;
    }
    Ok(sum / n_samples as f64)
}

/// The MBR estimate followed by `m - 1` independent thinning draws.
pub fn propose_times<M: IntensityModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    history: &[Occurrence],
    from: f64,
    m: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<TimeProposal>> {
    if m == 0 {
        return Err(Error::InvalidArgument("M must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(m);
    out.push(TimeProposal {
        time: mbr_time(model, history, from, n_samples, rng)?,
        source: TimeSource::Mbr,
    });
    for _ in 1..m {
        out.push(TimeProposal {
            time: sample_next_time(model, history, from, rng)?,
            source: TimeSource::ThinningSample,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intensity::{HawkesModel, ThinningBound, TypeSpace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixed(Vec<f64>);

    impl IntensityModel for Fixed {
        fn type_space(&self) -> TypeSpace {
            TypeSpace::Categorical {
                categories: self.0.len() as u32,
            }
        }
        fn intensities(&self, _: &[Occurrence], keys: &[TypeKey], _: f64) -> Result<Vec<f64>> {
            Ok(keys
                .iter()
                .map(|k| match k {
                    TypeKey::Categorical(c) => self.0[*c as usize],
                    _ => unreachable!(),
                })
                .collect())
        }
        fn thinning_bound(&self, _: &[Occurrence], _: f64) -> Result<ThinningBound> {
            Ok(ThinningBound {
                rate: self.0.iter().sum(),
                until: f64::INFINITY,
            })
        }
    }

    fn cats(p: &[TypeProposal]) -> Vec<u32> {
        p.iter()
            .map(|p| match p.key {
                TypeKey::Categorical(c) => c,
                _ => unreachable!(),
            })
            .collect()
    }

    #[test]
    fn top_types_by_intensity() {
        let m = Fixed(vec![0.5, 1.2, 0.3]);
        let p = propose_types(&m, &[], 1.0, 2, None).unwrap();
        assert_eq!(cats(&p), vec![1, 0]);
        assert_eq!(p[1].rank_in_base, 2);
        let all = propose_types(&m, &[], 1.0, 10, None).unwrap();
        assert_eq!(cats(&all), vec![1, 0, 2]);
    }

    #[test]
    fn ties_by_ascending_key() {
        let m = Fixed(vec![0.4, 0.7, 0.4, 0.7]);
        let p = propose_types(&m, &[], 1.0, 4, None).unwrap();
        assert_eq!(cats(&p), vec![1, 3, 0, 2]);
    }

    #[test]
    fn single_draw_mbr_is_that_draw() {
        let m = HawkesModel::poisson(&[2.0]).unwrap();
        let a = mbr_time(&m, &[], 3.0, 1, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = sample_next_time(&m, &[], 3.0, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn time_proposals_are_seeded() {
        let m = HawkesModel::poisson(&[2.0]).unwrap();
        let h = [Occurrence::new(1.0, TypeKey::Categorical(0))];
        let a = propose_times(&m, &h, 1.0, 5, 10, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = propose_times(&m, &h, 1.0, 5, 10, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].source, TimeSource::Mbr);
        assert!(a.iter().all(|p| p.time > 1.0));
        assert_eq!(
            propose_times(&m, &h, 1.0, 1, 10, &mut ChaCha8Rng::seed_from_u64(2))
                .unwrap()
                .len(),
            1
        );
    }

    struct Liar;

    impl IntensityModel for Liar {
        fn type_space(&self) -> TypeSpace {
            TypeSpace::Categorical { categories: 1 }
        }
        fn intensities(&self, _: &[Occurrence], _: &[TypeKey], _: f64) -> Result<Vec<f64>> {
            Ok(vec![5.0])
        }
        fn thinning_bound(&self, _: &[Occurrence], _: f64) -> Result<ThinningBound> {
            Ok(ThinningBound {
                rate: 1.0,
                until: f64::INFINITY,
            })
        }
    }

    #[test]
    fn violated_bound_is_reported() {
        let err = sample_next_time(&Liar, &[], 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, Error::BoundViolated { .. }));
    }
}
