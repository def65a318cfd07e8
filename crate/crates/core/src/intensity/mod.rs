//! Intensity functions `λ_k(t | history)` and their log-likelihood.
//!
//! Two models implement [`IntensityModel`]: a parametric Hawkes process
//! ([`HawkesModel`]) and a continuous-time attention model
//! ([`AttentiveModel`]). Both are trained by [`train_mle`].

mod attentive;
mod hawkes;
mod train;

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Occurrence, Timeline, TypeKey};

pub use attentive::{AttentiveConfig, AttentiveModel, Encoder, EncoderContext, EncoderSpec};
pub use hawkes::{HawkesModel, HawkesParams};
pub use train::{train_mle, EpochRecord, MleModel, TrainConfig, TrainLog};

/// Above this many types, structured spaces are never enumerated.
pub const MAX_ENUMERABLE: u64 = 1 << 20;

/// The set of event types a model assigns intensity to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TypeSpace {
    Categorical { categories: u32 },
    Structured { entities: u32, predicates: u32 },
}

/// Fixed attributes of a structured type; unset fields range over the vocabulary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Restriction {
    pub subject: Option<u32>,
    pub predicate: Option<u32>,
    pub object: Option<u32>,
}

impl TypeSpace {
    pub fn size(&self) -> u64 {
        match *self {
            TypeSpace::Categorical { categories } => categories as u64,
            TypeSpace::Structured {
                entities,
                predicates,
            } => entities as u64 * entities as u64 * predicates as u64,
        }
    }

    pub fn contains(&self, key: TypeKey) -> bool {
        match (*self, key) {
            (TypeSpace::Categorical { categories }, TypeKey::Categorical(c)) => c < categories,
            (
                TypeSpace::Structured {
                    entities,
                    predicates,
                },
                TypeKey::Structured {
                    subject,
                    predicate,
                    object,
                },
            ) => subject < entities && object < entities && predicate < predicates,
            _ => false,
        }
    }

    /// Types matching `restriction`, in ascending key order.
    pub fn matching(&self, restriction: &Restriction) -> Result<Vec<TypeKey>> {
        match *self {
            TypeSpace::Categorical { categories } => {
                if restriction != &Restriction::default() {
                    return Err(Error::InvalidArgument(
                        "attribute restrictions apply to structured types only".into(),
                    ));
                }
                Ok((0..categories).map(TypeKey::Categorical).collect())
            }
            TypeSpace::Structured {
                entities,
                predicates,
            } => {
                let range = |fixed: Option<u32>, n: u32| match fixed {
                    Some(v) if v < n => v..v + 1,
                    Some(_) => 0..0,
                    None => 0..n,
                };
                let count = range(restriction.subject, entities).len() as u64
                    * range(restriction.predicate, predicates).len() as u64
                    * range(restriction.object, entities).len() as u64;
                if count > MAX_ENUMERABLE {
                    return Err(Error::InvalidArgument(format!(
                        "restriction leaves {count} candidate types; fix more attributes"
                    )));
                }
                let mut out = Vec::with_capacity(count as usize);
                for subject in range(restriction.subject, entities) {
                    for predicate in range(restriction.predicate, predicates) {
                        for object in range(restriction.object, entities) {
                            out.push(TypeKey::Structured {
                                subject,
                                predicate,
                                object,
                            });
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn enumerate(&self) -> Result<Vec<TypeKey>> {
        self.matching(&Restriction::default())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TypeKey {
        match *self {
            TypeSpace::Categorical { categories } => {
                TypeKey::Categorical(rng.random_range(0..categories))
            }
            TypeSpace::Structured {
                entities,
                predicates,
            } => TypeKey::Structured {
                subject: rng.random_range(0..entities),
                predicate: rng.random_range(0..predicates),
                object: rng.random_range(0..entities),
            },
        }
    }
}

/// A constant rate valid on `[from, until)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThinningBound {
    pub rate: f64,
    pub until: f64,
}

pub(crate) fn check_history(history: &[Occurrence], t: f64) -> Result<()> {
    if let Some(last) = history.last() {
        if !(t > last.time) {
            return Err(Error::NotAfterHistory { t, last: last.time });
        }
    }
    Ok(())
}

pub trait IntensityModel: Send + Sync {
    fn type_space(&self) -> TypeSpace;

    /// `λ_k(t)` for each key; every history event must precede `t`.
    fn intensities(&self, history: &[Occurrence], keys: &[TypeKey], t: f64) -> Result<Vec<f64>>;

    fn intensity(&self, history: &[Occurrence], key: TypeKey, t: f64) -> Result<f64> {
        Ok(self.intensities(history, &[key], t)?[0])
    }

    /// `Σ_k λ_k(t)` over the whole type space.
    fn total_intensity(&self, history: &[Occurrence], t: f64) -> Result<f64> {
        let keys = self.type_space().enumerate()?;
        Ok(self.intensities(history, &keys, t)?.iter().sum())
    }

    /// Unbiased estimate of `Σ_k λ_k(t)` used by the Monte Carlo survival term.
    fn survival_rate<R: Rng>(&self, history: &[Occurrence], t: f64, _rng: &mut R) -> Result<f64>
    where
        Self: Sized,
    {
        self.total_intensity(history, t)
    }

    /// Upper bound on the total intensity from `from` onwards, given no new events.
    fn thinning_bound(&self, history: &[Occurrence], from: f64) -> Result<ThinningBound>;
}

/// `Σ_i log λ_{k_i}(t_i) − ∫ Σ_k λ_k` over the timeline's window, with the
/// integral estimated from `mc_samples` uniform draws per inter-event interval.
pub fn log_likelihood<M: IntensityModel, R: Rng>(
    model: &M,
    timeline: &Timeline,
    mc_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if mc_samples == 0 {
        return Err(Error::InvalidArgument("mc_samples must be >= 1".into()));
    }
    let events = &timeline.events;
    let mut ll = 0.0;
    for (_, e) in timeline.observed() {
        let p = timeline.prefix_len(e.time);
        let lam = model.intensity(&events[..p], e.key, e.time)?;
        if !(lam > 0.0) || !lam.is_finite() {
            return Err(Error::ZeroIntensity { t: e.time, value: lam });
        }
        ll += lam.ln();
    }
    for (a, b) in survival_intervals(timeline) {
        let width = b - a;
        let mut acc = 0.0;
        for _ in 0..mc_samples {
            let u = a + width * rng.random::<f64>();
            if u <= a {
                continue;
            }
            let p = timeline.prefix_len(u);
            acc += model.survival_rate(&events[..p], u, rng)?;
        }
        ll -= width * acc / mc_samples as f64;
    }
    Ok(ll)
}

/// Consecutive non-empty intervals between the window edges and observed event times.
pub fn survival_intervals(timeline: &Timeline) -> Vec<(f64, f64)> {
    let mut cuts = vec![timeline.window_start];
    cuts.extend(timeline.observed().map(|(_, e)| e.time));
    cuts.push(timeline.window_end);
    cuts.windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| (w[0], w[1]))
        .collect()
}

/// A trained base model of either family, as stored in checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BaseModel {
    Hawkes(HawkesModel),
    Attentive(AttentiveModel),
}

const CHECKPOINT_FORMAT: &str = "causeway-intensity-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    format: String,
    version: u32,
    model: T,
}

impl BaseModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self,
        };
        let text = serde_json::to_string(&ck)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint<BaseModel> = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck.model)
    }
}

impl IntensityModel for BaseModel {
    fn type_space(&self) -> TypeSpace {
        match self {
            BaseModel::Hawkes(m) => m.type_space(),
            BaseModel::Attentive(m) => m.type_space(),
        }
    }

    fn intensities(&self, history: &[Occurrence], keys: &[TypeKey], t: f64) -> Result<Vec<f64>> {
        match self {
            BaseModel::Hawkes(m) => m.intensities(history, keys, t),
            BaseModel::Attentive(m) => m.intensities(history, keys, t),
        }
    }

    fn total_intensity(&self, history: &[Occurrence], t: f64) -> Result<f64> {
        match self {
            BaseModel::Hawkes(m) => m.total_intensity(history, t),
            BaseModel::Attentive(m) => m.total_intensity(history, t),
        }
    }

    fn survival_rate<R: Rng>(&self, history: &[Occurrence], t: f64, rng: &mut R) -> Result<f64> {
        match self {
            BaseModel::Hawkes(m) => m.survival_rate(history, t, rng),
            BaseModel::Attentive(m) => m.survival_rate(history, t, rng),
        }
    }

    fn thinning_bound(&self, history: &[Occurrence], from: f64) -> Result<ThinningBound> {
        match self {
            BaseModel::Hawkes(m) => m.thinning_bound(history, from),
            BaseModel::Attentive(m) => m.thinning_bound(history, from),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restricted_enumeration() {
        let space = TypeSpace::Structured {
            entities: 3,
            predicates: 2,
        };
        assert_eq!(space.size(), 18);
        let r = Restriction {
            subject: Some(1),
            predicate: Some(0),
            object: None,
        };
        let keys = space.matching(&r).unwrap();
        assert_eq!(keys.len(), 3);
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        let all = space.enumerate().unwrap();
        assert!(keys.iter().all(|k| all.contains(k)));
        let none = Restriction {
            subject: Some(7),
            ..Default::default()
        };
        assert!(space.matching(&none).unwrap().is_empty());
    }

    #[test]
    fn intervals_skip_ties() {
        let k = TypeKey::Categorical(0);
        let tl = Timeline::new(
            vec![
                Occurrence::new(1.0, k),
                Occurrence::new(1.0, k),
                Occurrence::new(2.5, k),
            ],
            0.0,
            4.0,
        );
        assert_eq!(
            survival_intervals(&tl),
            vec![(0.0, 1.0), (1.0, 2.5), (2.5, 4.0)]
        );
    }
}
