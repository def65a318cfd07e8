//! Rule-structured synthetic event data and an oracle cause generator that
//! answers abduction prompts from the known rules.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abduction::{BlockStyle, ChatBackend, ChatRequest, EventBlock};
use crate::error::{Error, Result};
use crate::event::{default_epoch, Dataset, Event, EventType, Schema, Sequence};

/// Delay between a cause and the effect it triggers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LagDist {
    Uniform { lo: f64, hi: f64 },
    /// `delay` plus an exponential with the given rate.
    Exponential { delay: f64, rate: f64 },
}

impl LagDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LagDist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi > lo,
            LagDist::Exponential { delay, rate } => delay.is_finite() && delay >= 0.0 && rate.is_finite() && rate > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid lag distribution {self:?}")))
        }
    }

    pub fn density(&self, lag: f64) -> f64 {
        match *self {
            LagDist::Uniform { lo, hi } if lag >= lo && lag < hi => 1.0 / (hi - lo),
            LagDist::Uniform { .. } => 0.0,
            LagDist::Exponential { delay, rate } if lag >= delay => rate * (-rate * (lag - delay)).exp(),
            LagDist::Exponential { .. } => 0.0,
        }
    }

    fn max_density(&self) -> f64 {
        match *self {
            LagDist::Uniform { lo, hi } => 1.0 / (hi - lo),
            LagDist::Exponential { rate, .. } => rate,
        }
    }

    /// Whether the density is zero for every lag beyond `lag`.
    fn expired(&self, lag: f64) -> bool {
        match *self {
            LagDist::Uniform { hi, .. } => lag >= hi,
            LagDist::Exponential { .. } => false,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            LagDist::Uniform { lo, hi } => 0.5 * (lo + hi),
            LagDist::Exponential { delay, rate } => delay + 1.0 / rate,
        }
    }

    pub fn contains(&self, lag: f64) -> bool {
        self.density(lag) > 0.0
    }
}

/// Each `cause` event triggers on average `strength` `effect` events, spread by `lag`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub cause: String,
    pub effect: String,
    pub strength: f64,
    pub lag: LagDist,
}

/// Persisted ground truth: the type names and the rules between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleTable {
    pub types: Vec<String>,
    pub rules: Vec<Rule>,
}

impl RuleTable {
    pub fn causes_of<'a>(&'a self, effect: &'a str) -> impl Iterator<Item = &'a Rule> + 'a {
        self.rules.iter().filter(move |r| r.effect == effect)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub types: Vec<String>,
    /// Background rate per type, events per day.
    pub base_rates: Vec<f64>,
    pub rules: Vec<Rule>,
    pub horizon: f64,
    pub sequences: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Ten types in five cause/effect pairs with delayed lag windows, plus a
    /// couple of cross rules.
    pub fn ten_type_benchmark(sequences: usize, seed: u64) -> Self {
        let types: Vec<String> = [
            "alarm", "bridge", "cargo", "drought", "ember", "flood", "glacier", "harvest", "island", "jungle",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let rule = |c: usize, e: usize, strength: f64, lo: f64, hi: f64| Rule {
            cause: types[c].clone(),
            effect: types[e].clone(),
            strength,
            lag: LagDist::Uniform { lo, hi },
        };
        let rules = vec![
            rule(0, 1, 0.8, 2.0, 3.0),
            rule(2, 3, 0.8, 4.0, 5.0),
            rule(4, 5, 0.8, 1.0, 2.0),
            rule(6, 7, 0.8, 3.0, 4.0),
            rule(8, 9, 0.8, 5.0, 6.0),
            rule(1, 4, 0.1, 1.0, 3.0),
            rule(3, 8, 0.1, 1.0, 3.0),
        ];
        let base_rates = (0..10).map(|i| if i % 2 == 0 { 0.06 } else { 0.03 }).collect();
        Self {
            types,
            base_rates,
            rules,
            horizon: 60.0,
            sequences,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one type".into()));
        }
        let mut seen = HashSet::new();
        for t in &self.types {
            EventType::categorical(t).validate().map_err(Error::Config)?;
            if !seen.insert(t.as_str()) {
                return Err(Error::Config(format!("duplicate type name {t:?}")));
            }
        }
        if self.base_rates.len() != self.types.len() {
            return Err(Error::Config(format!(
                "{} base rates for {} types",
                self.base_rates.len(),
                self.types.len()
            )));
        }
        if let Some(r) = self.base_rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::Config(format!("base rates must be positive, got {r}")));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        let mut offspring = vec![0.0; self.types.len()];
        for r in &self.rules {
            let c = self.type_index(&r.cause)?;
            self.type_index(&r.effect)?;
            if !(r.strength.is_finite() && r.strength >= 0.0) {
                return Err(Error::Config(format!("rule strength must be >= 0, got {}", r.strength)));
            }
            r.lag.validate()?;
            offspring[c] += r.strength;
        }
        // every type spawning fewer than one event on average keeps cascades finite
        if let Some((i, o)) = offspring.iter().enumerate().find(|(_, o)| **o >= 1.0) {
            return Err(Error::Config(format!(
                "type {:?} triggers {o} events on average; must be < 1",
                self.types[i]
            )));
        }
        Ok(())
    }

    fn type_index(&self, name: &str) -> Result<usize> {
        self.types
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::Config(format!("rule names unknown type {name:?}")))
    }

    pub fn rule_table(&self) -> RuleTable {
        RuleTable {
            types: self.types.clone(),
            rules: self.rules.clone(),
        }
    }
}

/// Rules resolved to type indices.
struct Compiled {
    /// `by_cause[c]` lists `(effect, strength, lag)`.
    by_cause: Vec<Vec<(usize, f64, LagDist)>>,
    base: Vec<f64>,
}

impl Compiled {
    fn new(spec: &SyntheticSpec) -> Result<Self> {
        let mut by_cause = vec![Vec::new(); spec.types.len()];
        for r in &spec.rules {
            by_cause[spec.type_index(&r.cause)?].push((spec.type_index(&r.effect)?, r.strength, r.lag));
        }
        Ok(Self {
            by_cause,
            base: spec.base_rates.clone(),
        })
    }

    fn intensities(&self, history: &[(f64, usize)], t: f64) -> Vec<f64> {
        let mut lam = self.base.clone();
        for &(s, c) in history {
            for &(e, w, lag) in &self.by_cause[c] {
                lam[e] += w * lag.density(t - s);
            }
        }
        lam
    }

    fn simulate(&self, horizon: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, usize)> {
        let base_total: f64 = self.base.iter().sum();
        let mut history: Vec<(f64, usize)> = Vec::new();
        let mut t = 0.0;
        loop {
            // Excitation only comes from past events and each kernel stays below its
            // peak density, so the bound holds until the next accepted event.
            let bound = base_total
                + history
                    .iter()
                    .flat_map(|&(s, c)| self.by_cause[c].iter().map(move |r| (s, r)))
                    .filter(|(s, (_, _, lag))| !lag.expired(t - s))
                    .map(|(_, (_, w, lag))| w * lag.max_density())
                    .sum::<f64>();
            loop {
                let u: f64 = rng.random();
                t += -(1.0 - u).ln() / bound;
                if t >= horizon {
                    return history;
                }
                let lam = self.intensities(&history, t);
                let total: f64 = lam.iter().sum();
                let v: f64 = rng.random::<f64>() * bound;
                if v < total {
                    let mut acc = 0.0;
                    let mut k = lam.len() - 1;
                    for (i, l) in lam.iter().enumerate() {
                        acc += l;
                        if v < acc {
                            k = i;
                            break;
                        }
                    }
                    history.push((t, k));
                    break;
                }
            }
        }
    }
}

/// True intensities of every type at `t` given earlier events (indices into `spec.types`).
pub fn true_intensities(spec: &SyntheticSpec, history: &[(f64, usize)], t: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    let c = Compiled::new(spec)?;
    let before: Vec<(f64, usize)> = history.iter().copied().filter(|(s, _)| *s < t).collect();
    Ok(c.intensities(&before, t))
}

/// Simulates `spec.sequences` independent sequences on `[0, horizon)` by thinning.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, RuleTable)> {
    spec.validate()?;
    let compiled = Compiled::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.sequences.max(1).to_string().len();
    let sequences = (0..spec.sequences)
        .map(|i| {
            let events = compiled
                .simulate(spec.horizon, &mut rng)
                .into_iter()
                .map(|(t, k)| Event::new(t, EventType::categorical(&spec.types[k])))
                .collect();
            Sequence {
                id: format!("syn-{i:0width$}"),
                events,
                window_start: 0.0,
                window_end: spec.horizon,
            }
        })
        .collect();
    let mut dataset = Dataset::from_sequences(Schema::Categorical, sequences, default_epoch())?;
    // keep every type in the vocabulary even if it never fired
    dataset.vocab.categories = {
        let mut v = spec.types.clone();
        v.sort();
        v
    };
    Ok((dataset, spec.rule_table()))
}

/// Answers abduction prompts with the true causes of the queried effect. It
/// reads the last effect block of the prompt and writes one cause block per
/// rule, dated one mean lag earlier.
pub struct OracleBackend {
    rules: RuleTable,
}

impl OracleBackend {
    pub fn new(rules: RuleTable) -> Self {
        Self { rules }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(RuleTable::load(path)?))
    }
}

fn parse_effect(prompt: &str) -> Option<(BlockStyle, String, NaiveDate)> {
    let lines: Vec<&str> = prompt.lines().collect();
    let start = lines
        .iter()
        .rposition(|l| matches!(l.trim(), "effect" | "effect event"))?;
    let style = if lines[start].trim() == "effect" {
        BlockStyle::Social
    } else {
        BlockStyle::Review
    };
    let (mut label, mut date) = (None, None);
    for l in &lines[start + 1..] {
        let Some((k, v)) = l.split_once(':') else { break };
        let v = v.trim();
        match k.trim() {
            "predicate" | "product category" => label = label.or(Some(v.to_string())),
            "time" | "event time" => date = date.or(NaiveDate::parse_from_str(v, "%Y-%m-%d").ok()),
            _ => {}
        }
    }
    Some((style, label?, date?))
}

impl ChatBackend for OracleBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let (style, label, date) = parse_effect(&request.prompt)
            .ok_or_else(|| Error::Backend("oracle found no effect block in the prompt".into()))?;
        let blocks: Vec<String> = self
            .rules
            .causes_of(&label)
            .enumerate()
            .map(|(i, r)| {
                let back = r.lag.mean().ceil().max(1.0) as u64;
                let block = EventBlock {
                    label: r.cause.clone(),
                    time: date.checked_sub_days(Days::new(back)).unwrap_or(date),
                    subject: None,
                    object: None,
                    title: None,
                    summary: None,
                    text: None,
                };
                style.render_cause(i + 1, &block)
            })
            .collect();
        if blocks.is_empty() {
            return Ok("No plausible cause is known for this event.\n".into());
        }
        Ok(blocks.join("\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SyntheticSpec::ten_type_benchmark(1, 0);
        s.base_rates[0] = 0.0;
        assert!(generate_synthetic(&s).is_err());
        let mut s = SyntheticSpec::ten_type_benchmark(1, 0);
        s.rules[0].strength = 1.5;
        assert!(s.validate().is_err());
        let mut s = SyntheticSpec::ten_type_benchmark(1, 0);
        s.rules[0].cause = "nope".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn deterministic() {
        let s = SyntheticSpec::ten_type_benchmark(5, 3);
        assert_eq!(generate_synthetic(&s).unwrap().0, generate_synthetic(&s).unwrap().0);
    }

    #[test]
    fn oracle_answers_with_rule_causes() {
        let s = SyntheticSpec::ten_type_benchmark(1, 0);
        let oracle = OracleBackend::new(s.rule_table());
        let prompt = "intro\n\neffect event\nproduct category: bridge\nevent time: 2020-01-10\n";
        let req = ChatRequest {
            model: "m".into(),
            temperature: 0.0,
            prompt: prompt.into(),
        };
        let out = oracle.complete(&req).unwrap();
        let parsed = crate::abduction::parse_causes(&out, Schema::Categorical);
        assert_eq!(parsed.causes.len(), 1);
        assert_eq!(parsed.causes[0].label, "alarm");
        assert_eq!(parsed.causes[0].time, NaiveDate::from_ymd_opt(2020, 1, 7).unwrap());
        let none = prompt.replace("bridge", "alarm");
        let parsed = crate::abduction::parse_causes(
            &oracle
                .complete(&ChatRequest {
                    prompt: none,
                    ..req
                })
                .unwrap(),
            Schema::Categorical,
        );
        assert!(parsed.causes.is_empty());
    }
}
