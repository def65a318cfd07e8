//! Event data model: typed, timestamped occurrences grouped into sequences,
//! plus JSONL ingestion, date-based splitting and text rendering.
//!
//! Times are real-valued days since the dataset epoch. Within a sequence,
//! events are ordered by time with ties kept in input order.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Characters that would make the `PREDICATE(SUBJECT, OBJECT)` rendering ambiguous.
const RESERVED: [char; 3] = ['(', ')', ','];

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventType {
    Structured {
        subject: String,
        predicate: String,
        object: String,
    },
    Categorical {
        category: String,
    },
}

impl EventType {
    pub fn structured(subject: &str, predicate: &str, object: &str) -> Self {
        EventType::Structured {
            subject: subject.to_string(),
            predicate: predicate.to_string(),
            object: object.to_string(),
        }
    }

    pub fn categorical(category: &str) -> Self {
        EventType::Categorical {
            category: category.to_string(),
        }
    }

    pub fn schema(&self) -> Schema {
        match self {
            EventType::Structured { .. } => Schema::Structured,
            EventType::Categorical { .. } => Schema::Categorical,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        match self {
            EventType::Structured {
                subject,
                predicate,
                object,
            } => {
                for (name, value) in [
                    ("subject", subject),
                    ("predicate", predicate),
                    ("object", object),
                ] {
                    if value.trim().is_empty() {
                        return Err(format!("empty {name}"));
                    }
                    if value.contains(RESERVED) {
                        return Err(format!("{name} `{value}` contains one of ( ) ,"));
                    }
                }
                Ok(())
            }
            EventType::Categorical { category } => {
                if category.trim().is_empty() {
                    Err("empty category".into())
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventType::Structured {
                subject,
                predicate,
                object,
            } => write!(f, "{predicate}({subject}, {object})"),
            EventType::Categorical { category } => f.write_str(category),
        }
    }
}

/// Canonical text of an event type, with the mark appended after `": "` when present.
pub fn render_type_text(kind: &EventType, mark: Option<&str>) -> String {
    match mark {
        Some(m) if !m.is_empty() => format!("{kind}: {m}"),
        _ => kind.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Structured,
    Categorical,
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "structured" => Ok(Schema::Structured),
            "categorical" => Ok(Schema::Categorical),
            other => Err(Error::UnknownSchema(other.to_string())),
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::Structured => "structured",
            Schema::Categorical => "categorical",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(rename = "type")]
    pub kind: EventType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mark: Option<String>,
}

impl Event {
    pub fn new(time: f64, kind: EventType) -> Self {
        Self {
            time,
            kind,
            mark: None,
        }
    }

    pub fn with_mark(mut self, mark: impl Into<String>) -> Self {
        self.mark = Some(mark.into());
        self
    }

    pub fn text(&self) -> String {
        render_type_text(&self.kind, self.mark.as_deref())
    }
}

/// Integer id form of an [`EventType`], ordered by vocabulary id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TypeKey {
    Structured {
        subject: u32,
        predicate: u32,
        object: u32,
    },
    Categorical(u32),
}

/// A model-level event: time plus encoded type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occurrence {
    pub time: f64,
    pub key: TypeKey,
}

impl Occurrence {
    pub fn new(time: f64, key: TypeKey) -> Self {
        Self { time, key }
    }
}

/// Events of one sequence together with the observation window `[window_start, window_end)`.
///
/// Events before `window_start` are conditioning context only; they belong to
/// an earlier split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub id: String,
    pub events: Vec<Event>,
    pub window_start: f64,
    pub window_end: f64,
}

impl Sequence {
    pub fn observed(&self) -> impl Iterator<Item = &Event> {
        self.events
            .iter()
            .filter(move |e| e.time >= self.window_start && e.time < self.window_end)
    }

    pub fn observed_len(&self) -> usize {
        self.observed().count()
    }
}

/// Encoded sequence consumed by the intensity models.
#[derive(Clone, Debug, PartialEq)]
pub struct Timeline {
    pub events: Vec<Occurrence>,
    pub window_start: f64,
    pub window_end: f64,
}

impl Timeline {
    pub fn new(events: Vec<Occurrence>, window_start: f64, window_end: f64) -> Self {
        Self {
            events,
            window_start,
            window_end,
        }
    }

    /// Number of events strictly before `t`.
    pub fn prefix_len(&self, t: f64) -> usize {
        self.events.partition_point(|e| e.time < t)
    }

    pub fn observed(&self) -> impl Iterator<Item = (usize, &Occurrence)> {
        self.events
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.time >= self.window_start && e.time < self.window_end)
    }
}

/// Sorted name tables; ids are positions, assigned lexicographically.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub entities: Vec<String>,
    pub predicates: Vec<String>,
    pub categories: Vec<String>,
}

impl Vocab {
    pub fn from_names(
        entities: impl IntoIterator<Item = String>,
        predicates: impl IntoIterator<Item = String>,
        categories: impl IntoIterator<Item = String>,
    ) -> Self {
        fn sorted(it: impl IntoIterator<Item = String>) -> Vec<String> {
            let mut v: Vec<String> = it.into_iter().collect();
            v.sort();
            v.dedup();
            v
        }
        Self {
            entities: sorted(entities),
            predicates: sorted(predicates),
            categories: sorted(categories),
        }
    }

    fn id(table: &[String], name: &str) -> Option<u32> {
        table
            .binary_search_by(|probe| probe.as_str().cmp(name))
            .ok()
            .map(|i| i as u32)
    }

    pub fn entity_id(&self, name: &str) -> Option<u32> {
        Self::id(&self.entities, name)
    }

    pub fn predicate_id(&self, name: &str) -> Option<u32> {
        Self::id(&self.predicates, name)
    }

    pub fn category_id(&self, name: &str) -> Option<u32> {
        Self::id(&self.categories, name)
    }

    pub fn encode(&self, kind: &EventType) -> Option<TypeKey> {
        match kind {
            EventType::Structured {
                subject,
                predicate,
                object,
            } => Some(TypeKey::Structured {
                subject: self.entity_id(subject)?,
                predicate: self.predicate_id(predicate)?,
                object: self.entity_id(object)?,
            }),
            EventType::Categorical { category } => {
                self.category_id(category).map(TypeKey::Categorical)
            }
        }
    }

    pub fn decode(&self, key: TypeKey) -> EventType {
        match key {
            TypeKey::Structured {
                subject,
                predicate,
                object,
            } => EventType::Structured {
                subject: self.entities[subject as usize].clone(),
                predicate: self.predicates[predicate as usize].clone(),
                object: self.entities[object as usize].clone(),
            },
            TypeKey::Categorical(c) => EventType::Categorical {
                category: self.categories[c as usize].clone(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: Schema,
    pub sequences: Vec<Sequence>,
    pub vocab: Vocab,
    pub epoch: NaiveDate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub sequences: usize,
    pub events: usize,
    pub entities: usize,
    pub predicates: usize,
    pub categories: usize,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} sequences, {} event tokens, {} entities, {} predicates, {} categories",
            self.sequences, self.events, self.entities, self.predicates, self.categories
        )
    }
}

pub fn default_epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")
}

impl Dataset {
    /// Builds a dataset from raw sequences: sorts events stably by time and
    /// derives the vocabulary from the events.
    pub fn from_sequences(
        schema: Schema,
        mut sequences: Vec<Sequence>,
        epoch: NaiveDate,
    ) -> Result<Self> {
        let mut entities = Vec::new();
        let mut predicates = Vec::new();
        let mut categories = Vec::new();
        for seq in &mut sequences {
            seq.events.sort_by(|a, b| a.time.total_cmp(&b.time));
            for e in &seq.events {
                if e.kind.schema() != schema {
                    return Err(Error::InvalidArgument(format!(
                        "sequence {} mixes schemas: expected {schema}",
                        seq.id
                    )));
                }
                match &e.kind {
                    EventType::Structured {
                        subject,
                        predicate,
                        object,
                    } => {
                        entities.push(subject.clone());
                        entities.push(object.clone());
                        predicates.push(predicate.clone());
                    }
                    EventType::Categorical { category } => categories.push(category.clone()),
                }
            }
        }
        Ok(Self {
            schema,
            sequences,
            vocab: Vocab::from_names(entities, predicates, categories),
            epoch,
        })
    }

    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(Sequence::observed_len).sum()
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            sequences: self.sequences.len(),
            events: self.num_events(),
            entities: self.vocab.entities.len(),
            predicates: self.vocab.predicates.len(),
            categories: self.vocab.categories.len(),
        }
    }

    pub fn date_of(&self, time: f64) -> NaiveDate {
        date_of(self.epoch, time)
    }

    pub fn time_of(&self, date: NaiveDate) -> f64 {
        (date - self.epoch).num_days() as f64
    }

    pub fn timeline(&self, seq: &Sequence) -> Timeline {
        let events = seq
            .events
            .iter()
            .map(|e| {
                let key = self
                    .vocab
                    .encode(&e.kind)
                    .expect("dataset events resolve to vocabulary ids");
                Occurrence::new(e.time, key)
            })
            .collect();
        Timeline::new(events, seq.window_start, seq.window_end)
    }

    pub fn timelines(&self) -> Vec<Timeline> {
        self.sequences.iter().map(|s| self.timeline(s)).collect()
    }

    pub fn with_window_end(mut self, window_end: f64) -> Self {
        for seq in &mut self.sequences {
            seq.window_end = window_end;
        }
        self
    }

    /// Writes the observed events of every sequence as JSONL.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for seq in &self.sequences {
            for e in seq.observed() {
                let mut obj = serde_json::to_value(e)?;
                obj["seq_id"] = Value::String(seq.id.clone());
                serde_json::to_writer(&mut out, &obj)?;
                out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn date_of(epoch: NaiveDate, time: f64) -> NaiveDate {
    let days = time.floor().max(0.0) as u64;
    epoch
        .checked_add_days(Days::new(days))
        .unwrap_or(NaiveDate::MAX)
}

fn parse_line(
    line: &str,
    lineno: usize,
    path: &str,
    schema: Schema,
) -> Result<(String, Event)> {
    let err = |message: String| Error::Parse {
        path: path.to_string(),
        line: lineno,
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| err(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| err("expected a JSON object".into()))?;

    let time = obj
        .get("time")
        .ok_or_else(|| err("missing field `time`".into()))?
        .as_f64()
        .ok_or_else(|| err("field `time` is not a number".into()))?;
    if !time.is_finite() || time < 0.0 {
        return Err(err(format!("field `time` must be finite and >= 0, got {time}")));
    }

    let seq_id = match obj.get("seq_id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(err("field `seq_id` must be a string".into())),
        None => return Err(err("missing field `seq_id`".into())),
    };

    let ty = obj
        .get("type")
        .ok_or_else(|| err("missing field `type`".into()))?
        .as_object()
        .ok_or_else(|| err("field `type` must be an object".into()))?;
    let field = |name: &str| -> Result<String> {
        ty.get(name)
            .ok_or_else(|| err(format!("missing field `type.{name}`")))?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| err(format!("field `type.{name}` must be a string")))
    };
    let kind = match schema {
        Schema::Structured => EventType::Structured {
            subject: field("subject")?,
            predicate: field("predicate")?,
            object: field("object")?,
        },
        Schema::Categorical => EventType::Categorical {
            category: field("category")?,
        },
    };
    kind.validate().map_err(err)?;

    let mark = match obj.get("mark") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if s.is_empty() => {
            return Err(err("field `mark` must be non-empty when present".into()))
        }
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(err("field `mark` must be a string".into())),
    };

    Ok((seq_id, Event { time, kind, mark }))
}

/// Loads a JSONL event file. Sequences keep the order in which their ids first appear.
///
/// Each sequence's window ends at the end of the last observed day in the file.
pub fn load_dataset(path: &Path, schema: Schema, epoch: NaiveDate) -> Result<Dataset> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Event>> = HashMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (seq_id, event) = parse_line(line, idx + 1, &display, schema)?;
        groups
            .entry(seq_id.clone())
            .or_insert_with(|| {
                order.push(seq_id);
                Vec::new()
            })
            .push(event);
    }
    if order.is_empty() {
        return Err(Error::EmptyDataset(display));
    }
    let max_time = groups
        .values()
        .flatten()
        .map(|e| e.time)
        .fold(0.0_f64, f64::max);
    let window_end = max_time.floor() + 1.0;
    let sequences = order
        .into_iter()
        .map(|id| {
            let events = groups.remove(&id).unwrap_or_default();
            Sequence {
                id,
                events,
                window_start: 0.0,
                window_end,
            }
        })
        .collect();
    Dataset::from_sequences(schema, sequences, epoch)
}

/// Splits every sequence into train `[start, train_end)`, dev `[train_end, dev_end)`
/// and test `[dev_end, end)` windows. Later splits keep earlier events as context.
pub fn split_by_date(
    dataset: &Dataset,
    train_end: NaiveDate,
    dev_end: NaiveDate,
) -> Result<(Dataset, Dataset, Dataset)> {
    if train_end >= dev_end {
        return Err(Error::InvalidArgument(format!(
            "train_end {train_end} must precede dev_end {dev_end}"
        )));
    }
    let b1 = dataset.time_of(train_end);
    let b2 = dataset.time_of(dev_end);
    let cut = |lo: f64, hi: f64| -> Dataset {
        let sequences = dataset
            .sequences
            .iter()
            .map(|s| {
                let start = lo.max(s.window_start);
                let end = hi.min(s.window_end).max(start);
                Sequence {
                    id: s.id.clone(),
                    events: s
                        .events
                        .iter()
                        .filter(|e| e.time < end && (e.time >= s.window_start))
                        .cloned()
                        .collect(),
                    window_start: start,
                    window_end: end,
                }
            })
            .collect();
        Dataset {
            schema: dataset.schema,
            sequences,
            vocab: dataset.vocab.clone(),
            epoch: dataset.epoch,
        }
    };
    let train = cut(f64::NEG_INFINITY, b1);
    let dev = cut(b1, b2);
    let test = cut(b2, f64::INFINITY);
    for (name, split) in [("train", &train), ("dev", &dev), ("test", &test)] {
        if split.num_events() == 0 {
            log::warn!("{name} split is empty for boundaries {train_end} / {dev_end}");
        }
    }
    Ok((train, dev, test))
}
