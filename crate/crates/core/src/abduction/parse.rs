use chrono::NaiveDate;

use super::block::CauseHypothesis;
use crate::event::Schema;

/// Hypotheses recovered from a completion, in order, plus a note for every
/// skipped block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parsed {
    pub causes: Vec<CauseHypothesis>,
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Copy, PartialEq)]
enum Field {
    Label,
    Time,
    Subject,
    Object,
    Title,
    Summary,
    Text,
}

fn field_for(label: &str, schema: Schema) -> Option<Field> {
    let f = match (label, schema) {
        ("predicate" | "event type" | "type" | "relation", Schema::Structured) => Field::Label,
        ("product category" | "category" | "event type" | "type", Schema::Categorical) => {
            Field::Label
        }
        ("time" | "event time" | "date", _) => Field::Time,
        ("subject" | "subject name", Schema::Structured) => Field::Subject,
        ("object" | "object name", Schema::Structured) => Field::Object,
        ("headline" | "event headline" | "news headline", Schema::Structured) => Field::Text,
        ("product title" | "title", Schema::Categorical) => Field::Title,
        ("summary text" | "summary", Schema::Categorical) => Field::Summary,
        ("review text" | "review", Schema::Categorical) => Field::Text,
        _ => return None,
    };
    Some(f)
}

fn is_cause_header(line: &str) -> bool {
    let l = line.to_ascii_lowercase();
    let Some(rest) = l.strip_prefix("cause event") else {
        return false;
    };
    rest.trim()
        .trim_end_matches(':')
        .chars()
        .all(|c| c.is_ascii_digit() || c == ' ' || c == '#')
}

fn ends_block(line: &str) -> bool {
    let l = line.to_ascii_lowercase();
    l == "effect" || l == "effect event" || l.starts_with("## example") || l.starts_with("# example")
}

fn parse_date(v: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(v, "%Y-%m-%d")
        .ok()
        .or_else(|| v.get(..10).and_then(|p| NaiveDate::parse_from_str(p, "%Y-%m-%d").ok()))
}

#[derive(Default)]
struct Pending {
    header: String,
    label: Option<String>,
    time: Option<String>,
    subject: Option<String>,
    object: Option<String>,
    title: Option<String>,
    summary: Option<String>,
    text: Option<String>,
}

impl Pending {
    fn finish(self, out: &mut Parsed) {
        let label = match self.label {
            Some(l) => l,
            None => {
                let msg = format!("{}: no predicate or category line; skipped", self.header);
                log::debug!("{msg}");
                out.diagnostics.push(msg);
                return;
            }
        };
        let time = match self.time.as_deref().map(|t| (t, parse_date(t))) {
            Some((_, Some(d))) => d,
            Some((raw, None)) => {
                let msg = format!("{}: unparseable time {raw:?}; skipped", self.header);
                log::debug!("{msg}");
                out.diagnostics.push(msg);
                return;
            }
            None => {
                let msg = format!("{}: no time line; skipped", self.header);
                log::debug!("{msg}");
                out.diagnostics.push(msg);
                return;
            }
        };
        out.causes.push(CauseHypothesis {
            label,
            time,
            subject: self.subject,
            object: self.object,
            title: self.title,
            summary: self.summary,
            text: self.text,
        });
    }
}

/// Extracts `cause event` blocks from free-form model output. Labels match
/// case-insensitively, unknown lines are ignored and blocks lacking a label or
/// a valid date are skipped with a diagnostic.
pub fn parse_causes(text: &str, schema: Schema) -> Parsed {
    let mut out = Parsed::default();
    let mut cur: Option<Pending> = None;
    for raw in text.lines() {
        let line = raw
            .trim()
            .trim_start_matches(['-', '*', '•'])
            .trim()
            .trim_matches('*')
            .trim();
        if is_cause_header(line) {
            if let Some(p) = cur.take() {
                p.finish(&mut out);
            }
            cur = Some(Pending {
                header: line.trim_end_matches(':').to_string(),
                ..Default::default()
            });
            continue;
        }
        if ends_block(line) {
            if let Some(p) = cur.take() {
                p.finish(&mut out);
            }
            continue;
        }
        let Some(p) = cur.as_mut() else { continue };
        let Some((k, v)) = line.split_once(':') else {
            continue;
        };
        let key = k.trim().trim_matches('*').trim().to_ascii_lowercase();
        let value = v.trim().trim_matches('*').trim();
        if value.is_empty() {
            continue;
        }
        let slot = match field_for(&key, schema) {
            Some(Field::Label) => &mut p.label,
            Some(Field::Time) => &mut p.time,
            Some(Field::Subject) => &mut p.subject,
            Some(Field::Object) => &mut p.object,
            Some(Field::Title) => &mut p.title,
            Some(Field::Summary) => &mut p.summary,
            Some(Field::Text) => &mut p.text,
            None => continue,
        };
        if slot.is_none() {
            *slot = Some(value.to_string());
        }
    }
    if let Some(p) = cur.take() {
        p.finish(&mut out);
    }
    if out.causes.is_empty() {
        let msg = "no parseable cause blocks in completion".to_string();
        log::debug!("{msg}");
        out.diagnostics.push(msg);
    }
    out
}
