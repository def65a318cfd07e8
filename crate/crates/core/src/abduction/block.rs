use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{date_of, Event, EventType, Schema};

/// One event as it appears in a prompt or a completion. Generated causes use
/// the same shape, hence the alias [`CauseHypothesis`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventBlock {
    /// Predicate for structured events, category for categorical ones.
    pub label: String,
    pub time: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    /// Headline or review text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

pub type CauseHypothesis = EventBlock;

impl EventBlock {
    pub fn from_event(event: &Event, epoch: NaiveDate) -> Self {
        let time = date_of(epoch, event.time);
        match &event.kind {
            EventType::Structured {
                subject,
                predicate,
                object,
            } => Self {
                label: predicate.clone(),
                time,
                subject: Some(subject.clone()),
                object: Some(object.clone()),
                title: None,
                summary: None,
                text: event.mark.clone(),
            },
            EventType::Categorical { category } => Self {
                label: category.clone(),
                time,
                subject: None,
                object: None,
                title: None,
                summary: None,
                text: event.mark.clone(),
            },
        }
    }

    fn fields(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.label.as_str()).chain(
            [&self.subject, &self.object, &self.title, &self.summary, &self.text]
                .into_iter()
                .flatten()
                .map(String::as_str),
        )
    }

    /// Values must be single-line and trimmed so they survive a render/parse cycle.
    pub fn validate(&self) -> Result<()> {
        if self.label.trim().is_empty() {
            return Err(Error::InvalidArgument("event block has an empty label".into()));
        }
        for v in self.fields() {
            let bad_edge = v.starts_with('*') || v.ends_with('*');
            if v.contains('\n') || v.contains('\r') || v.trim() != v || v.is_empty() || bad_edge {
                return Err(Error::InvalidArgument(format!(
                    "event block value {v:?} must be non-empty, single-line and trimmed"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub effect: EventBlock,
    pub causes: Vec<CauseHypothesis>,
}

impl Demonstration {
    pub fn validate(&self) -> Result<()> {
        self.effect.validate()?;
        if self.causes.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "demonstration for {} has no causes",
                self.effect.label
            )));
        }
        for c in &self.causes {
            c.validate()?;
            if c.time >= self.effect.time {
                return Err(Error::InvalidArgument(format!(
                    "cause {} on {} does not precede its effect on {}",
                    c.label, c.time, self.effect.time
                )));
            }
        }
        Ok(())
    }
}

/// Field labels used when writing blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockStyle {
    /// News events: `predicate`, `time`, `subject`, `object`, `headline`.
    Social,
    /// Shopping reviews: `product category`, `product title`, `event time`, …
    Review,
}

impl BlockStyle {
    pub fn for_schema(schema: Schema) -> Self {
        match schema {
            Schema::Structured => BlockStyle::Social,
            Schema::Categorical => BlockStyle::Review,
        }
    }

    pub(crate) fn effect_header(self) -> &'static str {
        match self {
            BlockStyle::Social => "effect",
            BlockStyle::Review => "effect event",
        }
    }

    /// Lines between the effect block and the first cause.
    pub(crate) fn reasoning_divider(self) -> &'static str {
        match self {
            BlockStyle::Social => "\nreasoning:\n\n",
            BlockStyle::Review => "\n-----------------------------------\nreasoning:\n",
        }
    }

    fn lines(self, b: &EventBlock, with_text: bool) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let time = b.time.format("%Y-%m-%d").to_string();
        match self {
            BlockStyle::Social => {
                out.push(("predicate", b.label.clone()));
                out.push(("time", time));
                if let Some(s) = &b.subject {
                    out.push(("subject", s.clone()));
                }
                if let Some(o) = &b.object {
                    out.push(("object", o.clone()));
                }
                if with_text {
                    if let Some(h) = &b.text {
                        out.push(("headline", h.clone()));
                    }
                }
            }
            BlockStyle::Review => {
                out.push(("product category", b.label.clone()));
                if with_text {
                    if let Some(t) = &b.title {
                        out.push(("product title", t.clone()));
                    }
                }
                out.push(("event time", time));
                if with_text {
                    if let Some(s) = &b.summary {
                        out.push(("summary text", s.clone()));
                    }
                    if let Some(r) = &b.text {
                        out.push(("review text", r.clone()));
                    }
                }
            }
        }
        out
    }

    /// Effect block: header then labeled lines, no headline or review text.
    pub fn render_effect(self, b: &EventBlock) -> String {
        let mut s = format!("{}\n", self.effect_header());
        for (k, v) in self.lines(b, false) {
            s.push_str(&format!("{k}: {v}\n"));
        }
        s
    }

    pub fn render_cause(self, index: usize, b: &CauseHypothesis) -> String {
        let mut s = format!("cause event {index}\n");
        for (k, v) in self.lines(b, true) {
            s.push_str(&format!("{k}: {v}\n"));
        }
        s
    }

    /// `## Example n` section: effect, divider, causes separated by blank lines.
    pub fn render_demonstration(self, n: usize, d: &Demonstration) -> String {
        let mut s = format!("## Example {n}\n\n");
        s.push_str(&self.render_effect(&d.effect));
        s.push_str(self.reasoning_divider());
        let causes: Vec<String> = d
            .causes
            .iter()
            .enumerate()
            .map(|(i, c)| self.render_cause(i + 1, c))
            .collect();
        s.push_str(&causes.join("\n"));
        s
    }
}

pub fn render_cause_block(style: BlockStyle, index: usize, cause: &CauseHypothesis) -> String {
    style.render_cause(index, cause)
}

/// Text used to match a hypothesis against real events, mirroring
/// [`crate::event::render_type_text`].
pub fn hypothesis_text(h: &CauseHypothesis, schema: Schema) -> String {
    let head = match schema {
        Schema::Structured => format!(
            "{}({}, {})",
            h.label,
            h.subject.as_deref().unwrap_or(""),
            h.object.as_deref().unwrap_or("")
        ),
        Schema::Categorical => h.label.clone(),
    };
    match &h.text {
        Some(t) => format!("{head}: {t}"),
        None => head,
    }
}
