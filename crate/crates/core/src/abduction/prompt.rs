use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::block::{BlockStyle, Demonstration, EventBlock};
use crate::error::{Error, Result};
use crate::event::{Event, Schema};

/// A few-shot prompt: task preamble, numbered vocabulary, worked examples and
/// the query. Text fields may use `{count}` (vocabulary header), `{n}`
/// (examples header) and `{effect}` (query).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub schema: Schema,
    pub preamble: String,
    pub vocabulary_header: String,
    #[serde(default)]
    pub vocabulary: Vec<String>,
    pub examples_header: String,
    pub query: String,
    #[serde(skip)]
    pub demonstrations: Vec<Demonstration>,
}

/// Substitutes `{name}` placeholders; any other `{identifier}` left in the text is an error.
fn fill(text: &str, vars: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name {
            Some(n) if !n.is_empty() && n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == n)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::Placeholder(n.to_string()))?;
                out.push_str(value);
                rest = &after[n.len() + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn lf(s: &str) -> String {
    s.replace("\r\n", "\n")
}

impl PromptTemplate {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut t: PromptTemplate =
            toml::from_str(&lf(text)).map_err(|e| Error::Config(format!("prompt template: {e}")))?;
        for s in [
            &mut t.preamble,
            &mut t.vocabulary_header,
            &mut t.examples_header,
            &mut t.query,
        ] {
            *s = lf(s);
        }
        if !t.query.contains("{effect}") {
            return Err(Error::Config("prompt template query lacks {effect}".into()));
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn with_demonstrations(mut self, demos: Vec<Demonstration>) -> Result<Self> {
        for d in &demos {
            d.validate()?;
            self.check_block(&d.effect)?;
            for c in &d.causes {
                self.check_block(c)?;
            }
        }
        self.demonstrations = demos;
        Ok(self)
    }

    pub fn with_vocabulary(mut self, vocabulary: Vec<String>) -> Self {
        self.vocabulary = vocabulary;
        self
    }

    pub fn style(&self) -> BlockStyle {
        BlockStyle::for_schema(self.schema)
    }

    /// Rejects fields the template's block style cannot express.
    fn check_block(&self, b: &EventBlock) -> Result<()> {
        let stray = match self.schema {
            Schema::Structured => b.title.is_some() || b.summary.is_some(),
            Schema::Categorical => b.subject.is_some() || b.object.is_some(),
        };
        if stray {
            return Err(Error::InvalidArgument(format!(
                "block {:?} has fields a {} prompt cannot show",
                b.label, self.schema
            )));
        }
        Ok(())
    }

    /// Prompt asking for causes of `effect`. Sections are separated by one blank
    /// line; with no demonstrations the examples section is left out.
    pub fn build(&self, effect: &EventBlock) -> Result<String> {
        let style = self.style();
        let mut sections = vec![fill(self.preamble.trim_end(), &[])?];
        if !self.vocabulary.is_empty() {
            let count = self.vocabulary.len().to_string();
            let mut v = fill(self.vocabulary_header.trim_end(), &[("count", &count)])?;
            for (i, name) in self.vocabulary.iter().enumerate() {
                v.push_str(&format!("\n{}. {}", i + 1, name));
            }
            sections.push(v);
        }
        if !self.demonstrations.is_empty() {
            let n = self.demonstrations.len().to_string();
            sections.push(fill(self.examples_header.trim_end(), &[("n", &n)])?);
            for (i, d) in self.demonstrations.iter().enumerate() {
                sections.push(style.render_demonstration(i + 1, d).trim_end().to_string());
            }
        }
        let effect_text = style.render_effect(effect);
        sections.push(fill(self.query.trim_end(), &[("effect", effect_text.trim_end())])?);
        let mut prompt = sections.join("\n\n");
        prompt.push('\n');
        Ok(prompt)
    }

    pub fn build_for_event(&self, effect: &Event, epoch: NaiveDate) -> Result<String> {
        let mut block = EventBlock::from_event(effect, epoch);
        block.text = None;
        self.build(&block)
    }
}

pub fn load_demonstrations(path: &Path) -> Result<Vec<Demonstration>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let demos: Vec<Demonstration> = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for d in &demos {
        d.validate()?;
    }
    Ok(demos)
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: &str = r#"
schema = "structured"
preamble = "Reason about events."
vocabulary_header = "Pick from {count} options."
vocabulary = ["A", "B"]
examples_header = "Here are {n} examples."
query = """Now explain:

{effect}"""
"#;

    fn effect() -> EventBlock {
        EventBlock {
            label: "A".into(),
            time: NaiveDate::from_ymd_opt(2022, 3, 8).unwrap(),
            subject: Some("US".into()),
            object: Some("UKRAINE".into()),
            title: None,
            summary: None,
            text: None,
        }
    }

    #[test]
    fn zero_shot_omits_examples() {
        let t = PromptTemplate::from_toml_str(T).unwrap();
        let p = t.build(&effect()).unwrap();
        assert_eq!(
            p,
            "Reason about events.\n\nPick from 2 options.\n1. A\n2. B\n\nNow explain:\n\n\
             effect\npredicate: A\ntime: 2022-03-08\nsubject: US\nobject: UKRAINE\n"
        );
        assert!(!p.contains("examples"));
    }

    #[test]
    fn unknown_placeholder_is_error() {
        let t = PromptTemplate::from_toml_str(&T.replace("Reason", "{who} reason")).unwrap();
        assert!(matches!(t.build(&effect()), Err(Error::Placeholder(n)) if n == "who"));
    }

    #[test]
    fn literal_braces_pass_through() {
        assert_eq!(fill("a {b c} {} {", &[]).unwrap(), "a {b c} {} {");
    }
}
