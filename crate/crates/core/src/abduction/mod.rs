//! Abductive prompting: few-shot prompts asking a chat model for plausible
//! causes of an event, a cached client, and a tolerant parser for its answers.

mod block;
mod client;
mod parse;
mod prompt;

pub use block::{hypothesis_text, EventBlock, render_cause_block, BlockStyle, CauseHypothesis, Demonstration};
#[cfg(feature = "remote")]
pub use client::HttpBackend;
pub use client::{
    cache_key, AbductionClient, ChatBackend, ChatRequest, LlmConfig, MockBackend, ResponseCache,
};
pub use parse::{parse_causes, Parsed};
pub use prompt::{load_demonstrations, PromptTemplate};
