use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use causeway_core::abduction::{render_cause_block, BlockStyle, EventBlock};
use causeway_core::pipeline::{run_all, run_stage, Layout, RunConfig, Stage};
use causeway_core::Error;
use chrono::NaiveDate;

fn synthetic(dir: &Path, seed: u64) -> RunConfig {
    let text = format!(
        "seed = {seed}\n[synthetic]\nsequences = 40\n[base]\nkind = \"hawkes\"\n[base.train]\nepochs = 1\n\
         [propose]\ntime_queries = 5\nmbr_samples = 3\n[ranker.train]\nepochs = 1\n"
    );
    let mut c = RunConfig::from_toml_str(&text, dir).unwrap();
    c.out = Some(dir.join("run"));
    c
}

#[test]
fn stage_without_its_input_names_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthetic(dir.path(), 3);
    match run_stage(&config, Stage::Propose) {
        Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "train-base"),
        other => panic!("unexpected {other:?}"),
    }
    match run_stage(&config, Stage::Evaluate) {
        Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "predict"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn changed_config_refuses_old_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    run_stage(&synthetic(dir.path(), 3), Stage::TrainBase).unwrap();
    match run_stage(&synthetic(dir.path(), 4), Stage::Propose) {
        Err(Error::Config(msg)) => assert!(msg.contains("fresh output directory"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
    // The original config still resumes.
    run_stage(&synthetic(dir.path(), 3), Stage::Propose).unwrap();
}

const ACTORS: [&str; 3] = ["UNITED STATES", "UKRAINE", "RUSSIA"];
const PREDICATES: [&str; 3] = ["CONSULT", "THREATEN", "COOPERATE"];

/// Three weeks of daily structured events across two sequences.
fn write_events(path: &Path) {
    let mut s = String::new();
    for seq in 0..2 {
        for day in 0..21u32 {
            for k in 0..3u32 {
                let i = (day * 3 + k + seq) as usize;
                let _ = writeln!(
                    s,
                    r#"{{"seq_id":"s{seq}","time":{},"type":{{"subject":"{}","predicate":"{}","object":"{}"}}}}"#,
                    day as f64 + 0.1 + 0.3 * k as f64,
                    ACTORS[i % 3],
                    PREDICATES[(i / 3) % 3],
                    ACTORS[(i + 1) % 3],
                );
            }
        }
    }
    fs::write(path, s).unwrap();
}

fn write_fixture(path: &Path) {
    let block = |label: &str, subject: &str, object: &str| EventBlock {
        label: label.into(),
        time: NaiveDate::from_ymd_opt(2020, 1, 10).unwrap(),
        subject: Some(subject.into()),
        object: Some(object.into()),
        title: None,
        summary: None,
        text: Some("Talks stalled.".into()),
    };
    let text = [
        render_cause_block(BlockStyle::Social, 1, &block("THREATEN", "RUSSIA", "UKRAINE")),
        render_cause_block(BlockStyle::Social, 2, &block("CONSULT", "UNITED STATES", "UKRAINE")),
    ]
    .join("\n");
    fs::write(path, text).unwrap();
}

#[test]
fn structured_run_with_mock_backend_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    write_events(&dir.path().join("events.jsonl"));
    write_fixture(&dir.path().join("answer.txt"));
    let text = r#"
seed = 5
out = "run"
[data]
schema = "structured"
events = "events.jsonl"
epoch = "2020-01-01"
split = "date"
train_end = "2020-01-13"
dev_end = "2020-01-17"
[base]
kind = "attentive"
[base.encoder]
embed_dim = 8
time_dim = 4
layers = 1
heads = 1
key_dim = 4
[base.train]
epochs = 1
[propose]
m = 3
m_prime = 3
time_queries = 3
mbr_samples = 3
[abduce]
backend = "mock"
fixture = "answer.txt"
[ranker.encoder]
embed_dim = 8
time_dim = 4
layers = 1
heads = 1
key_dim = 4
[ranker.train]
epochs = 1
"#;
    let config = RunConfig::from_toml_str(text, dir.path()).unwrap();
    let done = run_all(&config).unwrap();
    assert_eq!(done.len(), Stage::ALL.len());

    let layout = Layout::new(dir.path().join("run"));
    let hyps = fs::read_to_string(layout.hypotheses()).unwrap();
    assert!(hyps.contains("THREATEN"));
    let csv = fs::read_to_string(layout.report_dir().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("method,M,n_records,mean_rank"));
    let methods: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert!(methods.contains(&"base") && methods.contains(&"reranked"), "{methods:?}");
}
