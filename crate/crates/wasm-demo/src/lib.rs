//! Browser bindings: Hawkes simulation, history retrieval and ranking metrics.
//!
//! Every entry point takes plain strings and numbers and returns a JSON string.

use causeway_core::event::{Event, EventType, Occurrence, TypeKey};
use causeway_core::intensity::{HawkesModel, HawkesParams, IntensityModel};
use causeway_core::metrics::{map_at_m, mar_at_m, mean_rank_at, EvalRecord};
use causeway_core::retrieval::{retrieve, RetrievalConfig, Similarity};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

#[derive(Serialize)]
struct Simulation {
    events: Vec<(f64, u32)>,
    /// `(t, λ_k(t) for every k)` on an even grid.
    curve: Vec<(f64, Vec<f64>)>,
}

/// Simulates a Hawkes process on `[0, horizon)` and samples its intensity.
///
/// `params` is `{"mu": [..], "alpha": [[..], ..], "delta": [..]}`.
#[wasm_bindgen]
pub fn simulate_hawkes(params: &str, horizon: f64, seed: u32, grid: u32) -> Result<String, JsValue> {
    let params: HawkesParams = serde_json::from_str(params).map_err(js_err)?;
    if !(horizon > 0.0 && horizon <= 1e4) {
        return Err(js_err("horizon must be in (0, 10000]"));
    }
    let model = HawkesModel::new(&params).map_err(js_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let history = model.simulate(horizon, &mut rng);
    if history.len() > 20_000 {
        return Err(js_err("process exploded; lower alpha or the horizon"));
    }
    let keys: Vec<TypeKey> = (0..model.num_types() as u32).map(TypeKey::Categorical).collect();
    let n = grid.clamp(2, 2000) as usize;
    let mut curve = Vec::with_capacity(n);
    for i in 0..n {
        let t = horizon * i as f64 / (n - 1) as f64;
        let upto = history.partition_point(|o| o.time < t);
        let lam = model.intensities(&history[..upto], &keys, t).map_err(js_err)?;
        curve.push((t, lam));
    }
    let events = history
        .iter()
        .map(|o: &Occurrence| match o.key {
            TypeKey::Categorical(k) => (o.time, k),
            _ => (o.time, 0),
        })
        .collect();
    to_json(&Simulation { events, curve })
}

#[derive(Serialize)]
struct Match {
    time: f64,
    text: String,
    query: usize,
    score: f64,
}

/// Finds the `per_query` history events most similar to each query among
/// those strictly before `at`.
///
/// `history` has one `time text` pair per line; `queries` has one text per line.
#[wasm_bindgen]
pub fn retrieve_history(history: &str, queries: &str, per_query: u32, at: f64) -> Result<String, JsValue> {
    let mut events = Vec::new();
    for (i, line) in history.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let (t, text) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| js_err(format!("history line {}: expected `time text`", i + 1)))?;
        let t: f64 = t
            .parse()
            .map_err(|_| js_err(format!("history line {}: bad time `{t}`", i + 1)))?;
        events.push(Event::new(t, EventType::categorical(text.trim())));
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    let queries: Vec<String> = queries
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let sim = Similarity::edit();
    let index = sim.index(&events).map_err(js_err)?;
    let cfg = RetrievalConfig {
        per_cause: per_query.max(1) as usize,
        total_cap: None,
    };
    let found = retrieve(&sim, &index, &queries, cfg, at).map_err(js_err)?;
    let matches: Vec<Match> = found
        .items
        .into_iter()
        .map(|e| Match {
            time: e.time,
            text: e.text,
            query: e.hypothesis,
            score: e.score,
        })
        .collect();
    to_json(&matches)
}

#[derive(Serialize)]
struct Scores {
    m: usize,
    mean_rank: Option<f64>,
    map: Option<f64>,
    mar: Option<f64>,
}

/// Ranking metrics at every list length up to `max_m`.
///
/// One record per line: `ranked, candidates | true, answers`.
#[wasm_bindgen]
pub fn ranking_metrics(records: &str, max_m: u32) -> Result<String, JsValue> {
    let split = |s: &str| -> Vec<String> {
        s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
    };
    let mut recs = Vec::new();
    for (i, line) in records.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let (ranked, truths) = line
            .split_once('|')
            .ok_or_else(|| js_err(format!("line {}: expected `ranked | truths`", i + 1)))?;
        let rec = EvalRecord {
            query_id: format!("q{i}"),
            ranked: split(ranked),
            truths: split(truths),
            true_time: None,
            predicted_time: None,
        };
        rec.validate().map_err(|e| js_err(format!("line {}: {e}", i + 1)))?;
        recs.push(rec);
    }
    if recs.is_empty() {
        return Err(js_err("no records"));
    }
    let out: Vec<Scores> = (1..=max_m.clamp(1, 50) as usize)
        .map(|m| Scores {
            m,
            mean_rank: mean_rank_at(&recs, m).ok(),
            map: map_at_m(&recs, m).ok(),
            mar: mar_at_m(&recs, m).ok(),
        })
        .collect();
    to_json(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulation_curve_has_grid_points() {
        let p = r#"{"mu":[0.5,0.2],"alpha":[[0.3,0.0],[0.4,0.2]],"delta":[1.0,2.0]}"#;
        let v: serde_json::Value = serde_json::from_str(&simulate_hawkes(p, 20.0, 1, 50).unwrap()).unwrap();
        assert_eq!(v["curve"].as_array().unwrap().len(), 50);
        assert!(!v["events"].as_array().unwrap().is_empty());
    }

    #[test]
    fn retrieval_respects_cutoff() {
        let out = retrieve_history("1 protest\n2 protests\n5 protest", "protest", 3, 3.0).unwrap();
        let v: Vec<serde_json::Value> = serde_json::from_str(&out).unwrap();
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|m| m["time"].as_f64().unwrap() < 3.0));
    }

    #[test]
    fn metrics_per_m() {
        let out = ranking_metrics("a, b, c | b\nc, a | a", 3).unwrap();
        let v: Vec<serde_json::Value> = serde_json::from_str(&out).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[1]["mean_rank"], 2.0);
    }
}
