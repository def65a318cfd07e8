//! End-to-end acceptance checks. Each test prints one PASS or FAIL line;
//! run with `--nocapture` to see them.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use causeway_core::abduction::{
    load_demonstrations, parse_causes, render_cause_block, BlockStyle, Demonstration, EventBlock, PromptTemplate,
};
use causeway_core::event::{Event, EventType, Occurrence, Schema, Timeline, TypeKey};
use causeway_core::intensity::{
    log_likelihood, train_mle, AttentiveConfig, AttentiveModel, HawkesModel, HawkesParams, MleModel,
    TrainConfig, TypeSpace,
};
use causeway_core::metrics::{map_at_m, mar_at_m, mean_rank, mean_rank_at, rmse_time, EvalRecord, MetricReport};
use causeway_core::pipeline::{run_stage, RunConfig, Stage};
use causeway_core::proposer::sample_next_time;
use causeway_core::ranker::{j_actual_from, train_ranker, Candidate, RankTrainItem, Ranker, RankerConfig, RankerTrainConfig};
use causeway_core::retrieval::{edit_similarity, retrieve, HashedNgramEmbedder, RetrievalConfig, Similarity};
use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(name: &str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn k(i: u32) -> TypeKey {
    TypeKey::Categorical(i)
}

// ---------------------------------------------------------------- sampling

/// `∫_a^b f` by composite Simpson with `panels` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels + panels % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Total intensity of a Hawkes process written out from its parameters.
fn hawkes_total(p: &HawkesParams, history: &[(f64, usize)], t: f64) -> f64 {
    (0..p.mu.len()).map(|kk| hawkes_one(p, history, kk, t)).sum()
}

fn hawkes_one(p: &HawkesParams, history: &[(f64, usize)], kk: usize, t: f64) -> f64 {
    p.mu[kk]
        + history
            .iter()
            .filter(|(s, _)| *s < t)
            .map(|(s, j)| p.alpha[*j][kk] * (-p.delta[kk] * (t - s)).exp())
            .sum::<f64>()
}

#[test]
fn sampler_law() {
    let start = Instant::now();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let lambda = 2.5;
    let poisson = HawkesModel::poisson(&[lambda]).unwrap();
    let mut total = 0.0;
    for _ in 0..n {
        total += sample_next_time(&poisson, &[], 0.0, &mut rng).unwrap();
    }
    let mean_gap = total / n as f64;
    let gap_err = (mean_gap * lambda - 1.0).abs();

    let params = HawkesParams {
        mu: vec![0.2, 0.1],
        alpha: vec![vec![1.5, 0.5], vec![0.3, 0.8]],
        delta: vec![2.0, 1.0],
    };
    let model = HawkesModel::new(&params).unwrap();
    let history = [Occurrence::new(0.0, k(0))];
    let mut draws: Vec<f64> = (0..n)
        .map(|_| sample_next_time(&model, &history, 0.0, &mut rng).unwrap())
        .collect();
    draws.sort_by(f64::total_cmp);

    // cumulative hazard on a fine grid, one Simpson panel per cell
    let hist = [(0.0, 0usize)];
    let rate = |t: f64| hawkes_total(&params, &hist, t.max(1e-300));
    let h = 1e-3;
    let top = draws[n - 1];
    let cells = (top / h).ceil() as usize + 1;
    let mut cum = vec![0.0; cells + 1];
    for i in 0..cells {
        let a = i as f64 * h;
        cum[i + 1] = cum[i] + simpson(rate, a, a + h, 2);
    }
    let cdf = |x: f64| {
        let i = (x / h).floor() as usize;
        let a = i as f64 * h;
        let big_lambda = cum[i] + if x > a { simpson(rate, a, x, 2) } else { 0.0 };
        1.0 - (-big_lambda).exp()
    };
    let mut ks: f64 = 0.0;
    for (i, &x) in draws.iter().enumerate() {
        let f = cdf(x);
        ks = ks.max((i + 1) as f64 / n as f64 - f).max(f - i as f64 / n as f64);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "sampler_law",
        gap_err < 0.02 && ks < 0.01 && secs < 30.0,
        format!(
            "constant rate mean gap {mean_gap:.5} vs {:.5} (rel err {gap_err:.4}); Hawkes Kolmogorov distance {ks:.5}; {secs:.1}s",
            1.0 / lambda
        ),
    );
}

// -------------------------------------------------------------- likelihood

#[test]
fn likelihood_estimates() {
    let params = HawkesParams {
        mu: vec![0.4, 0.3],
        alpha: vec![vec![0.6, 0.2], vec![0.3, 0.5]],
        delta: vec![1.5, 1.0],
    };
    let model = HawkesModel::new(&params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let end = 60.0;
    let events = model.simulate(end, &mut rng);
    let tl = Timeline::new(events.clone(), 0.0, end);
    let hist: Vec<(f64, usize)> = events
        .iter()
        .map(|e| match e.key {
            TypeKey::Categorical(c) => (e.time, c as usize),
            _ => unreachable!(),
        })
        .collect();

    // reference: log-intensities at events minus a 10,000-node compensator,
    // nodes spread over inter-event intervals in proportion to their width
    let log_term: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, (t, kk))| hawkes_one(&params, &hist[..i], *kk, *t).ln())
        .sum();
    let mut cuts = vec![0.0];
    cuts.extend(hist.iter().map(|(t, _)| *t));
    cuts.push(end);
    let mut compensator = 0.0;
    for w in cuts.windows(2).filter(|w| w[1] > w[0]) {
        let panels = ((10_000.0 * (w[1] - w[0]) / end).round() as usize).max(2);
        compensator += simpson(|t| hawkes_total(&params, &hist, t), w[0], w[1], panels);
    }
    let quad_ll = log_term - compensator;

    let mut mc_rng = ChaCha8Rng::seed_from_u64(9);
    let mc_ll = log_likelihood(&model, &tl, 200, &mut mc_rng).unwrap();
    let mc_comp = log_term - mc_ll;
    let comp_err = (mc_comp - compensator).abs() / compensator;
    let ll_err = (mc_ll - quad_ll).abs() / quad_ll.abs();

    let rate = 1.7;
    let poisson = HawkesModel::poisson(&[rate]).unwrap();
    let times = [0.3, 1.1, 2.0, 2.05, 4.9];
    let ptl = Timeline::new(times.iter().map(|&t| Occurrence::new(t, k(0))).collect(), 0.0, 6.0);
    let analytic = times.len() as f64 * rate.ln() - rate * 6.0;
    let exact = poisson.exact_log_likelihood(&ptl).unwrap().0;
    let generic = log_likelihood(&poisson, &ptl, 3, &mut mc_rng).unwrap();
    let const_err = (exact - analytic).abs().max((generic - analytic).abs());

    verdict(
        "likelihood_estimates",
        comp_err < 0.01 && ll_err < 0.01 && const_err < 1e-12,
        format!(
            "{} events: MC compensator {mc_comp:.4} vs quadrature {compensator:.4} (rel {comp_err:.2e}), \
             LL rel {ll_err:.2e}; constant-rate LL error {const_err:.1e}",
            hist.len()
        ),
    );
}

// ---------------------------------------------------------------- gradients

const PROBES: usize = 100;
const FD_STEP: f64 = 1e-5;

/// Relative error with a 1e-6 floor so that vanishing components are compared absolutely.
fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

/// Picks a parameter with a non-zero analytic gradient when there is one.
fn pick_param(grads: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let live: Vec<usize> = (0..grads.len()).filter(|&i| grads[i] != 0.0).collect();
    if live.is_empty() {
        rng.random_range(0..grads.len())
    } else {
        live[rng.random_range(0..live.len())]
    }
}

fn flat(g: &causeway_core::autodiff::Grads) -> Vec<f64> {
    g.0.iter().flatten().copied().collect()
}

fn random_history(rng: &mut ChaCha8Rng, types: u32, upto: f64) -> Vec<Occurrence> {
    let n = rng.random_range(0..8);
    let mut ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..upto)).collect();
    ts.sort_by(f64::total_cmp);
    ts.into_iter()
        .map(|t| Occurrence::new(t, k(rng.random_range(0..types))))
        .collect()
}

fn random_candidate(rng: &mut ChaCha8Rng, types: u32) -> Candidate {
    let time = rng.random_range(2.0..20.0);
    Candidate {
        time,
        key: k(rng.random_range(0..types)),
        evidence: random_history(rng, types, time - 0.01),
    }
}

fn random_item(rng: &mut ChaCha8Rng, types: u32) -> RankTrainItem {
    let positive = random_candidate(rng, types);
    let negatives = (0..rng.random_range(1..5)).map(|_| random_candidate(rng, types)).collect();
    let noise = (0..rng.random_range(1..3))
        .map(|_| (0..rng.random_range(1..4)).map(|_| random_candidate(rng, types)).collect())
        .collect();
    RankTrainItem {
        positive,
        negatives,
        noise,
    }
}

fn ranker(types: u32, seed: u64) -> Ranker {
    let mut cfg = RankerConfig::new(TypeSpace::Categorical { categories: types });
    cfg.init_scale = 0.5;
    cfg.seed = seed;
    Ranker::new(cfg).unwrap()
}

/// Worst relative error over `PROBES` central-difference probes of `f`.
fn probe<P, F>(target: &mut P, rng: &mut ChaCha8Rng, setup: impl Fn(&mut ChaCha8Rng) -> F, params: impl Fn(&mut P) -> &mut causeway_core::autodiff::ParamSet, eval: impl Fn(&P, &F) -> (f64, Vec<f64>)) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let input = setup(rng);
        let (_, g) = eval(target, &input);
        let i = pick_param(&g, rng);
        let x0 = params(target).scalar(i);
        params(target).set_scalar(i, x0 + FD_STEP);
        let fp = eval(target, &input).0;
        params(target).set_scalar(i, x0 - FD_STEP);
        let fm = eval(target, &input).0;
        params(target).set_scalar(i, x0);
        worst = worst.max(rel_err((fp - fm) / (2.0 * FD_STEP), g[i]));
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let types = 5u32;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cfg = AttentiveConfig::new(TypeSpace::Categorical { categories: types });
    cfg.init_scale = 0.5;
    let mut model = AttentiveModel::new(cfg, 1.0, &mut rng).unwrap();
    let intensity = probe(
        &mut model,
        &mut rng,
        |r| {
            let t = r.random_range(1.0..10.0);
            (random_history(r, types, t - 0.01), k(r.random_range(0..types)), t)
        },
        |m| m.param_set_mut(),
        |m, (h, key, t)| {
            let (v, g) = m.intensity_grad(h, *key, *t).unwrap();
            (v, flat(&g))
        },
    );

    let mut r = ranker(types, 3);
    let compat = probe(
        &mut r,
        &mut rng,
        |r| random_candidate(r, types),
        |m| m.params_mut(),
        |m, c| {
            let (v, g) = m.compatibility_grad(c).unwrap();
            (v, flat(&g))
        },
    );
    let j_actual = probe(
        &mut r,
        &mut rng,
        |r| random_item(r, types),
        |m| m.params_mut(),
        |m, it| {
            let o = m.objective(it, 0.0).unwrap();
            (o.j_actual, flat(&o.grads))
        },
    );
    let j_no = probe(
        &mut r,
        &mut rng,
        |r| random_item(r, types),
        |m| m.params_mut(),
        |m, it| {
            let with = m.objective(it, 1.0).unwrap();
            let without = m.objective(it, 0.0).unwrap();
            let g: Vec<f64> = flat(&with.grads).iter().zip(flat(&without.grads)).map(|(a, b)| a - b).collect();
            (with.j_no, g)
        },
    );
    let worst = intensity.max(compat).max(j_actual).max(j_no);
    verdict(
        "gradients_match_finite_differences",
        worst < 1e-4,
        format!(
            "{PROBES} probes each, worst relative error: intensity {intensity:.1e}, compatibility {compat:.1e}, \
             J_actual {j_actual:.1e}, J_no {j_no:.1e}"
        ),
    );
}

// ------------------------------------------------------------ fit recovery

#[test]
fn simulate_then_fit() {
    let truth = HawkesParams {
        mu: vec![0.5, 0.4],
        alpha: vec![vec![0.6, 0.3], vec![0.3, 0.4]],
        delta: vec![1.5, 1.0],
    };
    let gen = HawkesModel::new(&truth).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let end = 40.0;
    let seqs: Vec<Timeline> = (0..500)
        .map(|_| Timeline::new(gen.simulate(end, &mut rng), 0.0, end))
        .collect();
    let start = HawkesModel::init(2, 2.0, &mut rng).unwrap();
    let cfg = TrainConfig {
        lr: 0.03,
        epochs: 150,
        batch_size: 50,
        patience: 0,
        seed: 1,
        ..Default::default()
    };
    let (fit, _) = train_mle(start, &seqs, &[], &cfg).unwrap();
    let est = fit.params();
    let pairs: Vec<(f64, f64)> = truth
        .mu
        .iter()
        .zip(&est.mu)
        .chain(truth.alpha.iter().flatten().zip(est.alpha.iter().flatten()))
        .chain(truth.delta.iter().zip(&est.delta))
        .map(|(a, b)| (*a, *b))
        .collect();
    let worst = pairs.iter().map(|(a, b)| (b - a).abs() / a).fold(0.0, f64::max);

    // constant rate: the fitted rate is count / exposure
    let rate_truth = HawkesModel::poisson(&[1.3]).unwrap();
    let ptrain: Vec<Timeline> = (0..50)
        .map(|_| Timeline::new(rate_truth.simulate(10.0, &mut rng), 0.0, 10.0))
        .collect();
    let count: usize = ptrain.iter().map(|t| t.events.len()).sum();
    let closed = count as f64 / 500.0;
    let pcfg = TrainConfig {
        lr: 0.05,
        epochs: 400,
        batch_size: 0,
        patience: 0,
        ..Default::default()
    };
    let (pfit, _) = train_mle(HawkesModel::poisson(&[0.5]).unwrap(), &ptrain, &[], &pcfg).unwrap();
    let fitted = pfit.params().mu[0];
    let at_closed = HawkesModel::poisson(&[closed]).unwrap();
    let mut grad = 0.0;
    for t in &ptrain {
        grad += at_closed.ll_grad(t, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().1 .0[0][0];
    }
    let rate_err = (fitted - closed).abs() / closed;
    verdict(
        "simulate_then_fit",
        worst < 0.15 && rate_err < 1e-3 && grad.abs() < 1e-9,
        format!(
            "worst Hawkes relative error {worst:.3} over {} parameters; constant rate {fitted:.6} vs count/T {closed:.6}, \
             score at count/T {grad:.1e}",
            pairs.len()
        ),
    );
}

// -------------------------------------------------------------- objectives

fn candidates(n: usize, rng: &mut ChaCha8Rng) -> Vec<Candidate> {
    (0..n).map(|_| random_candidate(rng, 4)).collect()
}

fn train_log_bits(items: &[RankTrainItem], beta: f64) -> (Vec<u64>, String) {
    let cfg = RankerTrainConfig {
        beta,
        epochs: 3,
        batch_size: 4,
        patience: 0,
        seed: 5,
        ..Default::default()
    };
    let (r, log) = train_ranker(ranker(4, 1), items, &[], &cfg).unwrap();
    let bits = log.epochs.iter().map(|e| e.j_actual.to_bits()).collect();
    (bits, serde_json::to_string(r.params()).unwrap())
}

#[test]
fn objective_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut r = ranker(4, 2);
    let n = r.params().num_scalars();
    for i in 0..n {
        r.params_mut().set_scalar(i, 0.0);
    }
    // the last scalar is the output bias: every score equals it
    r.params_mut().set_scalar(n - 1, 3.7);
    let mut equal_err: f64 = 0.0;
    for m in 1..=10 {
        let cs = candidates(m + 1, &mut rng);
        let item = RankTrainItem {
            positive: cs[0].clone(),
            negatives: cs[1..].to_vec(),
            noise: vec![],
        };
        let ja = r.objective(&item, 0.0).unwrap().j_actual;
        let expected = -((m + 1) as f64).ln();
        equal_err = equal_err.max((ja - expected).abs()).max((j_actual_from(2.5, &vec![2.5; m]) - expected).abs());
    }

    let mut max_ja = f64::NEG_INFINITY;
    for draw in 0..10_000u64 {
        let mut cfg = RankerConfig::new(TypeSpace::Categorical { categories: 4 });
        cfg.encoder.layers = 1;
        cfg.hidden = 4;
        cfg.init_scale = rng.random_range(0.01..3.0);
        cfg.seed = draw;
        let rr = Ranker::new(cfg).unwrap();
        let item = RankTrainItem {
            positive: random_candidate(&mut rng, 4),
            negatives: candidates(rng.random_range(1..6), &mut rng),
            noise: vec![],
        };
        max_ja = max_ja.max(rr.objective(&item, 0.0).unwrap().j_actual);
    }

    let items: Vec<RankTrainItem> = (0..24).map(|_| random_item(&mut rng, 4)).collect();
    let stripped: Vec<RankTrainItem> = items
        .iter()
        .map(|it| RankTrainItem {
            noise: vec![],
            ..it.clone()
        })
        .collect();
    let a = train_log_bits(&items, 0.0);
    let b = train_log_bits(&stripped, 0.8);
    let c = train_log_bits(&items, 0.0);
    let bitwise = a == b && a == c;

    verdict(
        "objective_identities",
        equal_err < 1e-12 && max_ja <= 0.0 && bitwise,
        format!(
            "equal-score J_actual error {equal_err:.1e}; max J_actual over 10000 draws {max_ja:.3e}; \
             beta=0 run identical to noise-free run: {bitwise}"
        ),
    );
}

// ----------------------------------------------------------------- metrics

/// Brute-force scorer: walks each list once, counting hits as it goes.
fn oracle(records: &[EvalRecord], m: usize) -> (Option<f64>, Option<f64>, f64) {
    let (mut rank_sum, mut hits, mut truths) = (0usize, 0usize, 0usize);
    let mut pseudo = 0.0;
    for rec in records {
        let truth: HashSet<&String> = rec.truths.iter().collect();
        truths += truth.len();
        let mut j = 0;
        for (pos, cand) in rec.ranked.iter().take(m).enumerate() {
            if truth.contains(cand) {
                j += 1;
                rank_sum += pos + 1;
                pseudo += j as f64 / (pos + 1) as f64;
            }
        }
        hits += j;
    }
    let mr = (hits > 0).then(|| rank_sum as f64 / hits as f64);
    let map = (hits > 0).then(|| pseudo / hits as f64);
    (mr, map, pseudo / truths as f64)
}

fn random_records(rng: &mut ChaCha8Rng) -> Vec<EvalRecord> {
    let alphabet: Vec<String> = (0..8).map(|i| format!("t{i}")).collect();
    (0..rng.random_range(1..6))
        .map(|q| {
            let mut pool = alphabet.clone();
            let len = rng.random_range(1..=8);
            let mut ranked = Vec::new();
            for _ in 0..len {
                ranked.push(pool.swap_remove(rng.random_range(0..pool.len())));
            }
            let truths = (0..rng.random_range(1..4))
                .map(|_| alphabet[rng.random_range(0..alphabet.len())].clone())
                .collect();
            let tt = rng.random_range(0.0..10.0);
            EvalRecord {
                query_id: format!("q{q}"),
                ranked,
                truths,
                true_time: Some(tt),
                predicted_time: Some(tt + rng.random_range(-3.0..3.0)),
            }
        })
        .collect()
}

#[test]
fn metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut mismatches = 0;
    let mut rmse_worst: f64 = 0.0;
    let mut mar_drops = 0;
    for _ in 0..1000 {
        let recs = random_records(&mut rng);
        let m = rng.random_range(1..=8);
        let (mr, map, mar) = oracle(&recs, m);
        if mean_rank_at(&recs, m).ok() != mr || map_at_m(&recs, m).ok() != map || mar_at_m(&recs, m).unwrap() != mar {
            mismatches += 1;
        }
        if mean_rank(&recs).ok() != oracle(&recs, usize::MAX).0 {
            mismatches += 1;
        }
        let sse: f64 = recs
            .iter()
            .map(|r| (r.predicted_time.unwrap() - r.true_time.unwrap()).powi(2))
            .sum();
        let expected = (sse / recs.len() as f64).sqrt();
        rmse_worst = rmse_worst.max((rmse_time(&recs).unwrap() - expected).abs());
        // nested lists: the first M of one ranking
        let mars: Vec<f64> = (1..=8).map(|m| mar_at_m(&recs, m).unwrap()).collect();
        if mars.windows(2).any(|w| w[1] < w[0]) {
            mar_drops += 1;
        }
    }
    verdict(
        "metric_oracles",
        mismatches == 0 && rmse_worst < 1e-12 && mar_drops == 0,
        format!(
            "1000 instances: {mismatches} rank/MAP/MAR mismatches, RMSE max deviation {rmse_worst:.1e}, \
             {mar_drops} MAR decreases in M"
        ),
    );
}

// ------------------------------------------------------------------ prompts

fn prompts_dir() -> PathBuf {
    manifest_dir().join("assets/prompts")
}

fn date(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

fn golden_matches(dataset: &str, demos: &str, golden: &str, effect: &EventBlock) -> bool {
    let dir = prompts_dir().join(dataset);
    let t = PromptTemplate::load(&dir.join("template.toml"))
        .unwrap()
        .with_demonstrations(load_demonstrations(&dir.join(demos)).unwrap())
        .unwrap();
    let built = t.build(effect).unwrap();
    let want = fs::read_to_string(manifest_dir().join("tests/golden").join(golden)).unwrap();
    if built != want {
        let line = built.lines().zip(want.lines()).position(|(a, b)| a != b);
        println!("{golden}: first differing line {line:?}");
    }
    built == want
}

fn round_trips(demos: &[Demonstration], style: BlockStyle, schema: Schema) -> (usize, usize) {
    let mut ok = 0;
    let mut total = 0;
    for d in demos {
        let text: Vec<String> = d
            .causes
            .iter()
            .enumerate()
            .map(|(i, c)| render_cause_block(style, i + 1, c))
            .collect();
        let parsed = parse_causes(&text.join("\n"), schema);
        total += d.causes.len();
        ok += d.causes.iter().zip(&parsed.causes).filter(|(a, b)| a == b).count();
        if parsed.causes.len() != d.causes.len() {
            total += 1;
        }
    }
    (ok, total)
}

#[test]
fn prompt_fidelity() {
    let gdelt = golden_matches(
        "gdelt",
        "demos_p1.json",
        "gdelt_10shot.txt",
        &EventBlock {
            label: "COOPERATE".into(),
            time: date("2022-03-08"),
            subject: Some("US".into()),
            object: Some("UKRAINE".into()),
            title: None,
            summary: None,
            text: None,
        },
    );
    let amazon = golden_matches(
        "amazon",
        "demos_p1.json",
        "amazon_8shot.txt",
        &EventBlock {
            label: "Children Clothing".into(),
            time: date("2013-11-02"),
            subject: None,
            object: None,
            title: None,
            summary: None,
            text: None,
        },
    );
    let mut ok = 0;
    let mut total = 0;
    let mut shots = Vec::new();
    for (dataset, schema) in [("gdelt", Schema::Structured), ("amazon", Schema::Categorical)] {
        for set in ["demos_p1.json", "demos_p2.json"] {
            let demos = load_demonstrations(&prompts_dir().join(dataset).join(set)).unwrap();
            shots.push(demos.len());
            let (a, b) = round_trips(&demos, BlockStyle::for_schema(schema), schema);
            ok += a;
            total += b;
        }
    }
    verdict(
        "prompt_fidelity",
        gdelt && amazon && ok == total && shots == [10, 10, 8, 8],
        format!(
            "GDELT 10-shot golden match: {gdelt}; Amazon 8-shot golden match: {amazon}; \
             {ok}/{total} demonstration cause blocks round-trip"
        ),
    );
}

// ---------------------------------------------------------------- retrieval

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let letters = ['a', 'b', 'c', 'd', 'e', 'f'];
    (0..rng.random_range(1..8))
        .map(|_| letters[rng.random_range(0..letters.len())])
        .collect()
}

#[test]
fn retrieval_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let sims = [Similarity::edit(), Similarity::embedding(Box::new(HashedNgramEmbedder::default()))];
    let mut leaks = 0;
    let mut not_nested = 0;
    for q in 0..10_000 {
        let sim = &sims[q % 2];
        let mut history: Vec<Event> = (0..rng.random_range(0..30))
            .map(|_| {
                // coarse times so that ties with the proposal occur
                let t = rng.random_range(0..20) as f64 * 0.5;
                Event::new(t, EventType::categorical(&random_word(&mut rng)))
            })
            .collect();
        history.sort_by(|a, b| a.time.total_cmp(&b.time));
        let index = sim.index(&history).unwrap();
        let queries: Vec<String> = (0..rng.random_range(1..4)).map(|_| random_word(&mut rng)).collect();
        let t = rng.random_range(0..22) as f64 * 0.5;
        let d = rng.random_range(1..5);
        let cfg = |per_cause| RetrievalConfig {
            per_cause,
            total_cap: None,
        };
        let small = retrieve(sim, &index, &queries, cfg(d), t).unwrap();
        let large = retrieve(sim, &index, &queries, cfg(d + 1), t).unwrap();
        leaks += small.items.iter().chain(&large.items).filter(|e| e.time >= t).count();
        let big: HashSet<usize> = large.indices().into_iter().collect();
        if !small.indices().iter().all(|i| big.contains(i)) {
            not_nested += 1;
        }
    }
    let mut asym = 0;
    let mut self_ne_one = 0;
    for _ in 0..10_000 {
        let (a, b) = (random_word(&mut rng), random_word(&mut rng));
        if edit_similarity(&a, &b) != edit_similarity(&b, &a) {
            asym += 1;
        }
        if edit_similarity(&a, &a) != 1.0 {
            self_ne_one += 1;
        }
    }
    verdict(
        "retrieval_properties",
        leaks == 0 && not_nested == 0 && asym == 0 && self_ne_one == 0,
        format!(
            "10000 queries: {leaks} items at or after the proposal, {not_nested} D vs D+1 sets not nested; \
             {asym} asymmetric and {self_ne_one} non-unit self similarities"
        ),
    );
}

// ---------------------------------------------------------------- pipeline

fn metric<'a>(reports: &'a [MetricReport], method: &str, name: &str, m: usize) -> &'a MetricReport {
    reports
        .iter()
        .find(|r| r.method.as_deref() == Some(method) && r.metric == name && r.m == m)
        .unwrap_or_else(|| panic!("no {method} {name}@{m} in the report"))
}

fn config_with_out(path: &Path, out: &Path) -> RunConfig {
    let mut c = RunConfig::load(path).unwrap();
    c.out = Some(out.to_path_buf());
    c
}

#[test]
fn synthetic_end_to_end() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = config_with_out(&manifest_dir().join("../../configs/synthetic.toml"), dir.path());
    let synth = config.synthetic.clone().unwrap();
    let spec = synth.spec(config.seed).unwrap();
    for stage in Stage::ALL {
        run_stage(&config, stage).unwrap_or_else(|e| panic!("stage {stage}: {e}"));
    }
    let text = fs::read_to_string(dir.path().join("metrics.json")).unwrap();
    let reports: Vec<MetricReport> = serde_json::from_str(&text).unwrap();
    let m = config.propose.m;
    let base = metric(&reports, "base", "mean_rank", m);
    let rr = metric(&reports, "reranked", "mean_rank", m);
    let reduction = 1.0 - rr.value / base.value;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "synthetic_end_to_end",
        m == 5
            && spec.types.len() == 10
            && synth.sequences >= 1000
            && reduction >= 0.10
            && rr.ci_high < base.ci_low
            && secs < 600.0,
        format!(
            "{} sequences, {} types; mean rank@{m}: base {:.3} [{:.3}, {:.3}], reranked {:.3} [{:.3}, {:.3}], \
             {:.1}% lower; {secs:.0}s",
            synth.sequences,
            spec.types.len(),
            base.value,
            base.ci_low,
            base.ci_high,
            rr.value,
            rr.ci_low,
            rr.ci_high,
            100.0 * reduction
        ),
    );
}

#[test]
fn repeated_abduction_is_free() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
seed = 3
[synthetic]
sequences = 60
[base.train]
epochs = 1
[propose]
time_queries = 5
mbr_samples = 3
"#;
    let mut config = RunConfig::from_toml_str(text, dir.path()).unwrap();
    config.out = Some(dir.path().join("run"));
    for stage in [Stage::TrainBase, Stage::Propose] {
        run_stage(&config, stage).unwrap();
    }
    let first = run_stage(&config, Stage::Abduce).unwrap();
    let hyp = dir.path().join("run/hypotheses.jsonl");
    let before = fs::read(&hyp).unwrap();
    let second = run_stage(&config, Stage::Abduce).unwrap();
    let after = fs::read(&hyp).unwrap();
    let (c1, c2) = (first.backend_calls.unwrap(), second.backend_calls.unwrap());
    verdict(
        "repeated_abduction_is_free",
        c1 > 0 && c2 == 0 && before == after,
        format!(
            "first run {c1} backend calls, repeat {c2}; outputs byte-identical: {}",
            before == after
        ),
    );
}
