//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajscope_core::cvae::{
    self, AgentTable, ContextBuilder, ContextInput, ContextMode, Example, HyperParams, LatentPosterior, ModelDims,
    ModelParams, ScoreRecord,
};
use trajscope_core::geo::{haversine_m, GpsPoint, GridToken, StayPoint};
use trajscope_core::preprocess::{detect_stay_points, PreprocessConfig, RawTrajectory, TokenSequence};
use trajscope_core::scoring::{agent_level, pr_curve, AgentScore};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- stay points

/// Exhaustive-window stay-point oracle. For each anchor it tries every window
/// end `j` and keeps the one whose points `i..j` all lie within the radius while
/// `j` itself does not (or is the end of the trace).
pub fn spd_oracle(pts: &[GpsPoint], cfg: &PreprocessConfig) -> Vec<StayPoint> {
    let n = pts.len();
    let within = |i: usize, k: usize| haversine_m(pts[i].lat, pts[i].lon, pts[k].lat, pts[k].lon) <= cfg.spd_radius_m;
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let mut end = None;
        for j in i + 1..=n {
            let inside = (i + 1..j).all(|k| within(i, k));
            let closed = j == n || !within(i, j);
            if inside && closed {
                end = Some(j);
                break;
            }
        }
        let j = end.expect("some window always closes");
        if pts[j - 1].t - pts[i].t > cfg.spd_duration_s {
            let m = (j - i) as f64;
            out.push(StayPoint {
                lat: pts[i..j].iter().map(|p| p.lat).sum::<f64>() / m,
                lon: pts[i..j].iter().map(|p| p.lon).sum::<f64>() / m,
                t_arrive: pts[i].t,
                t_depart: pts[j - 1].t,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

/// A trace of up to 50 fixes mixing dwells around a few sites with moves.
pub fn random_trace(rng: &mut impl Rng) -> RawTrajectory {
    let n = rng.random_range(1..=50);
    let mut t = rng.random_range(0..10_000);
    let (mut lat, mut lon) = (34.0, -118.3);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        if rng.random::<f64>() < 0.25 {
            // jump up to ~1 km away
            lat += rng.random_range(-0.01..0.01);
            lon += rng.random_range(-0.01..0.01);
        }
        let jitter = rng.random_range(0.0..0.003);
        points.push(GpsPoint {
            lat: lat + rng.random_range(-jitter..=jitter),
            lon: lon + rng.random_range(-jitter..=jitter),
            t,
        });
        t += rng.random_range(1..900);
    }
    RawTrajectory { agent_id: "x".into(), points }
}

/// Returns the index of the first trace where detector and oracle disagree.
pub fn check_spd(n_traces: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for k in 0..n_traces {
        let cfg = PreprocessConfig {
            spd_duration_s: r.random_range(300..3_000),
            spd_radius_m: r.random_range(50.0..400.0),
            ..PreprocessConfig::default()
        };
        let tr = random_trace(&mut r);
        let got = detect_stay_points(&tr, &cfg).map_err(|e| format!("trace {k}: {e}"))?;
        let want = spd_oracle(&tr.points, &cfg);
        if got != want {
            return Err(format!("trace {k}: detector {} stays, oracle {}", got.len(), want.len()));
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ PR curve

/// Brute force over every distinct score as a threshold, highest first.
pub fn pr_oracle(scores: &[(String, f64)], labels: &HashMap<String, u8>) -> (Vec<(f64, f64)>, f64) {
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.1).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let positives = scores.iter().filter(|(a, _)| labels[a] == 1).count();
    let mut points = Vec::new();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for th in thresholds {
        let picked: Vec<&(String, f64)> = scores.iter().filter(|s| s.1 >= th).collect();
        let tp = picked.iter().filter(|(a, _)| labels[a] == 1).count();
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / picked.len() as f64;
        ap += (recall - prev) * precision;
        prev = recall;
        points.push((recall, precision));
    }
    (points, ap)
}

fn agent_scores(scores: &[(String, f64)]) -> Vec<AgentScore> {
    scores
        .iter()
        .map(|(a, s)| AgentScore { agent_id: a.clone(), score: *s, argmax_subtraj_id: 0, n_subtrajs: 1 })
        .collect()
}

/// Random score/label sets with at least one positive and one negative; scores
/// are drawn from a small grid so ties are common.
pub fn check_pr(n_sets: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for k in 0..n_sets {
        let n = r.random_range(2..=100);
        let scores: Vec<(String, f64)> = (0..n).map(|i| (format!("a{i}"), r.random_range(0..12) as f64 * 0.25)).collect();
        let mut labels: HashMap<String, u8> = scores.iter().map(|(a, _)| (a.clone(), u8::from(r.random::<f64>() < 0.3))).collect();
        labels.insert("a0".into(), 1);
        labels.insert("a1".into(), 0);
        let curve = pr_curve(&agent_scores(&scores), &labels).map_err(|e| format!("set {k}: {e}"))?;
        let (points, ap) = pr_oracle(&scores, &labels);
        if curve.points != points || curve.average_precision != ap {
            return Err(format!("set {k}: AP {} vs oracle {ap}", curve.average_precision));
        }
    }
    Ok(())
}

/// AP for perfectly separated scores, and for constant scores with the positive rate.
pub fn pr_edge_cases() -> (f64, f64, f64) {
    let scores: Vec<(String, f64)> = (0..10).map(|i| (format!("a{i}"), if i < 3 { 5.0 - i as f64 } else { 1.0 })).collect();
    let labels: HashMap<String, u8> = (0..10).map(|i| (format!("a{i}"), u8::from(i < 3))).collect();
    let perfect = pr_curve(&agent_scores(&scores), &labels).unwrap().average_precision;
    let flat: Vec<(String, f64)> = scores.iter().map(|(a, _)| (a.clone(), 0.7)).collect();
    let constant = pr_curve(&agent_scores(&flat), &labels).unwrap().average_precision;
    (perfect, constant, 0.3)
}

// ------------------------------------------------------------------ agent max

pub fn agent_max_oracle(records: &[ScoreRecord]) -> BTreeMap<String, (f64, u64, usize)> {
    let mut out: BTreeMap<String, (f64, u64, usize)> = BTreeMap::new();
    for r in records {
        let e = out.entry(r.agent_id.clone()).or_insert((f64::NEG_INFINITY, u64::MAX, 0));
        e.2 += 1;
        if r.score > e.0 || (r.score == e.0 && r.subtraj_id < e.1) {
            e.0 = r.score;
            e.1 = r.subtraj_id;
        }
    }
    out
}

pub fn agent_max_matches(records: &[ScoreRecord]) -> bool {
    let got = agent_level(records).unwrap();
    let want = agent_max_oracle(records);
    got.len() == want.len()
        && got.iter().all(|a| want[&a.agent_id] == (a.score, a.argmax_subtraj_id, a.n_subtrajs))
}

pub fn random_records(r: &mut impl Rng) -> Vec<ScoreRecord> {
    let n = r.random_range(1..200);
    (0..n)
        .map(|i| ScoreRecord::new(i as u64, format!("g{}", r.random_range(0..15)), -(r.random_range(0..40) as f64) / 4.0))
        .collect()
}

pub fn check_agent_max(cases: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for k in 0..cases {
        let mut recs = random_records(&mut r);
        // present records in a random order
        for i in (1..recs.len()).rev() {
            recs.swap(i, r.random_range(0..=i));
        }
        if !agent_max_matches(&recs) {
            return Err(format!("case {k} disagrees with the per-group max"));
        }
    }
    Ok(())
}

// ------------------------------------------------------------ gradient check

pub fn toks(ids: &[u32]) -> Vec<GridToken> {
    ids.iter().map(|&i| GridToken(i)).collect()
}

/// Largest relative error between the analytic ELBO gradient and central
/// differences, over every coordinate of every tensor. Returns the worst
/// `(tensor, error)`.
pub fn gradient_check(seed: u64) -> (String, f64) {
    let hp = HyperParams { d_tok: 4, d_agent: 3, d_ctx: 3, d_hid: 5, d_z: 3, ..HyperParams::default() };
    let dims = ModelDims::new(12, 2, 4, &hp);
    let mut r = rng(seed);
    let mut params = ModelParams::init(dims, &mut r);
    // Nonzero biases and larger embeddings so every path carries signal.
    for (_, t) in params.named_mut() {
        for v in t.data.iter_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let batch = vec![
        Example { tokens: toks(&[0, 5, 11, 3]), ctx: ContextInput { agent_row: Some(1), poi: Some(vec![1.0, 0.0, 2.0, 0.5]) } },
        Example { tokens: toks(&[7, 7, 2]), ctx: ContextInput { agent_row: Some(2), poi: Some(vec![0.0, 3.0, 1.0, 0.0]) } },
        Example { tokens: toks(&[9, 1, 4, 6, 10]), ctx: ContextInput { agent_row: Some(0), poi: Some(vec![0.2, 0.2, 0.0, 1.0]) } },
    ];
    let noise: Vec<Vec<f64>> = batch.iter().map(|_| (0..3).map(|_| r.random_range(-1.5..1.5)).collect()).collect();
    let loss = |p: &ModelParams| cvae::elbo_loss_with_noise(&batch, p, &hp, &noise).unwrap().0;
    let (_, grad) = cvae::elbo_loss_with_noise(&batch, &params, &hp, &noise).unwrap();

    let h = 1e-4;
    let grads: Vec<(String, Vec<f64>)> = grad.named().into_iter().map(|(n, t)| (n.to_string(), t.data.clone())).collect();
    let mut worst = (String::new(), 0.0f64);
    for (ti, (name, g)) in grads.iter().enumerate() {
        for (k, &analytic) in g.iter().enumerate() {
            let orig = params.named()[ti].1.data[k];
            params.named_mut()[ti].1.data[k] = orig + h;
            let up = loss(&params);
            params.named_mut()[ti].1.data[k] = orig - h;
            let down = loss(&params);
            params.named_mut()[ti].1.data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if err > worst.1 {
                worst = (format!("{name}[{k}]"), err);
            }
        }
    }
    worst
}

// ----------------------------------------------------------------- KL vs MC

pub const KL_SEED: u64 = 18;

/// For each random posterior, whether the closed-form KL lies within three
/// standard errors of a Monte-Carlo estimate. Returns the number of misses.
pub fn kl_vs_mc(n_posteriors: usize, samples: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut misses = 0;
    for _ in 0..n_posteriors {
        let d = r.random_range(1..=4);
        let post = LatentPosterior {
            mu: (0..d).map(|_| r.random_range(-2.0..2.0)).collect(),
            logvar: (0..d).map(|_| r.random_range(-2.0..1.5)).collect(),
        };
        let closed = cvae::kl_standard_normal(&post);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..samples {
            let eps: Vec<f64> = cvae::model::standard_normal(d, &mut r);
            let z = cvae::reparameterize(&post, &eps);
            // log q(z) - log p(z); the 2*pi terms cancel
            let lq: f64 = (0..d).map(|j| -0.5 * (post.logvar[j] + eps[j] * eps[j])).sum();
            let lp: f64 = z.iter().map(|v| -0.5 * v * v).sum();
            let x = lq - lp;
            s1 += x;
            s2 += x * x;
        }
        let n = samples as f64;
        let mean = s1 / n;
        let se = ((s2 / n - mean * mean).max(0.0) / n).sqrt();
        if (closed - mean).abs() > 3.0 * se {
            misses += 1;
        }
    }
    misses
}

// ----------------------------------------------------------- memorization

pub struct Memorization {
    pub vocab: usize,
    /// Per-token reconstruction log-likelihood of each training sequence.
    pub train_loglik: Vec<f64>,
    pub train_scores: Vec<f64>,
    pub random_score: f64,
    pub first_loss: f64,
    pub epoch50_loss: f64,
}

pub fn memorization(seed: u64) -> Memorization {
    let vocab = 12;
    let mut r = rng(seed);
    let seqs: Vec<Vec<GridToken>> = (0..10)
        .map(|_| {
            let n = r.random_range(3..=6);
            (0..n).map(|_| GridToken(r.random_range(0..vocab as u32))).collect()
        })
        .collect();
    let hp = HyperParams {
        d_tok: 8,
        d_agent: 2,
        d_ctx: 2,
        d_hid: 16,
        d_z: 4,
        mc_samples: 16,
        lr: 1e-2,
        epochs: 200,
        batch_size: 10,
        seed,
        ..HyperParams::default()
    };
    let ex: Vec<Example> = seqs.iter().map(|t| Example { tokens: t.clone(), ctx: ContextInput::default() }).collect();
    let dims = ModelDims::new(vocab, 0, 0, &hp);
    let out = cvae::train(&ex, dims, &hp).unwrap();
    let c = ContextInput::default().vector(&out.params);
    let mut score_rng = rng(seed ^ 0xABCD);
    let mut score = |t: &[GridToken]| {
        cvae::anomaly_score(0, "x", t, &c, &out.params, hp.mc_samples, true, &mut score_rng).unwrap()
    };
    let recs: Vec<ScoreRecord> = seqs.iter().map(|t| score(t)).collect();
    let random: Vec<GridToken> = (0..5).map(|_| GridToken(r.random_range(0..vocab as u32))).collect();
    let random_score = score(&random).score;
    Memorization {
        vocab,
        train_loglik: recs.iter().map(|s| s.recon_loglik).collect(),
        train_scores: recs.iter().map(|s| s.score).collect(),
        random_score,
        first_loss: out.loss_trace[0],
        epoch50_loss: out.loss_trace[49],
    }
}

// ------------------------------------------------------- context separation

/// Smallest `k` with `P(Binomial(32, 1/2) >= k) < 0.01`.
pub const SIGN_TEST_K: usize = 24;

pub fn binomial_upper_tail(n: u64, k: u64) -> f64 {
    let choose = |n: u64, k: u64| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (k..=n).map(|j| choose(n, j)).sum::<f64>() / 2f64.powi(n as i32)
}

/// Two agents whose sequences use disjoint halves of a 12-cell vocabulary.
/// Trains one model in `mode`, then scores held-out sequences of each agent
/// under its own id and under the other agent's id, 32 times with fresh noise.
/// Returns how many repetitions raised the median score when ids are swapped.
pub fn context_separation(mode: ContextMode, seed: u64) -> usize {
    let mut r = rng(seed);
    let walk = |r: &mut ChaCha8Rng, base: u32| -> Vec<GridToken> {
        let n = r.random_range(3..=6);
        (0..n).map(|_| GridToken(base + r.random_range(0..6))).collect()
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (agent, base) in [("a", 0u32), ("b", 6u32)] {
        for i in 0..60 {
            let seq = TokenSequence { subtraj_id: 0, agent_id: agent.into(), tokens: walk(&mut r, base), t_start: i, t_end: i + 1 };
            if i < 50 {
                train.push(seq);
            } else {
                test.push(seq);
            }
        }
    }
    let hp = HyperParams {
        d_tok: 8,
        d_agent: 4,
        d_ctx: 2,
        d_hid: 12,
        d_z: 3,
        mc_samples: 4,
        lr: 1e-2,
        epochs: 40,
        batch_size: 20,
        seed,
        ..HyperParams::default()
    };
    let agents = AgentTable::from_ids(["a", "b"]);
    let builder = ContextBuilder::new(mode, agents.clone(), None).unwrap();
    let ex: Vec<Example> = train.iter().map(|s| Example { tokens: s.tokens.clone(), ctx: builder.input(s) }).collect();
    let dims = ModelDims::new(12, agents.len(), 0, &hp);
    let params = cvae::train(&ex, dims, &hp).unwrap().params;

    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
    };
    let mut raised = 0;
    for rep in 0..32u64 {
        let mut own_rng = rng(seed.wrapping_add(1000 + 2 * rep));
        let mut swap_rng = rng(seed.wrapping_add(1001 + 2 * rep));
        let mut own = Vec::new();
        let mut swapped = Vec::new();
        for s in &test {
            let other = TokenSequence { agent_id: if s.agent_id == "a" { "b".into() } else { "a".into() }, ..s.clone() };
            let c_own = builder.context_vector(s, &params);
            let c_swap = builder.context_vector(&other, &params);
            own.push(cvae::anomaly_score(0, "", &s.tokens, &c_own, &params, hp.mc_samples, true, &mut own_rng).unwrap().score);
            swapped.push(cvae::anomaly_score(0, "", &s.tokens, &c_swap, &params, hp.mc_samples, true, &mut swap_rng).unwrap().score);
        }
        if median(swapped) > median(own) {
            raised += 1;
        }
    }
    raised
}

// ------------------------------------------------------------- determinism

/// Bytes of every artifact of a small five-mode ablation.
pub fn ablation_artifacts(seed: u64) -> Vec<(String, Vec<u8>)> {
    use trajscope_core::io::scores_to_csv;
    use trajscope_core::pipeline::{prepare, run_ablation, RunConfig};
    use trajscope_core::simulate::{simulate, SimConfig};

    let sim = SimConfig { seed, n_agents: 30, n_days: 10, anomaly_rate: 0.1, ..SimConfig::default() };
    let ds = simulate(&sim).unwrap();
    let rc = RunConfig::default();
    let prep = prepare(&ds.trajectories, &ds.city.pois, &sim.grid, &rc.preprocess, &rc.poi).unwrap();
    let hp = HyperParams { d_tok: 6, d_agent: 4, d_ctx: 4, d_hid: 8, d_z: 3, mc_samples: 4, epochs: 3, seed, ..HyperParams::default() };
    let labels: HashMap<String, u8> = ds.truth.agent_labels.into_iter().collect();
    let run = run_ablation(&prep, &ContextMode::ALL, &hp, &labels, 2);
    assert!(run.failures.is_empty(), "{:?}", run.failures);
    let mut out = Vec::new();
    for (mode, r) in &run.runs {
        out.push((format!("model_{mode}"), r.checkpoint.to_bytes().unwrap()));
        out.push((format!("scores_{mode}"), scores_to_csv(&r.scores).unwrap()));
    }
    out.push(("ablation.csv".into(), run.report.to_csv().into_bytes()));
    out
}

/// Runs the pipeline twice and names the first artifact that differs.
pub fn check_determinism(seed: u64) -> Result<usize, String> {
    let a = ablation_artifacts(seed);
    let b = ablation_artifacts(seed);
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        if x != y {
            return Err(format!("{name} differs"));
        }
    }
    if a.len() != b.len() {
        return Err("artifact lists differ".into());
    }
    Ok(a.len())
}
