//! Raw GPS traces to grid-token sequences.
//!
//! The pipeline per agent is: stay-point detection, partitioning of the stay
//! sequence into subtrajectories at long dwells and long transitions, then
//! mapping each subtrajectory onto the grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_points, to_token, GpsPoint, GridSpec, GridToken, StayPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrajectory {
    pub agent_id: String,
    pub points: Vec<GpsPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtrajectory {
    pub agent_id: String,
    pub stays: Vec<StayPoint>,
}

/// A tokenized subtrajectory, the unit the model reconstructs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub subtraj_id: u64,
    pub agent_id: String,
    pub tokens: Vec<GridToken>,
    pub t_start: i64,
    pub t_end: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub spd_duration_s: i64,
    pub spd_radius_m: f64,
    pub long_stay_split_s: i64,
    pub transition_split_s: i64,
    pub w_max: usize,
    pub collapse_repeats: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            spd_duration_s: 1_200,
            spd_radius_m: 200.0,
            long_stay_split_s: 14_400,
            transition_split_s: 18_000,
            w_max: 32,
            collapse_repeats: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spd_duration_s <= 0
            || self.spd_radius_m.is_nan()
            || self.spd_radius_m <= 0.0
            || self.long_stay_split_s <= 0
            || self.transition_split_s <= 0
        {
            return Err(Error::Config("preprocessing thresholds must be positive".into()));
        }
        if self.long_stay_split_s < self.spd_duration_s {
            return Err(Error::Config("long_stay_split_s must be >= spd_duration_s".into()));
        }
        if self.w_max < 2 {
            return Err(Error::Config("w_max must be at least 2".into()));
        }
        Ok(())
    }
}

/// Two-pointer stay-point detection.
///
/// From anchor `i`, the window extends to the last fix before the first fix
/// farther than `spd_radius_m` from the anchor (or to the end of the trace).
/// The window is a stay when the time from the anchor to the last in-radius fix
/// exceeds `spd_duration_s`; scanning then resumes at the first out-of-radius fix.
pub fn detect_stay_points(traj: &RawTrajectory, cfg: &PreprocessConfig) -> Result<Vec<StayPoint>> {
    let pts = &traj.points;
    if pts.is_empty() {
        return Err(Error::EmptyTrajectory(traj.agent_id.clone()));
    }
    if let Some(k) = pts.windows(2).position(|w| w[1].t <= w[0].t) {
        return Err(Error::UnsortedTrajectory { agent_id: traj.agent_id.clone(), index: k + 1 });
    }

    let n = pts.len();
    let mut stays = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && haversine_points(&pts[i], &pts[j]) <= cfg.spd_radius_m {
            j += 1;
        }
        if pts[j - 1].t - pts[i].t > cfg.spd_duration_s {
            let members = &pts[i..j];
            let m = members.len() as f64;
            stays.push(StayPoint {
                lat: members.iter().map(|p| p.lat).sum::<f64>() / m,
                lon: members.iter().map(|p| p.lon).sum::<f64>() / m,
                t_arrive: pts[i].t,
                t_depart: pts[j - 1].t,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    Ok(stays)
}

/// Cuts a stay sequence into subtrajectories.
///
/// A stay with dwell `>= long_stay_split_s` closes the current piece and also
/// opens the next one. A transition gap `> transition_split_s` is a hard cut.
/// Pieces with fewer than two stays are dropped.
pub fn partition(agent_id: &str, stays: &[StayPoint], cfg: &PreprocessConfig) -> Vec<Subtrajectory> {
    let mut out = Vec::new();
    let mut current: Vec<StayPoint> = Vec::new();
    let flush = |piece: Vec<StayPoint>, out: &mut Vec<Subtrajectory>| {
        if piece.len() >= 2 {
            out.push(Subtrajectory { agent_id: agent_id.to_string(), stays: piece });
        }
    };

    for (k, stay) in stays.iter().enumerate() {
        current.push(*stay);
        if stay.dwell_s() >= cfg.long_stay_split_s {
            let piece = std::mem::replace(&mut current, vec![*stay]);
            flush(piece, &mut out);
        }
        if let Some(next) = stays.get(k + 1) {
            if next.t_arrive - stay.t_depart > cfg.transition_split_s {
                flush(std::mem::take(&mut current), &mut out);
            }
        }
    }
    flush(current, &mut out);
    out
}

/// Maps a subtrajectory onto grid tokens. Returns `None` when fewer than two
/// tokens survive run-collapsing and truncation.
pub fn tokenize(
    sub: &Subtrajectory,
    grid: &GridSpec,
    cfg: &PreprocessConfig,
    subtraj_id: u64,
) -> Result<Option<TokenSequence>> {
    let mut tokens = sub
        .stays
        .iter()
        .map(|s| to_token(s, grid))
        .collect::<Result<Vec<_>>>()?;
    if cfg.collapse_repeats {
        tokens.dedup();
    }
    tokens.truncate(cfg.w_max);
    if tokens.len() < 2 {
        return Ok(None);
    }
    let (first, last) = (sub.stays[0], sub.stays[sub.stays.len() - 1]);
    Ok(Some(TokenSequence {
        subtraj_id,
        agent_id: sub.agent_id.clone(),
        tokens,
        t_start: first.t_arrive,
        t_end: last.t_depart,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessFailure {
    pub agent_id: String,
    pub message: String,
}

/// Table-1 style descriptive statistics of a preprocessed corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_agents: usize,
    pub n_train_agents: usize,
    pub n_test_agents: usize,
    pub n_train_sequences: usize,
    pub n_test_sequences: usize,
    pub min_length: Option<usize>,
    pub max_length: Option<usize>,
    /// Sequences with `t_start < split_t` form the training half.
    pub split_t: i64,
    pub n_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sequences: Vec<TokenSequence>,
    pub stats: CorpusStats,
    pub failures: Vec<PreprocessFailure>,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &TokenSequence> {
        let split = self.stats.split_t;
        self.sequences.iter().filter(move |s| s.t_start < split)
    }

    pub fn test(&self) -> impl Iterator<Item = &TokenSequence> {
        let split = self.stats.split_t;
        self.sequences.iter().filter(move |s| s.t_start >= split)
    }
}

/// Time halfway through the covered period, the default train/test boundary.
pub fn temporal_midpoint(trajs: &[RawTrajectory]) -> i64 {
    let ts = trajs.iter().flat_map(|t| t.points.iter().map(|p| p.t));
    let (lo, hi) = ts.fold((i64::MAX, i64::MIN), |(lo, hi), t| (lo.min(t), hi.max(t)));
    if lo > hi {
        0
    } else {
        lo + (hi - lo) / 2
    }
}

/// Runs the full per-agent pipeline over a corpus.
///
/// Output is ordered by agent id then time, and `subtraj_id`s are assigned
/// sequentially in that order. Agents or subtrajectories that fail are
/// reported in `failures` and skipped.
pub fn preprocess_corpus(
    trajs: &[RawTrajectory],
    grid: &GridSpec,
    cfg: &PreprocessConfig,
    split_t: Option<i64>,
) -> Result<Dataset> {
    cfg.validate()?;
    grid.validate()?;
    let split_t = split_t.unwrap_or_else(|| temporal_midpoint(trajs));

    let mut order: Vec<&RawTrajectory> = trajs.iter().collect();
    order.sort_by(|a, b| a.agent_id.cmp(&b.agent_id));

    type AgentOut = (Vec<(Subtrajectory, Vec<GridToken>)>, Vec<PreprocessFailure>);
    let per_agent: Vec<AgentOut> = order
        .par_iter()
        .map(|traj| {
            let mut failures = Vec::new();
            let mut pieces = Vec::new();
            let stays = match detect_stay_points(traj, cfg) {
                Ok(s) => s,
                Err(e) => {
                    failures.push(PreprocessFailure { agent_id: traj.agent_id.clone(), message: e.to_string() });
                    return (pieces, failures);
                }
            };
            for sub in partition(&traj.agent_id, &stays, cfg) {
                match tokenize(&sub, grid, cfg, 0) {
                    Ok(Some(seq)) => pieces.push((sub, seq.tokens)),
                    Ok(None) => {}
                    Err(e) => failures.push(PreprocessFailure { agent_id: traj.agent_id.clone(), message: e.to_string() }),
                }
            }
            (pieces, failures)
        })
        .collect();

    let mut sequences = Vec::new();
    let mut failures = Vec::new();
    for (pieces, fails) in per_agent {
        for (sub, tokens) in pieces {
            let id = sequences.len() as u64;
            sequences.push(TokenSequence {
                subtraj_id: id,
                agent_id: sub.agent_id,
                tokens,
                t_start: sub.stays[0].t_arrive,
                t_end: sub.stays[sub.stays.len() - 1].t_depart,
            });
        }
        failures.extend(fails);
    }

    let stats = corpus_stats(&sequences, split_t, failures.len());
    Ok(Dataset { sequences, stats, failures })
}

pub fn corpus_stats(sequences: &[TokenSequence], split_t: i64, n_failures: usize) -> CorpusStats {
    use std::collections::BTreeSet;
    let mut agents = BTreeSet::new();
    let mut train_agents = BTreeSet::new();
    let mut test_agents = BTreeSet::new();
    let (mut n_train, mut n_test) = (0, 0);
    for s in sequences {
        agents.insert(s.agent_id.as_str());
        if s.t_start < split_t {
            n_train += 1;
            train_agents.insert(s.agent_id.as_str());
        } else {
            n_test += 1;
            test_agents.insert(s.agent_id.as_str());
        }
    }
    CorpusStats {
        n_agents: agents.len(),
        n_train_agents: train_agents.len(),
        n_test_agents: test_agents.len(),
        n_train_sequences: n_train,
        n_test_sequences: n_test,
        min_length: sequences.iter().map(|s| s.tokens.len()).min(),
        max_length: sequences.iter().map(|s| s.tokens.len()).max(),
        split_t,
        n_failures,
    }
}
