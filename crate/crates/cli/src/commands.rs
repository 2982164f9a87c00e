use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde_json::{json, Value};
use trajscope_core::cvae::{Checkpoint, ContextMode};
use trajscope_core::geo::GridSpec;
use trajscope_core::io::{self as tio, DatasetMeta};
use trajscope_core::pipeline::{self, PoiVectors, RunConfig};
use trajscope_core::poi::{build_poi_context, GridVectors};
use trajscope_core::preprocess::{preprocess_corpus, TokenSequence};
use trajscope_core::simulate::simulate as run_simulation;

use crate::GlobalOpts;

pub const TRAJECTORIES: &str = "trajectories.jsonl";
pub const POIS: &str = "pois.csv";
pub const LABELS: &str = "labels.csv";
pub const GROUND_TRUTH: &str = "ground_truth.json";
pub const GRID: &str = "grid.json";
pub const SEQUENCES: &str = "sequences.jsonl";
pub const DATASET: &str = "dataset.json";
pub const CLUSTERS: &str = "clusters.json";
pub const POI_META: &str = "poi_context.json";
pub const GRID_VECTORS: &str = "grid_vectors.jsonl";
pub const GRID_VECTORS_BASELINE: &str = "grid_vectors_baseline.jsonl";
pub const CLUSTER_MAP: &str = "cluster_map.csv";

pub fn checkpoint_name(mode: ContextMode) -> String {
    format!("model_{mode}.cavae")
}

pub fn scores_name(mode: ContextMode) -> String {
    format!("scores_{mode}.csv")
}

/// Bad input or configuration, reported with exit code 1.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// 1 for validation errors, 2 for failures while running.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() || cause.is::<toml::de::Error>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<trajscope_core::Error>() {
            return if err.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn load_config(g: &GlobalOpts) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(input(path)?).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if let Some(mode) = g.mode {
        cfg.mode = mode;
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn input(path: &Path) -> Result<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(invalid(format!("input file {} not found", path.display())))
    }
}

fn or_default(path: Option<PathBuf>, g: &GlobalOpts, name: &str) -> PathBuf {
    path.unwrap_or_else(|| g.out.join(name))
}

fn write(g: &GlobalOpts, name: &str, bytes: &[u8]) -> Result<()> {
    let path = g.out.join(name);
    tio::write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Explicit `--grid`, then `<out>/grid.json`, then the configured simulator grid.
fn resolve_grid(g: &GlobalOpts, cfg: &RunConfig, explicit: Option<PathBuf>) -> Result<GridSpec> {
    let grid = match explicit {
        Some(p) => tio::read_json(input(&p)?)?,
        None if g.out.join(GRID).is_file() => tio::read_json(&g.out.join(GRID))?,
        None => cfg.sim.grid,
    };
    Ok(grid)
}

pub fn simulate(g: &GlobalOpts) -> Result<Value> {
    let cfg = load_config(g)?;
    let ds = run_simulation(&cfg.sim)?;
    write_simulation(g, &cfg, &ds)?;
    Ok(json!({
        "command": "simulate",
        "seed": cfg.sim.seed,
        "agents": ds.trajectories.len(),
        "fixes": ds.trajectories.iter().map(|t| t.points.len()).sum::<usize>(),
        "pois": ds.city.pois.len(),
        "positives": ds.truth.n_positive(),
    }))
}

fn write_simulation(g: &GlobalOpts, cfg: &RunConfig, ds: &trajscope_core::simulate::SimDataset) -> Result<()> {
    write(g, TRAJECTORIES, &tio::trajectories_to_jsonl(&ds.trajectories)?)?;
    write(g, POIS, &tio::pois_to_csv(&ds.city.pois)?)?;
    write(g, LABELS, &tio::labels_to_csv(&ds.truth.labels())?)?;
    write(g, GROUND_TRUTH, &tio::to_json_pretty(&ds.truth)?)?;
    write(g, GRID, &tio::to_json_pretty(&cfg.sim.grid)?)
}

pub fn preprocess(g: &GlobalOpts, trajectories: Option<PathBuf>, grid: Option<PathBuf>) -> Result<Value> {
    let cfg = load_config(g)?;
    let trajs = tio::read_trajectories(input(&or_default(trajectories, g, TRAJECTORIES))?)?;
    let grid = resolve_grid(g, &cfg, grid)?;
    let ds = preprocess_corpus(&trajs, &grid, &cfg.preprocess, None)?;
    for f in &ds.failures {
        log::warn!("agent {}: {}", f.agent_id, f.message);
    }
    write(g, SEQUENCES, &tio::sequences_to_jsonl(&ds.sequences)?)?;
    let meta = DatasetMeta { grid, config: cfg.preprocess.clone(), stats: ds.stats.clone(), n_pois: None };
    write(g, DATASET, &tio::to_json_pretty(&meta)?)?;
    Ok(json!({ "command": "preprocess", "stats": ds.stats }))
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct PoiMeta {
    k: usize,
    categories: Vec<String>,
}

pub fn embed_poi(g: &GlobalOpts, pois: Option<PathBuf>, grid: Option<PathBuf>) -> Result<Value> {
    let cfg = load_config(g)?;
    let pois = tio::read_pois(input(&or_default(pois, g, POIS))?)?;
    let grid = resolve_grid(g, &cfg, grid)?;
    let ctx = build_poi_context(&pois, &grid, &cfg.poi)?;
    let meta = PoiMeta { k: ctx.clusters.k, categories: ctx.categories.names().to_vec() };
    write(g, CLUSTERS, &tio::to_json_pretty(&ctx.clusters)?)?;
    write(g, POI_META, &tio::to_json_pretty(&meta)?)?;
    write(g, GRID_VECTORS, &tio::grid_vectors_to_jsonl(&ctx.contextual)?)?;
    write(g, GRID_VECTORS_BASELINE, &tio::grid_vectors_to_jsonl(&ctx.baseline)?)?;
    let mut map = String::from("token,cluster,count\n");
    for (tok, cluster, count) in ctx.contextual.dominant() {
        map.push_str(&format!("{},{cluster},{count}\n", tok.0));
    }
    write(g, CLUSTER_MAP, map.as_bytes())?;
    Ok(json!({
        "command": "embed-poi",
        "pois": pois.len(),
        "k": meta.k,
        "categories": meta.categories.len(),
        "cells": ctx.contextual.records().count(),
    }))
}

/// Grid vectors written by `embed-poi`, or empty sets when it has not run.
fn load_vectors(g: &GlobalOpts, mode: ContextMode) -> Result<(GridVectors, GridVectors)> {
    let meta_path = g.out.join(POI_META);
    if !meta_path.is_file() {
        if mode.uses_poi() {
            return Err(invalid(format!("mode {mode} needs POI context; run embed-poi first")));
        }
        return Ok((GridVectors::empty(0), GridVectors::empty(0)));
    }
    let meta: PoiMeta = tio::read_json(&meta_path)?;
    let contextual = tio::read_grid_vectors(input(&g.out.join(GRID_VECTORS))?, meta.k)?;
    let baseline = tio::read_grid_vectors(input(&g.out.join(GRID_VECTORS_BASELINE))?, meta.categories.len())?;
    Ok((contextual, baseline))
}

fn load_dataset(g: &GlobalOpts) -> Result<(DatasetMeta, Vec<TokenSequence>)> {
    let meta: DatasetMeta = tio::read_json(input(&g.out.join(DATASET))?)?;
    let seqs = tio::read_sequences(input(&g.out.join(SEQUENCES))?)?;
    Ok((meta, seqs))
}

pub fn train(g: &GlobalOpts) -> Result<Value> {
    let cfg = load_config(g)?;
    let (meta, seqs) = load_dataset(g)?;
    let (contextual, baseline) = load_vectors(g, cfg.mode)?;
    let train: Vec<&TokenSequence> = seqs.iter().filter(|s| s.t_start < meta.stats.split_t).collect();
    let vectors = PoiVectors { contextual: &contextual, baseline: &baseline };
    let ckpt = pipeline::train_on(&train, meta.grid.vocab_size(), vectors, cfg.mode, &cfg.model)?;
    let name = checkpoint_name(cfg.mode);
    let bytes = ckpt.to_bytes()?;
    write(g, &name, &bytes)?;
    Ok(json!({
        "command": "train",
        "mode": cfg.mode,
        "train_sequences": train.len(),
        "agents": ckpt.agents.len(),
        "checkpoint": name,
        "bytes": bytes.len(),
    }))
}

pub fn score(g: &GlobalOpts, checkpoint: Option<PathBuf>) -> Result<Value> {
    let cfg = load_config(g)?;
    let path = checkpoint.unwrap_or_else(|| g.out.join(checkpoint_name(cfg.mode)));
    let file = File::open(input(&path)?)?;
    let ckpt = Checkpoint::read_from(BufReader::new(file)).with_context(|| format!("loading {}", path.display()))?;
    let (meta, seqs) = load_dataset(g)?;
    let (contextual, baseline) = load_vectors(g, ckpt.mode)?;
    let test: Vec<TokenSequence> = seqs.into_iter().filter(|s| s.t_start >= meta.stats.split_t).collect();
    let vectors = PoiVectors { contextual: &contextual, baseline: &baseline };
    let scores = pipeline::score_with(&ckpt, vectors, &test, cfg.threads)?;
    let name = scores_name(ckpt.mode);
    write(g, &name, &tio::scores_to_csv(&scores)?)?;
    Ok(json!({ "command": "score", "mode": ckpt.mode, "sequences": scores.len(), "scores": name }))
}

pub fn evaluate(g: &GlobalOpts, scores: Option<PathBuf>, labels: Option<PathBuf>) -> Result<Value> {
    let cfg = load_config(g)?;
    let scores_path = scores.unwrap_or_else(|| g.out.join(scores_name(cfg.mode)));
    let scores = tio::read_scores(input(&scores_path)?)?;
    let labels = tio::read_labels(input(&or_default(labels, g, LABELS))?)?;
    let eval = pipeline::evaluate(&scores, &labels)?;
    write(g, &format!("pr_{}.json", cfg.mode), &tio::to_json_pretty(&eval.curve)?)?;
    write(g, &format!("agents_{}.csv", cfg.mode), &tio::agent_scores_to_csv(&eval.agents, &labels)?)?;
    Ok(json!({
        "command": "evaluate",
        "mode": cfg.mode,
        "agents": eval.agents.len(),
        "positives": labels.values().filter(|&&l| l == 1).count(),
        "average_precision": eval.curve.average_precision,
    }))
}

pub fn ablation(g: &GlobalOpts, modes: Vec<ContextMode>) -> Result<Value> {
    let cfg = load_config(g)?;
    let modes = if modes.is_empty() { ContextMode::ALL.to_vec() } else { modes };
    let have_inputs = [TRAJECTORIES, POIS, LABELS].iter().all(|f| g.out.join(f).is_file());
    let (trajs, pois, labels) = if have_inputs {
        log::info!("using existing inputs in {}", g.out.display());
        (
            tio::read_trajectories(&g.out.join(TRAJECTORIES))?,
            tio::read_pois(&g.out.join(POIS))?,
            tio::read_labels(&g.out.join(LABELS))?,
        )
    } else {
        log::info!("simulating a city with seed {}", cfg.sim.seed);
        let ds = run_simulation(&cfg.sim)?;
        write_simulation(g, &cfg, &ds)?;
        let labels: HashMap<String, u8> = ds.truth.agent_labels.into_iter().collect();
        (ds.trajectories, ds.city.pois, labels)
    };
    let grid = resolve_grid(g, &cfg, None)?;
    let prep = pipeline::prepare(&trajs, &pois, &grid, &cfg.preprocess, &cfg.poi)?;
    let run = pipeline::run_ablation(&prep, &modes, &cfg.model, &labels, cfg.threads);

    for (mode, r) in &run.runs {
        write(g, &checkpoint_name(*mode), &r.checkpoint.to_bytes()?)?;
        write(g, &scores_name(*mode), &tio::scores_to_csv(&r.scores)?)?;
        write(g, &format!("pr_{mode}.json"), &tio::to_json_pretty(&r.evaluation.curve)?)?;
    }
    write(g, "ablation.csv", run.report.to_csv().as_bytes())?;
    write(g, "ablation_table.csv", run.report.to_table_csv().as_bytes())?;
    let aps: BTreeMap<String, f64> = run.report.rows.iter().map(|r| (r.mode.to_string(), r.average_precision)).collect();
    let failures: BTreeMap<String, &String> = run.failures.iter().map(|(m, e)| (m.to_string(), e)).collect();
    let summary = json!({ "command": "ablation", "average_precision": aps, "failures": failures });
    write(g, "ablation.json", &tio::to_json_pretty(&summary)?)?;
    if !run.failures.is_empty() {
        return Err(anyhow!("{} of {} modes failed: {:?}", run.failures.len(), modes.len(), failures));
    }
    Ok(summary)
}
