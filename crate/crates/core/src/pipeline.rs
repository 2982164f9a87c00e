//! End-to-end stages shared by the command line and the experiments:
//! preprocess, POI context, per-mode training, scoring and evaluation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::cvae::{train, AgentTable, Checkpoint, ContextBuilder, ContextMode, Example, HyperParams, ModelDims, ScoreRecord};
use crate::error::{Error, Result};
use crate::geo::GridSpec;
use crate::poi::{build_poi_context, GridVectors, Poi, PoiContext, PoiContextConfig};
use crate::preprocess::{preprocess_corpus, Dataset, PreprocessConfig, RawTrajectory, TokenSequence};
use crate::scoring::{ablation_report, agent_level, pr_curve, AblationReport, AgentScore, PrCurve};
use crate::simulate::SimConfig;

/// Every setting of a run. Each section has defaults; TOML files override them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub preprocess: PreprocessConfig,
    pub poi: PoiContextConfig,
    pub model: HyperParams,
    pub mode: ContextMode,
    /// Worker threads for scoring only.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            preprocess: PreprocessConfig::default(),
            poi: PoiContextConfig::default(),
            model: HyperParams::default(),
            mode: ContextMode::default(),
            threads: 1,
        }
    }
}

impl RunConfig {
    /// Sets every seed at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.sim.seed = seed;
        self.poi.seed = seed;
        self.model.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.model.validate()?;
        if self.model.w_max < self.preprocess.w_max {
            return Err(Error::Config(format!(
                "model w_max {} is below preprocess w_max {}",
                self.model.w_max, self.preprocess.w_max
            )));
        }
        Ok(())
    }
}

/// Smaller model used for the desk-scale ablation: a full five-mode run over
/// the default synthetic city finishes in a few minutes on one core.
pub fn desk_hyperparams(seed: u64) -> HyperParams {
    HyperParams {
        d_tok: 16,
        d_agent: 16,
        d_ctx: 8,
        d_hid: 32,
        d_z: 8,
        mc_samples: 8,
        lr: 3e-3,
        epochs: 30,
        batch_size: 64,
        seed,
        ..HyperParams::default()
    }
}

/// A tokenized corpus together with its POI context.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub grid: GridSpec,
    pub dataset: Dataset,
    pub poi: PoiContext,
}

impl Prepared {
    pub fn train_seqs(&self) -> Vec<&TokenSequence> {
        self.dataset.train().collect()
    }

    pub fn test_seqs(&self) -> Vec<TokenSequence> {
        self.dataset.test().cloned().collect()
    }
}

pub fn prepare(
    trajs: &[RawTrajectory],
    pois: &[Poi],
    grid: &GridSpec,
    pre: &PreprocessConfig,
    poi_cfg: &PoiContextConfig,
) -> Result<Prepared> {
    let dataset = preprocess_corpus(trajs, grid, pre, None)?;
    let poi = build_poi_context(pois, grid, poi_cfg)?;
    Ok(Prepared { grid: *grid, dataset, poi })
}

/// The two per-cell POI vector sets a context builder can draw from.
#[derive(Debug, Clone, Copy)]
pub struct PoiVectors<'a> {
    pub contextual: &'a GridVectors,
    pub baseline: &'a GridVectors,
}

impl<'a> From<&'a PoiContext> for PoiVectors<'a> {
    fn from(p: &'a PoiContext) -> Self {
        Self { contextual: &p.contextual, baseline: &p.baseline }
    }
}

/// Context builder for `mode`, with the agent table taken from training data.
pub fn context_builder(mode: ContextMode, agents: AgentTable, poi: PoiVectors<'_>) -> Result<ContextBuilder> {
    let gv = match mode {
        ContextMode::PoiCategories => Some(poi.baseline.clone()),
        ContextMode::PoiContextual | ContextMode::Combined => Some(poi.contextual.clone()),
        ContextMode::None | ContextMode::AgentId => None,
    };
    ContextBuilder::new(mode, agents, gv)
}

pub fn examples<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>, builder: &ContextBuilder) -> Vec<Example> {
    seqs.into_iter()
        .map(|s| Example { tokens: s.tokens.clone(), ctx: builder.input(s) })
        .collect()
}

/// Trains one model on `train_seqs` over a vocabulary of `vocab` grid tokens.
pub fn train_on(
    train_seqs: &[&TokenSequence],
    vocab: usize,
    poi: PoiVectors<'_>,
    mode: ContextMode,
    hp: &HyperParams,
) -> Result<Checkpoint> {
    if train_seqs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let agents = AgentTable::from_ids(train_seqs.iter().map(|s| s.agent_id.as_str()));
    let builder = context_builder(mode, agents.clone(), poi)?;
    let dims = ModelDims::new(vocab, agents.len(), builder.poi_dim(), hp);
    let ex = examples(train_seqs.iter().copied(), &builder);
    log::info!("training mode {mode} on {} sequences", ex.len());
    let outcome = train(&ex, dims, hp)?;
    if let Some(last) = outcome.loss_trace.last() {
        log::info!("mode {mode}: final loss {last:.5}");
    }
    Ok(Checkpoint { hyperparams: hp.clone(), mode, agents, params: outcome.params })
}

/// Trains one model on the training half.
pub fn train_mode(prep: &Prepared, mode: ContextMode, hp: &HyperParams) -> Result<Checkpoint> {
    train_on(&prep.train_seqs(), prep.grid.vocab_size(), (&prep.poi).into(), mode, hp)
}

/// Scores `seqs` with a checkpoint, using its own mode and agent table.
pub fn score_with(ckpt: &Checkpoint, poi: PoiVectors<'_>, seqs: &[TokenSequence], threads: usize) -> Result<Vec<ScoreRecord>> {
    let builder = context_builder(ckpt.mode, ckpt.agents.clone(), poi)?;
    let hp = &ckpt.hyperparams;
    crate::cvae::score_sequences(seqs, &builder, &ckpt.params, hp.mc_samples, hp.length_normalize, hp.seed, threads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub agents: Vec<AgentScore>,
    pub curve: PrCurve,
}

pub fn evaluate(scores: &[ScoreRecord], labels: &HashMap<String, u8>) -> Result<Evaluation> {
    let agents = agent_level(scores)?;
    let curve = pr_curve(&agents, labels)?;
    Ok(Evaluation { agents, curve })
}

#[derive(Debug, Clone)]
pub struct ModeRun {
    pub checkpoint: Checkpoint,
    pub scores: Vec<ScoreRecord>,
    pub evaluation: Evaluation,
}

pub fn run_mode(
    prep: &Prepared,
    mode: ContextMode,
    hp: &HyperParams,
    labels: &HashMap<String, u8>,
    threads: usize,
) -> Result<ModeRun> {
    let checkpoint = train_mode(prep, mode, hp)?;
    let scores = score_with(&checkpoint, (&prep.poi).into(), &prep.test_seqs(), threads)?;
    let evaluation = evaluate(&scores, labels)?;
    log::info!("mode {mode}: AP {:.4}", evaluation.curve.average_precision);
    Ok(ModeRun { checkpoint, scores, evaluation })
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub runs: BTreeMap<ContextMode, ModeRun>,
    pub failures: BTreeMap<ContextMode, String>,
    pub report: AblationReport,
}

/// Trains and evaluates `modes` with one shared seed. A failing mode is
/// recorded and the remaining modes still run.
pub fn run_ablation(
    prep: &Prepared,
    modes: &[ContextMode],
    hp: &HyperParams,
    labels: &HashMap<String, u8>,
    threads: usize,
) -> AblationRun {
    let mut runs = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for &mode in modes {
        match run_mode(prep, mode, hp, labels, threads) {
            Ok(run) => {
                runs.insert(mode, run);
            }
            Err(e) => {
                log::error!("mode {mode} failed: {e}");
                failures.insert(mode, e.to_string());
            }
        }
    }
    let curves: BTreeMap<ContextMode, PrCurve> =
        runs.iter().map(|(m, r)| (*m, r.evaluation.curve.clone())).collect();
    let report = ablation_report(&curves);
    AblationRun { runs, failures, report }
}
