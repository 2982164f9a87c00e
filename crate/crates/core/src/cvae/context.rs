//! Conditioning vectors `c = [agent embedding ; tanh(W_ctx * poi_context)]` and
//! the five ablation modes that decide which halves are live.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::poi::{subtraj_context, GridVectors};
use crate::preprocess::TokenSequence;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    None,
    PoiCategories,
    PoiContextual,
    AgentId,
    #[default]
    Combined,
}

impl ContextMode {
    pub const ALL: [ContextMode; 5] = [
        ContextMode::None,
        ContextMode::PoiCategories,
        ContextMode::PoiContextual,
        ContextMode::AgentId,
        ContextMode::Combined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContextMode::None => "none",
            ContextMode::PoiCategories => "poi_categories",
            ContextMode::PoiContextual => "poi_contextual",
            ContextMode::AgentId => "agent_id",
            ContextMode::Combined => "combined",
        }
    }

    pub fn uses_agent(self) -> bool {
        matches!(self, ContextMode::AgentId | ContextMode::Combined)
    }

    pub fn uses_poi(self) -> bool {
        matches!(self, ContextMode::PoiCategories | ContextMode::PoiContextual | ContextMode::Combined)
    }

    /// Whether POI context comes from contextualized clusters (vs raw categories).
    pub fn uses_clusters(self) -> bool {
        matches!(self, ContextMode::PoiContextual | ContextMode::Combined)
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match norm.as_str() {
            "none" => ContextMode::None,
            "poi_categories" => ContextMode::PoiCategories,
            "poi_contextual" => ContextMode::PoiContextual,
            "agent_id" => ContextMode::AgentId,
            "combined" | "poi_contextual+agent_id" => ContextMode::Combined,
            _ => return Err(Error::UnknownMode(s.to_string())),
        })
    }
}

/// Maps agent ids to embedding rows; row 0 is reserved for unknown agents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentTable {
    rows: BTreeMap<String, usize>,
}

impl AgentTable {
    /// Rows assigned in sorted id order starting at 1.
    pub fn from_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut sorted: Vec<&str> = ids.into_iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        let rows = sorted.into_iter().enumerate().map(|(i, id)| (id.to_string(), i + 1)).collect();
        Self { rows }
    }

    pub fn row(&self, agent_id: &str) -> usize {
        self.rows.get(agent_id).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Raw, parameter-independent conditioning inputs of one sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextInput {
    pub agent_row: Option<usize>,
    pub poi: Option<Vec<f64>>,
}

/// The conditioning vector `c`, plus the projected POI slice kept for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector {
    pub vec: Vec<f64>,
}

impl ContextInput {
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let d = params.dims;
        if let Some(row) = self.agent_row {
            if row > d.n_agents {
                return Err(Error::ShapeMismatch(format!("agent row {row} exceeds table of {} agents", d.n_agents)));
            }
        }
        if let Some(poi) = &self.poi {
            if poi.len() != d.poi_dim {
                return Err(Error::ShapeMismatch(format!("POI context of length {}, model expects {}", poi.len(), d.poi_dim)));
            }
        }
        Ok(())
    }

    pub fn vector(&self, params: &ModelParams) -> ContextVector {
        let d = params.dims;
        let mut vec = vec![0.0; d.context_dim()];
        if let Some(row) = self.agent_row {
            vec[..d.d_agent].copy_from_slice(params.agent_emb.row(row));
        }
        if let Some(poi) = &self.poi {
            let proj = params.ctx_proj.matvec(poi, None);
            for (v, p) in vec[d.d_agent..].iter_mut().zip(proj) {
                *v = p.tanh();
            }
        }
        ContextVector { vec }
    }

    /// Pushes `dc` (gradient w.r.t. `c`) into the agent table and POI projection.
    pub fn backward(&self, params: &ModelParams, c: &ContextVector, dc: &[f64], grad: &mut ModelParams) {
        let d = params.dims;
        if let Some(row) = self.agent_row {
            grad.agent_emb.row_mut(row).iter_mut().zip(&dc[..d.d_agent]).for_each(|(g, v)| *g += v);
        }
        if let Some(poi) = &self.poi {
            let da: Vec<f64> = dc[d.d_agent..]
                .iter()
                .zip(&c.vec[d.d_agent..])
                .map(|(g, t)| g * (1.0 - t * t))
                .collect();
            grad.ctx_proj.outer_acc(&da, poi);
        }
    }
}

/// Builds [`ContextInput`]s for sequences under one ablation mode.
#[derive(Debug, Clone)]
pub struct ContextBuilder {
    pub mode: ContextMode,
    pub agents: AgentTable,
    /// Per-cell count vectors: raw categories or clusters, depending on the mode.
    pub grid_vectors: Option<GridVectors>,
}

impl ContextBuilder {
    pub fn new(mode: ContextMode, agents: AgentTable, grid_vectors: Option<GridVectors>) -> Result<Self> {
        if mode.uses_poi() && grid_vectors.is_none() {
            return Err(Error::Config(format!("mode {mode} needs POI grid vectors")));
        }
        let grid_vectors = if mode.uses_poi() { grid_vectors } else { None };
        Ok(Self { mode, agents, grid_vectors })
    }

    pub fn poi_dim(&self) -> usize {
        self.grid_vectors.as_ref().map_or(0, |g| g.dim)
    }

    /// Model input for a sequence. POI counts enter the projection as
    /// `ln(1 + n)` so long trips do not saturate the `tanh`.
    pub fn input(&self, seq: &TokenSequence) -> ContextInput {
        ContextInput {
            agent_row: self.mode.uses_agent().then(|| self.agents.row(&seq.agent_id)),
            poi: self.grid_vectors.as_ref().map(|gv| squash_counts(subtraj_context(&seq.tokens, gv))),
        }
    }

    /// Conditioning vector for a sequence under this mode.
    pub fn context_vector(&self, seq: &TokenSequence, params: &ModelParams) -> ContextVector {
        self.input(seq).vector(params)
    }
}

/// Compresses raw POI counts before the context projection.
pub fn squash_counts(counts: Vec<f64>) -> Vec<f64> {
    counts.into_iter().map(f64::ln_1p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvae::params::{HyperParams, ModelDims};
    use crate::geo::GridToken;
    use rand::SeedableRng;

    fn setup() -> (ModelParams, GridVectors, AgentTable) {
        let hp = HyperParams { d_agent: 3, d_ctx: 2, d_tok: 2, d_hid: 2, d_z: 2, ..Default::default() };
        let dims = ModelDims::new(4, 2, 3, &hp);
        let params = ModelParams::init(dims, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let mut gv = GridVectors::empty(3);
        gv.cells.insert(GridToken(1), vec![1, 0, 2]);
        (params, gv, AgentTable::from_ids(["b", "a"]))
    }

    fn seq(agent: &str) -> TokenSequence {
        TokenSequence { subtraj_id: 0, agent_id: agent.into(), tokens: vec![GridToken(1), GridToken(2)], t_start: 0, t_end: 1 }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ContextMode::ALL {
            assert_eq!(m.as_str().parse::<ContextMode>().unwrap(), m);
            assert_eq!(m.as_str().replace('_', "-").parse::<ContextMode>().unwrap(), m);
        }
        assert!(matches!("gmm".parse::<ContextMode>(), Err(Error::UnknownMode(_))));
    }

    #[test]
    fn none_is_zero() {
        let (params, gv, agents) = setup();
        let b = ContextBuilder::new(ContextMode::None, agents, Some(gv)).unwrap();
        assert_eq!(b.context_vector(&seq("a"), &params).vec, vec![0.0; 5]);
    }

    #[test]
    fn unseen_agent_uses_unknown_row() {
        let (params, gv, agents) = setup();
        let b = ContextBuilder::new(ContextMode::AgentId, agents, Some(gv)).unwrap();
        let c = b.context_vector(&seq("zzz"), &params);
        assert_eq!(&c.vec[..3], params.agent_emb.row(0));
        assert_eq!(&c.vec[3..], &[0.0, 0.0]);
        assert_eq!(b.agents.row("a"), 1);
        assert_eq!(b.agents.row("b"), 2);
    }

    #[test]
    fn combined_assembles_both_slices() {
        let (params, gv, agents) = setup();
        let s = seq("b");
        let agent = ContextBuilder::new(ContextMode::AgentId, agents.clone(), Some(gv.clone())).unwrap().context_vector(&s, &params);
        let poi = ContextBuilder::new(ContextMode::PoiContextual, agents.clone(), Some(gv.clone())).unwrap().context_vector(&s, &params);
        let both = ContextBuilder::new(ContextMode::Combined, agents, Some(gv)).unwrap().context_vector(&s, &params);
        let expected: Vec<f64> = agent.vec.iter().zip(&poi.vec).map(|(a, p)| a + p).collect();
        assert_eq!(both.vec, expected);
        assert!(poi.vec[3..].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn poi_mode_requires_vectors() {
        assert!(ContextBuilder::new(ContextMode::PoiCategories, AgentTable::default(), None).is_err());
    }
}
