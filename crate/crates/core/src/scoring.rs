//! Agent-level aggregation and precision-recall evaluation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::cvae::{ContextMode, ScoreRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentScore {
    pub agent_id: String,
    pub score: f64,
    pub argmax_subtraj_id: u64,
    pub n_subtrajs: usize,
}

/// An agent's score is the maximum over its subtrajectory scores. Ties keep the
/// lowest subtrajectory id. Output is sorted by agent id.
pub fn agent_level(records: &[ScoreRecord]) -> Result<Vec<AgentScore>> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut by_agent: BTreeMap<&str, AgentScore> = BTreeMap::new();
    for r in records {
        let entry = by_agent.entry(r.agent_id.as_str()).or_insert_with(|| AgentScore {
            agent_id: r.agent_id.clone(),
            score: r.score,
            argmax_subtraj_id: r.subtraj_id,
            n_subtrajs: 0,
        });
        entry.n_subtrajs += 1;
        if r.score > entry.score || (r.score == entry.score && r.subtraj_id < entry.argmax_subtraj_id) {
            entry.score = r.score;
            entry.argmax_subtraj_id = r.subtraj_id;
        }
    }
    Ok(by_agent.into_values().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)`, one point per distinct score, highest score first.
    pub points: Vec<(f64, f64)>,
    pub average_precision: f64,
}

/// Precision-recall curve over agents ranked by descending score.
///
/// All agents sharing a score enter at the same threshold. Average precision
/// is the step sum `sum_k (R_k - R_{k-1}) * P_k`.
pub fn pr_curve(agent_scores: &[AgentScore], labels: &HashMap<String, u8>) -> Result<PrCurve> {
    let mut ranked = Vec::with_capacity(agent_scores.len());
    for a in agent_scores {
        if !a.score.is_finite() {
            return Err(Error::Config(format!("non-finite score for agent {:?}", a.agent_id)));
        }
        let label = *labels
            .get(&a.agent_id)
            .ok_or_else(|| Error::Config(format!("no label for agent {:?}", a.agent_id)))?;
        ranked.push((a.score, label == 1));
    }
    let positives = ranked.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == ranked.len() {
        return Err(Error::DegenerateLabels);
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < ranked.len() {
        let s = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == s {
            if ranked[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok(PrCurve { points, average_precision: ap })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankFlag {
    Best,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: ContextMode,
    pub average_precision: f64,
    pub flag: Option<RankFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// One row per supplied mode, in the canonical mode order, with the best and
/// second-best average precision flagged (earlier mode wins ties).
pub fn ablation_report(runs: &BTreeMap<ContextMode, PrCurve>) -> AblationReport {
    let mut rows: Vec<AblationRow> = ContextMode::ALL
        .iter()
        .filter_map(|m| runs.get(m).map(|c| AblationRow { mode: *m, average_precision: c.average_precision, flag: None }))
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].average_precision.total_cmp(&rows[a].average_precision).then(a.cmp(&b)));
    if let Some(&best) = order.first() {
        rows[best].flag = Some(RankFlag::Best);
    }
    if let Some(&second) = order.get(1) {
        rows[second].flag = Some(RankFlag::Second);
    }
    AblationReport { rows }
}

impl AblationReport {
    pub fn get(&self, mode: ContextMode) -> Option<f64> {
        self.rows.iter().find(|r| r.mode == mode).map(|r| r.average_precision)
    }

    /// `mode,average_precision,flag`, one line per mode.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,average_precision,flag\n");
        for r in &self.rows {
            let flag = match r.flag {
                Some(RankFlag::Best) => "best",
                Some(RankFlag::Second) => "second",
                None => "",
            };
            out.push_str(&format!("{},{:.6},{}\n", r.mode, r.average_precision, flag));
        }
        out
    }

    /// Wide layout: a header of modes, a row of AP values, a row of flags.
    pub fn to_table_csv(&self) -> String {
        let modes: Vec<&str> = self.rows.iter().map(|r| r.mode.as_str()).collect();
        let aps: Vec<String> = self.rows.iter().map(|r| format!("{:.4}", r.average_precision)).collect();
        let flags: Vec<&str> = self
            .rows
            .iter()
            .map(|r| match r.flag {
                Some(RankFlag::Best) => "best",
                Some(RankFlag::Second) => "second",
                None => "",
            })
            .collect();
        format!("{}\n{}\n{}\n", modes.join(","), aps.join(","), flags.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, agent: &str, score: f64) -> ScoreRecord {
        ScoreRecord { subtraj_id: id, agent_id: agent.into(), recon_loglik: 1.0 - score, score }
    }

    fn agent(id: &str, score: f64) -> AgentScore {
        AgentScore { agent_id: id.into(), score, argmax_subtraj_id: 0, n_subtrajs: 1 }
    }

    fn labels(pairs: &[(&str, u8)]) -> HashMap<String, u8> {
        pairs.iter().map(|(a, l)| (a.to_string(), *l)).collect()
    }

    #[test]
    fn max_rule() {
        let out = agent_level(&[rec(4, "a", 0.1), rec(5, "a", 0.9), rec(6, "a", 0.3)]).unwrap();
        assert_eq!(out, vec![AgentScore { agent_id: "a".into(), score: 0.9, argmax_subtraj_id: 5, n_subtrajs: 3 }]);
    }

    #[test]
    fn single_record() {
        let out = agent_level(&[rec(1, "b", 2.5)]).unwrap();
        assert_eq!(out[0].score, 2.5);
        assert_eq!(out[0].argmax_subtraj_id, 1);
    }

    #[test]
    fn no_records() {
        assert!(matches!(agent_level(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn perfect_separation() {
        let scores = [agent("p1", 9.0), agent("p2", 8.0), agent("n1", 1.0), agent("n2", 0.5)];
        let c = pr_curve(&scores, &labels(&[("p1", 1), ("p2", 1), ("n1", 0), ("n2", 0)])).unwrap();
        assert_eq!(c.average_precision, 1.0);
    }

    #[test]
    fn constant_scores_give_positive_rate() {
        let scores: Vec<_> = (0..8).map(|i| agent(&i.to_string(), 3.0)).collect();
        let l: HashMap<String, u8> = (0..8).map(|i| (i.to_string(), u8::from(i < 3))).collect();
        let c = pr_curve(&scores, &l).unwrap();
        assert_eq!(c.points, vec![(1.0, 3.0 / 8.0)]);
        assert_eq!(c.average_precision, 3.0 / 8.0);
    }

    #[test]
    fn five_agent_hand_case() {
        // ranking: a(+) 0.9, b(-) 0.8, c(+) 0.8, d(-) 0.3, e(+) 0.1
        // thresholds: 0.9 -> R 1/3 P 1; 0.8 -> R 2/3 P 2/3; 0.3 -> R 2/3 P 2/4; 0.1 -> R 1 P 3/5
        let scores = [agent("a", 0.9), agent("b", 0.8), agent("c", 0.8), agent("d", 0.3), agent("e", 0.1)];
        let c = pr_curve(&scores, &labels(&[("a", 1), ("b", 0), ("c", 1), ("d", 0), ("e", 1)])).unwrap();
        let expected = 1.0 / 3.0 * 1.0 + 1.0 / 3.0 * (2.0 / 3.0) + 0.0 + 1.0 / 3.0 * (3.0 / 5.0);
        assert!((c.average_precision - expected).abs() < 1e-15);
        assert_eq!(c.points.len(), 4);
    }

    #[test]
    fn degenerate_labels() {
        let scores = [agent("a", 1.0), agent("b", 2.0)];
        assert!(matches!(pr_curve(&scores, &labels(&[("a", 1), ("b", 1)])), Err(Error::DegenerateLabels)));
        assert!(matches!(pr_curve(&scores, &labels(&[("a", 0), ("b", 0)])), Err(Error::DegenerateLabels)));
    }

    fn curve(ap: f64) -> PrCurve {
        PrCurve { points: vec![(1.0, ap)], average_precision: ap }
    }

    #[test]
    fn report_flags() {
        let reference_row = [
            (ContextMode::None, 0.0457),
            (ContextMode::PoiCategories, 0.0531),
            (ContextMode::PoiContextual, 0.0835),
            (ContextMode::AgentId, 0.1609),
            (ContextMode::Combined, 0.2212),
        ];
        let runs: BTreeMap<_, _> = reference_row.iter().map(|&(m, ap)| (m, curve(ap))).collect();
        let report = ablation_report(&runs);
        assert_eq!(report.rows.len(), 5);
        assert_eq!(report.rows[4].flag, Some(RankFlag::Best));
        assert_eq!(report.rows[3].flag, Some(RankFlag::Second));
        assert!(report.rows[..3].iter().all(|r| r.flag.is_none()));
        let csv = report.to_csv();
        assert!(csv.starts_with("mode,average_precision,flag\nnone,0.045700,\n"));
        assert!(csv.contains("combined,0.221200,best"));
    }

    #[test]
    fn report_single_mode() {
        let runs: BTreeMap<_, _> = [(ContextMode::AgentId, curve(0.4))].into_iter().collect();
        let report = ablation_report(&runs);
        assert_eq!(report.to_table_csv(), "agent_id\n0.4000\nbest\n");
    }
}
