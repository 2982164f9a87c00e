//! File formats: trajectory and dataset JSONL, POI / label / score CSV, and
//! atomic artifact writes.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cvae::ScoreRecord;
use crate::error::{Error, Result};
use crate::geo::{validate_coordinate, GpsPoint, GridSpec, GridToken};
use crate::poi::{GridPoiVector, GridVectors, Poi};
use crate::preprocess::{CorpusStats, PreprocessConfig, RawTrajectory, TokenSequence};
use crate::scoring::AgentScore;

/// Writes `bytes` to `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_err(path: &Path, record: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), record, message: message.into() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FixRecord {
    agent_id: String,
    lat: f64,
    lon: f64,
    t: i64,
}

/// One JSON line per fix, ordered by agent then time.
pub fn trajectories_to_jsonl(trajs: &[RawTrajectory]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for tr in trajs {
        for p in &tr.points {
            serde_json::to_writer(&mut out, &FixRecord { agent_id: tr.agent_id.clone(), lat: p.lat, lon: p.lon, t: p.t })?;
            out.push(b'\n');
        }
    }
    Ok(out)
}

/// Reads fix records sorted by `(agent_id, t)` into one trajectory per agent.
pub fn read_trajectories(path: &Path) -> Result<Vec<RawTrajectory>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<RawTrajectory> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let record = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fix: FixRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, record, e.to_string()))?;
        validate_coordinate(fix.lat, fix.lon).map_err(|e| parse_err(path, record, e.to_string()))?;
        if fix.t < 0 {
            return Err(parse_err(path, record, "negative timestamp"));
        }
        let point = GpsPoint { lat: fix.lat, lon: fix.lon, t: fix.t };
        match out.last_mut() {
            Some(tr) if tr.agent_id == fix.agent_id => {
                if tr.points.last().is_some_and(|p| p.t >= fix.t) {
                    return Err(parse_err(path, record, "timestamps must be strictly increasing per agent"));
                }
                tr.points.push(point);
            }
            Some(tr) if tr.agent_id > fix.agent_id => {
                return Err(parse_err(path, record, "records must be sorted by agent_id"));
            }
            _ => out.push(RawTrajectory { agent_id: fix.agent_id, points: vec![point] }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SequenceRecord {
    subtraj_id: u64,
    agent_id: String,
    tokens: Vec<u32>,
    t_start: i64,
    t_end: i64,
}

pub fn sequences_to_jsonl(seqs: &[TokenSequence]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in seqs {
        let rec = SequenceRecord {
            subtraj_id: s.subtraj_id,
            agent_id: s.agent_id.clone(),
            tokens: s.tokens.iter().map(|t| t.0).collect(),
            t_start: s.t_start,
            t_end: s.t_end,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_sequences(path: &Path) -> Result<Vec<TokenSequence>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SequenceRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        out.push(TokenSequence {
            subtraj_id: r.subtraj_id,
            agent_id: r.agent_id,
            tokens: r.tokens.into_iter().map(GridToken).collect(),
            t_start: r.t_start,
            t_end: r.t_end,
        });
    }
    Ok(out)
}

/// Companion metadata of a preprocessed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub grid: GridSpec,
    pub config: PreprocessConfig,
    pub stats: CorpusStats,
    #[serde(default)]
    pub n_pois: Option<usize>,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| parse_err(path, 1, e.to_string()))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn pois_to_csv(pois: &[Poi]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in pois {
        w.serialize(p)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_pois(path: &Path) -> Result<Vec<Poi>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.deserialize::<Poi>().enumerate() {
        let p = rec.map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        validate_coordinate(p.lat, p.lon).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        out.push(p);
    }
    Ok(out)
}

pub fn grid_vectors_to_jsonl(gv: &GridVectors) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for rec in gv.records() {
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_grid_vectors(path: &Path, dim: usize) -> Result<GridVectors> {
    let reader = BufReader::new(File::open(path)?);
    let mut recs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: GridPoiVector = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        recs.push(r);
    }
    GridVectors::from_records(dim, recs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelRecord {
    agent_id: String,
    label: u8,
}

pub fn labels_to_csv(labels: &[(String, u8)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (agent_id, label) in labels {
        w.serialize(LabelRecord { agent_id: agent_id.clone(), label: *label })?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_labels(path: &Path) -> Result<HashMap<String, u8>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = HashMap::new();
    for (i, rec) in r.deserialize::<LabelRecord>().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        if rec.label > 1 {
            return Err(parse_err(path, i + 1, format!("label must be 0 or 1, got {}", rec.label)));
        }
        out.insert(rec.agent_id, rec.label);
    }
    Ok(out)
}

pub fn scores_to_csv(scores: &[ScoreRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in scores {
        w.serialize(s)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.deserialize::<ScoreRecord>().enumerate() {
        out.push(rec.map_err(|e| parse_err(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct AgentRecord<'a> {
    agent_id: &'a str,
    score: f64,
    argmax_subtraj_id: u64,
    n_subtrajs: usize,
    label: Option<u8>,
}

/// Agent-level scores with the label column left empty for unlabeled agents.
pub fn agent_scores_to_csv(agents: &[AgentScore], labels: &HashMap<String, u8>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for a in agents {
        w.serialize(AgentRecord {
            agent_id: &a.agent_id,
            score: a.score,
            argmax_subtraj_id: a.argmax_subtraj_id,
            n_subtrajs: a.n_subtrajs,
            label: labels.get(&a.agent_id).copied(),
        })?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trajs = vec![
            RawTrajectory { agent_id: "a".into(), points: vec![GpsPoint { lat: 1.5, lon: 2.25, t: 10 }, GpsPoint { lat: 1.0, lon: 2.0, t: 20 }] },
            RawTrajectory { agent_id: "b".into(), points: vec![GpsPoint { lat: -3.0, lon: 4.0, t: 5 }] },
        ];
        let path = dir.path().join("t.jsonl");
        write_atomic(&path, &trajectories_to_jsonl(&trajs).unwrap()).unwrap();
        assert_eq!(read_trajectories(&path).unwrap(), trajs);
        let first = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        assert_eq!(first, r#"{"agent_id":"a","lat":1.5,"lon":2.25,"t":10}"#);
    }

    #[test]
    fn unsorted_records_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(&path, "{\"agent_id\":\"b\",\"lat\":0,\"lon\":0,\"t\":1}\n{\"agent_id\":\"a\",\"lat\":0,\"lon\":0,\"t\":2}\n").unwrap();
        match read_trajectories(&path) {
            Err(Error::Parse { record, .. }) => assert_eq!(record, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "{\"agent_id\":\"a\",\"lat\":0,\"lon\":0,\"t\":3}\n{\"agent_id\":\"a\",\"lat\":0,\"lon\":0,\"t\":2}\n").unwrap();
        assert!(matches!(read_trajectories(&path), Err(Error::Parse { record: 2, .. })));
        fs::write(&path, "{\"agent_id\":\"a\",\"lat\":0,\"lon\":\"x\",\"t\":3}\n").unwrap();
        assert!(matches!(read_trajectories(&path), Err(Error::Parse { record: 1, .. })));
    }

    #[test]
    fn sequence_record_shape() {
        let seq = TokenSequence { subtraj_id: 7, agent_id: "a".into(), tokens: vec![GridToken(3), GridToken(9)], t_start: 1, t_end: 2 };
        let bytes = sequences_to_jsonl(std::slice::from_ref(&seq)).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "{\"subtraj_id\":7,\"agent_id\":\"a\",\"tokens\":[3,9],\"t_start\":1,\"t_end\":2}\n");
    }

    #[test]
    fn poi_csv_header() {
        let pois = vec![Poi { poi_id: "1".into(), name: "Cafe, Main St".into(), category: "cafe".into(), lat: 34.0, lon: -118.0 }];
        let csv = String::from_utf8(pois_to_csv(&pois).unwrap()).unwrap();
        assert!(csv.starts_with("poi_id,name,category,lat,lon\n"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        fs::write(&path, csv).unwrap();
        assert_eq!(read_pois(&path).unwrap(), pois);
    }

    #[test]
    fn score_csv_header() {
        let csv = String::from_utf8(scores_to_csv(&[ScoreRecord::new(3, "a", -4.5)]).unwrap()).unwrap();
        assert_eq!(csv, "subtraj_id,agent_id,recon_loglik,score\n3,a,-4.5,5.5\n");
    }

    #[test]
    fn labels_reject_non_binary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        fs::write(&path, "agent_id,label\na,1\nb,2\n").unwrap();
        assert!(matches!(read_labels(&path), Err(Error::Parse { record: 2, .. })));
    }
}
