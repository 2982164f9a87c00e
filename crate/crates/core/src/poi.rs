//! POI context: neighborhood-aware POI embeddings, k-means clustering of those
//! embeddings into contextualized categories, and per-cell count vectors.
//!
//! A POI's embedding is the one-hot of its own category followed by the
//! distance-weighted category histogram of the POIs around it, so two cafes
//! with different surroundings get different vectors.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_m, validate_coordinate, GridSpec, GridToken};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub poi_id: String,
    pub name: String,
    pub category: String,
    pub lat: f64,
    pub lon: f64,
}

/// The finite, ordered category set `C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySet {
    names: Vec<String>,
}

impl CategorySet {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        names.sort();
        names.dedup();
        Self { names }
    }

    /// Categories observed in a POI list, sorted.
    pub fn from_pois(pois: &[Poi]) -> Self {
        Self::new(pois.iter().map(|p| p.category.clone()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, category: &str) -> Result<usize> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(category))
            .map_err(|_| Error::Config(format!("unknown POI category {category:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiEmbedding {
    pub poi_id: String,
    pub vec: Vec<f64>,
}

/// Weight of a neighbor at distance `d_m`.
pub fn neighbor_weight(d_m: f64) -> f64 {
    1.0 / (1.0 + d_m / 100.0)
}

/// Embeds one POI against the corpus it belongs to.
pub fn embed_poi(p: &Poi, corpus: &[Poi], cats: &CategorySet, radius_m: f64) -> Result<PoiEmbedding> {
    validate_coordinate(p.lat, p.lon)?;
    let c = cats.len();
    let mut vec = vec![0.0; 2 * c];
    vec[cats.index_of(&p.category)?] = 1.0;
    for q in corpus {
        if q.poi_id == p.poi_id {
            continue;
        }
        let d = haversine_m(p.lat, p.lon, q.lat, q.lon);
        if d <= radius_m {
            vec[c + cats.index_of(&q.category)?] += neighbor_weight(d);
        }
    }
    normalize_tail(&mut vec[c..]);
    Ok(PoiEmbedding { poi_id: p.poi_id.clone(), vec })
}

fn normalize_tail(h: &mut [f64]) {
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        h.iter_mut().for_each(|v| *v /= total);
    }
}

/// Embeds every POI of a corpus. Equivalent to calling [`embed_poi`] per POI,
/// but only compares POIs inside a latitude band of the search radius.
pub fn embed_all(pois: &[Poi], cats: &CategorySet, radius_m: f64) -> Result<Vec<PoiEmbedding>> {
    let c = cats.len();
    let cat_idx = pois.iter().map(|p| cats.index_of(&p.category)).collect::<Result<Vec<_>>>()?;
    for p in pois {
        validate_coordinate(p.lat, p.lon)?;
    }
    let mut by_lat: Vec<usize> = (0..pois.len()).collect();
    by_lat.sort_by(|&a, &b| pois[a].lat.total_cmp(&pois[b].lat).then(a.cmp(&b)));
    let band_deg = radius_m / (crate::geo::EARTH_RADIUS_M * std::f64::consts::PI / 180.0) * 1.000_001;

    let mut out = Vec::with_capacity(pois.len());
    for (i, p) in pois.iter().enumerate() {
        let mut vec = vec![0.0; 2 * c];
        vec[cat_idx[i]] = 1.0;
        let lo = by_lat.partition_point(|&k| pois[k].lat < p.lat - band_deg);
        let mut neighbors: Vec<usize> = by_lat[lo..]
            .iter()
            .take_while(|&&k| pois[k].lat <= p.lat + band_deg)
            .copied()
            .collect();
        // accumulate in corpus order so results match embed_poi bit for bit
        neighbors.sort_unstable();
        for k in neighbors {
            let q = &pois[k];
            if q.poi_id == p.poi_id {
                continue;
            }
            let d = haversine_m(p.lat, p.lon, q.lat, q.lon);
            if d <= radius_m {
                vec[c + cat_idx[k]] += neighbor_weight(d);
            }
        }
        normalize_tail(&mut vec[c..]);
        out.push(PoiEmbedding { poi_id: p.poi_id.clone(), vec });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

impl ClusterModel {
    /// Nearest centroid by Euclidean distance, lowest index on ties.
    pub fn assign(&self, point: &[f64]) -> usize {
        nearest(point, &self.centroids).0
    }

    /// Sum of squared distances from each point to its nearest centroid.
    pub fn inertia(&self, data: &[Vec<f64>]) -> f64 {
        inertia(data, &self.centroids)
    }
}

pub fn assign_cluster(e: &PoiEmbedding, m: &ClusterModel) -> usize {
    m.assign(&e.vec)
}

pub fn inertia(data: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    data.iter().map(|p| nearest(p, centroids).1).sum()
}

/// k-means++ seeding.
pub fn kmeans_plus_plus(data: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = data.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // guard against rounding landing on a zero-weight tail
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..data.len())
        };
        let c = data[pick].clone();
        for (i, p) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

pub const KMEANS_MAX_ITERS: usize = 100;

/// Lloyd's k-means with k-means++ seeding, run until the assignment stops
/// changing or [`KMEANS_MAX_ITERS`] iterations. An empty cluster is re-seeded
/// with the point farthest from its current centroid.
pub fn fit_kmeans(data: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    if data.len() < k || k == 0 {
        return Err(Error::TooFewPoints { n: data.len(), k });
    }
    let dim = data[0].len();
    if data.iter().any(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch("embeddings of differing dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(data, k, &mut rng);
    let mut labels: Vec<usize> = data.iter().map(|p| nearest(p, &centroids).0).collect();

    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in data.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..data.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&data[a], &centroids[labels[a]]);
                        let db = sq_dist(&data[b], &centroids[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty data");
                centroids[c] = data[far].clone();
                counts[labels[far]] -= 1;
                labels[far] = c;
                counts[c] = 1;
            }
        }
        let next: Vec<usize> = data.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(ClusterModel { k, seed, centroids })
}

pub fn fit_clusters(embs: &[PoiEmbedding], k: usize, seed: u64) -> Result<ClusterModel> {
    let data: Vec<Vec<f64>> = embs.iter().map(|e| e.vec.clone()).collect();
    fit_kmeans(&data, k, seed)
}

/// Per-cell count vectors. Cells absent from `cells` read as the zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridVectors {
    pub dim: usize,
    pub cells: BTreeMap<GridToken, Vec<u32>>,
    /// POIs that fell outside the grid and were not counted.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoiVector {
    pub token: GridToken,
    pub counts: Vec<u32>,
}

impl GridVectors {
    pub fn empty(dim: usize) -> Self {
        Self { dim, cells: BTreeMap::new(), skipped: 0 }
    }

    pub fn get(&self, token: GridToken) -> Option<&[u32]> {
        self.cells.get(&token).map(Vec::as_slice)
    }

    pub fn counts(&self, token: GridToken) -> Vec<u32> {
        self.get(token).map(<[u32]>::to_vec).unwrap_or_else(|| vec![0; self.dim])
    }

    pub fn records(&self) -> impl Iterator<Item = GridPoiVector> + '_ {
        self.cells.iter().map(|(&token, counts)| GridPoiVector { token, counts: counts.clone() })
    }

    pub fn from_records(dim: usize, records: impl IntoIterator<Item = GridPoiVector>) -> Result<Self> {
        let mut cells = BTreeMap::new();
        for r in records {
            if r.counts.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "grid vector for token {} has {} entries, expected {dim}",
                    r.token.0,
                    r.counts.len()
                )));
            }
            cells.insert(r.token, r.counts);
        }
        Ok(Self { dim, cells, skipped: 0 })
    }

    /// Dominant label per non-empty cell (lowest label on ties) and its POI total.
    pub fn dominant(&self) -> Vec<(GridToken, usize, u32)> {
        self.cells
            .iter()
            .map(|(&tok, counts)| {
                let mut best = 0;
                for (k, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = k;
                    }
                }
                (tok, best, counts.iter().sum())
            })
            .collect()
    }
}

/// Tallies POIs per cell by an arbitrary label in `[0, dim)`.
pub fn tally_by_label(pois: &[Poi], labels: &[usize], dim: usize, grid: &GridSpec) -> GridVectors {
    let mut gv = GridVectors::empty(dim);
    for (p, &label) in pois.iter().zip(labels) {
        match grid.token_of(p.lat, p.lon) {
            Ok(tok) => gv.cells.entry(tok).or_insert_with(|| vec![0; dim])[label] += 1,
            Err(_) => gv.skipped += 1,
        }
    }
    gv
}

/// Count vectors over contextualized (cluster) categories.
pub fn grid_vectors(pois: &[Poi], embs: &[PoiEmbedding], model: &ClusterModel, grid: &GridSpec) -> Result<GridVectors> {
    if pois.len() != embs.len() {
        return Err(Error::ShapeMismatch(format!("{} POIs but {} embeddings", pois.len(), embs.len())));
    }
    let labels: Vec<usize> = embs.iter().map(|e| model.assign(&e.vec)).collect();
    Ok(tally_by_label(pois, &labels, model.k, grid))
}

/// Count vectors over the raw categories.
pub fn baseline_category_vectors(pois: &[Poi], cats: &CategorySet, grid: &GridSpec) -> Result<GridVectors> {
    let labels = pois.iter().map(|p| cats.index_of(&p.category)).collect::<Result<Vec<_>>>()?;
    Ok(tally_by_label(pois, &labels, cats.len(), grid))
}

/// Sum of cell count vectors along a token sequence, one term per occurrence.
pub fn subtraj_context(tokens: &[GridToken], gv: &GridVectors) -> Vec<f64> {
    let mut out = vec![0.0; gv.dim];
    for &t in tokens {
        if let Some(counts) = gv.get(t) {
            out.iter_mut().zip(counts).for_each(|(o, &c)| *o += c as f64);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoiContextConfig {
    pub radius_m: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for PoiContextConfig {
    fn default() -> Self {
        Self { radius_m: 500.0, k: 16, seed: 42 }
    }
}

/// Everything the model needs from the POI corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PoiContext {
    pub categories: CategorySet,
    pub embeddings: Vec<PoiEmbedding>,
    pub clusters: ClusterModel,
    pub contextual: GridVectors,
    pub baseline: GridVectors,
}

pub fn build_poi_context(pois: &[Poi], grid: &GridSpec, cfg: &PoiContextConfig) -> Result<PoiContext> {
    if cfg.k < 2 {
        return Err(Error::Config("cluster count must be at least 2".into()));
    }
    if cfg.radius_m.is_nan() || cfg.radius_m <= 0.0 {
        return Err(Error::Config("POI radius must be positive".into()));
    }
    let categories = CategorySet::from_pois(pois);
    let embeddings = embed_all(pois, &categories, cfg.radius_m)?;
    let clusters = fit_clusters(&embeddings, cfg.k, cfg.seed)?;
    let contextual = grid_vectors(pois, &embeddings, &clusters, grid)?;
    let baseline = baseline_category_vectors(pois, &categories, grid)?;
    Ok(PoiContext { categories, embeddings, clusters, contextual, baseline })
}
