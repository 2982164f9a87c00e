//! Synthetic city generator: zoned POIs, agents with personal weekly
//! routines, rendered GPS traces and labeled injected anomalies.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::cvae::mix_seed;
use crate::error::{Error, Result};
use crate::geo::{haversine_m, GpsPoint, GridSpec, GridToken};
use crate::poi::Poi;
use crate::preprocess::RawTrajectory;

/// 2024-01-01T00:00:00Z, a Monday.
pub const SIM_EPOCH: i64 = 1_704_067_200;
const DAY: i64 = 86_400;
const TRAVEL_SPEED_MPS: f64 = 8.0;
/// POIs keep this distance from cell edges so stay centroids never change cell.
const CELL_MARGIN_M: f64 = 60.0;

pub const DEFAULT_CATEGORIES: [&str; 10] = [
    "airport_terminal",
    "cafe",
    "hotel",
    "office",
    "park",
    "residence",
    "restaurant",
    "retail",
    "school",
    "university",
];

const LEISURE_CATEGORIES: [&str; 4] = ["cafe", "park", "restaurant", "retail"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindWeights {
    pub agent_atypical: f64,
    pub spatial_atypical: f64,
}

impl Default for KindWeights {
    fn default() -> Self {
        Self { agent_atypical: 0.6, spatial_atypical: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub n_agents: usize,
    pub n_days: usize,
    pub grid: GridSpec,
    pub n_pois: usize,
    pub categories: Vec<String>,
    pub anomaly_rate: f64,
    pub anomaly_kinds: KindWeights,
    pub fix_interval_s: i64,
    pub gps_noise_m: f64,
    /// Daily chance that a normal agent also visits an unfamiliar venue of a
    /// familiar kind.
    pub explore_prob: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_agents: 200,
            n_days: 30,
            grid: GridSpec { origin_lat: 34.0, origin_lon: -118.5, cell_size_m: 500.0, n_rows: 24, n_cols: 24 },
            n_pois: 1500,
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            anomaly_rate: 0.05,
            anomaly_kinds: KindWeights::default(),
            fix_interval_s: 300,
            gps_noise_m: 10.0,
            explore_prob: 0.02,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_agents == 0 || self.n_days == 0 {
            return Err(Error::Config("n_agents and n_days must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.anomaly_rate) {
            return Err(Error::Config(format!("anomaly_rate must lie in [0, 1), got {}", self.anomaly_rate)));
        }
        if self.anomaly_rate > 0.0 {
            if self.anomaly_rate * (self.n_agents as f64) < 1.0 {
                return Err(Error::Config(format!(
                    "anomaly_rate {} gives no anomalous agent among {}",
                    self.anomaly_rate, self.n_agents
                )));
            }
            if self.n_days < 4 {
                return Err(Error::Config("anomaly injection needs at least 4 days".into()));
            }
            let w = self.anomaly_kinds;
            if !(w.agent_atypical >= 0.0 && w.spatial_atypical >= 0.0 && w.agent_atypical + w.spatial_atypical > 0.0) {
                return Err(Error::Config("anomaly kind weights must be non-negative and not both zero".into()));
            }
        }
        if self.fix_interval_s <= 0 {
            return Err(Error::Config("fix_interval_s must be positive".into()));
        }
        if !(self.gps_noise_m >= 0.0 && self.gps_noise_m.is_finite()) {
            return Err(Error::Config("gps_noise_m must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.explore_prob) {
            return Err(Error::Config("explore_prob must lie in [0, 1]".into()));
        }
        if self.categories.is_empty() {
            return Err(Error::Config("category set is empty".into()));
        }
        Ok(())
    }

    /// First day index eligible for injection. Every sequence touching it
    /// starts after the temporal midpoint.
    pub fn first_test_day(&self) -> usize {
        self.n_days / 2 + 1
    }

    fn stream(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.seed, salt))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    Residential,
    Commercial,
    Campus,
    Airport,
    Parkland,
}

impl Zone {
    fn density(self) -> f64 {
        match self {
            Zone::Residential => 1.0,
            Zone::Commercial => 2.0,
            Zone::Campus => 1.2,
            Zone::Airport => 1.0,
            Zone::Parkland => 0.3,
        }
    }

    fn mix(self) -> &'static [(&'static str, f64)] {
        match self {
            Zone::Residential => &[("residence", 0.72), ("cafe", 0.07), ("retail", 0.07), ("school", 0.08), ("park", 0.06)],
            Zone::Commercial => &[("office", 0.35), ("restaurant", 0.25), ("cafe", 0.15), ("retail", 0.2), ("hotel", 0.05)],
            Zone::Campus => &[("university", 0.55), ("cafe", 0.15), ("restaurant", 0.1), ("residence", 0.1), ("school", 0.1)],
            Zone::Airport => &[("airport_terminal", 0.6), ("hotel", 0.25), ("restaurant", 0.1), ("retail", 0.05)],
            Zone::Parkland => &[("park", 0.7), ("cafe", 0.1), ("hotel", 0.1), ("restaurant", 0.1)],
        }
    }
}

/// Zone archetype of every grid cell, indexed by token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneMap {
    pub zones: Vec<Zone>,
}

impl ZoneMap {
    pub fn zone_of(&self, token: GridToken) -> Zone {
        self.zones[token.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct City {
    pub pois: Vec<Poi>,
    pub zones: ZoneMap,
}

/// Voronoi layout over a handful of zone sites.
fn gen_zones(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> ZoneMap {
    let (rows, cols) = (cfg.grid.n_rows as f64, cfg.grid.n_cols as f64);
    let sites: Vec<(Zone, f64, f64)> = [
        (Zone::Residential, 6),
        (Zone::Commercial, 3),
        (Zone::Campus, 2),
        (Zone::Airport, 1),
        (Zone::Parkland, 2),
    ]
    .into_iter()
    .flat_map(|(z, n)| std::iter::repeat_n(z, n))
    .map(|z| (z, rng.random::<f64>() * rows, rng.random::<f64>() * cols))
    .collect();
    let zones = (0..cfg.grid.n_rows)
        .flat_map(|r| (0..cfg.grid.n_cols).map(move |c| (r as f64 + 0.5, c as f64 + 0.5)))
        .map(|(r, c)| {
            let near = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.1 - r).powi(2) + (a.2 - c).powi(2);
                    let db = (b.1 - r).powi(2) + (b.2 - c).powi(2);
                    da.total_cmp(&db)
                })
                .expect("sites are non-empty");
            near.0
        })
        .collect();
    ZoneMap { zones }
}

/// Splits `n` items over `weights` by largest remainder; ties go to the
/// earlier entry.
fn apportion(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Places POIs in zone-correlated categories. Deterministic under `cfg.seed`.
pub fn gen_city(cfg: &SimConfig) -> Result<City> {
    cfg.validate()?;
    let mut rng = cfg.stream(0xC17);
    let zones = gen_zones(cfg, &mut rng);
    let known: BTreeSet<&str> = cfg.categories.iter().map(String::as_str).collect();

    let cell_w = WeightedIndex::new(zones.zones.iter().map(|z| z.density())).expect("positive densities");
    let mixes: BTreeMap<Zone, (Vec<&str>, Option<WeightedIndex<f64>>)> = zones
        .zones
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|z| {
            let (names, ws): (Vec<&str>, Vec<f64>) = z.mix().iter().filter(|(n, _)| known.contains(n)).copied().unzip();
            (z, (names, WeightedIndex::new(ws).ok()))
        })
        .collect();

    // Each cell gets the whole-POI part of its expected share, split over the
    // zone mix by largest remainder, so cells of one zone look alike. The
    // leftover POIs land on random cells with random categories.
    let total_w: f64 = zones.zones.iter().map(|z| z.density()).sum();
    let mut cell_cats: Vec<Vec<String>> = zones
        .zones
        .iter()
        .map(|z| {
            let n = (cfg.n_pois as f64 * z.density() / total_w).floor() as usize;
            match &mixes[z] {
                (names, Some(_)) => {
                    let ws: Vec<f64> = z.mix().iter().filter(|(c, _)| known.contains(c)).map(|(_, w)| *w).collect();
                    apportion(&ws, n).into_iter().zip(names).flat_map(|(k, c)| std::iter::repeat_n(c.to_string(), k)).collect()
                }
                _ => (0..n).map(|i| cfg.categories[i % cfg.categories.len()].clone()).collect(),
            }
        })
        .collect();
    let placed: usize = cell_cats.iter().map(Vec::len).sum();
    for _ in placed..cfg.n_pois {
        let cell = cell_w.sample(&mut rng);
        let category = match &mixes[&zones.zones[cell]] {
            (names, Some(w)) => names[w.sample(&mut rng)].to_string(),
            _ => cfg.categories.choose(&mut rng).expect("validated non-empty").clone(),
        };
        cell_cats[cell].push(category);
    }

    let g = &cfg.grid;
    let inner = g.cell_size_m - 2.0 * CELL_MARGIN_M;
    let mut pois = Vec::with_capacity(cfg.n_pois);
    for (cell, cats) in cell_cats.into_iter().enumerate() {
        let (row, col) = (cell / g.n_cols as usize, cell % g.n_cols as usize);
        for category in cats {
            let i = pois.len();
            let x = col as f64 * g.cell_size_m + CELL_MARGIN_M + rng.random::<f64>() * inner;
            let y = row as f64 * g.cell_size_m + CELL_MARGIN_M + rng.random::<f64>() * inner;
            let (lat, lon) = g.unproject(x, y);
            pois.push(Poi { poi_id: format!("p{i:05}"), name: format!("{category} {i}"), category, lat, lon });
        }
    }
    Ok(City { pois, zones })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Place {
    pub lat: f64,
    pub lon: f64,
    pub poi_id: Option<String>,
}

impl Place {
    fn of(p: &Poi) -> Self {
        Self { lat: p.lat, lon: p.lon, poi_id: Some(p.poi_id.clone()) }
    }

    fn dist(&self, other: &Place) -> f64 {
        haversine_m(self.lat, self.lon, other.lat, other.lon)
    }
}

fn travel_s(a: &Place, b: &Place) -> i64 {
    ((a.dist(b) / TRAVEL_SPEED_MPS).ceil() as i64).max(300)
}

/// An out-of-home stop; times are absolute seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub place: Place,
    pub arrive: i64,
    pub depart: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayPlan {
    pub day: usize,
    pub stops: Vec<Stop>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Routine {
    pub agent_id: String,
    pub home: Place,
    pub work: Place,
    pub leisure: Vec<Place>,
    pub days: Vec<DayPlan>,
}

impl Routine {
    /// Home departure time on `day`, or `None` for a day spent at home.
    pub fn leave_home(&self, day: usize) -> Option<i64> {
        let s = self.days[day].stops.first()?;
        Some(s.arrive - travel_s(&self.home, &s.place))
    }

    pub fn return_home(&self, day: usize) -> Option<i64> {
        let s = self.days[day].stops.last()?;
        Some(s.depart + travel_s(&s.place, &self.home))
    }
}

fn is_weekday(day: usize) -> bool {
    day % 7 < 5
}

fn agent_ids(n: usize) -> Vec<String> {
    let width = (n.max(2) - 1).to_string().len().max(3);
    (0..n).map(|i| format!("a{i:0width$}")).collect()
}

/// Venue pools drawn from the city.
struct Pools<'a> {
    city: &'a City,
    grid: &'a GridSpec,
    by_cat: BTreeMap<&'a str, Vec<usize>>,
}

impl<'a> Pools<'a> {
    fn new(city: &'a City, grid: &'a GridSpec) -> Self {
        let mut by_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, p) in city.pois.iter().enumerate() {
            by_cat.entry(p.category.as_str()).or_default().push(i);
        }
        Self { city, grid, by_cat }
    }

    fn zone_of(&self, p: &Poi) -> Option<Zone> {
        self.grid.token_of(p.lat, p.lon).ok().map(|t| self.city.zones.zone_of(t))
    }

    fn of_cats(&self, cats: &[&str], zone: Option<Zone>) -> Vec<usize> {
        cats.iter()
            .flat_map(|c| self.by_cat.get(c).into_iter().flatten().copied())
            .filter(|&i| zone.is_none() || self.zone_of(&self.city.pois[i]) == zone)
            .collect()
    }

    fn random_place(&self, rng: &mut ChaCha8Rng) -> Place {
        if let Some(p) = self.city.pois.choose(rng) {
            return Place::of(p);
        }
        let g = self.grid;
        let inner = g.cell_size_m - 2.0 * CELL_MARGIN_M;
        let col = rng.random_range(0..g.n_cols) as f64;
        let row = rng.random_range(0..g.n_rows) as f64;
        let x = col * g.cell_size_m + CELL_MARGIN_M + rng.random::<f64>() * inner;
        let y = row * g.cell_size_m + CELL_MARGIN_M + rng.random::<f64>() * inner;
        let (lat, lon) = g.unproject(x, y);
        Place { lat, lon, poi_id: None }
    }

    fn pick(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Place {
        match idx.choose(rng) {
            Some(&i) => Place::of(&self.city.pois[i]),
            None => self.random_place(rng),
        }
    }
}

struct Habits {
    leave_s: f64,
    work_s: f64,
    leisure_prob: f64,
}

fn jitter(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    Normal::new(0.0, sd).expect("positive sd").sample(rng)
}

fn plan_day(
    day: usize,
    r: &Routine,
    h: &Habits,
    explore: &[usize],
    pools: &Pools,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> DayPlan {
    let base = SIM_EPOCH + day as i64 * DAY;
    let mut stops: Vec<Stop> = Vec::new();
    let mut targets: Vec<(Place, i64)> = Vec::new();
    let start;
    if is_weekday(day) {
        start = base + (h.leave_s + jitter(rng, 900.0)).round() as i64;
        targets.push((r.work.clone(), (h.work_s + jitter(rng, 1200.0)).round().max(6.0 * 3600.0) as i64));
        if rng.random::<f64>() < h.leisure_prob {
            targets.push((r.leisure[0].clone(), rng.random_range(2700..7200)));
        }
    } else {
        // Saturday: the second venue. Sunday: the remaining ones in order.
        start = base + rng.random_range(9 * 3600 + 1800..11 * 3600 + 1800);
        let n = r.leisure.len();
        let outing = if day % 7 == 5 || n == 2 { &r.leisure[1..2] } else { &r.leisure[2..] };
        for l in outing {
            targets.push((l.clone(), rng.random_range(3600..7200)));
        }
    }
    if rng.random::<f64>() < cfg.explore_prob && !targets.is_empty() {
        targets.push((pools.pick(explore, rng), rng.random_range(2700..5400)));
    }

    let mut here = r.home.clone();
    let mut t = start;
    for (place, dwell) in targets {
        let arrive = t + travel_s(&here, &place);
        let depart = arrive + dwell;
        here = place.clone();
        t = depart;
        stops.push(Stop { place, arrive, depart });
    }
    DayPlan { day, stops }
}

/// Draws anchors and a full day-by-day plan for every agent.
pub fn gen_agents(cfg: &SimConfig, city: &City) -> Result<Vec<Routine>> {
    cfg.validate()?;
    let pools = Pools::new(city, &cfg.grid);
    let ids = agent_ids(cfg.n_agents);

    // Agents share a limited set of home cells, so that neighbors exist.
    let mut rng = cfg.stream(0xA6E);
    let residences = pools.of_cats(&["residence"], Some(Zone::Residential));
    let mut home_cells: BTreeMap<GridToken, Vec<usize>> = BTreeMap::new();
    for &i in &residences {
        let p = &city.pois[i];
        home_cells.entry(cfg.grid.token_of(p.lat, p.lon)?).or_default().push(i);
    }
    let mut cells: Vec<Vec<usize>> = home_cells.into_values().collect();
    cells.shuffle(&mut rng);
    cells.truncate((cfg.n_agents / 3).max(1));

    let work_kinds = [
        (Zone::Commercial, "office", 0.6),
        (Zone::Campus, "university", 0.25),
        (Zone::Airport, "airport_terminal", 0.15),
    ];
    let work_pools: Vec<Vec<usize>> = work_kinds.iter().map(|(z, c, _)| pools.of_cats(&[c], Some(*z))).collect();
    let work_w = WeightedIndex::new(work_kinds.iter().map(|k| k.2)).expect("positive weights");
    // Parkland stays off every routine; only anomalies go there.
    let mut leisure_all = pools.of_cats(&LEISURE_CATEGORIES, None);
    leisure_all.retain(|&i| pools.zone_of(&city.pois[i]) != Some(Zone::Parkland));
    if leisure_all.is_empty() {
        leisure_all = pools.of_cats(&LEISURE_CATEGORIES, None);
    }

    let mut out = Vec::with_capacity(cfg.n_agents);
    for (a, agent_id) in ids.into_iter().enumerate() {
        let mut rng = cfg.stream(1 + a as u64);
        let home = match cells.choose(&mut rng) {
            Some(cell) => pools.pick(cell, &mut rng),
            None => pools.random_place(&mut rng),
        };
        let work = pools.pick(&work_pools[work_w.sample(&mut rng)], &mut rng);

        let n_leisure = rng.random_range(2..=4);
        let mut near: Vec<usize> = leisure_all
            .iter()
            .copied()
            .filter(|&i| {
                let p = Place::of(&city.pois[i]);
                p.dist(&home) < 3000.0 || p.dist(&work) < 3000.0
            })
            .collect();
        if near.len() < n_leisure {
            near = leisure_all.clone();
        }
        near.shuffle(&mut rng);
        let mut leisure: Vec<Place> = near.iter().take(n_leisure).map(|&i| Place::of(&city.pois[i])).collect();
        while leisure.len() < 2 {
            leisure.push(pools.random_place(&mut rng));
        }

        let habits = Habits {
            leave_s: rng.random_range(7.0 * 3600.0..9.0 * 3600.0),
            work_s: rng.random_range(8.0 * 3600.0..9.5 * 3600.0),
            leisure_prob: rng.random_range(0.4..0.8),
        };
        // Unfamiliar venues of the same kinds and zones as the habitual ones.
        let zones: BTreeSet<Option<Zone>> = leisure
            .iter()
            .map(|l| cfg.grid.token_of(l.lat, l.lon).ok().map(|t| city.zones.zone_of(t)))
            .collect();
        let explore: Vec<usize> = leisure_all
            .iter()
            .copied()
            .filter(|&i| zones.contains(&pools.zone_of(&city.pois[i])))
            .collect();

        let mut r = Routine { agent_id, home, work, leisure, days: Vec::new() };
        for day in 0..cfg.n_days {
            let plan = plan_day(day, &r, &habits, &explore, &pools, cfg, &mut rng);
            r.days.push(plan);
        }
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    AgentAtypical,
    SpatialAtypical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedWindow {
    pub agent_id: String,
    pub t_start: i64,
    pub t_end: i64,
    pub kind: AnomalyKind,
    /// Agent whose day was copied, for `agent_atypical`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub agent_labels: BTreeMap<String, u8>,
    pub injected_windows: Vec<InjectedWindow>,
}

impl GroundTruth {
    pub fn labels(&self) -> Vec<(String, u8)> {
        self.agent_labels.iter().map(|(a, l)| (a.clone(), *l)).collect()
    }

    pub fn n_positive(&self) -> usize {
        self.agent_labels.values().filter(|&&l| l == 1).count()
    }
}

fn cell_profile(city: &City, grid: &GridSpec, cats: &[String]) -> BTreeMap<GridToken, Vec<f64>> {
    let mut out: BTreeMap<GridToken, Vec<f64>> = BTreeMap::new();
    for p in &city.pois {
        let (Ok(t), Some(k)) = (grid.token_of(p.lat, p.lon), cats.iter().position(|c| *c == p.category)) else {
            continue;
        };
        out.entry(t).or_insert_with(|| vec![0.0; cats.len()])[k] += 1.0;
    }
    for v in out.values_mut() {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    }
    out
}

/// Cells whose category profile is least similar to the agent's habitual cells.
fn atypical_cells(r: &Routine, profiles: &BTreeMap<GridToken, Vec<f64>>, grid: &GridSpec, n: usize) -> Vec<GridToken> {
    let habitual: Vec<GridToken> = std::iter::once(&r.home)
        .chain(std::iter::once(&r.work))
        .chain(&r.leisure)
        .filter_map(|p| grid.token_of(p.lat, p.lon).ok())
        .collect();
    let dim = profiles.values().next().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for t in &habitual {
        if let Some(v) = profiles.get(t) {
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
        }
    }
    let mut ranked: Vec<(f64, GridToken)> = profiles
        .iter()
        .filter(|(t, _)| !habitual.contains(t))
        .map(|(t, v)| (v.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>(), *t))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(n).map(|(_, t)| t).collect()
}

/// Labels a subset of agents anomalous and rewrites one test-half day of each.
///
/// `agent_atypical` keeps the agent's home but replays the out-of-home stops of
/// one weekday of a donor living in another cell. `spatial_atypical` adds
/// visits to cells whose category mix is furthest from the agent's habits.
pub fn inject_anomalies(cfg: &SimConfig, city: &City, routines: &mut [Routine]) -> Result<GroundTruth> {
    cfg.validate()?;
    let mut truth = GroundTruth {
        agent_labels: routines.iter().map(|r| (r.agent_id.clone(), 0)).collect(),
        injected_windows: Vec::new(),
    };
    if cfg.anomaly_rate == 0.0 {
        return Ok(truth);
    }
    let mut rng = cfg.stream(0xBAD);
    let n_anom = ((cfg.anomaly_rate * routines.len() as f64).round() as usize).max(1);
    let mut order: Vec<usize> = (0..routines.len()).collect();
    order.shuffle(&mut rng);
    let chosen: BTreeSet<usize> = order.into_iter().take(n_anom).collect();

    let w = cfg.anomaly_kinds;
    let kind_w = WeightedIndex::new([w.agent_atypical, w.spatial_atypical]).expect("validated weights");
    let profiles = cell_profile(city, &cfg.grid, &cfg.categories);
    let pools = Pools::new(city, &cfg.grid);
    let cell_pois: BTreeMap<GridToken, Vec<usize>> = city.pois.iter().enumerate().fold(BTreeMap::new(), |mut m, (i, p)| {
        if let Ok(t) = cfg.grid.token_of(p.lat, p.lon) {
            m.entry(t).or_insert_with(Vec::new).push(i);
        }
        m
    });
    let cell = |p: &Place| cfg.grid.token_of(p.lat, p.lon).ok();

    let lo = cfg.first_test_day();
    let hi = cfg.n_days - 1; // exclusive: the final day is left untouched
    for a in chosen {
        let kind = if routines.len() < 2 || kind_w.sample(&mut rng) == 1 {
            AnomalyKind::SpatialAtypical
        } else {
            AnomalyKind::AgentAtypical
        };
        let weekdays: Vec<usize> = (lo..hi).filter(|&d| is_weekday(d) && !routines[a].days[d].stops.is_empty()).collect();
        let day = match weekdays.choose(&mut rng) {
            Some(&d) => d,
            None => rng.random_range(lo..hi.max(lo + 1)).min(cfg.n_days - 1),
        };
        let base = SIM_EPOCH + day as i64 * DAY;

        let (stops, donor) = match kind {
            AnomalyKind::AgentAtypical => {
                let me = &routines[a];
                let zone = |p: &Place| cell(p).map(|t| city.zones.zone_of(t));
                // Prefer someone living elsewhere who works in another kind of zone.
                let candidates = |other_home: bool, other_zone: bool| -> Vec<usize> {
                    (0..routines.len())
                        .filter(|&b| b != a && cell(&routines[b].work) != cell(&me.work))
                        .filter(|&b| !other_home || cell(&routines[b].home) != cell(&me.home))
                        .filter(|&b| !other_zone || zone(&routines[b].work) != zone(&me.work))
                        .collect()
                };
                let mut pool = candidates(true, true);
                if pool.is_empty() {
                    pool = candidates(true, false);
                }
                if pool.is_empty() {
                    pool = candidates(false, true);
                }
                if pool.is_empty() {
                    pool = (0..routines.len()).filter(|&b| b != a).collect();
                }
                let b = *pool.choose(&mut rng).expect("at least two agents");
                let donor = &routines[b];
                // Copy one of the donor's own weekdays with an evening venue if there is one.
                let habitual = |p: &Place| *p == donor.work || donor.leisure.contains(p);
                let src_days: Vec<usize> = (0..cfg.n_days)
                    .filter(|&d| is_weekday(d) && !donor.days[d].stops.is_empty())
                    .filter(|&d| donor.days[d].stops.iter().all(|s| habitual(&s.place)))
                    .collect();
                let rich: Vec<usize> = src_days.iter().copied().filter(|&d| donor.days[d].stops.len() >= 2).collect();
                let src = rich.choose(&mut rng).or(src_days.choose(&mut rng)).copied().unwrap_or(day);
                let shift = (day as i64 - src as i64) * DAY;
                let stops = donor.days[src]
                    .stops
                    .iter()
                    .map(|s| Stop { place: s.place.clone(), arrive: s.arrive + shift, depart: s.depart + shift })
                    .collect();
                (stops, Some(donor.agent_id.clone()))
            }
            AnomalyKind::SpatialAtypical => {
                let r = &routines[a];
                let far = atypical_cells(r, &profiles, &cfg.grid, 6);
                let mut picks: Vec<GridToken> = far.choose_multiple(&mut rng, 2).copied().collect();
                picks.sort();
                let mut here = r.home.clone();
                let mut t = r.leave_home(day).unwrap_or(base + 8 * 3600);
                let mut stops = Vec::new();
                let mut targets: Vec<(Place, i64)> = vec![(r.work.clone(), (7 * 3600) + rng.random_range(0..3600))];
                for c in picks {
                    let place = pools.pick(cell_pois.get(&c).map_or(&[][..], Vec::as_slice), &mut rng);
                    targets.push((place, rng.random_range(3600..7200)));
                }
                for (place, dwell) in targets {
                    let arrive = t + travel_s(&here, &place);
                    let depart = arrive + dwell;
                    here = place.clone();
                    t = depart;
                    stops.push(Stop { place, arrive, depart });
                }
                (stops, None)
            }
        };

        let r = &mut routines[a];
        r.days[day].stops = stops;
        let t_start = r.leave_home(day).unwrap_or(base);
        let t_end = r.return_home(day).unwrap_or(base + DAY);
        truth.agent_labels.insert(r.agent_id.clone(), 1);
        truth.injected_windows.push(InjectedWindow { agent_id: r.agent_id.clone(), t_start, t_end, kind, donor });
    }
    truth.injected_windows.sort_by(|x, y| x.agent_id.cmp(&y.agent_id));
    Ok(truth)
}

/// Renders routines into GPS fixes sampled every `fix_interval_s` on a shared
/// clock, with isotropic Gaussian jitter.
pub fn render_gps(routines: &[Routine], cfg: &SimConfig) -> Result<Vec<RawTrajectory>> {
    cfg.validate()?;
    let end = SIM_EPOCH + cfg.n_days as i64 * DAY;
    let noise = Normal::new(0.0, cfg.gps_noise_m.max(f64::MIN_POSITIVE)).expect("validated noise");
    let mut out = Vec::with_capacity(routines.len());
    for (a, r) in routines.iter().enumerate() {
        let mut rng = cfg.stream((1 << 32) + a as u64);
        // (t_from, t_to, from, to): a stay when from == to.
        let mut legs: Vec<(i64, i64, &Place, &Place)> = Vec::new();
        let mut here = &r.home;
        let mut t = SIM_EPOCH;
        for d in &r.days {
            for s in &d.stops {
                let leave = s.arrive - travel_s(here, &s.place);
                legs.push((t, leave, here, here));
                legs.push((leave, s.arrive, here, &s.place));
                legs.push((s.arrive, s.depart, &s.place, &s.place));
                here = &s.place;
                t = s.depart;
            }
            if !d.stops.is_empty() {
                let arrive = t + travel_s(here, &r.home);
                legs.push((t, arrive, here, &r.home));
                here = &r.home;
                t = arrive;
            }
        }
        legs.push((t, end.max(t), here, here));

        let mut points = Vec::new();
        let mut k = 0;
        let mut tf = SIM_EPOCH;
        while tf < end {
            while k + 1 < legs.len() && legs[k].1 <= tf {
                k += 1;
            }
            let (t0, t1, from, to) = legs[k];
            let f = if t1 > t0 { ((tf - t0) as f64 / (t1 - t0) as f64).clamp(0.0, 1.0) } else { 1.0 };
            let lat = from.lat + f * (to.lat - from.lat);
            let lon = from.lon + f * (to.lon - from.lon);
            let (mut x, mut y) = cfg.grid.project(lat, lon);
            if cfg.gps_noise_m > 0.0 {
                x += noise.sample(&mut rng);
                y += noise.sample(&mut rng);
            }
            let (lat, lon) = cfg.grid.unproject(x, y);
            points.push(GpsPoint { lat, lon, t: tf });
            tf += cfg.fix_interval_s;
        }
        out.push(RawTrajectory { agent_id: r.agent_id.clone(), points });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub city: City,
    pub routines: Vec<Routine>,
    pub truth: GroundTruth,
    pub trajectories: Vec<RawTrajectory>,
}

/// City, routines, anomalies and GPS traces from one config.
pub fn simulate(cfg: &SimConfig) -> Result<SimDataset> {
    let city = gen_city(cfg)?;
    let mut routines = gen_agents(cfg, &city)?;
    let truth = inject_anomalies(cfg, &city, &mut routines)?;
    let trajectories = render_gps(&routines, cfg)?;
    Ok(SimDataset { city, routines, truth, trajectories })
}
