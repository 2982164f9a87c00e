//! Spatial primitives: GPS fixes, stay points, great-circle distance and the
//! study-area grid that turns locations into integer tokens.
//!
//! Gridding uses a local equirectangular projection about the grid origin
//! (the south-west corner). Cells are `cell_size_m` squares, numbered row-major
//! from the south-west, so `token = row * n_cols + col`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used for every distance and projection in the crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

const DEG: f64 = std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub lat: f64,
    pub lon: f64,
    /// Seconds since the epoch.
    pub t: i64,
}

impl GpsPoint {
    pub fn new(lat: f64, lon: f64, t: i64) -> Result<Self> {
        validate_coordinate(lat, lon)?;
        if t < 0 {
            return Err(Error::InvalidCoordinate(format!("negative timestamp {t}")));
        }
        Ok(Self { lat, lon, t })
    }
}

/// A dwell event: the centroid of consecutive fixes that stayed within a radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StayPoint {
    pub lat: f64,
    pub lon: f64,
    pub t_arrive: i64,
    pub t_depart: i64,
}

impl StayPoint {
    pub fn dwell_s(&self) -> i64 {
        self.t_depart - self.t_arrive
    }
}

pub fn validate_coordinate(lat: f64, lon: f64) -> Result<()> {
    if !(lat.is_finite() && (-90.0..=90.0).contains(&lat)) {
        return Err(Error::InvalidCoordinate(format!("latitude {lat} out of range")));
    }
    if !(lon.is_finite() && (-180.0..=180.0).contains(&lon)) {
        return Err(Error::InvalidCoordinate(format!("longitude {lon} out of range")));
    }
    Ok(())
}

/// Great-circle distance in meters between two coordinates (degrees).
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let dlat = (lat2 - lat1) * DEG;
    let dlon = (lon2 - lon1) * DEG;
    let a = (dlat / 2.0).sin().powi(2)
        + (lat1 * DEG).cos() * (lat2 * DEG).cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

pub fn haversine_points(a: &GpsPoint, b: &GpsPoint) -> f64 {
    haversine_m(a.lat, a.lon, b.lat, b.lon)
}

/// Grid token id, `row * n_cols + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridToken(pub u32);

impl GridToken {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub cell_size_m: f64,
    pub n_rows: u32,
    pub n_cols: u32,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        validate_coordinate(self.origin_lat, self.origin_lon)?;
        if !(self.cell_size_m.is_finite() && self.cell_size_m > 0.0) {
            return Err(Error::Config(format!("cell_size_m must be > 0, got {}", self.cell_size_m)));
        }
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::Config("grid must have at least one row and one column".into()));
        }
        Ok(())
    }

    /// Number of grid tokens (`V`).
    pub fn vocab_size(&self) -> usize {
        self.n_rows as usize * self.n_cols as usize
    }

    /// Local planar coordinates (east, north) in meters relative to the origin.
    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        let x = (lon - self.origin_lon) * (self.origin_lat * DEG).cos() * EARTH_RADIUS_M * DEG;
        let y = (lat - self.origin_lat) * EARTH_RADIUS_M * DEG;
        (x, y)
    }

    /// Inverse of [`GridSpec::project`].
    pub fn unproject(&self, x: f64, y: f64) -> (f64, f64) {
        let lat = self.origin_lat + y / (EARTH_RADIUS_M * DEG);
        let lon = self.origin_lon + x / ((self.origin_lat * DEG).cos() * EARTH_RADIUS_M * DEG);
        (lat, lon)
    }

    pub fn cell_of(&self, lat: f64, lon: f64) -> Result<(u32, u32)> {
        let (x, y) = self.project(lat, lon);
        let col = (x / self.cell_size_m).floor();
        let row = (y / self.cell_size_m).floor();
        if col < 0.0 || row < 0.0 || col >= self.n_cols as f64 || row >= self.n_rows as f64 || !col.is_finite() || !row.is_finite() {
            return Err(Error::OutOfBounds { lat, lon, col: col as i64, row: row as i64 });
        }
        Ok((row as u32, col as u32))
    }

    pub fn token_of(&self, lat: f64, lon: f64) -> Result<GridToken> {
        let (row, col) = self.cell_of(lat, lon)?;
        Ok(GridToken(row * self.n_cols + col))
    }

    /// Row and column of a token.
    pub fn row_col(&self, token: GridToken) -> (u32, u32) {
        (token.0 / self.n_cols, token.0 % self.n_cols)
    }

    /// Center of a token's cell as (lat, lon).
    pub fn cell_center(&self, token: GridToken) -> (f64, f64) {
        let (row, col) = self.row_col(token);
        self.unproject(
            (col as f64 + 0.5) * self.cell_size_m,
            (row as f64 + 0.5) * self.cell_size_m,
        )
    }

    /// Grid anchored at the south-west corner of a set of coordinates, just large enough to cover them.
    pub fn covering<I>(coords: I, cell_size_m: f64) -> Result<Self>
    where
        I: IntoIterator<Item = (f64, f64)>,
    {
        let mut min_lat = f64::INFINITY;
        let mut min_lon = f64::INFINITY;
        let mut max_lat = f64::NEG_INFINITY;
        let mut max_lon = f64::NEG_INFINITY;
        for (lat, lon) in coords {
            min_lat = min_lat.min(lat);
            min_lon = min_lon.min(lon);
            max_lat = max_lat.max(lat);
            max_lon = max_lon.max(lon);
        }
        if !min_lat.is_finite() {
            return Err(Error::Config("cannot build a grid from no coordinates".into()));
        }
        let mut grid = GridSpec { origin_lat: min_lat, origin_lon: min_lon, cell_size_m, n_rows: 1, n_cols: 1 };
        let (x, y) = grid.project(max_lat, max_lon);
        grid.n_cols = (x / cell_size_m).floor() as u32 + 1;
        grid.n_rows = (y / cell_size_m).floor() as u32 + 1;
        grid.validate()?;
        Ok(grid)
    }
}

/// Maps a stay point to the grid cell containing its centroid.
pub fn to_token(stay: &StayPoint, grid: &GridSpec) -> Result<GridToken> {
    grid.token_of(stay.lat, stay.lon)
}
