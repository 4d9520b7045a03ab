//! Great-circle distances from a reference centroid and distance-ordered series.

use serde::{Deserialize, Serialize};

use crate::data::DesignTable;
use crate::error::{Error, Result};

/// Mean Earth radius (IUGG).
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Jitter added per duplicate within a tie group.
pub const TIE_EPSILON_KM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub const fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }

    /// Geographic centre of Florida.
    pub const FLORIDA_CENTER: LatLon = LatLon::new(28.6305, -82.4497);

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeoConfig {
    pub centroid_lat: f64,
    pub centroid_lon: f64,
    pub tie_epsilon_km: f64,
}

impl Default for GeoConfig {
    fn default() -> Self {
        GeoConfig {
            centroid_lat: LatLon::FLORIDA_CENTER.lat,
            centroid_lon: LatLon::FLORIDA_CENTER.lon,
            tie_epsilon_km: TIE_EPSILON_KM,
        }
    }
}

impl GeoConfig {
    pub fn centroid(&self) -> LatLon {
        LatLon::new(self.centroid_lat, self.centroid_lon)
    }
}

pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Breaks ties in a nondecreasing sequence: the j-th member (0-based) of each
/// run of equal values is shifted up by `j * epsilon`.
pub fn strictify(distances: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::Contract(format!(
            "tie epsilon must be > 0, got {epsilon}"
        )));
    }
    if let Some(i) = distances.windows(2).position(|w| !(w[0] <= w[1])) {
        return Err(Error::Contract(format!(
            "distances must be sorted nondecreasing (violated at position {})",
            i + 1
        )));
    }
    let mut out = Vec::with_capacity(distances.len());
    let mut run = 0usize;
    for (i, &d) in distances.iter().enumerate() {
        run = if i > 0 && d == distances[i - 1] {
            run + 1
        } else {
            0
        };
        out.push(d + run as f64 * epsilon);
    }
    if let Some(i) = out.windows(2).position(|w| w[0] >= w[1]) {
        return Err(Error::Contract(format!(
            "tie jitter at position {} collides with the next distance; use a smaller epsilon",
            i + 1
        )));
    }
    Ok(out)
}

/// One variable laid out along strictly increasing distance from a centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedSeries {
    pub site_ids: Vec<String>,
    /// Strictly increasing, km.
    pub distances: Vec<f64>,
    /// `gaps[0] = distances[0]`, `gaps[i] = distances[i] - distances[i-1]`.
    pub gaps: Vec<f64>,
    pub values: Vec<Option<f64>>,
    pub n_observed: usize,
    /// Position of each ordered site in the caller's original input.
    pub source_index: Vec<usize>,
}

impl OrderedSeries {
    /// Builds a series from distances that are already strictly increasing and positive.
    pub fn from_distances(distances: Vec<f64>, values: Vec<Option<f64>>) -> Result<Self> {
        let ids = (0..distances.len()).map(|i| i.to_string()).collect();
        let source_index = (0..distances.len()).collect();
        Self::assemble(ids, distances, values, source_index)
    }

    fn assemble(
        site_ids: Vec<String>,
        distances: Vec<f64>,
        values: Vec<Option<f64>>,
        source_index: Vec<usize>,
    ) -> Result<Self> {
        if distances.len() != values.len() || distances.len() != site_ids.len() {
            return Err(Error::Contract("series component lengths differ".into()));
        }
        if distances.first().is_some_and(|&d| !(d > 0.0)) {
            return Err(Error::Contract(
                "distances must be strictly positive".into(),
            ));
        }
        if distances.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Contract(
                "distances must be strictly increasing".into(),
            ));
        }
        let gaps = distances
            .iter()
            .scan(0.0, |prev, &d| {
                let g = d - *prev;
                *prev = d;
                Some(g)
            })
            .collect();
        let n_observed = values.iter().filter(|v| v.is_some()).count();
        Ok(OrderedSeries {
            site_ids,
            distances,
            gaps,
            values,
            n_observed,
            source_index,
        })
    }

    /// Sorts sites by (strictified) great-circle distance from `cfg`'s centroid.
    /// Equal distances keep their input order.
    pub fn from_sites(
        site_ids: &[String],
        coords: &[LatLon],
        values: &[Option<f64>],
        cfg: &GeoConfig,
    ) -> Result<Self> {
        let centroid = cfg.centroid();
        if !centroid.is_valid() {
            return Err(Error::Contract(format!("invalid centroid {centroid:?}")));
        }
        if site_ids.len() != coords.len() || coords.len() != values.len() {
            return Err(Error::Contract(
                "site ids, coordinates and values differ in length".into(),
            ));
        }
        let raw: Vec<f64> = coords
            .iter()
            .map(|&c| haversine_km(centroid, c).max(cfg.tie_epsilon_km))
            .collect();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
        let sorted: Vec<f64> = order.iter().map(|&i| raw[i]).collect();
        let distances = strictify(&sorted, cfg.tie_epsilon_km)?;
        Self::assemble(
            order.iter().map(|&i| site_ids[i].clone()).collect(),
            distances,
            order.iter().map(|&i| values[i]).collect(),
            order,
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observed_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.values[i].is_some())
            .collect()
    }

    /// Copy with the given positions set missing.
    pub fn with_masked(&self, positions: &[usize]) -> Self {
        let mut out = self.clone();
        for &i in positions {
            out.values[i] = None;
        }
        out.n_observed = out.values.iter().filter(|v| v.is_some()).count();
        out
    }

    /// Scatters ordered values back to the caller's original site order.
    pub fn to_source_order<T: Clone>(&self, ordered: &[T]) -> Vec<T> {
        let mut slots: Vec<Option<T>> = vec![None; ordered.len()];
        for (pos, &src) in self.source_index.iter().enumerate() {
            slots[src] = Some(ordered[pos].clone());
        }
        slots
            .into_iter()
            .map(|v| v.expect("source_index is a permutation"))
            .collect()
    }
}

/// Orders one design-table variable by facility distance from the centroid.
pub fn make_ordered_series(
    table: &DesignTable,
    variable: &str,
    cfg: &GeoConfig,
) -> Result<OrderedSeries> {
    let j = table.variable_index(variable)?;
    let ids: Vec<String> = table.rows.iter().map(|r| r.facility_id.clone()).collect();
    let coords: Vec<LatLon> = table
        .rows
        .iter()
        .map(|r| LatLon::new(r.latitude, r.longitude))
        .collect();
    OrderedSeries::from_sites(&ids, &coords, &table.column(j), cfg)
}
