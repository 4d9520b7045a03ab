//! Synthetic datasets drawn from the two-level model with known parameters.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_facility_table, write_zcta_table, Dataset, FacilityRecord, ZctaRecord,
    FACILITY_COVARIATES,
};
use crate::error::{Error, Result};
use crate::geo::LatLon;
use crate::graph::{augment_islands, build_graph, threshold_edges, write_edge_list, ZctaGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_zctas: usize,
    pub min_facilities: usize,
    pub max_facilities: usize,
    /// Intercept, six facility covariates, FPL score.
    pub beta: Vec<f64>,
    pub tau2: f64,
    pub nu2: f64,
    pub rho: f64,
    /// Per-cell probability that a facility covariate or FPL score is missing.
    pub covariate_missing_rate: f64,
    pub shr_missing_rate: f64,
    pub center_lat: f64,
    pub center_lon: f64,
    /// Half-width of the square box of ZCTA centroids, degrees.
    pub spread_deg: f64,
    /// Centroids closer than this are adjacent.
    pub adjacency_km: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_zctas: 50,
            min_facilities: 1,
            max_facilities: 3,
            beta: vec![-10.0, 0.01, -0.01, 0.008, 0.02, 0.04, -0.01, 0.3],
            tau2: 0.05,
            nu2: 0.01,
            rho: 0.6,
            covariate_missing_rate: 0.2,
            shr_missing_rate: 0.01,
            center_lat: 28.6305,
            center_lon: -82.4497,
            spread_deg: 1.5,
            adjacency_km: 45.0,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_zctas < 2 {
            problems.push("n_zctas must be >= 2".to_string());
        }
        if self.max_facilities < self.min_facilities || self.max_facilities == 0 {
            problems
                .push("need 0 < max_facilities and min_facilities <= max_facilities".to_string());
        }
        if self.beta.len() != FACILITY_COVARIATES.len() + 2 {
            problems.push(format!(
                "beta needs {} entries (intercept, facility covariates, fpl_score), got {}",
                FACILITY_COVARIATES.len() + 2,
                self.beta.len()
            ));
        }
        if !(self.tau2 > 0.0 && self.nu2 > 0.0) {
            problems.push("tau2 and nu2 must be > 0".to_string());
        }
        if !(0.0..1.0).contains(&self.rho) {
            problems.push(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        for (name, p) in [
            ("covariate_missing_rate", self.covariate_missing_rate),
            ("shr_missing_rate", self.shr_missing_rate),
        ] {
            if !(0.0..1.0).contains(&p) {
                problems.push(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if !(self.spread_deg > 0.0 && self.adjacency_km > 0.0) {
            problems.push("spread_deg and adjacency_km must be > 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(problems.join("; ")))
        }
    }
}

/// Ground truth behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// Data as an analyst would receive it, with missing cells.
    pub dataset: Dataset,
    /// The same data before any cell was deleted.
    pub complete: Dataset,
    pub edges: Vec<(String, String)>,
    pub graph: ZctaGraph,
    pub phi: Vec<f64>,
    /// Log SHR per facility, including rows later made missing.
    pub log_shr: Vec<f64>,
}

/// `φ ~ N(0, τ² Q(ρ)⁻¹)` via the Cholesky factor of `Q(ρ)`.
pub fn draw_leroux<R: Rng + ?Sized>(
    graph: &ZctaGraph,
    rho: f64,
    tau2: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let k = graph.len();
    let w = graph.adjacency_matrix();
    let q = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            rho * graph.degrees[i] as f64 + 1.0 - rho
        } else {
            -rho * w[(i, j)]
        }
    });
    let chol = q
        .cholesky()
        .ok_or_else(|| Error::LinearAlgebra(format!("Q({rho}) is not positive definite")))?;
    let z = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
    let phi = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .expect("positive diagonal");
    Ok(phi.iter().map(|v| v * tau2.sqrt()).collect())
}

/// Smooth field on [lo, hi] over the study box, used for covariates.
fn field(p: LatLon, center: LatLon, phase: f64, lo: f64, hi: f64) -> f64 {
    let u = (p.lat - center.lat) * 1.3 + phase;
    let v = (p.lon - center.lon) * 0.9 - phase;
    let s = 0.5 + 0.25 * (u.sin() + (v + 0.5 * u).cos());
    lo + (hi - lo) * s.clamp(0.0, 1.0)
}

/// Draws a full dataset: centroids, facilities, covariates, adjacency,
/// Leroux effects and responses, then deletes cells at the configured rates.
pub fn simulate_dataset(cfg: &SimulationConfig) -> Result<Simulation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let center = LatLon::new(cfg.center_lat, cfg.center_lon);
    let unit = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0);

    let ids: Vec<String> = (0..cfg.n_zctas)
        .map(|k| format!("Z{:05}", 30000 + k))
        .collect();
    let centroids: Vec<LatLon> = (0..cfg.n_zctas)
        .map(|_| {
            LatLon::new(
                cfg.center_lat + cfg.spread_deg * unit(&mut rng),
                cfg.center_lon + cfg.spread_deg * unit(&mut rng),
            )
        })
        .collect();
    let noise = |rng: &mut ChaCha8Rng, sd: f64| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    };
    let zctas: Vec<ZctaRecord> = (0..cfg.n_zctas)
        .map(|k| ZctaRecord {
            zcta_id: ids[k].clone(),
            centroid_latitude: centroids[k].lat,
            centroid_longitude: centroids[k].lon,
            population: rng.random_range(2_000..60_000),
            fpl_score: Some(
                (field(centroids[k], center, 0.7, 0.05, 0.6) + noise(&mut rng, 0.02)).max(0.0),
            ),
        })
        .collect();

    let edges = threshold_edges(&ids, &centroids, cfg.adjacency_km);
    let raw = build_graph(&edges, &ids, &ids)?;
    let graph = augment_islands(&raw, &centroids)?;
    let phi = draw_leroux(&graph, cfg.rho, cfg.tau2, &mut rng)?;

    let ranges = [
        (20.0, 60.0),
        (10.0, 40.0),
        (5.0, 70.0),
        (8.0, 40.0),
        (2.0, 20.0),
        (35.0, 60.0),
    ];
    let mut facilities = Vec::new();
    let mut log_shr = Vec::new();
    for k in 0..cfg.n_zctas {
        let m = rng.random_range(cfg.min_facilities..=cfg.max_facilities);
        for j in 0..m {
            let loc = LatLon::new(
                centroids[k].lat + 0.02 * unit(&mut rng),
                centroids[k].lon + 0.02 * unit(&mut rng),
            );
            let covariates: Vec<f64> = ranges
                .iter()
                .enumerate()
                .map(|(c, &(lo, hi))| {
                    let v = field(loc, center, c as f64, lo, hi) + noise(&mut rng, 0.1 * (hi - lo));
                    if c == 3 {
                        v.round().max(0.0)
                    } else {
                        v.clamp(0.0, 100.0)
                    }
                })
                .collect();
            let fpl = zctas[k].fpl_score.unwrap();
            let offset = (zctas[k].population as f64).ln();
            let mu = cfg.beta[0]
                + covariates
                    .iter()
                    .zip(&cfg.beta[1..7])
                    .map(|(x, b)| x * b)
                    .sum::<f64>()
                + cfg.beta[7] * fpl
                + offset
                + phi[k];
            let y = mu + noise(&mut rng, cfg.nu2.sqrt());
            log_shr.push(y);
            facilities.push(FacilityRecord {
                facility_id: format!("F{k:05}{j}"),
                zcta_id: ids[k].clone(),
                latitude: loc.lat,
                longitude: loc.lon,
                covariates: covariates.into_iter().map(Some).collect(),
                shr: Some(y.exp()),
            });
        }
    }
    let complete = Dataset::new(facilities, zctas);

    let mut dataset = complete.clone();
    for f in &mut dataset.facilities {
        for c in &mut f.covariates {
            if rng.random::<f64>() < cfg.covariate_missing_rate {
                *c = None;
            }
        }
        if rng.random::<f64>() < cfg.shr_missing_rate {
            f.shr = None;
        }
    }
    for z in &mut dataset.zctas {
        if rng.random::<f64>() < cfg.covariate_missing_rate {
            z.fpl_score = None;
        }
    }

    Ok(Simulation {
        dataset,
        complete,
        edges,
        graph,
        phi,
        log_shr,
    })
}

/// Writes `facilities.csv`, `zctas.csv`, `adjacency.csv`, `truth.csv`
/// (parameter, value) and `true_phi.csv` into `dir`.
pub fn write_simulation(
    dir: impl AsRef<Path>,
    cfg: &SimulationConfig,
    sim: &Simulation,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_facility_table(dir.join("facilities.csv"), &sim.dataset.facilities)?;
    write_zcta_table(dir.join("zctas.csv"), &sim.dataset.zctas)?;
    write_edge_list(dir.join("adjacency.csv"), &sim.edges)?;

    let path = dir.join("truth.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["parameter", "value"])?;
    for (j, b) in cfg.beta.iter().enumerate() {
        w.write_record([format!("beta_{j}"), b.to_string()])?;
    }
    for (name, v) in [("tau2", cfg.tau2), ("nu2", cfg.nu2), ("rho", cfg.rho)] {
        w.write_record([name.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("true_phi.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["zcta_id", "phi"])?;
    for (id, v) in sim.graph.zcta_ids.iter().zip(&sim.phi) {
        w.write_record([id.clone(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let cfg = SimulationConfig {
            seed: 7,
            ..SimulationConfig::default()
        };
        let a = simulate_dataset(&cfg).unwrap();
        let b = simulate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset.zctas.len(), 50);
        let n = a.dataset.facilities.len();
        assert!((50..=150).contains(&n));
        for (i, f) in a.complete.facilities.iter().enumerate() {
            f.validate(i).unwrap();
        }
        a.graph.check_invariants().unwrap();
        let cells = n * 6;
        let missing = a.dataset.missing_covariate_cells() as f64 / cells as f64;
        assert!((missing - 0.2).abs() < 0.06, "{missing}");
        let c = simulate_dataset(&SimulationConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn leroux_draws_have_prior_covariance() {
        let g = ZctaGraph::from_neighbors(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![1], vec![0, 2], vec![1]],
            Vec::new(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let phi = DVector::from_vec(draw_leroux(&g, 0.7, 2.0, &mut rng).unwrap());
            acc += &phi * phi.transpose();
        }
        acc /= n as f64;
        let w = g.adjacency_matrix();
        let q = DMatrix::from_fn(3, 3, |i, j| {
            if i == j {
                0.7 * g.degrees[i] as f64 + 0.3
            } else {
                -0.7 * w[(i, j)]
            }
        });
        let cov = q.try_inverse().unwrap() * 2.0;
        for i in 0..3 {
            for j in 0..3 {
                let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((acc[(i, j)] - cov[(i, j)]).abs() < 4.0 * se, "({i},{j})");
            }
        }
    }

    #[test]
    fn writes_all_files() {
        let cfg = SimulationConfig {
            n_zctas: 8,
            ..SimulationConfig::default()
        };
        let sim = simulate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_simulation(dir.path(), &cfg, &sim).unwrap();
        let ds = Dataset::load(
            dir.path().join("facilities.csv"),
            dir.path().join("zctas.csv"),
        )
        .unwrap();
        assert_eq!(ds, sim.dataset);
        for f in ["adjacency.csv", "truth.csv", "true_phi.csv"] {
            assert!(dir.path().join(f).exists());
        }
    }
}
