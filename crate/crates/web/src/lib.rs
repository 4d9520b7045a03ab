//! Browser demo. Every export takes plain numbers and returns a JSON string,
//! so the page needs no bindings beyond `JSON.parse`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use spatcar::bench::{mask_random, run_benchmark, Method, Split};
use spatcar::geo::{LatLon, OrderedSeries};
use spatcar::graph::{augment_islands, build_graph, threshold_edges};
use spatcar::ssm::{impute_series, simulate, LocalLevelParams};

fn random_distances(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut at = 0.0;
    (0..n)
        .map(|_| {
            at += rng.random_range(0.2..2.0);
            at
        })
        .collect()
}

fn simulated_series(
    seed: u64,
    n_sites: usize,
    sigma2_eps: f64,
    sigma2_eta: f64,
) -> spatcar::Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = random_distances(&mut rng, n_sites);
    let params = LocalLevelParams {
        sigma2_eps,
        sigma2_eta,
        init_mean: 20.0,
        init_var: 1.0,
    };
    let (_, obs) = simulate(&d, &params, &mut rng)?;
    Ok((d, obs))
}

/// Simulates a series, hides `missing_fraction` of it and imputes it back.
pub fn imputation_curve(
    seed: u64,
    n_sites: usize,
    missing_fraction: f64,
    sigma2_eps: f64,
    sigma2_eta: f64,
) -> spatcar::Result<Value> {
    let (d, truth) = simulated_series(seed, n_sites, sigma2_eps, sigma2_eta)?;
    let full = OrderedSeries::from_distances(d.clone(), truth.iter().copied().map(Some).collect())?;
    let (masked, plan) = mask_random(&full, missing_fraction, seed ^ 0x5eed)?;
    let imp = impute_series(&masked)?;
    let band: Vec<f64> = imp.smoothed.var.iter().map(|v| 2.0 * v.sqrt()).collect();
    Ok(json!({
        "distance": d,
        "truth": truth,
        "observed": masked.values,
        "smoothed": imp.smoothed.mean,
        "band": band,
        "heldout": plan.heldout_indices,
        "params": {
            "sigma2_eps": imp.fit.params.sigma2_eps,
            "sigma2_eta": imp.fit.params.sigma2_eta,
            "log_likelihood": imp.fit.log_likelihood,
        },
    }))
}

/// Random areas joined within `max_km`, islands repaired; returns the
/// Leroux log-determinant over a grid of ρ.
pub fn logdet_curve(
    seed: u64,
    n_areas: usize,
    max_km: f64,
    n_grid: usize,
) -> spatcar::Result<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = (0..n_areas).map(|k| format!("a{k}")).collect();
    let pts: Vec<LatLon> = (0..n_areas)
        .map(|_| {
            LatLon::new(
                28.0 + rng.random_range(-1.5..1.5),
                -82.0 + rng.random_range(-1.5..1.5),
            )
        })
        .collect();
    let edges = threshold_edges(&ids, &pts, max_km);
    let raw = build_graph(&edges, &ids, &ids)?;
    let graph = augment_islands(&raw, &pts)?;
    let rho: Vec<f64> = (0..n_grid)
        .map(|i| 0.99 * i as f64 / (n_grid - 1).max(1) as f64)
        .collect();
    let logdet = rho
        .iter()
        .map(|&r| graph.leroux_logdet(r))
        .collect::<spatcar::Result<Vec<_>>>()?;
    let lines: Vec<[usize; 2]> = graph
        .neighbors
        .iter()
        .enumerate()
        .flat_map(|(i, n)| n.iter().filter(move |&&j| j > i).map(move |&j| [i, j]))
        .collect();
    Ok(json!({
        "rho": rho,
        "logdet": logdet,
        "points": pts.iter().map(|p| [p.lon, p.lat]).collect::<Vec<_>>(),
        "edges": lines,
        "augmented": graph.augmented_edges,
        "eigenvalues": graph.laplacian_eigenvalues,
    }))
}

/// Mean SMAPE of every imputer at the three protocol splits.
pub fn smape_by_split(
    seed: u64,
    n_sites: usize,
    n_reps: usize,
    sigma2_eps: f64,
    sigma2_eta: f64,
) -> spatcar::Result<Value> {
    let (d, obs) = simulated_series(seed, n_sites, sigma2_eps, sigma2_eta)?;
    let series = OrderedSeries::from_distances(d, obs.into_iter().map(Some).collect())?;
    let reports = run_benchmark(&series, &Method::ALL, &Split::PROTOCOL, n_reps, seed)?;
    let rows: Vec<Value> = reports
        .iter()
        .map(|r| {
            json!({
                "method": r.method.name(),
                "split": r.split.to_string(),
                "mean_smape": r.mean_smape,
                "sd_smape": r.sd_smape,
                "n_failed": r.n_failed,
            })
        })
        .collect();
    Ok(json!({ "reports": rows }))
}

fn export(v: spatcar::Result<Value>) -> Result<String, JsError> {
    v.map(|v| v.to_string())
        .map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = imputationCurve)]
pub fn imputation_curve_js(
    seed: u32,
    n_sites: usize,
    missing_fraction: f64,
    sigma2_eps: f64,
    sigma2_eta: f64,
) -> Result<String, JsError> {
    export(imputation_curve(
        seed as u64,
        n_sites,
        missing_fraction,
        sigma2_eps,
        sigma2_eta,
    ))
}

#[wasm_bindgen(js_name = logdetCurve)]
pub fn logdet_curve_js(seed: u32, n_areas: usize, max_km: f64) -> Result<String, JsError> {
    export(logdet_curve(seed as u64, n_areas, max_km, 50))
}

#[wasm_bindgen(js_name = smapeBySplit)]
pub fn smape_by_split_js(
    seed: u32,
    n_sites: usize,
    n_reps: usize,
    sigma2_eps: f64,
    sigma2_eta: f64,
) -> Result<String, JsError> {
    export(smape_by_split(
        seed as u64,
        n_sites,
        n_reps,
        sigma2_eps,
        sigma2_eta,
    ))
}
