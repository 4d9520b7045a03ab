//! Local-level state-space model over distance.
//!
//! ```text
//! x_i     = α_i + ε_i,            ε_i ~ N(0, σ²_ε)
//! α_{i+1} = α_i + η_i,            η_i ~ N(0, g_i σ²_η),  g_i = d_{i+1} - d_i
//! α_1     ~ N(a_1, P_1)
//! ```
//!
//! The innovation for the step from site `i` to `i+1` is scaled by the distance
//! actually travelled between them, so the level behaves like Brownian motion in
//! distance. `d_1` itself only records the first site's position.
//!
//! Missing observations skip the update step of the filter and pass the
//! prediction straight through; the smoother then fills them with
//! `E[α_i | all observed x]`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geo::OrderedSeries;
use crate::optim::{nelder_mead, NelderMeadOptions};

/// Lower bound applied to both variances during optimisation.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Scale of the approximately diffuse prior on the first level, relative to
/// the sample variance of the observed values.
pub const DIFFUSE_SCALE: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalLevelParams {
    pub sigma2_eps: f64,
    /// Innovation variance per km.
    pub sigma2_eta: f64,
    pub init_mean: f64,
    pub init_var: f64,
}

impl LocalLevelParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.sigma2_eps,
            self.sigma2_eta,
            self.init_mean,
            self.init_var,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParams("parameters must be finite".into()));
        }
        if self.sigma2_eps < 0.0 || self.sigma2_eta < 0.0 {
            return Err(Error::InvalidParams("variances must be >= 0".into()));
        }
        if self.sigma2_eps + self.sigma2_eta <= 0.0 {
            return Err(Error::InvalidParams(
                "sigma2_eps + sigma2_eta must be > 0".into(),
            ));
        }
        if self.init_var <= 0.0 {
            return Err(Error::InvalidParams("init_var must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// One-step predicted level `a_i = E[α_i | x_1..x_{i-1}]`.
    pub predicted_mean: Vec<f64>,
    pub predicted_var: Vec<f64>,
    pub filtered_mean: Vec<f64>,
    pub filtered_var: Vec<f64>,
    /// `v_i`, `F_i`, `K_i`; `None` at missing steps.
    pub innovation: Vec<Option<f64>>,
    pub innovation_var: Vec<Option<f64>>,
    pub gain: Vec<Option<f64>>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherOutput {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_series(series: &OrderedSeries) -> Result<()> {
    for (i, v) in series.values.iter().enumerate() {
        if let Some(x) = v {
            if !x.is_finite() {
                return Err(Error::NonFinite(i));
            }
        }
    }
    if series.n_observed == 0 {
        return Err(Error::NoObservations);
    }
    Ok(())
}

/// Runs the forward recursions, returning predictions, updates and the exact
/// Gaussian log-likelihood of the observed values.
pub fn kalman_filter(series: &OrderedSeries, params: &LocalLevelParams) -> Result<FilterOutput> {
    params.validate()?;
    check_series(series)?;
    let m = series.len();
    let mut out = FilterOutput {
        predicted_mean: Vec::with_capacity(m),
        predicted_var: Vec::with_capacity(m),
        filtered_mean: Vec::with_capacity(m),
        filtered_var: Vec::with_capacity(m),
        innovation: Vec::with_capacity(m),
        innovation_var: Vec::with_capacity(m),
        gain: Vec::with_capacity(m),
        log_likelihood: 0.0,
    };
    let (mut a, mut p) = (params.init_mean, params.init_var);
    let mut loglik = 0.0;
    for i in 0..m {
        out.predicted_mean.push(a);
        out.predicted_var.push(p);
        let (af, pf) = match series.values[i] {
            Some(x) => {
                let v = x - a;
                let f = p + params.sigma2_eps;
                let k = p / f;
                loglik -= 0.5 * ((2.0 * PI).ln() + f.ln() + v * v / f);
                out.innovation.push(Some(v));
                out.innovation_var.push(Some(f));
                out.gain.push(Some(k));
                (a + k * v, p * (1.0 - k))
            }
            None => {
                out.innovation.push(None);
                out.innovation_var.push(None);
                out.gain.push(None);
                (a, p)
            }
        };
        out.filtered_mean.push(af);
        out.filtered_var.push(pf);
        if i + 1 < m {
            a = af;
            p = pf + series.gaps[i + 1] * params.sigma2_eta;
        }
    }
    out.log_likelihood = loglik;
    Ok(out)
}

/// Log-likelihood only; avoids the per-step allocations of [`kalman_filter`].
pub fn log_likelihood(series: &OrderedSeries, params: &LocalLevelParams) -> f64 {
    let (mut a, mut p) = (params.init_mean, params.init_var);
    let mut loglik = 0.0;
    let m = series.len();
    for i in 0..m {
        if let Some(x) = series.values[i] {
            let v = x - a;
            let f = p + params.sigma2_eps;
            let k = p / f;
            loglik -= 0.5 * ((2.0 * PI).ln() + f.ln() + v * v / f);
            a += k * v;
            p *= 1.0 - k;
        }
        if i + 1 < m {
            p += series.gaps[i + 1] * params.sigma2_eta;
        }
    }
    loglik
}

/// Fixed-interval smoother (backward `r`/`N` recursions).
pub fn kalman_smoother(filter: &FilterOutput, series: &OrderedSeries) -> Result<SmootherOutput> {
    let m = series.len();
    if filter.predicted_mean.len() != m || filter.innovation.len() != m {
        return Err(Error::Contract(format!(
            "filter output has {} steps but series has {m}",
            filter.predicted_mean.len()
        )));
    }
    let mut mean = vec![0.0; m];
    let mut var = vec![0.0; m];
    let (mut r, mut n) = (0.0, 0.0);
    for i in (0..m).rev() {
        match (
            filter.innovation[i],
            filter.innovation_var[i],
            filter.gain[i],
        ) {
            (Some(v), Some(f), Some(k)) => {
                let l = 1.0 - k;
                r = v / f + l * r;
                n = 1.0 / f + l * l * n;
            }
            (None, None, None) => {}
            _ => {
                return Err(Error::Contract(format!(
                    "inconsistent filter output at step {i}"
                )))
            }
        }
        let (a, p) = (filter.predicted_mean[i], filter.predicted_var[i]);
        mean[i] = a + p * r;
        var[i] = (p - p * p * n).max(0.0);
    }
    Ok(SmootherOutput { mean, var })
}

/// Output of [`fit_mle`].
#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub params: LocalLevelParams,
    pub log_likelihood: f64,
    pub evaluations: usize,
    /// Set when no restart converged or none improved on its starting point.
    pub warning: Option<String>,
}

/// Starting ratios `g̅ σ²_η / σ²_ε` for the optimiser restarts.
const START_SIGNAL_TO_NOISE: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

fn observed_values(series: &OrderedSeries) -> Vec<f64> {
    series.values.iter().flatten().copied().collect()
}

fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Maximum-likelihood estimates of `(σ²_ε, σ²_η)`.
///
/// The search runs Nelder–Mead on the log-variances from five starting points
/// spanning four orders of magnitude in signal-to-noise ratio and keeps the
/// best. `a_1` is the first observed value and `P_1` is `1e7` times the sample
/// variance of the observations.
pub fn fit_mle(series: &OrderedSeries) -> Result<MleFit> {
    check_series(series)?;
    let observed = observed_values(series);
    if observed.len() < 3 {
        return Err(Error::TooFewObservations {
            needed: 3,
            found: observed.len(),
        });
    }
    let var = sample_variance(&observed);
    let scale = if var > 0.0 { var } else { 1.0 };
    let init_mean = observed[0];
    let init_var = DIFFUSE_SCALE * scale;
    let mean_gap = (series.distances[series.len() - 1] - series.distances[0])
        / (series.len().max(2) - 1) as f64;
    let mean_gap = if mean_gap > 0.0 { mean_gap } else { 1.0 };

    let params_at = |theta: &[f64]| LocalLevelParams {
        sigma2_eps: theta[0].exp().max(VARIANCE_FLOOR),
        sigma2_eta: theta[1].exp().max(VARIANCE_FLOOR),
        init_mean,
        init_var,
    };
    let objective = |theta: &[f64]| -log_likelihood(series, &params_at(theta));

    let opts = NelderMeadOptions::default();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut evaluations = 0;
    let mut any_converged = false;
    let mut any_improved = false;
    for q in START_SIGNAL_TO_NOISE {
        let eps = scale / (1.0 + q);
        let start = [eps.ln(), (q * eps / mean_gap).ln()];
        let start_value = objective(&start);
        let found = nelder_mead(objective, &start, &opts);
        evaluations += found.evaluations + 1;
        any_converged |= found.converged;
        any_improved |= found.value < start_value;
        let (point, value) = if found.value <= start_value {
            (found.point, found.value)
        } else {
            (start.to_vec(), start_value)
        };
        if best.as_ref().is_none_or(|(_, b)| value < *b) {
            best = Some((point, value));
        }
    }
    let (theta, value) = best.expect("at least one restart");
    let warning = match (any_converged, any_improved) {
        (_, false) => Some("optimizer did not improve on any starting point".to_string()),
        (false, true) => Some("optimizer hit its evaluation budget on every restart".to_string()),
        _ => None,
    };
    Ok(MleFit {
        params: params_at(&theta),
        log_likelihood: -value,
        evaluations,
        warning,
    })
}

/// Output of [`impute_series`], in series (distance) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    pub values: Vec<f64>,
    pub fit: MleFit,
    /// `(position, smoothed variance)` for every imputed position.
    pub imputed_variance: Vec<(usize, f64)>,
    pub smoothed: SmootherOutput,
}

/// Fits the model, then replaces each missing value by its smoothed level.
pub fn impute_series(series: &OrderedSeries) -> Result<Imputation> {
    let fit = fit_mle(series)?;
    let filter = kalman_filter(series, &fit.params)?;
    let smoothed = kalman_smoother(&filter, series)?;
    let mut imputed_variance = Vec::new();
    let values = series
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            Some(x) => *x,
            None => {
                imputed_variance.push((i, smoothed.var[i]));
                smoothed.mean[i]
            }
        })
        .collect();
    Ok(Imputation {
        values,
        fit,
        imputed_variance,
        smoothed,
    })
}

/// Draws a fully observed path of the model at the given distances.
///
/// The initial level is drawn from `N(init_mean, init_var)`.
pub fn simulate<R: Rng + ?Sized>(
    distances: &[f64],
    params: &LocalLevelParams,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut level = params.init_mean + params.init_var.sqrt() * std_normal.sample(rng);
    let mut levels = Vec::with_capacity(distances.len());
    let mut obs = Vec::with_capacity(distances.len());
    for i in 0..distances.len() {
        if i > 0 {
            let gap = distances[i] - distances[i - 1];
            level += (gap * params.sigma2_eta).sqrt() * std_normal.sample(rng);
        }
        levels.push(level);
        obs.push(level + params.sigma2_eps.sqrt() * std_normal.sample(rng));
    }
    Ok((levels, obs))
}
