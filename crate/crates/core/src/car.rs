//! Two-level Gaussian model with a Leroux CAR effect per area, fitted by MCMC.
//!
//! ```text
//! Y_kj = x_kjᵀβ + O_kj + φ_k + e_kj,    e_kj ~ N(0, ν²)
//! φ    ~ N(0, τ² Q(ρ)⁻¹),               Q(ρ) = ρ(D - W*) + (1 - ρ)I
//! β ~ N(μ_β, Σ_β),   τ², ν² ~ IG(a, b),   ρ ~ U(0, 1)
//! ```
//!
//! One iteration updates β, φ (single-site), the intercept/φ level, τ², ν²,
//! ρ (logit random walk) and finally redraws every missing response from its
//! predictive normal.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::hash64;
use crate::data::DesignTable;
use crate::error::{Error, Result};
use crate::graph::ZctaGraph;

/// Everything the sampler conditions on.
#[derive(Debug, Clone)]
pub struct CarModelInput {
    /// Log response per row; `None` where missing.
    pub y: Vec<Option<f64>>,
    /// `n × (p+1)` design whose first column is the intercept.
    pub x: DMatrix<f64>,
    pub column_names: Vec<String>,
    pub offset: Vec<f64>,
    /// Row → area index into `graph`.
    pub zcta_index: Vec<usize>,
    pub graph: ZctaGraph,
}

impl CarModelInput {
    pub fn new(
        y: Vec<Option<f64>>,
        x: DMatrix<f64>,
        column_names: Vec<String>,
        offset: Vec<f64>,
        zcta_index: Vec<usize>,
        graph: ZctaGraph,
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || offset.len() != n || zcta_index.len() != n {
            return Err(Error::Contract(format!(
                "row counts disagree: y {n}, X {}, offset {}, zcta_index {}",
                x.nrows(),
                offset.len(),
                zcta_index.len()
            )));
        }
        if column_names.len() != x.ncols() {
            return Err(Error::Contract(format!(
                "{} column names for {} columns",
                column_names.len(),
                x.ncols()
            )));
        }
        if let Some(r) = (0..n).find(|&r| x.row(r).iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(r));
        }
        if let Some(r) =
            (0..n).find(|&r| !offset[r].is_finite() || y[r].is_some_and(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(r));
        }
        if let Some(&k) = zcta_index.iter().find(|&&k| k >= graph.len()) {
            return Err(Error::Contract(format!(
                "area index {k} outside graph of {} nodes",
                graph.len()
            )));
        }
        Ok(CarModelInput {
            y,
            x,
            column_names,
            offset,
            zcta_index,
            graph,
        })
    }

    /// Builds the model input from a joined table: intercept plus every
    /// variable of the table. Refuses tables that still have missing
    /// covariate cells. With `standardize`, non-intercept columns are centred
    /// and scaled to unit sample SD.
    pub fn from_design(table: &DesignTable, graph: ZctaGraph, standardize: bool) -> Result<Self> {
        let missing = table.missing_cells();
        if missing > 0 {
            return Err(Error::Contract(format!(
                "{missing} covariate cells are missing; impute covariates before fitting"
            )));
        }
        let ids: Vec<&str> = table.zctas.iter().map(|z| z.zcta_id.as_str()).collect();
        if graph
            .zcta_ids
            .iter()
            .map(String::as_str)
            .ne(ids.iter().copied())
        {
            return Err(Error::Contract(
                "graph nodes must list the ZCTA table ids in table order".into(),
            ));
        }
        let n = table.rows.len();
        let p = table.variables.len();
        let mut x = DMatrix::from_fn(n, p + 1, |r, c| {
            if c == 0 {
                1.0
            } else {
                table.rows[r].values[c - 1].expect("checked complete")
            }
        });
        if standardize {
            for c in 1..=p {
                let col = x.column(c);
                let mean = col.mean();
                let sd =
                    (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
                if !(sd > 0.0) {
                    return Err(Error::Contract(format!(
                        "cannot standardize constant column `{}`",
                        table.variables[c - 1]
                    )));
                }
                x.column_mut(c).apply(|v| *v = (*v - mean) / sd);
            }
        }
        let mut column_names = vec!["intercept".to_string()];
        column_names.extend(table.variables.iter().cloned());
        CarModelInput::new(
            table.log_shr(),
            x,
            column_names,
            table.rows.iter().map(|r| r.offset).collect(),
            table.zcta_index(),
            graph,
        )
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_coef(&self) -> usize {
        self.x.ncols()
    }

    pub fn missing_rows(&self) -> Vec<usize> {
        (0..self.y.len()).filter(|&r| self.y[r].is_none()).collect()
    }

    /// `m_k`, the number of rows in each area.
    pub fn rows_per_zcta(&self) -> Vec<usize> {
        let mut m = vec![0; self.graph.len()];
        for &k in &self.zcta_index {
            m[k] += 1;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    pub mu_beta: DVector<f64>,
    pub sigma_beta: DMatrix<f64>,
    /// Inverse-gamma shape and scale shared by τ² and ν².
    pub a: f64,
    pub b: f64,
}

impl Priors {
    /// `β ~ N(0, 10⁵ I)`, `a = 1`, `b = 0.01`.
    pub fn weakly_informative(n_coef: usize) -> Self {
        Priors {
            mu_beta: DVector::zeros(n_coef),
            sigma_beta: DMatrix::identity(n_coef, n_coef) * 1e5,
            a: 1.0,
            b: 0.01,
        }
    }

    pub fn validate(&self, n_coef: usize) -> Result<()> {
        if self.mu_beta.len() != n_coef || self.sigma_beta.shape() != (n_coef, n_coef) {
            return Err(Error::InvalidParams(format!(
                "beta prior has dimension {} but the design has {n_coef} columns",
                self.mu_beta.len()
            )));
        }
        if !(self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "inverse-gamma prior needs a, b > 0, got a = {}, b = {}",
                self.a, self.b
            )));
        }
        if (&self.sigma_beta - self.sigma_beta.transpose()).amax() > 1e-12 * self.sigma_beta.amax()
        {
            return Err(Error::InvalidParams("sigma_beta is not symmetric".into()));
        }
        if self.sigma_beta.clone().cholesky().is_none() {
            return Err(Error::InvalidParams(
                "sigma_beta is not positive definite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub n_burnin: usize,
    /// Post-burn-in iterations; every `thin`-th one is stored.
    pub n_keep: usize,
    pub thin: usize,
    /// Set from the run's master seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Initial standard deviation of the logit(ρ) random walk.
    pub rho_step: f64,
    /// Adapt `rho_step` during burn-in towards 40–50% acceptance.
    pub tune_rho: bool,
    /// Subtract mean(φ) after every sweep instead of the level move.
    pub center_phi: bool,
    /// Hold ρ at this value (may be 0) instead of sampling it.
    pub fixed_rho: Option<f64>,
    /// Hold ν² at this value instead of sampling it.
    pub fixed_nu2: Option<f64>,
    pub n_chains: usize,
    /// Keep every stored φ draw, not just the running mean.
    pub store_phi: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_burnin: 20_000,
            n_keep: 50_000,
            thin: 1,
            seed: 0,
            rho_step: 1.0,
            tune_rho: true,
            center_phi: false,
            fixed_rho: None,
            fixed_nu2: None,
            n_chains: 1,
            store_phi: false,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_burnin < 1 {
            problems.push("n_burnin must be >= 1".to_string());
        }
        if self.n_keep < 1 {
            problems.push("n_keep must be >= 1".to_string());
        }
        if self.thin < 1 {
            problems.push("thin must be >= 1".to_string());
        }
        if self.n_chains < 1 {
            problems.push("n_chains must be >= 1".to_string());
        }
        if !(self.rho_step > 0.0 && self.rho_step.is_finite()) {
            problems.push(format!("rho_step must be > 0, got {}", self.rho_step));
        }
        if let Some(r) = self.fixed_rho {
            if !(0.0..1.0).contains(&r) {
                problems.push(format!("fixed_rho must lie in [0, 1), got {r}"));
            }
        }
        if let Some(v) = self.fixed_nu2 {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("fixed_nu2 must be > 0, got {v}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(problems.join("; ")))
        }
    }

    /// Number of draws stored per chain.
    pub fn n_stored(&self) -> usize {
        self.n_keep.div_ceil(self.thin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcState {
    pub beta: DVector<f64>,
    pub phi: Vec<f64>,
    pub tau2: f64,
    pub nu2: f64,
    pub rho: f64,
    /// Current draws at the rows of [`CarModelInput::missing_rows`], in order.
    pub y_miss: Vec<f64>,
}

/// Prior full conditional of `φ_k` given its neighbours:
/// `(ρ Σ_k' ω*_kk' φ_k' / (ρ n_k + 1 - ρ), τ² / (ρ n_k + 1 - ρ))`.
pub fn car_full_conditional(
    k: usize,
    phi: &[f64],
    rho: f64,
    tau2: f64,
    graph: &ZctaGraph,
) -> Result<(f64, f64)> {
    if k >= graph.len() || phi.len() != graph.len() {
        return Err(Error::Contract(format!(
            "node {k} / phi of length {} on a graph of {} nodes",
            phi.len(),
            graph.len()
        )));
    }
    if !(0.0..1.0).contains(&rho) || !(tau2 > 0.0) {
        return Err(Error::InvalidParams(format!(
            "need rho in [0, 1) and tau2 > 0, got rho = {rho}, tau2 = {tau2}"
        )));
    }
    let precision = rho * graph.degrees[k] as f64 + 1.0 - rho;
    Ok((
        rho * graph.neighbor_sum(k, phi) / precision,
        tau2 / precision,
    ))
}

/// Draws `scale / Gamma(shape, 1)`, i.e. an inverse-gamma(shape, scale) variate.
fn inverse_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && scale > 0.0) {
        return Err(Error::InvalidParams(format!(
            "inverse-gamma needs shape, scale > 0, got {shape}, {scale}"
        )));
    }
    let g = Gamma::new(shape, 1.0).expect("positive shape");
    Ok(scale / g.sample(rng))
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Conditional updates of the two-level model with precomputed design terms.
#[derive(Debug, Clone)]
pub struct CarSampler<'a> {
    pub input: &'a CarModelInput,
    pub priors: &'a Priors,
    pub config: McmcConfig,
    xtx: DMatrix<f64>,
    prior_precision: DMatrix<f64>,
    prior_shift: DVector<f64>,
    missing: Vec<usize>,
    /// Slot of each row in `y_miss`, if missing.
    slot: Vec<Option<usize>>,
    rows_per_zcta: Vec<usize>,
    has_intercept: bool,
}

impl<'a> CarSampler<'a> {
    pub fn new(input: &'a CarModelInput, priors: &'a Priors, config: McmcConfig) -> Result<Self> {
        priors.validate(input.n_coef())?;
        config.validate()?;
        input.graph.check_invariants()?;
        let prior_precision = priors
            .sigma_beta
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParams("sigma_beta is not positive definite".into()))?
            .inverse();
        let prior_shift = &prior_precision * &priors.mu_beta;
        let missing = input.missing_rows();
        let mut slot = vec![None; input.n_rows()];
        for (s, &r) in missing.iter().enumerate() {
            slot[r] = Some(s);
        }
        let has_intercept = input.n_coef() > 0 && input.x.column(0).iter().all(|&v| v == 1.0);
        Ok(CarSampler {
            xtx: input.x.transpose() * &input.x,
            prior_precision,
            prior_shift,
            missing,
            slot,
            rows_per_zcta: input.rows_per_zcta(),
            has_intercept,
            input,
            priors,
            config,
        })
    }

    pub fn missing_rows(&self) -> &[usize] {
        &self.missing
    }

    /// Response with current imputations filled in.
    pub fn y_star(&self, state: &McmcState) -> Vec<f64> {
        (0..self.input.n_rows())
            .map(|r| match self.slot[r] {
                Some(s) => state.y_miss[s],
                None => self.input.y[r].expect("observed row"),
            })
            .collect()
    }

    /// `μ_kj = x_kjᵀβ + O_kj + φ_k`.
    pub fn linear_predictor(&self, state: &McmcState) -> Vec<f64> {
        let xb = &self.input.x * &state.beta;
        (0..self.input.n_rows())
            .map(|r| xb[r] + self.input.offset[r] + state.phi[self.input.zcta_index[r]])
            .collect()
    }

    /// Least-squares β on observed rows, φ = 0, τ² = ν² = 0.01, ρ = 0.5,
    /// missing responses at their fitted values.
    pub fn initial_state(&self) -> Result<McmcState> {
        let observed: Vec<usize> = (0..self.input.n_rows())
            .filter(|&r| self.input.y[r].is_some())
            .collect();
        if observed.is_empty() {
            return Err(Error::NoObservations);
        }
        let p = self.input.n_coef();
        let xo = DMatrix::from_fn(observed.len(), p, |i, c| self.input.x[(observed[i], c)]);
        let target = DVector::from_iterator(
            observed.len(),
            observed
                .iter()
                .map(|&r| self.input.y[r].unwrap() - self.input.offset[r]),
        );
        let beta = xo
            .svd(true, true)
            .solve(&target, 1e-12)
            .map_err(|e| Error::LinearAlgebra(format!("least-squares start: {e}")))?;
        let mut state = McmcState {
            beta,
            phi: vec![0.0; self.input.graph.len()],
            tau2: 0.01,
            nu2: self.config.fixed_nu2.unwrap_or(0.01),
            rho: self.config.fixed_rho.unwrap_or(0.5),
            y_miss: vec![0.0; self.missing.len()],
        };
        let mu = self.linear_predictor(&state);
        state.y_miss = self.missing.iter().map(|&r| mu[r]).collect();
        Ok(state)
    }

    /// `(V m, V)` with `V = (XᵀX/ν² + Σ_β⁻¹)⁻¹`, `m = Xᵀ(y* - O - Zφ)/ν² + Σ_β⁻¹μ_β`.
    pub fn beta_conditional(&self, state: &McmcState) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (mean, chol) = self.beta_moments(state)?;
        Ok((mean, chol.inverse()))
    }

    fn beta_moments(
        &self,
        state: &McmcState,
    ) -> Result<(DVector<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
        let y = self.y_star(state);
        let resid = DVector::from_iterator(
            y.len(),
            (0..y.len()).map(|r| y[r] - self.input.offset[r] - state.phi[self.input.zcta_index[r]]),
        );
        let precision = &self.xtx / state.nu2 + &self.prior_precision;
        let m = self.input.x.tr_mul(&resid) / state.nu2 + &self.prior_shift;
        let chol = precision.clone().cholesky().ok_or_else(|| {
            let diag = precision.diagonal();
            Error::LinearAlgebra(format!(
                "beta posterior precision not positive definite (nu2 = {:e}, diagonal range [{:e}, {:e}])",
                state.nu2,
                diag.min(),
                diag.max()
            ))
        })?;
        Ok((chol.solve(&m), chol))
    }

    pub fn gibbs_beta<R: Rng + ?Sized>(&self, state: &mut McmcState, rng: &mut R) -> Result<()> {
        let (mean, chol) = self.beta_moments(state)?;
        // Precision = L Lᵀ, so L⁻ᵀ z has covariance V.
        let z = DVector::from_fn(mean.len(), |_, _| normal(rng));
        let dev = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        state.beta = mean + dev;
        Ok(())
    }

    /// Per-area sums of `y* - xᵀβ - O`.
    fn area_residual_sums(&self, state: &McmcState) -> Vec<f64> {
        let y = self.y_star(state);
        let xb = &self.input.x * &state.beta;
        let mut sums = vec![0.0; self.input.graph.len()];
        for r in 0..y.len() {
            sums[self.input.zcta_index[r]] += y[r] - xb[r] - self.input.offset[r];
        }
        sums
    }

    fn phi_moments(&self, k: usize, state: &McmcState, resid_sum: f64) -> (f64, f64) {
        let graph = &self.input.graph;
        let prior_precision = state.rho * graph.degrees[k] as f64 + 1.0 - state.rho;
        let var = 1.0 / (self.rows_per_zcta[k] as f64 / state.nu2 + prior_precision / state.tau2);
        let mean = var
            * (resid_sum / state.nu2 + state.rho * graph.neighbor_sum(k, &state.phi) / state.tau2);
        (mean, var)
    }

    /// Full conditional `(μ*, v*)` of `φ_k` given everything else.
    pub fn phi_conditional(&self, k: usize, state: &McmcState) -> (f64, f64) {
        self.phi_moments(k, state, self.area_residual_sums(state)[k])
    }

    /// Single-site sweep over `k = 0..K`, then optional centring.
    pub fn gibbs_phi<R: Rng + ?Sized>(&self, state: &mut McmcState, rng: &mut R) {
        let sums = self.area_residual_sums(state);
        for (k, &sum) in sums.iter().enumerate() {
            let (mean, var) = self.phi_moments(k, state, sum);
            state.phi[k] = mean + var.sqrt() * normal(rng);
        }
        if self.config.center_phi {
            center(&mut state.phi);
        }
    }

    /// Exact Gibbs move along `β₀ += c, φ -= c·1`, which leaves every `μ_kj`
    /// unchanged. Along that line the log posterior is quadratic in `c` with
    /// curvature `A = Λ₀₀ + (1-ρ)K/τ²` and slope `B = (1-ρ)Σφ/τ² - e₀ᵀΛ(β-μ_β)`,
    /// `Λ = Σ_β⁻¹`, so `c ~ N(B/A, 1/A)`. No-op without an intercept column.
    pub fn shift_level<R: Rng + ?Sized>(&self, state: &mut McmcState, rng: &mut R) {
        if !self.has_intercept {
            return;
        }
        let k = state.phi.len() as f64;
        let lambda_row = self.prior_precision.row(0);
        let a = lambda_row[0] + (1.0 - state.rho) * k / state.tau2;
        let b = (1.0 - state.rho) * state.phi.iter().sum::<f64>() / state.tau2
            - lambda_row.dot(&(&state.beta - &self.priors.mu_beta).transpose());
        let c = b / a + normal(rng) / a.sqrt();
        state.beta[0] += c;
        state.phi.iter_mut().for_each(|v| *v -= c);
    }

    /// `τ² ~ IG(a + K/2, b + φᵀQ(ρ)φ/2)`.
    pub fn gibbs_tau2<R: Rng + ?Sized>(&self, state: &mut McmcState, rng: &mut R) -> Result<()> {
        let qf = self
            .input
            .graph
            .leroux_quadratic_form(&state.phi, state.rho);
        state.tau2 = inverse_gamma(
            self.priors.a + state.phi.len() as f64 / 2.0,
            self.priors.b + qf / 2.0,
            rng,
        )?;
        Ok(())
    }

    /// `ν² ~ IG(a + n/2, b + Σ(y* - μ)²/2)`.
    pub fn gibbs_nu2<R: Rng + ?Sized>(&self, state: &mut McmcState, rng: &mut R) -> Result<()> {
        let y = self.y_star(state);
        let mu = self.linear_predictor(state);
        let sse: f64 = y.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum();
        state.nu2 = inverse_gamma(
            self.priors.a + y.len() as f64 / 2.0,
            self.priors.b + sse / 2.0,
            rng,
        )?;
        Ok(())
    }

    /// Log acceptance ratio of moving ρ to `proposal` under the logit random
    /// walk, including the Jacobian of the transform.
    pub fn rho_log_ratio(&self, state: &McmcState, proposal: f64) -> Result<f64> {
        let graph = &self.input.graph;
        let rho = state.rho;
        let delta_logdet = graph.leroux_logdet(proposal)? - graph.leroux_logdet(rho)?;
        let delta_qf = graph.leroux_quadratic_form(&state.phi, proposal)
            - graph.leroux_quadratic_form(&state.phi, rho);
        let jacobian = (proposal * (1.0 - proposal)).ln() - (rho * (1.0 - rho)).ln();
        Ok(0.5 * delta_logdet - delta_qf / (2.0 * state.tau2) + jacobian)
    }

    /// One Metropolis step on logit(ρ); returns whether it was accepted.
    pub fn mh_rho<R: Rng + ?Sized>(
        &self,
        state: &mut McmcState,
        step: f64,
        rng: &mut R,
    ) -> Result<bool> {
        let logit = (state.rho / (1.0 - state.rho)).ln() + step * normal(rng);
        let proposal = 1.0 / (1.0 + (-logit).exp());
        // Extreme logits round to exactly 0 or 1, where Q(ρ) has no density here.
        if !(proposal > 0.0 && proposal < 1.0) {
            return Ok(false);
        }
        let log_ratio = self.rho_log_ratio(state, proposal)?;
        let u: f64 = rng.random();
        if u.ln() < log_ratio {
            state.rho = proposal;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Redraws every missing response from `N(μ_kj, ν²)`.
    pub fn impute_missing_y<R: Rng + ?Sized>(&self, state: &mut McmcState, rng: &mut R) {
        if self.missing.is_empty() {
            return;
        }
        let mu = self.linear_predictor(state);
        let sd = state.nu2.sqrt();
        for (s, &r) in self.missing.iter().enumerate() {
            state.y_miss[s] = mu[r] + sd * normal(rng);
        }
    }

    /// One full iteration. Returns whether a ρ proposal was accepted.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut McmcState,
        rho_step: f64,
        iteration: usize,
        rng: &mut R,
    ) -> Result<bool> {
        let bad = |component| Error::NonFiniteState {
            iteration,
            component,
        };
        self.gibbs_beta(state, rng)?;
        if state.beta.iter().any(|v| !v.is_finite()) {
            return Err(bad("beta"));
        }
        self.gibbs_phi(state, rng);
        if !self.config.center_phi {
            self.shift_level(state, rng);
        }
        if state.phi.iter().any(|v| !v.is_finite()) || !state.beta[0].is_finite() {
            return Err(bad("phi"));
        }
        self.gibbs_tau2(state, rng)?;
        if !(state.tau2.is_finite() && state.tau2 > 0.0) {
            return Err(bad("tau2"));
        }
        if self.config.fixed_nu2.is_none() {
            self.gibbs_nu2(state, rng)?;
            if !(state.nu2.is_finite() && state.nu2 > 0.0) {
                return Err(bad("nu2"));
            }
        }
        let accepted = if self.config.fixed_rho.is_none() {
            self.mh_rho(state, rho_step, rng)?
        } else {
            false
        };
        self.impute_missing_y(state, rng);
        if state.y_miss.iter().any(|v| !v.is_finite()) {
            return Err(bad("y_miss"));
        }
        Ok(accepted)
    }
}

fn center(phi: &mut [f64]) {
    let mean = phi.iter().sum::<f64>() / phi.len() as f64;
    phi.iter_mut().for_each(|v| *v -= mean);
}

/// Draws retained by one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub chain: usize,
    pub seed: u64,
    /// One row per stored draw, columns as [`McmcRun::parameter_names`].
    pub draws: Vec<Vec<f64>>,
    /// One row per stored draw, aligned with the missing rows.
    pub y_miss: Vec<Vec<f64>>,
    /// Present only with [`McmcConfig::store_phi`].
    pub phi: Vec<Vec<f64>>,
    pub phi_sum: Vec<f64>,
    pub iterations_burnin: usize,
    pub iterations_kept: usize,
    pub rho_step: f64,
    /// Post-burn-in acceptance rate of ρ proposals (0 when ρ is fixed).
    pub rho_acceptance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    /// β components, then `tau2`, `nu2`, `rho`.
    pub parameters: Vec<ParameterSummary>,
    /// Predictive summaries for the missing rows, named by row index.
    pub missing_responses: Vec<(usize, ParameterSummary)>,
    /// Posterior mean of `μ_kj` for every row.
    pub fitted: Vec<f64>,
    pub phi_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcRun {
    /// Chain CSV column names: `beta_0..beta_p, tau2, nu2, rho`.
    pub parameter_names: Vec<String>,
    pub chains: Vec<ChainOutput>,
    pub summary: PosteriorSummary,
}

impl McmcRun {
    /// All stored draws of column `j`, chains concatenated in index order.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.chains
            .iter()
            .flat_map(|c| c.draws.iter().map(move |d| d[j]))
            .collect()
    }
}

fn run_chain(sampler: &CarSampler<'_>, chain: usize) -> Result<ChainOutput> {
    let cfg = &sampler.config;
    let seed = hash64(cfg.seed, chain as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = sampler.initial_state()?;
    let mut step = cfg.rho_step;
    let mut batch_accepts = 0usize;
    let mut burned = 0usize;
    const BATCH: usize = 50;
    for it in 0..cfg.n_burnin {
        burned += 1;
        if sampler.step(&mut state, step, it, &mut rng)? {
            batch_accepts += 1;
        }
        if cfg.tune_rho && (it + 1) % BATCH == 0 {
            let rate = batch_accepts as f64 / BATCH as f64;
            if rate < 0.40 {
                step *= 0.8;
            } else if rate > 0.50 {
                step *= 1.25;
            }
            step = step.clamp(1e-3, 20.0);
            batch_accepts = 0;
        }
    }

    let k = state.phi.len();
    let mut out = ChainOutput {
        chain,
        seed,
        draws: Vec::with_capacity(cfg.n_stored()),
        y_miss: Vec::with_capacity(if state.y_miss.is_empty() {
            0
        } else {
            cfg.n_stored()
        }),
        phi: Vec::new(),
        phi_sum: vec![0.0; k],
        iterations_burnin: burned,
        iterations_kept: 0,
        rho_step: step,
        rho_acceptance: 0.0,
    };
    let mut accepts = 0usize;
    for i in 0..cfg.n_keep {
        if sampler.step(&mut state, step, cfg.n_burnin + i, &mut rng)? {
            accepts += 1;
        }
        out.iterations_kept += 1;
        if i % cfg.thin != 0 {
            continue;
        }
        let mut row: Vec<f64> = state.beta.iter().copied().collect();
        row.extend([state.tau2, state.nu2, state.rho]);
        out.draws.push(row);
        if !state.y_miss.is_empty() {
            out.y_miss.push(state.y_miss.clone());
        }
        for (s, v) in out.phi_sum.iter_mut().zip(&state.phi) {
            *s += v;
        }
        if cfg.store_phi {
            out.phi.push(state.phi.clone());
        }
    }
    out.rho_acceptance = accepts as f64 / cfg.n_keep as f64;
    Ok(out)
}

/// Runs `config.n_chains` independent chains (in parallel) and summarises the
/// pooled draws. Chain `c` is seeded with `hash64(seed, c)`.
pub fn run_mcmc(input: &CarModelInput, priors: &Priors, config: &McmcConfig) -> Result<McmcRun> {
    let sampler = CarSampler::new(input, priors, config.clone())?;
    let chains = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(&sampler, c))
        .collect::<Result<Vec<_>>>()?;

    let mut parameter_names: Vec<String> =
        (0..input.n_coef()).map(|j| format!("beta_{j}")).collect();
    parameter_names.extend(["tau2", "nu2", "rho"].map(String::from));

    let pooled: Vec<Vec<f64>> = chains
        .iter()
        .flat_map(|c| c.draws.iter().cloned())
        .collect();
    let mut summary_names = input.column_names.clone();
    summary_names.extend(["tau2", "nu2", "rho"].map(String::from));
    let parameters = summarize_posterior(&summary_names, &pooled)?;

    let missing_rows = sampler.missing_rows().to_vec();
    let miss_draws: Vec<Vec<f64>> = chains
        .iter()
        .flat_map(|c| c.y_miss.iter().cloned())
        .collect();
    let miss_names: Vec<String> = missing_rows.iter().map(|r| format!("y[{r}]")).collect();
    let missing_responses = if missing_rows.is_empty() {
        Vec::new()
    } else {
        missing_rows
            .iter()
            .copied()
            .zip(summarize_posterior(&miss_names, &miss_draws)?)
            .collect()
    };

    let total = pooled.len() as f64;
    let k = input.graph.len();
    let phi_mean: Vec<f64> = (0..k)
        .map(|i| chains.iter().map(|c| c.phi_sum[i]).sum::<f64>() / total)
        .collect();
    let beta_mean = DVector::from_iterator(
        input.n_coef(),
        parameters[..input.n_coef()].iter().map(|p| p.mean),
    );
    let xb = &input.x * beta_mean;
    let fitted = (0..input.n_rows())
        .map(|r| xb[r] + input.offset[r] + phi_mean[input.zcta_index[r]])
        .collect();

    Ok(McmcRun {
        parameter_names,
        chains,
        summary: PosteriorSummary {
            parameters,
            missing_responses,
            fitted,
            phi_mean,
        },
    })
}

/// Type-7 (linear interpolation between order statistics) quantile of an
/// ascending sample.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and 2.5%/97.5% quantiles per column of `draws` (one row per draw).
pub fn summarize_posterior(names: &[String], draws: &[Vec<f64>]) -> Result<Vec<ParameterSummary>> {
    if draws.len() < 100 {
        return Err(Error::TooFewDraws(draws.len()));
    }
    if let Some(row) = draws.iter().find(|d| d.len() != names.len()) {
        return Err(Error::Contract(format!(
            "draw of width {} for {} names",
            row.len(),
            names.len()
        )));
    }
    Ok(names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            col.sort_by(f64::total_cmp);
            ParameterSummary {
                name: name.clone(),
                mean,
                q025: quantile_sorted(&col, 0.025),
                q975: quantile_sorted(&col, 0.975),
            }
        })
        .collect())
}

/// One row per stored draw: `chain, draw, beta_0..beta_p, tau2, nu2, rho`.
pub fn write_chains(path: impl AsRef<Path>, run: &McmcRun) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(run.parameter_names.iter().cloned());
    w.write_record(&header)?;
    for c in &run.chains {
        for (i, d) in c.draws.iter().enumerate() {
            let mut rec = vec![c.chain.to_string(), i.to_string()];
            rec.extend(d.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `parameter, mean, q2.5, q97.5`; missing responses follow the model
/// parameters, labelled through `response_label(row)`.
pub fn write_summary(
    path: impl AsRef<Path>,
    summary: &PosteriorSummary,
    response_label: impl Fn(usize) -> String,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["parameter", "mean", "q2.5", "q97.5"])?;
    let rows = summary
        .parameters
        .iter()
        .map(|p| (p.name.clone(), p))
        .chain(
            summary
                .missing_responses
                .iter()
                .map(|(r, p)| (response_label(*r), p)),
        );
    for (name, p) in rows {
        w.write_record([
            name,
            p.mean.to_string(),
            p.q025.to_string(),
            p.q975.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-area posterior mean of φ.
pub fn write_phi(
    path: impl AsRef<Path>,
    graph: &ZctaGraph,
    summary: &PosteriorSummary,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["zcta_id", "phi_mean"])?;
    for (id, v) in graph.zcta_ids.iter().zip(&summary.phi_mean) {
        w.write_record([id.clone(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
