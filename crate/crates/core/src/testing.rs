//! Dense-matrix reference computations used only by tests.
//!
//! Everything here works from joint Gaussian covariances or explicitly
//! assembled precision matrices, independently of the recursive and
//! eigenvalue-based code paths it checks. Integration tests pull this file in
//! with `#[path]`.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Conditional moments of a Gaussian vector with mean `mu` and covariance
/// `cov`, given the coordinates in `given` take the values `at`.
pub fn condition(
    mu: &DVector<f64>,
    cov: &DMatrix<f64>,
    given: &[usize],
    at: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let n = mu.len();
    if given.is_empty() {
        return (mu.clone(), cov.clone());
    }
    let g = given.len();
    let cgg = DMatrix::from_fn(g, g, |a, b| cov[(given[a], given[b])]);
    let cxg = DMatrix::from_fn(n, g, |i, b| cov[(i, given[b])]);
    let resid = DVector::from_fn(g, |a, _| at[a] - mu[given[a]]);
    let chol = cgg.cholesky().expect("conditioning block must be SPD");
    let mean = mu + &cxg * chol.solve(&resid);
    let cov = cov - &cxg * chol.solve(&cxg.transpose());
    (mean, cov)
}

pub fn gaussian_log_density(mu: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let n = mu.len() as f64;
    let chol = cov.clone().cholesky().expect("SPD covariance");
    let r = x - mu;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&chol.solve(&r)))
}

#[derive(Debug, Clone)]
pub struct DenseLocalLevel {
    pub predicted_mean: Vec<f64>,
    pub predicted_var: Vec<f64>,
    pub smoothed_mean: Vec<f64>,
    pub smoothed_var: Vec<f64>,
    pub log_likelihood: f64,
}

/// Joint Gaussian of `(α_1..α_M, x_1..x_M)` for the local-level model with
/// Brownian increments in distance, conditioned directly.
/// `params = (σ²_ε, σ²_η, a_1, P_1)`.
pub fn dense_local_level(
    d: &[f64],
    x: &[Option<f64>],
    (sigma2_eps, sigma2_eta, a1, p1): (f64, f64, f64, f64),
) -> DenseLocalLevel {
    let m = d.len();
    // Coordinates 0..m are levels, m..2m are observations.
    let mut cov = DMatrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        for j in 0..m {
            let c = p1 + sigma2_eta * (d[i.min(j)] - d[0]);
            cov[(i, j)] = c;
            cov[(i, m + j)] = c;
            cov[(m + i, j)] = c;
            cov[(m + i, m + j)] = c + if i == j { sigma2_eps } else { 0.0 };
        }
    }
    let mu = DVector::from_element(2 * m, a1);
    let observed: Vec<usize> = (0..m).filter(|&i| x[i].is_some()).collect();

    let mut predicted_mean = Vec::with_capacity(m);
    let mut predicted_var = Vec::with_capacity(m);
    for i in 0..m {
        let before: Vec<usize> = observed.iter().copied().filter(|&j| j < i).collect();
        let given: Vec<usize> = before.iter().map(|&j| m + j).collect();
        let at: Vec<f64> = before.iter().map(|&j| x[j].unwrap()).collect();
        let (mean, c) = condition(&mu, &cov, &given, &at);
        predicted_mean.push(mean[i]);
        predicted_var.push(c[(i, i)]);
    }

    let given: Vec<usize> = observed.iter().map(|&j| m + j).collect();
    let at: Vec<f64> = observed.iter().map(|&j| x[j].unwrap()).collect();
    let (mean, c) = condition(&mu, &cov, &given, &at);

    let g = given.len();
    let cxx = DMatrix::from_fn(g, g, |a, b| cov[(given[a], given[b])]);
    let log_likelihood = gaussian_log_density(
        &DVector::from_element(g, a1),
        &cxx,
        &DVector::from_vec(at.clone()),
    );

    DenseLocalLevel {
        predicted_mean,
        predicted_var,
        smoothed_mean: (0..m).map(|i| mean[i]).collect(),
        smoothed_var: (0..m).map(|i| c[(i, i)]).collect(),
        log_likelihood,
    }
}

/// `ρ(D - W) + (1 - ρ)I` assembled densely from a 0/1 adjacency matrix.
pub fn dense_leroux_q(adjacency: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let k = adjacency.nrows();
    DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            let degree: f64 = adjacency.row(i).iter().sum();
            rho * degree + 1.0 - rho
        } else {
            -rho * adjacency[(i, j)]
        }
    })
}

/// log |det A| via LU.
pub fn dense_log_abs_det(a: &DMatrix<f64>) -> f64 {
    let lu = a.clone().lu();
    let u = lu.u();
    u.diagonal().iter().map(|v| v.abs().ln()).sum()
}

pub fn quadratic_form(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let v = DVector::from_column_slice(x);
    v.dot(&(a * &v))
}

/// Exact full conditional of `φ_k` under the two-level model with `β`, `ν²`,
/// `τ²` and `ρ` fixed. Builds the joint Gaussian of `(φ, y)` with
/// `φ ~ N(0, τ² Q⁻¹)` and `y = Xβ + O + Zφ + e`, then conditions `φ_k` on
/// `φ_{-k}` and every `y`.
#[allow(clippy::too_many_arguments)]
pub fn dense_phi_conditional(
    k: usize,
    phi: &[f64],
    adjacency: &DMatrix<f64>,
    rho: f64,
    tau2: f64,
    nu2: f64,
    fixed_mean: &[f64],
    zcta_index: &[usize],
    y: &[f64],
) -> (f64, f64) {
    let kk = phi.len();
    let n = y.len();
    let q = dense_leroux_q(adjacency, rho);
    let cov_phi = q.try_inverse().expect("Q invertible") * tau2;
    let z = DMatrix::from_fn(n, kk, |r, c| if zcta_index[r] == c { 1.0 } else { 0.0 });
    let dim = kk + n;
    let mut cov = DMatrix::zeros(dim, dim);
    cov.view_mut((0, 0), (kk, kk)).copy_from(&cov_phi);
    let cpy = &cov_phi * z.transpose();
    cov.view_mut((0, kk), (kk, n)).copy_from(&cpy);
    cov.view_mut((kk, 0), (n, kk)).copy_from(&cpy.transpose());
    let cyy = &z * &cov_phi * z.transpose() + DMatrix::identity(n, n) * nu2;
    cov.view_mut((kk, kk), (n, n)).copy_from(&cyy);
    let mut mu = DVector::zeros(dim);
    for r in 0..n {
        mu[kk + r] = fixed_mean[r];
    }
    let given: Vec<usize> = (0..dim).filter(|&i| i != k).collect();
    let at: Vec<f64> = given
        .iter()
        .map(|&i| if i < kk { phi[i] } else { y[i - kk] })
        .collect();
    let (mean, c) = condition(&mu, &cov, &given, &at);
    (mean[k], c[(k, k)])
}

/// Conjugate posterior `N(V m, V)` for the regression coefficients.
pub fn dense_beta_posterior(
    x: &DMatrix<f64>,
    target: &[f64],
    nu2: f64,
    mu_beta: &[f64],
    sigma_beta: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let prior_prec = sigma_beta.clone().try_inverse().expect("SPD prior");
    let prec = x.transpose() * x / nu2 + &prior_prec;
    let v = prec.try_inverse().expect("SPD posterior");
    let m = x.transpose() * DVector::from_column_slice(target) / nu2
        + &prior_prec * DVector::from_column_slice(mu_beta);
    (&v * m, v)
}
