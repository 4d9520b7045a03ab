//! With ρ held at 0 the CAR model is a random-intercept regression. Compare the
//! spatial sampler with a plain block Gibbs sampler for that model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use spatcar::car::{run_mcmc, CarModelInput, McmcConfig, Priors};
use spatcar::graph::ZctaGraph;

const K: usize = 30;
const A: f64 = 3.0;
const B: f64 = 0.2;

struct Fixture {
    y: Vec<f64>,
    x: DMatrix<f64>,
    zcta: Vec<usize>,
}

fn fixture() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let zcta: Vec<usize> = (0..K)
        .flat_map(|k| std::iter::repeat_n(k, 1 + k % 3))
        .collect();
    let n = zcta.len();
    let x = DMatrix::from_fn(n, 2, |_, c| {
        if c == 0 {
            1.0
        } else {
            rng.random_range(-2.0..2.0)
        }
    });
    let phi: Vec<f64> = (0..K)
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let y = (0..n)
        .map(|i| 0.3 + 0.8 * x[(i, 1)] + phi[zcta[i]] + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Fixture { y, x, zcta }
}

fn inv_gamma(shape: f64, scale: f64, rng: &mut ChaCha8Rng) -> f64 {
    scale / Gamma::new(shape, 1.0).unwrap().sample(rng)
}

/// Block Gibbs on (β, φ) jointly, then τ² and ν². Returns draws of (β0, β1, τ², ν²).
fn reference_chain(f: &Fixture, n_burnin: usize, n_keep: usize, seed: u64) -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = f.y.len();
    let p = f.x.ncols();
    let design = DMatrix::from_fn(n, p + K, |i, j| {
        if j < p {
            f.x[(i, j)]
        } else if f.zcta[i] == j - p {
            1.0
        } else {
            0.0
        }
    });
    let y = DVector::from_column_slice(&f.y);
    let (mut tau2, mut nu2) = (0.1, 0.1);
    let mut out = Vec::with_capacity(n_keep);
    for it in 0..n_burnin + n_keep {
        let mut prec = design.transpose() * &design / nu2;
        for j in 0..p + K {
            prec[(j, j)] += if j < p { 1.0 } else { 1.0 / tau2 };
        }
        let rhs = design.transpose() * &y / nu2;
        let chol = prec.cholesky().unwrap();
        let mean = chol.solve(&rhs);
        let z = DVector::from_fn(p + K, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta = mean + chol.l().transpose().solve_upper_triangular(&z).unwrap();
        let phi_ss: f64 = (p..p + K).map(|j| theta[j].powi(2)).sum();
        tau2 = inv_gamma(A + K as f64 / 2.0, B + phi_ss / 2.0, &mut rng);
        let resid = &y - &design * &theta;
        nu2 = inv_gamma(A + n as f64 / 2.0, B + resid.norm_squared() / 2.0, &mut rng);
        if it >= n_burnin {
            out.push([theta[0], theta[1], tau2, nu2]);
        }
    }
    out
}

/// Mean and batch-means standard error.
fn mean_se(v: &[f64]) -> (f64, f64) {
    let batches = 50;
    let size = v.len() / batches;
    let means: Vec<f64> = v
        .chunks_exact(size)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (m, (var / batches as f64).sqrt())
}

#[test]
fn rho_zero_matches_random_intercept_gibbs() {
    let f = fixture();
    let n = f.y.len();
    let neighbors = (0..K)
        .map(|k| {
            let mut v = Vec::new();
            if k > 0 {
                v.push(k - 1);
            }
            if k + 1 < K {
                v.push(k + 1);
            }
            v
        })
        .collect();
    let graph = ZctaGraph::from_neighbors(
        (0..K).map(|k| format!("z{k}")).collect(),
        neighbors,
        Vec::new(),
    );
    let input = CarModelInput::new(
        f.y.iter().copied().map(Some).collect(),
        f.x.clone(),
        vec!["intercept".into(), "x".into()],
        vec![0.0; n],
        f.zcta.clone(),
        graph,
    )
    .unwrap();
    let priors = Priors {
        mu_beta: DVector::zeros(2),
        sigma_beta: DMatrix::identity(2, 2),
        a: A,
        b: B,
    };
    let cfg = McmcConfig {
        n_burnin: 2000,
        n_keep: 40_000,
        fixed_rho: Some(0.0),
        seed: 5,
        ..McmcConfig::default()
    };
    let run = run_mcmc(&input, &priors, &cfg).unwrap();
    let reference = reference_chain(&f, 2000, 40_000, 6);

    for (j, col) in [(0, 0), (1, 1), (2, 2), (3, 3)] {
        let (m1, se1) = mean_se(&run.column(col));
        let (m2, se2) = mean_se(&reference.iter().map(|d| d[j]).collect::<Vec<_>>());
        let z = (m1 - m2).abs() / (se1 * se1 + se2 * se2).sqrt();
        assert!(
            z < 4.0,
            "{}: {m1} vs {m2} (z = {z:.2})",
            run.parameter_names[col]
        );
    }
    assert!(run.column(4).iter().all(|&r| r == 0.0));
}
