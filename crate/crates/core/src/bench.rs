//! Masked cross-validation of imputers, scored by SMAPE.

use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::OrderedSeries;
use crate::ssm;

/// Positions held out of one cross-validation replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub seed: u64,
    pub test_fraction: f64,
    /// Ascending positions in the series.
    pub heldout_indices: Vec<usize>,
    pub heldout_values: Vec<f64>,
}

/// Masks `round(fraction * n_observed)` observed positions chosen uniformly
/// without replacement.
pub fn mask_random(
    series: &OrderedSeries,
    fraction: f64,
    seed: u64,
) -> Result<(OrderedSeries, MaskPlan)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Contract(format!(
            "test fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let observed = series.observed_positions();
    if observed.len() < 5 {
        return Err(Error::TooFewObservations {
            needed: 5,
            found: observed.len(),
        });
    }
    let count = (fraction * observed.len() as f64).round() as usize;
    if observed.len() - count < 3 {
        return Err(Error::Contract(format!(
            "masking {count} of {} observations leaves fewer than 3",
            observed.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut heldout_indices: Vec<usize> = index::sample(&mut rng, observed.len(), count)
        .into_iter()
        .map(|i| observed[i])
        .collect();
    heldout_indices.sort_unstable();
    let heldout_values = heldout_indices
        .iter()
        .map(|&i| series.values[i].expect("observed position"))
        .collect();
    Ok((
        series.with_masked(&heldout_indices),
        MaskPlan {
            seed,
            test_fraction: fraction,
            heldout_indices,
            heldout_values,
        },
    ))
}

/// Symmetric mean absolute percentage error on the 0–100 scale.
/// Pairs where both values are exactly zero contribute nothing.
pub fn smape(actual: &[f64], imputed: &[f64]) -> Result<f64> {
    if actual.len() != imputed.len() {
        return Err(Error::Contract(format!(
            "length mismatch: {} actual vs {} imputed",
            actual.len(),
            imputed.len()
        )));
    }
    if actual.is_empty() {
        return Err(Error::Contract("smape of an empty sample".into()));
    }
    let total: f64 = actual
        .iter()
        .zip(imputed)
        .map(|(&x, &xh)| {
            let denom = xh.abs() + x.abs();
            if denom == 0.0 {
                0.0
            } else {
                (xh - x).abs() / denom
            }
        })
        .sum();
    Ok(100.0 * total / actual.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    StateSpace,
    Mean,
    NearestDistance,
    LinearInterp,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::StateSpace,
        Method::Mean,
        Method::NearestDistance,
        Method::LinearInterp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::StateSpace => "state_space",
            Method::Mean => "mean",
            Method::NearestDistance => "nearest_distance",
            Method::LinearInterp => "linear_interp",
        }
    }

    pub fn parse(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Full imputed vector in series order; observed entries are returned as-is.
    pub fn impute(self, series: &OrderedSeries) -> Result<Vec<f64>> {
        match self {
            Method::StateSpace => ssm::impute_series(series).map(|imp| imp.values),
            other => impute_baseline(series, other),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Comparator imputers that use only the observed values and their distances.
pub fn impute_baseline(series: &OrderedSeries, method: Method) -> Result<Vec<f64>> {
    let observed = series.observed_positions();
    if observed.is_empty() {
        return Err(Error::NoObservations);
    }
    let value = |i: usize| series.values[i].expect("observed position");
    let d = &series.distances;
    let fill: Box<dyn Fn(usize) -> f64> = match method {
        Method::Mean => {
            let mean = observed.iter().map(|&i| value(i)).sum::<f64>() / observed.len() as f64;
            Box::new(move |_| mean)
        }
        Method::NearestDistance => Box::new(|i| {
            // Observed positions are sorted, so the first minimiser has the smaller distance.
            let mut best = observed[0];
            for &j in &observed[1..] {
                if (d[i] - d[j]).abs() < (d[i] - d[best]).abs() {
                    best = j;
                }
            }
            value(best)
        }),
        Method::LinearInterp => {
            if observed.len() < 2 {
                return Err(Error::TooFewObservations {
                    needed: 2,
                    found: observed.len(),
                });
            }
            Box::new(|i| {
                let after = observed.partition_point(|&j| j < i);
                match (
                    after.checked_sub(1).map(|k| observed[k]),
                    observed.get(after),
                ) {
                    (Some(lo), Some(&hi)) => {
                        let t = (d[i] - d[lo]) / (d[hi] - d[lo]);
                        value(lo) + t * (value(hi) - value(lo))
                    }
                    (Some(lo), None) => value(lo),
                    (None, Some(&hi)) => value(hi),
                    (None, None) => unreachable!("at least two observations"),
                }
            })
        }
        Method::StateSpace => {
            return Err(Error::Contract(
                "state_space is not a baseline method".into(),
            ))
        }
    };
    Ok((0..series.len())
        .map(|i| series.values[i].unwrap_or_else(|| fill(i)))
        .collect())
}

/// Train/test split given in percent, e.g. 80/20.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Split {
    pub train: u32,
    pub test: u32,
}

impl Split {
    pub const PROTOCOL: [Split; 3] = [
        Split {
            train: 60,
            test: 40,
        },
        Split {
            train: 70,
            test: 30,
        },
        Split {
            train: 80,
            test: 20,
        },
    ];

    pub fn test_fraction(self) -> f64 {
        self.test as f64 / (self.train + self.test) as f64
    }

    pub fn parse(label: &str) -> Option<Split> {
        let (a, b) = label.split_once('/')?;
        let split = Split {
            train: a.trim().parse().ok()?,
            test: b.trim().parse().ok()?,
        };
        (split.train > 0 && split.test > 0).then_some(split)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.train, self.test)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(master ^ splitmix64(stream))`: the seed of replicate `stream`.
pub fn hash64(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub method: Method,
    pub split: Split,
    pub n_reps: usize,
    /// Replicates that failed and were excluded from the summary.
    pub n_failed: usize,
    pub mean_smape: f64,
    pub sd_smape: f64,
    /// `(replicate index, score)` for every successful replicate, ascending.
    pub scores: Vec<(usize, f64)>,
}

impl BenchmarkReport {
    fn from_scores(method: Method, split: Split, n_reps: usize, scores: Vec<(usize, f64)>) -> Self {
        let (mean_smape, sd_smape) = mean_sd(scores.iter().map(|s| s.1));
        BenchmarkReport {
            method,
            split,
            n_reps,
            n_failed: n_reps - scores.len(),
            mean_smape,
            sd_smape,
            scores,
        }
    }

    pub fn mean_smape_fraction(&self) -> f64 {
        self.mean_smape / 100.0
    }
}

/// Mean and sample standard deviation; the SD of fewer than two values is 0.
pub fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// One replicate: mask with the replicate seed, impute with every method, score.
fn run_replicate(
    series: &OrderedSeries,
    methods: &[Method],
    split: Split,
    seed: u64,
) -> Vec<Result<f64>> {
    let plan = mask_random(series, split.test_fraction(), seed);
    methods
        .iter()
        .map(|&method| {
            let (masked, plan) = plan.as_ref().map_err(|e| Error::Contract(e.to_string()))?;
            let imputed = method.impute(masked)?;
            let at: Vec<f64> = plan.heldout_indices.iter().map(|&i| imputed[i]).collect();
            smape(&plan.heldout_values, &at)
        })
        .collect()
}

/// Paired cross-validation: every method sees the same held-out set within a
/// replicate. Replicate `r` of every split uses seed `hash64(master_seed, r)`.
/// Results do not depend on thread scheduling.
pub fn run_benchmark(
    series: &OrderedSeries,
    methods: &[Method],
    splits: &[Split],
    n_reps: usize,
    master_seed: u64,
) -> Result<Vec<BenchmarkReport>> {
    if n_reps == 0 {
        return Err(Error::Contract("n_reps must be >= 1".into()));
    }
    if methods.is_empty() || splits.is_empty() {
        return Err(Error::Contract(
            "at least one method and one split required".into(),
        ));
    }
    if let Some(bad) = splits
        .iter()
        .find(|s| !(s.test_fraction() > 0.0 && s.test_fraction() < 1.0))
    {
        return Err(Error::Contract(format!("invalid split {bad}")));
    }
    let mut reports = Vec::with_capacity(methods.len() * splits.len());
    for &split in splits {
        let per_rep: Vec<Vec<Result<f64>>> = (0..n_reps)
            .into_par_iter()
            .map(|r| run_replicate(series, methods, split, hash64(master_seed, r as u64)))
            .collect();
        for (m, &method) in methods.iter().enumerate() {
            let scores = per_rep
                .iter()
                .enumerate()
                .filter_map(|(r, row)| row[m].as_ref().ok().map(|&s| (r, s)))
                .collect();
            reports.push(BenchmarkReport::from_scores(method, split, n_reps, scores));
        }
    }
    Ok(reports)
}

pub const REPORT_HEADER: [&str; 6] = [
    "method",
    "split",
    "n_reps",
    "mean_smape",
    "sd_smape",
    "mean_smape_fraction",
];

pub fn write_reports(path: impl AsRef<Path>, reports: &[BenchmarkReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        w.write_record([
            r.method.name().to_string(),
            r.split.to_string(),
            r.n_reps.to_string(),
            r.mean_smape.to_string(),
            r.sd_smape.to_string(),
            r.mean_smape_fraction().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn write_replicates(
    path: impl AsRef<Path>,
    reports: &[BenchmarkReport],
    master_seed: u64,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["method", "split", "replicate", "seed", "smape"])?;
    for r in reports {
        let mut scores = r.scores.iter().peekable();
        for rep in 0..r.n_reps {
            let score = match scores.peek() {
                Some(&&(i, s)) if i == rep => {
                    scores.next();
                    s.to_string()
                }
                _ => "failed".to_string(),
            };
            w.write_record([
                r.method.name().to_string(),
                r.split.to_string(),
                rep.to_string(),
                hash64(master_seed, rep as u64).to_string(),
                score,
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}
