//! Run configuration: one TOML file shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use spatcar::bench::{Method, Split};
use spatcar::car::McmcConfig;
use spatcar::geo::GeoConfig;
use spatcar::simulate::SimulationConfig;

pub const SEED_ENV: &str = "ARTIFACT_SEED";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub geo: GeoConfig,
    pub bench: BenchConfig,
    pub model: ModelConfig,
    pub mcmc: McmcConfig,
    pub simulate: SimulationConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub facilities: Option<PathBuf>,
    pub zctas: Option<PathBuf>,
    /// Edge list with header `zcta_a,zcta_b`.
    pub adjacency: Option<PathBuf>,
    /// Facilities missing more than this fraction of covariates are dropped.
    pub missingness_threshold: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            facilities: None,
            zctas: None,
            adjacency: None,
            missingness_threshold: 0.8,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_reps: usize,
    pub splits: Vec<String>,
    pub methods: Vec<String>,
    /// Empty means every covariate plus the FPL score.
    pub variables: Vec<String>,
    pub write_replicates: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_reps: 1000,
            splits: Split::PROTOCOL.iter().map(Split::to_string).collect(),
            methods: Method::ALL.iter().map(|m| m.name().to_string()).collect(),
            variables: Vec::new(),
            write_replicates: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub standardize: bool,
    /// Diagonal of `Σ_β`; `μ_β = 0`.
    pub prior_beta_variance: f64,
    pub prior_a: f64,
    pub prior_b: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            standardize: false,
            prior_beta_variance: 1e5,
            prior_a: 1.0,
            prior_b: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Flag,
    Env,
    Config,
}

/// Flag beats `ARTIFACT_SEED`, which beats the config file.
pub fn resolve_seed(
    flag: Option<u64>,
    env: Option<&str>,
    config: Option<u64>,
) -> Result<(u64, SeedSource), String> {
    if let Some(s) = flag {
        return Ok((s, SeedSource::Flag));
    }
    if let Some(raw) = env {
        return raw
            .trim()
            .parse()
            .map(|s| (s, SeedSource::Env))
            .map_err(|_| format!("{SEED_ENV}=`{raw}` is not an unsigned 64-bit integer"));
    }
    config
        .map(|s| (s, SeedSource::Config))
        .ok_or_else(|| format!("no seed: pass --seed, set {SEED_ENV}, or set `seed` in the config"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p.as_mut() {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        rebase(&mut cfg.output_dir);
        rebase(&mut cfg.data.facilities);
        rebase(&mut cfg.data.zctas);
        rebase(&mut cfg.data.adjacency);
        Ok(cfg)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("spatcar_output"))
    }

    /// Every problem relevant to `command`, not just the first.
    pub fn problems(&self, command: &str) -> Vec<String> {
        let mut out = Vec::new();
        let needs = |name: &str, p: &Option<PathBuf>, out: &mut Vec<String>| {
            if p.is_none() {
                out.push(format!("data.{name} is required by `{command}`"));
            }
        };
        match command {
            "impute" | "bench" => {
                needs("facilities", &self.data.facilities, &mut out);
                needs("zctas", &self.data.zctas, &mut out);
            }
            "graph" | "fit" => {
                needs("zctas", &self.data.zctas, &mut out);
                needs("adjacency", &self.data.adjacency, &mut out);
            }
            _ => {}
        }
        let paths: Vec<&PathBuf> = [
            &self.data.facilities,
            &self.data.zctas,
            &self.data.adjacency,
            &self.output_dir,
        ]
        .into_iter()
        .flatten()
        .collect();
        for (i, a) in paths.iter().enumerate() {
            if paths[..i].contains(a) {
                out.push(format!("path `{}` is referenced twice", a.display()));
            }
        }
        if !(0.0..=1.0).contains(&self.data.missingness_threshold) {
            out.push(format!(
                "data.missingness_threshold must lie in [0, 1], got {}",
                self.data.missingness_threshold
            ));
        }
        if self.threads == Some(0) {
            out.push("threads must be >= 1".into());
        }
        if command == "bench" {
            if self.bench.n_reps == 0 {
                out.push("bench.n_reps must be >= 1".into());
            }
            for s in &self.bench.splits {
                if Split::parse(s).is_none() {
                    out.push(format!("bench.splits: `{s}` is not of the form TRAIN/TEST"));
                }
            }
            for m in &self.bench.methods {
                if Method::parse(m).is_none() {
                    out.push(format!("bench.methods: unknown method `{m}`"));
                }
            }
        }
        if command == "fit" {
            if let Err(e) = self.mcmc.validate() {
                out.push(format!("mcmc: {e}"));
            }
            let m = &self.model;
            if !(m.prior_beta_variance > 0.0 && m.prior_a > 0.0 && m.prior_b > 0.0) {
                out.push("model: prior_beta_variance, prior_a and prior_b must be > 0".into());
            }
        }
        out
    }
}
