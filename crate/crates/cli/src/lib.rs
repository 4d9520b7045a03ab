//! `spatcar` command-line pipeline.
//!
//! ```text
//! spatcar simulate --out data --seed 7
//! spatcar impute   --config run.toml
//! spatcar bench    --config run.toml
//! spatcar graph    --config run.toml
//! spatcar fit      --config run.toml
//! spatcar export-maps --config run.toml
//! ```
//!
//! Every command writes `manifest_<command>.json` next to its outputs.
//! Failures print one JSON error record on stderr and exit nonzero.

pub mod config;

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use spatcar::bench::{hash64, run_benchmark, write_replicates, BenchmarkReport, Method, Split};
use spatcar::car::{run_mcmc, write_chains, write_phi, write_summary, CarModelInput, Priors};
use spatcar::data::{
    join_zcta, load_facility_table, load_zcta_table, screen_missingness, write_facility_table,
    write_zcta_table, Dataset, ZctaRecord,
};
use spatcar::geo::LatLon;
use spatcar::graph::{augment_islands, build_graph, load_edge_list, ZctaGraph};
use spatcar::impute::{impute_dataset, variable_names, variable_series};
use spatcar::report::{export_zcta_aggregates, rse_observed, write_fitted};
use spatcar::simulate::{simulate_dataset, write_simulation};

use config::{resolve_seed, RunConfig, SeedSource, SEED_ENV};

pub const COMPLETED_FACILITIES: &str = "completed_facilities.csv";
pub const COMPLETED_ZCTAS: &str = "completed_zctas.csv";

#[derive(Debug, Parser)]
#[command(
    name = "spatcar",
    version,
    about = "Spatial state-space imputation and Leroux CAR fitting"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides ARTIFACT_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// State-space imputation of every covariate.
    Impute,
    /// Masked cross-validation of the imputers.
    Bench {
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Build and repair the ZCTA adjacency graph.
    Graph,
    /// MCMC fit of the two-level CAR model on the imputed data.
    Fit {
        #[arg(long)]
        burnin: Option<usize>,
        #[arg(long)]
        keep: Option<usize>,
    },
    /// Per-ZCTA averages for choropleth maps.
    ExportMaps,
    /// Synthetic dataset with known parameters.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Number of ZCTAs.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    min_facilities: Option<usize>,
    #[arg(long)]
    max_facilities: Option<usize>,
    /// Intercept, six facility covariates and the FPL score, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta: Option<Vec<f64>>,
    #[arg(long)]
    tau2: Option<f64>,
    #[arg(long)]
    nu2: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    covariate_missing_rate: Option<f64>,
    #[arg(long)]
    shr_missing_rate: Option<f64>,
    #[arg(long)]
    adjacency_km: Option<f64>,
}

/// Machine-readable failure.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub details: Vec<String>,
}

impl CliError {
    fn config(details: Vec<String>) -> Self {
        CliError {
            kind: "config",
            message: format!("{} configuration problem(s)", details.len()),
            details,
        }
    }

    pub fn to_json(&self) -> Value {
        json!({ "error": { "kind": self.kind, "message": self.message, "details": self.details } })
    }
}

impl From<spatcar::Error> for CliError {
    fn from(e: spatcar::Error) -> Self {
        use spatcar::Error as E;
        let kind = match &e {
            E::Parse { .. } | E::Csv(_) => "parse",
            E::Validation { .. } => "validation",
            E::Join(_) => "join",
            E::Io { .. } => "io",
            E::Graph(_) | E::IntrinsicBoundary => "graph",
            E::NonFiniteState { .. } | E::LinearAlgebra(_) => "numerical",
            E::DegenerateBaseline => "degenerate_baseline",
            _ => "model",
        };
        CliError {
            kind,
            message: e.to_string(),
            details: Vec::new(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError {
        kind: "io",
        message: format!("{}: {e}", path.display()),
        details: Vec::new(),
    }
}

struct Context {
    cfg: RunConfig,
    seed: Option<(u64, SeedSource)>,
    out: PathBuf,
}

impl Context {
    fn seed(&self) -> u64 {
        self.seed.expect("checked before dispatch").0
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_manifest(&self, command: &str, body: Value) -> CliResult<()> {
        let mut m = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
        });
        if let Some((seed, source)) = self.seed {
            m["seed"] = json!(seed);
            m["seed_source"] = json!(source);
        }
        if let (Value::Object(m), Value::Object(b)) = (&mut m, body) {
            m.extend(b);
        }
        let path = self.path(&format!("manifest_{command}.json"));
        let text = serde_json::to_string_pretty(&m).expect("manifest serialises");
        std::fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = CliError {
                kind: "usage",
                message: e.kind().to_string(),
                details: vec![e.render().to_string()],
            };
            eprintln!("{}", err.to_json());
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::config(vec![e]))?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    let name = match &cli.command {
        Command::Impute => "impute",
        Command::Bench { .. } => "bench",
        Command::Graph => "graph",
        Command::Fit { .. } => "fit",
        Command::ExportMaps => "export_maps",
        Command::Simulate(_) => "simulate",
    };
    if let Command::Bench { reps: Some(r) } = cli.command {
        cfg.bench.n_reps = r;
    }
    if let Command::Fit { burnin, keep } = cli.command {
        cfg.mcmc.n_burnin = burnin.unwrap_or(cfg.mcmc.n_burnin);
        cfg.mcmc.n_keep = keep.unwrap_or(cfg.mcmc.n_keep);
    }
    if let Command::Simulate(args) = &cli.command {
        apply_simulate_args(&mut cfg, args);
    }

    let mut problems = cfg.problems(name);
    let env = std::env::var(SEED_ENV).ok();
    let needs_seed = matches!(name, "bench" | "fit" | "simulate");
    let seed = match resolve_seed(cli.seed, env.as_deref(), cfg.seed) {
        Ok(s) => Some(s),
        Err(e) => {
            if needs_seed {
                problems.push(e);
            }
            None
        }
    };
    if name == "simulate" {
        if let Err(e) = cfg.simulate.validate() {
            problems.push(format!("simulate: {e}"));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::config(problems));
    }

    if let Some(n) = cli.threads.or(cfg.threads) {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let out = cfg.output_dir();
    std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
    let ctx = Context { cfg, seed, out };
    match cli.command {
        Command::Impute => impute(&ctx),
        Command::Bench { .. } => bench(&ctx),
        Command::Graph => graph(&ctx).map(|_| ()),
        Command::Fit { .. } => fit(&ctx),
        Command::ExportMaps => export_maps(&ctx),
        Command::Simulate(_) => simulate(&ctx),
    }
}

fn apply_simulate_args(cfg: &mut RunConfig, a: &SimulateArgs) {
    let s = &mut cfg.simulate;
    s.n_zctas = a.k.unwrap_or(s.n_zctas);
    s.min_facilities = a.min_facilities.unwrap_or(s.min_facilities);
    s.max_facilities = a.max_facilities.unwrap_or(s.max_facilities);
    if let Some(b) = &a.beta {
        s.beta = b.clone();
    }
    s.tau2 = a.tau2.unwrap_or(s.tau2);
    s.nu2 = a.nu2.unwrap_or(s.nu2);
    s.rho = a.rho.unwrap_or(s.rho);
    s.covariate_missing_rate = a.covariate_missing_rate.unwrap_or(s.covariate_missing_rate);
    s.shr_missing_rate = a.shr_missing_rate.unwrap_or(s.shr_missing_rate);
    s.adjacency_km = a.adjacency_km.unwrap_or(s.adjacency_km);
}

fn load_raw(ctx: &Context) -> CliResult<(Dataset, usize)> {
    let d = &ctx.cfg.data;
    let ds = Dataset::load(d.facilities.as_ref().unwrap(), d.zctas.as_ref().unwrap())?;
    let screened = screen_missingness(&ds, d.missingness_threshold)?;
    // Resolves every facility's ZCTA up front.
    join_zcta(&screened.dataset)?;
    Ok((screened.dataset, screened.removed))
}

fn impute(ctx: &Context) -> CliResult<()> {
    let (ds, removed) = load_raw(ctx)?;
    let missing_before =
        ds.missing_covariate_cells() + ds.zctas.iter().filter(|z| z.fpl_score.is_none()).count();
    let imputed = impute_dataset(&ds, &ctx.cfg.geo)?;
    write_facility_table(ctx.path(COMPLETED_FACILITIES), &imputed.dataset.facilities)?;
    write_zcta_table(ctx.path(COMPLETED_ZCTAS), &imputed.dataset.zctas)?;

    let diag = ctx.path("imputation_diagnostics.csv");
    let mut w = csv::Writer::from_path(&diag).map_err(|e| io_error(&diag, e))?;
    let header = [
        "variable",
        "n_sites",
        "n_observed",
        "n_imputed",
        "sigma2_eps",
        "sigma2_eta",
        "log_likelihood",
        "warning",
    ];
    w.write_record(header).map_err(|e| io_error(&diag, e))?;
    for r in &imputed.reports {
        let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        w.write_record([
            r.variable.clone(),
            r.n_sites.to_string(),
            r.n_observed.to_string(),
            r.n_imputed.to_string(),
            na(r.params.map(|p| p.sigma2_eps)),
            na(r.params.map(|p| p.sigma2_eta)),
            na(r.log_likelihood),
            r.warning.clone().unwrap_or_default(),
        ])
        .map_err(|e| io_error(&diag, e))?;
    }
    w.flush().map_err(|e| io_error(&diag, e))?;

    let after = imputed.dataset.missing_covariate_cells();
    ctx.write_manifest(
        "impute",
        json!({
            "facilities_removed_by_screen": removed,
            "facilities": imputed.dataset.facilities.len(),
            "missing_cells_before": missing_before,
            "missing_cells_after": after,
        }),
    )
}

fn bench(ctx: &Context) -> CliResult<()> {
    let (ds, _) = load_raw(ctx)?;
    let b = &ctx.cfg.bench;
    let splits: Vec<Split> = b
        .splits
        .iter()
        .map(|s| Split::parse(s).expect("validated"))
        .collect();
    let methods: Vec<Method> = b
        .methods
        .iter()
        .map(|m| Method::parse(m).expect("validated"))
        .collect();
    let all = variable_names(&ds);
    let chosen: Vec<String> = if b.variables.is_empty() {
        all.clone()
    } else {
        b.variables.clone()
    };
    let mut results: Vec<(String, Vec<BenchmarkReport>)> = Vec::new();
    for name in &chosen {
        let j = all
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| CliError::from(spatcar::Error::UnknownVariable(name.clone())))?;
        let series = variable_series(&ds, name, &ctx.cfg.geo)?;
        let seed = hash64(ctx.seed(), j as u64);
        let reports = run_benchmark(&series, &methods, &splits, b.n_reps, seed)?;
        if b.write_replicates {
            write_replicates(
                ctx.path(&format!("benchmark_replicates_{name}.csv")),
                &reports,
                seed,
            )?;
        }
        results.push((name.clone(), reports));
    }

    let path = ctx.path("benchmark.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e))?;
    w.write_record([
        "variable",
        "method",
        "split",
        "n_reps",
        "n_failed",
        "mean_smape",
        "sd_smape",
        "mean_smape_fraction",
    ])
    .map_err(|e| io_error(&path, e))?;
    for (name, reports) in &results {
        for r in reports {
            w.write_record([
                name.clone(),
                r.method.name().to_string(),
                r.split.to_string(),
                r.n_reps.to_string(),
                r.n_failed.to_string(),
                r.mean_smape.to_string(),
                r.sd_smape.to_string(),
                r.mean_smape_fraction().to_string(),
            ])
            .map_err(|e| io_error(&path, e))?;
        }
    }
    w.flush().map_err(|e| io_error(&path, e))?;

    let failed: usize = results
        .iter()
        .flat_map(|(_, r)| r)
        .map(|r| r.n_failed)
        .sum();
    ctx.write_manifest(
        "bench",
        json!({
            "n_reps": b.n_reps,
            "splits": b.splits,
            "methods": b.methods,
            "variables": chosen,
            "replicates_executed": b.n_reps * splits.len() * chosen.len(),
            "failed_scores": failed,
        }),
    )
}

fn zcta_graph(ctx: &Context, zctas: &[ZctaRecord]) -> CliResult<ZctaGraph> {
    let edges = load_edge_list(ctx.cfg.data.adjacency.as_ref().unwrap())?;
    let ids: Vec<String> = zctas.iter().map(|z| z.zcta_id.clone()).collect();
    let centroids: Vec<LatLon> = zctas
        .iter()
        .map(|z| LatLon::new(z.centroid_latitude, z.centroid_longitude))
        .collect();
    let raw = build_graph(&edges, &ids, &ids)?;
    Ok(augment_islands(&raw, &centroids)?)
}

fn graph(ctx: &Context) -> CliResult<ZctaGraph> {
    let data = &ctx.cfg.data;
    let zctas = load_zcta_table(data.zctas.as_ref().unwrap())?;
    // Without a facility table every listed ZCTA becomes a node.
    let zctas = match &data.facilities {
        Some(f) => {
            Dataset::new(load_facility_table(f)?, zctas)
                .served_zctas_only()
                .zctas
        }
        None => zctas,
    };
    let g = zcta_graph(ctx, &zctas)?;
    g.check_invariants()?;
    g.write_diagnostics(
        ctx.path("graph_degrees.csv"),
        ctx.path("graph_eigenvalues.csv"),
    )?;
    let path = ctx.path("augmented_edges.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e))?;
    w.write_record(["isolated_zcta", "nearest_zcta"])
        .map_err(|e| io_error(&path, e))?;
    for &(a, b) in &g.augmented_edges {
        w.write_record([&g.zcta_ids[a], &g.zcta_ids[b]])
            .map_err(|e| io_error(&path, e))?;
    }
    w.flush().map_err(|e| io_error(&path, e))?;
    ctx.write_manifest(
        "graph",
        json!({
            "zctas": g.len(),
            "edges": g.n_edges(),
            "augmented_edges": g.augmented_edges.len(),
        }),
    )?;
    Ok(g)
}

fn load_completed(ctx: &Context) -> CliResult<Dataset> {
    let f = ctx.path(COMPLETED_FACILITIES);
    let z = ctx.path(COMPLETED_ZCTAS);
    for p in [&f, &z] {
        if !p.exists() {
            return Err(CliError {
                kind: "missing_input",
                message: format!("{} not found; run `impute` first", p.display()),
                details: Vec::new(),
            });
        }
    }
    Ok(Dataset::load(f, z)?)
}

fn fit(ctx: &Context) -> CliResult<()> {
    let ds = load_completed(ctx)?.served_zctas_only();
    let table = join_zcta(&ds)?;
    let g = zcta_graph(ctx, &ds.zctas)?;
    let input = CarModelInput::from_design(&table, g, ctx.cfg.model.standardize)?;
    let m = &ctx.cfg.model;
    let mut priors = Priors::weakly_informative(input.n_coef());
    priors.sigma_beta *= m.prior_beta_variance / 1e5;
    priors.a = m.prior_a;
    priors.b = m.prior_b;
    let mut mcmc = ctx.cfg.mcmc.clone();
    mcmc.seed = ctx.seed();
    let run = run_mcmc(&input, &priors, &mcmc)?;

    write_chains(ctx.path("chains.csv"), &run)?;
    write_summary(ctx.path("summary.csv"), &run.summary, |r| {
        format!("y[{}]", table.rows[r].facility_id)
    })?;
    write_fitted(&table, &run.summary.fitted, ctx.path("fitted.csv"))?;
    write_phi(ctx.path("phi.csv"), &input.graph, &run.summary)?;
    let rse = rse_observed(&input.y, &run.summary.fitted, &input.zcta_index)?;
    let path = ctx.path("rse.txt");
    std::fs::write(&path, format!("{rse}\n")).map_err(|e| io_error(&path, e))?;

    let chains: Vec<Value> = run
        .chains
        .iter()
        .map(|c| {
            json!({
                "chain": c.chain,
                "seed": c.seed,
                "iterations_burnin": c.iterations_burnin,
                "iterations_kept": c.iterations_kept,
                "draws_stored": c.draws.len(),
                "rho_step": c.rho_step,
                "rho_acceptance": c.rho_acceptance,
            })
        })
        .collect();
    ctx.write_manifest(
        "fit",
        json!({
            "n_burnin": mcmc.n_burnin,
            "n_keep": mcmc.n_keep,
            "thin": mcmc.thin,
            "rows": input.n_rows(),
            "missing_responses": input.missing_rows().len(),
            "zctas": input.graph.len(),
            "rse": rse,
            "chains": chains,
        }),
    )
}

fn export_maps(ctx: &Context) -> CliResult<()> {
    let ds = load_completed(ctx)?.served_zctas_only();
    let table = join_zcta(&ds)?;
    let path = ctx.path("fitted.csv");
    let mut fitted_by_id: HashMap<String, f64> = HashMap::new();
    let mut r = csv::Reader::from_path(&path)
        .map_err(|e| io_error(&path, format!("{e}; run `fit` first")))?;
    for rec in r.records() {
        let rec = rec.map_err(|e| io_error(&path, e))?;
        let v: f64 = rec[3].parse().map_err(|e| io_error(&path, e))?;
        fitted_by_id.insert(rec[0].to_string(), v);
    }
    let fitted = table
        .rows
        .iter()
        .map(|row| {
            fitted_by_id
                .get(&row.facility_id)
                .copied()
                .ok_or_else(|| CliError {
                    kind: "join",
                    message: format!("no fitted value for facility {}", row.facility_id),
                    details: Vec::new(),
                })
        })
        .collect::<CliResult<Vec<f64>>>()?;
    export_zcta_aggregates(&table, &fitted, ctx.path("zcta_aggregates.csv"))?;
    ctx.write_manifest("export_maps", json!({ "zctas": table.zctas.len() }))
}

fn simulate(ctx: &Context) -> CliResult<()> {
    let mut cfg = ctx.cfg.simulate.clone();
    cfg.seed = ctx.seed();
    let sim = simulate_dataset(&cfg)?;
    write_simulation(&ctx.out, &cfg, &sim)?;
    ctx.write_manifest(
        "simulate",
        json!({
            "zctas": sim.dataset.zctas.len(),
            "facilities": sim.dataset.facilities.len(),
            "edges": sim.edges.len(),
            "missing_covariate_cells": sim.dataset.missing_covariate_cells(),
            "missing_responses": sim.dataset.facilities.iter().filter(|f| f.shr.is_none()).count(),
        }),
    )
}
