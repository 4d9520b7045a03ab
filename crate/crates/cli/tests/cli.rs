use std::path::Path;
use std::process::{Command, Output};

fn spatcar(dir: &Path, args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spatcar"));
    cmd.args(args).current_dir(dir).env_remove("ARTIFACT_SEED");
    if let Some(s) = env_seed {
        cmd.env("ARTIFACT_SEED", s);
    }
    cmd.output().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const CONFIG: &str = "seed = 3\noutput_dir = \"out\"\n[data]\nfacilities = \"data/facilities.csv\"\nzctas = \"data/zctas.csv\"\nadjacency = \"data/adjacency.csv\"\n";

#[test]
fn seed_precedence_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();

    assert!(
        spatcar(d, &["simulate", "--config", "run.toml", "--out", "a"], None)
            .status
            .success()
    );
    let m = manifest(&d.join("a/manifest_simulate.json"));
    assert_eq!(
        (m["seed"].as_u64(), m["seed_source"].as_str()),
        (Some(3), Some("config"))
    );

    assert!(spatcar(
        d,
        &["simulate", "--config", "run.toml", "--out", "b"],
        Some("17")
    )
    .status
    .success());
    let m = manifest(&d.join("b/manifest_simulate.json"));
    assert_eq!(
        (m["seed"].as_u64(), m["seed_source"].as_str()),
        (Some(17), Some("env"))
    );

    let args = [
        "simulate", "--config", "run.toml", "--out", "c", "--seed", "99",
    ];
    assert!(spatcar(d, &args, Some("17")).status.success());
    let m = manifest(&d.join("c/manifest_simulate.json"));
    assert_eq!(
        (m["seed"].as_u64(), m["seed_source"].as_str()),
        (Some(99), Some("flag"))
    );

    let bad = spatcar(
        d,
        &["simulate", "--config", "run.toml", "--out", "e"],
        Some("abc"),
    );
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(error_json(&bad)["error"]["kind"], "config");
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        assert!(spatcar(
            d,
            &["simulate", "--seed", "8", "--out", out, "--k", "20"],
            None
        )
        .status
        .success());
    }
    for f in ["facilities.csv", "zctas.csv", "adjacency.csv"] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn fit_needs_imputed_covariates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();
    assert!(
        spatcar(d, &["simulate", "--out", "data", "--seed", "1"], None)
            .status
            .success()
    );
    let out = spatcar(d, &["fit", "--config", "run.toml"], None);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "missing_input");

    // Raw data with missing cells placed where the completed files are expected.
    std::fs::create_dir_all(d.join("out")).unwrap();
    std::fs::copy(
        d.join("data/facilities.csv"),
        d.join("out/completed_facilities.csv"),
    )
    .unwrap();
    std::fs::copy(d.join("data/zctas.csv"), d.join("out/completed_zctas.csv")).unwrap();
    let out = spatcar(d, &["fit", "--config", "run.toml"], None);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert!(
        err["error"]["message"].as_str().unwrap().contains("impute"),
        "{err}"
    );
}

#[test]
fn config_problems_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("bad.toml"),
        "seed = 1\n[bench]\nn_reps = 0\nmethods = [\"forest\"]\n",
    )
    .unwrap();
    let out = spatcar(d, &["bench", "--config", "bad.toml"], None);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(
        err["error"]["details"].as_array().unwrap().len(),
        4,
        "{err}"
    );

    std::fs::write(d.join("typo.toml"), "sede = 1\n").unwrap();
    let out = spatcar(d, &["graph", "--config", "typo.toml"], None);
    assert_eq!(error_json(&out)["error"]["kind"], "config");

    let out = spatcar(d, &["fit", "--burnin", "x"], None);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
}

#[test]
fn zctas_without_facilities_are_not_graph_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();
    assert!(spatcar(
        d,
        &["simulate", "--out", "data", "--seed", "2", "--k", "12"],
        None
    )
    .status
    .success());
    let zctas = d.join("data/zctas.csv");
    let mut text = std::fs::read_to_string(&zctas).unwrap();
    text.push_str("Z999999,28.5,-82.0,1000,0.4\n");
    std::fs::write(&zctas, text).unwrap();

    for step in [
        &["impute", "--config", "run.toml"][..],
        &["graph", "--config", "run.toml"],
    ] {
        assert!(spatcar(d, step, None).status.success());
    }
    let args = [
        "fit", "--config", "run.toml", "--burnin", "200", "--keep", "200",
    ];
    let out = spatcar(d, &args, None);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(manifest(&d.join("out/manifest_graph.json"))["zctas"], 12);
    assert_eq!(manifest(&d.join("out/manifest_fit.json"))["zctas"], 12);
}
