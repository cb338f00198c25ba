use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use treerate::crossover::SolverConfig;
use treerate::dist::{Alphabet, DenseJoint};
use treerate::exponent::{error_exponent, evaluation_budget, Mode};
use treerate::simulate::{star4, table1_distribution};
use treerate::trees::{Edge, EdgeSet};
use treerate_cli::files::{Model, ModelFile};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_treerate"));
    c.env_remove(treerate_cli::SEED_ENV);
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
        .display()
        .to_string()
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p: PathBuf = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn write_samples(dir: &TempDir, name: &str, rows: impl Iterator<Item = Vec<usize>>) -> String {
    let text: String = rows
        .map(|r| r.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    write(dir, name, &text)
}

fn edge(v: &Value) -> Edge {
    Edge::new(v[0].as_u64().unwrap() as usize, v[1].as_u64().unwrap() as usize)
}

fn csv_column(text: &str, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

#[test]
fn learn_two_node_dataset_gives_single_edge() {
    let dir = TempDir::new().unwrap();
    let path = write(&dir, "s.txt", "0 0\n1 1\n0,0\n1 0\n");
    let o = run(&["learn", &path]);
    assert!(o.status.success());
    let model = ModelFile::parse(&stdout(&o)).unwrap();
    let tree = model.tree.as_ref().unwrap();
    assert_eq!(tree.edges, vec![[0, 1]]);
    assert!(matches!(model.validate().unwrap(), Model::Tree(_)));
}

#[test]
fn learn_recovers_star_from_samples() {
    let dir = TempDir::new().unwrap();
    let samples = star4(0.2).unwrap().sample(10_000, 41);
    let path = write_samples(&dir, "s.txt", samples.rows().map(|r| r.to_vec()));
    let out = dir.path().join("m.json");
    let o = run(&["learn", &path, "--out", out.to_str().unwrap(), "--format", "json"]);
    let report = json(&o);
    let structure: Vec<Edge> = report["structure"]["edges"]
        .as_array()
        .unwrap()
        .iter()
        .map(edge)
        .collect();
    assert_eq!(structure, EdgeSet::star(4, 0).edges());
    match ModelFile::read(&out).unwrap().validate().unwrap() {
        Model::Tree(t) => assert_eq!(t.structure(), &EdgeSet::star(4, 0)),
        Model::Dense(_) => panic!("learn writes tree models"),
    }
}

#[test]
fn malformed_row_exits_with_parse_code_and_line() {
    let dir = TempDir::new().unwrap();
    let path = write(&dir, "s.txt", "0 1\n1 1\n\n1 q\n");
    let o = run(&["learn", &path]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"));
}

#[test]
fn bad_model_files_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let broken = write(&dir, "a.json", "{\"version\": 1, \"d\": ");
    assert_eq!(run(&["exponent", &broken]).status.code(), Some(2));
    let unnormalized = write(
        &dir,
        "b.json",
        r#"{"version": 1, "d": 1, "alphabet": 2, "dense": [0.5, 0.6]}"#,
    );
    assert_eq!(run(&["project", &unnormalized]).status.code(), Some(3));
    assert_eq!(
        run(&["exponent", &data("star4-0.2.json"), "--mode", "fast"])
            .status
            .code(),
        Some(4)
    );
}

#[test]
fn shipped_models_match_library_constructors() {
    match ModelFile::read(Path::new(&data("star4-0.2.json")))
        .unwrap()
        .validate()
        .unwrap()
    {
        Model::Tree(t) => {
            let want = star4(0.2).unwrap().to_dense().unwrap();
            assert!(t.to_dense().unwrap().linf_distance(&want).unwrap() < 1e-15);
        }
        Model::Dense(_) => panic!("expected a tree"),
    }
    match ModelFile::read(Path::new(&data("table1.json")))
        .unwrap()
        .validate()
        .unwrap()
    {
        Model::Dense(d) => assert!(d.linf_distance(&table1_distribution(0.1, 0.01).unwrap()).unwrap() < 1e-15),
        Model::Tree(_) => panic!("expected dense"),
    }
}

#[test]
fn star_approx_exponent_has_six_rows_with_min_marked() {
    let o = run(&[
        "exponent",
        &data("star4-0.2.json"),
        "--mode",
        "approx",
        "--format",
        "json",
    ]);
    let v = json(&o);
    let report = &v["report"];
    let rates = report["pair_rates"].as_array().unwrap();
    assert_eq!(rates.len(), 6);
    let model = star4(0.2).unwrap();
    let lib = error_exponent(&model, Mode::Approx, &SolverConfig::default()).unwrap();
    assert_eq!(v["k_p"].as_f64().unwrap(), lib.k_p);
    let min = rates
        .iter()
        .map(|r| r["rate"].as_f64().unwrap())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(min, lib.k_p);
    assert_eq!(
        v["evaluation_budget"].as_u64().unwrap() as usize,
        evaluation_budget(model.structure()).unwrap()
    );
    assert_eq!(report["evaluations"], v["evaluation_budget"]);

    let human = stdout(&run(&["exponent", &data("star4-0.2.json"), "--mode", "approx"]));
    assert_eq!(
        human.lines().filter(|l| l.ends_with("min")).count(),
        lib.co_minimal.len()
    );
    assert!(human.contains("evaluations 6 (budget 6, bound 6)"));
}

#[test]
fn independent_component_reports_zero_with_witness() {
    let v = json(&run(&["exponent", &data("independent.json"), "--format", "json"]));
    assert_eq!(v["k_p"].as_f64(), Some(0.0));
    assert_eq!(v["positive"].as_bool(), Some(false));
    assert!(v["witness"]["gap"].as_f64().unwrap().abs() < 1e-10);
    let human = stdout(&run(&["exponent", &data("independent.json")]));
    assert!(human.contains("witness"));
}

#[test]
fn approx_rate_of_equal_information_pair_is_zero() {
    let dir = TempDir::new().unwrap();
    // x0,x1 and x2,x3 are independent copies of one pair
    let pair = [0.4, 0.1, 0.15, 0.35];
    let probs: Vec<f64> = (0..16).map(|i| pair[i / 4] * pair[i % 4]).collect();
    let dense = DenseJoint::new(4, Alphabet::binary(), probs).unwrap();
    let path = write(&dir, "m.json", &ModelFile::from_dense(&dense).to_json());
    let v = json(&run(&[
        "crossover",
        &path,
        "--edge",
        "0,1",
        "--nonedge",
        "2,3",
        "--mode",
        "approx",
        "--format",
        "json",
    ]));
    assert_eq!(v["rate"].as_f64(), Some(0.0));
}

#[test]
fn empirical_mode_needs_samples() {
    let o = run(&[
        "crossover",
        &data("star4-0.2.json"),
        "--edge",
        "0,1",
        "--nonedge",
        "1,2",
        "--mode",
        "empirical",
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn empirical_crossover_tracks_model_rate() {
    let dir = TempDir::new().unwrap();
    let samples = star4(0.2).unwrap().sample(100_000, 5);
    let path = write_samples(&dir, "s.txt", samples.rows().map(|r| r.to_vec()));
    let args = [
        "crossover",
        &data("star4-0.2.json"),
        "--edge",
        "0,1",
        "--nonedge",
        "1,2",
    ];
    let v = json(&run(&[
        &args[..],
        &["--mode", "empirical", "--samples", &path, "--format", "json"],
    ]
    .concat()));
    let (rate, truth) = (v["rate"].as_f64().unwrap(), v["model_rate"].as_f64().unwrap());
    assert_eq!(v["samples"].as_u64(), Some(100_000));
    assert!((rate - truth).abs() / truth < 0.25, "{rate} vs {truth}");
}

#[test]
fn simulate_is_reproducible_and_worker_independent() {
    let args = [
        "simulate",
        &data("star4-0.2.json"),
        "--n",
        "60,120",
        "--runs",
        "3000",
        "--seed",
        "9",
    ];
    let a = run(&[&args[..], &["--workers", "1"]].concat());
    let b = run(&[&args[..], &["--workers", "4"]].concat());
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    // the seed can come from the environment
    let c = bin()
        .args(["simulate", &data("star4-0.2.json"), "--n", "60,120", "--runs", "3000"])
        .env(treerate_cli::SEED_ENV, "9")
        .output()
        .unwrap();
    assert_eq!(stdout(&a), stdout(&c));
}

#[test]
fn simulate_rows_carry_bound_and_zero_error_flag() {
    let o = run(&[
        "simulate",
        &data("star4-0.2.json"),
        "--n",
        "50,3000",
        "--runs",
        "2000",
        "--seed",
        "1",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(csv_column(&text, "within_bound"), vec!["true", "true"]);
    assert_eq!(csv_column(&text, "insufficient_runs"), vec!["false", "true"]);
    assert_eq!(csv_column(&text, "simulated_rate")[1], "inf");
}

#[test]
fn project_lists_optimal_structures() {
    let tree = json(&run(&["project", &data("star4-0.2.json"), "--format", "json"]));
    assert_eq!(tree["singleton"].as_bool(), Some(true));
    assert!(tree["exponent"].is_null());

    let t1 = json(&run(&[
        "project",
        &data("table1.json"),
        "--exponent",
        "--mode",
        "approx",
        "--format",
        "json",
    ]));
    let structures = t1["structures"].as_array().unwrap();
    assert_eq!(structures.len(), 2);
    for s in structures {
        assert!(s["edges"]
            .as_array()
            .unwrap()
            .iter()
            .any(|e| edge(e) == Edge::new(0, 1)));
    }
    assert!(t1["exponent"]["k_p"].as_f64().unwrap() > 0.0);
    assert_eq!(t1["exponent"]["excluded"].as_array().unwrap().len(), 2);
}

#[test]
fn star_rate_sweep_is_monotone() {
    let o = run(&["experiment", "star4-rates", "--gamma-list", "0.01,0.05,0.1,0.2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for col in ["exact", "approx"] {
        let v: Vec<f64> = csv_column(&text, col).iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(v.len(), 4);
        assert!(v.windows(2).all(|w| w[0] < w[1]), "{col}: {v:?}");
    }
}

#[test]
fn full_empirical_run_adds_long_row() {
    let base = [
        "experiment",
        "star4-empirical",
        "--gamma-list",
        "0.01",
        "--n-list",
        "2000",
    ];
    let short = stdout(&run(&base));
    assert_eq!(csv_column(&short, "n"), vec!["2000"]);
    let full = stdout(&run(&[&base[..], &["--full"]].concat()));
    assert_eq!(csv_column(&full, "n"), vec!["2000", "8000000"]);
}
