use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use monomed::oracle::{effect_truths, DgmSpec};
use monomed::sim::sample_dgm;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_monomed"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        sample_dgm(&DgmSpec::benchmark(), n, 42).unwrap().save_csv(dir.path().join("d.csv")).unwrap();
        let f = Self { dir };
        f.write_config("seed = 7\n");
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write_config(&self, extra: &str) -> PathBuf {
        let p = self.path("run.toml");
        let body = format!(
            "{extra}\n[data]\npath = {:?}\n[data.columns]\nw = [\"W1\", \"W2\", \"W3\"]\na = \"A\"\nz = \"Z\"\nm = [\"M\"]\ny = \"Y\"\n",
            s(&self.path("d.csv"))
        );
        std::fs::write(&p, body).unwrap();
        p
    }
}

fn schema_errors(schema: &str, doc: &Value) -> Vec<String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(schema);
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    let errors = match compiled.validate(doc) {
        Ok(()) => Vec::new(),
        Err(errs) => errs.map(|e| e.to_string()).collect(),
    };
    errors
}

#[test]
fn estimate_writes_valid_json_near_truth() {
    let f = Fixture::new(10_000);
    let out = f.path("e.json");
    let o = run(&["estimate", "--config", s(&f.path("run.toml")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = String::from_utf8(o.stdout).unwrap();
    assert!(summary.contains("NDE") && summary.contains("95% CI"));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(schema_errors("estimate.schema.json", &doc), Vec::<String>::new());
    let truth = effect_truths(&DgmSpec::benchmark()).unwrap();
    let nde = doc["nde"]["est"].as_f64().unwrap();
    let se = doc["nde"]["se"].as_f64().unwrap();
    assert!((nde - truth.nde).abs() < 3.0 * se, "{nde} vs {}", truth.nde);
    let ate = doc["ate"]["est"].as_f64().unwrap();
    let nie = doc["nie"]["est"].as_f64().unwrap();
    assert_eq!(ate, nde + nie);
}

#[test]
fn estimate_is_byte_identical_across_runs() {
    let f = Fixture::new(2_000);
    let cfg = f.path("run.toml");
    let (a, b) = (f.path("a.json"), f.path("b.json"));
    assert!(run(&["estimate", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(run(&["estimate", "--config", s(&cfg), "--out", s(&b)]).status.success());
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn flags_override_config() {
    let f = Fixture::new(1_000);
    let cfg = f.write_config("seed = 7\n[estimate]\nfolds = 4\ntruncation = 0.02\n");
    let o = run(&["estimate", "--config", s(&cfg), "--folds", "3", "--seed", "11", "--randomized-a", "0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["config"]["folds"], 3);
    assert_eq!(doc["config"]["truncation"], 0.02);
    assert_eq!(doc["config"]["seed"], 11);
    assert_eq!(doc["config"]["randomized_a"], 0.5);
}

#[test]
fn csv_format_lists_effects() {
    let f = Fixture::new(1_000);
    let o = run(&["estimate", "--config", s(&f.path("run.toml")), "--format", "csv"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("quantity,est,se,ci_low,ci_high\n"));
    assert!(text.contains("\nnde,") && text.contains("\nnie,") && text.contains("\nate,"));
}

#[test]
fn missing_outcome_column_exits_3() {
    let f = Fixture::new(100);
    let csv = std::fs::read_to_string(f.path("d.csv")).unwrap();
    let stripped: String = csv
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    std::fs::write(f.path("d.csv"), stripped).unwrap();
    let o = run(&["estimate", "--config", s(&f.path("run.toml"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Y"));
}

#[test]
fn bad_config_exits_2() {
    let f = Fixture::new(100);
    let o = run(&["estimate", "--config", s(&f.path("run.toml")), "--truncate", "0.7"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(f.path("bad.toml"), "unknown_key = 1\n").unwrap();
    assert_eq!(run(&["estimate", "--config", s(&f.path("bad.toml"))]).status.code(), Some(2));
    assert_eq!(run(&["estimate"]).status.code(), Some(2));
}

#[test]
fn nonbinary_treatment_exits_3() {
    let f = Fixture::new(100);
    let csv = std::fs::read_to_string(f.path("d.csv")).unwrap();
    let mut lines: Vec<String> = csv.lines().map(String::from).collect();
    let mut cells: Vec<&str> = lines[5].split(',').collect();
    cells[3] = "2";
    lines[5] = cells.join(",");
    std::fs::write(f.path("d.csv"), lines.join("\n") + "\n").unwrap();
    let o = run(&["estimate", "--config", s(&f.path("run.toml"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 5"));
}

#[test]
fn oracle_check_outputs() {
    let o = run(&["oracle-check"]);
    assert!(o.status.success());
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(schema_errors("oracle.schema.json", &doc), Vec::<String>::new());
    assert_eq!(doc["adjudication"]["chosen"], "inverse_g_a_prime");
    let o = run(&["oracle-check", "--format", "csv", "--eps", "0.2,0.1"]);
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "a,a_prime,z,z_prime,eps,lhs,rhs,abs_diff,ratio");
    let ratios: Vec<f64> = lines.filter_map(|l| l.rsplit(',').next().unwrap().parse().ok()).collect();
    assert_eq!(ratios.len(), 3);
    assert!(ratios.iter().all(|r| (3.0..5.0).contains(r)), "{ratios:?}");
    assert_eq!(run(&["oracle-check", "--dgm", "nope"]).status.code(), Some(2));
}

#[test]
fn simulate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("metrics.csv");
    let json = dir.path().join("metrics.json");
    let svg = dir.path().join("chart.svg");
    let args = ["simulate", "--reps", "3", "--n", "400,800", "--scenario", "all_correct", "--seed", "5"];
    let o = bin().args(args).args(["--format", "csv", "--out", s(&store)]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bin().args(args).args(["--out", s(&json)]).output().unwrap();
    assert!(o.status.success());
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(schema_errors("simulate.schema.json", &doc), Vec::<String>::new());
    assert_eq!(doc["metrics"].as_array().unwrap().len(), 2);

    let o = run(&["report", "--metrics", s(&store), "--svg", s(&svg)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<polyline"));
    let from_json = run(&["report", "--metrics", s(&json)]);
    assert_eq!(String::from_utf8(from_json.stdout).unwrap(), text);
}

#[test]
fn report_on_empty_store_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("empty.csv");
    std::fs::write(&store, "").unwrap();
    let out = dir.path().join("table.csv");
    let o = run(&["report", "--metrics", s(&store), "--format", "csv", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1);
    assert_eq!(
        std::fs::read_to_string(out).unwrap(),
        "effect,scenario,n,reps,abs_bias,sqrt_n_abs_bias,relse,relsd,relrmse,coverage95\n"
    );
    assert_eq!(run(&["report", "--metrics", s(&dir.path().join("missing.csv"))]).status.code(), Some(3));
}

#[test]
fn estimate_infers_standard_columns_without_config() {
    let f = Fixture::new(1_000);
    let o = run(&["estimate", "--data", s(&f.path("d.csv")), "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let with_cfg = run(&["estimate", "--config", s(&f.path("run.toml"))]);
    assert_eq!(o.stdout, with_cfg.stdout);
    assert_eq!(run(&["estimate", "--data", s(&f.path("nope.csv"))]).status.code(), Some(3));
}
