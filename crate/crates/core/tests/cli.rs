use std::fs;
use std::path::{Path, PathBuf};

use lipreg::cli::{self, EXIT_NOT_CERTIFIED, EXIT_OK, EXIT_USAGE};
use lipreg::predictor;
use tempfile::TempDir;

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("lipreg").chain(args.iter().copied()))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &TempDir, name: &str, contents: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, contents).unwrap();
    p
}

const TINY: &str = "x1,label\n0.0,0\n0.25,0\n0.5,1\n0.75,1\n1.0,1\n";

fn fit_tiny(dir: &TempDir) -> PathBuf {
    let input = write(dir, "train.csv", TINY);
    let model = dir.path().join("model.json");
    let code = run(&[
        "fit", "--input", path_str(&input), "--lipschitz", "1.5", "--theta", "0.1", "--output", path_str(&model),
    ]);
    assert_eq!(code, EXIT_OK);
    model
}

fn predictions(path: &Path) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# lipreg predictions v1"));
    assert_eq!(lines.next().unwrap(), "id,probability");
    lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

#[test]
fn missing_lipschitz_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "train.csv", TINY);
    let code = run(&["fit", "--input", path_str(&input), "--theta", "0.1", "--output", "unused.json"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
}

#[test]
fn tiny_fit_writes_a_loadable_model() {
    let dir = TempDir::new().unwrap();
    let model = fit_tiny(&dir);
    let m = predictor::load_model(fs::File::open(&model).unwrap()).unwrap();
    assert_eq!(m.sample().len(), 5);
    assert_eq!(m.theta(), 0.1);
    assert_eq!(m.ddim(), Some(1.0));
}

#[test]
fn fit_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let first = fs::read(fit_tiny(&dir)).unwrap();
    let second = fs::read(fit_tiny(&dir)).unwrap();
    assert_eq!(first, second);
}

#[test]
fn auto_theta_uses_the_rate() {
    let dir = TempDir::new().unwrap();
    let rows: String = (0..100).map(|i| format!("{},{}\n", i as f64 / 99.0, u8::from(i % 3 == 0))).collect();
    let input = write(&dir, "hundred.csv", &format!("x1,label\n{rows}"));
    let model = dir.path().join("m.json");
    let code = run(&[
        "fit", "--input", path_str(&input), "--lipschitz", "1", "--auto-theta", "--ddim", "1",
        "--epsilon", "1e-3", "--output", path_str(&model),
    ]);
    assert_eq!(code, EXIT_OK);
    let m = predictor::load_model(fs::File::open(&model).unwrap()).unwrap();
    assert!((m.theta() - 100f64.powf(-1.0 / 3.0)).abs() < 1e-12);
    assert!((m.theta() - 0.2154).abs() < 1e-4);
}

#[test]
fn auto_theta_in_matrix_mode_needs_ddim() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "m.csv", "d1,d2,label\n0,1,0\n1,0,1\n");
    let code = run(&[
        "fit", "--input", path_str(&input), "--mode", "matrix", "--lipschitz", "1", "--auto-theta", "--output",
        path_str(&dir.path().join("o.json")),
    ]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn bad_data_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "bad.csv", "x1,label\n0.0,0\n0.5,2\n");
    let code = run(&[
        "fit", "--input", path_str(&input), "--lipschitz", "1", "--theta", "0.1", "--output",
        path_str(&dir.path().join("o.json")),
    ]);
    assert_eq!(code, EXIT_USAGE);
    let code = run(&[
        "fit", "--input", path_str(&dir.path().join("missing.csv")), "--lipschitz", "1", "--theta", "0.1",
        "--output", "o.json",
    ]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn iteration_limit_exits_not_certified() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "train.csv", TINY);
    let model = dir.path().join("model.json");
    let code = run(&[
        "fit", "--input", path_str(&input), "--lipschitz", "1.5", "--theta", "0.1", "--max-iter", "2",
        "--output", path_str(&model),
    ]);
    assert_eq!(code, EXIT_NOT_CERTIFIED);
    // the uncertified iterate is still a valid model
    assert!(predictor::load_model(fs::File::open(&model).unwrap()).is_ok());
}

#[test]
fn trace_file_has_a_header_and_one_line_per_iteration() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "train.csv", TINY);
    let trace = dir.path().join("trace.jsonl");
    let code = run(&[
        "fit", "--input", path_str(&input), "--lipschitz", "1.5", "--theta", "0.1", "--output",
        path_str(&dir.path().join("m.json")), "--trace", path_str(&trace),
    ]);
    assert_eq!(code, EXIT_OK);
    let text = fs::read_to_string(trace).unwrap();
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["format"], "lipreg-trace");
    let records: Vec<serde_json::Value> = lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty());
    assert_eq!(records[0]["k"], 1);
}

#[test]
fn predicting_training_inputs_returns_the_fitted_values() {
    let dir = TempDir::new().unwrap();
    let model = fit_tiny(&dir);
    let queries = write(&dir, "q.csv", "x1\n0.0\n0.25\n0.5\n0.75\n1.0\n");
    let out = dir.path().join("p.csv");
    assert_eq!(run(&["predict", "--model", path_str(&model), "--queries", path_str(&queries), "--output", path_str(&out)]), EXIT_OK);
    let m = predictor::load_model(fs::File::open(&model).unwrap()).unwrap();
    let got = predictions(&out);
    assert_eq!(got, m.w_star().iter().copied().collect::<Vec<_>>());
    assert!(got.iter().all(|&p| (0.1..=0.9).contains(&p)));
}

#[test]
fn empty_query_file_gives_a_header_only() {
    let dir = TempDir::new().unwrap();
    let model = fit_tiny(&dir);
    let queries = write(&dir, "q.csv", "x1\n");
    let out = dir.path().join("p.csv");
    assert_eq!(run(&["predict", "--model", path_str(&model), "--queries", path_str(&queries), "--output", path_str(&out)]), EXIT_OK);
    assert!(predictions(&out).is_empty());
}

#[test]
fn query_mode_mismatch_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let model = fit_tiny(&dir);
    let queries = write(&dir, "q.csv", "d1,d2,d3,d4,d5\n0.1,0.2,0.3,0.4,0.5\n");
    let out = dir.path().join("p.csv");
    assert_eq!(run(&["predict", "--model", path_str(&model), "--queries", path_str(&queries), "--output", path_str(&out)]), EXIT_USAGE);
}

#[test]
fn matrix_mode_fit_and_predict() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "m.csv", "d1,d2,d3,label\n0,1,2,0\n1,0,1,1\n2,1,0,1\n");
    let model = dir.path().join("m.json");
    let code = run(&[
        "fit", "--input", path_str(&input), "--mode", "matrix", "--lipschitz", "1", "--theta", "0.05",
        "--output", path_str(&model),
    ]);
    assert_eq!(code, EXIT_OK);
    let queries = write(&dir, "q.csv", "d1,d2,d3\n0,1,2\n1,1,1\n");
    let out = dir.path().join("p.csv");
    assert_eq!(run(&["predict", "--model", path_str(&model), "--queries", path_str(&queries), "--output", path_str(&out)]), EXIT_OK);
    let m = predictor::load_model(fs::File::open(&model).unwrap()).unwrap();
    let got = predictions(&out);
    assert_eq!(got[0], m.w_star()[0]);
    assert!(got[1] >= m.w_star().min() && got[1] <= m.w_star().max());
}

#[test]
fn eval_reports_on_a_holdout() {
    let dir = TempDir::new().unwrap();
    let model = fit_tiny(&dir);
    assert_eq!(run(&["eval", "--model", path_str(&model), "--test", path_str(&write(&dir, "t.csv", TINY))]), EXIT_OK);
    let unlabeled = write(&dir, "u.csv", "x1\n0.3\n");
    assert_eq!(run(&["eval", "--model", path_str(&model), "--test", path_str(&unlabeled)]), EXIT_USAGE);
    let holdout = write(&dir, "h.csv", "x1,label\n0.3,1\n");
    assert_eq!(run(&["eval", "--model", path_str(&model), "--test", path_str(&holdout), "--delta", "2"]), EXIT_USAGE);
}

#[test]
fn check_passes_on_seeded_instances() {
    assert_eq!(run(&["check", "--seed", "7", "--instances", "50"]), EXIT_OK);
}

#[test]
fn check_rejects_sizes_beyond_the_oracle() {
    assert_eq!(run(&["check", "--seed", "7", "--instances", "1", "--max-n", "40"]), EXIT_USAGE);
}

#[test]
fn lb_sim_agnostic_writes_a_report() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("agnostic.json");
    let code = run(&[
        "lb-sim", "agnostic", "--n", "36", "--C", "360", "--trials", "100000", "--seed", "1", "--output", path_str(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["seed"], 1);
    assert_eq!(v["trials"], 100_000);
    let nats = v["reference"]["risk_gap_nats"].as_f64().unwrap();
    assert!((nats - 0.0479).abs() < 1e-4);
    assert!(v["wilson_lo"].as_f64().unwrap() >= 0.1);
}

#[test]
fn lb_sim_csv_output_and_bad_parameters() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("gap.csv");
    let code = run(&[
        "lb-sim", "binom-gap", "--n", "36", "--trials", "1000", "--seed", "3", "--format", "csv", "--output",
        path_str(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# lipreg lb-sim v1\nexperiment,seed,"));
    assert_eq!(run(&["lb-sim", "agnostic", "--n", "36", "--C", "5", "--trials", "10", "--seed", "1"]), EXIT_USAGE);
    assert_eq!(run(&["lb-sim", "realizable", "--n", "1", "--eps", "0.1", "--trials", "10", "--seed", "1"]), EXIT_USAGE);
}

#[test]
fn seed_defaults_to_the_environment() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r.json");
    std::env::set_var(cli::SEED_ENV, "42");
    let code = run(&["lb-sim", "realizable", "--n", "100", "--eps", "0.05", "--trials", "100", "--output", path_str(&out)]);
    std::env::remove_var(cli::SEED_ENV);
    assert_eq!(code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["seed"], 42);
}
