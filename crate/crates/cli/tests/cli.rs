use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn otfp(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otfp"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--no-timestamp")
        .output()
        .expect("spawn otfp")
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gaussian_scalar_kernel() {
    let dir = TempDir::new().unwrap();
    let o = otfp(&["gaussian", "--input", data("gaussian.json").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(dir.path());
    assert_eq!(r["command"], "gaussian");
    assert!(r.get("generated_at_unix").is_none());
    let st = r["result"]["sigma_t"][0][0].as_f64().unwrap();
    assert!((st - 0.6180).abs() < 1e-4, "{st}");
}

#[test]
fn untilted_targets_give_zero_multiplier() {
    let dir = TempDir::new().unwrap();
    let o = otfp(&["solve-fpr", "--input", data("untilted.json").to_str().unwrap(), "--coupling"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(dir.path());
    assert_eq!(r["result"]["converged"], true);
    for l in r["result"]["lambda_star"].as_array().unwrap() {
        assert!(l.as_f64().unwrap().abs() < 1e-8);
    }
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "iteration,dual_value,grad_norm");
    let coupling = fs::read_to_string(dir.path().join("coupling.csv")).unwrap();
    let mut lines = coupling.lines();
    assert_eq!(lines.next().unwrap(), "i,j,mass");
    let total: f64 = lines.map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn infeasible_targets_exit_two_with_hint() {
    let dir = TempDir::new().unwrap();
    let o = otfp(&["solve-fpr", "--input", data("infeasible.json").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("hint:") && err.contains("solve-fprp"), "{err}");

    let o = otfp(&["solve-fprp", "--input", data("infeasible.json").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(dir.path());
    assert!(r["result"]["penalty"]["stationarity"].as_f64().unwrap() < 1e-8);
}

#[test]
fn markov_infeasible_reference() {
    let dir = TempDir::new().unwrap();
    let input = data("markov_infeasible.json");
    let o = otfp(&["markov-track", "--input", input.to_str().unwrap(), "--iters", "1000"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--kappa"));
    let o = otfp(&["markov-track", "--input", input.to_str().unwrap(), "--iters", "1000", "--kappa", "5"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = fs::read_to_string(dir.path().join("tracking.csv")).unwrap();
    assert_eq!(t.lines().next().unwrap(), "k,reference,achieved,error");
    assert_eq!(t.lines().count(), 5);
}

#[test]
fn malformed_input_names_the_field() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"mean": [0.0], "second_moment": [[1.0]], "epsilon": -1.0}"#).unwrap();
    let o = otfp(&["gaussian", "--input", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epsilon"), "{}", stderr(&o));

    fs::write(&bad, r#"{"source": {"points": [0.0]}, "target": {"points": [0.0, 1.0], "weights": [0.5]}, "features": [{"kind": "linear"}], "targets": [0.5]}"#).unwrap();
    let o = otfp(&["check", "--input", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("target"), "{}", stderr(&o));

    let o = otfp(&["check"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = otfp(&["solve-fpr", "--input", "x.json", "--method", "bogus"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn check_reports_ranges_and_dual_surface() {
    let dir = TempDir::new().unwrap();
    let input = data("shifted.json");
    let o = otfp(&["check", "--input", input.to_str().unwrap(), "--dual-grid", "-1,1,-2,0,3"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(dir.path());
    assert_eq!(r["result"]["targets_in_range"], true);
    assert_eq!(r["result"]["covariance_positive_definite"], true);

    let lp = otfp::io::parse_problem(&fs::read_to_string(&input).unwrap()).unwrap();
    let eps = lp.epsilon.unwrap();
    let surface = fs::read_to_string(dir.path().join("dual_surface.csv")).unwrap();
    let mut lines = surface.lines();
    assert_eq!(lines.next().unwrap(), "lambda1,lambda2,dual_value");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 9);
    for row in rows {
        let expect = otfp::dual::dual_value_fpr(&lp.problem, &[row[0], row[1]], eps);
        assert_eq!(row[2], expect);
    }
}

#[test]
fn stochastic_methods_write_traces() {
    let dir = TempDir::new().unwrap();
    let input = data("shifted.json");
    for method in ["sgd", "zap"] {
        let o = otfp(
            &["solve-fpr", "--input", input.to_str().unwrap(), "--method", method, "--iters", "2000", "--estimator", "split", "--K", "3"],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let t = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(t.lines().next().unwrap(), "n,zeta_1,zeta_2,grad_estimate_norm");
        assert_eq!(report(dir.path())["result"]["method"], method);
    }
}

#[test]
fn continuation_writes_schedule() {
    let dir = TempDir::new().unwrap();
    let o = otfp(&["continuation", "--input", data("shifted.json").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = fs::read_to_string(dir.path().join("continuation.csv")).unwrap();
    assert_eq!(t.lines().next().unwrap(), "epsilon,transport_cost,entropy,converged,iterations");
    let eps: Vec<f64> = t.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(eps.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(*eps.last().unwrap(), 0.01);
}
