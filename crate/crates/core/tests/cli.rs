use std::path::Path;
use std::process::Command;

fn mlca(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mlca")).args(args).output().expect("binary runs")
}

fn generate(dir: &Path, condition: &str, seed: &str) -> String {
    let file = dir.join(format!("cond{condition}.csv"));
    let out = mlca(&["generate", "--condition", condition, "--seed", seed, "--out", file.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    file.to_str().unwrap().to_string()
}

fn fit(input: &str, method: &str, out: &Path) -> std::process::Output {
    mlca(&[
        "fit", "--input", input, "--group-col", "group", "--items", "y1..y10", "--covariates", "z1", "--T", "3", "--M", "2",
        "--method", method, "--seed", "3", "--n-starts", "1", "--workers", "1", "--out", out.to_str().unwrap(),
    ])
}

#[test]
fn two_step_report_has_one_estimate_and_se_per_coefficient() {
    let tmp = tempfile::tempdir().unwrap();
    let input = generate(tmp.path(), "36", "1");
    let out = tmp.path().join("fit");
    let res = fit(&input, "two_step", &out);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));

    let mut rdr = csv::Reader::from_path(out.join("coefficients.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let gamma: Vec<_> = rows.iter().filter(|r| &r[col("parameter")] == "gamma").collect();
    // an estimate and a standard error for each of the (T-1) M K logit coefficients
    let cells = gamma.iter().filter(|r| !r[col("estimate")].is_empty() && !r[col("se")].is_empty()).count() * 2;
    assert_eq!(cells, 2 * 2 * 2 * 2);
    assert!(gamma.iter().all(|r| r[col("se")].parse::<f64>().unwrap() > 0.0));

    let text = std::fs::read_to_string(out.join("coefficients.txt")).unwrap();
    assert!(text.contains("HL 1") && text.contains("HL 2") && text.contains("LL3"));
    for file in ["posteriors_two_step.csv", "map_two_step.csv", "manifest.json"] {
        assert!(std::fs::metadata(out.join(file)).unwrap().len() > 0, "{file}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "fit");
    assert!(manifest["version"].is_string());
}

#[test]
fn method_all_puts_three_estimators_side_by_side() {
    let tmp = tempfile::tempdir().unwrap();
    let input = generate(tmp.path(), "36", "2");
    let out = tmp.path().join("fit");
    let res = fit(&input, "all", &out);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(out.join("coefficients.txt")).unwrap();
    let methods_line = text.lines().find(|l| l.contains("two_step")).unwrap();
    for m in ["one_step", "two_step", "two_stage"] {
        // one column per method under each of LL2 and LL3
        assert_eq!(methods_line.matches(m).count(), 2, "{methods_line}");
    }
    let map = std::fs::read_to_string(out.join("map_one_step.csv")).unwrap();
    assert_eq!(map.lines().count(), 100 * 500 + 1);
}

#[test]
fn missing_input_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let res = fit("/definitely/not/here.csv", "two_step", tmp.path());
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn bad_item_value_exits_with_one_and_names_the_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("bad.csv");
    std::fs::write(&input, "group,a,b\n1,0,1\n1,1,1\n1,2,0\n2,0,0\n2,1,0\n2,1,1\n").unwrap();
    let res = mlca(&["fit", "--input", input.to_str().unwrap(), "--group-col", "group", "--T", "2", "--M", "1", "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("row 4") && err.contains('a'), "{err}");
}

#[test]
fn simulate_smoke_run_writes_all_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let res = mlca(&["simulate", "--conditions", "1,19,31", "--replicates", "3", "--estimators", "all", "--seed", "4", "--workers", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    for file in ["replicates.csv", "aggregate.csv", "timing.csv", "timing_summary.csv", "long.csv", "manifest.json"] {
        assert!(std::fs::metadata(out.join(file)).unwrap().len() > 0, "{file}");
    }
}

#[test]
fn select_reports_every_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let input = generate(tmp.path(), "31", "5");
    let out = tmp.path().join("sel");
    let res = mlca(&["select", "--input", &input, "--group-col", "group", "--items", "y1..y10", "--T-range", "1..3", "--M-range", "1..2", "--n-starts", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let table = std::fs::read_to_string(out.join("selection.csv")).unwrap();
    assert!(table.lines().next().unwrap().contains("BIC_J"));
    assert!(table.lines().count() >= 4);
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let input = generate(tmp.path(), "31", "6");
    let cfg = tmp.path().join("run.json");
    let out = tmp.path().join("fit");
    std::fs::write(
        &cfg,
        serde_json::json!({"input": input, "group_col": "group", "items": "y1..y10", "covariates": "z1", "T": 3, "M": 2, "method": "one_step", "n_starts": 0}).to_string(),
    )
    .unwrap();
    let res = mlca(&["fit", "--config", cfg.to_str().unwrap(), "--method", "two_stage", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("map_two_stage.csv").exists());
    assert!(!out.join("map_one_step.csv").exists());

    std::fs::write(&cfg, r#"{"T": 3, "colour": "red"}"#).unwrap();
    let res = mlca(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}
