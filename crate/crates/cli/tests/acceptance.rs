//! CLI acceptance: byte-identical reproducibility (criterion 9) plus the
//! documented exit codes and output contracts of each subcommand.

use std::path::Path;
use std::process::{Command, Output};

use latred::io::{load_checkpoint, params_from_checkpoint};
use latred::policy::{PolicyConfig, PolicyParams};

fn latred() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_latred"));
    cmd.env_remove("LATRED_SEED");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn latred");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).expect("read output file")
}

#[test]
fn criterion_9_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // gen twice: byte-identical datasets
    for name in ["a.jsonl", "b.jsonl"] {
        run_ok(latred().args([
            "gen", "--dim", "4", "--count", "20", "--seed", "42", "--out",
        ]).arg(d.join(name)));
    }
    assert_eq!(read(&d.join("a.jsonl")), read(&d.join("b.jsonl")), "gen outputs differ");

    // train twice (desk-size run): byte-identical checkpoint and curve
    for suffix in ["1", "2"] {
        run_ok(latred().args([
            "train",
            "--dim", "3",
            "--epochs", "2",
            "--train-per-epoch", "8",
            "--test-count", "4",
            "--minibatch", "4",
            "--eval-every", "1",
            "--seed", "42",
        ])
        .arg("--out-model").arg(d.join(format!("model{suffix}.json")))
        .arg("--out-curve").arg(d.join(format!("curve{suffix}.csv"))));
    }
    assert_eq!(
        read(&d.join("model1.json")),
        read(&d.join("model2.json")),
        "train checkpoints differ"
    );
    assert_eq!(
        read(&d.join("curve1.csv")),
        read(&d.join("curve2.csv")),
        "train curves differ"
    );

    // eval twice: byte-identical reports
    run_ok(latred().args(["gen", "--dim", "3", "--count", "12", "--seed", "7", "--out"])
        .arg(d.join("test.jsonl")));
    for suffix in ["1", "2"] {
        run_ok(latred().args(["eval", "--p", "0.25", "--seed", "42", "--model"])
            .arg(d.join("model1.json"))
            .arg("--test").arg(d.join("test.jsonl"))
            .arg("--out-report").arg(d.join(format!("report{suffix}.json"))));
    }
    assert_eq!(
        read(&d.join("report1.json")),
        read(&d.join("report2.json")),
        "eval reports differ"
    );
    println!("[PASS] criterion 9: gen/train/eval reruns are byte-identical");
}

#[test]
fn gen_dim_one_is_usage_error() {
    let out = latred()
        .args(["gen", "--dim", "1", "--count", "1", "--seed", "0", "--out", "/dev/null"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("at least 2"), "stderr: {err}");
}

#[test]
fn gen_header_and_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.jsonl");
    run_ok(latred().args(["gen", "--dim", "4", "--count", "1", "--seed", "7", "--out"]).arg(&path));
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(header["n"], 4);
    assert_eq!(header["count"], 1);
    assert_eq!(header["seed"], 7);
    assert_eq!(header["generator"], "expm-uniform01");
    let m: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(m["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn seed_env_var_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_ok(latred().args(["gen", "--dim", "3", "--count", "2", "--seed", "99", "--out"])
        .arg(d.join("flagged.jsonl")));
    let mut env_cmd = latred();
    env_cmd.env("LATRED_SEED", "99");
    run_ok(env_cmd.args(["gen", "--dim", "3", "--count", "2", "--out"]).arg(d.join("env.jsonl")));
    assert_eq!(read(&d.join("flagged.jsonl")), read(&d.join("env.jsonl")));
}

#[test]
fn lll_identity_input_unit_defect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dataset = "{\"n\":2,\"count\":1,\"seed\":0,\"generator\":\"expm-uniform01\"}\n\
                   {\"n\":2,\"rows\":[[1.0,0.0],[0.0,1.0]]}\n";
    std::fs::write(d.join("id.jsonl"), dataset).unwrap();
    run_ok(latred().args(["lll", "--input"]).arg(d.join("id.jsonl"))
        .arg("--out").arg(d.join("red.jsonl")));
    let text = std::fs::read_to_string(d.join("red.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert_eq!(record["defect_after"], 1.0);
    assert_eq!(record["siegel_reduced"], true);
    assert_eq!(record["basis"]["rows"][0][0], 1.0);
    assert_eq!(record["transform"]["rows"][0], serde_json::json!(["1", "0"]));
}

#[test]
fn lll_malformed_line_is_data_error_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dataset = "{\"n\":2,\"count\":2,\"seed\":0,\"generator\":\"expm-uniform01\"}\n\
                   {\"n\":2,\"rows\":[[1.0,0.0],[0.0,1.0]]}\n\
                   {oops\n";
    std::fs::write(d.join("bad.jsonl"), dataset).unwrap();
    let out = latred()
        .args(["lll", "--input"])
        .arg(d.join("bad.jsonl"))
        .arg("--out")
        .arg(d.join("red.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "stderr: {err}");
}

#[test]
fn factor_identity_empty_move_list() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("id.json"),
        "{\"n\":3,\"rows\":[[\"1\",\"0\",\"0\"],[\"0\",\"1\",\"0\"],[\"0\",\"0\",\"1\"]]}",
    )
    .unwrap();
    run_ok(latred().args(["factor", "--verify", "--input"]).arg(d.join("id.json"))
        .arg("--out").arg(d.join("f.json")));
    let fj: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("f.json")).unwrap()).unwrap();
    assert_eq!(fj["moves"].as_array().unwrap().len(), 0);
}

#[test]
fn factor_rejects_det_minus_one_naming_the_wrapper() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("neg.json"),
        "{\"n\":2,\"rows\":[[\"0\",\"1\"],[\"1\",\"0\"]]}",
    )
    .unwrap();
    let out = latred()
        .args(["factor", "--input"])
        .arg(d.join("neg.json"))
        .arg("--out")
        .arg(d.join("f.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("factor_with_sign"), "stderr: {err}");
}

#[test]
fn factor_shear_product_verifies_and_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // the product of the shears (0,1,+2), (1,2,-3), (2,3,+1), (3,0,+2)
    std::fs::write(
        d.join("q.json"),
        "{\"n\":4,\"rows\":[[\"-11\",\"2\",\"-6\",\"-6\"],[\"-6\",\"1\",\"-3\",\"-3\"],\
         [\"2\",\"0\",\"1\",\"1\"],[\"2\",\"0\",\"0\",\"1\"]]}",
    )
    .unwrap();
    let out = run_ok(latred().args(["factor", "--verify", "--input"]).arg(d.join("q.json"))
        .arg("--out").arg(d.join("f.json")));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("\"event\":\"factored\""), "stderr: {stderr}");
    assert!(stderr.contains("\"verified\":true"), "stderr: {stderr}");
    let fj: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("f.json")).unwrap()).unwrap();
    assert!(fj["moves"].as_array().unwrap().len() >= 1);
    assert!(fj["induction_moves"].as_u64().unwrap() <= 4);
}

#[test]
fn train_zero_epochs_writes_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_ok(latred().args([
        "train", "--dim", "3", "--epochs", "0", "--train-per-epoch", "2",
        "--test-count", "2", "--seed", "5",
    ])
    .arg("--out-model").arg(d.join("m.json"))
    .arg("--out-curve").arg(d.join("c.csv")));
    let ck = load_checkpoint(&d.join("m.json")).unwrap();
    let params = params_from_checkpoint(&ck).unwrap();
    assert_eq!(params, PolicyParams::init(PolicyConfig::default(), 5));
    let curve = std::fs::read_to_string(d.join("c.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1, "curve must be header-only");
}

#[test]
fn eval_with_p_one_matches_full_set_and_records_k() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_ok(latred().args([
        "train", "--dim", "3", "--epochs", "1", "--train-per-epoch", "4",
        "--test-count", "2", "--minibatch", "2", "--seed", "3",
    ])
    .arg("--out-model").arg(d.join("m.json"))
    .arg("--out-curve").arg(d.join("c.csv")));
    run_ok(latred().args(["gen", "--dim", "3", "--count", "10", "--seed", "8", "--out"])
        .arg(d.join("t.jsonl")));
    run_ok(latred().args(["eval", "--p", "1.0", "--seed", "3", "--model"]).arg(d.join("m.json"))
        .arg("--test").arg(d.join("t.jsonl"))
        .arg("--out-report").arg(d.join("r.json")));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    // k defaults to the dataset dimension
    assert_eq!(report["k"], 3);
    assert_eq!(report["n"], 3);
    // p = 1 sections equal the full aggregates
    for section in report["worst_p"].as_array().unwrap() {
        assert_eq!(section["size"], 10);
        let (sel, agg) = match section["selected_by"].as_str().unwrap() {
            "lll" => (&section["lll"]["mean"], &report["aggregates"]["lll"]["mean"]),
            _ => (&section["policy"]["mean"], &report["aggregates"]["policy"]["mean"]),
        };
        assert_eq!(sel, agg);
    }
}

#[test]
fn defect_subcommand_reports_values() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_ok(latred().args(["gen", "--dim", "4", "--count", "3", "--seed", "11", "--out"])
        .arg(d.join("ds.jsonl")));
    let out = run_ok(latred().args(["defect", "--input"]).arg(d.join("ds.jsonl")));
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    for line in &lines[1..] {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let defect = v["defect"].as_f64().unwrap();
        let log_defect = v["log_defect"].as_f64().unwrap();
        assert!(defect >= 1.0 - 1e-9);
        assert!((defect.ln() - log_defect).abs() < 1e-9 * (1.0 + log_defect.abs()));
    }
}
