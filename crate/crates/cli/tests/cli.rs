use std::path::Path;
use std::process::{Command, Output};

fn mdfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdfa"))
        .args(args)
        .env("MDFA_THREADS", "1")
        .output()
        .expect("spawn mdfa")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const AUDIT_FLAGS: &[&str] = &[
    "--input", "--schema", "--out", "--seed", "--splits", "--alpha", "--xi", "--lambda",
    "--bandwidth", "--scheme", "--target-y", "--sensitive-value", "--format",
];

#[test]
fn every_command_documents_its_flags() {
    let cases: &[(&str, &[&str])] = &[
        ("synth", &["--m", "--mu", "--nu", "--noise-std", "--seed", "--out"]),
        ("certify", AUDIT_FLAGS),
        ("worst", AUDIT_FLAGS),
        ("audit-predictions", AUDIT_FLAGS),
        ("compare-weights", &["--mu", "--nu", "--m", "--splits", "--seed", "--lambda", "--bandwidth", "--out", "--format"]),
        ("profile", &["--input", "--schema", "--subgroup", "--sensitive-value", "--out", "--format"]),
    ];
    for (cmd, flags) in cases {
        let o = mdfa(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd} --help exited {:?}", o.status);
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help does not mention {f}:\n{text}");
        }
    }
    let top = stdout(&mdfa(&["--help"]));
    for (cmd, _) in cases {
        assert!(top.contains(cmd), "top-level help lacks {cmd}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(mdfa(&[]).status.code(), Some(1));
    assert_eq!(mdfa(&["certify", "--schema", "s"]).status.code(), Some(1));
    assert_eq!(mdfa(&["worst", "--input", "a", "--schema", "s", "--scheme", "xx"]).status.code(), Some(1));
}

#[test]
fn missing_input_exits_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = mdfa(&[
        "certify",
        "--input",
        dir.path().join("none.csv").to_str().unwrap(),
        "--schema",
        dir.path().join("none.cfg").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

fn synth(dir: &Path, extra: &[&str]) -> (String, String) {
    let csv = dir.join("d.csv");
    let mut args = vec!["synth", "--m", "400", "--mu", "0.1", "--nu", "0.8", "--seed", "5", "--out", csv.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = mdfa(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (csv.to_str().unwrap().to_string(), dir.join("d.schema").to_str().unwrap().to_string())
}

#[test]
fn synth_writes_data_and_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, schema) = synth(dir.path(), &[]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 401);
    assert!(Path::new(&schema).exists());
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("d.truth.json")).unwrap()).unwrap();
    let delta = truth["ground_truth"]["delta_m"].as_f64().unwrap();
    assert!((delta - 0.2f64.ln().abs()).abs() < 1e-12);
    assert!(truth["true_gamma"].as_f64().unwrap() > 0.0);
}

#[test]
fn certify_and_profile_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, schema) = synth(dir.path(), &[]);
    let o = mdfa(&[
        "certify", "--input", &csv, "--schema", &schema, "--splits", "2", "--lambda", "0.001", "--bandwidth", "median",
        "--scheme", "uw",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["per_split"].as_array().unwrap().len(), 2);

    let o = mdfa(&["profile", "--input", &csv, "--schema", &schema, "--subgroup", "x1=12345"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mdfa(&["profile", "--input", &csv, "--schema", &schema, "--subgroup", "x1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn worst_tsv_is_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, schema) = synth(dir.path(), &[]);
    let o = mdfa(&[
        "worst", "--input", &csv, "--schema", &schema, "--splits", "1", "--lambda", "0.001", "--bandwidth", "median",
        "--scheme", "uw", "--xi", "0.5", "--alpha", "0.02", "--format", "tsv",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("t\tdelta_hat\talpha_hat\n"), "{text}");
    assert!(text.lines().count() >= 2);
}
