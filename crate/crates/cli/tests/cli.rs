use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "cli"

[seeds]
sampling = 1
heldout = 2
selection = 3
evaluation = 4
analysis = 5

[dataset]
synthetic = { n_train = 16, seed = 2 }

[backend]
kind = "synthetic"

[oracle]
seed = 3
noise_std = 0.1

[pool]
m = 300
min_occurrence = 5

[datamodels]
lambda = 1e-4
heldout = 30

[selection]
E = 4
methods = ["condacc", "datamodels", "random"]

[evaluation]
protocols = ["standard"]
n_prompts = 5

[analysis]
n_random = 20
"#;

fn iclsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iclsel"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn pipeline_then_cached_stage_verbs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let out_s = out.display().to_string();

    let o = iclsel(&["--workers", "2", "pipeline", "--config", &cfg, "--out-dir", &out_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["scores/condacc.jsonl", "subsets/random.json", "reports/condacc__standard.json", "run_manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let o = iclsel(&["score", "--config", &cfg, "--out-dir", &out_s]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("score") && l.contains("cached")), "{text}");

    let o = iclsel(&["select", "--config", &cfg, "--out-dir", &out_s, "--force"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l.starts_with("select") && l.contains("ran")));
}

#[test]
fn datamodel_verbs_read_a_suite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let out_s = out.display().to_string();
    let o = iclsel(&["pipeline", "--config", &cfg, "--out-dir", &out_s, "--stages", "collect,heldout,score"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("subsets").exists());

    let suite = out.join("datamodels/suite").display().to_string();
    let held = out.join("heldout").display().to_string();
    let o = iclsel(&["dm-eval", "--suite", &suite, "--heldout", &held, "--routing", "phase1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["n_prompts"], 30);
    assert_eq!(report["routing"], "phase1_only");

    let emb = dir.path().join("emb.jsonl");
    let o = iclsel(&["dm-embed", "--suite", &suite, "--out", &emb.display().to_string()]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&emb).unwrap().lines().count(), 16);
}

#[test]
fn invalid_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("E = 4", "E = 3"));
    let out = dir.path().join("out");
    let o = iclsel(&["pipeline", "--config", &cfg, "--out-dir", &out.display().to_string()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("selection.E"));
    assert!(!out.exists());

    let cfg = write_config(dir.path(), &CONFIG.replace("analysis = 5\n", ""));
    let o = iclsel(&["pipeline", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("analysis"));
}
