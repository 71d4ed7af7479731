//! The `fedconn` binary end to end on small synthetic inputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
strategies = ["single", "fed"]
seeds = [0]
k = 2

[data.synth]
n_rois = 8
informative_roi_count = 3
subjects_per_class = 3
n_frames = 36

[train.fed]
epochs = 2
steps_per_epoch = 6
tau = 3
"#;

fn fedconn(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedconn"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("FEDCONN_OUT")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_twice_gives_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&fedconn(&["run", cfg.to_str().unwrap()], &a));
    ok(&fedconn(&["run", cfg.to_str().unwrap()], &b));
    for file in ["results.csv", "telemetry.csv", "comms.csv", "budget.csv", "summary.csv", "comparisons.csv"] {
        let (x, y) = (fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap());
        assert!(!x.is_empty(), "{file} is empty");
        assert_eq!(x, y, "{file} differs");
    }
    let results = fs::read_to_string(a.join("results.csv")).unwrap();
    assert!(results.starts_with("strategy,site,fold,seed,tau,mechanism,alpha,subject_accuracy"));
}

#[test]
fn synth_then_preprocess_counts_windows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, SMALL).unwrap();
    let data = tmp.path().join("data");
    ok(&fedconn(&["synth", cfg.to_str().unwrap()], &data));
    assert!(data.join("phenotype.csv").exists());
    let feats = tmp.path().join("features");
    let roi_dir = data.join("series");
    let pheno = data.join("phenotype.csv");
    ok(&fedconn(
        &["preprocess", "--roi-dir", roi_dir.to_str().unwrap(), "--phenotype", pheno.to_str().unwrap(), "--window", "32"],
        &feats,
    ));
    let counts = fs::read_to_string(feats.join("window_counts.csv")).unwrap();
    let rows: Vec<&str> = counts.lines().skip(1).collect();
    // 4 sites × 2 classes × 3 subjects, 36 − 32 + 1 windows each
    assert_eq!(rows.len(), 24);
    assert!(rows.iter().all(|r| r.ends_with(",36,5")), "{counts}");
    let header = fs::read_to_string(feats.join("features.csv")).unwrap();
    let first = header.lines().next().unwrap();
    assert_eq!(first.split(',').count(), 4 + 8 * 7 / 2);
}

#[test]
fn report_recomputes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, SMALL.replace("seeds = [0]", "seeds = [0, 1]")).unwrap();
    let run = tmp.path().join("run");
    ok(&fedconn(&["run", cfg.to_str().unwrap()], &run));
    let again = tmp.path().join("again");
    let o = fedconn(&["report", run.join("results.csv").to_str().unwrap()], &again);
    ok(&o);
    assert_eq!(fs::read(run.join("summary.csv")).unwrap(), fs::read(again.join("summary.csv")).unwrap());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("fed") && stdout.contains("vs"), "{stdout}");
}

#[test]
fn unknown_config_key_fails_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seeds = [0]\n[train.fed]\nepochz = 3\n").unwrap();
    let o = fedconn(&["run", cfg.to_str().unwrap()], &tmp.path().join("out"));
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("epochz") && err.contains("line 3"), "{err}");
}
