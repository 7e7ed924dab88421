use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
seed = 3
classes = 3
domains = 3
samples_per_domain = 24
image_side = 8
patch = 4

[run]
iterations = 30
batch_size = 8
val_every = 10
hidden = 8

[run.codebook]
size = 8
dim = 4

[experiment]
master_seed = 4
seeds = [1]
rows = ["I", "VI"]

[output]
dataset = "data/tiny.ddg"
dir = "runs"
"#;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddg-lab")).args(args).env("DDG_LAB_THREADS", "2").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("lab.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_is_reproducible_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let first = lab(&["gen-data", "--config", &cfg]);
    assert!(first.status.success(), "{}", stderr(&first));
    let file = tmp.path().join("data/tiny.ddg");
    let bytes = fs::read(&file).unwrap();
    assert!(stdout(&first).contains("sha256="));

    let again = lab(&["gen-data", "--config", &cfg]);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"));

    let forced = lab(&["gen-data", "--config", &cfg, "--force"]);
    assert!(forced.status.success());
    assert_eq!(fs::read(&file).unwrap(), bytes);
    assert_eq!(stdout(&first), stdout(&forced));

    let other = tmp.path().join("other.ddg");
    let reseeded = lab(&["gen-data", "--config", &cfg, "--seed", "9", "--out", other.to_str().unwrap()]);
    assert!(reseeded.status.success());
    assert_ne!(fs::read(&other).unwrap(), bytes);
}

#[test]
fn config_errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = lab(&["gen-data", "--config", tmp.path().join("nope.toml").to_str().unwrap()]);
    assert!(!missing.status.success());
    assert!(stderr(&missing).contains("cannot read config"));

    let no_flag = lab(&["train"]);
    assert!(!no_flag.status.success());
    assert!(stderr(&no_flag).contains("--config"));

    let bad = write_config(tmp.path(), &format!("{TINY}\n[run.loss]\nalpah = 1.0\n"));
    let out = lab(&["train", "--config", &bad]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("alpah"), "{}", stderr(&out));

    let usage = lab(&["frobnicate"]);
    assert!(!usage.status.success());
}

#[test]
fn train_eval_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = lab(&["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stderr(&out).lines().filter(|l| l.contains("val_acc=")).count(), 3);
    let runs = tmp.path().join("runs");
    for f in ["checkpoint.ckpt", "report.json", "report.csv", "gaps.csv"] {
        assert!(runs.join(f).exists(), "{f}");
    }
    let report = fs::read_to_string(runs.join("report.json")).unwrap();
    assert!(report.contains("config_hash"));

    let ck = runs.join("checkpoint.ckpt");
    let eval = lab(&["eval", "--checkpoint", ck.to_str().unwrap()]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    assert_eq!(stdout(&eval).lines().count(), 4);
    assert_eq!(stdout(&eval), stdout(&lab(&["eval", "--checkpoint", ck.to_str().unwrap()])));

    let inspect_dir = tmp.path().join("inspect");
    let inspect = lab(&["inspect-codebook", "--checkpoint", ck.to_str().unwrap(), "--out", inspect_dir.to_str().unwrap()]);
    assert!(inspect.status.success(), "{}", stderr(&inspect));
    let codes = fs::read_to_string(inspect_dir.join("codes.csv")).unwrap();
    assert_eq!(codes.lines().count(), 1 + 72);
    assert_eq!(codes.lines().next().unwrap().split(',').count(), 4 + 4);
    let usage = fs::read_to_string(inspect_dir.join("usage.csv")).unwrap();
    let total: u64 = usage.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 72 * 4);
    let l1 = fs::read_to_string(inspect_dir.join("domain_l1.csv")).unwrap();
    for line in l1.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').skip(3).map(|x| x.parse().unwrap()).collect();
        assert!(cols[0] <= cols[1] + 1e-12, "{line}");
    }
    let again_dir = tmp.path().join("inspect2");
    lab(&["inspect-codebook", "--checkpoint", ck.to_str().unwrap(), "--out", again_dir.to_str().unwrap()]);
    assert_eq!(codes, fs::read_to_string(again_dir.join("codes.csv")).unwrap());

    let wrong = tmp.path().join("wrong.toml");
    fs::write(&wrong, TINY.replace("classes = 3", "classes = 4")).unwrap();
    let wrong_data = tmp.path().join("wrong.ddg");
    assert!(lab(&["gen-data", "--config", wrong.to_str().unwrap(), "--out", wrong_data.to_str().unwrap()]).status.success());
    let mismatch = lab(&["eval", "--checkpoint", ck.to_str().unwrap(), "--dataset", wrong_data.to_str().unwrap()]);
    assert!(!mismatch.status.success());
    assert!(stderr(&mismatch).contains("classes"));
}

#[test]
fn loo_and_ablate_emit_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = lab(&["loo", "--config", &cfg, "--jobs", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let runs = tmp.path().join("runs");
    let csv = fs::read_to_string(runs.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    assert!(csv.lines().last().unwrap().contains(",avg,"));
    for t in 0..3 {
        assert!(runs.join(format!("checkpoint-target-{t}.ckpt")).exists());
    }

    let ab = lab(&["ablate", "--config", &cfg, "--out", tmp.path().join("ab").to_str().unwrap()]);
    assert!(ab.status.success(), "{}", stderr(&ab));
    let rows = fs::read_to_string(tmp.path().join("ab/ablation.csv")).unwrap();
    let ids: Vec<&str> = rows.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, vec!["I", "VI"]);
}

#[test]
fn theorem_check_reports_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lab(&["theorem-check"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(json["violations"], 0);
    assert_eq!(json["suite"]["cases"], 600);

    let cfg = write_config(
        tmp.path(),
        r#"
[theorem]
cases = 10
[[theorem.pairs]]
name = "same"
breakpoints = [0.0, 0.5, 1.0]
p = [1.5, 0.5]
q = [1.5, 0.5]
cells = 4
"#,
    );
    let path = tmp.path().join("gap.json");
    let out = lab(&["theorem-check", "--config", &cfg, "--out", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(json["pairs"][0]["report"]["continuous_gap"], 0.0);
    assert_eq!(json["pairs"][0]["report"]["discrete_gap"], 0.0);
    let csv = fs::read_to_string(tmp.path().join("gap.refinement.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7);

    let neg = write_config(
        tmp.path(),
        r#"
[[theorem.pairs]]
name = "negative"
breakpoints = [0.0, 0.5, 1.0]
p = [2.5, -0.5]
q = [1.0, 1.0]
cells = 2
"#,
    );
    let bad = lab(&["theorem-check", "--config", &neg]);
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("negative"));
}

#[test]
fn thread_cap_must_be_valid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_ddg-lab"))
        .args(["loo", "--config", &cfg])
        .env("DDG_LAB_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("DDG_LAB_THREADS"));
}

#[test]
fn shipped_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let loaded = ddg_lab::LoadedConfig::load(&path).unwrap();
    assert_eq!(loaded.run_config(), ddg_core::training::RunConfig::default());
    let shipped = serde_json::to_value(&loaded.file).unwrap();
    let defaults = serde_json::to_value(ddg_lab::ConfigFile::default()).unwrap();
    assert_eq!(shipped, defaults);
}
