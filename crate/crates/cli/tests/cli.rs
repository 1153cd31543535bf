use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;

fn vrm(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrm"))
        .args(args)
        .env("VRM_RUN_DIR", root)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_data(root: &Path) -> String {
    let out = root.join("d.vrmdata");
    let o = vrm(
        root,
        &["gen-data", "--classes", "4", "--dim", "6", "--per-class", "20", "--seed", "2", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.to_str().unwrap().to_string()
}

fn small_teacher(root: &Path, data: &str) -> String {
    let o = vrm(root, &["train-teacher", "--data", data, "--hidden", "16", "--epochs", "3", "--name", "t"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    root.join("t/teacher.ckpt").to_str().unwrap().to_string()
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = small_data(tmp.path());
    let first = fs::read(&a).unwrap();
    small_data(tmp.path());
    assert_eq!(first, fs::read(&a).unwrap());
    let parsed = vrm_core::data::Dataset::read_from(first.as_slice()).unwrap();
    assert_eq!((parsed.classes(), parsed.dim(), parsed.len()), (4, 6, 80));
}

#[test]
fn bad_parameters_exit_2() {
    let tmp = TempDir::new().unwrap();
    let o = vrm(tmp.path(), &["gen-data", "--classes", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("need ≥ 2 classes"), "{}", stderr(&o));
    let o = vrm(tmp.path(), &["pilot", "--batch", "4", "--spurious", "9"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn missing_teacher_exits_3() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let o = vrm(tmp.path(), &["distill", "--data", &data, "--teacher", "nope.ckpt"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn divergence_exits_4() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let teacher = small_teacher(tmp.path(), &data);
    let o = vrm(tmp.path(), &["distill", "--data", &data, "--teacher", &teacher, "--lr", "1e200", "--epochs", "3", "--name", "boom"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let manifest = fs::read_to_string(tmp.path().join("boom/manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"failed"), "{manifest}");
}

#[test]
fn distill_writes_artifacts_and_repeats_exactly() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let teacher = small_teacher(tmp.path(), &data);
    for name in ["a", "b"] {
        let o = vrm(tmp.path(), &["distill", "--data", &data, "--teacher", &teacher, "--epochs", "3", "--name", name]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let dir = tmp.path().join("a");
    for f in ["metrics.csv", "breakdown.csv", "student.ckpt", "logit_stats.csv", "logit_hist.csv", "manifest.json"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    for f in ["metrics.csv", "breakdown.csv", "student.ckpt"] {
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f} differs");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["config"]["uep"], "95");
}

#[test]
fn ce_only_logs_no_relation_terms() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let teacher = small_teacher(tmp.path(), &data);
    let o = vrm(
        tmp.path(),
        &["distill", "--data", &data, "--teacher", &teacher, "--objective", "ce_only", "--epochs", "2", "--name", "ce"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("ce/breakdown.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let (isv, icv) = (
        header.iter().position(|h| *h == "isv").unwrap(),
        header.iter().position(|h| *h == "icv").unwrap(),
    );
    for l in lines {
        let cols: Vec<f64> = l.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!((cols[isv], cols[icv]), (0.0, 0.0));
    }
}

#[test]
fn config_file_layers_under_flags() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let teacher = small_teacher(tmp.path(), &data);
    let cfg = tmp.path().join("c.conf");
    fs::write(&cfg, "# sweep defaults\nalpha = 7\nuep = 50\n").unwrap();
    let o = vrm(
        tmp.path(),
        &[
            "distill", "--data", &data, "--teacher", &teacher, "--epochs", "1", "--config", cfg.to_str().unwrap(),
            "--set", "beta=3", "--uep", "90", "--name", "layered",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("layered/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["alpha"], "7");
    assert_eq!(manifest["config"]["beta"], "3");
    assert_eq!(manifest["config"]["uep"], "90");
    let o = vrm(tmp.path(), &["distill", "--data", &data, "--teacher", &teacher, "--set", "bogus=1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn check_suite_passes_and_catches_fault() {
    let tmp = TempDir::new().unwrap();
    let t = Instant::now();
    let o = vrm(tmp.path(), &["check", "--quick"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(t.elapsed().as_secs() < 30);
    let o = vrm(tmp.path(), &["check", "--quick", "--inject-fault", "huber-grad-sign"]);
    assert_eq!(code(&o), 1);
    let all = format!("{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    assert!(all.contains("grad/huber"), "{all}");
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let tmp = TempDir::new().unwrap();
    let o = vrm(
        tmp.path(),
        &[
            "ablate", "--objectives", "gram,angular,vrm", "--seeds", "0,1,2,3,4", "--classes", "3", "--dim", "4",
            "--per-class", "15", "--epochs", "1", "--name", "ab",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cells = fs::read_to_string(tmp.path().join("ab/cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 15);
    assert!(tmp.path().join("ab/summary.csv").exists());

    let o = vrm(tmp.path(), &["ablate", "--param", "alpha", "--values", "", "--epochs", "1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn pilot_writes_per_seed_tables() {
    let tmp = TempDir::new().unwrap();
    let o = vrm(tmp.path(), &["pilot", "--seeds", "2", "--losses", "im,rm", "--name", "p"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("p/pilot-im-s0.csv")).unwrap();
    assert!(csv.starts_with("index,delta_g,is_spurious\n"));
    assert_eq!(csv.lines().count(), 65);
    assert!(tmp.path().join("p/pilot-rm-s1.csv").exists());
    assert!(tmp.path().join("p/summary.csv").exists());
}
