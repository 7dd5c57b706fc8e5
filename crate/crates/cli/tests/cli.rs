use std::path::Path;
use std::process::{Command, Output};

fn dcis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcis")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dcis(args);
    assert!(
        out.status.success(),
        "dcis {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_synth(out: &Path, seed: &str) {
    ok(&["--seed", seed, "--quiet", "--out", p(out), "synth", "--patients", "10", "--lesion-size", "48,96"]);
}

fn tiny_train(manifest: &Path, out: &Path) {
    ok(&[
        "--seed", "2", "--quiet", "--out", p(out), "train", "--manifest", p(manifest), "--split", "0.5,0.25,0.25",
        "--unbalanced", "--batch-size", "4", "--patch-size", "32", "--widths", "4,4", "--trunk-units", "8",
        "--epochs", "1", "--batches-per-epoch", "2", "--n-patches", "2",
    ]);
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in ["synth", "split", "extract", "train", "eval", "report"] {
        let out = dcis(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
    assert_eq!(dcis(&["--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcis(&["--out", p(dir.path()), "synth", "--grade-mix", "0.5,0.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grade-mix"));
    assert_eq!(dcis(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(dcis(&["synth"]).status.code(), Some(1), "missing --out");
}

#[test]
fn bad_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcis(&["eval", "--run", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no checkpoint"));

    let manifest = dir.path().join("manifest.json");
    std::fs::write(&manifest, "{\"patients\": 3}").unwrap();
    let out = dcis(&["--out", p(&dir.path().join("s")), "split", "--manifest", p(&manifest)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_is_reproducible_and_config_matches_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    tiny_synth(&a, "4");
    tiny_synth(&b, "4");
    let config = dir.path().join("dcis.toml");
    std::fs::write(&config, "seed = 4\n\n[synth]\npatients = 10\nlesion-size = [48, 96]\n").unwrap();
    ok(&["--config", p(&config), "--quiet", "--out", p(&c), "synth"]);
    for other in [&b, &c] {
        assert_eq!(
            std::fs::read(a.join("truth.csv")).unwrap(),
            std::fs::read(other.join("truth.csv")).unwrap()
        );
        for entry in std::fs::read_dir(a.join("images")).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                std::fs::read(a.join("images").join(&name)).unwrap(),
                std::fs::read(other.join("images").join(&name)).unwrap()
            );
        }
    }
}

#[test]
fn split_writes_manifest_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_synth(&data, "1");
    let out = dir.path().join("split");
    let table = ok(&["--out", p(&out), "split", "--manifest", p(&data.join("manifest.json")), "--fractions", "0.5,0.25,0.25"]);
    assert!(table.contains("Split"));
    let csv = std::fs::read_to_string(out.join("split.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    let m = dcis_core::DatasetManifest::load(&out.join("manifest.json")).unwrap();
    assert!(m.split.is_some());
}

#[test]
fn extract_writes_requested_patches() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_synth(&data, "1");
    let out = dir.path().join("patches");
    ok(&["--quiet", "--out", p(&out), "extract", "--manifest", p(&data.join("manifest.json")), "--draws", "2", "--patch-size", "32"]);
    let n_lesions = dcis_core::DatasetManifest::load(&data.join("manifest.json")).unwrap().lesions.len();
    let pngs = walk_pngs(&out);
    assert_eq!(pngs, 2 * n_lesions);
}

fn walk_pngs(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk_pngs(&path)
            } else {
                usize::from(path.extension().is_some_and(|x| x == "png"))
            }
        })
        .sum()
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_synth(&data, "3");
    let run = dir.path().join("run");
    tiny_train(&data.join("manifest.json"), &run);
    for f in ["checkpoint.bin", "config.toml", "train_log.csv", "manifest.json", "metadata.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    ok(&["--quiet", "--out", p(&e1), "eval", "--run", p(&run), "--n-patches", "2"]);
    ok(&["--quiet", "--out", p(&e2), "eval", "--run", p(&run), "--n-patches", "2"]);
    for f in ["lesion_predictions.csv", "patient_predictions.csv", "kappa_lesion.csv", "kappa_patient.csv"] {
        assert_eq!(std::fs::read(e1.join(f)).unwrap(), std::fs::read(e2.join(f)).unwrap(), "{f}");
    }
    assert!(e1.join("truth_kappa.csv").is_file());

    let patient_only = dir.path().join("patient");
    ok(&["--quiet", "--out", p(&patient_only), "eval", "--run", p(&run), "--n-patches", "2", "--level", "patient"]);
    let kappa = std::fs::read_to_string(patient_only.join("kappa_patient.csv")).unwrap();
    assert_eq!(kappa.lines().count(), 7, "header plus six pairings");
    assert!(!patient_only.join("kappa_lesion.csv").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(patient_only.join("eval_summary.json")).unwrap()).unwrap();
    assert!(summary["chosen_percentile"].as_f64().is_some());

    let report = dir.path().join("report");
    let table = ok(&["--out", p(&report), "report", "--run", p(&e1)]);
    assert!(table.contains("observer1"));
    assert!(report.join("multi_run_kappa.csv").is_file());
}

#[test]
fn report_without_eval_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcis(&["report", "--run", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval"));
}

#[test]
fn example_config_is_accepted() {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/example.toml");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["--config", config, "--quiet", "--out", p(&data), "synth", "--patients", "3", "--lesion-size", "48,64"]);
    let run = dir.path().join("run");
    ok(&[
        "--config", config, "--quiet", "--out", p(&run), "train", "--manifest", p(&data.join("manifest.json")),
        "--epochs", "0", "--patch-size", "32", "--widths", "4,4", "--unbalanced",
    ]);
    let snapshot = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("learning_rate = 0.003"), "{snapshot}");
}
