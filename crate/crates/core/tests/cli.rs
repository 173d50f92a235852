//! Drives the `tvkit` binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tvkit::cli::{load_weights, save_weights, ExperimentManifest};
use tvkit::data::TaskSpec;
use tvkit::suite::arithmetic_world;
use tvkit::tvck;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn tvkit_in(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tvkit"));
    cmd.current_dir(dir).args(args).env_remove("TVKIT_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let Output { status, stdout, stderr } = cmd.output().expect("binary runs");
    Run { code: status.code().unwrap_or(-1), stdout: String::from_utf8_lossy(&stdout).into(), stderr: String::from_utf8_lossy(&stderr).into() }
}

fn ok(dir: &Path, args: &[&str]) -> Run {
    let r = tvkit_in(dir, args, &[]);
    assert_eq!(r.code, 0, "tvkit {args:?} failed:\n{}\n{}", r.stdout, r.stderr);
    r
}

fn spec(id: &str, rotation: f64, seed: u64) -> TaskSpec {
    TaskSpec {
        id: id.into(),
        in_dim: 6,
        num_classes: 4,
        train_per_class: 60,
        val_per_class: 20,
        test_per_class: 60,
        rotation,
        shift: 2.0,
        noise: 0.1,
        domain_shift: 0.0,
        anchor_seed: 1,
        plane_seed: None,
        anchor_scale: 1.0,
        seed,
    }
}

/// Base model, two datasets, two fine-tuned models and their task vectors.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (i, s) in [spec("t0", 1.2, 7), spec("t1", 1.8, 8)].iter().enumerate() {
        std::fs::write(d.join(format!("task{i}.json")), serde_json::to_string(s).unwrap()).unwrap();
    }
    ok(d, &["init", "--in-dim", "6", "--classes", "4", "--depth", "2", "--width", "16", "--emb-dim", "8", "--seed", "3", "--out", "base.tvck"]);
    for i in 0..2 {
        let (task, data, ft, tv) = (format!("task{i}.json"), format!("d{i}.tvck"), format!("ft{i}.tvck"), format!("tv{i}.tvck"));
        ok(d, &["gen", "--task", &task, "--out", &data]);
        ok(d, &["finetune", "--base", "base.tvck", "--task", &data, "--seed", "1", "--out", &ft]);
        ok(d, &["diff", "--ft", &ft, "--base", "base.tvck", "--id", &format!("t{i}"), "--out", &tv]);
    }
    dir
}

fn manifest(path: &Path) -> ExperimentManifest {
    let mut m = path.as_os_str().to_owned();
    m.push(".manifest.json");
    serde_json::from_str(&std::fs::read_to_string(PathBuf::from(m)).unwrap()).unwrap()
}

fn replay_is_identical(dir: &Path, output: &str) {
    let r = ok(dir, &["replay", &format!("{output}.manifest.json")]);
    assert!(r.stdout.contains("identical") && !r.stdout.contains("DIFFERS"), "{}", r.stdout);
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn every_command_replays_byte_identically() {
    let dir = fixture();
    let d = dir.path();
    let runs: Vec<(Vec<&str>, &str)> = vec![
        (vec!["learn", "add", "--base", "base.tvck", "--tv", "tv0.tvck", "--tv", "tv1.tvck", "--data", "d0.tvck", "--data", "d1.tvck", "--out", "add.json"], "add.json"),
        (vec!["learn", "add", "--base", "base.tvck", "--tv", "tv0.tvck", "--tv", "tv1.tvck", "--data", "d0.tvck", "--K", "3", "--budget", "1", "--out", "k3.json"], "k3.json"),
        (vec!["learn", "negate", "--base", "base.tvck", "--tv", "tv0.tvck", "--target", "d0.tvck", "--control", "d1.tvck", "--out", "neg.json"], "neg.json"),
        (vec!["learn", "fewshot", "--base", "base.tvck", "--tv", "tv1.tvck", "--data", "d0.tvck", "--k", "4", "--target-id", "t0", "--out", "few.json"], "few.json"),
        (vec!["learn", "tta-ufm", "--base", "base.tvck", "--tv", "tv0.tvck", "--tv", "tv1.tvck", "--data", "d1.tvck", "--epochs", "2", "--out", "ufm.json"], "ufm.json"),
        (vec!["learn", "tta-entropy", "--base", "base.tvck", "--tv", "tv0.tvck", "--tv", "tv1.tvck", "--data", "d1.tvck", "--epochs", "2", "--out", "ent.json"], "ent.json"),
        (vec!["finetune", "--base", "base.tvck", "--task", "d0.tvck", "--lora-rank", "2", "--epochs", "3", "--out", "lora.tvck"], "lora.tvck"),
        (vec!["finetune", "--base", "base.tvck", "--task", "task0.json", "--epochs", "2", "--linearized", "--out", "lin.tvck"], "lin.tvck"),
        (vec!["eval", "acc", "--weights", "add.tvck", "--data", "d0.tvck", "--data", "d1.tvck", "--finetuned", "ft0.tvck", "--finetuned", "ft1.tvck", "--out", "acc.csv"], "acc.csv"),
        (vec!["eval", "relacc", "--abs", "45", "--ref", "90", "--out", "rel.json"], "rel.json"),
        (vec!["eval", "negation", "--base", "base.tvck", "--weights", "neg.tvck", "--target", "d0.tvck", "--control", "d1.tvck", "--out", "negeval.json"], "negeval.json"),
        (vec!["eval", "disentangle", "--base", "base.tvck", "--tv", "tv0.tvck", "--tv", "tv1.tvck", "--data", "d0.tvck", "--data", "d1.tvck", "--coeffs", "add.json", "--out", "xi.csv"], "xi.csv"),
        (vec!["eval", "intrinsic", "--base", "base.tvck", "--tv", "tv0.tvck", "--tv", "tv1.tvck", "--data", "d1.tvck", "--basis", "taskvector", "--bases", "0", "1", "2", "--seeds", "0", "1", "--ref", "90", "--epochs", "2", "--out", "int.csv"], "int.csv"),
    ];
    for (args, _) in &runs {
        ok(d, args);
    }
    // the fixture commands too
    for out in ["base.tvck", "d0.tvck", "ft0.tvck", "tv0.tvck"] {
        replay_is_identical(d, out);
    }
    for (args, out) in &runs {
        let m = manifest(&d.join(out));
        assert_eq!(&m.command.iter().map(String::as_str).collect::<Vec<_>>(), args);
        assert_eq!(m.outputs[0].path, PathBuf::from(out));
        assert!(!m.inputs.is_empty() || out == &"rel.json");
        replay_is_identical(d, out);
    }
    // learn commands also write the composed weights
    for composed in ["add.tvck", "k3.tvck", "neg.tvck", "few.tvck", "ufm.tvck", "ent.tvck"] {
        assert!(d.join(composed).exists(), "{composed}");
    }

    let xi = csv_rows(&d.join("xi.csv"));
    assert_eq!(xi.len(), 4);
    assert!(xi.iter().filter(|r| r[0] == r[1]).all(|r| r[2].is_empty()));
    assert!(xi.iter().filter(|r| r[0] != r[1]).all(|r| r[2].parse::<f64>().is_ok()));
    assert_eq!(csv_rows(&d.join("int.csv")).len(), 6);
    assert_eq!(csv_rows(&d.join("acc.csv")).len(), 2);
    let rel: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("rel.json")).unwrap()).unwrap();
    assert_eq!(rel["rel_acc"], 50.0);
}

#[test]
fn replay_detects_changed_inputs_and_outputs() {
    let dir = fixture();
    let d = dir.path();
    ok(d, &["eval", "acc", "--weights", "ft0.tvck", "--data", "d0.tvck", "--out", "acc.csv"]);
    std::fs::write(d.join("acc.csv"), "tampered\n").unwrap();
    // rerunning rewrites the output and restores it
    replay_is_identical(d, "acc.csv");

    let mut m = manifest(&d.join("acc.csv"));
    m.outputs[0].sha256 = "0".repeat(64);
    std::fs::write(d.join("acc.csv.manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
    let r = tvkit_in(d, &["replay", "acc.csv.manifest.json"], &[]);
    assert_eq!(r.code, 4, "{}", r.stderr);
    assert!(r.stdout.contains("DIFFERS"));

    ok(d, &["eval", "acc", "--weights", "ft0.tvck", "--data", "d0.tvck", "--out", "acc.csv"]);
    ok(d, &["finetune", "--base", "base.tvck", "--task", "d1.tvck", "--seed", "9", "--epochs", "1", "--out", "ft0.tvck"]);
    let r = tvkit_in(d, &["replay", "acc.csv.manifest.json"], &[]);
    assert_eq!(r.code, 4, "{}", r.stderr);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = fixture();
    let d = dir.path();
    let code = |args: &[&str]| tvkit_in(d, args, &[]).code;
    // configuration
    assert_eq!(code(&["finetune", "--base", "base.tvck", "--task", "d0.tvck", "--lr", "-1", "--out", "x.tvck"]), 2);
    assert_eq!(code(&["finetune", "--base", "missing.tvck", "--task", "d0.tvck", "--out", "x.tvck"]), 2);
    assert_eq!(code(&["learn", "add", "--base", "base.tvck", "--tv", "tv0.tvck", "--data", "d0.tvck", "--K", "0", "--out", "x.json"]), 2);
    assert_eq!(code(&["learn", "add", "--base", "base.tvck", "--tv", "tv0.tvck", "--data", "d0.tvck", "--strategy", "bogus", "--out", "x.json"]), 2);
    assert_eq!(code(&["eval", "relacc", "--abs", "1", "--ref", "0", "--out", "x.json"]), 2);
    assert_eq!(code(&["nonsense"]), 2);
    std::fs::write(d.join("junk.tvck"), b"TVCKjunk").unwrap();
    assert_eq!(code(&["eval", "acc", "--weights", "junk.tvck", "--data", "d0.tvck", "--out", "x.csv"]), 2);
    // numeric
    assert_eq!(code(&["finetune", "--base", "base.tvck", "--task", "d0.tvck", "--lr", "1e200", "--out", "x.tvck"]), 3);
    // protocol: the few-shot target's own task vector
    let r = tvkit_in(d, &["learn", "fewshot", "--base", "base.tvck", "--tv", "tv0.tvck", "--data", "d0.tvck", "--k", "4", "--target-id", "t0", "--out", "x.json"], &[]);
    assert_eq!(r.code, 4, "{}", r.stderr);
    assert!(!d.join("x.json").exists());
}

#[test]
fn zero_epochs_return_the_base_and_runs_are_deterministic() {
    let dir = fixture();
    let d = dir.path();
    ok(d, &["finetune", "--base", "base.tvck", "--task", "d0.tvck", "--epochs", "0", "--out", "same.tvck"]);
    let (_, base) = load_weights(&d.join("base.tvck"), 1).unwrap();
    let (_, same) = load_weights(&d.join("same.tvck"), 1).unwrap();
    assert_eq!(same, base);

    ok(d, &["finetune", "--base", "base.tvck", "--task", "d0.tvck", "--seed", "1", "--out", "again.tvck"]);
    assert_eq!(std::fs::read(d.join("again.tvck")).unwrap(), std::fs::read(d.join("ft0.tvck")).unwrap());

    // noise 0.1 tasks are learned almost perfectly with the defaults
    ok(d, &["eval", "acc", "--weights", "ft0.tvck", "--data", "d0.tvck", "--out", "acc.csv"]);
    let acc: f64 = csv_rows(&d.join("acc.csv"))[0][1].parse().unwrap();
    assert!(acc >= 95.0, "fine-tuned accuracy {acc}");
}

#[test]
fn single_partition_composites_agree() {
    let dir = fixture();
    let d = dir.path();
    let add = |out: &str, extra: &[&str]| {
        let mut args = vec!["learn", "add", "--base", "base.tvck", "--tv", "tv0.tvck", "--tv", "tv1.tvck", "--data", "d0.tvck", "--out", out];
        args.extend_from_slice(extra);
        ok(d, &args);
    };
    add("plain.json", &[]);
    add("k1.json", &["--K", "1"]);
    let plain = std::fs::read(d.join("plain.tvck")).unwrap();
    assert_eq!(std::fs::read(d.join("k1.tvck")).unwrap(), plain);

    let report = tvkit::learn::LearnReport::from_json(&std::fs::read_to_string(d.join("k1.json")).unwrap()).unwrap();
    let (_, base) = load_weights(&d.join("base.tvck"), 1).unwrap();
    let tvs = ["tv0.tvck", "tv1.tvck"].map(|p| tvck::load(d.join(p)).unwrap());
    let rebuilt = report.compose(&base, &tvs).unwrap();
    let (_, composed) = load_weights(&d.join("k1.tvck"), 1).unwrap();
    assert_eq!(rebuilt, composed);
}

#[test]
fn empty_random_basis_reports_zero_shot_relative_accuracy() {
    let dir = fixture();
    let d = dir.path();
    ok(d, &["eval", "intrinsic", "--base", "base.tvck", "--data", "d1.tvck", "--basis", "random", "--bases", "0", "--ref", "80", "--out", "int.csv"]);
    ok(d, &["eval", "acc", "--weights", "base.tvck", "--data", "d1.tvck", "--out", "zs.csv"]);
    let zs: f64 = csv_rows(&d.join("zs.csv"))[0][1].parse().unwrap();
    let rows = csv_rows(&d.join("int.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][3].parse::<f64>().unwrap(), zs);
    assert!((rows[0][4].parse::<f64>().unwrap() - 100.0 * zs / 80.0).abs() < 1e-9);
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = fixture();
    let d = dir.path();
    let args = ["learn", "add", "--base", "base.tvck", "--tv", "tv0.tvck", "--data", "d0.tvck", "--out", "t.json"];
    let r = tvkit_in(d, &args, &[("TVKIT_THREADS", "3")]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(manifest(&d.join("t.json")).threads, 3);
    replay_is_identical(d, "t.json");
    ok(d, &["--threads", "2", "learn", "add", "--base", "base.tvck", "--tv", "tv0.tvck", "--data", "d0.tvck", "--out", "u.json"]);
    let m = manifest(&d.join("u.json"));
    assert_eq!(m.threads, 2);
    assert!(!m.command.iter().any(|a| a.starts_with("--threads")));
    assert_eq!(tvkit_in(d, &args, &[("TVKIT_THREADS", "0")]).code, 2);
}

#[test]
fn tuned_negation_keeps_the_control_task() {
    let w = arithmetic_world(0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    save_weights(&d.join("base.tvck"), w.model.config(), &w.theta0).unwrap();
    tvck::save(d.join("tv.tvck"), &w.tvs[0]).unwrap();
    tvck::save(d.join("target.tvck"), &w.tasks[0]).unwrap();
    tvck::save(d.join("control.tvck"), &w.pretrain).unwrap();
    ok(d, &["learn", "negate", "--base", "base.tvck", "--tv", "tv.tvck", "--target", "target.tvck", "--control", "control.tvck", "--epochs", "20", "--batch-size", "32", "--tune", "--out", "neg.json"]);
    ok(d, &["eval", "negation", "--base", "base.tvck", "--weights", "neg.tvck", "--target", "target.tvck", "--control", "control.tvck", "--out", "check.json"]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("check.json")).unwrap()).unwrap();
    assert_eq!(v["pass"], true, "{v}");
    assert!(v["target"].as_f64().unwrap() < v["target_pretrained"].as_f64().unwrap(), "{v}");
    let (_, edited) = load_weights(&d.join("neg.tvck"), 1).unwrap();
    assert_ne!(edited, w.theta0);
}
