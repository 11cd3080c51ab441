use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use srrm::cli::RunManifest;
use srrm::evaluation::read_csv;

const SMALL: &str = "seed = 5
[scene]
rows = 20
cols = 20
season_days = 9
[pipeline]
candidate_k = [1, 2]
candidate_ridge = [0.01, 0.1]
folds = 3
[cluster]
max_iterations = 30
";

fn srrm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srrm"))
        .args(args)
        .env_remove("SRRM_OUT")
        .output()
        .unwrap()
}

fn config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn files_under(dir: &Path) -> Vec<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

#[test]
fn validate_shipped_example() {
    let example = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let out = srrm(&["validate", "--config", example.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let resolved: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(resolved["scene"]["rows"].as_integer(), Some(60));
    assert_eq!(resolved["cluster"]["max_iterations"].as_integer(), Some(200));
    assert!(resolved["noise"]["seed"].as_integer().is_some());
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = config(dir.path(), &SMALL.replace("folds = 3", "folds = 3\nwindow = 4"));
    let out = srrm(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("window"), "{msg}");
    assert_eq!(msg.trim_end().lines().count(), 1, "{msg}");

    let path = config(dir.path(), &SMALL.replace("season_days = 9\n", ""));
    let out = srrm(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("season_days"), "{}", stderr(&out));

    let out = srrm(&["validate", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_are_nonzero() {
    assert_ne!(srrm(&["downscale"]).status.code(), Some(0));
    assert_ne!(srrm(&["frobnicate"]).status.code(), Some(0));
    assert_eq!(srrm(&["--help"]).status.code(), Some(0));
}

#[test]
fn generate_writes_scene_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = config(dir.path(), SMALL);
    let out_dir = dir.path().join("gen");
    let out = srrm(&["generate", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let m = manifest(&out_dir);
    assert_eq!(m.command, "generate");
    assert_eq!(m.seed, 5);
    assert_eq!(m.days.len(), 9);
    assert_eq!(m.outputs, files_under(&out_dir));
    let scene = srrm::scene::Scene::read_dir(out_dir.join("scene")).unwrap();
    assert_eq!(scene.len(), 9);
}

#[test]
fn downscale_lists_every_artifact_and_leaves_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let path = config(dir.path(), SMALL);
    let gen = dir.path().join("gen");
    assert_eq!(
        srrm(&["generate", "--config", path.to_str().unwrap(), "--out", gen.to_str().unwrap()]).status.code(),
        Some(0)
    );
    let scene_dir = gen.join("scene");
    let before: Vec<Vec<u8>> = files_under(&scene_dir).iter().map(|f| fs::read(scene_dir.join(f)).unwrap()).collect();
    let config_before = fs::read(&path).unwrap();

    let out_dir = dir.path().join("run");
    let out = srrm(&[
        "downscale",
        "--config",
        path.to_str().unwrap(),
        "--scene",
        scene_dir.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--cadence",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let m = manifest(&out_dir);
    assert_eq!(m.outputs, files_under(&out_dir));
    let days: Vec<usize> = m.days.iter().map(|d| d.day).collect();
    assert_eq!(days, vec![1, 5, 9]);
    assert!(m.days.iter().all(|d| d.status == "ok"));
    assert_eq!(m.parameters["cadence"], "4");
    assert!(out_dir.join("days/day_005/tb_estimate.grid").exists());
    assert!(out_dir.join("report/summary.csv").exists());

    let after: Vec<Vec<u8>> = files_under(&scene_dir).iter().map(|f| fs::read(scene_dir.join(f)).unwrap()).collect();
    assert_eq!(before, after);
    assert_eq!(config_before, fs::read(&path).unwrap());
}

#[test]
fn downscale_is_deterministic_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out_dir, jobs) in [(&a, "1"), (&b, "3")] {
        let out = srrm(&[
            "downscale",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--jobs",
            jobs,
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    for f in files.iter().filter(|f| f.as_str() != "manifest.json") {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(manifest(&a).config_sha256, manifest(&b).config_sha256);
}

#[test]
fn seed_flag_changes_results_and_hash_tracks_text() {
    let dir = tempfile::tempdir().unwrap();
    let path = config(dir.path(), SMALL);
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["generate", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert_eq!(srrm(&args).status.code(), Some(0));
        manifest(out)
    };
    let base = run(&dir.path().join("a"), &[]);
    let seeded = run(&dir.path().join("b"), &["--seed", "77"]);
    assert_eq!(seeded.seed, 77);
    assert_eq!(base.config_sha256, seeded.config_sha256);
    assert_ne!(
        fs::read(dir.path().join("a/scene/day_001.grid")).unwrap(),
        fs::read(dir.path().join("b/scene/day_001.grid")).unwrap()
    );
    fs::write(&path, format!("{SMALL}\n")).unwrap();
    let edited = run(&dir.path().join("c"), &[]);
    assert_ne!(base.config_sha256, edited.config_sha256);
}

#[test]
fn iterstudy_emits_checkpoint_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = config(dir.path(), &SMALL.replace("max_iterations = 30", "max_iterations = 40"));
    let out_dir = dir.path().join("study");
    let out = Command::new(env!("CARGO_BIN_EXE_srrm"))
        .args(["iterstudy", "--config", path.to_str().unwrap(), "--day", "4"])
        .env("SRRM_OUT", &out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let (header, rows) = read_csv(out_dir.join("iteration_study.csv")).unwrap();
    assert_eq!(header, ["iteration", "cost", "rmse", "sd", "bias", "mae"]);
    let iters: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(iters, ["0", "10", "20", "30", "40"]);
    let m = manifest(&out_dir);
    assert_eq!(m.parameters["day"], "4");
    assert_eq!(m.parameters["k"], "2");
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = config(dir.path(), SMALL);
    let out = srrm(&[
        "downscale",
        "--config",
        path.to_str().unwrap(),
        "--scene",
        dir.path().join("nowhere").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let out = srrm(&[
        "iterstudy",
        "--config",
        path.to_str().unwrap(),
        "--day",
        "50",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
