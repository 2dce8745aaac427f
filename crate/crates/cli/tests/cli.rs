use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::CommandFactory;
use lupi_cli::Cli;
use lupi_core::dataset::{read_archive, ClassTag};

fn lupi(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lupi"))
        .arg("--runs-dir")
        .arg(runs)
        .arg("--log-level")
        .arg("warn")
        .args(args)
        .output()
        .expect("spawn lupi")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn last_line(s: &str) -> PathBuf {
    PathBuf::from(s.lines().last().expect("output path").trim())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Scenes plus a 32 px archive in `tmp`.
fn small_archive(tmp: &Path) -> PathBuf {
    let runs = tmp.join("runs");
    let scenes = tmp.join("scenes");
    let archive = tmp.join("patches");
    ok(lupi(
        &runs,
        &["synth", "--out", p(&scenes), "--patients", "4", "--images-per-patient", "2", "--seed", "5"],
    ));
    ok(lupi(
        &runs,
        &["extract", "--scenes", p(&scenes), "--out", p(&archive), "--patch-size", "32", "--seed", "9"],
    ));
    archive
}

#[test]
fn every_flag_is_documented() {
    let cmd = Cli::command();
    let top = String::from_utf8(Command::new(env!("CARGO_BIN_EXE_lupi")).arg("--help").output().unwrap().stdout)
        .unwrap();
    for sub in cmd.get_subcommands() {
        let name = sub.get_name();
        assert!(sub.get_about().is_some(), "{name} has no description");
        assert!(top.contains(name), "{name} missing from top-level help");
        let help = Command::new(env!("CARGO_BIN_EXE_lupi")).args([name, "--help"]).output().unwrap();
        assert!(help.status.success());
        let help = String::from_utf8(help.stdout).unwrap();
        for arg in sub.get_arguments() {
            let Some(long) = arg.get_long() else { continue };
            if matches!(long, "help" | "version") {
                continue;
            }
            assert!(arg.get_help().is_some(), "{name} --{long} has no help text");
            assert!(help.contains(&format!("--{long}")), "{name} --help lacks --{long}");
        }
    }
}

#[test]
fn synth_then_extract_fills_every_image() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = small_archive(tmp.path());
    let (manifest, patches) = read_archive(&archive).unwrap();
    assert_eq!(patches.len(), 8 * 80);
    assert_eq!(manifest.seed, Some(9));
    for img in manifest.patches.chunks(80) {
        let healthy = img.iter().filter(|e| e.class_tag == ClassTag::Healthy).count();
        assert_eq!(healthy, 40);
        assert!(img.iter().all(|e| e.source_image_id == img[0].source_image_id));
    }
    let runs: Vec<_> = std::fs::read_dir(tmp.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 2);
    for r in runs {
        let dir = r.unwrap().path();
        let name = dir.file_name().unwrap().to_str().unwrap().to_owned();
        assert!(name.as_bytes()[12] == b'-', "{name}");
        assert!(name[..12].chars().all(|c| c.is_ascii_hexdigit()), "{name}");
        assert!(dir.join("config.toml").is_file());
    }
}

#[test]
fn pi_with_alpha_one_matches_the_student_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = small_archive(tmp.path());
    let runs = tmp.path().join("runs");
    let common = ["--archive", p(&archive), "--max-steps", "3", "--base-width", "2", "--seed", "4"];
    let teacher = tmp.path().join("teacher.ckpt");
    let student = tmp.path().join("student.ckpt");
    let pi = tmp.path().join("pi.ckpt");

    let mut args = vec!["train", "--mode", "teacher", "--checkpoint", p(&teacher)];
    args.extend(common);
    ok(lupi(&runs, &args));
    let mut args = vec!["train", "--mode", "student", "--checkpoint", p(&student)];
    args.extend(common);
    ok(lupi(&runs, &args));
    let mut args = vec!["train", "--mode", "pi", "--alpha", "1", "--teacher", p(&teacher), "--checkpoint", p(&pi)];
    args.extend(common);
    ok(lupi(&runs, &args));

    assert_eq!(std::fs::read(&student).unwrap(), std::fs::read(&pi).unwrap());
    assert_ne!(std::fs::read(&student).unwrap(), std::fs::read(&teacher).unwrap());

    let f1: f64 = ok(lupi(&runs, &["evaluate", "--checkpoint", p(&teacher), "--archive", p(&archive)]))
        .trim()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&f1));
}

#[test]
fn pi_mode_needs_a_teacher() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lupi(tmp.path(), &["train", "--mode", "pi", "--archive", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2_with_the_key_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[extraction]\npatch_sise = 32\n").unwrap();
    let out = lupi(tmp.path(), &["--config", p(&cfg), "synth"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("extraction") && err.contains("patch_sise"), "{err}");

    std::fs::write(&cfg, "[train]\nalpha = 2.0\n").unwrap();
    let out = lupi(tmp.path(), &["--config", p(&cfg), "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));

    let out = lupi(tmp.path(), &["synth", "--patients", "many"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent");
    let out = lupi(tmp.path(), &["extract", "--scenes", p(&missing)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let out = lupi(tmp.path(), &["report", "--metrics", p(&missing.join("metrics.json"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_map_writes_metrics_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = small_archive(tmp.path());
    let cfg = tmp.path().join("map.toml");
    std::fs::write(
        &cfg,
        "[train]\nbase_width = 2\nmax_steps = 2\nbatch_size = 4\n\n\
         [split]\ntrain_patients = 3\nfolds = 2\n\n\
         [map]\nfolds = [1]\nrange_ends = [16]\nrepetitions = 2\ncv_folds = 2\nalphas = [0.5]\nseeds = [21, 22]\n",
    )
    .unwrap();
    let runs = tmp.path().join("runs");
    let out = ok(lupi(
        &runs,
        &["--config", p(&cfg), "run-map", "--archive", p(&archive), "--workers", "1"],
    ));
    let dir = last_line(&out);
    let table = std::fs::read_to_string(dir.join("report.txt")).unwrap();
    assert!(table.contains("# seeds: 21 22"), "{table}");
    assert!(table.contains("E1"));
    let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    // teacher, student and one PI student, two repetitions each
    assert_eq!(csv.lines().filter(|l| l.starts_with("E1,")).count(), 6, "{csv}");

    let metrics = dir.join("metrics.json");
    let rendered = ok(lupi(&runs, &["report", "--metrics", p(&metrics), "--format", "table-text"]));
    assert_eq!(rendered, table);
}
