use std::path::Path;
use std::process::{Command, Output};

use gancompress::export::count_params;
use gancompress::pipeline::RunConfig;
use gancompress::train::{save_model, GenModel, SaveExtras};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gancompress"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn line_value(text: &str, prefix: &str) -> u64 {
    text.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or_else(|| panic!("no `{prefix}` line in:\n{text}"))
}

#[test]
fn count_matches_library_totals() {
    let o = cli(&["count"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let gen = GenModel::<f32>::build(&RunConfig::default().generator).unwrap();
    let expected = count_params(&gen.arch).unwrap();
    assert_eq!(line_value(&text, "generator (student) params"), expected);
    assert_eq!(line_value(&text, "generator stored values"), expected);
}

#[test]
fn unknown_subcommand_and_flag_fail_with_usage() {
    for args in [&["frobnicate"][..], &["--bogus", "count"][..]] {
        let o = cli(args);
        assert!(!o.status.success());
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 7;
    cfg.set_alpha(0.55);
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    let p = path.to_str().unwrap();

    let o = cli(&["--config", p, "config"]);
    let from_file: RunConfig = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(from_file.train.epochs, 7);
    assert_eq!(from_file.generator.mask.alpha, 0.55);

    let o = cli(&[
        "--config",
        p,
        "--alpha",
        "0.8",
        "--ablation",
        "two_step",
        "--seed",
        "9",
        "config",
    ]);
    let merged: RunConfig = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(merged.generator.mask.alpha, 0.8);
    assert_eq!(merged.train.epochs, 7);
    assert_eq!(merged.train.seed, 9);
    assert_eq!(merged.generator.seed, 9);
    assert_eq!(
        serde_json::from_str::<serde_json::Value>(&stdout(&o)).unwrap()["train"]["ablation"],
        "two_step"
    );

    assert!(!cli(&["--ablation", "sometimes", "config"]).status.success());
}

fn write_student(dir: &Path) -> String {
    let gen = GenModel::<f32>::build(&RunConfig::default().generator).unwrap();
    let path = dir.join("student.ppcd");
    save_model(&path, &gen, SaveExtras::default()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn class_interpolation_writes_one_image_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_student(dir.path());
    let out = dir.path().join("gen");
    let out = out.to_str().unwrap();
    for (mode, file) in [("class", "interpolate_class.png"), ("z", "interpolate_z.png")] {
        let o = cli(&[
            "--out",
            out,
            "generate",
            "--checkpoint",
            &ckpt,
            "--interpolate",
            mode,
            "--steps",
            "5",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).starts_with("wrote 5 images"));
        assert!(Path::new(out).join(file).exists());
    }
}

#[test]
fn compress_refuses_unfrozen_student() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_student(dir.path());
    let o = cli(&["--out", dir.path().to_str().unwrap(), "compress", "--checkpoint", &ckpt]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("binarization incomplete"));
}

#[test]
fn gradcheck_passes() {
    let o = cli(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("PASS pp_res_block")));
}

#[test]
fn sweep_emits_one_directory_per_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cli(&[
        "--out",
        out,
        "--ablation",
        "no_cd",
        "--epochs",
        "1",
        "--steps-per-epoch",
        "2",
        "sweep-alpha",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for a in ["0.5", "0.6", "0.7", "0.8"] {
        assert!(
            dir.path().join(format!("alpha_{a}")).join("metrics.csv").exists(),
            "alpha {a}"
        );
    }
    let summary = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
}
