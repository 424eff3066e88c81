mod common;

use common::{differing, lsap, ok, run_battery, s, snapshot, FAST_CONFIG};
use lsap_core::config::RunConfig;
use lsap_core::Tensor;
use serde_json::Value;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use tempfile::TempDir;

/// One full battery shared by the inspection tests.
fn battery() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let t = TempDir::new().unwrap();
        run_battery(t.path(), &[]);
        t
    })
    .path()
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

#[test]
fn every_subcommand_writes_its_outputs() {
    let root = battery();
    let expect = [
        ("gen", &["generator.lsag", "generator.json"][..]),
        ("mean", &["mean_code.bin", "mean_code.json"]),
        ("sample", &["sample_0000.png", "sample_0003.png", "codes_w.bin", "codes_sn.bin", "images.lsat", "sample_report.json"]),
        ("invert", &["trajectory.csv", "reconstruction.png", "code.bin", "report.json"]),
        ("train", &["encoder.lsae", "train_curve.csv", "train_report.json"]),
        ("encode", &["code.bin", "reconstruction.png", "encode_report.json"]),
        ("nscd", &["nscd.csv", "nscd.json"]),
        ("direction", &["direction.bin", "direction.json"]),
        ("edit", &["code.bin", "edited_0000.png", "edit_report.json"]),
        ("lec", &["lec.csv", "lec_report.json"]),
        ("ablate", &["table5_trend.csv", "ablation_report.json"]),
        ("props", &["properties_report.json"]),
        ("project", &["projection.csv", "projection.json"]),
    ];
    for (dir, files) in expect {
        for f in files {
            assert!(root.join(dir).join(f).is_file(), "{}/{} missing", dir, f);
        }
    }
}

#[test]
fn reports_carry_the_expected_content() {
    let root = battery();
    let traj = fs::read_to_string(root.join("invert/trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 21);
    assert!(traj.starts_with("step,image_loss,nscd,total\n"));
    let report = json(&root.join("invert/report.json"));
    assert_eq!(report["lambda"], 20.0);
    assert_eq!(report["lambda_retuned"], 0.1);
    assert!(report.get("wall_clock_secs").is_none());

    let ablate = fs::read_to_string(root.join("ablate/table5_trend.csv")).unwrap();
    let lambdas: Vec<&str> = ablate.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(lambdas, ["0", "1"]);

    let nscd = fs::read_to_string(root.join("nscd/nscd.csv")).unwrap();
    assert_eq!(nscd.lines().count(), 5);
    let props = json(&root.join("props/properties_report.json"));
    assert!(props["checks"].as_array().unwrap().len() > 60);
    let lec = fs::read_to_string(root.join("lec/lec.csv")).unwrap();
    assert_eq!(lec.lines().count(), 4);
    assert_eq!(json(&root.join("direction/direction.json"))["attribute"], "brightness");
    let proj = fs::read_to_string(root.join("project/projection.csv")).unwrap();
    assert_eq!(proj.lines().skip(1).count(), 4);
}

#[test]
fn generator_files_are_canonical() {
    let root = battery();
    let bytes = fs::read(root.join("gen/generator.lsag")).unwrap();
    let g = lsap_core::Generator::from_bytes(&bytes).unwrap();
    assert_eq!(json(&root.join("gen/generator.json"))["checksum"], g.checksum());
    let images = Tensor::from_bytes(&fs::read(root.join("sample/images.lsat")).unwrap()).unwrap();
    assert_eq!(images.shape(), &[4, 3, 32, 32]);
}

#[test]
fn outputs_are_reproducible_across_runs_and_thread_counts() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    run_battery(a.path(), &[("LSAP_THREADS", "1")]);
    run_battery(b.path(), &[("LSAP_THREADS", "3")]);
    let diff = differing(&snapshot(a.path()), &snapshot(b.path()));
    assert!(diff.is_empty(), "differing files: {:?}", diff);
}

#[test]
fn print_config_round_trips() {
    let out = ok(&["print-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::default());
    let t = TempDir::new().unwrap();
    let p = t.path().join("c.json");
    fs::write(&p, FAST_CONFIG).unwrap();
    let text = String::from_utf8(ok(&["print-config", "--config", s(&p)]).stdout).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap().mean_code.k_samples, 2000);
}

fn code(out: &std::process::Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn invalid_input_exits_with_two() {
    let root = battery();
    let t = TempDir::new().unwrap();
    let out_dir = t.path().join("o");
    let bad_cfg = t.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"inversion": {"lamda": 1}}"#).unwrap();
    let gen = root.join("gen/generator.lsag");
    let cases: Vec<Vec<String>> = vec![
        vec!["init-gen".into(), "--config".into(), s(&bad_cfg).into(), "--out".into(), s(&out_dir).into()],
        vec!["sample".into(), "--gen".into(), s(&t.path().join("missing")).into(), "--out".into(), s(&out_dir).into()],
        vec!["sample".into(), "--gen".into(), s(&bad_cfg).into(), "--out".into(), s(&out_dir).into()],
        vec!["find-direction".into(), "--gen".into(), s(&gen).into(), "--attribute".into(), "colour".into(), "--out".into(), s(&out_dir).into()],
        vec!["project".into(), "--codes".into(), s(&root.join("sample/codes_w.bin")).into(), "--out".into(), s(&out_dir).into()],
        vec!["lec".into(), "--gen".into(), s(&gen).into(), "--direction".into(), s(&root.join("direction/direction.bin")).into(), "--out".into(), s(&out_dir).into()],
        vec!["invert".into(), "--gen".into(), s(&gen).into(), "--mean-code".into(), s(&root.join("mean/mean_code.bin")).into(), "--target".into(), s(&gen).into(), "--out".into(), s(&out_dir).into()],
        vec!["no-such-command".into()],
    ];
    for args in cases {
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = lsap(&a);
        assert_eq!(code(&out), 2, "{:?}: {}", a, String::from_utf8_lossy(&out.stderr));
        assert!(!out_dir.exists(), "{:?} left outputs behind", a);
    }
}

#[test]
fn mean_code_from_another_generator_is_rejected() {
    let root = battery();
    let t = TempDir::new().unwrap();
    let other_cfg = t.path().join("c.json");
    fs::write(&other_cfg, r#"{"seed": 99}"#).unwrap();
    ok(&["init-gen", "--config", s(&other_cfg), "--out", s(&t.path().join("g"))]);
    let out = lsap(&[
        "ablate", "--gen", s(&t.path().join("g/generator.lsag")),
        "--mean-code", s(&root.join("mean/mean_code.bin")), "--out", s(&t.path().join("o")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn numeric_failure_exits_with_three_and_a_diagnostic() {
    let root = battery();
    let t = TempDir::new().unwrap();
    let huge = Tensor::filled(&[3, 32, 32], 1e200);
    let target = t.path().join("huge.lsat");
    fs::write(&target, huge.to_bytes()).unwrap();
    let out_dir = t.path().join("o");
    let out = lsap(&[
        "invert", "--gen", s(&root.join("gen/generator.lsag")),
        "--mean-code", s(&root.join("mean/mean_code.bin")),
        "--target", s(&target), "--steps", "5", "--out", s(&out_dir),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files, ["diagnostic.json"]);
    let diag = json(&out_dir.join("diagnostic.json"));
    assert_eq!(diag["status"], "numeric_failure");
    assert_eq!(diag["step"], 0);
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = common::lsap_env(&["print-config"], &[("LSAP_THREADS", "zero")]);
    assert_eq!(code(&out), 2);
}
