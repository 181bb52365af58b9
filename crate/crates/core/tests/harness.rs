use std::fs;
use std::path::Path;

use refsketch::backends::fixtures;
use refsketch::harness::*;
use refsketch::pipeline::{ablate, generate_sketch, Module};
use refsketch::{Backends, Error, Image, PipelineConfig};
use serde_json::json;

fn short() -> PipelineConfig {
    PipelineConfig::default().with_total_steps(20)
}

fn manifest(dir: &Path) -> RunManifest {
    fixtures::write_all(&dir.join("fx")).unwrap();
    RunManifest::single(dir.join("fx/dog.png"), dir.join("fx/hatch.png"), short(), dir.join("out"))
}

#[test]
fn manifest_file_resolves_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    fixtures::write_all(&tmp.path().join("fx")).unwrap();
    let text = r#"
output_dir = "out"
[[pairs]]
content = "fx/dog.png"
reference = "fx/dots.png"
[config]
total_steps = 20
skip_steps = 6
injection_windows = { 32 = [3, 14], 64 = [3, 18] }
guidance_window = [4, 20]
semantic_window = [4, 20]
[sweep]
gamma = [0.6, 0.15]
"#;
    let path = tmp.path().join("run.toml");
    fs::write(&path, text).unwrap();
    let m = RunManifest::load(&path).unwrap();
    assert_eq!(m.pairs[0].content, tmp.path().join("fx/dog.png"));
    assert_eq!(m.output_dir, tmp.path().join("out"));
    assert_eq!(m.config.total_steps, 20);
    assert_eq!(m.sweep_cells().unwrap().len(), 2);

    fs::write(&path, text.replace("dots.png", "missing.png")).unwrap();
    let err = RunManifest::load(&path).unwrap_err();
    assert!(matches!(err, Error::MissingFile(_)));
    assert_eq!(exit_code(&err), EXIT_INPUT);
    fs::write(&path, text.replace("gamma = [0.6, 0.15]", "gama = [0.6]")).unwrap();
    assert!(matches!(RunManifest::load(&path), Err(Error::Config(_))));
}

#[test]
fn single_run_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    let b = Backends::toy();
    let out = run_single(&m, &b).unwrap();
    let (result, files) = &out[0];
    assert!(files.image_path.exists() && files.mask_path.exists() && files.result_path.exists());
    let png = Image::load(&files.image_path).unwrap();
    assert_eq!((png.width(), png.height()), (32, 32));
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(&files.result_path).unwrap()).unwrap();
    assert_eq!(sidecar["config_hash"], json!(result.config.hash()));
    assert_eq!(sidecar["mask"], json!("mask.pgm"));
    // The sidecar alone reproduces the run.
    let cfg = PipelineConfig::load(&files.result_path).unwrap();
    assert_eq!(cfg.hash(), result.config.hash());
    let again = generate_sketch(&fixtures::content("dog").unwrap(), &fixtures::reference("hatch").unwrap(), &cfg, &b).unwrap();
    assert_eq!(again.png_bytes().unwrap(), fs::read(&files.image_path).unwrap());
    let pgm = fs::read(&files.mask_path).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
}

#[test]
fn sweep_cells_are_independent_of_job_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = manifest(tmp.path());
    m.sweep.insert("gamma".into(), vec![json!(0.6), json!(0.15), json!(0.25)]);
    let b = Backends::toy();
    let serial = run_sweep(&m, &b, 1).unwrap();
    let names: Vec<_> = serial.cells.iter().map(|(c, _)| c.name.clone()).collect();
    assert_eq!(names, ["gamma-0.15", "gamma-0.25", "gamma-0.6"]);
    for (c, o) in &serial.cells {
        assert!(o.image_path.starts_with(tmp.path().join("out").join(format!("cell_{}", c.name))));
    }
    let sheet = Image::load(&serial.contact_sheets[0]).unwrap();
    assert_eq!((sheet.width(), sheet.height()), (3 * 32 + 4 * 2, 32 + 2 * 2));
    m.output_dir = tmp.path().join("out2");
    let parallel = run_sweep(&m, &b, 3).unwrap();
    for ((_, a), (_, b)) in serial.cells.iter().zip(&parallel.cells) {
        assert_eq!(a.image_sha256, b.image_sha256);
    }
}

#[test]
fn empty_sweep_is_a_single_run() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    let out = run_sweep(&m, &Backends::toy(), 1).unwrap();
    assert_eq!(out.cells.len(), 1);
    assert!(out.contact_sheets.is_empty());
    assert!(tmp.path().join("out/sketch.png").exists());
}

#[test]
fn invalid_sweep_value_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = manifest(tmp.path());
    m.sweep.insert("zeta".into(), vec![json!(0.8), json!(-1.0)]);
    assert!(matches!(run_sweep(&m, &Backends::toy(), 1), Err(Error::Config(_))));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn ablation_report() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    let reports = run_ablation(&m, &Backends::toy(), 2).unwrap();
    let r = &reports[0];
    assert_eq!(r.outputs.len(), 4);
    assert_eq!(r.diffs.len(), 6);
    let load = |name: &str| Image::load(&tmp.path().join("out").join(&r.outputs[name])).unwrap();
    for d in &r.diffs {
        assert!(d.mean_abs_diff > 0.0, "{} vs {}", d.a, d.b);
        let recomputed = load(&d.a).mean_abs_diff(&load(&d.b)).unwrap();
        assert!((recomputed - d.mean_abs_diff).abs() < 1e-12);
    }
    let on_disk: AblationReport = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(&on_disk, r);
}

#[test]
fn everything_ablated_equals_neutral_collapse() {
    let b = Backends::toy();
    let c = short();
    let all = ablate(&c, &Module::ALL.into_iter().collect());
    let (dog, hatch) = (fixtures::content("dog").unwrap(), fixtures::reference("hatch").unwrap());
    let a = generate_sketch(&dog, &hatch, &all, &b).unwrap();
    let n = generate_sketch(&dog, &hatch, &refsketch::pipeline::neutralized(&c), &b).unwrap();
    assert_eq!(a.png_bytes().unwrap(), n.png_bytes().unwrap());
}

#[test]
fn inversion_verification() {
    let b = Backends::toy();
    let img = fixtures::content("house").unwrap();
    for steps in [1, 10, 50] {
        let r = verify_inversion(&img, &PipelineConfig::default().with_total_steps(steps), &b, false).unwrap();
        assert!(r.passed(), "{steps}: {}", r.max_abs_error);
    }
    let bad = verify_inversion(&img, &short(), &b, true).unwrap();
    assert!(!bad.passed());
}

#[test]
fn eval_aggregates_are_means() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = manifest(tmp.path());
    m.pairs.push(ImagePair {
        content: tmp.path().join("fx/house.png"),
        reference: tmp.path().join("fx/dots.png"),
    });
    let report = run_eval(&m, &Backends::toy(), &default_metrics()).unwrap();
    assert_eq!(report.per_pair.len(), 2);
    for (name, agg) in &report.aggregates {
        let mean = report.per_pair.iter().map(|p| p.scores[name]).sum::<f64>() / 2.0;
        assert!((mean - agg).abs() < 1e-9);
    }
    assert!(report.combined.is_some());
    assert!(tmp.path().join("out/metrics.json").exists());
    assert!(tmp.path().join("out/pair-1/sketch.png").exists());
}
