use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn refsketch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refsketch")).args(args).output().unwrap()
}

fn fixtures(dir: &Path) -> String {
    let fx = dir.join("fx");
    let out = refsketch(&["fixtures", "--out", fx.to_str().unwrap()]);
    assert!(out.status.success());
    fx.to_str().unwrap().to_string()
}

#[test]
fn generate_writes_outputs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixtures(tmp.path());
    let run = |name: &str| {
        let out_dir = tmp.path().join(name);
        let o = refsketch(&[
            "generate", "--content", &format!("{fx}/dog.png"), "--reference", &format!("{fx}/hatch.png"),
            "--steps", "20", "--out", out_dir.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        out_dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["sketch.png", "result.json", "mask.pgm"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read(a.join("sketch.png")).unwrap(), fs::read(b.join("sketch.png")).unwrap());

    // result.json alone reproduces the run.
    let c = tmp.path().join("c");
    let o = refsketch(&[
        "generate", "--content", &format!("{fx}/dog.png"), "--reference", &format!("{fx}/hatch.png"),
        "--config", a.join("result.json").to_str().unwrap(), "--out", c.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(a.join("sketch.png")).unwrap(), fs::read(c.join("sketch.png")).unwrap());
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixtures(tmp.path());
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, "gamma = 0.6\nseed = 3\n").unwrap();
    let out = tmp.path().join("o");
    let o = refsketch(&[
        "generate", "--content", &format!("{fx}/house.png"), "--reference", &format!("{fx}/dots.png"),
        "--config", cfg.to_str().unwrap(), "--seed", "9", "--steps", "10", "--beta-sg", "2", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(v["config"]["gamma"], 0.6);
    assert_eq!(v["config"]["seed"], 9);
    assert_eq!(v["config"]["beta_sg"], 2.0);
    assert_eq!(v["config"]["total_steps"], 10);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixtures(tmp.path());
    let out = tmp.path().join("o");
    let missing = refsketch(&[
        "generate", "--content", &format!("{fx}/dog.png"), "--reference", &format!("{fx}/nope.png"), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.png"));

    let bad = refsketch(&[
        "generate", "--content", &format!("{fx}/dog.png"), "--reference", &format!("{fx}/hatch.png"), "--zeta", "-1", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(2));

    let unsupported = refsketch(&[
        "generate", "--content", &format!("{fx}/dog.png"), "--reference", &format!("{fx}/hatch.png"), "--backend", "sd-adapter",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(unsupported.status.code(), Some(3));

    let ok = refsketch(&["verify-inversion", "--image", &format!("{fx}/dog.png"), "--steps", "1"]);
    assert_eq!(ok.status.code(), Some(0));
    let ok = refsketch(&["verify-inversion", "--image", &format!("{fx}/dog.png")]);
    assert_eq!(ok.status.code(), Some(0));
    let corrupt = refsketch(&["verify-inversion", "--image", &format!("{fx}/dog.png"), "--steps", "10", "--corrupt-trace"]);
    assert_eq!(corrupt.status.code(), Some(4));
}

#[test]
fn sweep_ablate_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixtures(tmp.path());
    let manifest = tmp.path().join("run.toml");
    fs::write(
        &manifest,
        format!(
            "output_dir = \"out\"\n[[pairs]]\ncontent = \"{fx}/dog.png\"\nreference = \"{fx}/bold.png\"\n[config]\ntotal_steps = 10\nskip_steps = 3\ninjection_windows = {{ 32 = [1, 7], 64 = [1, 9] }}\nguidance_window = [2, 10]\nsemantic_window = [2, 10]\n"
        ),
    )
    .unwrap();
    let m = manifest.to_str().unwrap();
    let o = refsketch(&["sweep", "--manifest", m, "--sweep", "zeta=0.8,1.67,3.5", "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for z in ["0.8", "1.67", "3.5"] {
        assert!(tmp.path().join(format!("out/cell_zeta-{z}/sketch.png")).exists());
    }
    assert!(tmp.path().join("out/contact_sheet.png").exists());

    let o = refsketch(&["ablate", "--manifest", m]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["full.png", "no-dam.png", "no-spm.png", "no-sdpe.png", "report.json"] {
        assert!(tmp.path().join("out").join(f).exists(), "{f}");
    }

    let o = refsketch(&["eval", "--manifest", m]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["aggregates"]["content_l1"].is_number());

    let o = refsketch(&["sweep", "--manifest", m, "--sweep", "gamma=0.2,7"]);
    assert_eq!(o.status.code(), Some(2));
}
