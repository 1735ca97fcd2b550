use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gsopt::synthetic::{generate, Scene};
use gsopt::Image;
use serde_json::Value;
use tempfile::TempDir;

fn gsopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsopt"))
        .args(args)
        .output()
        .expect("spawn gsopt")
}

fn small_setup(dir: &Path) -> (String, String) {
    let img = dir.join("target.png");
    generate(Scene::StillLife, 32, 32, 3).save_png(&img).unwrap();
    let cfg = dir.join("fit.cfg");
    fs::write(
        &cfg,
        "# short run\ntotal_iters = 30\nswitch_iter = 25\nwarmup_iters = 10\ninit_count = 20\nmax_gaussians = 40\ndensify_interval = 10\n",
    )
    .unwrap();
    (img.display().to_string(), cfg.display().to_string())
}

fn json_stdout(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "bad json ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

#[test]
fn fit_missing_image_fails_without_outputs() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let o = gsopt(&["fit", "--image", "/nonexistent/x.png", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!out.exists());
}

#[test]
fn fit_short_run_writes_metrics() {
    let tmp = TempDir::new().unwrap();
    let (img, cfg) = small_setup(tmp.path());
    let out = tmp.path().join("run");
    let o = gsopt(&["fit", "--image", &img, "--config", &cfg, "--seed", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(m["psnr"].as_f64().unwrap().is_finite());
    assert!(m["ssim"].as_f64().unwrap().is_finite());
    assert_eq!(m["iterations"].as_u64(), Some(30));
    assert_eq!(m["seed"].as_u64(), Some(4));
    for f in ["telemetry.csv", "diagnostics.csv", "events.csv", "final.png", "cloud.txt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let rows = fs::read_to_string(out.join("telemetry.csv")).unwrap().lines().count();
    assert_eq!(rows, 31);
}

#[test]
fn fit_same_seed_same_telemetry() {
    let tmp = TempDir::new().unwrap();
    let (img, cfg) = small_setup(tmp.path());
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = gsopt(&["fit", "--image", &img, "--config", &cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        fs::read_to_string(out.join("telemetry.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn fit_bad_config_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let (img, _) = small_setup(tmp.path());
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let o = gsopt(&["fit", "--image", &img, "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_single_seed_has_one_row() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("b");
    let o = gsopt(&[
        "bench", "--scenario", "double-well", "--optimizer", "awsgld", "--seeds", "1", "--iters", "2000",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("bench_double-well_awsgld.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "scenario,optimizer,seed,escaped,first_escape_iter,final_energy,theta_mae");
    let data: Vec<&&str> = lines[1..].iter().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data.len(), 1);
    assert!(data[0].starts_with("double-well,awsgld,0,"));
    assert!(lines.last().unwrap().starts_with("# escape_fraction"));
}

#[test]
fn bench_rejects_unknown_names() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("b");
    let o = gsopt(&["bench", "--scenario", "volcano", "--optimizer", "sgld", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = gsopt(&["bench", "--scenario", "mixture", "--optimizer", "newton", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn zeta_sweep_single_value() {
    let tmp = TempDir::new().unwrap();
    let (img, cfg) = small_setup(tmp.path());
    let out = tmp.path().join("z");
    let o = gsopt(&["zeta-sweep", "--values", "0.5", "--image", &img, "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("zeta_sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "zeta,seed,psnr,ssim");
    assert!(lines[1].starts_with("0.5,0,"));
    assert!(out.join("zeta_0.5").join("metrics.json").exists());
}

#[test]
fn zeta_sweep_rejects_bad_lists() {
    let tmp = TempDir::new().unwrap();
    let (img, cfg) = small_setup(tmp.path());
    let out = tmp.path().join("z");
    for values in ["", "0.5,-1", "0"] {
        let o = gsopt(&["zeta-sweep", "--values", values, "--image", &img, "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(!o.status.success(), "accepted {values:?}");
    }
    assert!(!out.exists());
}

#[test]
fn eval_identical_images() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("a.png");
    generate(Scene::Texture, 24, 20, 1).save_png(&p).unwrap();
    let o = gsopt(&["eval", "--ref", p.to_str().unwrap(), "--test", p.to_str().unwrap()]);
    assert!(o.status.success());
    let v = json_stdout(&o);
    assert_eq!(v["psnr"].as_f64(), Some(99.0));
    assert!((v["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn eval_black_against_white() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a.png"), tmp.path().join("b.png"));
    Image::filled(16, 16, [0.0; 3]).save_png(&a).unwrap();
    Image::filled(16, 16, [1.0; 3]).save_png(&b).unwrap();
    let o = gsopt(&["eval", "--ref", a.to_str().unwrap(), "--test", b.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(json_stdout(&o)["psnr"].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn eval_size_mismatch_fails() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a.png"), tmp.path().join("b.png"));
    Image::filled(16, 16, [0.2; 3]).save_png(&a).unwrap();
    Image::filled(16, 12, [0.2; 3]).save_png(&b).unwrap();
    let o = gsopt(&["eval", "--ref", a.to_str().unwrap(), "--test", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
}
