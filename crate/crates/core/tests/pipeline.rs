use std::fs;

use gsopt::landscape::{run_bench, Optimizer, Scenario, BENCH_HEADER};
use gsopt::loss::Stage;
use gsopt::synthetic::{generate, Scene};
use gsopt::trainer::{run_fit, Exploit, Sampler, TrainConfig, Trainer};
use gsopt::{Error, GaussianCloud};
use tempfile::TempDir;

// the per-step image buffers churn through the system allocator
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn short(total: usize, switch: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        total_iters: total,
        switch_iter: switch,
        densify_interval: 25,
        init_count: 80,
        max_gaussians: 120,
        ..TrainConfig::default()
    };
    cfg.flattening.warmup_iters = 20;
    cfg
}

#[test]
fn exploitation_without_noise_does_not_climb() {
    let img = generate(Scene::Landscape, 40, 32, 5);
    let mut cfg = short(400, 150);
    cfg.gate.lambda_noise = 0.0;
    let mut t = Trainer::new(&img, cfg).unwrap();
    let mut energies = Vec::new();
    while !t.is_done() {
        let rec = t.step().unwrap();
        if rec.telemetry.stage == Stage::Exploitation {
            energies.push(rec.telemetry.loss_total);
        }
    }
    assert_eq!(energies.len(), 250);
    for w in energies.windows(101) {
        assert!(w[100] <= w[0] + 1e-3, "loss rose from {} to {}", w[0], w[100]);
    }
}

#[test]
fn quasi_newton_histories_start_at_the_switch() {
    let img = generate(Scene::Texture, 32, 32, 2);
    let mut t = Trainer::new(&img, short(60, 40)).unwrap();
    while t.iter() < 40 {
        t.step().unwrap();
    }
    assert!(t.lqn.histories.iter().all(|h| h.is_empty()));
    assert!(t.lqn.previous.iter().all(|p| p.is_none()));
    while !t.is_done() {
        t.step().unwrap();
    }
    assert!(t.lqn.histories.iter().any(|h| !h.is_empty()));
    assert_eq!(t.lqn.len(), t.cloud.len());
}

#[test]
fn structure_changes_only_while_exploring() {
    let img = generate(Scene::StillLife, 32, 32, 4);
    let mut t = Trainer::new(&img, short(120, 60)).unwrap();
    let mut grew = false;
    let mut last = t.cloud.len();
    while !t.is_done() {
        let rec = t.step().unwrap();
        let n = rec.telemetry.n_gaussians;
        if rec.telemetry.stage == Stage::Exploitation {
            assert_eq!(n, last);
            assert!(rec.events.is_empty());
            assert_eq!(rec.telemetry.nu, 1.0);
        }
        grew |= n > last;
        assert!(n <= 120);
        last = n;
    }
    assert!(grew);
    assert!(t.cloud.is_ordered());
}

#[test]
fn fit_writes_artifacts_and_snapshots() {
    let tmp = TempDir::new().unwrap();
    let img = generate(Scene::Landscape, 24, 24, 1);
    let mut cfg = short(40, 30);
    cfg.snapshot_interval = 20;
    let out = run_fit(&img, &cfg, Some(tmp.path())).unwrap();
    assert_eq!(out.records.len(), 40);
    assert!(out.report.psnr.is_finite());
    for f in [
        "telemetry.csv",
        "diagnostics.csv",
        "events.csv",
        "final.png",
        "cloud.txt",
        "snapshot_000020.png",
        "snapshot_000040.png",
        "checkpoint.txt",
    ] {
        assert!(tmp.path().join(f).exists(), "missing {f}");
    }
    let cloud = GaussianCloud::from_snapshot(&fs::read_to_string(tmp.path().join("cloud.txt")).unwrap()).unwrap();
    assert_eq!(cloud, out.cloud);
    let resumed = Trainer::resume(&img, &fs::read_to_string(tmp.path().join("checkpoint.txt")).unwrap()).unwrap();
    assert!(resumed.is_done());
    assert_eq!(resumed.cloud, out.cloud);
}

#[test]
fn fit_improves_on_initialization() {
    let img = generate(Scene::StillLife, 48, 48, 8);
    let mut cfg = short(300, 280);
    cfg.gate.lambda_noise = 0.01;
    let out = run_fit(&img, &cfg, None).unwrap();
    assert!(
        out.report.psnr > out.report.initial_psnr + 3.0,
        "{} -> {}",
        out.report.initial_psnr,
        out.report.psnr
    );
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let img = generate(Scene::Texture, 16, 16, 0);
    let mut cfg = short(50, 60);
    assert!(matches!(Trainer::new(&img, cfg.clone()), Err(Error::InvalidArgument(_))));
    cfg.switch_iter = 40;
    cfg.init_count = 500;
    assert!(Trainer::new(&img, cfg).is_err());
}

#[test]
fn sampler_choice_changes_the_run() {
    let img = generate(Scene::Landscape, 32, 32, 3);
    let run = |s: Sampler, e: Exploit| {
        let mut cfg = short(60, 50);
        cfg.sampler = s;
        cfg.exploit = e;
        cfg.flattening.tau = 1e-3;
        run_fit(&img, &cfg, None).unwrap().telemetry_csv()
    };
    let a = run(Sampler::Awsgld, Exploit::Lqn);
    let b = run(Sampler::Sgld, Exploit::Lqn);
    let c = run(Sampler::Awsgld, Exploit::Adam);
    assert_ne!(a, b);
    assert_ne!(a, c);
    // identical until the switch
    let head = |s: &str| s.lines().take(51).map(String::from).collect::<Vec<_>>();
    assert_eq!(head(&a), head(&c));
}

#[test]
fn bench_csv_is_reproducible() {
    let mut sc = Scenario::mixture();
    sc.chain.iters = 3000;
    let a = run_bench(&sc, Optimizer::Awsgld, 4).unwrap();
    let b = run_bench(&sc, Optimizer::Awsgld, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(BENCH_HEADER.split(',').count(), a[0].to_csv().split(',').count());
    for (i, r) in a.iter().enumerate() {
        assert_eq!(r.seed, i as u64);
        assert!(r.final_energy.is_finite());
    }
}
