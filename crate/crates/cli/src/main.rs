use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use gsopt::landscape::{escape_fraction, run_bench, Optimizer, Scenario, BENCH_HEADER};
use gsopt::loss::{ssim, LossConfig};
use gsopt::render::psnr;
use gsopt::trainer::{run_fit, TrainConfig};
use gsopt::{Error, Image};

// the per-step image buffers churn through the system allocator
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "gsopt", version, about = "Fit 2D Gaussian splats with flat-histogram Langevin exploration and quasi-Newton refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one image and write telemetry, snapshots, the final render and metrics.json.
    Fit {
        #[arg(long)]
        image: PathBuf,
        /// `key = value` config file; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mode-escape trials on a synthetic landscape, one CSV row per seed.
    Bench {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        optimizer: String,
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        /// Override the number of sampler steps per trial.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the same image once per zeta value and tabulate the final metrics.
    ZetaSweep {
        /// Comma-separated positive values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR and SSIM of a test image against a reference, as JSON on stdout.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

/// Bad input: unreadable files, malformed config, invalid arguments.
struct Usage(anyhow::Error);

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u.0)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage<T>(r: std::result::Result<T, impl Into<anyhow::Error>>, what: &str) -> std::result::Result<T, Usage> {
    r.map_err(|e| Usage(e.into().context(what.to_string())))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> std::result::Result<TrainConfig, Usage> {
    let mut cfg = match path {
        Some(p) => usage(TrainConfig::load(p), "reading config")?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    usage(cfg.validate(), "validating config")?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn fit_once(target: &Image, cfg: &TrainConfig, out: &Path) -> Result<serde_json::Value> {
    let start = Instant::now();
    let outcome = run_fit(target, cfg, Some(out)).map_err(|e| match e {
        Error::Aborted { .. } => anyhow::Error::new(e).context("fit aborted"),
        e => e.into(),
    })?;
    let r = &outcome.report;
    let metrics = json!({
        "psnr": r.psnr,
        "ssim": r.ssim,
        "n_gaussians": r.n_gaussians,
        "wall_time_s": start.elapsed().as_secs_f64(),
        "initial_psnr": r.initial_psnr,
        "iterations": r.iterations,
        "seed": cfg.seed,
    });
    write(&out.join("metrics.json"), &serde_json::to_string_pretty(&metrics)?)?;
    Ok(metrics)
}

fn fit(image: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> std::result::Result<(), Failure> {
    let target = usage(Image::load_png(image), "reading image")?;
    let cfg = load_config(config, seed)?;
    let m = fit_once(&target, &cfg, out)?;
    eprintln!(
        "fit: psnr {:.3} dB, ssim {:.4}, {} gaussians, {:.1}s",
        m["psnr"], m["ssim"], m["n_gaussians"], m["wall_time_s"].as_f64().unwrap_or(0.0)
    );
    println!("{}", serde_json::to_string(&m).map_err(anyhow::Error::from)?);
    Ok(())
}

fn bench(scenario: &str, optimizer: &str, seeds: u64, iters: Option<usize>, out: &Path) -> std::result::Result<(), Failure> {
    let mut sc = usage(Scenario::from_name(scenario), "scenario")?;
    let opt: Optimizer = usage(optimizer.parse(), "optimizer")?;
    if seeds == 0 {
        return Err(Usage(anyhow::anyhow!("--seeds must be at least 1")).into());
    }
    if let Some(n) = iters {
        sc.chain.iters = n;
    }
    let rows = run_bench(&sc, opt, seeds).map_err(anyhow::Error::from)?;
    let mut text = String::from(BENCH_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    let escaped = rows.iter().filter(|r| r.escaped).count();
    let summary = format!(
        "# escape_fraction {} ({escaped}/{}) scenario {} optimizer {}",
        escape_fraction(&rows),
        rows.len(),
        sc.name,
        opt
    );
    text.push_str(&summary);
    text.push('\n');
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join(format!("bench_{}_{}.csv", sc.name, opt)), &text)?;
    eprintln!("{summary}");
    Ok(())
}

fn zeta_sweep(values: &[f64], image: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> std::result::Result<(), Failure> {
    if values.is_empty() {
        return Err(Usage(anyhow::anyhow!("--values needs at least one value")).into());
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Usage(anyhow::anyhow!("zeta values must be positive, got {v}")).into());
    }
    let target = usage(Image::load_png(image), "reading image")?;
    let base = load_config(config, seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut table = String::from("zeta,seed,psnr,ssim\n");
    for &z in values {
        let mut cfg = base.clone();
        cfg.flattening.zeta = z;
        let dir = out.join(format!("zeta_{z}"));
        let m = fit_once(&target, &cfg, &dir)?;
        eprintln!("zeta {z}: psnr {:.3} ssim {:.4}", m["psnr"], m["ssim"]);
        table.push_str(&format!("{z},{},{},{}\n", cfg.seed, m["psnr"], m["ssim"]));
    }
    write(&out.join("zeta_sweep.csv"), &table)?;
    Ok(())
}

fn eval(reference: &Path, test: &Path) -> std::result::Result<(), Failure> {
    let r = usage(Image::load_png(reference), "reading reference")?;
    let t = usage(Image::load_png(test), "reading test image")?;
    usage(r.check_same_dims(&t), "comparing sizes")?;
    let p = psnr(&r, &t, 1.0).map_err(anyhow::Error::from)?;
    let s = ssim(&t, &r, &LossConfig::default()).map_err(anyhow::Error::from)?;
    println!("{}", json!({ "psnr": p, "ssim": s }));
    Ok(())
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Fit { image, config, seed, out } => fit(&image, config.as_deref(), seed, &out),
        Command::Bench { scenario, optimizer, seeds, iters, out } => bench(&scenario, &optimizer, seeds, iters, &out),
        Command::ZetaSweep { values, image, config, seed, out } => {
            zeta_sweep(&values, &image, config.as_deref(), seed, &out)
        }
        Command::Eval { reference, test } => eval(&reference, &test),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
