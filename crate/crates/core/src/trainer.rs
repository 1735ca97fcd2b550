//! Two-stage fitting loop: a warm-up, flat-histogram Langevin exploration
//! with densification, then quasi-Newton guided exploitation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamHyper, AdamState, CloudAdam, GroupRates, ParamGroup};
use crate::awsgld::{
    awsgld_step, subregion_index, EnergyPartition, FlatHistogram, FlatteningConfig, GateSign,
    LowerNeighbor, NoiseGate, ThetaVector,
};
use crate::codec::{self, f64_to_hex, hex_list};
use crate::density::{grow, relocate_dead, sampling_entropy, DensityReport, EventKind};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{ssim, LossConfig, LossEvaluator, Photometric, Reduction, Stage};
use crate::lqnadam::{lqnadam_step, LbfgsHistory, LqnState};
use crate::model::{logit, Gaussian2D, GaussianCloud};
use crate::render::{backward, psnr, render, RenderSettings};

/// Update rule used while exploring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    /// Plain Adam, no noise.
    Adam,
    /// Adam-preconditioned Langevin steps, multiplier fixed at 1.
    Sgld,
    /// Langevin steps with the flat-histogram multiplier.
    Awsgld,
}

/// Update rule used while exploiting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exploit {
    /// Same rule as exploration without the multiplier.
    Adam,
    /// Per-primitive quasi-Newton direction fed to Adam.
    Lqn,
}

macro_rules! keyword_enum {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!("unknown value {s:?}")),
                }
            }
        }
    };
}

keyword_enum!(Sampler { Sampler::Adam => "adam", Sampler::Sgld => "sgld", Sampler::Awsgld => "awsgld" });
keyword_enum!(Exploit { Exploit::Adam => "adam", Exploit::Lqn => "lqn" });

fn parse_photometric(s: &str) -> std::result::Result<Photometric, String> {
    match s {
        "l1" => Ok(Photometric::L1),
        "l2" => Ok(Photometric::L2),
        _ => Err(format!("unknown value {s:?}")),
    }
}

fn parse_reduction(s: &str) -> std::result::Result<Reduction, String> {
    match s {
        "sum" => Ok(Reduction::Sum),
        "mean" => Ok(Reduction::Mean),
        _ => Err(format!("unknown value {s:?}")),
    }
}

fn parse_gate_sign(s: &str) -> std::result::Result<GateSign, String> {
    match s {
        "as-printed" => Ok(GateSign::AsPrinted),
        "inverted" => Ok(GateSign::Inverted),
        _ => Err(format!("unknown value {s:?}")),
    }
}

fn parse_lower_neighbor(s: &str) -> std::result::Result<LowerNeighbor, String> {
    match s {
        "index" => Ok(LowerNeighbor::IndexClamp),
        "value" => Ok(LowerNeighbor::ValueClamp),
        _ => Err(format!("unknown value {s:?}")),
    }
}

/// Learning rate of one parameter group: `base * decay^(iter / total_iters)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    /// Ratio of the final to the initial rate.
    pub decay: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self { base, decay: 1.0 }
    }

    pub fn at(&self, iter: usize, total: usize) -> f64 {
        if self.decay == 1.0 || total == 0 {
            return self.base;
        }
        self.base * self.decay.powf(iter as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub switch_iter: usize,
    pub densify_interval: usize,
    pub growth_rate: f64,
    pub max_gaussians: usize,
    pub init_count: usize,
    /// Initial isotropic scale as a fraction of the mean nearest-neighbour spacing.
    pub init_scale_fraction: f64,
    pub opacity_floor: f64,
    pub lr: [LrSchedule; 5],
    pub adam_eps: f64,
    pub sampler: Sampler,
    pub exploit: Exploit,
    pub flattening: FlatteningConfig,
    pub bins: usize,
    pub energy_low: f64,
    pub energy_high: f64,
    pub gate: NoiseGate,
    pub loss: LossConfig,
    pub history_size: usize,
    pub curvature_eps: f64,
    pub background: [f64; 3],
    pub tile_size: usize,
    pub seed: u64,
    /// PNG snapshots and checkpoints every this many iterations; 0 disables them.
    pub snapshot_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 3000,
            switch_iter: 2900,
            densify_interval: 100,
            growth_rate: 0.05,
            max_gaussians: 1000,
            init_count: 500,
            init_scale_fraction: 0.5,
            opacity_floor: 0.005,
            lr: [
                LrSchedule { base: 0.2, decay: 0.01 },
                LrSchedule::constant(0.01),
                LrSchedule::constant(0.01),
                LrSchedule::constant(0.05),
                LrSchedule::constant(0.01),
            ],
            adam_eps: 1e-15,
            sampler: Sampler::Awsgld,
            exploit: Exploit::Lqn,
            // desk-scale losses sit around 1e-2, so the landscape defaults
            // (unit temperature, unit noise) swamp the gradient
            flattening: FlatteningConfig {
                tau: 1e-3,
                ..FlatteningConfig::default()
            },
            bins: 200,
            energy_low: 0.0,
            energy_high: 0.2,
            gate: NoiseGate {
                lambda_noise: 0.01,
                ..NoiseGate::default()
            },
            loss: LossConfig::default(),
            history_size: 5,
            curvature_eps: 1e-10,
            background: [0.0; 3],
            tile_size: 16,
            seed: 0,
            snapshot_interval: 0,
        }
    }
}

const LR_KEYS: [&str; 5] = ["mu", "log_scale", "rot_angle", "opacity_logit", "color"];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let f = &self.flattening;
        if !(f.warmup_iters <= self.switch_iter && self.switch_iter <= self.total_iters) {
            return bad(format!(
                "need warmup_iters <= switch_iter <= total_iters, got {} / {} / {}",
                f.warmup_iters, self.switch_iter, self.total_iters
            ));
        }
        if self.densify_interval == 0 {
            return bad("densify_interval must be positive".into());
        }
        if !(self.growth_rate >= 0.0 && self.growth_rate.is_finite()) {
            return bad("growth_rate must be finite and >= 0".into());
        }
        if self.init_count == 0 || self.init_count > self.max_gaussians {
            return bad(format!(
                "init_count must lie in 1..={}, got {}",
                self.max_gaussians, self.init_count
            ));
        }
        if !(self.init_scale_fraction > 0.0) {
            return bad("init_scale_fraction must be positive".into());
        }
        for (k, s) in LR_KEYS.iter().zip(&self.lr) {
            if !(s.base >= 0.0 && s.base.is_finite() && s.decay > 0.0 && s.decay.is_finite()) {
                return bad(format!("lr_{k}: rate must be >= 0 and decay positive"));
            }
        }
        if !(self.adam_eps >= 0.0) {
            return bad("adam_eps must be >= 0".into());
        }
        if self.history_size == 0 {
            return bad("history_size must be positive".into());
        }
        if self.tile_size == 0 {
            return bad("tile_size must be positive".into());
        }
        if !(self.gate.lambda_noise >= 0.0 && self.gate.lambda_noise.is_finite()) {
            return bad("lambda_noise must be finite and >= 0".into());
        }
        f.validate()?;
        self.loss.validate()?;
        EnergyPartition::new(self.bins, self.energy_low, self.energy_high)?;
        Ok(())
    }

    pub fn rates_at(&self, iter: usize) -> GroupRates {
        let r = |g: ParamGroup| self.lr[g.index()].at(iter, self.total_iters);
        GroupRates {
            mu: r(ParamGroup::Position),
            log_scale: r(ParamGroup::LogScale),
            rot_angle: r(ParamGroup::Rotation),
            opacity_logit: r(ParamGroup::OpacityLogit),
            color: r(ParamGroup::Color),
        }
    }

    fn entries(&self) -> Vec<(String, String)> {
        let f = &self.flattening;
        let l = &self.loss;
        let mut v: Vec<(String, String)> = vec![
            ("total_iters".into(), self.total_iters.to_string()),
            ("switch_iter".into(), self.switch_iter.to_string()),
            ("warmup_iters".into(), f.warmup_iters.to_string()),
            ("densify_interval".into(), self.densify_interval.to_string()),
            ("growth_rate".into(), self.growth_rate.to_string()),
            ("max_gaussians".into(), self.max_gaussians.to_string()),
            ("init_count".into(), self.init_count.to_string()),
            ("init_scale_fraction".into(), self.init_scale_fraction.to_string()),
            ("opacity_floor".into(), self.opacity_floor.to_string()),
        ];
        for (k, s) in LR_KEYS.iter().zip(&self.lr) {
            v.push((format!("lr_{k}"), s.base.to_string()));
            v.push((format!("lr_{k}_decay"), s.decay.to_string()));
        }
        let more: Vec<(&str, String)> = vec![
            ("adam_eps", self.adam_eps.to_string()),
            ("sampler", self.sampler.as_str().into()),
            ("exploit", self.exploit.as_str().into()),
            ("lambda_noise", self.gate.lambda_noise.to_string()),
            ("k_gate", self.gate.k_gate.to_string()),
            ("t_gate", self.gate.t_gate.to_string()),
            (
                "gate_sign",
                match self.gate.gate_sign {
                    GateSign::AsPrinted => "as-printed",
                    GateSign::Inverted => "inverted",
                }
                .into(),
            ),
            ("zeta", f.zeta.to_string()),
            ("tau", f.tau.to_string()),
            ("theta_lr", f.theta_lr.to_string()),
            ("nu_min", f.nu_clip.0.to_string()),
            ("nu_max", f.nu_clip.1.to_string()),
            ("theta_floor", f.theta_floor.to_string()),
            (
                "lower_neighbor",
                match f.lower_neighbor {
                    LowerNeighbor::IndexClamp => "index",
                    LowerNeighbor::ValueClamp => "value",
                }
                .into(),
            ),
            ("energy_ema", f.energy_ema.unwrap_or(0.0).to_string()),
            ("bins", self.bins.to_string()),
            ("energy_low", self.energy_low.to_string()),
            ("energy_high", self.energy_high.to_string()),
            ("lambda_ssim", l.lambda_ssim.to_string()),
            ("lambda_o", l.lambda_o.to_string()),
            ("lambda_sigma", l.lambda_sigma.to_string()),
            (
                "photometric",
                match l.photometric {
                    Photometric::L1 => "l1",
                    Photometric::L2 => "l2",
                }
                .into(),
            ),
            (
                "reg_reduction",
                match l.reg_reduction {
                    Reduction::Sum => "sum",
                    Reduction::Mean => "mean",
                }
                .into(),
            ),
            ("ssim_window", l.ssim_window.to_string()),
            ("ssim_sigma", l.ssim_sigma.to_string()),
            ("ssim_c1", l.ssim_c1.to_string()),
            ("ssim_c2", l.ssim_c2.to_string()),
            ("history_size", self.history_size.to_string()),
            ("curvature_eps", self.curvature_eps.to_string()),
            (
                "background",
                format!(
                    "{},{},{}",
                    self.background[0], self.background[1], self.background[2]
                ),
            ),
            ("tile_size", self.tile_size.to_string()),
            ("seed", self.seed.to_string()),
            ("snapshot_interval", self.snapshot_interval.to_string()),
        ];
        v.extend(more.into_iter().map(|(k, s)| (k.to_string(), s)));
        v
    }

    /// `key = value` lines covering every field; [`TrainConfig::parse`] reads them back exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        if let Some(rest) = key.strip_prefix("lr_") {
            let (name, decay) = match rest.strip_suffix("_decay") {
                Some(n) => (n, true),
                None => (rest, false),
            };
            if let Some(i) = LR_KEYS.iter().position(|k| *k == name) {
                let x: f64 = num(value)?;
                if decay {
                    self.lr[i].decay = x;
                } else {
                    self.lr[i].base = x;
                }
                return Ok(());
            }
        }
        let f = &mut self.flattening;
        let l = &mut self.loss;
        match key {
            "total_iters" => self.total_iters = num(value)?,
            "switch_iter" => self.switch_iter = num(value)?,
            "warmup_iters" => f.warmup_iters = num(value)?,
            "densify_interval" => self.densify_interval = num(value)?,
            "growth_rate" => self.growth_rate = num(value)?,
            "max_gaussians" => self.max_gaussians = num(value)?,
            "init_count" => self.init_count = num(value)?,
            "init_scale_fraction" => self.init_scale_fraction = num(value)?,
            "opacity_floor" => self.opacity_floor = num(value)?,
            "adam_eps" => self.adam_eps = num(value)?,
            "sampler" => self.sampler = value.parse()?,
            "exploit" => self.exploit = value.parse()?,
            "lambda_noise" => self.gate.lambda_noise = num(value)?,
            "k_gate" => self.gate.k_gate = num(value)?,
            "t_gate" => self.gate.t_gate = num(value)?,
            "gate_sign" => self.gate.gate_sign = parse_gate_sign(value)?,
            "zeta" => f.zeta = num(value)?,
            "tau" => f.tau = num(value)?,
            "theta_lr" => f.theta_lr = num(value)?,
            "nu_min" => f.nu_clip.0 = num(value)?,
            "nu_max" => f.nu_clip.1 = num(value)?,
            "theta_floor" => f.theta_floor = num(value)?,
            "lower_neighbor" => f.lower_neighbor = parse_lower_neighbor(value)?,
            "energy_ema" => {
                let a: f64 = num(value)?;
                f.energy_ema = (a != 0.0).then_some(a);
            }
            "bins" => self.bins = num(value)?,
            "energy_low" => self.energy_low = num(value)?,
            "energy_high" => self.energy_high = num(value)?,
            "lambda_ssim" => l.lambda_ssim = num(value)?,
            "lambda_o" => l.lambda_o = num(value)?,
            "lambda_sigma" => l.lambda_sigma = num(value)?,
            "photometric" => l.photometric = parse_photometric(value)?,
            "reg_reduction" => l.reg_reduction = parse_reduction(value)?,
            "ssim_window" => l.ssim_window = num(value)?,
            "ssim_sigma" => l.ssim_sigma = num(value)?,
            "ssim_c1" => l.ssim_c1 = num(value)?,
            "ssim_c2" => l.ssim_c2 = num(value)?,
            "history_size" => self.history_size = num(value)?,
            "curvature_eps" => self.curvature_eps = num(value)?,
            "background" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err("background needs three comma-separated values".into());
                }
                for (k, p) in parts.iter().enumerate() {
                    self.background[k] = num(p)?;
                }
            }
            "tile_size" => self.tile_size = num(value)?,
            "seed" => self.seed = num(value)?,
            "snapshot_interval" => self.snapshot_interval = num(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parse `key = value` lines on top of the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys are errors. The result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: n + 1,
                    message: format!("expected `key = value`, found {line:?}"),
                });
            };
            cfg.set(k.trim(), v.trim()).map_err(|message| Error::Config {
                line: n + 1,
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// `count` primitives at uniform positions over the image, isotropic scale
/// from the mean nearest-neighbour spacing, opacity 0.5 and colors sampled
/// from `target`.
pub fn init_random<R: Rng + ?Sized>(
    count: usize,
    target: &Image,
    scale_fraction: f64,
    max_gaussians: usize,
    rng: &mut R,
) -> Result<GaussianCloud> {
    if count == 0 || count > max_gaussians {
        return Err(Error::InvalidArgument(format!(
            "initial count must lie in 1..={max_gaussians}, got {count}"
        )));
    }
    let (w, h) = (target.width as f64, target.height as f64);
    let positions: Vec<[f64; 2]> = (0..count)
        .map(|_| [rng.random::<f64>() * w, rng.random::<f64>() * h])
        .collect();
    let spacing = if count == 1 {
        (w * h).sqrt()
    } else {
        let total: f64 = positions
            .iter()
            .enumerate()
            .map(|(i, p)| {
                positions
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / count as f64
    };
    let log_s = (scale_fraction * spacing).max(1e-3).ln();
    let opacity_logit = logit(0.5)?;
    let gaussians = positions
        .into_iter()
        .enumerate()
        .map(|(i, mu)| Gaussian2D {
            mu,
            log_scale: [log_s, log_s],
            rot_angle: 0.0,
            opacity_logit,
            color: target.sample_bilinear(mu[0], mu[1]),
            depth_index: i as u64,
        })
        .collect();
    GaussianCloud::from_gaussians(gaussians, max_gaussians, 0)
}

/// One row of the main telemetry CSV. Loss, bin and PSNR describe the state
/// at the start of the iteration; the other columns describe its update.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub iter: usize,
    pub stage: Stage,
    pub loss_total: f64,
    pub loss_photo: f64,
    pub energy_bin: usize,
    pub nu: f64,
    pub psnr: f64,
    pub n_gaussians: usize,
    pub rejected_pairs: usize,
    pub relocations: usize,
}

pub const TELEMETRY_HEADER: &str =
    "iter,stage,loss_total,loss_photo,energy_bin,nu,psnr,n_gaussians,rejected_pairs,relocations";

impl TelemetryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.stage.as_str(),
            self.loss_total,
            self.loss_photo,
            self.energy_bin,
            self.nu,
            self.psnr,
            self.n_gaussians,
            self.rejected_pairs,
            self.relocations
        )
    }
}

/// Sampler internals that do not belong in the main telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRow {
    pub iter: usize,
    pub energy: f64,
    pub ssim: f64,
    pub theta_drift: f64,
    pub theta_max: f64,
    pub lbfgs_fallbacks: usize,
    pub rejected_update: bool,
    pub sampling_entropy: f64,
}

pub const DIAGNOSTICS_HEADER: &str =
    "iter,energy,ssim,theta_drift,theta_max,lbfgs_fallbacks,rejected_update,sampling_entropy";

impl DiagnosticsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter,
            self.energy,
            self.ssim,
            self.theta_drift,
            self.theta_max,
            self.lbfgs_fallbacks,
            self.rejected_update as u8,
            self.sampling_entropy
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRow {
    pub iter: usize,
    pub kind: EventKind,
    pub target: usize,
    pub children: Vec<usize>,
    pub n: usize,
}

pub const EVENTS_HEADER: &str = "iter,event,target,children,n";

impl EventRow {
    pub fn to_csv(&self) -> String {
        let children: Vec<String> = self.children.iter().map(|c| c.to_string()).collect();
        format!(
            "{},{},{},{},{}",
            self.iter,
            self.kind.as_str(),
            self.target,
            children.join(";"),
            self.n
        )
    }
}

/// Everything one iteration produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub telemetry: TelemetryRow,
    pub diagnostics: DiagnosticsRow,
    pub events: Vec<EventRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub initial_psnr: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub n_gaussians: usize,
    pub iterations: usize,
}

const NOISE_STREAM: u64 = 1;
const DENSITY_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// All mutable training state. Everything a resumed run needs is in here.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    target: Image,
    explore_loss: LossEvaluator,
    exploit_loss: LossEvaluator,
    settings: RenderSettings,
    pub cloud: GaussianCloud,
    pub adam: CloudAdam,
    pub flat: FlatHistogram,
    pub lqn: LqnState,
    noise_rng: ChaCha8Rng,
    density_rng: ChaCha8Rng,
    iter: usize,
    nonfinite_streak: usize,
}

impl Trainer {
    pub fn new(target: &Image, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = stream(cfg.seed, 0);
        let mut cloud = init_random(
            cfg.init_count,
            target,
            cfg.init_scale_fraction,
            cfg.max_gaussians,
            &mut init_rng,
        )?;
        cloud.rng_seed = cfg.seed;
        Self::with_cloud(target, cfg, cloud)
    }

    /// Start from a given cloud instead of a random one.
    pub fn with_cloud(target: &Image, cfg: TrainConfig, cloud: GaussianCloud) -> Result<Self> {
        cfg.validate()?;
        let base = LossEvaluator::new(target, cfg.loss)?;
        let hyper = AdamHyper {
            eps_hat: cfg.adam_eps,
            ..AdamHyper::default()
        };
        let partition = EnergyPartition::new(cfg.bins, cfg.energy_low, cfg.energy_high)?;
        Ok(Self {
            explore_loss: base.for_stage(Stage::Exploration),
            exploit_loss: base.for_stage(Stage::Exploitation),
            settings: RenderSettings {
                background: cfg.background,
                tile_size: cfg.tile_size,
            },
            adam: CloudAdam::new(cloud.len(), hyper),
            flat: FlatHistogram::new(partition, cfg.flattening)?,
            lqn: LqnState::new(cloud.len(), cfg.history_size, cfg.curvature_eps),
            noise_rng: stream(cfg.seed, NOISE_STREAM),
            density_rng: stream(cfg.seed, DENSITY_STREAM),
            target: target.clone(),
            cloud,
            cfg,
            iter: 0,
            nonfinite_streak: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    /// Swap the exploitation rule before the switch happens. Runs that share
    /// everything up to the switch can branch from one clone.
    pub fn set_exploit(&mut self, exploit: Exploit) -> Result<()> {
        if self.iter > self.cfg.switch_iter {
            return Err(Error::InvalidArgument(format!(
                "exploitation already started at iteration {}",
                self.cfg.switch_iter
            )));
        }
        self.cfg.exploit = exploit;
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.cfg.total_iters
    }

    pub fn stage(&self) -> Stage {
        if self.iter < self.cfg.switch_iter {
            Stage::Exploration
        } else {
            Stage::Exploitation
        }
    }

    pub fn render_current(&self) -> Result<Image> {
        let (w, h) = self.target.dims();
        Ok(render(&self.cloud, w, h, &self.settings)?.image)
    }

    /// PSNR and SSIM of the clamped current render.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let img = self.render_current()?.clamped();
        Ok((
            psnr(&self.target, &img, 1.0)?,
            ssim(&img, &self.target, &self.cfg.loss)?,
        ))
    }

    /// Run one iteration. A non-finite loss skips the update; a second one in
    /// a row returns [`Error::Aborted`].
    pub fn step(&mut self) -> Result<StepRecord> {
        let iter = self.iter;
        let stage = self.stage();
        let (w, h) = self.target.dims();
        let mut out = render(&self.cloud, w, h, &self.settings)?;
        let evaluator = match stage {
            Stage::Exploration => &self.explore_loss,
            Stage::Exploitation => &self.exploit_loss,
        };
        let loss = evaluator.evaluate(&out.image, &self.cloud)?;
        let display = out.image.clamped();
        let psnr_now = psnr(&self.target, &display, 1.0)?;
        let n_before = self.cloud.len();

        let mut diagnostics = DiagnosticsRow {
            iter,
            energy: loss.energy,
            ssim: loss.ssim,
            theta_drift: self.flat.theta.sum_drift(),
            theta_max: max_theta(&self.flat.theta),
            lbfgs_fallbacks: 0,
            rejected_update: false,
            sampling_entropy: sampling_entropy(&self.cloud, self.cfg.opacity_floor),
        };

        if !loss.energy.is_finite() {
            self.nonfinite_streak += 1;
            if self.nonfinite_streak >= 2 {
                return Err(Error::Aborted { iter });
            }
            self.iter += 1;
            diagnostics.rejected_update = true;
            return Ok(StepRecord {
                telemetry: TelemetryRow {
                    iter,
                    stage,
                    loss_total: loss.energy,
                    loss_photo: loss.photometric,
                    energy_bin: 0,
                    nu: 1.0,
                    psnr: psnr_now,
                    n_gaussians: n_before,
                    rejected_pairs: 0,
                    relocations: 0,
                },
                diagnostics,
                events: Vec::new(),
            });
        }
        self.nonfinite_streak = 0;

        let mut grads = backward(&self.cloud, &mut out, &loss.dl_dimage)?.to_vec();
        for (g, r) in grads.iter_mut().zip(&loss.reg_grads) {
            g.add_assign(r);
        }
        let rates = self.cfg.rates_at(iter);
        let mut nu = 1.0;
        let mut energy_bin = subregion_index(loss.energy, &self.flat.partition);
        let mut rejected_pairs = 0;

        let mut langevin = |flatten: bool, t: &mut Self| -> Result<()> {
            let rep = awsgld_step(
                &mut t.cloud,
                &grads,
                loss.energy,
                iter,
                &mut t.flat,
                flatten,
                &t.cfg.gate,
                &mut t.adam,
                &rates,
                &mut t.noise_rng,
            )?;
            nu = rep.visit.nu;
            energy_bin = rep.visit.bin;
            diagnostics.theta_drift = rep.theta_drift;
            diagnostics.rejected_update = rep.rejected;
            Ok(())
        };
        match (stage, self.cfg.sampler, self.cfg.exploit) {
            (Stage::Exploration, Sampler::Awsgld, _) => langevin(true, self)?,
            (Stage::Exploration, Sampler::Sgld, _)
            | (Stage::Exploitation, Sampler::Sgld | Sampler::Awsgld, Exploit::Adam) => {
                langevin(false, self)?
            }
            (_, Sampler::Adam, Exploit::Adam) | (Stage::Exploration, Sampler::Adam, _) => {
                adam_step(&mut self.cloud, &grads, &mut self.adam, &rates)
            }
            (Stage::Exploitation, _, Exploit::Lqn) => {
                let gate = if self.cfg.sampler == Sampler::Adam {
                    NoiseGate {
                        lambda_noise: 0.0,
                        ..self.cfg.gate
                    }
                } else {
                    self.cfg.gate
                };
                let rep = lqnadam_step(
                    &mut self.cloud,
                    &grads,
                    &mut self.lqn,
                    &gate,
                    &mut self.adam,
                    &rates,
                    &mut self.noise_rng,
                );
                rejected_pairs = rep.rejected_pairs;
                diagnostics.lbfgs_fallbacks = rep.fallbacks;
            }
        }
        for g in &mut self.cloud.gaussians {
            for c in &mut g.color {
                *c = c.clamp(0.0, 1.0);
            }
        }
        diagnostics.theta_max = max_theta(&self.flat.theta);

        let mut relocations = 0;
        let mut events = Vec::new();
        let next = iter + 1;
        if stage == Stage::Exploration
            && next % self.cfg.densify_interval == 0
            && next < self.cfg.switch_iter
        {
            let moved = relocate_dead(&mut self.cloud, self.cfg.opacity_floor, &mut self.density_rng)?;
            self.apply_structure(&moved, iter, &mut events);
            relocations = moved.relocated;
            let grown = grow(&mut self.cloud, self.cfg.growth_rate, &mut self.density_rng)?;
            self.apply_structure(&grown, iter, &mut events);
        }

        self.iter += 1;
        Ok(StepRecord {
            telemetry: TelemetryRow {
                iter,
                stage,
                loss_total: loss.energy,
                loss_photo: loss.photometric,
                energy_bin,
                nu,
                psnr: psnr_now,
                n_gaussians: self.cloud.len(),
                rejected_pairs,
                relocations,
            },
            diagnostics,
            events,
        })
    }

    fn apply_structure(&mut self, rep: &DensityReport, iter: usize, events: &mut Vec<EventRow>) {
        if !rep.changed() {
            return;
        }
        self.adam.remap(&rep.origins);
        self.lqn.remap(&rep.origins);
        events.extend(rep.events.iter().map(|e| EventRow {
            iter,
            kind: e.kind,
            target: e.target,
            children: e.children.clone(),
            n: e.n,
        }));
    }

    /// Bit-exact text checkpoint of the full state, including the config.
    pub fn checkpoint(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
        let cfg_text = self.cfg.to_text();
        writeln!(out, "config {}", cfg_text.lines().count()).unwrap();
        out.push_str(&cfg_text);
        writeln!(out, "iter {}", self.iter).unwrap();
        writeln!(out, "nonfinite_streak {}", self.nonfinite_streak).unwrap();
        writeln!(out, "noise_word {}", self.noise_rng.get_word_pos()).unwrap();
        writeln!(out, "density_word {}", self.density_rng.get_word_pos()).unwrap();
        self.cloud.write_body(&mut out);
        for g in &self.adam.groups {
            writeln!(out, "adam_step {}", g.step).unwrap();
            writeln!(out, "m1 {}", hex_list(&g.m1)).unwrap();
            writeln!(out, "m2 {}", hex_list(&g.m2)).unwrap();
        }
        writeln!(out, "theta {}", hex_list(self.flat.theta.as_slice())).unwrap();
        match self.flat.smoothed_energy {
            Some(e) => writeln!(out, "smoothed_energy {}", f64_to_hex(e)).unwrap(),
            None => writeln!(out, "smoothed_energy none").unwrap(),
        }
        for (h, prev) in self.lqn.histories.iter().zip(&self.lqn.previous) {
            let flat: Vec<f64> = h.pairs().flat_map(|(s, y)| [s[0], s[1], y[0], y[1]]).collect();
            writeln!(out, "history {} {}", h.len(), hex_list(&flat)).unwrap();
            match prev {
                Some((mu, g)) => {
                    writeln!(out, "previous {}", hex_list(&[mu[0], mu[1], g[0], g[1]])).unwrap()
                }
                None => writeln!(out, "previous none").unwrap(),
            }
        }
        out
    }

    pub fn resume(target: &Image, text: &str) -> Result<Self> {
        let mut lines = codec::Lines::new(text);
        lines.expect_exact(CHECKPOINT_MAGIC)?;
        let n_cfg: usize = lines.keyed_value("config")?;
        let mut cfg_text = String::new();
        for _ in 0..n_cfg {
            cfg_text.push_str(lines.raw_line()?);
            cfg_text.push('\n');
        }
        let cfg = TrainConfig::parse(&cfg_text)?;
        let iter: usize = lines.keyed_value("iter")?;
        let streak: usize = lines.keyed_value("nonfinite_streak")?;
        let noise_word: u128 = lines.keyed_value("noise_word")?;
        let density_word: u128 = lines.keyed_value("density_word")?;
        let cloud = GaussianCloud::read_body(&mut lines)?;
        let n = cloud.len();
        let mut t = Self::with_cloud(target, cfg, cloud)?;
        t.iter = iter;
        t.nonfinite_streak = streak;
        t.noise_rng.set_word_pos(noise_word);
        t.density_rng.set_word_pos(density_word);
        for (g, group) in t.adam.groups.iter_mut().zip(ParamGroup::ALL) {
            let step: u64 = lines.keyed_value("adam_step")?;
            let m1 = lines.keyed_floats("m1")?;
            let m2 = lines.keyed_floats("m2")?;
            if m1.len() != n * group.width() || m2.len() != m1.len() {
                return Err(Error::Checkpoint(format!(
                    "Adam state for {} has the wrong length",
                    group.name()
                )));
            }
            *g = AdamState {
                m1,
                m2,
                step,
                hyper: g.hyper,
            };
        }
        let theta = lines.keyed_floats("theta")?;
        if theta.len() != t.flat.partition.bins() {
            return Err(Error::Checkpoint("theta has the wrong length".into()));
        }
        t.flat.theta = ThetaVector::from_weights(theta)?;
        t.flat.smoothed_energy = match lines.keyed_fields("smoothed_energy")?.as_slice() {
            ["none"] => None,
            [v] => Some(codec::hex_to_f64(v)?),
            _ => return Err(Error::Checkpoint("bad smoothed_energy".into())),
        };
        for i in 0..n {
            let fields = lines.keyed_fields("history")?;
            let (count, vals) = fields
                .split_first()
                .ok_or_else(|| Error::Checkpoint("empty history line".into()))?;
            let count: usize = count
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad history length {count:?}")))?;
            let vals = vals
                .iter()
                .map(|v| codec::hex_to_f64(v))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != 4 * count {
                return Err(Error::Checkpoint("history length mismatch".into()));
            }
            let mut h = LbfgsHistory::new(t.cfg.history_size, t.cfg.curvature_eps);
            for p in vals.chunks(4) {
                if !h.push([p[0], p[1]], [p[2], p[3]]) {
                    return Err(Error::Checkpoint("stored pair fails curvature check".into()));
                }
            }
            t.lqn.histories[i] = h;
            t.lqn.previous[i] = match lines.keyed_fields("previous")?.as_slice() {
                ["none"] => None,
                vals => {
                    let v = vals
                        .iter()
                        .map(|v| codec::hex_to_f64(v))
                        .collect::<Result<Vec<_>>>()?;
                    if v.len() != 4 {
                        return Err(Error::Checkpoint("bad previous entry".into()));
                    }
                    Some(([v[0], v[1]], [v[2], v[3]]))
                }
            };
        }
        Ok(t)
    }
}

const CHECKPOINT_MAGIC: &str = "gsopt-checkpoint v1";

fn max_theta(theta: &ThetaVector) -> f64 {
    theta.as_slice().iter().copied().fold(0.0, f64::max)
}

/// In-memory result of a fit.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub cloud: GaussianCloud,
    pub report: FitReport,
    pub records: Vec<StepRecord>,
}

impl FitOutcome {
    pub fn telemetry_csv(&self) -> String {
        csv(TELEMETRY_HEADER, self.records.iter().map(|r| r.telemetry.to_csv()))
    }

    pub fn diagnostics_csv(&self) -> String {
        csv(DIAGNOSTICS_HEADER, self.records.iter().map(|r| r.diagnostics.to_csv()))
    }

    pub fn events_csv(&self) -> String {
        csv(
            EVENTS_HEADER,
            self.records.iter().flat_map(|r| r.events.iter().map(EventRow::to_csv)),
        )
    }
}

fn csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Drive `trainer` to completion. With `out_dir`, PNG snapshots and
/// checkpoints are written every `snapshot_interval` iterations, and on an
/// abort the state of the last finite-loss iteration is kept as
/// `checkpoint_last_good.txt`.
pub fn run_trainer(mut trainer: Trainer, out_dir: Option<&Path>) -> Result<FitOutcome> {
    let (initial_psnr, _) = trainer.evaluate()?;
    let mut records = Vec::new();
    let interval = trainer.cfg.snapshot_interval;
    let mut last_good = None;
    while !trainer.is_done() {
        if out_dir.is_some() {
            last_good = Some(trainer.clone());
        }
        match trainer.step() {
            Ok(rec) => records.push(rec),
            Err(Error::Aborted { iter }) => {
                if let (Some(dir), Some(good)) = (out_dir, &last_good) {
                    write_file(&dir.join("checkpoint_last_good.txt"), &good.checkpoint())?;
                    let partial = FitOutcome {
                        cloud: good.cloud.clone(),
                        report: FitReport {
                            initial_psnr,
                            psnr: f64::NAN,
                            ssim: f64::NAN,
                            n_gaussians: good.cloud.len(),
                            iterations: iter,
                        },
                        records,
                    };
                    write_file(&dir.join("telemetry.csv"), &partial.telemetry_csv())?;
                }
                return Err(Error::Aborted { iter });
            }
            Err(e) => return Err(e),
        }
        if let Some(dir) = out_dir {
            if interval > 0 && trainer.iter % interval == 0 {
                let it = trainer.iter;
                trainer
                    .render_current()?
                    .clamped()
                    .save_png(dir.join(format!("snapshot_{it:06}.png")))?;
                write_file(&dir.join("checkpoint.txt"), &trainer.checkpoint())?;
            }
        }
    }
    let (psnr, ssim) = trainer.evaluate()?;
    let outcome = FitOutcome {
        report: FitReport {
            initial_psnr,
            psnr,
            ssim,
            n_gaussians: trainer.cloud.len(),
            iterations: trainer.iter,
        },
        cloud: trainer.cloud.clone(),
        records,
    };
    if let Some(dir) = out_dir {
        write_file(&dir.join("telemetry.csv"), &outcome.telemetry_csv())?;
        write_file(&dir.join("diagnostics.csv"), &outcome.diagnostics_csv())?;
        write_file(&dir.join("events.csv"), &outcome.events_csv())?;
        write_file(&dir.join("cloud.txt"), &outcome.cloud.to_snapshot())?;
        trainer.render_current()?.clamped().save_png(dir.join("final.png"))?;
    }
    Ok(outcome)
}

/// Fit a randomly initialized cloud to `target`.
pub fn run_fit(target: &Image, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<FitOutcome> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    run_trainer(Trainer::new(target, cfg.clone())?, out_dir)
}
