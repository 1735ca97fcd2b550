//! Low-dimensional energy landscapes with exact answers, for checking the
//! flat-histogram sampler where the image-fitting energy gives no ground truth.
//!
//! Each landscape has a closed-form energy and gradient, a box domain and a
//! list of its local minima. [`bin_mass_oracle`] integrates `exp(-U / tau)` by
//! adaptive quadrature so the weight vector of a run can be compared with the
//! probability mass it is meant to estimate.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::adam::{AdamHyper, AdamState};
use crate::awsgld::{subregion_index, EnergyPartition, FlatHistogram, FlatteningConfig, ThetaVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum EnergyFn {
    /// `(x^2 - 1)^2 - tilt * x`.
    DoubleWell { tilt: f64 },
    /// `-ln sum_k w_k exp(-|x - c_k|^2 / (2 s^2))`.
    Mixture {
        centers: Vec<[f64; 2]>,
        weights: Vec<f64>,
        width: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub location: [f64; 2],
    pub energy: f64,
}

/// A 1D or 2D energy on a box. In 1D the second coordinate is ignored and
/// kept at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub dim: usize,
    pub energy_fn: EnergyFn,
    /// `[lo, hi]` per axis.
    pub domain: [[f64; 2]; 2],
    /// Sorted by energy, global minimum first.
    pub minima: Vec<Minimum>,
}

fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let mut fa = f(a);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (fa > 0.0) {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// Double well on `[-3, 3]`. Positive `tilt` makes the right well the global minimum.
pub fn make_double_well(tilt: f64) -> Result<Landscape> {
    if !(tilt.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("tilt must satisfy |tilt| < 1, got {tilt}")));
    }
    let energy_fn = EnergyFn::DoubleWell { tilt };
    let slope = |x: f64| 4.0 * x * (x * x - 1.0) - tilt;
    // the inflection points at +-1/sqrt(3) separate the three critical points
    let knee = 1.0 / 3f64.sqrt();
    let mut land = Landscape {
        dim: 1,
        energy_fn,
        domain: [[-3.0, 3.0], [0.0, 0.0]],
        minima: Vec::new(),
    };
    for x in [bisect(slope, -2.0, -knee), bisect(slope, knee, 2.0)] {
        let location = [x, 0.0];
        land.minima.push(Minimum {
            location,
            energy: land.energy(location),
        });
    }
    land.sort_minima();
    Ok(land)
}

/// Gaussian mixture on `[-4, 4]^2`.
pub fn make_mixture(centers: Vec<[f64; 2]>, weights: Vec<f64>, width: f64) -> Result<Landscape> {
    if centers.is_empty() || centers.len() != weights.len() {
        return Err(Error::InvalidArgument("need one weight per mixture center".into()));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) || !(width > 0.0) {
        return Err(Error::InvalidArgument("mixture weights and width must be positive".into()));
    }
    let mut land = Landscape {
        dim: 2,
        energy_fn: EnergyFn::Mixture {
            centers: centers.clone(),
            weights,
            width,
        },
        domain: [[-4.0, 4.0], [-4.0, 4.0]],
        minima: Vec::new(),
    };
    // gradient descent from each center; the step is well inside the
    // stability limit 2 s^2 of the steepest well
    let step = 0.5 * width * width;
    for c in centers {
        let mut x = c;
        for _ in 0..100_000 {
            let g = land.gradient(x);
            if g[0].hypot(g[1]) < 1e-13 {
                break;
            }
            x = [x[0] - step * g[0], x[1] - step * g[1]];
        }
        let dup = land
            .minima
            .iter()
            .any(|m| (m.location[0] - x[0]).hypot(m.location[1] - x[1]) < 1e-6);
        if !dup {
            land.minima.push(Minimum {
                location: x,
                energy: land.energy(x),
            });
        }
    }
    land.sort_minima();
    Ok(land)
}

/// Three modes of unequal depth: the deepest at (-2, 0), then (2, 0), then (0, 2.5).
pub fn default_mixture() -> Landscape {
    make_mixture(
        vec![[-2.0, 0.0], [2.0, 0.0], [0.0, 2.5]],
        vec![1.0, 0.5, 0.3],
        0.6,
    )
    .expect("fixed mixture parameters are valid")
}

impl Landscape {
    fn sort_minima(&mut self) {
        self.minima.sort_by(|a, b| a.energy.total_cmp(&b.energy));
    }

    pub fn energy(&self, x: [f64; 2]) -> f64 {
        match &self.energy_fn {
            EnergyFn::DoubleWell { tilt } => {
                let q = x[0] * x[0] - 1.0;
                q * q - tilt * x[0]
            }
            EnergyFn::Mixture {
                centers,
                weights,
                width,
            } => {
                let (logs, top) = mixture_logs(x, centers, weights, *width);
                -(top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln())
            }
        }
    }

    pub fn gradient(&self, x: [f64; 2]) -> [f64; 2] {
        match &self.energy_fn {
            EnergyFn::DoubleWell { tilt } => [4.0 * x[0] * (x[0] * x[0] - 1.0) - tilt, 0.0],
            EnergyFn::Mixture {
                centers,
                weights,
                width,
            } => {
                let (logs, top) = mixture_logs(x, centers, weights, *width);
                let resp: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
                let total: f64 = resp.iter().sum();
                let s2 = width * width;
                let mut g = [0.0; 2];
                for (r, c) in resp.iter().zip(centers) {
                    g[0] += r * (x[0] - c[0]);
                    g[1] += r * (x[1] - c[1]);
                }
                [g[0] / (total * s2), g[1] / (total * s2)]
            }
        }
    }

    /// Central differences with step `h`.
    pub fn fd_gradient(&self, x: [f64; 2], h: f64) -> [f64; 2] {
        let mut g = [0.0; 2];
        for (k, gk) in g.iter_mut().enumerate().take(self.dim) {
            let (mut a, mut b) = (x, x);
            a[k] += h;
            b[k] -= h;
            *gk = (self.energy(a) - self.energy(b)) / (2.0 * h);
        }
        g
    }

    pub fn global_minimum(&self) -> Minimum {
        self.minima[0]
    }

    /// Index into `minima` of the closest known minimum.
    pub fn nearest_minimum(&self, x: [f64; 2]) -> usize {
        let d = |m: &Minimum| (m.location[0] - x[0]).hypot(m.location[1] - x[1]);
        (0..self.minima.len())
            .min_by(|&a, &b| d(&self.minima[a]).total_cmp(&d(&self.minima[b])))
            .expect("landscape has minima")
    }

    /// Fold a point back into the domain by mirror reflection.
    pub fn reflect(&self, mut x: [f64; 2]) -> [f64; 2] {
        for k in 0..self.dim {
            let [lo, hi] = self.domain[k];
            if x[k] > hi {
                x[k] = 2.0 * hi - x[k];
            }
            if x[k] < lo {
                x[k] = 2.0 * lo - x[k];
            }
            x[k] = x[k].clamp(lo, hi);
        }
        x
    }

    /// Largest energy on the domain, by a grid scan plus the corners.
    pub fn max_energy(&self) -> f64 {
        let n = if self.dim == 1 { 20_001 } else { 401 };
        let at = |k: usize, i: usize| {
            let [lo, hi] = self.domain[k];
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        };
        let mut top = f64::NEG_INFINITY;
        for i in 0..n {
            if self.dim == 1 {
                top = top.max(self.energy([at(0, i), 0.0]));
            } else {
                for j in 0..n {
                    top = top.max(self.energy([at(0, i), at(1, j)]));
                }
            }
        }
        top
    }
}

fn mixture_logs(x: [f64; 2], centers: &[[f64; 2]], weights: &[f64], width: f64) -> (Vec<f64>, f64) {
    let s2 = width * width;
    let logs: Vec<f64> = centers
        .iter()
        .zip(weights)
        .map(|(c, w)| w.ln() - ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (2.0 * s2))
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (logs, top)
}

// ---------------------------------------------------------------------------
// quadrature

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const KRONROD_W: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd-indexed Kronrod nodes (1, 3, 5, 7)
const GAUSS_W: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One Gauss-Kronrod 7/15 panel on a vector-valued integrand.
fn gk15<F: FnMut(f64, &mut [f64])>(f: &mut F, a: f64, b: f64, width: usize) -> (Vec<f64>, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kron = vec![0.0; width];
    let mut gauss = vec![0.0; width];
    let mut buf = vec![0.0; width];
    for (i, (&node, &wk)) in GK_NODES.iter().zip(&KRONROD_W).enumerate() {
        let xs: &[f64] = if node == 0.0 { &[0.0] } else { &[node, -node] };
        for &t in xs {
            buf.iter_mut().for_each(|v| *v = 0.0);
            f(c + h * t, &mut buf);
            for k in 0..width {
                kron[k] += wk * buf[k];
                if i % 2 == 1 {
                    gauss[k] += GAUSS_W[i / 2] * buf[k];
                }
            }
        }
    }
    let err = kron.iter().zip(&gauss).map(|(k, g)| (k - g).abs()).sum::<f64>() * h;
    kron.iter_mut().for_each(|v| *v *= h);
    (kron, err)
}

/// Adaptive bisection of GK15 panels until the summed error estimate is
/// below `tol` (absolute) on every panel, scaled by the panel's share of `[a, b]`.
fn integrate<F: FnMut(f64, &mut [f64])>(f: &mut F, a: f64, b: f64, width: usize, tol: f64) -> Vec<f64> {
    let mut total = vec![0.0; width];
    let mut stack = vec![(a, b, 0u32)];
    while let Some((lo, hi, depth)) = stack.pop() {
        let (val, err) = gk15(f, lo, hi, width);
        let share = tol * (hi - lo) / (b - a);
        if err <= share || depth >= 48 || hi - lo < 1e-14 * (b - a).abs().max(1.0) {
            for k in 0..width {
                total[k] += val[k];
            }
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, depth + 1));
            stack.push((mid, hi, depth + 1));
        }
    }
    total
}

/// Per-bin mass of `exp(-(u(t) - shift) / tau)` for `t` in `[a, b]`,
/// accumulated into `out`. The interval is cut at the critical points of `u`
/// and at every crossing of a bin edge, so each piece lies in one bin.
#[allow(clippy::too_many_arguments)]
fn line_masses(
    u: &dyn Fn(f64) -> f64,
    du: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    part: &EnergyPartition,
    tau: f64,
    shift: f64,
    tol: f64,
    out: &mut [f64],
) {
    const SCAN: usize = 512;
    let mut cuts = vec![a];
    let mut prev_t = a;
    let mut prev_d = du(a);
    for i in 1..=SCAN {
        let t = a + (b - a) * i as f64 / SCAN as f64;
        let d = du(t);
        if d == 0.0 {
            cuts.push(t);
        } else if prev_d != 0.0 && (d > 0.0) != (prev_d > 0.0) {
            cuts.push(bisect(du, prev_t, t));
        }
        prev_t = t;
        prev_d = d;
    }
    cuts.push(b);

    let mut pieces = Vec::new();
    for w in cuts.windows(2) {
        let (p, q) = (w[0], w[1]);
        if q <= p {
            continue;
        }
        let (up, uq) = (u(p), u(q));
        let (lo_u, hi_u) = (up.min(uq), up.max(uq));
        let mut inner = vec![p];
        for n in 1..part.bins() {
            let e = part.edge(n);
            if e > lo_u && e < hi_u {
                inner.push(bisect(|t| u(t) - e, p, q));
            }
        }
        inner.push(q);
        inner.sort_by(f64::total_cmp);
        pieces.extend(inner.windows(2).map(|s| (s[0], s[1])));
    }

    for (p, q) in pieces {
        if q <= p {
            continue;
        }
        let bin = subregion_index(u(0.5 * (p + q)), part);
        let mut f = |t: f64, v: &mut [f64]| v[0] = (-(u(t) - shift) / tau).exp();
        let m = integrate(&mut f, p, q, 1, tol * (q - p) / (b - a))[0];
        out[bin - 1] += m;
    }
}

/// Normalized probability mass of `exp(-U / tau)` in each energy bin.
pub fn bin_mass_oracle(land: &Landscape, part: &EnergyPartition, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let m = part.bins();
    let shift = land.global_minimum().energy;
    let [x0, x1] = land.domain[0];
    let mut masses = vec![0.0; m];
    // the shifted integrand peaks at 1, so absolute tolerances are relative
    // to a mass of order one well width
    let tol = 1e-13;
    match land.dim {
        1 => {
            let u = |t: f64| land.energy([t, 0.0]);
            let du = |t: f64| land.gradient([t, 0.0])[0];
            line_masses(&u, &du, x0, x1, part, tau, shift, tol, &mut masses);
        }
        2 => {
            let [y0, y1] = land.domain[1];
            let mut slice = |y: f64, v: &mut [f64]| {
                let u = |t: f64| land.energy([t, y]);
                let du = |t: f64| land.gradient([t, y])[0];
                line_masses(&u, &du, x0, x1, part, tau, shift, tol, v);
            };
            masses = integrate(&mut slice, y0, y1, m, 1e-11);
        }
        d => return Err(Error::InvalidArgument(format!("unsupported dimension {d}"))),
    }
    let total: f64 = masses.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::IntegralUnderflow);
    }
    Ok(masses.into_iter().map(|v| v / total).collect())
}

/// Bins whose energy interval intersects the range of `U` over the domain.
pub fn reachable_bins(land: &Landscape, part: &EnergyPartition) -> Vec<bool> {
    let lo = land.global_minimum().energy;
    let hi = land.max_energy();
    (1..=part.bins())
        .map(|n| part.edge(n - 1) < hi && part.edge(n) >= lo)
        .collect()
}

/// Chi-square distance of the normalized occupancy to the uniform
/// distribution, restricted to the bins marked in `reachable`.
pub fn occupancy_chi_square(counts: &[u64], reachable: &[bool]) -> f64 {
    assert_eq!(counts.len(), reachable.len());
    let total: u64 = counts
        .iter()
        .zip(reachable)
        .filter(|(_, &r)| r)
        .map(|(c, _)| c)
        .sum();
    let k = reachable.iter().filter(|&&r| r).count();
    if total == 0 || k == 0 {
        return f64::NAN;
    }
    let q = 1.0 / k as f64;
    counts
        .iter()
        .zip(reachable)
        .filter(|(_, &r)| r)
        .map(|(&c, _)| {
            let p = c as f64 / total as f64;
            (p - q) * (p - q) / q
        })
        .sum()
}

pub fn theta_mae(theta: &[f64], oracle: &[f64]) -> f64 {
    assert_eq!(theta.len(), oracle.len());
    theta.iter().zip(oracle).map(|(a, b)| (a - b).abs()).sum::<f64>() / theta.len() as f64
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`.
pub fn binomial_upper_tail(n: u64, k: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let ln_choose = |i: u64| -> f64 {
        (1..=i).map(|j| ((n - i + j) as f64 / j as f64).ln()).sum()
    };
    (k..=n)
        .map(|i| (ln_choose(i) + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp())
        .sum::<f64>()
        .min(1.0)
}

// ---------------------------------------------------------------------------
// samplers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Optimizer {
    Sgld,
    Awsgld,
}

impl Optimizer {
    pub const ALL: [Optimizer; 2] = [Optimizer::Sgld, Optimizer::Awsgld];

    pub fn as_str(self) -> &'static str {
        match self {
            Optimizer::Sgld => "sgld",
            Optimizer::Awsgld => "awsgld",
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown optimizer '{s}' (sgld|awsgld)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    Identity,
    Adam,
}

/// One Langevin chain on a landscape:
/// `x <- x - lr * nu * P(grad U) + lambda_noise * sqrt(2 lr tau) * eta`,
/// reflected at the domain walls. The temperature is `flattening.tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub lambda_noise: f64,
    pub iters: usize,
    pub preconditioner: Preconditioner,
    pub partition: EnergyPartition,
    pub flattening: FlatteningConfig,
    pub escape_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub theta: ThetaVector,
    /// Visits per bin (index `n - 1` for bin `n`), one per step.
    pub occupancy: Vec<u64>,
    /// First step count `k` at which the position lies within the escape
    /// radius of the global minimum; 0 means the start already does.
    pub first_escape: Option<usize>,
    pub final_position: [f64; 2],
    pub final_energy: f64,
}

/// Noise stream of one trial.
pub fn trial_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn run_chain(land: &Landscape, cfg: &ChainConfig, start: [f64; 2], seed: u64) -> Result<ChainResult> {
    if !(cfg.lr > 0.0) || !(cfg.lambda_noise >= 0.0) {
        return Err(Error::InvalidArgument("lr must be positive and lambda_noise >= 0".into()));
    }
    let mut rng = trial_rng(seed);
    let mut flat = FlatHistogram::new(cfg.partition, cfg.flattening)?;
    let tau = cfg.flattening.tau;
    let noise_scale = cfg.lambda_noise * (2.0 * cfg.lr * tau).sqrt();
    let mut adam = AdamState::new(2, AdamHyper::default());
    let goal = land.global_minimum().location;
    let inside = |x: [f64; 2]| (x[0] - goal[0]).hypot(x[1] - goal[1]) <= cfg.escape_radius;

    let mut x = land.reflect(start);
    let mut occupancy = vec![0u64; cfg.partition.bins()];
    let mut first_escape = inside(x).then_some(0);
    let flatten = cfg.optimizer == Optimizer::Awsgld;

    for k in 0..cfg.iters {
        let visit = flat.visit(land.energy(x), k);
        occupancy[visit.bin - 1] += 1;
        let nu = if flatten { visit.nu } else { 1.0 };
        let g = land.gradient(x);
        let dir = match cfg.preconditioner {
            Preconditioner::Identity => g,
            Preconditioner::Adam => {
                adam.advance();
                let mut d = [0.0; 2];
                for i in 0..land.dim {
                    d[i] = adam.update(i, g[i]);
                }
                d
            }
        };
        let mut next = x;
        for i in 0..land.dim {
            let eta: f64 = rng.sample(StandardNormal);
            next[i] = x[i] - cfg.lr * nu * dir[i] + noise_scale * eta;
        }
        let next = land.reflect(next);
        if next.iter().all(|v| v.is_finite()) {
            x = next;
        }
        if flatten {
            flat.observe(&visit)?;
        }
        if first_escape.is_none() && inside(x) {
            first_escape = Some(k + 1);
        }
    }
    Ok(ChainResult {
        theta: flat.theta,
        occupancy,
        first_escape,
        final_position: x,
        final_energy: land.energy(x),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EscapeOutcome {
    pub escaped: bool,
    pub first_escape: Option<usize>,
    pub final_energy: f64,
    pub final_position: [f64; 2],
    pub chain: ChainResult,
}

/// Run one chain from `start` (normally a non-global minimum) and report
/// whether it ever came within the escape radius of the global minimum.
pub fn run_escape_trial(land: &Landscape, cfg: &ChainConfig, start: [f64; 2], seed: u64) -> Result<EscapeOutcome> {
    let chain = run_chain(land, cfg, start, seed)?;
    Ok(EscapeOutcome {
        escaped: chain.first_escape.is_some(),
        first_escape: chain.first_escape,
        final_energy: chain.final_energy,
        final_position: chain.final_position,
        chain,
    })
}

// ---------------------------------------------------------------------------
// benchmark scenarios

/// A landscape with its start point and sampler settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: &'static str,
    pub landscape: Landscape,
    pub start: [f64; 2],
    pub chain: ChainConfig,
}

pub const ESCAPE_RADIUS: f64 = 0.2;

impl Scenario {
    pub const NAMES: [&'static str; 2] = ["double-well", "mixture"];

    /// Tilted double well started in the shallower left well.
    pub fn double_well() -> Self {
        let landscape = make_double_well(0.2).expect("valid tilt");
        let start = landscape.minima[1].location;
        Self {
            name: "double-well",
            chain: ChainConfig {
                optimizer: Optimizer::Awsgld,
                lr: 3e-3,
                lambda_noise: 1.0,
                iters: 20_000,
                preconditioner: Preconditioner::Identity,
                partition: EnergyPartition::new(20, -0.2, 1.6).expect("valid partition"),
                flattening: FlatteningConfig {
                    zeta: 0.75,
                    tau: 0.15,
                    theta_lr: 1e-2,
                    warmup_iters: 250,
                    nu_clip: (-20.0, 20.0),
                    ..FlatteningConfig::default()
                },
                escape_radius: ESCAPE_RADIUS,
            },
            landscape,
            start,
        }
    }

    /// Three-mode mixture started in the shallowest mode.
    pub fn mixture() -> Self {
        let landscape = default_mixture();
        let start = landscape.minima[landscape.minima.len() - 1].location;
        Self {
            name: "mixture",
            chain: ChainConfig {
                optimizer: Optimizer::Awsgld,
                lr: 3e-3,
                lambda_noise: 1.0,
                iters: 20_000,
                preconditioner: Preconditioner::Identity,
                partition: EnergyPartition::new(20, 0.0, 4.0).expect("valid partition"),
                flattening: FlatteningConfig {
                    zeta: 0.75,
                    tau: 0.3,
                    theta_lr: 1e-2,
                    warmup_iters: 250,
                    nu_clip: (-20.0, 20.0),
                    ..FlatteningConfig::default()
                },
                escape_radius: ESCAPE_RADIUS,
            },
            landscape,
            start,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "double-well" => Ok(Self::double_well()),
            "mixture" => Ok(Self::mixture()),
            _ => Err(Error::InvalidArgument(format!(
                "unknown scenario '{name}' (double-well|mixture)"
            ))),
        }
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.chain.optimizer = optimizer;
        self
    }

    pub fn oracle(&self) -> Result<Vec<f64>> {
        bin_mass_oracle(&self.landscape, &self.chain.partition, self.chain.flattening.tau)
    }
}

pub const BENCH_HEADER: &str = "scenario,optimizer,seed,escaped,first_escape_iter,final_energy,theta_mae";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub scenario: String,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub escaped: bool,
    pub first_escape_iter: Option<usize>,
    pub final_energy: f64,
    /// Only the flat-histogram sampler has weights to compare.
    pub theta_mae: Option<f64>,
}

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.scenario,
            self.optimizer,
            self.seed,
            self.escaped,
            self.first_escape_iter.map(|i| i.to_string()).unwrap_or_default(),
            self.final_energy,
            self.theta_mae.map(|v| v.to_string()).unwrap_or_default(),
        )
    }
}

/// Trials for seeds `0..seeds`, run in parallel, returned in seed order.
pub fn run_bench(scenario: &Scenario, optimizer: Optimizer, seeds: u64) -> Result<Vec<BenchRow>> {
    let oracle = if optimizer == Optimizer::Awsgld {
        Some(scenario.oracle()?)
    } else {
        None
    };
    let mut cfg = scenario.chain.clone();
    cfg.optimizer = optimizer;
    (0..seeds)
        .into_par_iter()
        .map(|seed| {
            let out = run_escape_trial(&scenario.landscape, &cfg, scenario.start, seed)?;
            Ok(BenchRow {
                scenario: scenario.name.to_string(),
                optimizer,
                seed,
                escaped: out.escaped,
                first_escape_iter: out.first_escape,
                final_energy: out.final_energy,
                theta_mae: oracle
                    .as_ref()
                    .map(|o| theta_mae(out.chain.theta.as_slice(), o)),
            })
        })
        .collect()
}

pub fn escape_fraction(rows: &[BenchRow]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    rows.iter().filter(|r| r.escaped).count() as f64 / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn midpoint_masses(land: &Landscape, part: &EnergyPartition, tau: f64, n: usize) -> Vec<f64> {
        // brute-force midpoint sum, an independent check on the adaptive oracle
        let [a, b] = land.domain[0];
        let h = (b - a) / n as f64;
        let mut m = vec![0.0; part.bins()];
        for i in 0..n {
            let x = a + (i as f64 + 0.5) * h;
            let u = land.energy([x, 0.0]);
            m[subregion_index(u, part) - 1] += (-u / tau).exp() * h;
        }
        let s: f64 = m.iter().sum();
        m.iter().map(|v| v / s).collect()
    }

    #[test]
    fn symmetric_double_well_values() {
        let land = make_double_well(0.0).unwrap();
        assert!((land.energy([1.0, 0.0])).abs() < 1e-15);
        assert!((land.energy([-1.0, 0.0])).abs() < 1e-15);
        assert_eq!(land.energy([0.0, 0.0]), 1.0);
        for m in &land.minima {
            assert!((m.location[0].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tilted_double_well_prefers_right() {
        let land = make_double_well(0.2).unwrap();
        let g = land.global_minimum();
        assert!(g.location[0] > 0.0);
        assert!(g.energy < land.minima[1].energy);
        assert!(land.minima[1].location[0] < 0.0);
        assert!((land.gradient([0.0, 0.0])[0] + 0.2).abs() < 1e-15);
        assert!(make_double_well(1.0).is_err());
    }

    #[test]
    fn mixture_has_three_ordered_modes() {
        let land = default_mixture();
        assert_eq!(land.minima.len(), 3);
        let g = land.global_minimum().location;
        assert!((g[0] + 2.0).abs() < 0.05 && g[1].abs() < 0.05);
        assert!(land.minima[0].energy < land.minima[1].energy);
        assert!(land.minima[1].energy < land.minima[2].energy);
        for m in &land.minima {
            let gr = land.gradient(m.location);
            assert!(gr[0].hypot(gr[1]) < 1e-10);
        }
    }

    #[test]
    fn single_bin_spanning_energies_gets_all_mass() {
        let land = make_double_well(0.2).unwrap();
        // every energy on the domain lies in the middle bin
        let part = EnergyPartition::new(3, -10.0, 100.0).unwrap();
        let m = bin_mass_oracle(&land, &part, 1.0).unwrap();
        assert!((m[1] - 1.0).abs() < 1e-15 && m[0] == 0.0 && m[2] == 0.0);
    }

    #[test]
    fn oracle_matches_brute_force_sum() {
        let land = make_double_well(0.2).unwrap();
        let part = EnergyPartition::new(20, 0.0, 2.0).unwrap();
        let exact = bin_mass_oracle(&land, &part, 1.0).unwrap();
        // the midpoint sum is only first-order accurate at bin edges
        let brute = midpoint_masses(&land, &part, 1.0, 2_000_000);
        for (a, b) in exact.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert!((exact.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn symmetric_well_masses_match_half_domain() {
        // binning is by energy, so the full domain is twice the right half
        let land = make_double_well(0.0).unwrap();
        let part = EnergyPartition::new(12, 0.0, 3.0).unwrap();
        let full = bin_mass_oracle(&land, &part, 0.7).unwrap();
        let mut half = land.clone();
        half.domain[0] = [0.0, 3.0];
        let right = bin_mass_oracle(&half, &part, 0.7).unwrap();
        for (a, b) in full.iter().zip(&right) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn oracle_underflow_is_reported() {
        let land = make_double_well(0.2).unwrap();
        let part = EnergyPartition::new(20, 0.0, 2.0).unwrap();
        assert!(matches!(
            bin_mass_oracle(&land, &part, 1e-300),
            Err(Error::IntegralUnderflow)
        ));
    }

    #[test]
    fn mixture_oracle_matches_grid_sum() {
        let land = default_mixture();
        let part = EnergyPartition::new(8, 0.5, 6.0).unwrap();
        let exact = bin_mass_oracle(&land, &part, 1.0).unwrap();
        let n = 1200;
        let h = 8.0 / n as f64;
        let mut m = vec![0.0; 8];
        for i in 0..n {
            for j in 0..n {
                let p = [-4.0 + (i as f64 + 0.5) * h, -4.0 + (j as f64 + 0.5) * h];
                let u = land.energy(p);
                m[subregion_index(u, &part) - 1] += (-u).exp();
            }
        }
        let s: f64 = m.iter().sum();
        for (a, b) in exact.iter().zip(&m) {
            assert!((a - b / s).abs() < 2e-4, "{a} vs {}", b / s);
        }
    }

    #[test]
    fn chi_square_is_zero_for_uniform() {
        let c = [5, 5, 5, 100];
        let r = [true, true, true, false];
        assert_eq!(occupancy_chi_square(&c, &r), 0.0);
        assert!(occupancy_chi_square(&[10, 0, 0, 0], &[true; 4]) > 1.0);
    }

    #[test]
    fn binomial_tail_known_values() {
        assert!((binomial_upper_tail(10, 0, 0.3) - 1.0).abs() < 1e-15);
        assert!((binomial_upper_tail(2, 2, 0.5) - 0.25).abs() < 1e-15);
        assert!((binomial_upper_tail(3, 2, 0.5) - 0.5).abs() < 1e-15);
        assert_eq!(binomial_upper_tail(5, 6, 0.5), 0.0);
    }

    fn quick_cfg(optimizer: Optimizer) -> ChainConfig {
        let mut c = Scenario::double_well().chain;
        c.optimizer = optimizer;
        c.iters = 2000;
        c
    }

    #[test]
    fn noiseless_unflattened_chain_stays_trapped() {
        let land = make_double_well(0.2).unwrap();
        let mut cfg = quick_cfg(Optimizer::Awsgld);
        cfg.lambda_noise = 0.0;
        cfg.flattening.zeta = 0.0;
        let out = run_escape_trial(&land, &cfg, land.minima[1].location, 0).unwrap();
        assert!(!out.escaped);
        assert!((out.final_position[0] - land.minima[1].location[0]).abs() < 1e-9);
    }

    #[test]
    fn start_at_global_minimum_escapes_at_zero() {
        let land = make_double_well(0.2).unwrap();
        let cfg = quick_cfg(Optimizer::Sgld);
        let out = run_escape_trial(&land, &cfg, land.global_minimum().location, 3).unwrap();
        assert_eq!(out.first_escape, Some(0));
    }

    #[test]
    fn chains_are_deterministic_per_seed() {
        let land = make_double_well(0.2).unwrap();
        let cfg = quick_cfg(Optimizer::Awsgld);
        let a = run_chain(&land, &cfg, [-1.0, 0.0], 9).unwrap();
        let b = run_chain(&land, &cfg, [-1.0, 0.0], 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.occupancy.iter().sum::<u64>(), 2000);
    }

    #[test]
    fn sgld_leaves_weights_untouched() {
        let land = make_double_well(0.2).unwrap();
        let out = run_chain(&land, &quick_cfg(Optimizer::Sgld), [-1.0, 0.0], 1).unwrap();
        assert_eq!(out.theta, ThetaVector::uniform(20));
    }

    #[test]
    fn bench_rows_format() {
        let mut sc = Scenario::double_well();
        sc.chain.iters = 500;
        let rows = run_bench(&sc, Optimizer::Awsgld, 2).unwrap();
        assert_eq!(rows.len(), 2);
        let line = rows[0].to_csv();
        assert_eq!(line.split(',').count(), BENCH_HEADER.split(',').count());
        assert!(line.starts_with("double-well,awsgld,0,"));
        assert!(Scenario::from_name("volcano").is_err());
        assert!("adam".parse::<Optimizer>().is_err());
    }

    #[test]
    fn reachable_bins_cover_energy_range() {
        let land = make_double_well(0.2).unwrap();
        let part = EnergyPartition::new(20, 0.0, 5.0).unwrap();
        assert!(reachable_bins(&land, &part).iter().all(|&r| r));
        let far = EnergyPartition::new(5, 100.0, 200.0).unwrap();
        let r = reachable_bins(&land, &far);
        assert!(r[0] && !r[4]);
    }

    proptest! {
        #[test]
        fn double_well_gradient_matches_fd(x in -3.0f64..3.0, tilt in -0.99f64..0.99) {
            let land = make_double_well(tilt).unwrap();
            let g = land.gradient([x, 0.0])[0];
            let fd = land.fd_gradient([x, 0.0], 1e-5)[0];
            prop_assert!((g - fd).abs() <= 1e-6 * g.abs().max(1.0));
        }

        #[test]
        fn mixture_gradient_matches_fd(x in -4.0f64..4.0, y in -4.0f64..4.0) {
            let land = default_mixture();
            let g = land.gradient([x, y]);
            let fd = land.fd_gradient([x, y], 1e-5);
            for k in 0..2 {
                prop_assert!((g[k] - fd[k]).abs() <= 1e-6 * g[k].abs().max(1.0));
            }
        }

        #[test]
        fn reflection_stays_in_domain(x in -8.9f64..8.9, y in -11.9f64..11.9) {
            let land = default_mixture();
            let r = land.reflect([x, y]);
            prop_assert!(r[0].abs() <= 4.0 && r[1].abs() <= 4.0);
        }
    }
}
