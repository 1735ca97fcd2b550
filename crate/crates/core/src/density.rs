//! MCMC-style density control: opacity-weighted target sampling, N-way
//! splits that conserve the composited footprint, growth and relocation of
//! dead primitives.
//!
//! Structural edits return `origins`, one entry per slot of the new cloud,
//! naming the old index the slot continues (`None` for fresh state). Callers
//! feed it to the optimizer states' `remap`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Gaussian2D, GaussianCloud, Sym2};

pub const MAX_SPLIT: usize = 32;
pub const DEFAULT_OPACITY_FLOOR: f64 = 0.005;
pub const DEFAULT_GROWTH_RATE: f64 = 0.05;

/// Largest opacity fed into a split; keeps the children's logits finite.
const OPACITY_CEIL: f64 = 1.0 - 1e-12;

/// `count` i.i.d. draws with `P(i)` proportional to opacity, ignoring
/// primitives whose opacity is at or below `floor`.
pub fn sample_by_opacity<R: Rng + ?Sized>(
    cloud: &GaussianCloud,
    count: usize,
    floor: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let weights: Vec<f64> = cloud
        .gaussians
        .iter()
        .map(|g| {
            let o = g.opacity();
            if o > floor {
                o
            } else {
                0.0
            }
        })
        .collect();
    sample_categorical(&weights, count, rng).ok_or(Error::NoValidTarget { floor })
}

fn sample_categorical<R: Rng + ?Sized>(
    weights: &[f64],
    count: usize,
    rng: &mut R,
) -> Option<Vec<usize>> {
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut total = 0.0;
    for &w in weights {
        total += w;
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return None;
    }
    let last_positive = weights.iter().rposition(|&w| w > 0.0)?;
    Some(
        (0..count)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                let i = cumulative.partition_point(|&c| c <= u);
                // u can round up to total; also skip zero-weight slots at the end
                i.min(last_positive)
            })
            .collect(),
    )
}

/// Shannon entropy (nats) of the opacity-proportional sampling distribution.
pub fn sampling_entropy(cloud: &GaussianCloud, floor: f64) -> f64 {
    let ws: Vec<f64> = cloud
        .gaussians
        .iter()
        .map(|g| g.opacity())
        .filter(|&o| o > floor)
        .collect();
    let total: f64 = ws.iter().sum();
    if !(total > 0.0) {
        return 0.0;
    }
    ws.iter()
        .map(|w| w / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

fn binomial_row(n: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(n + 1);
    let mut c = 1.0;
    row.push(c);
    for k in 0..n {
        c = c * (n - k) as f64 / (k + 1) as f64;
        row.push(c);
    }
    row
}

/// Shared child opacity and the covariance scale factor of an `n`-way split.
pub fn split_factor(o_old: f64, n: usize) -> Result<(f64, f64)> {
    if n == 0 || n > MAX_SPLIT {
        return Err(Error::InvalidArgument(format!(
            "split count must lie in 1..={MAX_SPLIT}, got {n}"
        )));
    }
    if !(o_old > 0.0 && o_old < 1.0) {
        return Err(Error::OutsideUnitInterval { value: o_old });
    }
    if n == 1 {
        return Ok((o_old, 1.0));
    }
    let o_new = 1.0 - (1.0 - o_old).powf(1.0 / n as f64);
    let mut terms = Vec::with_capacity(n * (n + 1) / 2);
    for i in 1..=n {
        let row = binomial_row(i - 1);
        let mut pow = o_new;
        for (k, c) in row.iter().enumerate() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            terms.push(sign * c * pow / ((k + 1) as f64).sqrt());
            pow *= o_new;
        }
    }
    terms.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    let sum: f64 = terms.iter().sum();
    let factor = (o_old / sum).powi(2);
    Ok((o_new, factor))
}

/// `(o_new, sigma_new)` shared by all `n` children of a split.
pub fn split_parameters(o_old: f64, sigma_old: &Sym2, n: usize) -> Result<(f64, Sym2)> {
    let (o_new, factor) = split_factor(o_old, n)?;
    Ok((o_new, sigma_old.scaled(factor)))
}

fn apply_split(g: &mut Gaussian2D, n: usize) -> Result<()> {
    let o = g.opacity().min(OPACITY_CEIL);
    let (o_new, factor) = split_factor(o, n)?;
    if n > 1 {
        g.set_opacity(o_new)?;
        // scaling the covariance by f scales each axis by sqrt(f)
        let d = 0.5 * factor.ln();
        g.log_scale[0] += d;
        g.log_scale[1] += d;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Grow,
    Relocate,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Grow => "grow",
            EventKind::Relocate => "relocate",
        }
    }
}

/// One split site: `target` (index in the new cloud) and its `n`-way split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DensityEvent {
    pub kind: EventKind,
    pub target: usize,
    /// New-cloud indices of the children placed at the target.
    pub children: Vec<usize>,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensityReport {
    pub origins: Vec<Option<usize>>,
    pub events: Vec<DensityEvent>,
    pub added: usize,
    pub relocated: usize,
    /// Set when the edit was skipped, e.g. the cloud is at capacity.
    pub note: Option<String>,
}

impl DensityReport {
    fn identity(n: usize, note: Option<String>) -> Self {
        Self {
            origins: (0..n).map(Some).collect(),
            note,
            ..Default::default()
        }
    }

    pub fn changed(&self) -> bool {
        self.added > 0 || self.relocated > 0
    }
}

/// Draw up to `want` targets, never giving any site more than `MAX_SPLIT - 1`
/// extra copies. Returns per-index copy counts.
fn draw_sites<R: Rng + ?Sized>(
    cloud: &GaussianCloud,
    want: usize,
    floor: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut copies = vec![0usize; cloud.len()];
    let mut remaining = want;
    while remaining > 0 {
        let draws = sample_by_opacity(cloud, remaining, floor, rng)?;
        let before = remaining;
        for t in draws {
            if copies[t] + 1 < MAX_SPLIT {
                copies[t] += 1;
                remaining -= 1;
            }
        }
        if remaining == before {
            // every site with weight is saturated
            break;
        }
    }
    Ok(copies)
}

/// Rebuild the cloud placing `copies[i]` children after primitive `i`, and
/// dropping primitives flagged in `removed`. Children copy their parent and
/// both share the split parameters.
fn rebuild(
    cloud: &mut GaussianCloud,
    copies: &[usize],
    removed: &[bool],
    kind: EventKind,
    report: &mut DensityReport,
) -> Result<()> {
    let old = std::mem::take(&mut cloud.gaussians);
    let mut out = Vec::with_capacity(old.len() + copies.iter().sum::<usize>());
    let mut origins = Vec::with_capacity(out.capacity());
    for (i, mut g) in old.into_iter().enumerate() {
        if removed[i] {
            continue;
        }
        let extra = copies[i];
        if extra > 0 {
            apply_split(&mut g, extra + 1)?;
        }
        let target = out.len();
        out.push(g.clone());
        origins.push(Some(i));
        if extra > 0 {
            let children: Vec<usize> = (target + 1..=target + extra).collect();
            for _ in 0..extra {
                out.push(g.clone());
                origins.push(None);
            }
            report.events.push(DensityEvent {
                kind,
                target,
                children,
                n: extra + 1,
            });
        }
    }
    cloud.gaussians = out;
    cloud.renumber();
    report.origins = origins;
    Ok(())
}

/// Add `min(ceil(rate * n), max_count - n)` primitives by splitting
/// opacity-sampled targets.
pub fn grow<R: Rng + ?Sized>(
    cloud: &mut GaussianCloud,
    rate: f64,
    rng: &mut R,
) -> Result<DensityReport> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::InvalidArgument(format!("growth rate {rate}")));
    }
    let n = cloud.len();
    let room = cloud.remaining_capacity();
    if room == 0 {
        return Ok(DensityReport::identity(
            n,
            Some(format!("at capacity ({} Gaussians)", cloud.max_count)),
        ));
    }
    // 1e-9 absorbs representation error such as 0.05 * 100
    let want = ((rate * n as f64 - 1e-9).ceil().max(0.0) as usize).min(room);
    if want == 0 {
        return Ok(DensityReport::identity(n, None));
    }
    let copies = draw_sites(cloud, want, 0.0, rng)?;
    let mut report = DensityReport::default();
    rebuild(cloud, &copies, &vec![false; n], EventKind::Grow, &mut report)?;
    report.added = copies.iter().sum();
    if report.added < want {
        report.note = Some(format!("only {} of {want} sites available", report.added));
    }
    Ok(report)
}

/// Move every primitive with opacity below `floor` onto an opacity-sampled
/// live target; each target and its movers share the split parameters.
/// Movers come back with `None` origins so their optimizer state restarts.
pub fn relocate_dead<R: Rng + ?Sized>(
    cloud: &mut GaussianCloud,
    floor: f64,
    rng: &mut R,
) -> Result<DensityReport> {
    let n = cloud.len();
    let dead: Vec<bool> = cloud.gaussians.iter().map(|g| g.opacity() < floor).collect();
    let movers = dead.iter().filter(|&&d| d).count();
    if movers == 0 {
        return Ok(DensityReport::identity(n, None));
    }
    if movers == n {
        return Err(Error::NoValidTarget { floor });
    }
    // live primitives have o >= floor; sampling excludes o <= floor, so nudge down
    let sample_floor = floor * (1.0 - f64::EPSILON);
    let copies = draw_sites(cloud, movers, sample_floor, rng)?;
    let placed: usize = copies.iter().sum();
    let mut removed = dead.clone();
    if placed < movers {
        // keep the surplus dead primitives where they are
        let mut surplus = movers - placed;
        for r in removed.iter_mut().rev() {
            if surplus == 0 {
                break;
            }
            if *r {
                *r = false;
                surplus -= 1;
            }
        }
    }
    let mut report = DensityReport::default();
    rebuild(cloud, &copies, &removed, EventKind::Relocate, &mut report)?;
    report.relocated = placed;
    Ok(report)
}
