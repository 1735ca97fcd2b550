//! Adaptive weighted stochastic gradient Langevin dynamics.
//!
//! The energy axis is cut into `m` bins. A weight vector estimates the
//! probability mass of each bin by stochastic approximation, and the gradient
//! multiplier derived from it reshapes the drift so that the sampler sees a
//! flattened version of `exp(-energy / tau)`.
//!
//! Bin indices are 1-based throughout (`1..=m`), matching the usual
//! presentation of the partition with `u_0 = -inf` and `u_m = +inf`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::adam::{CloudAdam, GroupRates, ParamGroup};
use crate::error::{Error, Result};
use crate::model::{sigmoid, GaussianCloud};
use crate::render::GaussianGrad;

/// Uniform partition of the energy axis into `m` bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyPartition {
    m: usize,
    u1: f64,
    u_last: f64,
}

impl EnergyPartition {
    /// `u1` and `u_last` are the first and last finite edges (`u_1` and `u_{m-1}`).
    pub fn new(m: usize, u1: f64, u_last: f64) -> Result<Self> {
        if m < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 bins, got {m}")));
        }
        if !(u1.is_finite() && u_last.is_finite() && u1 < u_last) {
            return Err(Error::InvalidArgument(format!(
                "energy bounds must satisfy u1 < u_(m-1), got [{u1}, {u_last}]"
            )));
        }
        Ok(Self { m, u1, u_last })
    }

    pub fn bins(&self) -> usize {
        self.m
    }

    pub fn lower(&self) -> f64 {
        self.u1
    }

    pub fn upper(&self) -> f64 {
        self.u_last
    }

    pub fn delta_u(&self) -> f64 {
        (self.u_last - self.u1) / (self.m - 2) as f64
    }

    /// Edge `u_n` for `n` in `0..=m`.
    pub fn edge(&self, n: usize) -> f64 {
        match n {
            0 => f64::NEG_INFINITY,
            n if n >= self.m => f64::INFINITY,
            n if n == self.m - 1 => self.u_last,
            n => self.u1 + (n - 1) as f64 * self.delta_u(),
        }
    }
}

/// The unique `n` with `u_{n-1} < energy <= u_n`.
pub fn subregion_index(energy: f64, part: &EnergyPartition) -> usize {
    assert!(!energy.is_nan(), "energy must not be NaN");
    let m = part.m;
    if energy <= part.u1 {
        return 1;
    }
    if energy > part.u_last {
        return m;
    }
    let guess = ((energy - part.u1) / part.delta_u()).ceil() as usize + 1;
    let mut n = guess.clamp(2, m - 1);
    // rounding in the division can land one bin off
    while n > 2 && energy <= part.edge(n - 1) {
        n -= 1;
    }
    while n < m - 1 && energy > part.edge(n) {
        n += 1;
    }
    n
}

/// Per-bin weights, strictly inside (0, 1) and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    theta: Vec<f64>,
}

/// Sum-to-one drift above which the vector is renormalized.
pub const THETA_SUM_TOLERANCE: f64 = 1e-12;

impl ThetaVector {
    pub fn uniform(m: usize) -> Self {
        Self {
            theta: vec![1.0 / m as f64; m],
        }
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&w| !(w > 0.0 && w < 1.0)) {
            return Err(Error::InvalidArgument(
                "theta weights must lie in (0, 1)".into(),
            ));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("theta sums to {s}, not 1")));
        }
        Ok(Self { theta: weights })
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Weight of bin `i` (1-based).
    pub fn get(&self, i: usize) -> f64 {
        self.theta[i - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn sum_drift(&self) -> f64 {
        self.theta.iter().sum::<f64>() - 1.0
    }
}

/// Reading of the lower-neighbour term in the multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LowerNeighbor {
    /// `theta(max(J - 1, 1))`.
    IndexClamp,
    /// `max(theta(J - 1), 1)`, which is always 1 for a valid weight vector.
    ValueClamp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatteningConfig {
    pub zeta: f64,
    pub tau: f64,
    pub theta_lr: f64,
    pub warmup_iters: usize,
    pub nu_clip: (f64, f64),
    pub theta_floor: f64,
    pub lower_neighbor: LowerNeighbor,
    /// Smoothing factor for an exponential moving average of the energy
    /// before binning; `None` bins the raw energy.
    pub energy_ema: Option<f64>,
}

impl Default for FlatteningConfig {
    fn default() -> Self {
        Self {
            zeta: 0.75,
            tau: 1.0,
            theta_lr: 1e-3,
            warmup_iters: 250,
            nu_clip: (0.1, 20.0),
            theta_floor: 1e-12,
            lower_neighbor: LowerNeighbor::IndexClamp,
            energy_ema: None,
        }
    }
}

impl FlatteningConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.zeta.is_finite() && self.zeta >= 0.0) {
            return bad(format!("zeta must be finite and >= 0, got {}", self.zeta));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.theta_lr >= 0.0) {
            return bad(format!("theta_lr must be >= 0, got {}", self.theta_lr));
        }
        if !(self.nu_clip.0 <= self.nu_clip.1) {
            return bad(format!("nu_clip must be ordered, got {:?}", self.nu_clip));
        }
        if !(self.theta_floor > 0.0 && self.theta_floor < 1.0) {
            return bad("theta_floor must lie in (0, 1)".into());
        }
        if let Some(a) = self.energy_ema {
            if !(a > 0.0 && a <= 1.0) {
                return bad(format!("energy_ema must lie in (0, 1], got {a}"));
            }
        }
        Ok(())
    }
}

/// Piecewise-exponential interpolation of the weights at `energy`.
pub fn psi(theta: &ThetaVector, energy: f64, part: &EnergyPartition) -> f64 {
    let m = part.m;
    let i = subregion_index(energy, part);
    let lower = (i - 1).max(1);
    let e = if i == 1 || i == m {
        energy.clamp(part.u1, part.u_last)
    } else {
        energy
    };
    // for i == 1 the lower edge is u_1 itself and both weights coincide
    let base = part.edge(lower);
    let log_ratio = theta.get(i).ln() - theta.get(lower).ln();
    theta.get(lower) * (log_ratio * (e - base) / part.delta_u()).exp()
}

/// Drift multiplier `nu` for the visited bin `j`, clipped to `cfg.nu_clip`.
pub fn gradient_multiplier(
    theta: &ThetaVector,
    j: usize,
    part: &EnergyPartition,
    cfg: &FlatteningConfig,
) -> f64 {
    let lower_log = match cfg.lower_neighbor {
        LowerNeighbor::IndexClamp => theta.get((j - 1).max(1)).ln(),
        // every weight is below 1, so the clamp always yields ln(1)
        LowerNeighbor::ValueClamp => 0.0,
    };
    let slope = (theta.get(j).ln() - lower_log) / part.delta_u();
    let nu = 1.0 + cfg.zeta * cfg.tau * slope;
    nu.clamp(cfg.nu_clip.0, cfg.nu_clip.1)
}

/// Stochastic-approximation update after visiting bin `j`. Returns the sum
/// drift measured before renormalization.
pub fn theta_update(theta: &mut ThetaVector, j: usize, cfg: &FlatteningConfig) -> Result<f64> {
    let step = cfg.theta_lr * theta.get(j).powf(cfg.zeta);
    if step >= 1.0 {
        return Err(Error::ThetaStepTooLarge { step });
    }
    if step == 0.0 {
        return Ok(theta.sum_drift());
    }
    for (i, t) in theta.theta.iter_mut().enumerate() {
        let indicator = if i + 1 == j { 1.0 } else { 0.0 };
        *t = (*t + step * (indicator - *t)).max(cfg.theta_floor);
    }
    let drift = theta.sum_drift();
    if drift.abs() > THETA_SUM_TOLERANCE {
        let s = 1.0 + drift;
        for t in &mut theta.theta {
            *t /= s;
        }
    }
    Ok(drift)
}

/// Which way the opacity gate opens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateSign {
    /// `sigmoid(-k (t - o))`: more noise for opaque primitives.
    AsPrinted,
    /// `sigmoid(-k (o - t))`: more noise for transparent primitives.
    Inverted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseGate {
    pub k_gate: f64,
    pub t_gate: f64,
    pub lambda_noise: f64,
    pub gate_sign: GateSign,
}

impl Default for NoiseGate {
    fn default() -> Self {
        Self {
            k_gate: 100.0,
            t_gate: 0.005,
            lambda_noise: 1.0,
            gate_sign: GateSign::AsPrinted,
        }
    }
}

impl NoiseGate {
    pub fn factor(&self, opacity: f64) -> f64 {
        match self.gate_sign {
            GateSign::AsPrinted => sigmoid(-self.k_gate * (self.t_gate - opacity)),
            GateSign::Inverted => sigmoid(-self.k_gate * (opacity - self.t_gate)),
        }
    }
}

/// Position perturbations `lr * gate(o) * Sigma * eta` for every primitive.
/// Two standard normals are drawn per primitive regardless of `lr`, so the
/// random stream does not depend on the learning rate.
pub fn langevin_noise<R: Rng + ?Sized>(
    cloud: &GaussianCloud,
    gate: &NoiseGate,
    lr: f64,
    rng: &mut R,
) -> Vec<[f64; 2]> {
    cloud
        .gaussians
        .iter()
        .map(|g| {
            let eta: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let k = lr * gate.factor(g.opacity());
            let v = g.covariance().mul_vec(eta);
            [k * v[0], k * v[1]]
        })
        .collect()
}

/// Weight vector, partition and schedule of one flat-histogram run.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatHistogram {
    pub partition: EnergyPartition,
    pub theta: ThetaVector,
    pub cfg: FlatteningConfig,
    pub smoothed_energy: Option<f64>,
}

/// What the sampler decided for one energy observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visit {
    pub energy: f64,
    pub bin: usize,
    pub nu: f64,
    pub weights_active: bool,
}

impl FlatHistogram {
    pub fn new(partition: EnergyPartition, cfg: FlatteningConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            theta: ThetaVector::uniform(partition.bins()),
            partition,
            cfg,
            smoothed_energy: None,
        })
    }

    /// Bin the energy and compute `nu`. Before `warmup_iters`, `nu` is 1.
    pub fn visit(&mut self, energy: f64, iter: usize) -> Visit {
        let e = match self.cfg.energy_ema {
            Some(a) => {
                let s = match self.smoothed_energy {
                    Some(prev) => a * energy + (1.0 - a) * prev,
                    None => energy,
                };
                self.smoothed_energy = Some(s);
                s
            }
            None => energy,
        };
        let bin = subregion_index(e, &self.partition);
        let active = iter >= self.cfg.warmup_iters;
        let nu = if active {
            gradient_multiplier(&self.theta, bin, &self.partition, &self.cfg)
        } else {
            1.0
        };
        Visit {
            energy: e,
            bin,
            nu,
            weights_active: active,
        }
    }

    /// Apply the weight update for a visit; no-op during warm-up.
    pub fn observe(&mut self, visit: &Visit) -> Result<f64> {
        if !visit.weights_active {
            return Ok(self.theta.sum_drift());
        }
        theta_update(&mut self.theta, visit.bin, &self.cfg)
    }
}

/// Outcome of one sampler step on a cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub visit: Visit,
    pub theta_drift: f64,
    /// The update was non-finite and was discarded.
    pub rejected: bool,
}

/// One exploration step on every parameter group:
/// `p <- p - lr * nu * Adam(grad) + lambda_noise * eps` (noise on positions only),
/// followed by the weight update for the visited bin.
///
/// With `flatten == false` the multiplier is fixed at 1 and the weights are
/// left untouched, which gives the plain Langevin baseline.
#[allow(clippy::too_many_arguments)]
pub fn awsgld_step<R: Rng + ?Sized>(
    cloud: &mut GaussianCloud,
    grads: &[GaussianGrad],
    energy: f64,
    iter: usize,
    flat: &mut FlatHistogram,
    flatten: bool,
    gate: &NoiseGate,
    adam: &mut CloudAdam,
    rates: &GroupRates,
    rng: &mut R,
) -> Result<StepReport> {
    assert_eq!(grads.len(), cloud.len());
    let mut visit = flat.visit(energy, iter);
    if !flatten {
        visit.nu = 1.0;
        visit.weights_active = false;
    }
    let noise = (gate.lambda_noise != 0.0)
        .then(|| langevin_noise(cloud, gate, rates.mu, rng));

    let mut next = cloud.clone();
    let mut next_adam = adam.clone();
    for group in ParamGroup::ALL {
        let scale = rates.get(group) * visit.nu;
        let w = group.width();
        let state = next_adam.group_mut(group);
        state.advance();
        for (i, (g, grad)) in next.gaussians.iter_mut().zip(grads).enumerate() {
            let params = group.params_mut(g);
            for (k, &gk) in group.grads(grad).iter().enumerate() {
                params[k] -= scale * state.update(i * w + k, gk);
            }
        }
    }
    if let Some(noise) = &noise {
        for (g, e) in next.gaussians.iter_mut().zip(noise) {
            g.mu[0] += gate.lambda_noise * e[0];
            g.mu[1] += gate.lambda_noise * e[1];
        }
    }
    if !next.gaussians.iter().all(|g| g.is_finite()) {
        return Ok(StepReport {
            visit,
            theta_drift: flat.theta.sum_drift(),
            rejected: true,
        });
    }
    *cloud = next;
    *adam = next_adam;
    let theta_drift = flat.observe(&visit)?;
    Ok(StepReport {
        visit,
        theta_drift,
        rejected: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adam::{adam_step, AdamHyper};
    use crate::model::{logit, Gaussian2D};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn paper_partition() -> EnergyPartition {
        EnergyPartition::new(200, 0.0, 0.2).unwrap()
    }

    /// Reference binning: linear scan over the explicit edges.
    fn scan_index(e: f64, part: &EnergyPartition) -> usize {
        (1..=part.bins())
            .find(|&n| part.edge(n - 1) < e && e <= part.edge(n))
            .unwrap()
    }

    #[test]
    fn index_examples() {
        let p = paper_partition();
        assert_eq!(subregion_index(-0.5, &p), 1);
        assert_eq!(subregion_index(0.5, &p), 200);
        assert_eq!(scan_index(0.05, &p), 51);
        assert_eq!(subregion_index(0.05, &p), 51);
    }

    #[test]
    fn index_matches_scan_on_edges() {
        let p = paper_partition();
        for n in 0..200 {
            let e = p.edge(n.max(1));
            assert_eq!(subregion_index(e, &p), scan_index(e, &p), "edge {n}");
            let above = e + 1e-15;
            assert_eq!(subregion_index(above, &p), scan_index(above, &p));
        }
    }

    #[test]
    #[should_panic]
    fn nan_energy_is_a_contract_violation() {
        subregion_index(f64::NAN, &paper_partition());
    }

    #[test]
    fn partition_validation() {
        assert!(EnergyPartition::new(2, 0.0, 1.0).is_err());
        assert!(EnergyPartition::new(10, 1.0, 1.0).is_err());
        assert!(EnergyPartition::new(10, 0.0, 1.0).is_ok());
    }

    #[test]
    fn psi_examples() {
        let p = paper_partition();
        let t = ThetaVector::uniform(200);
        for e in [-1.0, 0.0, 0.03, 0.19, 0.2, 5.0] {
            assert!((psi(&t, e, &p) - 0.005).abs() < 1e-15);
        }
        let part = EnergyPartition::new(5, 0.0, 0.3).unwrap();
        let t = ThetaVector::from_weights(vec![0.3, 0.1, 0.2, 0.25, 0.15]).unwrap();
        // bin 3 spans (0.1, 0.2]
        assert!((psi(&t, part.edge(2) + 1e-300, &part) - 0.1).abs() < 1e-12);
        let mid = 0.5 * (part.edge(2) + part.edge(3));
        assert!((psi(&t, mid, &part) - 0.1 * 2f64.sqrt()).abs() < 1e-12);
        assert!((psi(&t, mid, &part) - 0.1414).abs() < 1e-4);
    }

    #[test]
    fn multiplier_examples() {
        let p = paper_partition();
        let cfg = FlatteningConfig::default();
        let t = ThetaVector::uniform(200);
        assert_eq!(gradient_multiplier(&t, 37, &p, &cfg), 1.0);
        let t = ThetaVector::from_weights(vec![0.4, 0.1, 0.2, 0.2, 0.1]).unwrap();
        let part = EnergyPartition::new(5, 0.0, 0.3).unwrap();
        assert_eq!(gradient_multiplier(&t, 1, &part, &cfg), 1.0);

        let cfg = FlatteningConfig {
            zeta: 1.0,
            tau: 1.0,
            nu_clip: (-100.0, 100.0),
            ..Default::default()
        };
        assert!((part.delta_u() - 0.1).abs() < 1e-15);
        let nu = gradient_multiplier(&t, 3, &part, &cfg);
        assert!((nu - (1.0 + 2f64.ln() / 0.1)).abs() < 1e-12);
        assert!((nu - 7.931).abs() < 1e-3);
        let clipped = FlatteningConfig {
            nu_clip: (0.1, 5.0),
            ..cfg
        };
        assert_eq!(gradient_multiplier(&t, 3, &part, &clipped), 5.0);
    }

    #[test]
    fn multiplier_is_one_without_flattening() {
        let t = ThetaVector::from_weights(vec![0.4, 0.1, 0.2, 0.2, 0.1]).unwrap();
        let part = EnergyPartition::new(5, 0.0, 0.3).unwrap();
        let cfg = FlatteningConfig {
            zeta: 0.0,
            ..Default::default()
        };
        for j in 1..=5 {
            assert_eq!(gradient_multiplier(&t, j, &part, &cfg), 1.0);
        }
    }

    #[test]
    fn value_clamp_reading() {
        let t = ThetaVector::from_weights(vec![0.4, 0.1, 0.2, 0.2, 0.1]).unwrap();
        let part = EnergyPartition::new(5, 0.0, 0.3).unwrap();
        let cfg = FlatteningConfig {
            zeta: 1.0,
            nu_clip: (-1e9, 1e9),
            lower_neighbor: LowerNeighbor::ValueClamp,
            ..Default::default()
        };
        let nu = gradient_multiplier(&t, 3, &part, &cfg);
        assert!((nu - (1.0 + 0.2f64.ln() / 0.1)).abs() < 1e-12);
    }

    #[test]
    fn theta_update_examples() {
        let cfg = FlatteningConfig {
            zeta: 1.0,
            theta_lr: 0.1,
            ..Default::default()
        };
        let mut t = ThetaVector::uniform(2);
        theta_update(&mut t, 1, &cfg).unwrap();
        assert!((t.get(1) - 0.525).abs() < 1e-15);
        assert!((t.get(2) - 0.475).abs() < 1e-15);

        let frozen = FlatteningConfig {
            theta_lr: 0.0,
            ..cfg
        };
        let before = t.clone();
        theta_update(&mut t, 2, &frozen).unwrap();
        assert_eq!(t, before);
    }

    #[test]
    fn repeated_visits_drive_weight_to_one() {
        let cfg = FlatteningConfig {
            zeta: 0.75,
            theta_lr: 0.05,
            ..Default::default()
        };
        let mut t = ThetaVector::uniform(10);
        let mut prev = t.get(4);
        for _ in 0..2000 {
            theta_update(&mut t, 4, &cfg).unwrap();
            assert!(t.get(4) > prev || t.get(4) >= 1.0 - 1e-9);
            prev = t.get(4);
        }
        assert!(t.get(4) > 0.999);
        assert!(t.get(4) < 1.0);
    }

    #[test]
    fn oversized_theta_step_is_rejected() {
        let cfg = FlatteningConfig {
            zeta: 1.0,
            theta_lr: 3.0,
            ..Default::default()
        };
        let mut t = ThetaVector::uniform(2);
        let before = t.clone();
        assert!(matches!(
            theta_update(&mut t, 1, &cfg),
            Err(Error::ThetaStepTooLarge { .. })
        ));
        assert_eq!(t, before);
    }

    fn cloud_with(opacity: f64) -> GaussianCloud {
        GaussianCloud::from_gaussians(
            vec![Gaussian2D {
                mu: [3.0, 4.0],
                log_scale: [0.0, 0.0],
                rot_angle: 0.0,
                opacity_logit: logit(opacity).unwrap(),
                color: [0.5; 3],
                depth_index: 0,
            }],
            4,
            0,
        )
        .unwrap()
    }

    #[test]
    fn gate_is_half_at_threshold() {
        let gate = NoiseGate::default();
        assert_eq!(gate.factor(gate.t_gate), 0.5);
        let inv = NoiseGate {
            gate_sign: GateSign::Inverted,
            ..gate
        };
        assert_eq!(inv.factor(inv.t_gate), 0.5);
        assert!(gate.factor(0.9) > 0.99 && inv.factor(0.9) < 0.01);
    }

    #[test]
    fn noise_examples() {
        let gate = NoiseGate::default();
        let cloud = cloud_with(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = langevin_noise(&cloud, &gate, 0.0, &mut rng);
        assert_eq!(eps, vec![[0.0, 0.0]]);

        // identity covariance: eps = lr * gate * eta
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps = langevin_noise(&cloud, &gate, 0.7, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eta: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let k = 0.7 * gate.factor(0.3);
        assert!((eps[0][0] - k * eta[0]).abs() < 1e-15);
        assert!((eps[0][1] - k * eta[1]).abs() < 1e-15);
    }

    fn flat(cfg: FlatteningConfig) -> FlatHistogram {
        FlatHistogram::new(EnergyPartition::new(5, 0.0, 0.3).unwrap(), cfg).unwrap()
    }

    fn grads_for(n: usize) -> Vec<GaussianGrad> {
        (0..n)
            .map(|i| GaussianGrad {
                mu: [0.3 + i as f64, -0.2],
                log_scale: [0.1, -0.05],
                rot_angle: 0.02,
                opacity_logit: -0.4,
                color: [0.1, 0.2, -0.3],
            })
            .collect()
    }

    #[test]
    fn uniform_theta_without_noise_is_plain_adam() {
        let quiet = NoiseGate {
            lambda_noise: 0.0,
            ..Default::default()
        };
        let rates = GroupRates::uniform(0.05);
        let mut a = cloud_with(0.4);
        let mut b = a.clone();
        let mut adam_a = CloudAdam::new(1, AdamHyper::default());
        let mut adam_b = adam_a.clone();
        let mut f = flat(FlatteningConfig {
            warmup_iters: 0,
            ..Default::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for it in 0..5 {
            let g = grads_for(1);
            // theta stays uniform only while it is not updated
            f.theta = ThetaVector::uniform(5);
            let rep = awsgld_step(&mut a, &g, 0.15, it, &mut f, true, &quiet, &mut adam_a, &rates, &mut rng)
                .unwrap();
            assert_eq!(rep.visit.nu, 1.0);
            adam_step(&mut b, &g, &mut adam_b, &rates);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_rates_leave_cloud_unchanged() {
        let quiet = NoiseGate {
            lambda_noise: 0.0,
            ..Default::default()
        };
        let mut c = cloud_with(0.4);
        let before = c.clone();
        let mut adam = CloudAdam::new(1, AdamHyper::default());
        let mut f = flat(FlatteningConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        awsgld_step(&mut c, &grads_for(1), 0.1, 0, &mut f, true, &quiet, &mut adam, &GroupRates::uniform(0.0), &mut rng)
            .unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn scalar_step_composes_multiplier_and_adam() {
        // single primitive, only the x position has a gradient
        let hyper = AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        };
        let cfg = FlatteningConfig {
            zeta: 0.75,
            tau: 1.0,
            theta_lr: 0.01,
            warmup_iters: 0,
            nu_clip: (0.1, 20.0),
            ..Default::default()
        };
        let mut f = flat(cfg);
        f.theta = ThetaVector::from_weights(vec![0.3, 0.25, 0.2, 0.15, 0.1]).unwrap();
        let energy = 0.25; // bin 4: (0.2, 0.3]
        let j = subregion_index(energy, &f.partition);
        assert_eq!(j, 4);
        let nu = 1.0 + 0.75 * (0.15f64.ln() - 0.2f64.ln()) / 0.1;
        let expected_nu = nu.clamp(0.1, 20.0);
        let g = 0.8;
        let mut oracle = crate::adam::AdamState::new(1, hyper);
        let d = crate::adam::adam_precondition(&[g], &mut oracle, 1.0)[0];
        let lr = 0.01;

        let mut c = cloud_with(0.5);
        let x0 = c.gaussians[0].mu[0];
        let grads = vec![GaussianGrad {
            mu: [g, 0.0],
            ..Default::default()
        }];
        let mut adam = CloudAdam::new(1, hyper);
        let quiet = NoiseGate {
            lambda_noise: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rep = awsgld_step(&mut c, &grads, energy, 10, &mut f, true, &quiet, &mut adam, &GroupRates::uniform(lr), &mut rng)
            .unwrap();
        assert!((rep.visit.nu - expected_nu).abs() < 1e-12);
        assert!((c.gaussians[0].mu[0] - (x0 - lr * expected_nu * d)).abs() < 1e-12);
        // weights were updated after the step
        assert!(f.theta.get(4) > 0.15);
    }

    #[test]
    fn warmup_freezes_weights_and_multiplier() {
        let mut f = flat(FlatteningConfig {
            warmup_iters: 3,
            ..Default::default()
        });
        f.theta = ThetaVector::from_weights(vec![0.3, 0.25, 0.2, 0.15, 0.1]).unwrap();
        let before = f.theta.clone();
        for it in 0..3 {
            let v = f.visit(0.25, it);
            assert_eq!(v.nu, 1.0);
            f.observe(&v).unwrap();
            assert_eq!(f.theta, before);
        }
        let v = f.visit(0.25, 3);
        assert_ne!(v.nu, 1.0);
        f.observe(&v).unwrap();
        assert_ne!(f.theta, before);
    }

    #[test]
    fn non_finite_update_is_rejected() {
        let mut c = cloud_with(0.4);
        let before = c.clone();
        let mut adam = CloudAdam::new(1, AdamHyper::default());
        let adam_before = adam.clone();
        let mut f = flat(FlatteningConfig::default());
        let mut g = grads_for(1);
        g[0].color[0] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rep = awsgld_step(&mut c, &g, 0.1, 0, &mut f, true, &NoiseGate::default(), &mut adam, &GroupRates::uniform(0.1), &mut rng)
            .unwrap();
        assert!(rep.rejected);
        assert_eq!(c, before);
        assert_eq!(adam, adam_before);
    }

    #[test]
    fn doubling_nu_doubles_the_deterministic_step() {
        let hyper = AdamHyper::default();
        let g = [0.37, -1.2, 0.05];
        let mut s1 = crate::adam::AdamState::new(3, hyper);
        let mut s2 = s1.clone();
        let d1 = crate::adam::adam_precondition(&g, &mut s1, 1.0);
        let d2 = crate::adam::adam_precondition(&g, &mut s2, 2.0);
        for (a, b) in d1.iter().zip(&d2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    proptest! {
        #[test]
        fn index_agrees_with_scan(e in -1.0f64..1.0, m in 3usize..300, lo in -0.5f64..0.5, w in 0.01f64..1.0) {
            let p = EnergyPartition::new(m, lo, lo + w).unwrap();
            prop_assert_eq!(subregion_index(e, &p), scan_index(e, &p));
        }

        #[test]
        fn theta_update_preserves_simplex(
            raw in prop::collection::vec(0.01f64..1.0, 3..40),
            visits in prop::collection::vec(0usize..1000, 1..50),
            lr in 0.0f64..0.5, zeta in 0.0f64..2.0
        ) {
            let s: f64 = raw.iter().sum();
            let mut t = ThetaVector::from_weights(raw.iter().map(|v| v / s).collect()).unwrap();
            let cfg = FlatteningConfig { zeta, theta_lr: lr, ..Default::default() };
            for v in visits {
                let j = v % t.len() + 1;
                theta_update(&mut t, j, &cfg).unwrap();
                prop_assert!(t.sum_drift().abs() <= 1e-9);
                prop_assert!(t.as_slice().iter().all(|&w| w > 0.0 && w < 1.0));
            }
        }

        #[test]
        fn psi_is_continuous_at_interior_edges(
            raw in prop::collection::vec(0.01f64..1.0, 5..30), k in 0usize..1000
        ) {
            let m = raw.len();
            let s: f64 = raw.iter().sum();
            let t = ThetaVector::from_weights(raw.iter().map(|v| v / s).collect()).unwrap();
            let p = EnergyPartition::new(m, 0.0, 1.0).unwrap();
            let n = 1 + k % (m - 1);
            let e = p.edge(n);
            let left = psi(&t, e, &p);
            let right = psi(&t, e + 1e-12, &p);
            prop_assert!((left - right).abs() <= 1e-9);
        }

        #[test]
        fn nu_is_one_for_uniform_theta(m in 3usize..300, j in 0usize..300) {
            let p = EnergyPartition::new(m, 0.0, 0.2).unwrap();
            let t = ThetaVector::uniform(m);
            prop_assert_eq!(gradient_multiplier(&t, j % m + 1, &p, &FlatteningConfig::default()), 1.0);
        }
    }
}
