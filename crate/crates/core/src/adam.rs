//! Bias-corrected Adam, used as a preconditioner rather than a full optimizer:
//! callers receive the direction `m_hat / (sqrt(v_hat) + eps)` and decide the
//! step size themselves.

use crate::model::{Gaussian2D, GaussianCloud};
use crate::render::GaussianGrad;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-15,
        }
    }
}

/// Moment accumulators for a flat parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        Self {
            m1: vec![0.0; len],
            m2: vec![0.0; len],
            step: 0,
            hyper,
        }
    }

    pub fn len(&self) -> usize {
        self.m1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m1.is_empty()
    }

    /// Start a new step; every element updated afterwards uses the new step's bias correction.
    pub fn advance(&mut self) {
        self.step += 1;
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.step.max(1) as i32;
        (
            1.0 - self.hyper.beta1.powi(t),
            1.0 - self.hyper.beta2.powi(t),
        )
    }

    /// Moments and direction element `i` would get from gradient `g`, without committing.
    #[inline]
    pub fn peek(&self, i: usize, g: f64) -> (f64, f64, f64) {
        let h = &self.hyper;
        let m1 = h.beta1 * self.m1[i] + (1.0 - h.beta1) * g;
        let m2 = h.beta2 * self.m2[i] + (1.0 - h.beta2) * g * g;
        let (c1, c2) = self.corrections();
        let dir = (m1 / c1) / ((m2 / c2).sqrt() + h.eps_hat);
        (m1, m2, dir)
    }

    #[inline]
    pub fn update(&mut self, i: usize, g: f64) -> f64 {
        let (m1, m2, dir) = self.peek(i, g);
        self.m1[i] = m1;
        self.m2[i] = m2;
        dir
    }

    /// Rebuild the per-primitive layout after a structural edit. `origins[k]`
    /// names the old primitive that slot `k` continues, or `None` for a fresh
    /// slot with zeroed moments. Blocks are `width` elements long.
    pub fn remap(&mut self, origins: &[Option<usize>], width: usize) {
        let mut m1 = vec![0.0; origins.len() * width];
        let mut m2 = vec![0.0; origins.len() * width];
        for (k, o) in origins.iter().enumerate() {
            if let Some(old) = *o {
                m1[k * width..(k + 1) * width]
                    .copy_from_slice(&self.m1[old * width..(old + 1) * width]);
                m2[k * width..(k + 1) * width]
                    .copy_from_slice(&self.m2[old * width..(old + 1) * width]);
            }
        }
        self.m1 = m1;
        self.m2 = m2;
    }
}

/// One full Adam preconditioning pass over `grad`; advances `state` by one step.
/// `lr_scale` multiplies the returned direction.
pub fn adam_precondition(grad: &[f64], state: &mut AdamState, lr_scale: f64) -> Vec<f64> {
    assert_eq!(grad.len(), state.len(), "gradient and Adam state sizes differ");
    state.advance();
    grad.iter()
        .enumerate()
        .map(|(i, &g)| lr_scale * state.update(i, g))
        .collect()
}

/// The five parameter groups of a primitive, each with its own Adam state and learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Position,
    LogScale,
    Rotation,
    OpacityLogit,
    Color,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Position,
        ParamGroup::LogScale,
        ParamGroup::Rotation,
        ParamGroup::OpacityLogit,
        ParamGroup::Color,
    ];

    pub fn width(self) -> usize {
        match self {
            ParamGroup::Position | ParamGroup::LogScale => 2,
            ParamGroup::Rotation | ParamGroup::OpacityLogit => 1,
            ParamGroup::Color => 3,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "mu",
            ParamGroup::LogScale => "log_scale",
            ParamGroup::Rotation => "rot_angle",
            ParamGroup::OpacityLogit => "opacity_logit",
            ParamGroup::Color => "color",
        }
    }

    pub fn params_mut(self, g: &mut Gaussian2D) -> &mut [f64] {
        match self {
            ParamGroup::Position => &mut g.mu,
            ParamGroup::LogScale => &mut g.log_scale,
            ParamGroup::Rotation => std::slice::from_mut(&mut g.rot_angle),
            ParamGroup::OpacityLogit => std::slice::from_mut(&mut g.opacity_logit),
            ParamGroup::Color => &mut g.color,
        }
    }

    pub fn grads(self, g: &GaussianGrad) -> &[f64] {
        match self {
            ParamGroup::Position => &g.mu,
            ParamGroup::LogScale => &g.log_scale,
            ParamGroup::Rotation => std::slice::from_ref(&g.rot_angle),
            ParamGroup::OpacityLogit => std::slice::from_ref(&g.opacity_logit),
            ParamGroup::Color => &g.color,
        }
    }
}

/// Per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub mu: f64,
    pub log_scale: f64,
    pub rot_angle: f64,
    pub opacity_logit: f64,
    pub color: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            mu: lr,
            log_scale: lr,
            rot_angle: lr,
            opacity_logit: lr,
            color: lr,
        }
    }

    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Position => self.mu,
            ParamGroup::LogScale => self.log_scale,
            ParamGroup::Rotation => self.rot_angle,
            ParamGroup::OpacityLogit => self.opacity_logit,
            ParamGroup::Color => self.color,
        }
    }
}

/// Adam state for every parameter group of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudAdam {
    pub groups: [AdamState; 5],
}

impl CloudAdam {
    pub fn new(count: usize, hyper: AdamHyper) -> Self {
        Self {
            groups: ParamGroup::ALL.map(|g| AdamState::new(count * g.width(), hyper)),
        }
    }

    pub fn group(&self, g: ParamGroup) -> &AdamState {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut AdamState {
        &mut self.groups[g.index()]
    }

    pub fn count(&self) -> usize {
        self.groups[0].len() / 2
    }

    pub fn remap(&mut self, origins: &[Option<usize>]) {
        for g in ParamGroup::ALL {
            self.groups[g.index()].remap(origins, g.width());
        }
    }
}

/// Plain Adam step on every group: `p <- p - lr_group * Adam(grad)`.
pub fn adam_step(
    cloud: &mut GaussianCloud,
    grads: &[GaussianGrad],
    adam: &mut CloudAdam,
    rates: &GroupRates,
) {
    assert_eq!(grads.len(), cloud.len());
    for group in ParamGroup::ALL {
        let lr = rates.get(group);
        let w = group.width();
        let state = adam.group_mut(group);
        state.advance();
        for (i, (g, grad)) in cloud.gaussians.iter_mut().zip(grads).enumerate() {
            let params = group.params_mut(g);
            for (k, &gk) in group.grads(grad).iter().enumerate() {
                let d = state.update(i * w + k, gk);
                params[k] -= lr * d;
            }
        }
    }
}
