//! Local quasi-Newton direction-guided Adam.
//!
//! Each primitive keeps its own short L-BFGS history over its 2D position.
//! The two-loop direction is used as a pseudo-gradient for Adam instead of
//! running a line search; every other parameter group stays on plain Adam.

use std::collections::VecDeque;

use rand::Rng;

use crate::adam::{CloudAdam, GroupRates, ParamGroup};
use crate::awsgld::{langevin_noise, NoiseGate};
use crate::model::GaussianCloud;
use crate::render::GaussianGrad;

pub const DEFAULT_HISTORY: usize = 5;
pub const DEFAULT_CURVATURE_EPS: f64 = 1e-10;

#[inline]
fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Ring buffer of `(s, y)` pairs: position displacements and gradient differences.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsHistory {
    pairs: VecDeque<([f64; 2], [f64; 2])>,
    capacity: usize,
    curvature_eps: f64,
}

impl LbfgsHistory {
    pub fn new(capacity: usize, curvature_eps: f64) -> Self {
        assert!(capacity >= 1, "history size must be at least 1");
        Self {
            pairs: VecDeque::with_capacity(capacity),
            capacity,
            curvature_eps,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn curvature_eps(&self) -> f64 {
        self.curvature_eps
    }

    /// Oldest first.
    pub fn pairs(&self) -> impl Iterator<Item = &([f64; 2], [f64; 2])> {
        self.pairs.iter()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Store the pair if it satisfies `s.y > curvature_eps`, evicting the
    /// oldest at capacity. Returns whether the pair was kept.
    pub fn push(&mut self, s: [f64; 2], y: [f64; 2]) -> bool {
        let sy = dot(s, y);
        if !(sy > self.curvature_eps) || !sy.is_finite() {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y));
        true
    }
}

/// Free-function form of [`LbfgsHistory::push`].
pub fn history_push(history: &mut LbfgsHistory, s: [f64; 2], y: [f64; 2]) -> bool {
    history.push(s, y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub d: [f64; 2],
    /// The recursion produced a non-finite value and `d` is the raw gradient.
    pub fallback: bool,
}

/// Two-loop recursion approximating `H^-1 grad`, with initial scaling
/// `s.y / y.y` from the newest pair. An empty history returns `grad`.
pub fn lbfgs_direction(history: &LbfgsHistory, grad: [f64; 2]) -> Direction {
    let Some(&(s_last, y_last)) = history.pairs.back() else {
        return Direction {
            d: grad,
            fallback: false,
        };
    };
    let k = history.pairs.len();
    let mut alpha = [0.0; 16];
    let mut alpha_vec = Vec::new();
    let alphas: &mut [f64] = if k <= alpha.len() {
        &mut alpha[..k]
    } else {
        alpha_vec.resize(k, 0.0);
        &mut alpha_vec
    };
    let mut q = grad;
    for (i, (s, y)) in history.pairs.iter().enumerate().rev() {
        let rho = 1.0 / dot(*y, *s);
        let a = rho * dot(*s, q);
        alphas[i] = a;
        q[0] -= a * y[0];
        q[1] -= a * y[1];
    }
    let gamma = dot(s_last, y_last) / dot(y_last, y_last);
    let mut r = [gamma * q[0], gamma * q[1]];
    for (i, (s, y)) in history.pairs.iter().enumerate() {
        let rho = 1.0 / dot(*y, *s);
        let beta = rho * dot(*y, r);
        r[0] += s[0] * (alphas[i] - beta);
        r[1] += s[1] * (alphas[i] - beta);
    }
    if r.iter().all(|v| v.is_finite()) {
        Direction {
            d: r,
            fallback: false,
        }
    } else {
        Direction {
            d: grad,
            fallback: true,
        }
    }
}

/// Per-primitive histories plus the previous position and gradient needed to
/// form the next pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LqnState {
    pub histories: Vec<LbfgsHistory>,
    pub previous: Vec<Option<([f64; 2], [f64; 2])>>,
    pub capacity: usize,
    pub curvature_eps: f64,
}

impl LqnState {
    pub fn new(count: usize, capacity: usize, curvature_eps: f64) -> Self {
        Self {
            histories: vec![LbfgsHistory::new(capacity, curvature_eps); count],
            previous: vec![None; count],
            capacity,
            curvature_eps,
        }
    }

    pub fn len(&self) -> usize {
        self.histories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }

    /// Same contract as [`crate::adam::AdamState::remap`]; fresh slots start empty.
    pub fn remap(&mut self, origins: &[Option<usize>]) {
        let fresh = LbfgsHistory::new(self.capacity, self.curvature_eps);
        self.histories = origins
            .iter()
            .map(|o| o.map_or_else(|| fresh.clone(), |i| self.histories[i].clone()))
            .collect();
        self.previous = origins
            .iter()
            .map(|o| o.and_then(|i| self.previous[i]))
            .collect();
    }

    pub fn reset(&mut self, i: usize) {
        self.histories[i].clear();
        self.previous[i] = None;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LqnReport {
    pub rejected_pairs: usize,
    /// Primitives that fell back to plain Adam on their position this step.
    pub fallbacks: usize,
}

/// One exploitation step:
/// `mu <- mu - lr * Adam(D) + lambda_noise * eps_mu` with `D` the two-loop
/// direction; plain Adam with no noise for every other group.
#[allow(clippy::too_many_arguments)]
pub fn lqnadam_step<R: Rng + ?Sized>(
    cloud: &mut GaussianCloud,
    grads: &[GaussianGrad],
    lqn: &mut LqnState,
    gate: &NoiseGate,
    adam: &mut CloudAdam,
    rates: &GroupRates,
    rng: &mut R,
) -> LqnReport {
    assert_eq!(grads.len(), cloud.len());
    assert_eq!(lqn.len(), cloud.len());
    let mut report = LqnReport::default();
    let noise = (gate.lambda_noise != 0.0).then(|| langevin_noise(cloud, gate, rates.mu, rng));

    let pos = adam.group_mut(ParamGroup::Position);
    pos.advance();
    for (i, (g, grad)) in cloud.gaussians.iter_mut().zip(grads).enumerate() {
        let mu = g.mu;
        if let Some((mu_prev, grad_prev)) = lqn.previous[i] {
            let s = [mu[0] - mu_prev[0], mu[1] - mu_prev[1]];
            let y = [grad.mu[0] - grad_prev[0], grad.mu[1] - grad_prev[1]];
            if !lqn.histories[i].push(s, y) {
                report.rejected_pairs += 1;
            }
        }
        let dir = lbfgs_direction(&lqn.histories[i], grad.mu);
        let eps = noise.as_ref().map_or([0.0; 2], |n| n[i]);
        let candidate = |d: [f64; 2], state: &crate::adam::AdamState| {
            let a = state.peek(2 * i, d[0]);
            let b = state.peek(2 * i + 1, d[1]);
            let next = [
                mu[0] - rates.mu * a.2 + gate.lambda_noise * eps[0],
                mu[1] - rates.mu * b.2 + gate.lambda_noise * eps[1],
            ];
            (a, b, next)
        };
        let (mut a, mut b, mut next) = candidate(dir.d, pos);
        let mut fell_back = dir.fallback;
        if !(next[0].is_finite() && next[1].is_finite()) {
            (a, b, next) = candidate(grad.mu, pos);
            fell_back = true;
        }
        if fell_back {
            report.fallbacks += 1;
        }
        if !(next[0].is_finite() && next[1].is_finite()) {
            // nothing usable this step
            continue;
        }
        pos.m1[2 * i] = a.0;
        pos.m2[2 * i] = a.1;
        pos.m1[2 * i + 1] = b.0;
        pos.m2[2 * i + 1] = b.1;
        g.mu = next;
        lqn.previous[i] = Some((mu, grad.mu));
    }

    for group in ParamGroup::ALL.into_iter().skip(1) {
        let lr = rates.get(group);
        let w = group.width();
        let state = adam.group_mut(group);
        state.advance();
        for (i, (g, grad)) in cloud.gaussians.iter_mut().zip(grads).enumerate() {
            let params = group.params_mut(g);
            for (k, &gk) in group.grads(grad).iter().enumerate() {
                let (m1, m2, d) = state.peek(i * w + k, gk);
                let v = params[k] - lr * d;
                if v.is_finite() {
                    state.m1[i * w + k] = m1;
                    state.m2[i * w + k] = m2;
                    params[k] = v;
                }
            }
        }
    }
    report
}
