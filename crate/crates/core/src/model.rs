//! 2D Gaussian primitives, their activations and covariance algebra.
//!
//! Every parameter is stored unconstrained. Opacity goes through a sigmoid,
//! scales through `exp`; position, rotation angle and color are used as-is.

use std::fmt::Write as _;

use crate::codec;
use crate::error::{Error, Result};

/// Tolerance below which a negative eigenvalue is treated as rounding noise.
pub const PSD_TOLERANCE: f64 = 1e-9;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`]; `o` must lie strictly inside (0, 1).
pub fn logit(o: f64) -> Result<f64> {
    if !(o > 0.0 && o < 1.0) {
        return Err(Error::OutsideUnitInterval { value: o });
    }
    Ok((o / (1.0 - o)).ln())
}

/// Symmetric 2x2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub const IDENTITY: Sym2 = Sym2 {
        xx: 1.0,
        xy: 0.0,
        yy: 1.0,
    };

    pub fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Self { xx, xy, yy }
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn scaled(&self, k: f64) -> Sym2 {
        Sym2::new(self.xx * k, self.xy * k, self.yy * k)
    }

    pub fn mul_vec(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.xx * v[0] + self.xy * v[1],
            self.xy * v[0] + self.yy * v[1],
        ]
    }
}

/// One anisotropic 2D Gaussian in unconstrained parameter space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2D {
    /// Center in pixel coordinates; pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)`.
    pub mu: [f64; 2],
    pub log_scale: [f64; 2],
    pub rot_angle: f64,
    pub opacity_logit: f64,
    pub color: [f64; 3],
    /// Compositing order; lower indices are drawn in front.
    pub depth_index: u64,
}

impl Gaussian2D {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> [f64; 2] {
        [self.log_scale[0].exp(), self.log_scale[1].exp()]
    }

    pub fn covariance(&self) -> Sym2 {
        build_covariance(self)
    }

    pub fn set_opacity(&mut self, o: f64) -> Result<()> {
        self.opacity_logit = logit(o)?;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rot_angle.is_finite()
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

/// Model-space values of a primitive after activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activated {
    pub mu: [f64; 2],
    pub scale: [f64; 2],
    pub rot_angle: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

pub fn activate(g: &Gaussian2D) -> Activated {
    Activated {
        mu: g.mu,
        scale: g.scales(),
        rot_angle: g.rot_angle,
        opacity: g.opacity(),
        color: g.color,
    }
}

/// Exact inverse of [`activate`]. Fails when the opacity is outside (0, 1)
/// or a scale is not strictly positive.
pub fn deactivate(a: &Activated, depth_index: u64) -> Result<Gaussian2D> {
    for &s in &a.scale {
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive, got {s}"
            )));
        }
    }
    Ok(Gaussian2D {
        mu: a.mu,
        log_scale: [a.scale[0].ln(), a.scale[1].ln()],
        rot_angle: a.rot_angle,
        opacity_logit: logit(a.opacity)?,
        color: a.color,
        depth_index,
    })
}

/// `R diag(s^2) R^T` with `R` the rotation by `rot_angle`.
pub fn build_covariance(g: &Gaussian2D) -> Sym2 {
    let [s0, s1] = g.scales();
    covariance_from_scales(s0, s1, g.rot_angle)
}

pub(crate) fn covariance_from_scales(s0: f64, s1: f64, angle: f64) -> Sym2 {
    let (sn, c) = angle.sin_cos();
    let a = s0 * s0;
    let b = s1 * s1;
    Sym2 {
        xx: c * c * a + sn * sn * b,
        xy: c * sn * (a - b),
        yy: sn * sn * a + c * c * b,
    }
}

/// Square roots of the eigenvalues of a symmetric PSD 2x2 matrix, largest first.
pub fn covariance_eigen_sqrt(cov: &Sym2) -> Result<[f64; 2]> {
    let half_tr = 0.5 * (cov.xx + cov.yy);
    let half_diff = 0.5 * (cov.xx - cov.yy);
    let disc = half_diff.hypot(cov.xy);
    let hi = half_tr + disc;
    let lo = half_tr - disc;
    if lo < -PSD_TOLERANCE || !hi.is_finite() {
        return Err(Error::NumericalDegeneracy { eigenvalue: lo });
    }
    Ok([hi.max(0.0).sqrt(), lo.max(0.0).sqrt()])
}

/// Ordered set of primitives. Vector position always equals compositing
/// order: `gaussians[i].depth_index` is strictly increasing in `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian2D>,
    pub max_count: usize,
    pub rng_seed: u64,
}

const CLOUD_MAGIC: &str = "gsopt-cloud v1";

impl GaussianCloud {
    pub fn new(max_count: usize, rng_seed: u64) -> Self {
        Self {
            gaussians: Vec::new(),
            max_count,
            rng_seed,
        }
    }

    pub fn from_gaussians(
        mut gaussians: Vec<Gaussian2D>,
        max_count: usize,
        rng_seed: u64,
    ) -> Result<Self> {
        if gaussians.len() > max_count {
            return Err(Error::InvalidArgument(format!(
                "{} Gaussians exceed capacity {max_count}",
                gaussians.len()
            )));
        }
        gaussians.sort_by_key(|g| g.depth_index);
        if gaussians
            .windows(2)
            .any(|w| w[0].depth_index == w[1].depth_index)
        {
            return Err(Error::InvalidArgument("duplicate depth_index".into()));
        }
        Ok(Self {
            gaussians,
            max_count,
            rng_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn remaining_capacity(&self) -> usize {
        self.max_count.saturating_sub(self.gaussians.len())
    }

    /// Reassign `depth_index = position`.
    pub fn renumber(&mut self) {
        for (i, g) in self.gaussians.iter_mut().enumerate() {
            g.depth_index = i as u64;
        }
    }

    pub fn opacities(&self) -> Vec<f64> {
        self.gaussians.iter().map(Gaussian2D::opacity).collect()
    }

    pub fn is_ordered(&self) -> bool {
        self.gaussians
            .windows(2)
            .all(|w| w[0].depth_index < w[1].depth_index)
    }

    /// Plain-text snapshot; floats are stored as IEEE-754 bit patterns so a
    /// reload is bit-exact.
    pub fn to_snapshot(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CLOUD_MAGIC}").unwrap();
        self.write_body(&mut out);
        out
    }

    pub(crate) fn write_body(&self, out: &mut String) {
        writeln!(out, "max_count {}", self.max_count).unwrap();
        writeln!(out, "rng_seed {}", self.rng_seed).unwrap();
        writeln!(out, "count {}", self.gaussians.len()).unwrap();
        for g in &self.gaussians {
            write!(out, "g {}", g.depth_index).unwrap();
            let vals = [
                g.mu[0],
                g.mu[1],
                g.log_scale[0],
                g.log_scale[1],
                g.rot_angle,
                g.opacity_logit,
                g.color[0],
                g.color[1],
                g.color[2],
            ];
            for v in vals {
                out.push(' ');
                out.push_str(&codec::f64_to_hex(v));
            }
            out.push('\n');
        }
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let mut lines = codec::Lines::new(text);
        lines.expect_exact(CLOUD_MAGIC)?;
        Self::read_body(&mut lines)
    }

    pub(crate) fn read_body(lines: &mut codec::Lines<'_>) -> Result<Self> {
        let max_count: usize = lines.keyed_value("max_count")?;
        let rng_seed: u64 = lines.keyed_value("rng_seed")?;
        let count: usize = lines.keyed_value("count")?;
        let mut gaussians = Vec::with_capacity(count);
        for _ in 0..count {
            let fields = lines.keyed_fields("g")?;
            if fields.len() != 10 {
                return Err(Error::Checkpoint(format!(
                    "expected 10 fields per Gaussian, got {}",
                    fields.len()
                )));
            }
            let depth_index = fields[0]
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad depth_index {}", fields[0])))?;
            let v = fields[1..]
                .iter()
                .map(|f| codec::hex_to_f64(f))
                .collect::<Result<Vec<_>>>()?;
            gaussians.push(Gaussian2D {
                mu: [v[0], v[1]],
                log_scale: [v[2], v[3]],
                rot_angle: v[4],
                opacity_logit: v[5],
                color: [v[6], v[7], v[8]],
                depth_index,
            });
        }
        Self::from_gaussians(gaussians, max_count, rng_seed)
    }
}
