//! Training loss: photometric + SSIM + opacity and scale regularizers.
//!
//! The scalar returned by [`total_loss`] is also the energy that the
//! flat-histogram sampler bins.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{build_covariance, covariance_eigen_sqrt, GaussianCloud};
use crate::render::GaussianGrad;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Photometric {
    /// Mean absolute error.
    L1,
    /// Mean squared error.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Exploration,
    Exploitation,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Exploration => "exploration",
            Stage::Exploitation => "exploitation",
        }
    }
}

/// How the per-primitive regularizer terms are reduced over the cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_ssim: f64,
    pub lambda_o: f64,
    pub lambda_sigma: f64,
    pub photometric: Photometric,
    pub reg_reduction: Reduction,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.2,
            lambda_o: 0.01,
            lambda_sigma: 0.01,
            photometric: Photometric::L1,
            reg_reduction: Reduction::Mean,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return bad("lambda_ssim must lie in [0, 1]");
        }
        if !(self.lambda_o.is_finite() && self.lambda_o >= 0.0) {
            return bad("lambda_o must be finite and >= 0");
        }
        if !(self.lambda_sigma.is_finite() && self.lambda_sigma >= 0.0) {
            return bad("lambda_sigma must be finite and >= 0");
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return bad("ssim_window must be odd and >= 3");
        }
        if !(self.ssim_sigma > 0.0) {
            return bad("ssim_sigma must be positive");
        }
        Ok(())
    }
}

/// L1 while exploring, L2 while exploiting; every other field is kept.
pub fn photometric_swap(cfg: &LossConfig, stage: Stage) -> LossConfig {
    LossConfig {
        photometric: match stage {
            Stage::Exploration => Photometric::L1,
            Stage::Exploitation => Photometric::L2,
        },
        ..*cfg
    }
}

/// Normalized 1D Gaussian window applied separably with zero padding.
#[derive(Debug, Clone)]
struct Window {
    taps: Vec<f64>,
}

impl Window {
    fn new(size: usize, sigma: f64) -> Self {
        let half = (size / 2) as f64;
        let mut taps: Vec<f64> = (0..size)
            .map(|i| {
                let d = i as f64 - half;
                (-(d * d) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = taps.iter().sum();
        for t in &mut taps {
            *t /= total;
        }
        Self { taps }
    }

    /// Same-size blur of a `w x h` plane. The kernel is symmetric, so this
    /// operator is its own adjoint.
    fn blur(&self, src: &[f64], w: usize, h: usize, tmp: &mut Vec<f64>, dst: &mut Vec<f64>) {
        let r = self.taps.len() / 2;
        tmp.clear();
        tmp.resize(w * h, 0.0);
        dst.clear();
        dst.resize(w * h, 0.0);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let out = &mut tmp[y * w..(y + 1) * w];
            // tap-major so the inner loop vectorizes; each output still sums
            // its taps left to right
            for (j, &k) in self.taps.iter().enumerate() {
                let (out_part, row_part) = if j >= r {
                    let d = j - r;
                    if d >= w {
                        continue;
                    }
                    (&mut out[..w - d], &row[d..])
                } else {
                    let d = r - j;
                    if d >= w {
                        continue;
                    }
                    (&mut out[d..], &row[..w - d])
                };
                for (o, v) in out_part.iter_mut().zip(row_part) {
                    *o += k * v;
                }
            }
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            let out = &mut dst[y * w..(y + 1) * w];
            for yy in lo..=hi {
                let k = self.taps[yy + r - y];
                let row = &tmp[yy * w..(yy + 1) * w];
                for (o, v) in out.iter_mut().zip(row) {
                    *o += k * v;
                }
            }
        }
    }
}

fn planes(img: &Image) -> [Vec<f64>; 3] {
    let n = img.width * img.height;
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        for (k, plane) in out.iter_mut().enumerate() {
            plane[i] = img.data[i * 3 + k];
        }
    }
    out
}

/// Blurred statistics of a reference image, reusable across evaluations.
#[derive(Debug, Clone)]
struct RefStats {
    plane: Vec<f64>,
    mu: Vec<f64>,
    /// Blurred square, before subtracting `mu^2`.
    sq: Vec<f64>,
}

/// Mean-SSIM evaluator for a fixed reference (second argument).
#[derive(Debug, Clone)]
pub struct Ssim {
    window: Window,
    c1: f64,
    c2: f64,
    width: usize,
    height: usize,
    reference: [RefStats; 3],
}

impl Ssim {
    pub fn new(reference: &Image, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let window = Window::new(cfg.ssim_window, cfg.ssim_sigma);
        let (w, h) = reference.dims();
        let mut tmp = Vec::new();
        let reference = planes(reference).map(|plane| {
            let mut mu = Vec::new();
            let mut sq = Vec::new();
            window.blur(&plane, w, h, &mut tmp, &mut mu);
            let p2: Vec<f64> = plane.iter().map(|v| v * v).collect();
            window.blur(&p2, w, h, &mut tmp, &mut sq);
            RefStats { plane, mu, sq }
        });
        Ok(Self {
            window,
            c1: cfg.ssim_c1,
            c2: cfg.ssim_c2,
            width: w,
            height: h,
            reference,
        })
    }

    /// Mean SSIM of `x` against the reference and, if requested, its gradient with respect to `x`.
    pub fn evaluate(&self, x: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
        if x.dims() != (self.width, self.height) {
            return Err(Error::DimensionMismatch {
                expected: (self.width, self.height),
                actual: x.dims(),
            });
        }
        let (w, h) = (self.width, self.height);
        let n = w * h;
        let norm = 1.0 / (3 * n) as f64;
        let mut total = 0.0;
        let mut grad = want_grad.then(|| Image::new(w, h));
        let mut tmp = Vec::new();
        let (mut mu_x, mut sq_x, mut cross) = (Vec::new(), Vec::new(), Vec::new());
        let (mut d_mu, mut d_sq, mut d_cross) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let (mut b_mu, mut b_sq, mut b_cross) = (Vec::new(), Vec::new(), Vec::new());
        for (k, (xp, rf)) in planes(x).iter().zip(&self.reference).enumerate() {
            self.window.blur(xp, w, h, &mut tmp, &mut mu_x);
            let x2: Vec<f64> = xp.iter().map(|v| v * v).collect();
            self.window.blur(&x2, w, h, &mut tmp, &mut sq_x);
            let xy: Vec<f64> = xp.iter().zip(&rf.plane).map(|(a, b)| a * b).collect();
            self.window.blur(&xy, w, h, &mut tmp, &mut cross);
            for i in 0..n {
                let (mx, my) = (mu_x[i], rf.mu[i]);
                let var_x = sq_x[i] - mx * mx;
                let var_y = rf.sq[i] - my * my;
                let cov = cross[i] - mx * my;
                let a1 = 2.0 * mx * my + self.c1;
                let a2 = 2.0 * cov + self.c2;
                let b1 = mx * mx + my * my + self.c1;
                let b2 = var_x + var_y + self.c2;
                let s = (a1 * a2) / (b1 * b2);
                total += s;
                if want_grad {
                    let inv = 1.0 / (b1 * b2);
                    let ds_dmx = 2.0 * my * a2 * inv - 2.0 * mx * s / b1;
                    let ds_dvar = -s / b2;
                    let ds_dcov = 2.0 * a1 * inv;
                    d_mu[i] = ds_dmx - 2.0 * mx * ds_dvar - my * ds_dcov;
                    d_sq[i] = ds_dvar;
                    d_cross[i] = ds_dcov;
                }
            }
            if let Some(g) = grad.as_mut() {
                self.window.blur(&d_mu, w, h, &mut tmp, &mut b_mu);
                self.window.blur(&d_sq, w, h, &mut tmp, &mut b_sq);
                self.window.blur(&d_cross, w, h, &mut tmp, &mut b_cross);
                for i in 0..n {
                    g.data[i * 3 + k] =
                        norm * (b_mu[i] + 2.0 * xp[i] * b_sq[i] + rf.plane[i] * b_cross[i]);
                }
            }
        }
        Ok((total / (3 * n) as f64, grad))
    }
}

/// Mean SSIM of `a` against `b` over all channels.
pub fn ssim(a: &Image, b: &Image, cfg: &LossConfig) -> Result<f64> {
    a.check_same_dims(b)?;
    Ok(Ssim::new(b, cfg)?.evaluate(a, false)?.0)
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Weighted total; the sampler's energy.
    pub energy: f64,
    pub photometric: f64,
    pub ssim: f64,
    pub opacity_reg: f64,
    pub scale_reg: f64,
    /// Gradient of `energy` with respect to the rendered image.
    pub dl_dimage: Image,
    /// Direct gradient of the two regularizers with respect to each primitive.
    pub reg_grads: Vec<GaussianGrad>,
}

/// Loss evaluator bound to one target image and config.
#[derive(Debug, Clone)]
pub struct LossEvaluator {
    pub cfg: LossConfig,
    target: Image,
    ssim: Option<Ssim>,
}

impl LossEvaluator {
    pub fn new(target: &Image, cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        let ssim = (cfg.lambda_ssim > 0.0)
            .then(|| Ssim::new(target, &cfg))
            .transpose()?;
        Ok(Self {
            cfg,
            target: target.clone(),
            ssim,
        })
    }

    pub fn target(&self) -> &Image {
        &self.target
    }

    /// Same evaluator with the photometric term switched for `stage`.
    pub fn for_stage(&self, stage: Stage) -> LossEvaluator {
        LossEvaluator {
            cfg: photometric_swap(&self.cfg, stage),
            target: self.target.clone(),
            ssim: self.ssim.clone(),
        }
    }

    pub fn evaluate(&self, rendered: &Image, cloud: &GaussianCloud) -> Result<LossOutput> {
        let cfg = &self.cfg;
        self.target.check_same_dims(rendered)?;
        if cloud.is_empty() {
            return Err(Error::InvalidArgument("loss needs a nonempty cloud".into()));
        }
        let n = rendered.data.len() as f64;
        let w_photo = 1.0 - cfg.lambda_ssim;
        let mut dl = Image::new(rendered.width, rendered.height);
        let mut photometric = 0.0;
        for ((d, &r), &t) in dl.data.iter_mut().zip(&rendered.data).zip(&self.target.data) {
            let diff = r - t;
            match cfg.photometric {
                Photometric::L1 => {
                    photometric += diff.abs();
                    *d = w_photo * sign(diff) / n;
                }
                Photometric::L2 => {
                    photometric += diff * diff;
                    *d = w_photo * 2.0 * diff / n;
                }
            }
        }
        photometric /= n;

        let ssim = match &self.ssim {
            Some(s) => {
                let (value, grad) = s.evaluate(rendered, true)?;
                let grad = grad.expect("gradient requested");
                // d(1 - ssim) = -d ssim
                for (d, g) in dl.data.iter_mut().zip(&grad.data) {
                    *d -= cfg.lambda_ssim * g;
                }
                value
            }
            None => ssim(rendered, &self.target, cfg)?,
        };

        let count = cloud.len() as f64;
        let reduce = match cfg.reg_reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / count,
        };
        let mut opacity_reg = 0.0;
        let mut scale_reg = 0.0;
        let mut reg_grads = Vec::with_capacity(cloud.len());
        for g in &cloud.gaussians {
            let o = g.opacity();
            opacity_reg += o.abs();
            let eig = covariance_eigen_sqrt(&build_covariance(g))?;
            scale_reg += eig[0].abs() + eig[1].abs();
            let s = g.scales();
            reg_grads.push(GaussianGrad {
                opacity_logit: cfg.lambda_o * reduce * sign(o) * o * (1.0 - o),
                log_scale: [cfg.lambda_sigma * reduce * s[0], cfg.lambda_sigma * reduce * s[1]],
                ..Default::default()
            });
        }
        opacity_reg *= reduce;
        scale_reg *= reduce;

        let energy = w_photo * photometric
            + cfg.lambda_ssim * (1.0 - ssim)
            + cfg.lambda_o * opacity_reg
            + cfg.lambda_sigma * scale_reg;
        Ok(LossOutput {
            energy,
            photometric,
            ssim,
            opacity_reg,
            scale_reg,
            dl_dimage: dl,
            reg_grads,
        })
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One-shot evaluation of the total loss; see [`LossEvaluator`] for repeated use.
pub fn total_loss(
    rendered: &Image,
    target: &Image,
    cloud: &GaussianCloud,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    LossEvaluator::new(target, *cfg)?.evaluate(rendered, cloud)
}
