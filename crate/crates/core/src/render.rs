//! Front-to-back alpha compositing of 2D Gaussians and its reverse-mode gradient.
//!
//! Work is split into square pixel tiles. Each tile keeps the depth-ordered
//! list of primitives whose 3-sigma bounding box touches it. The backward pass
//! accumulates per-tile partial gradients and reduces them in tile order, so
//! results do not depend on how many threads ran the tiles.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::GaussianCloud;

/// Upper bound applied to every per-pixel alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Scales below this (in pixels) are floored inside the renderer.
pub const SCALE_FLOOR: f64 = 1e-4;
/// Footprint half-extent in standard deviations.
pub const FOOTPRINT_SIGMAS: f64 = 3.0;
/// Returned by [`psnr`] when the images are identical.
pub const PSNR_IDENTICAL: f64 = 99.0;

pub const DEFAULT_TILE: usize = 16;

/// Gradient of a scalar loss with respect to one primitive's unconstrained parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub mu: [f64; 2],
    pub log_scale: [f64; 2],
    pub rot_angle: f64,
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl GaussianGrad {
    pub fn add_assign(&mut self, o: &GaussianGrad) {
        self.mu[0] += o.mu[0];
        self.mu[1] += o.mu[1];
        self.log_scale[0] += o.log_scale[0];
        self.log_scale[1] += o.log_scale[1];
        self.rot_angle += o.rot_angle;
        self.opacity_logit += o.opacity_logit;
        for k in 0..3 {
            self.color[k] += o.color[k];
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.mu[0],
            self.mu[1],
            self.log_scale[0],
            self.log_scale[1],
            self.rot_angle,
            self.opacity_logit,
            self.color[0],
            self.color[1],
            self.color[2],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            tile_size: DEFAULT_TILE,
        }
    }
}

/// Per-primitive quantities shared by the forward and backward passes.
#[derive(Debug, Clone, Copy)]
struct Prepared {
    mu: [f64; 2],
    cos: f64,
    sin: f64,
    inv_var: [f64; 2],
    scale_free: [bool; 2],
    opacity: f64,
    color: [f64; 3],
    /// Inclusive pixel index ranges covered by the footprint.
    x_range: (i64, i64),
    y_range: (i64, i64),
}

impl Prepared {
    /// Covered pixel rectangle within `[x0, x1) x [y0, y1)`, half-open.
    #[inline]
    fn clip(&self, x0: usize, x1: usize, y0: usize, y1: usize) -> Option<(usize, usize, usize, usize)> {
        let xa = self.x_range.0.max(x0 as i64);
        let xb = (self.x_range.1 + 1).min(x1 as i64);
        let ya = self.y_range.0.max(y0 as i64);
        let yb = (self.y_range.1 + 1).min(y1 as i64);
        (xa < xb && ya < yb).then(|| (xa as usize, xb as usize, ya as usize, yb as usize))
    }
}

fn prepare(cloud: &GaussianCloud) -> Vec<Prepared> {
    cloud
        .gaussians
        .iter()
        .map(|g| {
            let raw = g.scales();
            let s = [raw[0].max(SCALE_FLOOR), raw[1].max(SCALE_FLOOR)];
            let (sin, cos) = g.rot_angle.sin_cos();
            let var = [s[0] * s[0], s[1] * s[1]];
            let sxx = cos * cos * var[0] + sin * sin * var[1];
            let syy = sin * sin * var[0] + cos * cos * var[1];
            let rx = FOOTPRINT_SIGMAS * sxx.sqrt();
            let ry = FOOTPRINT_SIGMAS * syy.sqrt();
            // pixel p is covered iff |p + 0.5 - mu| <= r
            let range = |m: f64, r: f64| {
                let lo = (m - r - 0.5).ceil();
                let hi = (m + r - 0.5).floor();
                if lo.is_finite() && hi.is_finite() {
                    (lo.max(-1.0) as i64, hi.min(i32::MAX as f64) as i64)
                } else {
                    (1, 0)
                }
            };
            Prepared {
                mu: g.mu,
                cos,
                sin,
                inv_var: [1.0 / var[0], 1.0 / var[1]],
                scale_free: [raw[0] >= SCALE_FLOOR, raw[1] >= SCALE_FLOOR],
                opacity: g.opacity(),
                color: g.color,
                x_range: range(g.mu[0], rx),
                y_range: range(g.mu[1], ry),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Tiling {
    tile: usize,
    tiles_x: usize,
    lists: Vec<Vec<u32>>,
}

impl Tiling {
    fn build(prepared: &[Prepared], width: usize, height: usize, tile: usize) -> Self {
        let tiles_x = width.div_ceil(tile);
        let tiles_y = height.div_ceil(tile);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (i, p) in prepared.iter().enumerate() {
            let x0 = p.x_range.0.max(0);
            let x1 = p.x_range.1.min(width as i64 - 1);
            let y0 = p.y_range.0.max(0);
            let y1 = p.y_range.1.min(height as i64 - 1);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let t = tile as i64;
            for ty in (y0 / t)..=(y1 / t) {
                for tx in (x0 / t)..=(x1 / t) {
                    lists[ty as usize * tiles_x + tx as usize].push(i as u32);
                }
            }
        }
        Self {
            tile,
            tiles_x,
            lists,
        }
    }

    fn bounds(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        (x0, (x0 + self.tile).min(width), y0, (y0 + self.tile).min(height))
    }
}

/// Result of [`render`]. `image` is the raw composite; clamp with
/// [`Image::clamped`] before display or 8-bit export.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    /// Transmittance left after the last primitive, per pixel.
    pub final_transmittance: Vec<f64>,
    /// Number of primitives whose footprint covers each pixel.
    pub coverage: Vec<u32>,
    /// Number of covering primitives whose alpha hit [`ALPHA_MAX`], per pixel.
    pub clamped: Vec<u32>,
    /// Filled by [`backward`]; zeroed at the start of every backward pass.
    pub per_gaussian_grads: Vec<GaussianGrad>,
    background: [f64; 3],
    prepared: Vec<Prepared>,
    tiling: Tiling,
    tiles: Vec<TileCache>,
}

/// Forward-pass record of one tile, replayed in reverse by [`backward`].
#[derive(Debug, Clone, Default)]
struct TileCache {
    /// Per list entry: covered rectangle inside the tile and the index of
    /// its first contribution.
    rects: Vec<(Option<(usize, usize, usize, usize)>, usize)>,
    /// Grouped by primitive, row-major within each rectangle.
    contribs: Vec<Contribution>,
    transmittance: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Contribution {
    alpha: f64,
    transmittance: f64,
    clamped: bool,
    /// Rotated offset from the center (major, minor axis).
    a: f64,
    b: f64,
}

#[inline]
fn evaluate(p: &Prepared, px: f64, py: f64) -> (f64, f64, f64, bool) {
    let dx = px - p.mu[0];
    let dy = py - p.mu[1];
    let a = p.cos * dx + p.sin * dy;
    let b = -p.sin * dx + p.cos * dy;
    let q = a * a * p.inv_var[0] + b * b * p.inv_var[1];
    let raw = p.opacity * (-0.5 * q).exp();
    if raw > ALPHA_MAX {
        (ALPHA_MAX, a, b, true)
    } else {
        (raw, a, b, false)
    }
}

/// Composite `cloud` front to back over `settings.background`.
pub fn render(
    cloud: &GaussianCloud,
    width: usize,
    height: usize,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("image must be at least 1x1".into()));
    }
    if settings.tile_size == 0 {
        return Err(Error::InvalidArgument("tile size must be positive".into()));
    }
    let prepared = prepare(cloud);
    let tiling = Tiling::build(&prepared, width, height, settings.tile_size);
    let bg = settings.background;

    struct TileResult {
        color: Vec<[f64; 3]>,
        coverage: Vec<u32>,
        clamped: Vec<u32>,
        cache: TileCache,
    }

    let results: Vec<TileResult> = (0..tiling.lists.len())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = tiling.bounds(t, width, height);
            let n = (x1 - x0) * (y1 - y0);
            let tw = x1 - x0;
            let mut color = vec![[0.0; 3]; n];
            let mut trans = vec![1.0; n];
            let mut coverage = vec![0u32; n];
            let mut clamped = vec![0u32; n];
            let list = &tiling.lists[t];
            let rects: Vec<_> = list
                .iter()
                .map(|&gi| prepared[gi as usize].clip(x0, x1, y0, y1))
                .collect();
            let total: usize = rects
                .iter()
                .flatten()
                .map(|&(xa, xb, ya, yb)| (xb - xa) * (yb - ya))
                .sum();
            let mut starts = Vec::with_capacity(list.len());
            let mut contribs = Vec::with_capacity(total);
            // primitive-major sweep: every pixel still composites its
            // primitives in list order
            for (&gi, &rect) in list.iter().zip(&rects) {
                let p = &prepared[gi as usize];
                starts.push(contribs.len());
                let Some((xa, xb, ya, yb)) = rect else {
                    continue;
                };
                for y in ya..yb {
                    let py = y as f64 + 0.5;
                    for x in xa..xb {
                        let i = (y - y0) * tw + (x - x0);
                        let (alpha, a, b, was_clamped) = evaluate(p, x as f64 + 0.5, py);
                        coverage[i] += 1;
                        clamped[i] += was_clamped as u32;
                        let w = alpha * trans[i];
                        for k in 0..3 {
                            color[i][k] += p.color[k] * w;
                        }
                        contribs.push(Contribution {
                            alpha,
                            transmittance: trans[i],
                            clamped: was_clamped,
                            a,
                            b,
                        });
                        trans[i] *= 1.0 - alpha;
                    }
                }
            }
            for (c, tr) in color.iter_mut().zip(&trans) {
                for k in 0..3 {
                    c[k] += tr * bg[k];
                }
            }
            TileResult {
                color,
                coverage,
                clamped,
                cache: TileCache {
                    rects: rects.into_iter().zip(starts).collect(),
                    contribs,
                    transmittance: trans,
                },
            }
        })
        .collect();

    let mut image = Image::new(width, height);
    let mut final_transmittance = vec![0.0; width * height];
    let mut coverage = vec![0; width * height];
    let mut clamped = vec![0; width * height];
    let mut tiles = Vec::with_capacity(results.len());
    for (t, res) in results.into_iter().enumerate() {
        let (x0, x1, y0, y1) = tiling.bounds(t, width, height);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * width + x;
                image.set_pixel(x, y, res.color[k]);
                final_transmittance[i] = res.cache.transmittance[k];
                coverage[i] = res.coverage[k];
                clamped[i] = res.clamped[k];
                k += 1;
            }
        }
        tiles.push(res.cache);
    }

    Ok(RenderOutput {
        image,
        final_transmittance,
        coverage,
        clamped,
        per_gaussian_grads: Vec::new(),
        background: bg,
        prepared,
        tiling,
        tiles,
    })
}

/// Propagate `dl_dimage` (same shape as the rendered image) back to every
/// primitive's unconstrained parameters. `out` must come from [`render`] on
/// the same cloud.
pub fn backward<'a>(
    cloud: &GaussianCloud,
    out: &'a mut RenderOutput,
    dl_dimage: &Image,
) -> Result<&'a [GaussianGrad]> {
    out.image.check_same_dims(dl_dimage)?;
    if out.prepared.len() != cloud.len() {
        return Err(Error::InvalidArgument(format!(
            "render output holds {} primitives, cloud has {}",
            out.prepared.len(),
            cloud.len()
        )));
    }
    let (width, height) = out.image.dims();
    let prepared = &out.prepared;
    let tiling = &out.tiling;
    let tiles = &out.tiles;
    let bg = out.background;

    let partials: Vec<Vec<GaussianGrad>> = (0..tiling.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &tiling.lists[t];
            let mut local = vec![GaussianGrad::default(); list.len()];
            if list.is_empty() {
                return local;
            }
            let (x0, x1, y0, y1) = tiling.bounds(t, width, height);
            let tw = x1 - x0;
            let n = tw * (y1 - y0);
            let mut gc = vec![[0.0; 3]; n];
            let mut active = vec![false; n];
            for y in y0..y1 {
                for x in x0..x1 {
                    let pix = y * width + x;
                    let i = (y - y0) * tw + (x - x0);
                    gc[i] = [
                        dl_dimage.data[pix * 3],
                        dl_dimage.data[pix * 3 + 1],
                        dl_dimage.data[pix * 3 + 2],
                    ];
                    active[i] = gc[i] != [0.0; 3];
                }
            }
            let cache = &tiles[t];
            let (rects, contribs) = (&cache.rects, &cache.contribs);
            // color seen behind the current primitive, per pixel
            let mut behind: Vec<[f64; 3]> =
                cache.transmittance.iter().map(|t| [t * bg[0], t * bg[1], t * bg[2]]).collect();
            for (li, &gi) in list.iter().enumerate().rev() {
                let (Some((xa, xb, ya, yb)), start) = rects[li] else {
                    continue;
                };
                let p = &prepared[gi as usize];
                let grad = &mut local[li];
                let mut k_idx = start;
                for y in ya..yb {
                    for x in xa..xb {
                        let i = (y - y0) * tw + (x - x0);
                        let c = &contribs[k_idx];
                        k_idx += 1;
                        if !active[i] {
                            continue;
                        }
                        let g = gc[i];
                        let bh = &mut behind[i];
                        let w = c.alpha * c.transmittance;
                        let mut d_alpha = 0.0;
                        for k in 0..3 {
                            grad.color[k] += g[k] * w;
                            d_alpha +=
                                g[k] * (c.transmittance * p.color[k] - bh[k] / (1.0 - c.alpha));
                        }
                        for k in 0..3 {
                            bh[k] += p.color[k] * w;
                        }
                        if c.clamped {
                            continue;
                        }
                        grad.opacity_logit += d_alpha * c.alpha * (1.0 - p.opacity);
                        let d_q = -0.5 * c.alpha * d_alpha;
                        let dq_da = 2.0 * c.a * p.inv_var[0];
                        let dq_db = 2.0 * c.b * p.inv_var[1];
                        // d = x - mu, so d/dmu = -d/dd
                        grad.mu[0] -= d_q * (dq_da * p.cos - dq_db * p.sin);
                        grad.mu[1] -= d_q * (dq_da * p.sin + dq_db * p.cos);
                        if p.scale_free[0] {
                            grad.log_scale[0] += d_q * (-dq_da * c.a);
                        }
                        if p.scale_free[1] {
                            grad.log_scale[1] += d_q * (-dq_db * c.b);
                        }
                        grad.rot_angle += d_q * (dq_da * c.b - dq_db * c.a);
                    }
                }
            }
            local
        })
        .collect();

    let grads = &mut out.per_gaussian_grads;
    grads.clear();
    grads.resize(cloud.len(), GaussianGrad::default());
    for (list, local) in tiling.lists.iter().zip(&partials) {
        for (&gi, g) in list.iter().zip(local) {
            grads[gi as usize].add_assign(g);
        }
    }
    Ok(&out.per_gaussian_grads)
}

pub fn mse(reference: &Image, test: &Image) -> Result<f64> {
    reference.check_same_dims(test)?;
    let n = reference.data.len() as f64;
    Ok(reference
        .data
        .iter()
        .zip(&test.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB; [`PSNR_IDENTICAL`] when the MSE is zero.
pub fn psnr(reference: &Image, test: &Image, peak: f64) -> Result<f64> {
    let m = mse(reference, test)?;
    if m == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{logit, Gaussian2D};

    fn gauss(mu: [f64; 2], scale: f64, opacity: f64, color: [f64; 3], depth: u64) -> Gaussian2D {
        Gaussian2D {
            mu,
            log_scale: [scale.ln(); 2],
            rot_angle: 0.0,
            opacity_logit: logit(opacity).unwrap(),
            color,
            depth_index: depth,
        }
    }

    fn cloud(gs: Vec<Gaussian2D>) -> GaussianCloud {
        GaussianCloud::from_gaussians(gs, 100, 0).unwrap()
    }

    #[test]
    fn empty_cloud_renders_background() {
        let s = RenderSettings {
            background: [0.2, 0.4, 0.6],
            ..Default::default()
        };
        let out = render(&cloud(vec![]), 7, 5, &s).unwrap();
        assert_eq!(out.image, Image::filled(7, 5, [0.2, 0.4, 0.6]));
    }

    #[test]
    fn opaque_peak_is_clamped_to_alpha_max() {
        let s = RenderSettings {
            background: [0.0, 1.0, 0.0],
            ..Default::default()
        };
        let g = gauss([0.5, 0.5], 1.0, 1.0 - 1e-9, [1.0, 0.0, 0.0], 0);
        let out = render(&cloud(vec![g]), 1, 1, &s).unwrap();
        let px = out.image.pixel(0, 0);
        assert!((px[0] - 0.99).abs() < 1e-15);
        assert!((px[1] - 0.01).abs() < 1e-15);
        assert_eq!(px[2], 0.0);
        assert_eq!(out.clamped[0], 1);
    }

    #[test]
    fn two_coincident_half_alpha() {
        let red = gauss([0.5, 0.5], 1.0, 0.5, [1.0, 0.0, 0.0], 0);
        let blue = gauss([0.5, 0.5], 1.0, 0.5, [0.0, 0.0, 1.0], 1);
        let out = render(&cloud(vec![red, blue]), 1, 1, &RenderSettings::default()).unwrap();
        let px = out.image.pixel(0, 0);
        assert!((px[0] - 0.5).abs() < 1e-15);
        assert_eq!(px[1], 0.0);
        assert!((px[2] - 0.25).abs() < 1e-15);
        assert!((out.final_transmittance[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let c = cloud(vec![
            gauss([3.0, 4.0], 1.5, 0.6, [0.2, 0.5, 0.9], 0),
            gauss([5.0, 2.0], 2.0, 0.3, [0.9, 0.1, 0.4], 1),
        ]);
        let mut out = render(&c, 8, 8, &RenderSettings::default()).unwrap();
        let g = backward(&c, &mut out, &Image::new(8, 8)).unwrap();
        assert!(g.iter().all(|g| *g == GaussianGrad::default()));
    }

    #[test]
    fn position_gradient_vanishes_at_peak() {
        let c = cloud(vec![gauss([2.5, 2.5], 1.3, 0.7, [0.3, 0.6, 0.9], 0)]);
        let mut out = render(&c, 5, 5, &RenderSettings::default()).unwrap();
        let mut up = Image::new(5, 5);
        up.set_pixel(2, 2, [1.0, 1.0, 1.0]);
        let g = backward(&c, &mut out, &up).unwrap();
        assert_eq!(g[0].mu, [0.0, 0.0]);
        assert!(g[0].opacity_logit > 0.0);
    }

    #[test]
    fn backward_rejects_mismatched_dims() {
        let c = cloud(vec![gauss([1.0, 1.0], 1.0, 0.5, [1.0; 3], 0)]);
        let mut out = render(&c, 4, 4, &RenderSettings::default()).unwrap();
        assert!(backward(&c, &mut out, &Image::new(3, 4)).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.3; 3]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
        let zero = Image::new(4, 4);
        let one = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&zero, &one, 1.0).unwrap(), 0.0);
        let b = Image::filled(4, 4, [0.4; 3]);
        let c = Image::filled(4, 4, [0.3; 3]);
        assert!((psnr(&b, &c, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::new(3, 4), 1.0).is_err());
    }

    #[test]
    fn tile_size_does_not_change_output() {
        let c = cloud(vec![
            gauss([3.0, 4.0], 2.5, 0.6, [0.2, 0.5, 0.9], 0),
            gauss([12.0, 9.0], 3.0, 0.8, [0.9, 0.1, 0.4], 1),
            gauss([7.0, 7.0], 1.0, 0.4, [0.5, 0.5, 0.5], 2),
        ]);
        let a = render(&c, 19, 13, &RenderSettings::default()).unwrap();
        let b = render(
            &c,
            19,
            13,
            &RenderSettings {
                tile_size: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.image, b.image);
    }
}
