//! Deterministic procedural test images with natural-image statistics:
//! smooth gradients, hard occlusion edges and multi-octave texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scene {
    /// Sky gradient, sun, layered ridgelines.
    Landscape,
    /// Overlapping soft and hard-edged blobs on a textured table.
    StillLife,
    /// Colorized fractal noise with a few sharp stripes.
    Texture,
}

impl Scene {
    pub const ALL: [Scene; 3] = [Scene::Landscape, Scene::StillLife, Scene::Texture];

    pub fn name(self) -> &'static str {
        match self {
            Scene::Landscape => "landscape",
            Scene::StillLife => "still-life",
            Scene::Texture => "texture",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Lattice value noise, smoothstep-interpolated, summed over octaves.
struct ValueNoise {
    size: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            size,
            lattice: (0..size * size).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn at(&self, i: i64, j: i64) -> f64 {
        let n = self.size as i64;
        self.lattice[(i.rem_euclid(n) * n + j.rem_euclid(n)) as usize]
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let (xi, yi) = (x.floor(), y.floor());
        let (fx, fy) = (x - xi, y - yi);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (sx, sy) = (s(fx), s(fy));
        let (i, j) = (yi as i64, xi as i64);
        let top = self.at(i, j) * (1.0 - sx) + self.at(i, j + 1) * sx;
        let bottom = self.at(i + 1, j) * (1.0 - sx) + self.at(i + 1, j + 1) * sx;
        top * (1.0 - sy) + bottom * sy
    }

    /// Roughly in [0, 1].
    fn fbm(&self, x: f64, y: f64, octaves: usize) -> f64 {
        let (mut amp, mut freq, mut sum, mut norm) = (0.5, 1.0, 0.0, 0.0);
        for _ in 0..octaves {
            sum += amp * self.sample(x * freq, y * freq);
            norm += amp;
            amp *= 0.5;
            freq *= 2.0;
        }
        sum / norm
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn smooth_edge(d: f64, width: f64) -> f64 {
    (0.5 - d / width).clamp(0.0, 1.0)
}

fn landscape(w: usize, h: usize, noise: &ValueNoise) -> Image {
    let (wf, hf) = (w as f64, h as f64);
    Image::from_fn(w, h, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / wf, (y as f64 + 0.5) / hf);
        let mut c = mix([0.25, 0.45, 0.85], [0.95, 0.75, 0.55], v.powf(1.5));
        let sun = ((u - 0.72).powi(2) + (v - 0.25).powi(2)).sqrt();
        c = mix(c, [1.0, 0.95, 0.7], smooth_edge(sun - 0.08, 0.01));
        let layers = [
            (0.45, 0.08, [0.45, 0.5, 0.6], 3.0),
            (0.6, 0.1, [0.25, 0.4, 0.3], 5.0),
            (0.78, 0.06, [0.15, 0.3, 0.12], 9.0),
        ];
        for (k, (base, amp, color, freq)) in layers.into_iter().enumerate() {
            let ridge = base
                + amp * (2.0 * noise.fbm(u * freq, k as f64 * 7.3, 4) - 1.0)
                + 0.02 * (u * 40.0 + k as f64).sin();
            if v > ridge {
                let shade = 0.75 + 0.5 * noise.fbm(u * 24.0, v * 24.0 + k as f64 * 3.1, 3);
                c = [color[0] * shade, color[1] * shade, color[2] * shade];
            }
        }
        c
    })
}

fn still_life(w: usize, h: usize, noise: &ValueNoise) -> Image {
    let (wf, hf) = (w as f64, h as f64);
    let blobs: [([f64; 2], [f64; 2], f64, [f64; 3], f64); 5] = [
        ([0.3, 0.55], [0.18, 0.22], 0.3, [0.85, 0.2, 0.15], 0.01),
        ([0.55, 0.5], [0.14, 0.14], 0.0, [0.95, 0.8, 0.2], 0.05),
        ([0.72, 0.62], [0.2, 0.1], -0.4, [0.3, 0.6, 0.25], 0.01),
        ([0.45, 0.3], [0.08, 0.2], 0.9, [0.4, 0.3, 0.7], 0.02),
        ([0.2, 0.2], [0.1, 0.1], 0.0, [0.9, 0.9, 0.95], 0.08),
    ];
    Image::from_fn(w, h, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / wf, (y as f64 + 0.5) / hf);
        let grain = noise.fbm(u * 6.0, v * 40.0, 4);
        let mut c = if v > 0.7 {
            let t = 0.35 + 0.3 * grain;
            [t * 1.2, t * 0.8, t * 0.5]
        } else {
            let t = 0.6 + 0.15 * noise.fbm(u * 3.0, v * 3.0, 2);
            [t * 0.9, t * 0.92, t]
        };
        for (center, radii, angle, color, soft) in blobs {
            let (s, co) = f64::sin_cos(angle);
            let (dx, dy) = (u - center[0], v - center[1]);
            let a = (co * dx + s * dy) / radii[0];
            let b = (-s * dx + co * dy) / radii[1];
            let r = (a * a + b * b).sqrt();
            let cover = smooth_edge((r - 1.0) * radii[0].min(radii[1]), soft.max(0.004));
            let light = 0.7 + 0.3 * (1.0 - (a + 0.4).powi(2).min(1.0));
            c = mix(c, [color[0] * light, color[1] * light, color[2] * light], cover);
        }
        c
    })
}

fn texture(w: usize, h: usize, noise: &ValueNoise) -> Image {
    let (wf, hf) = (w as f64, h as f64);
    Image::from_fn(w, h, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / wf, (y as f64 + 0.5) / hf);
        let warp = noise.fbm(u * 3.0 + 11.0, v * 3.0, 3);
        let n = noise.fbm(u * 8.0 + 2.0 * warp, v * 8.0, 5);
        let mut c = mix([0.1, 0.2, 0.45], [0.95, 0.6, 0.25], n);
        let stripe = ((u + 0.5 * v) * 9.0 + 3.0 * warp).sin();
        if stripe > 0.85 {
            c = mix(c, [0.95, 0.95, 0.9], 0.8);
        }
        c
    })
}

/// Render a scene at `w x h`. The same `(scene, seed, w, h)` always yields
/// the same pixels.
pub fn generate(scene: Scene, w: usize, h: usize, seed: u64) -> Image {
    let noise = ValueNoise::new(seed ^ 0x5eed_0000 ^ scene as u64, 64);
    let img = match scene {
        Scene::Landscape => landscape(w, h, &noise),
        Scene::StillLife => still_life(w, h, &noise),
        Scene::Texture => texture(w, h, &noise),
    };
    img.clamped()
}

/// The three fixed 128x128 benchmark images.
pub fn benchmark_set() -> Vec<(Scene, Image)> {
    Scene::ALL
        .into_iter()
        .map(|s| (s, generate(s, 128, 128, 1)))
        .collect()
}
