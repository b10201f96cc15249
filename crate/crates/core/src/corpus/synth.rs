//! Procedural images with known manipulation artifacts.
//!
//! Real images are smooth low-frequency fields with a softly blended
//! elliptical region. A fake takes a fresh real-style base, splices donor
//! content into the ellipse through a 2-pixel feathered seam (shared by every
//! method) and adds one method-specific artifact inside the region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

/// Feather width of the splice seam in pixels.
pub const SEAM_WIDTH: f32 = 2.0;
/// Softness (logistic scale, pixels) of the natural region boundary.
const NATURAL_EDGE: f32 = 1.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SpliceNoise,
    SpliceBlock,
    SpliceHue,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SpliceNoise, Method::SpliceBlock, Method::SpliceHue];

    pub fn name(self) -> &'static str {
        match self {
            Method::SpliceNoise => "splice_noise",
            Method::SpliceBlock => "splice_block",
            Method::SpliceHue => "splice_hue",
        }
    }

    /// Artifact tags written to manifests.
    pub fn artifacts(self) -> [&'static str; 2] {
        match self {
            Method::SpliceNoise => ["seam", "periodic_noise"],
            Method::SpliceBlock => ["seam", "block_quantization"],
            Method::SpliceHue => ["seam", "channel_gain"],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// SplitMix64 finalizer; derives independent per-image seeds.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
struct Wave {
    fx: f32,
    fy: f32,
    phase: f32,
    amp: [f32; 3],
}

/// Base color plus a handful of low-frequency sinusoids.
#[derive(Clone, Debug)]
struct Field {
    base: [f32; 3],
    waves: Vec<Wave>,
}

impl Field {
    fn random(rng: &mut ChaCha8Rng, base: [f32; 3]) -> Self {
        let count = rng.gen_range(3..=6);
        let waves = (0..count)
            .map(|_| {
                let (fx, fy) = loop {
                    let fx: i32 = rng.gen_range(-2..=2);
                    let fy: i32 = rng.gen_range(-2..=2);
                    if fx != 0 || fy != 0 {
                        break (fx as f32, fy as f32);
                    }
                };
                Wave {
                    fx,
                    fy,
                    phase: rng.gen_range(0.0..std::f32::consts::TAU),
                    amp: [rng.gen_range(0.02..0.08), rng.gen_range(0.02..0.08), rng.gen_range(0.02..0.08)],
                }
            })
            .collect();
        Field { base, waves }
    }

    fn eval(&self, x: f32, y: f32, size: f32) -> [f32; 3] {
        let mut v = self.base;
        for w in &self.waves {
            let s = (std::f32::consts::TAU * (w.fx * x + w.fy * y) / size + w.phase).sin();
            for c in 0..3 {
                v[c] += w.amp[c] * s;
            }
        }
        v
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)]
}

/// Axis-aligned elliptical region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, size: f32) -> Self {
        Ellipse {
            cx: size / 2.0 + rng.gen_range(-size / 10.0..size / 10.0),
            cy: size / 2.0 + rng.gen_range(-size / 10.0..size / 10.0),
            rx: rng.gen_range(0.22 * size..0.32 * size),
            ry: rng.gen_range(0.22 * size..0.32 * size),
        }
    }

    /// Approximate signed distance to the boundary in pixels, positive
    /// inside.
    pub fn inside_distance(&self, x: f32, y: f32) -> f32 {
        let (px, py) = (x + 0.5 - self.cx, y + 0.5 - self.cy);
        let rho = ((px / self.rx).powi(2) + (py / self.ry).powi(2)).sqrt();
        (1.0 - rho) * 0.5 * (self.rx + self.ry)
    }

    /// Opacity of the feathered splice mask.
    pub fn seam_alpha(&self, x: f32, y: f32) -> f32 {
        (self.inside_distance(x, y) / SEAM_WIDTH + 0.5).clamp(0.0, 1.0)
    }
}

/// A rendered image plus what generated it.
#[derive(Clone, Debug)]
pub struct Synthesized {
    /// `3×S×S`, values in `[0, 1]`.
    pub image: Tensor,
    pub region: Ellipse,
    pub method: Option<Method>,
}

struct Scene {
    background: Field,
    face: Field,
    region: Ellipse,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng, size: f32) -> Self {
        let bg_color = random_color(rng);
        let background = Field::random(rng, bg_color);
        let face_color = random_color(rng);
        let face = Field::random(rng, face_color);
        Scene {
            background,
            face,
            region: Ellipse::random(rng, size),
        }
    }

    fn render(&self, size: usize) -> Vec<[f32; 3]> {
        let s = size as f32;
        let mut px = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f32, y as f32);
                let d = self.region.inside_distance(xf, yf);
                let a = 1.0 / (1.0 + (-d / NATURAL_EDGE).exp());
                let b = self.background.eval(xf, yf, s);
                let f = self.face.eval(xf, yf, s);
                px.push([0, 1, 2].map(|c| b[c] + a * (f[c] - b[c])));
            }
        }
        px
    }
}

fn to_tensor(px: &[[f32; 3]], size: usize) -> Tensor {
    let plane = size * size;
    Tensor::from_fn(&[3, size, size], |i| px[i % plane][i / plane].clamp(0.0, 1.0))
}

/// Real image for the given per-image seed.
pub fn render_real(seed: u64, size: usize) -> Synthesized {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(&mut rng, size as f32);
    Synthesized {
        image: to_tensor(&scene.render(size), size),
        region: scene.region,
        method: None,
    }
}

/// The untouched base image a fake with this seed was spliced into.
pub fn render_fake_base(seed: u64, size: usize) -> Synthesized {
    render_real(mix_seed(seed, 0xBA5E, 0), size)
}

/// Fake image for the given per-image seed and method.
pub fn render_fake(seed: u64, method: Method, size: usize) -> Synthesized {
    let base_seed = mix_seed(seed, 0xBA5E, 0);
    let mut base_rng = ChaCha8Rng::seed_from_u64(base_seed);
    let scene = Scene::random(&mut base_rng, size as f32);
    let mut px = scene.render(size);
    // Clamp exactly as the stored base image is clamped.
    for p in px.iter_mut() {
        *p = p.map(|v| v.clamp(0.0, 1.0));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Donor content deliberately contrasts with the region it replaces.
    let donor_color = scene.face.base.map(|c| {
        let offset = rng.gen_range(0.12..0.25) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let v = c + offset;
        if (0.1..=0.9).contains(&v) {
            v
        } else {
            c - offset
        }
    });
    let donor = Field::random(&mut rng, donor_color);
    let region = scene.region;
    let s = size as f32;
    let alpha: Vec<f32> = (0..size * size)
        .map(|i| region.seam_alpha((i % size) as f32, (i / size) as f32))
        .collect();

    let mut spliced: Vec<[f32; 3]> = px
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let a = alpha[i];
            if a == 0.0 {
                return *p;
            }
            let d = donor.eval((i % size) as f32, (i / size) as f32, s);
            [0, 1, 2].map(|c| p[c] + a * (d[c] - p[c]))
        })
        .collect();

    match method {
        Method::SpliceNoise => {
            let period = 3.0;
            let phase = rng.gen_range(0.0..std::f32::consts::TAU);
            let amp = 0.06;
            for (i, p) in spliced.iter_mut().enumerate() {
                if alpha[i] == 0.0 {
                    continue;
                }
                let (x, y) = ((i % size) as f32, (i / size) as f32);
                let n = amp * (std::f32::consts::TAU * (x + y) / period + phase).sin();
                *p = p.map(|v| v + alpha[i] * n);
            }
        }
        Method::SpliceBlock => {
            let block = 8;
            let levels = 12.0;
            let src = spliced.clone();
            for by in (0..size).step_by(block) {
                for bx in (0..size).step_by(block) {
                    let mut mean = [0.0f32; 3];
                    let mut count = 0.0;
                    for y in by..(by + block).min(size) {
                        for x in bx..(bx + block).min(size) {
                            for c in 0..3 {
                                mean[c] += src[y * size + x][c];
                            }
                            count += 1.0;
                        }
                    }
                    let q = mean.map(|m| ((m / count) * levels).round() / levels);
                    for y in by..(by + block).min(size) {
                        for x in bx..(bx + block).min(size) {
                            let i = y * size + x;
                            let a = alpha[i];
                            if a > 0.0 {
                                spliced[i] = [0, 1, 2].map(|c| src[i][c] + a * (q[c] - src[i][c]));
                            }
                        }
                    }
                }
            }
        }
        Method::SpliceHue => {
            let gain = [
                1.0 + rng.gen_range(0.15..0.3),
                1.0 - rng.gen_range(0.15..0.3),
                1.0 + rng.gen_range(0.15..0.3),
            ];
            for (i, p) in spliced.iter_mut().enumerate() {
                let a = alpha[i];
                if a > 0.0 {
                    *p = [0, 1, 2].map(|c| p[c] * (1.0 + a * (gain[c] - 1.0)));
                }
            }
        }
    }

    Synthesized {
        image: to_tensor(&spliced, size),
        region,
        method: Some(method),
    }
}
