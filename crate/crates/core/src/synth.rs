//! Deterministic synthetic multimodal studies.
//!
//! Each study has one lesion. Its boundary is smooth (benign, label 0) or
//! star-shaped (malignant, label 1). The static images and a short contiguous
//! run of keyframes show sharp sections of that lesion, stamped with the same
//! study marker: a left-right symmetric block code in the top and bottom
//! bands. Every other frame shows the lesion defocused under an acoustic
//! shadow, which hides the boundary shape, and carries a different marker.
//!
//! Per-study RNG streams are derived from `(seed, study_id)`, so studies can
//! be generated in any order or in parallel.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const GENERATOR_VERSION: u32 = 1;
pub const DEFAULT_SIZE: usize = 32;
pub const MARKER_CODES: u32 = 16;
/// Rows at the top and bottom carrying the marker code.
pub const MARKER_BAND: usize = 3;

const BACKGROUND: f64 = 0.55;
const LESION_LEVEL: f64 = 0.22;
const MARKER_DELTA: f64 = 0.3;
const EDGE_SOFTNESS: f64 = 0.6;

/// Noise of the static images at difficulty 1.
const IMAGE_SPECKLE: f64 = 0.35;
const IMAGE_GAUSS: f64 = 0.12;
/// Noise of video frames at difficulty 1.
const FRAME_SPECKLE: f64 = 0.35;
const FRAME_GAUSS: f64 = 0.12;
/// Blur applied to non-key frames, in pixels at 32x32.
const DEFOCUS_SIGMA: (f64, f64) = (2.0, 3.0);

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream seed for `(seed, id)`; also used for sampling and
/// augmentation streams.
pub fn derive_seed(seed: u64, id: u64) -> u64 {
    splitmix64(seed ^ splitmix64(id.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Labels are balanced in consecutive id pairs, so any even `n` is exactly
/// half malignant.
pub fn label_for(seed: u64, study_id: u64) -> u8 {
    let flip = (splitmix64(seed ^ splitmix64(study_id / 2)) & 1) as u8;
    (study_id % 2) as u8 ^ flip
}

#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub study_id: u64,
    pub label: u8,
    pub size: usize,
    /// `n_img` grayscale `size×size` images, values in `[0, 1]`.
    pub images: Vec<Vec<f32>>,
    /// `T_raw` grayscale frames.
    pub video: Vec<Vec<f32>>,
    keyframes: Vec<usize>,
}

impl Study {
    pub(crate) fn from_parts(
        study_id: u64,
        label: u8,
        size: usize,
        images: Vec<Vec<f32>>,
        video: Vec<Vec<f32>>,
        keyframes: Vec<usize>,
    ) -> Self {
        Study {
            study_id,
            label,
            size,
            images,
            video,
            keyframes,
        }
    }

    /// Ground-truth keyframes. For evaluation and tests only: model inputs
    /// are assembled from `images` and `video` alone.
    pub fn keyframe_indices(&self) -> &[usize] {
        &self.keyframes
    }
}

#[derive(Clone, Copy, Debug)]
struct Lesion {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    rot: f64,
    amp: f64,
    lobes: f64,
    phase: f64,
}

impl Lesion {
    fn random(rng: &mut ChaCha8Rng, malignant: bool, size: usize) -> Self {
        let c = size as f64 / 2.0;
        let s = size as f64 / 32.0;
        let (amp, lobes) = if malignant {
            (rng.random_range(0.35..0.5), rng.random_range(6..=8) as f64)
        } else {
            (rng.random_range(0.0..0.03), rng.random_range(2..=3) as f64)
        };
        Lesion {
            cx: c + rng.random_range(-2.0..2.0) * s,
            cy: c + rng.random_range(-2.0..2.0) * s,
            rx: rng.random_range(6.5..9.0) * s,
            ry: rng.random_range(6.5..9.0) * s,
            rot: rng.random_range(0.0..PI),
            amp,
            lobes,
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    /// Another section through the same lesion.
    fn view(&self, rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64 / 32.0;
        let zoom = rng.random_range(0.92..1.08);
        let turn = rng.random_range(-0.2..0.2);
        Lesion {
            cx: self.cx + rng.random_range(-1.0..1.0) * s,
            cy: self.cy + rng.random_range(-1.0..1.0) * s,
            rx: self.rx * zoom,
            ry: self.ry * zoom,
            rot: self.rot + turn,
            phase: self.phase + turn * self.lobes,
            ..*self
        }
    }

    fn radius(&self, theta: f64) -> f64 {
        let (c, s) = ((theta - self.rot).cos(), (theta - self.rot).sin());
        let ellipse = self.rx * self.ry / ((self.ry * c).powi(2) + (self.rx * s).powi(2)).sqrt();
        // area-preserving normalization keeps class-mean brightness equal
        let norm = (1.0 + 0.5 * self.amp * self.amp).sqrt();
        ellipse * (1.0 + self.amp * (self.lobes * theta + self.phase).cos()) / norm
    }
}

fn marker_bits(code: u32) -> [[bool; 4]; 2] {
    let b = |i: u32| code >> i & 1 == 1;
    [[b(0), b(1), b(1), b(0)], [b(2), b(3), b(3), b(2)]]
}

/// Noise-free lesion field over the whole frame.
fn lesion_field(lesion: &Lesion, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - lesion.cx;
            let dy = y as f64 + 0.5 - lesion.cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let r = lesion.radius(dy.atan2(dx));
            let inside = 1.0 / (1.0 + (-(r - dist) / EDGE_SOFTNESS).exp());
            out.push(BACKGROUND * (1.0 - inside) + LESION_LEVEL * inside);
        }
    }
    out
}

/// Separable Gaussian blur with edge clamping.
fn blur(field: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let at = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut dst = vec![0.0; src.len()];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (j, w) in kernel.iter().enumerate() {
                    let o = j as isize - radius;
                    acc += w * if horizontal {
                        src[y * size + at(x as isize + o)]
                    } else {
                        src[at(y as isize + o) * size + x]
                    };
                }
                dst[y * size + x] = acc / norm;
            }
        }
        dst
    };
    pass(&pass(field, true), false)
}

/// Acoustic shadow: a vertical band darkened by `depth`.
fn occlude(field: &mut [f64], size: usize, start: usize, width: usize, depth: f64) {
    for row in field.chunks_mut(size) {
        for v in &mut row[start..(start + width).min(size)] {
            *v *= 1.0 - depth;
        }
    }
}

/// Stamp the marker bands and add speckle and Gaussian noise.
fn finish(
    rng: &mut ChaCha8Rng,
    mut field: Vec<f64>,
    marker: Option<u32>,
    size: usize,
    speckle: f64,
    gauss: f64,
) -> Vec<f32> {
    let bits = marker.map(marker_bits);
    let block = size / 4;
    for (b, rows) in [(0, 0..MARKER_BAND), (1, size - MARKER_BAND..size)] {
        for y in rows {
            for x in 0..size {
                field[y * size + x] = match bits {
                    Some(bits) if bits[b][(x / block).min(3)] => BACKGROUND + MARKER_DELTA,
                    Some(_) => BACKGROUND - MARKER_DELTA,
                    None => BACKGROUND,
                };
            }
        }
    }
    field
        .into_iter()
        .map(|clean| {
            let n1: f64 = StandardNormal.sample(rng);
            let n2: f64 = StandardNormal.sample(rng);
            (clean * (1.0 + speckle * n1) + gauss * n2).clamp(0.0, 1.0) as f32
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    /// In `(0, 1]`; scales noise and keyframe sparsity.
    pub difficulty: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: DEFAULT_SIZE,
            difficulty: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.difficulty > 0.0 && self.difficulty <= 1.0) {
            return Err(Error::Config(format!(
                "difficulty must be in (0, 1], got {}",
                self.difficulty
            )));
        }
        if self.size < 8 || !self.size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "unsupported image size {}",
                self.size
            )));
        }
        Ok(())
    }
}

/// Generate study `study_id` of the dataset with `seed`.
pub fn generate_study(seed: u64, study_id: u64, cfg: &SynthConfig) -> Result<Study> {
    cfg.validate()?;
    let size = cfg.size;
    let d = cfg.difficulty;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, study_id));
    let label = label_for(seed, study_id);
    let lesion = Lesion::random(&mut rng, label == 1, size);
    let marker = rng.random_range(0..MARKER_CODES);

    let n_img = rng.random_range(1..=3);
    let images = (0..n_img)
        .map(|_| {
            let v = lesion.view(&mut rng, size);
            let field = lesion_field(&v, size);
            finish(
                &mut rng,
                field,
                Some(marker),
                size,
                IMAGE_SPECKLE * d,
                IMAGE_GAUSS * d,
            )
        })
        .collect();

    let t_raw: usize = rng.random_range(24..=48);
    let frac = (rng.random_range(0.10..0.20) / d).min(0.25);
    let key_len = ((t_raw as f64 * frac).round() as usize).clamp(3, t_raw / 4);
    let key_start = rng.random_range(0..=t_raw - key_len);
    let keyframes: Vec<usize> = (key_start..key_start + key_len).collect();

    let video = (0..t_raw)
        .map(|t| {
            let view = lesion.view(&mut rng, size);
            let (speckle, gauss) = (FRAME_SPECKLE * d, FRAME_GAUSS * d);
            if keyframes.contains(&t) {
                return finish(
                    &mut rng,
                    lesion_field(&view, size),
                    Some(marker),
                    size,
                    speckle,
                    gauss,
                );
            }
            let sigma = rng.random_range(DEFOCUS_SIGMA.0..DEFOCUS_SIGMA.1) * size as f64 / 32.0;
            let mut field = blur(&lesion_field(&view, size), size, sigma);
            let width = rng.random_range(size / 5..=size / 2);
            let start = rng.random_range(0..=size - width);
            occlude(&mut field, size, start, width, rng.random_range(0.2..0.5));
            let other = (marker + rng.random_range(1..MARKER_CODES)) % MARKER_CODES;
            finish(&mut rng, field, Some(other), size, speckle, gauss)
        })
        .collect();

    Ok(Study {
        study_id,
        label,
        size,
        images,
        video,
        keyframes,
    })
}

pub fn generate_dataset(seed: u64, n: usize, cfg: &SynthConfig) -> Result<Vec<Study>> {
    (0..n as u64)
        .map(|id| generate_study(seed, id, cfg))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Sorted sample without replacement.
    TrainRandom,
    /// Evenly spaced, seed-independent.
    EvalUniform,
}

/// Pick `t` of `t_raw` frame indices, preserving temporal order.
pub fn sample_frames(t_raw: usize, t: usize, mode: SampleMode, seed: u64) -> Result<Vec<usize>> {
    if t == 0 || t > t_raw {
        return Err(Error::Data(format!(
            "cannot sample {t} frames from a {t_raw}-frame video"
        )));
    }
    Ok(match mode {
        SampleMode::EvalUniform => (0..t).map(|i| i * t_raw / t).collect(),
        SampleMode::TrainRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, t_raw, t).into_vec();
            idx.sort_unstable();
            idx
        }
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    pub flip: bool,
    pub jitter: bool,
}

impl AugmentFlags {
    pub const NONE: AugmentFlags = AugmentFlags {
        flip: false,
        jitter: false,
    };
    pub const ALL: AugmentFlags = AugmentFlags {
        flip: true,
        jitter: true,
    };
}

/// Concrete augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    pub brightness: f32,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip: false,
        brightness: 1.0,
    };

    /// Horizontal flip with p = 0.5, brightness factor uniform in [0.8, 1.2].
    pub fn draw(seed: u64, flags: AugmentFlags) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = rng.random_bool(0.5);
        let brightness = rng.random_range(0.8f32..1.2);
        Augmentation {
            flip: flags.flip && flip,
            brightness: if flags.jitter { brightness } else { 1.0 },
        }
    }

    pub fn apply(&self, image: &[f32], size: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(image.len());
        for row in image.chunks(size) {
            if self.flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
        if self.brightness != 1.0 {
            for v in &mut out {
                *v = (*v * self.brightness).clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Seeded flip and brightness jitter of one `size×size` image.
pub fn augment(image: &[f32], size: usize, seed: u64, flags: AugmentFlags) -> Vec<f32> {
    Augmentation::draw(seed, flags).apply(image, size)
}
