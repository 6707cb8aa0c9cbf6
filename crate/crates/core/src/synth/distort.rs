//! Severity-parameterized distortion bank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionType {
    GaussianBlur,
    GaussianNoise,
    ImpulseNoise,
    BlockAveraging,
    OverexposureClip,
    UnderexposureClip,
    ContrastReduction,
    Pixelation,
}

impl DistortionType {
    pub const ALL: [DistortionType; 8] = [
        DistortionType::GaussianBlur,
        DistortionType::GaussianNoise,
        DistortionType::ImpulseNoise,
        DistortionType::BlockAveraging,
        DistortionType::OverexposureClip,
        DistortionType::UnderexposureClip,
        DistortionType::ContrastReduction,
        DistortionType::Pixelation,
    ];

    pub fn from_id(id: usize) -> Result<Self, SynthError> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or(SynthError::DistortionType(id))
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DistortionType::GaussianBlur => "gaussian-blur",
            DistortionType::GaussianNoise => "gaussian-noise",
            DistortionType::ImpulseNoise => "impulse-noise",
            DistortionType::BlockAveraging => "block-averaging",
            DistortionType::OverexposureClip => "overexposure-clip",
            DistortionType::UnderexposureClip => "underexposure-clip",
            DistortionType::ContrastReduction => "contrast-reduction",
            DistortionType::Pixelation => "pixelation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionType,
    pub severity: f64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionType, severity: f64) -> Result<Self, SynthError> {
        if !(0.0..=1.0).contains(&severity) {
            return Err(SynthError::Severity(severity));
        }
        Ok(Self { kind, severity })
    }
}

/// Proxy quality label: `1 - severity`.
pub fn proxy_mos(spec: &DistortionSpec) -> f64 {
    1.0 - spec.severity
}

pub fn blur_radius(severity: f64) -> usize {
    (3.0 * severity).ceil() as usize
}

pub fn noise_std(severity: f64) -> f64 {
    0.25 * severity
}

pub fn block_size(severity: f64) -> usize {
    1 + (7.0 * severity).floor() as usize
}

fn gaussian_blur(img: &Image, severity: f64) -> Image {
    let radius = blur_radius(severity) as isize;
    let sigma = 1.5 * severity;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let (h, w, ch) = (img.height as isize, img.width as isize, img.channels);
    let pass = |src: &Image, horizontal: bool| {
        let mut out = src.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, &wt) in kernel.iter().enumerate() {
                        let off = k as isize - radius;
                        let (sy, sx) = if horizontal {
                            (y, (x + off).clamp(0, w - 1))
                        } else {
                            ((y + off).clamp(0, h - 1), x)
                        };
                        acc += wt * src.get(sy as usize, sx as usize, c);
                    }
                    out.set(y as usize, x as usize, c, acc);
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn gaussian_noise(img: &Image, severity: f64, rng: &mut ChaCha8Rng) -> Image {
    let normal = Normal::new(0.0, noise_std(severity)).expect("positive std");
    let mut out = img.clone();
    for v in &mut out.data {
        *v += normal.sample(rng);
    }
    out
}

fn impulse_noise(img: &Image, severity: f64, rng: &mut ChaCha8Rng) -> Image {
    let p = 0.3 * severity;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            if rng.gen_bool(p) {
                let v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                for c in 0..img.channels {
                    out.set(y, x, c, v);
                }
            }
        }
    }
    out
}

/// Visits each `b x b` block (clipped at the border) with its pixel list.
fn for_blocks(img: &Image, b: usize, mut f: impl FnMut(&[(usize, usize)])) {
    let mut cells = Vec::with_capacity(b * b);
    for by in (0..img.height).step_by(b) {
        for bx in (0..img.width).step_by(b) {
            cells.clear();
            for y in by..(by + b).min(img.height) {
                for x in bx..(bx + b).min(img.width) {
                    cells.push((y, x));
                }
            }
            f(&cells);
        }
    }
}

/// Pulls each block toward its mean, a coarse stand-in for lossy block coding.
fn block_averaging(img: &Image, severity: f64) -> Image {
    let b = block_size(severity);
    let keep = 1.0 - severity;
    let mut out = img.clone();
    for_blocks(img, b, |cells| {
        for c in 0..img.channels {
            let mean = cells.iter().map(|&(y, x)| img.get(y, x, c)).sum::<f64>() / cells.len() as f64;
            for &(y, x) in cells {
                out.set(y, x, c, mean + keep * (img.get(y, x, c) - mean));
            }
        }
    });
    out
}

/// Nearest-neighbour downsampling: every block copies its centre pixel.
fn pixelation(img: &Image, severity: f64) -> Image {
    let b = block_size(severity);
    let mut out = img.clone();
    for_blocks(img, b, |cells| {
        let (cy, cx) = cells[cells.len() / 2];
        for &(y, x) in cells {
            for c in 0..img.channels {
                out.set(y, x, c, img.get(cy, cx, c));
            }
        }
    });
    out
}

fn pointwise(img: &Image, f: impl Fn(f64) -> f64) -> Image {
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v = f(*v));
    out
}

fn contrast_reduction(img: &Image, severity: f64) -> Image {
    let mean = img.data.iter().sum::<f64>() / img.data.len() as f64;
    let keep = 1.0 - 0.9 * severity;
    pointwise(img, |v| mean + keep * (v - mean))
}

/// Applies `spec` to `img`. Severity 0 returns the input unchanged; every
/// other output is clamped to `[0, 1]` and rounded to `f32` precision.
pub fn apply_distortion(img: &Image, spec: &DistortionSpec, seed: u64) -> Result<Image, SynthError> {
    let s = spec.severity;
    if !(0.0..=1.0).contains(&s) {
        return Err(SynthError::Severity(s));
    }
    if s == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match spec.kind {
        DistortionType::GaussianBlur => gaussian_blur(img, s),
        DistortionType::GaussianNoise => gaussian_noise(img, s, &mut rng),
        DistortionType::ImpulseNoise => impulse_noise(img, s, &mut rng),
        DistortionType::BlockAveraging => block_averaging(img, s),
        DistortionType::OverexposureClip => pointwise(img, |v| v * (1.0 + 2.0 * s) + 0.3 * s),
        DistortionType::UnderexposureClip => pointwise(img, |v| v * (1.0 - 0.7 * s) - 0.2 * s),
        DistortionType::ContrastReduction => contrast_reduction(img, s),
        DistortionType::Pixelation => pixelation(img, s),
    };
    Ok(out.finalize())
}
