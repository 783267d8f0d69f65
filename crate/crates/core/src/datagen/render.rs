use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DatasetConfig, Shape};
use crate::seed;

pub const LATENT_DIM: usize = 6;
const NUM_BASES: usize = 12;
const CLASS_LATENT_SCALE: f64 = 1.5;
/// Class latents closer than this are redrawn.
const MIN_CLASS_SEPARATION: f64 = 4.0;
const MAX_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Nonlinearity {
    /// tanh amplitudes, logistic pixel response.
    Smooth,
    /// softsign amplitudes, clipped-sine pixel response.
    Oscillating,
}

/// A fixed map from latent vectors to images of one modality.
#[derive(Debug, Clone)]
pub struct Renderer {
    shape: Shape,
    /// `NUM_BASES` patterns of `shape.len()` values each.
    bases: Vec<Vec<f64>>,
    /// `NUM_BASES x LATENT_DIM`, row-major.
    mixing: Vec<f64>,
    bias: Vec<f64>,
    gain: f64,
    kind: Nonlinearity,
}

pub(super) fn class_latents(config: &DatasetConfig) -> Vec<[f64; LATENT_DIM]> {
    let mut rng = seed::rng(config.seed, &[seed::stream::CLASS_LATENTS]);
    let mut draw = || {
        let mut z = [0.0; LATENT_DIM];
        for v in &mut z {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = n * CLASS_LATENT_SCALE;
        }
        z
    };
    let gap = |a: &[f64; LATENT_DIM], b: &[f64; LATENT_DIM]| {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let mut latents: Vec<[f64; LATENT_DIM]> = Vec::with_capacity(config.num_classes);
    for _ in 0..config.num_classes {
        // keep the most isolated candidate in case the threshold is unreachable
        let mut best = (f64::NEG_INFINITY, [0.0; LATENT_DIM]);
        for _ in 0..MAX_DRAWS {
            let z = draw();
            let nearest = latents.iter().map(|l| gap(l, &z)).fold(f64::INFINITY, f64::min);
            if nearest > best.0 {
                best = (nearest, z);
            }
            if nearest >= MIN_CLASS_SEPARATION {
                break;
            }
        }
        latents.push(best.1);
    }
    latents
}

impl Renderer {
    pub fn source(shape: Shape, root_seed: u64) -> Self {
        let mut rng = seed::rng(root_seed, &[seed::stream::SOURCE_RENDERER]);
        Self::random(shape, Nonlinearity::Smooth, 2.0, &mut rng)
    }

    pub fn target(shape: Shape, root_seed: u64) -> Self {
        let mut rng = seed::rng(root_seed, &[seed::stream::TARGET_RENDERER]);
        Self::random(shape, Nonlinearity::Oscillating, 1.2, &mut rng)
    }

    fn random(shape: Shape, kind: Nonlinearity, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let bases = (0..NUM_BASES).map(|_| random_basis(shape, rng)).collect();
        let scale = 1.0 / (LATENT_DIM as f64).sqrt();
        let mixing = (0..NUM_BASES * LATENT_DIM)
            .map(|_| {
                let n: f64 = StandardNormal.sample(rng);
                n * scale
            })
            .collect();
        let bias = (0..NUM_BASES).map(|_| rng.random_range(-0.3..0.3)).collect();
        Renderer {
            shape,
            bases,
            mixing,
            bias,
            gain,
            kind,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Renders one sample of the given class latent.
    pub fn render(
        &self,
        class_latent: &[f64; LATENT_DIM],
        jitter: f64,
        noise_sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f32> {
        let mut z = *class_latent;
        for v in &mut z {
            let n: f64 = StandardNormal.sample(rng);
            *v += jitter * n;
        }
        let amplitudes: Vec<f64> = (0..NUM_BASES)
            .map(|j| {
                let row = &self.mixing[j * LATENT_DIM..(j + 1) * LATENT_DIM];
                let a = row.iter().zip(&z).map(|(m, v)| m * v).sum::<f64>() + self.bias[j];
                match self.kind {
                    Nonlinearity::Smooth => a.tanh(),
                    Nonlinearity::Oscillating => a / (1.0 + a.abs()),
                }
            })
            .collect();
        (0..self.shape.len())
            .map(|p| {
                let s: f64 = self
                    .bases
                    .iter()
                    .zip(&amplitudes)
                    .map(|(b, a)| a * b[p])
                    .sum::<f64>()
                    * self.gain;
                let clean = match self.kind {
                    Nonlinearity::Smooth => 1.0 / (1.0 + (-s).exp()),
                    Nonlinearity::Oscillating => 0.5 + 0.5 * s.sin(),
                };
                let noise = if noise_sigma > 0.0 {
                    let n: f64 = StandardNormal.sample(rng);
                    n * noise_sigma
                } else {
                    0.0
                };
                (clean + noise).clamp(0.0, 1.0) as f32
            })
            .collect()
    }
}

/// A Gaussian-windowed grating with per-channel gain, values in `[-1, 1]`.
fn random_basis(shape: Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (shape.height as f64, shape.width as f64);
    let cy = rng.random_range(0.0..h);
    let cx = rng.random_range(0.0..w);
    let spread = rng.random_range(0.15..0.4) * h.min(w);
    let fy = rng.random_range(0.0..2.5);
    let fx = rng.random_range(0.0..2.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let gains: Vec<f64> = (0..shape.channels).map(|_| rng.random_range(0.5..1.0)).collect();
    let mut out = Vec::with_capacity(shape.len());
    for g in &gains {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let (yf, xf) = (y as f64, x as f64);
                let r2 = (yf - cy).powi(2) + (xf - cx).powi(2);
                let window = (-r2 / (2.0 * spread * spread)).exp();
                let wave = (std::f64::consts::TAU * (fy * yf / h + fx * xf / w) + phase).cos();
                out.push(g * window * wave);
            }
        }
    }
    out
}
