//! Procedural images used to build synthetic one-class datasets.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::buffer::ImageBuffer;
use crate::rng::Rng;

/// Parameters shared by every normal image of a synthetic category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeaveTexture {
    pub base: [f32; 3],
    /// Stripe periods in pixels for the two orthogonal weave directions.
    pub periods: (f32, f32),
    pub amplitudes: (f32, f32),
    /// Weave orientation in degrees; each image perturbs it slightly.
    pub angle_deg: f32,
    pub angle_jitter_deg: f32,
    pub noise_std: f32,
}

impl Default for WeaveTexture {
    fn default() -> Self {
        Self {
            base: [0.55, 0.48, 0.40],
            periods: (9.0, 6.0),
            amplitudes: (0.12, 0.08),
            angle_deg: 20.0,
            angle_jitter_deg: 4.0,
            noise_std: 0.03,
        }
    }
}

impl WeaveTexture {
    /// One normal sample: random phases, small orientation change, pixel
    /// noise and a faint illumination gradient.
    pub fn render(&self, size: usize, rng: &mut Rng) -> ImageBuffer {
        let tau = std::f32::consts::TAU;
        let phase1: f32 = rng.random_range(0.0..tau);
        let phase2: f32 = rng.random_range(0.0..tau);
        let angle = (self.angle_deg
            + rng.random_range(-self.angle_jitter_deg..=self.angle_jitter_deg))
        .to_radians();
        let (s, c) = angle.sin_cos();
        let grad_dir: f32 = rng.random_range(0.0..tau);
        let (gs, gc) = grad_dir.sin_cos();
        let grad_amp: f32 = rng.random_range(0.0..0.05);
        let tint: [f32; 3] = [
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
        ];
        let noise = Normal::new(0.0f32, self.noise_std.max(1e-9)).expect("valid std");
        let n = size as f32;
        let mut data = Vec::with_capacity(size * size * 3);
        for r in 0..size {
            for col in 0..size {
                let (y, x) = (r as f32, col as f32);
                let u = x * c + y * s;
                let v = -x * s + y * c;
                let w1 = (tau * u / self.periods.0 + phase1).sin();
                let w2 = (tau * v / self.periods.1 + phase2).sin();
                let light = grad_amp * ((x / n - 0.5) * gc + (y / n - 0.5) * gs);
                let shared = self.amplitudes.0 * w1 + self.amplitudes.1 * w2 + light;
                for ch in 0..3 {
                    let v = self.base[ch] + tint[ch] + shared + noise.sample(rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        ImageBuffer::from_raw_unchecked(size, size, 3, data)
    }
}

/// Colorful blob images standing in for a natural-image pool.
pub fn render_blobs(size: usize, rng: &mut Rng) -> ImageBuffer {
    let n = size as f32;
    let bg: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let blobs: Vec<([f32; 2], f32, [f32; 3])> = (0..6)
        .map(|_| {
            (
                [rng.random_range(0.0..n), rng.random_range(0.0..n)],
                rng.random_range(n / 12.0..n / 4.0),
                [rng.random(), rng.random(), rng.random()],
            )
        })
        .collect();
    ImageBuffer::from_fn(size, size, 3, |r, c, ch| {
        let mut v = bg[ch];
        for (centre, radius, color) in &blobs {
            let d2 = (r as f32 - centre[0]).powi(2) + (c as f32 - centre[1]).powi(2);
            let w = (-d2 / (2.0 * radius * radius)).exp();
            v = v * (1.0 - w) + color[ch] * w;
        }
        v
    })
}
