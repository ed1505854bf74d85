use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::buffer::ImageBuffer;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_JITTER: f32 = 0.1;
pub const DEFAULT_MAX_TRANSLATION: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// Color jitter in the torchvision style: brightness, contrast and
/// saturation scale by `1 + delta`, hue rotates by `delta` turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub order: [JitterOp; 4],
}

impl Default for JitterParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl JitterParams {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            order: [
                JitterOp::Brightness,
                JitterOp::Contrast,
                JitterOp::Saturation,
                JitterOp::Hue,
            ],
        }
    }

    /// Deltas uniform in `[-max, max]`, operations in random order.
    pub fn sample(max: f32, rng: &mut Rng) -> Self {
        let draw = |rng: &mut Rng| {
            if max > 0.0 {
                rng.random_range(-max..=max)
            } else {
                0.0
            }
        };
        let brightness = draw(rng);
        let contrast = draw(rng);
        let saturation = draw(rng);
        let hue = draw(rng);
        let mut order = Self::identity().order;
        order.shuffle(rng);
        Self {
            brightness,
            contrast,
            saturation,
            hue,
            order,
        }
    }

    pub fn max_abs_delta(&self) -> f32 {
        [self.brightness, self.contrast, self.saturation, self.hue]
            .into_iter()
            .map(f32::abs)
            .fold(0.0, f32::max)
    }

    pub fn apply(&self, img: &mut ImageBuffer) {
        for op in self.order {
            match op {
                JitterOp::Brightness => adjust_brightness(img, 1.0 + self.brightness),
                JitterOp::Contrast => adjust_contrast(img, 1.0 + self.contrast),
                JitterOp::Saturation => adjust_saturation(img, 1.0 + self.saturation),
                JitterOp::Hue => adjust_hue(img, self.hue),
            }
        }
    }
}

fn luma(px: &[f32]) -> f32 {
    if px.len() == 3 {
        0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
    } else {
        px[0]
    }
}

fn adjust_brightness(img: &mut ImageBuffer, factor: f32) {
    if factor == 1.0 {
        return;
    }
    for v in img.data_mut() {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
}

fn adjust_contrast(img: &mut ImageBuffer, factor: f32) {
    if factor == 1.0 {
        return;
    }
    let ch = img.channels();
    let n = (img.height() * img.width()) as f32;
    let mean = img.data().chunks_exact(ch).map(luma).sum::<f32>() / n;
    for v in img.data_mut() {
        *v = (factor * *v + (1.0 - factor) * mean).clamp(0.0, 1.0);
    }
}

fn adjust_saturation(img: &mut ImageBuffer, factor: f32) {
    if factor == 1.0 || img.channels() != 3 {
        return;
    }
    for px in img.data_mut().chunks_exact_mut(3) {
        let grey = luma(px);
        for v in px.iter_mut() {
            *v = (factor * *v + (1.0 - factor) * grey).clamp(0.0, 1.0);
        }
    }
}

fn adjust_hue(img: &mut ImageBuffer, shift: f32) {
    if shift == 0.0 || img.channels() != 3 {
        return;
    }
    for px in img.data_mut().chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        px[0] = r.clamp(0.0, 1.0);
        px[1] = g.clamp(0.0, 1.0);
        px[2] = b.clamp(0.0, 1.0);
    }
}

/// Hue in turns `[0, 1)`.
pub(crate) fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((h / 6.0).rem_euclid(1.0), s, max)
}

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Random translation followed by color jitter, applied to every training
/// image before it enters the classifier or CutPaste.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    /// `(rows, cols)` shift; content moves down/right for positive values.
    pub shift: (i32, i32),
    pub jitter: JitterParams,
}

impl PreprocessParams {
    pub fn identity() -> Self {
        Self {
            shift: (0, 0),
            jitter: JitterParams::identity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Maximum shift as a fraction of the image side.
    pub max_translation: f32,
    pub jitter: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_translation: DEFAULT_MAX_TRANSLATION,
            jitter: DEFAULT_JITTER,
        }
    }
}

pub fn sample_preprocess(
    height: usize,
    width: usize,
    cfg: &PreprocessConfig,
    rng: &mut Rng,
) -> PreprocessParams {
    let max_r = (cfg.max_translation * height as f32).floor() as i32;
    let max_c = (cfg.max_translation * width as f32).floor() as i32;
    let dr = rng.random_range(-max_r..=max_r);
    let dc = rng.random_range(-max_c..=max_c);
    PreprocessParams {
        shift: (dr, dc),
        jitter: JitterParams::sample(cfg.jitter, rng),
    }
}

pub fn apply_preprocess(x: &ImageBuffer, p: &PreprocessParams) -> Result<ImageBuffer> {
    let (h, w) = (x.height() as i32, x.width() as i32);
    if p.shift.0.abs() >= h || p.shift.1.abs() >= w {
        return Err(Error::Argument(format!(
            "shift {:?} too large for {h}x{w} image",
            p.shift
        )));
    }
    let mut out = if p.shift == (0, 0) {
        x.clone()
    } else {
        let ch = x.channels();
        let mut data = Vec::with_capacity(x.data().len());
        for r in 0..h {
            let sr = (r - p.shift.0).clamp(0, h - 1) as usize;
            for c in 0..w {
                let sc = (c - p.shift.1).clamp(0, w - 1) as usize;
                data.extend_from_slice(x.pixel(sr, sc));
            }
        }
        ImageBuffer::from_raw_unchecked(x.height(), x.width(), ch, data)
    };
    p.jitter.apply(&mut out);
    Ok(out)
}

/// Translation (edge replicated) then color jitter with random order.
pub fn preprocess_augment(x: &ImageBuffer, cfg: &PreprocessConfig, rng: &mut Rng) -> ImageBuffer {
    let params = sample_preprocess(x.height(), x.width(), cfg, rng);
    apply_preprocess(x, &params).expect("sampled shift fits the image")
}
