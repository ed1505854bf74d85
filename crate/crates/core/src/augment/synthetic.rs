//! Synthetic defects: shape masks pasted onto normal images, filled with a
//! random color or with pixels from a pool of other images.

use std::sync::OnceLock;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::buffer::{ImageBuffer, PixelMask};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefectShape {
    Digit { value: u8 },
    Square,
    Ellipse,
    Heart,
}

impl DefectShape {
    pub fn name(&self) -> String {
        match self {
            DefectShape::Digit { value } => format!("digit{value}"),
            DefectShape::Square => "square".into(),
            DefectShape::Ellipse => "ellipse".into(),
            DefectShape::Heart => "heart".into(),
        }
    }
}

impl std::str::FromStr for DefectShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(DefectShape::Square),
            "ellipse" => Ok(DefectShape::Ellipse),
            "heart" => Ok(DefectShape::Heart),
            other => other
                .strip_prefix("digit")
                .and_then(|d| d.parse::<u8>().ok())
                .filter(|d| *d <= 9)
                .map(|value| DefectShape::Digit { value })
                .ok_or_else(|| Error::Config(format!("unknown defect shape {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectFill {
    RandomColor,
    NaturalImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDefectSpec {
    pub shape: DefectShape,
    pub fill: DefectFill,
    /// Target mask area as a fraction of the image area.
    pub scale: f32,
    /// Centre `(row, col)` in pixels.
    pub location: (f32, f32),
    /// Width/height ratio for ellipses; ignored by other shapes.
    pub aspect: f32,
}

// 5x7 glyphs, one string per row.
const DIGITS: [[&str; 7]; 10] = [
    [
        ".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###.",
    ],
    [
        "..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###.",
    ],
    [
        ".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####",
    ],
    [
        ".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###.",
    ],
    [
        "...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#.",
    ],
    [
        "#####", "#....", "####.", "....#", "....#", "#...#", ".###.",
    ],
    [
        "..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###.",
    ],
    [
        "#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#...",
    ],
    [
        ".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###.",
    ],
    [
        ".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##..",
    ],
];
const GLYPH_H: usize = 7;
const GLYPH_W: usize = 5;

/// Grey-level digit glyph bilinearly scaled to `height x width`, row-major.
pub fn digit_bitmap(digit: u8, height: usize, width: usize) -> Result<Vec<f32>> {
    let glyph = DIGITS
        .get(digit as usize)
        .ok_or_else(|| Error::Argument(format!("no glyph for digit {digit}")))?;
    let at = |r: i64, c: i64| -> f32 {
        let r = r.clamp(0, GLYPH_H as i64 - 1) as usize;
        let c = c.clamp(0, GLYPH_W as i64 - 1) as usize;
        if glyph[r].as_bytes()[c] == b'#' {
            1.0
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let gy = (r as f32 + 0.5) * GLYPH_H as f32 / height as f32 - 0.5;
        let y0 = gy.floor();
        let fy = gy - y0;
        for c in 0..width {
            let gx = (c as f32 + 0.5) * GLYPH_W as f32 / width as f32 - 0.5;
            let x0 = gx.floor();
            let fx = gx - x0;
            let (y0, x0) = (y0 as i64, x0 as i64);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            out.push(v);
        }
    }
    Ok(out)
}

fn heart_inside(x: f64, y: f64) -> bool {
    let a = x * x + y * y - 1.0;
    a * a * a - x * x * y * y * y <= 0.0
}

struct HeartStats {
    area: f64,
    half_w: f64,
    top: f64,
    bottom: f64,
}

/// Area and extents of `{(x^2 + y^2 - 1)^3 - x^2 y^3 <= 0}` by midpoint
/// quadrature; extents are padded by one grid step.
fn unit_heart() -> &'static HeartStats {
    static STATS: OnceLock<HeartStats> = OnceLock::new();
    STATS.get_or_init(|| {
        let n = 2000;
        let (lo, hi) = (-1.5f64, 1.5f64);
        let step = (hi - lo) / n as f64;
        let mut count = 0usize;
        let (mut half_w, mut top, mut bottom) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..n {
            let y = lo + (i as f64 + 0.5) * step;
            for j in 0..n {
                let x = lo + (j as f64 + 0.5) * step;
                if heart_inside(x, y) {
                    count += 1;
                    half_w = half_w.max(x.abs());
                    top = top.max(y);
                    bottom = bottom.max(-y);
                }
            }
        }
        HeartStats {
            area: count as f64 * step * step,
            half_w: half_w + step,
            top: top + step,
            bottom: bottom + step,
        }
    })
}

/// Half extents `(up, down, left, right)` of the shape around its centre.
fn extents(spec: &SyntheticDefectSpec, img_area: f64) -> (f64, f64, f64, f64) {
    let target = spec.scale as f64 * img_area;
    match spec.shape {
        DefectShape::Square => {
            let side = target.sqrt().round().max(1.0);
            (side / 2.0, side / 2.0, side / 2.0, side / 2.0)
        }
        DefectShape::Ellipse => {
            let a = (target / (std::f64::consts::PI * spec.aspect as f64)).sqrt();
            let b = a * spec.aspect as f64;
            (a, a, b, b)
        }
        DefectShape::Heart => {
            let h = unit_heart();
            let k = (target / h.area).sqrt();
            (k * h.top, k * h.bottom, k * h.half_w, k * h.half_w)
        }
        DefectShape::Digit { .. } => {
            let (h, w) = digit_box(target);
            (
                h as f64 / 2.0,
                h as f64 / 2.0,
                w as f64 / 2.0,
                w as f64 / 2.0,
            )
        }
    }
}

fn digit_box(target: f64) -> (usize, usize) {
    let h = (target * GLYPH_H as f64 / GLYPH_W as f64)
        .sqrt()
        .round()
        .max(1.0);
    let w = (h * GLYPH_W as f64 / GLYPH_H as f64).round().max(1.0);
    (h as usize, w as usize)
}

/// Rasterizes the shape described by `spec` on an `height x width` grid.
pub fn shape_mask(spec: &SyntheticDefectSpec, height: usize, width: usize) -> Result<PixelMask> {
    if !(spec.scale > 0.0 && spec.scale < 1.0) || !(spec.aspect > 0.0) {
        return Err(Error::Argument(format!(
            "defect scale {} / aspect {} out of range",
            spec.scale, spec.aspect
        )));
    }
    let area = (height * width) as f64;
    let (up, down, left, right) = extents(spec, area);
    let (cy, cx) = (spec.location.0 as f64, spec.location.1 as f64);
    if cy - up < -0.5
        || cy + down > height as f64 - 0.5
        || cx - left < -0.5
        || cx + right > width as f64 - 0.5
    {
        return Err(Error::Argument(format!(
            "{} defect at {:?} does not fit a {height}x{width} image",
            spec.shape.name(),
            spec.location
        )));
    }
    let mut mask = PixelMask::empty(height, width);
    match spec.shape {
        DefectShape::Square => {
            let side = (up * 2.0) as usize;
            let top = (cy - up + 0.5).round() as usize;
            let lft = (cx - left + 0.5).round() as usize;
            for r in top..(top + side).min(height) {
                for c in lft..(lft + side).min(width) {
                    mask.set(r, c, true);
                }
            }
        }
        DefectShape::Ellipse => {
            for r in 0..height {
                for c in 0..width {
                    let dy = (r as f64 - cy) / up;
                    let dx = (c as f64 - cx) / left;
                    if dy * dy + dx * dx <= 1.0 {
                        mask.set(r, c, true);
                    }
                }
            }
        }
        DefectShape::Heart => {
            let k = left / unit_heart().half_w;
            for r in 0..height {
                for c in 0..width {
                    if heart_inside((c as f64 - cx) / k, (cy - r as f64) / k) {
                        mask.set(r, c, true);
                    }
                }
            }
        }
        DefectShape::Digit { value } => {
            let (bh, bw) = ((up * 2.0) as usize, (left * 2.0) as usize);
            let bitmap = digit_bitmap(value, bh, bw)?;
            let top = (cy - up + 0.5).round() as usize;
            let lft = (cx - left + 0.5).round() as usize;
            for r in 0..bh {
                for c in 0..bw {
                    if bitmap[r * bw + c] >= 0.5 && top + r < height && lft + c < width {
                        mask.set(top + r, lft + c, true);
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Bounding box `(top, left, height, width)` of the set pixels.
fn bbox(mask: &PixelMask) -> Option<(usize, usize, usize, usize)> {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    (r0 != usize::MAX).then(|| (r0, c0, r1 - r0 + 1, c1 - c0 + 1))
}

/// Pastes the shape onto `x` and returns the image with its defect mask.
pub fn make_synthetic_defect(
    x: &ImageBuffer,
    spec: &SyntheticDefectSpec,
    pool: &[ImageBuffer],
    rng: &mut Rng,
) -> Result<(ImageBuffer, PixelMask)> {
    if spec.fill == DefectFill::NaturalImage && pool.is_empty() {
        return Err(Error::Config(
            "natural-image fill requested but the image pool is empty".into(),
        ));
    }
    let mask = shape_mask(spec, x.height(), x.width())?;
    let Some((top, left, bh, bw)) = bbox(&mask) else {
        return Err(Error::Argument("defect mask is empty".into()));
    };
    let ch = x.channels();
    let mut out = x.clone();
    match spec.fill {
        DefectFill::RandomColor => {
            let rgb: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            for r in top..top + bh {
                for c in left..left + bw {
                    if mask.get(r, c) {
                        for (k, v) in out.pixel_mut(r, c).iter_mut().enumerate() {
                            *v = rgb[k.min(2)];
                        }
                    }
                }
            }
        }
        DefectFill::NaturalImage => {
            let source = &pool[rng.random_range(0..pool.len())];
            if source.height() < bh || source.width() < bw {
                return Err(Error::Config(format!(
                    "pool image {}x{} smaller than the {bh}x{bw} defect",
                    source.height(),
                    source.width()
                )));
            }
            let sr = rng.random_range(0..=source.height() - bh);
            let sc = rng.random_range(0..=source.width() - bw);
            let source = source.to_rgb();
            for r in 0..bh {
                for c in 0..bw {
                    if mask.get(top + r, left + c) {
                        let px = source.pixel(sr + r, sc + c);
                        let dst = out.pixel_mut(top + r, left + c);
                        if ch == 3 {
                            dst.copy_from_slice(px);
                        } else {
                            dst[0] = (px[0] + px[1] + px[2]) / 3.0;
                        }
                    }
                }
            }
        }
    }
    Ok((out, mask))
}

/// Draws a spec of the given shape whose mask fits inside the image.
pub fn sample_defect_spec(
    shape: DefectShape,
    fill: DefectFill,
    scale_range: (f32, f32),
    height: usize,
    width: usize,
    rng: &mut Rng,
) -> Result<SyntheticDefectSpec> {
    let scale = rng.random_range(scale_range.0..=scale_range.1);
    let aspect = match shape {
        DefectShape::Ellipse => rng.random_range(0.5f32..=2.0),
        _ => 1.0,
    };
    let probe = SyntheticDefectSpec {
        shape,
        fill,
        scale,
        location: (0.0, 0.0),
        aspect,
    };
    let (up, down, left, right) = extents(&probe, (height * width) as f64);
    let (r_lo, r_hi) = (up - 0.5, height as f64 - 0.5 - down);
    let (c_lo, c_hi) = (left - 0.5, width as f64 - 0.5 - right);
    if r_lo > r_hi || c_lo > c_hi {
        return Err(Error::Argument(format!(
            "{} of scale {scale} cannot fit a {height}x{width} image",
            shape.name()
        )));
    }
    let location = (
        rng.random_range(r_lo..=r_hi)
            .round()
            .clamp(r_lo.ceil(), r_hi.floor()) as f32,
        rng.random_range(c_lo..=c_hi)
            .round()
            .clamp(c_lo.ceil(), c_hi.floor()) as f32,
    );
    Ok(SyntheticDefectSpec { location, ..probe })
}
