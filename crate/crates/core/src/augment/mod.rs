//! Patch augmentations: CutPaste, CutPaste-Scar, Cutout variants, Scar and
//! Confetti noise, plus training-time preprocessing and synthetic defects.
//!
//! Every `sample_*` function draws a [`PatchParams`] and hands it to
//! [`apply_patch_params`], so any output can be replayed bit-exactly from
//! its recorded parameters.

mod jitter;
pub mod synthetic;
pub mod texture;

pub use jitter::{
    apply_preprocess, preprocess_augment, sample_preprocess, JitterOp, JitterParams,
    PreprocessConfig, PreprocessParams, DEFAULT_JITTER, DEFAULT_MAX_TRANSLATION,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::buffer::{ImageBuffer, PixelMask};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Smallest image side any patch augmentation accepts.
pub const MIN_IMAGE_SIDE: usize = 16;
/// Scar placement shrinks the length by this factor when it cannot fit.
const SCAR_SHRINK: f32 = 0.9;

/// Sampling ranges for patch geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Open interval for the patch/image area ratio.
    pub area_ratio: (f32, f32),
    /// Open interval for width/height, sampled log-uniformly.
    pub aspect_ratio: (f32, f32),
    /// Maximum color-jitter intensity on pasted patches; 0 disables jitter.
    pub jitter: f32,
    /// Inclusive scar width range in pixels.
    pub scar_width: (usize, usize),
    /// Inclusive scar length range in pixels.
    pub scar_length: (usize, usize),
    /// Scar rotation is drawn from `(-scar_rotation, scar_rotation)` degrees.
    pub scar_rotation: f32,
    /// Confetti shift is drawn from `[-confetti_shift, confetti_shift]`.
    pub confetti_shift: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            area_ratio: (0.02, 0.15),
            aspect_ratio: (0.3, 3.3),
            jitter: DEFAULT_JITTER,
            scar_width: (2, 16),
            scar_length: (10, 25),
            scar_rotation: 45.0,
            confetti_shift: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    /// Rectangle sized by area and aspect ratio.
    Large,
    /// Long thin rotated rectangle.
    Scar,
}

/// What gets written into the destination region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Fill {
    SourcePatch,
    Grey,
    MeanPixel,
    RandomColor { rgb: [f32; 3] },
    Confetti { shift: [f32; 3] },
}

/// Cutout fill choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoutFill {
    Grey,
    MeanPixel,
    RandomColor,
}

/// Fully resolved parameters of one patch augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchParams {
    pub kind: PatchKind,
    /// Sampled area ratio (scar: realised `width * length / image area`).
    pub area_ratio: f32,
    /// Sampled width/height (scar: `width / length`).
    pub aspect_ratio: f32,
    /// Unrotated patch height (scar length) in pixels.
    pub height: usize,
    /// Unrotated patch width in pixels.
    pub width: usize,
    /// Top-left of the cut region; only for [`Fill::SourcePatch`].
    pub src_top_left: Option<(usize, usize)>,
    /// Top-left of the unrotated destination rectangle.
    pub dst_top_left: (usize, usize),
    /// Rotation about the destination centre, degrees.
    pub rotation_deg: f32,
    pub jitter: Option<JitterParams>,
    pub fill: Fill,
}

fn check_image(x: &ImageBuffer) -> Result<()> {
    if x.height() < MIN_IMAGE_SIDE || x.width() < MIN_IMAGE_SIDE {
        return Err(Error::Argument(format!(
            "image {}x{} is too small for patch augmentation (min {MIN_IMAGE_SIDE})",
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

fn open_uniform(lo: f32, hi: f32, rng: &mut Rng) -> f32 {
    loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

struct LargeGeometry {
    area_ratio: f32,
    aspect_ratio: f32,
    height: usize,
    width: usize,
}

fn sample_large_geometry(
    img_h: usize,
    img_w: usize,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<LargeGeometry> {
    let area = (img_h * img_w) as f32;
    let (log_lo, log_hi) = (cfg.aspect_ratio.0.ln(), cfg.aspect_ratio.1.ln());
    for _ in 0..1000 {
        let area_ratio = open_uniform(cfg.area_ratio.0, cfg.area_ratio.1, rng);
        let aspect_ratio = open_uniform(log_lo, log_hi, rng).exp();
        if aspect_ratio == 1.0 || aspect_ratio <= cfg.aspect_ratio.0 {
            continue;
        }
        let target = area_ratio * area;
        let height = (target / aspect_ratio).sqrt().round() as usize;
        let width = (target * aspect_ratio).sqrt().round() as usize;
        if (1..=img_h).contains(&height) && (1..=img_w).contains(&width) {
            return Ok(LargeGeometry {
                area_ratio,
                aspect_ratio,
                height,
                width,
            });
        }
    }
    Err(Error::Argument(format!(
        "no valid patch fits a {img_h}x{img_w} image"
    )))
}

fn sample_top_left(
    img_h: usize,
    img_w: usize,
    h: usize,
    w: usize,
    rng: &mut Rng,
) -> (usize, usize) {
    (
        rng.random_range(0..=img_h - h),
        rng.random_range(0..=img_w - w),
    )
}

/// Half extents of the bounding box of an `h x w` rectangle rotated by `deg`.
fn rotated_half_extents(h: usize, w: usize, deg: f32) -> (f32, f32) {
    let (s, c) = deg.to_radians().sin_cos();
    let (s, c) = (s.abs(), c.abs());
    let (h, w) = (h as f32, w as f32);
    ((h * c + w * s) / 2.0, (h * s + w * c) / 2.0)
}

/// Valid top-left range along one axis so the rotated rectangle stays inside
/// `[-0.5, side - 0.5]`.
fn placement_range(side: usize, len: usize, half_extent: f32) -> Option<(usize, usize)> {
    let lo = (half_extent - len as f32 / 2.0).ceil().max(0.0);
    let hi = (side as f32 - len as f32 / 2.0 - half_extent).floor();
    (hi >= lo).then_some((lo as usize, hi as usize))
}

fn rotated_fits(img_h: usize, img_w: usize, p: &PatchParams) -> bool {
    let (ey, ex) = rotated_half_extents(p.height, p.width, p.rotation_deg);
    let fits = |side: usize, len: usize, half: f32, origin: usize| {
        placement_range(side, len, half).is_some_and(|(lo, hi)| origin >= lo && origin <= hi)
    };
    fits(img_h, p.height, ey, p.dst_top_left.0) && fits(img_w, p.width, ex, p.dst_top_left.1)
}

struct ScarGeometry {
    width: usize,
    length: usize,
    rotation_deg: f32,
    dst: (usize, usize),
}

fn sample_scar_geometry(
    img_h: usize,
    img_w: usize,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<ScarGeometry> {
    let (width, mut length) = loop {
        let w = rng.random_range(cfg.scar_width.0..=cfg.scar_width.1);
        let l = rng.random_range(cfg.scar_length.0..=cfg.scar_length.1);
        if w <= l {
            break (w, l);
        }
    };
    let rotation_deg = open_uniform(-cfg.scar_rotation, cfg.scar_rotation, rng);
    loop {
        let (ey, ex) = rotated_half_extents(length, width, rotation_deg);
        if let (Some(rows), Some(cols)) = (
            placement_range(img_h, length, ey),
            placement_range(img_w, width, ex),
        ) {
            let dst = (
                rng.random_range(rows.0..=rows.1),
                rng.random_range(cols.0..=cols.1),
            );
            return Ok(ScarGeometry {
                width,
                length,
                rotation_deg,
                dst,
            });
        }
        let shrunk = ((length as f32) * SCAR_SHRINK).floor() as usize;
        if shrunk < width.max(1) || shrunk == length {
            return Err(Error::Argument(format!(
                "no scar placement fits a {img_h}x{img_w} image"
            )));
        }
        length = shrunk;
    }
}

fn maybe_jitter(cfg: &AugmentConfig, rng: &mut Rng) -> Option<JitterParams> {
    (cfg.jitter > 0.0).then(|| JitterParams::sample(cfg.jitter, rng))
}

fn large_params(
    x: &ImageBuffer,
    cfg: &AugmentConfig,
    fill_source: bool,
    rng: &mut Rng,
) -> Result<(LargeGeometry, Option<(usize, usize)>, (usize, usize))> {
    check_image(x)?;
    let g = sample_large_geometry(x.height(), x.width(), cfg, rng)?;
    let src = fill_source.then(|| sample_top_left(x.height(), x.width(), g.height, g.width, rng));
    let dst = sample_top_left(x.height(), x.width(), g.height, g.width, rng);
    Ok((g, src, dst))
}

/// CutPaste: cut a rectangle, jitter it, paste it at an independent location.
pub fn sample_cutpaste(
    x: &ImageBuffer,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(ImageBuffer, PatchParams)> {
    let (g, src, dst) = large_params(x, cfg, true, rng)?;
    let params = PatchParams {
        kind: PatchKind::Large,
        area_ratio: g.area_ratio,
        aspect_ratio: g.aspect_ratio,
        height: g.height,
        width: g.width,
        src_top_left: src,
        dst_top_left: dst,
        rotation_deg: 0.0,
        jitter: maybe_jitter(cfg, rng),
        fill: Fill::SourcePatch,
    };
    Ok((apply_patch_params(x, &params)?, params))
}

fn scar_params(
    x: &ImageBuffer,
    cfg: &AugmentConfig,
    from_source: bool,
    rng: &mut Rng,
) -> Result<PatchParams> {
    check_image(x)?;
    let g = sample_scar_geometry(x.height(), x.width(), cfg, rng)?;
    let (src, fill, jitter) = if from_source {
        let src = sample_top_left(x.height(), x.width(), g.length, g.width, rng);
        (Some(src), Fill::SourcePatch, maybe_jitter(cfg, rng))
    } else {
        let rgb = [rng.random(), rng.random(), rng.random()];
        (None, Fill::RandomColor { rgb }, None)
    };
    Ok(PatchParams {
        kind: PatchKind::Scar,
        area_ratio: (g.width * g.length) as f32 / (x.height() * x.width()) as f32,
        aspect_ratio: g.width as f32 / g.length as f32,
        height: g.length,
        width: g.width,
        src_top_left: src,
        dst_top_left: g.dst,
        rotation_deg: g.rotation_deg,
        jitter,
        fill,
    })
}

/// CutPaste-Scar: a thin rotated rectangle filled from another location.
pub fn sample_cutpaste_scar(
    x: &ImageBuffer,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(ImageBuffer, PatchParams)> {
    let params = scar_params(x, cfg, true, rng)?;
    Ok((apply_patch_params(x, &params)?, params))
}

/// Scar: a thin rotated rectangle of a random constant color.
pub fn sample_scar(
    x: &ImageBuffer,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(ImageBuffer, PatchParams)> {
    let params = scar_params(x, cfg, false, rng)?;
    Ok((apply_patch_params(x, &params)?, params))
}

/// Cutout with CutPaste geometry and a constant fill.
pub fn sample_cutout(
    x: &ImageBuffer,
    fill: CutoutFill,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(ImageBuffer, PatchParams)> {
    let (g, _, dst) = large_params(x, cfg, false, rng)?;
    let fill = match fill {
        CutoutFill::Grey => Fill::Grey,
        CutoutFill::MeanPixel => Fill::MeanPixel,
        CutoutFill::RandomColor => Fill::RandomColor {
            rgb: [rng.random(), rng.random(), rng.random()],
        },
    };
    let params = PatchParams {
        kind: PatchKind::Large,
        area_ratio: g.area_ratio,
        aspect_ratio: g.aspect_ratio,
        height: g.height,
        width: g.width,
        src_top_left: None,
        dst_top_left: dst,
        rotation_deg: 0.0,
        jitter: None,
        fill,
    };
    Ok((apply_patch_params(x, &params)?, params))
}

/// Confetti noise: the original pixels of a rectangle shifted per channel.
pub fn sample_confetti(
    x: &ImageBuffer,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(ImageBuffer, PatchParams)> {
    let (g, _, dst) = large_params(x, cfg, false, rng)?;
    let m = cfg.confetti_shift;
    let shift = [
        rng.random_range(-m..=m),
        rng.random_range(-m..=m),
        rng.random_range(-m..=m),
    ];
    let params = PatchParams {
        kind: PatchKind::Large,
        area_ratio: g.area_ratio,
        aspect_ratio: g.aspect_ratio,
        height: g.height,
        width: g.width,
        src_top_left: None,
        dst_top_left: dst,
        rotation_deg: 0.0,
        jitter: None,
        fill: Fill::Confetti { shift },
    };
    Ok((apply_patch_params(x, &params)?, params))
}

/// Deterministically re-applies a recorded augmentation.
pub fn apply_patch_params(x: &ImageBuffer, p: &PatchParams) -> Result<ImageBuffer> {
    apply_patch_params_with_mask(x, p).map(|(img, _)| img)
}

/// Like [`apply_patch_params`], also returning the pixels the patch touched.
pub fn apply_patch_params_with_mask(
    x: &ImageBuffer,
    p: &PatchParams,
) -> Result<(ImageBuffer, PixelMask)> {
    let (h, w) = (x.height(), x.width());
    if p.height == 0 || p.width == 0 {
        return Err(Error::Argument("patch has zero extent".into()));
    }
    if !rotated_fits(h, w, p) {
        return Err(Error::Argument(format!(
            "destination {}x{} at {:?} rotated {} deg leaves the {h}x{w} image",
            p.height, p.width, p.dst_top_left, p.rotation_deg
        )));
    }
    let patch = build_patch(x, p)?;
    let mut out = x.clone();
    let mut touched = PixelMask::empty(h, w);
    if p.rotation_deg == 0.0 {
        let (r0, c0) = p.dst_top_left;
        for r in 0..p.height {
            for c in 0..p.width {
                out.pixel_mut(r0 + r, c0 + c)
                    .copy_from_slice(patch.pixel(r, c));
                touched.set(r0 + r, c0 + c, true);
            }
        }
    } else {
        paste_rotated(&mut out, &mut touched, &patch, p);
    }
    Ok((out, touched))
}

fn build_patch(x: &ImageBuffer, p: &PatchParams) -> Result<ImageBuffer> {
    let ch = x.channels();
    let constant = |values: &[f32]| {
        ImageBuffer::from_fn(p.height, p.width, ch, |_, _, c| {
            values[c.min(values.len() - 1)]
        })
    };
    let mut patch = match &p.fill {
        Fill::SourcePatch => {
            let (r, c) = p.src_top_left.ok_or_else(|| {
                Error::Argument("source-patch fill needs a source location".into())
            })?;
            x.crop(r, c, p.height, p.width)?
        }
        Fill::Grey => constant(&[0.5]),
        Fill::MeanPixel => constant(&x.channel_means()),
        Fill::RandomColor { rgb } => constant(rgb),
        Fill::Confetti { shift } => {
            let (r, c) = p.dst_top_left;
            let mut region = x.crop(r, c, p.height, p.width)?;
            for px in region.data_mut().chunks_exact_mut(ch) {
                for (v, s) in px.iter_mut().zip(shift) {
                    *v = (*v + s).clamp(0.0, 1.0);
                }
            }
            region
        }
    };
    if let Some(j) = &p.jitter {
        j.apply(&mut patch);
    }
    Ok(patch)
}

/// Bilinear inverse-mapped paste with a coverage alpha.
///
/// For every destination pixel the source coordinate is found by rotating
/// back about the patch centre; alpha is the bilinear weight falling inside
/// the patch, so edges blend with the underlying image.
fn paste_rotated(
    out: &mut ImageBuffer,
    touched: &mut PixelMask,
    patch: &ImageBuffer,
    p: &PatchParams,
) {
    let (img_h, img_w, ch) = (out.height() as i64, out.width() as i64, out.channels());
    let (ph, pw) = (p.height as i64, p.width as i64);
    let half_h = (p.height as f32 - 1.0) / 2.0;
    let half_w = (p.width as f32 - 1.0) / 2.0;
    let cy = p.dst_top_left.0 as f32 + half_h;
    let cx = p.dst_top_left.1 as f32 + half_w;
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let (ey, ex) = rotated_half_extents(p.height, p.width, p.rotation_deg);
    let r_lo = ((cy - ey - 1.0).floor() as i64).max(0);
    let r_hi = ((cy + ey + 1.0).ceil() as i64).min(img_h - 1);
    let c_lo = ((cx - ex - 1.0).floor() as i64).max(0);
    let c_hi = ((cx + ex + 1.0).ceil() as i64).min(img_w - 1);
    let mut color = vec![0.0f32; ch];
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            let dy = r as f32 - cy;
            let dx = c as f32 - cx;
            let u = dy * cos + dx * sin + half_h;
            let v = -dy * sin + dx * cos + half_w;
            let (i0, j0) = (u.floor(), v.floor());
            let (fu, fv) = (u - i0, v - j0);
            let (i0, j0) = (i0 as i64, j0 as i64);
            let mut alpha = 0.0f32;
            color.iter_mut().for_each(|v| *v = 0.0);
            for (di, wi) in [(0, 1.0 - fu), (1, fu)] {
                for (dj, wj) in [(0, 1.0 - fv), (1, fv)] {
                    let (i, j) = (i0 + di, j0 + dj);
                    let wgt = wi * wj;
                    if wgt == 0.0 || i < 0 || j < 0 || i >= ph || j >= pw {
                        continue;
                    }
                    alpha += wgt;
                    for (acc, v) in color.iter_mut().zip(patch.pixel(i as usize, j as usize)) {
                        *acc += wgt * v;
                    }
                }
            }
            if alpha <= 0.0 {
                continue;
            }
            let px = out.pixel_mut(r as usize, c as usize);
            for (dst, acc) in px.iter_mut().zip(&color) {
                *dst = (acc + (1.0 - alpha) * *dst).clamp(0.0, 1.0);
            }
            touched.set(r as usize, c as usize, true);
        }
    }
}

/// Pixels fully covered by the (possibly rotated) destination rectangle.
pub fn full_coverage_mask(img_h: usize, img_w: usize, p: &PatchParams) -> PixelMask {
    let mut mask = PixelMask::empty(img_h, img_w);
    let half_h = (p.height as f32 - 1.0) / 2.0;
    let half_w = (p.width as f32 - 1.0) / 2.0;
    let cy = p.dst_top_left.0 as f32 + half_h;
    let cx = p.dst_top_left.1 as f32 + half_w;
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    for r in 0..img_h {
        for c in 0..img_w {
            let dy = r as f32 - cy;
            let dx = c as f32 - cx;
            let u = dy * cos + dx * sin + half_h;
            let v = -dy * sin + dx * cos + half_w;
            if u >= 0.0 && v >= 0.0 && u <= (p.height - 1) as f32 && v <= (p.width - 1) as f32 {
                mask.set(r, c, true);
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn textured(size: usize) -> ImageBuffer {
        ImageBuffer::from_fn(size, size, 3, |r, c, ch| {
            (((r * 13 + c * 7 + ch * 3) % 23) as f32 / 23.0 + 0.02).min(1.0)
        })
    }

    fn assert_outside_unchanged(x: &ImageBuffer, y: &ImageBuffer, mask: &PixelMask) {
        for r in 0..x.height() {
            for c in 0..x.width() {
                if !mask.get(r, c) {
                    assert_eq!(x.pixel(r, c), y.pixel(r, c), "({r}, {c})");
                }
            }
        }
    }

    #[test]
    fn paste_over_self_is_identity() {
        let x = textured(64);
        let mut rng = substream(0, "t");
        let cfg = AugmentConfig {
            jitter: 0.0,
            ..Default::default()
        };
        let (_, mut p) = sample_cutpaste(&x, &cfg, &mut rng).unwrap();
        assert!(p.jitter.is_none());
        p.dst_top_left = p.src_top_left.unwrap();
        assert_eq!(apply_patch_params(&x, &p).unwrap(), x);
    }

    #[test]
    fn replay_is_bit_exact() {
        let x = textured(64);
        let cfg = AugmentConfig::default();
        let mut rng = substream(5, "t");
        for _ in 0..20 {
            let (y, p) = sample_cutpaste(&x, &cfg, &mut rng).unwrap();
            assert_eq!(apply_patch_params(&x, &p).unwrap(), y);
            let (y, p) = sample_cutpaste_scar(&x, &cfg, &mut rng).unwrap();
            assert_eq!(apply_patch_params(&x, &p).unwrap(), y);
            let (y, p) = sample_scar(&x, &cfg, &mut rng).unwrap();
            assert_eq!(apply_patch_params(&x, &p).unwrap(), y);
            let (y, p) = sample_confetti(&x, &cfg, &mut rng).unwrap();
            assert_eq!(apply_patch_params(&x, &p).unwrap(), y);
            let (y, p) = sample_cutout(&x, CutoutFill::RandomColor, &cfg, &mut rng).unwrap();
            assert_eq!(apply_patch_params(&x, &p).unwrap(), y);
        }
    }

    #[test]
    fn outside_destination_is_untouched() {
        let x = textured(64);
        let cfg = AugmentConfig::default();
        let mut rng = substream(9, "t");
        for _ in 0..50 {
            for (_, p) in [
                sample_cutpaste(&x, &cfg, &mut rng).unwrap(),
                sample_cutpaste_scar(&x, &cfg, &mut rng).unwrap(),
                sample_confetti(&x, &cfg, &mut rng).unwrap(),
                sample_scar(&x, &cfg, &mut rng).unwrap(),
            ] {
                let (y, touched) = apply_patch_params_with_mask(&x, &p).unwrap();
                assert_outside_unchanged(&x, &y, &touched);
            }
        }
    }

    #[test]
    fn grey_cutout_on_grey_image_is_identity() {
        let x = ImageBuffer::filled(32, 32, 3, 0.5);
        let mut rng = substream(1, "t");
        let (y, _) =
            sample_cutout(&x, CutoutFill::Grey, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn mean_cutout_fills_channel_means() {
        let x = textured(48);
        let means = x.channel_means();
        let mut rng = substream(2, "t");
        let (y, p) = sample_cutout(
            &x,
            CutoutFill::MeanPixel,
            &AugmentConfig::default(),
            &mut rng,
        )
        .unwrap();
        let (r0, c0) = p.dst_top_left;
        for r in r0..r0 + p.height {
            for c in c0..c0 + p.width {
                for ch in 0..3 {
                    assert!((y.get(r, c, ch) - means[ch]).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn grey_params_match_cutout() {
        let x = textured(40);
        let mut rng = substream(3, "t");
        let (y, p) =
            sample_cutout(&x, CutoutFill::Grey, &AugmentConfig::default(), &mut rng).unwrap();
        let manual = PatchParams {
            fill: Fill::Grey,
            ..p.clone()
        };
        assert_eq!(apply_patch_params(&x, &manual).unwrap(), y);
    }

    #[test]
    fn out_of_bounds_destination_is_rejected() {
        let x = textured(32);
        let p = PatchParams {
            kind: PatchKind::Large,
            area_ratio: 0.1,
            aspect_ratio: 1.0,
            height: 10,
            width: 10,
            src_top_left: None,
            dst_top_left: (25, 0),
            rotation_deg: 0.0,
            jitter: None,
            fill: Fill::Grey,
        };
        assert!(matches!(
            apply_patch_params(&x, &p),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn confetti_zero_shift_is_identity() {
        let x = textured(32);
        let mut rng = substream(4, "t");
        let (_, mut p) = sample_confetti(&x, &AugmentConfig::default(), &mut rng).unwrap();
        p.fill = Fill::Confetti { shift: [0.0; 3] };
        assert_eq!(apply_patch_params(&x, &p).unwrap(), x);
    }

    #[test]
    fn confetti_shift_on_constant_image() {
        let x = ImageBuffer::filled(32, 32, 3, 0.4);
        let mut rng = substream(4, "t");
        let (_, mut p) = sample_confetti(&x, &AugmentConfig::default(), &mut rng).unwrap();
        p.fill = Fill::Confetti {
            shift: [0.3, 0.3, 0.3],
        };
        let y = apply_patch_params(&x, &p).unwrap();
        let expected = (0.4f32 + 0.3).clamp(0.0, 1.0);
        assert_eq!(y.get(p.dst_top_left.0, p.dst_top_left.1, 0), expected);
    }

    #[test]
    fn scar_without_rotation_matches_square_cutpaste() {
        let x = textured(64);
        let mut rng = substream(6, "t");
        let (_, mut p) = sample_cutpaste_scar(&x, &AugmentConfig::default(), &mut rng).unwrap();
        p.rotation_deg = 0.0;
        p.height = 8;
        p.width = 8;
        p.src_top_left = Some((3, 5));
        p.dst_top_left = (30, 40);
        let square = PatchParams {
            kind: PatchKind::Large,
            ..p.clone()
        };
        let scar = apply_patch_params(&x, &p).unwrap();
        assert_eq!(scar, apply_patch_params(&x, &square).unwrap());
        // Force the general rotated renderer through a tiny non-zero angle path:
        // at exactly zero the two paths must coincide pixel for pixel.
        let mut touched = PixelMask::empty(64, 64);
        let mut out = x.clone();
        let patch = build_patch(&x, &p).unwrap();
        paste_rotated(&mut out, &mut touched, &patch, &p);
        assert_eq!(out, scar);
        assert_eq!(touched.count(), 64);
    }

    #[test]
    fn scar_changes_enough_pixels() {
        let x = textured(64);
        let mut rng = substream(8, "t");
        for _ in 0..100 {
            let (y, p) = sample_cutpaste_scar(&x, &AugmentConfig::default(), &mut rng).unwrap();
            let changed = (0..64 * 64)
                .filter(|i| x.pixel(i / 64, i % 64) != y.pixel(i / 64, i % 64))
                .count();
            // the fixture has period 23 so a shifted copy rarely matches
            if p.src_top_left != Some(p.dst_top_left) {
                assert!(changed * 2 >= p.width * p.height, "{changed} vs {p:?}");
            }
        }
    }

    #[test]
    fn scar_pixels_are_constant_inside_full_coverage() {
        let x = textured(64);
        let mut rng = substream(10, "t");
        for _ in 0..100 {
            let (y, p) = sample_scar(&x, &AugmentConfig::default(), &mut rng).unwrap();
            let inner = full_coverage_mask(64, 64, &p);
            let mut first: Option<Vec<f32>> = None;
            for r in 0..64 {
                for c in 0..64 {
                    if inner.get(r, c) {
                        let px = y.pixel(r, c).to_vec();
                        match &first {
                            None => first = Some(px),
                            Some(f) => {
                                for (a, b) in f.iter().zip(&px) {
                                    assert!((a - b).abs() < 1e-5);
                                }
                            }
                        }
                    }
                }
            }
            assert!(first.is_some());
        }
    }

    #[test]
    fn too_small_image_is_rejected() {
        let x = ImageBuffer::filled(8, 8, 3, 0.2);
        let mut rng = substream(0, "t");
        assert!(sample_cutpaste(&x, &AugmentConfig::default(), &mut rng).is_err());
        assert!(sample_cutpaste_scar(&x, &AugmentConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn cutpaste_changes_textured_image() {
        let x = textured(64);
        let mut rng = substream(12, "t");
        for _ in 0..100 {
            let (y, p) = sample_cutpaste(&x, &AugmentConfig::default(), &mut rng).unwrap();
            let src = x
                .crop(
                    p.src_top_left.unwrap().0,
                    p.src_top_left.unwrap().1,
                    p.height,
                    p.width,
                )
                .unwrap();
            let dst = x
                .crop(p.dst_top_left.0, p.dst_top_left.1, p.height, p.width)
                .unwrap();
            if src != dst {
                assert_ne!(x, y);
            }
        }
    }
}
