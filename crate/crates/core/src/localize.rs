//! Dense patch scoring and pixel-level anomaly maps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::buffer::ImageBuffer;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Real;
use crate::score::GdeModel;

/// Number of patch positions along a side.
pub fn grid_len(side: usize, patch: usize, stride: usize) -> Result<usize> {
    if patch == 0 || stride == 0 || patch > side {
        return Err(Error::Argument(format!(
            "patch {patch} / stride {stride} invalid for side {side}"
        )));
    }
    if (side - patch) % stride != 0 {
        return Err(Error::Argument(format!(
            "(side {side} - patch {patch}) is not divisible by stride {stride}"
        )));
    }
    Ok((side - patch) / stride + 1)
}

/// Patch embeddings on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub patch_size: usize,
    pub stride: usize,
    /// Row-major cells, each `dim` long.
    pub data: Vec<f64>,
}

impl EmbeddingGrid {
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.cols + j) * self.dim;
        &self.data[k..k + self.dim]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }
}

/// Embeds every `patch_size` crop whose top-left lies on the stride grid.
pub fn dense_extract<F: Real>(
    model: &Model<F>,
    x: &ImageBuffer,
    patch_size: usize,
    stride: usize,
) -> Result<EmbeddingGrid> {
    let rows = grid_len(x.height(), patch_size, stride)?;
    let cols = grid_len(x.width(), patch_size, stride)?;
    let dim = model.embedding_dim();
    let mut data = Vec::with_capacity(rows * cols * dim);
    for i in 0..rows {
        let patches: Vec<ImageBuffer> = (0..cols)
            .map(|j| x.crop(i * stride, j * stride, patch_size, patch_size))
            .collect::<Result<_>>()?;
        let refs: Vec<&ImageBuffer> = patches.iter().collect();
        let emb = model.embed(&refs)?;
        data.extend(emb.data.iter().map(|v| v.as_f64()));
    }
    Ok(EmbeddingGrid {
        rows,
        cols,
        dim,
        patch_size,
        stride,
        data,
    })
}

/// Grid of patch anomaly scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn image_height(&self) -> usize {
        (self.rows - 1) * self.stride + self.patch_size
    }

    pub fn image_width(&self) -> usize {
        (self.cols - 1) * self.stride + self.patch_size
    }
}

/// Density model(s) used to score a grid.
#[derive(Debug, Clone, Copy)]
pub enum GridScorer<'a> {
    /// One model shared by all locations.
    Shared(&'a GdeModel),
    /// One model per location, indexed by flattened `(i, j)`.
    PerLocation(&'a [GdeModel]),
}

pub fn score_grid(grid: &EmbeddingGrid, scorer: GridScorer<'_>) -> Result<ScoreMap> {
    let values = match scorer {
        GridScorer::Shared(m) => grid
            .cells()
            .map(|e| m.score(e))
            .collect::<Result<Vec<_>>>()?,
        GridScorer::PerLocation(models) => {
            if models.len() != grid.rows * grid.cols {
                return Err(Error::Argument(format!(
                    "{} per-location models for a {}x{} grid",
                    models.len(),
                    grid.rows,
                    grid.cols
                )));
            }
            grid.cells()
                .zip(models)
                .map(|(e, m)| m.score(e))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(ScoreMap {
        rows: grid.rows,
        cols: grid.cols,
        patch_size: grid.patch_size,
        stride: grid.stride,
        values,
    })
}

/// Image-level score: maximum over the grid.
pub fn image_score_from_map(map: &ScoreMap) -> f64 {
    map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Per-pixel anomaly scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelScoreMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl PixelScoreMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    /// Row-major index of the largest value (first on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

/// 1-D Gaussian weights over a patch, centred on the patch centre.
fn kernel_1d(patch: usize, sigma: f64) -> Vec<f64> {
    let c = (patch as f64 - 1.0) / 2.0;
    (0..patch)
        .map(|u| (-(u as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Spreads each grid score over its patch with a Gaussian kernel, sums the
/// overlaps and divides by the accumulated kernel weight per pixel. Pixels
/// no patch covers get the grid minimum.
pub fn gaussian_upsample(map: &ScoreMap, sigma: f64) -> Result<PixelScoreMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if map.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("score map contains non-finite values".into()));
    }
    let (h, w) = (map.image_height(), map.image_width());
    let (p, s) = (map.patch_size, map.stride);
    let g = kernel_1d(p, sigma);
    let min = map.values.iter().copied().fold(f64::INFINITY, f64::min);

    // Separable sums: first along columns, then along rows.
    let mut tmp = vec![0.0; map.rows * w];
    let mut col_weight = vec![0.0; w];
    for j in 0..map.cols {
        for (u, &gu) in g.iter().enumerate() {
            col_weight[j * s + u] += gu;
        }
    }
    for i in 0..map.rows {
        let out = &mut tmp[i * w..(i + 1) * w];
        for j in 0..map.cols {
            let v = map.get(i, j) - min;
            for (u, &gu) in g.iter().enumerate() {
                out[j * s + u] += gu * v;
            }
        }
    }
    let mut num = vec![0.0; h * w];
    let mut row_weight = vec![0.0; h];
    for i in 0..map.rows {
        for (u, &gu) in g.iter().enumerate() {
            let y = i * s + u;
            row_weight[y] += gu;
            let src = &tmp[i * w..(i + 1) * w];
            for (n, t) in num[y * w..(y + 1) * w].iter_mut().zip(src) {
                *n += gu * t;
            }
        }
    }
    let values = num
        .iter()
        .enumerate()
        .map(|(k, n)| {
            let weight = row_weight[k / w] * col_weight[k % w];
            if weight > 0.0 {
                min + n / weight
            } else {
                min
            }
        })
        .collect();
    Ok(PixelScoreMap {
        height: h,
        width: w,
        values,
    })
}

/// Default kernel width for a patch size.
pub fn default_sigma(patch_size: usize) -> f64 {
    patch_size as f64 / 4.0
}

/// Dense extraction, scoring and upsampling in one call.
pub fn localize<F: Real>(
    model: &Model<F>,
    x: &ImageBuffer,
    scorer: GridScorer<'_>,
    patch_size: usize,
    stride: usize,
    sigma: f64,
) -> Result<(ScoreMap, PixelScoreMap)> {
    let grid = dense_extract(model, x, patch_size, stride)?;
    let map = score_grid(&grid, scorer)?;
    let pixels = gaussian_upsample(&map, sigma)?;
    Ok((map, pixels))
}

/// Jet colormap for `t` in `[0, 1]`.
pub fn jet(t: f64) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |offset: f64| (1.5 - (4.0 * t - offset).abs()).clamp(0.0, 1.0) as f32;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Min-max normalized jet overlay at 50% alpha over `original`.
pub fn heatmap_overlay(map: &PixelScoreMap, original: &ImageBuffer) -> Result<ImageBuffer> {
    if (map.height, map.width) != (original.height(), original.width()) {
        return Err(Error::Argument(format!(
            "map is {}x{} but image is {}x{}",
            map.height,
            map.width,
            original.height(),
            original.width()
        )));
    }
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let rgb = original.to_rgb();
    Ok(ImageBuffer::from_fn(
        map.height,
        map.width,
        3,
        |r, c, ch| {
            let t = if span > 0.0 {
                (map.get(r, c) - lo) / span
            } else {
                0.0
            };
            0.5 * rgb.get(r, c, ch) + 0.5 * jet(t)[ch]
        },
    ))
}

/// Writes the overlay PNG and the raw map file.
pub fn emit_heatmap(
    map: &PixelScoreMap,
    original: &ImageBuffer,
    png_path: &Path,
    raw_path: &Path,
) -> Result<()> {
    heatmap_overlay(map, original)?.save_png(png_path)?;
    write_pixel_map(raw_path, map)
}

/// Magic prefix of raw pixel-map files.
pub const PIXEL_MAP_MAGIC: &[u8; 8] = b"CPPXMAP1";

/// Magic, `u32` height, `u32` width, row-major little-endian `f32` values.
pub fn write_pixel_map(path: &Path, map: &PixelScoreMap) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(PIXEL_MAP_MAGIC).map_err(io)?;
    w.write_all(&(map.height as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&(map.width as u32).to_le_bytes()).map_err(io)?;
    for &v in &map.values {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_pixel_map(path: &Path) -> Result<PixelScoreMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: &str| Error::Data(format!("{}: {reason}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated file"))?;
    if &magic != PIXEL_MAP_MAGIC {
        return Err(bad("not a pixel map file"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|_| bad("truncated header"))?;
    let height = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)
        .map_err(|_| bad("truncated header"))?;
    let width = u32::from_le_bytes(word) as usize;
    let mut bytes = vec![0u8; height * width * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| bad("truncated values"))?;
    let values = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Ok(PixelScoreMap {
        height,
        width,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::texture::WeaveTexture;
    use crate::model::BackboneConfig;
    use crate::rng::substream;
    use crate::score::fit_gde;
    use rand::Rng as _;

    fn map(rows: usize, patch: usize, stride: usize, values: Vec<f64>) -> ScoreMap {
        ScoreMap {
            rows,
            cols: rows,
            patch_size: patch,
            stride,
            values,
        }
    }

    /// Direct per-pixel summation over every covering patch.
    fn naive_upsample(m: &ScoreMap, sigma: f64) -> Vec<f64> {
        let (h, w) = (m.image_height(), m.image_width());
        let c = (m.patch_size as f64 - 1.0) / 2.0;
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..m.rows {
                    for j in 0..m.cols {
                        let (top, left) = (i * m.stride, j * m.stride);
                        if y < top
                            || x < left
                            || y >= top + m.patch_size
                            || x >= left + m.patch_size
                        {
                            continue;
                        }
                        let dy = (y - top) as f64 - c;
                        let dx = (x - left) as f64 - c;
                        let g = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                        num += g * m.get(i, j);
                        den += g;
                    }
                }
                out[y * w + x] = num / den;
            }
        }
        out
    }

    #[test]
    fn grid_geometry() {
        assert_eq!(grid_len(256, 32, 4).unwrap(), 57);
        assert_eq!(grid_len(64, 32, 32).unwrap(), 2);
        assert_eq!(grid_len(64, 64, 4).unwrap(), 1);
        assert!(grid_len(64, 32, 5).is_err());
        assert!(grid_len(16, 32, 4).is_err());
    }

    #[test]
    fn upsample_matches_naive_sum() {
        let mut rng = substream(0, "upsample");
        let values: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = map(8, 8, 2, values);
        let fast = gaussian_upsample(&m, 2.0).unwrap();
        let slow = naive_upsample(&m, 2.0);
        for (a, b) in fast.values.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_grid_gives_constant_map() {
        let m = map(5, 8, 3, vec![2.7; 25]);
        let up = gaussian_upsample(&m, 1.7).unwrap();
        assert!(up.values.iter().all(|&v| v == 2.7));
    }

    #[test]
    fn upsampled_extrema_stay_within_grid_extrema() {
        let mut rng = substream(1, "upsample");
        let values: Vec<f64> = (0..49).map(|_| rng.random_range(0.0..10.0)).collect();
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let up = gaussian_upsample(&map(7, 6, 2, values), 1.5).unwrap();
        assert!(up
            .values
            .iter()
            .all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        assert!(gaussian_upsample(&map(1, 4, 1, vec![0.0]), 0.0).is_err());
    }

    #[test]
    fn single_cell_is_a_gaussian_bump() {
        let mut values = vec![0.0; 9];
        values[4] = 1.0;
        let up = gaussian_upsample(&map(3, 8, 8, values), 2.0).unwrap();
        for y in 0..24 {
            for x in 0..24 {
                let inside = (8..16).contains(&y) && (8..16).contains(&x);
                let want = if inside { 1.0 } else { 0.0 };
                assert!((up.get(y, x) - want).abs() < 1e-12);
            }
        }
        // overlapping stride: the response peaks at the cell's patch centre
        let mut values = vec![0.0; 25];
        values[12] = 1.0;
        let up = gaussian_upsample(&map(5, 8, 2, values), 2.0).unwrap();
        let (r, c) = up.argmax();
        assert!((7..=8).contains(&r) && (7..=8).contains(&c), "{r},{c}");
    }

    #[test]
    fn image_score_is_grid_max() {
        assert_eq!(image_score_from_map(&map(2, 4, 4, vec![0.0; 4])), 0.0);
        assert_eq!(
            image_score_from_map(&map(2, 4, 4, vec![0.0, 7.5, 1.0, 2.0])),
            7.5
        );
    }

    #[test]
    fn dense_matches_per_patch_and_corners() {
        let model = Model::<f32>::build(BackboneConfig::tiny_cnn(32, 16), 2, 0).unwrap();
        let img = WeaveTexture::default().render(64, &mut substream(2, "img"));
        let grid = dense_extract(&model, &img, 32, 32).unwrap();
        assert_eq!((grid.rows, grid.cols), (2, 2));
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let patch = img.crop(i * 32, j * 32, 32, 32).unwrap();
            let single = model.embed_rows(&[&patch]).unwrap();
            for (a, b) in grid.cell(i, j).iter().zip(&single[0]) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        let whole = dense_extract(&model, &img, 64, 4).unwrap();
        assert_eq!((whole.rows, whole.cols), (1, 1));
        assert_eq!(
            whole.cell(0, 0),
            model.embed_rows(&[&img]).unwrap()[0].as_slice()
        );
        assert!(dense_extract(&model, &img, 32, 5).is_err());
    }

    #[test]
    fn grid_scoring_modes() {
        let mut rng = substream(3, "grid");
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let gde = fit_gde(&rows).unwrap();
        let grid = EmbeddingGrid {
            rows: 2,
            cols: 2,
            dim: 3,
            patch_size: 4,
            stride: 2,
            data: rows[..4].concat(),
        };
        let m = score_grid(&grid, GridScorer::Shared(&gde)).unwrap();
        for (k, v) in m.values.iter().enumerate() {
            assert_eq!(*v, gde.score(&rows[k]).unwrap());
        }
        let at_mean = EmbeddingGrid {
            data: gde.mean.repeat(4),
            ..grid.clone()
        };
        assert!(score_grid(&at_mean, GridScorer::Shared(&gde))
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));
        let models = vec![gde.clone(); 3];
        assert!(matches!(
            score_grid(&grid, GridScorer::PerLocation(&models)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn heatmap_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = WeaveTexture::default().render(24, &mut substream(4, "img"));
        let constant = PixelScoreMap {
            height: 24,
            width: 24,
            values: vec![1.5; 576],
        };
        let overlay = heatmap_overlay(&constant, &ImageBuffer::filled(24, 24, 3, 0.2)).unwrap();
        assert!(overlay
            .data()
            .chunks_exact(3)
            .all(|p| p == overlay.pixel(0, 0)));

        let mut rng = substream(5, "map");
        let map = PixelScoreMap {
            height: 24,
            width: 24,
            values: (0..576).map(|_| f64::from(rng.random::<f32>())).collect(),
        };
        let (png, raw) = (dir.path().join("h.png"), dir.path().join("h.map"));
        emit_heatmap(&map, &img, &png, &raw).unwrap();
        assert_eq!(read_pixel_map(&raw).unwrap(), map);
        let decoded = image::open(&png).unwrap();
        assert_eq!((decoded.width(), decoded.height()), (24, 24));
    }
}
