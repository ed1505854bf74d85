//! MVTec-style dataset ingestion.
//!
//! Expected layout:
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/<defect_type>/*.png
//! <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::buffer::{ImageBuffer, PixelMask};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_WORKING_SIZE: usize = 256;
pub const NORMAL_DEFECT_TYPE: &str = "good";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub image_path: PathBuf,
    pub split: Split,
    pub defect_type: String,
    /// `None` for normal images and for defective images whose mask is absent.
    pub mask_path: Option<PathBuf>,
}

impl LayoutEntry {
    pub fn is_anomalous(&self) -> bool {
        self.defect_type != NORMAL_DEFECT_TYPE
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub category: String,
    pub entries: Vec<LayoutEntry>,
}

impl DatasetLayout {
    pub fn train(&self) -> impl Iterator<Item = &LayoutEntry> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &LayoutEntry> {
        self.entries.iter().filter(|e| e.split == Split::Test)
    }

    /// Defective test images recorded without a ground-truth mask.
    pub fn missing_masks(&self) -> impl Iterator<Item = &LayoutEntry> {
        self.test()
            .filter(|e| e.is_anomalous() && e.mask_path.is_none())
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn layout_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Layout {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Lists every image of a category with its split, defect type and mask.
///
/// Ordering is lexicographic by defect type, then file name.
pub fn scan_layout(root: &Path, category: &str) -> Result<DatasetLayout> {
    let base = root.join(category);
    let train_dir = base.join("train");
    let test_dir = base.join("test");
    for dir in [&train_dir, &test_dir] {
        if !dir.is_dir() {
            return Err(layout_error(dir, "missing directory"));
        }
    }

    let mut entries = Vec::new();
    for defect_dir in sorted_dir(&train_dir)?.into_iter().filter(|p| p.is_dir()) {
        let defect_type = dir_name(&defect_dir);
        if defect_type != NORMAL_DEFECT_TYPE {
            return Err(layout_error(
                &defect_dir,
                "train split may only contain normal images",
            ));
        }
        for image_path in sorted_dir(&defect_dir)?
            .into_iter()
            .filter(|p| is_image_file(p))
        {
            entries.push(LayoutEntry {
                image_path,
                split: Split::Train,
                defect_type: defect_type.clone(),
                mask_path: None,
            });
        }
    }
    if entries.is_empty() {
        return Err(layout_error(&train_dir, "no training images"));
    }

    let gt_dir = base.join("ground_truth");
    for defect_dir in sorted_dir(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
        let defect_type = dir_name(&defect_dir);
        for image_path in sorted_dir(&defect_dir)?
            .into_iter()
            .filter(|p| is_image_file(p))
        {
            let mask_path = if defect_type == NORMAL_DEFECT_TYPE {
                None
            } else {
                let stem = image_path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default();
                let candidate = gt_dir.join(&defect_type).join(format!("{stem}_mask.png"));
                candidate.is_file().then_some(candidate)
            };
            if let Some(mask) = &mask_path {
                check_same_dimensions(&image_path, mask)?;
            }
            entries.push(LayoutEntry {
                image_path,
                split: Split::Test,
                defect_type: defect_type.clone(),
                mask_path,
            });
        }
    }

    Ok(DatasetLayout {
        root: root.to_path_buf(),
        category: category.to_string(),
        entries,
    })
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string()
}

fn dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn check_same_dimensions(image: &Path, mask: &Path) -> Result<()> {
    let a = dimensions(image)?;
    let b = dimensions(mask)?;
    if a != b {
        return Err(Error::Integrity(format!(
            "{} is {}x{} but its mask {} is {}x{}",
            image.display(),
            a.0,
            a.1,
            mask.display(),
            b.0,
            b.1
        )));
    }
    Ok(())
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Decodes a PNG/JPEG and resizes it to `target_size x target_size` RGB.
///
/// Resizing is bilinear (triangle filter, widened when downsampling so it
/// antialiases). Grayscale inputs are replicated to three channels.
pub fn load_image(path: &Path, target_size: usize) -> Result<ImageBuffer> {
    let rgb = decode(path)?.to_rgb32f();
    resize_rgb32f(rgb, target_size)
}

pub(crate) fn resize_rgb32f(rgb: image::Rgb32FImage, target_size: usize) -> Result<ImageBuffer> {
    if target_size == 0 {
        return Err(Error::Argument("target size must be positive".into()));
    }
    let t = target_size as u32;
    let resized = if rgb.dimensions() == (t, t) {
        rgb
    } else {
        image::imageops::resize(&rgb, t, t, FilterType::Triangle)
    };
    let data: Vec<f32> = resized
        .into_raw()
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    let img = ImageBuffer::from_raw_unchecked(target_size, target_size, 3, data);
    img.validate()?;
    Ok(img)
}

/// Loads a ground-truth mask: nearest-neighbour resize, then binarize at 0.5.
pub fn load_mask(path: &Path, target_size: usize) -> Result<PixelMask> {
    let luma = decode(path)?.to_luma32f();
    let t = target_size as u32;
    let resized = if luma.dimensions() == (t, t) {
        luma
    } else {
        image::imageops::resize(&luma, t, t, FilterType::Nearest)
    };
    let data = resized.into_raw().into_iter().map(|v| v >= 0.5).collect();
    PixelMask::new(target_size, target_size, data)
}

/// Uniform random `size x size` crop fully inside the image.
pub fn crop_patch(x: &ImageBuffer, size: usize, rng: &mut Rng) -> Result<ImageBuffer> {
    let (row, col) = sample_crop_origin(x.height(), x.width(), size, rng)?;
    x.crop(row, col, size, size)
}

/// Top-left corner drawn uniformly over every valid placement.
pub fn sample_crop_origin(
    height: usize,
    width: usize,
    size: usize,
    rng: &mut Rng,
) -> Result<(usize, usize)> {
    if size == 0 || size > height || size > width {
        return Err(Error::Argument(format!(
            "patch size {size} does not fit a {height}x{width} image"
        )));
    }
    Ok((
        rng.random_range(0..=height - size),
        rng.random_range(0..=width - size),
    ))
}

/// Test images with labels and masks, in scan order.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub images: Vec<ImageBuffer>,
    /// 1 for anomalous, 0 for normal.
    pub labels: Vec<u8>,
    /// All-false for normal images; `None` where a defect's mask is absent.
    pub masks: Vec<Option<PixelMask>>,
    pub defect_types: Vec<String>,
}

/// A category loaded at a fixed working resolution.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub category: String,
    pub working_size: usize,
    pub train: Vec<ImageBuffer>,
    pub test: TestSet,
}

impl Dataset {
    pub fn load(layout: &DatasetLayout, working_size: usize) -> Result<Self> {
        let train = layout
            .train()
            .map(|e| load_image(&e.image_path, working_size))
            .collect::<Result<Vec<_>>>()?;
        let mut test = TestSet {
            images: Vec::new(),
            labels: Vec::new(),
            masks: Vec::new(),
            defect_types: Vec::new(),
        };
        for entry in layout.test() {
            test.images
                .push(load_image(&entry.image_path, working_size)?);
            test.labels.push(u8::from(entry.is_anomalous()));
            let mask = match (&entry.mask_path, entry.is_anomalous()) {
                (Some(path), _) => {
                    let mask = load_mask(path, working_size)?;
                    if mask.count() == 0 {
                        return Err(Error::Integrity(format!(
                            "mask {} of a defective image is empty",
                            path.display()
                        )));
                    }
                    Some(mask)
                }
                (None, false) => Some(PixelMask::empty(working_size, working_size)),
                (None, true) => None,
            };
            test.masks.push(mask);
            test.defect_types.push(entry.defect_type.clone());
        }
        Ok(Self {
            category: layout.category.clone(),
            working_size,
            train,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn write_png(path: &Path, w: u32, h: u32, value: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::GrayImage::from_pixel(w, h, image::Luma([value]))
            .save(path)
            .unwrap();
    }

    fn fixture(root: &Path) {
        let cat = root.join("widget");
        for i in 0..3 {
            write_png(&cat.join(format!("train/good/{i:03}.png")), 10, 10, 100);
        }
        for i in 0..2 {
            write_png(&cat.join(format!("test/crack/{i:03}.png")), 10, 10, 100);
            write_png(
                &cat.join(format!("ground_truth/crack/{i:03}_mask.png")),
                10,
                10,
                255,
            );
        }
    }

    #[test]
    fn scan_counts_entries_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let layout = scan_layout(dir.path(), "widget").unwrap();
        assert_eq!(layout.entries.len(), 5);
        assert_eq!(
            layout
                .entries
                .iter()
                .filter(|e| e.mask_path.is_some())
                .count(),
            2
        );
        assert_eq!(layout.train().count(), 3);
        // stable ordering
        assert_eq!(layout, scan_layout(dir.path(), "widget").unwrap());
    }

    #[test]
    fn empty_train_is_a_layout_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("widget/train/good")).unwrap();
        fs::create_dir_all(dir.path().join("widget/test/good")).unwrap();
        let err = scan_layout(dir.path(), "widget").unwrap_err();
        assert!(matches!(err, Error::Layout { .. }), "{err}");
    }

    #[test]
    fn missing_directories_are_layout_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            scan_layout(dir.path(), "nothing"),
            Err(Error::Layout { .. })
        ));
    }

    #[test]
    fn mismatched_mask_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write_png(
            &dir.path().join("widget/ground_truth/crack/001_mask.png"),
            8,
            8,
            255,
        );
        let err = scan_layout(dir.path(), "widget").unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }

    #[test]
    fn absent_mask_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        fs::remove_file(dir.path().join("widget/ground_truth/crack/000_mask.png")).unwrap();
        let layout = scan_layout(dir.path(), "widget").unwrap();
        assert_eq!(layout.missing_masks().count(), 1);
        let data = Dataset::load(&layout, 8).unwrap();
        assert_eq!(data.test.masks.iter().filter(|m| m.is_none()).count(), 1);
        assert_eq!(data.test.labels, vec![1, 1]);
    }

    #[test]
    fn train_split_rejects_defects() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write_png(&dir.path().join("widget/train/crack/000.png"), 10, 10, 0);
        assert!(matches!(
            scan_layout(dir.path(), "widget"),
            Err(Error::Layout { .. })
        ));
    }

    #[test]
    fn load_image_resizes_and_replicates_grey() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.png");
        image::RgbImage::from_fn(512, 512, |x, y| {
            image::Rgb([(x / 2) as u8, (y / 2) as u8, 7])
        })
        .save(&path)
        .unwrap();
        let img = load_image(&path, 256).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (256, 256, 3));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let grey = dir.path().join("grey.png");
        write_png(&grey, 300, 200, 128);
        let img = load_image(&grey, 256).unwrap();
        for v in img.data() {
            assert!((v - 0.5).abs() <= 1.0 / 510.0 + 1e-6, "{v}");
        }
    }

    #[test]
    fn bilinear_upsize_keeps_corners() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checker.png");
        let values = [[0u8, 255], [255, 0]];
        image::GrayImage::from_fn(2, 2, |x, y| image::Luma([values[y as usize][x as usize]]))
            .save(&path)
            .unwrap();
        let img = load_image(&path, 4).unwrap();
        // Half-pixel centres: output corner (0,0) maps to input (-0.25,-0.25),
        // which clamps onto the input corner.
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(0, 3, 0), 1.0);
        assert_eq!(img.get(3, 0, 0), 1.0);
        assert_eq!(img.get(3, 3, 0), 0.0);
    }

    #[test]
    fn undecodable_file_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.png");
        fs::write(&path, b"not an image").unwrap();
        assert!(matches!(load_image(&path, 8), Err(Error::Decode { .. })));
    }

    #[test]
    fn crop_patch_contracts() {
        let img = ImageBuffer::from_fn(16, 16, 3, |r, c, ch| ((r + c + ch) % 7) as f32 / 7.0);
        let mut rng = substream(0, "crop");
        assert_eq!(crop_patch(&img, 16, &mut rng).unwrap(), img);
        assert!(crop_patch(&img, 17, &mut rng).is_err());
        for _ in 0..100 {
            let (r, c) = sample_crop_origin(16, 16, 5, &mut rng).unwrap();
            assert!(r + 5 <= 16 && c + 5 <= 16);
        }
    }
}
