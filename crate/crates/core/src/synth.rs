//! Synthetic one-class datasets: procedural normal textures plus test
//! images carrying pasted shape defects.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::synthetic::{
    make_synthetic_defect, sample_defect_spec, DefectFill, DefectShape,
};
use crate::augment::texture::{render_blobs, WeaveTexture};
use crate::dataset::{Dataset, TestSet};
use crate::error::{Error, Result};
use crate::rng::{streams, substream};
use crate::PixelMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub category: String,
    pub size: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    /// Defective test images per shape.
    pub n_test_per_shape: usize,
    pub shapes: Vec<DefectShape>,
    pub fill: DefectFill,
    /// Defect area as a fraction of the image area.
    pub scale: (f32, f32),
    pub texture: WeaveTexture,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            category: "weave".into(),
            size: 64,
            n_train: 200,
            n_test_normal: 60,
            n_test_per_shape: 30,
            shapes: vec![DefectShape::Square, DefectShape::Ellipse],
            fill: DefectFill::RandomColor,
            scale: (0.01, 0.04),
            texture: WeaveTexture::default(),
            seed: 0,
        }
    }
}

/// Pool size for natural-image fills.
const POOL_SIZE: usize = 16;

/// Builds the dataset in memory; test order is normals first, then each
/// shape in turn.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_train == 0 {
        return Err(Error::Config("n_train must be positive".into()));
    }
    if cfg.shapes.is_empty() || cfg.n_test_per_shape == 0 || cfg.n_test_normal == 0 {
        return Err(Error::Config(
            "test split needs normal and defective images".into(),
        ));
    }
    let mut rng = substream(cfg.seed, streams::SYNTH);
    let train = (0..cfg.n_train)
        .map(|_| cfg.texture.render(cfg.size, &mut rng))
        .collect();
    let pool: Vec<_> = match cfg.fill {
        DefectFill::NaturalImage => (0..POOL_SIZE)
            .map(|_| render_blobs(cfg.size, &mut rng))
            .collect(),
        DefectFill::RandomColor => Vec::new(),
    };
    let mut test = TestSet {
        images: Vec::new(),
        labels: Vec::new(),
        masks: Vec::new(),
        defect_types: Vec::new(),
    };
    for _ in 0..cfg.n_test_normal {
        test.images.push(cfg.texture.render(cfg.size, &mut rng));
        test.labels.push(0);
        test.masks.push(Some(PixelMask::empty(cfg.size, cfg.size)));
        test.defect_types.push("good".into());
    }
    for shape in &cfg.shapes {
        for _ in 0..cfg.n_test_per_shape {
            let base = cfg.texture.render(cfg.size, &mut rng);
            let spec =
                sample_defect_spec(*shape, cfg.fill, cfg.scale, cfg.size, cfg.size, &mut rng)?;
            let (img, mask) = make_synthetic_defect(&base, &spec, &pool, &mut rng)?;
            test.images.push(img);
            test.labels.push(1);
            test.masks.push(Some(mask));
            test.defect_types.push(shape.name());
        }
    }
    Ok(Dataset {
        category: cfg.category.clone(),
        working_size: cfg.size,
        train,
        test,
    })
}

/// Writes a dataset in the `<root>/<category>/{train,test,ground_truth}`
/// folder layout.
pub fn write_layout(data: &Dataset, root: &Path) -> Result<()> {
    let base = root.join(&data.category);
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let good = base.join("train").join("good");
    mkdir(&good)?;
    for (i, img) in data.train.iter().enumerate() {
        img.save_png(&good.join(format!("{i:04}.png")))?;
    }
    let mut counters = std::collections::BTreeMap::<&str, usize>::new();
    for ((img, mask), defect) in data
        .test
        .images
        .iter()
        .zip(&data.test.masks)
        .zip(&data.test.defect_types)
    {
        let k = counters.entry(defect).or_default();
        let dir = base.join("test").join(defect);
        mkdir(&dir)?;
        img.save_png(&dir.join(format!("{k:04}.png")))?;
        if defect != "good" {
            if let Some(mask) = mask {
                let gt = base.join("ground_truth").join(defect);
                mkdir(&gt)?;
                mask.save_png(&gt.join(format!("{k:04}_mask.png")))?;
            }
        }
        *k += 1;
    }
    Ok(())
}
