//! ROC AUC metrics, the end-to-end experiment driver and sweeps.

use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::buffer::{ImageBuffer, PixelMask};
use crate::config::{Estimator, ExperimentConfig, Pooling};
use crate::dataset::{Dataset, TestSet};
use crate::error::{Error, Result};
use crate::localize::{
    dense_extract, gaussian_upsample, image_score_from_map, score_grid, GridScorer, PixelScoreMap,
    ScoreMap,
};
use crate::model::Model;
use crate::nn::Real;
use crate::score::{
    ensemble_scores, fit_gde_with, fit_kde, fit_per_location_gde_with, GdeAccumulator, GdeModel,
    KdeModel, Regularization,
};
use crate::train::{finetune_loop, train_loop, Level, RunOptions, TrainReport};

/// Scores with binary labels (1 = anomalous).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl LabeledScores {
    pub fn auc(&self) -> Result<f64> {
        roc_auc(&self.scores, &self.labels)
    }
}

/// Area under the ROC curve from midranks:
/// `P(s_anomalous > s_normal) + P(tie) / 2`.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {bad} is not binary")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "AUC needs both normal and anomalous examples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the positives, so midranks stay integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j) as u64;
        let pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank_sum2 += midrank2 * pos;
        i = j;
    }
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Pixel-level AUC over test images; masks give the labels.
pub fn pixel_auc(maps: &[PixelScoreMap], masks: &[PixelMask], pooling: Pooling) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::Metric(format!(
            "{} maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    for (i, (m, k)) in maps.iter().zip(masks).enumerate() {
        if (m.height, m.width) != (k.height(), k.width()) {
            return Err(Error::Metric(format!(
                "map {i} is {}x{} but its mask is {}x{}",
                m.height,
                m.width,
                k.height(),
                k.width()
            )));
        }
    }
    match pooling {
        Pooling::Pooled => {
            let scores: Vec<f64> = maps.iter().flat_map(|m| m.values.iter().copied()).collect();
            let labels: Vec<u8> = masks
                .iter()
                .flat_map(|k| k.data().iter().map(|&b| u8::from(b)))
                .collect();
            roc_auc(&scores, &labels)
        }
        Pooling::PerImage => {
            let mut aucs = Vec::new();
            for (m, k) in maps.iter().zip(masks) {
                let count = k.count();
                if count == 0 || count == k.data().len() {
                    continue;
                }
                let labels: Vec<u8> = k.data().iter().map(|&b| u8::from(b)).collect();
                aucs.push(roc_auc(&m.values, &labels)?);
            }
            if aucs.is_empty() {
                return Err(Error::Metric(
                    "no image has both normal and defective pixels".into(),
                ));
            }
            Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
        }
    }
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`);
/// the error of a single value is 0.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt() / (n as f64).sqrt())
}

/// Fitted density model for whole-image embeddings.
#[derive(Debug, Clone)]
pub enum ImageEstimator {
    Gde(GdeModel),
    Kde(KdeModel),
}

impl ImageEstimator {
    pub fn fit(rows: &[Vec<f64>], estimator: Estimator) -> Result<Self> {
        Ok(match estimator {
            Estimator::Gde { regularization } => Self::Gde(fit_gde_with(rows, regularization)?),
            Estimator::Kde { bandwidth } => Self::Kde(fit_kde(rows, bandwidth)?),
        })
    }

    pub fn score(&self, e: &[f64]) -> Result<f64> {
        match self {
            Self::Gde(m) => m.score(e),
            Self::Kde(m) => m.score(e),
        }
    }
}

/// Fitted density model(s) for patch embeddings.
#[derive(Debug, Clone)]
pub enum PatchEstimator {
    Shared(GdeModel),
    PerLocation(Vec<GdeModel>),
}

impl PatchEstimator {
    pub fn scorer(&self) -> GridScorer<'_> {
        match self {
            Self::Shared(m) => GridScorer::Shared(m),
            Self::PerLocation(ms) => GridScorer::PerLocation(ms),
        }
    }
}

/// A trained model together with the density models fitted on normal data.
#[derive(Debug, Clone)]
pub struct Detector<F = f32> {
    pub model: Model<F>,
    pub image: ImageEstimator,
    pub patch: Option<PatchEstimator>,
    pub level: Level,
    pub patch_size: usize,
    pub stride: usize,
    pub sigma: f64,
    pub pooling: Pooling,
}

/// Per-image results on a test set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub image_scores: Vec<f64>,
    pub image_auc: f64,
    pub pixel_auc: Option<f64>,
    /// Pixel maps in test order when localization ran.
    pub pixel_maps: Option<Vec<PixelScoreMap>>,
}

fn ridge_scale(reg: Regularization) -> Option<f64> {
    match reg {
        Regularization::Ridge { scale } => Some(scale),
        Regularization::LedoitWolf => None,
    }
}

impl<F: Real> Detector<F> {
    /// Fits the image estimator and, when localization is enabled or the
    /// model was trained on patches, the patch estimator.
    pub fn fit(model: Model<F>, train: &[ImageBuffer], cfg: &ExperimentConfig) -> Result<Self> {
        let refs: Vec<&ImageBuffer> = train.iter().collect();
        let rows = model.embed_rows(&refs)?;
        let image = ImageEstimator::fit(&rows, cfg.estimator)?;
        let loc = &cfg.localize;
        let patch = if loc.enabled || cfg.train.level == Level::Patch {
            let reg = match cfg.estimator {
                Estimator::Gde { regularization } => regularization,
                Estimator::Kde { .. } => Regularization::default(),
            };
            Some(fit_patch_estimator(
                &model,
                train,
                loc.patch_size,
                loc.stride,
                loc.per_location,
                reg,
            )?)
        } else {
            None
        };
        Ok(Self {
            model,
            image,
            patch,
            level: cfg.train.level,
            patch_size: loc.patch_size,
            stride: loc.stride,
            sigma: loc.sigma(),
            pooling: loc.pooling,
        })
    }

    /// Patch score grid and its upsampled pixel map.
    pub fn localize(&self, x: &ImageBuffer) -> Result<(ScoreMap, PixelScoreMap)> {
        let patch = self
            .patch
            .as_ref()
            .ok_or_else(|| Error::Config("localization is not enabled for this detector".into()))?;
        let grid = dense_extract(&self.model, x, self.patch_size, self.stride)?;
        let map = score_grid(&grid, patch.scorer())?;
        let pixels = gaussian_upsample(&map, self.sigma)?;
        Ok((map, pixels))
    }

    /// Image-level anomaly scores: the max-pooled patch map for patch-level
    /// models, the whole-image density score otherwise.
    pub fn image_scores(&self, images: &[ImageBuffer]) -> Result<Vec<f64>> {
        if self.level == Level::Patch {
            return images
                .iter()
                .map(|x| self.localize(x).map(|(m, _)| image_score_from_map(&m)))
                .collect();
        }
        let refs: Vec<&ImageBuffer> = images.iter().collect();
        self.model
            .embed_rows(&refs)?
            .iter()
            .map(|e| self.image.score(e))
            .collect()
    }

    pub fn evaluate(&self, test: &TestSet) -> Result<Evaluation> {
        let mut maps = None;
        let image_scores = if self.patch.is_some() {
            let mut grid_max = Vec::with_capacity(test.images.len());
            let mut pixel_maps = Vec::with_capacity(test.images.len());
            for x in &test.images {
                let (m, p) = self.localize(x)?;
                grid_max.push(image_score_from_map(&m));
                pixel_maps.push(p);
            }
            maps = Some(pixel_maps);
            if self.level == Level::Patch {
                grid_max
            } else {
                self.image_scores(&test.images)?
            }
        } else {
            self.image_scores(&test.images)?
        };
        let image_auc = roc_auc(&image_scores, &test.labels)?;
        let pixel_auc = match &maps {
            Some(pixel_maps) => {
                let (m, k): (Vec<PixelScoreMap>, Vec<PixelMask>) = pixel_maps
                    .iter()
                    .zip(&test.masks)
                    .filter_map(|(m, k)| k.as_ref().map(|k| (m.clone(), k.clone())))
                    .unzip();
                Some(pixel_auc(&m, &k, self.pooling)?)
            }
            None => None,
        };
        Ok(Evaluation {
            image_scores,
            image_auc,
            pixel_auc,
            pixel_maps: maps,
        })
    }
}

/// Fits patch density models on densely extracted training embeddings.
pub fn fit_patch_estimator<F: Real>(
    model: &Model<F>,
    train: &[ImageBuffer],
    patch_size: usize,
    stride: usize,
    per_location: bool,
    reg: Regularization,
) -> Result<PatchEstimator> {
    let dim = model.embedding_dim();
    if per_location {
        let mut locations: Vec<Vec<Vec<f64>>> = Vec::new();
        for x in train {
            let grid = dense_extract(model, x, patch_size, stride)?;
            if locations.is_empty() {
                locations = vec![Vec::with_capacity(train.len()); grid.rows * grid.cols];
            }
            for (loc, cell) in locations.iter_mut().zip(grid.cells()) {
                loc.push(cell.to_vec());
            }
        }
        return Ok(PatchEstimator::PerLocation(fit_per_location_gde_with(
            &locations, reg,
        )?));
    }
    match ridge_scale(reg) {
        Some(scale) => {
            let mut acc = GdeAccumulator::new(dim);
            for x in train {
                for cell in dense_extract(model, x, patch_size, stride)?.cells() {
                    acc.add(cell)?;
                }
            }
            Ok(PatchEstimator::Shared(acc.finish(scale)?))
        }
        None => {
            let mut rows = Vec::new();
            for x in train {
                rows.extend(
                    dense_extract(model, x, patch_size, stride)?
                        .cells()
                        .map(<[f64]>::to_vec),
                );
            }
            Ok(PatchEstimator::Shared(fit_gde_with(&rows, reg)?))
        }
    }
}

/// Artifact locations and cancellation for experiments.
#[derive(Debug, Default, Clone)]
pub struct ExperimentOptions<'a> {
    /// Per-seed checkpoints and training logs go here when set.
    pub out_dir: Option<PathBuf>,
    pub stop: Option<&'a AtomicBool>,
}

/// Outcome of one training-plus-evaluation run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub category: String,
    pub task: String,
    pub seed: u64,
    pub image_auc: f64,
    pub pixel_auc: Option<f64>,
    pub wall_time_s: f64,
    pub image_scores: Vec<f64>,
    pub train: TrainReport,
}

/// Trains one model with `seed`, fits the detector and evaluates it.
pub fn run_single<'a>(
    data: &Dataset,
    cfg: &ExperimentConfig,
    seed: u64,
    opts: &ExperimentOptions<'a>,
) -> Result<(RunResult, Detector, Evaluation)> {
    let start = Instant::now();
    let train_cfg = cfg.train_for_seed(seed);
    let mut model = Model::<f32>::build(cfg.model.clone(), train_cfg.task.n_classes(), seed)?;
    let (log_path, ckpt_path) = match &opts.out_dir {
        Some(dir) => (
            Some(dir.join(format!("seed{seed}_train_log.csv"))),
            Some(dir.join(format!("seed{seed}.ckpt"))),
        ),
        None => (None, None),
    };
    let run_opts = RunOptions {
        log_path: log_path.as_deref(),
        checkpoint_path: ckpt_path.as_deref(),
        stop: opts.stop,
    };
    let report = if cfg.model.pretrained_weights.is_some() {
        finetune_loop(&mut model, &data.train, &cfg.finetune, &train_cfg, run_opts)?
    } else {
        train_loop(&mut model, &data.train, &train_cfg, run_opts)?
    };
    let detector = Detector::fit(model, &data.train, cfg)?;
    let evaluation = detector.evaluate(&data.test)?;
    let result = RunResult {
        category: data.category.clone(),
        task: train_cfg.task.to_string(),
        seed,
        image_auc: evaluation.image_auc,
        pixel_auc: evaluation.pixel_auc,
        wall_time_s: start.elapsed().as_secs_f64(),
        image_scores: evaluation.image_scores.clone(),
        train: report,
    };
    Ok((result, detector, evaluation))
}

/// Summary over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub image_auc_mean: f64,
    pub image_auc_se: f64,
    pub pixel_auc_mean: Option<f64>,
    pub pixel_auc_se: Option<f64>,
}

impl Summary {
    pub fn of(runs: &[RunResult]) -> Self {
        let image: Vec<f64> = runs.iter().map(|r| r.image_auc).collect();
        let pixel: Option<Vec<f64>> = runs.iter().map(|r| r.pixel_auc).collect();
        let (image_auc_mean, image_auc_se) = mean_and_se(&image);
        let (pixel_auc_mean, pixel_auc_se) = match pixel.filter(|p| !p.is_empty()) {
            Some(p) => {
                let (m, s) = mean_and_se(&p);
                (Some(m), Some(s))
            }
            None => (None, None),
        };
        Self {
            image_auc_mean,
            image_auc_se,
            pixel_auc_mean,
            pixel_auc_se,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub runs: Vec<RunResult>,
    pub summary: Summary,
    /// Image AUC of the z-normalized score ensemble over seeds.
    pub ensemble_auc: Option<f64>,
}

pub const REPORT_HEADER: &str = "category,task,seed,image_auc,pixel_auc,wall_time_s";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl ExperimentReport {
    /// One row per seed, then `mean` and `stderr` rows (and `ensemble`
    /// when requested) in the seed column.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.runs {
            s.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                r.category,
                r.task,
                r.seed,
                r.image_auc,
                opt(r.pixel_auc),
                r.wall_time_s
            ));
        }
        if let Some(first) = self.runs.first() {
            let total: f64 = self.runs.iter().map(|r| r.wall_time_s).sum();
            let sm = &self.summary;
            s.push_str(&format!(
                "{},{},mean,{},{},{total:.3}\n",
                first.category,
                first.task,
                sm.image_auc_mean,
                opt(sm.pixel_auc_mean)
            ));
            s.push_str(&format!(
                "{},{},stderr,{},{},\n",
                first.category,
                first.task,
                sm.image_auc_se,
                opt(sm.pixel_auc_se)
            ));
            if let Some(e) = self.ensemble_auc {
                s.push_str(&format!(
                    "{},{},ensemble,{e},,\n",
                    first.category, first.task
                ));
            }
        }
        s
    }
}

/// Trains and evaluates `cfg.n_seeds` models with seeds `cfg.seed`,
/// `cfg.seed + 1`, ...
pub fn run_experiment(
    data: &Dataset,
    cfg: &ExperimentConfig,
    opts: &ExperimentOptions<'_>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.n_seeds);
    for k in 0..cfg.n_seeds {
        let seed = cfg.seed + k as u64;
        let (run, _, _) = run_single(data, cfg, seed, opts)?;
        log::info!(
            "{} seed {seed}: image AUC {:.4}",
            data.category,
            run.image_auc
        );
        runs.push(run);
    }
    let ensemble_auc = if cfg.ensemble {
        let scores: Vec<Vec<f64>> = runs.iter().map(|r| r.image_scores.clone()).collect();
        Some(roc_auc(&ensemble_scores(&scores)?, &data.test.labels)?)
    } else {
        None
    };
    Ok(ExperimentReport {
        summary: Summary::of(&runs),
        runs,
        ensemble_auc,
    })
}

/// One configuration key swept over a list of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// `section.key` as accepted by [`ExperimentConfig::set`].
    pub parameter: String,
    pub values: Vec<String>,
    pub repeats: usize,
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub value: String,
    pub runs: Vec<RunResult>,
    pub summary: Summary,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub parameter: String,
    pub cells: Vec<SweepCell>,
}

pub const SWEEP_HEADER: &str =
    "parameter,value,runs,image_auc_mean,image_auc_se,pixel_auc_mean,pixel_auc_se,image_auc";

impl SweepTable {
    pub fn run_count(&self) -> usize {
        self.cells.iter().map(|c| c.runs.len()).sum()
    }

    /// One row per value; the last column reads `mean ± se` in percent.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for c in &self.cells {
            let sm = &c.summary;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{:.1} ± {:.1}\n",
                self.parameter,
                c.value,
                c.runs.len(),
                sm.image_auc_mean,
                sm.image_auc_se,
                opt(sm.pixel_auc_mean),
                opt(sm.pixel_auc_se),
                100.0 * sm.image_auc_mean,
                100.0 * sm.image_auc_se
            ));
        }
        s
    }
}

/// Evaluates every value of `spec` with `spec.repeats` seeds each.
pub fn run_sweep(
    data: &Dataset,
    spec: &SweepSpec,
    base: &ExperimentConfig,
    opts: &ExperimentOptions<'_>,
) -> Result<SweepTable> {
    if spec.values.is_empty() {
        return Err(Error::Argument(format!(
            "sweep over {} has no values",
            spec.parameter
        )));
    }
    if spec.repeats == 0 {
        return Err(Error::Argument("sweep repeats must be at least 1".into()));
    }
    let mut cells = Vec::with_capacity(spec.values.len());
    for value in &spec.values {
        let mut cfg = base.clone();
        cfg.set(&spec.parameter, value)?;
        cfg.n_seeds = spec.repeats;
        cfg.ensemble = false;
        let cell_opts = ExperimentOptions {
            out_dir: opts
                .out_dir
                .as_ref()
                .map(|d| d.join(format!("{}={value}", spec.parameter))),
            stop: opts.stop,
        };
        let report = run_experiment(data, &cfg, &cell_opts)?;
        cells.push(SweepCell {
            value: value.clone(),
            summary: report.summary,
            runs: report.runs,
        });
    }
    Ok(SweepTable {
        parameter: spec.parameter.clone(),
        cells,
    })
}
