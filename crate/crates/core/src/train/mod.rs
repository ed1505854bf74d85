//! Self-supervised proxy-task training.

mod optim;

pub use optim::{cosine_lr, Schedule, Sgd};

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{
    preprocess_augment, sample_confetti, sample_cutout, sample_cutpaste, sample_cutpaste_scar,
    sample_scar, AugmentConfig, CutoutFill, PatchParams, PreprocessConfig,
};
use crate::buffer::ImageBuffer;
use crate::dataset::crop_patch;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model};
use crate::nn::{HasParams, Real};
use crate::rng::{streams, substream, Rng, RngState};

/// Updates per epoch.
pub const STEPS_PER_EPOCH: usize = 256;

/// Proxy classification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Normal vs CutPaste.
    BinaryCutpaste,
    /// Normal vs CutPaste-Scar.
    BinaryScar,
    /// Normal vs either CutPaste variant (one drawn per example).
    BinaryUnion,
    /// Normal vs CutPaste vs CutPaste-Scar.
    ThreeWay,
    /// Normal vs Cutout with a constant fill.
    Cutout(CutoutFill),
    /// Normal vs Confetti noise.
    Confetti,
    /// Normal vs random-color Scar.
    Scar,
}

impl Task {
    pub fn n_classes(self) -> usize {
        if self == Task::ThreeWay {
            3
        } else {
            2
        }
    }

    /// Default total batch size (examples, not source images).
    pub fn default_batch_size(self) -> usize {
        if self == Task::ThreeWay {
            96
        } else {
            64
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Task::BinaryCutpaste => "binary_cutpaste",
            Task::BinaryScar => "binary_scar",
            Task::BinaryUnion => "binary_union",
            Task::ThreeWay => "three_way",
            Task::Cutout(CutoutFill::Grey) => "cutout_grey",
            Task::Cutout(CutoutFill::MeanPixel) => "cutout_mean",
            Task::Cutout(CutoutFill::RandomColor) => "cutout_color",
            Task::Confetti => "confetti",
            Task::Scar => "scar",
        };
        f.write_str(s)
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let fill = |f: &str| match f {
            "grey" | "gray" => Some(CutoutFill::Grey),
            "mean" | "mean_pixel" => Some(CutoutFill::MeanPixel),
            "color" | "random_color" => Some(CutoutFill::RandomColor),
            _ => None,
        };
        let task = match s {
            "binary_cutpaste" | "cutpaste" => Some(Task::BinaryCutpaste),
            "binary_scar" | "cutpaste_scar" => Some(Task::BinaryScar),
            "binary_union" => Some(Task::BinaryUnion),
            "three_way" | "3way" => Some(Task::ThreeWay),
            "confetti" => Some(Task::Confetti),
            "scar" => Some(Task::Scar),
            other => other
                .strip_prefix("cutout_variant(")
                .and_then(|r| r.strip_suffix(')'))
                .or_else(|| other.strip_prefix("cutout_"))
                .and_then(fill)
                .map(Task::Cutout),
        };
        task.ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Image,
    Patch,
}

impl FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Level::Image),
            "patch" => Ok(Level::Patch),
            other => Err(Error::Config(format!("unknown level {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub level: Level,
    pub patch_size: usize,
    pub steps: usize,
    /// Examples per update, across all classes.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub log_every: usize,
    pub augment: AugmentConfig,
    pub preprocess: PreprocessConfig,
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            level: Level::Image,
            patch_size: 32,
            steps: 65_000,
            batch_size: task.default_batch_size(),
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 3e-5,
            schedule: Schedule::Cosine,
            seed: 0,
            log_every: 100,
            augment: AugmentConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }

    /// Source images drawn per update.
    pub fn sources_per_step(&self) -> usize {
        (self.batch_size / examples_per_source(self.task)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid lr {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "invalid weight_decay {}",
                self.weight_decay
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(Task::ThreeWay)
    }
}

/// Two-stage schedule for pretrained backbones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSchedule {
    pub head_only_epochs: usize,
    pub head_lr: f64,
    pub full_epochs: usize,
    pub full_lr: f64,
    pub steps_per_epoch: usize,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        Self {
            head_only_epochs: 10,
            head_lr: 0.03,
            full_epochs: 64,
            full_lr: 1e-4,
            steps_per_epoch: STEPS_PER_EPOCH,
        }
    }
}

fn examples_per_source(task: Task) -> usize {
    task.n_classes()
}

/// One labelled training example with the augmentation that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub image: ImageBuffer,
    pub label: usize,
    /// Patch applied after preprocessing (`None` for normals).
    pub patch: Option<PatchParams>,
    /// The preprocessed image the patch was applied to.
    pub base: Option<ImageBuffer>,
}

fn augmented(
    base: ImageBuffer,
    label: usize,
    sample: impl FnOnce(&ImageBuffer) -> Result<(ImageBuffer, PatchParams)>,
) -> Result<TrainingExample> {
    let (image, params) = sample(&base)?;
    Ok(TrainingExample {
        image,
        label,
        patch: Some(params),
        base: Some(base),
    })
}

/// Labelled examples derived from one normal image: the preprocessed image
/// (label 0) and one augmented copy per positive class, each from an
/// independent preprocessing draw. At patch level a random crop is taken
/// first.
pub fn make_training_pair(
    x: &ImageBuffer,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<TrainingExample>> {
    let src = match cfg.level {
        Level::Image => x.clone(),
        Level::Patch => crop_patch(x, cfg.patch_size, rng)?,
    };
    let aug = &cfg.augment;
    let pre = |rng: &mut Rng| preprocess_augment(&src, &cfg.preprocess, rng);
    let normal = TrainingExample {
        image: pre(rng),
        label: 0,
        patch: None,
        base: None,
    };
    let mut out = vec![normal];
    match cfg.task {
        Task::BinaryCutpaste => {
            let b = pre(rng);
            out.push(augmented(b, 1, |b| sample_cutpaste(b, aug, rng))?);
        }
        Task::BinaryScar => {
            let b = pre(rng);
            out.push(augmented(b, 1, |b| sample_cutpaste_scar(b, aug, rng))?);
        }
        Task::BinaryUnion => {
            let b = pre(rng);
            let ex = if rng.random_bool(0.5) {
                augmented(b, 1, |b| sample_cutpaste(b, aug, rng))?
            } else {
                augmented(b, 1, |b| sample_cutpaste_scar(b, aug, rng))?
            };
            out.push(ex);
        }
        Task::ThreeWay => {
            let b = pre(rng);
            out.push(augmented(b, 1, |b| sample_cutpaste(b, aug, rng))?);
            let b = pre(rng);
            out.push(augmented(b, 2, |b| sample_cutpaste_scar(b, aug, rng))?);
        }
        Task::Cutout(fill) => {
            let b = pre(rng);
            out.push(augmented(b, 1, |b| sample_cutout(b, fill, aug, rng))?);
        }
        Task::Confetti => {
            let b = pre(rng);
            out.push(augmented(b, 1, |b| sample_confetti(b, aug, rng))?);
        }
        Task::Scar => {
            let b = pre(rng);
            out.push(augmented(b, 1, |b| sample_scar(b, aug, rng))?);
        }
    }
    Ok(out)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    /// Mean loss since the previous row.
    pub loss: f64,
    /// Proxy-task training accuracy since the previous row.
    pub proxy_acc: f64,
}

pub const LOG_HEADER: &str = "step,lr,loss,proxy_acc";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.lr, self.loss, self.proxy_acc)
    }
}

/// Renders log rows as CSV text with a header.
pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Where a run writes its artifacts and how it can be stopped.
#[derive(Debug, Default, Clone, Copy)]
pub struct RunOptions<'a> {
    /// Metrics CSV, appended as rows are produced.
    pub log_path: Option<&'a Path>,
    /// Checkpoint written at the end, on interrupt and (suffixed
    /// `.nonfinite`) when the loss diverges.
    pub checkpoint_path: Option<&'a Path>,
    /// Checked before every update; when set the run stops.
    pub stop: Option<&'a AtomicBool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub steps: usize,
    pub checkpoint: Option<PathBuf>,
}

/// Cycles through shuffled permutations of the training set.
struct DataOrder {
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl DataOrder {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: substream(seed, streams::DATA_ORDER),
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Mutable state shared by the stages of a run.
struct Session<'a> {
    images: &'a [ImageBuffer],
    cfg: &'a TrainConfig,
    opts: RunOptions<'a>,
    augment_rng: Rng,
    order: DataOrder,
    log: Vec<LogRow>,
    log_file: Option<std::fs::File>,
    step: usize,
}

impl<'a> Session<'a> {
    fn new(images: &'a [ImageBuffer], cfg: &'a TrainConfig, opts: RunOptions<'a>) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let log_file = match opts.log_path {
            Some(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
                Some(f)
            }
            None => None,
        };
        Ok(Self {
            images,
            cfg,
            opts,
            augment_rng: substream(cfg.seed, streams::AUGMENT),
            order: DataOrder::new(images.len(), cfg.seed),
            log: Vec::new(),
            log_file,
            step: 0,
        })
    }

    fn batch(&mut self) -> Result<(Vec<ImageBuffer>, Vec<usize>)> {
        let mut images = Vec::with_capacity(self.cfg.batch_size);
        let mut labels = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.sources_per_step() {
            let idx = self.order.next();
            for ex in make_training_pair(&self.images[idx], self.cfg, &mut self.augment_rng)? {
                images.push(ex.image);
                labels.push(ex.label);
            }
        }
        Ok((images, labels))
    }

    fn push_log(&mut self, row: LogRow) -> Result<()> {
        log::info!(
            "step {} lr {:.5} loss {:.4} acc {:.3}",
            row.step,
            row.lr,
            row.loss,
            row.proxy_acc
        );
        if let (Some(f), Some(path)) = (&mut self.log_file, self.opts.log_path) {
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(path, e))?;
        }
        self.log.push(row);
        Ok(())
    }

    fn checkpoint<F: Real>(&self, model: &Model<F>, path: &Path) -> Result<()> {
        let extra = serde_json::to_value(self.cfg).map_err(|e| Error::Data(e.to_string()))?;
        save_checkpoint(
            path,
            model,
            self.step as u64,
            Some(RngState::capture(&self.augment_rng)),
            extra,
        )
    }

    /// Runs `total` updates with learning rate `base_lr` under the schedule.
    fn run<F: Real>(&mut self, model: &mut Model<F>, total: usize, base_lr: f64) -> Result<()> {
        let sgd = Sgd {
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
        };
        let (mut loss_sum, mut correct, mut seen, mut window) = (0.0, 0usize, 0usize, 0usize);
        for local in 0..total {
            if self.opts.stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
                if let Some(path) = self.opts.checkpoint_path {
                    self.checkpoint(model, path)?;
                }
                return Err(Error::Interrupted { step: self.step });
            }
            let lr = self.cfg.schedule.lr(local, total, base_lr);
            let (images, labels) = self.batch()?;
            let refs: Vec<&ImageBuffer> = images.iter().collect();
            let stats = model.compute_gradients(&refs, &labels)?;
            if !stats.loss.is_finite() {
                let diag = self.opts.checkpoint_path.map(|p| {
                    let mut s = p.as_os_str().to_owned();
                    s.push(".nonfinite");
                    PathBuf::from(s)
                });
                if let Some(path) = &diag {
                    self.checkpoint(model, path)?;
                }
                return Err(Error::NonFinite {
                    step: self.step,
                    checkpoint: diag,
                });
            }
            sgd.step(model.params_mut(), lr);
            self.step += 1;
            loss_sum += stats.loss;
            correct += stats.correct;
            seen += stats.total;
            window += 1;
            if self.step % self.cfg.log_every == 0 || local + 1 == total {
                self.push_log(LogRow {
                    step: self.step,
                    lr,
                    loss: loss_sum / window as f64,
                    proxy_acc: correct as f64 / seen as f64,
                })?;
                (loss_sum, correct, seen, window) = (0.0, 0, 0, 0);
            }
        }
        Ok(())
    }

    fn finish<F: Real>(self, model: &Model<F>) -> Result<TrainReport> {
        if let Some(path) = self.opts.checkpoint_path {
            self.checkpoint(model, path)?;
        }
        Ok(TrainReport {
            log: self.log,
            steps: self.step,
            checkpoint: self.opts.checkpoint_path.map(Path::to_path_buf),
        })
    }
}

fn check_model<F: Real>(model: &Model<F>, cfg: &TrainConfig) -> Result<()> {
    if model.n_classes != cfg.task.n_classes() {
        return Err(Error::Config(format!(
            "task {} needs {} classes but the model has {}",
            cfg.task,
            cfg.task.n_classes(),
            model.n_classes
        )));
    }
    Ok(())
}

/// Trains `model` on the proxy task for `cfg.steps` SGD updates.
pub fn train_loop<F: Real>(
    model: &mut Model<F>,
    images: &[ImageBuffer],
    cfg: &TrainConfig,
    opts: RunOptions<'_>,
) -> Result<TrainReport> {
    check_model(model, cfg)?;
    let mut session = Session::new(images, cfg, opts)?;
    session.run(model, cfg.steps, cfg.lr)?;
    session.finish(model)
}

/// Head-only training on a frozen backbone, then full fine-tuning with
/// normalization layers kept frozen. `cfg.steps` and `cfg.lr` are ignored.
pub fn finetune_loop<F: Real>(
    model: &mut Model<F>,
    images: &[ImageBuffer],
    sched: &FinetuneSchedule,
    cfg: &TrainConfig,
    opts: RunOptions<'_>,
) -> Result<TrainReport> {
    check_model(model, cfg)?;
    if sched.steps_per_epoch == 0 {
        return Err(Error::Config("steps_per_epoch must be positive".into()));
    }
    let mut session = Session::new(images, cfg, opts)?;
    model.freeze_backbone(true);
    session.run(
        model,
        sched.head_only_epochs * sched.steps_per_epoch,
        sched.head_lr,
    )?;
    model.freeze_backbone(false);
    model.freeze_norm(true);
    session.run(
        model,
        sched.full_epochs * sched.steps_per_epoch,
        sched.full_lr,
    )?;
    session.finish(model)
}
