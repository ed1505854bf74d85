//! Backbone, projection head and classifier.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointHeader, TensorInfo, CHECKPOINT_MAGIC,
};
pub use gradcheck::{check_gradients, TensorGradError};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::buffer::ImageBuffer;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_in_place, softmax_cross_entropy,
    BasicBlock, Buffer, ConvBlock, Feature, HasParams, Layer, Linear, Matrix, MaxPool2d, Param,
    Real,
};
use crate::rng::{streams, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet18Like,
    TinyCnn,
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18_like" => Ok(Self::Resnet18Like),
            "tiny_cnn" => Ok(Self::TinyCnn),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    pub input_size: usize,
    pub embedding_dim: usize,
    pub pretrained_weights: Option<PathBuf>,
}

impl BackboneConfig {
    pub fn tiny_cnn(input_size: usize, embedding_dim: usize) -> Self {
        Self {
            architecture: Architecture::TinyCnn,
            input_size,
            embedding_dim,
            pretrained_weights: None,
        }
    }

    pub fn resnet18_like(input_size: usize) -> Self {
        Self {
            architecture: Architecture::Resnet18Like,
            input_size,
            embedding_dim: 512,
            pretrained_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 8 {
            return Err(Error::Config(format!(
                "embedding_dim must be at least 8, got {}",
                self.embedding_dim
            )));
        }
        if !(32..=512).contains(&self.input_size) && self.architecture == Architecture::Resnet18Like
        {
            return Err(Error::Config(format!(
                "input_size must lie in 32..=512, got {}",
                self.input_size
            )));
        }
        if self.architecture == Architecture::Resnet18Like && self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "resnet18_like needs input_size divisible by 32, got {}",
                self.input_size
            )));
        }
        if self.architecture == Architecture::TinyCnn && !(8..=512).contains(&self.input_size) {
            return Err(Error::Config(format!(
                "input_size must lie in 8..=512, got {}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// One backbone stage.
#[derive(Debug, Clone)]
enum Stage<F> {
    Conv(ConvBlock<F>),
    Pool(MaxPool2d),
    Residual(BasicBlock<F>),
}

impl<F: Real> Stage<F> {
    fn layer(&self) -> &dyn Layer<F> {
        match self {
            Stage::Conv(l) => l,
            Stage::Pool(l) => l,
            Stage::Residual(l) => l,
        }
    }

    fn layer_mut(&mut self) -> &mut dyn Layer<F> {
        match self {
            Stage::Conv(l) => l,
            Stage::Pool(l) => l,
            Stage::Residual(l) => l,
        }
    }
}

/// Statistics of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// Encoder, MLP projection head and linear classifier.
#[derive(Debug, Clone)]
pub struct Model<F = f32> {
    pub config: BackboneConfig,
    pub n_classes: usize,
    backbone: Vec<Stage<F>>,
    head: [Linear<F>; 3],
    backbone_frozen: bool,
    norm_frozen: bool,
    cache: Option<TrainCache>,
}

#[derive(Debug, Clone)]
struct TrainCache {
    pooled_shape: (usize, usize, usize, usize),
    masks: [Vec<bool>; 2],
}

/// Maps `[0, 1]` pixels to `[-1, 1]`.
fn normalize_input(v: f32) -> f64 {
    (f64::from(v) - 0.5) * 2.0
}

/// Packs a batch of equally sized RGB images into a channel-major tensor.
pub fn images_to_feature<F: Real>(images: &[&ImageBuffer]) -> Result<Feature<F>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let n = images.len();
    let mut x = Feature::zeros(3, n, h, w);
    for (i, img) in images.iter().enumerate() {
        if img.height() != h || img.width() != w || img.channels() != 3 {
            return Err(Error::Argument(format!(
                "batch image {i} is {}x{}x{}, expected {h}x{w}x3",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        for (p, px) in img.data().chunks_exact(3).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                x.data[(c * n + i) * h * w + p] = F::from_f64_lossy(normalize_input(v));
            }
        }
    }
    Ok(x)
}

fn sha_hex<'a, F: Real>(tensors: impl Iterator<Item = (&'a str, &'a [F])>) -> String {
    let mut hasher = Sha256::new();
    for (name, values) in tensors {
        hasher.update(name.as_bytes());
        hasher.update((values.len() as u64).to_le_bytes());
        for v in values {
            hasher.update(v.as_f64().to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

impl<F: Real> Model<F> {
    /// Builds a model; parameters come from the `init` substream of `seed`
    /// and, when configured, backbone weights from a pretrained checkpoint.
    pub fn build(config: BackboneConfig, n_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        let mut rng = substream(seed, streams::INIT);
        let d = config.embedding_dim;
        let backbone = match config.architecture {
            Architecture::TinyCnn => {
                let widths = [32, 64, 128, d];
                let mut c_in = 3;
                widths
                    .iter()
                    .enumerate()
                    .map(|(i, &c_out)| {
                        let block = ConvBlock::new(
                            &format!("backbone.{i}"),
                            c_in,
                            c_out,
                            3,
                            2,
                            1,
                            &mut rng,
                        );
                        c_in = c_out;
                        Stage::Conv(block)
                    })
                    .collect()
            }
            Architecture::Resnet18Like => {
                let mut stages = vec![
                    Stage::Conv(ConvBlock::new("backbone.stem", 3, 64, 7, 2, 3, &mut rng)),
                    Stage::Pool(MaxPool2d::default()),
                ];
                let mut c_in = 64;
                for (i, &c_out) in [64, 128, 256, d].iter().enumerate() {
                    let stride = if i == 0 { 1 } else { 2 };
                    stages.push(Stage::Residual(BasicBlock::new(
                        &format!("backbone.layer{}.0", i + 1),
                        c_in,
                        c_out,
                        stride,
                        &mut rng,
                    )));
                    stages.push(Stage::Residual(BasicBlock::new(
                        &format!("backbone.layer{}.1", i + 1),
                        c_out,
                        c_out,
                        1,
                        &mut rng,
                    )));
                    c_in = c_out;
                }
                stages
            }
        };
        let head = [
            Linear::new("head.proj0", d, d, &mut rng),
            Linear::new("head.proj1", d, d, &mut rng),
            Linear::new("head.classifier", d, n_classes, &mut rng),
        ];
        let mut model = Self {
            config,
            n_classes,
            backbone,
            head,
            backbone_frozen: false,
            norm_frozen: false,
            cache: None,
        };
        if let Some(path) = model.config.pretrained_weights.clone() {
            model.load_backbone_from(&path)?;
        }
        Ok(model)
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn backbone_eval(&self, x: &Feature<F>) -> Feature<F> {
        let mut iter = self.backbone.iter();
        let first = iter.next().expect("non-empty backbone");
        let mut y = first.layer().forward_eval(x);
        for stage in iter {
            y = stage.layer().forward_eval(&y);
        }
        y
    }

    fn head_eval(&self, pooled: &Matrix<F>) -> Matrix<F> {
        let mut h = self.head[0].forward_eval(pooled);
        relu_in_place(&mut h.data);
        let mut h = self.head[1].forward_eval(&h);
        relu_in_place(&mut h.data);
        self.head[2].forward_eval(&h)
    }

    /// Number of images processed per inference chunk.
    fn chunk_len(h: usize, w: usize) -> usize {
        (262_144 / (h * w).max(1)).max(1)
    }

    fn eval_chunked<T>(
        &self,
        images: &[&ImageBuffer],
        mut f: impl FnMut(Matrix<F>) -> Matrix<F>,
        cols: usize,
        convert: impl Fn(Matrix<F>) -> T,
    ) -> Result<T> {
        let first = images
            .first()
            .ok_or_else(|| Error::Argument("empty image batch".into()))?;
        let chunk = Self::chunk_len(first.height(), first.width());
        let mut out = Matrix::zeros(0, cols);
        for part in images.chunks(chunk) {
            let x = images_to_feature::<F>(part)?;
            let pooled = global_avg_pool(&self.backbone_eval(&x));
            let m = f(pooled);
            out.rows += m.rows;
            out.data.extend(m.data);
        }
        Ok(convert(out))
    }

    /// Eval-mode logits, one row per image.
    pub fn forward(&self, images: &[&ImageBuffer]) -> Result<Matrix<F>> {
        self.eval_chunked(images, |p| self.head_eval(&p), self.n_classes, |m| m)
    }

    /// Eval-mode pooled backbone features, one row per image.
    pub fn embed(&self, images: &[&ImageBuffer]) -> Result<Matrix<F>> {
        self.eval_chunked(images, |p| p, self.embedding_dim(), |m| m)
    }

    /// Embeddings as `f64` rows.
    pub fn embed_rows(&self, images: &[&ImageBuffer]) -> Result<Vec<Vec<f64>>> {
        let m = self.embed(images)?;
        Ok((0..m.rows)
            .map(|i| m.row(i).iter().map(|v| v.as_f64()).collect())
            .collect())
    }

    fn forward_train(&mut self, x: Feature<F>) -> Matrix<F> {
        let mut y = x;
        for stage in &mut self.backbone {
            y = stage.layer_mut().forward_train(y);
        }
        let pooled = global_avg_pool(&y);
        let mut h = self.head[0].forward_train(pooled);
        let m0 = relu_in_place(&mut h.data);
        let mut h = self.head[1].forward_train(h);
        let m1 = relu_in_place(&mut h.data);
        let logits = self.head[2].forward_train(h);
        self.cache = Some(TrainCache {
            pooled_shape: (y.c, y.n, y.h, y.w),
            masks: [m0, m1],
        });
        logits
    }

    fn backward(&mut self, grad: &Matrix<F>) {
        let cache = self.cache.take().expect("backward without forward");
        let [m0, m1] = cache.masks;
        let mut g = self.head[2].backward(grad);
        relu_backward(&mut g.data, &m1);
        let mut g = self.head[1].backward(&g);
        relu_backward(&mut g.data, &m0);
        let g = self.head[0].backward(&g);
        if self.backbone_frozen {
            return;
        }
        let (c, n, h, w) = cache.pooled_shape;
        let mut g = global_avg_pool_backward(&g, c, n, h, w);
        for stage in self.backbone.iter_mut().rev() {
            g = stage.layer_mut().backward(g);
        }
    }

    /// Training-mode loss without gradients (updates running statistics
    /// unless normalization is frozen).
    pub fn loss(&mut self, images: &[&ImageBuffer], labels: &[usize]) -> Result<StepStats> {
        self.check_labels(images, labels)?;
        let x = images_to_feature(images)?;
        let logits = self.forward_train(x);
        self.cache = None;
        let (loss, _, correct) = softmax_cross_entropy(&logits, labels);
        Ok(StepStats {
            loss: loss.as_f64(),
            correct,
            total: labels.len(),
        })
    }

    fn check_labels(&self, images: &[&ImageBuffer], labels: &[usize]) -> Result<()> {
        if images.len() != labels.len() {
            return Err(Error::Argument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {} classes",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Zeroes gradients, runs a training-mode forward/backward pass of the
    /// mean cross-entropy and leaves the gradients in the parameters.
    pub fn compute_gradients(
        &mut self,
        images: &[&ImageBuffer],
        labels: &[usize],
    ) -> Result<StepStats> {
        self.check_labels(images, labels)?;
        for p in self.params_mut() {
            p.zero_grad();
        }
        let x = images_to_feature(images)?;
        let logits = self.forward_train(x);
        let (loss, grad, correct) = softmax_cross_entropy(&logits, labels);
        self.backward(&grad);
        Ok(StepStats {
            loss: loss.as_f64(),
            correct,
            total: labels.len(),
        })
    }

    /// Freezes the backbone: its parameters stop updating and its
    /// normalization layers use fixed running statistics.
    pub fn freeze_backbone(&mut self, frozen: bool) {
        self.backbone_frozen = frozen;
        for p in self.backbone_params_mut() {
            p.frozen = frozen;
        }
        self.freeze_norm(frozen);
    }

    /// Freezes only normalization layers (affine parameters and statistics).
    pub fn freeze_norm(&mut self, frozen: bool) {
        self.norm_frozen = frozen;
        let backbone_frozen = self.backbone_frozen;
        for stage in &mut self.backbone {
            stage.layer_mut().set_norm_frozen(frozen);
        }
        for p in self.backbone_params_mut() {
            p.frozen = backbone_frozen || (frozen && p.kind.is_norm());
        }
    }

    pub fn is_backbone_frozen(&self) -> bool {
        self.backbone_frozen
    }

    pub fn is_norm_frozen(&self) -> bool {
        self.norm_frozen
    }

    pub fn backbone_params(&self) -> Vec<&Param<F>> {
        self.backbone
            .iter()
            .flat_map(|s| s.layer().params())
            .collect()
    }

    pub fn backbone_params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.backbone
            .iter_mut()
            .flat_map(|s| s.layer_mut().params_mut())
            .collect()
    }

    pub fn head_params(&self) -> Vec<&Param<F>> {
        self.head.iter().flat_map(|l| l.params()).collect()
    }

    /// SHA-256 over every parameter and buffer.
    pub fn param_hash(&self) -> String {
        let params = self.params();
        let buffers = self.buffers();
        sha_hex(
            params
                .iter()
                .map(|p| (p.name.as_str(), p.value.as_slice()))
                .chain(
                    buffers
                        .iter()
                        .map(|b| (b.name.as_str(), b.value.as_slice())),
                ),
        )
    }

    pub fn backbone_hash(&self) -> String {
        sha_hex(
            self.backbone_params()
                .into_iter()
                .map(|p| (p.name.as_str(), p.value.as_slice())),
        )
    }

    pub fn head_hash(&self) -> String {
        sha_hex(
            self.head_params()
                .into_iter()
                .map(|p| (p.name.as_str(), p.value.as_slice())),
        )
    }

    /// Hash of the normalization running statistics.
    pub fn norm_stats_hash(&self) -> String {
        sha_hex(
            self.buffers()
                .into_iter()
                .map(|b| (b.name.as_str(), b.value.as_slice())),
        )
    }

    /// Copies backbone tensors from a checkpoint, checking names and shapes.
    pub fn load_backbone_from(&mut self, path: &std::path::Path) -> Result<()> {
        let (header, tensors) = checkpoint::read_tensors(path)?;
        self.assign_tensors(&header, &tensors, path, false)
    }

    fn assign_tensors(
        &mut self,
        header: &CheckpointHeader,
        tensors: &[Vec<f32>],
        path: &std::path::Path,
        include_head: bool,
    ) -> Result<()> {
        let lookup: std::collections::HashMap<&str, (&[usize], &[f32])> = header
            .tensors
            .iter()
            .zip(tensors)
            .map(|(t, v)| (t.name.as_str(), (t.shape.as_slice(), v.as_slice())))
            .collect();
        let copy = |name: &str, shape: &[usize], dst: &mut Vec<F>| -> Result<()> {
            let (src_shape, values) = lookup
                .get(name)
                .ok_or_else(|| Error::Load(format!("{}: missing tensor {name}", path.display())))?;
            if *src_shape != shape {
                return Err(Error::Load(format!(
                    "{}: tensor {name} has shape {src_shape:?}, model expects {shape:?}",
                    path.display()
                )));
            }
            *dst = values
                .iter()
                .map(|&v| F::from_f64_lossy(f64::from(v)))
                .collect();
            Ok(())
        };
        for stage in &mut self.backbone {
            let layer = stage.layer_mut();
            for p in layer.params_mut() {
                copy(&p.name, &p.shape, &mut p.value)?;
            }
            for b in layer.buffers_mut() {
                let shape = [b.value.len()];
                copy(&b.name, &shape, &mut b.value)?;
            }
        }
        if include_head {
            for p in self.head.iter_mut().flat_map(|l| l.params_mut()) {
                copy(&p.name, &p.shape, &mut p.value)?;
            }
        }
        Ok(())
    }
}

impl<F: Real> HasParams<F> for Model<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut p = self.backbone_params();
        p.extend(self.head_params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut p: Vec<&mut Param<F>> = self
            .backbone
            .iter_mut()
            .flat_map(|s| s.layer_mut().params_mut())
            .collect();
        p.extend(self.head.iter_mut().flat_map(|l| l.params_mut()));
        p
    }

    fn buffers(&self) -> Vec<&Buffer<F>> {
        self.backbone
            .iter()
            .flat_map(|s| s.layer().buffers())
            .collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        self.backbone
            .iter_mut()
            .flat_map(|s| s.layer_mut().buffers_mut())
            .collect()
    }
}

#[cfg(test)]
mod tests;
