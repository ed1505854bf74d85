use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{
    gemm, relu_backward, relu_in_place, Buffer, Feature, HasParams, Layer, Matrix, Param,
    ParamKind, Real,
};
use crate::rng::Rng;

fn cast<F: Real>(values: Vec<f64>) -> Vec<F> {
    values.into_iter().map(F::from_f64_lossy).collect()
}

/// 2-D convolution without bias (every convolution here feeds a batch norm).
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<ConvCache<F>>,
}

#[derive(Debug, Clone)]
struct ConvCache<F> {
    col: Vec<F>,
    in_shape: (usize, usize, usize, usize),
}

impl<F: Real> Conv2d<F> {
    /// Kaiming-normal initialization (fan-out, ReLU gain).
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_out = (out_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_out).sqrt();
        let n = out_channels * in_channels * kernel * kernel;
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                ParamKind::Weight,
                cast(values),
            ),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Feature<F>) -> (Vec<F>, usize, usize) {
        let (ho, wo) = self.output_size(x.h, x.w);
        let k = self.kernel;
        let cols = x.n * ho * wo;
        let mut col = vec![F::zero(); x.c * k * k * cols];
        let (pad, s) = (self.padding as isize, self.stride as isize);
        for ci in 0..x.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for n in 0..x.n {
                        let src = &x.data[(ci * x.n + n) * x.h * x.w..][..x.h * x.w];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - pad;
                            let out = &mut dst[(n * ho + oy) * wo..][..wo];
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * x.w..][..x.w];
                            for (ox, o) in out.iter_mut().enumerate() {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix >= 0 && ix < x.w as isize {
                                    *o = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (col, ho, wo)
    }

    fn col2im(&self, col: &[F], shape: (usize, usize, usize, usize)) -> Feature<F> {
        let (c, n_batch, h, w) = shape;
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let cols = n_batch * ho * wo;
        let mut out = Feature::zeros(c, n_batch, h, w);
        let (pad, s) = (self.padding as isize, self.stride as isize);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for n in 0..n_batch {
                        let dst = &mut out.data[(ci * n_batch + n) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let g = &src[(n * ho + oy) * wo..][..wo];
                            let dst_row = &mut dst[iy as usize * w..][..w];
                            for (ox, &gv) in g.iter().enumerate() {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn apply(&self, x: &Feature<F>) -> (Feature<F>, Vec<F>) {
        assert_eq!(x.c, self.in_channels, "{} input channels", self.weight.name);
        let (col, ho, wo) = self.im2col(x);
        let kdim = self.in_channels * self.kernel * self.kernel;
        let cols = x.n * ho * wo;
        let mut out = Feature::zeros(self.out_channels, x.n, ho, wo);
        gemm(
            false,
            false,
            self.out_channels,
            cols,
            kdim,
            F::one(),
            &self.weight.value,
            &col,
            F::zero(),
            &mut out.data,
        );
        (out, col)
    }
}

impl<F: Real> HasParams<F> for Conv2d<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight]
    }
}

impl<F: Real> Layer<F> for Conv2d<F> {
    fn forward_train(&mut self, x: Feature<F>) -> Feature<F> {
        let (out, col) = self.apply(&x);
        self.cache = Some(ConvCache {
            col,
            in_shape: (x.c, x.n, x.h, x.w),
        });
        out
    }

    fn forward_eval(&self, x: &Feature<F>) -> Feature<F> {
        self.apply(x).0
    }

    fn backward(&mut self, grad: Feature<F>) -> Feature<F> {
        let cache = self.cache.take().expect("conv backward without forward");
        let kdim = self.in_channels * self.kernel * self.kernel;
        let cols = grad.n * grad.h * grad.w;
        // dW += G colᵀ
        gemm(
            false,
            true,
            self.out_channels,
            kdim,
            cols,
            F::one(),
            &grad.data,
            &cache.col,
            F::one(),
            &mut self.weight.grad,
        );
        // dcol = Wᵀ G
        let mut dcol = cache.col;
        gemm(
            true,
            false,
            kdim,
            cols,
            self.out_channels,
            F::one(),
            &self.weight.value,
            &grad.data,
            F::zero(),
            &mut dcol,
        );
        self.col2im(&dcol, cache.in_shape)
    }
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// When frozen the layer always normalizes with its running statistics and
/// those statistics never change.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Buffer<F>,
    pub running_var: Buffer<F>,
    pub momentum: f64,
    pub eps: f64,
    pub frozen: bool,
    cache: Option<NormCache<F>>,
}

#[derive(Debug, Clone)]
struct NormCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
    batch_stats: bool,
    shape: (usize, usize, usize, usize),
}

impl<F: Real> BatchNorm2d<F> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(
                format!("{name}.gamma"),
                vec![channels],
                ParamKind::NormScale,
                vec![F::one(); channels],
            ),
            beta: Param::new(
                format!("{name}.beta"),
                vec![channels],
                ParamKind::NormShift,
                vec![F::zero(); channels],
            ),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec![F::zero(); channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec![F::one(); channels],
            },
            momentum: 0.1,
            eps: 1e-5,
            frozen: false,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with the given per-channel statistics; returns `(y, xhat)`.
    fn normalize(&self, x: &Feature<F>, mean: &[F], inv_std: &[F]) -> (Feature<F>, Vec<F>) {
        let block = x.n * x.h * x.w;
        let mut out = x.clone();
        let mut xhat = vec![F::zero(); x.len()];
        for c in 0..x.c {
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let range = c * block..(c + 1) * block;
            for (o, xh) in out.data[range.clone()].iter_mut().zip(&mut xhat[range]) {
                *xh = (*o - mean[c]) * inv_std[c];
                *o = g * *xh + b;
            }
        }
        (out, xhat)
    }

    fn running_inv_std(&self) -> Vec<F> {
        let eps = F::from_f64_lossy(self.eps);
        self.running_var
            .value
            .iter()
            .map(|&v| F::one() / (v + eps).sqrt())
            .collect()
    }
}

impl<F: Real> HasParams<F> for BatchNorm2d<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn buffers(&self) -> Vec<&Buffer<F>> {
        vec![&self.running_mean, &self.running_var]
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

impl<F: Real> Layer<F> for BatchNorm2d<F> {
    fn forward_train(&mut self, x: Feature<F>) -> Feature<F> {
        assert_eq!(x.c, self.channels());
        let shape = (x.c, x.n, x.h, x.w);
        if self.frozen {
            let inv_std = self.running_inv_std();
            let (out, xhat) = self.normalize(&x, &self.running_mean.value, &inv_std);
            self.cache = Some(NormCache {
                xhat,
                inv_std,
                batch_stats: false,
                shape,
            });
            return out;
        }
        let block = x.n * x.h * x.w;
        let m = F::from_usize(block).expect("size");
        let eps = F::from_f64_lossy(self.eps);
        let momentum = F::from_f64_lossy(self.momentum);
        let mut mean = vec![F::zero(); x.c];
        let mut inv_std = vec![F::zero(); x.c];
        for c in 0..x.c {
            let vals = &x.data[c * block..(c + 1) * block];
            let mu = vals.iter().copied().sum::<F>() / m;
            let var = vals.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / m;
            mean[c] = mu;
            inv_std[c] = F::one() / (var + eps).sqrt();
            let unbiased = if block > 1 {
                var * m / (m - F::one())
            } else {
                var
            };
            let rm = &mut self.running_mean.value[c];
            *rm = (F::one() - momentum) * *rm + momentum * mu;
            let rv = &mut self.running_var.value[c];
            *rv = (F::one() - momentum) * *rv + momentum * unbiased;
        }
        let (out, xhat) = self.normalize(&x, &mean, &inv_std);
        self.cache = Some(NormCache {
            xhat,
            inv_std,
            batch_stats: true,
            shape,
        });
        out
    }

    fn forward_eval(&self, x: &Feature<F>) -> Feature<F> {
        let inv_std = self.running_inv_std();
        self.normalize(x, &self.running_mean.value, &inv_std).0
    }

    fn backward(&mut self, grad: Feature<F>) -> Feature<F> {
        let cache = self.cache.take().expect("norm backward without forward");
        let (c_n, n, h, w) = cache.shape;
        let block = n * h * w;
        let m = F::from_usize(block).expect("size");
        let mut dx = grad;
        for c in 0..c_n {
            let range = c * block..(c + 1) * block;
            let xhat = &cache.xhat[range.clone()];
            let dy = &mut dx.data[range];
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for (&g, &xh) in dy.iter().zip(xhat) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
            self.gamma.grad[c] += sum_dy_xhat;
            self.beta.grad[c] += sum_dy;
            let scale = self.gamma.value[c] * cache.inv_std[c];
            if cache.batch_stats {
                for (g, &xh) in dy.iter_mut().zip(xhat) {
                    *g = scale * (*g - sum_dy / m - xh * sum_dy_xhat / m);
                }
            } else {
                for g in dy.iter_mut() {
                    *g *= scale;
                }
            }
        }
        dx
    }

    fn set_norm_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}

/// 3x3 / stride 2 / pad 1 max pooling.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    argmax: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    const K: usize = 3;
    const S: usize = 2;
    const P: usize = 1;

    fn output_size(h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * Self::P - Self::K) / Self::S + 1,
            (w + 2 * Self::P - Self::K) / Self::S + 1,
        )
    }

    fn apply<F: Real>(x: &Feature<F>) -> (Feature<F>, Vec<usize>) {
        let (ho, wo) = Self::output_size(x.h, x.w);
        let mut out = Feature::zeros(x.c, x.n, ho, wo);
        let mut idx = vec![0usize; out.len()];
        for plane in 0..x.c * x.n {
            let src = &x.data[plane * x.h * x.w..][..x.h * x.w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut best_i = 0;
                    for ky in 0..Self::K {
                        let iy = (oy * Self::S + ky) as isize - Self::P as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..Self::K {
                            let ix = (ox * Self::S + kx) as isize - Self::P as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let i = iy as usize * x.w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    out.data[o] = best;
                    idx[o] = plane * x.h * x.w + best_i;
                }
            }
        }
        (out, idx)
    }
}

impl<F: Real> HasParams<F> for MaxPool2d {
    fn params(&self) -> Vec<&Param<F>> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        Vec::new()
    }
}

impl<F: Real> Layer<F> for MaxPool2d {
    fn forward_train(&mut self, x: Feature<F>) -> Feature<F> {
        let (out, idx) = Self::apply(&x);
        self.argmax = Some((idx, (x.c, x.n, x.h, x.w)));
        out
    }

    fn forward_eval(&self, x: &Feature<F>) -> Feature<F> {
        Self::apply(x).0
    }

    fn backward(&mut self, grad: Feature<F>) -> Feature<F> {
        let (idx, (c, n, h, w)) = self.argmax.take().expect("pool backward without forward");
        let mut dx = Feature::zeros(c, n, h, w);
        for (g, &i) in grad.data.iter().zip(&idx) {
            dx.data[i] += *g;
        }
        dx
    }
}

/// Convolution, batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<F> {
    pub conv: Conv2d<F>,
    pub norm: BatchNorm2d<F>,
    mask: Option<Vec<bool>>,
}

impl<F: Real> ConvBlock<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                rng,
            ),
            norm: BatchNorm2d::new(&format!("{name}.bn"), out_channels),
            mask: None,
        }
    }
}

impl<F: Real> HasParams<F> for ConvBlock<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut p = self.conv.params();
        p.extend(self.norm.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut p = self.conv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }
    fn buffers(&self) -> Vec<&Buffer<F>> {
        self.norm.buffers()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        self.norm.buffers_mut()
    }
}

impl<F: Real> Layer<F> for ConvBlock<F> {
    fn forward_train(&mut self, x: Feature<F>) -> Feature<F> {
        let y = self.conv.forward_train(x);
        let mut y = self.norm.forward_train(y);
        self.mask = Some(relu_in_place(&mut y.data));
        y
    }

    fn forward_eval(&self, x: &Feature<F>) -> Feature<F> {
        let y = self.conv.forward_eval(x);
        let mut y = self.norm.forward_eval(&y);
        relu_in_place(&mut y.data);
        y
    }

    fn backward(&mut self, mut grad: Feature<F>) -> Feature<F> {
        let mask = self.mask.take().expect("block backward without forward");
        relu_backward(&mut grad.data, &mask);
        let g = self.norm.backward(grad);
        self.conv.backward(g)
    }

    fn set_norm_frozen(&mut self, frozen: bool) {
        self.norm.set_norm_frozen(frozen);
    }
}

/// ResNet basic block: two 3x3 conv/BN pairs plus an identity or projected
/// shortcut, followed by ReLU.
#[derive(Debug, Clone)]
pub struct BasicBlock<F> {
    conv1: ConvBlock<F>,
    conv2: Conv2d<F>,
    norm2: BatchNorm2d<F>,
    shortcut: Option<(Conv2d<F>, BatchNorm2d<F>)>,
    mask: Option<Vec<bool>>,
}

impl<F: Real> BasicBlock<F> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let conv1 = ConvBlock::new(
            &format!("{name}.0"),
            in_channels,
            out_channels,
            3,
            stride,
            1,
            rng,
        );
        let conv2 = Conv2d::new(
            &format!("{name}.1.conv"),
            out_channels,
            out_channels,
            3,
            1,
            1,
            rng,
        );
        let norm2 = BatchNorm2d::new(&format!("{name}.1.bn"), out_channels);
        let shortcut = (stride != 1 || in_channels != out_channels).then(|| {
            (
                Conv2d::new(
                    &format!("{name}.down.conv"),
                    in_channels,
                    out_channels,
                    1,
                    stride,
                    0,
                    rng,
                ),
                BatchNorm2d::new(&format!("{name}.down.bn"), out_channels),
            )
        });
        Self {
            conv1,
            conv2,
            norm2,
            shortcut,
            mask: None,
        }
    }
}

impl<F: Real> HasParams<F> for BasicBlock<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p.extend(self.norm2.params());
        if let Some((c, n)) = &self.shortcut {
            p.extend(c.params());
            p.extend(n.params());
        }
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p.extend(self.norm2.params_mut());
        if let Some((c, n)) = &mut self.shortcut {
            p.extend(c.params_mut());
            p.extend(n.params_mut());
        }
        p
    }
    fn buffers(&self) -> Vec<&Buffer<F>> {
        let mut b = self.conv1.buffers();
        b.extend(self.norm2.buffers());
        if let Some((_, n)) = &self.shortcut {
            b.extend(n.buffers());
        }
        b
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        let mut b = self.conv1.buffers_mut();
        b.extend(self.norm2.buffers_mut());
        if let Some((_, n)) = &mut self.shortcut {
            b.extend(n.buffers_mut());
        }
        b
    }
}

impl<F: Real> Layer<F> for BasicBlock<F> {
    fn forward_train(&mut self, x: Feature<F>) -> Feature<F> {
        let identity = match &mut self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward_train(x.clone());
                norm.forward_train(s)
            }
            None => x.clone(),
        };
        let y = self.conv1.forward_train(x);
        let y = self.conv2.forward_train(y);
        let mut y = self.norm2.forward_train(y);
        for (v, s) in y.data.iter_mut().zip(&identity.data) {
            *v += *s;
        }
        self.mask = Some(relu_in_place(&mut y.data));
        y
    }

    fn forward_eval(&self, x: &Feature<F>) -> Feature<F> {
        let y = self.conv1.forward_eval(x);
        let y = self.conv2.forward_eval(&y);
        let mut y = self.norm2.forward_eval(&y);
        match &self.shortcut {
            Some((conv, norm)) => {
                let s = norm.forward_eval(&conv.forward_eval(x));
                for (v, s) in y.data.iter_mut().zip(&s.data) {
                    *v += *s;
                }
            }
            None => {
                for (v, s) in y.data.iter_mut().zip(&x.data) {
                    *v += *s;
                }
            }
        }
        relu_in_place(&mut y.data);
        y
    }

    fn backward(&mut self, mut grad: Feature<F>) -> Feature<F> {
        let mask = self.mask.take().expect("block backward without forward");
        relu_backward(&mut grad.data, &mask);
        let skip = match &mut self.shortcut {
            Some((conv, norm)) => {
                let g = norm.backward(grad.clone());
                conv.backward(g)
            }
            None => grad.clone(),
        };
        let g = self.norm2.backward(grad);
        let g = self.conv2.backward(g);
        let mut dx = self.conv1.backward(g);
        for (v, s) in dx.data.iter_mut().zip(&skip.data) {
            *v += *s;
        }
        dx
    }

    fn set_norm_frozen(&mut self, frozen: bool) {
        self.conv1.set_norm_frozen(frozen);
        self.norm2.set_norm_frozen(frozen);
        if let Some((_, n)) = &mut self.shortcut {
            n.set_norm_frozen(frozen);
        }
    }
}

/// Fully connected layer on `N x in` matrices.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    cache: Option<Matrix<F>>,
}

impl<F: Real> Linear<F> {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialization.
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| -> Vec<F> {
            cast((0..n).map(|_| rng.random_range(-bound..bound)).collect())
        };
        let w = draw(inputs * outputs);
        let b = draw(outputs);
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                vec![outputs, inputs],
                ParamKind::Weight,
                w,
            ),
            bias: Param::new(format!("{name}.bias"), vec![outputs], ParamKind::Bias, b),
            cache: None,
        }
    }

    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    pub fn inputs(&self) -> usize {
        self.weight.len() / self.bias.len()
    }

    pub fn forward_eval(&self, x: &Matrix<F>) -> Matrix<F> {
        assert_eq!(x.cols, self.inputs(), "{} inputs", self.weight.name);
        let mut out = Matrix::zeros(x.rows, self.outputs());
        for row in out.data.chunks_exact_mut(self.outputs()) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            false,
            true,
            x.rows,
            self.outputs(),
            self.inputs(),
            F::one(),
            &x.data,
            &self.weight.value,
            F::one(),
            &mut out.data,
        );
        out
    }

    pub fn forward_train(&mut self, x: Matrix<F>) -> Matrix<F> {
        let out = self.forward_eval(&x);
        self.cache = Some(x);
        out
    }

    pub fn backward(&mut self, grad: &Matrix<F>) -> Matrix<F> {
        let x = self.cache.take().expect("linear backward without forward");
        let (n, o, i) = (x.rows, self.outputs(), self.inputs());
        gemm(
            true,
            false,
            o,
            i,
            n,
            F::one(),
            &grad.data,
            &x.data,
            F::one(),
            &mut self.weight.grad,
        );
        for row in grad.data.chunks_exact(o) {
            for (b, g) in self.bias.grad.iter_mut().zip(row) {
                *b += *g;
            }
        }
        let mut dx = Matrix::zeros(n, i);
        gemm(
            false,
            false,
            n,
            i,
            o,
            F::one(),
            &grad.data,
            &self.weight.value,
            F::zero(),
            &mut dx.data,
        );
        dx
    }
}

impl<F: Real> HasParams<F> for Linear<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn naive_conv(x: &Feature<f64>, conv: &Conv2d<f64>) -> Feature<f64> {
        let (ho, wo) = conv.output_size(x.h, x.w);
        let k = conv.kernel;
        let mut out = Feature::zeros(conv.out_channels, x.n, ho, wo);
        for co in 0..conv.out_channels {
            for n in 0..x.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy =
                                        (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix =
                                        (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize
                                    {
                                        continue;
                                    }
                                    let xv = x.data
                                        [((ci * x.n + n) * x.h + iy as usize) * x.w + ix as usize];
                                    let wv = conv.weight.value[((co * x.c + ci) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data[((co * x.n + n) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_feature(c: usize, n: usize, h: usize, w: usize, rng: &mut Rng) -> Feature<f64> {
        Feature {
            c,
            n,
            h,
            w,
            data: (0..c * n * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        }
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = substream(0, "conv");
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 2, 0), (7, 2, 3)] {
            let conv = Conv2d::<f64>::new("c", 3, 4, k, s, p, &mut rng);
            let x = random_feature(3, 2, 9, 8, &mut rng);
            let a = conv.forward_eval(&x);
            let b = naive_conv(&x, &conv);
            assert!(a.same_shape(&b));
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    /// Checks `backward` against central differences of `sum(w * layer(x))`.
    fn check_input_grad(layer: &mut dyn Layer<f64>, x: Feature<f64>, rng: &mut Rng) {
        let y = layer.forward_train(x.clone());
        let weights: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Feature {
            data: weights.clone(),
            ..y.clone()
        };
        let dx = layer.backward(g);
        let h = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fp: f64 = layer
                .forward_train(xp)
                .data
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum();
            let fm: f64 = layer
                .forward_train(xm)
                .data
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - dx.data[i]).abs() < 1e-5 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                dx.data[i]
            );
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = substream(1, "conv");
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, &mut rng);
        let x = random_feature(2, 2, 7, 6, &mut rng);
        check_input_grad(&mut conv, x, &mut rng);
    }

    #[test]
    fn batchnorm_input_gradient_both_modes() {
        let mut rng = substream(2, "bn");
        let mut bn = BatchNorm2d::<f64>::new("bn", 3);
        bn.gamma.value = vec![0.5, 1.5, -0.7];
        let x = random_feature(3, 4, 3, 3, &mut rng);
        check_input_grad(&mut bn, x.clone(), &mut rng);
        bn.frozen = true;
        bn.running_mean.value = vec![0.1, -0.2, 0.3];
        check_input_grad(&mut bn, x, &mut rng);
    }

    #[test]
    fn basic_block_input_gradient() {
        let mut rng = substream(3, "block");
        let mut block = BasicBlock::<f64>::new("b", 2, 4, 2, &mut rng);
        let x = random_feature(2, 3, 6, 6, &mut rng);
        check_input_grad(&mut block, x, &mut rng);
        let mut block = BasicBlock::<f64>::new("b", 3, 3, 1, &mut rng);
        let x = random_feature(3, 2, 5, 5, &mut rng);
        check_input_grad(&mut block, x, &mut rng);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut rng = substream(4, "pool");
        let mut pool = MaxPool2d::default();
        let x = random_feature(2, 2, 7, 7, &mut rng);
        check_input_grad(&mut pool, x, &mut rng);
    }

    #[test]
    fn frozen_norm_keeps_running_stats() {
        let mut rng = substream(5, "bn");
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        bn.frozen = true;
        let before = bn.running_mean.value.clone();
        let _ = bn.forward_train(random_feature(2, 4, 3, 3, &mut rng));
        assert_eq!(before, bn.running_mean.value);
        bn.frozen = false;
        let _ = bn.forward_train(random_feature(2, 4, 3, 3, &mut rng));
        assert_ne!(before, bn.running_mean.value);
    }
}
