use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{snap_to_f32, Tensor};

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    /// Uniform He-style initialization, drawn at `f32` precision so a freshly
    /// built model round-trips through a checkpoint unchanged.
    fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt() as f32;
        Param::new(Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit) as f64))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    MaxPool2d,
    Dense,
    BatchNorm,
    Relu,
    Softmax,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Conv2d => 0,
            LayerKind::MaxPool2d => 1,
            LayerKind::Dense => 2,
            LayerKind::BatchNorm => 3,
            LayerKind::Relu => 4,
            LayerKind::Softmax => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => LayerKind::Conv2d,
            1 => LayerKind::MaxPool2d,
            2 => LayerKind::Dense,
            3 => LayerKind::BatchNorm,
            4 => LayerKind::Relu,
            5 => LayerKind::Softmax,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; the kernel stays inside the input.
    Valid,
    /// Zero padding so that `out = ceil(in / stride)`.
    Same,
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: Padding,
    /// `(kernel_rows, kernel_cols, in_channels, out_channels)`
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel.0 * kernel.1 * in_channels;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::he_uniform(&[kernel.0, kernel.1, in_channels, out_channels], fan_in, rng),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            cache: None,
        }
    }

    /// Builds a layer from explicit weights, mostly for tests and fixtures.
    pub fn from_weights(weight: Tensor, bias: Tensor, stride: usize, padding: Padding) -> Result<Self> {
        let &[kh, kw, cin, cout] = weight.shape() else {
            return Err(Error::shape("conv2d", "weight rank", 4, weight.rank()));
        };
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                "bias length",
                cout,
                format!("{:?}", bias.shape()),
            ));
        }
        Ok(Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: (kh, kw),
            stride,
            padding,
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    /// Output extent and leading pad along one spatial axis.
    fn axis_geometry(&self, len: usize, k: usize) -> Option<(usize, usize)> {
        match self.padding {
            Padding::Valid => (len >= k).then(|| ((len - k) / self.stride + 1, 0)),
            Padding::Same => {
                let out = len.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + k).saturating_sub(len);
                Some((out, total / 2))
            }
        }
    }

    fn geometry(&self, shape: &[usize]) -> Result<Geometry> {
        let &[batch, rows, cols, channels] = shape else {
            return Err(Error::shape(self.to_string(), "input rank", 4, shape.len()));
        };
        if channels != self.in_channels {
            return Err(Error::shape(
                self.to_string(),
                "input channels",
                self.in_channels,
                channels,
            ));
        }
        let (out_rows, pad_top) = self
            .axis_geometry(rows, self.kernel.0)
            .ok_or_else(|| Error::shape(self.to_string(), "input rows", format!(">= {}", self.kernel.0), rows))?;
        let (out_cols, pad_left) = self
            .axis_geometry(cols, self.kernel.1)
            .ok_or_else(|| Error::shape(self.to_string(), "input cols", format!(">= {}", self.kernel.1), cols))?;
        Ok(Geometry {
            batch,
            rows,
            cols,
            out_rows,
            out_cols,
            pad_top,
            pad_left,
        })
    }

    fn forward_impl(&self, input: &Tensor) -> Result<Tensor> {
        let g = self.geometry(input.shape())?;
        let (kh, kw) = self.kernel;
        let (cin, cout) = (self.in_channels, self.out_channels);
        let x = input.data();
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let mut out = vec![0.0; g.batch * g.out_rows * g.out_cols * cout];
        for n in 0..g.batch {
            for oy in 0..g.out_rows {
                for ox in 0..g.out_cols {
                    let o = ((n * g.out_rows + oy) * g.out_cols + ox) * cout;
                    let acc = &mut out[o..o + cout];
                    acc.copy_from_slice(b);
                    for ky in 0..kh {
                        let Some(iy) = (oy * self.stride + ky).checked_sub(g.pad_top).filter(|&v| v < g.rows) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = (ox * self.stride + kx).checked_sub(g.pad_left).filter(|&v| v < g.cols)
                            else {
                                continue;
                            };
                            let xi = ((n * g.rows + iy) * g.cols + ix) * cin;
                            let wi = (ky * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let a = x[xi + ci];
                                if a == 0.0 {
                                    continue;
                                }
                                let wrow = &w[wi + ci * cout..wi + (ci + 1) * cout];
                                for (acc, &wv) in acc.iter_mut().zip(wrow) {
                                    *acc += a * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![g.batch, g.out_rows, g.out_cols, cout], out)
    }

    fn backward_impl(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self.cache.take().ok_or_else(|| missing_cache(self))?;
        let g = self.geometry(input.shape())?;
        let (kh, kw) = self.kernel;
        let (cin, cout) = (self.in_channels, self.out_channels);
        expect_shape(self, grad_out, &[g.batch, g.out_rows, g.out_cols, cout])?;
        let x = input.data();
        let go = grad_out.data();
        let w = self.weight.value.data();
        let gw = self.weight.grad.data_mut();
        let mut gx = vec![0.0; input.len()];
        for n in 0..g.batch {
            for oy in 0..g.out_rows {
                for ox in 0..g.out_cols {
                    let o = ((n * g.out_rows + oy) * g.out_cols + ox) * cout;
                    let grow = &go[o..o + cout];
                    for ky in 0..kh {
                        let Some(iy) = (oy * self.stride + ky).checked_sub(g.pad_top).filter(|&v| v < g.rows) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = (ox * self.stride + kx).checked_sub(g.pad_left).filter(|&v| v < g.cols)
                            else {
                                continue;
                            };
                            let xi = ((n * g.rows + iy) * g.cols + ix) * cin;
                            let wi = (ky * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let a = x[xi + ci];
                                let r = wi + ci * cout;
                                let mut dx = 0.0;
                                for co in 0..cout {
                                    gw[r + co] += a * grow[co];
                                    dx += w[r + co] * grow[co];
                                }
                                gx[xi + ci] += dx;
                            }
                        }
                    }
                }
            }
        }
        let gb = self.bias.grad.data_mut();
        for chunk in go.chunks_exact(cout) {
            for (acc, &v) in gb.iter_mut().zip(chunk) {
                *acc += v;
            }
        }
        Tensor::new(input.shape().to_vec(), gx)
    }
}

struct Geometry {
    batch: usize,
    rows: usize,
    cols: usize,
    out_rows: usize,
    out_cols: usize,
    pad_top: usize,
    pad_left: usize,
}

// ---------------------------------------------------------------------------
// maxpool2d

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize) -> Self {
        MaxPool2d {
            size,
            stride,
            cache: None,
        }
    }

    /// Returns the pooled tensor and, for each output element, the flat index
    /// of the input element it was taken from.
    fn pool(&self, input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let &[batch, rows, cols, ch] = input.shape() else {
            return Err(Error::shape(self.to_string(), "input rank", 4, input.rank()));
        };
        if rows < self.size {
            return Err(Error::shape(
                self.to_string(),
                "input rows",
                format!(">= {}", self.size),
                rows,
            ));
        }
        if cols < self.size {
            return Err(Error::shape(
                self.to_string(),
                "input cols",
                format!(">= {}", self.size),
                cols,
            ));
        }
        let out_rows = (rows - self.size) / self.stride + 1;
        let out_cols = (cols - self.size) / self.stride + 1;
        let x = input.data();
        let mut out = Vec::with_capacity(batch * out_rows * out_cols * ch);
        let mut picks = Vec::with_capacity(out.capacity());
        for n in 0..batch {
            for oy in 0..out_rows {
                for ox in 0..out_cols {
                    for c in 0..ch {
                        let mut best = usize::MAX;
                        for dy in 0..self.size {
                            for dx in 0..self.size {
                                let idx = ((n * rows + oy * self.stride + dy) * cols + ox * self.stride + dx) * ch + c;
                                if best == usize::MAX || x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x[best]);
                        picks.push(best);
                    }
                }
            }
        }
        Ok((Tensor::new(vec![batch, out_rows, out_cols, ch], out)?, picks))
    }
}

// ---------------------------------------------------------------------------
// dense

/// Fully connected layer. Any input rank is accepted; all axes after the batch
/// axis are flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub units: usize,
    /// `(in_features, units)`
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Dense {
    pub fn new(in_features: usize, units: usize, rng: &mut impl Rng) -> Self {
        Dense {
            in_features,
            units,
            weight: Param::he_uniform(&[in_features, units], in_features, rng),
            bias: Param::new(Tensor::zeros(&[units])),
            cache: None,
        }
    }

    pub fn from_weights(weight: Tensor, bias: Tensor) -> Result<Self> {
        let &[fan_in, units] = weight.shape() else {
            return Err(Error::shape("dense", "weight rank", 2, weight.rank()));
        };
        if bias.shape() != [units] {
            return Err(Error::shape(
                "dense",
                "bias length",
                units,
                format!("{:?}", bias.shape()),
            ));
        }
        Ok(Dense {
            in_features: fan_in,
            units,
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    fn check(&self, input: &Tensor) -> Result<usize> {
        if input.rank() < 2 {
            return Err(Error::shape(self.to_string(), "input rank", ">= 2", input.rank()));
        }
        let features: usize = input.shape()[1..].iter().product();
        if features != self.in_features {
            return Err(Error::shape(
                self.to_string(),
                "input features",
                self.in_features,
                features,
            ));
        }
        Ok(input.shape()[0])
    }

    fn forward_impl(&self, input: &Tensor) -> Result<Tensor> {
        let batch = self.check(input)?;
        let (fi, u) = (self.in_features, self.units);
        let w = self.weight.value.data();
        let mut out = Vec::with_capacity(batch * u);
        for row in input.data().chunks_exact(fi) {
            let mut acc = self.bias.value.data().to_vec();
            for (i, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (acc, &wv) in acc.iter_mut().zip(&w[i * u..(i + 1) * u]) {
                    *acc += a * wv;
                }
            }
            out.extend(acc);
        }
        Tensor::new(vec![batch, u], out)
    }

    fn backward_impl(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self.cache.take().ok_or_else(|| missing_cache(self))?;
        let batch = input.shape()[0];
        let (fi, u) = (self.in_features, self.units);
        expect_shape(self, grad_out, &[batch, u])?;
        let w = self.weight.value.data();
        let gw = self.weight.grad.data_mut();
        let mut gx = vec![0.0; input.len()];
        for (n, (row, grow)) in input
            .data()
            .chunks_exact(fi)
            .zip(grad_out.data().chunks_exact(u))
            .enumerate()
        {
            for i in 0..fi {
                let a = row[i];
                let wrow = &w[i * u..(i + 1) * u];
                let gwrow = &mut gw[i * u..(i + 1) * u];
                let mut dx = 0.0;
                for k in 0..u {
                    gwrow[k] += a * grow[k];
                    dx += wrow[k] * grow[k];
                }
                gx[n * fi + i] = dx;
            }
        }
        let gb = self.bias.grad.data_mut();
        for grow in grad_out.data().chunks_exact(u) {
            for (acc, &v) in gb.iter_mut().zip(grow) {
                *acc += v;
            }
        }
        Tensor::new(input.shape().to_vec(), gx)
    }
}

// ---------------------------------------------------------------------------
// batchnorm

/// Batch normalization over the last axis. Training mode normalizes with
/// batch statistics and updates the running estimates; inference always uses
/// the stored running mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone, PartialEq)]
struct BnCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            eps: 1e-3,
            momentum: 0.9,
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            cache: None,
        }
    }

    fn check(&self, input: &Tensor) -> Result<()> {
        let last = *input.shape().last().unwrap_or(&0);
        if input.rank() < 2 || last != self.channels {
            return Err(Error::shape(self.to_string(), "channel axis", self.channels, last));
        }
        Ok(())
    }

    fn normalize(&self, input: &Tensor, mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor) {
        let c = self.channels;
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut normalized = input.clone();
        let mut out = input.clone();
        for (xh, y) in normalized
            .data_mut()
            .chunks_exact_mut(c)
            .zip(out.data_mut().chunks_exact_mut(c))
        {
            for k in 0..c {
                xh[k] = (xh[k] - mean[k]) * inv_std[k];
                y[k] = gamma[k] * xh[k] + beta[k];
            }
        }
        (normalized, out)
    }

    fn forward_impl(&self, input: &Tensor) -> Result<Tensor> {
        self.check(input)?;
        let eps = self.eps as f64;
        let inv_std: Vec<f64> = self.running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.normalize(input, self.running_mean.data(), &inv_std).1)
    }

    fn forward_train_impl(&mut self, input: &Tensor) -> Result<Tensor> {
        self.check(input)?;
        let c = self.channels;
        let m = (input.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for row in input.data().chunks_exact(c) {
            for k in 0..c {
                mean[k] += row[k];
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; c];
        for row in input.data().chunks_exact(c) {
            for k in 0..c {
                let d = row[k] - mean[k];
                var[k] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let eps = self.eps as f64;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (normalized, out) = self.normalize(input, &mean, &inv_std);

        let mom = self.momentum as f64;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *r = mom * *r + (1.0 - mom) * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&var) {
            *r = mom * *r + (1.0 - mom) * b;
        }
        snap_to_f32(self.running_mean.data_mut());
        snap_to_f32(self.running_var.data_mut());

        self.cache = Some(BnCache { normalized, inv_std });
        Ok(out)
    }

    fn backward_impl(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| missing_cache(self))?;
        expect_shape(self, grad_out, cache.normalized.shape())?;
        let c = self.channels;
        let m = (grad_out.len() / c) as f64;
        let gamma = self.gamma.value.data();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xh = vec![0.0; c];
        for (dy, xh) in grad_out
            .data()
            .chunks_exact(c)
            .zip(cache.normalized.data().chunks_exact(c))
        {
            for k in 0..c {
                sum_dy[k] += dy[k];
                sum_dy_xh[k] += dy[k] * xh[k];
            }
        }
        for k in 0..c {
            self.gamma.grad.data_mut()[k] += sum_dy_xh[k];
            self.beta.grad.data_mut()[k] += sum_dy[k];
        }
        let mut gx = grad_out.clone();
        for (g, xh) in gx
            .data_mut()
            .chunks_exact_mut(c)
            .zip(cache.normalized.data().chunks_exact(c))
        {
            for k in 0..c {
                g[k] = gamma[k] * cache.inv_std[k] * (g[k] - sum_dy[k] / m - xh[k] * sum_dy_xh[k] / m);
            }
        }
        Ok(gx)
    }
}

// ---------------------------------------------------------------------------
// element-wise activations

fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Softmax over the last axis of `input`.
pub fn softmax_last_axis(input: &Tensor) -> Tensor {
    let width = *input.shape().last().expect("softmax on a rank-0 tensor");
    let mut out = input.clone();
    for row in out.data_mut().chunks_exact_mut(width) {
        softmax_in_place(row);
    }
    out
}

/// Numerically stable softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Vector-Jacobian product of softmax given its output `y` and upstream `g`.
pub fn softmax_backward(y: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)).collect()
}

// ---------------------------------------------------------------------------
// the layer enum

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    MaxPool2d(MaxPool2d),
    Dense(Dense),
    BatchNorm(BatchNorm),
    Relu { cache: Option<Tensor> },
    Softmax { cache: Option<Tensor> },
}

impl Layer {
    pub fn relu() -> Self {
        Layer::Relu { cache: None }
    }

    pub fn softmax() -> Self {
        Layer::Softmax { cache: None }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::MaxPool2d(_) => LayerKind::MaxPool2d,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu { .. } => LayerKind::Relu,
            Layer::Softmax { .. } => LayerKind::Softmax,
        }
    }

    /// Inference-mode forward pass. Pure: never touches caches or statistics.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let out = match self {
            Layer::Conv2d(l) => l.forward_impl(input)?,
            Layer::MaxPool2d(l) => l.pool(input)?.0,
            Layer::Dense(l) => l.forward_impl(input)?,
            Layer::BatchNorm(l) => l.forward_impl(input)?,
            Layer::Relu { .. } => relu(input),
            Layer::Softmax { .. } => softmax_last_axis(input),
        };
        self.check_finite(out)
    }

    /// Training-mode forward pass; caches what `backward` needs.
    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = match self {
            Layer::Conv2d(l) => {
                let out = l.forward_impl(input)?;
                l.cache = Some(input.clone());
                out
            }
            Layer::MaxPool2d(l) => {
                let (out, picks) = l.pool(input)?;
                l.cache = Some((input.shape().to_vec(), picks));
                out
            }
            Layer::Dense(l) => {
                let out = l.forward_impl(input)?;
                l.cache = Some(input.clone());
                out
            }
            Layer::BatchNorm(l) => l.forward_train_impl(input)?,
            Layer::Relu { cache } => {
                let out = relu(input);
                *cache = Some(input.clone());
                out
            }
            Layer::Softmax { cache } => {
                let out = softmax_last_axis(input);
                *cache = Some(out.clone());
                out
            }
        };
        self.check_finite(out)
    }

    /// Propagates `grad_out` to the input, accumulating parameter gradients.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let name = self.to_string();
        match self {
            Layer::Conv2d(l) => l.backward_impl(grad_out),
            Layer::MaxPool2d(l) => {
                let (shape, picks) = l.cache.take().ok_or_else(|| missing(&name))?;
                if grad_out.len() != picks.len() {
                    return Err(Error::shape(name, "gradient length", picks.len(), grad_out.len()));
                }
                let mut gx = Tensor::zeros(&shape);
                for (&idx, &g) in picks.iter().zip(grad_out.data()) {
                    gx.data_mut()[idx] += g;
                }
                Ok(gx)
            }
            Layer::Dense(l) => l.backward_impl(grad_out),
            Layer::BatchNorm(l) => l.backward_impl(grad_out),
            Layer::Relu { cache } => {
                let input = cache.take().ok_or_else(|| missing(&name))?;
                expect_shape(&name, grad_out, input.shape())?;
                let mut gx = grad_out.clone();
                for (g, &x) in gx.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
                Ok(gx)
            }
            Layer::Softmax { cache } => {
                let y = cache.take().ok_or_else(|| missing(&name))?;
                expect_shape(&name, grad_out, y.shape())?;
                let width = *y.shape().last().unwrap();
                let data = y
                    .data()
                    .chunks_exact(width)
                    .zip(grad_out.data().chunks_exact(width))
                    .flat_map(|(yr, gr)| softmax_backward(yr, gr))
                    .collect();
                Tensor::new(y.shape().to_vec(), data)
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => Vec::new(),
        }
    }

    /// Integer hyperparameters as stored in checkpoints.
    pub fn hyperparameters(&self) -> Vec<u32> {
        match self {
            Layer::Conv2d(l) => vec![
                l.kernel.0 as u32,
                l.kernel.1 as u32,
                l.in_channels as u32,
                l.out_channels as u32,
                l.stride as u32,
                match l.padding {
                    Padding::Valid => 0,
                    Padding::Same => 1,
                },
            ],
            Layer::MaxPool2d(l) => vec![l.size as u32, l.stride as u32],
            Layer::Dense(l) => vec![l.in_features as u32, l.units as u32],
            Layer::BatchNorm(l) => vec![l.channels as u32, l.eps.to_bits(), l.momentum.to_bits()],
            Layer::Relu { .. } | Layer::Softmax { .. } => Vec::new(),
        }
    }

    /// Every stored tensor, trainable or not, in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Layer::BatchNorm(l) => vec![&l.gamma.value, &l.beta.value, &l.running_mean, &l.running_var],
            other => other.params().into_iter().map(|p| &p.value).collect(),
        }
    }

    /// Rebuilds a layer from checkpoint fields.
    pub fn from_parts(kind: LayerKind, hyper: &[u32], tensors: Vec<Tensor>) -> Result<Layer> {
        let bad = |reason: String| Error::Checkpoint(format!("{kind:?}: {reason}"));
        let need = |n: usize, got: usize, what: &str| {
            if n == got {
                Ok(())
            } else {
                Err(bad(format!("expected {n} {what}, found {got}")))
            }
        };
        let mut tensors = tensors.into_iter();
        let layer = match kind {
            LayerKind::Conv2d => {
                need(6, hyper.len(), "hyperparameters")?;
                need(2, tensors.len(), "tensors")?;
                let padding = match hyper[5] {
                    0 => Padding::Valid,
                    1 => Padding::Same,
                    p => return Err(bad(format!("unknown padding code {p}"))),
                };
                let conv = Conv2d::from_weights(
                    tensors.next().unwrap(),
                    tensors.next().unwrap(),
                    hyper[4] as usize,
                    padding,
                )
                .map_err(|e| bad(e.to_string()))?;
                let declared = [hyper[0], hyper[1], hyper[2], hyper[3]].map(|v| v as usize);
                if declared != [conv.kernel.0, conv.kernel.1, conv.in_channels, conv.out_channels] || conv.stride == 0 {
                    return Err(bad("hyperparameters disagree with weight shape".into()));
                }
                Layer::Conv2d(conv)
            }
            LayerKind::MaxPool2d => {
                need(2, hyper.len(), "hyperparameters")?;
                need(0, tensors.len(), "tensors")?;
                if hyper[0] == 0 || hyper[1] == 0 {
                    return Err(bad("zero pool size or stride".into()));
                }
                Layer::MaxPool2d(MaxPool2d::new(hyper[0] as usize, hyper[1] as usize))
            }
            LayerKind::Dense => {
                need(2, hyper.len(), "hyperparameters")?;
                need(2, tensors.len(), "tensors")?;
                let dense = Dense::from_weights(tensors.next().unwrap(), tensors.next().unwrap())
                    .map_err(|e| bad(e.to_string()))?;
                if [hyper[0] as usize, hyper[1] as usize] != [dense.in_features, dense.units] {
                    return Err(bad("hyperparameters disagree with weight shape".into()));
                }
                Layer::Dense(dense)
            }
            LayerKind::BatchNorm => {
                need(3, hyper.len(), "hyperparameters")?;
                need(4, tensors.len(), "tensors")?;
                let channels = hyper[0] as usize;
                let mut bn = BatchNorm::new(channels);
                bn.eps = f32::from_bits(hyper[1]);
                bn.momentum = f32::from_bits(hyper[2]);
                let parts: Vec<Tensor> = tensors.collect();
                if parts.iter().any(|t| t.shape() != [channels]) {
                    return Err(bad("statistics length disagrees with channel count".into()));
                }
                let [gamma, beta, mean, var]: [Tensor; 4] = parts.try_into().unwrap();
                bn.gamma = Param::new(gamma);
                bn.beta = Param::new(beta);
                bn.running_mean = mean;
                bn.running_var = var;
                Layer::BatchNorm(bn)
            }
            LayerKind::Relu | LayerKind::Softmax => {
                need(0, hyper.len(), "hyperparameters")?;
                need(0, tensors.len(), "tensors")?;
                if kind == LayerKind::Relu {
                    Layer::relu()
                } else {
                    Layer::softmax()
                }
            }
        };
        Ok(layer)
    }

    fn check_finite(&self, out: Tensor) -> Result<Tensor> {
        if out.all_finite() {
            Ok(out)
        } else {
            Err(Error::NonFinite {
                context: self.to_string(),
            })
        }
    }
}

impl fmt::Display for Conv2d {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "conv2d({}->{}, {}x{}, stride {})",
            self.in_channels, self.out_channels, self.kernel.0, self.kernel.1, self.stride
        )
    }
}

impl fmt::Display for MaxPool2d {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "maxpool2d({0}x{0}, stride {1})", self.size, self.stride)
    }
}

impl fmt::Display for Dense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dense({}->{})", self.in_features, self.units)
    }
}

impl fmt::Display for BatchNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "batchnorm({})", self.channels)
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv2d(l) => l.fmt(f),
            Layer::MaxPool2d(l) => l.fmt(f),
            Layer::Dense(l) => l.fmt(f),
            Layer::BatchNorm(l) => l.fmt(f),
            Layer::Relu { .. } => f.write_str("relu"),
            Layer::Softmax { .. } => f.write_str("softmax"),
        }
    }
}

fn missing(name: &str) -> Error {
    Error::invalid("backward call", format!("{name}: no cached forward pass"))
}

fn missing_cache(layer: &impl fmt::Display) -> Error {
    missing(&layer.to_string())
}

fn expect_shape(layer: &impl fmt::Display, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::shape(
            layer.to_string(),
            "gradient shape",
            format!("{shape:?}"),
            format!("{:?}", t.shape()),
        ));
    }
    Ok(())
}
