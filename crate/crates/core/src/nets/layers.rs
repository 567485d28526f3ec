//! Layers with explicit forward and backward passes.
//!
//! `forward_train` caches whatever the matching `backward` needs and
//! accumulates parameter gradients into [`Param::grad`]; `infer` is the
//! cache-free path used for evaluation and by frozen target networks.

use super::tensor::{gemm, Tensor};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Running statistics are stored as non-trainable params so they travel
    /// with checkpoints and EMA updates but are skipped by optimizers.
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(value.len(), shape.iter().product::<usize>());
        let len = value.len();
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; len],
            trainable: true,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![0.0; len])
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, fill: f32) -> Self {
        let len = shape.iter().product();
        let mut p = Self::new(name, shape, vec![fill; len]);
        p.trainable = false;
        p
    }

    /// He-normal initialization for a ReLU network.
    pub fn kaiming(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut RngStream) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let len = shape.iter().product();
        let value = (0..len).map(|_| (rng.normal() * std) as f32).collect();
        Self::new(name, shape, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub trait Layer: Send + Sync {
    /// Forward pass that records what `backward` needs.
    fn forward_train(&mut self, x: &Tensor) -> Tensor;
    /// Forward pass without caching; batch-norm uses running statistics.
    fn infer(&self, x: &Tensor) -> Tensor;
    /// Consumes the cache of the last `forward_train`, accumulates parameter
    /// gradients and returns the input gradient.
    fn backward(&mut self, grad_out: &Tensor) -> Tensor;
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    /// `(C, H, W)` of the output for a given input.
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3];
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Debug)]
struct ConvGeom {
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
}

impl ConvGeom {
    fn out_len(&self, len: usize) -> usize {
        let eff = self.dilation * (self.k - 1) + 1;
        (len + 2 * self.pad - eff) / self.stride + 1
    }

    /// Output columns `x0..x1` whose tap `kj` lands inside a row of width `w`.
    fn valid_cols(&self, kj: usize, w: usize, ow: usize) -> (usize, usize) {
        let off = kj * self.dilation;
        let x0 = if off >= self.pad {
            0
        } else {
            (self.pad - off).div_ceil(self.stride)
        };
        let x1 = if w + self.pad > off {
            (w + self.pad - off).div_ceil(self.stride).min(ow)
        } else {
            0
        };
        (x0, x1.max(x0))
    }

    /// Column matrix `[cin*k*k, oh*ow]` of sample `b` written into `cols`.
    fn im2col(&self, x: &Tensor, b: usize, oh: usize, ow: usize, cols: &mut [f32]) {
        let (h, w) = (x.h(), x.w());
        let p = oh * ow;
        let kk = self.k * self.k;
        cols.fill(0.0);
        let data = x.data();
        for ci in 0..self.cin {
            let src = &data[(b * self.cin + ci) * h * w..(b * self.cin + ci + 1) * h * w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * kk + ki * self.k + kj) * p;
                    let dst = &mut cols[row..row + p];
                    for y in 0..oh {
                        let iy = (y * self.stride + ki * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[y * ow..(y + 1) * ow];
                        let (x0, x1) = self.valid_cols(kj, w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = x0 * self.stride + kj * self.dilation - self.pad;
                        if self.stride == 1 {
                            drow[x0..x1].copy_from_slice(&srow[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for (i, d) in drow[x0..x1].iter_mut().enumerate() {
                                *d = srow[ix0 + i * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back into sample `b` of `out`.
    fn col2im(&self, cols: &[f32], out: &mut Tensor, b: usize, oh: usize, ow: usize) {
        let (h, w) = (out.h(), out.w());
        let p = oh * ow;
        let kk = self.k * self.k;
        let data = out.data_mut();
        for ci in 0..self.cin {
            let dst = &mut data[(b * self.cin + ci) * h * w..(b * self.cin + ci + 1) * h * w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * kk + ki * self.k + kj) * p;
                    let src = &cols[row..row + p];
                    for y in 0..oh {
                        let iy = (y * self.stride + ki * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let (x0, x1) = self.valid_cols(kj, w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let base = iy as usize * w + x0 * self.stride + kj * self.dilation - self.pad;
                        let srow = &src[y * ow + x0..y * ow + x1];
                        if self.stride == 1 {
                            for (d, v) in dst[base..base + srow.len()].iter_mut().zip(srow) {
                                *d += v;
                            }
                        } else {
                            for (i, v) in srow.iter().enumerate() {
                                dst[base + i * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    cout: usize,
    geom: ConvGeom,
    cache: Option<Tensor>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
        rng: &mut RngStream,
    ) -> Self {
        let pad = dilation * (k - 1) / 2;
        let fan_in = cin * k * k;
        Self {
            weight: Param::kaiming(format!("{name}.weight"), vec![cout, cin, k, k], fan_in, rng),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), vec![cout])),
            cout,
            geom: ConvGeom {
                cin,
                k,
                stride,
                pad,
                dilation,
            },
            cache: None,
        }
    }

    fn compute(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.geom.cin, "conv input channels");
        let oh = self.geom.out_len(x.h());
        let ow = self.geom.out_len(x.w());
        let p = oh * ow;
        let kdim = self.geom.cin * self.geom.k * self.geom.k;
        let mut cols = vec![0.0f32; kdim * p];
        let mut out = Tensor::zeros([x.n(), self.cout, oh, ow]);
        for s in 0..x.n() {
            let dst = &mut out.data_mut()[s * self.cout * p..(s + 1) * self.cout * p];
            if let Some(b) = &self.bias {
                for (co, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(b.value[co]);
                }
            }
            if self.geom.k == 1 && self.geom.stride == 1 && self.geom.pad == 0 {
                let src = &x.data()[s * kdim * p..(s + 1) * kdim * p];
                gemm(false, false, self.cout, kdim, p, 1.0, &self.weight.value, src, 1.0, dst);
            } else {
                self.geom.im2col(x, s, oh, ow, &mut cols);
                gemm(
                    false,
                    false,
                    self.cout,
                    kdim,
                    p,
                    1.0,
                    &self.weight.value,
                    &cols,
                    1.0,
                    dst,
                );
            }
        }
        out
    }
}

impl Layer for Conv2d {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let out = self.compute(x);
        self.cache = Some(x.clone());
        out
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        self.compute(x)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.cache.take().expect("backward without forward_train");
        let (oh, ow) = (grad_out.h(), grad_out.w());
        let p = oh * ow;
        let kdim = self.geom.cin * self.geom.k * self.geom.k;
        let pointwise = self.geom.k == 1 && self.geom.stride == 1 && self.geom.pad == 0;
        let mut cols = vec![0.0f32; kdim * p];
        let mut dcols = vec![0.0f32; kdim * p];
        let mut dx = Tensor::zeros(x.shape());
        for s in 0..x.n() {
            let dy = &grad_out.data()[s * self.cout * p..(s + 1) * self.cout * p];
            if let Some(b) = &mut self.bias {
                for (co, chunk) in dy.chunks(p).enumerate() {
                    b.grad[co] += chunk.iter().sum::<f32>();
                }
            }
            if pointwise {
                let src = &x.data()[s * kdim * p..(s + 1) * kdim * p];
                gemm(
                    false,
                    true,
                    self.cout,
                    p,
                    kdim,
                    1.0,
                    dy,
                    src,
                    1.0,
                    &mut self.weight.grad,
                );
                let dst = &mut dx.data_mut()[s * kdim * p..(s + 1) * kdim * p];
                gemm(true, false, kdim, self.cout, p, 1.0, &self.weight.value, dy, 0.0, dst);
            } else {
                self.geom.im2col(&x, s, oh, ow, &mut cols);
                gemm(
                    false,
                    true,
                    self.cout,
                    p,
                    kdim,
                    1.0,
                    dy,
                    &cols,
                    1.0,
                    &mut self.weight.grad,
                );
                gemm(
                    true,
                    false,
                    kdim,
                    self.cout,
                    p,
                    1.0,
                    &self.weight.value,
                    dy,
                    0.0,
                    &mut dcols,
                );
                self.geom.col2im(&dcols, &mut dx, s, oh, ow);
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.iter()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.iter_mut()).collect()
    }

    fn output_shape(&self, [_, h, w]: [usize; 3]) -> [usize; 3] {
        [self.cout, self.geom.out_len(h), self.geom.out_len(w)]
    }
}

// ---------------------------------------------------------------------------
// Pointwise and pooling layers

#[derive(Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let out = self.infer(x);
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        out
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect())
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("backward without forward_train");
        let data = grad_out
            .data()
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Tensor::from_vec(grad_out.shape(), data)
    }

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }
}

struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: [usize; 4],
}

/// Per-channel batch normalization over `(N, H, W)`.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    momentum: f32,
    eps: f32,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        let mut gamma = Param::zeros(format!("{name}.gamma"), vec![channels]);
        gamma.value.iter_mut().for_each(|v| *v = 1.0);
        Self {
            gamma,
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: Param::buffer(format!("{name}.running_mean"), vec![channels], 0.0),
            running_var: Param::buffer(format!("{name}.running_var"), vec![channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = vec![0.0f32; x.data().len()];
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for s in 0..n {
                sum += x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            let mean = sum / m;
            let mut var = 0.0f64;
            for s in 0..n {
                var += x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>();
            }
            var /= m;
            let is = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[ch] = is as f32;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for s in 0..n {
                let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                for i in range {
                    let xh = ((x.data()[i] as f64 - mean) * is) as f32;
                    xhat[i] = xh;
                    out.data_mut()[i] = g * xh + b;
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let mom = self.momentum;
            self.running_mean.value[ch] = (1.0 - mom) * self.running_mean.value[ch] + mom * mean as f32;
            self.running_var.value[ch] = (1.0 - mom) * self.running_var.value[ch] + mom * unbiased as f32;
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            shape: x.shape(),
        });
        out
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let mut out = x.clone();
        for ch in 0..c {
            let is = 1.0 / (self.running_var.value[ch] + self.eps).sqrt();
            let (g, b, mu) = (self.gamma.value[ch], self.beta.value[ch], self.running_mean.value[ch]);
            for s in 0..n {
                for v in &mut out.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                    *v = g * (*v - mu) * is + b;
                }
            }
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("backward without forward_train");
        let [n, c, h, w] = cache.shape;
        let hw = h * w;
        let m = (n * hw) as f64;
        let g = grad_out.data();
        let mut dx = Tensor::zeros(cache.shape);
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for s in 0..n {
                for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                    sum_dy += g[i] as f64;
                    sum_dy_xhat += g[i] as f64 * cache.xhat[i] as f64;
                }
            }
            self.beta.grad[ch] += sum_dy as f32;
            self.gamma.grad[ch] += sum_dy_xhat as f32;
            let gamma = self.gamma.value[ch] as f64;
            let is = cache.inv_std[ch] as f64;
            for s in 0..n {
                for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                    let v = gamma * is / m * (m * g[i] as f64 - sum_dy - cache.xhat[i] as f64 * sum_dy_xhat);
                    dx.data_mut()[i] = v as f32;
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }
}

pub struct MaxPool2d {
    k: usize,
    stride: usize,
    pad: usize,
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            k,
            stride,
            pad,
            cache: None,
        }
    }

    fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.k) / self.stride + 1
    }

    fn compute(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (self.out_len(h), self.out_len(w));
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut arg = vec![0usize; n * c * oh * ow];
        let xd = x.data();
        for plane in 0..n * c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0;
                    for ki in 0..self.k {
                        let iy = (y * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.k {
                            let ix = (xo * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = plane * h * w + iy as usize * w + ix as usize;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = plane * oh * ow + y * ow + xo;
                    out.data_mut()[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        (out, arg)
    }
}

impl Layer for MaxPool2d {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (out, arg) = self.compute(x);
        self.cache = Some((arg, x.shape()));
        out
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        self.compute(x).0
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (arg, shape) = self.cache.take().expect("backward without forward_train");
        let mut dx = Tensor::zeros(shape);
        for (o, &i) in arg.iter().enumerate() {
            dx.data_mut()[i] += grad_out.data()[o];
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn output_shape(&self, [c, h, w]: [usize; 3]) -> [usize; 3] {
        [c, self.out_len(h), self.out_len(w)]
    }
}

/// `N x C x H x W -> N x C x 1 x 1`.
#[derive(Default)]
pub struct GlobalAvgPool {
    shape: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalAvgPool {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.shape = Some(x.shape());
        self.infer(x)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let hw = (h * w) as f32;
        let data = x
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f32>() / hw)
            .collect();
        Tensor::from_vec([n, c, 1, 1], data)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let shape = self.shape.take().expect("backward without forward_train");
        let hw = shape[2] * shape[3];
        let mut dx = Tensor::zeros(shape);
        for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(grad_out.data()) {
            plane.iter_mut().for_each(|v| *v = g / hw as f32);
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn output_shape(&self, [c, _, _]: [usize; 3]) -> [usize; 3] {
        [c, 1, 1]
    }
}

/// Fully connected layer on flattened samples; output is `N x out x 1 x 1`.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    din: usize,
    dout: usize,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(name: &str, din: usize, dout: usize, rng: &mut RngStream) -> Self {
        Self {
            weight: Param::kaiming(format!("{name}.weight"), vec![dout, din], din, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![dout]),
            din,
            dout,
            input: None,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.iter_mut().for_each(|v| *v = 0.0);
        self
    }
}

impl Layer for Linear {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.input = Some(x.clone());
        self.infer(x)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.sample_len(), self.din, "linear input dim");
        let n = x.n();
        let mut out = vec![0.0f32; n * self.dout];
        for row in out.chunks_mut(self.dout) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            false,
            true,
            n,
            self.din,
            self.dout,
            1.0,
            x.data(),
            &self.weight.value,
            1.0,
            &mut out,
        );
        Tensor::from_vec([n, self.dout, 1, 1], out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.input.take().expect("backward without forward_train");
        let n = x.n();
        let g = grad_out.data();
        for row in g.chunks(self.dout) {
            for (b, v) in self.bias.grad.iter_mut().zip(row) {
                *b += v;
            }
        }
        gemm(
            true,
            false,
            self.dout,
            n,
            self.din,
            1.0,
            g,
            x.data(),
            1.0,
            &mut self.weight.grad,
        );
        let mut dx = vec![0.0f32; n * self.din];
        gemm(
            false,
            false,
            n,
            self.dout,
            self.din,
            1.0,
            g,
            &self.weight.value,
            0.0,
            &mut dx,
        );
        Tensor::from_vec(x.shape(), dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn output_shape(&self, _input: [usize; 3]) -> [usize; 3] {
        [self.dout, 1, 1]
    }
}

/// Row-wise L2 normalization of flattened samples.
#[derive(Default)]
pub struct L2Normalize {
    cache: Option<(Tensor, Vec<f32>)>,
}

impl L2Normalize {
    pub fn new() -> Self {
        Self::default()
    }

    fn compute(x: &Tensor) -> (Tensor, Vec<f32>) {
        let len = x.sample_len();
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.n());
        for row in out.data_mut().chunks_mut(len) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        (out, norms)
    }
}

impl Layer for L2Normalize {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (out, norms) = Self::compute(x);
        self.cache = Some((out.clone(), norms));
        out
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        Self::compute(x).0
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (u, norms) = self.cache.take().expect("backward without forward_train");
        let len = u.sample_len();
        let mut dx = grad_out.clone();
        for ((row, urow), norm) in dx.data_mut().chunks_mut(len).zip(u.data().chunks(len)).zip(norms) {
            let proj: f32 = row.iter().zip(urow).map(|(g, u)| g * u).sum();
            for (g, u) in row.iter_mut().zip(urow) {
                *g = (*g - proj * u) / norm;
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }
}

/// Bilinear resampling by an integer factor (half-pixel centers, edge clamp).
pub struct UpsampleBilinear {
    factor: usize,
    in_shape: Option<[usize; 4]>,
}

/// For each output index: `(i0, i1, w1)` so that `out = (1-w1) x[i0] + w1 x[i1]`.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

impl UpsampleBilinear {
    pub fn new(factor: usize) -> Self {
        Self { factor, in_shape: None }
    }
}

impl Layer for UpsampleBilinear {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.in_shape = Some(x.shape());
        self.infer(x)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (h * self.factor, w * self.factor);
        let rows = bilinear_taps(h, oh);
        let cols = bilinear_taps(w, ow);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for (plane, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
            for (y, &(r0, r1, wr)) in rows.iter().enumerate() {
                for (xo, &(c0, c1, wc)) in cols.iter().enumerate() {
                    let top = plane[r0 * w + c0] * (1.0 - wc) + plane[r0 * w + c1] * wc;
                    let bot = plane[r1 * w + c0] * (1.0 - wc) + plane[r1 * w + c1] * wc;
                    dst[y * ow + xo] = top * (1.0 - wr) + bot * wr;
                }
            }
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let shape = self.in_shape.take().expect("backward without forward_train");
        let [_, _, h, w] = shape;
        let (oh, ow) = (h * self.factor, w * self.factor);
        let rows = bilinear_taps(h, oh);
        let cols = bilinear_taps(w, ow);
        let mut dx = Tensor::zeros(shape);
        for (g, dst) in grad_out.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
            for (y, &(r0, r1, wr)) in rows.iter().enumerate() {
                for (xo, &(c0, c1, wc)) in cols.iter().enumerate() {
                    let v = g[y * ow + xo];
                    dst[r0 * w + c0] += v * (1.0 - wr) * (1.0 - wc);
                    dst[r0 * w + c1] += v * (1.0 - wr) * wc;
                    dst[r1 * w + c0] += v * wr * (1.0 - wc);
                    dst[r1 * w + c1] += v * wr * wc;
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn output_shape(&self, [c, h, w]: [usize; 3]) -> [usize; 3] {
        [c, h * self.factor, w * self.factor]
    }
}

// ---------------------------------------------------------------------------
// Composites

#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn with(mut self, layer: impl Layer + 'static) -> Self {
        self.push(layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward_train(&cur);
        }
        cur
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.infer(&cur);
        }
        cur
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        self.layers.iter().fold(input, |s, l| l.output_shape(s))
    }
}

/// Residual block: `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`.
pub struct BasicBlock {
    main: Sequential,
    shortcut: Option<Sequential>,
    out_relu: Relu,
}

impl BasicBlock {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut RngStream) -> Self {
        let main = Sequential::new()
            .with(Conv2d::new(
                &format!("{name}.conv1"),
                cin,
                cout,
                3,
                stride,
                1,
                false,
                rng,
            ))
            .with(BatchNorm2d::new(&format!("{name}.bn1"), cout))
            .with(Relu::new())
            .with(Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng))
            .with(BatchNorm2d::new(&format!("{name}.bn2"), cout));
        let shortcut = (stride != 1 || cin != cout).then(|| {
            Sequential::new()
                .with(Conv2d::new(
                    &format!("{name}.down"),
                    cin,
                    cout,
                    1,
                    stride,
                    1,
                    false,
                    rng,
                ))
                .with(BatchNorm2d::new(&format!("{name}.down_bn"), cout))
        });
        Self {
            main,
            shortcut,
            out_relu: Relu::new(),
        }
    }
}

impl Layer for BasicBlock {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut y = self.main.forward_train(x);
        match &mut self.shortcut {
            Some(s) => y.add_assign(&s.forward_train(x)),
            None => y.add_assign(x),
        }
        self.out_relu.forward_train(&y)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = self.main.infer(x);
        match &self.shortcut {
            Some(s) => y.add_assign(&s.infer(x)),
            None => y.add_assign(x),
        }
        self.out_relu.infer(&y)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let g = self.out_relu.backward(grad_out);
        let mut dx = self.main.backward(&g);
        match &mut self.shortcut {
            Some(s) => dx.add_assign(&s.backward(&g)),
            None => dx.add_assign(&g),
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.main.params();
        if let Some(s) = &self.shortcut {
            p.extend(s.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.main.params_mut();
        if let Some(s) = &mut self.shortcut {
            p.extend(s.params_mut());
        }
        p
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        self.main.output_shape(input)
    }
}

/// Atrous spatial pyramid pooling: parallel 1x1, dilated 3x3 and
/// image-pooling branches, concatenated and fused by a 1x1 projection.
pub struct Aspp {
    branches: Vec<Sequential>,
    pool_branch: Sequential,
    project: Sequential,
    width: usize,
    pool_hw: Option<(usize, usize)>,
}

impl Aspp {
    pub fn new(name: &str, cin: usize, width: usize, rates: &[usize], rng: &mut RngStream) -> Self {
        let mut branches = vec![Sequential::new()
            .with(Conv2d::new(&format!("{name}.b0"), cin, width, 1, 1, 1, true, rng))
            .with(Relu::new())];
        for (i, &r) in rates.iter().enumerate() {
            branches.push(
                Sequential::new()
                    .with(Conv2d::new(
                        &format!("{name}.b{}", i + 1),
                        cin,
                        width,
                        3,
                        1,
                        r,
                        true,
                        rng,
                    ))
                    .with(Relu::new()),
            );
        }
        let pool_branch = Sequential::new()
            .with(GlobalAvgPool::new())
            .with(Conv2d::new(&format!("{name}.pool"), cin, width, 1, 1, 1, true, rng))
            .with(Relu::new());
        let total = width * (branches.len() + 1);
        let project = Sequential::new()
            .with(Conv2d::new(
                &format!("{name}.project"),
                total,
                width,
                1,
                1,
                1,
                true,
                rng,
            ))
            .with(Relu::new());
        Self {
            branches,
            pool_branch,
            project,
            width,
            pool_hw: None,
        }
    }

    fn concat(parts: &[Tensor], pooled: &Tensor, width: usize) -> Tensor {
        let [n, _, h, w] = parts[0].shape();
        let hw = h * w;
        let total = width * (parts.len() + 1);
        let mut out = Tensor::zeros([n, total, h, w]);
        for s in 0..n {
            let dst = out.sample_mut(s);
            for (b, p) in parts.iter().enumerate() {
                dst[b * width * hw..(b + 1) * width * hw].copy_from_slice(p.sample(s));
            }
            let base = parts.len() * width * hw;
            for ch in 0..width {
                let v = pooled.sample(s)[ch];
                dst[base + ch * hw..base + (ch + 1) * hw]
                    .iter_mut()
                    .for_each(|d| *d = v);
            }
        }
        out
    }
}

impl Layer for Aspp {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let parts: Vec<Tensor> = self.branches.iter_mut().map(|b| b.forward_train(x)).collect();
        let pooled = self.pool_branch.forward_train(x);
        self.pool_hw = Some((x.h(), x.w()));
        let cat = Self::concat(&parts, &pooled, self.width);
        self.project.forward_train(&cat)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let parts: Vec<Tensor> = self.branches.iter().map(|b| b.infer(x)).collect();
        let pooled = self.pool_branch.infer(x);
        self.project.infer(&Self::concat(&parts, &pooled, self.width))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (h, w) = self.pool_hw.take().expect("backward without forward_train");
        let hw = h * w;
        let dcat = self.project.backward(grad_out);
        let n = dcat.n();
        let width = self.width;
        let nb = self.branches.len();
        let mut dx: Option<Tensor> = None;
        for (b, branch) in self.branches.iter_mut().enumerate() {
            let mut g = Tensor::zeros([n, width, h, w]);
            for s in 0..n {
                g.sample_mut(s)
                    .copy_from_slice(&dcat.sample(s)[b * width * hw..(b + 1) * width * hw]);
            }
            let d = branch.backward(&g);
            match &mut dx {
                Some(acc) => acc.add_assign(&d),
                None => dx = Some(d),
            }
        }
        let mut gp = Tensor::zeros([n, width, 1, 1]);
        for s in 0..n {
            let base = nb * width * hw;
            for ch in 0..width {
                gp.sample_mut(s)[ch] = dcat.sample(s)[base + ch * hw..base + (ch + 1) * hw].iter().sum();
            }
        }
        let d = self.pool_branch.backward(&gp);
        let mut dx = dx.expect("at least one branch");
        dx.add_assign(&d);
        dx
    }

    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.branches.iter().flat_map(|b| b.params()).collect();
        p.extend(self.pool_branch.params());
        p.extend(self.project.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.branches.iter_mut().flat_map(|b| b.params_mut()).collect();
        p.extend(self.pool_branch.params_mut());
        p.extend(self.project.params_mut());
        p
    }

    fn output_shape(&self, [_, h, w]: [usize; 3]) -> [usize; 3] {
        [self.width, h, w]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: [usize; 4], rng: &mut RngStream) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.normal() as f32).collect())
    }

    /// Weighted-sum objective `sum(out * probe)`; checks input and parameter
    /// gradients of `layer` against central differences. A probe passes if
    /// either `h` or `h / 10` agrees, since a step can straddle a ReLU kink.
    fn grad_check(layer: &mut dyn Layer, x: &Tensor, rng: &mut RngStream, tol: f32) {
        grad_check_step(layer, x, rng, tol, 1e-2)
    }

    fn objective(l: &mut dyn Layer, x: &Tensor, probe: &Tensor) -> f64 {
        let o = l.forward_train(x);
        // Drop the cache so the next forward starts clean.
        let _ = l.backward(&Tensor::zeros(o.shape()));
        o.data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    }

    fn agrees(fds: &[f32], an: f32, tol: f32) -> bool {
        fds.iter().any(|fd| (fd - an).abs() <= tol * (1.0 + an.abs()))
    }

    fn grad_check_step(layer: &mut dyn Layer, x: &Tensor, rng: &mut RngStream, tol: f32, h: f32) {
        let out = layer.forward_train(x);
        let probe = rand_tensor(out.shape(), rng);
        for p in layer.params_mut() {
            p.zero_grad();
        }
        let dx = layer.backward(&probe);
        let steps = [h, h / 10.0];
        for i in (0..x.data().len()).step_by((x.data().len() / 7).max(1)) {
            let fds: Vec<f32> = steps
                .iter()
                .map(|&h| {
                    let mut xp = x.clone();
                    xp.data_mut()[i] += h;
                    let mut xm = x.clone();
                    xm.data_mut()[i] -= h;
                    ((objective(layer, &xp, &probe) - objective(layer, &xm, &probe)) / (2.0 * h as f64)) as f32
                })
                .collect();
            let an = dx.data()[i];
            assert!(agrees(&fds, an, tol), "dx[{i}]: fd {fds:?} vs analytic {an}");
        }
        let grads: Vec<(String, Vec<f32>)> = layer
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), p.grad.clone()))
            .collect();
        for (name, grad) in grads {
            for i in (0..grad.len()).step_by((grad.len() / 5).max(1)) {
                let bump = |l: &mut dyn Layer, d: f32| {
                    for p in l.params_mut() {
                        if p.name == name {
                            p.value[i] += d;
                        }
                    }
                };
                let fds: Vec<f32> = steps
                    .iter()
                    .map(|&h| {
                        bump(layer, h);
                        let fp = objective(layer, x, &probe);
                        bump(layer, -2.0 * h);
                        let fm = objective(layer, x, &probe);
                        bump(layer, h);
                        ((fp - fm) / (2.0 * h as f64)) as f32
                    })
                    .collect();
                assert!(
                    agrees(&fds, grad[i], tol),
                    "{name}[{i}]: fd {fds:?} vs analytic {}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = RngStream::new(0, "conv");
        for (k, stride, dil) in [(3, 1, 1), (3, 2, 1), (1, 1, 1), (3, 1, 2), (7, 2, 1)] {
            let mut conv = Conv2d::new("c", 2, 3, k, stride, dil, true, &mut rng);
            let x = rand_tensor([2, 2, 9, 8], &mut rng);
            grad_check(&mut conv, &x, &mut rng, 2e-2);
        }
    }

    #[test]
    fn conv_matches_direct_formula() {
        let mut rng = RngStream::new(1, "conv");
        let conv = Conv2d::new("c", 2, 2, 3, 2, 1, true, &mut rng);
        let x = rand_tensor([1, 2, 5, 5], &mut rng);
        let y = conv.infer(&x);
        assert_eq!(y.shape(), [1, 2, 3, 3]);
        let xv = |c: usize, r: isize, q: isize| -> f32 {
            if r < 0 || q < 0 || r >= 5 || q >= 5 {
                0.0
            } else {
                x.data()[c * 25 + r as usize * 5 + q as usize]
            }
        };
        for co in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = conv.bias.as_ref().unwrap().value[co];
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let wv = conv.weight.value[((co * 2 + ci) * 3 + ki) * 3 + kj];
                                s += wv * xv(ci, (oy * 2 + ki) as isize - 1, (ox * 2 + kj) as isize - 1);
                            }
                        }
                    }
                    assert!((s - y.data()[co * 9 + oy * 3 + ox]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn pointwise_and_pool_gradients() {
        let mut rng = RngStream::new(2, "pw");
        let x = rand_tensor([3, 2, 6, 6], &mut rng);
        grad_check(&mut GlobalAvgPool::new(), &x, &mut rng, 1e-2);
        grad_check(&mut UpsampleBilinear::new(2), &x, &mut rng, 1e-2);
        grad_check(&mut MaxPool2d::new(3, 2, 1), &x, &mut rng, 2e-2);
        grad_check(&mut L2Normalize::new(), &x, &mut rng, 2e-2);
        grad_check(&mut BatchNorm2d::new("bn", 2), &x, &mut rng, 3e-2);
        let flat = rand_tensor([4, 5, 1, 1], &mut rng);
        grad_check(&mut Linear::new("fc", 5, 3, &mut rng), &flat, &mut rng, 1e-2);
    }

    #[test]
    fn composite_gradients() {
        let mut rng = RngStream::new(3, "comp");
        let x = rand_tensor([2, 3, 8, 8], &mut rng);
        grad_check_step(&mut BasicBlock::new("blk", 3, 4, 2, &mut rng), &x, &mut rng, 3e-2, 1e-3);
        grad_check_step(
            &mut Aspp::new("aspp", 3, 4, &[1, 2], &mut rng),
            &x,
            &mut rng,
            3e-2,
            1e-3,
        );
    }

    #[test]
    fn upsample_constant_and_shape() {
        let x = Tensor::from_vec([1, 1, 2, 3], vec![2.0; 6]);
        let up = UpsampleBilinear::new(2);
        let y = up.infer(&x);
        assert_eq!(y.shape(), [1, 1, 4, 6]);
        assert!(y.data().iter().all(|&v| (v - 2.0).abs() < 1e-6));
    }

    #[test]
    fn batchnorm_infer_uses_running_stats() {
        let mut bn = BatchNorm2d::new("bn", 1);
        let x = Tensor::from_vec([2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]);
        let y = bn.forward_train(&x);
        let mean: f32 = y.data().iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((bn.running_mean.value[0] - 0.4).abs() < 1e-6);
        let z = bn.infer(&x);
        assert_ne!(z, y);
    }
}
