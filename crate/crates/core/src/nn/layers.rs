use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Param, Scalar, Tensor, Visit};

fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect()
}

/// Square convolution, stride 1, zero padding `kernel / 2` (size preserving
/// for odd kernels).
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel % 2 == 1, "only odd kernels keep the spatial size");
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(
            vec![out_channels, in_channels, kernel, kernel],
            he_normal(rng, out_channels * fan_in, fan_in),
        );
        Self { in_channels, out_channels, kernel, weight, bias: Param::filled(vec![out_channels], T::zero()), input: None }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Unfolds one `C x H x W` item into a `(C*k*k) x (H*W)` matrix.
    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let k = self.kernel;
        let pad = self.pad() as isize;
        let hw = h * w;
        for ci in 0..self.in_channels {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                    let ox = kx as isize - pad;
                    let oy = ky as isize - pad;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let dst = &mut row[y * w..(y + 1) * w];
                        let iy = y as isize + oy;
                        if iy < 0 || iy >= h as isize || x0 >= x1 {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        dst[..x0].iter_mut().for_each(|v| *v = T::zero());
                        dst[x1..].iter_mut().for_each(|v| *v = T::zero());
                        let s0 = (x0 as isize + ox) as usize;
                        dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let k = self.kernel;
        let pad = self.pad() as isize;
        let hw = h * w;
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                    let ox = kx as isize - pad;
                    let oy = ky as isize - pad;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..h {
                        let iy = y as isize + oy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let s0 = (x0 as isize + ox) as usize;
                        let dst = &mut plane[iy as usize * w + s0..][..x1 - x0];
                        for (d, s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, keep_input: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let hw = h * w;
        let kk = c * self.kernel * self.kernel;
        let mut out = Tensor::zeros([n, self.out_channels, h, w]);
        let mut cols = if self.kernel == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
        for i in 0..n {
            let y = out.item_mut(i);
            for (co, plane) in y.chunks_exact_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.bias.value[co]);
            }
            let b: &[T] = if self.kernel == 1 {
                x.item(i)
            } else {
                self.im2col(x.item(i), h, w, &mut cols);
                &cols
            };
            T::gemm(false, false, self.out_channels, hw, kk, T::one(), &self.weight.value, b, T::one(), y);
        }
        self.input = keep_input.then(|| x.clone());
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("conv backward without cached forward");
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let kk = c * self.kernel * self.kernel;
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); if self.kernel == 1 { 0 } else { kk * hw }];
        let mut dcols = vec![T::zero(); kk * hw];
        for i in 0..n {
            let g = dy.item(i);
            for (co, plane) in g.chunks_exact(hw).enumerate() {
                self.bias.grad[co] += plane.iter().copied().sum::<T>();
            }
            if self.kernel == 1 {
                T::gemm(false, true, self.out_channels, kk, hw, T::one(), g, x.item(i), T::one(), &mut self.weight.grad);
                T::gemm(true, false, kk, hw, self.out_channels, T::one(), &self.weight.value, g, T::zero(), dx.item_mut(i));
            } else {
                self.im2col(x.item(i), h, w, &mut cols);
                T::gemm(false, true, self.out_channels, kk, hw, T::one(), g, &cols, T::one(), &mut self.weight.grad);
                T::gemm(true, false, kk, hw, self.out_channels, T::one(), &self.weight.value, g, T::zero(), &mut dcols);
                self.col2im(&dcols, h, w, dx.item_mut(i));
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn Visit<T>) {
        v.param(&format!("{prefix}.weight"), &mut self.weight);
        v.param(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// 2x2 stride-2 transposed convolution (doubles spatial size).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Stored `(in, out, 2, 2)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2x2<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = Param::new(
            vec![in_channels, out_channels, 2, 2],
            he_normal(rng, in_channels * out_channels * 4, in_channels),
        );
        Self { in_channels, out_channels, weight, bias: Param::filled(vec![out_channels], T::zero()), input: None }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, keep_input: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "transposed conv input channels");
        let hw = h * w;
        let co4 = self.out_channels * 4;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let mut y4 = vec![T::zero(); co4 * hw];
        for i in 0..n {
            T::gemm(true, false, co4, hw, c, T::one(), &self.weight.value, x.item(i), T::zero(), &mut y4);
            let o = out.item_mut(i);
            for co in 0..self.out_channels {
                let b = self.bias.value[co];
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = &y4[(co * 4 + a * 2 + bb) * hw..][..hw];
                        for r in 0..h {
                            let dst = &mut o[co * oh * ow + (2 * r + a) * ow..][..ow];
                            for col in 0..w {
                                dst[2 * col + bb] = src[r * w + col] + b;
                            }
                        }
                    }
                }
            }
        }
        self.input = keep_input.then(|| x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("transposed conv backward without cached forward");
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let co4 = self.out_channels * 4;
        let (oh, ow) = (2 * h, 2 * w);
        let mut dx = Tensor::zeros(x.shape());
        let mut dy4 = vec![T::zero(); co4 * hw];
        for i in 0..n {
            let g = dy.item(i);
            for co in 0..self.out_channels {
                self.bias.grad[co] += g[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum::<T>();
                for a in 0..2 {
                    for bb in 0..2 {
                        let dst = &mut dy4[(co * 4 + a * 2 + bb) * hw..][..hw];
                        for r in 0..h {
                            let src = &g[co * oh * ow + (2 * r + a) * ow..][..ow];
                            for col in 0..w {
                                dst[r * w + col] = src[2 * col + bb];
                            }
                        }
                    }
                }
            }
            T::gemm(false, true, c, co4, hw, T::one(), x.item(i), &dy4, T::one(), &mut self.weight.grad);
            T::gemm(false, false, c, hw, co4, T::one(), &self.weight.value, &dy4, T::zero(), dx.item_mut(i));
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn Visit<T>) {
        v.param(&format!("{prefix}.weight"), &mut self.weight);
        v.param(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Per-channel batch normalization over `N x H x W`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::filled(vec![channels], T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.channels
    }

    /// Uses batch statistics (and updates the running ones) when `train`.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool, keep: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels, "batch norm channels");
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0f64;
                for i in 0..n {
                    s += x.item(i)[ch * hw..(ch + 1) * hw].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                }
                let mean = s / count;
                let mut sq = 0.0f64;
                for i in 0..n {
                    sq += x.item(i)[ch * hw..(ch + 1) * hw]
                        .iter()
                        .map(|v| {
                            let d = v.to_f64().unwrap() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = sq / count;
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                let m = self.momentum;
                self.running_mean[ch] = T::lit((1.0 - m) * self.running_mean[ch].to_f64().unwrap() + m * mean);
                self.running_var[ch] = T::lit((1.0 - m) * self.running_var[ch].to_f64().unwrap() + m * unbiased);
                (mean, var)
            } else {
                (self.running_mean[ch].to_f64().unwrap(), self.running_var[ch].to_f64().unwrap())
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = T::lit(istd);
            let (mu, is) = (T::lit(mean), T::lit(istd));
            for i in 0..n {
                let src = &x.item(i)[ch * hw..(ch + 1) * hw];
                let dst = &mut out.item_mut(i)[ch * hw..(ch + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mu) * is;
                }
            }
        }
        // `out` holds x_hat until the affine step
        let x_hat = if keep { Some(out.clone()) } else { None };
        for i in 0..n {
            let item = out.item_mut(i);
            for ch in 0..c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                item[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = *v * g + b);
            }
        }
        self.cache = x_hat.map(|x_hat| BnCache { x_hat, inv_std, batch_stats: train });
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let BnCache { x_hat, inv_std, batch_stats } = self.cache.take().expect("batch norm backward without cached forward");
        let [n, c, h, w] = x_hat.shape();
        let hw = h * w;
        let count = T::lit((n * hw) as f64);
        let mut dx = Tensor::zeros(x_hat.shape());
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for i in 0..n {
                let g = &dy.item(i)[ch * hw..(ch + 1) * hw];
                let xh = &x_hat.item(i)[ch * hw..(ch + 1) * hw];
                for (&g, &xh) in g.iter().zip(xh) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let scale = self.gamma.value[ch] * inv_std[ch];
            for i in 0..n {
                let g = &dy.item(i)[ch * hw..(ch + 1) * hw];
                let xh = &x_hat.item(i)[ch * hw..(ch + 1) * hw];
                let d = &mut dx.item_mut(i)[ch * hw..(ch + 1) * hw];
                if batch_stats {
                    for ((d, &g), &xh) in d.iter_mut().zip(g).zip(xh) {
                        *d = scale / count * (count * g - sum_dy - xh * sum_dy_xhat);
                    }
                } else {
                    for (d, &g) in d.iter_mut().zip(g) {
                        *d = scale * g;
                    }
                }
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn Visit<T>) {
        v.param(&format!("{prefix}.gamma"), &mut self.gamma);
        v.param(&format!("{prefix}.beta"), &mut self.beta);
        v.buffer(&format!("{prefix}.running_mean"), &mut self.running_mean);
        v.buffer(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn forward(&mut self, mut x: Tensor<T>, keep: bool) -> Tensor<T> {
        // NaN propagates so non-finite activations stay detectable downstream.
        x.data_mut().iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = T::zero()
            }
        });
        self.output = keep.then(|| x.clone());
        x
    }

    pub fn backward(&mut self, mut dy: Tensor<T>) -> Tensor<T> {
        let out = self.output.take().expect("relu backward without cached forward");
        dy.data_mut().iter_mut().zip(out.data()).for_each(|(g, &o)| {
            if !(o > T::zero()) {
                *g = T::zero()
            }
        });
        dy
    }
}

/// Drops whole channels with probability `rate` during training.
#[derive(Debug, Clone)]
pub struct SpatialDropout {
    pub rate: f64,
    mask: Option<Vec<bool>>,
}

impl SpatialDropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Self { rate, mask: None }
    }

    pub fn forward<T: Scalar>(&mut self, mut x: Tensor<T>, train: bool, rng: &mut ChaCha8Rng) -> Tensor<T> {
        if !train || self.rate == 0.0 {
            self.mask = None;
            return x;
        }
        let [n, c, _, _] = x.shape();
        let hw = x.plane();
        let scale = T::lit(1.0 / (1.0 - self.rate));
        let mask: Vec<bool> = (0..n * c).map(|_| rng.random::<f64>() >= self.rate).collect();
        for (plane, &keep) in x.data_mut().chunks_exact_mut(hw).zip(&mask) {
            if keep {
                plane.iter_mut().for_each(|v| *v *= scale);
            } else {
                plane.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        self.mask = Some(mask);
        x
    }

    pub fn backward<T: Scalar>(&mut self, mut dy: Tensor<T>) -> Tensor<T> {
        let Some(mask) = self.mask.take() else { return dy };
        let hw = dy.plane();
        let scale = T::lit(1.0 / (1.0 - self.rate));
        for (plane, &keep) in dy.data_mut().chunks_exact_mut(hw).zip(&mask) {
            if keep {
                plane.iter_mut().for_each(|v| *v *= scale);
            } else {
                plane.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        dy
    }
}

/// 2x2 max pooling, stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2 {
    argmax: Option<(Vec<u32>, [usize; 4])>,
}

impl MaxPool2x2 {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, keep: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even spatial size");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut idx = vec![0u32; n * c * oh * ow];
        let src = x.data();
        for (plane_i, (dst, id)) in out.data_mut().chunks_exact_mut(oh * ow).zip(idx.chunks_exact_mut(oh * ow)).enumerate() {
            let base = plane_i * h * w;
            for r in 0..oh {
                for col in 0..ow {
                    let mut best = base + 2 * r * w + 2 * col;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * r + dr) * w + 2 * col + dc;
                        if src[j] > src[best] {
                            best = j;
                        }
                    }
                    dst[r * ow + col] = src[best];
                    id[r * ow + col] = (best - base) as u32;
                }
            }
        }
        self.argmax = keep.then_some((idx, x.shape()));
        out
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (idx, shape) = self.argmax.take().expect("max pool backward without cached forward");
        let plane_in = shape[2] * shape[3];
        let plane_out = dy.plane();
        let mut dx = Tensor::zeros(shape);
        for (plane_i, (g, id)) in dy.data().chunks_exact(plane_out).zip(idx.chunks_exact(plane_out)).enumerate() {
            let dst = &mut dx.data_mut()[plane_i * plane_in..(plane_i + 1) * plane_in];
            for (&g, &j) in g.iter().zip(id) {
                dst[j as usize] += g;
            }
        }
        dx
    }
}

/// 2x2 average pooling, stride 2.
#[derive(Debug, Clone, Default)]
pub struct AvgPool2x2 {
    input_shape: Option<[usize; 4]>,
}

impl AvgPool2x2 {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, keep: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "average pool needs even spatial size");
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for (src, dst) in x.data().chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(oh * ow)) {
            for r in 0..oh {
                for col in 0..ow {
                    let i = 2 * r * w + 2 * col;
                    dst[r * ow + col] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        self.input_shape = keep.then_some(x.shape());
        out
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let shape = self.input_shape.take().expect("average pool backward without cached forward");
        let (h, w) = (shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let mut dx = Tensor::zeros(shape);
        for (g, dst) in dy.data().chunks_exact(oh * ow).zip(dx.data_mut().chunks_exact_mut(h * w)) {
            for r in 0..oh {
                for col in 0..ow {
                    let v = g[r * ow + col] * quarter;
                    let i = 2 * r * w + 2 * col;
                    dst[i] = v;
                    dst[i + 1] = v;
                    dst[i + w] = v;
                    dst[i + w + 1] = v;
                }
            }
        }
        dx
    }
}

/// Nearest-neighbour 2x up-sampling.
pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for (src, dst) in x.data().chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(4 * h * w)) {
        for r in 0..2 * h {
            for col in 0..2 * w {
                dst[r * 2 * w + col] = src[(r / 2) * w + col / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest2x`].
pub fn upsample_nearest2x_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for (g, dst) in dy.data().chunks_exact(h2 * w2).zip(dx.data_mut().chunks_exact_mut(h * w)) {
        for r in 0..h2 {
            for col in 0..w2 {
                dst[(r / 2) * w + col / 2] += g[r * w2 + col];
            }
        }
    }
    dx
}

/// Concatenates `a` then `b` along channels.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    assert_eq!((n, h, w), (nb, hb, wb), "concat shape mismatch");
    let mut out = Tensor::zeros([n, ca + cb, h, w]);
    for i in 0..n {
        let dst = out.item_mut(i);
        dst[..a.item_len()].copy_from_slice(a.item(i));
        dst[a.item_len()..].copy_from_slice(b.item(i));
    }
    out
}

/// Inverse of [`concat_channels`]: splits after the first `first` channels.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape();
    let mut a = Tensor::zeros([n, first, h, w]);
    let mut b = Tensor::zeros([n, c - first, h, w]);
    for i in 0..n {
        let src = x.item(i);
        let split = first * h * w;
        a.item_mut(i).copy_from_slice(&src[..split]);
        b.item_mut(i).copy_from_slice(&src[split..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Central differences of `<f(x), probe>` with respect to the input.
    fn fd_input(f: &mut dyn FnMut(&Tensor<f64>) -> Tensor<f64>, x: &Tensor<f64>, probe: &Tensor<f64>) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.data().len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += eps;
                let mut m = x.clone();
                m.data_mut()[i] -= eps;
                (dot(&f(&p), probe) - dot(&f(&m), probe)) / (2.0 * eps)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den.max(1e-300)).sqrt()
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, &mut rng);
        conv.bias.value = vec![0.1, -0.2, 0.3];
        let x = random_tensor(&mut rng, [2, 2, 5, 4]);
        let y = conv.forward(&x, false);
        for n in 0..2 {
            for co in 0..3 {
                for r in 0..5i64 {
                    for c in 0..4i64 {
                        let mut s = conv.bias.value[co];
                        for ci in 0..2 {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (ir, ic) = (r + ky - 1, c + kx - 1);
                                    if (0..5).contains(&ir) && (0..4).contains(&ic) {
                                        s += conv.weight.value[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                            * x.item(n)[ci * 20 + (ir * 4 + ic) as usize];
                                    }
                                }
                            }
                        }
                        let got = y.item(n)[co * 20 + (r * 4 + c) as usize];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for k in [1, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut conv = Conv2d::<f64>::new(3, 2, k, &mut rng);
            conv.bias.value = vec![0.3, -0.1];
            let x = random_tensor(&mut rng, [2, 3, 6, 5]);
            let probe = random_tensor(&mut rng, [2, 2, 6, 5]);
            conv.forward(&x, true);
            let dx = conv.backward(&probe);
            let mut c2 = conv.clone();
            let fd = fd_input(&mut |t| c2.forward(t, false), &x, &probe);
            assert!(rel_err(dx.data(), &fd) < 1e-7, "k={k}");

            // weight gradient
            let eps = 1e-6;
            let wfd: Vec<f64> = (0..conv.weight.len())
                .map(|i| {
                    let mut p = conv.clone();
                    p.weight.value[i] += eps;
                    let mut m = conv.clone();
                    m.weight.value[i] -= eps;
                    (dot(&p.forward(&x, false), &probe) - dot(&m.forward(&x, false), &probe)) / (2.0 * eps)
                })
                .collect();
            assert!(rel_err(&conv.weight.grad, &wfd) < 1e-7);
            let bsum: Vec<f64> = (0..2).map(|co| (0..2).map(|n| probe.item(n)[co * 30..(co + 1) * 30].iter().sum::<f64>()).sum()).collect();
            assert!(rel_err(&conv.bias.grad, &bsum) < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_gradients_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut up = ConvTranspose2x2::<f64>::new(3, 2, &mut rng);
        up.bias.value = vec![0.5, -0.5];
        let x = random_tensor(&mut rng, [2, 3, 3, 4]);
        let y = up.forward(&x, true);
        assert_eq!(y.shape(), [2, 2, 6, 8]);
        // out[co, 2r+a, 2c+b] = sum_ci W[ci, co, a, b] x[ci, r, c] + bias
        let w = &up.weight.value;
        let manual = up.bias.value[1] + (0..3).map(|ci| w[((ci * 2 + 1) * 2 + 1) * 2] * x.item(1)[ci * 12 + 2 * 4 + 3]).sum::<f64>();
        assert!((y.item(1)[48 + 5 * 8 + 6] - manual).abs() < 1e-12);

        let probe = random_tensor(&mut rng, [2, 2, 6, 8]);
        let dx = up.backward(&probe);
        let mut u2 = up.clone();
        let fd = fd_input(&mut |t| u2.forward(t, false), &x, &probe);
        assert!(rel_err(dx.data(), &fd) < 1e-7);
        let eps = 1e-6;
        let wfd: Vec<f64> = (0..up.weight.len())
            .map(|i| {
                let mut p = up.clone();
                p.weight.value[i] += eps;
                let mut m = up.clone();
                m.weight.value[i] -= eps;
                (dot(&p.forward(&x, false), &probe) - dot(&m.forward(&x, false), &probe)) / (2.0 * eps)
            })
            .collect();
        assert!(rel_err(&up.weight.grad, &wfd) < 1e-7);
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for train in [true, false] {
            let mut bn = BatchNorm2d::<f64>::new(3);
            bn.gamma.value = vec![1.5, 0.5, -1.0];
            bn.beta.value = vec![0.1, 0.2, 0.3];
            bn.running_mean = vec![0.2, -0.1, 0.0];
            bn.running_var = vec![0.5, 2.0, 1.0];
            let x = random_tensor(&mut rng, [3, 3, 4, 4]);
            let probe = random_tensor(&mut rng, [3, 3, 4, 4]);
            let frozen = bn.clone();
            bn.forward(&x, train, true);
            let dx = bn.backward(&probe);
            let fd = fd_input(&mut |t| frozen.clone().forward(t, train, false), &x, &probe);
            assert!(rel_err(dx.data(), &fd) < 1e-6, "train={train}");
        }
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = random_tensor(&mut rng, [4, 2, 3, 3]);
        let y = bn.forward(&x, true, false);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.item(n)[ch * 9..(ch + 1) * 9].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 36.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.iter().all(|m| m.abs() > 0.0));
    }

    #[test]
    fn pool_relu_dropout_behaviour() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 4], vec![1.0, 5.0, -1.0, 0.0, 3.0, 2.0, -2.0, -3.0]);
        let mut pool = MaxPool2x2::default();
        let y = pool.forward(&x, true);
        assert_eq!(y.data(), &[5.0, 0.0]);
        let dx = pool.backward(&Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]));
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);

        let mut relu = Relu::default();
        let r = relu.forward(x.clone(), true);
        assert_eq!(r.data(), &[1.0, 5.0, 0.0, 0.0, 3.0, 2.0, 0.0, 0.0]);
        let g = relu.backward(Tensor::from_vec([1, 1, 2, 4], vec![1.0; 8]));
        assert_eq!(g.data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut drop = SpatialDropout::new(0.5);
        let ones = Tensor::<f64>::from_vec([4, 8, 2, 2], vec![1.0; 128]);
        let d = drop.forward(ones.clone(), true, &mut rng);
        for plane in d.data().chunks(4) {
            assert!(plane.iter().all(|&v| v == 0.0) || plane.iter().all(|&v| v == 2.0));
        }
        let e = SpatialDropout::new(0.5).forward(ones.clone(), false, &mut rng);
        assert_eq!(e, ones);
    }

    #[test]
    fn avg_pool_and_nearest_upsample_are_adjoint_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, [2, 2, 4, 6]);
        let probe = random_tensor(&mut rng, [2, 2, 2, 3]);
        let mut pool = AvgPool2x2::default();
        let y = pool.forward(&x, true);
        assert!((y.data()[0] - (x.data()[0] + x.data()[1] + x.data()[6] + x.data()[7]) / 4.0).abs() < 1e-15);
        let dx = pool.backward(&probe);
        assert!((dot(&y, &probe) - dot(&x, &dx)).abs() < 1e-12);

        let up = upsample_nearest2x(&probe);
        assert_eq!(up.shape(), [2, 2, 4, 6]);
        let back = upsample_nearest2x_backward(&x);
        assert!((dot(&up, &x) - dot(&probe, &back)).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&mut rng, [2, 3, 2, 2]);
        let b = random_tensor(&mut rng, [2, 1, 2, 2]);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 3);
        assert_eq!((a2, b2), (a, b));
    }
}
