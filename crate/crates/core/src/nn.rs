//! Minimal CPU convolutional building blocks with explicit backpropagation.
//!
//! Tensors are single samples in channel-major `C×H×W` layout. Convolutions
//! run as im2col followed by a GEMM; every layer exposes a `backward` that
//! produces the gradient with respect to its input and, optionally,
//! accumulates parameter gradients.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Floating point scalar the network can run in.
pub trait Real: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// `c = alpha * a·b + beta * c` for row-major dense matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64(v: f64) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // Row-major m×k (or k×m when transposed) strides.
                let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: bounds asserted above, strides describe dense buffers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense `C×H×W` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor buffer size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// Stack `self` and `other` along the channel axis.
    pub fn concat(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec(self.channels + other.channels, self.height, self.width, data)
    }

    /// Inverse of [`Tensor::concat`]: split after `first` channels.
    pub fn split(self, first: usize) -> (Tensor<T>, Tensor<T>) {
        let p = self.plane();
        let mut data = self.data;
        let rest = data.split_off(first * p);
        (
            Tensor::from_vec(first, self.height, self.width, data),
            Tensor::from_vec(self.channels - first, self.height, self.width, rest),
        )
    }
}

/// Square convolution with stride 1 and "same" zero padding. Kernel size must be odd.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out × (in·k·k)` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Parameter gradients for one [`Conv2d`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvGrads<T> {
    pub fn zeros_like(conv: &Conv2d<T>) -> Self {
        Self {
            weight: vec![T::zero(); conv.weight.len()],
            bias: vec![T::zero(); conv.bias.len()],
        }
    }
}

impl<T: Real> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let weight = (0..out_channels * fan_in)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn columns(&self, x: &Tensor<T>) -> Option<Vec<T>> {
        if self.kernel == 1 {
            None
        } else {
            Some(im2col(x, self.kernel))
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let n = x.plane();
        let cols = self.columns(x);
        let b = cols.as_deref().unwrap_or(&x.data);
        let mut out = Tensor::zeros(self.out_channels, x.height, x.width);
        for (o, &bias) in self.bias.iter().enumerate() {
            out.channel_mut(o).fill(bias);
        }
        T::gemm(
            self.out_channels,
            self.patch_len(),
            n,
            T::one(),
            &self.weight,
            false,
            b,
            false,
            T::one(),
            &mut out.data,
        );
        out
    }

    /// Backpropagate `grad_out` through the layer evaluated at `x`.
    ///
    /// Accumulates into `grads` when given; returns the input gradient when
    /// `need_input` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: Option<&mut ConvGrads<T>>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let n = x.plane();
        let kk = self.patch_len();
        if let Some(g) = grads {
            let cols = self.columns(x);
            let b = cols.as_deref().unwrap_or(&x.data);
            T::gemm(
                self.out_channels,
                n,
                kk,
                T::one(),
                &grad_out.data,
                false,
                b,
                true,
                T::one(),
                &mut g.weight,
            );
            for (o, gb) in g.bias.iter_mut().enumerate() {
                *gb = *gb + grad_out.channel(o).iter().copied().sum::<T>();
            }
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![T::zero(); kk * n];
        T::gemm(
            kk,
            self.out_channels,
            n,
            T::one(),
            &self.weight,
            true,
            &grad_out.data,
            false,
            T::zero(),
            &mut dcols,
        );
        Some(if self.kernel == 1 {
            Tensor::from_vec(self.in_channels, x.height, x.width, dcols)
        } else {
            col2im(&dcols, self.in_channels, x.height, x.width, self.kernel)
        })
    }
}

fn im2col<T: Real>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let (h, w) = (x.height, x.width);
    let r = (k / 2) as isize;
    let mut cols = vec![T::zero(); x.channels * k * k * h * w];
    for c in 0..x.channels {
        let src = x.channel(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * h * w..(row + 1) * h * w];
                let dy = ky as isize - r;
                let dx = kx as isize - r;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let s0 = sy as usize * w;
                    let sx0 = (x_lo as isize + dx) as usize;
                    dst[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&src[s0 + sx0..s0 + sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], channels: usize, h: usize, w: usize, k: usize) -> Tensor<T> {
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(channels, h, w);
    for c in 0..channels {
        let dst = out.channel_mut(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * h * w..(row + 1) * h * w];
                let dy = ky as isize - r;
                let dx = kx as isize - r;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let s0 = sy as usize * w;
                    let sx0 = (x_lo as isize + dx) as usize;
                    let d = &mut dst[s0 + sx0..s0 + sx0 + (x_hi - x_lo)];
                    for (a, &b) in d.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
    out
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zero the gradient wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and the flat
/// argmax index (into the input) of each output element.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    assert!(x.height % 2 == 0 && x.width % 2 == 0, "pooling needs even dims");
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = Tensor::zeros(x.channels, oh, ow);
    let mut idx = vec![0u32; x.channels * oh * ow];
    for c in 0..x.channels {
        let base = c * x.plane();
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * x.width + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * x.width + 2 * xx + dx;
                    if x.data[j] > x.data[best] {
                        best = j;
                    }
                }
                let o = (c * oh + y) * ow + xx;
                out.data[o] = x.data[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

pub fn max_pool2_backward<T: Real>(
    grad_out: &Tensor<T>,
    idx: &[u32],
    input_shape: (usize, usize, usize),
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.0, input_shape.1, input_shape.2);
    for (&g, &i) in grad_out.data.iter().zip(idx) {
        dx.data[i as usize] = dx.data[i as usize] + g;
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Tensor::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            let srow = &src[(y / 2) * x.width..(y / 2 + 1) * x.width];
            for (xx, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (grad_out.height / 2, grad_out.width / 2);
    let mut dx = Tensor::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        let src = grad_out.channel(c);
        let dst = dx.channel_mut(c);
        for y in 0..grad_out.height {
            for x in 0..grad_out.width {
                let d = &mut dst[(y / 2) * w + x / 2];
                *d = *d + src[y * grad_out.width + x];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(c, h, w, data)
    }

    /// Direct nested-loop convolution used as an oracle for im2col + GEMM.
    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let k = conv.kernel as isize;
        let r = k / 2;
        let mut out = Tensor::zeros(conv.out_channels, x.height, x.width);
        for o in 0..conv.out_channels {
            for y in 0..x.height as isize {
                for xx in 0..x.width as isize {
                    let mut acc = conv.bias[o];
                    for c in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y + ky - r;
                                let sx = xx + kx - r;
                                if sy < 0 || sx < 0 || sy >= x.height as isize || sx >= x.width as isize {
                                    continue;
                                }
                                let wi = ((o * conv.in_channels + c) * conv.kernel + ky as usize)
                                    * conv.kernel
                                    + kx as usize;
                                acc += conv.weight[wi]
                                    * x.data[(c * x.height + sy as usize) * x.width + sx as usize];
                            }
                        }
                    }
                    out.data[(o * x.height + y as usize) * x.width + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let mut conv = Conv2d::<f64>::init(3, 4, k, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor(&mut rng, 3, 5, 7);
            let a = conv.forward(&x);
            let b = naive_conv(&conv, &x);
            for (p, q) in a.data.iter().zip(&b.data) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x) - b, g> is linear in x and in w, so gradients are exact adjoints.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::<f64>::init(2, 3, 3, &mut rng);
        let x = random_tensor(&mut rng, 2, 6, 4);
        let g = random_tensor(&mut rng, 3, 6, 4);
        let mut grads = ConvGrads::zeros_like(&conv);
        let dx = conv.backward(&x, &g, Some(&mut grads), true).unwrap();

        let dir = random_tensor(&mut rng, 2, 6, 4);
        let mut nobias = conv.clone();
        nobias.bias.fill(0.0);
        let lhs: f64 = nobias.forward(&dir).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = dx.data.iter().zip(&dir.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let wdir: Vec<f64> = (0..conv.weight.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut probe = nobias.clone();
        probe.weight = wdir.clone();
        let lhs: f64 = probe.forward(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = grads.weight.iter().zip(&wdir).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let bsum: Vec<f64> = (0..3).map(|o| g.channel(o).iter().sum()).collect();
        assert_eq!(grads.bias, bsum);
    }

    #[test]
    fn pool_and_upsample_round_trip_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 2, 4, 6);
        let (p, idx) = max_pool2(&x);
        assert_eq!((p.channels, p.height, p.width), (2, 2, 3));
        for (v, &i) in p.data.iter().zip(&idx) {
            assert_eq!(*v, x.data[i as usize]);
        }
        let up = upsample2(&p);
        assert_eq!((up.height, up.width), (4, 6));
        let back = upsample2_backward(&Tensor::from_vec(2, 4, 6, vec![1.0; 48]));
        assert!(back.data.iter().all(|&v| v == 4.0));
        let dx = max_pool2_backward(&p, &idx, (2, 4, 6));
        assert_eq!(dx.data.iter().filter(|&&v| v != 0.0).count(), 12);
    }

    #[test]
    fn concat_split_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_tensor(&mut rng, 2, 3, 3);
        let b = random_tensor(&mut rng, 3, 3, 3);
        let (a2, b2) = a.concat(&b).split(2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
