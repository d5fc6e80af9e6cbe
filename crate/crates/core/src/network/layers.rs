//! Convolution and dense layers with explicit backward passes.

use rand::Rng as _;

use crate::rng::Rng;

/// Channel-major feature map of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `C (m x n) = alpha * A (m x k) * B (k x n) + beta * C`, with explicit
/// row/column strides so transposes are free.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0);
    debug_assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb || k == 0);
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the slice bounds above cover every element touched.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: &mut [f64]) {
        if self == Activation::Relu {
            for x in v {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
        }
    }

    /// Masks `grad` in place given the activation's output.
    #[inline]
    pub fn backward(self, out: &[f64], grad: &mut [f64]) {
        if self == Activation::Relu {
            for (g, o) in grad.iter_mut().zip(out) {
                if *o <= 0.0 {
                    *g = 0.0;
                }
            }
        }
    }
}

/// Square-kernel 2-D convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub use_bias: bool,
    /// `out_c x (in_c * k * k)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

/// Saved `im2col` matrix of a forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, use_bias: bool) -> Self {
        let n = out_c * in_c * k * k;
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            use_bias,
            weight: vec![0.0; n],
            bias: vec![0.0; out_c],
            grad_weight: vec![0.0; n],
            grad_bias: vec![0.0; out_c],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_c * self.k * self.k
    }

    /// Uniform fan-in init with bound `sqrt(gain / fan_in)`; zero bias.
    pub fn init(&mut self, gain: f64, rng: &mut Rng) {
        let bound = (gain / self.fan_in() as f64).sqrt();
        for w in &mut self.weight {
            *w = rng.random_range(-bound..=bound);
        }
        self.bias.fill(0.0);
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor, out_h: usize, out_w: usize) -> Vec<f64> {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let cols_n = out_h * out_w;
        let mut cols = vec![0.0; self.in_c * k * k * cols_n];
        for c in 0..self.in_c {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for oy in 0..out_h {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], cache: &ConvCache) -> Tensor {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let (out_h, out_w) = (cache.out_h, cache.out_w);
        let cols_n = out_h * out_w;
        let mut dx = Tensor::zeros(self.in_c, cache.in_h, cache.in_w);
        let (ih, iw) = (cache.in_h, cache.in_w);
        for c in 0..self.in_c {
            let plane = &mut dx.data[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for oy in 0..out_h {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * iw..(iy as usize + 1) * iw];
                        for ox in 0..out_w {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < iw as isize {
                                dst_row[ix as usize] += src[oy * out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (out_h, out_w) = self.out_size(x.h, x.w);
        let cols = self.im2col(x, out_h, out_w);
        let n = out_h * out_w;
        let kk = self.fan_in();
        let mut y = Tensor::zeros(self.out_c, out_h, out_w);
        if self.use_bias {
            for (o, b) in self.bias.iter().enumerate() {
                y.data[o * n..(o + 1) * n].fill(*b);
            }
        }
        gemm(
            self.out_c,
            kk,
            n,
            &self.weight,
            (kk, 1),
            &cols,
            (n, 1),
            1.0,
            &mut y.data,
            n,
        );
        (
            y,
            ConvCache {
                cols,
                in_h: x.h,
                in_w: x.w,
                out_h,
                out_w,
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &Tensor, cache: &ConvCache, need_input_grad: bool) -> Option<Tensor> {
        let n = cache.out_h * cache.out_w;
        let kk = self.fan_in();
        // dW += dy (out_c x n) * cols^T (n x kk)
        gemm(
            self.out_c,
            n,
            kk,
            &dy.data,
            (n, 1),
            &cache.cols,
            (1, n),
            1.0,
            &mut self.grad_weight,
            kk,
        );
        if self.use_bias {
            for o in 0..self.out_c {
                self.grad_bias[o] += dy.data[o * n..(o + 1) * n].iter().sum::<f64>();
            }
        }
        if !need_input_grad {
            return None;
        }
        // dcols = W^T (kk x out_c) * dy (out_c x n)
        let mut dcols = vec![0.0; kk * n];
        gemm(
            kk,
            self.out_c,
            n,
            &self.weight,
            (1, kk),
            &dy.data,
            (n, 1),
            0.0,
            &mut dcols,
            n,
        );
        Some(self.col2im(&dcols, cache))
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }
}

/// Fully connected layer, `out x in` weights.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize) -> Self {
        Self {
            in_f,
            out_f,
            weight: vec![0.0; in_f * out_f],
            bias: vec![0.0; out_f],
            grad_weight: vec![0.0; in_f * out_f],
            grad_bias: vec![0.0; out_f],
        }
    }

    pub fn init(&mut self, gain: f64, rng: &mut Rng) {
        let bound = (gain / self.in_f as f64).sqrt();
        for w in &mut self.weight {
            *w = rng.random_range(-bound..=bound);
        }
        self.bias.fill(0.0);
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_f)
            .map(|o| {
                self.bias[o]
                    + self.weight[o * self.in_f..(o + 1) * self.in_f]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_f];
        for (o, g) in dy.iter().enumerate() {
            self.grad_bias[o] += g;
            let row = o * self.in_f..(o + 1) * self.in_f;
            for ((gw, w), (d, v)) in self.grad_weight[row.clone()]
                .iter_mut()
                .zip(&self.weight[row])
                .zip(dx.iter_mut().zip(x))
            {
                *gw += g * v;
                *d += g * w;
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn naive_conv(layer: &Conv2d, x: &Tensor) -> Tensor {
        let (oh, ow) = layer.out_size(x.h, x.w);
        let mut y = Tensor::zeros(layer.out_c, oh, ow);
        for o in 0..layer.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = if layer.use_bias { layer.bias[o] } else { 0.0 };
                    for c in 0..layer.in_c {
                        for ky in 0..layer.k {
                            for kx in 0..layer.k {
                                let iy = (oy * layer.stride + ky) as isize - layer.pad as isize;
                                let ix = (ox * layer.stride + kx) as isize - layer.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    let wi = ((o * layer.in_c + c) * layer.k + ky) * layer.k + kx;
                                    acc += layer.weight[wi] * x.data[(c * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                    }
                    y.data[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = stream(41, &[]);
        for (k, s, p) in [(3, 2, 1), (3, 1, 0), (1, 1, 0), (3, 1, 1)] {
            let mut layer = Conv2d::new(3, 4, k, s, p, true);
            layer.init(6.0, &mut rng);
            for b in &mut layer.bias {
                *b = rng.random_range(-1.0..1.0);
            }
            let x = Tensor {
                c: 3,
                h: 9,
                w: 7,
                data: (0..189).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let (y, _) = layer.forward(&x);
            let want = naive_conv(&layer, &x);
            assert_eq!((y.c, y.h, y.w), (want.c, want.h, want.w));
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = stream(42, &[]);
        let mut layer = Conv2d::new(2, 3, 3, 2, 1, true);
        layer.init(6.0, &mut rng);
        let x = Tensor {
            c: 2,
            h: 6,
            w: 5,
            data: (0..60).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        // Loss = sum(y * r) for a fixed random r.
        let (y, cache) = layer.forward(&x);
        let r: Vec<f64> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy = Tensor {
            data: r.clone(),
            ..y.clone()
        };
        let dx = layer.backward(&dy, &cache, true).unwrap();
        let loss = |l: &Conv2d, x: &Tensor| -> f64 { l.forward(x).0.data.iter().zip(&r).map(|(a, b)| a * b).sum() };
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
        for i in 0..layer.weight.len() {
            let mut lp = layer.clone();
            lp.weight[i] += eps;
            let mut lm = layer.clone();
            lm.weight[i] -= eps;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            assert!((fd - layer.grad_weight[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_backward() {
        let mut rng = stream(43, &[]);
        let mut l = Linear::new(5, 2);
        l.init(3.0, &mut rng);
        let x = vec![0.1, -0.4, 0.3, 0.9, -1.0];
        let dx = l.backward(&x, &[1.0, -2.0]);
        for i in 0..5 {
            let want = l.weight[i] - 2.0 * l.weight[5 + i];
            assert!((dx[i] - want).abs() < 1e-15);
        }
        assert_eq!(l.grad_bias, vec![1.0, -2.0]);
    }
}
