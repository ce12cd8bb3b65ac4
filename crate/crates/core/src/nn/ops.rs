//! Layer kernels with explicit backward passes.

use super::scalar::{gemm, Mat, Scalar};
use super::tensor::Tensor;
use crate::resample::{bilinear_taps, LinearTap};

pub const LEAKY_SLOPE: f64 = 0.2;

/// A square convolution with `pad = (k - 1) / 2` and its parameter offsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = (self.k - 1) / 2;
        ((h + 2 * pad - self.k) / self.stride + 1, (w + 2 * pad - self.k) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Valid output column range `[lo, hi)` for kernel column `kx` on an
    /// input of width `w`.
    fn col_range(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, (self.k - 1) / 2);
        let lo = pad.saturating_sub(kx).div_ceil(s).min(wo);
        let hi = if w + pad > kx { ((w + pad - kx - 1) / s + 1).min(wo) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Fills `col` with the column matrix `[cin * k * k, ho * wo]`.
    fn im2col<T: Scalar>(&self, x: &Tensor<T>, ho: usize, wo: usize, col: &mut Vec<T>) {
        let (k, s) = (self.k, self.stride);
        let pad = (k - 1) / 2;
        let n = ho * wo;
        col.resize(self.cin * k * k * n, T::zero());
        for ci in 0..self.cin {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                    let (lo, hi) = self.col_range(kx, x.w, wo);
                    for oy in 0..ho {
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= x.h || lo == hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let ix0 = lo * s + kx - pad;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (d, v) in dst[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(s)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Conv::im2col`], accumulated into `dx`.
    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut Tensor<T>, ho: usize, wo: usize) {
        let (k, s) = (self.k, self.stride);
        let pad = (k - 1) / 2;
        let n = ho * wo;
        let (h, w) = (dx.h, dx.w);
        for ci in 0..self.cin {
            let plane = dx.plane_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                    let (lo, hi) = self.col_range(kx, w, wo);
                    if lo == hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &row[oy * wo + lo..oy * wo + hi];
                        let ix0 = lo * s + kx - pad;
                        if s == 1 {
                            for (d, v) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(src) {
                                *d += *v;
                            }
                        } else {
                            for (d, v) in dst[ix0..].iter_mut().step_by(s).zip(src) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_dims(x.h, x.w);
        let n = ho * wo;
        let ckk = self.cin * self.k * self.k;
        let w = &params[self.weight..self.weight + self.weight_len()];
        let b = &params[self.bias..self.bias + self.cout];
        let mut out = Vec::with_capacity(self.cout * n);
        for &bo in b {
            out.extend(std::iter::repeat(bo).take(n));
        }
        if self.is_pointwise() {
            gemm(Mat::new(w, self.cout, ckk), Mat::new(&x.data, ckk, n), T::one(), &mut out);
        } else {
            T::with_scratch(|col, _| {
                self.im2col(x, ho, wo, col);
                gemm(Mat::new(w, self.cout, ckk), Mat::new(col, ckk, n), T::one(), &mut out);
            });
        }
        Tensor::from_vec(self.cout, ho, wo, out)
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_dx`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (ho, wo) = (dy.h, dy.w);
        let n = ho * wo;
        let ckk = self.cin * self.k * self.k;
        for (o, chunk) in dy.data.chunks_exact(n).enumerate() {
            let s: T = chunk.iter().copied().sum();
            grads[self.bias + o] += s;
        }
        let w = &params[self.weight..self.weight + self.weight_len()];
        let dw = &mut grads[self.weight..self.weight + self.weight_len()];
        if self.is_pointwise() {
            gemm(Mat::new(&dy.data, self.cout, n), Mat::new(&x.data, ckk, n).t(), T::one(), dw);
            if !need_dx {
                return None;
            }
            let mut dx = vec![T::zero(); ckk * n];
            gemm(Mat::new(w, self.cout, ckk).t(), Mat::new(&dy.data, self.cout, n), T::zero(), &mut dx);
            return Some(Tensor::from_vec(self.cin, x.h, x.w, dx));
        }
        T::with_scratch(|col, dcol| {
            self.im2col(x, ho, wo, col);
            gemm(Mat::new(&dy.data, self.cout, n), Mat::new(col, ckk, n).t(), T::one(), dw);
            if !need_dx {
                return None;
            }
            dcol.resize(ckk * n, T::zero());
            gemm(Mat::new(w, self.cout, ckk).t(), Mat::new(&dy.data, self.cout, n), T::zero(), dcol);
            let mut dx = Tensor::zeros(self.cin, x.h, x.w);
            self.col2im(dcol, &mut dx, ho, wo);
            Some(dx)
        })
    }
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let slope = T::of(LEAKY_SLOPE);
    let data = x.data.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect();
    Tensor::from_vec(x.c, x.h, x.w, data)
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let slope = T::of(LEAKY_SLOPE);
    let data = x.data.iter().zip(&dy.data).map(|(&v, &g)| if v > T::zero() { g } else { g * slope }).collect();
    Tensor::from_vec(x.c, x.h, x.w, data)
}

fn taps2(n: usize) -> Vec<LinearTap> {
    bilinear_taps(n, 2 * n)
}

/// Bilinear 2x upsampling with half-pixel centres.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (2 * x.h, 2 * x.w);
    let tx = taps2(x.w);
    let ty = taps2(x.h);
    let mut out = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for (oy, t) in ty.iter().enumerate() {
            let (fy0, fy1) = (T::of(1.0 - t.frac), T::of(t.frac));
            let r0 = &src[t.i0 * x.w..][..x.w];
            let r1 = &src[t.i1 * x.w..][..x.w];
            for (ox, u) in tx.iter().enumerate() {
                let (fx0, fx1) = (T::of(1.0 - u.frac), T::of(u.frac));
                let top = r0[u.i0] * fx0 + r0[u.i1] * fx1;
                let bot = r1[u.i0] * fx0 + r1[u.i1] * fx1;
                dst[oy * w2 + ox] = top * fy0 + bot * fy1;
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let tx = taps2(w);
    let ty = taps2(h);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let g = dy.plane(c);
        let dst = dx.plane_mut(c);
        for (oy, t) in ty.iter().enumerate() {
            let (fy0, fy1) = (T::of(1.0 - t.frac), T::of(t.frac));
            for (ox, u) in tx.iter().enumerate() {
                let (fx0, fx1) = (T::of(1.0 - u.frac), T::of(u.frac));
                let v = g[oy * dy.w + ox];
                dst[t.i0 * w + u.i0] += v * fy0 * fx0;
                dst[t.i0 * w + u.i1] += v * fy0 * fx1;
                dst[t.i1 * w + u.i0] += v * fy1 * fx0;
                dst[t.i1 * w + u.i1] += v * fy1 * fx1;
            }
        }
    }
    dx
}

/// Softmax across channels at every pixel.
pub fn softmax_channels<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let n = z.plane_len();
    let mut out = Tensor::zeros(z.c, z.h, z.w);
    for i in 0..n {
        let mut mx = T::neg_infinity();
        for c in 0..z.c {
            mx = mx.max(z.data[c * n + i]);
        }
        let mut sum = T::zero();
        for c in 0..z.c {
            let e = (z.data[c * n + i] - mx).exp();
            out.data[c * n + i] = e;
            sum += e;
        }
        for c in 0..z.c {
            out.data[c * n + i] = out.data[c * n + i] / sum;
        }
    }
    out
}

/// Gradient w.r.t. logits given the softmax output `w` and `dL/dw`.
pub fn softmax_channels_backward<T: Scalar>(w: &Tensor<T>, dw: &Tensor<T>) -> Tensor<T> {
    let n = w.plane_len();
    let mut dz = Tensor::zeros(w.c, w.h, w.w);
    for i in 0..n {
        let mut dot = T::zero();
        for c in 0..w.c {
            dot += w.data[c * n + i] * dw.data[c * n + i];
        }
        for c in 0..w.c {
            dz.data[c * n + i] = w.data[c * n + i] * (dw.data[c * n + i] - dot);
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(conv: &Conv, p: &[f64], x: &Tensor<f64>) -> Tensor<f64> {
        let (ho, wo) = conv.out_dims(x.h, x.w);
        let pad = (conv.k - 1) as isize / 2;
        let mut out = Tensor::zeros(conv.cout, ho, wo);
        for o in 0..conv.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = p[conv.bias + o];
                    for ci in 0..conv.cin {
                        for ky in 0..conv.k {
                            for kx in 0..conv.k {
                                let iy = (oy * conv.stride + ky) as isize - pad;
                                let ix = (ox * conv.stride + kx) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wi = ((o * conv.cin + ci) * conv.k + ky) * conv.k + kx;
                                acc += p[conv.weight + wi] * x.at(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(cin, cout, k, stride, h, w) in
            &[(2, 3, 3, 1, 5, 7), (3, 2, 3, 2, 8, 6), (4, 2, 1, 1, 3, 3), (1, 1, 3, 2, 5, 5)]
        {
            let conv = Conv { cin, cout, k, stride, weight: 0, bias: cout * cin * k * k };
            let p = pseudo(conv.bias + cout, 3);
            let x = Tensor::from_vec(cin, h, w, pseudo(cin * h * w, 9));
            let got = conv.forward(&p, &x);
            let want = naive_conv(&conv, &p, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and w: check dx and dw via inner products.
        for &(k, stride) in &[(3, 1), (3, 2), (1, 1)] {
            let conv = Conv { cin: 3, cout: 2, k, stride, weight: 0, bias: 2 * 3 * k * k };
            let mut p = pseudo(conv.bias + 2, 5);
            let x = Tensor::from_vec(3, 6, 6, pseudo(108, 11));
            let y = conv.forward(&p, &x);
            let g = Tensor::from_vec(y.c, y.h, y.w, pseudo(y.data.len(), 13));
            let mut grads = vec![0.0; p.len()];
            let dx = conv.backward(&p, &x, &g, &mut grads, true).unwrap();
            let inner = |y: &Tensor<f64>| y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum::<f64>();
            let base = inner(&y);
            // Directional derivative in x.
            let v = pseudo(108, 17);
            let xv = Tensor::from_vec(3, 6, 6, x.data.iter().zip(&v).map(|(a, b)| a + b).collect());
            let dir = inner(&conv.forward(&p, &xv)) - base;
            let pred: f64 = dx.data.iter().zip(&v).map(|(a, b)| a * b).sum();
            assert!((dir - pred).abs() < 1e-10);
            // Directional derivative in the parameters.
            let u = pseudo(p.len(), 19);
            for (a, b) in p.iter_mut().zip(&u) {
                *a += b;
            }
            let dir = inner(&conv.forward(&p, &x)) - base;
            let pred: f64 = grads.iter().zip(&u).map(|(a, b)| a * b).sum();
            assert!((dir - pred).abs() < 1e-10);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::from_vec(2, 3, 5, pseudo(30, 1));
        let y = upsample2(&x);
        let g = Tensor::from_vec(2, 6, 10, pseudo(120, 2));
        let dx = upsample2_backward(&g);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_and_uniform_on_equal_logits() {
        let z = Tensor::from_vec(3, 2, 2, pseudo(12, 4).iter().map(|v| v * 50.0).collect());
        let w = softmax_channels(&z);
        for i in 0..4 {
            let s: f64 = (0..3).map(|c| w.data[c * 4 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let u = softmax_channels(&Tensor::<f64>::zeros(4, 2, 2));
        assert!(u.data.iter().all(|&v| v == 0.25));
    }
}
