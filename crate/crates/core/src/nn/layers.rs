//! Convolutional building blocks with explicit forward caches and backward
//! passes. Parameters live in one flat `f64` buffer owned by the model;
//! layers only remember their offsets into it.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::tensor::Tensor;

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub w_off: usize,
    pub b_off: usize,
}

const K: usize = 3;
const KK: usize = K * K;

impl Conv {
    /// Allocates parameter slots starting at `*cursor`.
    pub fn new(in_ch: usize, out_ch: usize, cursor: &mut usize) -> Self {
        let w_off = *cursor;
        let b_off = w_off + out_ch * in_ch * KK;
        *cursor = b_off + out_ch;
        Self {
            in_ch,
            out_ch,
            w_off,
            b_off,
        }
    }

    pub fn param_len(&self) -> usize {
        self.out_ch * self.in_ch * KK + self.out_ch
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let fan_in = (self.in_ch * KK) as f64;
        let bound = math::sqrt(6.0 / fan_in);
        for w in &mut params[self.w_off..self.b_off] {
            *w = rng.random_range(-bound..bound);
        }
        for b in &mut params[self.b_off..self.b_off + self.out_ch] {
            *b = 0.0;
        }
    }

    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.w_off..self.b_off]
    }

    pub fn forward(&self, params: &[f64], input: &Tensor) -> (Tensor, Vec<f64>) {
        debug_assert_eq!(input.channels(), self.in_ch);
        let (h, w) = (input.height(), input.width());
        let n = h * w;
        let cols = im2col(input);
        let mut out = Tensor::zeros(self.out_ch, h, w);
        let bias = &params[self.b_off..self.b_off + self.out_ch];
        for (oc, &b) in bias.iter().enumerate() {
            out.plane_mut(oc).fill(b);
        }
        gemm(
            self.out_ch,
            self.in_ch * KK,
            n,
            self.weights(params),
            (self.in_ch * KK, 1),
            &cols,
            (n, 1),
            out.data_mut(),
            1.0,
        );
        (out, cols)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, params: &[f64], cols: &[f64], d_out: &Tensor, grads: &mut [f64]) -> Tensor {
        let (h, w) = (d_out.height(), d_out.width());
        let n = h * w;
        let kdim = self.in_ch * KK;
        // dW[oc, j] += sum_p dOut[oc, p] * cols[j, p]
        gemm(
            self.out_ch,
            n,
            kdim,
            d_out.data(),
            (n, 1),
            cols,
            (1, n),
            &mut grads[self.w_off..self.b_off],
            1.0,
        );
        for oc in 0..self.out_ch {
            grads[self.b_off + oc] += d_out.plane(oc).iter().sum::<f64>();
        }
        // dCols[j, p] = sum_oc W[oc, j] * dOut[oc, p]
        let mut d_cols = vec![0.0; kdim * n];
        gemm(
            kdim,
            self.out_ch,
            n,
            self.weights(params),
            (1, kdim),
            d_out.data(),
            (n, 1),
            &mut d_cols,
            0.0,
        );
        col2im(&d_cols, self.in_ch, h, w)
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserts above guarantee every strided access stays within
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &Tensor) -> Vec<f64> {
    let (ch, h, w) = (input.channels(), input.height(), input.width());
    let n = h * w;
    let mut cols = vec![0.0; ch * KK * n];
    for c in 0..ch {
        let plane = input.plane(c);
        for ky in 0..K {
            for kx in 0..K {
                let row = (c * KK + ky * K + kx) * n;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut cols[row + y * w..row + (y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], ch: usize, h: usize, w: usize) -> Tensor {
    let n = h * w;
    let mut out = Tensor::zeros(ch, h, w);
    for c in 0..ch {
        let plane = out.plane_mut(c);
        for ky in 0..K {
            for kx in 0..K {
                let row = (c * KK + ky * K + kx) * n;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + y * w..row + (y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn relu(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    t
}

/// Masks `grad` by `activated > 0` in place.
pub(crate) fn relu_backward(activated: &Tensor, mut grad: Tensor) -> Tensor {
    for (g, &a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub(crate) fn max_pool(input: &Tensor) -> (Tensor, Vec<u32>) {
    let (ch, h, w) = (input.channels(), input.height() / 2, input.width() / 2);
    let mut out = Tensor::zeros(ch, h, w);
    let mut argmax = vec![0u32; ch * h * w];
    let iw = input.width();
    for c in 0..ch {
        let src = input.plane(c);
        for y in 0..h {
            for x in 0..w {
                let base = 2 * y * iw + 2 * x;
                let mut best = base;
                for idx in [base + 1, base + iw, base + iw + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = (c * h + y) * w + x;
                out.data_mut()[o] = src[best];
                argmax[o] = best as u32;
            }
        }
    }
    (out, argmax)
}

pub(crate) fn max_pool_backward(argmax: &[u32], in_shape: (usize, usize, usize), d_out: &Tensor) -> Tensor {
    let (ch, h, w) = in_shape;
    let mut d_in = Tensor::zeros(ch, h, w);
    let n_out = d_out.plane_len();
    for c in 0..ch {
        let g = d_out.plane(c);
        let am = &argmax[c * n_out..(c + 1) * n_out];
        let plane = d_in.plane_mut(c);
        for (o, &idx) in am.iter().enumerate() {
            plane[idx as usize] += g[o];
        }
    }
    d_in
}

pub(crate) fn avg_pool(input: &Tensor) -> Tensor {
    let (ch, h, w) = (input.channels(), input.height() / 2, input.width() / 2);
    let iw = input.width();
    let mut out = Tensor::zeros(ch, h, w);
    for c in 0..ch {
        let src = input.plane(c);
        for y in 0..h {
            for x in 0..w {
                let base = 2 * y * iw + 2 * x;
                let s = src[base] + src[base + 1] + src[base + iw] + src[base + iw + 1];
                out.set(c, y, x, 0.25 * s);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(in_shape: (usize, usize, usize), d_out: &Tensor) -> Tensor {
    let (ch, h, w) = in_shape;
    let mut d_in = Tensor::zeros(ch, h, w);
    for c in 0..ch {
        for y in 0..d_out.height() {
            for x in 0..d_out.width() {
                let g = 0.25 * d_out.get(c, y, x);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    d_in.set(c, 2 * y + dy, 2 * x + dx, g);
                }
            }
        }
    }
    d_in
}

pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(a.channels() + b.channels(), a.height(), a.width(), data)
        .expect("concatenated shapes agree")
}

pub(crate) fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let n = t.plane_len();
    let (a, b) = t.data().split_at(first * n);
    (
        Tensor::from_vec(first, t.height(), t.width(), a.to_vec()).expect("split shape"),
        Tensor::from_vec(t.channels() - first, t.height(), t.width(), b.to_vec()).expect("split shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(conv: &Conv, params: &[f64], input: &Tensor) -> Tensor {
        let (h, w) = (input.height(), input.width());
        let mut out = Tensor::zeros(conv.out_ch, h, w);
        for oc in 0..conv.out_ch {
            for y in 0..h {
                for x in 0..w {
                    let mut s = params[conv.b_off + oc];
                    for ic in 0..conv.in_ch {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = x as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wi = conv.w_off + ((oc * conv.in_ch + ic) * 3 + ky) * 3 + kx;
                                s += params[wi] * input.get(ic, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(oc, y, x, s);
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_convolution() {
        let mut cursor = 0;
        let conv = Conv::new(2, 3, &mut cursor);
        let params: Vec<f64> = (0..cursor).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let data: Vec<f64> = (0..2 * 5 * 4).map(|i| ((i * 13 % 7) as f64) / 3.0).collect();
        let input = Tensor::from_vec(2, 5, 4, data).unwrap();
        let (fast, _) = conv.forward(&params, &input);
        let slow = naive_conv(&conv, &params, &input);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> is linear in x, so <dx, x> should equal <conv(x) - bias, g>.
        let mut cursor = 0;
        let conv = Conv::new(2, 2, &mut cursor);
        let params: Vec<f64> = (0..cursor).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect();
        let mut no_bias = params.clone();
        no_bias[conv.b_off..conv.b_off + 2].fill(0.0);
        let x = Tensor::from_vec(2, 4, 4, (0..32).map(|i| (i as f64).sin()).collect()).unwrap();
        let g = Tensor::from_vec(2, 4, 4, (0..32).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        let (y, cols) = conv.forward(&no_bias, &x);
        let mut grads = vec![0.0; cursor];
        let dx = conv.backward(&no_bias, &cols, &g, &mut grads);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, 2, 2, alloc::vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let (y, am) = max_pool(&x);
        assert_eq!(y.data(), &[0.9]);
        let d = max_pool_backward(&am, (1, 2, 2), &Tensor::filled(1, 1, 1, 2.0));
        assert_eq!(d.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
