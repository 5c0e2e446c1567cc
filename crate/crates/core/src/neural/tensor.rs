//! Dense row-major tensors and the handful of kernels the network needs.

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::Float;

/// Floating-point element type with a matching GEMM kernel.
pub trait Scalar: Float + AddAssign + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices of
    /// the given sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    /// Panics if `data.len()` is not the product of `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?}");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }
}

/// Row-major matrix product with optional transposes:
/// `C (m×n) = op(A) (m×k) · op(B) (k×n)`, accumulated into `C` when
/// `accumulate` is set.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths checked above; c does not alias a or b.
    unsafe {
        T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1)
    }
}

/// Geometry of a square-kernel 2-D convolution over a single `[C, H, W]`
/// sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// A 1×1, stride-1, unpadded convolution reads its input directly.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `input` into a `[C·k·k, Ho·Wo]` patch matrix.
pub fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T], cols: &mut Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    cols.clear();
    cols.resize(g.patch_len() * n, T::zero());
    for c in 0..g.in_channels {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], input_grad: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut input_grad[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward pass. Returns the `[O, Ho·Wo]` output; `cols`
/// receives the patch matrix needed by the backward pass (left empty for
/// pointwise convolutions, which reuse the input).
pub fn conv_forward<T: Scalar>(
    g: &ConvGeometry,
    weight: &[T],
    bias: &[T],
    input: &[T],
    cols: &mut Vec<T>,
) -> Vec<T> {
    let out_c = bias.len();
    let n = g.out_h() * g.out_w();
    let mut out = vec![T::zero(); out_c * n];
    for (o, b) in bias.iter().enumerate() {
        out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *b);
    }
    let patches: &[T] = if g.is_pointwise() {
        cols.clear();
        input
    } else {
        im2col(g, input, cols);
        cols
    };
    matmul(out_c, g.patch_len(), n, weight, false, patches, false, &mut out, true);
    out
}

/// Convolution backward pass: accumulates weight and bias gradients and
/// returns the input gradient when `want_input_grad` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    g: &ConvGeometry,
    weight: &[T],
    input: &[T],
    cols: &[T],
    out_grad: &[T],
    weight_grad: &mut [T],
    bias_grad: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let out_c = bias_grad.len();
    let n = g.out_h() * g.out_w();
    let k = g.patch_len();
    let patches = if g.is_pointwise() { input } else { cols };
    matmul(out_c, n, k, out_grad, false, patches, true, weight_grad, true);
    for (o, bg) in bias_grad.iter_mut().enumerate() {
        let mut s = T::zero();
        for &v in &out_grad[o * n..(o + 1) * n] {
            s += v;
        }
        *bg += s;
    }
    if !want_input_grad {
        return None;
    }
    let mut input_grad = vec![T::zero(); g.in_channels * g.in_h * g.in_w];
    if g.is_pointwise() {
        matmul(k, out_c, n, weight, true, out_grad, false, &mut input_grad, false);
    } else {
        let mut col_grad = vec![T::zero(); k * n];
        matmul(k, out_c, n, weight, true, out_grad, false, &mut col_grad, false);
        col2im(g, &col_grad, &mut input_grad);
    }
    Some(input_grad)
}

/// `y = W x + b` with `W` of shape `[out, in]`.
pub fn linear_forward<T: Scalar>(weight: &[T], bias: &[T], x: &[T]) -> Vec<T> {
    let mut y = bias.to_vec();
    matmul(bias.len(), x.len(), 1, weight, false, x, false, &mut y, true);
    y
}

pub fn linear_backward<T: Scalar>(
    weight: &[T],
    x: &[T],
    y_grad: &[T],
    weight_grad: &mut [T],
    bias_grad: &mut [T],
) -> Vec<T> {
    let (out, inp) = (y_grad.len(), x.len());
    matmul(out, 1, inp, y_grad, false, x, false, weight_grad, true);
    for (b, &g) in bias_grad.iter_mut().zip(y_grad) {
        *b += g;
    }
    let mut x_grad = vec![T::zero(); inp];
    matmul(inp, out, 1, weight, true, y_grad, false, &mut x_grad, false);
    x_grad
}

pub fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Masks `grad` by the positivity of the ReLU output.
pub fn relu_backward<T: Scalar>(output: &[T], grad: &mut [T]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive_conv(g: &ConvGeometry, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; b.len() * oh * ow];
        for o in 0..b.len() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[o];
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                    s += w[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx]
                                        * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv_matches_naive() {
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let g = ConvGeometry { in_channels: 3, in_h: 7, in_w: 6, kernel: k, stride: s, pad: p };
            let w = ramp(4 * g.patch_len(), 1.0);
            let b = ramp(4, 0.3);
            let x = ramp(3 * 7 * 6, 2.0);
            let mut cols = Vec::new();
            let fast = conv_forward(&g, &w, &b, &x, &mut cols);
            let slow = naive_conv(&g, &w, &b, &x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), r> = <x, conv^T(r)> for the linear part (zero bias)
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let g = ConvGeometry { in_channels: 2, in_h: 5, in_w: 6, kernel: k, stride: s, pad: p };
            let w = ramp(3 * g.patch_len(), 1.0);
            let b = vec![0.0; 3];
            let x = ramp(2 * 5 * 6, 1.0);
            let r = ramp(3 * g.out_h() * g.out_w(), 0.7);
            let mut cols = Vec::new();
            let y = conv_forward(&g, &w, &b, &x, &mut cols);
            let mut wg = vec![0.0; w.len()];
            let mut bg = vec![0.0; 3];
            let xg = conv_backward(&g, &w, &x, &cols, &r, &mut wg, &mut bg, true).unwrap();
            let lhs: f64 = y.iter().zip(&r).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&xg).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
            // and the same identity in the weights
            let rhs_w: f64 = w.iter().zip(&wg).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_w).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_round_trip() {
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = linear_forward(&w, &[0.5, -0.5], &[1.0, 0.0, -1.0]);
        assert_eq!(y, vec![-1.5, -2.5]);
        let mut wg = vec![0.0; 6];
        let mut bg = vec![0.0; 2];
        let xg = linear_backward(&w, &[1.0, 0.0, -1.0], &[1.0, 2.0], &mut wg, &mut bg);
        assert_eq!(xg, vec![9.0, 12.0, 15.0]);
        assert_eq!(wg, vec![1.0, 0.0, -1.0, 2.0, 0.0, -2.0]);
        assert_eq!(bg, vec![1.0, 2.0]);
    }
}
