//! Convolution kernels on single-sample CHW buffers, lowered to GEMM.

use std::fmt::Debug;

use num_traits::Float;

/// Element type of network buffers: `f32` for training, `f64` for
/// gradient checks.
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize, k: usize, n: usize,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self], rsc: isize, csc: isize,
    );

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize, k: usize, n: usize,
                a: &[Self], rsa: isize, csa: isize,
                b: &[Self], rsb: isize, csb: isize,
                beta: Self,
                c: &mut [Self], rsc: isize, csc: isize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: the asserts above keep every strided access in bounds,
                // and `c` is exclusively borrowed.
                unsafe {
                    $gemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }

            fn of_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Static shape of one convolution. Weights are stored `[k, k, c_in, c_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvShape {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }

    pub fn rows(&self) -> usize {
        self.k * self.k * self.c_in
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Cached lowering of one convolution input.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    /// `[k*k*c_in, out_h*out_w]`; empty for pointwise convolutions, whose
    /// input is used directly.
    cols: Vec<T>,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, s: &ConvShape, out_h: usize, out_w: usize) -> Vec<T> {
    let p = out_h * out_w;
    let mut cols = vec![T::zero(); s.rows() * p];
    for ky in 0..s.k {
        for kx in 0..s.k {
            for ci in 0..s.c_in {
                let row = ((ky * s.k + kx) * s.c_in + ci) * p;
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for oy in 0..out_h {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * out_w..row + (oy + 1) * out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], dx: &mut [T], h: usize, w: usize, s: &ConvShape, out_h: usize, out_w: usize) {
    let p = out_h * out_w;
    for ky in 0..s.k {
        for kx in 0..s.k {
            for ci in 0..s.c_in {
                let row = ((ky * s.k + kx) * s.c_in + ci) * p;
                let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
                for oy in 0..out_h {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * out_w..row + (oy + 1) * out_w];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns `[c_out, out_h*out_w]` and the cache that
/// `conv_backward` needs.
pub fn conv_forward<T: Scalar>(x: &[T], h: usize, w: usize, s: &ConvShape, weight: &[T], bias: &[T]) -> (Vec<T>, ConvCache<T>) {
    debug_assert_eq!(x.len(), s.c_in * h * w);
    let (out_h, out_w) = s.out_dims(h, w);
    let p = out_h * out_w;
    let cols = if s.is_pointwise() { Vec::new() } else { im2col(x, h, w, s, out_h, out_w) };
    let b_mat: &[T] = if s.is_pointwise() { x } else { &cols };
    let mut out = vec![T::zero(); s.c_out * p];
    for (co, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias[co]);
    }
    // out[co, p] += sum_r W[r, co] * cols[r, p]
    T::gemm(s.c_out, s.rows(), p, weight, 1, s.c_out as isize, b_mat, p as isize, 1, T::one(), &mut out, p as isize, 1);
    (out, ConvCache { cols, in_h: h, in_w: w, out_h, out_w })
}

/// Accumulates weight and bias gradients and returns the input gradient
/// (or nothing when `need_dx` is false).
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: &[T],
    cache: &ConvCache<T>,
    s: &ConvShape,
    weight: &[T],
    d_out: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let p = cache.out_h * cache.out_w;
    let b_mat: &[T] = if s.is_pointwise() { x } else { &cache.cols };
    // dW[r, co] += sum_p cols[r, p] * dOut[co, p]
    T::gemm(s.rows(), p, s.c_out, b_mat, p as isize, 1, d_out, 1, p as isize, T::one(), d_weight, s.c_out as isize, 1);
    for (co, row) in d_out.chunks_exact(p).enumerate() {
        d_bias[co] = d_bias[co] + row.iter().copied().sum::<T>();
    }
    if !need_dx {
        return None;
    }
    // dCols[r, p] = sum_co W[r, co] * dOut[co, p]
    let mut d_cols = vec![T::zero(); s.rows() * p];
    T::gemm(s.rows(), s.c_out, p, weight, s.c_out as isize, 1, d_out, p as isize, 1, T::zero(), &mut d_cols, p as isize, 1);
    if s.is_pointwise() {
        return Some(d_cols);
    }
    let mut dx = vec![T::zero(); s.c_in * cache.in_h * cache.in_w];
    col2im(&d_cols, &mut dx, cache.in_h, cache.in_w, s, cache.out_h, cache.out_w);
    Some(dx)
}

pub fn relu_inplace<T: Scalar>(v: &mut [T]) {
    for x in v.iter_mut() {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes `grad` where the ReLU output was not positive.
pub fn relu_backward<T: Scalar>(output: &[T], grad: &mut [T]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}
