//! Raw numeric kernels shared by forward and adjoint rules.

use super::array::{strides, Tensor};

/// `C = A . B` (or `C += A . B` when `accumulate`), with `C` row-major
/// `[m, n]`. `A` is `[m, k]` and `B` is `[k, n]` addressed through
/// `(row_stride, col_stride)` pairs, so transposed operands cost nothing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let last = |rs: usize, cs: usize, rows: usize, cols: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(a.len() > last(rsa, csa, m, k), "gemm: A too short");
    assert!(b.len() > last(rsb, csb, k, n), "gemm: B too short");
    assert!(c.len() >= m * n, "gemm: C too short");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index matrixmultiply touches.
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
            n as isize,
            1,
        );
    }
}

/// Pairwise summation; keeps reductions over long rows accurate.
pub(crate) fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 32 {
        return x.iter().sum();
    }
    let (l, r) = x.split_at(x.len() / 2);
    pairwise_sum(l) + pairwise_sum(r)
}

pub(crate) fn permute(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let data = x.data();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        return x.clone();
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute shape")
}

pub(crate) fn softmax_inplace(d: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let max = (0..len)
                .map(|l| d[idx(l)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for l in 0..len {
                let e = (d[idx(l)] - max).exp();
                d[idx(l)] = e;
                sum += e;
            }
            for l in 0..len {
                d[idx(l)] /= sum;
            }
        }
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[derive(Debug, Clone)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let out_h = (x[1] + 2 * pad - w[2]) / stride + 1;
        let out_w = (x[2] + 2 * pad - w[3]) / stride + 1;
        ConvGeometry {
            c_in: x[0],
            h: x[1],
            w: x[2],
            c_out: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output row/col `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.pad)
            .filter(|&v| v < extent)
    }
}

/// Unfolds `[C_in, H, W]` into `[C_in*kh*kw, out_h*out_w]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.out_h {
                    let Some(ii) = g.src(oi, ki, g.h) else {
                        continue;
                    };
                    for oj in 0..g.out_w {
                        if let Some(jj) = g.src(oj, kj, g.w) {
                            dst[oi * g.out_w + oj] = x[(c * g.h + ii) * g.w + jj];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.out_h {
                    let Some(ii) = g.src(oi, ki, g.h) else {
                        continue;
                    };
                    for oj in 0..g.out_w {
                        if let Some(jj) = g.src(oj, kj, g.w) {
                            dx[(c * g.h + ii) * g.w + jj] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}
