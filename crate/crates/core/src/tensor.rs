//! Scalar abstraction and the handful of dense kernels the policy needs.
//!
//! Matrices are row-major slices with explicit strides; products go through
//! `matrixmultiply`, everything else is plain loops.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Scalar:
    Float + Default + Debug + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    /// # Safety
    /// Pointers and strides must address valid `m x k`, `k x n` and `m x n`
    /// matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite constant")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
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
    unsafe fn gemm_raw(
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

/// A strided matrix view starting at element `(0, 0)` of `data`.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub rs: usize,
    pub cs: usize,
}

/// Row-major `rows x cols` view.
pub fn mat<T>(data: &[T], cols: usize) -> View<'_, T> {
    View { data, rs: cols, cs: 1 }
}

pub fn mat_mut<T>(data: &mut [T], cols: usize) -> ViewMut<'_, T> {
    ViewMut { data, rs: cols, cs: 1 }
}

impl<'a, T> View<'a, T> {
    pub fn t(self) -> View<'a, T> {
        View {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c = alpha * a @ b + beta * c` for `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, alpha: T, a: View<T>, b: View<T>, beta: T, c: ViewMut<T>) {
    assert!(extent(m, k, a.rs, a.cs) <= a.data.len(), "lhs out of bounds");
    assert!(extent(k, n, b.rs, b.cs) <= b.data.len(), "rhs out of bounds");
    assert!(extent(m, n, c.rs, c.cs) <= c.data.len(), "output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c.data[i * c.rs + j * c.cs];
                *v = if beta == T::zero() { T::zero() } else { beta * *v };
            }
        }
        return;
    }
    // SAFETY: extents checked above; `c` is a unique borrow so it cannot
    // alias the shared inputs.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// Row-wise normalization without affine parameters. Returns the inverse
/// standard deviation of each row.
pub fn layer_norm<T: Scalar>(x: &[T], cols: usize, out: &mut [T]) -> Vec<T> {
    let eps = T::of(1e-5);
    let inv_n = T::one() / T::of(cols as f64);
    let mut rstd = Vec::with_capacity(x.len() / cols);
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let r = T::one() / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - mean) * r;
        }
        rstd.push(r);
    }
    rstd
}

/// Accumulates the input gradient of [`layer_norm`] into `dx`, given the
/// normalized output `y`, its gradient `dy` and the row scales.
pub fn layer_norm_backward<T: Scalar>(y: &[T], dy: &[T], rstd: &[T], cols: usize, dx: &mut [T]) {
    let inv_n = T::one() / T::of(cols as f64);
    for (((yr, dyr), &r), dxr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(rstd)
        .zip(dx.chunks_exact_mut(cols))
    {
        let mean_dy = dyr.iter().copied().sum::<T>() * inv_n;
        let mean_dyy = dyr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
        for ((d, &g), &yv) in dxr.iter_mut().zip(dyr).zip(yr) {
            *d += r * (g - mean_dy - yv * mean_dyy);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

pub fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * u * u)
}

/// In-place softmax over `row`; returns log-sum-exp.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
    max + sum.ln()
}

/// Log-sum-exp of a row without modifying it.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `-log(sigmoid(z))`, evaluated as `softplus(-z)`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    let x = -z;
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
