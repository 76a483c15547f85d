//! Raw kernels shared by the tape's forward and backward passes.
//!
//! Reduction order inside every kernel depends only on operand shapes, never
//! on the values of unrelated rows, so a row's result is reproducible when
//! other rows change.

use super::Real;

/// `C (+)= op(A)·op(B)` with `op(A)` of shape `m×k` and `op(B)` of shape `k×n`.
///
/// `ta` means `a` is stored as `k×m`; `tb` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

/// Rotation frequency for coordinate pair `i` of a `dim`-wide head.
#[inline]
pub fn rotary_theta(i: usize, dim: usize, base: f64) -> f64 {
    base.powf(-2.0 * i as f64 / dim as f64)
}

/// Rotates pairs `(2i, 2i+1)` of the last axis by `position·θ_i`.
///
/// `data` is viewed as `[outer, positions.len(), dim]`. With `inverse` the
/// rotation angle is negated, which is the transpose (and inverse) map.
pub fn rotate_pairs<T: Real>(data: &mut [T], positions: &[usize], dim: usize, base: f64, inverse: bool) {
    let seq = positions.len();
    let half = dim / 2;
    // cos/sin tables computed in f64 and rounded once, so f32 and f64 paths agree.
    let mut cos = vec![T::zero(); seq * half];
    let mut sin = vec![T::zero(); seq * half];
    for (t, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let angle = p as f64 * rotary_theta(i, dim, base);
            let angle = if inverse { -angle } else { angle };
            cos[t * half + i] = T::of(angle.cos());
            sin[t * half + i] = T::of(angle.sin());
        }
    }
    for block in data.chunks_exact_mut(seq * dim) {
        for t in 0..seq {
            let row = &mut block[t * dim..(t + 1) * dim];
            for i in 0..half {
                let (c, s) = (cos[t * half + i], sin[t * half + i]);
                let x0 = row[2 * i];
                let x1 = row[2 * i + 1];
                row[2 * i] = x0 * c - x1 * s;
                row[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x·Φ(x)`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf());
    let pdf = T::of(FRAC_1_SQRT_2PI) * (T::of(-0.5) * x * x).exp();
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Strides of a row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[perm-index] = input[index]` for a permutation `axes` of the input axes:
/// output axis `j` is input axis `axes[j]`.
pub fn permute<T: Real>(input: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    // stride in the input for each output axis
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(input.len());
    if input.is_empty() {
        return (out_shape, out);
    }
    // Innermost output axis copied in a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = src[rank - 1];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    loop {
        let base: usize = idx.iter().zip(&src).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&input[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| input[base + i * inner_stride]));
        }
        // odometer over the outer axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (j, &a) in axes.iter().enumerate() {
        inv[a] = j;
    }
    inv
}
