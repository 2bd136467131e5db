//! Dense f64 kernels shared by the plain and taped execution paths.
//!
//! Both paths must produce bitwise-identical values, so every numeric routine
//! that appears in a rollout lives here and nowhere else. The dot product uses
//! eight independent accumulators; the evaluation order is fixed, which keeps
//! results reproducible across runs while still vectorizing.

/// Dot product with a fixed accumulation order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] = a[i + l].mul_add(b[i + l], acc[l]);
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += k * x`
#[inline]
pub(crate) fn axpy(y: &mut [f64], k: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = xi.mul_add(k, *yi);
    }
}

/// `y = W x`, with `W` stored row-major (`rows` x `cols`).
#[inline]
pub(crate) fn matvec(y: &mut [f64], w: &[f64], rows: usize, cols: usize, x: &[f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for (i, yi) in y.iter_mut().enumerate() {
        *yi = dot(&w[i * cols..(i + 1) * cols], x);
    }
}

/// `y += Wᵀ x`, with `W` stored row-major (`rows` x `cols`).
#[inline]
pub(crate) fn matvec_transpose_add(y: &mut [f64], w: &[f64], rows: usize, cols: usize, x: &[f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    debug_assert_eq!(y.len(), cols);
    for i in 0..rows {
        axpy(y, x[i], &w[i * cols..(i + 1) * cols]);
    }
}

/// Squared Euclidean norm with the same accumulation order as [`dot`].
#[inline]
pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    dot(x, x)
}
