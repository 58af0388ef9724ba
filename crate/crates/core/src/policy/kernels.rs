//! Slice kernels for the hot loops. Row-major throughout; `n` counts rows.

use crate::numkit::{Mat, Real};

pub(crate) const LN_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // eight independent lanes so the f32 instantiation vectorizes
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut s = T::zero();
    for k in chunks * 8..a.len() {
        s = s + a[k] * b[k];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + s
}

/// `y += a · x`
#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// `out[i] = W x[i] + b` for each of the `n` rows of `x`.
pub(crate) fn linear<T: Real>(x: &[T], n: usize, w: &Mat<T>, b: Option<&Mat<T>>) -> Vec<T> {
    let (dout, din) = w.shape();
    debug_assert_eq!(x.len(), n * din);
    let mut out = vec![T::zero(); n * dout];
    for i in 0..n {
        let xi = &x[i * din..(i + 1) * din];
        let oi = &mut out[i * dout..(i + 1) * dout];
        for (o, slot) in oi.iter_mut().enumerate() {
            *slot = dot(w.row(o), xi);
        }
        if let Some(b) = b {
            for (slot, &bb) in oi.iter_mut().zip(b.data()) {
                *slot = *slot + bb;
            }
        }
    }
    out
}

/// Accumulates the gradients of [`linear`]: `dW += dyᵀ x`, `db += Σ dy`, and
/// returns `dx = dy W` when requested.
pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    n: usize,
    w: &Mat<T>,
    dy: &[T],
    dw: &mut Mat<T>,
    db: Option<&mut Mat<T>>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let (dout, din) = w.shape();
    debug_assert_eq!(dy.len(), n * dout);
    for i in 0..n {
        let xi = &x[i * din..(i + 1) * din];
        let dyi = &dy[i * dout..(i + 1) * dout];
        for (o, &g) in dyi.iter().enumerate() {
            if g != T::zero() {
                axpy(dw.row_mut(o), g, xi);
            }
        }
    }
    if let Some(db) = db {
        for i in 0..n {
            for (slot, &g) in db.data_mut().iter_mut().zip(&dy[i * dout..(i + 1) * dout]) {
                *slot = *slot + g;
            }
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![T::zero(); n * din];
    for i in 0..n {
        let dxi = &mut dx[i * din..(i + 1) * din];
        for (o, &g) in dy[i * dout..(i + 1) * dout].iter().enumerate() {
            if g != T::zero() {
                axpy(dxi, g, w.row(o));
            }
        }
    }
    Some(dx)
}

/// Per-row layer normalization. Returns `(y, xhat, inv_std)`.
pub(crate) fn layer_norm<T: Real>(
    x: &[T],
    n: usize,
    g: &Mat<T>,
    b: &Mat<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = g.len();
    let eps = T::from_f64_lossy(LN_EPS);
    let inv_d = T::from_f64_lossy(1.0 / d as f64);
    let mut y = vec![T::zero(); n * d];
    let mut xhat = vec![T::zero(); n * d];
    let mut inv = vec![T::zero(); n];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        let mean = xi.iter().copied().sum::<T>() * inv_d;
        let var = xi.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        inv[i] = r;
        for k in 0..d {
            let h = (xi[k] - mean) * r;
            xhat[i * d + k] = h;
            y[i * d + k] = g.data()[k] * h + b.data()[k];
        }
    }
    (y, xhat, inv)
}

pub(crate) fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv: &[T],
    n: usize,
    g: &Mat<T>,
    dg: &mut Mat<T>,
    db: &mut Mat<T>,
) -> Vec<T> {
    let d = g.len();
    let dt = T::from_f64_lossy(d as f64);
    let mut dx = vec![T::zero(); n * d];
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let dyi = &dy[i * d..(i + 1) * d];
        let xh = &xhat[i * d..(i + 1) * d];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for k in 0..d {
            dg.data_mut()[k] = dg.data()[k] + dyi[k] * xh[k];
            db.data_mut()[k] = db.data()[k] + dyi[k];
            dxhat[k] = dyi[k] * g.data()[k];
            s1 = s1 + dxhat[k];
            s2 = s2 + dxhat[k] * xh[k];
        }
        let scale = inv[i] / dt;
        for k in 0..d {
            dx[i * d + k] = scale * (dt * dxhat[k] - s1 - xh[k] * s2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
}

/// In-place row softmax over the first `len` entries.
#[inline]
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}
