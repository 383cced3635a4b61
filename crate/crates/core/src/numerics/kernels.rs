//! Slice-level arithmetic shared by the tape and by the tape-free inference
//! path. Both must call the same kernels so NONE-quantizer runs stay
//! bit-identical.
//!
//! All products accumulate over the inner index in ascending order.

use super::Real;

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc = acc + x * y;
            }
            out.push(acc);
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place `rows[i] += bias` for a `rows × n` matrix.
pub fn add_row<T: Real>(x: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

/// Row-wise numerically stable log-softmax.
pub fn log_softmax<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

/// One LSTM recurrence step from precomputed gate pre-activations.
///
/// `gates` is `batch × 4h` in the order (input, forget, cell, output).
/// Returns `(h, c)`, each `batch × h`.
pub fn lstm_pointwise<T: Real>(gates: &[T], c_prev: &[T], h: usize) -> (Vec<T>, Vec<T>) {
    let batch = c_prev.len() / h;
    let mut hs = Vec::with_capacity(batch * h);
    let mut cs = Vec::with_capacity(batch * h);
    for b in 0..batch {
        let g = &gates[b * 4 * h..(b + 1) * 4 * h];
        for j in 0..h {
            let i_g = sigmoid(g[j]);
            let f_g = sigmoid(g[h + j]);
            let c_g = g[2 * h + j].tanh();
            let o_g = sigmoid(g[3 * h + j]);
            let c = f_g * c_prev[b * h + j] + i_g * c_g;
            cs.push(c);
            hs.push(o_g * c.tanh());
        }
    }
    (hs, cs)
}
