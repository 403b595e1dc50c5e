//! Raw row-major matrix kernels. Every output row is produced by one thread
//! with a fixed summation order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

const PAR_THRESHOLD: usize = 1 << 15;

/// `out[r×c] = a[r×k] · b[k×c]`
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], r: usize, k: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); r * c];
    if c == 0 {
        return out;
    }
    let kernel = |(i, row): (usize, &mut [S])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if r * k * c >= PAR_THRESHOLD {
        out.par_chunks_mut(c).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(c).enumerate().for_each(kernel);
    }
    out
}

/// `out[r×c] = a[r×k] · b[c×k]ᵀ`
pub fn matmul_raw_a_bt<S: Scalar>(a: &[S], b: &[S], r: usize, k: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); r * c];
    if c == 0 {
        return out;
    }
    let kernel = |(i, row): (usize, &mut [S])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if r * k * c >= PAR_THRESHOLD {
        out.par_chunks_mut(c).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(c).enumerate().for_each(kernel);
    }
    out
}

/// `out[k×c] = a[r×k]ᵀ · b[r×c]`
pub fn matmul_raw_at_b<S: Scalar>(a: &[S], b: &[S], r: usize, k: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * c];
    if c == 0 {
        return out;
    }
    let kernel = |(p, row): (usize, &mut [S])| {
        for i in 0..r {
            let av = a[i * k + p];
            let brow = &b[i * c..(i + 1) * c];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if r * k * c >= PAR_THRESHOLD {
        out.par_chunks_mut(c).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(c).enumerate().for_each(kernel);
    }
    out
}
