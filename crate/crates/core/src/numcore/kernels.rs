//! Plain loops over flat row-major buffers. Rows are independent, so the
//! parallel path yields bitwise the same results as the sequential one.

use super::exec::{for_each_chunk_mut, Exec};

/// Below this many multiply-adds the thread handoff costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 15;

fn pick(exec: Exec, work: usize) -> Exec {
    if work >= PAR_THRESHOLD {
        exec
    } else {
        Exec::Sequential
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    for_each_chunk_mut(pick(exec, m * k * n), &mut out, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    for_each_chunk_mut(pick(exec, m * k * n), &mut out, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *o = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_at(exec: Exec, a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    for_each_chunk_mut(pick(exec, m * k * n), &mut out, n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    out
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `α·a + (1−α)·m`, returning `a` unchanged when both inputs agree so that
/// equal experts are a fixed point for every gate value.
pub fn gated_mix(a: f64, m: f64, alpha: f64) -> f64 {
    if a == m {
        a
    } else {
        alpha * a + (1.0 - alpha) * m
    }
}

/// Max-subtracted softmax of one row, written into `out`.
pub fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
