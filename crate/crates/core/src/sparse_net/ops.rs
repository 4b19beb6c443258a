//! Forward and backward kernels over row-major `rows x channels` buffers.

use super::kernel_map::{KernelMap, NONE};
use super::Scalar;

pub(crate) const BN_EPS: f64 = 1e-5;

/// Rows per im2col block; bounds scratch memory for large cell sets.
const CHUNK: usize = 2048;

fn im2col<S: Scalar>(x: &[S], cin: usize, map: &KernelMap, start: usize, rows: usize, col: &mut [S]) {
    let kc = map.kvol * cin;
    for r in 0..rows {
        let dst = &mut col[r * kc..(r + 1) * kc];
        for (k, &j) in map.neighbours(start + r).iter().enumerate() {
            let d = &mut dst[k * cin..(k + 1) * cin];
            if j == NONE {
                d.fill(S::zero());
            } else {
                d.copy_from_slice(&x[j as usize * cin..(j as usize + 1) * cin]);
            }
        }
    }
}

pub(crate) fn conv_forward<S: Scalar>(x: &[S], cin: usize, map: &KernelMap, w: &[S], b: &[S], cout: usize) -> Vec<S> {
    let n = map.n_out;
    let kc = map.kvol * cin;
    let mut y = Vec::with_capacity(n * cout);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    let mut col = vec![S::zero(); CHUNK.min(n) * kc];
    for start in (0..n).step_by(CHUNK) {
        let rows = CHUNK.min(n - start);
        im2col(x, cin, map, start, rows, &mut col);
        S::gemm(
            rows,
            kc,
            cout,
            &col,
            kc as isize,
            1,
            w,
            cout as isize,
            1,
            S::one(),
            &mut y[start * cout..],
            cout as isize,
            1,
        );
    }
    y
}

/// Accumulates into `dx` (when given), `dw` and `db`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<S: Scalar>(
    x: &[S],
    cin: usize,
    map: &KernelMap,
    w: &[S],
    cout: usize,
    dy: &[S],
    mut dx: Option<&mut [S]>,
    dw: &mut [S],
    db: &mut [S],
) {
    let n = map.n_out;
    let kc = map.kvol * cin;
    for row in dy.chunks_exact(cout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += *g;
        }
    }
    let mut col = vec![S::zero(); CHUNK.min(n) * kc];
    let mut dcol = vec![S::zero(); if dx.is_some() { CHUNK.min(n) * kc } else { 0 }];
    for start in (0..n).step_by(CHUNK) {
        let rows = CHUNK.min(n - start);
        let dyc = &dy[start * cout..(start + rows) * cout];
        im2col(x, cin, map, start, rows, &mut col);
        S::gemm(kc, rows, cout, &col, 1, kc as isize, dyc, cout as isize, 1, S::one(), dw, cout as isize, 1);
        if let Some(dx) = dx.as_deref_mut() {
            S::gemm(rows, cout, kc, dyc, cout as isize, 1, w, 1, cout as isize, S::zero(), &mut dcol, kc as isize, 1);
            for r in 0..rows {
                let src = &dcol[r * kc..(r + 1) * kc];
                for (k, &j) in map.neighbours(start + r).iter().enumerate() {
                    if j != NONE {
                        let d = &mut dx[j as usize * cin..(j as usize + 1) * cin];
                        for (a, g) in d.iter_mut().zip(&src[k * cin..(k + 1) * cin]) {
                            *a += *g;
                        }
                    }
                }
            }
        }
    }
}

/// Batch statistics of one normalization call.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<S> {
    pub mean: Vec<S>,
    /// Unbiased variance (what running statistics track).
    pub var_unbiased: Vec<S>,
}

pub(crate) struct BnTrainOut<S> {
    pub y: Vec<S>,
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
    pub stats: BnStats<S>,
}

pub(crate) fn bn_forward_train<S: Scalar>(x: &[S], c: usize, gamma: &[S], beta: &[S]) -> BnTrainOut<S> {
    let n = x.len() / c;
    let mut mean = vec![S::zero(); c];
    for row in x.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v;
        }
    }
    let nf = S::of(n.max(1) as f64);
    mean.iter_mut().for_each(|m| *m = *m / nf);
    let mut var = vec![S::zero(); c];
    for row in x.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = *v - *m;
            *s += d * d;
        }
    }
    let var_unbiased: Vec<S> = var.iter().map(|&s| if n > 1 { s / S::of((n - 1) as f64) } else { S::zero() }).collect();
    let inv_std: Vec<S> = var.iter().map(|&s| S::one() / (s / nf + S::of(BN_EPS)).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for j in 0..c {
            let h = (row[j] - mean[j]) * inv_std[j];
            xhat.push(h);
            y.push(gamma[j] * h + beta[j]);
        }
    }
    BnTrainOut { y, xhat, inv_std, stats: BnStats { mean, var_unbiased } }
}

pub(crate) fn bn_forward_eval<S: Scalar>(
    x: &[S],
    c: usize,
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let inv_std: Vec<S> = running_var.iter().map(|&v| S::one() / (v + S::of(BN_EPS)).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for j in 0..c {
            let h = (row[j] - running_mean[j]) * inv_std[j];
            xhat.push(h);
            y.push(gamma[j] * h + beta[j]);
        }
    }
    (y, xhat, inv_std)
}

/// Backward through normalization; `batch` selects batch- vs fixed-statistics mode.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward<S: Scalar>(
    dy: &[S],
    xhat: &[S],
    inv_std: &[S],
    gamma: &[S],
    c: usize,
    batch: bool,
    dx: &mut [S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) {
    let n = dy.len() / c;
    let mut sum_dy = vec![S::zero(); c];
    let mut sum_dy_xhat = vec![S::zero(); c];
    for (g, h) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for j in 0..c {
            sum_dy[j] += g[j];
            sum_dy_xhat[j] += g[j] * h[j];
        }
    }
    for j in 0..c {
        dgamma[j] += sum_dy_xhat[j];
        dbeta[j] += sum_dy[j];
    }
    let nf = S::of(n.max(1) as f64);
    for ((d, g), h) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
        for j in 0..c {
            let scale = gamma[j] * inv_std[j];
            d[j] += if batch { scale * (g[j] - sum_dy[j] / nf - h[j] * sum_dy_xhat[j] / nf) } else { scale * g[j] };
        }
    }
}
