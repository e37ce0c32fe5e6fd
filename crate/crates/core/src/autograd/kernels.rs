//! Raw slice kernels shared by the graph ops and by non-recording callers.

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aki * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating a single chain.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Weighted softmax of one row.
///
/// With `weights == None` this is the ordinary softmax. With weights, the
/// maximum is taken over entries whose weight is positive, zero-weight
/// entries are written as exactly `0.0`, and the normalizer is
/// `Σ w_s exp(a_s - c)`. Returns the normalizer so backward passes can
/// rebuild `exp(a_k - c) / S`.
///
/// Both paths use the same summation order so an all-ones weight vector is
/// bitwise identical to the unweighted call.
pub fn weighted_softmax_row(row: &[f64], weights: Option<&[f64]>, out: &mut [f64]) -> (f64, f64) {
    let mut max = f64::NEG_INFINITY;
    match weights {
        None => {
            for &v in row {
                if v > max {
                    max = v;
                }
            }
        }
        Some(w) => {
            for (&v, &wv) in row.iter().zip(w) {
                if wv > 0.0 && v > max {
                    max = v;
                }
            }
        }
    }
    let mut sum = 0.0;
    match weights {
        None => {
            for (o, &v) in out.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
        }
        Some(w) => {
            for ((o, &v), &wv) in out.iter_mut().zip(row).zip(w) {
                if wv > 0.0 {
                    let e = wv * (v - max).exp();
                    *o = e;
                    sum += e;
                } else {
                    *o = 0.0;
                }
            }
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    (max, sum)
}

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub const LAYER_NORM_EPS: f64 = 1e-6;
