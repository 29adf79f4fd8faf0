//! Raw slice kernels shared by the tape ops and the value-level helpers.

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Bucket `[start, end)` of output token `i` when pooling `n_in` tokens down to `n_out`.
/// Buckets partition `[0, n_in)` and their sizes differ by at most one.
pub fn pool_bucket(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    (i * n_in / n_out, (i + 1) * n_in / n_out)
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sign-preserving power: `sign(x)·|x|^p`. Equal to `x^p` for odd `p`.
pub fn signed_pow(x: f64, p: u32) -> f64 {
    x.signum() * x.abs().powi(p as i32)
}

/// Derivative of [`signed_pow`]: `p·|x|^(p-1)`.
pub fn signed_pow_grad(x: f64, p: u32) -> f64 {
    if p == 1 {
        1.0
    } else {
        p as f64 * x.abs().powi(p as i32 - 1)
    }
}

/// Norm-preserving focusing map on one row: `(‖x‖/‖x^p‖)·x^p`. Zero rows pass through.
pub fn focus_row(x: &[f64], p: u32, out: &mut [f64]) {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r == 0.0 {
        out.copy_from_slice(x);
        return;
    }
    for (o, &v) in out.iter_mut().zip(x) {
        *o = signed_pow(v, p);
    }
    let s = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    let c = r / s;
    for o in out.iter_mut() {
        *o *= c;
    }
}

/// Vector-Jacobian product of [`focus_row`].
pub fn focus_row_backward(x: &[f64], p: u32, g: &[f64], gx: &mut [f64]) {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r == 0.0 {
        for (o, gv) in gx.iter_mut().zip(g) {
            *o += gv;
        }
        return;
    }
    let u: Vec<f64> = x.iter().map(|&v| signed_pow(v, p)).collect();
    let du: Vec<f64> = x.iter().map(|&v| signed_pow_grad(v, p)).collect();
    let s = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let c = r / s;
    let gu: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
    for j in 0..x.len() {
        let dc = x[j] / (r * s) - r * u[j] * du[j] / (s * s * s);
        gx[j] += c * g[j] * du[j] + gu * dc;
    }
}
