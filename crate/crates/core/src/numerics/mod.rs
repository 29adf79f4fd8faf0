//! Dense tensors, the reverse-mode tape and the handful of token-level
//! primitives the attention variants are built from.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::error::{config_err, shape_err, Result};

/// Softmax along `axis` with max subtraction.
pub fn softmax(x: &Tensor, axis: isize) -> Result<Tensor> {
    x.softmax(axis)
}

/// Pool `q: [.., N, d]` down to `[.., n, d]`; output token `i` is the mean of
/// the contiguous bucket `[⌊iN/n⌋, ⌊(i+1)N/n⌋)`.
pub fn adaptive_avg_pool_tokens(q: &Tensor, n: usize) -> Result<Tensor> {
    let r = q.rank();
    if r < 2 {
        return Err(shape_err!("token pooling needs [.., N, d], got {:?}", q.shape()));
    }
    let (big_n, d) = (q.shape()[r - 2], q.shape()[r - 1]);
    if n == 0 || n > big_n {
        return Err(config_err!("cannot pool {big_n} tokens into {n}"));
    }
    let outer = q.numel() / (big_n * d).max(1);
    let mut out = vec![0.0; outer * n * d];
    for o in 0..outer {
        for i in 0..n {
            let (s, e) = kernels::pool_bucket(i, big_n, n);
            let dst = &mut out[(o * n + i) * d..(o * n + i + 1) * d];
            for t in s..e {
                let src = &q.data()[(o * big_n + t) * d..(o * big_n + t + 1) * d];
                for (dv, sv) in dst.iter_mut().zip(src) {
                    *dv += sv;
                }
            }
            let inv = 1.0 / (e - s) as f64;
            for dv in dst.iter_mut() {
                *dv *= inv;
            }
        }
    }
    let mut shape = q.shape().to_vec();
    shape[r - 2] = n;
    Tensor::new(shape, out)
}

/// Per-channel `k×k` convolution of `v: [N, C]` (or `[B, N, C]`) laid out on an
/// `H×W` token grid, zero padded. `kernel` is `[C, k·k]`.
pub fn depthwise_conv_tokens(v: &Tensor, grid: (usize, usize), kernel: &Tensor) -> Result<Tensor> {
    let batched = match v.rank() {
        2 => v.reshape([1, v.shape()[0], v.shape()[1]])?,
        3 => v.clone(),
        _ => return Err(shape_err!("expected [N, C] or [B, N, C], got {:?}", v.shape())),
    };
    let mut tape = Tape::no_grad();
    let x = tape.leaf(batched, false);
    let k = tape.leaf(kernel.clone(), false);
    let y = tape.depthwise_conv(x, k, None, grid)?;
    tape.value(y).reshape(v.shape().to_vec())
}

/// Row-wise `(‖x‖/‖x^p‖)·x^p` over the last axis, sign preserving.
/// Zero rows are returned unchanged.
pub fn focusing_transform(x: &Tensor, p: u32) -> Result<Tensor> {
    if p == 0 {
        return Err(config_err!("focusing power must be at least 1"));
    }
    x.ensure_finite("focusing input")?;
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; x.numel()];
    if d > 0 {
        for (row, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            kernels::focus_row(row, p, dst);
        }
    }
    let t = Tensor::new(x.shape().to_vec(), out)?;
    t.ensure_finite("focusing output")?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn pool_examples() {
        let q = Tensor::new([4, 1], vec![1., 3., 5., 7.]).unwrap();
        assert_eq!(adaptive_avg_pool_tokens(&q, 2).unwrap().data(), &[2.0, 6.0]);
        assert_eq!(adaptive_avg_pool_tokens(&q, 4).unwrap(), q);
        assert_eq!(adaptive_avg_pool_tokens(&q, 1).unwrap().data(), &[4.0]);
        assert!(matches!(adaptive_avg_pool_tokens(&q, 5), Err(Error::Config(_))));
    }

    #[test]
    fn conv_examples() {
        let v = Tensor::new([4, 1], vec![1., 2., 3., 4.]).unwrap();
        let ones = Tensor::ones([1, 9]);
        assert_eq!(depthwise_conv_tokens(&v, (2, 2), &ones).unwrap().data(), &[10.0; 4]);
        let mut delta = Tensor::zeros([1, 9]);
        delta.data_mut()[4] = 1.0;
        assert_eq!(depthwise_conv_tokens(&v, (2, 2), &delta).unwrap(), v);
        let zero = Tensor::zeros([1, 9]);
        assert_eq!(depthwise_conv_tokens(&v, (2, 2), &zero).unwrap().data(), &[0.0; 4]);
        assert!(matches!(depthwise_conv_tokens(&v, (3, 2), &ones), Err(Error::Shape(_))));
    }

    #[test]
    fn focusing_examples() {
        let x = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(focusing_transform(&x, 1).unwrap(), x);
        let y = focusing_transform(&x, 3).unwrap();
        // (1, 8) rescaled to norm sqrt(5): sqrt(5)/sqrt(65) * (1, 8)
        let c = (5.0f64).sqrt() / (65.0f64).sqrt();
        assert!((y.data()[0] - c).abs() < 1e-12);
        assert!((y.data()[1] - 8.0 * c).abs() < 1e-12);
        assert!((y.data()[0] - 0.2774).abs() < 1e-4);
        assert!((y.data()[1] - 2.2188).abs() < 1e-4);
        let z = Tensor::zeros([2, 3]);
        assert_eq!(focusing_transform(&z, 3).unwrap(), z);
    }
}
