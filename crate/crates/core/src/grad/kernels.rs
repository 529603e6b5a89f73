//! Numeric kernels shared by the tape and by tape-free inference.

use super::Tensor;

/// `A[m,k] * B[k,n]`. Zero entries of `A` are skipped, which matters for
/// mostly-background pixel inputs.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2().expect("matmul lhs rank 2");
    let (k2, n) = b.dims2().expect("matmul rhs rank 2");
    debug_assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

/// `A^T[k,m] * G[m,n]` accumulated into `out[k,n]`.
pub(crate) fn matmul_tn_acc(a: &Tensor, g: &Tensor, out: &mut [f64]) {
    let (m, k) = a.dims2().unwrap();
    let n = g.cols();
    let ad = a.data();
    let gd = g.data();
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for (kk, &aik) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

/// `G[m,n] * B^T[n,k]` accumulated into `out[m,k]`.
pub(crate) fn matmul_nt_acc(g: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (m, n) = g.dims2().unwrap();
    let k = b.rows();
    let gd = g.data();
    let bd = b.data();
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &bd[kk * n..(kk + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + kk] += dot;
        }
    }
}

/// Piecewise Huber loss: `0.5 x^2` for `|x| <= delta`, else `delta (|x| - 0.5 delta)`.
pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise `log(sum(exp(x)))`, returning `[rows, 1]`.
pub fn log_sum_exp_rows(a: &Tensor) -> Tensor {
    let (r, c) = a.dims2().expect("rank 2");
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let row = &a.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out.push(m + s.ln());
    }
    Tensor::column(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_hand_values() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
        assert_eq!(huber(1.0, 1.0), 0.5);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, 0.0, 3.0, -1.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[11.0, 14.0, 4.0, 6.0]);
    }

    #[test]
    fn softplus_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lse_rows() {
        let a = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!((log_sum_exp_rows(&a).item() - 2f64.ln()).abs() < 1e-15);
        let a = Tensor::matrix(1, 2, vec![1000.0, 1000.0]).unwrap();
        assert!((log_sum_exp_rows(&a).item() - 1000.0 - 2f64.ln()).abs() < 1e-9);
    }
}
