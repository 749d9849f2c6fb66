use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// `c += op(a) · op(b)` with `op(a)`: m×k, `op(b)`: k×n, all row-major.
/// A transposed operand is stored as its transpose (k×m or n×k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to exactly the extent the
    // strides address, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Matrix product over the last two axes.
    ///
    /// Supported forms: `[n,k]·[k,m]`, `[..,n,k]·[k,m]` (right operand shared
    /// across the batch), and `[..,n,k]·[..,k,m]` with identical batch axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (n, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, m) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        if b.len() == 2 {
            // Fold any batch axes of the left operand into its rows.
            let rows: usize = a[..a.len() - 1].iter().product();
            let mut out_shape = a.to_vec();
            *out_shape.last_mut().unwrap() = m;
            let mut data = vec![0.0; rows * m];
            gemm_acc(rows, k, m, self.data(), false, other.data(), false, &mut data);
            return Ok(Tensor::from_op(
                data,
                out_shape,
                vec![self.clone(), other.clone()],
                Box::new(move |g, _, p| {
                    let ga = p[0].requires_grad().then(|| {
                        let mut ga = vec![0.0; rows * k];
                        gemm_acc(rows, m, k, g, false, p[1].data(), true, &mut ga);
                        ga
                    });
                    let gb = p[1].requires_grad().then(|| {
                        let mut gb = vec![0.0; k * m];
                        gemm_acc(k, rows, m, p[0].data(), true, g, false, &mut gb);
                        gb
                    });
                    vec![ga, gb]
                }),
            ));
        }
        if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = a[..a.len() - 2].iter().product();
        let mut out_shape = a.to_vec();
        *out_shape.last_mut().unwrap() = m;
        let mut data = vec![0.0; batch * n * m];
        let (ad, bd) = (self.data(), other.data());
        for i in 0..batch {
            gemm_acc(
                n,
                k,
                m,
                &ad[i * n * k..(i + 1) * n * k],
                false,
                &bd[i * k * m..(i + 1) * k * m],
                false,
                &mut data[i * n * m..(i + 1) * n * m],
            );
        }
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let (ad, bd) = (p[0].data(), p[1].data());
                let ga = p[0].requires_grad().then(|| {
                    let mut ga = vec![0.0; batch * n * k];
                    for i in 0..batch {
                        gemm_acc(
                            n,
                            m,
                            k,
                            &g[i * n * m..(i + 1) * n * m],
                            false,
                            &bd[i * k * m..(i + 1) * k * m],
                            true,
                            &mut ga[i * n * k..(i + 1) * n * k],
                        );
                    }
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut gb = vec![0.0; batch * k * m];
                    for i in 0..batch {
                        gemm_acc(
                            k,
                            n,
                            m,
                            &ad[i * n * k..(i + 1) * n * k],
                            true,
                            &g[i * n * m..(i + 1) * n * m],
                            false,
                            &mut gb[i * k * m..(i + 1) * k * m],
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_product() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![5.0, 6.0], &[2, 1]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn identity_left() {
        let m = Tensor::new((1..=9).map(f64::from).collect(), &[3, 3]).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&m).unwrap().data(), m.data());
    }

    #[test]
    fn mismatch_error_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn batched_matches_per_slice() {
        let a = Tensor::new((0..12).map(|v| v as f64 * 0.5).collect(), &[2, 2, 3]).unwrap();
        let b = Tensor::new((0..12).map(|v| 1.0 - v as f64).collect(), &[2, 3, 2]).unwrap();
        let c = a.matmul(&b).unwrap();
        for bi in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut s = 0.0;
                    for t in 0..3 {
                        s += a.data()[bi * 6 + i * 3 + t] * b.data()[bi * 6 + t * 2 + j];
                    }
                    assert_eq!(c.data()[bi * 4 + i * 2 + j], s);
                }
            }
        }
    }

    #[test]
    fn matmul_grads_are_dc_bt_and_at_dc() {
        let a = Tensor::parameter(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::parameter(vec![0.5, -1.0, 2.0, 0.0], &[2, 2]).unwrap();
        a.matmul(&b).unwrap().sum().backward().unwrap();
        // dC = ones: dA = 1·Bᵀ -> row sums of B; dB = Aᵀ·1 -> column sums of A.
        assert_eq!(a.grad().unwrap(), vec![-0.5, 2.0, -0.5, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }
}
