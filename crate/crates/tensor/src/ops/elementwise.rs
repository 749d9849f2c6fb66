//! Broadcasting binary arithmetic and pointwise functions.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

/// NumPy-style broadcast of two shapes, aligned from the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index into a tensor of shape `input`
/// broadcast to `out`. `None` means the shapes are equal (identity map).
fn index_map(out: &[usize], input: &[usize]) -> Option<Vec<usize>> {
    if out == input {
        return None;
    }
    let rank = out.len();
    let offset = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= input[i];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..total {
        map.push(idx);
        for d in (0..rank).rev() {
            counter[d] += 1;
            idx += strides[d];
            if counter[d] < out[d] {
                break;
            }
            idx -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    Some(map)
}

fn reduce_to(g: &[f64], map: &Option<Vec<usize>>, len: usize) -> Vec<f64> {
    match map {
        None => g.to_vec(),
        Some(m) => {
            let mut out = vec![0.0; len];
            for (gi, &j) in g.iter().zip(m.iter()) {
                out[j] += gi;
            }
            out
        }
    }
}

#[inline]
fn at(data: &[f64], map: &Option<Vec<usize>>, i: usize) -> f64 {
    match map {
        None => data[i],
        Some(m) => data[m[i]],
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp, name: &'static str) -> Result<Tensor> {
    let out_shape =
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
    let ma = Arc::new(index_map(&out_shape, a.shape()));
    let mb = Arc::new(index_map(&out_shape, b.shape()));
    let n = numel(&out_shape);
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let (x, y) = (at(ad, &ma, i), at(bd, &mb, i));
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
            }
        })
        .collect();
    Ok(Tensor::from_op(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _out, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            let ga = a.requires_grad().then(|| match op {
                BinOp::Add | BinOp::Sub => reduce_to(g, &ma, a.numel()),
                BinOp::Mul => {
                    let prod: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * at(b.data(), &mb, i))
                        .collect();
                    reduce_to(&prod, &ma, a.numel())
                }
                BinOp::Div => {
                    let prod: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi / at(b.data(), &mb, i))
                        .collect();
                    reduce_to(&prod, &ma, a.numel())
                }
            });
            let gb = b.requires_grad().then(|| match op {
                BinOp::Add => reduce_to(g, &mb, b.numel()),
                BinOp::Sub => {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    reduce_to(&neg, &mb, b.numel())
                }
                BinOp::Mul => {
                    let prod: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * at(a.data(), &ma, i))
                        .collect();
                    reduce_to(&prod, &mb, b.numel())
                }
                BinOp::Div => {
                    let prod: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let y = at(b.data(), &mb, i);
                            -gi * at(a.data(), &ma, i) / (y * y)
                        })
                        .collect();
                    reduce_to(&prod, &mb, b.numel())
                }
            });
            vec![ga, gb]
        }),
    ))
}

/// Applies `f` pointwise; `df(x, y)` is the derivative given input and output.
fn unary(
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, out, parents| {
            let xs = parents[0].data();
            vec![Some(
                g.iter()
                    .zip(xs.iter().zip(out))
                    .map(|(gi, (&xv, &yv))| gi * df(xv, yv))
                    .collect(),
            )]
        }),
    )
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_value(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Div, "div")
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid_value, |_, y| y * (1.0 - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        unary(self, gelu_value, |x, _| gelu_derivative(x))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn bias_add_broadcasts_rows() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::parameter(vec![10.0, 20.0], &[2]).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
        y.sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn middle_axis_broadcast() {
        let x = Tensor::new((0..6).map(f64::from).collect(), &[2, 3]).unwrap();
        let c = Tensor::new(vec![1.0, -1.0], &[2, 1]).unwrap();
        let y = x.mul(&c).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, -3.0, -4.0, -5.0]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_value(800.0), 1.0);
        assert_eq!(sigmoid_value(-800.0), 0.0);
        assert!((sigmoid_value(2.0) - 0.880_797_077_977_882_3).abs() < 1e-15);
    }
}
