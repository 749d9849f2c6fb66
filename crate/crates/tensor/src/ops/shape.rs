//! Layout operations: reshape, permute, concat, slice.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of {rank} axes"),
            });
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = self.numel();
        let mut map = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut idx = 0usize;
        for _ in 0..total {
            map.push(idx);
            for d in (0..rank).rev() {
                counter[d] += 1;
                idx += step[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                idx -= step[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        let src = self.data();
        let data: Vec<f64> = map.iter().map(|&j| src[j]).collect();
        let map = Arc::new(map);
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _, p| {
                let mut gi = vec![0.0; p[0].numel()];
                for (gv, &j) in g.iter().zip(map.iter()) {
                    gi[j] = *gv;
                }
                vec![Some(gi)]
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no tensors given".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op: "concat", axis, rank });
        }
        for t in tensors {
            let same = t.rank() == rank
                && (0..rank).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
            if !same {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let (outer, inner) = outer_inner(first.shape(), axis);
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total_len;
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (t, &len) in tensors.iter().zip(&lens) {
                let block = len * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        Ok(Tensor::from_op(
            data,
            out_shape,
            tensors.to_vec(),
            Box::new(move |g, _, p| {
                let mut grads: Vec<Vec<f64>> = p.iter().map(|t| Vec::with_capacity(t.numel())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gi, &len) in grads.iter_mut().zip(&lens) {
                        let block = len * inner;
                        gi.extend_from_slice(&g[pos..pos + block]);
                        pos += block;
                    }
                }
                p.iter()
                    .zip(grads)
                    .map(|(t, gi)| t.requires_grad().then_some(gi))
                    .collect()
            }),
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op: "slice", axis, rank });
        }
        let dim = self.shape()[axis];
        if start >= end || end > dim {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: end.max(start),
                limit: dim,
            });
        }
        let (outer, inner) = outer_inner(self.shape(), axis);
        let len = end - start;
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _, p| {
                let mut gi = vec![0.0; p[0].numel()];
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    gi[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gi)]
            }),
        ))
    }

    /// Zero-pads `axis` up to `len` entries (appended at the end).
    pub fn pad_to(&self, axis: usize, len: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op: "pad_to", axis, rank });
        }
        let cur = self.shape()[axis];
        if len < cur {
            return Err(TensorError::Invalid {
                op: "pad_to",
                msg: format!("cannot pad axis of length {cur} down to {len}"),
            });
        }
        if len == cur {
            return Ok(self.clone());
        }
        let mut zshape = self.shape().to_vec();
        zshape[axis] = len - cur;
        Tensor::concat(&[self.clone(), Tensor::zeros(&zshape)], axis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> Tensor {
        Tensor::new((0..numel(shape)).map(|v| v as f64).collect(), shape).unwrap()
    }

    #[test]
    fn transpose_2d() {
        let t = seq(&[2, 3]).transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn permute_3d_matches_index_arithmetic() {
        let x = seq(&[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(y.data()[k * 6 + i * 3 + j], x.data()[i * 12 + j * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn permute_rejects_duplicates() {
        assert!(seq(&[2, 3]).permute(&[0, 0]).is_err());
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = seq(&[2, 2]);
        let b = seq(&[2, 3]);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.slice(1, 0, 2).unwrap().data(), a.data());
        assert_eq!(c.slice(1, 2, 5).unwrap().data(), b.data());
    }

    #[test]
    fn slice_bounds_checked() {
        assert!(seq(&[2, 3]).slice(1, 2, 4).is_err());
        assert!(seq(&[2, 3]).slice(2, 0, 1).is_err());
    }

    #[test]
    fn pad_appends_zeros() {
        let p = seq(&[1, 2]).pad_to(1, 4).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
