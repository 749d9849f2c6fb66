//! Neural-network primitives with fused, numerically stable backward passes.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn axis_layout(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis { op, axis, rank: shape.len() });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Calls `f(lane)` for every 1-D lane along the reduced axis, where `lane`
/// lists the flat indices of that lane.
fn for_each_lane(outer: usize, len: usize, inner: usize, mut f: impl FnMut(&[usize])) {
    let mut lane = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (l, slot) in lane.iter_mut().enumerate() {
                *slot = (o * len + l) * inner + i;
            }
            f(&lane);
        }
    }
}

fn softmax_data(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for_each_lane(outer, len, inner, |lane| {
        let max = lane.iter().map(|&j| x[j]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &j in lane {
            let e = (x[j] - max).exp();
            out[j] = e;
            z += e;
        }
        for &j in lane {
            out[j] /= z;
        }
    });
    out
}

fn log_softmax_data(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for_each_lane(outer, len, inner, |lane| {
        let max = lane.iter().map(|&j| x[j]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lane.iter().map(|&j| (x[j] - max).exp()).sum::<f64>().ln();
        for &j in lane {
            out[j] = x[j] - lse;
        }
    });
    out
}

impl Tensor {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_layout(self.shape(), axis, "softmax")?;
        let data = softmax_data(self.data(), outer, len, inner);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; y.len()];
                for_each_lane(outer, len, inner, |lane| {
                    let dot: f64 = lane.iter().map(|&j| g[j] * y[j]).sum();
                    for &j in lane {
                        gx[j] = y[j] * (g[j] - dot);
                    }
                });
                vec![Some(gx)]
            }),
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_layout(self.shape(), axis, "log_softmax")?;
        let data = log_softmax_data(self.data(), outer, len, inner);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; y.len()];
                for_each_lane(outer, len, inner, |lane| {
                    let gsum: f64 = lane.iter().map(|&j| g[j]).sum();
                    for &j in lane {
                        gx[j] = g[j] - y[j].exp() * gsum;
                    }
                });
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or(TensorError::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        for p in [gain, bias] {
            if p.numel() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let rows = self.numel() / d;
        let x = self.data();
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        let (gd, bd) = (gain.data(), bias.data());
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mu) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gd[c] + bd[c];
            }
        }
        let xhat = Arc::new(xhat);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _, p| {
                let gd = p[1].data();
                let gx = p[0].requires_grad().then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for c in 0..d {
                            let dh = g[r * d + c] * gd[c];
                            m1 += dh;
                            m2 += dh * xhat[r * d + c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for c in 0..d {
                            let dh = g[r * d + c] * gd[c];
                            gx[r * d + c] = rstd[r] * (dh - m1 - xhat[r * d + c] * m2);
                        }
                    }
                    gx
                });
                let ggain = p[1].requires_grad().then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            acc[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    acc
                });
                let gbias = p[2].requires_grad().then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            acc[c] += g[r * d + c];
                        }
                    }
                    acc
                });
                vec![gx, ggain, gbias]
            }),
        ))
    }

    /// Gathers rows of a `[vocab, dim]` table. Output shape is
    /// `index_shape ++ [dim]`.
    pub fn embedding(&self, ids: &[usize], index_shape: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("table must be 2-D, got {:?}", self.shape()),
            });
        }
        let (vocab, dim) = (self.shape()[0], self.shape()[1]);
        if ids.len() != index_shape.iter().product::<usize>() {
            return Err(TensorError::DataLength {
                len: ids.len(),
                shape: index_shape.to_vec(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                limit: vocab,
            });
        }
        let table = self.data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&table[i * dim..(i + 1) * dim]);
        }
        let mut out_shape = index_shape.to_vec();
        out_shape.push(dim);
        let ids = Arc::new(ids.to_vec());
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gt = vec![0.0; vocab * dim];
                for (k, &i) in ids.iter().enumerate() {
                    for c in 0..dim {
                        gt[i * dim + c] += g[k * dim + c];
                    }
                }
                vec![Some(gt)]
            }),
        ))
    }

    /// Inverted dropout: in training, zeroes each element with probability `p`
    /// and scales survivors by `1/(1-p)`; otherwise the identity.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, train: bool, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() >= p { keep } else { 0.0 })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().zip(&mask).map(|(a, b)| a * b).collect())]),
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]` for `[batch, classes]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (batch, classes) = self.as_matrix("cross_entropy")?;
        if labels.len() != batch {
            return Err(TensorError::DataLength {
                len: labels.len(),
                shape: self.shape().to_vec(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                limit: classes,
            });
        }
        let logp = log_softmax_data(self.data(), batch, classes, 1);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(b, &c)| logp[b * classes + c])
            .sum::<f64>()
            / batch as f64;
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let scale = g[0] / batch as f64;
                let mut gx: Vec<f64> = logp.iter().map(|lp| lp.exp() * scale).collect();
                for (b, &c) in labels.iter().enumerate() {
                    gx[b * classes + c] -= scale;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean over the batch of `-Σ_c target[b,c] · log softmax(logits)[b,c]`.
    /// `target` contributes values only; no gradient flows into it.
    pub fn soft_cross_entropy(&self, target: &Tensor) -> Result<Tensor> {
        let (batch, classes) = self.as_matrix("soft_cross_entropy")?;
        if target.shape() != self.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "soft_cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let logp = log_softmax_data(self.data(), batch, classes, 1);
        let p = target.to_vec();
        let loss = -p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>() / batch as f64;
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let scale = g[0] / batch as f64;
                let mut gx = vec![0.0; batch * classes];
                for b in 0..batch {
                    let row = b * classes..(b + 1) * classes;
                    let mass: f64 = p[row.clone()].iter().sum();
                    for j in row {
                        gx[j] = scale * (logp[j].exp() * mass - p[j]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            &[b, c] => Ok((b, c)),
            s => Err(TensorError::Invalid {
                op,
                msg: format!("expected [batch, classes], got {s:?}"),
            }),
        }
    }
}
