//! Weight representations a forward pass can consume: dense matrices,
//! two-factor low-rank products and tensor-train matrices.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use squeeze_tensor::Tensor;

use crate::error::{Error, Result};

/// Shape bookkeeping for a tensor-train matrix.
///
/// A `rows × cols` matrix is zero-padded to `Π row_factors × Π col_factors`
/// and stored as cores `G_k` of shape `[ranks[k], row_factors[k],
/// col_factors[k], ranks[k+1]]` with `ranks[0] = ranks[d] = 1`. Row index
/// `i = ((i_1·n_2 + i_2)·n_3 + i_3)·n_4 + i_4` and likewise for columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtLayout {
    pub rows: usize,
    pub cols: usize,
    pub row_factors: Vec<usize>,
    pub col_factors: Vec<usize>,
    pub ranks: Vec<usize>,
}

impl TtLayout {
    pub fn cores(&self) -> usize {
        self.row_factors.len()
    }

    pub fn padded_rows(&self) -> usize {
        self.row_factors.iter().product()
    }

    pub fn padded_cols(&self) -> usize {
        self.col_factors.iter().product()
    }

    pub fn core_shape(&self, k: usize) -> [usize; 4] {
        [self.ranks[k], self.row_factors[k], self.col_factors[k], self.ranks[k + 1]]
    }

    pub fn num_params(&self) -> usize {
        (0..self.cores()).map(|k| self.core_shape(k).iter().product::<usize>()).sum()
    }

    /// Multiply-accumulates to push one input row through the cores.
    pub fn apply_macs_per_row(&self) -> u64 {
        let d = self.cores();
        (0..d)
            .map(|k| {
                let done: usize = self.col_factors[..k].iter().product();
                let todo: usize = self.row_factors[k + 1..].iter().product();
                let [r0, n, m, r1] = self.core_shape(k);
                (done * todo * r0 * n * m * r1) as u64
            })
            .sum()
    }

    /// Multiply-accumulates to contract all cores into the dense matrix.
    pub fn reconstruct_macs(&self) -> u64 {
        let mut lead = self.row_factors[0] * self.col_factors[0];
        let mut total = 0u64;
        for k in 1..self.cores() {
            let [r0, n, m, r1] = self.core_shape(k);
            total += (lead * r0 * n * m * r1) as u64;
            lead *= n * m;
        }
        total
    }
}

#[derive(Debug, Clone)]
pub struct TtMatrix {
    pub layout: TtLayout,
    pub cores: Vec<Tensor>,
}

impl TtMatrix {
    pub fn new(layout: TtLayout, cores: Vec<Tensor>) -> Result<Self> {
        if cores.len() != layout.cores() || layout.ranks.len() != cores.len() + 1 {
            return Err(Error::Contract(format!(
                "tensor train with {} cores does not match its layout",
                cores.len()
            )));
        }
        for (k, c) in cores.iter().enumerate() {
            if c.shape() != layout.core_shape(k) {
                return Err(Error::Contract(format!(
                    "core {k} has shape {:?}, layout expects {:?}",
                    c.shape(),
                    layout.core_shape(k)
                )));
            }
        }
        Ok(TtMatrix { layout, cores })
    }

    /// `x · W` for `x` of shape `[t, rows]`, contracting one core at a time
    /// without forming `W`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let lay = &self.layout;
        let t = x.shape()[0];
        let d = lay.cores();
        let (np, mp) = (lay.padded_rows(), lay.padded_cols());
        let x = x.pad_to(1, np)?;
        let mut a = t;
        let mut todo = np / lay.row_factors[0];
        let mut state = x.reshape(&[a, 1, lay.row_factors[0], todo])?;
        for k in 0..d {
            let [r0, n, m, r1] = lay.core_shape(k);
            let flat = state.permute(&[0, 3, 1, 2])?.reshape(&[a * todo, r0 * n])?;
            let core = self.cores[k].reshape(&[r0 * n, m * r1])?;
            let y = flat
                .matmul(&core)?
                .reshape(&[a, todo, m, r1])?
                .permute(&[0, 2, 3, 1])?;
            a *= m;
            if k + 1 < d {
                let next = lay.row_factors[k + 1];
                todo /= next;
                state = y.reshape(&[a, r1, next, todo])?;
            } else {
                state = y.reshape(&[t, mp])?;
            }
        }
        if mp > lay.cols {
            state = state.slice(1, 0, lay.cols)?;
        }
        Ok(state)
    }

    /// The dense `rows × cols` matrix, graph-connected to the cores.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let lay = &self.layout;
        let d = lay.cores();
        let [_, n0, m0, r1] = lay.core_shape(0);
        let mut lead = n0 * m0;
        let mut acc = self.cores[0].reshape(&[lead, r1])?;
        for k in 1..d {
            let [r0, n, m, r1] = lay.core_shape(k);
            acc = acc
                .matmul(&self.cores[k].reshape(&[r0, n * m * r1])?)?
                .reshape(&[lead * n * m, r1])?;
            lead *= n * m;
        }
        let mut interleaved = Vec::with_capacity(2 * d);
        for k in 0..d {
            interleaved.push(lay.row_factors[k]);
            interleaved.push(lay.col_factors[k]);
        }
        let axes: Vec<usize> = (0..d).map(|k| 2 * k).chain((0..d).map(|k| 2 * k + 1)).collect();
        let mut dense = acc
            .reshape(&interleaved)?
            .permute(&axes)?
            .reshape(&[lay.padded_rows(), lay.padded_cols()])?;
        if lay.padded_rows() > lay.rows {
            dense = dense.slice(0, 0, lay.rows)?;
        }
        if lay.padded_cols() > lay.cols {
            dense = dense.slice(1, 0, lay.cols)?;
        }
        Ok(dense)
    }
}

/// One resolved weight matrix, stored `[in, out]`.
#[derive(Debug, Clone)]
pub enum Weight {
    Dense(Tensor),
    /// `left · right` with `left: [in, r]`, `right: [r, out]`.
    LowRank { left: Tensor, right: Tensor },
    TensorTrain(TtMatrix),
}

impl Weight {
    pub fn in_dim(&self) -> usize {
        match self {
            Weight::Dense(w) => w.shape()[0],
            Weight::LowRank { left, .. } => left.shape()[0],
            Weight::TensorTrain(tt) => tt.layout.rows,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Weight::Dense(w) => w.shape()[w.rank() - 1],
            Weight::LowRank { right, .. } => right.shape()[1],
            Weight::TensorTrain(tt) => tt.layout.cols,
        }
    }

    /// `x · W` over the last axis of `x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last != self.in_dim() {
            return Err(Error::Tensor(squeeze_tensor::TensorError::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: vec![self.in_dim(), self.out_dim()],
            }));
        }
        match self {
            Weight::Dense(w) => Ok(x.matmul(w)?),
            Weight::LowRank { left, right } => Ok(x.matmul(left)?.matmul(right)?),
            Weight::TensorTrain(tt) => {
                let rows = x.numel() / last;
                let y = tt.apply(&x.reshape(&[rows, last])?)?;
                let mut out_shape = shape;
                *out_shape.last_mut().unwrap() = self.out_dim();
                Ok(y.reshape(&out_shape)?)
            }
        }
    }

    /// Row gather for embedding tables.
    pub fn lookup(&self, ids: &[usize], index_shape: &[usize]) -> Result<Tensor> {
        match self {
            Weight::Dense(w) => Ok(w.embedding(ids, index_shape)?),
            Weight::LowRank { left, right } => Ok(left.embedding(ids, index_shape)?.matmul(right)?),
            Weight::TensorTrain(tt) => Ok(tt.reconstruct()?.embedding(ids, index_shape)?),
        }
    }

    pub fn to_dense(&self) -> Result<Tensor> {
        match self {
            Weight::Dense(w) => Ok(w.clone()),
            Weight::LowRank { left, right } => Ok(left.matmul(right)?),
            Weight::TensorTrain(tt) => tt.reconstruct(),
        }
    }
}

/// All weights for one forward pass, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct ResolvedWeights {
    map: IndexMap<String, Weight>,
}

impl ResolvedWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, w: Weight) {
        self.map.insert(name.into(), w);
    }

    pub fn get(&self, name: &str) -> Result<&Weight> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no resolved weight `{name}`")))
    }

    /// A weight that must be dense (biases, norms, position table).
    pub fn dense(&self, name: &str) -> Result<&Tensor> {
        match self.get(name)? {
            Weight::Dense(t) => Ok(t),
            _ => Err(Error::Contract(format!("`{name}` must be dense"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Weight)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> TtLayout {
        TtLayout {
            rows: 5,
            cols: 6,
            row_factors: vec![1, 2, 1, 3],
            col_factors: vec![2, 1, 3, 1],
            ranks: vec![1, 2, 3, 2, 1],
        }
    }

    fn cores(lay: &TtLayout) -> Vec<Tensor> {
        (0..lay.cores())
            .map(|k| {
                let shape = lay.core_shape(k);
                let n: usize = shape.iter().product();
                let data = (0..n).map(|i| ((i * 7 + k * 3) % 11) as f64 / 5.0 - 1.0).collect();
                Tensor::new(data, &shape).unwrap()
            })
            .collect()
    }

    #[test]
    fn apply_agrees_with_reconstruct() {
        let lay = layout();
        let tt = TtMatrix::new(lay.clone(), cores(&lay)).unwrap();
        let dense = tt.reconstruct().unwrap();
        assert_eq!(dense.shape(), &[5, 6]);
        let x = Tensor::new((0..15).map(|i| (i as f64).sin()).collect(), &[3, 5]).unwrap();
        let a = tt.apply(&x).unwrap();
        let b = x.matmul(&dense).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_core_shape() {
        let lay = layout();
        let mut c = cores(&lay);
        c[1] = Tensor::zeros(&[2, 2, 1, 2]);
        assert!(TtMatrix::new(lay, c).is_err());
    }

    #[test]
    fn param_count_sums_cores() {
        let lay = layout();
        assert_eq!(lay.num_params(), 4 + 12 + 18 + 6);
    }
}
