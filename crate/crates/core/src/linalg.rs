//! Dense SVD on row-major buffers.

use nalgebra::DMatrix;

/// Thin SVD `A = U·diag(s)·Vᵀ` with singular values in descending order.
/// `u` is `rows × k`, `vt` is `k × cols`, both row-major, `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub vt: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Svd {
    pub fn k(&self) -> usize {
        self.s.len()
    }

    /// `U_r·diag(s_r)` (`rows × r`) and `V_rᵀ` (`r × cols`).
    pub fn truncate(&self, r: usize) -> (Vec<f64>, Vec<f64>) {
        let k = self.k();
        let mut left = Vec::with_capacity(self.rows * r);
        for i in 0..self.rows {
            for j in 0..r {
                left.push(self.u[i * k + j] * self.s[j]);
            }
        }
        let right = self.vt[..r * self.cols].to_vec();
        (left, right)
    }
}

pub fn svd(data: &[f64], rows: usize, cols: usize) -> Svd {
    assert_eq!(data.len(), rows * cols);
    let m = DMatrix::from_row_slice(rows, cols, data);
    let dec = m.svd(true, true);
    let u = dec.u.expect("requested U");
    let vt = dec.v_t.expect("requested Vᵀ");
    let k = rows.min(cols);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]));
    let mut out = Svd {
        u: Vec::with_capacity(rows * k),
        s: order.iter().map(|&j| dec.singular_values[j]).collect(),
        vt: Vec::with_capacity(k * cols),
        rows,
        cols,
    };
    for i in 0..rows {
        out.u.extend(order.iter().map(|&j| u[(i, j)]));
    }
    for &j in &order {
        out.vt.extend((0..cols).map(|c| vt[(j, c)]));
    }
    out
}
