//! Tensor-train baseline: teacher-width model whose linear weights and token
//! embedding are chains of trainable cores initialized by TT-SVD.

use indexmap::IndexMap;
use squeeze_tensor::Tensor;

use super::svd::factorized_weights;
use super::Student;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::factored::{ResolvedWeights, TtLayout, TtMatrix, Weight};
use crate::linalg;
use crate::model::TransformerModel;
use crate::params::ParamStore;

fn int_root_ceil(n: usize, parts: usize) -> usize {
    let mut q = 1usize;
    while q.pow(parts as u32) < n {
        q += 1;
    }
    q
}

/// Non-decreasing factorizations of `n` into `parts` factors, each ≤ `cap`.
fn factorizations(n: usize, parts: usize, min: usize, cap: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if parts == 1 {
        if n >= min && n <= cap {
            cur.push(n);
            out.push(cur.clone());
            cur.pop();
        }
        return;
    }
    let mut f = min;
    while f <= cap && f.pow(parts as u32) <= n {
        if n % f == 0 {
            cur.push(f);
            factorizations(n / f, parts - 1, f, cap, cur, out);
            cur.pop();
        }
        f += 1;
    }
}

/// Most balanced factorization: smallest largest factor, then largest
/// smallest factor.
fn most_balanced(n: usize, parts: usize, cap: usize) -> Option<Vec<usize>> {
    let mut all = Vec::new();
    factorizations(n, parts, 1, cap, &mut Vec::new(), &mut all);
    all.into_iter().min_by_key(|f| (f[parts - 1], usize::MAX - f[0]))
}

/// Splits a dimension into `parts` ascending factors whose product is `n`
/// when a reasonably balanced split exists, and otherwise the smallest
/// `N > n` that splits into factors no larger than `⌈n^(1/parts)⌉`.
pub fn factor_dim(n: usize, parts: usize) -> Vec<usize> {
    assert!(n > 0 && parts > 0, "factor_dim needs positive arguments");
    let q = int_root_ceil(n, parts);
    if let Some(f) = most_balanced(n, parts, 2 * q) {
        return f;
    }
    (n + 1..)
        .find_map(|padded| most_balanced(padded, parts, q))
        .expect("q^parts always factors")
}

/// Layout for a `rows × cols` matrix with internal ranks capped at `rank`
/// and by the sizes of the TT-SVD unfoldings.
pub fn tt_layout(rows: usize, cols: usize, rank: usize, cores: usize) -> Result<TtLayout> {
    if rank == 0 || cores < 2 {
        return Err(Error::Contract(format!("TT needs rank ≥ 1 and ≥ 2 cores, got {rank} and {cores}")));
    }
    let row_factors = factor_dim(rows, cores);
    let col_factors = factor_dim(cols, cores);
    let sizes: Vec<usize> = row_factors.iter().zip(&col_factors).map(|(n, m)| n * m).collect();
    let mut ranks = vec![1usize];
    for k in 0..cores - 1 {
        let tail: usize = sizes[k + 1..].iter().product();
        ranks.push(rank.min(ranks[k] * sizes[k]).min(tail));
    }
    ranks.push(1);
    Ok(TtLayout { rows, cols, row_factors, col_factors, ranks })
}

/// Cores of `w` (`rows × cols`, row-major) by successive truncated SVDs.
pub fn tt_svd(w: &[f64], layout: &TtLayout) -> Result<Vec<Tensor>> {
    let d = layout.cores();
    let (np, mp) = (layout.padded_rows(), layout.padded_cols());
    let sizes: Vec<usize> = (0..d).map(|k| layout.row_factors[k] * layout.col_factors[k]).collect();

    // Reorder the padded matrix to indices (i1, j1, i2, j2, …).
    let mut t = vec![0.0; np * mp];
    let mut ri = vec![0usize; d];
    let mut ci = vec![0usize; d];
    for r in 0..layout.rows {
        split_index(r, &layout.row_factors, &mut ri);
        for c in 0..layout.cols {
            split_index(c, &layout.col_factors, &mut ci);
            let mut idx = 0;
            for k in 0..d {
                idx = (idx * layout.row_factors[k] + ri[k]) * layout.col_factors[k] + ci[k];
            }
            t[idx] = w[r * layout.cols + c];
        }
    }

    let mut cores = Vec::with_capacity(d);
    let mut carry = t;
    for k in 0..d - 1 {
        let rows = layout.ranks[k] * sizes[k];
        let cols = carry.len() / rows;
        let dec = linalg::svd(&carry, rows, cols);
        let r = layout.ranks[k + 1];
        let kk = dec.k();
        let mut core = Vec::with_capacity(rows * r);
        for i in 0..rows {
            core.extend_from_slice(&dec.u[i * kk..i * kk + r]);
        }
        cores.push(Tensor::parameter(core, &layout.core_shape(k))?);
        carry = (0..r)
            .flat_map(|j| {
                let sj = dec.s[j];
                dec.vt[j * cols..(j + 1) * cols].iter().map(move |v| v * sj)
            })
            .collect();
    }
    cores.push(Tensor::parameter(carry, &layout.core_shape(d - 1))?);
    Ok(cores)
}

fn split_index(mut i: usize, radices: &[usize], out: &mut [usize]) {
    for k in (0..radices.len()).rev() {
        out[k] = i % radices[k];
        i /= radices[k];
    }
}

pub fn core_name(k: usize, weight: &str) -> String {
    format!("tt.core{k}.{weight}")
}

#[derive(Debug, Clone)]
pub struct TtStudent {
    config: ModelConfig,
    rank: usize,
    layouts: IndexMap<String, TtLayout>,
    params: ParamStore,
}

/// TT-SVD of every factorized teacher weight at internal rank ≤ `rank`.
pub fn tt_factorize(teacher: &TransformerModel, rank: usize, cores: usize) -> Result<TtStudent> {
    let cfg = &teacher.config;
    let factorized = factorized_weights(cfg);
    let mut layouts = IndexMap::new();
    let mut params = ParamStore::new();
    for spec in cfg.param_specs() {
        let src = teacher.params.get(&spec.name)?;
        if let Some((name, rows, cols)) = factorized.iter().find(|(n, _, _)| *n == spec.name) {
            let layout = tt_layout(*rows, *cols, rank, cores)?;
            for (k, core) in tt_svd(src.data(), &layout)?.into_iter().enumerate() {
                params.insert(core_name(k, name), core);
            }
            layouts.insert(name.clone(), layout);
        } else {
            params.insert(spec.name.clone(), src.to_parameter());
        }
    }
    Ok(TtStudent { config: cfg.clone(), rank, layouts, params })
}

impl TtStudent {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn layouts(&self) -> &IndexMap<String, TtLayout> {
        &self.layouts
    }
}

impl Student for TtStudent {
    fn label(&self) -> &'static str {
        "tt"
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn resolve(&self) -> Result<ResolvedWeights> {
        let mut w = ResolvedWeights::new();
        for spec in self.config.param_specs() {
            let weight = match self.layouts.get(&spec.name) {
                Some(layout) => {
                    let cores = (0..layout.cores())
                        .map(|k| self.params.get(&core_name(k, &spec.name)).cloned())
                        .collect::<Result<Vec<_>>>()?;
                    Weight::TensorTrain(TtMatrix::new(layout.clone(), cores)?)
                }
                None => Weight::Dense(self.params.get(&spec.name)?.clone()),
            };
            w.insert(spec.name, weight);
        }
        Ok(w)
    }

    fn trainables(&self) -> &ParamStore {
        &self.params
    }

    fn trainables_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn inference_param_count(&self) -> usize {
        self.params.num_elements()
    }
}
