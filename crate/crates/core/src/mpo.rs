//! Matrix product operator (MPO) decomposition of weight matrices.
//!
//! A matrix `W` of size `I x J` with `I = I_1 ... I_N` and `J = J_1 ... J_N`
//! is represented by a chain of order-4 cores, core `k` of shape
//! `[R_{k-1}, I_k, J_k, R_k]` with `R_0 = R_N = 1`. Contracting the chain over
//! its bond indices gives back `W` in interleaved index order
//! `(i_1, j_1, ..., i_N, j_N)`.
//!
//! The decomposition sweeps left to right: reshape the working matrix to
//! `[R_{k-1} I_k J_k, -1]`, take a thin SVD, keep the leading singular
//! triples as core `k` and carry `Σ Vᵀ` forward. With the full bond ranks
//! from [`max_ranks`] this is exact; with a threshold `R` each bond keeps
//! `min(R_k, R)` triples.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DotaError, Result};
use crate::exec::Exec;
use crate::linalg::thin_svd;
use crate::scalar::Scalar;
use crate::tensor::{contract, permute, relative_error, DenseTensor, IndexPermutation};

/// Default tensor shapes for common hidden dimensions.
pub const SHAPE_PRESETS: [(usize, [usize; 5]); 8] = [
    (50400, [5, 10, 14, 12, 6]),
    (14336, [4, 8, 8, 8, 7]),
    (11008, [4, 4, 43, 4, 4]),
    (768, [4, 4, 4, 4, 3]),
    (3072, [4, 4, 8, 6, 4]),
    (1024, [4, 4, 4, 4, 4]),
    (4096, [4, 4, 8, 8, 4]),
    (2304, [4, 4, 8, 6, 3]),
];

/// Preset factorization of a hidden dimension, if one is shipped.
pub fn preset_factors(dim: usize) -> Option<&'static [usize]> {
    SHAPE_PRESETS
        .iter()
        .find(|(d, _)| *d == dim)
        .map(|(_, f)| f.as_slice())
}

/// Factorizations `I = I_1 ... I_N` and `J = J_1 ... J_N` of a matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpoShape {
    in_factors: Vec<usize>,
    out_factors: Vec<usize>,
}

impl MpoShape {
    pub fn new(in_factors: Vec<usize>, out_factors: Vec<usize>) -> Result<Self> {
        if in_factors.is_empty() {
            return shape_err("an MPO needs at least one core");
        }
        if in_factors.len() != out_factors.len() {
            return shape_err(format!(
                "input factors {in_factors:?} and output factors {out_factors:?} differ in length"
            ));
        }
        if in_factors.iter().chain(&out_factors).any(|&f| f == 0) {
            return shape_err("factors must be positive");
        }
        Ok(Self {
            in_factors,
            out_factors,
        })
    }

    /// Uses the preset table for both dimensions.
    pub fn from_presets(rows: usize, cols: usize) -> Result<Self> {
        let lookup = |d: usize| {
            preset_factors(d).ok_or_else(|| {
                DotaError::Parameter(format!("no preset tensor shape for dimension {d}"))
            })
        };
        Self::new(lookup(rows)?.to_vec(), lookup(cols)?.to_vec())
    }

    pub fn in_factors(&self) -> &[usize] {
        &self.in_factors
    }

    pub fn out_factors(&self) -> &[usize] {
        &self.out_factors
    }

    /// Number of cores `N`.
    pub fn num_cores(&self) -> usize {
        self.in_factors.len()
    }

    pub fn rows(&self) -> usize {
        self.in_factors.iter().product()
    }

    pub fn cols(&self) -> usize {
        self.out_factors.iter().product()
    }

    /// `I_k J_k`, the size of the physical index pair of core `k` (zero-based).
    pub fn site_dim(&self, k: usize) -> usize {
        self.in_factors[k] * self.out_factors[k]
    }

    pub fn check_matrix(&self, rows: usize, cols: usize) -> Result<()> {
        if rows != self.rows() || cols != self.cols() {
            return shape_err(format!(
                "matrix is {rows}x{cols} but factors {:?} x {:?} give {}x{}",
                self.in_factors,
                self.out_factors,
                self.rows(),
                self.cols()
            ));
        }
        Ok(())
    }
}

/// Full bond ranks `R_0..R_N`: `R_k = min(prod_{n<=k} I_n J_n, prod_{n>k} I_n J_n)`.
pub fn max_ranks(shape: &MpoShape) -> Vec<usize> {
    let n = shape.num_cores();
    let dims: Vec<usize> = (0..n).map(|k| shape.site_dim(k)).collect();
    let mut ranks = vec![1; n + 1];
    for k in 1..n {
        let left = dims[..k].iter().fold(1usize, |a, &d| a.saturating_mul(d));
        let right = dims[k..].iter().fold(1usize, |a, &d| a.saturating_mul(d));
        ranks[k] = left.min(right);
    }
    ranks
}

/// Bond ranks after applying a uniform threshold: `min(R_k, R)`.
pub fn truncated_ranks(shape: &MpoShape, threshold: Option<usize>) -> Vec<usize> {
    let mut ranks = max_ranks(shape);
    if let Some(r) = threshold {
        let n = ranks.len() - 1;
        for rk in &mut ranks[1..n] {
            *rk = (*rk).min(r);
        }
    }
    ranks
}

/// Trainable parameter count `sum_k R_{k-1} I_k J_k R_k` for the given bond ranks.
///
/// Panics if `ranks` does not have `N + 1` entries.
pub fn param_count(shape: &MpoShape, ranks: &[usize]) -> usize {
    assert_eq!(
        ranks.len(),
        shape.num_cores() + 1,
        "need N + 1 bond ranks"
    );
    (0..shape.num_cores())
        .map(|k| ranks[k] * shape.site_dim(k) * ranks[k + 1])
        .sum()
}

fn interleave_perm(n: usize) -> IndexPermutation {
    let perm = (0..n).flat_map(|k| [k, n + k]).collect();
    IndexPermutation::new(perm).expect("interleaving is a permutation")
}

/// Tensorizes `w` to `[I_1..I_N, J_1..J_N]` and interleaves the modes to
/// `[I_1, J_1, ..., I_N, J_N]`. Also returns the permutation that undoes the
/// interleaving.
pub fn reorder_for_mpo<T: Scalar>(
    w: &DenseTensor<T>,
    shape: &MpoShape,
) -> Result<(DenseTensor<T>, IndexPermutation)> {
    let (rows, cols) = w.dims2()?;
    shape.check_matrix(rows, cols)?;
    let mut split = shape.in_factors.clone();
    split.extend_from_slice(&shape.out_factors);
    let tensor = w.clone().reshape(split)?;
    let perm = interleave_perm(shape.num_cores());
    Ok((permute(&tensor, &perm)?, perm.inverse()))
}

/// Inverse of [`reorder_for_mpo`]: interleaved order-2N tensor back to `I x J`.
pub fn unreorder<T: Scalar>(t: &DenseTensor<T>, shape: &MpoShape) -> Result<DenseTensor<T>> {
    let n = shape.num_cores();
    let expected: Vec<usize> = (0..n)
        .flat_map(|k| [shape.in_factors[k], shape.out_factors[k]])
        .collect();
    if t.shape() != expected.as_slice() {
        return shape_err(format!(
            "interleaved tensor has shape {:?}, expected {expected:?}",
            t.shape()
        ));
    }
    permute(t, &interleave_perm(n).inverse())?.reshape(vec![shape.rows(), shape.cols()])
}

/// An ordered chain of order-4 MPO cores.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreChain<T = f64> {
    cores: Vec<DenseTensor<T>>,
}

impl<T: Scalar> CoreChain<T> {
    pub fn new(cores: Vec<DenseTensor<T>>) -> Result<Self> {
        if cores.is_empty() {
            return shape_err("core chain is empty");
        }
        for (k, c) in cores.iter().enumerate() {
            if c.order() != 4 {
                return shape_err(format!("core {k} has order {}, expected 4", c.order()));
            }
        }
        if cores[0].shape()[0] != 1 || cores[cores.len() - 1].shape()[3] != 1 {
            return shape_err("boundary bond ranks must be 1");
        }
        for (k, pair) in cores.windows(2).enumerate() {
            if pair[0].shape()[3] != pair[1].shape()[0] {
                return shape_err(format!(
                    "bond {} mismatch: core {k} ends with rank {}, core {} starts with {}",
                    k + 1,
                    pair[0].shape()[3],
                    k + 1,
                    pair[1].shape()[0]
                ));
            }
        }
        Ok(Self { cores })
    }

    /// All-zero chain with the given bond ranks.
    pub fn zeros(shape: &MpoShape, ranks: &[usize]) -> Result<Self> {
        if ranks.len() != shape.num_cores() + 1 {
            return shape_err(format!(
                "{} bond ranks given for {} cores",
                ranks.len(),
                shape.num_cores()
            ));
        }
        let cores = (0..shape.num_cores())
            .map(|k| {
                DenseTensor::zeros(vec![
                    ranks[k],
                    shape.in_factors[k],
                    shape.out_factors[k],
                    ranks[k + 1],
                ])
            })
            .collect::<Result<_>>()?;
        Self::new(cores)
    }

    pub fn cores(&self) -> &[DenseTensor<T>] {
        &self.cores
    }

    pub fn into_cores(self) -> Vec<DenseTensor<T>> {
        self.cores
    }

    pub fn num_cores(&self) -> usize {
        self.cores.len()
    }

    /// Mutable access to the values of core `k`; its shape stays fixed.
    pub fn core_data_mut(&mut self, k: usize) -> &mut [T] {
        self.cores[k].data_mut()
    }

    /// Bond ranks `R_0..R_N`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.cores.iter().map(|c| c.shape()[0]).collect();
        r.push(self.cores[self.cores.len() - 1].shape()[3]);
        r
    }

    /// The factorization implied by the cores' physical dimensions.
    pub fn mpo_shape(&self) -> MpoShape {
        MpoShape {
            in_factors: self.cores.iter().map(|c| c.shape()[1]).collect(),
            out_factors: self.cores.iter().map(|c| c.shape()[2]).collect(),
        }
    }

    /// Total number of core elements.
    pub fn param_count(&self) -> usize {
        self.cores.iter().map(DenseTensor::len).sum()
    }

    pub fn check_shape(&self, shape: &MpoShape) -> Result<()> {
        let own = self.mpo_shape();
        if &own != shape {
            return shape_err(format!(
                "chain has factors {:?} x {:?}, expected {:?} x {:?}",
                own.in_factors, own.out_factors, shape.in_factors, shape.out_factors
            ));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> CoreChain<U> {
        CoreChain {
            cores: self.cores.iter().map(DenseTensor::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cores.iter().all(DenseTensor::is_finite)
    }
}

/// Decomposes `w` into an MPO core chain.
///
/// With `rank_threshold = None` all bonds keep their full rank and the chain
/// reproduces `w` up to rounding. With `Some(r)` bond `k` keeps
/// `min(R_k, r)` of the largest singular triples. All arithmetic runs in
/// f64; cores are cast back to `T`.
pub fn mpo_decompose<T: Scalar>(
    w: &DenseTensor<T>,
    shape: &MpoShape,
    rank_threshold: Option<usize>,
) -> Result<CoreChain<T>> {
    if rank_threshold == Some(0) {
        return Err(DotaError::Parameter("rank threshold must be at least 1".into()));
    }
    let (rows, cols) = w.dims2()?;
    shape.check_matrix(rows, cols)?;
    if !w.is_finite() {
        return Err(DotaError::Numeric("matrix contains non-finite values".into()));
    }
    if w.data().iter().all(|v| *v == T::zero()) {
        return CoreChain::zeros(shape, &vec![1; shape.num_cores() + 1]);
    }

    let bounds = truncated_ranks(shape, rank_threshold);
    let (interleaved, _) = reorder_for_mpo(&w.cast::<f64>(), shape)?;
    let total = interleaved.len();
    let mut work = interleaved.into_data();
    let mut left_rank = 1;
    let n = shape.num_cores();
    let mut cores = Vec::with_capacity(n);

    for k in 0..n - 1 {
        let m = left_rank * shape.site_dim(k);
        let svd = thin_svd(&DenseTensor::matrix(m, work.len() / m, work)?)?;
        let keep = bounds[k + 1].min(svd.s.len());
        let t = svd.truncate(keep)?;
        cores.push(t.u.reshape(vec![
            left_rank,
            shape.in_factors[k],
            shape.out_factors[k],
            keep,
        ])?);
        let (_, rest) = t.vt.dims2()?;
        let mut carry = t.vt.into_data();
        for (row, &s) in carry.chunks_mut(rest).zip(&t.s) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        work = carry;
        left_rank = keep;
    }
    debug_assert!(work.len() <= total);
    cores.push(DenseTensor::new(
        vec![left_rank, shape.in_factors[n - 1], shape.out_factors[n - 1], 1],
        work,
    )?);

    Ok(CoreChain::new(cores)?.cast())
}

/// Decomposes a batch of same-shaped matrices, one independent sweep each.
pub fn decompose_batch<T: Scalar>(
    matrices: &[DenseTensor<T>],
    shape: &MpoShape,
    rank_threshold: Option<usize>,
    exec: Exec,
) -> Vec<Result<CoreChain<T>>> {
    exec.map(matrices.iter().collect(), |w| {
        mpo_decompose(w, shape, rank_threshold)
    })
}

/// Contracts every bond of the chain, giving the interleaved order-2N tensor
/// `[I_1, J_1, ..., I_N, J_N]`.
pub fn contract_chain<T: Scalar>(chain: &CoreChain<T>) -> Result<DenseTensor<T>> {
    let cores = chain.cores();
    let mut acc = cores[0].clone();
    for core in &cores[1..] {
        acc = contract(&acc, core, 1)?;
    }
    // drop the two boundary bonds of size 1
    let shape = acc.shape()[1..acc.order() - 1].to_vec();
    acc.reshape(shape)
}

/// Rebuilds the `I x J` matrix represented by the chain.
pub fn reconstruct<T: Scalar>(chain: &CoreChain<T>, shape: &MpoShape) -> Result<DenseTensor<T>> {
    chain.check_shape(shape)?;
    unreorder(&contract_chain(chain)?, shape)
}

/// `‖w − reconstruct(chain)‖_F / ‖w‖_F`; zero when both are zero.
pub fn reconstruction_error<T: Scalar>(w: &DenseTensor<T>, chain: &CoreChain<T>) -> Result<f64> {
    let approx = reconstruct(chain, &chain.mpo_shape())?;
    relative_error(&approx, w)
}
